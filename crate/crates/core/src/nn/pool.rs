use ndarray::{Array4, Axis};

use crate::Scalar;

/// Max pooling with floor output size. Padded cells never win the max.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    /// Returns the pooled tensor and, per output cell, the flat index of the
    /// winning input cell inside its `h*w` plane.
    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> (Array4<T>, Vec<u32>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self
            .output_hw(h, w)
            .unwrap_or_else(|| panic!("pool input {h}x{w} smaller than kernel {}", self.kernel));
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        let dst = out.as_slice_mut().unwrap();
        let pad = self.padding as isize;
        for plane in 0..n * c {
            let p = &src[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ki in 0..self.kernel {
                        let ih = (i * self.stride + ki) as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let iw = (j * self.stride + kj) as isize - pad;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = ih as usize * w + iw as usize;
                            // NaN propagates like torch: it always wins
                            if p[idx] > best || p[idx].is_nan() {
                                best = p[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    dst[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        (out, argmax)
    }

    pub fn backward<T: Scalar>(
        &self,
        input_dim: (usize, usize, usize, usize),
        argmax: &[u32],
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (n, c, h, w) = input_dim;
        let (_, _, oh, ow) = dy.dim();
        let dy = dy.as_standard_layout();
        let g = dy.as_slice().unwrap();
        let mut dx = Array4::<T>::zeros(input_dim);
        let d = dx.as_slice_mut().unwrap();
        for plane in 0..n * c {
            for o in 0..oh * ow {
                let k = plane * oh * ow + o;
                d[plane * h * w + argmax[k] as usize] += g[k];
            }
        }
        dx
    }
}

/// Adaptive average pooling to a fixed output grid, with the usual
/// `floor(i*H/out) .. ceil((i+1)*H/out)` bin edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptiveAvgPool2d {
    pub out_h: usize,
    pub out_w: usize,
}

fn bin(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self { out_h, out_w }
    }

    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        if (h, w) == (self.out_h, self.out_w) {
            return x.to_owned();
        }
        let mut out = Array4::<T>::zeros((n, c, self.out_h, self.out_w));
        for s in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(Axis(0), s);
                let plane = plane.index_axis(Axis(0), ch);
                for i in 0..self.out_h {
                    let (h0, h1) = bin(i, h, self.out_h);
                    for j in 0..self.out_w {
                        let (w0, w1) = bin(j, w, self.out_w);
                        let mut acc = T::zero();
                        for a in h0..h1 {
                            for b in w0..w1 {
                                acc += plane[[a, b]];
                            }
                        }
                        out[[s, ch, i, j]] = acc / T::lit(((h1 - h0) * (w1 - w0)) as f64);
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, input_dim: (usize, usize, usize, usize), dy: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = input_dim;
        if (h, w) == (self.out_h, self.out_w) {
            return dy.to_owned();
        }
        let mut dx = Array4::<T>::zeros(input_dim);
        for s in 0..n {
            for ch in 0..c {
                for i in 0..self.out_h {
                    let (h0, h1) = bin(i, h, self.out_h);
                    for j in 0..self.out_w {
                        let (w0, w1) = bin(j, w, self.out_w);
                        let share = dy[[s, ch, i, j]] / T::lit(((h1 - h0) * (w1 - w0)) as f64);
                        for a in h0..h1 {
                            for b in w0..w1 {
                                dx[[s, ch, a, b]] += share;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
