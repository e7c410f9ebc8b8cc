use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut1, ArrayViewMut4, Axis};

use crate::Scalar;

/// 2-D convolution over NCHW tensors with square kernels, symmetric zero padding
/// and a single stride for both axes. Lowered to GEMM through im2col, one
/// sample at a time to bound the column buffer.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// (out_channels, in_channels, kernel, kernel)
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(weight: Array4<T>, bias: Option<Array1<T>>, stride: usize, padding: usize) -> Self {
        assert_eq!(weight.dim().2, weight.dim().3, "only square kernels are supported");
        assert!(stride >= 1);
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Self::new(
            Array4::zeros((out_ch, in_ch, kernel, kernel)),
            bias.then(|| Array1::zeros(out_ch)),
            stride,
            padding,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    /// Spatial output size, or `None` when the padded input is smaller than the kernel.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return None;
        }
        Some(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (out_h, out_w) = self
            .output_hw(h, w)
            .unwrap_or_else(|| panic!("conv input {h}x{w} smaller than kernel {}", self.kernel()));
        Geometry {
            channels: self.in_channels(),
            height: h,
            width: w,
            kernel: self.kernel(),
            stride: self.stride,
            padding: self.padding,
            out_h,
            out_w,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("conv weight is contiguous")
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channel mismatch");
        let g = self.geometry(h, w);
        let x = x.as_standard_layout();
        let cout = self.out_channels();
        let positions = g.out_h * g.out_w;
        let rows = c * g.kernel * g.kernel;
        let wm = self.weight_matrix();

        let mut out = Array4::<T>::zeros((n, cout, g.out_h, g.out_w));
        let mut cols = Array2::<T>::zeros((if g.is_pointwise() { 0 } else { rows }, positions));
        for s in 0..n {
            let xs = x.index_axis(Axis(0), s);
            let mut os = out
                .index_axis_mut(Axis(0), s)
                .into_shape_with_order((cout, positions))
                .expect("fresh output is contiguous");
            if g.is_pointwise() {
                let xm = xs.into_shape_with_order((c, h * w)).expect("standard layout");
                general_mat_mul(T::one(), &wm, &xm, T::zero(), &mut os);
            } else {
                im2col(xs.as_slice().expect("standard layout"), &g, cols.as_slice_mut().unwrap());
                general_mat_mul(T::one(), &wm, &cols, T::zero(), &mut os);
            }
            if let Some(b) = &self.bias {
                os += &b.view().insert_axis(Axis(1));
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grads` (when given) and returns the
    /// input gradient when `need_dx` is set. `x` is the input seen by `forward`.
    pub fn backward(
        &self,
        x: &Array4<T>,
        dy: &Array4<T>,
        need_dx: bool,
        grads: Option<(ArrayViewMut4<'_, T>, Option<ArrayViewMut1<'_, T>>)>,
    ) -> Option<Array4<T>> {
        let (n, c, h, w) = x.dim();
        let g = self.geometry(h, w);
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let cout = self.out_channels();
        let positions = g.out_h * g.out_w;
        let rows = c * g.kernel * g.kernel;
        let wm = self.weight_matrix();

        let (mut dw, mut db) = match grads {
            Some((dw, db)) => {
                let dwm = dw
                    .into_shape_with_order((cout, rows))
                    .expect("grad buffer is contiguous");
                (Some(dwm), db)
            }
            None => (None, None),
        };

        let mut dx = need_dx.then(|| Array4::<T>::zeros((n, c, h, w)));
        let mut cols = Array2::<T>::zeros((rows, positions));
        let mut dcols = Array2::<T>::zeros((rows, positions));
        for s in 0..n {
            let dys = dy
                .index_axis(Axis(0), s)
                .into_shape_with_order((cout, positions))
                .expect("standard layout");
            if let Some(dwm) = dw.as_mut() {
                let xs = x.index_axis(Axis(0), s);
                if g.is_pointwise() {
                    let xm = xs.into_shape_with_order((c, h * w)).expect("standard layout");
                    general_mat_mul(T::one(), &dys, &xm.t(), T::one(), dwm);
                } else {
                    im2col(xs.as_slice().expect("standard layout"), &g, cols.as_slice_mut().unwrap());
                    general_mat_mul(T::one(), &dys, &cols.t(), T::one(), dwm);
                }
            }
            if let Some(db) = db.as_mut() {
                *db += &dys.sum_axis(Axis(1));
            }
            if let Some(dx) = dx.as_mut() {
                let mut dxs = dx.index_axis_mut(Axis(0), s);
                if g.is_pointwise() {
                    let mut dxm = dxs
                        .into_shape_with_order((c, h * w))
                        .expect("fresh buffer is contiguous");
                    general_mat_mul(T::one(), &wm.t(), &dys, T::zero(), &mut dxm);
                } else {
                    general_mat_mul(T::one(), &wm.t(), &dys, T::zero(), &mut dcols);
                    col2im(dcols.as_slice().unwrap(), &g, dxs.as_slice_mut().unwrap());
                }
            }
        }
        dx
    }
}

/// Column layout: row `(c*k + ki)*k + kj`, column `oh*out_w + ow`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let positions = g.out_h * g.out_w;
    let pad = g.padding as isize;
    for ci in 0..g.channels {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = ((ci * g.kernel + ki) * g.kernel + kj) * positions;
                for oh in 0..g.out_h {
                    let dst = &mut cols[row + oh * g.out_w..row + (oh + 1) * g.out_w];
                    let ih = (oh * g.stride + ki) as isize - pad;
                    if ih < 0 || ih >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - pad;
                        *d = if iw >= 0 && iw < g.width as isize {
                            src[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let positions = g.out_h * g.out_w;
    let pad = g.padding as isize;
    dx.fill(T::zero());
    for ci in 0..g.channels {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = ((ci * g.kernel + ki) * g.kernel + kj) * positions;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let src = &cols[row + oh * g.out_w..row + (oh + 1) * g.out_w];
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - pad;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
