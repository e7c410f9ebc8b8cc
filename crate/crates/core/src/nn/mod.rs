//! Minimal CNN building blocks with explicit forward/backward passes.
//!
//! Layers never mutate themselves during a pass. A forward pass can record a
//! [`Cache`] per layer; the backward pass consumes those caches, returns the
//! input gradient and accumulates parameter gradients into caller-owned
//! buffers laid out in [`Layer::params`] order.

mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use conv::Conv2d;
pub use linear::{Dropout, Linear};
pub use loss::{argmax, cross_entropy, cross_entropy_per_sample, softmax};
pub use norm::{BatchNorm2d, BatchNormCache};
pub use pool::{AdaptiveAvgPool2d, MaxPool2d};

use ndarray::{Array4, ArrayD, ArrayViewD, ArrayViewMutD, Ix1, Ix4};

use crate::Scalar;

/// A layer paired with its weight-name prefix (e.g. `features.0`, `layer1.0.conv2`).
#[derive(Clone, Debug)]
pub struct Named<T> {
    pub name: String,
    pub layer: Layer<T>,
}

impl<T> Named<T> {
    pub fn new(name: impl Into<String>, layer: Layer<T>) -> Self {
        Self {
            name: name.into(),
            layer,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu,
    MaxPool(MaxPool2d),
    AdaptiveAvgPool(AdaptiveAvgPool2d),
    /// Residual block: `relu(main(x) + shortcut(x))`, identity shortcut when empty.
    Residual(Box<Residual<T>>),
}

#[derive(Clone, Debug)]
pub struct Residual<T> {
    pub main: Vec<Named<T>>,
    pub shortcut: Vec<Named<T>>,
}

#[derive(Clone, Debug)]
pub enum Cache<T> {
    Input(Array4<T>),
    BatchNorm(BatchNormCache<T>),
    /// ReLU output; its positive entries form the gradient mask.
    Relu(Array4<T>),
    MaxPool {
        input_dim: (usize, usize, usize, usize),
        argmax: Vec<u32>,
    },
    AvgPool {
        input_dim: (usize, usize, usize, usize),
    },
    Residual {
        main: Vec<Cache<T>>,
        shortcut: Vec<Cache<T>>,
        output: Array4<T>,
    },
}

fn view4<'a, T>(a: &'a mut ArrayD<T>) -> ndarray::ArrayViewMut4<'a, T> {
    a.view_mut().into_dimensionality::<Ix4>().expect("4-d grad buffer")
}

fn view1<'a, T>(a: &'a mut ArrayD<T>) -> ndarray::ArrayViewMut1<'a, T> {
    a.view_mut().into_dimensionality::<Ix1>().expect("1-d grad buffer")
}

impl<T: Scalar> Layer<T> {
    /// Channel/height/width after this layer, or `None` if the input is too small.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv(conv) => {
                if conv.in_channels() != c {
                    return None;
                }
                conv.output_hw(h, w).map(|(oh, ow)| (conv.out_channels(), oh, ow))
            }
            Layer::BatchNorm(bn) => (bn.channels() == c).then_some((c, h, w)),
            Layer::Relu => Some((c, h, w)),
            Layer::MaxPool(p) => p.output_hw(h, w).map(|(oh, ow)| (c, oh, ow)),
            Layer::AdaptiveAvgPool(p) => Some((c, p.out_h, p.out_w)),
            Layer::Residual(block) => {
                let main = seq_output_shape(&block.main, (c, h, w))?;
                let short = seq_output_shape(&block.shortcut, (c, h, w))?;
                (main == short).then_some(main)
            }
        }
    }

    /// `train` selects batch statistics in batch-norm layers; `record` keeps the
    /// values needed by [`Layer::backward`].
    pub fn forward(&self, x: Array4<T>, train: bool, record: bool) -> (Array4<T>, Option<Cache<T>>) {
        match self {
            Layer::Conv(conv) => {
                let y = conv.forward(&x);
                (y, record.then_some(Cache::Input(x)))
            }
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.forward(&x, train);
                (y, record.then_some(Cache::BatchNorm(cache)))
            }
            Layer::Relu => {
                let y = x.mapv_into(|v| if v > T::zero() { v } else { T::zero() });
                let cache = record.then(|| Cache::Relu(y.clone()));
                (y, cache)
            }
            Layer::MaxPool(pool) => {
                let (y, argmax) = pool.forward(&x);
                (
                    y,
                    record.then(|| Cache::MaxPool {
                        input_dim: x.dim(),
                        argmax,
                    }),
                )
            }
            Layer::AdaptiveAvgPool(pool) => {
                let y = pool.forward(&x);
                (y, record.then_some(Cache::AvgPool { input_dim: x.dim() }))
            }
            Layer::Residual(block) => {
                let (main_out, main_cache) = seq_forward(&block.main, x.clone(), train, record);
                let (short_out, short_cache) = if block.shortcut.is_empty() {
                    (x, Vec::new())
                } else {
                    seq_forward(&block.shortcut, x, train, record)
                };
                let y = (main_out + &short_out).mapv_into(|v| if v > T::zero() { v } else { T::zero() });
                let cache = record.then(|| Cache::Residual {
                    main: main_cache,
                    shortcut: short_cache,
                    output: y.clone(),
                });
                (y, cache)
            }
        }
    }

    /// `grads`, when given, must hold one buffer per entry of [`Layer::params`].
    pub fn backward(
        &self,
        cache: &Cache<T>,
        dy: Array4<T>,
        need_dx: bool,
        grads: Option<&mut [ArrayD<T>]>,
    ) -> Option<Array4<T>> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Input(x)) => {
                let g = grads.map(|g| {
                    let (w, rest) = g.split_first_mut().expect("conv weight grad");
                    (view4(w), rest.first_mut().map(view1))
                });
                conv.backward(x, &dy, need_dx, g)
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => {
                let g = grads.map(|g| {
                    let (gamma, beta) = g.split_at_mut(1);
                    (view1(&mut gamma[0]), view1(&mut beta[0]))
                });
                bn.backward(c, &dy, need_dx, g)
            }
            (Layer::Relu, Cache::Relu(y)) => {
                need_dx.then(|| relu_mask(dy, y))
            }
            (Layer::MaxPool(pool), Cache::MaxPool { input_dim, argmax }) => {
                need_dx.then(|| pool.backward(*input_dim, argmax, &dy))
            }
            (Layer::AdaptiveAvgPool(pool), Cache::AvgPool { input_dim }) => {
                need_dx.then(|| pool.backward(*input_dim, &dy))
            }
            (
                Layer::Residual(block),
                Cache::Residual {
                    main,
                    shortcut,
                    output,
                },
            ) => {
                let d = relu_mask(dy, output);
                let main_params = seq_param_count(&block.main);
                let (main_grads, short_grads) = match grads {
                    Some(g) => {
                        let (a, b) = g.split_at_mut(main_params);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                let dmain = seq_backward(&block.main, main, d.clone(), need_dx, main_grads);
                let dshort = if block.shortcut.is_empty() {
                    need_dx.then_some(d)
                } else {
                    seq_backward(&block.shortcut, shortcut, d, need_dx, short_grads)
                };
                match (dmain, dshort) {
                    (Some(a), Some(b)) => Some(a + &b),
                    _ => None,
                }
            }
            _ => panic!("cache does not belong to this layer"),
        }
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        match self {
            Layer::Conv(conv) => {
                let mut v = vec![conv.weight.view().into_dyn()];
                if let Some(b) = &conv.bias {
                    v.push(b.view().into_dyn());
                }
                v
            }
            Layer::BatchNorm(bn) => vec![bn.gamma.view().into_dyn(), bn.beta.view().into_dyn()],
            Layer::Residual(block) => block
                .main
                .iter()
                .chain(&block.shortcut)
                .flat_map(|n| n.layer.params())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        match self {
            Layer::Conv(conv) => {
                let mut v = vec![conv.weight.view_mut().into_dyn()];
                if let Some(b) = &mut conv.bias {
                    v.push(b.view_mut().into_dyn());
                }
                v
            }
            Layer::BatchNorm(bn) => vec![bn.gamma.view_mut().into_dyn(), bn.beta.view_mut().into_dyn()],
            Layer::Residual(block) => block
                .main
                .iter_mut()
                .chain(block.shortcut.iter_mut())
                .flat_map(|n| n.layer.params_mut())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(conv) => 1 + usize::from(conv.bias.is_some()),
            Layer::BatchNorm(_) => 2,
            Layer::Residual(block) => seq_param_count(&block.main) + seq_param_count(&block.shortcut),
            _ => 0,
        }
    }

    /// Parameters and persistent buffers under their full names.
    pub fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        let name = |leaf: &str| format!("{prefix}.{leaf}");
        match self {
            Layer::Conv(conv) => {
                out.push((name("weight"), conv.weight.view().into_dyn()));
                if let Some(b) = &conv.bias {
                    out.push((name("bias"), b.view().into_dyn()));
                }
            }
            Layer::BatchNorm(bn) => {
                out.push((name("weight"), bn.gamma.view().into_dyn()));
                out.push((name("bias"), bn.beta.view().into_dyn()));
                out.push((name("running_mean"), bn.running_mean.view().into_dyn()));
                out.push((name("running_var"), bn.running_var.view().into_dyn()));
            }
            Layer::Residual(block) => {
                for n in block.main.iter().chain(&block.shortcut) {
                    n.layer.named_tensors(&name(&n.name), out);
                }
            }
            _ => {}
        }
    }

    pub fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        let name = |leaf: &str| format!("{prefix}.{leaf}");
        match self {
            Layer::Conv(conv) => {
                out.push((name("weight"), conv.weight.view_mut().into_dyn()));
                if let Some(b) = &mut conv.bias {
                    out.push((name("bias"), b.view_mut().into_dyn()));
                }
            }
            Layer::BatchNorm(bn) => {
                out.push((name("weight"), bn.gamma.view_mut().into_dyn()));
                out.push((name("bias"), bn.beta.view_mut().into_dyn()));
                out.push((name("running_mean"), bn.running_mean.view_mut().into_dyn()));
                out.push((name("running_var"), bn.running_var.view_mut().into_dyn()));
            }
            Layer::Residual(block) => {
                for n in block.main.iter_mut().chain(block.shortcut.iter_mut()) {
                    n.layer.named_tensors_mut(&name(&n.name), out);
                }
            }
            _ => {}
        }
    }

    pub fn update_running_stats(&mut self, cache: &Cache<T>) {
        match (self, cache) {
            (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => bn.update_running_stats(c),
            (Layer::Residual(block), Cache::Residual { main, shortcut, .. }) => {
                seq_update_running_stats(&mut block.main, main);
                seq_update_running_stats(&mut block.shortcut, shortcut);
            }
            _ => {}
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv(_))
    }

    /// Number of convolution layers, including those inside residual blocks.
    pub fn conv_count(&self) -> usize {
        match self {
            Layer::Conv(_) => 1,
            Layer::Residual(block) => block
                .main
                .iter()
                .chain(&block.shortcut)
                .map(|n| n.layer.conv_count())
                .sum(),
            _ => 0,
        }
    }
}

fn relu_mask<T: Scalar>(mut dy: Array4<T>, y: &Array4<T>) -> Array4<T> {
    dy.zip_mut_with(y, |d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dy
}

pub fn seq_output_shape<T: Scalar>(
    layers: &[Named<T>],
    mut shape: (usize, usize, usize),
) -> Option<(usize, usize, usize)> {
    for n in layers {
        shape = n.layer.output_shape(shape)?;
    }
    Some(shape)
}

pub fn seq_forward<T: Scalar>(
    layers: &[Named<T>],
    mut x: Array4<T>,
    train: bool,
    record: bool,
) -> (Array4<T>, Vec<Cache<T>>) {
    let mut caches = Vec::with_capacity(if record { layers.len() } else { 0 });
    for n in layers {
        let (y, c) = n.layer.forward(x, train, record);
        if let Some(c) = c {
            caches.push(c);
        }
        x = y;
    }
    (x, caches)
}

/// Backward through a recorded sequence. The input gradient of the first layer
/// is only computed when `need_dx` is set.
pub fn seq_backward<T: Scalar>(
    layers: &[Named<T>],
    caches: &[Cache<T>],
    mut dy: Array4<T>,
    need_dx: bool,
    mut grads: Option<&mut [ArrayD<T>]>,
) -> Option<Array4<T>> {
    assert_eq!(layers.len(), caches.len(), "sequence was not recorded");
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for n in layers {
        offsets.push(acc);
        acc += n.layer.param_count();
    }
    for (i, (n, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let count = n.layer.param_count();
        let g = grads.as_deref_mut().map(|g| &mut g[offsets[i]..offsets[i] + count]);
        let want_dx = i > 0 || need_dx;
        match n.layer.backward(cache, dy, want_dx, g) {
            Some(d) => dy = d,
            None => return None,
        }
    }
    Some(dy)
}

pub fn seq_param_count<T: Scalar>(layers: &[Named<T>]) -> usize {
    layers.iter().map(|n| n.layer.param_count()).sum()
}

pub fn seq_update_running_stats<T: Scalar>(layers: &mut [Named<T>], caches: &[Cache<T>]) {
    for (n, c) in layers.iter_mut().zip(caches) {
        n.layer.update_running_stats(c);
    }
}
