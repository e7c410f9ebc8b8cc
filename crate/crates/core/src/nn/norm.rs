use ndarray::{Array1, Array4, ArrayViewMut1, Axis};

use crate::Scalar;

/// Per-channel batch normalization over NCHW tensors.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Values kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub(crate) x_hat: Array4<T>,
    pub(crate) inv_std: Array1<T>,
    pub(crate) batch_stats: bool,
    /// Batch mean and unbiased variance, used to update running statistics.
    pub(crate) mean: Array1<T>,
    pub(crate) var_unbiased: Array1<T>,
}

fn bcast<T: Scalar>(v: &Array1<T>) -> ndarray::ArrayView4<'_, T> {
    v.view()
        .insert_axis(Axis(0))
        .insert_axis(Axis(2))
        .insert_axis(Axis(3))
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `batch_stats` selects training behaviour (normalize with the batch's own
    /// statistics) versus evaluation behaviour (running statistics).
    pub fn forward(&self, x: &Array4<T>, batch_stats: bool) -> (Array4<T>, BatchNormCache<T>) {
        let (n, c, h, w) = x.dim();
        let count = n * h * w;
        let eps = T::lit(self.eps);
        let (mean, var) = if batch_stats {
            let mean = x
                .mean_axis(Axis(3))
                .and_then(|m| m.mean_axis(Axis(2)))
                .and_then(|m| m.mean_axis(Axis(0)))
                .expect("non-empty batch");
            let centered = x - &bcast(&mean);
            let var = (&centered * &centered)
                .mean_axis(Axis(3))
                .and_then(|m| m.mean_axis(Axis(2)))
                .and_then(|m| m.mean_axis(Axis(0)))
                .expect("non-empty batch");
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let x_hat = (x - &bcast(&mean)) * &bcast(&inv_std);
        let y = &x_hat * &bcast(&self.gamma) + &bcast(&self.beta);
        let var_unbiased = if count > 1 {
            var.mapv(|v| v * T::lit(count as f64 / (count - 1) as f64))
        } else {
            var.clone()
        };
        debug_assert_eq!(c, self.channels());
        (
            y,
            BatchNormCache {
                x_hat,
                inv_std,
                batch_stats,
                mean,
                var_unbiased,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        dy: &Array4<T>,
        need_dx: bool,
        grads: Option<(ArrayViewMut1<'_, T>, ArrayViewMut1<'_, T>)>,
    ) -> Option<Array4<T>> {
        let (n, _, h, w) = dy.dim();
        let sum_c = |a: &Array4<T>| a.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        let dbeta = sum_c(dy);
        let dgamma = sum_c(&(dy * &cache.x_hat));
        let dx = need_dx.then(|| {
            let scale = &self.gamma * &cache.inv_std;
            if cache.batch_stats {
                let m = T::lit((n * h * w) as f64);
                let term = dy.mapv(|v| v * m) - &bcast(&dbeta) - &cache.x_hat * &bcast(&dgamma);
                term * &bcast(&scale.mapv(|s| s / m))
            } else {
                dy * &bcast(&scale)
            }
        });
        if let Some((mut dg, mut db)) = grads {
            dg += &dgamma;
            db += &dbeta;
        }
        dx
    }

    pub fn update_running_stats(&mut self, cache: &BatchNormCache<T>) {
        if !cache.batch_stats {
            return;
        }
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        self.running_mean = self.running_mean.mapv(|v| v * keep) + cache.mean.mapv(|v| v * m);
        self.running_var = self.running_var.mapv(|v| v * keep) + cache.var_unbiased.mapv(|v| v * m);
    }
}
