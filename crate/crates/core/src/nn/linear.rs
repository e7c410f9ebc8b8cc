use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use crate::Scalar;

/// Fully-connected layer, `y = x·Wᵀ + b` with `W` stored as (out, in).
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>) -> Self {
        assert_eq!(weight.nrows(), bias.len());
        Self { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = Array2::zeros((x.nrows(), self.out_features()));
        general_mat_mul(T::one(), x, &self.weight.t(), T::zero(), &mut y);
        y + &self.bias.view().insert_axis(Axis(0))
    }

    pub fn backward(
        &self,
        x: &Array2<T>,
        dy: &Array2<T>,
        need_dx: bool,
        grads: Option<(ArrayViewMut2<'_, T>, ArrayViewMut1<'_, T>)>,
    ) -> Option<Array2<T>> {
        if let Some((mut dw, mut db)) = grads {
            general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut dw);
            db += &dy.sum_axis(Axis(0));
        }
        need_dx.then(|| dy.dot(&self.weight))
    }
}

/// Inverted dropout: kept units are scaled by `1/(1-p)` at training time so
/// evaluation is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn mask<T: Scalar, R: Rng + ?Sized>(&self, shape: (usize, usize), rng: &mut R) -> Array2<T> {
        if self.p <= 0.0 {
            return Array2::ones(shape);
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        Array2::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < self.p {
                T::zero()
            } else {
                keep
            }
        })
    }
}
