use ndarray::{Array1, Array2, Axis};

use crate::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Per-sample cross-entropy `-log softmax(z)[y]`, computed with log-sum-exp.
pub fn cross_entropy_per_sample<T: Scalar>(logits: &Array2<T>, targets: &[usize]) -> Array1<T> {
    assert_eq!(logits.nrows(), targets.len());
    Array1::from_iter(logits.axis_iter(Axis(0)).zip(targets).map(|(row, &t)| {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        lse - row[t]
    }))
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[usize]) -> (T, Array2<T>) {
    let n = T::lit(targets.len() as f64);
    let loss = cross_entropy_per_sample(logits, targets).sum() / n;
    let mut grad = softmax(logits);
    for (mut row, &t) in grad.axis_iter_mut(Axis(0)).zip(targets) {
        row[t] -= T::one();
        row.mapv_inplace(|v| v / n);
    }
    (loss, grad)
}

/// Index of the largest entry; ties resolve to the lower index.
pub fn argmax<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
