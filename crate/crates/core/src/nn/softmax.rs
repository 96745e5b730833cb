use ndarray::{Array2, ArrayViewMut1, Axis};

/// Numerically stable softmax of one vector, in place.
pub fn softmax_in_place(mut row: ArrayViewMut1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    row.mapv_inplace(|v| (v - max).exp());
    let sum = row.sum();
    row /= sum;
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for row in y.axis_iter_mut(Axis(0)) {
        softmax_in_place(row);
    }
    y
}

/// Gradient through a row-wise softmax given its output `y`.
pub fn softmax_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let dot = (y * dy).sum_axis(Axis(1)).insert_axis(Axis(1));
    y * &(dy - &dot)
}
