//! Small dense-vector helpers shared by the store, embedders and scorers.

/// Dot product of two `f32` slices, accumulated in `f64` left to right.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc as f32
}

pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt()
}

/// Unit-length copy of `v`, or `None` when `v` is zero or not finite.
pub fn unit(v: &[f32]) -> Option<Vec<f32>> {
    unit_f64(v.iter().map(|x| f64::from(*x)))
}

pub fn unit_f64(v: impl IntoIterator<Item = f64> + Clone) -> Option<Vec<f32>> {
    let mut sq = 0.0f64;
    for x in v.clone() {
        if !x.is_finite() {
            return None;
        }
        sq += x * x;
    }
    let n = sq.sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.into_iter().map(|x| (x / n) as f32).collect())
}
