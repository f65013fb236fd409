//! Shared numerical plumbing for the regressors.

use std::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

/// Per-column affine standardization `z = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

/// Below this standard deviation a column counts as constant.
pub const MIN_SCALE: f64 = 1e-12;

impl Standardizer {
    /// Column means and sample standard deviations of `rows`. Constant
    /// columns get scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Standardizer {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut means = vec![0.0; d];
        for r in rows {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut scales = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                scales[j] += (r[j] - means[j]).powi(2);
            }
        }
        for s in &mut scales {
            *s = if rows.len() > 1 { (*s / (n - 1.0)).sqrt() } else { 0.0 };
            if !(*s > MIN_SCALE) {
                *s = 1.0;
            }
        }
        Standardizer { means, scales }
    }

    /// Standardizer of a single column of values.
    pub fn fit_values(values: &[f64]) -> Standardizer {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        Standardizer::fit(&rows)
    }

    pub fn identity(d: usize) -> Standardizer {
        Standardizer { means: vec![0.0; d], scales: vec![1.0; d] }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.means).zip(&self.scales).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.means).zip(&self.scales).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn transform_one(&self, v: f64) -> f64 {
        (v - self.means[0]) / self.scales[0]
    }

    pub fn inverse_one(&self, z: f64) -> f64 {
        z * self.scales[0] + self.means[0]
    }
}

/// Sample standard deviation of each column (0 for a single row).
pub fn column_std(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    (0..d)
        .map(|j| {
            if rows.len() < 2 {
                return 0.0;
            }
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect()
}

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

/// Cholesky factorization of `a`, retrying with diagonal jitter
/// `1e-10, 1e-9, …, 1e-4` when `a` is not numerically positive definite.
/// Returns the factor and the jitter that was added (0 if none).
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Some((c, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Some((c, jitter));
        }
        jitter *= 10.0;
    }
    None
}

/// Lexicographic total order on `(row, target)`, used to make training
/// independent of the order rows were supplied in.
pub fn canonical_order(x: &[Vec<f64>], y: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| {
        for (u, v) in x[a].iter().zip(&x[b]) {
            match u.total_cmp(v) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        y[a].total_cmp(&y[b]).then(a.cmp(&b))
    });
    idx
}

pub fn reorder<T: Clone>(v: &[T], order: &[usize]) -> Vec<T> {
    order.iter().map(|&i| v[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn standardizer_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..20)) {
            let s = Standardizer::fit(&rows);
            for r in &rows {
                let back = s.inverse(&s.transform(r));
                for (a, b) in back.iter().zip(r) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn constant_column_gets_unit_scale() {
        let s = Standardizer::fit(&[vec![2.0, 1.0], vec![2.0, 3.0]]);
        assert_eq!(s.scales[0], 1.0);
        assert_eq!(s.means, vec![2.0, 2.0]);
        assert!((s.scales[1] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let (_, jitter) = cholesky_with_jitter(&a).unwrap();
        assert!(jitter > 0.0 && jitter <= JITTER_MAX);
        let neg = DMatrix::from_diagonal_element(2, 2, -1.0);
        assert!(cholesky_with_jitter(&neg).is_none());
    }

    #[test]
    fn canonical_order_ignores_input_order() {
        let x = vec![vec![2.0], vec![1.0], vec![1.0]];
        let y = vec![0.0, 5.0, 4.0];
        assert_eq!(canonical_order(&x, &y), vec![2, 1, 0]);
    }
}
