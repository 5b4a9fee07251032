//! Per-part ridge-regression target classifiers.
//!
//! Part `i` gets its own weight vector, fitted in closed form on the
//! short-term features of observations where that part is visible:
//!
//! ```text
//! W_i = (X_iᵀ X_i + λ I)⁻¹ X_iᵀ y
//! ```
//!
//! The target confidence of a new observation is the average of the part
//! scores `W_i · F_i` over parts that are visible and have a trained model.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::domain::PartFeatures;
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Training rows for every part.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    embed: usize,
    rows: Vec<Vec<Array1<f64>>>,
    labels: Vec<Vec<f64>>,
}

impl DesignBlock {
    pub fn new(parts: usize, embed: usize) -> Self {
        Self {
            embed,
            rows: vec![Vec::new(); parts],
            labels: vec![Vec::new(); parts],
        }
    }

    /// Rows from every visible part of `features`, labeled `label`.
    pub fn from_features<'a>(
        samples: impl IntoIterator<Item = (&'a PartFeatures, u8)>,
        parts: usize,
        embed: usize,
    ) -> Self {
        let mut block = Self::new(parts, embed);
        for (f, label) in samples {
            for k in f.vis.visible() {
                block.push(k, f.row(k).to_owned(), label as f64);
            }
        }
        block
    }

    pub fn push(&mut self, part: usize, row: Array1<f64>, label: f64) {
        assert_eq!(row.len(), self.embed, "row width must match embedding size");
        self.rows[part].push(row);
        self.labels[part].push(label);
    }

    pub fn parts(&self) -> usize {
        self.rows.len()
    }

    pub fn embed(&self) -> usize {
        self.embed
    }

    pub fn rows(&self, part: usize) -> usize {
        self.rows[part].len()
    }

    /// X_i as a dense matrix and y_i.
    pub fn part_system(&self, part: usize) -> (Array2<f64>, Array1<f64>) {
        let rows = &self.rows[part];
        let mut x = Array2::zeros((rows.len(), self.embed));
        for (r, row) in rows.iter().enumerate() {
            x.row_mut(r).assign(row);
        }
        (x, Array1::from(self.labels[part].clone()))
    }
}

/// N per-part weight vectors plus the regularizer they were fitted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeClassifier {
    /// N x C; row i is W_i, zero when part i is untrained.
    pub weights: Array2<f64>,
    pub lambda: f64,
    pub trained: Vec<bool>,
}

impl RidgeClassifier {
    /// A classifier with no trained part; every confidence query fails.
    pub fn untrained(parts: usize, embed: usize, lambda: f64) -> Self {
        Self {
            weights: Array2::zeros((parts, embed)),
            lambda,
            trained: vec![false; parts],
        }
    }

    /// Closed-form ridge fit of every part with at least one row.
    pub fn fit(block: &DesignBlock, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        let mut clf = Self::untrained(block.parts(), block.embed(), lambda);
        for part in 0..block.parts() {
            if block.rows(part) == 0 {
                continue;
            }
            let (x, y) = block.part_system(part);
            if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    layer: "ridge design",
                });
            }
            let mut gram = x.t().dot(&x);
            for d in 0..gram.nrows() {
                gram[[d, d]] += lambda;
            }
            let rhs = x.t().dot(&y);
            let w = cholesky_solve(gram, rhs)?;
            clf.weights.row_mut(part).assign(&w);
            clf.trained[part] = true;
        }
        Ok(clf)
    }

    /// Score of part `k` alone: `W_k · F_k`.
    pub fn part_score(&self, f: &PartFeatures, k: usize) -> f64 {
        self.weights.row(k).dot(&f.row(k))
    }

    /// Visibility-weighted mean of the trained part scores.
    pub fn confidence(&self, f: &PartFeatures) -> Result<f64> {
        let mut num = 0.0;
        let mut den = 0usize;
        for k in f.vis.visible() {
            if self.trained[k] {
                num += self.part_score(f, k);
                den += 1;
            }
        }
        if den == 0 {
            return Err(Error::ConfidenceUnavailable);
        }
        Ok(num / den as f64)
    }

    pub fn is_trained(&self) -> bool {
        self.trained.iter().any(|&t| t)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn cholesky_solve(mut a: Array2<f64>, b: Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    // In-place lower factor: A = L Lᵀ.
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(Error::Numeric {
                layer: "cholesky factorization",
            });
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / d;
        }
    }
    // L z = b
    let mut z = b;
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= a[[i, k]] * z[k];
        }
        z[i] = s / a[[i, i]];
    }
    // Lᵀ x = z
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= a[[k, i]] * z[k];
        }
        z[i] = s / a[[i, i]];
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::VisibilityMask;
    use ndarray::array;

    fn feats(f: Array2<f64>, vis: &[bool]) -> PartFeatures {
        PartFeatures::new(f, VisibilityMask::new(vis.to_vec())).unwrap()
    }

    #[test]
    fn two_by_two_hand_solution() {
        let mut block = DesignBlock::new(1, 2);
        block.push(0, array![1.0, 0.0], 1.0);
        block.push(0, array![0.0, 1.0], 0.0);
        let clf = RidgeClassifier::fit(&block, 1.0).unwrap();
        let w = clf.weights.row(0);
        assert!((w[0] - 0.5).abs() < 1e-15 && w[1].abs() < 1e-15, "{w}");
        assert!(clf.trained[0]);
    }

    #[test]
    fn empty_part_stays_untrained() {
        let mut block = DesignBlock::new(2, 2);
        block.push(0, array![1.0, 2.0], 1.0);
        let clf = RidgeClassifier::fit(&block, 1.0).unwrap();
        assert!(!clf.trained[1]);
        assert_eq!(clf.weights.row(1), array![0.0, 0.0]);
    }

    #[test]
    fn lambda_must_be_positive() {
        let block = DesignBlock::new(1, 2);
        assert!(RidgeClassifier::fit(&block, 0.0).is_err());
        assert!(RidgeClassifier::fit(&block, -1.0).is_err());
    }

    fn with_scores(scores: &[f64]) -> (RidgeClassifier, PartFeatures) {
        // 1-d features equal to the score, unit weights.
        let n = scores.len();
        let clf = RidgeClassifier {
            weights: Array2::ones((n, 1)),
            lambda: 1.0,
            trained: vec![true; n],
        };
        let f = Array2::from_shape_vec((n, 1), scores.to_vec()).unwrap();
        (clf, feats(f, &vec![true; n]))
    }

    #[test]
    fn confidence_is_mean_of_visible_scores() {
        let (clf, f) = with_scores(&[0.8, 0.4]);
        assert!((clf.confidence(&f).unwrap() - 0.6).abs() < 1e-15);

        let masked = PartFeatures::new(f.f.clone(), VisibilityMask::new(vec![true, false])).unwrap();
        assert_eq!(clf.confidence(&masked).unwrap(), 0.8);
    }

    #[test]
    fn constant_scores_give_constant_confidence() {
        let (clf, f) = with_scores(&[0.3, 0.3, 0.3, 0.3]);
        for mask in [
            vec![true, false, false, false],
            vec![false, true, true, false],
            vec![true, true, true, true],
        ] {
            let m = PartFeatures::new(f.f.clone(), VisibilityMask::new(mask)).unwrap();
            assert!((clf.confidence(&m).unwrap() - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn untrained_parts_are_excluded() {
        let (mut clf, f) = with_scores(&[0.9, 0.1]);
        clf.trained[1] = false;
        assert_eq!(clf.confidence(&f).unwrap(), 0.9);
        clf.trained[0] = false;
        assert!(matches!(
            clf.confidence(&f),
            Err(Error::ConfidenceUnavailable)
        ));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky_solve(a, array![1.0, 1.0]).is_err());
    }
}
