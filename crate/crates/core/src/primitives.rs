//! Embedding and probability types shared by every stage of the pipeline.
//!
//! All three types validate their invariants at construction and are
//! immutable afterwards, so they can be shared freely across threads.

use std::ops::Index;

use crate::error::{Error, Result};

/// Probabilities below this value are clamped inside logarithms, which
/// enforces the `0 · ln 0 = 0` convention.
pub const PROB_FLOOR: f64 = 1e-12;

const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Normalizes `values` to unit length. Rejects empty, zero and non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = checked_norm(&values)?;
        Ok(UnitVector(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Like [`UnitVector::new`], but keeps `values` untouched when their norm
    /// is already within `tolerance` of one. Returns the original norm.
    ///
    /// Used for vectors loaded from single-precision files so that a load
    /// followed by a save reproduces the same bytes.
    pub fn with_norm_tolerance(values: Vec<f64>, tolerance: f64) -> Result<(Self, f64)> {
        let norm = checked_norm(&values)?;
        if (norm - 1.0).abs() <= tolerance {
            Ok((UnitVector(values), norm))
        } else {
            Ok((UnitVector(values.into_iter().map(|v| v / norm).collect()), norm))
        }
    }

    /// Normalized arithmetic mean of `vectors`. `None` when the mean is
    /// shorter than `1e-9` (e.g. antipodal inputs) or the list is empty.
    pub fn mean_of(vectors: &[UnitVector]) -> Option<UnitVector> {
        let first = vectors.first()?;
        let mut acc = vec![0.0; first.dim()];
        for v in vectors {
            for (a, x) in acc.iter_mut().zip(v.as_slice()) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let norm = l2_norm(&acc);
        if norm < 1e-9 {
            return None;
        }
        Some(UnitVector(acc.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn bitwise_eq(&self, other: &UnitVector) -> bool {
        bits_eq(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for UnitVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn checked_norm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("embedding has zero dimensions".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embedding has non-finite component".into()));
    }
    let norm = l2_norm(values);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize vector of norm {norm}")));
    }
    Ok(norm)
}

pub(crate) fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// A discrete probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("probability vector is empty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!("invalid probability entry {bad}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::Numeric(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbVector(values))
    }

    /// Scales nonnegative `masses` so they sum to one.
    pub fn normalized(masses: Vec<f64>) -> Result<Self> {
        let sum: f64 = masses.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::Numeric(format!("cannot normalize masses summing to {sum}")));
        }
        ProbVector::new(masses.into_iter().map(|m| m / sum).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("uniform distribution over zero items".into()));
        }
        Ok(ProbVector(vec![1.0 / n as f64; n]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    pub fn bitwise_eq(&self, other: &ProbVector) -> bool {
        bits_eq(&self.0, &other.0)
    }
}

impl Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Index of the largest value, lowest index on ties. Panics on empty input.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Dense row-major matrix of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput(format!("matrix shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(rows * cols, data.len(), "matrix storage"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix has non-finite entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::from_rows(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Matrix::from_rows(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// Frobenius inner product `Σ_ij self_ij · other_ij`.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(self.data.len(), other.data.len(), "frobenius product"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim(self.cols, v.len(), "matrix-vector product"));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        Matrix::from_rows(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::dim(u.dim(), v.dim(), "cosine similarity"));
    }
    let dot: f64 = u.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Shifted softmax of `scores / temperature`.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<ProbVector> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("softmax over zero scores".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("softmax over non-finite score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / sum).collect()))
}

/// `Σ p ln p` with the logarithm floored at [`PROB_FLOOR`]. Zero for one-hot
/// inputs, most negative for the uniform distribution.
pub fn neg_entropy_score(p: &ProbVector) -> f64 {
    p.as_slice().iter().map(|&pi| pi * pi.max(PROB_FLOOR).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uv(v: &[f64]) -> UnitVector {
        UnitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let x = uv(&[1.0, 0.0]);
        assert_eq!(cosine_similarity(&x, &x).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&x, &uv(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&x, &uv(&[-1.0, 0.0])).unwrap(), -1.0);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        let err = cosine_similarity(&uv(&[1.0, 0.0]), &uv(&[1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn unit_vector_rejects_zero_and_nan() {
        assert!(UnitVector::new(vec![0.0, 0.0]).is_err());
        assert!(UnitVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(UnitVector::new(vec![]).is_err());
        let v = uv(&[3.0, 4.0]);
        assert!((v.norm() - 1.0).abs() < 1e-12);
        assert_eq!(v.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn norm_tolerance_keeps_near_unit_values() {
        let raw = vec![0.6f32 as f64, 0.8f32 as f64];
        let (v, _) = UnitVector::with_norm_tolerance(raw.clone(), 1e-6).unwrap();
        assert!(bits_eq(v.as_slice(), &raw));
        let (v, norm) = UnitVector::with_norm_tolerance(vec![3.0, 4.0], 1e-6).unwrap();
        assert_eq!(norm, 5.0);
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[2.5, 2.5, 2.5], 0.3).unwrap();
        for i in 0..3 {
            assert!((p[i] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[-7.0], 5.0).unwrap().as_slice(), &[1.0]);
        let p = softmax(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[1.0, f64::INFINITY], 1.0), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&[1.0, f64::NAN], 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax(&[1e300, 0.0, -1e300], 1e-3).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn neg_entropy_cases() {
        assert_eq!(neg_entropy_score(&ProbVector::new(vec![1.0]).unwrap()), 0.0);
        let half = neg_entropy_score(&ProbVector::new(vec![0.5, 0.5]).unwrap());
        assert!((half + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(neg_entropy_score(&ProbVector::new(vec![1.0, 0.0]).unwrap()), 0.0);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert_eq!(
            ProbVector::normalized(vec![1.0, 3.0]).unwrap().as_slice(),
            &[0.25, 0.75]
        );
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn mean_of_antipodal_is_none() {
        assert!(UnitVector::mean_of(&[uv(&[1.0, 0.0]), uv(&[-1.0, 0.0])]).is_none());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            scores in prop::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
            temperature in 0.01f64..10.0,
        ) {
            let p = softmax(&scores, temperature).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = softmax(&shifted, temperature).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn neg_entropy_bounded_by_one_hot_and_uniform(
            masses in prop::collection::vec(0.0f64..1.0, 2..12),
        ) {
            prop_assume!(masses.iter().sum::<f64>() > 1e-6);
            let n = masses.len();
            let p = ProbVector::normalized(masses).unwrap();
            let h = neg_entropy_score(&p);
            let uniform = neg_entropy_score(&ProbVector::uniform(n).unwrap());
            prop_assert!(h <= 1e-15);
            prop_assert!(h >= uniform - 1e-12);
            let mut one_hot = vec![0.0; n];
            one_hot[0] = 1.0;
            prop_assert_eq!(neg_entropy_score(&ProbVector::new(one_hot).unwrap()), 0.0);
        }

        #[test]
        fn cosine_is_symmetric(
            a in prop::collection::vec(-1.0f64..1.0, 8),
            b in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let (u, v) = (uv(&a), uv(&b));
            let uv_ = cosine_similarity(&u, &v).unwrap();
            prop_assert_eq!(uv_.to_bits(), cosine_similarity(&v, &u).unwrap().to_bits());
            prop_assert!((-1.0..=1.0).contains(&uv_));
        }
    }
}
