//! Probability-simplex primitives.
//!
//! Everything here works in nats (natural log) at 64-bit precision. The
//! checked entry points (`entropy`, `kl_div`, ...) validate their inputs and
//! return [`Error::InvalidInput`]; the `*_unchecked` variants are used on hot
//! paths where the caller already guarantees valid rows.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Tolerance on a row sum for a vector to count as a point on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Floor applied to both arguments of a KL divergence before renormalizing.
pub const KL_FLOOR: f64 = 1e-12;

/// Norm below which a vector is treated as zero by [`cosine`].
pub const COSINE_ZERO_NORM: f64 = 1e-12;

/// A single point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        check_simplex(&p)?;
        Ok(Self(p))
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("a distribution needs at least 2 classes"));
        }
        Ok(Self(vec![1.0 / classes as f64; classes]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Validates that `p` lies on the simplex: `C >= 2`, entries in `[0, 1]`,
/// sum within [`SIMPLEX_TOL`] of one.
pub fn check_simplex(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::invalid(format!(
            "distribution has {} classes, need at least 2",
            p.len()
        )));
    }
    check_finite_nonneg(p)?;
    if p.iter().any(|&v| v > 1.0 + SIMPLEX_TOL) {
        return Err(Error::invalid("probability entry exceeds 1"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!(
            "distribution sums to {sum:.17}, expected 1"
        )));
    }
    Ok(())
}

fn check_finite_nonneg(p: &[f64]) -> Result<()> {
    match p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(j) => Err(Error::invalid(format!(
            "entry {j} is {} (must be finite and non-negative)",
            p[j]
        ))),
        None => Ok(()),
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_finite_nonneg(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    h.max(0.0)
}

/// Row-wise arithmetic mean of a prediction matrix.
pub fn mean_distribution(m: &PredictionMatrix) -> Result<ProbVector> {
    if m.is_empty() {
        return Err(Error::invalid("mean of an empty prediction matrix"));
    }
    Ok(ProbVector(mean_rows(m.data(), m.classes())))
}

pub(crate) fn mean_rows(flat: &[f64], classes: usize) -> Vec<f64> {
    let n = flat.len() / classes;
    let mut acc = vec![0.0; classes];
    for row in flat.chunks_exact(classes) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

fn floored(p: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|&v| v.max(KL_FLOOR)).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// `KL(p || q)` in nats. Both arguments are floored at [`KL_FLOOR`] and
/// renormalized first, so one-hot inputs give finite values.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p, q)?;
    check_finite_nonneg(p)?;
    check_finite_nonneg(q)?;
    Ok(kl_div_unchecked(p, q))
}

pub(crate) fn kl_div_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let p = floored(p);
    let q = floored(q);
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    kl.max(0.0)
}

/// Jensen-Shannon divergence, `0.5 KL(p||m) + 0.5 KL(q||m)` with `m = (p+q)/2`.
pub fn js_div(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p, q)?;
    check_finite_nonneg(p)?;
    check_finite_nonneg(q)?;
    Ok(js_div_unchecked(p, q))
}

pub(crate) fn js_div_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    0.5 * kl_div_unchecked(p, &m) + 0.5 * kl_div_unchecked(q, &m)
}

/// Cosine similarity; returns 0 when either vector has norm below
/// [`COSINE_ZERO_NORM`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    check_same_len(u, v)?;
    Ok(cosine_unchecked(u, v))
}

pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu < COSINE_ZERO_NORM || nv < COSINE_ZERO_NORM {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Max-subtracted softmax of `z / temperature`.
pub fn softmax(z: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if z.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 logits"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, temperature, &mut out);
    Ok(ProbVector(out))
}

pub(crate) fn softmax_into(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// A set of per-sample soft predictions over `C` classes, keyed by sample id.
///
/// Rows are stored contiguously (`n x C`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    ids: Vec<String>,
    data: Vec<f64>,
    classes: usize,
}

impl PredictionMatrix {
    pub fn new(ids: Vec<String>, data: Vec<f64>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("prediction matrix needs at least 2 classes"));
        }
        if data.len() != ids.len() * classes {
            return Err(Error::invalid(format!(
                "{} ids but {} values for {classes} classes",
                ids.len(),
                data.len()
            )));
        }
        for (i, row) in data.chunks_exact(classes).enumerate() {
            check_simplex(row).map_err(|e| Error::invalid(format!("row {} ({}): {e}", i, ids[i])))?;
        }
        check_unique(&ids)?;
        Ok(Self { ids, data, classes })
    }

    /// Skips validation; rows must already be on the simplex and ids unique.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }

    pub fn argmax_labels(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }

    /// Checks that `other` has the same ids in the same order and the same
    /// class count.
    pub fn check_aligned(&self, other: &PredictionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::invalid(format!(
                "class count mismatch: {} vs {}",
                self.classes, other.classes
            )));
        }
        if self.ids != other.ids {
            return Err(Error::invalid("prediction matrices are not aligned by sample id"));
        }
        Ok(())
    }

    /// Re-validates every row against the simplex invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            check_simplex(row).map_err(|e| Error::invalid(format!("row {i}: {e}")))?;
        }
        Ok(())
    }
}

pub(crate) fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate sample id `{id}`")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, c).prop_map(|mut v| {
            v[0] += 1e-3;
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        })
    }

    #[test]
    fn entropy_examples() {
        let ln4 = 4f64.ln();
        assert!((entropy(&[0.25; 4]).unwrap() - ln4).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        // -0.5 ln 0.5 - 2 * 0.25 ln 0.25
        assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.039721).abs() < 1e-6);
        assert!(entropy(&[0.5, f64::NAN]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn mean_distribution_examples() {
        let m = PredictionMatrix::new(
            vec!["a".into(), "b".into()],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
        )
        .unwrap();
        assert_eq!(mean_distribution(&m).unwrap().as_slice(), &[0.5, 0.5]);

        let m = PredictionMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.8, 0.2, 0.6, 0.4, 0.1, 0.9],
            2,
        )
        .unwrap();
        let mean = mean_distribution(&m).unwrap();
        assert!((mean.as_slice()[0] - 0.5).abs() < 1e-15);

        let single = PredictionMatrix::new(vec!["a".into()], vec![0.3, 0.7], 2).unwrap();
        assert_eq!(mean_distribution(&single).unwrap().as_slice(), &[0.3, 0.7]);

        let empty = PredictionMatrix::new(vec![], vec![], 2).unwrap();
        assert!(mean_distribution(&empty).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_div(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-9);
        let a = kl_div(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        let b = kl_div(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((a - b).abs() > 1e-3);
        assert!(kl_div(&[0.5, 0.5], &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_div(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let v = js_div(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-9);
        assert!(js_div(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0, 2.0, -3.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);

        let z = [1.0, -0.5, 2.0];
        let h1 = entropy(softmax(&z, 1.0).unwrap().as_slice()).unwrap();
        let h10 = entropy(softmax(&z, 10.0).unwrap().as_slice()).unwrap();
        assert!(h10 > h1);

        assert!(softmax(&z, 0.0).is_err());
        assert!(softmax(&z, -1.0).is_err());
    }

    #[test]
    fn prediction_matrix_rejects_bad_rows_and_duplicates() {
        assert!(PredictionMatrix::new(vec!["a".into()], vec![0.5, 0.6], 2).is_err());
        assert!(PredictionMatrix::new(
            vec!["a".into(), "a".into()],
            vec![0.5, 0.5, 0.5, 0.5],
            2
        )
        .is_err());
    }

    #[test]
    fn js_bounded_on_many_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let c = rng.random_range(2..8);
            let mut draw = || {
                let mut v: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powi(3)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let p = draw();
            let q = draw();
            let a = js_div(&p, &q).unwrap();
            assert!(a <= 2f64.ln() + 1e-12);
            assert_eq!(a, js_div(&q, &p).unwrap());
            assert!(kl_div(&p, &q).unwrap() >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn entropy_bounded(p in (2usize..12).prop_flat_map(simplex)) {
            let h = entropy(&p).unwrap();
            let c = p.len() as f64;
            prop_assert!(h >= 0.0 && h <= c.ln() + 1e-12);
        }

        #[test]
        fn uniform_attains_max_entropy(c in 2usize..50) {
            let u = ProbVector::uniform(c).unwrap();
            prop_assert!((entropy(u.as_slice()).unwrap() - (c as f64).ln()).abs() < 1e-9);
        }

        #[test]
        fn divergences_bounded(pair in (2usize..8).prop_flat_map(|c| (simplex(c), simplex(c)))) {
            let (p, q) = pair;
            prop_assert!(kl_div(&p, &q).unwrap() >= 0.0);
            let a = js_div(&p, &q).unwrap();
            let b = js_div(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!(a >= 0.0 && a <= 2f64.ln() + 1e-12);
        }

        #[test]
        fn softmax_stays_on_simplex(z in prop::collection::vec(-700.0f64..700.0, 2..10)) {
            let p = softmax(&z, 1.0).unwrap();
            prop_assert!(check_simplex(p.as_slice()).is_ok());
        }

        #[test]
        fn mean_commutes_with_permutation(
            rows in (2usize..5).prop_flat_map(|c| prop::collection::vec(simplex(c), 1..20)),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let c = rows[0].len();
            let ids: Vec<String> = (0..rows.len()).map(|i| i.to_string()).collect();
            let m = PredictionMatrix::new(ids.clone(), rows.concat(), c).unwrap();
            let mut perm = rows.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mp = PredictionMatrix::new(ids, perm.concat(), c).unwrap();
            let a = mean_distribution(&m).unwrap();
            let b = mean_distribution(&mp).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }
    }
}
