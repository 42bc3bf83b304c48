//! Synthetic two-domain benchmarks with a controllable covariate shift.
//!
//! Classes are isotropic Gaussians. The target domain is the source domain
//! moved by a similarity transform: `mu_t = scale * R(angle) mu_s + t`, where
//! `R` rotates every consecutive coordinate pair `(0,1), (2,3), ...` by the
//! same angle (an odd trailing coordinate is left alone).
//!
//! The black-box teacher is fit to the source geometry, so the rotation
//! misplaces its decision boundaries; the vision-language teacher sees a
//! blend of source and target means and is smoother. Neither sees target
//! labels.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::teachers::SyntheticBayesTeacher;

/// Seed for the Monte-Carlo Bayes oracle, kept apart from every other stream.
pub const BAYES_ORACLE_SEED: u64 = 0xBA7E5;
pub const BAYES_ORACLE_DRAWS: usize = 1_000_000;

// RNG streams derived from the benchmark seed.
const STREAM_GEOMETRY: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_TARGET: u64 = 3;
const STREAM_BIAS: u64 = 4;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// `classes x dim`, row-major.
    pub class_means: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub noise_scale: f64,
}

impl DomainSpec {
    pub fn classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let c = self.classes();
        if dim == 0 || c < 2 || self.class_means.len() != c * dim {
            return Err(Error::invalid("domain spec means do not match d x C"));
        }
        let s: f64 = self.class_weights.iter().sum();
        if self.class_weights.iter().any(|&w| w.is_nan() || w < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("class weights must lie on the simplex"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("noise scale must be finite and non-negative"));
        }
        if self.class_means.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("class means must be finite"));
        }
        Ok(())
    }

    fn mean(&self, c: usize, dim: usize) -> &[f64] {
        &self.class_means[c * dim..(c + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub angle: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl Shift {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (s, c) = self.angle.sin_cos();
        let mut out = x.to_vec();
        for k in (0..x.len() / 2).map(|k| 2 * k) {
            out[k] = c * x[k] - s * x[k + 1];
            out[k + 1] = s * x[k] + c * x[k + 1];
        }
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o = self.scale * *o + t;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    pub dim: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub shift: Shift,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
}

impl DomainPair {
    /// Builds the target spec by moving the source means with `shift`.
    pub fn from_source(
        dim: usize,
        source: DomainSpec,
        shift: Shift,
        n_source: usize,
        n_target: usize,
        seed: u64,
    ) -> Result<Self> {
        source.validate(dim)?;
        if shift.translation.len() != dim || shift.scale.is_nan() || shift.scale <= 0.0 || !shift.angle.is_finite() {
            return Err(Error::invalid("shift needs a d-dimensional translation and positive scale"));
        }
        let class_means = (0..source.classes())
            .flat_map(|c| shift.apply(source.mean(c, dim)))
            .collect();
        let target = DomainSpec {
            class_means,
            class_weights: source.class_weights.clone(),
            noise_scale: source.noise_scale,
        };
        Ok(Self {
            dim,
            source,
            target,
            shift,
            n_source,
            n_target,
            seed,
        })
    }

    pub fn classes(&self) -> usize {
        self.source.classes()
    }

    pub fn generate_target(&self) -> Result<Dataset> {
        generate(&self.target, self.dim, self.n_target, "t", &mut stream(self.seed, STREAM_TARGET))
    }

    pub fn generate_source(&self) -> Result<Dataset> {
        generate(&self.source, self.dim, self.n_source, "s", &mut stream(self.seed, STREAM_SOURCE))
    }
}

/// Draws `n` labeled samples: label from `class_weights`, feature
/// `mu_y + noise * N(0, I)`.
pub fn generate<R: Rng + ?Sized>(
    spec: &DomainSpec,
    dim: usize,
    n: usize,
    id_prefix: &str,
    rng: &mut R,
) -> Result<Dataset> {
    spec.validate(dim)?;
    if n == 0 {
        return Err(Error::invalid("cannot generate an empty dataset"));
    }
    let pick = WeightedIndex::new(&spec.class_weights)
        .map_err(|e| Error::invalid(format!("class weights: {e}")))?;
    let width = n.to_string().len();
    let mut ids = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = pick.sample(rng);
        for &m in spec.mean(y, dim) {
            let z: f64 = StandardNormal.sample(rng);
            features.push(m + spec.noise_scale * z);
        }
        labels.push(y);
        ids.push(format!("{id_prefix}{i:0width$}"));
    }
    Dataset::new(ids, features, dim, spec.classes(), Some(labels))
}

/// Bayes decision for an isotropic equal-covariance mixture (lowest index on
/// ties).
fn bayes_label(spec: &DomainSpec, dim: usize, x: &[f64]) -> usize {
    let var2 = 2.0 * spec.noise_scale * spec.noise_scale;
    let mut best = (f64::NEG_INFINITY, 0);
    for c in 0..spec.classes() {
        let d2: f64 = x.iter().zip(spec.mean(c, dim)).map(|(a, b)| (a - b) * (a - b)).sum();
        let score = if var2 > 0.0 {
            spec.class_weights[c].ln() - d2 / var2
        } else {
            -d2
        };
        if score > best.0 {
            best = (score, c);
        }
    }
    best.1
}

/// Monte-Carlo accuracy of the Bayes classifier under `spec`.
pub fn bayes_accuracy(spec: &DomainSpec, dim: usize, draws: usize, seed: u64) -> Result<f64> {
    spec.validate(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(&spec.class_weights)
        .map_err(|e| Error::invalid(format!("class weights: {e}")))?;
    let mut x = vec![0.0; dim];
    let mut hits = 0usize;
    for _ in 0..draws {
        let y = pick.sample(&mut rng);
        for (xi, &m) in x.iter_mut().zip(spec.mean(y, dim)) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *xi = m + spec.noise_scale * z;
        }
        hits += usize::from(bayes_label(spec, dim, &x) == y);
    }
    Ok(hits as f64 / draws as f64)
}

/// Knobs for the default benchmark family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    pub n_source: usize,
    pub angle: f64,
    pub noise: f64,
    pub seed: u64,
    /// Standard deviation of each source-mean coordinate.
    pub separation: f64,
    /// Standard deviation of each translation coordinate.
    pub translation: f64,
    pub scale: f64,
    /// Logit bias the black-box teacher adds to one randomly drawn class.
    pub bias: f64,
    /// Fraction of the way from source to target means the vision-language
    /// teacher's class means sit.
    pub vil_blend: f64,
    pub vil_temperature: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 8,
            n: 2000,
            n_source: 2000,
            angle: 0.6,
            noise: 1.0,
            seed: 0,
            separation: 1.25,
            translation: 0.5,
            scale: 1.0,
            bias: 1.5,
            vil_blend: 0.15,
            vil_temperature: 2.0,
        }
    }
}

/// A domain pair together with the two teachers built from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub params: SynthParams,
    pub pair: DomainPair,
    pub biased_class: usize,
    pub teacher_b: SyntheticBayesTeacher,
    pub teacher_c: SyntheticBayesTeacher,
}

impl Benchmark {
    pub fn build(params: &SynthParams) -> Result<Self> {
        let (c, d) = (params.classes, params.dim);
        if c < 2 || d == 0 || params.n == 0 || params.n_source == 0 {
            return Err(Error::Config("benchmark needs C >= 2, d >= 1 and non-empty domains".into()));
        }
        for (name, v) in [
            ("angle", params.angle),
            ("noise", params.noise),
            ("separation", params.separation),
            ("translation", params.translation),
            ("bias", params.bias),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if params.noise < 0.0 || params.scale <= 0.0 || params.vil_temperature <= 0.0 {
            return Err(Error::Config(
                "noise must be non-negative; scale and vil_temperature positive".into(),
            ));
        }
        let mut geo = stream(params.seed, STREAM_GEOMETRY);
        let mut normal = |k: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut geo);
            k * z
        };
        let source_means: Vec<f64> = (0..c * d).map(|_| normal(params.separation)).collect();
        let translation: Vec<f64> = (0..d).map(|_| normal(params.translation)).collect();
        let source = DomainSpec {
            class_means: source_means,
            class_weights: vec![1.0 / c as f64; c],
            noise_scale: params.noise,
        };
        let shift = Shift {
            angle: params.angle,
            translation,
            scale: params.scale,
        };
        let pair = DomainPair::from_source(d, source, shift, params.n_source, params.n, params.seed)?;

        // Black-box teacher: empirical source class means.
        let src = pair.generate_source()?;
        let labels = src.labels().expect("generated data is labeled");
        let mut sums = vec![0.0; c * d];
        let mut counts = vec![0usize; c];
        for (i, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(src.sample(i)) {
                *s += v;
            }
        }
        let fitted: Vec<f64> = (0..c * d)
            .map(|k| {
                let n = counts[k / d];
                if n == 0 {
                    pair.source.class_means[k]
                } else {
                    sums[k] / n as f64
                }
            })
            .collect();
        let cov = (params.noise * params.noise).max(1e-6);
        let biased_class = stream(params.seed, STREAM_BIAS).random_range(0..c);
        let mut bias = vec![0.0; c];
        bias[biased_class] = params.bias;
        let teacher_b = SyntheticBayesTeacher::new(d, fitted, cov, 1.0, bias)?;

        // Vision-language teacher: means part way toward the target geometry.
        let k = params.vil_blend;
        let blended = pair
            .source
            .class_means
            .iter()
            .zip(&pair.target.class_means)
            .map(|(s, t)| (1.0 - k) * s + k * t)
            .collect();
        let teacher_c = SyntheticBayesTeacher::new(d, blended, cov, params.vil_temperature, vec![0.0; c])?;

        Ok(Self {
            params: params.clone(),
            pair,
            biased_class,
            teacher_b,
            teacher_c,
        })
    }

    pub fn target(&self) -> Result<Dataset> {
        self.pair.generate_target()
    }

    pub fn bayes_accuracy(&self) -> Result<f64> {
        bayes_accuracy(&self.pair.target, self.pair.dim, BAYES_ORACLE_DRAWS, BAYES_ORACLE_SEED)
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(pred_labels: &[usize], truth: &[usize]) -> Result<f64> {
    if pred_labels.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid("prediction and label counts differ"));
    }
    let hits = pred_labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(gap: f64, noise: f64) -> DomainSpec {
        DomainSpec {
            class_means: vec![0.0, 0.0, gap, 0.0],
            class_weights: vec![0.5, 0.5],
            noise_scale: noise,
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let b = Benchmark::build(&SynthParams::default()).unwrap();
        let again = Benchmark::build(&SynthParams::default()).unwrap();
        assert_eq!(b, again);
        assert_eq!(b.target().unwrap(), again.target().unwrap());
        let other = Benchmark::build(&SynthParams {
            seed: 1,
            ..SynthParams::default()
        })
        .unwrap();
        assert_ne!(b.target().unwrap(), other.target().unwrap());
    }

    #[test]
    fn zero_shift_zero_noise_hits_means() {
        let params = SynthParams {
            angle: 0.0,
            noise: 0.0,
            translation: 0.0,
            n: 50,
            ..SynthParams::default()
        };
        let b = Benchmark::build(&params).unwrap();
        assert_eq!(b.pair.target.class_means, b.pair.source.class_means);
        let t = b.target().unwrap();
        for (i, &y) in t.labels().unwrap().iter().enumerate() {
            assert_eq!(t.sample(i), &b.pair.target.class_means[y * 8..(y + 1) * 8]);
        }
    }

    #[test]
    fn shift_is_exact_similarity() {
        let shift = Shift {
            angle: std::f64::consts::FRAC_PI_2,
            translation: vec![1.0, 0.0, 0.0],
            scale: 2.0,
        };
        let out = shift.apply(&[1.0, 0.0, 5.0]);
        assert!((out[0] - 1.0).abs() < 1e-15);
        assert!((out[1] - 2.0).abs() < 1e-15);
        assert_eq!(out[2], 10.0);
    }

    #[test]
    fn class_frequencies_follow_weights() {
        let spec = DomainSpec {
            class_means: vec![0.0; 3],
            class_weights: vec![0.2, 0.5, 0.3],
            noise_scale: 1.0,
        };
        let n = 20_000;
        let data = generate(&spec, 1, n, "x", &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (c, &w) in spec.class_weights.iter().enumerate() {
            let k = data.labels().unwrap().iter().filter(|&&y| y == c).count() as f64;
            let sigma = (n as f64 * w * (1.0 - w)).sqrt();
            assert!((k - n as f64 * w).abs() < 3.0 * sigma, "class {c}: {k}");
        }
    }

    #[test]
    fn bayes_accuracy_limits() {
        let far = bayes_accuracy(&two_class(10.0, 1.0), 2, 20_000, 1).unwrap();
        assert!(far > 0.999);
        let same = bayes_accuracy(&two_class(0.0, 1.0), 2, 20_000, 1).unwrap();
        assert!((same - 0.5).abs() < 0.02);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = two_class(1.0, 1.0);
        s.class_weights = vec![0.7, 0.7];
        assert!(s.validate(2).is_err());
        assert!(Benchmark::build(&SynthParams {
            classes: 1,
            ..SynthParams::default()
        })
        .is_err());
        assert!(accuracy(&[0], &[]).is_err());
    }
}
