//! Read-only prediction oracles standing in for the two teachers.
//!
//! [`SyntheticBayesTeacher`] scores samples by squared distance to class
//! means. [`PromptedTeacher`] wraps a frozen one with a learnable per-class
//! logit bias (the "prompt"). [`FileTeacher`] replays exported predictions.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_predictions, Dataset};
use crate::dual::softmax_pullback;
use crate::error::{Error, Result};
use crate::prob::{softmax_into, PredictionMatrix};

/// `softmax((-|x - mu_c|^2 / (2 s) + b_c)_c, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBayesTeacher {
    pub dim: usize,
    pub classes: usize,
    /// `classes x dim`, row-major.
    pub class_means: Vec<f64>,
    pub class_cov_scale: f64,
    pub temperature: f64,
    pub label_bias: Vec<f64>,
}

impl SyntheticBayesTeacher {
    pub fn new(
        dim: usize,
        class_means: Vec<f64>,
        class_cov_scale: f64,
        temperature: f64,
        label_bias: Vec<f64>,
    ) -> Result<Self> {
        let classes = label_bias.len();
        let t = Self {
            dim,
            classes,
            class_means,
            class_cov_scale,
            temperature,
            label_bias,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes < 2 {
            return Err(Error::invalid("teacher needs d >= 1 and at least 2 classes"));
        }
        if self.class_means.len() != self.classes * self.dim || self.label_bias.len() != self.classes {
            return Err(Error::invalid("teacher means or biases have the wrong shape"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("teacher temperature must be positive"));
        }
        if !(self.class_cov_scale > 0.0 && self.class_cov_scale.is_finite()) {
            return Err(Error::invalid("teacher covariance scale must be positive"));
        }
        if self.class_means.iter().chain(&self.label_bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("teacher parameters must be finite"));
        }
        Ok(())
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mu = &self.class_means[c * self.dim..(c + 1) * self.dim];
            let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            *o = -d2 / (2.0 * self.class_cov_scale) + self.label_bias[c];
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.dim || data.classes() != self.classes {
            return Err(Error::invalid(format!(
                "teacher expects d={} C={}, dataset has d={} C={}",
                self.dim,
                self.classes,
                data.dim(),
                data.classes()
            )));
        }
        Ok(())
    }

    fn query_with_bias(&self, data: &Dataset, extra: &[f64]) -> Result<PredictionMatrix> {
        self.check_data(data)?;
        let c = self.classes;
        let mut out = vec![0.0; data.len() * c];
        let mut z = vec![0.0; c];
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            self.logits_into(data.sample(i), &mut z);
            for (zk, wk) in z.iter_mut().zip(extra) {
                *zk += wk;
            }
            softmax_into(&z, self.temperature, row);
        }
        PredictionMatrix::new(data.ids().to_vec(), out, c)
    }

    pub fn query(&self, data: &Dataset) -> Result<PredictionMatrix> {
        self.query_with_bias(data, &vec![0.0; self.classes])
    }
}

/// Frozen base scorer plus a learnable logit bias `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedTeacher {
    base: SyntheticBayesTeacher,
    prompt: Vec<f64>,
    prompt_lr: f64,
}

impl PromptedTeacher {
    pub fn new(base: SyntheticBayesTeacher, prompt_lr: f64) -> Result<Self> {
        base.validate()?;
        if !(prompt_lr >= 0.0 && prompt_lr.is_finite()) {
            return Err(Error::invalid("prompt learning rate must be finite and non-negative"));
        }
        let prompt = vec![0.0; base.classes];
        Ok(Self {
            base,
            prompt,
            prompt_lr,
        })
    }

    pub fn base(&self) -> &SyntheticBayesTeacher {
        &self.base
    }

    pub fn prompt(&self) -> &[f64] {
        &self.prompt
    }

    pub fn with_prompt(mut self, prompt: Vec<f64>) -> Result<Self> {
        if prompt.len() != self.base.classes || prompt.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prompt must hold one finite value per class"));
        }
        self.prompt = prompt;
        Ok(self)
    }

    pub fn query(&self, data: &Dataset) -> Result<PredictionMatrix> {
        self.base.query_with_bias(data, &self.prompt)
    }

    /// Consistency loss `mean_i -(y_t,i . y_c,i)` and its gradient on the
    /// prompt.
    pub fn consistency(&self, data: &Dataset, target: &PredictionMatrix) -> Result<(f64, Vec<f64>)> {
        let c = self.base.classes;
        if target.classes() != c || target.len() != data.len() {
            return Err(Error::invalid(format!(
                "target predictions ({} x {}) do not match the teacher batch ({} x {c})",
                target.len(),
                target.classes(),
                data.len()
            )));
        }
        let yc = self.query(data)?;
        let inv = 1.0 / data.len() as f64;
        let t = self.base.temperature;
        let mut loss = 0.0;
        let mut grad = vec![0.0; c];
        let mut g = vec![0.0; c];
        let mut dz = vec![0.0; c];
        for (pc, pt) in yc.rows().zip(target.rows()) {
            for k in 0..c {
                loss -= pt[k] * pc[k];
                g[k] = -pt[k] * inv;
            }
            softmax_pullback(pc, &g, t, &mut dz);
            for (a, b) in grad.iter_mut().zip(&dz) {
                *a += b;
            }
        }
        Ok((loss * inv, grad))
    }

    /// One gradient-descent step on the prompt. Returns the updated teacher
    /// and the loss before the update.
    pub fn prompt_step(&self, data: &Dataset, target: &PredictionMatrix) -> Result<(Self, f64)> {
        let (loss, grad) = self.consistency(data, target)?;
        let mut next = self.clone();
        for (w, g) in next.prompt.iter_mut().zip(&grad) {
            *w -= self.prompt_lr * g;
        }
        if next.prompt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                epoch: 0,
                batch: 0,
                component: "prompt".into(),
            });
        }
        Ok((next, loss))
    }
}

/// Predictions loaded from a file, answered by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct FileTeacher {
    matrix: PredictionMatrix,
    index: HashMap<String, usize>,
}

impl FileTeacher {
    pub fn from_matrix(matrix: PredictionMatrix) -> Self {
        let index = matrix
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self { matrix, index }
    }

    pub fn load(path: &Path, expected_classes: usize) -> Result<Self> {
        Ok(Self::from_matrix(load_predictions(path, Some(expected_classes))?))
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.matrix.classes()
    }

    pub fn query_ids(&self, ids: &[String]) -> Result<PredictionMatrix> {
        let c = self.matrix.classes();
        let mut data = Vec::with_capacity(ids.len() * c);
        for id in ids {
            let i = *self
                .index
                .get(id)
                .ok_or_else(|| Error::MissingPrediction(id.clone()))?;
            data.extend_from_slice(self.matrix.row(i));
        }
        PredictionMatrix::new(ids.to_vec(), data, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherOracle {
    Synthetic(SyntheticBayesTeacher),
    Prompted(PromptedTeacher),
    File(FileTeacher),
}

impl TeacherOracle {
    pub fn kind(&self) -> &'static str {
        match self {
            TeacherOracle::Synthetic(_) => "synthetic-bayes",
            TeacherOracle::Prompted(_) => "prompted",
            TeacherOracle::File(_) => "file-backed",
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            TeacherOracle::Synthetic(t) => t.classes,
            TeacherOracle::Prompted(t) => t.base.classes,
            TeacherOracle::File(t) => t.classes(),
        }
    }

    pub fn query(&self, data: &Dataset) -> Result<PredictionMatrix> {
        match self {
            TeacherOracle::Synthetic(t) => t.query(data),
            TeacherOracle::Prompted(t) => t.query(data),
            TeacherOracle::File(t) => {
                if t.classes() != data.classes() {
                    return Err(Error::invalid(format!(
                        "teacher file has {} classes, dataset has {}",
                        t.classes(),
                        data.classes()
                    )));
                }
                t.query_ids(data.ids())
            }
        }
    }
}
