//! The two-stage training procedure.
//!
//! Stage one distills the fused teacher labels into the target network while
//! rectifying its nested subnetwork; pseudo-labels are EMA-refined every
//! epoch and the ViL teacher's prompt is re-fit every `prompt_period` epochs.
//! Stage two self-trains on nearest-prototype labels computed from the
//! network's own features.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, FusionSchedule, PrototypeMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_fixed, global_uncertainty, FusionReport, PseudoLabelStore};
use crate::losses::{
    loss_im, loss_kd, loss_mix, loss_self, stage_one_total, subnetwork_rectification, BatchForward,
    LossBreakdown, StageOneComponents, ThetaLoss,
};
use crate::net::{LayerLayout, Network, OptimizerState, SubnetworkMask};
use crate::prob::{argmax, cosine_unchecked, PredictionMatrix, COSINE_ZERO_NORM};
use crate::synth::accuracy;
use crate::teachers::TeacherOracle;

/// Samples per work item in full-set inference.
const INFERENCE_CHUNK: usize = 256;

const STREAM_SHUFFLE: u64 = 11;
const STREAM_MIX: u64 = 12;

/// Threshold under which a prototype's soft count marks it empty.
pub const EMPTY_PROTOTYPE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: u8,
    pub losses: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    pub gu_of_target: f64,
    pub learning_rate: f64,
}

/// Emitted after every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub stage: u8,
    pub losses: &'a LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `classes x feature_dim`, row-major.
    pub mu: Vec<f64>,
    pub soft_counts: Vec<f64>,
    pub feature_dim: usize,
}

impl PrototypeSet {
    pub fn classes(&self) -> usize {
        self.soft_counts.len()
    }

    pub fn is_empty_class(&self, c: usize) -> bool {
        self.soft_counts[c] < EMPTY_PROTOTYPE
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.mu[c * self.feature_dim..(c + 1) * self.feature_dim]
    }
}

/// Class prototypes `mu_c = sum_i p_ic q_i / sum_i p_ic`.
pub fn compute_prototypes(
    features: &[f64],
    feature_dim: usize,
    probs: &PredictionMatrix,
    mode: PrototypeMode,
) -> Result<PrototypeSet> {
    let c = probs.classes();
    if feature_dim == 0 || features.len() != probs.len() * feature_dim {
        return Err(Error::invalid("features and predictions are misaligned"));
    }
    let mut mu = vec![0.0; c * feature_dim];
    let mut soft_counts = vec![0.0; c];
    for (q, p) in features.chunks_exact(feature_dim).zip(probs.rows()) {
        let hard = argmax(p);
        for k in 0..c {
            if mode == PrototypeMode::Hard && k != hard {
                continue;
            }
            soft_counts[k] += p[k];
            for (m, v) in mu[k * feature_dim..(k + 1) * feature_dim].iter_mut().zip(q) {
                *m += p[k] * v;
            }
        }
    }
    for k in 0..c {
        if soft_counts[k] >= EMPTY_PROTOTYPE {
            mu[k * feature_dim..(k + 1) * feature_dim]
                .iter_mut()
                .for_each(|m| *m /= soft_counts[k]);
        }
    }
    if soft_counts.iter().all(|&s| s < EMPTY_PROTOTYPE) {
        return Err(Error::DegenerateState("every prototype class is empty".into()));
    }
    Ok(PrototypeSet {
        mu,
        soft_counts,
        feature_dim,
    })
}

/// Label of the nearest non-empty prototype by cosine distance, lowest index
/// on ties.
pub fn assign_nearest_prototype(features: &[f64], protos: &PrototypeSet) -> Result<Vec<usize>> {
    let h = protos.feature_dim;
    if !features.len().is_multiple_of(h) {
        return Err(Error::invalid("feature block does not match prototype dimension"));
    }
    let candidates: Vec<usize> = (0..protos.classes()).filter(|&c| !protos.is_empty_class(c)).collect();
    if candidates.is_empty() {
        return Err(Error::DegenerateState("no non-empty prototype to assign".into()));
    }
    let mut zero_norm = 0usize;
    let labels = features
        .chunks_exact(h)
        .map(|q| {
            if crate::prob::norm(q) < COSINE_ZERO_NORM {
                zero_norm += 1;
            }
            let mut best = (f64::INFINITY, candidates[0]);
            for &c in &candidates {
                let d = 1.0 - cosine_unchecked(q, protos.prototype(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect();
    if zero_norm > 0 {
        warn!("{zero_norm} samples have zero-norm features; assigned by tie-break");
    }
    Ok(labels)
}

/// Accuracy of `net` on a labeled dataset.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    let truth = data
        .labels()
        .ok_or_else(|| Error::UnsupportedEvaluation("dataset has no label column".into()))?;
    let (probs, _) = net.predict(data.features())?;
    let pred: Vec<usize> = probs.chunks_exact(data.classes()).map(argmax).collect();
    accuracy(&pred, truth)
}

pub struct RunOutcome {
    pub net: Network,
    /// Weights at the end of stage one.
    pub stage_one_net: Network,
    pub metrics: Vec<MetricsRecord>,
    /// Pseudo-labels produced by the first fusion, before any training.
    pub first_fusion: PredictionMatrix,
    pub teacher_c: TeacherOracle,
    pub stage_one_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
}

pub struct Trainer<'a> {
    cfg: &'a Config,
    data: &'a Dataset,
    net: Network,
    mask: SubnetworkMask,
    opt: OptimizerState,
    shuffle_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    metrics: Vec<MetricsRecord>,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a Config, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![data.dim()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(data.classes());
        let layout = LayerLayout::with_activation(sizes, cfg.activation)?;
        let mask = SubnetworkMask::new(&layout, cfg.gamma)?;
        let net = Network::init(layout, cfg.seed);
        let per_epoch = data.len().div_ceil(cfg.batch_size);
        let opt = OptimizerState::new(cfg.optimizer(), net.param_count(), per_epoch * cfg.epochs);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg,
            data,
            net,
            mask,
            opt,
            shuffle_rng: stream(cfg.seed, STREAM_SHUFFLE),
            mix_rng: stream(cfg.seed, STREAM_MIX),
            pool,
            metrics: Vec::new(),
        })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    /// Predictions and features for the whole target set. Chunks are
    /// independent, so the result does not depend on the thread count.
    fn infer(&self) -> Result<(PredictionMatrix, Vec<f64>)> {
        let d = self.data.dim();
        let net = &self.net;
        let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = self.pool.install(|| {
            self.data
                .features()
                .par_chunks(INFERENCE_CHUNK * d)
                .map(|chunk| net.predict(chunk))
                .collect()
        });
        let mut probs = Vec::with_capacity(self.data.len() * self.data.classes());
        let mut feats = Vec::new();
        for part in parts {
            let (p, f) = part?;
            probs.extend(p);
            feats.extend(f);
        }
        let m = PredictionMatrix::new(self.data.ids().to_vec(), probs, self.data.classes())
            .map_err(|e| Error::DegenerateState(format!("target predictions left the simplex: {e}")))?;
        Ok((m, feats))
    }

    fn batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn step(&mut self, grad: &[f64], epoch: usize, batch: usize) -> Result<()> {
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                batch,
                component: format!("gradient (coordinate {i})"),
            });
        }
        self.opt.sgd_step(self.net.theta_mut(), grad).map_err(|e| match e {
            Error::Divergence { component, .. } => Error::Divergence {
                epoch,
                batch,
                component,
            },
            other => other,
        })
    }

    fn fuse_teachers(&self, yb: &PredictionMatrix, yc: &PredictionMatrix) -> Result<(PredictionMatrix, FusionReport)> {
        match self.cfg.clip_weight {
            Some(w) => fuse_fixed(yb, yc, w),
            None => fuse(yb, yc, self.cfg.gu_threshold),
        }
    }

    fn accuracy_of(&self, probs: &PredictionMatrix) -> Option<f64> {
        self.data
            .labels()
            .map(|truth| accuracy(&probs.argmax_labels(), truth).expect("aligned"))
    }

    fn stage_one_batch(
        &mut self,
        xb: &[f64],
        pseudo: &[f64],
        epoch: usize,
        batch: usize,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let sw = self.cfg.switches;
        let c = self.data.classes();
        let fwd = BatchForward::run(&self.net, None, xb)?;
        // Every other term differentiates through these outputs, so an
        // overflowed forward pass is reported here rather than as bad input.
        if fwd.probs().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                batch,
                component: "forward pass".into(),
            });
        }
        let through = |l: crate::losses::LogitLoss| -> Result<ThetaLoss> {
            Ok(ThetaLoss {
                value: l.value,
                grad: fwd.backprop(&self.net, &l.dlogits)?,
            })
        };
        let mut parts = StageOneComponents::default();
        if sw.kd {
            parts.kd = Some(through(loss_kd(pseudo, fwd.probs(), c)?)?);
        }
        if sw.im {
            parts.im = Some(through(loss_im(fwd.probs(), c)?)?);
        }
        if sw.mix {
            parts.mix = Some(loss_mix(&self.net, xb, fwd.probs(), &mut self.mix_rng)?);
        }
        if sw.sr {
            let with_wg = self.cfg.zeta != 0.0;
            let r = subnetwork_rectification(&self.net, &self.mask, xb, self.cfg.wg_form, with_wg)?;
            parts.od = Some(r.od);
            parts.wg = Some(r.wg);
        }
        let (losses, grad) = stage_one_total(&parts, self.cfg.epsilon, self.cfg.zeta, self.net.param_count())?;
        if let Some(component) = losses.non_finite_component() {
            return Err(Error::Divergence {
                epoch,
                batch,
                component: component.into(),
            });
        }
        Ok((losses, grad))
    }

    /// Stage one. Returns the pseudo-label store and the first fused labels.
    pub fn run_stage_one(
        &mut self,
        teacher_b: &TeacherOracle,
        teacher_c: &mut TeacherOracle,
        observer: &mut dyn FnMut(&StepEvent),
    ) -> Result<(PseudoLabelStore, PredictionMatrix)> {
        let cfg = self.cfg;
        let data = self.data;
        let yb = teacher_b.query(data)?;
        let mut yc = teacher_c.query(data)?;
        let (fused, report) = self.fuse_teachers(&yb, &yc)?;
        info!(
            "initial fusion: branch {:?}, alpha {:.4}, delta_gu {:.4}",
            report.branch, report.alpha, report.delta_gu
        );
        let first = fused.clone();
        let mut store = PseudoLabelStore::new(fused, cfg.beta, report, 1)?;
        let mut fresh_report = Some(report);

        for epoch in 1..=cfg.stage_one_epochs {
            if epoch > 1 && cfg.fusion_schedule == FusionSchedule::EveryEpoch {
                let (fused, report) = self.fuse_teachers(&yb, &yc)?;
                store.reset(fused, report, epoch)?;
                fresh_report = Some(report);
            }
            let mut sum = LossBreakdown::default();
            let batches = self.batches();
            let nb = batches.len();
            for (b, idx) in batches.iter().enumerate() {
                let xb = data.gather(idx);
                let pseudo: Vec<f64> = idx.iter().flat_map(|&i| store.labels().row(i).iter().copied()).collect();
                let (losses, grad) = self.stage_one_batch(&xb, &pseudo, epoch, b)?;
                self.step(&grad, epoch, b)?;
                observer(&StepEvent {
                    epoch,
                    batch: b,
                    stage: 1,
                    losses: &losses,
                });
                sum.accumulate(&losses);
            }
            let mut losses = sum.scaled(1.0 / nb as f64);

            let (yt, _) = self.infer()?;
            store.ema_refine(&yt)?;

            if epoch % cfg.prompt_period == 0 {
                if let TeacherOracle::Prompted(t) = teacher_c {
                    let mut cur = t.clone();
                    for s in 0..cfg.prompt_steps {
                        let (next, loss) = cur.prompt_step(data, &yt).map_err(|e| match e {
                            Error::Divergence { .. } => Error::Divergence {
                                epoch,
                                batch: s,
                                component: "prompt".into(),
                            },
                            other => other,
                        })?;
                        if s == 0 {
                            losses.cm = loss;
                        }
                        cur = next;
                    }
                    debug!("epoch {epoch}: prompt {:?}", cur.prompt());
                    *t = cur;
                    yc = teacher_c.query(data)?;
                    if cfg.fusion_schedule == FusionSchedule::OnPromptRefresh {
                        let (fused, report) = self.fuse_teachers(&yb, &yc)?;
                        store.reset(fused, report, epoch)?;
                        fresh_report = Some(report);
                    }
                }
            }
            store.labels().validate()?;

            let gu = global_uncertainty(&yt)?;
            let acc = self.accuracy_of(&yt);
            info!(
                "stage 1 epoch {epoch}: total {:.5} acc {}",
                losses.total,
                acc.map_or("-".into(), |a| format!("{a:.4}"))
            );
            self.metrics.push(MetricsRecord {
                epoch,
                stage: 1,
                losses,
                fusion: fresh_report.take(),
                target_accuracy: acc,
                gu_of_target: gu,
                learning_rate: self.opt.learning_rate(),
            });
        }
        Ok((store, first))
    }

    /// Stage two: self-training on nearest-prototype labels.
    pub fn run_stage_two(&mut self, observer: &mut dyn FnMut(&StepEvent)) -> Result<()> {
        let cfg = self.cfg;
        let data = self.data;
        let c = data.classes();
        let h = self.net.layout().feature_dim();
        for epoch in cfg.stage_one_epochs + 1..=cfg.epochs {
            let (probs, feats) = self.infer()?;
            let protos = compute_prototypes(&feats, h, &probs, cfg.prototype_mode)?;
            for k in 0..c {
                if protos.is_empty_class(k) {
                    warn!("epoch {epoch}: prototype {k} is empty and excluded");
                }
            }
            let labels = assign_nearest_prototype(&feats, &protos)?;
            let mut sum = LossBreakdown::default();
            let batches = self.batches();
            let nb = batches.len();
            for (b, idx) in batches.iter().enumerate() {
                let xb = data.gather(idx);
                let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let fwd = BatchForward::run(&self.net, None, &xb)?;
                let l = loss_self(&yb, fwd.probs(), c)?;
                let losses = LossBreakdown {
                    self_ce: l.value,
                    total: l.value,
                    ..Default::default()
                };
                if let Some(component) = losses.non_finite_component() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        component: component.into(),
                    });
                }
                let grad = fwd.backprop(&self.net, &l.dlogits)?;
                self.step(&grad, epoch, b)?;
                observer(&StepEvent {
                    epoch,
                    batch: b,
                    stage: 2,
                    losses: &losses,
                });
                sum.accumulate(&losses);
            }
            let losses = sum.scaled(1.0 / nb as f64);
            let (yt, _) = self.infer()?;
            let acc = self.accuracy_of(&yt);
            info!(
                "stage 2 epoch {epoch}: self {:.5} acc {}",
                losses.self_ce,
                acc.map_or("-".into(), |a| format!("{a:.4}"))
            );
            self.metrics.push(MetricsRecord {
                epoch,
                stage: 2,
                losses,
                fusion: None,
                target_accuracy: acc,
                gu_of_target: global_uncertainty(&yt)?,
                learning_rate: self.opt.learning_rate(),
            });
        }
        Ok(())
    }
}

/// Runs both stages (or stage one alone, per config) end to end.
pub fn run(
    cfg: &Config,
    data: &Dataset,
    teacher_b: &TeacherOracle,
    teacher_c: TeacherOracle,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<RunOutcome> {
    for (name, t) in [("black-box", teacher_b), ("vil", &teacher_c)] {
        if t.classes() != data.classes() {
            return Err(Error::invalid(format!(
                "{name} teacher has {} classes, dataset has {}",
                t.classes(),
                data.classes()
            )));
        }
    }
    let mut teacher_c = teacher_c;
    let mut trainer = Trainer::new(cfg, data)?;
    let (_, first_fusion) = trainer.run_stage_one(teacher_b, &mut teacher_c, observer)?;
    let stage_one_net = trainer.net.clone();
    let stage_one_accuracy = trainer.metrics.last().and_then(|m| m.target_accuracy);
    let run_two = cfg.stage == crate::config::StageSelection::Full && cfg.switches.self_training;
    if run_two {
        trainer.run_stage_two(observer)?;
    }
    let final_accuracy = trainer.metrics.last().and_then(|m| m.target_accuracy);
    Ok(RunOutcome {
        net: trainer.net,
        stage_one_net,
        metrics: trainer.metrics,
        first_fusion,
        teacher_c,
        stage_one_accuracy,
        final_accuracy,
    })
}
