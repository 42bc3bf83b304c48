//! Training objectives and their exact gradients.
//!
//! Losses that only depend on the target network's output distribution
//! (`kd`, `im`, `self`) return a gradient on the logits ([`LogitLoss`]); push
//! it into parameter space with [`BatchForward::backprop`]. Losses that run
//! their own forward passes (`mix`, `od`, `wg`) return a gradient over
//! `theta` directly ([`ThetaLoss`]).
//!
//! Every batch expectation is an arithmetic mean over the batch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::dual::{softmax_generic, softmax_pullback, Scalar};
use crate::error::{Error, Result};
use crate::net::{backward_trace, forward_trace, hvp, GradientField, LayerLayout, Network, SubnetworkMask, Trace};
use crate::prob::{self, entropy_unchecked, kl_div_unchecked, mean_rows, softmax_into};

/// Shape parameter of the symmetric Beta law the mixup coefficient is drawn from.
pub const MIXUP_BETA: f64 = 0.3;

/// Scalar loss plus its gradient on the logits (`n x C`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLoss {
    pub value: f64,
    pub dlogits: Vec<f64>,
}

/// Scalar loss plus its gradient over the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl ThetaLoss {
    pub fn zero(params: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; params],
        }
    }
}

/// Per-component loss values for one batch (or an epoch average).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kd: f64,
    pub mix: f64,
    pub im: f64,
    pub dt: f64,
    pub od: f64,
    pub wg: f64,
    pub sr: f64,
    pub cm: f64,
    pub self_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn accumulate(&mut self, other: &LossBreakdown) {
        self.kd += other.kd;
        self.mix += other.mix;
        self.im += other.im;
        self.dt += other.dt;
        self.od += other.od;
        self.wg += other.wg;
        self.sr += other.sr;
        self.cm += other.cm;
        self.self_ce += other.self_ce;
        self.total += other.total;
    }

    pub(crate) fn scaled(mut self, k: f64) -> Self {
        for v in [
            &mut self.kd,
            &mut self.mix,
            &mut self.im,
            &mut self.dt,
            &mut self.od,
            &mut self.wg,
            &mut self.sr,
            &mut self.cm,
            &mut self.self_ce,
            &mut self.total,
        ] {
            *v *= k;
        }
        self
    }

    /// First component that is not finite, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("kd", self.kd),
            ("mix", self.mix),
            ("im", self.im),
            ("od", self.od),
            ("wg", self.wg),
            ("cm", self.cm),
            ("self", self.self_ce),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(k, _)| k)
    }
}

/// A forward pass over a batch, kept around so logit gradients can be pushed
/// back into parameter space.
#[derive(Debug, Clone)]
pub struct BatchForward {
    widths: Vec<usize>,
    traces: Vec<Trace<f64>>,
    probs: Vec<f64>,
    classes: usize,
}

impl BatchForward {
    pub fn run(net: &Network, mask: Option<&SubnetworkMask>, batch: &[f64]) -> Result<Self> {
        let d = net.layout().input_dim();
        if batch.is_empty() || !batch.len().is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "batch of {} values does not hold whole samples of dimension {d}",
                batch.len()
            )));
        }
        let widths = net.widths_for(mask).to_vec();
        let traces = net.traces(&widths, batch);
        let classes = net.layout().classes();
        let mut probs = vec![0.0; traces.len() * classes];
        for (t, p) in traces.iter().zip(probs.chunks_exact_mut(classes)) {
            softmax_into(&t.logits, 1.0, p);
        }
        Ok(Self {
            widths,
            traces,
            probs,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn features(&self) -> Vec<f64> {
        self.traces.iter().flat_map(|t| t.features().iter().copied()).collect()
    }

    pub fn backprop(&self, net: &Network, dlogits: &[f64]) -> Result<Vec<f64>> {
        if dlogits.len() != self.probs.len() {
            return Err(Error::invalid("logit gradient does not match the batch"));
        }
        let mut grad = vec![0.0; net.param_count()];
        net.backward_traces(&self.widths, &self.traces, dlogits, &mut grad);
        Ok(grad)
    }
}

fn check_rows(a: &[f64], b: &[f64], classes: usize) -> Result<usize> {
    if classes < 2 || a.len() != b.len() || !a.len().is_multiple_of(classes) {
        return Err(Error::invalid(format!(
            "misaligned batch: {} vs {} values for {classes} classes",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(a.len() / classes)
}

/// Distillation loss `mean_i KL(pseudo_i || p_i)`; pseudo-labels are constants.
pub fn loss_kd(pseudo: &[f64], probs: &[f64], classes: usize) -> Result<LogitLoss> {
    let n = check_rows(pseudo, probs, classes)?;
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut dlogits = Vec::with_capacity(probs.len());
    for (y, p) in pseudo.chunks_exact(classes).zip(probs.chunks_exact(classes)) {
        value += kl_div_unchecked(y, p);
        dlogits.extend(p.iter().zip(y).map(|(pk, yk)| (pk - yk) * inv));
    }
    Ok(LogitLoss {
        value: value * inv,
        dlogits,
    })
}

/// Information maximization `H(mean p) - mean H(p)`. It enters the stage-one
/// objective with a minus sign.
pub fn loss_im(probs: &[f64], classes: usize) -> Result<LogitLoss> {
    let n = check_rows(probs, probs, classes)?;
    let inv = 1.0 / n as f64;
    let marginal = mean_rows(probs, classes);
    let cond: f64 = probs.chunks_exact(classes).map(entropy_unchecked).sum::<f64>() * inv;
    let value = entropy_unchecked(&marginal) - cond;

    let ln_marg: Vec<f64> = marginal.iter().map(|&m| safe_ln(m)).collect();
    let mut dlogits = vec![0.0; probs.len()];
    let mut g = vec![0.0; classes];
    for (p, dz) in probs.chunks_exact(classes).zip(dlogits.chunks_exact_mut(classes)) {
        for j in 0..classes {
            g[j] = (safe_ln(p[j]) - ln_marg[j]) * inv;
        }
        softmax_pullback(p, &g, 1.0, dz);
    }
    Ok(LogitLoss { value, dlogits })
}

/// Cross-entropy against hard labels, `mean_i -ln p_i[y_i]` (probabilities
/// floored at 1e-12).
pub fn loss_self(labels: &[usize], probs: &[f64], classes: usize) -> Result<LogitLoss> {
    if classes < 2 || labels.is_empty() || probs.len() != labels.len() * classes {
        return Err(Error::invalid("labels and predictions are misaligned"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} is outside [0, {classes})")));
    }
    let inv = 1.0 / labels.len() as f64;
    let mut value = 0.0;
    let mut dlogits = probs.to_vec();
    for (i, &y) in labels.iter().enumerate() {
        value -= probs[i * classes + y].max(1e-12).ln();
        dlogits[i * classes + y] -= 1.0;
    }
    dlogits.iter_mut().for_each(|v| *v *= inv);
    Ok(LogitLoss {
        value: value * inv,
        dlogits,
    })
}

#[inline]
fn safe_ln(x: f64) -> f64 {
    x.max(f64::MIN_POSITIVE).ln()
}

/// Fixed randomness for one mixup evaluation: each sample `i` is mixed with
/// `partner[i]` using coefficient `lambda[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub partner: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl MixPlan {
    /// Uniform random derangement (rejection sampling over shuffles) and
    /// `lambda ~ Beta(0.3, 0.3)` per pair. Needs `n >= 2`.
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("mixup needs at least two samples"));
        }
        let mut partner: Vec<usize> = (0..n).collect();
        loop {
            partner.shuffle(rng);
            if partner.iter().enumerate().all(|(i, &j)| i != j) {
                break;
            }
        }
        let beta = Beta::new(MIXUP_BETA, MIXUP_BETA).expect("valid beta parameters");
        let lambda = (0..n).map(|_| beta.sample(rng)).collect();
        Ok(Self { partner, lambda })
    }
}

/// Mixup consistency `mean_i KL(f(mix(x_i, x_j)) || mix(p_i, p_j))` with the
/// mixed target held constant. `probs` are the model's current (detached)
/// predictions on `batch`. A single-sample batch yields zero.
pub fn loss_mix<R: Rng + ?Sized>(
    net: &Network,
    batch: &[f64],
    probs: &[f64],
    rng: &mut R,
) -> Result<ThetaLoss> {
    let n = batch.len() / net.layout().input_dim();
    if n < 2 {
        return Ok(ThetaLoss::zero(net.param_count()));
    }
    let plan = MixPlan::sample(n, rng)?;
    loss_mix_with_plan(net, batch, probs, &plan)
}

pub fn loss_mix_with_plan(
    net: &Network,
    batch: &[f64],
    probs: &[f64],
    plan: &MixPlan,
) -> Result<ThetaLoss> {
    let d = net.layout().input_dim();
    let c = net.layout().classes();
    let n = batch.len() / d;
    if batch.len() != n * d || probs.len() != n * c {
        return Err(Error::invalid("mixup batch and predictions are misaligned"));
    }
    if n < 2 {
        return Ok(ThetaLoss::zero(net.param_count()));
    }
    if plan.partner.len() != n || plan.lambda.len() != n || plan.partner.iter().any(|&j| j >= n) {
        return Err(Error::invalid("mixup plan does not match the batch"));
    }
    let mut mixed_x = Vec::with_capacity(n * d);
    let mut mixed_y = Vec::with_capacity(n * c);
    for i in 0..n {
        let (j, lam) = (plan.partner[i], plan.lambda[i]);
        let (xi, xj) = (&batch[i * d..(i + 1) * d], &batch[j * d..(j + 1) * d]);
        mixed_x.extend(xi.iter().zip(xj).map(|(a, b)| lam * a + (1.0 - lam) * b));
        let (yi, yj) = (&probs[i * c..(i + 1) * c], &probs[j * c..(j + 1) * c]);
        mixed_y.extend(yi.iter().zip(yj).map(|(a, b)| lam * a + (1.0 - lam) * b));
    }
    let fwd = BatchForward::run(net, None, &mixed_x)?;
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut dlogits = vec![0.0; n * c];
    let mut g = vec![0.0; c];
    for ((p, t), dz) in fwd
        .probs()
        .chunks_exact(c)
        .zip(mixed_y.chunks_exact(c))
        .zip(dlogits.chunks_exact_mut(c))
    {
        value += kl_div_unchecked(p, t);
        // d KL(p || t) / d p_j = ln(p_j / t_j) + 1; the constant cancels in
        // the softmax pullback.
        for j in 0..c {
            g[j] = (safe_ln(p[j]) - safe_ln(t[j])) * inv;
        }
        softmax_pullback(p, &g, 1.0, dz);
    }
    Ok(ThetaLoss {
        value: value * inv,
        grad: fwd.backprop(net, &dlogits)?,
    })
}

/// Which scalar the weighted gradient-discrepancy term minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WgForm {
    /// `weight * cos(g_full, g_sub)`, pushing the two gradients apart.
    #[default]
    #[serde(rename = "cosine")]
    Cosine,
    /// `weight * (1 - cos(g_full, g_sub))`, pulling them together; its
    /// parameter gradient is the negation of the cosine form's.
    #[serde(rename = "one-minus-cosine-negated")]
    OneMinusCosine,
}

impl std::str::FromStr for WgForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(WgForm::Cosine),
            "one-minus-cosine-negated" => Ok(WgForm::OneMinusCosine),
            other => Err(Error::Config(format!("unknown wg_form `{other}`"))),
        }
    }
}

#[inline]
fn floor_ln<S: Scalar>(x: S) -> S {
    if x.re() < 1e-300 {
        S::cst(1e-300).ln()
    } else {
        x.ln()
    }
}

/// The output-divergence objective as a function of two independent copies
/// of the parameters: the full path reads `theta[..P]`, the subnetwork path
/// reads `theta[P..]`. Its gradient splits `d L_od / d theta` into the part
/// flowing through each path.
pub struct SplitOutputDivergence<'a> {
    layout: &'a LayerLayout,
    sub_widths: &'a [usize],
    batch: &'a [f64],
}

impl<'a> SplitOutputDivergence<'a> {
    pub fn new(layout: &'a LayerLayout, mask: &'a SubnetworkMask, batch: &'a [f64]) -> Result<Self> {
        if mask.widths().len() != layout.sizes().len() {
            return Err(Error::invalid("subnetwork mask does not match the network layout"));
        }
        if batch.is_empty() || !batch.len().is_multiple_of(layout.input_dim()) {
            return Err(Error::invalid("batch does not hold whole samples"));
        }
        Ok(Self {
            layout,
            sub_widths: mask.widths(),
            batch,
        })
    }

    fn params(&self) -> usize {
        self.layout.param_count()
    }

    /// Returns `(g_full, g_sub)`.
    fn split_gradient<S: Scalar>(&self, full: &[S], sub: &[S]) -> (Vec<S>, Vec<S>) {
        let p = self.params();
        let c = self.layout.classes();
        let d = self.layout.input_dim();
        let n = self.batch.len() / d;
        let inv = 1.0 / n as f64;
        let mut g_full = vec![S::zero(); p];
        let mut g_sub = vec![S::zero(); p];
        let mut pf = vec![S::zero(); c];
        let mut ps = vec![S::zero(); c];
        let mut gf = vec![S::zero(); c];
        let mut gs = vec![S::zero(); c];
        let mut dz = vec![S::zero(); c];
        for x in self.batch.chunks_exact(d) {
            let tf = forward_trace(self.layout, full, self.layout.sizes(), x);
            let ts = forward_trace(self.layout, sub, self.sub_widths, x);
            softmax_generic(&tf.logits, 1.0, &mut pf);
            softmax_generic(&ts.logits, 1.0, &mut ps);
            for j in 0..c {
                let ln_m = floor_ln((pf[j] + ps[j]).scale(0.5));
                // d JS / d p_j = 0.5 ln(p_j / m_j)
                gf[j] = (floor_ln(pf[j]) - ln_m).scale(0.5 * inv);
                gs[j] = (floor_ln(ps[j]) - ln_m).scale(0.5 * inv);
            }
            softmax_pullback(&pf, &gf, 1.0, &mut dz);
            backward_trace(self.layout, full, self.layout.sizes(), &tf, &dz, &mut g_full);
            softmax_pullback(&ps, &gs, 1.0, &mut dz);
            backward_trace(self.layout, sub, self.sub_widths, &ts, &dz, &mut g_sub);
        }
        (g_full, g_sub)
    }
}

impl GradientField for SplitOutputDivergence<'_> {
    fn dim(&self) -> usize {
        2 * self.params()
    }

    fn gradient<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
        let (full, sub) = theta.split_at(self.params());
        let (mut g, gs) = self.split_gradient(full, sub);
        g.extend(gs);
        g
    }
}

/// Output divergence and weighted gradient discrepancy for one batch,
/// computed together since they share the split gradient.
#[derive(Debug, Clone)]
pub struct Rectification {
    pub od: ThetaLoss,
    pub wg: ThetaLoss,
    /// Stop-gradient weight `1 + exp(-H)` applied to the cosine term.
    pub wg_weight: f64,
    /// Mean per-sample entropy of the subnetwork's predictions.
    pub sub_entropy: f64,
}

pub fn subnetwork_rectification(
    net: &Network,
    mask: &SubnetworkMask,
    batch: &[f64],
    form: WgForm,
    with_wg: bool,
) -> Result<Rectification> {
    let layout = net.layout();
    let d = layout.input_dim();
    if batch.is_empty() || !batch.len().is_multiple_of(d) {
        return Err(Error::invalid("rectification batch does not hold whole samples"));
    }
    if mask.widths().len() != layout.sizes().len() {
        return Err(Error::invalid("subnetwork mask does not match the network layout"));
    }
    let n = batch.len() / d;
    let c = layout.classes();
    let p = net.param_count();

    let full_fwd = BatchForward::run(net, None, batch)?;
    let sub_fwd = BatchForward::run(net, Some(mask), batch)?;
    let mut od_value = 0.0;
    let mut sub_entropy = 0.0;
    for (ps, pf) in sub_fwd.probs().chunks_exact(c).zip(full_fwd.probs().chunks_exact(c)) {
        od_value += prob::js_div_unchecked(ps, pf);
        sub_entropy += entropy_unchecked(ps);
    }
    od_value /= n as f64;
    sub_entropy /= n as f64;

    let field = SplitOutputDivergence {
        layout,
        sub_widths: mask.widths(),
        batch,
    };
    let (g_full, g_sub) = field.split_gradient::<f64>(net.theta(), net.theta());
    let od_grad: Vec<f64> = g_full.iter().zip(&g_sub).map(|(a, b)| a + b).collect();
    let od = ThetaLoss {
        value: od_value,
        grad: od_grad,
    };

    let wg_weight = 1.0 + (-sub_entropy).exp();
    if !with_wg {
        return Ok(Rectification {
            od,
            wg: ThetaLoss::zero(p),
            wg_weight,
            sub_entropy,
        });
    }

    let kept = mask.kept_coordinates(layout);
    let u: Vec<f64> = kept.iter().map(|&i| g_full[i]).collect();
    let v: Vec<f64> = kept.iter().map(|&i| g_sub[i]).collect();
    let (nu, nv) = (prob::norm(&u), prob::norm(&v));
    if nu < prob::COSINE_ZERO_NORM || nv < prob::COSINE_ZERO_NORM {
        return Ok(Rectification {
            od,
            wg: ThetaLoss::zero(p),
            wg_weight,
            sub_entropy,
        });
    }
    let cos = (prob::dot(&u, &v) / (nu * nv)).clamp(-1.0, 1.0);

    // d cos / d u and d cos / d v, scattered back to full coordinates and
    // stacked as one direction over the doubled parameter space. By symmetry
    // of the Hessian, summing the two blocks of H [a; b] gives
    // J_full^T a + J_sub^T b.
    let mut direction = vec![0.0; 2 * p];
    for (k, &i) in kept.iter().enumerate() {
        direction[i] = v[k] / (nu * nv) - cos * u[k] / (nu * nu);
        direction[p + i] = u[k] / (nu * nv) - cos * v[k] / (nv * nv);
    }
    let mut doubled = net.theta().to_vec();
    doubled.extend_from_slice(net.theta());
    let hv = hvp(&doubled, &direction, &field)?;
    let (sign, value) = match form {
        WgForm::Cosine => (1.0, wg_weight * cos),
        WgForm::OneMinusCosine => (-1.0, wg_weight * (1.0 - cos)),
    };
    let grad = (0..p).map(|i| sign * wg_weight * (hv[i] + hv[p + i])).collect();
    Ok(Rectification {
        od,
        wg: ThetaLoss { value, grad },
        wg_weight,
        sub_entropy,
    })
}

/// `mean_i JS(f(x_i; W_sub) || f(x_i; W_full))`, gradient through both paths.
pub fn loss_od(net: &Network, mask: &SubnetworkMask, batch: &[f64]) -> Result<ThetaLoss> {
    Ok(subnetwork_rectification(net, mask, batch, WgForm::Cosine, false)?.od)
}

/// `(1 + exp(-H_sub)) * cos(g_full, g_sub)` with the entropy weight held
/// constant; cosine taken over the coordinates both paths share.
pub fn loss_wg(net: &Network, mask: &SubnetworkMask, batch: &[f64], form: WgForm) -> Result<ThetaLoss> {
    Ok(subnetwork_rectification(net, mask, batch, form, true)?.wg)
}

/// `(g_full, g_sub)` restricted to the subnetwork's coordinates, i.e. the two
/// vectors whose cosine [`loss_wg`] measures.
pub fn split_od_gradients(net: &Network, mask: &SubnetworkMask, batch: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let field = SplitOutputDivergence {
        layout: net.layout(),
        sub_widths: mask.widths(),
        batch,
    };
    let (g_full, g_sub) = field.split_gradient::<f64>(net.theta(), net.theta());
    let kept = mask.kept_coordinates(net.layout());
    (
        kept.iter().map(|&i| g_full[i]).collect(),
        kept.iter().map(|&i| g_sub[i]).collect(),
    )
}

pub fn loss_sr(od: f64, wg: f64, epsilon: f64, zeta: f64) -> f64 {
    epsilon * od + zeta * wg
}

/// Stage-one components for one batch; `None` marks an ablated term.
#[derive(Debug, Clone, Default)]
pub struct StageOneComponents {
    pub kd: Option<ThetaLoss>,
    pub mix: Option<ThetaLoss>,
    pub im: Option<ThetaLoss>,
    pub od: Option<ThetaLoss>,
    pub wg: Option<ThetaLoss>,
}

/// `(kd + mix - im) + (epsilon od + zeta wg)` and its fused gradient.
pub fn stage_one_total(
    parts: &StageOneComponents,
    epsilon: f64,
    zeta: f64,
    params: usize,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; params];
    let mut add = |part: &Option<ThetaLoss>, k: f64| -> Result<f64> {
        match part {
            Some(l) => {
                if l.grad.len() != params {
                    return Err(Error::invalid("component gradient has the wrong length"));
                }
                for (g, v) in grad.iter_mut().zip(&l.grad) {
                    *g += k * v;
                }
                Ok(l.value)
            }
            None => Ok(0.0),
        }
    };
    let kd = add(&parts.kd, 1.0)?;
    let mix = add(&parts.mix, 1.0)?;
    let im = add(&parts.im, -1.0)?;
    let od = add(&parts.od, epsilon)?;
    let wg = add(&parts.wg, zeta)?;
    let dt = kd + mix - im;
    let sr = loss_sr(od, wg, epsilon, zeta);
    Ok((
        LossBreakdown {
            kd,
            mix,
            im,
            dt,
            od,
            wg,
            sr,
            total: dt + sr,
            ..Default::default()
        },
        grad,
    ))
}
