//! The trainable target model: a small dense network `f = h ∘ g`.
//!
//! All weights live in one flat vector `theta`. Affine layer `l` maps
//! `sizes[l] -> sizes[l + 1]`; its weight matrix is stored row-major
//! (`out x in`, one row per output unit) immediately followed by its bias.
//! Every layer but the last is followed by an activation and together they
//! form the feature extractor; the last layer is the classifier and emits
//! logits.
//!
//! A [`SubnetworkMask`] keeps the first `ceil(gamma * h)` units of every
//! hidden layer. The subnetwork forward pass reads the top-left block of each
//! weight matrix in place, so gradients through it land in the same `theta`
//! coordinates the full pass uses.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            // Subgradient at 0 is 0.
            Activation::Relu => {
                if x.re() > 0.0 {
                    x
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `pre` and output `out`.
    #[inline]
    fn derivative<S: Scalar>(self, pre: S, out: S) -> S {
        match self {
            Activation::Relu => {
                if pre.re() > 0.0 {
                    S::cst(1.0)
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => S::cst(1.0) - out * out,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
}

impl LayerLayout {
    /// `sizes = [d, h_1, ..., h_L, C]` with one activation per hidden layer.
    pub fn new(sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::invalid(
                "layout needs an input width, at least one hidden layer and an output width",
            ));
        }
        if let Some(pos) = sizes.iter().position(|&w| w == 0) {
            return Err(Error::invalid(format!("layer {pos} has zero width")));
        }
        if *sizes.last().unwrap() < 2 {
            return Err(Error::invalid("output width (class count) must be at least 2"));
        }
        if activations.len() != sizes.len() - 2 {
            return Err(Error::invalid(format!(
                "{} hidden layers but {} activations",
                sizes.len() - 2,
                activations.len()
            )));
        }
        Ok(Self { sizes, activations })
    }

    pub fn with_activation(sizes: Vec<usize>, act: Activation) -> Result<Self> {
        let hidden = sizes.len().saturating_sub(2);
        Self::new(sizes, vec![act; hidden])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 2]
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight offset, bias offset)` of affine layer `l` inside `theta`.
    pub fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    fn all_offsets(&self) -> Vec<(usize, usize)> {
        (0..self.depth()).map(|l| self.offsets(l)).collect()
    }
}

/// Structural subnetwork: the first `ceil(gamma * h_l)` units of each hidden
/// layer. Inputs and class outputs are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetworkMask {
    gamma: f64,
    widths: Vec<usize>,
}

impl SubnetworkMask {
    pub fn new(layout: &LayerLayout, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        let sizes = layout.sizes();
        let last = sizes.len() - 1;
        let widths = sizes
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                if i == 0 || i == last {
                    h
                } else {
                    // The small offset keeps e.g. 0.3 * 10 = 3.0000000000000004 at 3.
                    ((gamma * h as f64 - 1e-9).ceil() as usize).clamp(1, h)
                }
            })
            .collect();
        Ok(Self { gamma, widths })
    }

    pub fn full(layout: &LayerLayout) -> Self {
        Self {
            gamma: 1.0,
            widths: layout.sizes().to_vec(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Active width at every layer boundary, input and output included.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Kept unit count per hidden layer; the kept range is `0..count`.
    pub fn kept_units(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn is_full(&self, layout: &LayerLayout) -> bool {
        self.widths == layout.sizes()
    }

    /// Indices of the `theta` coordinates read by the subnetwork pass.
    pub fn kept_coordinates(&self, layout: &LayerLayout) -> Vec<usize> {
        let sizes = layout.sizes();
        let mut out = Vec::new();
        for l in 0..layout.depth() {
            let (w_off, b_off) = layout.offsets(l);
            let full_in = sizes[l];
            for r in 0..self.widths[l + 1] {
                for c in 0..self.widths[l] {
                    out.push(w_off + r * full_in + c);
                }
            }
            out.extend(b_off..b_off + self.widths[l + 1]);
        }
        out
    }
}

/// Per-sample record of a forward pass, enough to run the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace<S> {
    /// Input to every affine layer; `inputs[0]` is the sample itself.
    pub inputs: Vec<Vec<S>>,
    /// Hidden pre-activations.
    pub pre: Vec<Vec<S>>,
    pub logits: Vec<S>,
}

impl<S: Scalar> Trace<S> {
    pub fn features(&self) -> &[S] {
        self.inputs.last().unwrap()
    }
}

pub(crate) fn forward_trace<S: Scalar>(
    layout: &LayerLayout,
    theta: &[S],
    widths: &[usize],
    x: &[f64],
) -> Trace<S> {
    let sizes = layout.sizes();
    let depth = layout.depth();
    let mut inputs = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth - 1);
    let mut cur: Vec<S> = x.iter().map(|&v| S::cst(v)).collect();
    for l in 0..depth {
        let (w_off, b_off) = layout.offsets(l);
        let full_in = sizes[l];
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let mut z = Vec::with_capacity(n_out);
        for r in 0..n_out {
            let row = &theta[w_off + r * full_in..w_off + r * full_in + n_in];
            let mut acc = theta[b_off + r];
            for (&w, &a) in row.iter().zip(&cur) {
                acc += w * a;
            }
            z.push(acc);
        }
        inputs.push(cur);
        if l + 1 == depth {
            return Trace {
                inputs,
                pre,
                logits: z,
            };
        }
        let act = layout.activations()[l];
        cur = z.iter().map(|&v| act.apply(v)).collect();
        pre.push(z);
    }
    unreachable!("layout has at least one layer")
}

/// Accumulates `d loss / d theta` for one sample into `grad`, given the
/// gradient on that sample's logits.
pub(crate) fn backward_trace<S: Scalar>(
    layout: &LayerLayout,
    theta: &[S],
    widths: &[usize],
    trace: &Trace<S>,
    dlogits: &[S],
    grad: &mut [S],
) {
    let sizes = layout.sizes();
    let mut delta: Vec<S> = dlogits.to_vec();
    for l in (0..layout.depth()).rev() {
        let (w_off, b_off) = layout.offsets(l);
        let full_in = sizes[l];
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let a = &trace.inputs[l];
        for r in 0..n_out {
            let d = delta[r];
            let base = w_off + r * full_in;
            for c in 0..n_in {
                grad[base + c] += d * a[c];
            }
            grad[b_off + r] += d;
        }
        if l == 0 {
            break;
        }
        let act = layout.activations()[l - 1];
        let mut prev = vec![S::zero(); n_in];
        for r in 0..n_out {
            let d = delta[r];
            let base = w_off + r * full_in;
            for c in 0..n_in {
                prev[c] += theta[base + c] * d;
            }
        }
        for c in 0..n_in {
            prev[c] *= act.derivative(trace.pre[l - 1][c], a[c]);
        }
        delta = prev;
    }
}

/// Dense network weights plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layout: LayerLayout,
    theta: Vec<f64>,
}

impl Network {
    /// He-style fan-in uniform init (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`),
    /// zero biases. Deterministic per seed.
    pub fn init(layout: LayerLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; layout.param_count()];
        for (l, (w_off, b_off)) in layout.all_offsets().into_iter().enumerate() {
            let bound = (6.0 / layout.sizes()[l] as f64).sqrt();
            for w in &mut theta[w_off..b_off] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self { layout, theta }
    }

    pub fn from_theta(layout: LayerLayout, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != layout.param_count() {
            return Err(Error::invalid(format!(
                "layout needs {} parameters, got {}",
                layout.param_count(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network parameter"));
        }
        Ok(Self { layout, theta })
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.input_dim() {
            return Err(Error::invalid(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.layout.input_dim()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[f64]) -> Result<usize> {
        let d = self.layout.input_dim();
        if !batch.len().is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "batch of {} values is not a multiple of input dimension {d}",
                batch.len()
            )));
        }
        Ok(batch.len() / d)
    }

    /// `(logits, features)` of the full network.
    pub fn forward_full(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let t = forward_trace(&self.layout, &self.theta, self.layout.sizes(), x);
        let features = t.features().to_vec();
        Ok((t.logits, features))
    }

    /// `(logits, features)` of the subnetwork; features have the masked width.
    pub fn forward_sub(&self, mask: &SubnetworkMask, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        self.check_mask(mask)?;
        let t = forward_trace(&self.layout, &self.theta, mask.widths(), x);
        let features = t.features().to_vec();
        Ok((t.logits, features))
    }

    fn check_mask(&self, mask: &SubnetworkMask) -> Result<()> {
        let sizes = self.layout.sizes();
        let ok = mask.widths.len() == sizes.len()
            && mask.widths.iter().zip(sizes).all(|(&k, &h)| k >= 1 && k <= h)
            && mask.widths[0] == sizes[0]
            && mask.widths.last() == sizes.last();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("subnetwork mask does not match the network layout"))
        }
    }

    pub(crate) fn widths_for<'a>(&'a self, mask: Option<&'a SubnetworkMask>) -> &'a [usize] {
        match mask {
            Some(m) => m.widths(),
            None => self.layout.sizes(),
        }
    }

    pub(crate) fn traces(&self, widths: &[usize], batch: &[f64]) -> Vec<Trace<f64>> {
        batch
            .chunks_exact(self.layout.input_dim())
            .map(|x| forward_trace(&self.layout, &self.theta, widths, x))
            .collect()
    }

    pub(crate) fn backward_traces(
        &self,
        widths: &[usize],
        traces: &[Trace<f64>],
        dlogits: &[f64],
        grad: &mut [f64],
    ) {
        let c = self.layout.classes();
        for (t, d) in traces.iter().zip(dlogits.chunks_exact(c)) {
            backward_trace(&self.layout, &self.theta, widths, t, d, grad);
        }
    }

    /// Gradient over `theta` of a batch loss whose gradient on the logits
    /// (`n x C`, row-major) is `upstream`. Coordinates the chosen path does not
    /// read are exactly zero.
    pub fn backward(
        &self,
        mask: Option<&SubnetworkMask>,
        batch: &[f64],
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        let n = self.check_batch(batch)?;
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        if upstream.len() != n * self.layout.classes() {
            return Err(Error::invalid(format!(
                "upstream gradient has {} values, expected {}",
                upstream.len(),
                n * self.layout.classes()
            )));
        }
        let widths = self.widths_for(mask);
        let traces = self.traces(widths, batch);
        let mut grad = vec![0.0; self.theta.len()];
        self.backward_traces(widths, &traces, upstream, &mut grad);
        Ok(grad)
    }

    /// Softmax predictions (`n x C`) and features (`n x h_L`) for a batch.
    pub fn predict(&self, batch: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_batch(batch)?;
        let c = self.layout.classes();
        let mut probs = Vec::with_capacity(batch.len() / self.layout.input_dim() * c);
        let mut feats = Vec::new();
        let mut p = vec![0.0; c];
        for t in self.traces(self.layout.sizes(), batch) {
            crate::prob::softmax_into(&t.logits, 1.0, &mut p);
            probs.extend_from_slice(&p);
            feats.extend_from_slice(t.features());
        }
        Ok((probs, feats))
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        let sizes: Vec<String> = self.layout.sizes().iter().map(|s| s.to_string()).collect();
        let acts: Vec<String> = self.layout.activations().iter().map(|a| a.to_string()).collect();
        writeln!(
            w,
            "ddsr-checkpoint v1 sizes={} activations={} params={}",
            sizes.join(","),
            acts.join(","),
            self.theta.len()
        )?;
        for v in &self.theta {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_checkpoint(mut r: impl BufRead, path: &Path) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut fields = header.trim_end().split(' ');
        if fields.next() != Some("ddsr-checkpoint") || fields.next() != Some("v1") {
            return Err(Error::parse(path, 1, "not a v1 ddsr checkpoint"));
        }
        let (mut sizes, mut acts, mut params) = (None, None, None);
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::parse(path, 1, format!("bad header field `{kv}`")))?;
            match k {
                "sizes" => {
                    sizes = Some(
                        v.split(',')
                            .map(|s| s.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| Error::parse(path, 1, format!("sizes: {e}")))?,
                    )
                }
                "activations" => {
                    acts = Some(if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',')
                            .map(|s| s.parse::<Activation>())
                            .collect::<Result<Vec<_>>>()
                            .map_err(|e| Error::parse(path, 1, e.to_string()))?
                    })
                }
                "params" => {
                    params = Some(
                        v.parse::<usize>()
                            .map_err(|e| Error::parse(path, 1, format!("params: {e}")))?,
                    )
                }
                _ => return Err(Error::parse(path, 1, format!("unknown header field `{k}`"))),
            }
        }
        let (Some(sizes), Some(acts), Some(params)) = (sizes, acts, params) else {
            return Err(Error::parse(path, 1, "header is missing sizes, activations or params"));
        };
        let layout =
            LayerLayout::new(sizes, acts).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        if layout.param_count() != params {
            return Err(Error::parse(path, 1, "params does not match the layout"));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if bytes.len() != params * 8 {
            return Err(Error::parse(
                path,
                2,
                format!("expected {} payload bytes, found {}", params * 8, bytes.len()),
            ));
        }
        let theta = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Network::from_theta(layout, theta).map_err(|e| Error::parse(path, 2, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_checkpoint(std::io::BufReader::new(f), path)
    }
}

/// A gradient map `theta -> dL/dtheta` written over any [`Scalar`], so it
/// can be differentiated once more in forward mode.
pub trait GradientField {
    fn dim(&self) -> usize;
    fn gradient<S: Scalar>(&self, theta: &[S]) -> Vec<S>;
}

/// Exact Hessian-vector product `H v` at `theta`, by pushing the tangent `v`
/// through the gradient computation (forward-over-reverse).
pub fn hvp<G: GradientField>(theta: &[f64], v: &[f64], field: &G) -> Result<Vec<f64>> {
    if theta.len() != field.dim() || v.len() != field.dim() {
        return Err(Error::invalid(format!(
            "hvp: theta has {}, direction {}, field expects {}",
            theta.len(),
            v.len(),
            field.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("hvp direction is not finite"));
    }
    let seeded: Vec<Dual> = theta.iter().zip(v).map(|(&t, &d)| Dual::new(t, d)).collect();
    Ok(field.gradient(&seeded).into_iter().map(|g| g.tan).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

/// SGD with momentum, L2 weight decay and the `lr0 (1 + 10 p)^-0.75`
/// annealing schedule, `p` being the fraction of completed steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    velocity: Vec<f64>,
    completed_steps: usize,
    total_steps: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_count: usize, total_steps: usize) -> Self {
        Self {
            config,
            velocity: vec![0.0; param_count],
            completed_steps: 0,
            total_steps: total_steps.max(1),
        }
    }

    pub fn step_fraction(&self) -> f64 {
        (self.completed_steps as f64 / self.total_steps as f64).min(1.0)
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.lr0 * (1.0 + 10.0 * self.step_fraction()).powf(-0.75)
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn completed_steps(&self) -> usize {
        self.completed_steps
    }

    pub fn sgd_step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.velocity.len() || grad.len() != self.velocity.len() {
            return Err(Error::invalid("optimizer shape mismatch"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch: 0,
                batch: self.completed_steps,
                component: "gradient".into(),
            });
        }
        let lr = self.learning_rate();
        let OptimizerConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((t, v), &g) in theta.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = momentum * *v + g + weight_decay * *t;
            *t -= lr * *v;
        }
        self.completed_steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(act: Activation, seed: u64) -> Network {
        Network::init(LayerLayout::with_activation(vec![2, 16, 8, 4], act).unwrap(), seed)
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn layout_validation() {
        assert!(LayerLayout::with_activation(vec![4, 0, 3], Activation::Relu).is_err());
        assert!(LayerLayout::with_activation(vec![4, 3], Activation::Relu).is_err());
        assert!(LayerLayout::new(vec![4, 5, 3], vec![]).is_err());
        let l = LayerLayout::with_activation(vec![8, 64, 32, 4], Activation::Relu).unwrap();
        assert_eq!(l.param_count(), 8 * 64 + 64 + 64 * 32 + 32 + 32 * 4 + 4);
        assert_eq!(l.feature_dim(), 32);
        assert_eq!(l.offsets(1), (8 * 64 + 64, 8 * 64 + 64 + 64 * 32));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = small_net(Activation::Relu, 3);
        let b = small_net(Activation::Relu, 3);
        let c = small_net(Activation::Relu, 4);
        assert_eq!(a.theta(), b.theta());
        assert_ne!(a.theta(), c.theta());
        let (w0, b0) = a.layout().offsets(0);
        assert!(a.theta()[b0..b0 + 16].iter().all(|&v| v == 0.0));
        assert!(a.theta()[w0..b0].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_network_predicts_uniform() {
        let layout = LayerLayout::with_activation(vec![3, 5, 4], Activation::Relu).unwrap();
        let net = Network::from_theta(layout.clone(), vec![0.0; layout.param_count()]).unwrap();
        let (logits, feats) = net.forward_full(&[1.0, -2.0, 0.5]).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        assert_eq!(feats.len(), 5);
        let p = crate::prob::softmax(&logits, 1.0).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_computed_forward() {
        // 1 -> 1 -> 2 network: h = relu(w0 x + b0), z = (w1 h + c1, w2 h + c2)
        let layout = LayerLayout::with_activation(vec![1, 1, 2], Activation::Relu).unwrap();
        let theta = vec![2.0, 0.5, 3.0, -1.0, 0.25, 0.75];
        let net = Network::from_theta(layout, theta).unwrap();
        let (z, f) = net.forward_full(&[1.5]).unwrap();
        let h = 2.0f64 * 1.5 + 0.5;
        assert_eq!(f, vec![h]);
        assert_eq!(z, vec![3.0 * h + 0.25, -h + 0.75]);
        let (_, f) = net.forward_full(&[-1.0]).unwrap();
        assert_eq!(f, vec![0.0]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = small_net(Activation::Relu, 0);
        assert!(net.forward_full(&[1.0, 2.0, 3.0]).is_err());
        assert!(net.backward(None, &[1.0, 2.0, 3.0], &[0.0; 4]).is_err());
        assert!(net.backward(None, &[1.0, 2.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn mask_widths_and_nesting() {
        let layout = LayerLayout::with_activation(vec![8, 64, 32, 4], Activation::Relu).unwrap();
        let m = SubnetworkMask::new(&layout, 0.84).unwrap();
        assert_eq!(m.widths(), &[8, 54, 27, 4]);
        assert_eq!(SubnetworkMask::new(&layout, 0.01).unwrap().widths(), &[8, 1, 1, 4]);
        assert!(SubnetworkMask::new(&layout, 1.0).unwrap().is_full(&layout));
        assert!(SubnetworkMask::new(&layout, 0.0).is_err());
        assert!(SubnetworkMask::new(&layout, 1.1).is_err());
        let l10 = LayerLayout::with_activation(vec![2, 10, 2], Activation::Relu).unwrap();
        assert_eq!(SubnetworkMask::new(&l10, 0.3).unwrap().widths(), &[2, 3, 2]);

        let mut prev: Vec<usize> = Vec::new();
        for g in [0.1, 0.3, 0.64, 0.84, 1.0] {
            let k = SubnetworkMask::new(&layout, g).unwrap().kept_coordinates(&layout);
            assert!(prev.iter().all(|i| k.contains(i)));
            prev = k;
        }
        assert_eq!(prev.len(), layout.param_count());
    }

    #[test]
    fn full_mask_is_bitwise_identity() {
        let net = small_net(Activation::Relu, 11);
        let mask = SubnetworkMask::new(net.layout(), 1.0).unwrap();
        for x in random_batch(20, 2, 5).chunks_exact(2) {
            assert_eq!(net.forward_full(x).unwrap(), net.forward_sub(&mask, x).unwrap());
        }
    }

    #[test]
    fn single_unit_bottleneck_still_predicts() {
        let net = small_net(Activation::Relu, 2);
        let mask = SubnetworkMask::new(net.layout(), 0.01).unwrap();
        let (z, f) = net.forward_sub(&mask, &[0.3, -0.7]).unwrap();
        assert_eq!(f.len(), 1);
        assert!(crate::prob::softmax(&z, 1.0).is_ok());
    }

    #[test]
    fn non_kept_units_do_not_affect_subnetwork() {
        let mut net = small_net(Activation::Tanh, 8);
        let mask = SubnetworkMask::new(net.layout(), 0.5).unwrap();
        let x = [0.4, -1.3];
        let full_before = net.forward_full(&x).unwrap();
        let sub_before = net.forward_sub(&mask, &x).unwrap();
        // Zero the incoming weights of hidden unit 12 of layer 1 (not kept).
        let (w0, b0) = net.layout().offsets(0);
        for c in 0..2 {
            net.theta_mut()[w0 + 12 * 2 + c] = 0.0;
        }
        net.theta_mut()[b0 + 12] = 0.0;
        assert_ne!(net.forward_full(&x).unwrap(), full_before);
        assert_eq!(net.forward_sub(&mask, &x).unwrap(), sub_before);
    }

    /// `sum_i w_i . logits_i` has logit gradient `w`, which lets the parameter
    /// gradient be checked against finite differences of the forward pass.
    fn linear_probe(net: &Network, widths: &[usize], batch: &[f64], w: &[f64]) -> f64 {
        net.traces(widths, batch)
            .iter()
            .zip(w.chunks_exact(4))
            .map(|(t, wi)| t.logits.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = small_net(Activation::Tanh, 21);
        let batch = random_batch(8, 2, 22);
        let w = random_batch(8, 4, 23);
        for mask in [None, Some(SubnetworkMask::new(net.layout(), 0.6).unwrap())] {
            let widths = net.widths_for(mask.as_ref()).to_vec();
            let g = net.backward(mask.as_ref(), &batch, &w).unwrap();
            let kept = mask
                .as_ref()
                .map(|m| m.kept_coordinates(net.layout()))
                .unwrap_or_else(|| (0..net.param_count()).collect());
            for i in 0..net.param_count() {
                let h = 1e-5;
                let orig = net.theta()[i];
                net.theta_mut()[i] = orig + h;
                let fp = linear_probe(&net, &widths, &batch, &w);
                net.theta_mut()[i] = orig - h;
                let fm = linear_probe(&net, &widths, &batch, &w);
                net.theta_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", g[i]);
                if !kept.contains(&i) {
                    assert_eq!(g[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let net = small_net(Activation::Relu, 1);
        let batch = random_batch(8, 2, 2);
        let up = random_batch(8, 4, 3);
        let g = net.backward(None, &batch, &up).unwrap();
        let up3: Vec<f64> = up.iter().map(|v| 3.0 * v).collect();
        let g3 = net.backward(None, &batch, &up3).unwrap();
        for (a, b) in g.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
        let zero = net.backward(None, &batch, &[0.0; 32]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    struct Quadratic {
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
    }

    impl GradientField for Quadratic {
        fn dim(&self) -> usize {
            self.a[0].len()
        }
        // L = 0.5 |A t - b|^2, grad = A^T (A t - b)
        fn gradient<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
            let r: Vec<S> = self
                .a
                .iter()
                .zip(&self.b)
                .map(|(row, &bi)| {
                    let mut acc = S::cst(-bi);
                    for (&aij, &tj) in row.iter().zip(theta) {
                        acc += S::cst(aij) * tj;
                    }
                    acc
                })
                .collect();
            (0..self.dim())
                .map(|j| {
                    let mut acc = S::zero();
                    for (row, &ri) in self.a.iter().zip(&r) {
                        acc += S::cst(row[j]) * ri;
                    }
                    acc
                })
                .collect()
        }
    }

    #[test]
    fn hvp_on_quadratic_is_exact() {
        let a = vec![
            vec![1.0, 2.0, 0.0],
            vec![0.5, -1.0, 3.0],
            vec![2.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ];
        let q = Quadratic {
            a: a.clone(),
            b: vec![1.0, 2.0, 3.0, 4.0],
        };
        let theta = [0.3, -0.2, 0.9];
        let v = [1.0, -2.0, 0.5];
        let hv = hvp(&theta, &v, &q).unwrap();
        for j in 0..3 {
            let mut expect = 0.0;
            for k in 0..3 {
                let ata: f64 = a.iter().map(|row| row[j] * row[k]).sum();
                expect += ata * v[k];
            }
            assert_eq!(hv[j], expect);
        }
        assert!(hvp(&theta, &[0.0; 3], &q).unwrap().iter().all(|&x| x == 0.0));
        assert!(hvp(&theta, &[0.0; 2], &q).is_err());
    }

    #[test]
    fn sgd_examples() {
        let cfg = OptimizerConfig {
            lr0: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut opt = OptimizerState::new(cfg, 1, 10);
        assert_eq!(opt.learning_rate(), 0.1);
        let mut theta = [1.0];
        let grad = [theta[0]];
        opt.sgd_step(&mut theta, &grad).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-15);
        assert!((opt.learning_rate() - 0.1 * 2f64.powf(-0.75)).abs() < 1e-15);

        let mut opt = OptimizerState::new(cfg, 2, 10);
        let mut theta = [0.5, -0.25];
        opt.sgd_step(&mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, [0.5, -0.25]);
        assert!(matches!(
            opt.sgd_step(&mut theta, &[f64::NAN, 0.0]),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let cfg = OptimizerConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
        };
        let mut opt = OptimizerState::new(cfg, 1, 1_000_000);
        let mut theta = [2.0];
        opt.sgd_step(&mut theta, &[1.0]).unwrap();
        // v = 1 + 0.5 * 2 = 2, theta = 2 - 0.1 * 2
        assert!((theta[0] - 1.8).abs() < 1e-12);
        let lr = opt.learning_rate();
        opt.sgd_step(&mut theta, &[1.0]).unwrap();
        let v = 0.9 * 2.0 + 1.0 + 0.5 * 1.8;
        assert!((theta[0] - (1.8 - lr * v)).abs() < 1e-12);
    }

    #[test]
    fn subnetwork_updates_touch_only_kept_coordinates() {
        let mut net = small_net(Activation::Relu, 5);
        let mask = SubnetworkMask::new(net.layout(), 0.5).unwrap();
        let kept = mask.kept_coordinates(net.layout());
        let before = net.theta().to_vec();
        let cfg = OptimizerConfig {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = OptimizerState::new(cfg, net.param_count(), 10);
        for s in 0..5 {
            let batch = random_batch(8, 2, 100 + s);
            let up = random_batch(8, 4, 200 + s);
            let g = net.backward(Some(&mask), &batch, &up).unwrap();
            opt.sgd_step(net.theta_mut(), &g).unwrap();
        }
        for i in 0..net.param_count() {
            if !kept.contains(&i) {
                assert_eq!(net.theta()[i], before[i]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small_net(Activation::Tanh, 9);
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&buf[..header_end]).unwrap(),
            format!("ddsr-checkpoint v1 sizes=2,16,8,4 activations=tanh,tanh params={}", net.param_count())
        );
        assert_eq!(buf.len(), header_end + 1 + 8 * net.param_count());
        let back = Network::read_checkpoint(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, net);
        assert!(Network::read_checkpoint(&buf[..buf.len() - 3], Path::new("mem")).is_err());
        assert!(Network::read_checkpoint(&b"garbage\n"[..], Path::new("mem")).is_err());
    }
}
