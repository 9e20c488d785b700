//! Training loss: cross-entropy plus the KL penalties of the four gate
//! masks and the feature mask, plus an optional group-lasso term over the
//! per-hidden-unit weight groups.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cell::Gate;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::network::{ForwardMode, GateParams, ModelGrads, SequenceClassifier};
use crate::tensor::{GradientSet, Objective, ParamStore, SeededRng, Tensor};

/// Group norms below this are reported as dead.
pub const DEAD_GROUP_NORM: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub beta_v: f64,
    pub lambda_gl: f64,
    pub ce_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 1.0,
            beta_v: 1.0,
            lambda_gl: 0.0,
            ce_weight: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.beta) && ok(self.beta_v) && ok(self.lambda_gl)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.ce_weight.is_finite() && self.ce_weight > 0.0) {
            return Err(Error::Config("ce_weight must be positive".into()));
        }
        Ok(())
    }
}

/// −log softmax(logits)[label].
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Euclidean norm of each hidden unit's weight group: row j of the eight
/// input and recurrent matrices, column j of the four recurrent matrices
/// (diagonal counted once), column j of the head, and the four biases at j.
pub fn group_norms(m: &SequenceClassifier) -> Vec<f64> {
    let n = m.dims.n;
    let mut sq = vec![0.0; n];
    visit_groups(m, |j, v| sq[j] += v * v);
    sq.into_iter().map(f64::sqrt).collect()
}

pub fn group_lasso(m: &SequenceClassifier) -> f64 {
    group_norms(m).iter().sum()
}

/// Calls `f(group, value)` once per (group, member) pair.
fn visit_groups(m: &SequenceClassifier, mut f: impl FnMut(usize, f64)) {
    let (n, a) = (m.dims.n, m.dims.a);
    let p = &m.lstm;
    for k in 0..4 {
        for j in 0..n {
            p.w[k].row(j).iter().for_each(|&v| f(j, v));
            p.u[k].row(j).iter().for_each(|&v| f(j, v));
            for r in 0..n {
                if r != j {
                    f(j, p.u[k].at(r, j));
                }
            }
            f(j, p.b[k][j]);
        }
    }
    for j in 0..n {
        for r in 0..a {
            f(j, m.head_w.at(r, j));
        }
    }
}

/// Adds `scale · ∂ group_lasso` to `grads`; groups with zero norm
/// contribute nothing.
pub fn group_lasso_gradient(m: &SequenceClassifier, scale: f64, grads: &mut ModelGrads) {
    let (n, a, d) = (m.dims.n, m.dims.a, m.dims.d);
    let norms = group_norms(m);
    let inv: Vec<f64> = norms
        .iter()
        .map(|&r| if r > 0.0 { scale / r } else { 0.0 })
        .collect();
    let p = &m.lstm;
    for k in 0..4 {
        for j in 0..n {
            for q in 0..d {
                grads.lstm.w[k][j * d + q] += inv[j] * p.w[k].at(j, q);
            }
            for q in 0..n {
                let v = p.u[k].at(j, q);
                // row j belongs to group j; off-diagonal also to group q via its column
                grads.lstm.u[k][j * n + q] += inv[j] * v;
                if q != j {
                    grads.lstm.u[k][j * n + q] += inv[q] * v;
                }
            }
            grads.lstm.b[k][j] += inv[j] * p.b[k][j];
        }
    }
    for r in 0..a {
        for j in 0..n {
            grads.head_w[r * n + j] += inv[j] * m.head_w.at(r, j);
        }
    }
}

/// The individual terms of one loss evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean cross-entropy over the batch.
    pub ce: f64,
    /// KL penalty per gate, `i, f, o, g` order.
    pub kl_gates: [f64; 4],
    pub kl_feature: f64,
    pub group_lasso: f64,
    pub total: f64,
    /// Sequences whose argmax matched the label.
    pub correct: usize,
    pub count: usize,
}

pub fn kl_terms(m: &SequenceClassifier) -> ([f64; 4], f64) {
    let gates = match &m.gates {
        GateParams::Masks(g) => std::array::from_fn(|k| g[k].kl_penalty()),
        GateParams::Scales(_) => [0.0; 4],
    };
    let feature = m.feature_gate.as_ref().map_or(0.0, |g| g.kl_penalty());
    (gates, feature)
}

fn regularizers(m: &SequenceClassifier, cfg: &ObjectiveConfig, out: &mut LossBreakdown) {
    let (gates, feature) = kl_terms(m);
    out.kl_gates = gates;
    out.kl_feature = feature;
    out.group_lasso = if cfg.lambda_gl > 0.0 { group_lasso(m) } else { 0.0 };
    out.total = cfg.ce_weight * out.ce
        + cfg.beta * gates.iter().sum::<f64>()
        + cfg.beta_v * feature
        + cfg.lambda_gl * out.group_lasso;
}

/// Loss over `batch` with masks and dropout drawn per sequence from
/// streams forked off `rng` in batch order.
pub fn total_loss(
    m: &SequenceClassifier,
    batch: &[&Sample],
    cfg: &ObjectiveConfig,
    mode: ForwardMode,
    rng: &mut SeededRng,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = LossBreakdown {
        count: batch.len(),
        ..Default::default()
    };
    for s in batch {
        let logits = m.forward(&s.x, mode, &mut rng.fork())?;
        out.ce += cross_entropy(&logits, s.label);
        out.correct += usize::from(argmax(&logits) == s.label);
    }
    out.ce /= batch.len() as f64;
    regularizers(m, cfg, &mut out);
    check_finite(&out)?;
    Ok(out)
}

/// [`total_loss`] together with its gradient. Consumes `rng` exactly like
/// [`total_loss`], so both see the same noise.
pub fn loss_and_gradients(
    m: &SequenceClassifier,
    batch: &[&Sample],
    cfg: &ObjectiveConfig,
    mode: ForwardMode,
    rng: &mut SeededRng,
) -> Result<(LossBreakdown, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = LossBreakdown {
        count: batch.len(),
        ..Default::default()
    };
    let mut grads = ModelGrads::zeros(m);
    let w = cfg.ce_weight / batch.len() as f64;
    for s in batch {
        let trace = m.forward_traced(&s.x, mode, &mut rng.fork())?;
        out.ce += cross_entropy(&trace.logits, s.label);
        out.correct += usize::from(argmax(&trace.logits) == s.label);
        let mut dlogits = softmax(&trace.logits);
        dlogits[s.label] -= 1.0;
        dlogits.iter_mut().for_each(|g| *g *= w);
        let g = m.backward(&trace, &dlogits);
        grads.add_scaled(&g, 1.0);
    }
    out.ce /= batch.len() as f64;
    regularizers(m, cfg, &mut out);
    check_finite(&out)?;

    if let (GateParams::Masks(gs), Some(dst)) = (&m.gates, grads.gates.as_mut()) {
        for k in 0..4 {
            let (dmu, drho) = gs[k].kl_gradient();
            for j in 0..m.dims.n {
                dst[k].0[j] += cfg.beta * dmu[j];
                dst[k].1[j] += cfg.beta * drho[j];
            }
        }
    }
    if let (Some(g), Some((dmu, drho))) = (&m.feature_gate, grads.feature.as_mut()) {
        let (gmu, grho) = g.kl_gradient();
        for q in 0..g.len() {
            dmu[q] += cfg.beta_v * gmu[q];
            drho[q] += cfg.beta_v * grho[q];
        }
    }
    if cfg.lambda_gl > 0.0 {
        group_lasso_gradient(m, cfg.lambda_gl, &mut grads);
    }
    Ok((out, grads))
}

fn check_finite(l: &LossBreakdown) -> Result<()> {
    if l.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "loss is {} (ce {}, kl {:?}, kl_v {})",
            l.total, l.ce, l.kl_gates, l.kl_feature
        )))
    }
}

/// The full loss as a function of a parameter store, with the noise
/// stream pinned by `seed` so that repeated evaluations are comparable.
pub struct TotalLossObjective<'a> {
    pub template: SequenceClassifier,
    pub batch: Vec<&'a Sample>,
    pub cfg: ObjectiveConfig,
    pub mode: ForwardMode,
    pub seed: u64,
}

impl TotalLossObjective<'_> {
    fn model(&self, store: &ParamStore) -> Result<SequenceClassifier> {
        let mut m = self.template.clone();
        m.load_param_store(store)?;
        Ok(m)
    }
}

impl Objective for TotalLossObjective<'_> {
    fn value(&self, store: &ParamStore) -> Result<f64> {
        let m = self.model(store)?;
        Ok(total_loss(&m, &self.batch, &self.cfg, self.mode, &mut SeededRng::new(self.seed))?.total)
    }

    fn value_and_gradients(&self, store: &ParamStore) -> Result<(f64, GradientSet)> {
        let m = self.model(store)?;
        let (l, g) = loss_and_gradients(&m, &self.batch, &self.cfg, self.mode, &mut SeededRng::new(self.seed))?;
        Ok((l.total, g.to_gradient_set(&m)))
    }
}

/// log(mean(v)) − mean(log v) for positive values.
pub fn jensen_gap(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mean_log = values.iter().map(|v| v.ln()).sum::<f64>() / n;
    mean.ln() - mean_log
}

/// Squared activations below this are clamped before taking logs.
pub const PSI_FLOOR: f64 = 1e-12;

/// Per-unit Jensen gap of the squared pre-mask activation of `gate` at the
/// last timestep, over a batch evaluated deterministically.
pub fn estimate_psi(m: &SequenceClassifier, batch: &[&Sample], gate: Gate) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = m.dims.n;
    let mut squares = vec![Vec::with_capacity(batch.len()); n];
    let mut clamped = 0usize;
    for s in batch {
        let trace = m.forward_traced(&s.x, ForwardMode::EVAL, &mut SeededRng::new(0))?;
        let last = trace.run.steps.last().expect("non-empty run");
        for j in 0..n {
            let f2 = last.act[gate.index()][j].powi(2);
            if f2 < PSI_FLOOR {
                clamped += 1;
            }
            squares[j].push(f2.max(PSI_FLOOR));
        }
    }
    if clamped > 0 {
        warn!("psi: clamped {clamped} squared activations below {PSI_FLOOR:e}");
    }
    Ok(squares.iter().map(|v| jensen_gap(v)).collect())
}

/// Convenience for building a one-sample batch from a tensor and label.
pub fn sample(x: Tensor, label: usize) -> Sample {
    Sample { x, label }
}
