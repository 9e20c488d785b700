//! Structural pruning of a trained model.
//!
//! Units whose α ratio falls under a threshold are removed by deleting the
//! matching rows and columns. The feature mask is linear in front of the
//! input matrices, so its means fold into the kept columns of every `W`;
//! gate means cannot pass through the gate nonlinearities and are kept as
//! fixed per-unit scales.

use serde::{Deserialize, Serialize};

use crate::cell::{Gate, LstmParams};
use crate::error::{Error, Result};
use crate::network::{GateParams, InputSelection, SequenceClassifier};
use crate::tensor::Tensor;
use crate::vib::DEFAULT_ALPHA_THRESHOLD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenRule {
    /// Prune unit j when any of the i, g or o masks is below threshold at j.
    /// Each of those alone forces h_j ≡ 0 from the zero initial state.
    #[default]
    AnyOfIgo,
    /// Prune unit j only when all four masks are below threshold at j.
    AllGates,
}

impl std::str::FromStr for HiddenRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any_of_igo" | "any-of-igo" => Ok(HiddenRule::AnyOfIgo),
            "all_gates" | "all-gates" => Ok(HiddenRule::AllGates),
            other => Err(Error::Config(format!("unknown hidden rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub feature: f64,
    pub gate: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            feature: DEFAULT_ALPHA_THRESHOLD,
            gate: DEFAULT_ALPHA_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub kept_features: Vec<usize>,
    pub kept_hidden: Vec<usize>,
    pub hidden_rule: HiddenRule,
    pub thresholds: Thresholds,
}

const IGO: [Gate; 3] = [Gate::Input, Gate::Cell, Gate::Output];

pub fn make_plan(m: &SequenceClassifier, t_gate: f64, t_feature: f64, rule: HiddenRule) -> Result<PrunePlan> {
    if !(t_gate > 0.0 && t_feature > 0.0) {
        return Err(Error::Config("thresholds must be positive".into()));
    }
    let (d, n) = (m.dims.d, m.dims.n);
    let kept_features = match &m.feature_gate {
        Some(g) => g.retained_indices(t_feature),
        None => (0..d).collect(),
    };

    // Per gate, whether unit j survives on its own.
    let alive: [Vec<bool>; 4] = match &m.gates {
        GateParams::Masks(gs) => std::array::from_fn(|k| gs[k].alpha_ratio().iter().map(|&a| a >= t_gate).collect()),
        GateParams::Scales(s) => std::array::from_fn(|k| s[k].iter().map(|&v| v != 0.0).collect()),
    };
    let kept_hidden: Vec<usize> = (0..n)
        .filter(|&j| match rule {
            HiddenRule::AnyOfIgo => IGO.iter().all(|g| alive[g.index()][j]),
            HiddenRule::AllGates => alive.iter().any(|a| a[j]),
        })
        .collect();

    if kept_features.is_empty() {
        return Err(Error::DegeneratePlan(format!(
            "no input feature has alpha >= {t_feature}; the model would ignore its input"
        )));
    }
    if kept_hidden.is_empty() {
        return Err(Error::DegeneratePlan(format!(
            "no hidden unit survives gate threshold {t_gate} under {rule:?}"
        )));
    }
    Ok(PrunePlan {
        kept_features,
        kept_hidden,
        hidden_rule: rule,
        thresholds: Thresholds {
            feature: t_feature,
            gate: t_gate,
        },
    })
}

fn check_indices(idx: &[usize], bound: usize, what: &str) -> Result<()> {
    let sorted = idx.windows(2).all(|w| w[0] < w[1]);
    if !sorted || idx.iter().any(|&i| i >= bound) || idx.is_empty() {
        return Err(Error::Config(format!(
            "plan {what} must be non-empty, strictly increasing and below {bound}"
        )));
    }
    Ok(())
}

/// Builds the compact model for `plan`: shrunk matrices, feature means
/// folded into `W`, gate means stored as fixed scales, no VIB parameters.
pub fn apply_plan(m: &SequenceClassifier, plan: &PrunePlan) -> Result<SequenceClassifier> {
    let (d, n) = (m.dims.d, m.dims.n);
    check_indices(&plan.kept_features, d, "kept_features")?;
    check_indices(&plan.kept_hidden, n, "kept_hidden")?;
    let (fk, hk) = (&plan.kept_features, &plan.kept_hidden);

    let fold: Option<Vec<f64>> = m.feature_gate.as_ref().map(|g| fk.iter().map(|&q| g.mu[q]).collect());
    let w = std::array::from_fn(|k| {
        let mut t = m.lstm.w[k].select(hk, fk);
        if let Some(scale) = &fold {
            let cols = fk.len();
            for row in t.data_mut().chunks_exact_mut(cols) {
                row.iter_mut().zip(scale).for_each(|(v, s)| *v *= s);
            }
        }
        t
    });
    let u = std::array::from_fn(|k| m.lstm.u[k].select(hk, hk));
    let b = std::array::from_fn(|k| hk.iter().map(|&j| m.lstm.b[k][j]).collect());
    let lstm = LstmParams::new(w, u, b)?;

    let scales = std::array::from_fn(|k| match &m.gates {
        GateParams::Masks(gs) => hk.iter().map(|&j| gs[k].mu[j]).collect(),
        GateParams::Scales(s) => hk.iter().map(|&j| s[k][j]).collect(),
    });
    let rows: Vec<usize> = (0..m.dims.a).collect();
    let head_w = m.head_w.select(&rows, hk);

    let full_keep = fk.len() == d && fk.iter().enumerate().all(|(i, &q)| i == q);
    let input_select = match (&m.input_select, full_keep) {
        (None, true) => None,
        (None, false) => Some(InputSelection {
            source_dim: d,
            indices: fk.clone(),
        }),
        (Some(sel), _) => Some(InputSelection {
            source_dim: sel.source_dim,
            indices: fk.iter().map(|&q| sel.indices[q]).collect(),
        }),
    };

    let mut dims = m.dims;
    dims.d = fk.len();
    dims.n = hk.len();
    let out = SequenceClassifier {
        dims,
        feature_gate: None,
        lstm,
        gates: GateParams::Scales(scales),
        head_w,
        head_b: m.head_b.clone(),
        dropout_p: m.dropout_p,
        input_select,
        meta: m.meta.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Copy of `m` with the means (or scales) of every pruned unit set to
/// exactly zero in all four gates, and pruned features' means zeroed.
pub fn zero_forced(m: &SequenceClassifier, plan: &PrunePlan) -> SequenceClassifier {
    let mut out = m.clone();
    let pruned_h: Vec<usize> = (0..m.dims.n).filter(|j| !plan.kept_hidden.contains(j)).collect();
    let pruned_f: Vec<usize> = (0..m.dims.d).filter(|q| !plan.kept_features.contains(q)).collect();
    if let Some(g) = &mut out.feature_gate {
        pruned_f.iter().for_each(|&q| g.mu[q] = 0.0);
    }
    match &mut out.gates {
        GateParams::Masks(gs) => {
            for g in gs.iter_mut() {
                pruned_h.iter().for_each(|&j| g.mu[j] = 0.0);
            }
        }
        GateParams::Scales(s) => {
            for v in s.iter_mut() {
                pruned_h.iter().for_each(|&j| v[j] = 0.0);
            }
        }
    }
    out
}

/// Max absolute logit difference between `compact` and the zero-forced
/// `original` over `inputs`, both evaluated deterministically.
pub fn verify_equivalence(
    original: &SequenceClassifier,
    compact: &SequenceClassifier,
    plan: &PrunePlan,
    inputs: &[Tensor],
) -> Result<f64> {
    let reference = zero_forced(original, plan);
    max_logit_deviation(&reference, compact, inputs)
}

pub fn max_logit_deviation(a: &SequenceClassifier, b: &SequenceClassifier, inputs: &[Tensor]) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in inputs {
        let la = a.predict(x)?;
        let lb = b.predict(x)?;
        for (p, q) in la.iter().zip(&lb) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(worst)
}

/// Hidden units a plan removes.
pub fn pruned_hidden(m: &SequenceClassifier, plan: &PrunePlan) -> Vec<usize> {
    (0..m.dims.n).filter(|j| !plan.kept_hidden.contains(j)).collect()
}

pub fn keep_all(m: &SequenceClassifier) -> PrunePlan {
    PrunePlan {
        kept_features: (0..m.dims.d).collect(),
        kept_hidden: (0..m.dims.n).collect(),
        hidden_rule: HiddenRule::AnyOfIgo,
        thresholds: Thresholds::default(),
    }
}
