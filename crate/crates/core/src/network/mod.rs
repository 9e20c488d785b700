//! Feature gate → masked LSTM → dropout → dense softmax head.

mod container;

pub use container::{load_model, read_model, save_model, write_model, ModelManifest, TensorEntry, FORMAT_VERSION, MAGIC};

use serde::{Deserialize, Serialize};

use crate::cell::{self, Gate, GateVecs, LstmGrads, LstmParams, Unrolled};
use crate::error::{Error, Result};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, GradientSet, ParamGroup, ParamStore, SeededRng, Tensor};
use crate::vib::{MaskMode, VibGate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// LSTM input width.
    pub d: usize,
    /// Hidden units.
    pub n: usize,
    /// Classes.
    pub a: usize,
    /// Timesteps per sequence.
    #[serde(rename = "T")]
    pub t: usize,
}

impl Dims {
    pub fn new(d: usize, n: usize, a: usize, t: usize) -> Result<Self> {
        if d == 0 || n == 0 || a < 2 || t == 0 {
            return Err(Error::Config(format!(
                "invalid dims d={d} n={n} a={a} T={t}"
            )));
        }
        Ok(Dims { d, n, a, t })
    }
}

/// Per-gate multipliers: trainable VIB masks, or fixed scales in an
/// exported model.
#[derive(Debug, Clone, PartialEq)]
pub enum GateParams {
    Masks(Box<[VibGate; 4]>),
    Scales(GateVecs),
}

impl GateParams {
    pub fn masks(&self) -> Option<&[VibGate; 4]> {
        match self {
            GateParams::Masks(m) => Some(m),
            GateParams::Scales(_) => None,
        }
    }

    pub fn unit_scales(n: usize) -> Self {
        GateParams::Scales(std::array::from_fn(|_| vec![1.0; n]))
    }
}

/// Columns of the raw input a compact model reads, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSelection {
    pub source_dim: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub beta: f64,
    pub beta_v: f64,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClassifier {
    pub dims: Dims,
    pub feature_gate: Option<VibGate>,
    pub lstm: LstmParams,
    pub gates: GateParams,
    /// a × n
    pub head_w: Tensor,
    pub head_b: Vec<f64>,
    pub dropout_p: f64,
    pub input_select: Option<InputSelection>,
    pub meta: TrainingMeta,
}

/// How masks are drawn and whether dropout is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub masks: MaskMode,
    pub dropout: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        masks: MaskMode::Stochastic,
        dropout: true,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        masks: MaskMode::Deterministic,
        dropout: false,
    };
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Raw input rows after column selection.
    pub inputs: Vec<Vec<f64>>,
    pub feature_mask: Option<Vec<f64>>,
    pub feature_eps: Option<Vec<f64>>,
    pub gate_masks: GateVecs,
    pub gate_eps: Option<GateVecs>,
    pub run: Unrolled,
    /// Inverted-dropout multipliers on h_T (0 or 1/(1-p)).
    pub dropout: Option<Vec<f64>>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub lstm_count: usize,
    pub head_count: usize,
    pub vib_count: usize,
    pub scale_count: usize,
    pub total: usize,
}

pub fn count_lstm(d: usize, n: usize) -> usize {
    4 * (n * d + n * n + n)
}

pub fn compression_ratio(dense_count: usize, pruned_count: usize) -> Result<f64> {
    compression_ratio_f64(dense_count as f64, pruned_count as f64)
}

pub fn compression_ratio_f64(dense: f64, pruned: f64) -> Result<f64> {
    if pruned <= 0.0 {
        return Err(Error::Numeric("compression ratio with zero pruned parameters".into()));
    }
    Ok(dense / pruned)
}

impl SequenceClassifier {
    /// Zero-initialized trainable model with unit masks at σ = `sigma`.
    pub fn zeros(dims: Dims, sigma: f64, feature_gate: bool, gate_masks: bool) -> Self {
        let unit = |len| VibGate::from_mu_sigma(vec![1.0; len], &vec![sigma; len]).expect("sigma > 0");
        SequenceClassifier {
            dims,
            feature_gate: feature_gate.then(|| unit(dims.d)),
            lstm: LstmParams::zeros(dims.n, dims.d),
            gates: if gate_masks {
                GateParams::Masks(Box::new(std::array::from_fn(|_| unit(dims.n))))
            } else {
                GateParams::unit_scales(dims.n)
            },
            head_w: Tensor::zeros(&[dims.a, dims.n]),
            head_b: vec![0.0; dims.a],
            dropout_p: 0.0,
            input_select: None,
            meta: TrainingMeta::default(),
        }
    }

    pub fn is_compact(&self) -> bool {
        matches!(self.gates, GateParams::Scales(_)) && self.feature_gate.is_none()
    }

    /// Width of the raw input rows this model accepts.
    pub fn input_dim(&self) -> usize {
        self.input_select
            .as_ref()
            .map_or(self.dims.d, |s| s.source_dim)
    }

    /// Checks every tensor against `dims`.
    pub fn validate(&self) -> Result<()> {
        let Dims { d, n, a, .. } = self.dims;
        if self.lstm.hidden() != n || self.lstm.input() != d {
            return Err(Error::dim("model.lstm", &[self.lstm.hidden(), self.lstm.input()], &[n, d]));
        }
        if let Some(g) = &self.feature_gate {
            if g.len() != d {
                return Err(Error::dim("model.feature_gate", &[g.len()], &[d]));
            }
        }
        match &self.gates {
            GateParams::Masks(m) => {
                for g in m.iter() {
                    if g.len() != n {
                        return Err(Error::dim("model.gate_mask", &[g.len()], &[n]));
                    }
                }
            }
            GateParams::Scales(s) => {
                for v in s {
                    if v.len() != n {
                        return Err(Error::dim("model.gate_scale", &[v.len()], &[n]));
                    }
                }
            }
        }
        if self.head_w.shape() != [a, n] || self.head_b.len() != a {
            return Err(Error::dim("model.head", self.head_w.shape(), &[a, n]));
        }
        if let Some(sel) = &self.input_select {
            if sel.indices.len() != d || sel.indices.iter().any(|&i| i >= sel.source_dim) {
                return Err(Error::Config("input selection inconsistent with dims".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let Dims { d, n, a, .. } = self.dims;
        let lstm_count = count_lstm(d, n);
        let head_count = a * n + a;
        let mut vib_count = 0;
        let mut scale_count = 0;
        if let Some(g) = &self.feature_gate {
            vib_count += 2 * g.len();
        }
        match &self.gates {
            GateParams::Masks(_) => vib_count += 8 * n,
            GateParams::Scales(_) => scale_count += 4 * n,
        }
        ParamCounts {
            lstm_count,
            head_count,
            vib_count,
            scale_count,
            total: lstm_count + head_count + vib_count + scale_count,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.dims.t, self.input_dim()];
        if x.shape() != want {
            return Err(Error::dim("forward.input", x.shape(), &want));
        }
        Ok(())
    }

    fn select_rows(&self, x: &Tensor) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|r| match &self.input_select {
                Some(sel) => sel.indices.iter().map(|&c| x.row(r)[c]).collect(),
                None => x.row(r).to_vec(),
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode, rng: &mut SeededRng) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x, mode, rng)?.logits)
    }

    /// Deterministic forward without dropout.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.forward(x, ForwardMode::EVAL, &mut SeededRng::new(0))
    }

    /// Forward pass keeping the intermediates for backpropagation. Noise is
    /// drawn in a fixed order: feature mask, the four gate masks, dropout.
    pub fn forward_traced(&self, x: &Tensor, mode: ForwardMode, rng: &mut SeededRng) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let inputs = self.select_rows(x);
        let (n, stochastic) = (self.dims.n, mode.masks == MaskMode::Stochastic);

        let (feature_mask, feature_eps) = match &self.feature_gate {
            Some(g) if stochastic => {
                let eps = rng.normals(g.len());
                (Some(g.mask_with_noise(&eps)), Some(eps))
            }
            Some(g) => (Some(g.mu.clone()), None),
            None => (None, None),
        };
        let (gate_masks, gate_eps): (GateVecs, Option<GateVecs>) = match &self.gates {
            GateParams::Masks(m) if stochastic => {
                let eps: GateVecs = std::array::from_fn(|_| rng.normals(n));
                (std::array::from_fn(|k| m[k].mask_with_noise(&eps[k])), Some(eps))
            }
            GateParams::Masks(m) => (std::array::from_fn(|k| m[k].mu.clone()), None),
            GateParams::Scales(s) => (s.clone(), None),
        };

        let lstm_inputs: Vec<Vec<f64>> = match &feature_mask {
            Some(z) => inputs
                .iter()
                .map(|row| row.iter().zip(z).map(|(x, z)| x * z).collect())
                .collect(),
            None => inputs.clone(),
        };
        let run = cell::run_sequence(&self.lstm, Some(&gate_masks), lstm_inputs.iter().map(|v| v.as_slice()))?;

        let dropout = if mode.dropout && self.dropout_p > 0.0 {
            let keep = 1.0 - self.dropout_p;
            Some(
                (0..n)
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        let features: Vec<f64> = match &dropout {
            Some(m) => run.h_last.iter().zip(m).map(|(h, m)| h * m).collect(),
            None => run.h_last.clone(),
        };
        let mut logits = self.head_b.clone();
        matvec_acc(self.head_w.data(), &features, &mut logits);

        Ok(ForwardTrace {
            inputs,
            feature_mask,
            feature_eps,
            gate_masks,
            gate_eps,
            run,
            dropout,
            features,
            logits,
        })
    }

    /// Gradients of a loss with respect to every trainable parameter given
    /// ∂loss/∂logits for one traced forward pass.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64]) -> ModelGrads {
        let Dims { d, n, a, .. } = self.dims;
        let mut grads = ModelGrads::zeros(self);
        outer_acc(&mut grads.head_w, dlogits, &trace.features);
        for (g, dl) in grads.head_b.iter_mut().zip(dlogits) {
            *g += dl;
        }
        let mut dh = vec![0.0; n];
        matvec_t_acc(self.head_w.data(), dlogits, &mut dh);
        if let Some(m) = &trace.dropout {
            dh.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
        }
        debug_assert_eq!(a, dlogits.len());

        let seq = cell::backward(&self.lstm, Some(&trace.gate_masks), &trace.run, &dh);
        grads.lstm = seq.params;

        if let (GateParams::Masks(m), Some(gm)) = (&self.gates, grads.gates.as_mut()) {
            for k in 0..4 {
                let dsig = m[k].sigma_grad();
                for j in 0..n {
                    let dz = seq.masks[k][j];
                    gm[k].0[j] += dz;
                    if let Some(eps) = &trace.gate_eps {
                        gm[k].1[j] += dz * eps[k][j] * dsig[j];
                    }
                }
            }
        }
        if let (Some(g), Some((dmu, drho))) = (&self.feature_gate, grads.feature.as_mut()) {
            let mut dz = vec![0.0; d];
            for (dv, x) in seq.inputs.iter().zip(&trace.inputs) {
                for q in 0..d {
                    dz[q] += dv[q] * x[q];
                }
            }
            let dsig = g.sigma_grad();
            for q in 0..d {
                dmu[q] += dz[q];
                if let Some(eps) = &trace.feature_eps {
                    drho[q] += dz[q] * eps[q] * dsig[q];
                }
            }
        }
        grads
    }

    /// Visits every trainable parameter with its name and group.
    pub fn visit_params(&self, mut f: impl FnMut(&str, ParamGroup, &[usize], &[f64])) {
        let Dims { d, n, a, .. } = self.dims;
        if let Some(g) = &self.feature_gate {
            f("feature_gate.mu", ParamGroup::Vib, &[d], &g.mu);
            f("feature_gate.rho", ParamGroup::Vib, &[d], &g.rho);
        }
        for gate in Gate::ALL {
            let k = gate.index();
            f(&w_name(gate), ParamGroup::Main, &[n, d], self.lstm.w[k].data());
            f(&u_name(gate), ParamGroup::Main, &[n, n], self.lstm.u[k].data());
            f(&b_name(gate), ParamGroup::Main, &[n], &self.lstm.b[k]);
        }
        if let GateParams::Masks(m) = &self.gates {
            for gate in Gate::ALL {
                let g = &m[gate.index()];
                f(&format!("gate_{}.mu", gate.letter()), ParamGroup::Vib, &[n], &g.mu);
                f(&format!("gate_{}.rho", gate.letter()), ParamGroup::Vib, &[n], &g.rho);
            }
        }
        f("head.W", ParamGroup::Main, &[a, n], self.head_w.data());
        f("head.b", ParamGroup::Main, &[a], &self.head_b);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut [f64])) {
        if let Some(g) = &mut self.feature_gate {
            f("feature_gate.mu", ParamGroup::Vib, &mut g.mu);
            f("feature_gate.rho", ParamGroup::Vib, &mut g.rho);
        }
        for gate in Gate::ALL {
            let k = gate.index();
            f(&w_name(gate), ParamGroup::Main, self.lstm.w[k].data_mut());
            f(&u_name(gate), ParamGroup::Main, self.lstm.u[k].data_mut());
            f(&b_name(gate), ParamGroup::Main, &mut self.lstm.b[k]);
        }
        if let GateParams::Masks(m) = &mut self.gates {
            for gate in Gate::ALL {
                let g = &mut m[gate.index()];
                f(&format!("gate_{}.mu", gate.letter()), ParamGroup::Vib, &mut g.mu);
                f(&format!("gate_{}.rho", gate.letter()), ParamGroup::Vib, &mut g.rho);
            }
        }
        f("head.W", ParamGroup::Main, self.head_w.data_mut());
        f("head.b", ParamGroup::Main, &mut self.head_b);
    }

    pub fn param_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        self.visit_params(|name, group, shape, data| {
            let t = Tensor::new(shape.to_vec(), data.to_vec()).expect("consistent shapes");
            store.register(name, group, t).expect("unique names");
        });
        store
    }

    /// Copies values from `store` into this model's parameters.
    pub fn load_param_store(&mut self, store: &ParamStore) -> Result<()> {
        let mut missing = None;
        self.visit_params_mut(|name, _, dst| match store.get(name) {
            Ok(t) if t.len() == dst.len() => dst.copy_from_slice(t.data()),
            _ => missing = Some(name.to_string()),
        });
        match missing {
            Some(name) => Err(Error::MissingParam(name)),
            None => Ok(()),
        }
    }
}

pub(crate) fn w_name(g: Gate) -> String {
    format!("lstm.W_{}x", g.letter())
}

pub(crate) fn u_name(g: Gate) -> String {
    format!("lstm.U_{}h", g.letter())
}

pub(crate) fn b_name(g: Gate) -> String {
    format!("lstm.b_{}", g.letter())
}

/// Typed gradient buffers mirroring [`SequenceClassifier`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub feature: Option<(Vec<f64>, Vec<f64>)>,
    pub lstm: LstmGrads,
    pub gates: Option<[(Vec<f64>, Vec<f64>); 4]>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros(m: &SequenceClassifier) -> Self {
        let Dims { d, n, a, .. } = m.dims;
        ModelGrads {
            feature: m.feature_gate.as_ref().map(|_| (vec![0.0; d], vec![0.0; d])),
            lstm: LstmGrads::zeros(n, d),
            gates: m
                .gates
                .masks()
                .map(|_| std::array::from_fn(|_| (vec![0.0; n], vec![0.0; n]))),
            head_w: vec![0.0; a * n],
            head_b: vec![0.0; a],
        }
    }

    /// Visits buffers in the same order and with the same names as
    /// [`SequenceClassifier::visit_params`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        if let Some((mu, rho)) = &mut self.feature {
            f("feature_gate.mu", mu);
            f("feature_gate.rho", rho);
        }
        for gate in Gate::ALL {
            let k = gate.index();
            f(&w_name(gate), &mut self.lstm.w[k]);
            f(&u_name(gate), &mut self.lstm.u[k]);
            f(&b_name(gate), &mut self.lstm.b[k]);
        }
        if let Some(gs) = &mut self.gates {
            for gate in Gate::ALL {
                let (mu, rho) = &mut gs[gate.index()];
                f(&format!("gate_{}.mu", gate.letter()), mu);
                f(&format!("gate_{}.rho", gate.letter()), rho);
            }
        }
        f("head.W", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    /// self += c · other.
    pub fn add_scaled(&mut self, other: &ModelGrads, c: f64) {
        if let (Some((a, b)), Some((x, y))) = (&mut self.feature, &other.feature) {
            axpy(a, x, c);
            axpy(b, y, c);
        }
        for k in 0..4 {
            axpy(&mut self.lstm.w[k], &other.lstm.w[k], c);
            axpy(&mut self.lstm.u[k], &other.lstm.u[k], c);
            axpy(&mut self.lstm.b[k], &other.lstm.b[k], c);
        }
        if let (Some(a), Some(x)) = (&mut self.gates, &other.gates) {
            for k in 0..4 {
                axpy(&mut a[k].0, &x[k].0, c);
                axpy(&mut a[k].1, &x[k].1, c);
            }
        }
        axpy(&mut self.head_w, &other.head_w, c);
        axpy(&mut self.head_b, &other.head_b, c);
    }

    pub fn scale(&mut self, c: f64) {
        self.visit_mut(|_, v| v.iter_mut().for_each(|x| *x *= c));
    }

    pub fn to_gradient_set(&self, model: &SequenceClassifier) -> GradientSet {
        let mut shapes = Vec::new();
        model.visit_params(|_, _, shape, _| shapes.push(shape.to_vec()));
        let mut out = GradientSet::default();
        let mut i = 0;
        self.clone().visit_mut(|name, v| {
            out.insert(name, Tensor::new(shapes[i].clone(), v.to_vec()).expect("matching shapes"));
            i += 1;
        });
        out
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{run_sequence, LstmState};
    use crate::train::{initialize_model, InitConfig};

    fn random_model(seed: u64, fg: bool, gm: bool) -> SequenceClassifier {
        let init = InitConfig {
            mu_jitter: 0.3,
            sigma_init: 0.4,
            ..Default::default()
        };
        let mut m = initialize_model(Dims::new(5, 4, 3, 3).unwrap(), &init, fg, gm, &mut SeededRng::new(seed));
        m.head_b = vec![0.1, -0.2, 0.3];
        m
    }

    fn input(m: &SequenceClassifier, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::matrix(m.dims.t, m.input_dim(), rng.normals(m.dims.t * m.input_dim())).unwrap()
    }

    fn head(m: &SequenceClassifier, h: &[f64]) -> Vec<f64> {
        let mut out = m.head_b.clone();
        matvec_acc(m.head_w.data(), h, &mut out);
        out
    }

    #[test]
    fn zero_feature_mask_sees_zero_inputs() {
        let mut m = random_model(1, true, true);
        m.feature_gate.as_mut().unwrap().mu.iter_mut().for_each(|v| *v = 0.0);
        let zeros = Tensor::zeros(&[3, 5]);
        let masks: GateVecs = std::array::from_fn(|k| m.gates.masks().unwrap()[k].mu.clone());
        let run = run_sequence(&m.lstm, Some(&masks), zeros.data().chunks(5)).unwrap();
        assert_eq!(m.predict(&input(&m, 2)).unwrap(), head(&m, &run.h_last));
    }

    #[test]
    fn unit_means_give_plain_lstm_classifier() {
        let mut m = random_model(3, true, true);
        m.visit_params_mut(|name, _, v| {
            if name.ends_with(".mu") {
                v.iter_mut().for_each(|x| *x = 1.0);
            }
        });
        let x = input(&m, 4);
        let run = run_sequence(&m.lstm, None, x.data().chunks(5)).unwrap();
        assert_eq!(m.predict(&x).unwrap(), head(&m, &run.h_last));
        assert_eq!(LstmState::zeros(4).h, vec![0.0; 4]);
    }

    #[test]
    fn dropout_off_train_path_equals_eval() {
        for seed in 0..5 {
            let mut m = random_model(seed, true, true);
            m.dropout_p = 0.0;
            let x = input(&m, seed + 10);
            let mode = ForwardMode {
                masks: MaskMode::Deterministic,
                dropout: true,
            };
            let a = m.forward(&x, mode, &mut SeededRng::new(seed)).unwrap();
            assert_eq!(a, m.predict(&x).unwrap());
        }
    }

    #[test]
    fn stochastic_forward_depends_only_on_seed() {
        let mut m = random_model(5, true, true);
        m.dropout_p = 0.5;
        let x = input(&m, 6);
        let a = m.forward(&x, ForwardMode::TRAIN, &mut SeededRng::new(9)).unwrap();
        let b = m.forward(&x, ForwardMode::TRAIN, &mut SeededRng::new(9)).unwrap();
        let c = m.forward(&x, ForwardMode::TRAIN, &mut SeededRng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = random_model(0, true, true);
        assert!(matches!(m.predict(&Tensor::zeros(&[3, 4])), Err(Error::Dimension { .. })));
        assert!(matches!(m.predict(&Tensor::zeros(&[2, 5])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parameter_count_examples() {
        assert_eq!(count_lstm(2048, 2048), 33_562_624);
        assert_eq!(count_lstm(1, 1), 12);
        assert_eq!(count_lstm(49, 9), 2124);
        let m = SequenceClassifier::zeros(Dims::new(49, 9, 11, 2).unwrap(), 0.1, true, true);
        let c = m.count_parameters();
        assert_eq!(c.lstm_count, 2124);
        assert_eq!(c.head_count, 11 * 9 + 11);
        assert_eq!(c.vib_count, 2 * 49 + 8 * 9);
        assert_eq!(c.total, m.param_store().num_scalars());
    }

    #[test]
    fn compression_ratio_examples() {
        let r = compression_ratio_f64(59.246e6, 0.1778e6).unwrap();
        assert!((332.0..=334.0).contains(&r), "{r}");
        assert!((r - 333.2).abs() < 0.05);
        assert_eq!(compression_ratio(2124, 2124).unwrap(), 1.0);
        let r = compression_ratio(33_562_624, 2124).unwrap();
        assert!((r - 15_801.6).abs() < 0.1, "{r}");
        assert!(compression_ratio(10, 0).is_err());
    }

    #[test]
    fn container_round_trip_is_bit_exact_at_f32() {
        for (fg, gm) in [(true, true), (false, true), (true, false)] {
            let m = random_model(7, fg, gm);
            let bytes = write_model(&m).unwrap();
            let back = read_model(&bytes).unwrap();
            assert_eq!(write_model(&back).unwrap(), bytes);
            m.visit_params(|name, _, _, data| {
                let store = back.param_store();
                let got = store.get(name).unwrap().data();
                for (a, b) in data.iter().zip(got) {
                    assert_eq!((*a as f32) as f64, *b, "{name}");
                }
            });
            let x = input(&m, 8);
            for (a, b) in m.predict(&x).unwrap().iter().zip(back.predict(&x).unwrap()) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn manifest_accounts_for_payload() {
        let m = random_model(2, true, true);
        let bytes = write_model(&m).unwrap();
        let (manifest, start) = container::read_manifest(&bytes).unwrap();
        let sum: u64 = manifest.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>() as u64).sum();
        assert_eq!(sum, (bytes.len() - start) as u64);
        assert_eq!(manifest.tensors.len(), m.param_store().len());
        assert!(!manifest.compact);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let m = random_model(2, true, true);
        let bytes = write_model(&m).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_model(&bad), Err(Error::Format { offset: 4, .. })));

        for cut in [2, 10, 40, bytes.len() - 1] {
            assert!(matches!(read_model(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_model(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn validate_catches_shape_drift() {
        let mut m = random_model(0, true, true);
        assert!(m.validate().is_ok());
        m.head_b.push(0.0);
        assert!(m.validate().is_err());
        let mut m = random_model(0, true, true);
        m.dropout_p = 1.0;
        assert!(m.validate().is_err());
    }
}
