//! Initialization, Adam training with separate learning rates for the VIB
//! and the main parameters, and evaluation.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::cell::Gate;
use crate::data::{batches, Sample, SequenceDataset};
use crate::error::{Error, Result};
use crate::network::{Dims, ForwardMode, GateParams, ModelGrads, SequenceClassifier, TrainingMeta};
use crate::objective::{argmax, cross_entropy, kl_terms, loss_and_gradients, ObjectiveConfig};
use crate::prune::{make_plan, HiddenRule};
use crate::tensor::{ParamGroup, SeededRng, Tensor};
use crate::vib::{VibGate, DEFAULT_ALPHA_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub mu_mean: f64,
    pub mu_jitter: f64,
    pub sigma_init: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mu_mean: 1.0,
            mu_jitter: 0.01,
            sigma_init: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_vib: f64,
    pub lr_main: f64,
    /// Multiplies both learning rates after every epoch past the warm-up.
    pub lr_decay: f64,
    /// Leading epochs trained with both KL weights at zero, so the masks
    /// start compressing an already trained network. Counted in `epochs`.
    pub warmup_epochs: usize,
    pub adam: AdamConfig,
    pub objective: ObjectiveConfig,
    pub dropout_p: f64,
    pub seed: u64,
    pub init: InitConfig,
    /// Train a VIB mask on the input features.
    pub feature_gate: bool,
    /// Train VIB masks on the four LSTM gates.
    pub gate_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr_vib: 1e-2,
            lr_main: 1e-4,
            lr_decay: 1.0,
            warmup_epochs: 0,
            adam: AdamConfig::default(),
            objective: ObjectiveConfig::default(),
            dropout_p: 0.5,
            seed: 0,
            init: InitConfig::default(),
            feature_gate: true,
            gate_masks: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_vib > 0.0 && self.lr_main > 0.0 && self.lr_vib.is_finite() && self.lr_main.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1)".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        if !(self.init.sigma_init > 0.0) {
            return Err(Error::Config("sigma_init must be positive".into()));
        }
        self.objective.validate()
    }
}

/// Fresh model: weights uniform in ±1/√n, forget bias 1, other biases 0,
/// every mask mean drawn from N(mu_mean, mu_jitter²) with σ = sigma_init.
pub fn initialize_model(
    dims: Dims,
    init: &InitConfig,
    feature_gate: bool,
    gate_masks: bool,
    rng: &mut SeededRng,
) -> SequenceClassifier {
    let mut m = SequenceClassifier::zeros(dims, init.sigma_init, feature_gate, gate_masks);
    let bound = 1.0 / (dims.n as f64).sqrt();
    let gate = |len: usize, rng: &mut SeededRng| VibGate::init(len, init.mu_mean, init.mu_jitter, init.sigma_init, rng);
    if feature_gate {
        m.feature_gate = Some(gate(dims.d, rng));
    }
    for k in 0..4 {
        for t in [&mut m.lstm.w[k], &mut m.lstm.u[k]] {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-bound, bound));
        }
    }
    m.lstm.b[Gate::Forget.index()].iter_mut().for_each(|b| *b = 1.0);
    if gate_masks {
        m.gates = GateParams::Masks(Box::new(std::array::from_fn(|_| gate(dims.n, rng))));
    }
    m.head_w
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.uniform_range(-bound, bound));
    m
}

/// Adam with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, m: &mut SequenceClassifier, mut grads: ModelGrads, lr_vib: f64, lr_main: f64) {
        let mut flat: Vec<Vec<f64>> = Vec::new();
        grads.visit_mut(|_, g| flat.push(g.to_vec()));
        if self.first.is_empty() {
            self.first = flat.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let mut i = 0;
        m.visit_params_mut(|_, group, params| {
            let lr = match group {
                ParamGroup::Vib => lr_vib,
                ParamGroup::Main => lr_main,
            };
            let (g, m1, m2) = (&flat[i], &mut self.first[i], &mut self.second[i]);
            for j in 0..params.len() {
                m1[j] = beta1 * m1[j] + (1.0 - beta1) * g[j];
                m2[j] = beta2 * m2[j] + (1.0 - beta2) * g[j] * g[j];
                if lr != 0.0 {
                    params[j] -= lr * (m1[j] / c1) / ((m2[j] / c2).sqrt() + eps);
                }
            }
            i += 1;
        });
    }
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch.
    pub ce: f64,
    pub kl_gates: [f64; 4],
    pub kl_feature: f64,
    pub group_lasso: f64,
    /// Fraction of training sequences classified correctly by the
    /// stochastic training forward passes of the epoch.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Units with α ≥ the default threshold per gate (i, f, o, g).
    pub retained_gates: [usize; 4],
    pub retained_features: usize,
    /// Hidden units that survive the default pruning rule.
    pub retained_hidden: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,ce,kl_i,kl_f,kl_o,kl_g,kl_feature,group_lasso,train_acc,val_acc,retained_i,retained_f,retained_o,retained_g,retained_features,retained_hidden";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let k = r.kl_gates;
            let g = r.retained_gates;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.ce,
                k[0],
                k[1],
                k[2],
                k[3],
                r.kl_feature,
                r.group_lasso,
                r.train_acc,
                r.val_acc,
                g[0],
                g[1],
                g[2],
                g[3],
                r.retained_features,
                r.retained_hidden
            ));
        }
        out
    }
}

pub fn retained_counts(m: &SequenceClassifier, threshold: f64) -> ([usize; 4], usize, usize) {
    let gates = match &m.gates {
        GateParams::Masks(g) => std::array::from_fn(|k| g[k].retained_indices(threshold).len()),
        GateParams::Scales(s) => std::array::from_fn(|k| s[k].iter().filter(|&&v| v != 0.0).count()),
    };
    let features = m
        .feature_gate
        .as_ref()
        .map_or(m.dims.d, |g| g.retained_indices(threshold).len());
    let hidden = make_plan(m, threshold, threshold, HiddenRule::AnyOfIgo)
        .map(|p| p.kept_hidden.len())
        .unwrap_or(0);
    (gates, features, hidden)
}

fn check_dims(m: &SequenceClassifier, ds: &SequenceDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config(format!("{what} dataset is empty")));
    }
    if ds.dims.d != m.input_dim() || ds.dims.t != m.dims.t || ds.dims.a != m.dims.a {
        return Err(Error::dim(
            "dataset vs model",
            &[ds.dims.t, ds.dims.d, ds.dims.a],
            &[m.dims.t, m.input_dim(), m.dims.a],
        ));
    }
    Ok(())
}

/// Trains `m` on the full loss; deterministic given `cfg.seed`.
pub fn train(
    mut m: SequenceClassifier,
    train_set: &SequenceDataset,
    val_set: &SequenceDataset,
    cfg: &TrainConfig,
) -> Result<(SequenceClassifier, TrainHistory)> {
    cfg.validate()?;
    check_dims(&m, train_set, "training")?;
    check_dims(&m, val_set, "validation")?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((m, history));
    }
    m.dropout_p = cfg.dropout_p;
    let mut rng = SeededRng::new(cfg.seed ^ 0x5eed_7a11_0f_b1b0);
    let mut adam = Adam::new(cfg.adam);
    let (mut lr_vib, mut lr_main) = (cfg.lr_vib, cfg.lr_main);

    let warm = ObjectiveConfig {
        beta: 0.0,
        beta_v: 0.0,
        ..cfg.objective
    };
    for epoch in 0..cfg.epochs {
        let objective = if epoch < cfg.warmup_epochs { &warm } else { &cfg.objective };
        let mut ce_sum = 0.0;
        let mut correct = 0;
        for (bi, idx) in batches(train_set.len(), cfg.batch_size, &mut rng)?.into_iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set.samples[i]).collect();
            let (loss, grads) = loss_and_gradients(&m, &batch, objective, ForwardMode::TRAIN, &mut rng)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {bi}: {e}")))?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, batch {bi}: loss {}", loss.total)));
            }
            ce_sum += loss.ce * batch.len() as f64;
            correct += loss.correct;
            adam.step(&mut m, grads, lr_vib, lr_main);
        }

        let (kl_gates, kl_feature) = kl_terms(&m);
        let (retained_gates, retained_features, retained_hidden) = retained_counts(&m, DEFAULT_ALPHA_THRESHOLD);
        let record = EpochRecord {
            epoch: epoch + 1,
            ce: ce_sum / train_set.len() as f64,
            kl_gates,
            kl_feature,
            group_lasso: if cfg.objective.lambda_gl > 0.0 {
                crate::objective::group_lasso(&m)
            } else {
                0.0
            },
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc: evaluate(&m, val_set)?.accuracy,
            retained_gates,
            retained_features,
            retained_hidden,
        };
        debug!("epoch {}: {:?}", epoch + 1, record);
        if (epoch + 1) % 25 == 0 || epoch + 1 == cfg.epochs {
            info!(
                "epoch {:>4} ce {:.4} train_acc {:.3} val_acc {:.3} features {} hidden {}",
                record.epoch, record.ce, record.train_acc, record.val_acc, retained_features, retained_hidden
            );
        }
        history.epochs.push(record);
        if epoch + 1 >= cfg.warmup_epochs {
            lr_vib *= cfg.lr_decay;
            lr_main *= cfg.lr_decay;
        }
    }
    m.meta = TrainingMeta {
        beta: cfg.objective.beta,
        beta_v: cfg.objective.beta_v,
        seed: cfg.seed,
        epochs: m.meta.epochs + cfg.epochs,
    };
    Ok((m, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the dataset.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_count: Vec<usize>,
    pub mean_ce: f64,
    pub count: usize,
}

/// Deterministic evaluation (masks at their means or fixed scales, no
/// dropout).
pub fn evaluate(m: &SequenceClassifier, ds: &SequenceDataset) -> Result<EvalReport> {
    check_dims(m, ds, "evaluation")?;
    evaluate_samples(m, &ds.refs(), m.dims.a)
}

pub fn evaluate_samples(m: &SequenceClassifier, samples: &[&Sample], classes: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    let mut ce = 0.0;
    for s in samples {
        let logits = m.predict(&s.x)?;
        ce += cross_entropy(&logits, s.label);
        counts[s.label] += 1;
        if argmax(&logits) == s.label {
            hits[s.label] += 1;
        }
    }
    let total = samples.len();
    Ok(EvalReport {
        accuracy: hits.iter().sum::<usize>() as f64 / total as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        per_class_count: counts,
        mean_ce: ce / total as f64,
        count: total,
    })
}

/// Random inputs shaped for `m`, for equivalence checks and benchmarks.
pub fn random_inputs(m: &SequenceClassifier, count: usize, rng: &mut SeededRng) -> Vec<Tensor> {
    (0..count)
        .map(|_| Tensor::matrix(m.dims.t, m.input_dim(), rng.normals(m.dims.t * m.input_dim())).expect("shape"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DataDims, Provenance, SynthSpec};
    use crate::objective::ObjectiveConfig;

    fn dims() -> Dims {
        Dims::new(5, 4, 3, 3).unwrap()
    }

    #[test]
    fn initialization_is_deterministic_and_shaped() {
        let a = initialize_model(dims(), &InitConfig::default(), true, true, &mut SeededRng::new(3));
        let b = initialize_model(dims(), &InitConfig::default(), true, true, &mut SeededRng::new(3));
        assert_eq!(a, b);
        assert!(a.lstm.b[1].iter().all(|&v| v == 1.0));
        assert!(a.lstm.b[0].iter().all(|&v| v == 0.0));
        let bound = 0.5;
        assert!(a.lstm.w[2].data().iter().all(|v| v.abs() <= bound));
        for g in a.gates.masks().unwrap().iter() {
            assert!(g.sigma().iter().all(|s| (s - 0.1).abs() < 1e-12));
        }
    }

    #[test]
    fn fresh_kl_matches_plugged_in_value() {
        let m = initialize_model(Dims::new(8, 16, 3, 2).unwrap(), &InitConfig::default(), true, true, &mut SeededRng::new(1));
        let expected = 16.0 * (1.0f64 + 1.0 / 0.01).ln();
        let (gates, _) = kl_terms(&m);
        for kl in gates {
            assert!((kl - expected).abs() < 0.1 * expected, "{kl} vs {expected}");
        }
    }

    #[test]
    fn fresh_model_is_close_to_unit_masks() {
        let m = initialize_model(dims(), &InitConfig::default(), true, true, &mut SeededRng::new(2));
        let mut unit = m.clone();
        unit.visit_params_mut(|name, _, v| {
            if name.ends_with(".mu") {
                v.iter_mut().for_each(|x| *x = 1.0);
            }
        });
        let mut rng = SeededRng::new(5);
        let mut worst = 0.0f64;
        for x in random_inputs(&m, 20, &mut rng) {
            for (a, b) in m.predict(&x).unwrap().iter().zip(unit.predict(&x).unwrap()) {
                worst = worst.max((a - b).abs());
            }
        }
        // jitter 0.01 perturbs masks by ~1%; logits stay well within 10x that
        assert!(worst < 0.1, "{worst}");
        assert!(worst > 0.0);
    }

    fn separable() -> (SequenceDataset, SequenceDataset) {
        let spec = SynthSpec {
            d: 6,
            t: 3,
            a: 2,
            r: 2,
            signal: 2.0,
            noise: 0.2,
            per_class: 30,
            seed: 0,
        };
        generate_synthetic(&spec, &mut SeededRng::new(11)).unwrap().split_per_class(25)
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (tr, va) = separable();
        let m = initialize_model(Dims::new(6, 4, 2, 3).unwrap(), &InitConfig::default(), true, true, &mut SeededRng::new(0));
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (out, hist) = train(m.clone(), &tr, &va, &cfg).unwrap();
        assert_eq!(out, m);
        assert!(hist.epochs.is_empty());
    }

    #[test]
    fn separable_task_is_learned_without_bottleneck() {
        let (tr, va) = separable();
        let m = initialize_model(Dims::new(6, 8, 2, 3).unwrap(), &InitConfig::default(), true, true, &mut SeededRng::new(0));
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 10,
            lr_main: 1e-2,
            dropout_p: 0.0,
            objective: ObjectiveConfig {
                beta: 0.0,
                beta_v: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let (out, hist) = train(m, &tr, &va, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 50);
        let acc = evaluate(&out, &tr).unwrap().accuracy;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va) = separable();
        let m = initialize_model(Dims::new(6, 4, 2, 3).unwrap(), &InitConfig::default(), true, true, &mut SeededRng::new(0));
        let cfg = TrainConfig { epochs: 3, batch_size: 7, seed: 4, ..Default::default() };
        let (a, ha) = train(m.clone(), &tr, &va, &cfg).unwrap();
        let (b, hb) = train(m, &tr, &va, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.to_csv().lines().count(), 4);
    }

    #[test]
    fn full_warmup_equals_training_without_kl() {
        let (tr, va) = separable();
        let m = initialize_model(Dims::new(6, 4, 2, 3).unwrap(), &InitConfig::default(), true, true, &mut SeededRng::new(0));
        let warm = TrainConfig { epochs: 3, batch_size: 9, warmup_epochs: 3, ..Default::default() };
        let plain = TrainConfig {
            warmup_epochs: 0,
            objective: ObjectiveConfig { beta: 0.0, beta_v: 0.0, ..Default::default() },
            ..warm.clone()
        };
        let (a, ha) = train(m.clone(), &tr, &va, &warm).unwrap();
        let (b, hb) = train(m, &tr, &va, &plain).unwrap();
        assert_eq!(a.lstm, b.lstm);
        assert_eq!(a.gates, b.gates);
        assert_eq!(a.feature_gate, b.feature_gate);
        assert_eq!(ha.epochs.last().unwrap().ce, hb.epochs.last().unwrap().ce);
    }

    #[test]
    fn zero_learning_rate_freezes_its_group() {
        let (tr, _) = separable();
        let m0 = initialize_model(Dims::new(6, 4, 2, 3).unwrap(), &InitConfig::default(), true, true, &mut SeededRng::new(0));
        let batch: Vec<&Sample> = tr.samples.iter().take(8).collect();
        for (lr_vib, lr_main) in [(0.1, 0.0), (0.0, 0.1)] {
            let mut m = m0.clone();
            let (_, g) = loss_and_gradients(&m, &batch, &ObjectiveConfig::default(), ForwardMode::TRAIN, &mut SeededRng::new(1)).unwrap();
            Adam::new(AdamConfig::default()).step(&mut m, g, lr_vib, lr_main);
            let before = m0.param_store();
            let after = m.param_store();
            for e in before.entries() {
                let same = after.get(&e.name).unwrap() == &e.value;
                let frozen = match e.group {
                    ParamGroup::Main => lr_main == 0.0,
                    ParamGroup::Vib => lr_vib == 0.0,
                };
                assert_eq!(same, frozen, "{} lr_vib={lr_vib} lr_main={lr_main}", e.name);
            }
        }
    }

    #[test]
    fn evaluate_examples() {
        let m = initialize_model(Dims::new(6, 4, 2, 3).unwrap(), &InitConfig::default(), true, true, &mut SeededRng::new(0));
        let (tr, _) = separable();
        let x = tr.samples[0].x.clone();
        let pred = argmax(&m.predict(&x).unwrap());
        let one = SequenceDataset::new(
            vec![Sample { x, label: pred }],
            DataDims { d: 6, t: 3, a: 2 },
            Provenance::File { path: "mem".into() },
        )
        .unwrap();
        let r = evaluate(&m, &one).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class_accuracy[1 - pred], None);

        let fwd = evaluate(&m, &tr).unwrap();
        let mut rev = tr.clone();
        rev.samples.reverse();
        let bwd = evaluate(&m, &rev).unwrap();
        assert_eq!(fwd.accuracy, bwd.accuracy);
        assert_eq!(fwd.per_class_accuracy, bwd.per_class_accuracy);
        assert!((fwd.mean_ce - bwd.mean_ce).abs() < 1e-12);
        // weighted per-class accuracies average to the overall accuracy
        let weighted: f64 = fwd
            .per_class_accuracy
            .iter()
            .zip(&fwd.per_class_count)
            .map(|(a, &c)| a.unwrap_or(0.0) * c as f64)
            .sum::<f64>()
            / fwd.count as f64;
        assert!((weighted - fwd.accuracy).abs() < 1e-12);

        let empty = SequenceDataset { samples: vec![], ..tr.clone() };
        assert!(evaluate(&m, &empty).is_err());
    }

    #[test]
    fn random_model_is_at_chance_on_balanced_classes() {
        let spec = SynthSpec { d: 6, t: 3, a: 4, r: 2, per_class: 250, ..Default::default() };
        let ds = generate_synthetic(&spec, &mut SeededRng::new(3)).unwrap();
        let m = initialize_model(Dims::new(6, 8, 4, 3).unwrap(), &InitConfig::default(), true, true, &mut SeededRng::new(9));
        let acc = evaluate(&m, &ds).unwrap().accuracy;
        let sd = (0.25f64 * 0.75 / 1000.0).sqrt();
        assert!((acc - 0.25).abs() <= 3.0 * sd + 0.05, "{acc}");
    }

    #[test]
    fn config_errors() {
        assert!(TrainConfig { lr_main: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { dropout_p: 1.0, ..Default::default() }.validate().is_err());
    }
}
