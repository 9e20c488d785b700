//! LSTM cell with per-gate multiplicative masks, plus unrolling and
//! backpropagation through time.
//!
//! Gate order everywhere in this crate is `i, f, o, g`.

use crate::error::{Error, Result};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, SeededRng, Tensor};
use crate::vib::{MaskMode, VibGate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Cell,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Cell];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
            Gate::Cell => "g",
        }
    }

    pub fn from_letter(s: &str) -> Option<Gate> {
        Gate::ALL.into_iter().find(|g| g.letter() == s)
    }

    fn activate(self, x: f64) -> f64 {
        match self {
            Gate::Cell => x.tanh(),
            _ => sigmoid(x),
        }
    }

    /// Derivative of the activation expressed through its output.
    fn activate_grad(self, y: f64) -> f64 {
        match self {
            Gate::Cell => 1.0 - y * y,
            _ => y * (1.0 - y),
        }
    }
}

pub type GateVecs = [Vec<f64>; 4];

/// Weights of one LSTM layer: `w[k]` is n×d, `u[k]` is n×n, `b[k]` has n
/// entries, for each gate k in `i, f, o, g` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w: [Tensor; 4],
    pub u: [Tensor; 4],
    pub b: GateVecs,
}

impl LstmParams {
    pub fn new(w: [Tensor; 4], u: [Tensor; 4], b: GateVecs) -> Result<Self> {
        let n = b[0].len();
        let d = w[0].cols();
        for k in 0..4 {
            if w[k].shape() != [n, d] {
                return Err(Error::dim("lstm_params.w", w[k].shape(), &[n, d]));
            }
            if u[k].shape() != [n, n] {
                return Err(Error::dim("lstm_params.u", u[k].shape(), &[n, n]));
            }
            if b[k].len() != n {
                return Err(Error::dim("lstm_params.b", &[b[k].len()], &[n]));
            }
        }
        Ok(LstmParams { w, u, b })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        LstmParams {
            w: std::array::from_fn(|_| Tensor::zeros(&[n, d])),
            u: std::array::from_fn(|_| Tensor::zeros(&[n, n])),
            b: std::array::from_fn(|_| vec![0.0; n]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b[0].len()
    }

    pub fn input(&self) -> usize {
        self.w[0].cols()
    }

    /// 4(nd + n² + n).
    pub fn count(&self) -> usize {
        let (n, d) = (self.hidden(), self.input());
        4 * (n * d + n * n + n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(n: usize) -> Self {
        LstmState {
            h: vec![0.0; n],
            c: vec![0.0; n],
        }
    }
}

/// Intermediates of one step kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub v: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Gate activations before masking.
    pub act: GateVecs,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

fn check_step(p: &LstmParams, v: &[f64], s: &LstmState) -> Result<()> {
    let (n, d) = (p.hidden(), p.input());
    if v.len() != d {
        return Err(Error::dim("lstm_step.input", &[v.len()], &[d]));
    }
    if s.h.len() != n || s.c.len() != n {
        return Err(Error::dim("lstm_step.state", &[s.h.len(), s.c.len()], &[n, n]));
    }
    Ok(())
}

fn step_cached(p: &LstmParams, masks: Option<&GateVecs>, v: &[f64], s: &LstmState) -> StepCache {
    let n = p.hidden();
    let act: GateVecs = std::array::from_fn(|k| {
        let mut pre = p.b[k].clone();
        matvec_acc(p.w[k].data(), v, &mut pre);
        matvec_acc(p.u[k].data(), &s.h, &mut pre);
        let gate = Gate::ALL[k];
        pre.iter_mut().for_each(|x| *x = gate.activate(*x));
        pre
    });
    let mut c = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    let mut h = vec![0.0; n];
    for j in 0..n {
        let z = |k: usize| masks.map_or(1.0, |m| m[k][j]);
        let i = z(0) * act[0][j];
        let f = z(1) * act[1][j];
        let o = z(2) * act[2][j];
        let g = z(3) * act[3][j];
        c[j] = f * s.c[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    StepCache {
        v: v.to_vec(),
        h_prev: s.h.clone(),
        c_prev: s.c.clone(),
        act,
        c,
        tanh_c,
        h,
    }
}

/// Standard LSTM step.
pub fn lstm_step(p: &LstmParams, v: &[f64], s: &LstmState) -> Result<LstmState> {
    check_step(p, v, s)?;
    let cache = step_cached(p, None, v, s);
    Ok(LstmState {
        h: cache.h,
        c: cache.c,
    })
}

/// LSTM step with each gate output multiplied by its mask.
pub fn vib_lstm_step(p: &LstmParams, masks: &GateVecs, v: &[f64], s: &LstmState) -> Result<LstmState> {
    check_step(p, v, s)?;
    check_masks(masks, p.hidden())?;
    let cache = step_cached(p, Some(masks), v, s);
    Ok(LstmState {
        h: cache.h,
        c: cache.c,
    })
}

fn check_masks(masks: &GateVecs, n: usize) -> Result<()> {
    for m in masks {
        if m.len() != n {
            return Err(Error::dim("gate_mask", &[m.len()], &[n]));
        }
    }
    Ok(())
}

/// Result of running a sequence through the cell.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub h_last: Vec<f64>,
    pub c_last: Vec<f64>,
    pub steps: Vec<StepCache>,
}

impl Unrolled {
    pub fn trace(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.h.as_slice())
    }
}

/// Runs rows of `inputs` (each of length d) from the zero state with fixed
/// masks, keeping every step for backpropagation.
pub fn run_sequence<'a, I>(p: &LstmParams, masks: Option<&GateVecs>, inputs: I) -> Result<Unrolled>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let n = p.hidden();
    if let Some(m) = masks {
        check_masks(m, n)?;
    }
    let mut state = LstmState::zeros(n);
    let mut steps = Vec::new();
    for v in inputs {
        check_step(p, v, &state)?;
        let cache = step_cached(p, masks, v, &state);
        state = LstmState {
            h: cache.h.clone(),
            c: cache.c.clone(),
        };
        steps.push(cache);
    }
    if steps.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(Unrolled {
        h_last: state.h,
        c_last: state.c,
        steps,
    })
}

/// Samples one mask per gate (shared by every timestep) and unrolls the
/// sequence `[T×d]` from the zero state.
pub fn unroll(
    p: &LstmParams,
    gates: &[VibGate; 4],
    sequence: &Tensor,
    mode: MaskMode,
    rng: &mut SeededRng,
) -> Result<Unrolled> {
    let masks: GateVecs = std::array::from_fn(|k| gates[k].sample_mask(rng, mode));
    let t = if sequence.shape().len() == 2 { sequence.rows() } else { 0 };
    run_sequence(p, Some(&masks), (0..t).map(|r| sequence.row(r)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub w: [Vec<f64>; 4],
    pub u: [Vec<f64>; 4],
    pub b: GateVecs,
}

impl LstmGrads {
    pub fn zeros(n: usize, d: usize) -> Self {
        LstmGrads {
            w: std::array::from_fn(|_| vec![0.0; n * d]),
            u: std::array::from_fn(|_| vec![0.0; n * n]),
            b: std::array::from_fn(|_| vec![0.0; n]),
        }
    }
}

pub struct SequenceGrads {
    pub params: LstmGrads,
    /// ∂/∂z for each gate mask.
    pub masks: GateVecs,
    /// ∂/∂v_t for each step.
    pub inputs: Vec<Vec<f64>>,
}

/// Backpropagation through time given ∂L/∂h_T.
pub fn backward(p: &LstmParams, masks: Option<&GateVecs>, run: &Unrolled, dh_last: &[f64]) -> SequenceGrads {
    let (n, d) = (p.hidden(), p.input());
    let mut grads = LstmGrads::zeros(n, d);
    let mut dmask: GateVecs = std::array::from_fn(|_| vec![0.0; n]);
    let mut dinputs = vec![Vec::new(); run.steps.len()];
    let mut dh = dh_last.to_vec();
    let mut dc = vec![0.0; n];
    let mut da: GateVecs = std::array::from_fn(|_| vec![0.0; n]);

    for (t, step) in run.steps.iter().enumerate().rev() {
        for j in 0..n {
            let z = |k: usize| masks.map_or(1.0, |m| m[k][j]);
            let [ai, af, ao, ag] = [step.act[0][j], step.act[1][j], step.act[2][j], step.act[3][j]];
            let (zi, zf, zo, zg) = (z(0), z(1), z(2), z(3));
            let tc = step.tanh_c[j];

            // h = o·tanh(c)
            let d_o = dh[j] * tc;
            let dcj = dc[j] + dh[j] * zo * ao * (1.0 - tc * tc);
            // c = f·c_prev + i·g
            let d_i = dcj * zg * ag;
            let d_g = dcj * zi * ai;
            let d_f = dcj * step.c_prev[j];
            dc[j] = dcj * zf * af;

            dmask[0][j] += d_i * ai;
            dmask[1][j] += d_f * af;
            dmask[2][j] += d_o * ao;
            dmask[3][j] += d_g * ag;

            da[0][j] = d_i * zi * Gate::Input.activate_grad(ai);
            da[1][j] = d_f * zf * Gate::Forget.activate_grad(af);
            da[2][j] = d_o * zo * Gate::Output.activate_grad(ao);
            da[3][j] = d_g * zg * Gate::Cell.activate_grad(ag);
        }

        let mut dh_prev = vec![0.0; n];
        let mut dv = vec![0.0; d];
        for k in 0..4 {
            outer_acc(&mut grads.w[k], &da[k], &step.v);
            outer_acc(&mut grads.u[k], &da[k], &step.h_prev);
            for (b, a) in grads.b[k].iter_mut().zip(&da[k]) {
                *b += a;
            }
            matvec_t_acc(p.u[k].data(), &da[k], &mut dh_prev);
            matvec_t_acc(p.w[k].data(), &da[k], &mut dv);
        }
        dinputs[t] = dv;
        dh = dh_prev;
    }

    SequenceGrads {
        params: grads,
        masks: dmask,
        inputs: dinputs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{central_differences, gaussian, ParamGroup, ParamStore};

    fn random_params(n: usize, d: usize, rng: &mut SeededRng, scale: f64) -> LstmParams {
        let mut m = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform_range(-scale, scale)).collect()).unwrap()
        };
        let w = std::array::from_fn(|_| m(n, d));
        let u = std::array::from_fn(|_| m(n, n));
        let b = std::array::from_fn(|_| m(1, n).into_data());
        LstmParams::new(w, u, b).unwrap()
    }

    /// Scalar-loop reference written directly from the cell equations.
    fn reference_step(p: &LstmParams, z: &GateVecs, v: &[f64], s: &LstmState) -> LstmState {
        let (n, d) = (p.hidden(), p.input());
        let mut h = vec![0.0; n];
        let mut c = vec![0.0; n];
        for j in 0..n {
            let mut pre = [0.0f64; 4];
            for k in 0..4 {
                let mut acc = p.b[k][j];
                for q in 0..d {
                    acc += p.w[k].at(j, q) * v[q];
                }
                for q in 0..n {
                    acc += p.u[k].at(j, q) * s.h[q];
                }
                pre[k] = acc;
            }
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let i = z[0][j] * sig(pre[0]);
            let f = z[1][j] * sig(pre[1]);
            let o = z[2][j] * sig(pre[2]);
            let g = z[3][j] * pre[3].tanh();
            c[j] = f * s.c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        LstmState { h, c }
    }

    fn ones(n: usize) -> GateVecs {
        std::array::from_fn(|_| vec![1.0; n])
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let p = LstmParams::zeros(3, 2);
        let s = lstm_step(&p, &[0.5, -2.0], &LstmState::zeros(3)).unwrap();
        assert_eq!(s, LstmState::zeros(3));
    }

    #[test]
    fn half_open_gates_halve_the_cell() {
        let p = LstmParams::zeros(2, 1);
        let s0 = LstmState {
            h: vec![0.0, 0.0],
            c: vec![0.8, -3.0],
        };
        let s = lstm_step(&p, &[1.0], &s0).unwrap();
        for j in 0..2 {
            assert!((s.c[j] - 0.5 * s0.c[j]).abs() < 1e-15);
            assert!((s.h[j] - 0.5 * (0.5 * s0.c[j]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn step_matches_scalar_reference() {
        let mut rng = SeededRng::new(2);
        let p = random_params(2, 3, &mut rng, 1.0);
        let s = LstmState {
            h: vec![0.3, -0.4],
            c: vec![1.1, -0.2],
        };
        let v = [0.2, -1.0, 0.7];
        let z: GateVecs = std::array::from_fn(|_| rng.normals(2));
        let got = vib_lstm_step(&p, &z, &v, &s).unwrap();
        let want = reference_step(&p, &z, &v, &s);
        for j in 0..2 {
            assert!((got.h[j] - want.h[j]).abs() < 1e-12);
            assert!((got.c[j] - want.c[j]).abs() < 1e-12);
        }
        let plain = lstm_step(&p, &v, &s).unwrap();
        let want = reference_step(&p, &ones(2), &v, &s);
        for j in 0..2 {
            assert!((plain.h[j] - want.h[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_masks_are_bit_identical() {
        let mut rng = SeededRng::new(8);
        let p = random_params(4, 3, &mut rng, 1.0);
        let s = LstmState {
            h: rng.normals(4).iter().map(|x| x.tanh()).collect(),
            c: rng.normals(4),
        };
        let v = rng.normals(3);
        assert_eq!(
            vib_lstm_step(&p, &ones(4), &v, &s).unwrap(),
            lstm_step(&p, &v, &s).unwrap()
        );
    }

    #[test]
    fn closed_output_gate_zeroes_hidden() {
        let mut rng = SeededRng::new(4);
        let p = random_params(3, 2, &mut rng, 2.0);
        let mut z = ones(3);
        z[2] = vec![0.0; 3];
        let s = LstmState {
            h: vec![0.5, 0.1, -0.9],
            c: vec![2.0, -1.0, 0.3],
        };
        let out = vib_lstm_step(&p, &z, &[1.0, -1.0], &s).unwrap();
        assert!(out.h.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn closed_input_gate_never_charges() {
        let mut rng = SeededRng::new(6);
        let p = random_params(3, 2, &mut rng, 2.0);
        let mut z = ones(3);
        z[0] = vec![0.0; 3];
        let s = LstmState {
            h: vec![0.5, 0.1, -0.9],
            c: vec![0.0; 3],
        };
        let out = vib_lstm_step(&p, &z, &[1.0, -1.0], &s).unwrap();
        assert!(out.c.iter().all(|&c| c == 0.0));
        assert!(out.h.iter().all(|&h| h == 0.0));

        // unrolled from zero state, every step stays dead
        let seq: Vec<Vec<f64>> = (0..6).map(|_| rng.normals(2)).collect();
        let run = run_sequence(&p, Some(&z), seq.iter().map(|v| v.as_slice())).unwrap();
        assert!(run.trace().all(|h| h.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn pruned_units_stay_dead_for_any_input() {
        let mut rng = SeededRng::new(10);
        let p = random_params(5, 3, &mut rng, 2.0);
        for (gate, j) in [(2usize, 1usize), (3, 4), (0, 0)] {
            let mut z: GateVecs = std::array::from_fn(|_| rng.normals(5));
            z[gate][j] = 0.0;
            let seq: Vec<Vec<f64>> = (0..8).map(|_| rng.normals(3).iter().map(|x| 3.0 * x).collect()).collect();
            let run = run_sequence(&p, Some(&z), seq.iter().map(|v| v.as_slice())).unwrap();
            assert!(run.trace().all(|h| h[j] == 0.0), "gate {gate} unit {j}");
        }
    }

    #[test]
    fn unroll_base_cases() {
        let mut rng = SeededRng::new(12);
        let p = random_params(3, 2, &mut rng, 1.0);
        let gates: [VibGate; 4] = std::array::from_fn(|_| VibGate::init(3, 1.0, 0.1, 0.2, &mut rng));
        let seq = gaussian(&mut rng, &[1, 2]).unwrap();
        let run = unroll(&p, &gates, &seq, MaskMode::Deterministic, &mut rng).unwrap();
        let masks: GateVecs = std::array::from_fn(|k| gates[k].mu.clone());
        let single = vib_lstm_step(&p, &masks, seq.row(0), &LstmState::zeros(3)).unwrap();
        assert_eq!(run.h_last, single.h);
        assert_eq!(run.c_last, single.c);

        let zero = LstmParams::zeros(3, 2);
        let constant = Tensor::filled(&[5, 2], 0.7);
        let run = unroll(&zero, &gates, &constant, MaskMode::Stochastic, &mut rng).unwrap();
        assert!(run.trace().all(|h| h.iter().all(|&x| x == 0.0)));

        assert!(matches!(
            run_sequence(&p, None, std::iter::empty()),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn unroll_is_deterministic_under_seed() {
        let mut rng = SeededRng::new(13);
        let p = random_params(3, 4, &mut rng, 1.0);
        let gates: [VibGate; 4] = std::array::from_fn(|_| VibGate::init(3, 1.0, 0.1, 0.5, &mut rng));
        let seq = gaussian(&mut rng, &[5, 4]).unwrap();
        let a = unroll(&p, &gates, &seq, MaskMode::Stochastic, &mut SeededRng::new(99)).unwrap();
        let b = unroll(&p, &gates, &seq, MaskMode::Stochastic, &mut SeededRng::new(99)).unwrap();
        assert_eq!(a.h_last, b.h_last);
    }

    #[test]
    fn dimension_errors() {
        let p = LstmParams::zeros(3, 2);
        assert!(lstm_step(&p, &[1.0], &LstmState::zeros(3)).is_err());
        let bad: GateVecs = std::array::from_fn(|_| vec![1.0; 2]);
        assert!(vib_lstm_step(&p, &bad, &[1.0, 2.0], &LstmState::zeros(3)).is_err());
    }

    fn pack(p: &LstmParams, gates: &[VibGate; 4]) -> ParamStore {
        let mut s = ParamStore::new();
        for k in 0..4 {
            s.register(format!("w{k}"), ParamGroup::Main, p.w[k].clone()).unwrap();
            s.register(format!("u{k}"), ParamGroup::Main, p.u[k].clone()).unwrap();
            s.register(format!("b{k}"), ParamGroup::Main, Tensor::vector(p.b[k].clone()))
                .unwrap();
            s.register(format!("mu{k}"), ParamGroup::Vib, Tensor::vector(gates[k].mu.clone()))
                .unwrap();
            s.register(format!("rho{k}"), ParamGroup::Vib, Tensor::vector(gates[k].rho.clone()))
                .unwrap();
        }
        s
    }

    fn unpack(s: &ParamStore) -> (LstmParams, [VibGate; 4]) {
        let w = std::array::from_fn(|k| s.get(&format!("w{k}")).unwrap().clone());
        let u = std::array::from_fn(|k| s.get(&format!("u{k}")).unwrap().clone());
        let b = std::array::from_fn(|k| s.get(&format!("b{k}")).unwrap().data().to_vec());
        let gates = std::array::from_fn(|k| {
            VibGate::new(
                s.get(&format!("mu{k}")).unwrap().data().to_vec(),
                s.get(&format!("rho{k}")).unwrap().data().to_vec(),
            )
            .unwrap()
        });
        (LstmParams::new(w, u, b).unwrap(), gates)
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let (n, d, t) = (3, 2, 4);
        let mut rng = SeededRng::new(31);
        let p = random_params(n, d, &mut rng, 1.0);
        let gates: [VibGate; 4] = std::array::from_fn(|_| VibGate::init(n, 0.9, 0.2, 0.3, &mut rng));
        let eps: GateVecs = std::array::from_fn(|_| rng.normals(n));
        let seq: Vec<Vec<f64>> = (0..t).map(|_| rng.normals(d)).collect();
        let readout = rng.normals(n);

        let loss = |s: &ParamStore| -> Result<f64> {
            let (p, gates) = unpack(s);
            let masks: GateVecs = std::array::from_fn(|k| gates[k].mask_with_noise(&eps[k]));
            let run = run_sequence(&p, Some(&masks), seq.iter().map(|v| v.as_slice()))?;
            Ok(run.h_last.iter().zip(&readout).map(|(h, r)| h * r).sum())
        };

        let store = pack(&p, &gates);
        let masks: GateVecs = std::array::from_fn(|k| gates[k].mask_with_noise(&eps[k]));
        let run = run_sequence(&p, Some(&masks), seq.iter().map(|v| v.as_slice())).unwrap();
        let g = backward(&p, Some(&masks), &run, &readout);
        let fd = central_differences(loss, &store, 1e-4).unwrap();

        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 + 1e-4 * a.abs().max(b.abs());
        for k in 0..4 {
            for (a, b) in g.params.w[k].iter().zip(fd.get(&format!("w{k}")).unwrap().data()) {
                assert!(close(*a, *b), "w{k}: {a} vs {b}");
            }
            for (a, b) in g.params.u[k].iter().zip(fd.get(&format!("u{k}")).unwrap().data()) {
                assert!(close(*a, *b), "u{k}: {a} vs {b}");
            }
            for (a, b) in g.params.b[k].iter().zip(fd.get(&format!("b{k}")).unwrap().data()) {
                assert!(close(*a, *b), "b{k}: {a} vs {b}");
            }
            let sig = gates[k].sigma_grad();
            for j in 0..n {
                let dmu = g.masks[k][j];
                let drho = g.masks[k][j] * eps[k][j] * sig[j];
                assert!(close(dmu, fd.get(&format!("mu{k}")).unwrap().data()[j]));
                assert!(close(drho, fd.get(&format!("rho{k}")).unwrap().data()[j]));
            }
        }
    }
}
