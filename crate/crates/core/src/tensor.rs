//! Dense row-major tensors, the seeded random stream, and the parameter
//! and gradient containers used for training.
//!
//! All arithmetic is 64-bit. The small set of slice kernels at the bottom of
//! the file (`matvec_acc`, `matvec_t_acc`, `outer_acc`) are what the recurrent
//! forward and backward passes run on; the `Tensor`-level operations are the
//! checked, allocating versions of the same arithmetic.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape {
                shape,
                len: data.len(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a matrix (first axis).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row width: product of all axes after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Gathers `rows` × `cols` into a new matrix.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Tensor {
        let width = self.cols();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let row = &self.data[r * width..(r + 1) * width];
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Tensor {
            shape: vec![rows.len(), cols.len()],
            data,
        }
    }

    pub fn select_elems(&self, idx: &[usize]) -> Tensor {
        Tensor::vector(idx.iter().map(|&i| self.data[i]).collect())
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
}

pub fn elementwise(kind: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match kind {
        Elementwise::Sigmoid => Ok(a.map(sigmoid)),
        Elementwise::Tanh => Ok(a.map(f64::tanh)),
        Elementwise::Add | Elementwise::Mul => {
            let b = b.ok_or_else(|| Error::dim("elementwise", &a.shape, &[]))?;
            if a.shape != b.shape {
                return Err(Error::dim("elementwise", &a.shape, &b.shape));
            }
            let data = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| if kind == Elementwise::Add { x + y } else { x * y })
                .collect();
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

// --- slice kernels -------------------------------------------------------

/// out += W x, with W stored row-major as `out.len()` × `x.len()`.
#[inline]
pub fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), cols * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut s = 0.0;
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        *o += s;
    }
}

/// out += Wᵀ y.
#[inline]
pub fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), cols * y.len());
    for (&yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += yi * a;
        }
    }
}

/// G += y xᵀ.
#[inline]
pub fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(g.len(), cols * y.len());
    for (&yi, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        if yi == 0.0 {
            continue;
        }
        for (o, a) in row.iter_mut().zip(x) {
            *o += yi * a;
        }
    }
}

// --- randomness ----------------------------------------------------------

/// Deterministic random stream: ChaCha8 keyed from a 64-bit seed, with
/// normal deviates produced by the Box–Muller transform.
///
/// ChaCha output is specified independently of platform and word size, so a
/// seed reproduces the same stream everywhere.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Independent child stream; advances this stream by one draw.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn gaussian(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(len))
}

// --- parameters and gradients -------------------------------------------

/// Which learning-rate group a parameter trains under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Vib,
    Main,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("parameter '{name}' registered twice")));
        }
        self.entries.push(ParamEntry { name, group, value });
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    pub fn group(&self, name: &str) -> Option<ParamGroup> {
        self.index_of(name).map(|i| self.entries[i].group)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradients keyed by parameter name, one tensor per trainable parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    entries: Vec<(String, Tensor)>,
}

impl GradientSet {
    /// Zero gradients shaped like every entry of `store`.
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradientSet {
            entries: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), Tensor::zeros(e.value.shape())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = grad,
            None => self.entries.push((name, grad)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when the names and shapes match `store` exactly.
    pub fn covers(&self, store: &ParamStore) -> bool {
        self.entries.len() == store.len()
            && store.entries().iter().all(|e| {
                self.get(&e.name)
                    .map(|g| g.shape() == e.value.shape())
                    .unwrap_or(false)
            })
    }

    /// self += c · other, matching by name.
    pub fn add_scaled(&mut self, other: &GradientSet, c: f64) {
        for (name, g) in other.iter() {
            if let Some(dst) = self.get_mut(name) {
                for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += c * s;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// A scalar function of a parameter store that knows its own gradient.
pub trait Objective {
    fn value(&self, store: &ParamStore) -> Result<f64>;
    fn value_and_gradients(&self, store: &ParamStore) -> Result<(f64, GradientSet)>;
}

/// Evaluates the gradient of `objective` at `store`, rejecting non-finite
/// objective values.
pub fn gradients<O: Objective + ?Sized>(objective: &O, store: &ParamStore) -> Result<GradientSet> {
    let (value, grads) = objective.value_and_gradients(store)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {value}")));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}

/// Central finite differences of `f` with respect to every scalar in `store`.
pub fn central_differences<F>(f: F, store: &ParamStore, step: f64) -> Result<GradientSet>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut out = GradientSet::default();
    for entry in store.entries() {
        let mut grad = Tensor::zeros(entry.value.shape());
        for k in 0..entry.value.len() {
            let orig = entry.value.data()[k];
            probe.get_mut(&entry.name)?.data_mut()[k] = orig + step;
            let up = f(&probe)?;
            probe.get_mut(&entry.name)?.data_mut()[k] = orig - step;
            let down = f(&probe)?;
            probe.get_mut(&entry.name)?.data_mut()[k] = orig;
            grad.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.insert(entry.name.clone(), grad);
    }
    Ok(out)
}
