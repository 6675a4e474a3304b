//! Dense f64 tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles during a
//! forward pass; [`Tape::backward`] replays the record in reverse and
//! accumulates gradients additively, so a value used by several consumers
//! (multi-parent nodes) collects one contribution per use. The tape is
//! rebuilt for every forward pass; values cached from an earlier pass never
//! re-enter a new tape.

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor. All values are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape entries must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("value {bad} in new tensor")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Dimension("matrix needs at least one row".into()));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Tensor::new(vec![r, c], rows.into_iter().flatten().collect())
    }

    /// Uniform init in `(-bound, bound)`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor { shape, data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    LeakyRelu,
}

/// Negative slope for LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative given the input x and the output y.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Matvec(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Act(Activation, usize),
    ConcatVec(Vec<usize>),
    ConcatRows(Vec<usize>),
    Row(usize, usize),
    SliceVec(usize, usize, usize),
    Sum(usize),
    MeanRows(usize),
    MaxReadout(usize, Vec<usize>),
    RowSoftmax(usize, Vec<bool>),
    OuterSum(usize, usize),
    Unpool(usize, Vec<usize>, usize),
    EmbedMean(usize, Vec<usize>),
    NllLoss(usize, usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// One differentiation context. Single-writer; distinct tapes are independent.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by tape handle, one accumulator per participating value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// participate in the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { shape, value, op });
        Var {
            id: inner.nodes.len() - 1,
        }
    }

    /// Record a tensor as a leaf (input or parameter).
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Var {
        let numel = shape.iter().product();
        self.push(shape, vec![0.0; numel], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.id];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
        }
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.id].shape.clone()
    }

    fn with_node<T>(&self, v: Var, f: impl FnOnce(&[usize], &[f64]) -> T) -> T {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.id];
        f(&node.shape, &node.value)
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, av) = self.with_node(a, |s, v| {
            if s.len() != 2 {
                (0, 0, v.to_vec())
            } else {
                (s[0], s[1], v.to_vec())
            }
        });
        let (k2, n, bv) = self.with_node(b, |s, v| {
            if s.len() != 2 {
                (0, 0, v.to_vec())
            } else {
                (s[0], s[1], v.to_vec())
            }
        });
        if m == 0 || k2 == 0 || k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += av[i * k + t] * bv[t * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.push(vec![m, n], out, Op::Matmul(a.id, b.id)))
    }

    /// `w[m x n] * x[n]`.
    pub fn matvec(&self, w: Var, x: Var) -> Result<Var> {
        let (m, n, wv) = self.with_node(w, |s, v| {
            if s.len() != 2 {
                (0, 0, v.to_vec())
            } else {
                (s[0], s[1], v.to_vec())
            }
        });
        let xv = self.with_node(x, |s, v| {
            if s.len() == 1 {
                Some(v.to_vec())
            } else {
                None
            }
        });
        let xv = match xv {
            Some(v) if m > 0 && v.len() == n => v,
            _ => {
                return Err(Error::Dimension(format!(
                    "matvec: {:?} x {:?}",
                    self.shape_of(w),
                    self.shape_of(x)
                )))
            }
        };
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                acc += wv[i * n + j] * xv[j];
            }
            out[i] = acc;
        }
        Ok(self.push(vec![m], out, Op::Matvec(w.id, x.id)))
    }

    fn elementwise(&self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let (ashape, av) = self.with_node(a, |s, v| (s.to_vec(), v.to_vec()));
        let (bshape, bv) = self.with_node(b, |s, v| (s.to_vec(), v.to_vec()));
        if ashape != bshape {
            return Err(Error::Dimension(format!(
                "{name}: {ashape:?} vs {bshape:?}"
            )));
        }
        Ok((ashape, av, bv))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, av, bv) = self.elementwise(a, b, "add")?;
        let out = av.iter().zip(&bv).map(|(x, y)| x + y).collect();
        Ok(self.push(shape, out, Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, av, bv) = self.elementwise(a, b, "sub")?;
        let out = av.iter().zip(&bv).map(|(x, y)| x - y).collect();
        Ok(self.push(shape, out, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, av, bv) = self.elementwise(a, b, "mul")?;
        let out = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        Ok(self.push(shape, out, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (shape, av) = self.with_node(a, |s, v| (s.to_vec(), v.to_vec()));
        let out = av.iter().map(|x| x * c).collect();
        self.push(shape, out, Op::Scale(a.id, c))
    }

    pub fn activation(&self, kind: Activation, x: Var) -> Var {
        let (shape, xv) = self.with_node(x, |s, v| (s.to_vec(), v.to_vec()));
        let out = xv.iter().map(|&v| kind.apply(v)).collect();
        self.push(shape, out, Op::Act(kind, x.id))
    }

    /// Order-preserving concatenation of vectors.
    pub fn concat_vec(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_vec of zero parts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            let ok = self.with_node(p, |s, v| {
                if s.len() == 1 {
                    out.extend_from_slice(v);
                    true
                } else {
                    false
                }
            });
            if !ok {
                return Err(Error::Dimension(format!(
                    "concat_vec part has shape {:?}",
                    self.shape_of(p)
                )));
            }
        }
        let n = out.len();
        Ok(self.push(vec![n], out, Op::ConcatVec(parts.iter().map(|p| p.id).collect())))
    }

    /// Stack parts along rows. A vector of width `c` counts as one row.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows of zero parts".into()));
        }
        let cols = self.with_node(parts[0], |s, _| *s.last().unwrap());
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let ok = self.with_node(p, |s, v| {
                let (r, c) = match s.len() {
                    1 => (1, s[0]),
                    2 => (s[0], s[1]),
                    _ => return false,
                };
                if c != cols {
                    return false;
                }
                rows += r;
                out.extend_from_slice(v);
                true
            });
            if !ok {
                return Err(Error::Dimension(format!(
                    "concat_rows: part shape {:?} does not stack onto width {cols}",
                    self.shape_of(p)
                )));
            }
        }
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, m: Var, i: usize) -> Result<Var> {
        let picked = self.with_node(m, |s, v| {
            if s.len() == 2 && i < s[0] {
                Some(v[i * s[1]..(i + 1) * s[1]].to_vec())
            } else {
                None
            }
        });
        match picked {
            Some(r) => {
                let n = r.len();
                Ok(self.push(vec![n], r, Op::Row(m.id, i)))
            }
            None => Err(Error::Dimension(format!(
                "row {i} of shape {:?}",
                self.shape_of(m)
            ))),
        }
    }

    /// `x[a..b]` of a vector.
    pub fn slice_vec(&self, x: Var, a: usize, b: usize) -> Result<Var> {
        let picked = self.with_node(x, |s, v| {
            if s.len() == 1 && a < b && b <= s[0] {
                Some(v[a..b].to_vec())
            } else {
                None
            }
        });
        match picked {
            Some(r) => {
                let n = r.len();
                Ok(self.push(vec![n], r, Op::SliceVec(x.id, a, b)))
            }
            None => Err(Error::Dimension(format!(
                "slice [{a}..{b}] of shape {:?}",
                self.shape_of(x)
            ))),
        }
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.with_node(x, |_, v| v.iter().sum());
        self.push(vec![1], vec![total], Op::Sum(x.id))
    }

    /// Column-wise mean of an `N x F` matrix.
    pub fn mean_rows(&self, m: Var) -> Result<Var> {
        let out = self.with_node(m, |s, v| {
            if s.len() != 2 {
                return None;
            }
            let (n, f) = (s[0], s[1]);
            let mut out = vec![0.0; f];
            for i in 0..n {
                for j in 0..f {
                    out[j] += v[i * f + j];
                }
            }
            for o in &mut out {
                *o /= n as f64;
            }
            Some(out)
        });
        match out {
            Some(o) => {
                let f = o.len();
                Ok(self.push(vec![f], o, Op::MeanRows(m.id)))
            }
            None => Err(Error::Dimension(format!(
                "mean_rows of shape {:?}",
                self.shape_of(m)
            ))),
        }
    }

    /// Column-wise max of an `N x F` matrix plus the attaining row indices.
    /// Ties break to the lowest row index.
    pub fn max_readout(&self, m: Var) -> Result<(Var, Vec<usize>)> {
        let out = self.with_node(m, |s, v| {
            if s.len() != 2 {
                return None;
            }
            let (n, f) = (s[0], s[1]);
            let mut vals = vec![f64::NEG_INFINITY; f];
            let mut idx = vec![0usize; f];
            for i in 0..n {
                for j in 0..f {
                    let x = v[i * f + j];
                    if x > vals[j] {
                        vals[j] = x;
                        idx[j] = i;
                    }
                }
            }
            Some((vals, idx))
        });
        match out {
            Some((vals, idx)) => {
                let f = vals.len();
                let v = self.push(vec![f], vals, Op::MaxReadout(m.id, idx.clone()));
                Ok((v, idx))
            }
            None => Err(Error::Dimension(format!(
                "max_readout of shape {:?}",
                self.shape_of(m)
            ))),
        }
    }

    /// Masked row-wise softmax with max-subtraction. Masked entries are
    /// exactly zero; every row must keep at least one unmasked entry.
    pub fn rowwise_softmax(&self, scores: Var, mask: &[bool]) -> Result<Var> {
        enum Fail {
            Shape,
            Row(usize),
        }
        let out = self.with_node(scores, |s, v| {
            if s.len() != 2 || mask.len() != v.len() {
                return Err(Fail::Shape);
            }
            let (r, c) = (s[0], s[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let mrow = &mask[i * c..(i + 1) * c];
                let mut hi = f64::NEG_INFINITY;
                for j in 0..c {
                    if mrow[j] && row[j] > hi {
                        hi = row[j];
                    }
                }
                if hi == f64::NEG_INFINITY {
                    return Err(Fail::Row(i));
                }
                let mut denom = 0.0;
                for j in 0..c {
                    if mrow[j] {
                        let e = (row[j] - hi).exp();
                        out[i * c + j] = e;
                        denom += e;
                    }
                }
                for j in 0..c {
                    if mrow[j] {
                        out[i * c + j] /= denom;
                    }
                }
            }
            Ok(out)
        });
        match out {
            Ok(o) => {
                let shape = self.shape_of(scores);
                Ok(self.push(shape, o, Op::RowSoftmax(scores.id, mask.to_vec())))
            }
            Err(Fail::Shape) => Err(Error::Dimension(format!(
                "rowwise_softmax: scores shape {:?}, mask len {}",
                self.shape_of(scores),
                mask.len()
            ))),
            Err(Fail::Row(i)) => Err(Error::DegenerateNeighborhood { row: i }),
        }
    }

    /// `out[i][j] = u[i] + v[j]`.
    pub fn outer_sum(&self, u: Var, v: Var) -> Result<Var> {
        let uv = self.with_node(u, |s, val| {
            if s.len() == 1 {
                Some(val.to_vec())
            } else {
                None
            }
        });
        let vv = self.with_node(v, |s, val| {
            if s.len() == 1 {
                Some(val.to_vec())
            } else {
                None
            }
        });
        match (uv, vv) {
            (Some(uv), Some(vv)) => {
                let (n, m) = (uv.len(), vv.len());
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        out[i * m + j] = uv[i] + vv[j];
                    }
                }
                Ok(self.push(vec![n, m], out, Op::OuterSum(u.id, v.id)))
            }
            _ => Err(Error::Dimension("outer_sum expects two vectors".into())),
        }
    }

    /// Max-unpool: row `indices[f]` of the output receives `h[f]` at column
    /// `f`, all other rows get zero there.
    pub fn unpool(&self, h: Var, indices: &[usize], n_rows: usize) -> Result<Var> {
        let hv = self.with_node(h, |s, v| {
            if s.len() == 1 {
                Some(v.to_vec())
            } else {
                None
            }
        });
        let hv = match hv {
            Some(v) if v.len() == indices.len() && n_rows >= 1 => v,
            _ => {
                return Err(Error::Dimension(format!(
                    "unpool: hidden shape {:?}, {} indices, {n_rows} rows",
                    self.shape_of(h),
                    indices.len()
                )))
            }
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Dimension(format!(
                "unpool index {bad} out of {n_rows} rows"
            )));
        }
        let f = hv.len();
        let mut out = vec![0.0; n_rows * f];
        for (j, &i) in indices.iter().enumerate() {
            out[i * f + j] = hv[j];
        }
        Ok(self.push(vec![n_rows, f], out, Op::Unpool(h.id, indices.to_vec(), n_rows)))
    }

    /// Mean of the embedding rows selected by `tokens`.
    pub fn embed_mean(&self, table: Var, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("embed_mean of zero tokens".into()));
        }
        let out = self.with_node(table, |s, v| {
            if s.len() != 2 {
                return None;
            }
            let (vocab, e) = (s[0], s[1]);
            if tokens.iter().any(|&t| t >= vocab) {
                return None;
            }
            let mut out = vec![0.0; e];
            for &t in tokens {
                for j in 0..e {
                    out[j] += v[t * e + j];
                }
            }
            for o in &mut out {
                *o /= tokens.len() as f64;
            }
            Some(out)
        });
        match out {
            Some(o) => {
                let e = o.len();
                Ok(self.push(vec![e], o, Op::EmbedMean(table.id, tokens.to_vec())))
            }
            None => Err(Error::Input(format!(
                "embed_mean: table shape {:?}, tokens {tokens:?}",
                self.shape_of(table)
            ))),
        }
    }

    /// `-log_softmax(logits)[label]`, computed with max-subtraction.
    pub fn nll_loss(&self, logits: Var, label: usize) -> Result<Var> {
        let out = self.with_node(logits, |s, v| {
            if s.len() != 1 || label >= s[0] {
                return None;
            }
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = hi + v.iter().map(|x| (x - hi).exp()).sum::<f64>().ln();
            Some(lse - v[label])
        });
        match out {
            Some(l) => Ok(self.push(vec![1], vec![l], Op::NllLoss(logits.id, label))),
            None => Err(Error::Input(format!(
                "nll_loss: logits shape {:?}, label {label}",
                self.shape_of(logits)
            ))),
        }
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's backward budget;
    /// a second call without a fresh tape is a state error.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeState(
                "backward called twice on the same tape".into(),
            ));
        }
        if inner.nodes[loss.id].shape != [1] {
            return Err(Error::TapeState(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.id].shape
            )));
        }
        inner.consumed = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &inner.nodes[id];
            let add_to = |grads: &mut Vec<Option<Vec<f64>>>,
                          nodes: &Vec<Node>,
                          tgt: usize,
                          f: &mut dyn FnMut(&mut [f64])| {
                let slot = grads[tgt].get_or_insert_with(|| vec![0.0; nodes[tgt].value.len()]);
                f(slot);
            };
            match node.op.clone() {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (inner.nodes[a].shape[0], inner.nodes[a].shape[1]);
                    let nn = inner.nodes[b].shape[1];
                    let av = inner.nodes[a].value.clone();
                    let bv = inner.nodes[b].value.clone();
                    add_to(&mut grads, &inner.nodes, a, &mut |da| {
                        for i in 0..m {
                            for t in 0..k {
                                let mut acc = 0.0;
                                for j in 0..nn {
                                    acc += g[i * nn + j] * bv[t * nn + j];
                                }
                                da[i * k + t] += acc;
                            }
                        }
                    });
                    add_to(&mut grads, &inner.nodes, b, &mut |db| {
                        for t in 0..k {
                            for j in 0..nn {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += av[i * k + t] * g[i * nn + j];
                                }
                                db[t * nn + j] += acc;
                            }
                        }
                    });
                }
                Op::Matvec(w, x) => {
                    let (m, nn) = (inner.nodes[w].shape[0], inner.nodes[w].shape[1]);
                    let wv = inner.nodes[w].value.clone();
                    let xv = inner.nodes[x].value.clone();
                    add_to(&mut grads, &inner.nodes, w, &mut |dw| {
                        for i in 0..m {
                            for j in 0..nn {
                                dw[i * nn + j] += g[i] * xv[j];
                            }
                        }
                    });
                    add_to(&mut grads, &inner.nodes, x, &mut |dx| {
                        for j in 0..nn {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += wv[i * nn + j] * g[i];
                            }
                            dx[j] += acc;
                        }
                    });
                }
                Op::Add(a, b) => {
                    add_to(&mut grads, &inner.nodes, a, &mut |da| {
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                    add_to(&mut grads, &inner.nodes, b, &mut |db| {
                        for (d, gv) in db.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    add_to(&mut grads, &inner.nodes, a, &mut |da| {
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                    add_to(&mut grads, &inner.nodes, b, &mut |db| {
                        for (d, gv) in db.iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = inner.nodes[a].value.clone();
                    let bv = inner.nodes[b].value.clone();
                    add_to(&mut grads, &inner.nodes, a, &mut |da| {
                        for i in 0..g.len() {
                            da[i] += g[i] * bv[i];
                        }
                    });
                    add_to(&mut grads, &inner.nodes, b, &mut |db| {
                        for i in 0..g.len() {
                            db[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    add_to(&mut grads, &inner.nodes, a, &mut |da| {
                        for i in 0..g.len() {
                            da[i] += g[i] * c;
                        }
                    });
                }
                Op::Act(kind, x) => {
                    let xv = inner.nodes[x].value.clone();
                    let yv = node.value.clone();
                    add_to(&mut grads, &inner.nodes, x, &mut |dx| {
                        for i in 0..g.len() {
                            dx[i] += g[i] * kind.derivative(xv[i], yv[i]);
                        }
                    });
                }
                Op::ConcatVec(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = inner.nodes[p].value.len();
                        add_to(&mut grads, &inner.nodes, p, &mut |dp| {
                            for i in 0..len {
                                dp[i] += g[off + i];
                            }
                        });
                        off += len;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = inner.nodes[p].value.len();
                        add_to(&mut grads, &inner.nodes, p, &mut |dp| {
                            for i in 0..len {
                                dp[i] += g[off + i];
                            }
                        });
                        off += len;
                    }
                }
                Op::Row(m, i) => {
                    let c = inner.nodes[m].shape[1];
                    add_to(&mut grads, &inner.nodes, m, &mut |dm| {
                        for j in 0..c {
                            dm[i * c + j] += g[j];
                        }
                    });
                }
                Op::SliceVec(x, a, _b) => {
                    add_to(&mut grads, &inner.nodes, x, &mut |dx| {
                        for (j, gv) in g.iter().enumerate() {
                            dx[a + j] += gv;
                        }
                    });
                }
                Op::Sum(x) => {
                    add_to(&mut grads, &inner.nodes, x, &mut |dx| {
                        for d in dx.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
                Op::MeanRows(m) => {
                    let (rows, f) = (inner.nodes[m].shape[0], inner.nodes[m].shape[1]);
                    let inv = 1.0 / rows as f64;
                    add_to(&mut grads, &inner.nodes, m, &mut |dm| {
                        for i in 0..rows {
                            for j in 0..f {
                                dm[i * f + j] += g[j] * inv;
                            }
                        }
                    });
                }
                Op::MaxReadout(m, idx) => {
                    let f = inner.nodes[m].shape[1];
                    add_to(&mut grads, &inner.nodes, m, &mut |dm| {
                        for j in 0..f {
                            dm[idx[j] * f + j] += g[j];
                        }
                    });
                }
                Op::RowSoftmax(x, mask) => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let yv = node.value.clone();
                    add_to(&mut grads, &inner.nodes, x, &mut |dx| {
                        for i in 0..r {
                            let mut dot = 0.0;
                            for j in 0..c {
                                if mask[i * c + j] {
                                    dot += g[i * c + j] * yv[i * c + j];
                                }
                            }
                            for j in 0..c {
                                if mask[i * c + j] {
                                    dx[i * c + j] += yv[i * c + j] * (g[i * c + j] - dot);
                                }
                            }
                        }
                    });
                }
                Op::OuterSum(u, v) => {
                    let (nn, m) = (node.shape[0], node.shape[1]);
                    add_to(&mut grads, &inner.nodes, u, &mut |du| {
                        for i in 0..nn {
                            for j in 0..m {
                                du[i] += g[i * m + j];
                            }
                        }
                    });
                    add_to(&mut grads, &inner.nodes, v, &mut |dv| {
                        for i in 0..nn {
                            for j in 0..m {
                                dv[j] += g[i * m + j];
                            }
                        }
                    });
                }
                Op::Unpool(h, idx, _n) => {
                    let f = idx.len();
                    add_to(&mut grads, &inner.nodes, h, &mut |dh| {
                        for j in 0..f {
                            dh[j] += g[idx[j] * f + j];
                        }
                    });
                }
                Op::EmbedMean(table, tokens) => {
                    let e = inner.nodes[table].shape[1];
                    let inv = 1.0 / tokens.len() as f64;
                    add_to(&mut grads, &inner.nodes, table, &mut |dt| {
                        for &t in &tokens {
                            for j in 0..e {
                                dt[t * e + j] += g[j] * inv;
                            }
                        }
                    });
                }
                Op::NllLoss(logits, label) => {
                    let lv = inner.nodes[logits].value.clone();
                    let hi = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = lv.iter().map(|x| (x - hi).exp()).sum();
                    add_to(&mut grads, &inner.nodes, logits, &mut |dl| {
                        for (j, &x) in lv.iter().enumerate() {
                            let p = (x - hi).exp() / denom;
                            let one = if j == label { 1.0 } else { 0.0 };
                            dl[j] += g[0] * (p - one);
                        }
                    });
                }
            }
        }

        let shapes = inner.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tensor_rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let eye = tape.leaf(
            &Tensor::matrix(vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ])
            .unwrap(),
        );
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));

        let z = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let out = tape.matmul(z, a).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng(7);
        let at = Tensor::uniform(vec![4, 3], 1.0, &mut r);
        let bt = Tensor::uniform(vec![3, 2], 1.0, &mut r);
        let tape = Tape::new();
        let a = tape.leaf(&at);
        let b = tape.leaf(&bt);
        let c = tape.value(tape.matmul(a, b).unwrap());
        // independent triple-loop product
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += at.at(i, k) * bt.at(k, j);
                }
                assert_eq!(c.at(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_associativity_with_identity_is_exact() {
        let mut r = rng(11);
        let at = Tensor::uniform(vec![3, 3], 1.0, &mut r);
        let bt = Tensor::uniform(vec![3, 3], 1.0, &mut r);
        let eye = Tensor::matrix(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let tape = Tape::new();
        let (a, b, i) = (tape.leaf(&at), tape.leaf(&bt), tape.leaf(&eye));
        let ab = tape.value(tape.matmul(a, b).unwrap());
        let ai_b = {
            let ai = tape.matmul(a, i).unwrap();
            tape.value(tape.matmul(ai, b).unwrap())
        };
        let a_ib = {
            let ib = tape.matmul(i, b).unwrap();
            tape.value(tape.matmul(a, ib).unwrap())
        };
        assert_eq!(ab, ai_b);
        assert_eq!(ab, a_ib);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn activation_values() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.value(tape.activation(Activation::Relu, x));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(&Tensor::vector(vec![0.0]).unwrap());
        assert_eq!(tape.value(tape.activation(Activation::Sigmoid, z)).data()[0], 0.5);
        assert_eq!(tape.value(tape.activation(Activation::Tanh, z)).data()[0], 0.0);

        let neg = tape.leaf(&Tensor::vector(vec![-2.0]).unwrap());
        let y = tape.value(tape.activation(Activation::LeakyRelu, neg));
        assert!((y.data()[0] + 0.02).abs() < 1e-15);
    }

    #[test]
    fn concat_vec_order_and_identity() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let h = tape.leaf(&Tensor::vector(vec![3.0, 4.0, 5.0]).unwrap());
        let out = tape.concat_vec(&[x, h]).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        let single = tape.concat_vec(&[h]).unwrap();
        assert_eq!(tape.value(single), tape.value(h));
    }

    #[test]
    fn max_readout_single_row_and_tie_break() {
        let tape = Tape::new();
        let m = tape.leaf(&Tensor::matrix(vec![vec![3.0, -1.0]]).unwrap());
        let (v, idx) = tape.max_readout(m).unwrap();
        assert_eq!(tape.value(v).data(), &[3.0, -1.0]);
        assert_eq!(idx, vec![0, 0]);

        let m = tape.leaf(&Tensor::matrix(vec![vec![1.0, 5.0], vec![1.0, 2.0]]).unwrap());
        let (v, idx) = tape.max_readout(m).unwrap();
        assert_eq!(tape.value(v).data(), &[1.0, 5.0]);
        assert_eq!(idx, vec![0, 0]);
    }

    #[test]
    fn max_readout_matches_scan_oracle_and_is_row_permutation_covariant() {
        let mut r = rng(3);
        let mt = Tensor::uniform(vec![6, 4], 1.0, &mut r);
        let tape = Tape::new();
        let m = tape.leaf(&mt);
        let (v, _) = tape.max_readout(m).unwrap();
        let got = tape.value(v);
        for j in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for i in 0..6 {
                best = best.max(mt.at(i, j));
            }
            assert_eq!(got.data()[j], best);
        }
        // permute rows: values unchanged
        let perm = [5usize, 2, 0, 4, 1, 3];
        let prows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&i| (0..4).map(|j| mt.at(i, j)).collect())
            .collect();
        let pm = tape.leaf(&Tensor::matrix(prows).unwrap());
        let (pv, _) = tape.max_readout(pm).unwrap();
        assert_eq!(tape.value(pv).data(), got.data());
    }

    #[test]
    fn softmax_examples_and_invariants() {
        let tape = Tape::new();
        let s = tape.leaf(&Tensor::matrix(vec![vec![0.7, 0.7, 0.7]]).unwrap());
        let y = tape.value(tape.rowwise_softmax(s, &[true, true, true]).unwrap());
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = tape.leaf(&Tensor::matrix(vec![vec![4.0, -2.0, 9.0]]).unwrap());
        let y = tape.value(tape.rowwise_softmax(s, &[false, true, false]).unwrap());
        assert_eq!(y.data(), &[0.0, 1.0, 0.0]);

        // random row vs direct exp/sum, plus shift invariance
        let mut r = rng(21);
        let row: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mask = [true; 5];
        let s = tape.leaf(&Tensor::matrix(vec![row.clone()]).unwrap());
        let y = tape.value(tape.rowwise_softmax(s, &mask).unwrap());
        let denom: f64 = row.iter().map(|x| x.exp()).sum();
        for j in 0..5 {
            assert!((y.data()[j] - row[j].exp() / denom).abs() < 1e-12);
        }
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = row.iter().map(|x| x + 37.5).collect();
        let s2 = tape.leaf(&Tensor::matrix(vec![shifted]).unwrap());
        let y2 = tape.value(tape.rowwise_softmax(s2, &mask).unwrap());
        for j in 0..5 {
            assert!((y.data()[j] - y2.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let tape = Tape::new();
        let s = tape.leaf(&Tensor::matrix(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let err = tape.rowwise_softmax(s, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateNeighborhood { row: 1 }));
    }

    #[test]
    fn backward_sum_gives_ones_and_relu_blocks_negatives() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.3, -0.7, 1.5]).unwrap());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![-0.5, 0.5]).unwrap());
        let y = tape.activation(Activation::Relu, x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_a_tape_state_error() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        let tape2 = Tape::new();
        let x2 = tape2.leaf(&Tensor::vector(vec![1.0]).unwrap());
        let loss2 = tape2.sum(x2);
        tape2.backward(loss2).unwrap();
        assert!(matches!(tape2.backward(loss2), Err(Error::TapeState(_))));
    }

    /// Central-difference check of f(W) = sum relu(x W^T) wiggling W.
    #[test]
    fn composite_gradient_matches_central_differences() {
        let mut r = rng(5);
        let w0 = Tensor::uniform(vec![4, 3], 1.0, &mut r);
        let x0 = Tensor::uniform(vec![3], 1.0, &mut r);
        let eval = |w: &Tensor| -> f64 {
            let tape = Tape::new();
            let wv = tape.leaf(w);
            let xv = tape.leaf(&x0);
            let y = tape.matvec(wv, xv).unwrap();
            let y = tape.activation(Activation::Relu, y);
            tape.value(tape.sum(y)).data()[0]
        };
        let tape = Tape::new();
        let wv = tape.leaf(&w0);
        let xv = tape.leaf(&x0);
        let y = tape.matvec(wv, xv).unwrap();
        let y = tape.activation(Activation::Relu, y);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(wv);

        let h = 1e-6;
        for i in 0..w0.numel() {
            let mut plus = w0.clone();
            plus.data_mut()[i] += h;
            let mut minus = w0.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(rel <= 1e-5, "component {i}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn concat_gradient_splits_per_part() {
        let xt = Tensor::vector(vec![0.1, -0.4]).unwrap();
        let ht = Tensor::vector(vec![0.9, 0.2, -0.3]).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(&xt);
        let h = tape.leaf(&ht);
        let cat = tape.concat_vec(&[x, h]).unwrap();
        let sq = tape.mul(cat, cat).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        // d/dv sum(v^2) = 2v, split across parts
        for (g, v) in grads.get(x).data().iter().zip(xt.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
        for (g, v) in grads.get(h).data().iter().zip(ht.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0]);
    }

    #[test]
    fn nll_uniform_logits_is_ln_c() {
        let tape = Tape::new();
        let logits = tape.leaf(&Tensor::vector(vec![0.4; 7]).unwrap());
        let loss = tape.nll_loss(logits, 3).unwrap();
        assert!((tape.value(loss).data()[0] - (7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unpool_routes_by_index() {
        let tape = Tape::new();
        let h = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let out = tape.value(tape.unpool(h, &[2, 2, 2], 3).unwrap());
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);

        let one = tape.value(tape.unpool(h, &[0, 0, 0], 1).unwrap());
        assert_eq!(one.data(), &[1.0, 2.0, 3.0]);
    }
}
