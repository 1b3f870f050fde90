//! Tape-based reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients into
//! a per-parameter buffer. Parameters live outside the tape and are identified
//! by a dense parameter id, so one parameter set can be reused across many
//! tapes (one per sample or batch).

use ndarray::{Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<usize> },
    MatMul(usize, usize),
    /// a · bᵀ
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// (n, m) + broadcast (1, m)
    AddRow(usize, usize),
    /// (n, m) + broadcast (n, 1)
    AddCol(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    /// Row-wise layer norm with learned gain and bias, both (1, m).
    LayerNorm { x: usize, gain: usize, bias: usize },
    /// Row-wise softmax over a square matrix with entries above the diagonal
    /// masked out.
    CausalSoftmax(usize),
    SliceCols { x: usize, start: usize, end: usize },
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, rows: Vec<usize> },
    /// Mean cross-entropy of row-wise softmax against target column indices.
    SoftmaxCrossEntropy { logits: usize, targets: Vec<usize> },
    /// (C, H·W) -> (C·k·k, H·W) patch extraction with zero padding (k-1)/2.
    Im2Col { x: usize, h: usize, w: usize, k: usize },
    /// (n, m) -> (n, 1) row means.
    MeanCols(usize),
    SumAll(usize),
    Square(usize),
    /// Elementwise sqrt with gradient defined as 0 at 0.
    SqrtGuard(usize),
    /// Elementwise max(x, 0).
    Hinge(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&mut self, value: Array2<f64>, pid: usize) -> Var {
        self.push(value, Op::Leaf { param: Some(pid) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[col.0].value;
        self.push(v, Op::AddCol(a.0, col.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let m = row.len() as f64;
            let mu = row.sum() / m;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let sd = (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) / sd * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(out, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 })
    }

    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.nrows();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..=i {
                mx = mx.max(x[[i, j]]);
            }
            let mut z = 0.0;
            for j in 0..=i {
                let e = (x[[i, j]] - mx).exp();
                out[[i, j]] = e;
                z += e;
            }
            for j in 0..=i {
                out[[i, j]] /= z;
            }
        }
        self.push(out, Op::CausalSoftmax(a.0))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(ndarray::s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x: a.0, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts match");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::zeros((rows.len(), x.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&x.row(r));
        }
        self.push(v, Op::GatherRows { x: a.0, rows: rows.to_vec() })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = &self.nodes[logits.0].value;
        assert_eq!(z.nrows(), targets.len());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = z.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - row[t];
        }
        let v = Array2::from_elem((1, 1), total / targets.len() as f64);
        self.push(v, Op::SoftmaxCrossEntropy { logits: logits.0, targets: targets.to_vec() })
    }

    pub fn im2col(&mut self, a: Var, h: usize, w: usize, k: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let c = x.nrows();
        assert_eq!(x.ncols(), h * w);
        let pad = (k - 1) / 2;
        let mut out = Array2::zeros((c * k * k, h * w));
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let orow = ch * k * k + ki * k + kj;
                    for i in 0..h {
                        let si = i as isize + ki as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + kj as isize - pad as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            out[[orow, i * w + j]] = x[[ch, si as usize * w + sj as usize]];
                        }
                    }
                }
            }
        }
        self.push(out, Op::Im2Col { x: a.0, h, w, k })
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let m = x.ncols() as f64;
        let v = x
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|s| s / m);
        self.push(v, Op::MeanCols(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn sqrt_guard(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::SqrtGuard(a.0))
    }

    pub fn hinge(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Hinge(a.0))
    }

    /// Backpropagate from scalar `root`, adding parameter gradients into
    /// `param_grads` (indexed by parameter id, shapes matching the params).
    pub fn backward(&self, root: Var, param_grads: &mut [Array2<f64>]) {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem(self.nodes[root.0].value.dim(), 1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let add_grad = |grads: &mut Vec<Option<Array2<f64>>>, target: usize, delta: Array2<f64>| {
                match &mut grads[target] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        param_grads[*pid] += &g;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(&self.nodes[*b].value);
                    let db = g.t().dot(&self.nodes[*a].value);
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, g.clone());
                    add_grad(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *a, g.clone());
                    add_grad(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(&mut grads, *a, g);
                    add_grad(&mut grads, *row, drow);
                }
                Op::AddCol(a, col) => {
                    let dcol = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_grad(&mut grads, *a, g);
                    add_grad(&mut grads, *col, dcol);
                }
                Op::Scale(a, c) => add_grad(&mut grads, *a, &g * *c),
                Op::Gelu(a) => {
                    let dx = self.nodes[*a].value.mapv(gelu_prime);
                    add_grad(&mut grads, *a, &g * &dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let (n, m) = xv.dim();
                    let mut dx = Array2::zeros((n, m));
                    let mut dgain = Array2::zeros((1, m));
                    let mut dbias = Array2::zeros((1, m));
                    for i in 0..n {
                        let row = xv.row(i);
                        let mu = row.sum() / m as f64;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                        let sd = (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mu) / sd).collect();
                        let dxhat: Vec<f64> = (0..m).map(|j| g[[i, j]] * gv[[0, j]]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dgain[[0, j]] += g[[i, j]] * xhat[j];
                            dbias[[0, j]] += g[[i, j]];
                            dx[[i, j]] = (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sd;
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *gain, dgain);
                    add_grad(&mut grads, *bias, dbias);
                }
                Op::CausalSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let n = y.nrows();
                    let mut dx = Array2::zeros((n, n));
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..=i {
                            dot += g[[i, j]] * y[[i, j]];
                        }
                        for j in 0..=i {
                            dx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    add_grad(&mut grads, *a, dx);
                }
                Op::SliceCols { x, start, end } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(xv.dim());
                    dx.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    add_grad(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let dp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        add_grad(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(xv.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(i);
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let z = &self.nodes[*logits].value;
                    let upstream = g[[0, 0]];
                    let n = targets.len() as f64;
                    let mut dz = Array2::zeros(z.dim());
                    for (i, &t) in targets.iter().enumerate() {
                        let row = z.row(i);
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for (j, e) in exps.iter().enumerate() {
                            let p = e / sum;
                            dz[[i, j]] = upstream * (p - if j == t { 1.0 } else { 0.0 }) / n;
                        }
                    }
                    add_grad(&mut grads, *logits, dz);
                }
                Op::Im2Col { x, h, w, k } => {
                    let (h, w, k) = (*h, *w, *k);
                    let c = self.nodes[*x].value.nrows();
                    let pad = (k - 1) / 2;
                    let mut dx = Array2::zeros((c, h * w));
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let orow = ch * k * k + ki * k + kj;
                                for i in 0..h {
                                    let si = i as isize + ki as isize - pad as isize;
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    for j in 0..w {
                                        let sj = j as isize + kj as isize - pad as isize;
                                        if sj < 0 || sj >= w as isize {
                                            continue;
                                        }
                                        dx[[ch, si as usize * w + sj as usize]] += g[[orow, i * w + j]];
                                    }
                                }
                            }
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::MeanCols(a) => {
                    let m = self.nodes[*a].value.ncols();
                    let (n, _) = self.nodes[*a].value.dim();
                    let mut dx = Array2::zeros((n, m));
                    for i in 0..n {
                        let v = g[[i, 0]] / m as f64;
                        dx.row_mut(i).fill(v);
                    }
                    add_grad(&mut grads, *a, dx);
                }
                Op::SumAll(a) => {
                    let dx = Array2::from_elem(self.nodes[*a].value.dim(), g[[0, 0]]);
                    add_grad(&mut grads, *a, dx);
                }
                Op::Square(a) => {
                    let dx = &g * &(&self.nodes[*a].value * 2.0);
                    add_grad(&mut grads, *a, dx);
                }
                Op::SqrtGuard(a) => {
                    let y = &self.nodes[idx].value;
                    let dx = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gi, &yi| if yi == 0.0 { 0.0 } else { gi / (2.0 * yi) });
                    add_grad(&mut grads, *a, dx);
                }
                Op::Hinge(a) => {
                    let dx = ndarray::Zip::from(&g)
                        .and(&self.nodes[*a].value)
                        .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                    add_grad(&mut grads, *a, dx);
                }
            }
        }
    }
}

/// Named, ordered parameter tensors. The registration order is the
/// serialization order of every checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, pid: usize) -> &Array2<f64> {
        &self.tensors[pid]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn set(&mut self, pid: usize, tensor: Array2<f64>) {
        assert_eq!(self.tensors[pid].dim(), tensor.dim());
        self.tensors[pid] = tensor;
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Adam with fixed hyperparameters, deterministic given a fixed update order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pid, g) in grads.iter().enumerate() {
            self.m[pid] = &self.m[pid] * self.beta1 + &(g * (1.0 - self.beta1));
            self.v[pid] = &self.v[pid] * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mhat = &self.m[pid] / bc1;
            let vhat = &self.v[pid] / bc2;
            let update = ndarray::Zip::from(&mhat)
                .and(&vhat)
                .map_collect(|&m, &v| self.lr * m / (v.sqrt() + self.eps));
            params.tensors_mut()[pid] -= &update;
        }
    }
}

/// Plain SGD with a fixed learning rate.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        for (pid, g) in grads.iter().enumerate() {
            params.tensors_mut()[pid] -= &(g * self.lr);
        }
    }
}

/// Standard normal sample via Box-Muller.
pub fn randn_scalar(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// (n, m) matrix of iid N(0, std²) entries.
pub fn randn_matrix(rng: &mut rand_chacha::ChaCha8Rng, n: usize, m: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| randn_scalar(rng) * std)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
