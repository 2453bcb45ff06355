//! Minimal dense-array reverse-mode differentiation: just enough ops for
//! the self-attention posterior network and the kernel-parameter links.

use crate::error::{Error, Result};
use crate::kernel::{sigmoid, softplus, WeibullKernel};

/// Dense row-major matrix; column vectors are `(n, 1)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self { data, rows, cols: 1 }
    }

    pub fn scalar(v: f64) -> Self {
        Self { data: vec![v], rows: 1, cols: 1 }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar_value(&self) -> f64 {
        self.data[0]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position on the tape; indexes the adjoint list from `backward`.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SelectCol(NodeId, usize),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Dot(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu(NodeId),
    Softplus(NodeId),
    WeibullEval { theta: NodeId, x: f64 },
    WeibullIntegral { theta: NodeId, a: f64, b: f64 },
}

struct NodeRec {
    value: Tensor,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> (f64, f64) {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let val = 0.5 * x * (1.0 + th);
    let grad = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * s * (1.0 + 3.0 * GELU_C * x * x);
    (val, grad)
}

/// Computation tape; nodes are appended in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<NodeRec>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Const)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(NodeRec { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_err("add", va, vb));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let t = Tensor { data, rows: va.rows, cols: va.cols };
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_err("sub", va, vb));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let t = Tensor { data, rows: va.rows, cols: va.cols };
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        let t = Tensor {
            data: va.data.iter().map(|x| x * c).collect(),
            rows: va.rows,
            cols: va.cols,
        };
        self.push(t, Op::Scale(a, c), "scale")
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        let t = Tensor {
            data: va.data.iter().map(|x| x + c).collect(),
            rows: va.rows,
            cols: va.cols,
        };
        self.push(t, Op::AddConst(a), "add_const")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(shape_err("matmul", va, vb));
        }
        let (m, k, n) = (va.rows, va.cols, vb.cols);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va.data[i * k + p];
                for j in 0..n {
                    data[i * n + j] += aip * vb.data[p * n + j];
                }
            }
        }
        let t = Tensor { data, rows: m, cols: n };
        self.push(t, Op::MatMul(a, b), "matmul")
    }

    /// Stack column vectors vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("expected column vectors, got {}x{}", v.rows, v.cols),
                });
            }
            data.extend_from_slice(&v.data);
        }
        let t = Tensor::vector(data);
        self.push(t, Op::ConcatRows(parts.to_vec()), "concat")
    }

    /// Column `j` of a matrix as a vector; used for embedding lookups.
    pub fn select_col(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let va = self.value(a);
        if j >= va.cols {
            return Err(Error::ShapeMismatch {
                op: "select_col",
                detail: format!("column {j} of {}x{}", va.rows, va.cols),
            });
        }
        let data = (0..va.rows).map(|i| va.at(i, j)).collect();
        let t = Tensor::vector(data);
        self.push(t, Op::SelectCol(a, j), "select_col")
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map_unary(a, f64::sin);
        self.push(t, Op::Sin(a), "sin")
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map_unary(a, f64::cos);
        self.push(t, Op::Cos(a), "cos")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map_unary(a, f64::exp);
        self.push(t, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map_unary(a, f64::ln);
        self.push(t, Op::Log(a), "log")
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map_unary(a, softplus);
        self.push(t, Op::Softplus(a), "softplus")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map_unary(a, |x| gelu_scalar(x).0);
        self.push(t, Op::Gelu(a), "gelu")
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor {
            data: va.data.iter().map(|&x| f(x)).collect(),
            rows: va.rows,
            cols: va.cols,
        }
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) || va.cols != 1 {
            return Err(shape_err("dot", va, vb));
        }
        let v: f64 = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(v), Op::Dot(a, b), "dot")
    }

    /// Tensor times scalar node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = self.value(s);
        if !vs.is_scalar() {
            return Err(shape_err("mul_scalar", self.value(a), vs));
        }
        let c = vs.scalar_value();
        let va = self.value(a);
        let t = Tensor {
            data: va.data.iter().map(|x| x * c).collect(),
            rows: va.rows,
            cols: va.cols,
        };
        self.push(t, Op::MulScalar(a, s), "mul_scalar")
    }

    /// Tensor divided by scalar node.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = self.value(s);
        if !vs.is_scalar() {
            return Err(shape_err("div_scalar", self.value(a), vs));
        }
        let c = vs.scalar_value();
        let va = self.value(a);
        let t = Tensor {
            data: va.data.iter().map(|x| x / c).collect(),
            rows: va.rows,
            cols: va.cols,
        };
        self.push(t, Op::DivScalar(a, s), "div_scalar")
    }

    /// Feature-axis layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.cols != 1 || !self.value(gain).same_shape(vx) || !self.value(bias).same_shape(vx) {
            return Err(shape_err("layer_norm", vx, self.value(gain)));
        }
        let n = vx.rows as f64;
        let mean = vx.data.iter().sum::<f64>() / n;
        let var = vx.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = (var + LN_EPS).sqrt();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let data = vx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| g[i] * (v - mean) / sd + b[i])
            .collect();
        let t = Tensor { data, rows: vx.rows, cols: 1 };
        self.push(t, Op::LayerNorm { x, gain, bias }, "layer_norm")
    }

    /// Weibull kernel value at fixed `x` as a function of the parameter
    /// vector `theta = (p, k_shape, lam)` (all positive).
    pub fn weibull_eval(&mut self, theta: NodeId, x: f64) -> Result<NodeId> {
        let k = self.theta_kernel(theta)?;
        let v = k.eval(x)?;
        self.push(Tensor::scalar(v), Op::WeibullEval { theta, x }, "weibull_eval")
    }

    /// Weibull kernel integral over fixed `[a, b]` as a function of theta.
    pub fn weibull_integral(&mut self, theta: NodeId, a: f64, b: f64) -> Result<NodeId> {
        let k = self.theta_kernel(theta)?;
        let v = k.integral(a, b)?;
        self.push(
            Tensor::scalar(v),
            Op::WeibullIntegral { theta, a, b },
            "weibull_integral",
        )
    }

    fn theta_kernel(&self, theta: NodeId) -> Result<WeibullKernel> {
        let v = self.value(theta);
        if v.rows != 3 || v.cols != 1 {
            return Err(Error::ShapeMismatch {
                op: "weibull",
                detail: format!("theta must be 3x1, got {}x{}", v.rows, v.cols),
            });
        }
        WeibullKernel::new(v.data[0], v.data[1], v.data[2])
    }

    /// Attention pooling: `sum_t f_t v_t / sum_t f_t` with `f_t =
    /// exp(score_t)`. Scores are shifted by their max before exponentiation;
    /// the normalized weights are unchanged by the shift.
    pub fn weighted_sum_normalize(
        &mut self,
        scores: &[NodeId],
        values: &[NodeId],
    ) -> Result<NodeId> {
        if scores.is_empty() || scores.len() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum_normalize",
                detail: format!("{} scores vs {} values", scores.len(), values.len()),
            });
        }
        let max = scores
            .iter()
            .map(|&s| self.value(s).scalar_value())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut num: Option<NodeId> = None;
        let mut den: Option<NodeId> = None;
        for (&s, &v) in scores.iter().zip(values) {
            let shifted = self.add_const(s, -max)?;
            let f = self.exp(shifted)?;
            let fv = self.mul_scalar(v, f)?;
            num = Some(match num {
                Some(acc) => self.add(acc, fv)?,
                None => fv,
            });
            den = Some(match den {
                Some(acc) => self.add(acc, f)?,
                None => f,
            });
        }
        self.div_scalar(num.unwrap(), den.unwrap())
    }

    /// Reverse pass from a scalar root; returns one adjoint per node
    /// (same shape as the node's value; zero for disconnected nodes).
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor>> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot { rows: rv.rows, cols: rv.cols });
        }
        let mut adj: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        adj[root.0].data[0] = 1.0;
        for idx in (0..=root.0).rev() {
            let d = adj[idx].clone();
            if d.data.iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], &d.data);
                    accumulate(&mut adj[b.0], &d.data);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], &d.data);
                    for (x, y) in adj[b.0].data.iter_mut().zip(&d.data) {
                        *x -= y;
                    }
                }
                Op::Scale(a, c) => {
                    for (x, y) in adj[a.0].data.iter_mut().zip(&d.data) {
                        *x += c * y;
                    }
                }
                Op::AddConst(a) => accumulate(&mut adj[a.0], &d.data),
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.rows, va.cols, vb.cols);
                    // dA += dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += d.data[i * n + j] * vb.data[p * n + j];
                            }
                            adj[a.0].data[i * k + p] += s;
                        }
                    }
                    // dB += A^T * dC
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va.data[i * k + p] * d.data[i * n + j];
                            }
                            adj[b.0].data[p * n + j] += s;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.data.len();
                        for (x, y) in adj[p.0].data.iter_mut().zip(&d.data[off..off + len]) {
                            *x += y;
                        }
                        off += len;
                    }
                }
                Op::SelectCol(a, j) => {
                    let cols = self.nodes[a.0].value.cols;
                    for (i, y) in d.data.iter().enumerate() {
                        adj[a.0].data[i * cols + j] += y;
                    }
                }
                Op::Sin(a) => {
                    let va = &self.nodes[a.0].value;
                    for i in 0..d.data.len() {
                        adj[a.0].data[i] += d.data[i] * va.data[i].cos();
                    }
                }
                Op::Cos(a) => {
                    let va = &self.nodes[a.0].value;
                    for i in 0..d.data.len() {
                        adj[a.0].data[i] -= d.data[i] * va.data[i].sin();
                    }
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].value;
                    for i in 0..d.data.len() {
                        adj[a.0].data[i] += d.data[i] * out.data[i];
                    }
                }
                Op::Log(a) => {
                    let va = &self.nodes[a.0].value;
                    for i in 0..d.data.len() {
                        adj[a.0].data[i] += d.data[i] / va.data[i];
                    }
                }
                Op::Softplus(a) => {
                    let va = &self.nodes[a.0].value;
                    for i in 0..d.data.len() {
                        adj[a.0].data[i] += d.data[i] * sigmoid(va.data[i]);
                    }
                }
                Op::Gelu(a) => {
                    let va = &self.nodes[a.0].value;
                    for i in 0..d.data.len() {
                        adj[a.0].data[i] += d.data[i] * gelu_scalar(va.data[i]).1;
                    }
                }
                Op::Dot(a, b) => {
                    let s = d.data[0];
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for i in 0..va.data.len() {
                        adj[a.0].data[i] += s * vb.data[i];
                        adj[b.0].data[i] += s * va.data[i];
                    }
                }
                Op::MulScalar(a, s) => {
                    let c = self.nodes[s.0].value.scalar_value();
                    let va = &self.nodes[a.0].value;
                    let mut ds = 0.0;
                    for i in 0..d.data.len() {
                        adj[a.0].data[i] += d.data[i] * c;
                        ds += d.data[i] * va.data[i];
                    }
                    adj[s.0].data[0] += ds;
                }
                Op::DivScalar(a, s) => {
                    let c = self.nodes[s.0].value.scalar_value();
                    let va = &self.nodes[a.0].value;
                    let mut ds = 0.0;
                    for i in 0..d.data.len() {
                        adj[a.0].data[i] += d.data[i] / c;
                        ds -= d.data[i] * va.data[i] / (c * c);
                    }
                    adj[s.0].data[0] += ds;
                }
                Op::LayerNorm { x, gain, bias } => {
                    let vx = &self.nodes[x.0].value;
                    let n = vx.rows as f64;
                    let mean = vx.data.iter().sum::<f64>() / n;
                    let var = vx.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let sd = (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = vx.data.iter().map(|&v| (v - mean) / sd).collect();
                    let g = &self.nodes[gain.0].value.data;
                    let dxhat: Vec<f64> =
                        d.data.iter().zip(g).map(|(dy, gi)| dy * gi).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..vx.rows {
                        adj[x.0].data[i] +=
                            (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat) / sd;
                        adj[gain.0].data[i] += d.data[i] * xhat[i];
                        adj[bias.0].data[i] += d.data[i];
                    }
                }
                Op::WeibullEval { theta, x } => {
                    let kern = self.theta_kernel(*theta)?;
                    let g = kern.eval_grads(*x)?;
                    for i in 0..3 {
                        adj[theta.0].data[i] += d.data[0] * g[i];
                    }
                }
                Op::WeibullIntegral { theta, a, b } => {
                    let kern = self.theta_kernel(*theta)?;
                    let g = kern.integral_grads_between(*a, *b)?;
                    for i in 0..3 {
                        adj[theta.0].data[i] += d.data[0] * g[i];
                    }
                }
            }
        }
        Ok(adj)
    }
}

fn accumulate(target: &mut Tensor, delta: &[f64]) {
    for (x, y) in target.data.iter_mut().zip(delta) {
        *x += y;
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        detail: format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_gradient_is_2w() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let root = tape.dot(w, w).unwrap();
        let adj = tape.backward(root).unwrap();
        assert_eq!(adj[0].data, vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_adjoint() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0]));
        let root = tape.dot(w, w).unwrap();
        let adj = tape.backward(root).unwrap();
        assert_eq!(adj[unused.0].data, vec![0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).data[0], 0.0);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 3.0, 3.0]));
        let gain = tape.leaf(Tensor::vector(vec![2.0, 2.0, 2.0]));
        let bias = tape.leaf(Tensor::vector(vec![0.5, 0.6, 0.7]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for (v, b) in tape.value(y).data.iter().zip([0.5, 0.6, 0.7]) {
            assert!((v - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(1.7));
        let v = tape.leaf(Tensor::vector(vec![4.0, 5.0]));
        let out = tape.weighted_sum_normalize(&[s], &[v]).unwrap();
        assert_eq!(tape.value(out).data, vec![4.0, 5.0]);
    }

    #[test]
    fn attention_weights_invariant_to_shift() {
        // two keys, large scores: the internal max shift must keep weights
        // exact and finite
        let mut tape = Tape::new();
        let s1 = tape.leaf(Tensor::scalar(500.0));
        let s2 = tape.leaf(Tensor::scalar(499.0));
        let v1 = tape.leaf(Tensor::vector(vec![1.0]));
        let v2 = tape.leaf(Tensor::vector(vec![0.0]));
        let out = tape.weighted_sum_normalize(&[s1, s2], &[v1, v2]).unwrap();
        let w = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.value(out).data[0] - w).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_a_construction_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let w = tape.leaf(Tensor::new(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
            let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
            let y = tape.matmul(w, x).unwrap();
            let g = tape.gelu(y).unwrap();
            let root = tape.dot(g, g).unwrap();
            tape.backward(root).unwrap()[0].data.clone()
        };
        assert_eq!(build(), build());
    }

    /// Composite graph mixing most ops; adjoints vs central differences.
    #[test]
    fn finite_difference_check_composite() {
        let eval = |w: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let wm = tape.leaf(Tensor::new(2, 4, w[..8].to_vec()).unwrap());
            let gain = tape.leaf(Tensor::vector(w[8..10].to_vec()));
            let bias = tape.leaf(Tensor::vector(w[10..12].to_vec()));
            let theta_raw = tape.leaf(Tensor::vector(w[12..15].to_vec()));
            let x = tape.constant(Tensor::vector(vec![0.3, -0.8, 0.5, 1.2]));
            let y = tape.matmul(wm, x).unwrap();
            let ln = tape.layer_norm(y, gain, bias).unwrap();
            let g = tape.gelu(ln).unwrap();
            let s1 = tape.dot(g, g).unwrap();
            let sp = tape.softplus(theta_raw).unwrap();
            let theta = tape.add_const(sp, 1e-3).unwrap();
            let phi = tape.weibull_eval(theta, 0.7).unwrap();
            let integ = tape.weibull_integral(theta, 0.0, 2.5).unwrap();
            let lphi = tape.log(phi).unwrap();
            let sum1 = tape.add(s1, lphi).unwrap();
            let sum2 = tape.sub(sum1, integ).unwrap();
            let c = tape.cos(sum2).unwrap();
            let s = tape.sin(sum2).unwrap();
            let both = tape.concat_rows(&[c, s]).unwrap();
            let picked = tape.select_col(wm, 1).unwrap();
            let half = tape.scale(picked, 0.5).unwrap();
            let mixed = tape.add(both, half).unwrap();
            let root = tape.dot(mixed, mixed).unwrap();
            tape.value(root).scalar_value()
        };
        let grad = |w: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let wm = tape.leaf(Tensor::new(2, 4, w[..8].to_vec()).unwrap());
            let gain = tape.leaf(Tensor::vector(w[8..10].to_vec()));
            let bias = tape.leaf(Tensor::vector(w[10..12].to_vec()));
            let theta_raw = tape.leaf(Tensor::vector(w[12..15].to_vec()));
            let x = tape.constant(Tensor::vector(vec![0.3, -0.8, 0.5, 1.2]));
            let y = tape.matmul(wm, x).unwrap();
            let ln = tape.layer_norm(y, gain, bias).unwrap();
            let g = tape.gelu(ln).unwrap();
            let s1 = tape.dot(g, g).unwrap();
            let sp = tape.softplus(theta_raw).unwrap();
            let theta = tape.add_const(sp, 1e-3).unwrap();
            let phi = tape.weibull_eval(theta, 0.7).unwrap();
            let integ = tape.weibull_integral(theta, 0.0, 2.5).unwrap();
            let lphi = tape.log(phi).unwrap();
            let sum1 = tape.add(s1, lphi).unwrap();
            let sum2 = tape.sub(sum1, integ).unwrap();
            let c = tape.cos(sum2).unwrap();
            let s = tape.sin(sum2).unwrap();
            let both = tape.concat_rows(&[c, s]).unwrap();
            let picked = tape.select_col(wm, 1).unwrap();
            let half = tape.scale(picked, 0.5).unwrap();
            let mixed = tape.add(both, half).unwrap();
            let root = tape.dot(mixed, mixed).unwrap();
            let adj = tape.backward(root).unwrap();
            let mut out = Vec::new();
            for id in [wm, gain, bias, theta_raw] {
                out.extend_from_slice(&adj[id.0].data);
            }
            out
        };
        let w0: Vec<f64> = (0..15).map(|i| 0.3 + 0.11 * i as f64 * (-1.0f64).powi(i)).collect();
        let g = grad(&w0);
        for d in 0..w0.len() {
            let h = 1e-4 * w0[d].abs().max(1.0);
            let mut up = w0.clone();
            let mut dn = w0.clone();
            up[d] += h;
            dn[d] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let rel = (g[d] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "entry {d}: {} vs fd {fd}", g[d]);
        }
    }
}
