use std::sync::Arc;

use super::kernels::{self, gelu, gelu_grad, mm_nt_into, mm_tn_into};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row rotation angles for rotary encodings.
///
/// Row `i` rotates feature pairs `(2p, 2p+1)` by `angle[i][p]`. Pairs with a
/// zero angle pass through unchanged.
#[derive(Clone, Debug)]
pub struct RotaryTable {
    rows: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Self {
        assert_eq!(angles.len(), rows * pairs);
        Self {
            rows,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.pairs * 2
    }

    fn apply(&self, data: &[f64], inverse: bool) -> Vec<f64> {
        let w = self.width();
        let mut out = data.to_vec();
        for i in 0..self.rows {
            for p in 0..self.pairs {
                let (c, mut s) = (self.cos[i * self.pairs + p], self.sin[i * self.pairs + p]);
                if inverse {
                    s = -s;
                }
                let (x0, x1) = (data[i * w + 2 * p], data[i * w + 2 * p + 1]);
                out[i * w + 2 * p] = x0 * c - x1 * s;
                out[i * w + 2 * p + 1] = x0 * s + x1 * c;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    Reshape(Var),
    /// output[i] = input[index[i]]
    Gather(Var, Arc<Vec<usize>>),
    Sum(Var),
    /// x[..., k] + b[k]
    AddBias(Var, Var),
    /// Row-wise RMS normalization over the last axis with gain g[k].
    RmsNorm(Var, Var, f64),
    Rotary(Var, Arc<RotaryTable>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Node indices are assigned in creation order, so reverse index order is a
/// valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`]. Only nodes that require a
/// gradient carry one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed back.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn buffer_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn check_binary(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sa.is_empty() || sb.is_empty() {
            Ok(())
        } else {
            Err(dim_err(op, format!("shapes {:?} and {:?} are not broadcastable", sa, sb)))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_binary(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            ta.zip(tb, name, f)?
        } else if tb.rank() == 0 {
            let s = tb.item();
            ta.map(|v| f(v, s))
        } else {
            let s = ta.item();
            tb.map(|v| f(s, v))
        };
        Ok(out)
    }

    /// Elementwise sum; either operand may be a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| dim_err("softmax_rows", "rank-0 input"))?;
        if n == 0 {
            return Err(dim_err("softmax_rows", "last extent is zero"));
        }
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, index) = kernels::permute_index(self.shape(a), axes)?;
        self.gather(a, Arc::new(index), &shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(dim_err("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Picks `input[index[i]]` for every output position `i`. Gradients
    /// scatter-add back through the same map.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(dim_err(
                "gather",
                format!("shape {:?} needs {} indices, got {}", shape, n, index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(dim_err("gather", format!("index {} out of range {}", bad, src.len())));
        }
        let out = Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gather(a, index), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Sum of squares scaled by `1/denom`.
    pub fn sq_sum_scaled(&mut self, a: Var, denom: f64) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 1.0 / denom))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let k = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [k] {
            return Err(dim_err(
                "add_bias",
                format!("bias {:?} against input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(k) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain`, row-wise over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let k = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [k] || k == 0 {
            return Err(dim_err(
                "rms_norm",
                format!("gain {:?} against input {:?}", tg.shape(), tx.shape()),
            ));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(k) {
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / k as f64 + eps).sqrt();
            for (o, gv) in row.iter_mut().zip(tg.data()) {
                *o *= inv * gv;
            }
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm(x, gain, eps), rg))
    }

    /// Rotates feature pairs of a `[rows × width]`-shaped input (any leading
    /// shape whose product is `rows`).
    pub fn rotary(&mut self, x: Var, table: Arc<RotaryTable>) -> Result<Var> {
        let tx = self.value(x);
        let w = *tx.shape().last().unwrap_or(&0);
        if w != table.width() || tx.numel() != table.rows() * w {
            return Err(dim_err(
                "rotary",
                format!(
                    "input {:?} against table {}×{}",
                    tx.shape(),
                    table.rows(),
                    table.width()
                ),
            ));
        }
        let out = Tensor::new(tx.shape().to_vec(), table.apply(tx.data(), false))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rotary(x, table), rg))
    }

    /// `x · w + b` over the last axis of `x` (any leading shape).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| dim_err("linear", "rank-0 input"))?;
        let rows = shape.iter().product::<usize>() / k.max(1);
        let flat = self.reshape(x, &[rows, k])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let n = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(y, &out_shape)
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Takes `&self`, so repeated calls on the same tape state return identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: vec![None; self.nodes.len()],
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|data| Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }

    /// Scalar-broadcast aware accumulation of `g * df` into an operand.
    fn acc_binary(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], df: impl Fn(usize) -> f64) {
        let scalar = self.nodes[v.0].value.rank() == 0 && g.len() != 1;
        self.accumulate(grads, v, |buf| {
            if scalar {
                buf[0] += g.iter().enumerate().map(|(i, gv)| gv * df(i)).sum::<f64>();
            } else {
                for (i, (b, gv)) in buf.iter_mut().zip(g).enumerate() {
                    *b += gv * df(i);
                }
            }
        });
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let r = ta.rank();
                let (m, k, n) = (ta.shape()[r - 2], ta.shape()[r - 1], tb.shape()[r - 1]);
                let batch = ta.numel() / (m * k).max(1);
                self.accumulate(grads, *a, |buf| {
                    for bi in 0..batch {
                        mm_nt_into(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for bi in 0..batch {
                        mm_tn_into(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut buf[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_binary(grads, *a, g, |_| 1.0);
                self.acc_binary(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_binary(grads, *a, g, |_| 1.0);
                self.acc_binary(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick = |t: &Tensor, i: usize| if t.rank() == 0 { t.data()[0] } else { t.data()[i] };
                self.acc_binary(grads, *a, g, |i| pick(tb, i));
                self.acc_binary(grads, *b, g, |i| pick(ta, i));
            }
            Op::Scale(a, s) => self.acc_binary(grads, *a, g, |_| *s),
            Op::AddScalar(a) => self.acc_binary(grads, *a, g, |_| 1.0),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc_binary(grads, *a, g, |i| gelu_grad(x[i]));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc_binary(grads, *a, g, |i| 1.0 - y[i] * y[i]);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                self.accumulate(grads, *a, |buf| {
                    for ((yr, gr), br) in y.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((b, &yv), &gv) in br.iter_mut().zip(yr).zip(gr) {
                            *b += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc_binary(grads, *a, g, |_| 1.0),
            Op::Gather(a, index) => {
                self.accumulate(grads, *a, |buf| {
                    for (&src, &gv) in index.iter().zip(g) {
                        buf[src] += gv;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |buf| {
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.acc_binary(grads, *x, g, |_| 1.0);
                let k = self.value(*b).numel();
                self.accumulate(grads, *b, |buf| {
                    for row in g.chunks(k) {
                        for (bv, gv) in buf.iter_mut().zip(row) {
                            *bv += gv;
                        }
                    }
                });
            }
            Op::RmsNorm(x, gain, eps) => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let k = tg.numel();
                let inv: Vec<f64> = tx
                    .data()
                    .chunks(k)
                    .map(|row| 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / k as f64 + eps).sqrt())
                    .collect();
                self.accumulate(grads, *x, |buf| {
                    for (r, ((xr, gr), br)) in tx.data().chunks(k).zip(g.chunks(k)).zip(buf.chunks_mut(k)).enumerate() {
                        let s = inv[r];
                        // d/dx_j of x_i*s*g_i = g_i*s*(δ_ij - x_i x_j s^2 / k)
                        let dot: f64 = xr
                            .iter()
                            .zip(gr)
                            .zip(tg.data())
                            .map(|((xv, gv), gn)| xv * gv * gn)
                            .sum();
                        for j in 0..k {
                            br[j] += s * gr[j] * tg.data()[j] - xr[j] * s * s * s * dot / k as f64;
                        }
                    }
                });
                self.accumulate(grads, *gain, |buf| {
                    for (r, (xr, gr)) in tx.data().chunks(k).zip(g.chunks(k)).enumerate() {
                        for j in 0..k {
                            buf[j] += gr[j] * xr[j] * inv[r];
                        }
                    }
                });
            }
            Op::Rotary(x, table) => {
                let back = table.apply(g, true);
                self.acc_binary(grads, *x, &back, |_| 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_leaf_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn constants_get_no_buffer() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::eye(2));
        let x = tape.param(Tensor::ones(&[1, 2]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn repeated_uses_accumulate() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn scalar_broadcast_add() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[3], |i| i as f64));
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, zero).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(x)));
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn scale_by_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[4], |i| i as f64 + 1.0));
        let y = tape.scale(x, 0.0);
        assert_eq!(tape.value(y).abs_sum(), 0.0);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().abs_sum(), 0.0);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 4], 2.5));
        let s = tape.softmax_rows(c).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let r = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let s = tape.softmax_rows(r).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn matmul_hand_cases() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1., 1.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3., 7.]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        assert!(a.matmul(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn reshape_round_trip() {
        let x = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
        let back = x.reshape(&[6]).unwrap().reshape(&[2, 3]).unwrap();
        assert!(back.bit_eq(&x));
        assert!(x.reshape(&[4]).is_err());
    }

    #[test]
    fn permute_inverse() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64 * 0.5);
        let p = x.permute(&[1, 2, 0, 3]).unwrap();
        assert_eq!(p.shape(), &[3, 4, 2, 5]);
        let back = p.permute(&[2, 0, 1, 3]).unwrap();
        assert!(back.bit_eq(&x));
        assert!(x.permute(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn rotary_inverse_restores() {
        let table = RotaryTable::from_angles(2, 2, &[0.3, -1.2, 2.0, 0.0]);
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let back = table.apply(&table.apply(&x, false), true);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
