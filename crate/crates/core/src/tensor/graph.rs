use std::sync::Arc;

use super::kernels::{gemm, softmax_in_place};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    MulConst {
        x: Var,
        c: Arc<Tensor>,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Relu(Var),
    Softmax(Var),
    RowNormalize {
        x: Var,
        sums: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Node order is a topological order, so backward is a single reverse
/// sweep. `backward` does not consume the tape: calling it twice on the same
/// loss yields identical gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the trainable leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf sharing storage with a parameter store.
    pub fn param(&mut self, value: &Arc<Tensor>) -> Var {
        self.push_shared(Arc::clone(value), Op::Leaf, true)
    }

    /// Non-trainable leaf sharing storage.
    pub fn shared_constant(&mut self, value: &Arc<Tensor>) -> Var {
        self.push_shared(Arc::clone(value), Op::Leaf, false)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = av.dims2();
        let (br, bc) = bv.dims2();
        let (d2, m) = if b_t { (bc, br) } else { (br, bc) };
        if d != d2 {
            return Err(Error::shape(
                if b_t { "matmul_nt" } else { "matmul" },
                av.shape(),
                bv.shape(),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, d, m, av.data(), false, bv.data(), b_t, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul { a, b, b_t }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1×c` (or length-`c`) row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, c) = xv.dims2();
        if bv.len() != c {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(r, b)| *r += b);
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Arc<Tensor>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(Error::shape("mul_const", xv.shape(), c.shape()));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst { x, c }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale { x, s }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax where `mask[i*c + j] == true` removes key `j` from row `i`
    /// (the `-∞` substitution). A fully masked row becomes all zeros.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax_rows_masked", xv.shape(), &[m.len()]));
            }
        }
        for (idx, v) in xv.data().iter().enumerate() {
            let masked = mask.is_some_and(|m| m[idx]);
            if !masked && !v.is_finite() {
                return Err(Error::Numeric(format!("softmax_rows: non-finite input {v}")));
            }
        }
        let mut data = xv.data().to_vec();
        for i in 0..r {
            let row_mask = mask.map(|m| &m[i * c..(i + 1) * c]);
            softmax_in_place(&mut data[i * c..(i + 1) * c], row_mask);
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Divides each row by its sum. Rows must have positive sums.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = xv.dims2();
        let mut data = xv.data().to_vec();
        let mut sums = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Numeric(format!("normalize_rows: row sum {s}")));
            }
            row.iter_mut().for_each(|v| *v /= s);
            sums.push(s);
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RowNormalize { x, sums }, rg))
    }

    /// Per-row layer normalization with affine `gamma`/`beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(Error::shape("layer_norm", xv.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let r = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            if pv.rows() != r {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), pv.shape()));
            }
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&pv.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(&[r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if width == 0 || start + width > c {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, width]));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + start + width]);
        }
        let out = Tensor::new(&[r, width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = tv.dims2();
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Input(format!("gather_rows: id {id} out of {r} rows")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(&[ids.len(), c], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Summed token cross-entropy of `logits` (rows = positions) against
    /// `targets`; rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = lv.dims2();
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        lv.ensure_finite("cross_entropy")?;
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Input(format!("cross_entropy: target {t} >= {c}")));
            }
            let row = &mut probs[i * c..(i + 1) * c];
            if Some(t) == ignore {
                row.fill(0.0);
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row, None);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// trainable leaf reachable from it. The tape is left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::new(self.nodes[i].value.shape(), data).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d) = av.dims2();
                let m = out.cols();
                if self.requires_grad(*a) {
                    // dA = dC · op(B)ᵀ
                    let buf = slot(grads, *a, n * d);
                    gemm(n, m, d, g, false, bv.data(), !*b_t, buf, true);
                }
                if self.requires_grad(*b) {
                    let buf = slot(grads, *b, d * m);
                    if *b_t {
                        // B is m×d: dB = dCᵀ · A
                        gemm(m, n, d, g, true, av.data(), false, buf, true);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(d, n, m, av.data(), true, g, false, buf, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.requires_grad(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.requires_grad(*bias) {
                    let c = out.cols();
                    let buf = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let buf = slot(grads, *a, g.len());
                    for ((o, gi), bi) in buf.iter_mut().zip(g).zip(bv.data()) {
                        *o += gi * bi;
                    }
                }
                if self.requires_grad(*b) {
                    let buf = slot(grads, *b, g.len());
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(av.data()) {
                        *o += gi * ai;
                    }
                }
            }
            Op::MulConst { x, c } => {
                let buf = slot(grads, *x, g.len());
                for ((o, gi), ci) in buf.iter_mut().zip(g).zip(c.data()) {
                    *o += gi * ci;
                }
            }
            Op::Scale { x, s } => {
                let buf = slot(grads, *x, g.len());
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let buf = slot(grads, *x, g.len());
                for ((o, gi), xi) in buf.iter_mut().zip(g).zip(xv.data()) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let buf = slot(grads, *x, g.len());
                for ((gr, yr), br) in g.chunks(c).zip(out.data().chunks(c)).zip(buf.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in br.iter_mut().zip(gr).zip(yr) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::RowNormalize { x, sums } => {
                let c = out.cols();
                let buf = slot(grads, *x, g.len());
                for (((gr, yr), br), s) in g.chunks(c).zip(out.data().chunks(c)).zip(buf.chunks_mut(c)).zip(sums) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, gi) in br.iter_mut().zip(gr) {
                        *o += (gi - dot) / s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                if self.requires_grad(*gamma) {
                    let buf = slot(grads, *gamma, c);
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, gi), hi) in buf.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let buf = slot(grads, *beta, c);
                    for gr in g.chunks(c) {
                        add_into(buf, gr);
                    }
                }
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let buf = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; c];
                    for (((gr, hr), br), rs) in g.chunks(c).zip(xhat.chunks(c)).zip(buf.chunks_mut(c)).zip(rstd) {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            br[j] += rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        add_into(slot(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let buf = slot(grads, p, r * w);
                        for i in 0..r {
                            add_into(
                                &mut buf[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2();
                let w = out.cols();
                let buf = slot(grads, *x, r * c);
                for i in 0..r {
                    add_into(&mut buf[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let buf = slot(grads, *table, tv.len());
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut buf[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0];
                let buf = slot(grads, *logits, probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    let row = &mut buf[i * c..(i + 1) * c];
                    for (o, p) in row.iter_mut().zip(&probs[i * c..(i + 1) * c]) {
                        *o += scale * p;
                    }
                    row[t] -= scale;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let buf = slot(grads, *x, n);
                buf.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2();
                let buf = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_graph_fn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;
    const SEEDS: u64 = 20;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Runs the finite-difference check of `build` over `SEEDS` random inputs.
    fn check_op(shape: &[usize], build: impl Fn(&mut Graph, Var, &mut ChaCha8Rng) -> Result<Var>) {
        for seed in 0..SEEDS {
            let mut r = rng(seed);
            let theta = Tensor::randn(shape, 1.0, &mut r);
            let err = check_graph_fn(
                |g, x| {
                    let mut r = rng(1000 + seed);
                    build(g, x, &mut r)
                },
                &theta,
                1e-5,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed}: relative error {err}");
        }
    }

    /// Contracts an arbitrary output with fixed random weights into a scalar.
    fn project(g: &mut Graph, y: Var, r: &mut ChaCha8Rng) -> Result<Var> {
        let w = Tensor::randn(g.value(y).shape(), 1.0, r);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    #[test]
    fn sum_gives_ones_and_square_gives_double() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2, 2]), true);
        let y = g.relu(w).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut r = rng(5);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut r), true);
        let b = g.leaf(Tensor::randn(&[4, 2], 1.0, &mut r), true);
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c).unwrap();
        let l = project(&mut g, s, &mut r).unwrap();
        let g1 = g.backward(l).unwrap();
        let g2 = g.backward(l).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones(&[2, 2]), true);
        let c = g.constant(Tensor::ones(&[2, 2]));
        let y = g.mul(a, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(a).is_some());
    }

    #[test]
    fn gradient_shapes_match_parameters() {
        let mut r = rng(9);
        let mut g = Graph::new();
        let table = g.leaf(Tensor::randn(&[5, 3], 1.0, &mut r), true);
        let x = g.gather_rows(table, &[4, 0, 4]).unwrap();
        let l = project(&mut g, x, &mut r).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(table).unwrap().shape(), &[5, 3]);
        // row 4 is gathered twice, row 1 never
        assert!(grads.get(table).unwrap().row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_matmul_both_sides() {
        check_op(&[3, 4], |g, x, r| {
            let b = g.constant(Tensor::randn(&[4, 2], 1.0, r));
            let y = g.matmul(x, b)?;
            project(g, y, r)
        });
        check_op(&[4, 2], |g, x, r| {
            let a = g.constant(Tensor::randn(&[3, 4], 1.0, r));
            let y = g.matmul(a, x)?;
            project(g, y, r)
        });
    }

    #[test]
    fn grad_matmul_nt_both_sides() {
        check_op(&[3, 4], |g, x, r| {
            let b = g.constant(Tensor::randn(&[5, 4], 1.0, r));
            let y = g.matmul_nt(x, b)?;
            project(g, y, r)
        });
        check_op(&[5, 4], |g, x, r| {
            let a = g.constant(Tensor::randn(&[3, 4], 1.0, r));
            let y = g.matmul_nt(a, x)?;
            project(g, y, r)
        });
    }

    #[test]
    fn grad_elementwise_ops() {
        check_op(&[3, 3], |g, x, r| {
            let y = g.mul(x, x)?;
            let z = g.add(y, x)?;
            let s = g.scale(z, -0.7)?;
            project(g, s, r)
        });
        check_op(&[2, 5], |g, x, r| {
            let c = std::sync::Arc::new(Tensor::randn(&[2, 5], 1.0, r));
            let y = g.mul_const(x, c)?;
            project(g, y, r)
        });
        check_op(&[1, 4], |g, bias, r| {
            let x = g.constant(Tensor::randn(&[3, 4], 1.0, r));
            let y = g.add_row(x, bias)?;
            let y = g.mul(y, y)?;
            project(g, y, r)
        });
    }

    #[test]
    fn grad_relu_away_from_kink() {
        check_op(&[4, 4], |g, x, r| {
            // shift inputs away from zero so the kink is never straddled
            let shifted = g.value(x).map(|v| if v.abs() < 0.05 { 0.1 } else { 0.0 });
            let s = g.constant(shifted);
            let y = g.add(x, s)?;
            let y = g.relu(y)?;
            project(g, y, r)
        });
    }

    #[test]
    fn grad_softmax_and_masked_softmax() {
        check_op(&[3, 5], |g, x, r| {
            let y = g.softmax_rows(x)?;
            project(g, y, r)
        });
        check_op(&[3, 3], |g, x, r| {
            let mask = [false, true, true, false, false, true, false, false, false];
            let y = g.softmax_rows_masked(x, Some(&mask))?;
            project(g, y, r)
        });
    }

    #[test]
    fn grad_normalize_rows() {
        check_op(&[3, 4], |g, x, r| {
            let p = g.softmax_rows(x)?;
            let w = std::sync::Arc::new(Tensor::uniform(&[3, 4], 0.1, 1.0, r));
            let q = g.mul_const(p, w)?;
            let y = g.normalize_rows(q)?;
            project(g, y, r)
        });
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        check_op(&[3, 6], |g, x, r| {
            let gamma = g.constant(Tensor::randn(&[6], 1.0, r));
            let beta = g.constant(Tensor::randn(&[6], 1.0, r));
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            project(g, y, r)
        });
        check_op(&[6], |g, gamma, r| {
            let x = g.constant(Tensor::randn(&[3, 6], 1.0, r));
            let beta = g.constant(Tensor::randn(&[6], 1.0, r));
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            project(g, y, r)
        });
        check_op(&[6], |g, beta, r| {
            let x = g.constant(Tensor::randn(&[3, 6], 1.0, r));
            let gamma = g.constant(Tensor::randn(&[6], 1.0, r));
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            project(g, y, r)
        });
    }

    #[test]
    fn grad_shape_ops() {
        check_op(&[2, 6], |g, x, r| {
            let a = g.slice_cols(x, 0, 2)?;
            let b = g.slice_cols(x, 2, 4)?;
            let c = g.concat_cols(&[b, a])?;
            let other = g.constant(Tensor::randn(&[3, 6], 1.0, r));
            let d = g.concat_rows(&[c, other, x])?;
            let t = g.transpose(d)?;
            let t = g.mul(t, t)?;
            project(g, t, r)
        });
        check_op(&[5, 3], |g, table, r| {
            let y = g.gather_rows(table, &[1, 3, 1, 0])?;
            let y = g.mul(y, y)?;
            project(g, y, r)
        });
    }

    #[test]
    fn grad_cross_entropy_with_ignored_rows() {
        check_op(&[4, 5], |g, x, _| g.cross_entropy_sum(x, &[2, 0, 4, 0], Some(0)));
        check_op(&[3, 5], |g, x, _| g.cross_entropy_sum(x, &[1, 1, 3], None));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 7]));
        let l = g.cross_entropy_sum(x, &[1, 2, 3], None).unwrap();
        assert!((g.value(l).item() / 3.0 - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
        assert!(g.matmul_nt(a, b).is_ok());
    }
}
