//! Define-by-run reverse-mode autodiff on a flat tape.
//!
//! Every op appends one node holding its output value, so node ids form a
//! topological order and backward is a single reverse sweep. All values are
//! `f64`; whatever backward needs beyond input and output values (masks,
//! normalization statistics, sampled dropout masks, softmax probabilities)
//! is saved on the node at forward time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_row_masked, Tensor};

/// Handle to a node on one specific graph's tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    /// C = A @ B.
    MatMul { a: NodeId, b: NodeId },
    /// C = A @ B^T.
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Row-broadcast bias add: out[i, j] = a[i, j] + bias[j].
    AddRowBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    /// Row-wise softmax at temperature `tau`; masked positions get exactly 0.
    MaskedSoftmax { a: NodeId, keep: Option<Vec<bool>>, tau: f64 },
    /// Per-row normalization with learned gain and shift.
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, rstd: Vec<f64> },
    /// Row gather: out[i, :] = table[ids[i], :].
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    SliceRows { a: NodeId, start: usize, len: usize },
    /// Inverted dropout; mask entries are 0 or 1/(1-p).
    Dropout { a: NodeId, mask: Vec<f64> },
    /// Mean over rows of the label-smoothed negative log-likelihood.
    LabelSmoothedNll { logits: NodeId, targets: Vec<usize>, eps: f64, probs: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients from one backward sweep, addressed by the ids of the graph
/// that produced them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `id`, if the node was reached and needs grad.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let t = &self.nodes[id.0].value;
        if t.shape().len() != 2 {
            return Err(Error::invalid_argument(format!(
                "{what} must be 2-d, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::invalid_argument(format!(
                "matmul inner dims differ: {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, ka, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, Tensor::from_vec(vec![m, n], out)?, needs))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul_nt lhs")?;
        let (n, kb) = self.dims2(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(Error::invalid_argument(format!(
                "matmul_nt inner dims differ: {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_raw(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, ka, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNt { a, b }, Tensor::from_vec(vec![m, n], out)?, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::invalid_argument(format!(
                "add shapes differ: {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, Tensor::from_vec(shape, data)?, needs))
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "add_row_bias input")?;
        if self.nodes[bias.0].value.shape() != [n] {
            return Err(Error::invalid_argument(format!(
                "bias shape {:?} does not match row width {n}",
                self.nodes[bias.0].value.shape()
            )));
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        let bv = self.nodes[bias.0].value.data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRowBias { a, bias }, Tensor::from_vec(vec![m, n], data)?, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Op::Scale { a, c },
            Tensor::from_vec(shape, data).expect("same shape as input"),
            needs,
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> =
            self.nodes[a.0].value.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Op::Relu { a },
            Tensor::from_vec(shape, data).expect("same shape as input"),
            needs,
        )
    }

    /// Row-wise softmax at temperature `tau`. `keep`, when given, is a full
    /// row-major mask; every row must keep at least one position.
    pub fn masked_softmax(
        &mut self,
        a: NodeId,
        keep: Option<Vec<bool>>,
        tau: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "softmax input")?;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid_argument(format!("tau must be positive and finite, got {tau}")));
        }
        if let Some(k) = &keep {
            if k.len() != m * n {
                return Err(Error::invalid_argument(format!(
                    "mask length {} does not match {m}x{n}",
                    k.len()
                )));
            }
        }
        let mut data = vec![0.0; m * n];
        {
            let z = self.nodes[a.0].value.data();
            for i in 0..m {
                let row_keep = keep.as_ref().map(|k| &k[i * n..(i + 1) * n]);
                softmax_row_masked(&z[i * n..(i + 1) * n], row_keep, tau, &mut data[i * n..(i + 1) * n])?;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::MaskedSoftmax { a, keep, tau }, Tensor::from_vec(vec![m, n], data)?, needs))
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "layer_norm input")?;
        if self.nodes[gamma.0].value.shape() != [n] || self.nodes[beta.0].value.shape() != [n] {
            return Err(Error::invalid_argument("layer_norm gain/shift must match row width"));
        }
        let mut mean = vec![0.0; m];
        let mut rstd = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        {
            let x = self.nodes[a.0].value.data();
            let g = self.nodes[gamma.0].value.data();
            let b = self.nodes[beta.0].value.data();
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[i] = mu;
                rstd[i] = rs;
                for j in 0..n {
                    data[i * n + j] = (row[j] - mu) * rs * g[j] + b[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { a, gamma, beta, mean, rstd },
            Tensor::from_vec(vec![m, n], data)?,
            needs,
        ))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "embedding table")?;
        if ids.is_empty() {
            return Err(Error::invalid_argument("embedding lookup needs at least one id"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let t = self.nodes[table.0].value.data();
            for &id in ids {
                if id >= v {
                    return Err(Error::invalid_argument(format!(
                        "embedding id {id} out of range for table with {v} rows"
                    )));
                }
                data.extend_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::Embedding { table, ids: ids.to_vec() },
            Tensor::from_vec(vec![ids.len(), d], data)?,
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid_argument("concat_cols needs at least one part"));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols part")?;
            if mp != m {
                return Err(Error::invalid_argument("concat_cols parts differ in rows"));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.nodes[p.0].value.data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            Tensor::from_vec(vec![m, total], data)?,
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "slice_cols input")?;
        if len == 0 || start + len > n {
            return Err(Error::invalid_argument(format!(
                "column slice {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        {
            let src = self.nodes[a.0].value.data();
            for i in 0..m {
                data.extend_from_slice(&src[i * n + start..i * n + start + len]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SliceCols { a, start, len }, Tensor::from_vec(vec![m, len], data)?, needs))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "slice_rows input")?;
        if len == 0 || start + len > m {
            return Err(Error::invalid_argument(format!(
                "row slice {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let src = self.nodes[a.0].value.data();
        let data = src[start * n..(start + len) * n].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::SliceRows { a, start, len }, Tensor::from_vec(vec![len, n], data)?, needs))
    }

    /// Inverted dropout with keep probability 1-p; identity when p == 0.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid_argument(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - p);
        let numel = self.nodes[a.0].value.numel();
        let mask: Vec<f64> =
            (0..numel).map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale }).collect();
        let data: Vec<f64> =
            self.nodes[a.0].value.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Dropout { a, mask }, Tensor::from_vec(shape, data)?, needs))
    }

    /// Mean over rows of the label-smoothed NLL of `targets` under
    /// row-wise softmax of `logits`:
    /// `(1-eps) * (-log p_target) + (eps / V) * sum_j (-log p_j)`.
    pub fn label_smoothed_nll(&mut self, logits: NodeId, targets: &[usize], eps: f64) -> Result<NodeId> {
        let (steps, v) = self.dims2(logits, "loss logits")?;
        if targets.len() != steps {
            return Err(Error::invalid_argument(format!(
                "{} targets for {steps} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::invalid_argument(format!("smoothing must be in [0, 1), got {eps}")));
        }
        let mut probs = vec![0.0; steps * v];
        let mut loss = 0.0;
        {
            let z = self.nodes[logits.0].value.data();
            for (i, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(Error::invalid_argument(format!(
                        "target {t} out of range for vocabulary of {v}"
                    )));
                }
                let row = &mut probs[i * v..(i + 1) * v];
                softmax_row_masked(&z[i * v..(i + 1) * v], None, 1.0, row)?;
                let nll_target = -row[t].ln();
                let nll_all: f64 = row.iter().map(|&p| -p.ln()).sum();
                loss += (1.0 - eps) * nll_target + eps * nll_all / v as f64;
            }
        }
        loss /= steps as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::LabelSmoothedNll { logits, targets: targets.to_vec(), eps, probs },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Reverse sweep from `loss` (a single-element node). Returns one
    /// gradient buffer per reached node that needs grad.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid_argument("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (left, right) = grads.split_at_mut(i);
            let g: &[f64] = right[0].as_deref().expect("checked above");
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                    let n = self.nodes[b.0].value.shape()[1];
                    if self.needs(*a) {
                        let da = ensure(&mut left[a.0], m * k);
                        matmul_nt_raw(g, bv, m, n, k, da);
                    }
                    if self.needs(*b) {
                        let db = ensure(&mut left[b.0], k * n);
                        matmul_tn_raw(av, g, k, m, n, db);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                    let n = self.nodes[b.0].value.shape()[0];
                    if self.needs(*a) {
                        let da = ensure(&mut left[a.0], m * k);
                        matmul_raw(g, bv, m, n, k, da);
                    }
                    if self.needs(*b) {
                        let db = ensure(&mut left[b.0], n * k);
                        matmul_tn_raw(g, av, n, m, k, db);
                    }
                }
                Op::Add { a, b } => {
                    for &x in [a, b].iter() {
                        if self.needs(*x) {
                            let dx = ensure(&mut left[x.0], g.len());
                            for (d, &gv) in dx.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::AddRowBias { a, bias } => {
                    let n = self.nodes[bias.0].value.numel();
                    let m = g.len() / n;
                    if self.needs(*a) {
                        let da = ensure(&mut left[a.0], g.len());
                        for (d, &gv) in da.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    if self.needs(*bias) {
                        let db = ensure(&mut left[bias.0], n);
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if self.needs(*a) {
                        let da = ensure(&mut left[a.0], g.len());
                        for (d, &gv) in da.iter_mut().zip(g) {
                            *d += c * gv;
                        }
                    }
                }
                Op::Relu { a } => {
                    if self.needs(*a) {
                        let y = node.value.data();
                        let da = ensure(&mut left[a.0], g.len());
                        for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                            if yv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::MaskedSoftmax { a, keep, tau } => {
                    if self.needs(*a) {
                        let y = node.value.data();
                        let n = node.value.shape()[1];
                        let m = node.value.shape()[0];
                        let da = ensure(&mut left[a.0], m * n);
                        for i in 0..m {
                            let yr = &y[i * n..(i + 1) * n];
                            let gr = &g[i * n..(i + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                            let dr = &mut da[i * n..(i + 1) * n];
                            for j in 0..n {
                                let kept = keep.as_ref().is_none_or(|k| k[i * n + j]);
                                if kept {
                                    dr[j] += yr[j] / tau * (gr[j] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { a, gamma, beta, mean, rstd } => {
                    let n = node.value.shape()[1];
                    let m = node.value.shape()[0];
                    let x = self.nodes[a.0].value.data();
                    let gam = self.nodes[gamma.0].value.data();
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xr = &x[i * n..(i + 1) * n];
                        let (mu, rs) = (mean[i], rstd[i]);
                        if self.needs(*beta) {
                            let db = ensure(&mut left[beta.0], n);
                            for j in 0..n {
                                db[j] += gr[j];
                            }
                        }
                        if self.needs(*gamma) {
                            let dg = ensure(&mut left[gamma.0], n);
                            for j in 0..n {
                                dg[j] += gr[j] * (xr[j] - mu) * rs;
                            }
                        }
                        if self.needs(*a) {
                            // dxhat = g * gamma; dx = rs * (dxhat - mean(dxhat)
                            //   - xhat * mean(dxhat * xhat)) per row.
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..n {
                                let xhat = (xr[j] - mu) * rs;
                                let dxhat = gr[j] * gam[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let inv_n = 1.0 / n as f64;
                            let da = ensure(&mut left[a.0], m * n);
                            let dr = &mut da[i * n..(i + 1) * n];
                            for j in 0..n {
                                let xhat = (xr[j] - mu) * rs;
                                let dxhat = gr[j] * gam[j];
                                dr[j] += rs * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.needs(*table) {
                        let d = node.value.shape()[1];
                        let numel = self.nodes[table.0].value.numel();
                        let dt = ensure(&mut left[table.0], numel);
                        for (i, &id) in ids.iter().enumerate() {
                            let gr = &g[i * d..(i + 1) * d];
                            let tr = &mut dt[id * d..(id + 1) * d];
                            for (t, &gv) in tr.iter_mut().zip(gr) {
                                *t += gv;
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let m = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.shape()[1];
                        if self.needs(p) {
                            let numel = self.nodes[p.0].value.numel();
                            let dp = ensure(&mut left[p.0], numel);
                            for i in 0..m {
                                let gr = &g[i * total + offset..i * total + offset + w];
                                let dr = &mut dp[i * w..(i + 1) * w];
                                for (d, &gv) in dr.iter_mut().zip(gr) {
                                    *d += gv;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    if self.needs(*a) {
                        let n = self.nodes[a.0].value.shape()[1];
                        let m = node.value.shape()[0];
                        let numel = self.nodes[a.0].value.numel();
                        let da = ensure(&mut left[a.0], numel);
                        for i in 0..m {
                            let gr = &g[i * len..(i + 1) * len];
                            let dr = &mut da[i * n + start..i * n + start + len];
                            for (d, &gv) in dr.iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::SliceRows { a, start, len } => {
                    if self.needs(*a) {
                        let n = self.nodes[a.0].value.shape()[1];
                        let numel = self.nodes[a.0].value.numel();
                        let da = ensure(&mut left[a.0], numel);
                        let dr = &mut da[start * n..(start + len) * n];
                        for (d, &gv) in dr.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    if self.needs(*a) {
                        let da = ensure(&mut left[a.0], g.len());
                        for ((d, &gv), &mv) in da.iter_mut().zip(g).zip(mask) {
                            *d += gv * mv;
                        }
                    }
                }
                Op::LabelSmoothedNll { logits, targets, eps, probs } => {
                    if self.needs(*logits) {
                        let v = self.nodes[logits.0].value.shape()[1];
                        let steps = targets.len();
                        let gs = g[0];
                        let dl = ensure(&mut left[logits.0], steps * v);
                        let smooth = eps / v as f64;
                        for (i, &t) in targets.iter().enumerate() {
                            let pr = &probs[i * v..(i + 1) * v];
                            let dr = &mut dl[i * v..(i + 1) * v];
                            for j in 0..v {
                                let q = smooth + if j == t { 1.0 - eps } else { 0.0 };
                                dr[j] += gs * (pr[j] - q) / steps as f64;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn ensure(slot: &mut Option<Vec<f64>>, numel: usize) -> &mut Vec<f64> {
    let v = slot.get_or_insert_with(|| vec![0.0; numel]);
    debug_assert_eq!(v.len(), numel);
    v
}
