//! Dense tensors with reverse-mode differentiation on a define-by-run tape.
//!
//! Every forward op appends a node to the [`Tape`]; `backward` walks the
//! nodes in reverse and accumulates gradients via the chain rule. The tape
//! is rebuilt each forward pass, so variable-length sequences need no
//! special handling.

use rand::Rng;

use crate::error::TensorError;

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Conv1dSame { seq: TensorId, kernel: TensorId, bias: TensorId, half_window: usize },
    Relu { x: TensorId },
    Tanh { x: TensorId },
    MaskedSoftmax { x: TensorId, mask: Vec<bool> },
    Gather { table: TensorId, ids: Vec<usize> },
    // keep[i] is 0.0 for dropped elements, 1/(1−rate) for survivors.
    Dropout { x: TensorId, keep: Vec<f64> },
    Add { a: TensorId, b: TensorId },
    AddRowBroadcast { m: TensorId, bias: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Transpose { x: TensorId },
    StackRows { rows: Vec<TensorId> },
    Sum { x: TensorId },
    LogSumExp { x: TensorId },
    Reshape { x: TensorId },
}

struct Node {
    op: Op,
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Vec<f64>,
}

/// Recorded computation graph. Nodes are stored in execution order, which
/// is a topological order by construction.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    /// Gradient buffer of `t`; zeros until `backward` has run.
    pub fn grad(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn scalar(&self, t: TensorId) -> f64 {
        debug_assert_eq!(numel(&self.nodes[t.0].shape), 1);
        self.nodes[t.0].data[0]
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(numel(&shape), data.len(), "leaf data/shape mismatch");
        self.push(Op::Leaf, data, shape, requires_grad)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let n = numel(&shape);
        self.leaf(vec![0.0; n], shape, false)
    }

    fn push(&mut self, op: Op, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        let n = data.len();
        self.nodes.push(Node { op, data, shape, requires_grad, grad: vec![0.0; n] });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn check_finite(&self, t: TensorId, op: &'static str) -> Result<TensorId, TensorError> {
        if self.nodes[t.0].data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op, node: t.0 });
        }
        Ok(t)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Matrix product of `a: [m,k]` and `b: [k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let row = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(row) {
                        *o += av * bv;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let id = self.push(Op::MatMul { a, b }, out, vec![m, n], rg);
        self.check_finite(id, "matmul")
    }

    /// 1-D convolution with zero padding so the output length equals the
    /// input length. `seq: [L,D]`, `kernel: [N_f,(2K+1)*D]`, `bias: [N_f]`,
    /// output `[L,N_f]`.
    pub fn conv1d_same(
        &mut self,
        seq: TensorId,
        kernel: TensorId,
        bias: TensorId,
        half_window: usize,
    ) -> Result<TensorId, TensorError> {
        let (ss, sk, sb) = (self.shape(seq), self.shape(kernel), self.shape(bias));
        if ss.len() != 2 || ss[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_same",
                detail: format!("sequence shape {ss:?}"),
            });
        }
        let (l, d) = (ss[0], ss[1]);
        let window = 2 * half_window + 1;
        if sk.len() != 2 || sk[1] != window * d || sb != [sk[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_same",
                detail: format!("kernel {sk:?}, bias {sb:?}, window {window}, D {d}"),
            });
        }
        let nf = sk[0];
        let mut out = vec![0.0; l * nf];
        {
            let dseq = &self.nodes[seq.0].data;
            let dk = &self.nodes[kernel.0].data;
            let dbias = &self.nodes[bias.0].data;
            for i in 0..l {
                for f in 0..nf {
                    let krow = &dk[f * window * d..(f + 1) * window * d];
                    let mut acc = dbias[f];
                    for o in 0..window {
                        let j = i as isize + o as isize - half_window as isize;
                        if j < 0 || j >= l as isize {
                            continue;
                        }
                        let srow = &dseq[j as usize * d..(j as usize + 1) * d];
                        let kseg = &krow[o * d..(o + 1) * d];
                        for (kv, sv) in kseg.iter().zip(srow) {
                            acc += kv * sv;
                        }
                    }
                    out[i * nf + f] = acc;
                }
            }
        }
        let rg = self.rg(seq) || self.rg(kernel) || self.rg(bias);
        let id = self.push(Op::Conv1dSame { seq, kernel, bias, half_window }, out, vec![l, nf], rg);
        self.check_finite(id, "conv1d_same")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        let id = self.push(Op::Relu { x }, out, shape, rg);
        self.check_finite(id, "relu")
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        let id = self.push(Op::Tanh { x }, out, shape, rg);
        self.check_finite(id, "tanh")
    }

    /// Softmax over the flattened elements of `x`, restricted to positions
    /// where `mask` is true. Masked positions come out exactly 0. Stabilized
    /// by subtracting the max over unmasked entries.
    pub fn masked_softmax(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId, TensorError> {
        let n = self.nodes[x.0].data.len();
        if mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask length {} vs {} elements", mask.len(), n),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::InvalidMask);
        }
        let data = &self.nodes[x.0].data;
        let max = data
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; n];
        let mut z = 0.0;
        for i in 0..n {
            if mask[i] {
                out[i] = (data[i] - max).exp();
                z += out[i];
            }
        }
        for v in out.iter_mut() {
            *v /= z;
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        let id = self.push(Op::MaskedSoftmax { x, mask: mask.to_vec() }, out, shape, rg);
        self.check_finite(id, "masked_softmax")
    }

    /// Row lookup: `table: [V,D]`, output `[len(ids), D]`. Repeated ids
    /// accumulate gradient into the same row on backward.
    pub fn embedding_gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_gather",
                detail: format!("table shape {st:?}"),
            });
        }
        let (v, d) = (st[0], st[1]);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { id, rows: v });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        let id = self.push(Op::Gather { table, ids: ids.to_vec() }, out, vec![ids.len(), d], rg);
        self.check_finite(id, "embedding_gather")
    }

    /// Inverted dropout: zero each element with probability `rate` and scale
    /// survivors by 1/(1−rate). With `training == false` this is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        x: TensorId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate { rate });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].data.len();
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&keep)
            .map(|(v, k)| v * k)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        let id = self.push(Op::Dropout { x, keep }, out, shape, rg);
        self.check_finite(id, "dropout")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        let id = self.push(Op::Add { a, b }, out, shape, rg);
        self.check_finite(id, "add")
    }

    /// `m: [L,D]` plus `bias: [D]` added to every row.
    pub fn add_row_broadcast(&mut self, m: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (sm, sb) = (self.shape(m), self.shape(bias));
        if sm.len() != 2 || sb != [sm[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("{sm:?} + {sb:?}"),
            });
        }
        let (l, d) = (sm[0], sm[1]);
        let mut out = Vec::with_capacity(l * d);
        for i in 0..l {
            for j in 0..d {
                out.push(self.nodes[m.0].data[i * d + j] + self.nodes[bias.0].data[j]);
            }
        }
        let rg = self.rg(m) || self.rg(bias);
        let id = self.push(Op::AddRowBroadcast { m, bias }, out, vec![l, d], rg);
        self.check_finite(id, "add_row_broadcast")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if numel(self.shape(a)) != numel(self.shape(b)) {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        let id = self.push(Op::Sub { a, b }, out, shape, rg);
        self.check_finite(id, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        let id = self.push(Op::Mul { a, b }, out, shape, rg);
        self.check_finite(id, "mul")
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        let id = self.push(Op::Scale { x, c }, out, shape, rg);
        self.check_finite(id, "scale")
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("{s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.nodes[x.0].data[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose { x }, out, vec![n, m], rg))
    }

    /// Stack tensors with equal element counts as the rows of a `[k,D]` matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "stack_rows",
                detail: "no rows".into(),
            });
        }
        let d = numel(self.shape(rows[0]));
        let mut out = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &r in rows {
            if numel(self.shape(r)) != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("row with {} elements, expected {d}", numel(self.shape(r))),
                });
            }
            out.extend_from_slice(&self.nodes[r.0].data);
            rg |= self.rg(r);
        }
        let id = self.push(Op::StackRows { rows: rows.to_vec() }, out, vec![rows.len(), d], rg);
        self.check_finite(id, "stack_rows")
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        let id = self.push(Op::Sum { x }, vec![s], vec![1], rg);
        self.check_finite(id, "sum")
    }

    /// log Σ exp over all elements, max-stabilized, as a `[1]` scalar.
    pub fn log_sum_exp(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let data = &self.nodes[x.0].data;
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = data.iter().map(|v| (v - max).exp()).sum();
        let out = max + z.ln();
        let rg = self.rg(x);
        let id = self.push(Op::LogSumExp { x }, vec![out], vec![1], rg);
        self.check_finite(id, "log_sum_exp")
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        if numel(&shape) != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(x)),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, data, shape, rg))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Populates the grad buffer of every
    /// tensor that `loss` depends on; grads of unreachable tensors stay zero.
    ///
    /// Accumulation rule: a tape supports exactly one backward pass. A second
    /// call errors rather than double-accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardConsumed);
        }
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) {
        // Take the node's op and grad out to satisfy the borrow checker
        // (ops never reference their own node); the grad is restored at
        // the end so it stays readable after the sweep.
        let op = self.nodes[i].op.clone();
        let g = std::mem::take(&mut self.nodes[i].grad);
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    let db = &self.nodes[b.0].data;
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += g[r * n + c] * db[p * n + c];
                            }
                            da[r * k + p] = acc;
                        }
                    }
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let mut dbg = vec![0.0; k * n];
                    let da = &self.nodes[a.0].data;
                    for p in 0..k {
                        for r in 0..m {
                            let av = da[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                dbg[p * n + c] += av * g[r * n + c];
                            }
                        }
                    }
                    self.accum(b, &dbg);
                }
            }
            Op::Conv1dSame { seq, kernel, bias, half_window } => {
                let (l, d) = (self.nodes[seq.0].shape[0], self.nodes[seq.0].shape[1]);
                let nf = self.nodes[kernel.0].shape[0];
                let window = 2 * half_window + 1;
                if self.rg(bias) {
                    let mut db = vec![0.0; nf];
                    for i in 0..l {
                        for f in 0..nf {
                            db[f] += g[i * nf + f];
                        }
                    }
                    self.accum(bias, &db);
                }
                if self.rg(kernel) {
                    let mut dk = vec![0.0; nf * window * d];
                    let dseq = &self.nodes[seq.0].data;
                    for i in 0..l {
                        for o in 0..window {
                            let j = i as isize + o as isize - half_window as isize;
                            if j < 0 || j >= l as isize {
                                continue;
                            }
                            let srow = &dseq[j as usize * d..(j as usize + 1) * d];
                            for f in 0..nf {
                                let gv = g[i * nf + f];
                                if gv == 0.0 {
                                    continue;
                                }
                                let kseg = &mut dk[f * window * d + o * d..f * window * d + (o + 1) * d];
                                for (kv, sv) in kseg.iter_mut().zip(srow) {
                                    *kv += gv * sv;
                                }
                            }
                        }
                    }
                    self.accum(kernel, &dk);
                }
                if self.rg(seq) {
                    let mut ds = vec![0.0; l * d];
                    let dk = &self.nodes[kernel.0].data;
                    for i in 0..l {
                        for o in 0..window {
                            let j = i as isize + o as isize - half_window as isize;
                            if j < 0 || j >= l as isize {
                                continue;
                            }
                            let srow = &mut ds[j as usize * d..(j as usize + 1) * d];
                            for f in 0..nf {
                                let gv = g[i * nf + f];
                                if gv == 0.0 {
                                    continue;
                                }
                                let kseg = &dk[f * window * d + o * d..f * window * d + (o + 1) * d];
                                for (sv, kv) in srow.iter_mut().zip(kseg) {
                                    *sv += gv * kv;
                                }
                            }
                        }
                    }
                    self.accum(seq, &ds);
                }
            }
            Op::Relu { x } => {
                // Subgradient at 0 is 0.
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Tanh { x } => {
                let dx: Vec<f64> = self.nodes[i]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(y, gv)| gv * (1.0 - y * y))
                    .collect();
                self.accum(x, &dx);
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = &self.nodes[i].data;
                let s: f64 = y.iter().zip(&g).map(|(yv, gv)| yv * gv).sum();
                let dx: Vec<f64> = y
                    .iter()
                    .zip(&g)
                    .zip(&mask)
                    .map(|((yv, gv), &m)| if m { yv * (gv - s) } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                self.accum(table, &dt);
            }
            Op::Dropout { x, keep } => {
                let dx: Vec<f64> = g.iter().zip(&keep).map(|(gv, k)| gv * k).collect();
                self.accum(x, &dx);
            }
            Op::Add { a, b } => {
                if self.rg(a) {
                    self.accum(a, &g);
                }
                if self.rg(b) {
                    self.accum(b, &g);
                }
            }
            Op::AddRowBroadcast { m, bias } => {
                if self.rg(m) {
                    self.accum(m, &g);
                }
                if self.rg(bias) {
                    let d = self.nodes[bias.0].data.len();
                    let mut db = vec![0.0; d];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % d] += gv;
                    }
                    self.accum(bias, &db);
                }
            }
            Op::Sub { a, b } => {
                if self.rg(a) {
                    self.accum(a, &g);
                }
                if self.rg(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accum(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accum(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                self.accum(x, &dx);
            }
            Op::Transpose { x } => {
                let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        dx[c * n + r] = g[r * m + c];
                    }
                }
                self.accum(x, &dx);
            }
            Op::StackRows { rows } => {
                let d = g.len() / rows.len();
                for (idx, &r) in rows.iter().enumerate() {
                    if self.rg(r) {
                        self.accum(r, &g[idx * d..(idx + 1) * d]);
                    }
                }
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.accum(x, &dx);
            }
            Op::LogSumExp { x } => {
                let out = self.nodes[i].data[0];
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .map(|v| g[0] * (v - out).exp())
                    .collect();
                self.accum(x, &dx);
            }
            Op::Reshape { x } => {
                self.accum(x, &g);
            }
        }
        self.nodes[i].grad = g;
    }

    fn accum(&mut self, t: TensorId, g: &[f64]) {
        let buf = &mut self.nodes[t.0].grad;
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let b = t.leaf(vec![3.0, 4.0], vec![2, 1], false);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_col() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], vec![1, 2], false);
        let b = t.leaf(vec![3.0, 4.0], vec![2, 1], false);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], vec![1, 2], false);
        let b = t.leaf(vec![3.0], vec![1, 1], false);
        assert!(matches!(
            t.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv1d_center_tap_identity() {
        let mut t = Tape::new();
        let seq = t.leaf(vec![5.0], vec![1, 1], false);
        let kernel = t.leaf(vec![0.0, 1.0, 0.0], vec![1, 3], false);
        let bias = t.leaf(vec![0.0], vec![1], false);
        let out = t.conv1d_same(seq, kernel, bias, 1).unwrap();
        assert_eq!(t.data(out), &[5.0]);
    }

    #[test]
    fn conv1d_sliding_sum_with_zero_padding() {
        let mut t = Tape::new();
        let seq = t.leaf(vec![1.0, 2.0, 3.0], vec![3, 1], false);
        let kernel = t.leaf(vec![1.0, 1.0, 1.0], vec![1, 3], false);
        let bias = t.leaf(vec![0.0], vec![1], false);
        let out = t.conv1d_same(seq, kernel, bias, 1).unwrap();
        assert_eq!(t.data(out), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_empty_sequence_errors() {
        let mut t = Tape::new();
        let seq = t.leaf(vec![], vec![0, 1], false);
        let kernel = t.leaf(vec![0.0, 1.0, 0.0], vec![1, 3], false);
        let bias = t.leaf(vec![0.0], vec![1], false);
        assert!(t.conv1d_same(seq, kernel, bias, 1).is_err());
    }

    #[test]
    fn conv1d_output_length_equals_input_length() {
        for l in 1..9 {
            let mut t = Tape::new();
            let seq = t.leaf(vec![1.0; l * 2], vec![l, 2], false);
            let kernel = t.leaf(vec![0.5; 3 * 3 * 2], vec![3, 6], false);
            let bias = t.leaf(vec![0.0; 3], vec![3], false);
            let out = t.conv1d_same(seq, kernel, bias, 1).unwrap();
            assert_eq!(t.shape(out), &[l, 3]);
        }
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.leaf(vec![-1.0, 0.0, 2.0], vec![3], false);
        let y = t.relu(x).unwrap();
        assert_eq!(t.data(y), &[0.0, 0.0, 2.0]);

        let neg = t.leaf(vec![-3.0, -0.5], vec![2], false);
        let z = t.relu(neg).unwrap();
        assert_eq!(t.data(z), &[0.0, 0.0]);
    }

    #[test]
    fn tanh_forward() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 50.0, -50.0], vec![3], false);
        let y = t.tanh(x).unwrap();
        let d = t.data(y);
        assert_eq!(d[0], 0.0);
        assert!(d[1] <= 1.0 && d[1] > 0.99);
        assert!(d[2] >= -1.0 && d[2] < -0.99);
    }

    #[test]
    fn masked_softmax_uniform_and_single() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 0.0, 0.0], vec![3], false);
        let y = t.masked_softmax(x, &[true, true, true]).unwrap();
        for v in t.data(y) {
            assert!(close(*v, 1.0 / 3.0, 1e-12));
        }

        let x2 = t.leaf(vec![5.0, 5.0], vec![2], false);
        let y2 = t.masked_softmax(x2, &[true, false]).unwrap();
        assert_eq!(t.data(y2), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_analytic() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0_f64.ln(), 0.0], vec![2], false);
        let y = t.masked_softmax(x, &[true, true]).unwrap();
        assert!(close(t.data(y)[0], 2.0 / 3.0, 1e-12));
        assert!(close(t.data(y)[1], 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], false);
        assert!(matches!(
            t.masked_softmax(x, &[false, false]),
            Err(TensorError::InvalidMask)
        ));
    }

    #[test]
    fn masked_softmax_shift_invariant() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.3, -1.2, 2.5], vec![3], false);
        let y = t.masked_softmax(x, &[true, true, true]).unwrap();
        let shifted = t.leaf(vec![0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0], vec![3], false);
        let y2 = t.masked_softmax(shifted, &[true, true, true]).unwrap();
        for (a, b) in t.data(y).iter().zip(t.data(y2)) {
            assert!(close(*a, *b, 1e-9));
        }
    }

    #[test]
    fn gather_basic_and_out_of_range() {
        let mut t = Tape::new();
        let table = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false);
        let out = t.embedding_gather(table, &[0]).unwrap();
        assert_eq!(t.data(out), &[1.0, 2.0]);
        let rep = t.embedding_gather(table, &[1, 1]).unwrap();
        assert_eq!(t.data(rep), &[3.0, 4.0, 3.0, 4.0]);
        assert!(matches!(
            t.embedding_gather(table, &[2]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn dropout_identity_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], false);
        let y = t.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x);
        let z = t.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(z, x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_empirical_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0; n], vec![n], false);
        let y = t.dropout(x, 0.2, true, &mut rng).unwrap();
        let dropped = t.data(y).iter().filter(|v| **v == 0.0).count();
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.005, "drop fraction {frac}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -2.0, 3.0], vec![3], true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true);
        let y = t.relu(x).unwrap();
        assert!(matches!(
            t.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn second_backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], vec![1], true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(TensorError::BackwardConsumed)));
    }

    #[test]
    fn unreachable_grads_stay_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true);
        let unused = t.leaf(vec![5.0], vec![1], true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused), &[0.0]);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -2.0, 0.5], vec![3], false);
        let l = t.log_sum_exp(x).unwrap();
        let direct = (1.0_f64.exp() + (-2.0_f64).exp() + 0.5_f64.exp()).ln();
        assert!(close(t.scalar(l), direct, 1e-12));
    }
}
