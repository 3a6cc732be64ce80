use super::{mismatch, GradientSet, ParamId, Params, Tensor, TensorError};

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    MaskedSoftmax(Var),
    DropoutApply(Var, Vec<f64>),
    Sum(Var),
    SoftmaxCrossEntropy(Var, usize),
    ConcatCols(Var, Var),
    PadRows(Var),
    GruSeq(Box<GruSeqRecord>),
}

/// Weights of one GRU direction as tape values, in gate order (z, r, c).
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
}

struct GruSeqRecord {
    x: Var,
    vars: GruVars,
    /// Positions in processing order.
    order: Vec<usize>,
    /// Per position: z, r, c and the incoming state, each of width h.
    cache: Vec<f64>,
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Records forward computations over a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    /// Leaf recorded for each parameter, so repeated uses share one node.
    param_vars: Vec<Option<Var>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums let the compiler vectorize.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape { params, nodes: Vec::with_capacity(1024), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Matrix product for `[m,k]x[k,n]`, `[m,k]x[k]` and `[k]x[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (kk, &aik) in ta.row(i).iter().enumerate() {
                        if aik != 0.0 {
                            axpy(aik, tb.row(kk), orow);
                        }
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            (&[m, k], &[k2]) if k == k2 => {
                let out = (0..m).map(|i| dot(ta.row(i), tb.data())).collect();
                Tensor::vector(out)
            }
            (&[k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; n];
                for (kk, &a) in ta.data().iter().enumerate() {
                    axpy(a, tb.row(kk), &mut out);
                }
                Tensor::vector(out)
            }
            (sa, sb) => return Err(mismatch(format!("matmul {sa:?} x {sb:?}"))),
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(format!("{name} {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape().to_vec(), data: ta.data().iter().map(|x| x * k).collect() };
        self.push(t, Op::Scale(a, k))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor { shape: ta.shape().to_vec(), data: ta.data().iter().map(|x| f(*x)).collect() }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// Concatenate vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(mismatch(format!("concat of non-vector {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = rows.first() else {
            return Err(mismatch("stack of zero rows"));
        };
        let width = self.value(first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [width] {
                return Err(mismatch(format!("stack row {:?}, expected [{width}]", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows.len(), width], data)?;
        Ok(self.push(t, Op::StackRows(rows.to_vec())))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var, TensorError> {
        let t = self.value(m);
        if t.shape().len() != 2 {
            return Err(mismatch(format!("row of {:?}", t.shape())));
        }
        if i >= t.rows() {
            return Err(TensorError::IndexOutOfRange { index: i, len: t.rows() });
        }
        let v = Tensor::vector(t.row(i).to_vec());
        Ok(self.push(v, Op::Row(m, i)))
    }

    /// Row lookup: `[k, cols]` from the selected rows of a table (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(mismatch(format!("gather from {:?}", t.shape())));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= t.rows() {
                return Err(TensorError::IndexOutOfRange { index: r, len: t.rows() });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(out, Op::Gather(table, rows.to_vec())))
    }

    /// Softmax over the unmasked entries of a vector; masked entries are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape() != [mask.len()] {
            return Err(mismatch(format!("softmax input {:?} with mask of {}", t.shape(), mask.len())));
        }
        let max = t
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TensorError::EmptyUnmaskedSet);
        }
        let mut out: Vec<f64> =
            t.data().iter().zip(mask).map(|(v, &m)| if m { (v - max).exp() } else { 0.0 }).collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= z);
        Ok(self.push(Tensor::vector(out), Op::MaskedSoftmax(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let mask = vec![true; self.value(x).len()];
        self.masked_softmax(x, &mask)
    }

    /// Multiply by a fixed mask (for dropout: entries are 0 or 1/keep).
    pub fn dropout_apply(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.len() != mask.len() {
            return Err(mismatch(format!("dropout mask of {} for {:?}", mask.len(), t.shape())));
        }
        let out = Tensor { shape: t.shape().to_vec(), data: t.data().iter().zip(&mask).map(|(a, m)| a * m).collect() };
        Ok(self.push(out, Op::DropoutApply(x, mask)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `-log softmax(logits)[target]`, computed stably.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let t = self.value(logits);
        if t.shape().len() != 1 || target >= t.len() {
            return Err(TensorError::IndexOutOfRange { index: target, len: t.len() });
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy(logits, target)))
    }

    /// `[n, a]` and `[n, b]` side by side as `[n, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(mismatch(format!("concat_cols {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let (n, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let t = Tensor::new(vec![n, ca + cb], data)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Append zero rows until the matrix has `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape().len() != 2 || rows < t.rows() {
            return Err(mismatch(format!("pad {:?} to {rows} rows", t.shape())));
        }
        let mut data = t.data().to_vec();
        data.resize(rows * t.cols(), 0.0);
        let t = Tensor::new(vec![rows, t.cols()], data)?;
        Ok(self.push(t, Op::PadRows(x)))
    }

    /// Run a GRU over the rows of `x` (`[n, d]`) from a zero state, front to
    /// back or back to front, returning every state as `[n, h]` in position
    /// order. Per step: `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
    /// `c = tanh(xW_c + (r⊙h)U_c + b_c)`, `h' = h + z⊙(c − h)`.
    pub fn gru_sequence(&mut self, x: Var, vars: GruVars, reverse: bool) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let [wz, wr, wc] = vars.w.map(|v| self.value(v));
        let [uz, ur, uc] = vars.u.map(|v| self.value(v));
        let [bz, br, bc] = vars.b.map(|v| self.value(v));
        if tx.shape().len() != 2 {
            return Err(mismatch(format!("gru input {:?}", tx.shape())));
        }
        let (n, d, h) = (tx.rows(), tx.cols(), uz.cols());
        for w in [wz, wr, wc] {
            if w.shape() != [d, h] {
                return Err(mismatch(format!("gru input weight {:?}, expected [{d}, {h}]", w.shape())));
            }
        }
        for u in [uz, ur, uc] {
            if u.shape() != [h, h] {
                return Err(mismatch(format!("gru recurrent weight {:?}", u.shape())));
            }
        }
        for b in [bz, br, bc] {
            if b.shape() != [h] {
                return Err(mismatch(format!("gru bias {:?}", b.shape())));
            }
        }
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        let mut out = vec![0.0; n * h];
        let mut cache = vec![0.0; n * 4 * h];
        let mut state = vec![0.0; h];
        let mut rh = vec![0.0; h];
        for &t in &order {
            let xt = tx.row(t);
            let slot = &mut cache[t * 4 * h..(t + 1) * 4 * h];
            let (z, rest) = slot.split_at_mut(h);
            let (r, rest) = rest.split_at_mut(h);
            let (c, prev) = rest.split_at_mut(h);
            prev.copy_from_slice(&state);
            z.copy_from_slice(bz.data());
            r.copy_from_slice(br.data());
            c.copy_from_slice(bc.data());
            for (k, &xk) in xt.iter().enumerate() {
                axpy(xk, wz.row(k), z);
                axpy(xk, wr.row(k), r);
                axpy(xk, wc.row(k), c);
            }
            for (k, &hk) in state.iter().enumerate() {
                axpy(hk, uz.row(k), z);
                axpy(hk, ur.row(k), r);
            }
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
            r.iter_mut().for_each(|v| *v = sigmoid(*v));
            for j in 0..h {
                rh[j] = r[j] * state[j];
            }
            for (k, &v) in rh.iter().enumerate() {
                axpy(v, uc.row(k), c);
            }
            c.iter_mut().for_each(|v| *v = v.tanh());
            for j in 0..h {
                state[j] += z[j] * (c[j] - state[j]);
            }
            out[t * h..(t + 1) * h].copy_from_slice(&state);
        }
        let t = Tensor::new(vec![n, h], out)?;
        Ok(self.push(t, Op::GruSeq(Box::new(GruSeqRecord { x, vars, order, cache }))))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<GradientSet, TensorError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(TensorError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![1.0]);
        let mut result = GradientSet::new(self.params.len());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if matches!(self.nodes[v.0].op, Op::Constant) {
                    return;
                }
                let slot = &mut grads[v.0];
                if slot.is_none() {
                    *slot = Some(vec![0.0; self.value(v).len()]);
                }
                f(slot.as_mut().unwrap());
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => result.accumulate(*id, self.params.get(*id).shape(), &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    match (ta.shape(), tb.shape()) {
                        (&[m, k], &[_, n]) => {
                            // dA = G B^T ; dB = A^T G
                            acc(*a, &mut |ga| {
                                for i in 0..m {
                                    let grow = &g[i * n..(i + 1) * n];
                                    for kk in 0..k {
                                        ga[i * k + kk] += dot(grow, tb.row(kk));
                                    }
                                }
                            });
                            acc(*b, &mut |gb| {
                                for i in 0..m {
                                    let grow = &g[i * n..(i + 1) * n];
                                    for (kk, &aik) in ta.row(i).iter().enumerate() {
                                        axpy(aik, grow, &mut gb[kk * n..(kk + 1) * n]);
                                    }
                                }
                            });
                        }
                        (&[m, k], &[_]) => {
                            acc(*a, &mut |ga| {
                                for i in 0..m {
                                    axpy(g[i], tb.data(), &mut ga[i * k..(i + 1) * k]);
                                }
                            });
                            acc(*b, &mut |gb| {
                                for i in 0..m {
                                    axpy(g[i], ta.row(i), gb);
                                }
                            });
                        }
                        (&[k], &[_, n]) => {
                            acc(*a, &mut |ga| {
                                for kk in 0..k {
                                    ga[kk] += dot(tb.row(kk), &g);
                                }
                            });
                            acc(*b, &mut |gb| {
                                for (kk, &av) in ta.data().iter().enumerate() {
                                    axpy(av, &g, &mut gb[kk * n..(kk + 1) * n]);
                                }
                            });
                        }
                        _ => unreachable!("shapes validated in forward"),
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |ga| axpy(1.0, &g, ga));
                    acc(*b, &mut |gb| axpy(1.0, &g, gb));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |ga| axpy(1.0, &g, ga));
                    acc(*b, &mut |gb| axpy(-1.0, &g, gb));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(*a, &mut |ga| ga.iter_mut().zip(&g).zip(tb.data()).for_each(|((x, g), y)| *x += g * y));
                    acc(*b, &mut |gb| gb.iter_mut().zip(&g).zip(ta.data()).for_each(|((x, g), y)| *x += g * y));
                }
                Op::Scale(a, k) => acc(*a, &mut |ga| axpy(*k, &g, ga)),
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    acc(*a, &mut |ga| {
                        ga.iter_mut().zip(&g).zip(y).for_each(|((x, g), y)| *x += g * y * (1.0 - y))
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    acc(*a, &mut |ga| ga.iter_mut().zip(&g).zip(y).for_each(|((x, g), y)| *x += g * (1.0 - y * y)));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        acc(*p, &mut |gp| axpy(1.0, &g[off..off + n], gp));
                        off += n;
                    }
                }
                Op::StackRows(rows) => {
                    let w = g.len() / rows.len();
                    for (r, v) in rows.iter().enumerate() {
                        acc(*v, &mut |gv| axpy(1.0, &g[r * w..(r + 1) * w], gv));
                    }
                }
                Op::Row(m, r) => {
                    let c = g.len();
                    acc(*m, &mut |gm| axpy(1.0, &g, &mut gm[r * c..(r + 1) * c]));
                }
                Op::Gather(table, rows) => {
                    let c = self.value(*table).cols();
                    acc(*table, &mut |gt| {
                        for (i, &r) in rows.iter().enumerate() {
                            axpy(1.0, &g[i * c..(i + 1) * c], &mut gt[r * c..(r + 1) * c]);
                        }
                    });
                }
                Op::MaskedSoftmax(x) => {
                    let y = node.value.as_ref().unwrap().data();
                    let inner = dot(y, &g);
                    acc(*x, &mut |gx| gx.iter_mut().zip(&g).zip(y).for_each(|((d, g), y)| *d += y * (g - inner)));
                }
                Op::DropoutApply(x, mask) => {
                    acc(*x, &mut |gx| gx.iter_mut().zip(&g).zip(mask).for_each(|((d, g), m)| *d += g * m));
                }
                Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let w = ca + cb;
                    let n = g.len() / w;
                    acc(*a, &mut |ga| {
                        for i in 0..n {
                            axpy(1.0, &g[i * w..i * w + ca], &mut ga[i * ca..(i + 1) * ca]);
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..n {
                            axpy(1.0, &g[i * w + ca..(i + 1) * w], &mut gb[i * cb..(i + 1) * cb]);
                        }
                    });
                }
                Op::PadRows(x) => {
                    let n = self.value(*x).len();
                    acc(*x, &mut |gx| axpy(1.0, &g[..n], gx));
                }
                Op::GruSeq(rec) => {
                    let grads_local = self.gru_backward(rec, &g);
                    let GruVars { w, u, b } = rec.vars;
                    let targets = [rec.x, w[0], w[1], w[2], u[0], u[1], u[2], b[0], b[1], b[2]];
                    for (v, gl) in targets.into_iter().zip(&grads_local) {
                        acc(v, &mut |gv| axpy(1.0, gl, gv));
                    }
                }
                Op::SoftmaxCrossEntropy(logits, target) => {
                    let t = self.value(*logits).data();
                    let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = t.iter().map(|v| (v - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    acc(*logits, &mut |gl| {
                        for (j, d) in gl.iter_mut().enumerate() {
                            let p = exps[j] / z;
                            *d += g[0] * (p - if j == *target { 1.0 } else { 0.0 });
                        }
                    });
                }
            }
        }
        Ok(result)
    }

    /// Backpropagation through time for one recorded GRU sequence. Returns
    /// gradients for x, W (z, r, c), U (z, r, c) and b (z, r, c).
    fn gru_backward(&self, rec: &GruSeqRecord, g: &[f64]) -> [Vec<f64>; 10] {
        let tx = self.value(rec.x);
        let [wz, wr, wc] = rec.vars.w.map(|v| self.value(v));
        let [uz, ur, uc] = rec.vars.u.map(|v| self.value(v));
        let (d, h) = (tx.cols(), uz.cols());
        let mut dx = vec![0.0; tx.len()];
        let mut dw = [vec![0.0; d * h], vec![0.0; d * h], vec![0.0; d * h]];
        let mut du = [vec![0.0; h * h], vec![0.0; h * h], vec![0.0; h * h]];
        let mut db = [vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        let mut carry = vec![0.0; h];
        let (mut daz, mut dar, mut dac) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
        let (mut rh, mut drh) = (vec![0.0; h], vec![0.0; h]);
        for &t in rec.order.iter().rev() {
            let slot = &rec.cache[t * 4 * h..(t + 1) * 4 * h];
            let (z, rest) = slot.split_at(h);
            let (r, rest) = rest.split_at(h);
            let (c, prev) = rest.split_at(h);
            let mut dprev = vec![0.0; h];
            for j in 0..h {
                let dh = g[t * h + j] + carry[j];
                daz[j] = dh * (c[j] - prev[j]) * z[j] * (1.0 - z[j]);
                dac[j] = dh * z[j] * (1.0 - c[j] * c[j]);
                dprev[j] = dh * (1.0 - z[j]);
                rh[j] = r[j] * prev[j];
            }
            for k in 0..h {
                drh[k] = dot(uc.row(k), &dac);
                axpy(rh[k], &dac, &mut du[2][k * h..(k + 1) * h]);
            }
            for j in 0..h {
                dar[j] = drh[j] * prev[j] * r[j] * (1.0 - r[j]);
                dprev[j] += drh[j] * r[j];
            }
            for k in 0..h {
                dprev[k] += dot(uz.row(k), &daz) + dot(ur.row(k), &dar);
                axpy(prev[k], &daz, &mut du[0][k * h..(k + 1) * h]);
                axpy(prev[k], &dar, &mut du[1][k * h..(k + 1) * h]);
            }
            axpy(1.0, &daz, &mut db[0]);
            axpy(1.0, &dar, &mut db[1]);
            axpy(1.0, &dac, &mut db[2]);
            let xt = tx.row(t);
            let dxt = &mut dx[t * d..(t + 1) * d];
            for k in 0..d {
                dxt[k] += dot(wz.row(k), &daz) + dot(wr.row(k), &dar) + dot(wc.row(k), &dac);
                axpy(xt[k], &daz, &mut dw[0][k * h..(k + 1) * h]);
                axpy(xt[k], &dar, &mut dw[1][k * h..(k + 1) * h]);
                axpy(xt[k], &dac, &mut dw[2][k * h..(k + 1) * h]);
            }
            carry = dprev;
        }
        let [dw0, dw1, dw2] = dw;
        let [du0, du1, du2] = du;
        let [db0, db1, db2] = db;
        [dx, dw0, dw1, dw2, du0, du1, du2, db0, db1, db2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (Params, ParamId) {
        let mut p = Params::new();
        let id = p.add("x", Tensor::vector(vec![3.0]));
        (p, id)
    }

    #[test]
    fn square_gradient() {
        let (p, id) = store();
        let mut t = Tape::new(&p);
        let x = t.param(id);
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        assert_eq!(t.value(s).item(), 9.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let (p, id) = store();
        let mut t = Tape::new(&p);
        let x = t.param(id);
        let v = t.concat(&[x, x]).unwrap();
        assert_eq!(t.backward(v), Err(TensorError::NonScalarOutput(vec![2])));
    }

    #[test]
    fn analytic_primitives() {
        let p = Params::new();
        let mut t = Tape::new(&p);
        let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = t.sigmoid(z);
        let th = t.tanh(z);
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        assert_eq!(t.value(th).data(), &[0.0, 0.0]);
        let m = t.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let i2 = t.constant(Tensor::identity(2));
        let i3 = t.constant(Tensor::identity(3));
        let left = t.matmul(i2, m).unwrap();
        let right = t.matmul(m, i3).unwrap();
        assert_eq!(t.value(left), t.value(m));
        assert_eq!(t.value(right), t.value(m));
    }

    #[test]
    fn uniform_softmax() {
        let p = Params::new();
        let mut t = Tape::new(&p);
        let x = t.constant(Tensor::vector(vec![2.0; 5]));
        let y = t.masked_softmax(x, &[true, false, true, true, false]).unwrap();
        let v = t.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[4], 0.0);
        for i in [0, 2, 3] {
            assert!((v[i] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(t.masked_softmax(x, &[false; 5]), Err(TensorError::EmptyUnmaskedSet));
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut p = Params::new();
        let id = p.add("z", Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]));
        let mut t = Tape::new(&p);
        let z = t.param(id);
        let y = t.softmax(z).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        for d in g.get(id).unwrap().data() {
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let p = Params::new();
        let mut t = Tape::new(&p);
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch(_))));
        let v = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.add(a, v), Err(TensorError::ShapeMismatch(_))));
        assert!(matches!(t.gather(a, &[5]), Err(TensorError::IndexOutOfRange { .. })));
        assert!(matches!(t.dropout_apply(v, vec![1.0]), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn cross_entropy_matches_softmax() {
        let p = Params::new();
        let mut t = Tape::new(&p);
        let x = t.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let l = t.softmax_cross_entropy(x, 1).unwrap();
        assert!((t.value(l).item() - (-(0.75f64).ln())).abs() < 1e-12);
    }
}
