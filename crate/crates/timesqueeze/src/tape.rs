//! Reverse-mode autodiff over an explicit tape of primitive applications.
//!
//! Builder methods compute values eagerly and record one node per op; `backward`
//! walks the tape once in reverse. A tape is confined to a single thread; distinct
//! tapes can run in parallel and merge parameter gradients afterwards.

use crate::params::ParamStore;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, silu, Tensor};

pub type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(String),
    Add(Id, Id),
    AddRow(Id, Id),
    AddScalar(Id),
    Scale(Id, f64),
    Mul(Id, Id),
    MulCol(Id, Id),
    Recip(Id),
    MatMul(Id, Id),
    Transpose(Id),
    SoftmaxRows(Id),
    RmsNormRows { x: Id, gain: Id },
    Silu(Id),
    Sigmoid(Id),
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
    Slice { x: Id, r0: usize, c0: usize },
    RowSums(Id),
    SumAll(Id),
    Mean(Id),
    Rope { x: Id, positions: Vec<usize>, base: f64 },
    GatherRows { x: Id, idx: Vec<usize> },
    BroadcastRows { x: Id, sizes: Vec<usize> },
    Huber { pred: Id, target: Tensor, delta: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Id {
        debug_assert!(value.is_finite(), "non-finite value out of {op:?}");
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> Id {
        self.push(t, Op::Const)
    }

    /// Record a named parameter read; its gradient lands back in the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Id {
        let t = store.get(name).clone();
        self.push(t, Op::Param(name.to_string()))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: {ta} vs {tb}");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data);
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast add of a 1 x n row to every row of an m x n matrix.
    pub fn add_row(&mut self, a: Id, row: Id) -> Id {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row: row operand is {tr}");
        assert_eq!(ta.cols(), tr.cols(), "add_row: {ta} vs {tr}");
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let out = Tensor::new(ta.rows(), ta.cols(), out.into_data());
        self.push(out, Op::AddRow(a, row))
    }

    pub fn add_scalar(&mut self, a: Id, c: f64) -> Id {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: {ta} vs {tb}");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// Broadcast multiply of an m x 1 column into every column of an m x n matrix.
    pub fn mul_col(&mut self, a: Id, col: Id) -> Id {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!(tc.cols(), 1, "mul_col: column operand is {tc}");
        assert_eq!(ta.rows(), tc.rows(), "mul_col: {ta} vs {tc}");
        let mut out = ta.clone();
        for i in 0..out.rows() {
            let c = tc.at(i, 0);
            for o in out.row_mut(i) {
                *o *= c;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn recip(&mut self, a: Id) -> Id {
        let out = self.value(a).map(|x| 1.0 / x);
        self.push(out, Op::Recip(a))
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul: {ta} vs {tb}");
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        matmul_acc(out.data_mut(), ta.data(), tb.data(), m, k, n);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Id) -> Id {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let ta = self.value(a);
        let mut out = ta.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub const RMSNORM_EPS: f64 = 1e-6;

    /// Row-wise RMS normalization with a learned 1 x n gain.
    pub fn rmsnorm_rows(&mut self, x: Id, gain: Id) -> Id {
        let (tx, tg) = (self.value(x), self.value(gain));
        assert_eq!(tg.rows(), 1, "rmsnorm: gain is {tg}");
        assert_eq!(tx.cols(), tg.cols(), "rmsnorm: {tx} vs gain {tg}");
        let n = tx.cols() as f64;
        let mut out = tx.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (ms + Self::RMSNORM_EPS).sqrt();
            for (v, g) in row.iter_mut().zip(tg.data()) {
                *v *= inv * g;
            }
        }
        self.push(out, Op::RmsNormRows { x, gain })
    }

    pub fn silu(&mut self, a: Id) -> Id {
        let out = self.value(a).map(silu);
        self.push(out, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn concat_rows(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows: {t} vs {}cols", cols);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols: {t} vs {}rows", rows);
            for i in 0..rows {
                out.row_mut(i)[c..c + t.cols()].copy_from_slice(t.row(i));
            }
            c += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Id, r0: usize, r1: usize, c0: usize, c1: usize) -> Id {
        let tx = self.value(x);
        assert!(
            r0 < r1 && r1 <= tx.rows() && c0 < c1 && c1 <= tx.cols(),
            "slice: [{r0}..{r1}, {c0}..{c1}] of {tx}"
        );
        let mut out = Tensor::zeros(r1 - r0, c1 - c0);
        for i in r0..r1 {
            out.row_mut(i - r0).copy_from_slice(&tx.row(i)[c0..c1]);
        }
        self.push(out, Op::Slice { x, r0, c0 })
    }

    pub fn row_sums(&mut self, a: Id) -> Id {
        let ta = self.value(a);
        let sums: Vec<f64> = (0..ta.rows()).map(|i| ta.row(i).iter().sum()).collect();
        let out = Tensor::column(&sums);
        self.push(out, Op::RowSums(a))
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Id) -> Id {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Pairwise rotary transform of one head's rows; `positions` carries the
    /// original timestep index of each row, not the row number.
    pub fn rope(&mut self, x: Id, positions: &[usize], base: f64) -> Id {
        let tx = self.value(x);
        assert_eq!(tx.rows(), positions.len(), "rope: {tx} vs {} positions", positions.len());
        assert_eq!(tx.cols() % 2, 0, "rope: odd head dim in {tx}");
        let d = tx.cols();
        let mut out = tx.clone();
        for (i, &pos) in positions.iter().enumerate() {
            let row = out.row_mut(i);
            for j in 0..d / 2 {
                let angle = pos as f64 * base.powf(-2.0 * j as f64 / d as f64);
                let (sin, cos) = angle.sin_cos();
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                row[2 * j] = a * cos - b * sin;
                row[2 * j + 1] = a * sin + b * cos;
            }
        }
        self.push(out, Op::Rope { x, positions: positions.to_vec(), base })
    }

    pub fn gather_rows(&mut self, x: Id, idx: &[usize]) -> Id {
        let tx = self.value(x);
        assert!(!idx.is_empty(), "gather_rows: empty index set");
        assert!(idx.iter().all(|&i| i < tx.rows()), "gather_rows: index out of {tx}");
        let mut out = Tensor::zeros(idx.len(), tx.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(tx.row(i));
        }
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Repeat row k of x `sizes[k]` times, in order.
    pub fn broadcast_rows(&mut self, x: Id, sizes: &[usize]) -> Id {
        let tx = self.value(x);
        assert_eq!(tx.rows(), sizes.len(), "broadcast_rows: {tx} vs {} sizes", sizes.len());
        let total: usize = sizes.iter().sum();
        let mut out = Tensor::zeros(total, tx.cols());
        let mut t = 0;
        for (k, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                out.row_mut(t).copy_from_slice(tx.row(k));
                t += 1;
            }
        }
        self.push(out, Op::BroadcastRows { x, sizes: sizes.to_vec() })
    }

    /// Elementwise Huber losses of pred against a constant target.
    pub fn huber_loss(&mut self, pred: Id, target: Tensor, delta: f64) -> Id {
        let tp = self.value(pred);
        assert_eq!(tp.shape(), target.shape(), "huber: {tp} vs {target}");
        assert!(delta > 0.0, "huber: delta {delta}");
        let data = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| crate::forecaster::huber(p - y, delta))
            .collect();
        let out = Tensor::new(tp.rows(), tp.cols(), data);
        self.push(out, Op::Huber { pred, target, delta })
    }

    /// Reverse sweep from a 1 x 1 root; returns per-node gradients.
    pub fn backward(&self, root: Id) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root is {}", self.value(root));
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        g[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(dy) = g[id].clone() else { continue };
            self.backprop_node(id, &dy, &mut g);
        }
        Gradients { g }
    }

    /// Backward pass that folds parameter gradients straight into the store.
    pub fn backward_params(&self, root: Id, store: &mut ParamStore) -> Gradients {
        let grads = self.backward(root);
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(gt) = grads.get(id) {
                    store.accumulate_grad(name, gt);
                }
            }
        }
        grads
    }

    /// Backward pass collecting parameter gradients into a name-keyed map, so
    /// callers can merge several tapes' gradients in a fixed order.
    pub fn backward_named(&self, root: Id) -> std::collections::BTreeMap<String, Tensor> {
        let grads = self.backward(root);
        let mut out = std::collections::BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(gt) = grads.get(id) {
                    out.entry(name.clone())
                        .and_modify(|acc: &mut Tensor| {
                            for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| gt.clone());
                }
            }
        }
        out
    }

    fn backprop_node(&self, id: Id, dy: &Tensor, g: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc_all(g, *a, self.value(*a).shape(), dy.data());
                acc_all(g, *b, self.value(*b).shape(), dy.data());
            }
            Op::AddRow(a, row) => {
                acc_all(g, *a, self.value(*a).shape(), dy.data());
                let cols = dy.cols();
                let mut dr = vec![0.0; cols];
                for i in 0..dy.rows() {
                    for (s, v) in dr.iter_mut().zip(dy.row(i)) {
                        *s += v;
                    }
                }
                acc_all(g, *row, (1, cols), &dr);
            }
            Op::AddScalar(a) => acc_all(g, *a, self.value(*a).shape(), dy.data()),
            Op::Scale(a, c) => {
                let da: Vec<f64> = dy.data().iter().map(|v| v * c).collect();
                acc_all(g, *a, self.value(*a).shape(), &da);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = dy.data().iter().zip(tb.data()).map(|(d, y)| d * y).collect();
                let db: Vec<f64> = dy.data().iter().zip(ta.data()).map(|(d, x)| d * x).collect();
                acc_all(g, *a, ta.shape(), &da);
                acc_all(g, *b, tb.shape(), &db);
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let mut da = vec![0.0; ta.len()];
                let mut dc = vec![0.0; ta.rows()];
                for i in 0..ta.rows() {
                    let c = tc.at(i, 0);
                    let n = ta.cols();
                    for j in 0..n {
                        let d = dy.at(i, j);
                        da[i * n + j] = d * c;
                        dc[i] += d * ta.at(i, j);
                    }
                }
                acc_all(g, *a, ta.shape(), &da);
                acc_all(g, *col, tc.shape(), &dc);
            }
            Op::Recip(a) => {
                let y = &node.value;
                let da: Vec<f64> =
                    dy.data().iter().zip(y.data()).map(|(d, y)| -d * y * y).collect();
                acc_all(g, *a, self.value(*a).shape(), &da);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                {
                    let da = slot(g, *a, ta.shape());
                    matmul_nt_acc(da.data_mut(), dy.data(), tb.data(), m, n, k);
                }
                {
                    let db = slot(g, *b, tb.shape());
                    matmul_tn_acc(db.data_mut(), ta.data(), dy.data(), k, m, n);
                }
            }
            Op::Transpose(a) => {
                let dt = dy.transpose();
                acc_all(g, *a, self.value(*a).shape(), dt.data());
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut da = vec![0.0; p.len()];
                let n = p.cols();
                for i in 0..p.rows() {
                    let (pr, dr) = (p.row(i), dy.row(i));
                    let dot: f64 = pr.iter().zip(dr).map(|(&x, &y)| x * y).sum();
                    for j in 0..n {
                        da[i * n + j] = pr[j] * (dr[j] - dot);
                    }
                }
                acc_all(g, *a, p.shape(), &da);
            }
            Op::RmsNormRows { x, gain } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let n = tx.cols();
                let nf = n as f64;
                let mut dx = vec![0.0; tx.len()];
                let mut dg = vec![0.0; n];
                for i in 0..tx.rows() {
                    let row = tx.row(i);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / nf;
                    let s = (ms + Self::RMSNORM_EPS).sqrt();
                    let dr = dy.row(i);
                    let proj: f64 =
                        (0..n).map(|j| dr[j] * tg.at(0, j) * row[j]).sum();
                    for j in 0..n {
                        dx[i * n + j] =
                            dr[j] * tg.at(0, j) / s - row[j] * proj / (nf * s * s * s);
                        dg[j] += dr[j] * row[j] / s;
                    }
                }
                acc_all(g, *x, tx.shape(), &dx);
                acc_all(g, *gain, (1, n), &dg);
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let da: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(d, &x)| {
                        let s = sigmoid(x);
                        d * (s + x * s * (1.0 - s))
                    })
                    .collect();
                acc_all(g, *a, ta.shape(), &da);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da: Vec<f64> =
                    dy.data().iter().zip(y.data()).map(|(d, &s)| d * s * (1.0 - s)).collect();
                acc_all(g, *a, self.value(*a).shape(), &da);
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let chunk = &dy.data()[r * dy.cols()..(r + tp.rows()) * dy.cols()];
                    acc_all(g, p, tp.shape(), chunk);
                    r += tp.rows();
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let d = slot(g, p, tp.shape());
                    for i in 0..tp.rows() {
                        for (dj, v) in d.row_mut(i).iter_mut().zip(&dy.row(i)[c..c + tp.cols()]) {
                            *dj += v;
                        }
                    }
                    c += tp.cols();
                }
            }
            Op::Slice { x, r0, c0 } => {
                let tx = self.value(*x);
                let d = slot(g, *x, tx.shape());
                for i in 0..dy.rows() {
                    let dst = &mut d.row_mut(r0 + i)[*c0..*c0 + dy.cols()];
                    for (dj, v) in dst.iter_mut().zip(dy.row(i)) {
                        *dj += v;
                    }
                }
            }
            Op::RowSums(a) => {
                let ta = self.value(*a);
                let d = slot(g, *a, ta.shape());
                for i in 0..ta.rows() {
                    let dv = dy.at(i, 0);
                    for dj in d.row_mut(i) {
                        *dj += dv;
                    }
                }
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let dv = dy.item();
                let d = slot(g, *a, ta.shape());
                for dj in d.data_mut() {
                    *dj += dv;
                }
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let dv = dy.item() / ta.len() as f64;
                let d = slot(g, *a, ta.shape());
                for dj in d.data_mut() {
                    *dj += dv;
                }
            }
            Op::Rope { x, positions, base } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (i, &pos) in positions.iter().enumerate() {
                    let dr = dy.row(i);
                    for j in 0..d / 2 {
                        let angle = pos as f64 * base.powf(-2.0 * j as f64 / d as f64);
                        let (sin, cos) = angle.sin_cos();
                        let (da, db) = (dr[2 * j], dr[2 * j + 1]);
                        dx[i * d + 2 * j] = da * cos + db * sin;
                        dx[i * d + 2 * j + 1] = -da * sin + db * cos;
                    }
                }
                acc_all(g, *x, tx.shape(), &dx);
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let d = slot(g, *x, tx.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (dj, v) in d.row_mut(i).iter_mut().zip(dy.row(k)) {
                        *dj += v;
                    }
                }
            }
            Op::BroadcastRows { x, sizes } => {
                let tx = self.value(*x);
                let d = slot(g, *x, tx.shape());
                let mut t = 0;
                for (k, &s) in sizes.iter().enumerate() {
                    for _ in 0..s {
                        for (dj, v) in d.row_mut(k).iter_mut().zip(dy.row(t)) {
                            *dj += v;
                        }
                        t += 1;
                    }
                }
            }
            Op::Huber { pred, target, delta } => {
                let tp = self.value(*pred);
                let da: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(tp.data().iter().zip(target.data()))
                    .map(|(d, (&p, &y))| {
                        let e = p - y;
                        d * if e.abs() <= *delta { e } else { delta * e.signum() }
                    })
                    .collect();
                acc_all(g, *pred, tp.shape(), &da);
            }
        }
    }
}

fn slot<'g>(g: &'g mut [Option<Tensor>], id: Id, shape: (usize, usize)) -> &'g mut Tensor {
    g[id].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn acc_all(g: &mut [Option<Tensor>], id: Id, shape: (usize, usize), delta: &[f64]) {
    let t = slot(g, id, shape);
    debug_assert_eq!(t.len(), delta.len());
    for (d, v) in t.data_mut().iter_mut().zip(delta) {
        *d += v;
    }
}

pub struct Gradients {
    g: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: Id) -> Option<&Tensor> {
        self.g.get(id).and_then(Option::as_ref)
    }
}
