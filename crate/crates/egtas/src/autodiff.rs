//! A small reverse-mode tape over dense matrices. Values are computed
//! eagerly as nodes are pushed; `backward` walks the tape in reverse and
//! accumulates gradients for leaf nodes.
//!
//! The op set is exactly what the graph Transformer forward pass needs;
//! nothing here is generic beyond that.

use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Parameter leaf: receives a gradient.
    Leaf,
    /// Constant: no gradient.
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Add a 1 x m row vector to every row of an n x m matrix.
    AddRow(NodeId, NodeId),
    /// n x 1 column broadcast to n x m.
    BroadcastCol(NodeId),
    /// 1 x m row broadcast to n x m.
    BroadcastRow(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// Row lookup into a table; backward scatters into the table.
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    MeanRows(NodeId),
    /// (n*n) x d matrix with row (i*n + j) = u[i] + v[j].
    PairwiseRowSum(NodeId, NodeId),
    /// Mean of -log softmax(logits)[label] over masked rows; 1 x 1.
    NllMasked(NodeId, Vec<usize>, Vec<bool>),
    /// Mean of squared differences against a constant target; 1 x 1.
    MeanSquaredError(NodeId, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..m.cols {
            let e = (row[j] - mx).exp();
            out.data[i * m.cols + j] = e;
            sum += e;
        }
        for j in 0..m.cols {
            out.data[i * m.cols + j] /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let v = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
        };
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols);
        let v = Mat::from_fn(va.rows, va.cols, |i, j| va.get(i, j) + vr.get(0, j));
        self.push(v, Op::AddRow(a, row))
    }

    pub fn broadcast_col(&mut self, a: NodeId, m: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.cols, 1);
        let v = Mat::from_fn(va.rows, m, |i, _| va.get(i, 0));
        self.push(v, Op::BroadcastCol(a))
    }

    pub fn broadcast_row(&mut self, a: NodeId, n: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows, 1);
        let v = Mat::from_fn(n, va.cols, |_, j| va.get(0, j));
        self.push(v, Op::BroadcastRow(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows);
            for i in 0..rows {
                for j in 0..vp.cols {
                    v.set(i, off + j, vp.get(i, j));
                }
            }
            off += vp.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let vt = self.value(table);
        let v = Mat::from_fn(indices.len(), vt.cols, |i, j| vt.get(indices[i], j));
        self.push(v, Op::GatherRows(table, indices.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows * va.cols, rows * cols);
        let v = Mat { rows, cols, data: va.data.clone() };
        self.push(v, Op::Reshape(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.rows as f64;
        let mut v = Mat::zeros(1, va.cols);
        for i in 0..va.rows {
            for j in 0..va.cols {
                v.data[j] += va.get(i, j) / n;
            }
        }
        self.push(v, Op::MeanRows(a))
    }

    pub fn pairwise_row_sum(&mut self, u: NodeId, w: NodeId) -> NodeId {
        let (vu, vw) = (self.value(u), self.value(w));
        assert_eq!(vu.rows, vw.rows);
        assert_eq!(vu.cols, vw.cols);
        let n = vu.rows;
        let d = vu.cols;
        let v = Mat::from_fn(n * n, d, |r, j| vu.get(r / n, j) + vw.get(r % n, j));
        self.push(v, Op::PairwiseRowSum(u, w))
    }

    pub fn nll_masked(&mut self, logits: NodeId, labels: &[usize], mask: &[bool]) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.rows, labels.len());
        assert_eq!(vl.rows, mask.len());
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "empty mask");
        let probs = softmax_rows(vl);
        let mut loss = 0.0;
        for i in 0..vl.rows {
            if mask[i] {
                loss += -probs.get(i, labels[i]).max(1e-300).ln();
            }
        }
        loss /= count as f64;
        let v = Mat { rows: 1, cols: 1, data: vec![loss] };
        self.push(v, Op::NllMasked(logits, labels.to_vec(), mask.to_vec()))
    }

    pub fn mean_squared_error(&mut self, pred: NodeId, target: Mat) -> NodeId {
        let vp = self.value(pred);
        assert_eq!((vp.rows, vp.cols), (target.rows, target.cols));
        let n = (vp.rows * vp.cols) as f64;
        let loss =
            vp.data.iter().zip(&target.data).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let v = Mat { rows: 1, cols: 1, data: vec![loss] };
        self.push(v, Op::MeanSquaredError(pred, target))
    }

    /// Reverse pass from a 1x1 scalar node. Returns per-node gradients;
    /// index by the `NodeId`s of the leaves you care about.
    pub fn backward(&self, loss: NodeId) -> Vec<Mat> {
        let lv = self.value(loss);
        assert_eq!((lv.rows, lv.cols), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[loss.0].data[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let g = grads[idx].clone();
            if g.data.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&g);
                    grads[a.0] = grads[a.0].add(&da);
                    grads[b.0] = grads[b.0].add(&db);
                }
                Op::Add(a, b) => {
                    grads[a.0] = grads[a.0].add(&g);
                    grads[b.0] = grads[b.0].add(&g);
                }
                Op::Sub(a, b) => {
                    grads[a.0] = grads[a.0].add(&g);
                    grads[b.0] = grads[b.0].sub(&g);
                }
                Op::MulElem(a, b) => {
                    let va = self.value(*a).clone();
                    let vb = self.value(*b).clone();
                    let da = Mat {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
                    };
                    let db = Mat {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect(),
                    };
                    grads[a.0] = grads[a.0].add(&da);
                    grads[b.0] = grads[b.0].add(&db);
                }
                Op::Scale(a, c) => {
                    grads[a.0] = grads[a.0].add(&g.scale(*c));
                }
                Op::AddRow(a, row) => {
                    grads[a.0] = grads[a.0].add(&g);
                    let mut dr = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            dr.data[j] += g.get(i, j);
                        }
                    }
                    grads[row.0] = grads[row.0].add(&dr);
                }
                Op::BroadcastCol(a) => {
                    let mut da = Mat::zeros(g.rows, 1);
                    for i in 0..g.rows {
                        da.data[i] = g.row(i).iter().sum();
                    }
                    grads[a.0] = grads[a.0].add(&da);
                }
                Op::BroadcastRow(a) => {
                    let mut da = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            da.data[j] += g.get(i, j);
                        }
                    }
                    grads[a.0] = grads[a.0].add(&da);
                }
                Op::Transpose(a) => {
                    grads[a.0] = grads[a.0].add(&g.transpose());
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let dp = Mat::from_fn(g.rows, pc, |i, j| g.get(i, off + j));
                        grads[p.0] = grads[p.0].add(&dp);
                        off += pc;
                    }
                }
                Op::SoftmaxRows(a) => {
                    // dX = (dY - rowsum(dY .* Y)) .* Y
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let dot: f64 =
                            (0..g.cols).map(|j| g.get(i, j) * y.get(i, j)).sum();
                        for j in 0..g.cols {
                            da.set(i, j, (g.get(i, j) - dot) * y.get(i, j));
                        }
                    }
                    grads[a.0] = grads[a.0].add(&da);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let da = Mat::from_fn(g.rows, g.cols, |i, j| {
                        g.get(i, j) * gelu_grad(x.get(i, j))
                    });
                    grads[a.0] = grads[a.0].add(&da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = Mat::from_fn(g.rows, g.cols, |i, j| {
                        if x.get(i, j) > 0.0 {
                            g.get(i, j)
                        } else {
                            0.0
                        }
                    });
                    grads[a.0] = grads[a.0].add(&da);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let da = Mat::from_fn(g.rows, g.cols, |i, j| {
                        if x.get(i, j) >= 0.0 {
                            g.get(i, j)
                        } else {
                            slope * g.get(i, j)
                        }
                    });
                    grads[a.0] = grads[a.0].add(&da);
                }
                Op::GatherRows(table, indices) => {
                    let vt = self.value(*table);
                    let mut dt = Mat::zeros(vt.rows, vt.cols);
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..g.cols {
                            let cur = dt.get(src, j);
                            dt.set(src, j, cur + g.get(r, j));
                        }
                    }
                    grads[table.0] = grads[table.0].add(&dt);
                }
                Op::Reshape(a) => {
                    let va = self.value(*a);
                    let da = Mat { rows: va.rows, cols: va.cols, data: g.data.clone() };
                    grads[a.0] = grads[a.0].add(&da);
                }
                Op::MeanRows(a) => {
                    let va = self.value(*a);
                    let n = va.rows as f64;
                    let da = Mat::from_fn(va.rows, va.cols, |_, j| g.get(0, j) / n);
                    grads[a.0] = grads[a.0].add(&da);
                }
                Op::PairwiseRowSum(u, w) => {
                    let vu = self.value(*u);
                    let n = vu.rows;
                    let d = vu.cols;
                    let mut du = Mat::zeros(n, d);
                    let mut dw = Mat::zeros(n, d);
                    for r in 0..n * n {
                        for j in 0..d {
                            let gv = g.get(r, j);
                            du.data[(r / n) * d + j] += gv;
                            dw.data[(r % n) * d + j] += gv;
                        }
                    }
                    grads[u.0] = grads[u.0].add(&du);
                    grads[w.0] = grads[w.0].add(&dw);
                }
                Op::NllMasked(logits, labels, mask) => {
                    let vl = self.value(*logits);
                    let probs = softmax_rows(vl);
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let up = g.data[0];
                    let mut dl = Mat::zeros(vl.rows, vl.cols);
                    for i in 0..vl.rows {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..vl.cols {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            dl.set(i, j, up * (probs.get(i, j) - onehot) / count);
                        }
                    }
                    grads[logits.0] = grads[logits.0].add(&dl);
                }
                Op::MeanSquaredError(pred, target) => {
                    let vp = self.value(*pred);
                    let n = (vp.rows * vp.cols) as f64;
                    let up = g.data[0];
                    let dp = Mat::from_fn(vp.rows, vp.cols, |i, j| {
                        up * 2.0 * (vp.get(i, j) - target.get(i, j)) / n
                    });
                    grads[pred.0] = grads[pred.0].add(&dp);
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a scalar-valued tape builder.
    fn fd_check(build: impl Fn(&mut Tape, &Mat) -> NodeId, x0: Mat) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x0.clone());
        let loss = build(&mut tape, &x0);
        let grads = tape.backward(loss);
        let analytic = &grads[leaf.0];
        let h = 1e-5;
        for i in 0..x0.data.len() {
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut tp = Tape::new();
            tp.leaf(xp.clone());
            let lp = build(&mut tp, &xp);
            let fp = tp.value(lp).data[0];

            let mut xm = x0.clone();
            xm.data[i] -= h;
            let mut tm = Tape::new();
            tm.leaf(xm.clone());
            let lm = build(&mut tm, &xm);
            let fm = tm.value(lm).data[0];

            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.data[i];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((an - fd) / denom).abs() < 1e-5,
                "coord {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn matmul_softmax_nll_gradient() {
        let x0 = Mat::from_rows(vec![
            vec![0.3, -0.7, 0.2],
            vec![-0.1, 0.5, 0.9],
            vec![0.6, 0.1, -0.4],
        ]);
        let w = Mat::from_rows(vec![
            vec![0.2, -0.3, 0.1],
            vec![0.5, 0.4, -0.6],
            vec![-0.2, 0.7, 0.3],
        ]);
        fd_check(
            move |tape, x| {
                let xid = NodeId(0);
                let _ = x;
                let wid = tape.constant(w.clone());
                let logits = tape.matmul(xid, wid);
                tape.nll_masked(logits, &[0, 2, 1], &[true, false, true])
            },
            x0,
        );
    }

    #[test]
    fn attention_shaped_gradient() {
        // softmax(X X^T) X reduced to a scalar via MSE against zeros
        let x0 = Mat::from_rows(vec![vec![0.2, -0.5], vec![0.7, 0.3], vec![-0.4, 0.6]]);
        fd_check(
            move |tape, _| {
                let xid = NodeId(0);
                let xt = tape.transpose(xid);
                let scores = tape.matmul(xid, xt);
                let att = tape.softmax_rows(scores);
                let out = tape.matmul(att, xid);
                let pooled = tape.mean_rows(out);
                tape.mean_squared_error(pooled, Mat::zeros(1, 2))
            },
            x0,
        );
    }

    #[test]
    fn gather_pairwise_and_activations_gradient() {
        let table0 = Mat::from_rows(vec![vec![0.1, -0.2], vec![0.4, 0.3], vec![-0.6, 0.5]]);
        fd_check(
            move |tape, _| {
                let t = NodeId(0);
                let gathered = tape.gather_rows(t, &[2, 0, 1, 1]);
                let pair = tape.pairwise_row_sum(gathered, gathered);
                let act = tape.gelu(pair);
                let act2 = tape.leaky_relu(act, 0.2);
                let pooled = tape.mean_rows(act2);
                tape.mean_squared_error(pooled, Mat::from_rows(vec![vec![0.5, -0.5]]))
            },
            table0,
        );
    }

    #[test]
    fn broadcast_and_concat_gradient() {
        let x0 = Mat::from_rows(vec![vec![0.3], vec![-0.2], vec![0.8]]);
        fd_check(
            move |tape, _| {
                let xid = NodeId(0);
                let bc = tape.broadcast_col(xid, 3);
                let xt = tape.transpose(xid);
                let br = tape.broadcast_row(xt, 3);
                let sum = tape.add(bc, br);
                let cat = tape.concat_cols(&[sum, bc]);
                let act = tape.relu(cat);
                let pooled = tape.mean_rows(act);
                let resh = tape.reshape(pooled, 6, 1);
                let p2 = tape.mean_rows(resh);
                tape.mean_squared_error(p2, Mat::from_rows(vec![vec![1.0]]))
            },
            x0,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Mat::from_rows(vec![vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]);
        let s = softmax_rows(&m);
        for i in 0..2 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_entries_get_negligible_weight() {
        let mut scores = Mat::zeros(2, 2);
        scores.set(0, 1, -1e9);
        let s = softmax_rows(&scores);
        assert!(s.get(0, 1) < 1e-12);
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
    }
}
