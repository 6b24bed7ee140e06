//! Matrix-valued reverse-mode autodiff over `f64`.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! nodes in reverse and accumulates gradients into the parameter leaves.

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n x k) * b (k x m)`.
fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let x = a.data[i * a.cols + k];
            if x == 0.0 {
                continue;
            }
            for (o, y) in orow.iter_mut().zip(b.row(k)) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` with `b (m x k)`.
fn matmul_t(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_t shape");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T (k x n)^T * b (n x m)` = `a^T b` with `a (n x k)`.
fn t_matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "t_matmul shape");
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for i in 0..a.cols {
            let x = a.data[r * a.cols + i];
            if x == 0.0 {
                continue;
            }
            for (o, y) in out.data[i * b.cols..(i + 1) * b.cols].iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<usize>),
    Gather { table: NodeId, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<f64> },
    ColSlice { a: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    RelBias { scores: NodeId, table: NodeId, buckets: Vec<usize>, head: usize },
    MaskedSoftmax { a: NodeId, mask: Vec<bool> },
    CrossEntropySum { logits: NodeId, labels: Vec<usize>, weights: Vec<f64>, probs: Mat },
    Sum(Vec<NodeId>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// A leaf bound to parameter `index`; its gradient is returned by
    /// [`Tape::backward`].
    pub fn param(&mut self, index: usize, value: &Mat) -> NodeId {
        self.push(value.clone(), Op::Leaf(Some(index)))
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf(None))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Add a `1 x cols` row vector to every row.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, v.cols), "add_row shape");
        for chunk in v.data.chunks_mut(r.cols.max(1)) {
            for (x, y) in chunk.iter_mut().zip(&r.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "mul shape");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|p| p * s).collect());
        self.push(v, Op::Scale(a, s))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&p| p * sigmoid(p)).collect());
        self.push(v, Op::Silu(a))
    }

    /// Row-wise `x / rms(x) * gain`, gain being `1 x cols`.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / xv.cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for c in 0..xv.cols {
                out.data[r * xv.cols + c] = row[c] * inv * g.data[c];
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    pub fn col_slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::ColSlice { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat rows");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// `scores[i][j] += table[buckets[i * cols + j]][head]`.
    pub fn rel_bias(&mut self, scores: NodeId, table: NodeId, buckets: &[usize], head: usize) -> NodeId {
        let mut v = self.value(scores).clone();
        let t = self.value(table);
        assert_eq!(buckets.len(), v.data.len(), "bucket grid shape");
        for (x, &b) in v.data.iter_mut().zip(buckets) {
            *x += t.at(b, head);
        }
        self.push(v, Op::RelBias { scores, table, buckets: buckets.to_vec(), head })
    }

    /// Row-wise softmax over allowed entries; disallowed entries get
    /// probability 0, and a row with nothing allowed is all zeros.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let x = self.value(a);
        assert_eq!(mask.len(), x.data.len(), "mask shape");
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = &mask[r * x.cols..(r + 1) * x.cols];
            let max = row.iter().zip(m).filter(|(_, &ok)| ok).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for c in 0..x.cols {
                if m[c] {
                    let e = (row[c] - max).exp();
                    out.data[r * x.cols + c] = e;
                    total += e;
                }
            }
            for c in 0..x.cols {
                out.data[r * x.cols + c] /= total;
            }
        }
        self.push(out, Op::MaskedSoftmax { a, mask: mask.to_vec() })
    }

    /// `sum_i w_i * -log softmax(logits_i)[label_i]` as a `1 x 1` node.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, labels: &[usize], weights: &[f64]) -> NodeId {
        let x = self.value(logits);
        assert_eq!((labels.len(), weights.len()), (x.rows, x.rows), "label shape");
        let mut probs = Mat::zeros(x.rows, x.cols);
        let mut loss = 0.0;
        for r in 0..x.rows {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for c in 0..x.cols {
                probs.data[r * x.cols + c] = (row[c] - log_z).exp();
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (log_z - row[labels[r]]);
            }
        }
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CrossEntropySum { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs },
        )
    }

    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = Mat::zeros(1, 1);
        for &p in parts {
            v.add_assign(self.value(p));
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Gradients of the scalar `output` with respect to every parameter
    /// leaf, indexed by parameter number. Unused parameters get `None`.
    pub fn backward(&self, output: NodeId, num_params: usize) -> Vec<Option<Mat>> {
        assert_eq!(self.value(output).data.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut params: Vec<Option<Mat>> = (0..num_params).map(|_| None).collect();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |id: NodeId, delta: Mat| match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf(Some(p)) => match &mut params[*p] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Leaf(None) => {}
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut d = Mat::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..t.cols {
                            d.data[id * t.cols + c] += g.data[r * t.cols + c];
                        }
                    }
                    acc(*table, d);
                }
                Op::MatMul(a, b) => {
                    // C = A B: dA = dC B^T, dB = A^T dC
                    acc(*a, matmul_t(&g, self.value(*b)));
                    acc(*b, t_matmul(self.value(*a), &g));
                }
                Op::MatMulT(a, b) => {
                    // C = A B^T: dA = dC B, dB = dC^T A
                    acc(*a, matmul(&g, self.value(*b)));
                    acc(*b, t_matmul(&g, self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    let mut d = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in d.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(*row, d);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    let db = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    acc(*a, Mat::from_vec(g.rows, g.cols, da));
                    acc(*b, Mat::from_vec(g.rows, g.cols, db));
                }
                Op::Scale(a, s) => {
                    acc(*a, Mat::from_vec(g.rows, g.cols, g.data.iter().map(|p| p * s).collect()));
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let d = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * (s + xv * s * (1.0 - s))
                        })
                        .collect();
                    acc(*a, Mat::from_vec(g.rows, g.cols, d));
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let n = xv.cols as f64;
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    let mut dgain = Mat::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let inv = inv_rms[r];
                        let row = xv.row(r);
                        let grow = g.row(r);
                        // y_c = x_c inv g_c; dinv/dx_c = -x_c inv^3 / n
                        let mut dot = 0.0;
                        for c in 0..xv.cols {
                            dgain.data[c] += grow[c] * row[c] * inv;
                            dot += grow[c] * gv.data[c] * row[c];
                        }
                        for c in 0..xv.cols {
                            dx.data[r * xv.cols + c] = grow[c] * gv.data[c] * inv - row[c] * inv * inv * inv * dot / n;
                        }
                    }
                    acc(*x, dx);
                    acc(*gain, dgain);
                }
                Op::ColSlice { a, start } => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        d.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut d = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.data[r * cols..(r + 1) * cols].copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(p, d);
                        offset += cols;
                    }
                }
                Op::RelBias { scores, table, buckets, head } => {
                    let t = self.value(*table);
                    let mut d = Mat::zeros(t.rows, t.cols);
                    for (gv, &b) in g.data.iter().zip(buckets) {
                        d.data[b * t.cols + head] += gv;
                    }
                    acc(*table, d);
                    acc(*scores, g);
                }
                Op::MaskedSoftmax { a, mask } => {
                    let p = &node.value;
                    let mut d = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..p.cols {
                            if mask[r * p.cols + c] {
                                d.data[r * p.cols + c] = pr[c] * (gr[c] - dot);
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::CrossEntropySum { logits, labels, weights, probs } => {
                    let scale = g.data[0];
                    let mut d = Mat::zeros(probs.rows, probs.cols);
                    for r in 0..probs.rows {
                        let w = weights[r] * scale;
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..probs.cols {
                            d.data[r * probs.cols + c] = w * probs.at(r, c);
                        }
                        d.data[r * probs.cols + labels[r]] -= w;
                    }
                    acc(*logits, d);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(p, g.clone());
                    }
                }
            }
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences over every entry of every parameter.
    fn check(params: &[Mat], f: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let eval = |ps: &[Mat]| {
            let mut tape = Tape::new();
            let ids: Vec<_> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
            let out = f(&mut tape, &ids);
            (tape.value(out).data[0], tape.backward(out, ps.len()))
        };
        let (_, grads) = eval(params);
        let eps = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.data.len() {
                let mut plus = params.to_vec();
                plus[pi].data[k] += eps;
                let mut minus = params.to_vec();
                minus[pi].data[k] -= eps;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let analytic = grads[pi].as_ref().map_or(0.0, |g| g.data[k]);
                assert!((numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()), "param {pi}[{k}]: {numeric} vs {analytic}");
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_family() {
        check(&[m(3, 4, 1), m(4, 2, 2), m(5, 4, 3)], |t, p| {
            let ab = t.matmul(p[0], p[1]);
            let act = t.matmul_t(p[0], p[2]);
            let x = t.concat_cols(&[ab, act]);
            let labels = [0, 3, 6];
            t.cross_entropy_sum(x, &labels, &[1.0, 0.5, 2.0])
        });
    }

    #[test]
    fn norm_silu_mul_softmax() {
        check(&[m(3, 6, 4), m(1, 6, 5), m(3, 3, 6), m(1, 6, 7)], |t, p| {
            let n = t.rms_norm(p[0], p[1]);
            let s = t.silu(n);
            let q = t.mul(s, n);
            let q = t.add_row(q, p[3]);
            let head = t.col_slice(q, 2, 3);
            let sm = t.masked_softmax(p[2], &[true, false, true, true, true, true, false, false, true]);
            let y = t.matmul(sm, head);
            let y = t.scale(y, 0.7);
            let y = t.add(y, head);
            t.cross_entropy_sum(y, &[0, 1, 2], &[1.0, 1.0, 1.0])
        });
    }

    #[test]
    fn gather_and_bias() {
        check(&[m(5, 3, 8), m(4, 2, 9)], |t, p| {
            let x = t.gather(p[0], &[4, 1, 1]);
            let s = t.matmul_t(x, x);
            let s = t.rel_bias(s, p[1], &[0, 1, 2, 3, 0, 1, 2, 3, 0], 1);
            let a = t.cross_entropy_sum(s, &[2, 0, 1], &[1.0, 1.0, 0.0]);
            let b = t.cross_entropy_sum(x, &[0, 1, 2], &[0.3, 0.3, 0.3]);
            t.sum(&[a, b])
        });
    }

    #[test]
    fn empty_softmax_row_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, 1));
        let s = t.masked_softmax(a, &[false, false, true, false]);
        assert_eq!(t.value(s).data, vec![0.0, 0.0, 1.0, 0.0]);
    }
}
