//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A `Tape` records tensor-level operations as they execute; `backward`
//! replays them in reverse to accumulate gradients. Every loss in the crate
//! is built from these primitives, so one finite-difference check per
//! primitive certifies the whole backward path.

use std::collections::BTreeMap;

use super::tensor::Tensor;

/// Floor applied to probabilities before logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input (parameter).
    Leaf,
    /// Non-differentiable input.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    /// k * x + b, elementwise with scalar constants.
    ScaleShift(NodeId, f64, f64),
    Exp(NodeId),
    /// ln(max(x, LOG_CLAMP)); zero gradient below the clamp.
    LogClamped(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Tanh(NodeId),
    /// max(x, 0); subgradient 0 at the kink.
    PosPart(NodeId),
    /// [m,k] x [k,n] -> [m,n]
    Matmul(NodeId, NodeId),
    /// [m,k] x [n,k]^T -> [m,n]
    MatmulT(NodeId, NodeId),
    /// [r,c] + v[c] per row.
    AddBcastRow(NodeId, NodeId),
    /// [r,c] * v[c] per row.
    MulBcastRow(NodeId, NodeId),
    /// [p,q,r] + v[p,r] broadcast over the middle axis.
    AddBcastMid(NodeId, NodeId),
    /// [p,q,r] * v[p,r] broadcast over the middle axis.
    MulBcastMid(NodeId, NodeId),
    /// [n,rest] + v[n] per leading index.
    AddBcastFirst(NodeId, NodeId),
    /// [n,rest] * v[n] per leading index.
    MulBcastFirst(NodeId, NodeId),
    /// [r,c] -> [c], mean over rows.
    MeanRows(NodeId),
    /// [r,c] -> [r], sum over columns.
    SumCols(NodeId),
    /// [p,q,r] -> [p,r], mean over the middle axis.
    MeanMid(NodeId),
    /// [p,q,r] -> [p,r], max over the middle axis (first max wins).
    MaxMid(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Row-wise softmax of logits / tau.
    SoftmaxRows(NodeId, f64),
    /// Select rows of the first axis.
    GatherRows(NodeId, Vec<usize>),
    /// out[i] = x[i, idx[i]] for a [n,c] input.
    GatherIdx(NodeId, Vec<usize>),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    /// Columns [a, b) of a 2-D tensor.
    SliceCols(NodeId, usize, usize),
    /// Rows [a, b) of a 2-D tensor.
    SliceRows(NodeId, usize, usize),
    Reshape(NodeId),
    /// [n,h,w,c] -> [n,h/2,w/2,c] by 2x2 average pooling.
    AvgPool2(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

/// Records a computation and replays it backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<usize, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a keyed parameter leaf, reusing the node when the same key
    /// is requested twice so gradients from all uses accumulate in one place.
    pub fn param(&mut self, key: usize, value: &Tensor) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&key) {
            return id;
        }
        let id = self.leaf(value.clone());
        self.param_nodes.insert(key, id);
        id
    }

    pub fn param_node(&self, key: usize) -> Option<NodeId> {
        self.param_nodes.get(&key).copied()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| -x).collect());
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale_shift(&mut self, a: NodeId, k: f64, b: f64) -> NodeId {
        let va = self.value(a);
        let v = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| k * x + b).collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::ScaleShift(a, k, b), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x.exp()).collect());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log_clamped(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.max(LOG_CLAMP).ln()).collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::LogClamped(a), rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x.sqrt()).collect());
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| 1.0 / x).collect());
        let rg = self.rg(a);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x.tanh()).collect());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn pos_part(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.max(0.0)).collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::PosPart(a), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &db[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let v = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    /// a[m,k] * b[n,k]^T -> [m,n].
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (n, k2) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul_t inner dims");
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let v = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatmulT(a, b), rg)
    }

    // ---- broadcasts ----

    fn bcast_row_check(&self, x: NodeId, v: NodeId) -> (usize, usize) {
        let (vx, vv) = (self.value(x), self.value(v));
        assert_eq!(vx.shape().len(), 2);
        assert_eq!(vv.shape(), &[vx.shape()[1]], "row broadcast width");
        (vx.shape()[0], vx.shape()[1])
    }

    pub fn add_bcast_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.bcast_row_check(x, v);
        let (dx, dv) = (self.value(x).data(), self.value(v).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(dx[i * c + j] + dv[j]);
            }
        }
        let t = Tensor::from_parts(vec![r, c], out);
        let rg = self.rg(x) || self.rg(v);
        self.push(t, Op::AddBcastRow(x, v), rg)
    }

    pub fn mul_bcast_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.bcast_row_check(x, v);
        let (dx, dv) = (self.value(x).data(), self.value(v).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(dx[i * c + j] * dv[j]);
            }
        }
        let t = Tensor::from_parts(vec![r, c], out);
        let rg = self.rg(x) || self.rg(v);
        self.push(t, Op::MulBcastRow(x, v), rg)
    }

    fn bcast_mid_check(&self, x: NodeId, v: NodeId) -> (usize, usize, usize) {
        let (vx, vv) = (self.value(x), self.value(v));
        assert_eq!(vx.shape().len(), 3);
        assert_eq!(
            vv.shape(),
            &[vx.shape()[0], vx.shape()[2]],
            "mid broadcast dims"
        );
        (vx.shape()[0], vx.shape()[1], vx.shape()[2])
    }

    pub fn add_bcast_mid(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (p, q, r) = self.bcast_mid_check(x, v);
        let (dx, dv) = (self.value(x).data(), self.value(v).data());
        let mut out = Vec::with_capacity(p * q * r);
        for a in 0..p {
            for b in 0..q {
                for c in 0..r {
                    out.push(dx[(a * q + b) * r + c] + dv[a * r + c]);
                }
            }
        }
        let t = Tensor::from_parts(vec![p, q, r], out);
        let rg = self.rg(x) || self.rg(v);
        self.push(t, Op::AddBcastMid(x, v), rg)
    }

    pub fn mul_bcast_mid(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (p, q, r) = self.bcast_mid_check(x, v);
        let (dx, dv) = (self.value(x).data(), self.value(v).data());
        let mut out = Vec::with_capacity(p * q * r);
        for a in 0..p {
            for b in 0..q {
                for c in 0..r {
                    out.push(dx[(a * q + b) * r + c] * dv[a * r + c]);
                }
            }
        }
        let t = Tensor::from_parts(vec![p, q, r], out);
        let rg = self.rg(x) || self.rg(v);
        self.push(t, Op::MulBcastMid(x, v), rg)
    }

    fn bcast_first_check(&self, x: NodeId, v: NodeId) -> (usize, usize) {
        let (vx, vv) = (self.value(x), self.value(v));
        let n = vx.shape()[0];
        assert_eq!(vv.shape(), &[n], "first-axis broadcast length");
        (n, vx.len() / n.max(1))
    }

    pub fn add_bcast_first(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (n, rest) = self.bcast_first_check(x, v);
        let (dx, dv) = (self.value(x).data(), self.value(v).data());
        let mut out = Vec::with_capacity(n * rest);
        for i in 0..n {
            for j in 0..rest {
                out.push(dx[i * rest + j] + dv[i]);
            }
        }
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(v);
        self.push(t, Op::AddBcastFirst(x, v), rg)
    }

    pub fn mul_bcast_first(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (n, rest) = self.bcast_first_check(x, v);
        let (dx, dv) = (self.value(x).data(), self.value(v).data());
        let mut out = Vec::with_capacity(n * rest);
        for i in 0..n {
            for j in 0..rest {
                out.push(dx[i * rest + j] * dv[i]);
            }
        }
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(v);
        self.push(t, Op::MulBcastFirst(x, v), rg)
    }

    // ---- reductions ----

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2);
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(r > 0, "mean_rows over empty axis");
        let dx = vx.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += dx[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let t = Tensor::from_parts(vec![c], out);
        let rg = self.rg(x);
        self.push(t, Op::MeanRows(x), rg)
    }

    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2);
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let dx = vx.data();
        let out: Vec<f64> = (0..r).map(|i| dx[i * c..(i + 1) * c].iter().sum()).collect();
        let t = Tensor::from_parts(vec![r], out);
        let rg = self.rg(x);
        self.push(t, Op::SumCols(x), rg)
    }

    pub fn mean_mid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3);
        let (p, q, r) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(q > 0, "mean_mid over empty axis");
        let dx = vx.data();
        let mut out = vec![0.0; p * r];
        for a in 0..p {
            for b in 0..q {
                for c in 0..r {
                    out[a * r + c] += dx[(a * q + b) * r + c];
                }
            }
        }
        for o in &mut out {
            *o /= q as f64;
        }
        let t = Tensor::from_parts(vec![p, r], out);
        let rg = self.rg(x);
        self.push(t, Op::MeanMid(x), rg)
    }

    pub fn max_mid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3);
        let (p, q, r) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(q > 0, "max_mid over empty axis");
        let dx = vx.data();
        let mut out = vec![f64::NEG_INFINITY; p * r];
        for a in 0..p {
            for b in 0..q {
                for c in 0..r {
                    let v = dx[(a * q + b) * r + c];
                    if v > out[a * r + c] {
                        out[a * r + c] = v;
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![p, r], out);
        let rg = self.rg(x);
        self.push(t, Op::MaxMid(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert!(!vx.is_empty(), "mean_all of empty tensor");
        let m = vx.data().iter().sum::<f64>() / vx.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    // ---- structured ----

    pub fn softmax_rows(&mut self, x: NodeId, tau: f64) -> NodeId {
        assert!(tau > 0.0, "softmax temperature must be positive");
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2);
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let dx = vx.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &dx[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = ((row[j] - m) / tau).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let t = Tensor::from_parts(vec![r, c], out);
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxRows(x, tau), rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let vx = self.value(x);
        let n = vx.shape()[0];
        let rest = vx.len() / n.max(1);
        let dx = vx.data();
        let mut out = Vec::with_capacity(idx.len() * rest);
        for &i in &idx {
            assert!(i < n, "gather_rows index out of range");
            out.extend_from_slice(&dx[i * rest..(i + 1) * rest]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::from_parts(shape, out);
        let rg = self.rg(x);
        self.push(t, Op::GatherRows(x, idx), rg)
    }

    pub fn gather_idx(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2);
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(idx.len(), r, "gather_idx needs one index per row");
        let dx = vx.data();
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "gather_idx column out of range");
                dx[i * c + j]
            })
            .collect();
        let t = Tensor::from_parts(vec![r], out);
        let rg = self.rg(x);
        self.push(t, Op::GatherIdx(x, idx), rg)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape()[1..], vb.shape()[1..], "concat_rows trailing dims");
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let t = Tensor::from_parts(shape, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::ConcatRows(a, b), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        assert_eq!(va.shape()[0], vb.shape()[0], "concat_cols row counts");
        let (r, c1, c2) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let (da, db) = (va.data(), vb.data());
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(&da[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&db[i * c2..(i + 1) * c2]);
        }
        let t = Tensor::from_parts(vec![r, c1 + c2], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2);
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(from <= to && to <= c, "slice_cols bounds");
        let dx = vx.data();
        let mut out = Vec::with_capacity(r * (to - from));
        for i in 0..r {
            out.extend_from_slice(&dx[i * c + from..i * c + to]);
        }
        let t = Tensor::from_parts(vec![r, to - from], out);
        let rg = self.rg(x);
        self.push(t, Op::SliceCols(x, from, to), rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let vx = self.value(x);
        let n = vx.shape()[0];
        assert!(from <= to && to <= n, "slice_rows bounds");
        let rest = vx.len() / n.max(1);
        let out = vx.data()[from * rest..to * rest].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = to - from;
        let t = Tensor::from_parts(shape, out);
        let rg = self.rg(x);
        self.push(t, Op::SliceRows(x, from, to), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(
            shape.iter().product::<usize>(),
            vx.len(),
            "reshape volume mismatch"
        );
        let t = Tensor::from_parts(shape, vx.data().to_vec());
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 4);
        let (n, h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let dx = vx.data();
        let at = |s: usize, i: usize, j: usize, k: usize| dx[((s * h + i) * w + j) * c + k];
        let mut out = Vec::with_capacity(n * oh * ow * c);
        for s in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..c {
                        let v = at(s, 2 * i, 2 * j, k)
                            + at(s, 2 * i, 2 * j + 1, k)
                            + at(s, 2 * i + 1, 2 * j, k)
                            + at(s, 2 * i + 1, 2 * j + 1, k);
                        out.push(v / 4.0);
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![n, oh, ow, c], out);
        let rg = self.rg(x);
        self.push(t, Op::AvgPool2(x), rg)
    }

    // ---- backward ----

    /// Accumulates d(loss)/d(node) for every differentiable node reachable
    /// from `loss`, which must hold a single scalar.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { by_node: grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], target: NodeId, contrib: Tensor) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                let neg = Tensor::from_parts(g.shape().to_vec(), gd.iter().map(|x| -x).collect());
                self.accum(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                );
                let gb = Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                );
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Neg(a) => {
                let ga = Tensor::from_parts(g.shape().to_vec(), gd.iter().map(|x| -x).collect());
                self.accum(grads, *a, ga);
            }
            Op::ScaleShift(a, k, _b) => {
                let ga = Tensor::from_parts(g.shape().to_vec(), gd.iter().map(|x| k * x).collect());
                self.accum(grads, *a, ga);
            }
            Op::Exp(a) => {
                let out = node.value.data();
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter().zip(out).map(|(x, y)| x * y).collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::LogClamped(a) => {
                let va = self.value(*a).data();
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter()
                        .zip(va)
                        .map(|(x, y)| if *y > LOG_CLAMP { x / y } else { 0.0 })
                        .collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter()
                        .zip(out)
                        .map(|(x, y)| if *x == 0.0 { 0.0 } else { x / (2.0 * y) })
                        .collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::Recip(a) => {
                let out = node.value.data();
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter().zip(out).map(|(x, y)| -x * y * y).collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::PosPart(a) => {
                let va = self.value(*a).data();
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter()
                        .zip(va)
                        .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (da, db) = (va.data(), vb.data());
                if self.rg(*a) {
                    // gA = g . B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for l in 0..k {
                            let brow = &db[l * n..(l + 1) * n];
                            ga[i * k + l] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accum(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.rg(*b) {
                    // gB = A^T . g
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for l in 0..k {
                            let av = da[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[l * n..(l + 1) * n];
                            for j in 0..n {
                                gbrow[j] += av * grow[j];
                            }
                        }
                    }
                    self.accum(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::MatmulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                let (da, db) = (va.data(), vb.data());
                if self.rg(*a) {
                    // gA = g . B
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let brow = &db[j * k..(j + 1) * k];
                            for l in 0..k {
                                garow[l] += gv * brow[l];
                            }
                        }
                    }
                    self.accum(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.rg(*b) {
                    // gB = g^T . A
                    let mut gb = vec![0.0; n * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        let arow = &da[i * k..(i + 1) * k];
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[j * k..(j + 1) * k];
                            for l in 0..k {
                                gbrow[l] += gv * arow[l];
                            }
                        }
                    }
                    self.accum(grads, *b, Tensor::from_parts(vec![n, k], gb));
                }
            }
            Op::AddBcastRow(x, v) => {
                let (r, c) = {
                    let vx = self.value(*x);
                    (vx.shape()[0], vx.shape()[1])
                };
                self.accum(grads, *x, g.clone());
                if self.rg(*v) {
                    let mut gv = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += gd[i * c + j];
                        }
                    }
                    self.accum(grads, *v, Tensor::from_parts(vec![c], gv));
                }
            }
            Op::MulBcastRow(x, v) => {
                let vx = self.value(*x);
                let vv = self.value(*v);
                let (r, c) = (vx.shape()[0], vx.shape()[1]);
                if self.rg(*x) {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gd[i * c + j] * vv.data()[j];
                        }
                    }
                    self.accum(grads, *x, Tensor::from_parts(vec![r, c], gx));
                }
                if self.rg(*v) {
                    let mut gv = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += gd[i * c + j] * vx.data()[i * c + j];
                        }
                    }
                    self.accum(grads, *v, Tensor::from_parts(vec![c], gv));
                }
            }
            Op::AddBcastMid(x, v) => {
                let vx = self.value(*x);
                let (p, q, r) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                self.accum(grads, *x, g.clone());
                if self.rg(*v) {
                    let mut gv = vec![0.0; p * r];
                    for a in 0..p {
                        for b in 0..q {
                            for c in 0..r {
                                gv[a * r + c] += gd[(a * q + b) * r + c];
                            }
                        }
                    }
                    self.accum(grads, *v, Tensor::from_parts(vec![p, r], gv));
                }
            }
            Op::MulBcastMid(x, v) => {
                let vx = self.value(*x);
                let vv = self.value(*v);
                let (p, q, r) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                if self.rg(*x) {
                    let mut gx = vec![0.0; p * q * r];
                    for a in 0..p {
                        for b in 0..q {
                            for c in 0..r {
                                gx[(a * q + b) * r + c] =
                                    gd[(a * q + b) * r + c] * vv.data()[a * r + c];
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor::from_parts(vec![p, q, r], gx));
                }
                if self.rg(*v) {
                    let mut gv = vec![0.0; p * r];
                    for a in 0..p {
                        for b in 0..q {
                            for c in 0..r {
                                gv[a * r + c] +=
                                    gd[(a * q + b) * r + c] * vx.data()[(a * q + b) * r + c];
                            }
                        }
                    }
                    self.accum(grads, *v, Tensor::from_parts(vec![p, r], gv));
                }
            }
            Op::AddBcastFirst(x, v) => {
                let vx = self.value(*x);
                let n = vx.shape()[0];
                let rest = vx.len() / n.max(1);
                self.accum(grads, *x, g.clone());
                if self.rg(*v) {
                    let gv: Vec<f64> = (0..n)
                        .map(|i| gd[i * rest..(i + 1) * rest].iter().sum())
                        .collect();
                    self.accum(grads, *v, Tensor::from_parts(vec![n], gv));
                }
            }
            Op::MulBcastFirst(x, v) => {
                let vx = self.value(*x);
                let vv = self.value(*v);
                let n = vx.shape()[0];
                let rest = vx.len() / n.max(1);
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * rest];
                    for i in 0..n {
                        for j in 0..rest {
                            gx[i * rest + j] = gd[i * rest + j] * vv.data()[i];
                        }
                    }
                    self.accum(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
                if self.rg(*v) {
                    let gv: Vec<f64> = (0..n)
                        .map(|i| {
                            (0..rest)
                                .map(|j| gd[i * rest + j] * vx.data()[i * rest + j])
                                .sum()
                        })
                        .collect();
                    self.accum(grads, *v, Tensor::from_parts(vec![n], gv));
                }
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let (r, c) = (vx.shape()[0], vx.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gd[j] / r as f64;
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![r, c], gx));
            }
            Op::SumCols(x) => {
                let vx = self.value(*x);
                let (r, c) = (vx.shape()[0], vx.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gd[i];
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![r, c], gx));
            }
            Op::MeanMid(x) => {
                let vx = self.value(*x);
                let (p, q, r) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let mut gx = vec![0.0; p * q * r];
                for a in 0..p {
                    for b in 0..q {
                        for c in 0..r {
                            gx[(a * q + b) * r + c] = gd[a * r + c] / q as f64;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![p, q, r], gx));
            }
            Op::MaxMid(x) => {
                let vx = self.value(*x);
                let (p, q, r) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let dx = vx.data();
                let mut gx = vec![0.0; p * q * r];
                for a in 0..p {
                    for c in 0..r {
                        // First occurrence of the max receives the gradient.
                        let mut best = 0usize;
                        let mut bv = f64::NEG_INFINITY;
                        for b in 0..q {
                            let v = dx[(a * q + b) * r + c];
                            if v > bv {
                                bv = v;
                                best = b;
                            }
                        }
                        gx[(a * q + best) * r + c] = gd[a * r + c];
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![p, q, r], gx));
            }
            Op::MeanAll(x) => {
                let vx = self.value(*x);
                let n = vx.len() as f64;
                let gval = gd[0] / n;
                self.accum(
                    grads,
                    *x,
                    Tensor::from_parts(vx.shape().to_vec(), vec![gval; vx.len()]),
                );
            }
            Op::SumAll(x) => {
                let vx = self.value(*x);
                self.accum(
                    grads,
                    *x,
                    Tensor::from_parts(vx.shape().to_vec(), vec![gd[0]; vx.len()]),
                );
            }
            Op::SoftmaxRows(x, tau) => {
                let out = node.value.data();
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let p = &out[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = p[j] * (gr[j] - dot) / tau;
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![r, c], gx));
            }
            Op::GatherRows(x, idx) => {
                let vx = self.value(*x);
                let n = vx.shape()[0];
                let rest = vx.len() / n.max(1);
                let mut gx = vec![0.0; vx.len()];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..rest {
                        gx[i * rest + j] += gd[o * rest + j];
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::GatherIdx(x, idx) => {
                let vx = self.value(*x);
                let (r, c) = (vx.shape()[0], vx.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * c + j] += gd[i];
                }
                self.accum(grads, *x, Tensor::from_parts(vec![r, c], gx));
            }
            Op::ConcatRows(a, b) => {
                let la = self.value(*a).len();
                let va = self.value(*a);
                let vb = self.value(*b);
                self.accum(
                    grads,
                    *a,
                    Tensor::from_parts(va.shape().to_vec(), gd[..la].to_vec()),
                );
                self.accum(
                    grads,
                    *b,
                    Tensor::from_parts(vb.shape().to_vec(), gd[la..].to_vec()),
                );
            }
            Op::ConcatCols(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (r, c1, c2) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let ct = c1 + c2;
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(r * c1);
                    for i in 0..r {
                        ga.extend_from_slice(&gd[i * ct..i * ct + c1]);
                    }
                    self.accum(grads, *a, Tensor::from_parts(vec![r, c1], ga));
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(r * c2);
                    for i in 0..r {
                        gb.extend_from_slice(&gd[i * ct + c1..(i + 1) * ct]);
                    }
                    self.accum(grads, *b, Tensor::from_parts(vec![r, c2], gb));
                }
            }
            Op::SliceCols(x, from, to) => {
                let vx = self.value(*x);
                let (r, c) = (vx.shape()[0], vx.shape()[1]);
                let w = to - from;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + from + j] = gd[i * w + j];
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![r, c], gx));
            }
            Op::SliceRows(x, from, to) => {
                let vx = self.value(*x);
                let n = vx.shape()[0];
                let rest = vx.len() / n.max(1);
                let mut gx = vec![0.0; vx.len()];
                gx[from * rest..to * rest].copy_from_slice(gd);
                self.accum(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                self.accum(
                    grads,
                    *x,
                    Tensor::from_parts(vx.shape().to_vec(), gd.to_vec()),
                );
            }
            Op::AvgPool2(x) => {
                let vx = self.value(*x);
                let (n, h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; vx.len()];
                for s in 0..n {
                    for i in 0..oh {
                        for j in 0..ow {
                            for k in 0..c {
                                let gv = gd[((s * oh + i) * ow + j) * c + k] / 4.0;
                                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    gx[((s * h + 2 * i + di) * w + 2 * j + dj) * c + k] += gv;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![n, h, w, c], gx));
            }
        }
    }
}
