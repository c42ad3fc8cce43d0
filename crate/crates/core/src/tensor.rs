//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to tracked tensors during a
//! forward pass; [`Tape::backward`] replays the records in reverse and
//! returns a [`GradientMap`] with the gradient of a scalar loss with
//! respect to every leaf. Tensors are immutable, row-major `f64` arrays;
//! cloning shares the underlying buffer.
//!
//! Tapes are single-threaded and consumed by `backward`: a second backward
//! on the same tape is an error, as is recording after backward.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle of a value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    tape: u64,
    index: usize,
}

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor from explicit values. The value count must equal the
    /// product of the shape.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::Construction(format!(
                "shape {:?} holds {} elements, got {} values",
                shape,
                n,
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(values),
            node: None,
        })
    }

    /// Tensor filled with a single value.
    pub fn fill(shape: &[usize], value: f64) -> Result<Tensor> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
            node: None,
        })
    }

    /// All-zero tensor. Panics on an invalid shape (internal use favours
    /// shapes that are correct by construction).
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::fill(shape, 0.0).expect("valid shape")
    }

    /// Scalar as a `[1]`-shaped tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer, no tape handle.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Mutable access to the buffer of an untracked tensor. Copy-on-write
    /// when the buffer is shared.
    pub(crate) fn data_mut(&mut self) -> &mut Vec<f64> {
        debug_assert!(self.node.is_none(), "mutating a tensor on the tape");
        Arc::make_mut(&mut self.data)
    }

    fn with_node(&self, node: NodeRef) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: Some(node),
        }
    }
}

/// Equal shape and bit-equal contents (tape handles ignored).
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Construction(format!(
            "shape must be non-empty with all dims >= 1, got {:?}",
            shape
        )));
    }
    Ok(())
}

/// Split a tensor in two along `axis` at offset `at`. Inverse of
/// [`Tape::concat`] on the same axis.
pub fn split(t: &Tensor, axis: usize, at: usize) -> Result<(Tensor, Tensor)> {
    if axis >= t.rank() {
        return Err(Error::Shape(format!(
            "split axis {} out of range for shape {:?}",
            axis,
            t.shape()
        )));
    }
    let dim = t.shape()[axis];
    if at == 0 || at >= dim {
        return Err(Error::Shape(format!(
            "split offset {} invalid for axis of size {}",
            at, dim
        )));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut left = Vec::with_capacity(outer * at * inner);
    let mut right = Vec::with_capacity(outer * (dim - at) * inner);
    let block = dim * inner;
    for o in 0..outer {
        let base = o * block;
        left.extend_from_slice(&t.data()[base..base + at * inner]);
        right.extend_from_slice(&t.data()[base + at * inner..base + block]);
    }
    let mut lshape = t.shape().to_vec();
    lshape[axis] = at;
    let mut rshape = t.shape().to_vec();
    rshape[axis] = dim - at;
    Ok((Tensor::new(&lshape, left)?, Tensor::new(&rshape, right)?))
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// out[m,n] = A[m,k] · B[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// out[k,n] = Aᵀ · G with A[m,k], G[m,n]
fn mm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
    out
}

/// out[m,k] = G · Bᵀ with G[m,n], B[k,n]
fn mm_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ── Tape ─────────────────────────────────────────────────────────────

type GradFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    shape: Vec<usize>,
    inputs: Vec<usize>,
    /// None for leaves.
    grad_fn: Option<GradFn>,
    is_param: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn ensure_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "tape already consumed by backward".into(),
            ));
        }
        Ok(())
    }

    /// Register a trainable leaf. The returned tensor aliases the input
    /// buffer and carries a handle usable with [`GradientMap::get`].
    pub fn param(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, true)
    }

    /// Register a non-trainable leaf (inputs, masks, constants).
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: &Tensor, is_param: bool) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            inputs: Vec::new(),
            grad_fn: None,
            is_param,
        });
        t.with_node(NodeRef {
            tape: self.id,
            index,
        })
    }

    /// Resolve a tensor to a node id, auto-registering untracked tensors
    /// as constants.
    fn track(&mut self, t: &Tensor) -> Result<usize> {
        match t.node {
            Some(r) if r.tape == self.id => Ok(r.index),
            Some(_) => Err(Error::Contract(
                "tensor belongs to a different tape".into(),
            )),
            None => {
                let tracked = self.constant(t);
                Ok(tracked.node.expect("just registered").index)
            }
        }
    }

    fn push_op(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<usize>,
        grad_fn: GradFn,
    ) -> Tensor {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite op output");
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.clone(),
            inputs,
            grad_fn: Some(grad_fn),
            is_param: false,
        });
        Tensor {
            shape,
            data: Arc::new(data),
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        }
    }

    // ── Primitive ops ────────────────────────────────────────────

    /// Matrix product. Accepts `[m,k]·[k,n] -> [m,n]` and the vector
    /// convenience `[k]·[k,n] -> [n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ensure_live()?;
        let (m, k, out_shape) = match (a.rank(), b.rank()) {
            (2, 2) => (a.shape()[0], a.shape()[1], None),
            (1, 2) => (1, a.shape()[0], Some(())),
            _ => {
                return Err(Error::Shape(format!(
                    "matmul expects [m,k]x[k,n] or [k]x[k,n], got {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )))
            }
        };
        if b.shape()[0] != k {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = b.shape()[1];
        let (aid, bid) = (self.track(a)?, self.track(b)?);
        let data = mm(a.data(), b.data(), m, k, n);
        let shape = if out_shape.is_some() {
            vec![n]
        } else {
            vec![m, n]
        };
        let (ac, bc) = (a.detached(), b.detached());
        let a_shape = a.shape().to_vec();
        let grad_fn: GradFn = Box::new(move |g: &Tensor| {
            let da = mm_bt(g.data(), bc.data(), m, k, n);
            let db = mm_at(ac.data(), g.data(), m, k, n);
            vec![
                Tensor::new(&a_shape, da).expect("grad shape"),
                Tensor::new(&[k, n], db).expect("grad shape"),
            ]
        });
        Ok(self.push_op(shape, data, vec![aid, bid], grad_fn))
    }

    /// Elementwise sum of equal-shaped tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew(a, b, "add", |x, y| x + y, |_, _, g| (g.clone(), g.clone()))
    }

    /// Elementwise difference of equal-shaped tensors.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew(
            a,
            b,
            "sub",
            |x, y| x - y,
            |_, _, g| {
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                (g.clone(), Tensor::new(g.shape(), neg).expect("grad shape"))
            },
        )
    }

    /// Elementwise (Hadamard) product of equal-shaped tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew(
            a,
            b,
            "mul",
            |x, y| x * y,
            |a, b, g| {
                let da: Vec<f64> = g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect();
                (
                    Tensor::new(g.shape(), da).expect("grad shape"),
                    Tensor::new(g.shape(), db).expect("grad shape"),
                )
            },
        )
    }

    fn binary_ew(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        name: &str,
        f: fn(f64, f64) -> f64,
        grad: fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor),
    ) -> Result<Tensor> {
        self.ensure_live()?;
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "{} requires equal shapes, got {:?} and {:?}",
                name,
                a.shape(),
                b.shape()
            )));
        }
        let (aid, bid) = (self.track(a)?, self.track(b)?);
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (ac, bc) = (a.detached(), b.detached());
        let grad_fn: GradFn = Box::new(move |g| {
            let (da, db) = grad(&ac, &bc, g);
            vec![da, db]
        });
        Ok(self.push_op(a.shape().to_vec(), data, vec![aid, bid], grad_fn))
    }

    /// Broadcast a bias vector along the last axis of a matrix:
    /// `x[r,c] + b[c]`. The only broadcast the tape supports.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ensure_live()?;
        if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
            return Err(Error::Shape(format!(
                "add_bias expects [r,c] + [c], got {:?} + {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let (xid, bid) = (self.track(x)?, self.track(b)?);
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let grad_fn: GradFn = Box::new(move |g| {
            let mut db = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (s, &gv) in db.iter_mut().zip(row) {
                    *s += gv;
                }
            }
            vec![g.clone(), Tensor::new(&[c], db).expect("grad shape")]
        });
        let _ = r;
        Ok(self.push_op(x.shape().to_vec(), data, vec![xid, bid], grad_fn))
    }

    /// Logistic sigmoid, elementwise.
    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary_ew(x, sigmoid_scalar, |s, g| {
            g.data()
                .iter()
                .zip(s.data())
                .map(|(&g, &s)| g * s * (1.0 - s))
                .collect()
        })
    }

    /// Hyperbolic tangent, elementwise.
    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary_ew(x, f64::tanh, |t, g| {
            g.data()
                .iter()
                .zip(t.data())
                .map(|(&g, &t)| g * (1.0 - t * t))
                .collect()
        })
    }

    fn unary_ew(
        &mut self,
        x: &Tensor,
        f: fn(f64) -> f64,
        grad_from_out: fn(&Tensor, &Tensor) -> Vec<f64>,
    ) -> Result<Tensor> {
        self.ensure_live()?;
        let xid = self.track(x)?;
        let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        let out_c = out.clone().detached();
        let shape = x.shape().to_vec();
        let grad_fn: GradFn = Box::new(move |g| {
            vec![Tensor::new(out_c.shape(), grad_from_out(&out_c, g)).expect("grad shape")]
        });
        Ok(self.push_op(shape, out.data().to_vec(), vec![xid], grad_fn))
    }

    /// Join two tensors along `axis`; all other dims must match.
    pub fn concat(&mut self, a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
        self.ensure_live()?;
        if a.rank() != b.rank() || axis >= a.rank() {
            return Err(Error::Shape(format!(
                "concat axis {} invalid for shapes {:?} and {:?}",
                axis,
                a.shape(),
                b.shape()
            )));
        }
        for (i, (&da, &db)) in a.shape().iter().zip(b.shape()).enumerate() {
            if i != axis && da != db {
                return Err(Error::Shape(format!(
                    "concat shapes {:?} and {:?} differ outside axis {}",
                    a.shape(),
                    b.shape(),
                    axis
                )));
            }
        }
        let (aid, bid) = (self.track(a)?, self.track(b)?);
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let (da, db) = (a.shape()[axis], b.shape()[axis]);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for o in 0..outer {
            data.extend_from_slice(&a.data()[o * da * inner..(o + 1) * da * inner]);
            data.extend_from_slice(&b.data()[o * db * inner..(o + 1) * db * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = da + db;
        let grad_fn: GradFn = Box::new(move |g| {
            let (ga, gb) = split(g, axis, da).expect("concat grad split");
            vec![ga, gb]
        });
        Ok(self.push_op(shape, data, vec![aid, bid], grad_fn))
    }

    /// Sum of all elements, as a `[1]`-shaped scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        self.ensure_live()?;
        let xid = self.track(x)?;
        let total: f64 = x.data().iter().sum();
        let shape = x.shape().to_vec();
        let grad_fn: GradFn = Box::new(move |g| {
            vec![Tensor::fill(&shape, g.item()).expect("grad shape")]
        });
        Ok(self.push_op(vec![1], vec![total], vec![xid], grad_fn))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.ensure_live()?;
        let xid = self.track(x)?;
        let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        let grad_fn: GradFn = Box::new(move |g| {
            let gd: Vec<f64> = g.data().iter().map(|v| v * c).collect();
            vec![Tensor::new(g.shape(), gd).expect("grad shape")]
        });
        Ok(self.push_op(x.shape().to_vec(), data, vec![xid], grad_fn))
    }

    /// Gather rows of a `[v,w]` table by index. Gradient scatter-adds into
    /// the gathered rows only.
    pub fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.ensure_live()?;
        if table.rank() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows expects a [v,w] table, got {:?}",
                table.shape()
            )));
        }
        let (v, w) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index(format!(
                "row index {} out of range for table with {} rows",
                bad, v
            )));
        }
        if ids.is_empty() {
            return Err(Error::Shape("gather_rows needs at least one index".into()));
        }
        let tid = self.track(table)?;
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            data.extend_from_slice(&table.data()[id * w..(id + 1) * w]);
        }
        let ids_c = ids.to_vec();
        let grad_fn: GradFn = Box::new(move |g| {
            let mut dt = vec![0.0; v * w];
            for (r, &id) in ids_c.iter().enumerate() {
                let grow = &g.data()[r * w..(r + 1) * w];
                for (s, &gv) in dt[id * w..(id + 1) * w].iter_mut().zip(grow) {
                    *s += gv;
                }
            }
            vec![Tensor::new(&[v, w], dt).expect("grad shape")]
        });
        Ok(self.push_op(vec![ids.len(), w], data, vec![tid], grad_fn))
    }

    /// Extract row `i` of a matrix as a vector.
    pub fn select_row(&mut self, x: &Tensor, i: usize) -> Result<Tensor> {
        self.ensure_live()?;
        if x.rank() != 2 {
            return Err(Error::Shape(format!(
                "select_row expects a matrix, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if i >= m {
            return Err(Error::Index(format!(
                "row {} out of range for {} rows",
                i, m
            )));
        }
        let xid = self.track(x)?;
        let data = x.data()[i * n..(i + 1) * n].to_vec();
        let grad_fn: GradFn = Box::new(move |g| {
            let mut dx = vec![0.0; m * n];
            dx[i * n..(i + 1) * n].copy_from_slice(g.data());
            vec![Tensor::new(&[m, n], dx).expect("grad shape")]
        });
        Ok(self.push_op(vec![n], data, vec![xid], grad_fn))
    }

    /// Stack equal-length vectors into a matrix, one row each.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        self.ensure_live()?;
        let first = rows
            .first()
            .ok_or_else(|| Error::Shape("stack_rows needs at least one row".into()))?;
        if first.rank() != 1 {
            return Err(Error::Shape(format!(
                "stack_rows expects vectors, got {:?}",
                first.shape()
            )));
        }
        let n = first.shape()[0];
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * n);
        for row in rows {
            if row.shape() != [n] {
                return Err(Error::Shape(format!(
                    "stack_rows rows differ: {:?} vs {:?}",
                    row.shape(),
                    [n]
                )));
            }
            ids.push(self.track(row)?);
            data.extend_from_slice(row.data());
        }
        let r = rows.len();
        let grad_fn: GradFn = Box::new(move |g| {
            (0..r)
                .map(|i| {
                    Tensor::new(&[n], g.data()[i * n..(i + 1) * n].to_vec()).expect("grad shape")
                })
                .collect()
        });
        Ok(self.push_op(vec![r, n], data, ids, grad_fn))
    }

    /// Row-wise softmax with max-subtraction; a vector is one row.
    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        self.ensure_live()?;
        let (rows, cols) = match x.rank() {
            1 => (1, x.shape()[0]),
            2 => (x.shape()[0], x.shape()[1]),
            _ => {
                return Err(Error::Shape(format!(
                    "softmax expects a vector or matrix, got {:?}",
                    x.shape()
                )))
            }
        };
        let xid = self.track(x)?;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let probs = Tensor::new(x.shape(), data.clone()).expect("same shape");
        let probs_c = probs.detached();
        let shape = x.shape().to_vec();
        let grad_fn: GradFn = Box::new(move |g| {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let p = &probs_c.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                for ((d, &pv), &gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(p).zip(gr) {
                    *d = pv * (gv - dot);
                }
            }
            vec![Tensor::new(probs_c.shape(), dx).expect("grad shape")]
        });
        Ok(self.push_op(shape, data, vec![xid], grad_fn))
    }

    /// Mean negative log-likelihood over unmasked rows of a `[n,C]`
    /// probability matrix: `-(1/N) Σ ln p[i, label_i]`. Masked rows
    /// contribute nothing to the sum or the normalizer; zero unmasked rows
    /// give a zero loss.
    pub fn masked_nll(
        &mut self,
        probs: &Tensor,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<Tensor> {
        self.ensure_live()?;
        if probs.rank() != 2 {
            return Err(Error::Shape(format!(
                "masked_nll expects [n,C] probabilities, got {:?}",
                probs.shape()
            )));
        }
        let (n, c) = (probs.shape()[0], probs.shape()[1]);
        if labels.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "masked_nll got {} rows, {} labels, {} mask flags",
                n,
                labels.len(),
                mask.len()
            )));
        }
        for i in 0..n {
            if mask[i] && labels[i] >= c {
                return Err(Error::Index(format!(
                    "label {} out of range for {} classes",
                    labels[i], c
                )));
            }
        }
        let pid = self.track(probs)?;
        let n_real = mask.iter().filter(|&&m| m).count();
        let loss = if n_real == 0 {
            0.0
        } else {
            let mut total = 0.0;
            for i in 0..n {
                if mask[i] {
                    total -= probs.data()[i * c + labels[i]].ln();
                }
            }
            total / n_real as f64
        };
        let probs_c = probs.detached();
        let labels_c = labels.to_vec();
        let mask_c = mask.to_vec();
        let grad_fn: GradFn = Box::new(move |g| {
            let mut dp = vec![0.0; n * c];
            if n_real > 0 {
                let scale = g.item() / n_real as f64;
                for i in 0..n {
                    if mask_c[i] {
                        let idx = i * c + labels_c[i];
                        dp[idx] = -scale / probs_c.data()[idx];
                    }
                }
            }
            vec![Tensor::new(&[n, c], dp).expect("grad shape")]
        });
        Ok(self.push_op(vec![1], vec![loss], vec![pid], grad_fn))
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape; returns the
    /// gradient of the loss w.r.t. every leaf it reaches.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradientMap> {
        self.ensure_live()?;
        let lid = match loss.node {
            Some(r) if r.tape == self.id => r.index,
            Some(_) => {
                return Err(Error::Contract(
                    "loss tensor belongs to a different tape".into(),
                ))
            }
            None => return Err(Error::Contract("loss tensor is not on the tape".into())),
        };
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[lid] = Some(Tensor::fill(&self.nodes[lid].shape, 1.0).expect("seed"));

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue; // leaf: keep the accumulated gradient
            };
            let Some(g) = grads[idx].take() else {
                continue; // not reached by the loss
            };
            let input_grads = grad_fn(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            let inputs = node.inputs.clone();
            for (inp, ig) in inputs.into_iter().zip(input_grads) {
                debug_assert_eq!(ig.shape(), &self.nodes[inp].shape[..]);
                match &mut grads[inp] {
                    Some(acc) => {
                        let ad = acc.data_mut();
                        for (a, b) in ad.iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }

        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.grad_fn.is_none() && node.is_param {
                if let Some(g) = grads[idx].take() {
                    map.insert(idx, g);
                }
            }
        }
        Ok(GradientMap {
            tape: self.id,
            grads: map,
        })
    }
}

/// Gradients keyed by leaf node, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct GradientMap {
    tape: u64,
    grads: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    /// Gradient for a tracked leaf, if the loss reached it.
    pub fn get(&self, param: &Tensor) -> Option<&Tensor> {
        let r = param.node()?;
        if r.tape != self.tape {
            return None;
        }
        self.grads.get(&r.index)
    }

    /// Gradient for a tracked leaf, zeros when the loss never reached it.
    pub fn get_or_zeros(&self, param: &Tensor) -> Tensor {
        self.get(param)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Deterministic iteration over stored gradients, in node order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.values_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn construct_zero_fill() {
        let t = Tensor::fill(&[2, 2], 0.0).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn construct_from_values() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn construct_mismatch_is_error() {
        let err = Tensor::new(&[2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
    }

    #[test]
    fn construct_empty_shape_is_error() {
        assert!(Tensor::new(&[], vec![]).is_err());
        assert!(Tensor::fill(&[2, 0], 1.0).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape.matmul(&eye, &a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_dot() {
        let mut tape = Tape::new();
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.item(), 11.0);
    }

    #[test]
    fn matmul_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(tape.matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_vector_matrix() {
        let mut tape = Tape::new();
        let x = t1(&[1.0, 2.0]);
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
        let out = tape.matmul(&x, &w).unwrap();
        assert_eq!(out.shape(), &[3]);
        assert_eq!(out.data(), &[1.0, 2.0, 8.0]);
    }

    #[test]
    fn elementwise_fixed_points() {
        let mut tape = Tape::new();
        let zero = t1(&[0.0]);
        assert_eq!(tape.sigmoid(&zero).unwrap().item(), 0.5);
        assert_eq!(tape.tanh(&zero).unwrap().item(), 0.0);
        let s = tape.add(&t1(&[1.0, 2.0]), &t1(&[3.0, 4.0])).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let err = tape.add(&t1(&[1.0]), &t1(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn concat_definition_and_split() {
        let mut tape = Tape::new();
        let out = tape.concat(&t1(&[1.0, 2.0]), &t1(&[3.0]), 0).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
        let (l, r) = split(&out, 0, 2).unwrap();
        assert_eq!(l.data(), &[1.0, 2.0]);
        assert_eq!(r.data(), &[3.0]);
    }

    #[test]
    fn concat_direction_vectors() {
        // 200-dim forward and backward states concatenate to 400.
        let mut tape = Tape::new();
        let fw = Tensor::zeros(&[200]);
        let bw = Tensor::zeros(&[200]);
        let joined = tape.concat(&fw, &bw, 0).unwrap();
        assert_eq!(joined.shape(), &[400]);
    }

    #[test]
    fn concat_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(matches!(tape.concat(&a, &b, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_linear_sum() {
        let mut tape = Tape::new();
        let w = tape.param(&t1(&[1.0, 2.0, 3.0]));
        let loss = tape.sum(&w).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sigmoid_chain() {
        // loss = sigmoid(x * w) at x*w == 0: dloss/dw = sigmoid'(0) * x = 0.25 x
        let mut tape = Tape::new();
        let w = tape.param(&t1(&[0.0]));
        let x = t1(&[2.0]);
        let prod = tape.mul(&x, &w).unwrap();
        let loss = tape.sigmoid(&prod).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).unwrap().data(), &[0.25 * 2.0]);
    }

    #[test]
    fn backward_constant_loss() {
        let mut tape = Tape::new();
        let w = tape.param(&t1(&[1.0, 2.0]));
        let c = tape.constant(&t1(&[5.0]));
        let loss = tape.sum(&c).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&w).is_none());
        assert_eq!(grads.get_or_zeros(&w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::new();
        let w = tape.param(&t1(&[1.0]));
        let loss = tape.sum(&w).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
    }

    #[test]
    fn record_after_backward_is_error() {
        let mut tape = Tape::new();
        let w = tape.param(&t1(&[1.0]));
        let loss = tape.sum(&w).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.sum(&w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape = Tape::new();
        let w = tape.param(&t1(&[1.0, 2.0]));
        assert!(matches!(tape.backward(&w), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_tape_tensor_is_error() {
        let mut t1_ = Tape::new();
        let mut t2 = Tape::new();
        let w = t1_.param(&t1(&[1.0]));
        assert!(matches!(t2.sum(&w), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_gradients_hand() {
        // loss = sum(a·b), a=[1,2;3,4], b=[5,6;7,8]
        // dA = ones·bᵀ = [[11,15],[11,15]], dB = aᵀ·ones = [[4,4],[6,6]]
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(&Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let prod = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum(&prod).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(&b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(&t1(&[10.0, 20.0]));
        let out = tape.add_bias(&x, &b).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(&out).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&b).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_rows_and_repeat_gradient() {
        let mut tape = Tape::new();
        let table = tape.param(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let single = tape.gather_rows(&table, &[0]).unwrap();
        assert_eq!(single.data(), &[1.0, 2.0]);
        let twice = tape.gather_rows(&table, &[1, 1]).unwrap();
        assert_eq!(twice.data(), &[3.0, 4.0, 3.0, 4.0]);
        let loss = tape.sum(&twice).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // row 1 gathered twice: gradient accumulates to 2 per entry
        assert_eq!(grads.get(&table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut tape = Tape::new();
        let table = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            tape.gather_rows(&table, &[5]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn stack_rows_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(&t1(&[1.0, 2.0]));
        let b = tape.param(&t1(&[3.0, 4.0]));
        let m = tape.stack_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        let row1 = tape.select_row(&m, 1).unwrap();
        assert_eq!(row1.data(), &[3.0, 4.0]);
        let loss = tape.sum(&row1).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // loss ignores row 0, so its gradient is exactly zero
        assert_eq!(grads.get(&a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(&b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let p = tape.softmax(&t1(&[1.0, 1.0, 1.0])).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let stable = tape.softmax(&t1(&[1000.0, 0.0, 0.0])).unwrap();
        assert!(stable.is_finite());
        assert!((stable.data()[0] - 1.0).abs() < 1e-12);
        let hand = tape.softmax(&t1(&[1.0, 2.0, 3.0])).unwrap();
        let expect = [0.090_030_573, 0.244_728_471, 0.665_240_956];
        for (v, e) in hand.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn masked_nll_values() {
        let mut tape = Tape::new();
        // perfect one-hot predictions -> loss 0
        let perfect = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = tape.masked_nll(&perfect, &[0, 1], &[true, true]).unwrap();
        assert_eq!(loss.item(), 0.0);
        // uniform predictions -> ln 3
        let uniform = Tensor::fill(&[2, 3], 1.0 / 3.0).unwrap();
        let loss = tape.masked_nll(&uniform, &[2, 0], &[true, true]).unwrap();
        assert!((loss.item() - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_nll_ignores_masked_rows() {
        let labels = [0, 1, 2];
        let mask = [true, true, false];
        let base = Tensor::new(
            &[3, 3],
            vec![0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.3, 0.3, 0.4],
        )
        .unwrap();
        let changed = Tensor::new(
            &[3, 3],
            vec![0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.01, 0.01, 0.98],
        )
        .unwrap();
        let mut t_a = Tape::new();
        let la = t_a.masked_nll(&base, &labels, &mask).unwrap();
        let mut t_b = Tape::new();
        let lb = t_b.masked_nll(&changed, &labels, &mask).unwrap();
        assert_eq!(la.item().to_bits(), lb.item().to_bits());
    }

    #[test]
    fn masked_nll_empty_mask_is_zero() {
        let mut tape = Tape::new();
        let probs = Tensor::fill(&[2, 3], 1.0 / 3.0).unwrap();
        let loss = tape.masked_nll(&probs, &[0, 0], &[false, false]).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn masked_nll_bad_label_is_error() {
        let mut tape = Tape::new();
        let probs = Tensor::fill(&[1, 3], 1.0 / 3.0).unwrap();
        assert!(matches!(
            tape.masked_nll(&probs, &[7], &[true]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn matmul_associativity() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let rv =
                |rng: &mut rand_chacha::ChaCha8Rng| (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = Tensor::new(&[3, 3], rv(&mut rng)).unwrap();
            let b = Tensor::new(&[3, 3], rv(&mut rng)).unwrap();
            let c = Tensor::new(&[3, 3], rv(&mut rng)).unwrap();
            let mut tape = Tape::new();
            let ab = tape.matmul(&a, &b).unwrap();
            let ab_c = tape.matmul(&ab, &c).unwrap();
            let bc = tape.matmul(&b, &c).unwrap();
            let a_bc = tape.matmul(&a, &bc).unwrap();
            for (x, y) in ab_c.data().iter().zip(a_bc.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
