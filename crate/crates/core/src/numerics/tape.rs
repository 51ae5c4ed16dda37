use std::collections::HashMap;

use rand::Rng;

use super::{normal_cdf, normal_pdf, ModelParams, ParamId, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    GatherParam {
        table: ParamId,
        rows: Vec<usize>,
    },
    BagParam {
        table: ParamId,
        bags: Vec<Vec<(usize, T)>>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    MatMul(Var, Var),
    GroupedMatMulNt {
        a: Var,
        b: Var,
        group: usize,
    },
    GroupedMatMul {
        a: Var,
        b: Var,
        group: usize,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    L2Sq(Var),
    Sum(Var),
    Bce {
        pred: Var,
        labels: Vec<T>,
        weights: Vec<T>,
        lo: T,
        hi: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation over a borrowed parameter registry and
/// replays it backwards.
///
/// Parameters are read through the registry; embedding lookups never copy
/// the full table onto the tape.
pub struct Tape<'p, T: Real> {
    params: &'p ModelParams<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of [`Tape::backward`]: gradients for every parameter touched and
/// for every intermediate value that received one.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn var(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mat_shape(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ModelParams<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.data().len() == value.shape().iter().product::<usize>());
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// The single element of a scalar value.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that does not receive gradients from outside the tape.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A dense parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Row lookup into a parameter table: output row `r` is `table[rows[r]]`.
    pub fn gather(&mut self, table: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.params.get(table);
        let (n, k) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "embedding lookup",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(mat_shape(rows.len(), k), data)?;
        Ok(self.push(
            value,
            Op::GatherParam {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Weighted sum of parameter rows per bag: output row `b` is
    /// `Σ w · table[c]` over `(c, w)` in `bags[b]`. This is a sparse
    /// vector–matrix product with the table as the matrix.
    pub fn bag(&mut self, table: ParamId, bags: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let t = self.params.get(table);
        let (n, k) = (t.rows(), t.cols());
        let mut data = vec![T::zero(); bags.len() * k];
        for (b, bag) in bags.iter().enumerate() {
            let out = &mut data[b * k..(b + 1) * k];
            for &(c, w) in bag {
                if c >= n {
                    return Err(Error::Index {
                        what: "side projection",
                        index: c,
                        len: n,
                    });
                }
                for (o, &x) in out.iter_mut().zip(t.row(c)) {
                    *o += w * x;
                }
            }
        }
        let value = Tensor::new(mat_shape(bags.len(), k), data)?;
        Ok(self.push(value, Op::BagParam { table, bags }))
    }

    /// Row selection from another tape value.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let s = self.value(src);
        let (n, k) = (s.rows(), s.cols());
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "row gather",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(s.row(r));
        }
        let value = Tensor::new(mat_shape(rows.len(), k), data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(mat_shape(m, n), out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Block-diagonal `a · bᵀ`: rows are split into consecutive groups of
    /// `group` rows and each group is multiplied with its own counterpart.
    /// Output is `[(G·group) × group]`.
    pub fn grouped_matmul_nt(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || group == 0 || av.rows() % group != 0 {
            return Err(Error::Shape {
                op: "grouped_matmul_nt",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (rows, d) = (av.rows(), av.cols());
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![T::zero(); rows * group];
        for g0 in (0..rows).step_by(group) {
            for i in 0..group {
                let ar = &ad[(g0 + i) * d..(g0 + i + 1) * d];
                for j in 0..group {
                    let br = &bd[(g0 + j) * d..(g0 + j + 1) * d];
                    out[(g0 + i) * group + j] = dot(ar, br);
                }
            }
        }
        let value = Tensor::new(mat_shape(rows, group), out)?;
        Ok(self.push(value, Op::GroupedMatMulNt { a, b, group }))
    }

    /// Block-diagonal `p · v` with `p` of shape `[(G·group) × group]` and `v`
    /// of shape `[(G·group) × d]`.
    pub fn grouped_matmul(&mut self, p: Var, v: Var, group: usize) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        if group == 0 || pv.cols() != group || pv.rows() != vv.rows() || pv.rows() % group != 0 {
            return Err(Error::Shape {
                op: "grouped_matmul",
                left: pv.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let (rows, d) = (vv.rows(), vv.cols());
        let (pd, vd) = (pv.data(), vv.data());
        let mut out = vec![T::zero(); rows * d];
        for g0 in (0..rows).step_by(group) {
            for i in 0..group {
                let o = &mut out[(g0 + i) * d..(g0 + i + 1) * d];
                for j in 0..group {
                    let w = pd[(g0 + i) * group + j];
                    for (ov, &x) in o.iter_mut().zip(&vd[(g0 + j) * d..(g0 + j + 1) * d]) {
                        *ov += w * x;
                    }
                }
            }
        }
        let value = Tensor::new(mat_shape(rows, d), out)?;
        Ok(self.push(value, Op::GroupedMatMul { a: p, b: v, group }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * c).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Scale(x, c))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(value, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// `x·Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * normal_cdf(v), Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Concatenation of two matrices along rows (`axis = 0`) or columns
    /// (`axis = 1`).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || Error::Shape {
            op: "concat",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        };
        let value = match axis {
            0 => {
                if av.cols() != bv.cols() {
                    return Err(err());
                }
                let mut data = av.data().to_vec();
                data.extend_from_slice(bv.data());
                Tensor::new(mat_shape(av.rows() + bv.rows(), av.cols()), data)?
            }
            1 => {
                if av.rows() != bv.rows() {
                    return Err(err());
                }
                let (ca, cb) = (av.cols(), bv.cols());
                let mut data = Vec::with_capacity(av.len() + bv.len());
                for r in 0..av.rows() {
                    data.extend_from_slice(av.row(r));
                    data.extend_from_slice(bv.row(r));
                }
                Tensor::new(mat_shape(av.rows(), ca + cb), data)?
            }
            _ => return Err(err()),
        };
        Ok(self.push(value, Op::Concat { a, b, axis }))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = (xv.rows(), xv.cols());
        if gv.len() != n || bv.len() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let nf = T::from_usize(n).expect("row length");
        let mut normalized = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let z = (row[c] - mean) * inv;
                normalized[r * n + c] = z;
                out[r * n + c] = gv.data()[c] * z + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. Returns `x` itself when not training or when
    /// `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: T, training: bool, rng: &mut R) -> Var {
        if !training || rate <= T::zero() {
            return x;
        }
        let keep = T::one() - rate;
        let scale = if keep > T::zero() { T::one() / keep } else { T::zero() };
        let keep_p = keep.to_f64_lossy();
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < keep_p {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask })
    }

    /// Sum of squares, as a scalar.
    pub fn l2_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::L2Sq(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Weighted binary cross-entropy summed over elements:
    /// `-Σ w·(y·ln p + (1-y)·ln(1-p))` with `p` clamped to `[lo, hi]`.
    /// Elements outside the clamp range pass no gradient.
    pub fn bce(&mut self, pred: Var, labels: Vec<T>, weights: Vec<T>, lo: T, hi: T) -> Result<Var> {
        let pv = self.value(pred);
        if labels.len() != pv.len() || weights.len() != pv.len() {
            return Err(Error::Shape {
                op: "bce",
                left: pv.shape().to_vec(),
                right: vec![labels.len(), weights.len()],
            });
        }
        let mut loss = T::zero();
        for ((&p, &y), &w) in pv.data().iter().zip(&labels).zip(&weights) {
            if w == T::zero() {
                continue;
            }
            let pc = p.max(lo).min(hi);
            loss -= w * (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                labels,
                weights,
                lo,
                hi,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Vec<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads, &mut pgrads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        pgrads: &mut [Option<Vec<T>>],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let len = self.params.get(*id).len();
                let pg = pgrads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
                for (p, &x) in pg.iter_mut().zip(g) {
                    *p += x;
                }
            }
            Op::GatherParam { table, rows } => {
                let t = self.params.get(*table);
                let k = t.cols();
                let pg = pgrads[table.0].get_or_insert_with(|| vec![T::zero(); t.len()]);
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..k {
                        pg[src * k + c] += g[r * k + c];
                    }
                }
            }
            Op::BagParam { table, bags } => {
                let t = self.params.get(*table);
                let k = t.cols();
                let pg = pgrads[table.0].get_or_insert_with(|| vec![T::zero(); t.len()]);
                for (b, bag) in bags.iter().enumerate() {
                    for &(c, w) in bag {
                        for j in 0..k {
                            pg[c * k + j] += w * g[b * k + j];
                        }
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                let s = val(*src);
                let k = s.cols();
                let sg = slot(grads, *src, s.len());
                for (r, &from) in rows.iter().enumerate() {
                    for c in 0..k {
                        sg[from * k + c] += g[r * k + c];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G · Bᵀ
                {
                    let ga = slot(grads, *a, av.len());
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(&g[i * n..(i + 1) * n], brow);
                        }
                    }
                }
                // dB = Aᵀ · G
                let gb = slot(grads, *b, bv.len());
                for i in 0..m {
                    for p in 0..k {
                        let aip = av.data()[i * k + p];
                        if aip == T::zero() {
                            continue;
                        }
                        for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += aip * x;
                        }
                    }
                }
            }
            Op::GroupedMatMulNt { a, b, group } => {
                let (av, bv) = (val(*a), val(*b));
                let (rows, d, t) = (av.rows(), av.cols(), *group);
                {
                    let ga = slot(grads, *a, av.len());
                    for g0 in (0..rows).step_by(t) {
                        for i in 0..t {
                            for j in 0..t {
                                let w = g[(g0 + i) * t + j];
                                let br = &bv.data()[(g0 + j) * d..(g0 + j + 1) * d];
                                for (o, &x) in ga[(g0 + i) * d..(g0 + i + 1) * d].iter_mut().zip(br) {
                                    *o += w * x;
                                }
                            }
                        }
                    }
                }
                let gb = slot(grads, *b, bv.len());
                for g0 in (0..rows).step_by(t) {
                    for i in 0..t {
                        let ar = &av.data()[(g0 + i) * d..(g0 + i + 1) * d];
                        for j in 0..t {
                            let w = g[(g0 + i) * t + j];
                            for (o, &x) in gb[(g0 + j) * d..(g0 + j + 1) * d].iter_mut().zip(ar) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
            Op::GroupedMatMul { a, b, group } => {
                let (pv, vv) = (val(*a), val(*b));
                let (rows, d, t) = (vv.rows(), vv.cols(), *group);
                {
                    let gp = slot(grads, *a, pv.len());
                    for g0 in (0..rows).step_by(t) {
                        for i in 0..t {
                            let gr = &g[(g0 + i) * d..(g0 + i + 1) * d];
                            for j in 0..t {
                                gp[(g0 + i) * t + j] += dot(gr, &vv.data()[(g0 + j) * d..(g0 + j + 1) * d]);
                            }
                        }
                    }
                }
                let gv = slot(grads, *b, vv.len());
                for g0 in (0..rows).step_by(t) {
                    for i in 0..t {
                        let gr = &g[(g0 + i) * d..(g0 + i + 1) * d];
                        for j in 0..t {
                            let w = pv.data()[(g0 + i) * t + j];
                            for (o, &x) in gv[(g0 + j) * d..(g0 + j + 1) * d].iter_mut().zip(gr) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let s = slot(grads, v, g.len());
                    for (o, &x) in s.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                {
                    let s = slot(grads, *x, g.len());
                    for (o, &v) in s.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                let c = val(*bias).len();
                let s = slot(grads, *bias, c);
                for (i, &v) in g.iter().enumerate() {
                    s[i % c] += v;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                {
                    let s = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                let s = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * av[i];
                }
            }
            Op::Scale(x, c) => {
                let s = slot(grads, *x, g.len());
                for (o, &v) in s.iter_mut().zip(g) {
                    *o += *c * v;
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let s = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let s = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        s[i] += g[i];
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let s = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let v = xv[i];
                    s[i] += g[i] * (normal_cdf(v) + v * normal_pdf(v));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let s = slot(grads, *x, g.len());
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let inner = dot(yr, gr);
                    for c in 0..n {
                        s[r * n + c] += yr[c] * (gr[c] - inner);
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (av, bv) = (val(*a), val(*b));
                if *axis == 0 {
                    let split = av.len();
                    let s = slot(grads, *a, split);
                    for (o, &v) in s.iter_mut().zip(&g[..split]) {
                        *o += v;
                    }
                    let s = slot(grads, *b, bv.len());
                    for (o, &v) in s.iter_mut().zip(&g[split..]) {
                        *o += v;
                    }
                } else {
                    let (ca, cb) = (av.cols(), bv.cols());
                    let w = ca + cb;
                    {
                        let s = slot(grads, *a, av.len());
                        for r in 0..av.rows() {
                            for c in 0..ca {
                                s[r * ca + c] += g[r * w + c];
                            }
                        }
                    }
                    let s = slot(grads, *b, bv.len());
                    for r in 0..bv.rows() {
                        for c in 0..cb {
                            s[r * cb + c] += g[r * w + ca + c];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let (m, n) = (node.value.rows(), node.value.cols());
                let nf = T::from_usize(n).expect("row length");
                {
                    let s = slot(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            s[c] += g[r * n + c] * normalized[r * n + c];
                        }
                    }
                }
                {
                    let s = slot(grads, *bias, n);
                    for r in 0..m {
                        for c in 0..n {
                            s[c] += g[r * n + c];
                        }
                    }
                }
                let s = slot(grads, *x, m * n);
                let mut gz = vec![T::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        gz[c] = g[r * n + c] * gv[c];
                    }
                    let z = &normalized[r * n..(r + 1) * n];
                    let sum_g = gz.iter().copied().sum::<T>();
                    let sum_gz = dot(&gz, z);
                    for c in 0..n {
                        s[r * n + c] += inv_std[r] / nf * (nf * gz[c] - sum_g - z[c] * sum_gz);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let s = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * mask[i];
                }
            }
            Op::L2Sq(x) => {
                let xv = val(*x).data();
                let two = T::one() + T::one();
                let s = slot(grads, *x, xv.len());
                for i in 0..xv.len() {
                    s[i] += two * xv[i] * g[0];
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                let s = slot(grads, *x, n);
                for o in s.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Bce {
                pred,
                labels,
                weights,
                lo,
                hi,
            } => {
                let pv = val(*pred).data();
                let s = slot(grads, *pred, pv.len());
                for i in 0..pv.len() {
                    let (p, y, w) = (pv[i], labels[i], weights[i]);
                    if w == T::zero() || p < *lo || p > *hi {
                        continue;
                    }
                    s[i] -= g[0] * w * (y / p - (T::one() - y) / (T::one() - p));
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (ov, &bv) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *ov += aip * bv;
            }
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
