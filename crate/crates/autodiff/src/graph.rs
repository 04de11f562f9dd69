//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes whose
//! inputs are all constants store no backward closure, so a graph built only
//! from constants doubles as a plain forward evaluator.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::scalar::{gemm, lit, Scalar};
use crate::tensor::Tensor;

/// Backward closure: `(output id, output gradient, all node values, gradient sink)`.
pub type BackwardFn<T> = Box<dyn Fn(usize, &Tensor<T>, &[Rc<Tensor<T>>], &mut Grads<T>)>;

struct Inner<T: Scalar> {
    values: Vec<Rc<Tensor<T>>>,
    requires: Vec<bool>,
    backward: Vec<Option<BackwardFn<T>>>,
    params: Vec<(String, usize)>,
}

pub struct Graph<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradient accumulation buffer handed to backward closures.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
}

impl<T: Scalar> Grads<T> {
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Mutable gradient buffer of node `id`, zero-initialised on first use.
    pub fn slot(&mut self, id: usize, values: &[Rc<Tensor<T>>]) -> &mut [T] {
        self.slots[id]
            .get_or_insert_with(|| Tensor::zeros(values[id].shape().to_vec()))
            .data_mut()
    }

    pub fn accumulate(&mut self, id: usize, grad: Tensor<T>) {
        match &mut self.slots[id] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
    params: Vec<(String, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss.
    pub fn of(&self, var: Var<'_, T>) -> Tensor<T> {
        self.slots[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }

    /// Gradients of every named parameter registered with [`Graph::param`].
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = self.slots[*id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shapes[*id].clone()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                requires: Vec::new(),
                backward: Vec::new(),
                params: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor<T>, requires: bool, backward: Option<BackwardFn<T>>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(Rc::new(value));
        inner.requires.push(requires);
        inner.backward.push(if requires { backward } else { None });
        Var { graph: self, id }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, false, None)
    }

    /// Differentiable leaf without a name (e.g. an input under a gradient check).
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, true, None)
    }

    /// Named trainable leaf; its gradient is reported by [`Gradients::params`].
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var<'_, T> {
        let v = self.push_node(value, true, None);
        self.inner.borrow_mut().params.push((name.to_string(), v.id));
        v
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// The backward closure is dropped when none of `parents` requires a
    /// gradient.
    pub fn custom<'g>(
        &'g self,
        parents: &[Var<'g, T>],
        value: Tensor<T>,
        backward: impl Fn(usize, &Tensor<T>, &[Rc<Tensor<T>>], &mut Grads<T>) + 'static,
    ) -> Var<'g, T> {
        let requires = {
            let inner = self.inner.borrow();
            parents.iter().any(|p| inner.requires[p.id])
        };
        self.push_node(value, requires, Some(Box::new(backward)))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let inner = self.inner.borrow();
        assert_eq!(inner.values[loss.id].len(), 1, "backward needs a scalar loss");
        let n = inner.values.len();
        let mut grads = Grads { slots: vec![None; n], requires: inner.requires.clone() };
        grads.slots[loss.id] = Some(Tensor::full(inner.values[loss.id].shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(back) = &inner.backward[id] else { continue };
            let Some(g) = grads.slots[id].take() else { continue };
            back(id, &g, &inner.values, &mut grads);
        }
        Gradients {
            slots: grads.slots,
            params: inner.params.clone(),
            shapes: inner.values.iter().map(|v| v.shape().to_vec()).collect(),
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.inner.borrow().values[self.id].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().requires[self.id]
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    fn check_same(&self, other: &Var<'g, T>, op: &str) {
        assert!(std::ptr::eq(self.graph, other.graph), "{op}: operands from different graphs");
        assert_eq!(self.shape(), other.shape(), "{op}: shape mismatch");
    }

    pub fn add(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_same(&other, "add");
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        let (a, b) = (self.id, other.id);
        self.graph.custom(&[*self, other], value, move |_, g, _, grads| {
            for id in [a, b] {
                if grads.wants(id) {
                    grads.accumulate(id, g.clone());
                }
            }
        })
    }

    pub fn sub(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_same(&other, "sub");
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        let (a, b) = (self.id, other.id);
        self.graph.custom(&[*self, other], value, move |_, g, _, grads| {
            if grads.wants(a) {
                grads.accumulate(a, g.clone());
            }
            if grads.wants(b) {
                grads.accumulate(b, g.map(|v| -v));
            }
        })
    }

    pub fn mul(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_same(&other, "mul");
        let value = self.value().zip_map(&other.value(), |a, b| a * b);
        let (a, b) = (self.id, other.id);
        self.graph.custom(&[*self, other], value, move |_, g, vals, grads| {
            if grads.wants(a) {
                grads.accumulate(a, g.zip_map(&vals[b], |g, y| g * y));
            }
            if grads.wants(b) {
                grads.accumulate(b, g.zip_map(&vals[a], |g, x| g * x));
            }
        })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, mask: Rc<Tensor<T>>) -> Var<'g, T> {
        let value = self.value().zip_map(&mask, |a, m| a * m);
        let a = self.id;
        self.graph.custom(&[*self], value, move |_, g, _, grads| {
            grads.accumulate(a, g.zip_map(&mask, |g, m| g * m));
        })
    }

    pub fn scale(&self, factor: T) -> Var<'g, T> {
        let a = self.id;
        self.graph.custom(&[*self], self.value().map(|v| v * factor), move |_, g, _, grads| {
            grads.accumulate(a, g.map(|v| v * factor));
        })
    }

    pub fn add_scalar(&self, offset: T) -> Var<'g, T> {
        let a = self.id;
        self.graph.custom(&[*self], self.value().map(|v| v + offset), move |_, g, _, grads| {
            grads.accumulate(a, g.clone());
        })
    }

    /// Adds a vector to every row (last axis) of `self`.
    pub fn add_row(&self, bias: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let bv = bias.value();
        let cols = x.cols();
        assert_eq!(bv.len(), cols, "add_row: bias length {} vs {} columns", bv.len(), cols);
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let (a, b) = (self.id, bias.id);
        self.graph.custom(&[*self, bias], out, move |_, g, vals, grads| {
            if grads.wants(a) {
                grads.accumulate(a, g.clone());
            }
            if grads.wants(b) {
                let slot = grads.slot(b, vals);
                for row in g.data().chunks(cols) {
                    for (s, &v) in slot.iter_mut().zip(row) {
                        *s += v;
                    }
                }
            }
        })
    }

    /// `[n×k] · [k×m]`.
    pub fn matmul(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        let (xa, xb) = (self.value(), rhs.value());
        assert_eq!(xa.shape().len(), 2, "matmul lhs must be 2-D, got {:?}", xa.shape());
        assert_eq!(xb.shape().len(), 2, "matmul rhs must be 2-D, got {:?}", xb.shape());
        let (n, k, m) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
        assert_eq!(xb.shape()[0], k, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros([n, m]);
        gemm(n, k, m, xa.data(), false, xb.data(), false, out.data_mut(), false);
        let (a, b) = (self.id, rhs.id);
        self.graph.custom(&[*self, rhs], out, move |_, g, vals, grads| {
            if grads.wants(a) {
                let bv = vals[b].clone();
                gemm(n, m, k, g.data(), false, bv.data(), true, grads.slot(a, vals), true);
            }
            if grads.wants(b) {
                let av = vals[a].clone();
                gemm(k, n, m, av.data(), true, g.data(), false, grads.slot(b, vals), true);
            }
        })
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    pub fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let value = self.value().map(f);
        let a = self.id;
        self.graph.custom(&[*self], value, move |out, g, vals, grads| {
            let x = &vals[a];
            let y = &vals[out];
            let slot = grads.slot(a, vals);
            for (((s, &gv), &xv), &yv) in slot.iter_mut().zip(g.data()).zip(x.data()).zip(y.data()) {
                *s += gv * df(xv, yv);
            }
        })
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'g, T> {
        self.unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn softplus(&self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn sin(&self) -> Var<'g, T> {
        self.unary(|x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&self) -> Var<'g, T> {
        self.unary(|x| x.cos(), |x, _| -x.sin())
    }

    pub fn square(&self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(|x| x.abs(), |x, _| if x < T::zero() { -T::one() } else { T::one() })
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// `max(log σ(x), log floor)`; the clamp keeps the logistic log-likelihood finite.
    pub fn log_sigmoid_clamped(&self, floor: T) -> Var<'g, T> {
        let log_floor = floor.ln();
        self.unary(
            move |x| (-softplus(-x)).max(log_floor),
            move |x, y| if y <= log_floor { T::zero() } else { T::one() - sigmoid(x) },
        )
    }

    pub fn sum(&self) -> Var<'g, T> {
        let value = Tensor::scalar(self.value().sum());
        let a = self.id;
        self.graph.custom(&[*self], value, move |_, g, vals, grads| {
            let gv = g.item();
            grads.slot(a, vals).iter_mut().for_each(|s| *s += gv);
        })
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.value().len();
        let inv = T::one() / lit::<T>(n as f64);
        let value = Tensor::scalar(self.value().sum() * inv);
        let a = self.id;
        self.graph.custom(&[*self], value, move |_, g, vals, grads| {
            let gv = g.item() * inv;
            grads.slot(a, vals).iter_mut().for_each(|s| *s += gv);
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'g, T> {
        let value = (*self.value()).clone().reshaped(shape).expect("reshape preserves size");
        let a = self.id;
        self.graph.custom(&[*self], value, move |_, g, vals, grads| {
            let slot = grads.slot(a, vals);
            for (s, &v) in slot.iter_mut().zip(g.data()) {
                *s += v;
            }
        })
    }

    /// Column range `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'g, T> {
        let x = self.value();
        let cols = x.cols();
        assert!(start <= end && end <= cols, "slice_cols {start}..{end} of {cols}");
        let rows = x.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for row in x.data().chunks(cols) {
            data.extend_from_slice(&row[start..end]);
        }
        let a = self.id;
        self.graph.custom(&[*self], Tensor::from_parts([rows, w], data), move |_, g, vals, grads| {
            let slot = grads.slot(a, vals);
            for (srow, grow) in slot.chunks_mut(cols).zip(g.data().chunks(w)) {
                for (s, &v) in srow[start..end].iter_mut().zip(grow) {
                    *s += v;
                }
            }
        })
    }

    /// Rows `[start, end)` of a tensor viewed as `rows × cols`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'g, T> {
        let x = self.value();
        let cols = x.cols();
        assert!(start <= end && end <= x.rows(), "slice_rows {start}..{end} of {}", x.rows());
        let data = x.data()[start * cols..end * cols].to_vec();
        let a = self.id;
        self.graph.custom(&[*self], Tensor::from_parts([end - start, cols], data), move |_, g, vals, grads| {
            let slot = grads.slot(a, vals);
            for (s, &v) in slot[start * cols..end * cols].iter_mut().zip(g.data()) {
                *s += v;
            }
        })
    }

    /// Flat gather: `out[i] = self[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, indices: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Var<'g, T> {
        let x = self.value();
        let data: Vec<T> = indices.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_parts(shape, data);
        let a = self.id;
        self.graph.custom(&[*self], value, move |_, g, vals, grads| {
            let slot = grads.slot(a, vals);
            for (&i, &v) in indices.iter().zip(g.data()) {
                slot[i] += v;
            }
        })
    }

    /// Row gather on a 2-D tensor: `out[i, :] = self[indices[i], :]`.
    pub fn gather_rows(&self, indices: Rc<[usize]>) -> Var<'g, T> {
        let x = self.value();
        let cols = x.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices.iter() {
            data.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_parts([indices.len(), cols], data);
        let a = self.id;
        self.graph.custom(&[*self], value, move |_, g, vals, grads| {
            let slot = grads.slot(a, vals);
            for (i, &r) in indices.iter().enumerate() {
                for (s, &v) in slot[r * cols..(r + 1) * cols].iter_mut().zip(&g.data()[i * cols..(i + 1) * cols]) {
                    *s += v;
                }
            }
        })
    }

    /// Applies a fixed sparse linear map (resampling, pooling).
    pub fn sparse_linear(&self, map: Rc<SparseMap<T>>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.len(), map.input_len, "sparse_linear input length");
        let data: Vec<T> = map
            .rows
            .iter()
            .map(|row| row.iter().fold(T::zero(), |acc, &(j, w)| acc + w * x.data()[j]))
            .collect();
        let value = Tensor::from_parts(map.output_shape.clone(), data);
        let a = self.id;
        self.graph.custom(&[*self], value, move |_, g, vals, grads| {
            let slot = grads.slot(a, vals);
            for (row, &gv) in map.rows.iter().zip(g.data()) {
                for &(j, w) in row {
                    slot[j] += w * gv;
                }
            }
        })
    }
}

/// Concatenates 2-D tensors with equal row counts along columns.
pub fn concat_cols<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let graph = parts[0].graph;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].rows();
    let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
    for v in &values {
        assert_eq!(v.rows(), rows, "concat_cols row mismatch");
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    graph.custom(parts, Tensor::from_parts([rows, total], data), move |_, g, vals, grads| {
        let mut offset = 0;
        for (&id, &w) in ids.iter().zip(&widths) {
            if grads.wants(id) {
                let slot = grads.slot(id, vals);
                for r in 0..rows {
                    for c in 0..w {
                        slot[r * w + c] += g.data()[r * total + offset + c];
                    }
                }
            }
            offset += w;
        }
    })
}

/// Concatenates tensors along their leading axis (all other axes equal).
pub fn concat_rows<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let graph = parts[0].graph;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let tail = values[0].shape()[1..].to_vec();
    let mut lead = 0;
    let mut data = Vec::new();
    for v in &values {
        assert_eq!(&v.shape()[1..], &tail[..], "concat_rows trailing shape mismatch");
        lead += v.shape()[0];
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(&tail);
    let spans: Vec<(usize, usize)> = {
        let mut start = 0;
        values
            .iter()
            .map(|v| {
                let s = (start, v.len());
                start += v.len();
                s
            })
            .collect()
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    graph.custom(parts, Tensor::from_parts(shape, data), move |_, g, vals, grads| {
        for (&id, &(start, len)) in ids.iter().zip(&spans) {
            if grads.wants(id) {
                let slot = grads.slot(id, vals);
                for (s, &v) in slot.iter_mut().zip(&g.data()[start..start + len]) {
                    *s += v;
                }
            }
        }
    })
}

/// Fixed sparse linear map `out[i] = Σ w_ij · in[j]`.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    pub rows: Vec<Vec<(usize, T)>>,
    pub input_len: usize,
    pub output_shape: Vec<usize>,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
