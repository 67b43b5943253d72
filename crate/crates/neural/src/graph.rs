//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every forward op appends a node holding its output value and enough saved
//! state to compute vector-Jacobian products. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid reverse topological
//! order because an op can only consume nodes created before it.

use std::cell::{Ref, RefCell};

use rand::Rng;

use crate::error::{NeuralError, Result};
use crate::kernels;
use crate::scalar::{MatRef, Scalar};
use crate::tensor::{numel, Tensor};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddSuffix {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        geom: kernels::ConvGeometry,
    },
    MeanAxis {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    SumAll {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    RelBias {
        table: usize,
        len: usize,
        max_offset: usize,
    },
    L2Normalize {
        a: usize,
        norms: Vec<T>,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass. Create a fresh tape per pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<T>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable input: gradients are retained for it after `backward`.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient of the last `backward` call(s) with respect to a leaf created
    /// with [`Tape::param`]. Repeated `backward` calls add up.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.leaf_grads.borrow().get(var.id).cloned().flatten()
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(NeuralError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(NeuralError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, input_grad) in vjp(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&input_grad),
                    slot => *slot = Some(input_grad),
                }
            }
        }
        Ok(())
    }
}

fn vjp<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |id: usize| &nodes[id].value;
    let need = |id: usize| nodes[id].requires_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let mut out = Vec::new();
            if need(*a) {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(
                    MatRef::new(gd, m, n),
                    MatRef::new(val(*b).data(), k, n).t(),
                    T::zero(),
                    &mut ga,
                );
                out.push((*a, Tensor::from_parts(val(*a).shape().to_vec(), ga)));
            }
            if need(*b) {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(
                    MatRef::new(val(*a).data(), m, k).t(),
                    MatRef::new(gd, m, n),
                    T::zero(),
                    &mut gb,
                );
                out.push((*b, Tensor::from_parts(val(*b).shape().to_vec(), gb)));
            }
            out
        }
        Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let ad = val(*a).data();
            let bd = val(*b).data();
            let mut out = Vec::new();
            if need(*a) {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..*batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let bref = if *trans_b {
                        MatRef::new(bi, n, k)
                    } else {
                        MatRef::new(bi, k, n).t()
                    };
                    T::gemm(
                        MatRef::new(gi, m, n),
                        bref,
                        T::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                out.push((*a, Tensor::from_parts(val(*a).shape().to_vec(), ga)));
            }
            if need(*b) {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..*batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // c = a·bᵀ  =>  d(b) = gᵀ·a, shape [n, k]
                        T::gemm(MatRef::new(gi, m, n).t(), MatRef::new(ai, m, k), T::zero(), dst);
                    } else {
                        T::gemm(MatRef::new(ai, m, k).t(), MatRef::new(gi, m, n), T::zero(), dst);
                    }
                }
                out.push((*b, Tensor::from_parts(val(*b).shape().to_vec(), gb)));
            }
            out
        }
        Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
        Op::AddSuffix { a, b } => {
            let mut out = vec![(*a, g.clone())];
            if need(*b) {
                let bn = val(*b).numel();
                let mut gb = vec![T::zero(); bn];
                for chunk in gd.chunks_exact(bn) {
                    for (acc, &v) in gb.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                out.push((*b, Tensor::from_parts(val(*b).shape().to_vec(), gb)));
            }
            out
        }
        Op::Mul { a, b } => {
            let ad = val(*a).data();
            let bd = val(*b).data();
            let ga = gd.iter().zip(bd).map(|(&g, &b)| g * b).collect();
            let gb = gd.iter().zip(ad).map(|(&g, &a)| g * a).collect();
            vec![
                (*a, Tensor::from_parts(g.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(g.shape().to_vec(), gb)),
            ]
        }
        Op::Scale { a, factor } => {
            let ga = gd.iter().map(|&v| v * *factor).collect();
            vec![(*a, Tensor::from_parts(g.shape().to_vec(), ga))]
        }
        Op::Reshape { a } => vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), gd.to_vec()))],
        Op::Permute { a, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (shape, data) = kernels::permute(g.shape(), gd, &inverse);
            vec![(*a, Tensor::from_parts(shape, data))]
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let cols = *node.value.shape().last().unwrap();
            let gx = kernels::softmax_backward(y, gd, cols);
            vec![(*a, Tensor::from_parts(g.shape().to_vec(), gx))]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = val(*gamma).data();
            let d = gam.len();
            let (gx, ggamma, gbeta) = kernels::layer_norm_backward(gd, xhat, rstd, gam, d);
            vec![
                (*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)),
                (*gamma, Tensor::from_parts(vec![d], ggamma)),
                (*beta, Tensor::from_parts(vec![d], gbeta)),
            ]
        }
        Op::Gelu { a } => {
            let xd = val(*a).data();
            let gx = xd
                .iter()
                .zip(gd)
                .map(|(&x, &g)| g * kernels::gelu_grad(x))
                .collect();
            vec![(*a, Tensor::from_parts(g.shape().to_vec(), gx))]
        }
        Op::Relu { a } => {
            let xd = val(*a).data();
            let gx = xd
                .iter()
                .zip(gd)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            vec![(*a, Tensor::from_parts(g.shape().to_vec(), gx))]
        }
        Op::Conv1d { x, w, geom } => {
            let (gx, gw) = kernels::conv1d_backward(
                val(*x).data(),
                val(*w).data(),
                gd,
                geom,
                need(*x),
                need(*w),
            );
            let mut out = Vec::new();
            if let Some(gx) = gx {
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)));
            }
            if let Some(gw) = gw {
                out.push((*w, Tensor::from_parts(val(*w).shape().to_vec(), gw)));
            }
            out
        }
        Op::MeanAxis {
            a,
            outer,
            axis_len,
            inner,
        } => {
            let scale = T::one() / T::from_usize(*axis_len).unwrap();
            let mut ga = vec![T::zero(); outer * axis_len * inner];
            for o in 0..*outer {
                for r in 0..*axis_len {
                    for i in 0..*inner {
                        ga[(o * axis_len + r) * inner + i] = gd[o * inner + i] * scale;
                    }
                }
            }
            vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), ga))]
        }
        Op::SumAll { a } => {
            vec![(*a, Tensor::full(val(*a).shape(), gd[0]))]
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            let batch = labels.len();
            let scale = gd[0] / T::from_usize(batch).unwrap();
            let mut gl = probs.clone();
            for (row, &label) in labels.iter().enumerate() {
                gl[row * classes + label] -= T::one();
            }
            gl.iter_mut().for_each(|v| *v *= scale);
            vec![(*logits, Tensor::from_parts(val(*logits).shape().to_vec(), gl))]
        }
        Op::RelBias {
            table,
            len,
            max_offset,
        } => {
            let width = 2 * max_offset + 1;
            let heads = val(*table).shape()[0];
            let mut gt = vec![T::zero(); heads * width];
            for h in 0..heads {
                for i in 0..*len {
                    for j in 0..*len {
                        let idx = kernels::rel_index(i, j, *max_offset);
                        gt[h * width + idx] += gd[(h * len + i) * len + j];
                    }
                }
            }
            vec![(*table, Tensor::from_parts(vec![heads, width], gt))]
        }
        Op::L2Normalize { a, norms } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            let mut gx = vec![T::zero(); y.len()];
            for (row, &norm) in norms.iter().enumerate() {
                let ys = &y[row * d..(row + 1) * d];
                let gs = &gd[row * d..(row + 1) * d];
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for c in 0..d {
                    gx[row * d + c] = (gs[c] - ys[c] * dot) / norm;
                }
            }
            vec![(*a, Tensor::from_parts(g.shape().to_vec(), gx))]
        }
        Op::Dropout { a, mask } => {
            let gx = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
            vec![(*a, Tensor::from_parts(g.shape().to_vec(), gx))]
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn rg(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading dimensions are flattened into rows.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (shape, data, m, k, n) = {
            let a = self.value();
            let b = rhs.value();
            if b.ndim() != 2 || a.ndim() < 1 {
                return Err(NeuralError::Shape(format!(
                    "matmul expects [.., k] x [k, n], got {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let k = *a.shape().last().unwrap();
            if b.shape()[0] != k {
                return Err(NeuralError::Shape(format!(
                    "matmul inner dims differ: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let n = b.shape()[1];
            let m = a.numel() / k;
            let mut c = vec![T::zero(); m * n];
            T::gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), T::zero(), &mut c);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            (shape, c, m, k, n)
        };
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Batched product `[b, m, k] · [b, k, n]`, or `[b, m, k] · [b, n, k]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(self, rhs: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (batch, m, k, n, data) = {
            let a = self.value();
            let b = rhs.value();
            if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
                return Err(NeuralError::Shape(format!(
                    "bmm expects matching 3-D operands, got {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (kb, n) = if trans_b {
                (b.shape()[2], b.shape()[1])
            } else {
                (b.shape()[1], b.shape()[2])
            };
            if kb != k {
                return Err(NeuralError::Shape(format!(
                    "bmm inner dims differ: {:?} x {:?} (trans_b={trans_b})",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut c = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let bref = if trans_b {
                    MatRef::new(bi, n, k).t()
                } else {
                    MatRef::new(bi, k, n)
                };
                T::gemm(MatRef::new(ai, m, k), bref, T::zero(), &mut c[i * m * n..(i + 1) * m * n]);
            }
            (batch, m, k, n, c)
        };
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(
            Tensor::from_parts(vec![batch, m, n], data),
            Op::BatchMatMul {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let value = {
            let a = self.value();
            let b = rhs.value();
            if a.shape() != b.shape() {
                return Err(NeuralError::Shape(format!(
                    "add needs equal shapes, got {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(value, Op::Add { a: self.id, b: rhs.id }, rg))
    }

    /// Adds `rhs` to every trailing block of `self`; `rhs.shape` must be a
    /// suffix of `self.shape` (bias rows, position tables).
    pub fn add_suffix(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let value = {
            let a = self.value();
            let b = rhs.value();
            let (ash, bsh) = (a.shape(), b.shape());
            if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
                return Err(NeuralError::Shape(format!(
                    "{bsh:?} is not a suffix of {ash:?}"
                )));
            }
            let mut data = a.data().to_vec();
            for chunk in data.chunks_exact_mut(b.numel()) {
                for (x, &y) in chunk.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::from_parts(ash.to_vec(), data)
        };
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(value, Op::AddSuffix { a: self.id, b: rhs.id }, rg))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let value = {
            let a = self.value();
            let b = rhs.value();
            if a.shape() != b.shape() {
                return Err(NeuralError::Shape(format!(
                    "mul needs equal shapes, got {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(value, Op::Mul { a: self.id, b: rhs.id }, rg))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let value = {
            let a = self.value();
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().map(|&x| x * factor).collect(),
            )
        };
        let rg = self.rg();
        self.tape.push(value, Op::Scale { a: self.id, factor }, rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.to_tensor().reshape(shape)?;
        let rg = self.rg();
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let mut seen = vec![false; a.ndim()];
            if perm.len() != a.ndim() || perm.iter().any(|&p| p >= a.ndim() || std::mem::replace(&mut seen[p], true)) {
                return Err(NeuralError::Shape(format!(
                    "invalid permutation {perm:?} for shape {:?}",
                    a.shape()
                )));
            }
            let (shape, data) = kernels::permute(a.shape(), a.data(), perm);
            Tensor::from_parts(shape, data)
        };
        let rg = self.rg();
        Ok(self.tape.push(
            value,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t, T> {
        let value = {
            let a = self.value();
            let cols = *a.shape().last().unwrap();
            Tensor::from_parts(a.shape().to_vec(), kernels::softmax_rows(a.data(), cols))
        };
        let rg = self.rg();
        self.tape.push(value, Op::Softmax { a: self.id }, rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (value, xhat, rstd) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let d = *x.shape().last().unwrap();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(NeuralError::Shape(format!(
                    "layer_norm affine params must be [{d}], got {:?} / {:?}",
                    g.shape(),
                    b.shape()
                )));
            }
            let (y, xhat, rstd) = kernels::layer_norm(x.data(), g.data(), b.data(), d, eps);
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, rstd)
        };
        let rg = self.rg() || gamma.rg() || beta.rg();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(self) -> Var<'t, T> {
        let value = {
            let a = self.value();
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().map(|&x| kernels::gelu(x)).collect(),
            )
        };
        let rg = self.rg();
        self.tape.push(value, Op::Gelu { a: self.id }, rg)
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = {
            let a = self.value();
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().map(|&x| x.max(T::zero())).collect(),
            )
        };
        let rg = self.rg();
        self.tape.push(value, Op::Relu { a: self.id }, rg)
    }

    /// Cross-correlation of `self` (`[c_in, T]` or `[batch, c_in, T]`) with
    /// `kernels` (`[c_out, c_in, P]`). Output length is `(T - P) / stride + 1`.
    pub fn conv1d(self, kernels_var: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        self.same_tape(&kernels_var);
        let (shape, data, geom) = {
            let x = self.value();
            let w = kernels_var.value();
            let (batch, c_in, t_in) = match *x.shape() {
                [c, t] => (1, c, t),
                [b, c, t] => (b, c, t),
                _ => {
                    return Err(NeuralError::Shape(format!(
                        "conv1d input must be 2-D or 3-D, got {:?}",
                        x.shape()
                    )))
                }
            };
            let [c_out, wc_in, p] = *w.shape() else {
                return Err(NeuralError::Shape(format!(
                    "conv1d kernels must be [c_out, c_in, P], got {:?}",
                    w.shape()
                )));
            };
            if wc_in != c_in {
                return Err(NeuralError::Shape(format!(
                    "conv1d channel mismatch: input has {c_in}, kernels expect {wc_in}"
                )));
            }
            if stride == 0 {
                return Err(NeuralError::InvalidArgument("conv1d stride must be >= 1".into()));
            }
            if p > t_in {
                return Err(NeuralError::Shape(format!(
                    "conv1d kernel length {p} exceeds input length {t_in}"
                )));
            }
            let geom = kernels::ConvGeometry {
                batch,
                c_in,
                t_in,
                c_out,
                kernel: p,
                stride,
                t_out: (t_in - p) / stride + 1,
            };
            let data = kernels::conv1d(x.data(), w.data(), &geom);
            let shape = if x.ndim() == 2 {
                vec![c_out, geom.t_out]
            } else {
                vec![batch, c_out, geom.t_out]
            };
            (shape, data, geom)
        };
        let rg = self.rg() || kernels_var.rg();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Conv1d {
                x: self.id,
                w: kernels_var.id,
                geom,
            },
            rg,
        ))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let (value, outer, axis_len, inner) = {
            let a = self.value();
            if axis >= a.ndim() {
                return Err(NeuralError::Shape(format!(
                    "axis {axis} out of range for {:?}",
                    a.shape()
                )));
            }
            let outer: usize = a.shape()[..axis].iter().product();
            let axis_len = a.shape()[axis];
            let inner: usize = a.shape()[axis + 1..].iter().product();
            let mut acc = vec![0.0f64; outer * inner];
            for o in 0..outer {
                for r in 0..axis_len {
                    for i in 0..inner {
                        acc[o * inner + i] += a.data()[(o * axis_len + r) * inner + i].as_f64();
                    }
                }
            }
            let data = acc
                .into_iter()
                .map(|s| T::from_f64_lossy(s / axis_len as f64))
                .collect();
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (Tensor::from_parts(shape, data), outer, axis_len, inner)
        };
        let rg = self.rg();
        Ok(self.tape.push(
            value,
            Op::MeanAxis {
                a: self.id,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(T::from_f64_lossy(self.value().sum_f64()));
        let rg = self.rg();
        self.tape.push(value, Op::SumAll { a: self.id }, rg)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let (value, probs, classes) = {
            let l = self.value();
            let [batch, classes] = *l.shape() else {
                return Err(NeuralError::Shape(format!(
                    "cross_entropy expects [batch, classes], got {:?}",
                    l.shape()
                )));
            };
            if labels.len() != batch {
                return Err(NeuralError::Shape(format!(
                    "{} labels for batch of {batch}",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(NeuralError::InvalidArgument(format!(
                    "label {bad} outside [0, {classes})"
                )));
            }
            let (loss, probs) = kernels::cross_entropy(l.data(), labels, classes);
            (Tensor::scalar(T::from_f64_lossy(loss)), probs, classes)
        };
        let rg = self.rg();
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
                classes,
            },
            rg,
        ))
    }

    /// Expands a `[heads, 2*max_offset + 1]` table into `[heads, len, len]`
    /// additive attention biases indexed by clipped `j - i`.
    pub fn rel_bias(self, len: usize, max_offset: usize) -> Result<Var<'t, T>> {
        let value = {
            let t = self.value();
            let width = 2 * max_offset + 1;
            let [heads, w] = *t.shape() else {
                return Err(NeuralError::Shape(format!(
                    "relative bias table must be 2-D, got {:?}",
                    t.shape()
                )));
            };
            if w != width {
                return Err(NeuralError::Shape(format!(
                    "relative bias table width {w} != 2*{max_offset}+1"
                )));
            }
            let mut data = Vec::with_capacity(heads * len * len);
            for h in 0..heads {
                for i in 0..len {
                    for j in 0..len {
                        data.push(t.data()[h * width + kernels::rel_index(i, j, max_offset)]);
                    }
                }
            }
            Tensor::from_parts(vec![heads, len, len], data)
        };
        let rg = self.rg();
        Ok(self.tape.push(
            value,
            Op::RelBias {
                table: self.id,
                len,
                max_offset,
            },
            rg,
        ))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(self) -> Var<'t, T> {
        let (value, norms) = {
            let a = self.value();
            let d = *a.shape().last().unwrap();
            let mut data = a.data().to_vec();
            let mut norms = Vec::with_capacity(a.numel() / d);
            for row in data.chunks_exact_mut(d) {
                let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(1e-12);
                let n = T::from_f64_lossy(n);
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            (Tensor::from_parts(a.shape().to_vec(), data), norms)
        };
        let rg = self.rg();
        self.tape.push(value, Op::L2Normalize { a: self.id, norms }, rg)
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Var<'t, T> {
        if p <= 0.0 {
            return self;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let (value, mask) = {
            let a = self.value();
            let mask: Vec<T> = (0..a.numel())
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect();
            let data = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Tensor::from_parts(a.shape().to_vec(), data), mask)
        };
        let rg = self.rg();
        self.tape.push(value, Op::Dropout { a: self.id, mask }, rg)
    }
}

/// Element count helper exposed for shape arithmetic in callers.
pub fn shape_numel(shape: &[usize]) -> usize {
    numel(shape)
}
