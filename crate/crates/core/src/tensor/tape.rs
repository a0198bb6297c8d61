use super::kernels::{self, NormCache};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        padding: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
        batch_stats: bool,
    },
    Softmax(Var, usize),
    Silu(Var),
    Gelu(Var),
    Bmm(Var, Var),
    MeanAxis(Var, usize),
    Sum(Var),
    SumSquares(Var),
    SoftCrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        targets: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Bmm(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Softmax(a, _)
            | Op::Silu(a)
            | Op::Gelu(a)
            | Op::MeanAxis(a, _)
            | Op::Sum(a)
            | Op::SumSquares(a) => vec![*a],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive ops for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it
/// and a reverse sweep is a valid topological traversal.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by tape variable.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; `None` when `v` is not upstream of the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, or exact zeros when it is disconnected from the loss.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients flow to it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec())))
    }

    /// `x W^T + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), padding)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, padding }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, cache) = kernels::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, cache }))
    }

    /// Batch normalization of `[B, C, H, W]` with statistics of the current batch.
    /// Returns the output plus the batch mean and unbiased variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = self.value(x);
        let stats = kernels::batch_stats(xv)?;
        let (out, cache) = kernels::channel_normalize(
            xv,
            &stats.mean,
            &stats.biased_var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let s = xv.shape();
        let count = s[0] * s[2] * s[3];
        let unbias = if count > 1 {
            T::of_usize(count) / T::of_usize(count - 1)
        } else {
            T::one()
        };
        let unbiased = stats.biased_var.iter().map(|&v| v * unbias).collect();
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                batch_stats: true,
            },
        );
        Ok((var, stats.mean, unbiased))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (out, cache) = kernels::channel_normalize(
            self.value(x),
            running_mean,
            running_var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                batch_stats: false,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax(x, axis)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        self.push(out, Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Batched matrix product `[G, m, k] x [G, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::bmm(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Bmm(a, b)))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::argument(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let n = T::of_usize(len);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[(o * len + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::MeanAxis(x, axis)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        self.push(out, Op::SumSquares(x))
    }

    /// Batch mean of `-sum_c t_c log softmax(z)_c` for logits `[B, C]` and a
    /// constant target distribution of the same shape.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 {
            return Err(Error::argument(format!(
                "cross entropy expects [B, C] logits, got {:?}",
                z.shape()
            )));
        }
        z.expect_same_shape(&targets)?;
        let (b, c) = (z.shape()[0], z.shape()[1]);
        let probs = kernels::softmax(z, 1)?;
        let mut total = T::zero();
        for (row, t) in z.data().chunks_exact(c).zip(targets.data().chunks_exact(c)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (zv, tv) in row.iter().zip(t) {
                total -= *tv * (*zv - lse);
            }
        }
        let out = Tensor::scalar(total / T::of_usize(b));
        Ok(self.push(out, Op::SoftCrossEntropy { logits, probs, targets }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.input_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn input_grads(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| *g * *b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| *g * *a).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| *v * *c).collect())],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                vec![(*a, gt.permute(&inverse).expect("inverse permutation").into_data())]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Conv2d { x, w, b, padding } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), *padding, g);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = kernels::layer_norm_backward(cache, self.value(*gamma).data(), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                batch_stats,
            } => {
                let (dx, dg, db) = kernels::batch_norm_backward(
                    self.value(*x).shape(),
                    cache,
                    self.value(*gamma).data(),
                    g,
                    *batch_stats,
                );
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Softmax(x, axis) => vec![(*x, kernels::softmax_backward(&node.value, g, *axis))],
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                vec![(*x, g.iter().zip(xv).map(|(g, &v)| *g * kernels::silu_grad(v)).collect())]
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                vec![(*x, g.iter().zip(xv).map(|(g, &v)| *g * kernels::gelu_grad(v)).collect())]
            }
            Op::Bmm(a, b) => {
                let (da, db) = kernels::bmm_backward(self.value(*a), self.value(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::MeanAxis(x, axis) => {
                let shape = self.value(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let n = T::of_usize(len);
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] = g[o * inner + i] / n;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::SumSquares(x) => {
                let two = T::of(2.0) * g[0];
                vec![(*x, self.value(*x).data().iter().map(|&v| two * v).collect())]
            }
            Op::SoftCrossEntropy { logits, probs, targets } => {
                let c = probs.shape()[1];
                let scale = g[0] / T::of_usize(probs.shape()[0]);
                let mut dz = Vec::with_capacity(probs.numel());
                for (p, t) in probs.data().chunks_exact(c).zip(targets.data().chunks_exact(c)) {
                    let mass: T = t.iter().copied().sum();
                    dz.extend(p.iter().zip(t).map(|(&p, &t)| (p * mass - t) * scale));
                }
                vec![(*logits, dz)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let loss = tape.sum_squares(x);
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let unused = tape.param(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zero(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let loss = tape.sum(z);
        // loss = sum 2x^2
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[4.0, 8.0]);
    }
}
