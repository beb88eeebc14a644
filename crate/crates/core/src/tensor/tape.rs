use super::ops;
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    Embedding {
        table: ParamId,
        indices: Vec<usize>,
    },
    Conv {
        input: Var,
        weight: ParamId,
        bias: ParamId,
        width: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<Option<usize>>,
    },
    Mean {
        input: Var,
        count: usize,
    },
    Linear {
        input: Var,
        weight: ParamId,
        bias: ParamId,
    },
    Relu(Var),
    Mask {
        input: Var,
        mask: Tensor<T>,
    },
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Xent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Dot {
        input: Var,
        weights: Tensor<T>,
    },
    HalfSquaredNorm(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation so gradients can be pushed back into a
/// [`ParamStore`]. Parameters are read from the store, never copied.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    /// A parameter used directly as a value.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn embedding(&mut self, store: &ParamStore<T>, table: ParamId, indices: &[usize]) -> Result<Var> {
        let v = ops::embedding(store.value(table), indices)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn conv1d(&mut self, store: &ParamStore<T>, input: Var, weight: ParamId, bias: ParamId, width: usize) -> Result<Var> {
        let v = ops::conv1d(self.value(input), store.value(weight), store.value(bias), width)?;
        Ok(self.push(
            v,
            Op::Conv {
                input,
                weight,
                bias,
                width,
            },
        ))
    }

    pub fn maxpool_time(&mut self, input: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (v, argmax) = ops::maxpool_time(self.value(input), mask)?;
        Ok(self.push(v, Op::MaxPool { input, argmax }))
    }

    pub fn mean_time(&mut self, input: Var, count: usize) -> Result<Var> {
        let v = ops::mean_time(self.value(input), count)?;
        Ok(self.push(v, Op::Mean { input, count }))
    }

    pub fn linear(&mut self, store: &ParamStore<T>, input: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let v = ops::linear(self.value(input), store.value(weight), store.value(bias))?;
        Ok(self.push(v, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let v = ops::relu(self.value(input));
        self.push(v, Op::Relu(input))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask(&mut self, input: Var, mask: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "mask",
                left: x.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mask { input, mask }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&refs)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = rows.iter().map(|&p| self.value(p)).collect();
        let v = ops::stack_rows(&refs)?;
        Ok(self.push(v, Op::Stack(rows.to_vec())))
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Xent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Scalar `sum(weights * input)`; turns any tensor into a test objective.
    pub fn dot_with(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::Shape {
                op: "dot_with",
                left: x.shape().to_vec(),
                right: weights.shape().to_vec(),
            });
        }
        let s = ops::dot(x.data(), weights.data());
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, weights }))
    }

    /// Scalar `0.5 * |input|^2`.
    pub fn half_squared_norm(&mut self, input: Var) -> Var {
        let x = self.value(input).data();
        let s = ops::dot(x, x) * T::lit(0.5);
        self.push(Tensor::scalar(s), Op::HalfSquaredNorm(input))
    }

    /// Accumulates d(loss)/d(param) into every reachable parameter's `grad`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g).expect("gradient shape"),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g)?,
                Op::Embedding { table, indices } => {
                    ops::embedding_backward(&mut store.get_mut(*table).grad, indices, &g);
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    width,
                } => {
                    let cg = ops::conv1d_backward(self.value(*input), store.value(*weight), *width, &g);
                    store.get_mut(*weight).grad.add_assign(&cg.dweight)?;
                    store.get_mut(*bias).grad.add_assign(&cg.dbias)?;
                    acc(&mut grads, *input, cg.dx);
                }
                Op::MaxPool { input, argmax } => {
                    let dx = ops::maxpool_time_backward(self.value(*input).shape(), argmax, &g);
                    acc(&mut grads, *input, dx);
                }
                Op::Mean { input, count } => {
                    let dx = ops::mean_time_backward(self.value(*input).shape(), *count, &g);
                    acc(&mut grads, *input, dx);
                }
                Op::Linear { input, weight, bias } => {
                    let lg = ops::linear_backward(self.value(*input), store.value(*weight), &g);
                    store.get_mut(*weight).grad.add_assign(&lg.dweight)?;
                    store.get_mut(*bias).grad.add_assign(&lg.dbias)?;
                    acc(&mut grads, *input, lg.dx);
                }
                Op::Relu(input) => {
                    let dx = ops::relu_backward(self.value(*input), &g);
                    acc(&mut grads, *input, dx);
                }
                Op::Mask { input, mask } => {
                    let data = g.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
                    acc(&mut grads, *input, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Concat(parts) => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
                    for (p, dx) in parts.iter().zip(ops::concat_backward(&shapes, &g)) {
                        acc(&mut grads, *p, dx);
                    }
                }
                Op::Stack(rows) => {
                    for (r, p) in rows.iter().enumerate() {
                        let dx = Tensor::new(self.value(*p).shape().to_vec(), g.row(r).to_vec())?;
                        acc(&mut grads, *p, dx);
                    }
                }
                Op::Xent { logits, labels, probs } => {
                    let dx = ops::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                    acc(&mut grads, *logits, dx);
                }
                Op::Dot { input, weights } => {
                    let mut dx = weights.clone();
                    let s = g.data()[0];
                    dx.data_mut().iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, *input, dx);
                }
                Op::HalfSquaredNorm(input) => {
                    let mut dx = self.value(*input).clone();
                    let s = g.data()[0];
                    dx.data_mut().iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, *input, dx);
                }
            }
        }
        Ok(())
    }
}
