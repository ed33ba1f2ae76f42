use std::collections::BTreeMap;

use super::conv::{conv2d, conv2d_backward, conv3d_fuse, conv3d_fuse_backward, ConvSpec};
use super::elementwise::{self, sigmoid_scalar, sum_to_shape};
use super::norm::{bn_backward, bn_forward};
use super::resize::{bilinear_resize, bilinear_resize_backward};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Conv3dFuse {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    Add(Var, Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Resize(Var),
    Stack(Var, Var),
    Concat(Var, Var),
    Expand(Var),
    Sum(Var),
    BceWithLogits {
        logits: Var,
        target: Tensor<T>,
    },
    SoftDice {
        logits: Var,
        target: Tensor<T>,
        smooth: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    trainable: bool,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm on the tape.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Reverse-mode differentiation tape.
///
/// Operations are appended in execution order, so inputs always precede the
/// node that consumes them. Forward intermediates needed by the backward pass
/// are saved eagerly on the node.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable: true,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            &inputs,
        ))
    }

    pub fn conv3d_fuse(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv3d_fuse(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv3dFuse {
                input,
                weight,
                bias,
                spec,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = elementwise::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = elementwise::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Batch norm with per-channel `gamma`/`beta` leaves of shape `[C]`.
    /// `running = None` normalizes by batch statistics (training) and returns
    /// them so the caller can fold them into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let fwd = bn_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            eps,
        )?;
        let train = running.is_none();
        let stats = train.then_some(BatchStats {
            mean: fwd.batch_mean,
            var: fwd.batch_var,
        });
        let v = self.push(
            fwd.out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Resize(x), &[x]))
    }

    /// Stacks two `[B, C, H, W]` tensors into `[B, 2, C, H, W]`.
    pub fn stack(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(format!(
                "stack needs equal shapes, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (bn, c, h, w) = ta.dims4()?;
        let per = c * h * w;
        let mut data = Vec::with_capacity(2 * ta.numel());
        for bi in 0..bn {
            data.extend_from_slice(&ta.data()[bi * per..(bi + 1) * per]);
            data.extend_from_slice(&tb.data()[bi * per..(bi + 1) * per]);
        }
        let out = Tensor::new(vec![bn, 2, c, h, w], data)?;
        Ok(self.push(out, Op::Stack(a, b), &[a, b]))
    }

    /// Channel concatenation of `[B, C1, H, W]` and `[B, C2, H, W]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (bn, c1, h, w) = ta.dims4()?;
        let (bn2, c2, h2, w2) = tb.dims4()?;
        if (bn, h, w) != (bn2, h2, w2) {
            return Err(Error::invalid(format!(
                "concat needs matching batch/spatial dims, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (pa, pb) = (c1 * h * w, c2 * h * w);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for bi in 0..bn {
            data.extend_from_slice(&ta.data()[bi * pa..(bi + 1) * pa]);
            data.extend_from_slice(&tb.data()[bi * pb..(bi + 1) * pb]);
        }
        let out = Tensor::new(vec![bn, c1 + c2, h, w], data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Broadcasts `x` to `shape` (e.g. tiles a `[1, C, 1, 1]` vector over a
    /// spatial plane).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = elementwise::expand(self.value(x), shape)?;
        Ok(self.push(out, Op::Expand(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean binary cross-entropy from logits, in the overflow-free form
    /// `max(z, 0) - z*y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        check_target(z, target)?;
        let n = T::of(z.numel() as f64);
        let total: T = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
            &[logits],
        ))
    }

    /// `1 - (2 Σ p y + s) / (Σ p + Σ y + s)` with `p = σ(z)`.
    pub fn soft_dice_loss(&mut self, logits: Var, target: &Tensor<T>, smooth: T) -> Result<Var> {
        let z = self.value(logits);
        check_target(z, target)?;
        let (inter, denom) = dice_terms(z, target, smooth);
        let loss = T::one() - (T::of(2.0) * inter + smooth) / denom;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                logits,
                target: target.clone(),
                smooth,
            },
            &[logits],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf
    /// it depends on. Each recorded operation is visited once, in reverse.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one())?);
        let mut out = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.trainable {
                    out.insert(Var(i), g);
                }
                continue;
            }
            for (var, contrib) in self.local_grads(node, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        *acc = acc.zip_map(&contrib, |a, b| a + b)?;
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (gi, gw, gb) = conv2d_backward(self.value(*input), self.value(*weight), spec, g);
                let mut v = vec![(*input, gi), (*weight, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::Conv3dFuse {
                input,
                weight,
                bias,
                spec,
            } => {
                let (gi, gw, gb) = conv3d_fuse_backward(self.value(*input), self.value(*weight), spec, g);
                let mut v = vec![(*input, gi), (*weight, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("same shape");
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = node
                    .value
                    .zip_map(g, |s, gv| gv * s * (T::one() - s))
                    .expect("same shape");
                vec![(*x, gx)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = elementwise::mul(g, tb).expect("broadcast checked in forward");
                let gb = elementwise::mul(g, ta).expect("broadcast checked in forward");
                vec![(*a, sum_to_shape(&ga, ta.shape())), (*b, sum_to_shape(&gb, tb.shape()))]
            }
            Op::Add(a, b) => vec![
                (*a, sum_to_shape(g, self.value(*a).shape())),
                (*b, sum_to_shape(g, self.value(*b).shape())),
            ],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let gamma_t = self.value(*gamma);
                let (gx, gg, gb) = bn_backward(g, xhat, inv_std, gamma_t.data(), *train);
                vec![
                    (*input, gx),
                    (*gamma, Tensor::from_parts(gamma_t.shape().to_vec(), gg)),
                    (*beta, Tensor::from_parts(self.value(*beta).shape().to_vec(), gb)),
                ]
            }
            Op::Resize(x) => vec![(*x, bilinear_resize_backward(g, self.value(*x).shape()))],
            Op::Stack(a, b) => {
                let shape = self.value(*a).shape().to_vec();
                let per: usize = shape[1..].iter().product();
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for bi in 0..shape[0] {
                    let base = bi * 2 * per;
                    ga.extend_from_slice(&g.data()[base..base + per]);
                    gb.extend_from_slice(&g.data()[base + per..base + 2 * per]);
                }
                vec![
                    (*a, Tensor::from_parts(shape.clone(), ga)),
                    (*b, Tensor::from_parts(shape, gb)),
                ]
            }
            Op::Concat(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let pa: usize = sa[1..].iter().product();
                let pb: usize = sb[1..].iter().product();
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for bi in 0..sa[0] {
                    let base = bi * (pa + pb);
                    ga.extend_from_slice(&g.data()[base..base + pa]);
                    gb.extend_from_slice(&g.data()[base + pa..base + pa + pb]);
                }
                vec![(*a, Tensor::from_parts(sa, ga)), (*b, Tensor::from_parts(sb, gb))]
            }
            Op::Expand(x) => vec![(*x, sum_to_shape(g, self.value(*x).shape()))],
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(*x, self.value(*x).map(|_| gv))]
            }
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / T::of(z.numel() as f64);
                let gz = z
                    .zip_map(target, |z, y| scale * (sigmoid_scalar(z) - y))
                    .expect("checked in forward");
                vec![(*logits, gz)]
            }
            Op::SoftDice { logits, target, smooth } => {
                let z = self.value(*logits);
                let (inter, denom) = dice_terms(z, target, *smooth);
                let two = T::of(2.0);
                let num = two * inter + *smooth;
                let gv = g.data()[0];
                let gz = z
                    .zip_map(target, |z, y| {
                        let p = sigmoid_scalar(z);
                        let dl_dp = -(two * y * denom - num) / (denom * denom);
                        gv * dl_dp * p * (T::one() - p)
                    })
                    .expect("checked in forward");
                vec![(*logits, gz)]
            }
        }
    }
}

fn check_target<T: Real>(z: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if z.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "target shape {:?} differs from logits {:?}",
            target.shape(),
            z.shape()
        )));
    }
    Ok(())
}

/// `(Σ p y, Σ p + Σ y + smooth)` with `p = σ(z)`.
fn dice_terms<T: Real>(z: &Tensor<T>, target: &Tensor<T>, smooth: T) -> (T, T) {
    let (mut inter, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
    for (&z, &y) in z.data().iter().zip(target.data()) {
        let p = sigmoid_scalar(z);
        inter += p * y;
        sp += p;
        sy += y;
    }
    (inter, sp + sy + smooth)
}
