//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`GradTape`] stores every primitive application in execution order
//! together with the saved values its backward pass needs. Execution order is
//! a topological order of the data-flow graph, so replaying the tape from the
//! end visits nodes in reverse topological order; gradients accumulate
//! additively where a value feeds several consumers.
//!
//! A tape is single-writer: record one forward pass per tape (one tape per
//! training thread), call [`GradTape::backward`] with the loss gradient seed,
//! and read parameter gradients out of the returned [`Gradients`].

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{DepthwiseKernel, FlatParam, FullKernel, LinearWeights, NormAffine};
use crate::tensor::{Axis, Tensor4};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Prim {
    Shift { offset: i64, axis: Axis },
    DepthwiseConv,
    FullConv,
    ChannelLinear,
    LayerNorm { eps: f64 },
    Gelu,
    GlobalAvgPool,
    Add,
    Scale { factor: f64 },
    SliceChannels { start: usize },
    ConcatChannels,
    SpaceToDepth { p: usize },
}

#[derive(Debug, Clone)]
enum Node {
    TensorLeaf(Tensor4),
    LinearLeaf(LinearWeights),
    DepthwiseLeaf(DepthwiseKernel),
    FullLeaf(FullKernel),
    NormLeaf(NormAffine),
    Op {
        prim: Prim,
        inputs: Vec<Var>,
        out: Tensor4,
    },
}

impl Node {
    fn grad_len(&self) -> usize {
        match self {
            Node::TensorLeaf(t) => t.len(),
            Node::LinearLeaf(w) => w.flat_len(),
            Node::DepthwiseLeaf(k) => k.flat_len(),
            Node::FullLeaf(k) => k.flat_len(),
            Node::NormLeaf(a) => a.flat_len(),
            Node::Op { out, .. } => out.len(),
        }
    }
}

/// Recorded forward pass. See the module docs for the usage contract.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by [`GradTape::backward`].
///
/// Tensor-valued nodes yield gradients in `(n,h,w,c)` row-major order;
/// parameter leaves yield their [`FlatParam`] layout (weight then bias,
/// gamma then beta).
#[derive(Debug)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a recorded value, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    /// Gradient as a tensor of the given shape (for tensor-valued nodes).
    pub fn get_tensor(&self, v: Var, shape: (usize, usize, usize, usize)) -> Option<Tensor4> {
        self.get(v)
            .map(|buf| Tensor4::from_vec(shape.0, shape.1, shape.2, shape.3, buf.to_vec()).expect("gradient shape"))
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    // -- leaves ---------------------------------------------------------------

    /// Record a data tensor (input or activation seed).
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(Node::TensorLeaf(t))
    }

    pub fn param_linear(&mut self, w: LinearWeights) -> Var {
        self.push(Node::LinearLeaf(w))
    }

    pub fn param_depthwise(&mut self, k: DepthwiseKernel) -> Var {
        self.push(Node::DepthwiseLeaf(k))
    }

    pub fn param_full(&mut self, k: FullKernel) -> Var {
        self.push(Node::FullLeaf(k))
    }

    pub fn param_norm(&mut self, a: NormAffine) -> Var {
        self.push(Node::NormLeaf(a))
    }

    // -- value access -----------------------------------------------------------

    /// Tensor value of a node. Panics on parameter leaves, which have no
    /// tensor representation.
    pub fn value(&self, v: Var) -> &Tensor4 {
        match &self.nodes[v.0] {
            Node::TensorLeaf(t) => t,
            Node::Op { out, .. } => out,
            other => panic!("node {:?} holds parameters, not a tensor: {other:?}", v),
        }
    }

    fn linear_of(&self, v: Var) -> &LinearWeights {
        match &self.nodes[v.0] {
            Node::LinearLeaf(w) => w,
            _ => panic!("expected linear parameter leaf at {v:?}"),
        }
    }

    fn depthwise_of(&self, v: Var) -> &DepthwiseKernel {
        match &self.nodes[v.0] {
            Node::DepthwiseLeaf(k) => k,
            _ => panic!("expected depthwise kernel leaf at {v:?}"),
        }
    }

    fn full_of(&self, v: Var) -> &FullKernel {
        match &self.nodes[v.0] {
            Node::FullLeaf(k) => k,
            _ => panic!("expected full-conv kernel leaf at {v:?}"),
        }
    }

    fn norm_of(&self, v: Var) -> &NormAffine {
        match &self.nodes[v.0] {
            Node::NormLeaf(a) => a,
            _ => panic!("expected norm affine leaf at {v:?}"),
        }
    }

    /// Whether `v` is a depthwise kernel leaf (as opposed to a full-conv one).
    pub fn is_depthwise_leaf(&self, v: Var) -> bool {
        matches!(&self.nodes[v.0], Node::DepthwiseLeaf(_))
    }

    // -- recorded primitives ------------------------------------------------------

    pub fn shift2d(&mut self, x: Var, offset: i64, axis: Axis) -> Result<Var> {
        let out = ops::shift2d(self.value(x), offset, axis)?;
        Ok(self.push(Node::Op {
            prim: Prim::Shift { offset, axis },
            inputs: vec![x],
            out,
        }))
    }

    /// Zero-fill shift without the range check (see [`ops::shift2d_saturating`]).
    pub fn shift2d_saturating(&mut self, x: Var, offset: i64, axis: Axis) -> Var {
        let out = ops::shift2d_saturating(self.value(x), offset, axis);
        self.push(Node::Op {
            prim: Prim::Shift { offset, axis },
            inputs: vec![x],
            out,
        })
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(x), self.depthwise_of(kernel))?;
        Ok(self.push(Node::Op {
            prim: Prim::DepthwiseConv,
            inputs: vec![x, kernel],
            out,
        }))
    }

    pub fn full_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = ops::full_conv2d(self.value(x), self.full_of(kernel))?;
        Ok(self.push(Node::Op {
            prim: Prim::FullConv,
            inputs: vec![x, kernel],
            out,
        }))
    }

    pub fn channel_linear(&mut self, x: Var, weights: Var) -> Result<Var> {
        let out = ops::channel_linear(self.value(x), self.linear_of(weights))?;
        Ok(self.push(Node::Op {
            prim: Prim::ChannelLinear,
            inputs: vec![x, weights],
            out,
        }))
    }

    pub fn layer_norm(&mut self, x: Var, affine: Var, eps: f64) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.norm_of(affine), eps)?;
        Ok(self.push(Node::Op {
            prim: Prim::LayerNorm { eps },
            inputs: vec![x, affine],
            out,
        }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(Node::Op {
            prim: Prim::Gelu,
            inputs: vec![x],
            out,
        })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = ops::global_avg_pool(self.value(x));
        self.push(Node::Op {
            prim: Prim::GlobalAvgPool,
            inputs: vec![x],
            out,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Node::Op {
            prim: Prim::Add,
            inputs: vec![a, b],
            out,
        }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        self.push(Node::Op {
            prim: Prim::Scale { factor },
            inputs: vec![x],
            out,
        })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, width)?;
        Ok(self.push(Node::Op {
            prim: Prim::SliceChannels { start },
            inputs: vec![x],
            out,
        }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor4> = parts.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(Node::Op {
            prim: Prim::ConcatChannels,
            inputs: parts.to_vec(),
            out,
        }))
    }

    pub fn space_to_depth(&mut self, x: Var, p: usize) -> Result<Var> {
        let out = ops::space_to_depth(self.value(x), p)?;
        Ok(self.push(Node::Op {
            prim: Prim::SpaceToDepth { p },
            inputs: vec![x],
            out,
        }))
    }

    // -- backward -----------------------------------------------------------------

    /// Run the backward pass from `output`, seeding it with `seed`
    /// (`dL/d output`, same shape as the output value). Returns gradients for
    /// every recorded node a path reaches, parameters and inputs alike.
    pub fn backward(&self, output: Var, seed: &Tensor4) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid_state("backward on an empty tape"));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::invalid_argument("output var is not on this tape"));
        }
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::invalid_argument(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                out_shape
            )));
        }

        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        bufs[output.0] = Some(seed.data().to_vec());

        for idx in (0..=output.0).rev() {
            let Some(grad_flat) = bufs[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Node::Op { prim, inputs, out } = node else {
                // leaves keep their accumulated gradient
                bufs[idx] = Some(grad_flat);
                continue;
            };
            let (n, h, w, c) = out.shape();
            let grad = Tensor4::from_vec(n, h, w, c, grad_flat)?;

            match prim {
                Prim::Shift { offset, axis } => {
                    let dx = ops::shift2d_vjp(&grad, *offset, *axis);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                }
                Prim::DepthwiseConv => {
                    let x = self.value(inputs[0]);
                    let k = self.depthwise_of(inputs[1]);
                    let (dx, dk) = ops::depthwise_conv2d_vjp(x, k, &grad);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                    accumulate(&mut bufs, &self.nodes, inputs[1], dk);
                }
                Prim::FullConv => {
                    let x = self.value(inputs[0]);
                    let k = self.full_of(inputs[1]);
                    let (dx, dk) = ops::full_conv2d_vjp(x, k, &grad);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                    accumulate(&mut bufs, &self.nodes, inputs[1], dk);
                }
                Prim::ChannelLinear => {
                    let x = self.value(inputs[0]);
                    let wts = self.linear_of(inputs[1]);
                    let (dx, dw) = ops::channel_linear_vjp(x, wts, &grad);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                    accumulate(&mut bufs, &self.nodes, inputs[1], dw);
                }
                Prim::LayerNorm { eps } => {
                    let x = self.value(inputs[0]);
                    let affine = self.norm_of(inputs[1]);
                    let (dx, da) = ops::layer_norm_vjp(x, affine, *eps, &grad);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                    accumulate(&mut bufs, &self.nodes, inputs[1], da);
                }
                Prim::Gelu => {
                    let dx = ops::gelu_vjp(self.value(inputs[0]), &grad);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                }
                Prim::GlobalAvgPool => {
                    let dx = ops::global_avg_pool_vjp(self.value(inputs[0]).shape(), &grad);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                }
                Prim::Add => {
                    accumulate(&mut bufs, &self.nodes, inputs[0], grad.data().to_vec());
                    accumulate(&mut bufs, &self.nodes, inputs[1], grad.into_data());
                }
                Prim::Scale { factor } => {
                    let dx = grad.scale(*factor);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                }
                Prim::SliceChannels { start } => {
                    let dx = ops::slice_channels_vjp(self.value(inputs[0]).shape(), *start, &grad);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                }
                Prim::ConcatChannels => {
                    let mut off = 0;
                    for part in inputs {
                        let width = self.value(*part).channels();
                        let dpart = ops::slice_channels(&grad, off, width)?;
                        accumulate(&mut bufs, &self.nodes, *part, dpart.into_data());
                        off += width;
                    }
                }
                Prim::SpaceToDepth { p } => {
                    let dx = ops::space_to_depth_vjp(self.value(inputs[0]).shape(), *p, &grad);
                    accumulate(&mut bufs, &self.nodes, inputs[0], dx.into_data());
                }
            }
        }

        Ok(Gradients { bufs })
    }
}

fn accumulate(bufs: &mut [Option<Vec<f64>>], nodes: &[Node], target: Var, delta: Vec<f64>) {
    debug_assert_eq!(nodes[target.0].grad_len(), delta.len(), "gradient length mismatch");
    match &mut bufs[target.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
