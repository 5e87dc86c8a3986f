//! Dataflow IR: a topologically ordered list of nodes.

mod fold;
mod fuse;

pub use fold::fold_bn;
pub use fuse::{
    count_quant_ops, count_quant_ops_naive, execute_modules_float, fuse, UnifiedModule,
};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::nnops::{conv2d_real, relu_real, ConvAttrs};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Float convolution parameters; weight is (out, in, kh, kw).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor<f32>,
    pub bias: Vec<f32>,
    pub attrs: ConvAttrs,
}

impl ConvLayer {
    pub fn new(weight: Tensor<f32>, bias: Vec<f32>, attrs: ConvAttrs) -> Result<Self> {
        let dims = weight.nchw()?;
        if bias.len() != dims[0] {
            return Err(Error::dims(
                "bias length vs output channels",
                &[bias.len()],
                weight.dims(),
            ));
        }
        Ok(Self {
            weight,
            bias,
            attrs,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let bias: Vec<f64> = self.bias.iter().map(|&b| f64::from(b)).collect();
        conv2d_real(x, &self.weight.to_f64(), &bias, self.attrs)
    }
}

/// Inference-mode batch norm, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, node: &str) -> Result<()> {
        let c = self.gamma.len();
        if [self.beta.len(), self.mean.len(), self.var.len()] != [c, c, c] {
            return Err(Error::InvalidGraph(format!(
                "batch norm `{node}` parameter vectors differ in length"
            )));
        }
        if self.eps.is_nan()
            || self.eps < 0.0
            || self
                .var
                .iter()
                .any(|&v| v.is_nan() || v < 0.0 || v + self.eps <= 0.0)
        {
            return Err(Error::InvalidGraph(format!(
                "batch norm `{node}` needs var ≥ 0, eps ≥ 0 and var + eps > 0"
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` with `y = scale · x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let scale = f64::from(self.gamma[c])
                    / (f64::from(self.var[c]) + f64::from(self.eps)).sqrt();
                (
                    scale,
                    f64::from(self.beta[c]) - scale * f64::from(self.mean[c]),
                )
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let [_, c, h, w] = x.nchw()?;
        if c != self.channels() {
            return Err(Error::dims(
                "batch norm channels",
                x.dims(),
                &[self.channels()],
            ));
        }
        let affine = self.affine();
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let (scale, shift) = affine[(i / (h * w)) % c];
            *v = scale * *v + shift;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Network input; `dims` is (C, H, W) of one sample.
    Input {
        dims: [usize; 3],
    },
    Conv(ConvLayer),
    Relu,
    BatchNorm(BnParams),
    Add,
    Output,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv(_) => "conv",
            Op::Relu => "relu",
            Op::BatchNorm(_) => "bn",
            Op::Add => "add",
            Op::Output => "output",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input { .. } => 0,
            Op::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

impl Node {
    pub fn new(name: impl Into<String>, op: Op, inputs: Vec<NodeId>) -> Self {
        Self {
            name: name.into(),
            op,
            inputs,
        }
    }
}

/// Validated, acyclic network. Node order is a topological order: every
/// operand is produced by an earlier node.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    shapes: Vec<[usize; 3]>,
    input: NodeId,
    output: NodeId,
}

impl Graph {
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let mut names = HashSet::new();
        let mut input = None;
        let mut output = None;
        for (id, node) in nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate node `{}`",
                    node.name
                )));
            }
            if node.inputs.len() != node.op.arity() {
                return Err(Error::InvalidGraph(format!(
                    "{} node `{}` takes {} operand(s), found {}",
                    node.op.kind(),
                    node.name,
                    node.op.arity(),
                    node.inputs.len()
                )));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= id) {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` consumes node #{bad}, which is not produced earlier",
                    node.name
                )));
            }
            let slot = match node.op {
                Op::Input { .. } => &mut input,
                Op::Output => &mut output,
                _ => continue,
            };
            if slot.replace(id).is_some() {
                return Err(Error::InvalidGraph(format!(
                    "more than one {} node",
                    node.op.kind()
                )));
            }
        }
        let input = input.ok_or_else(|| Error::InvalidGraph("no input node".into()))?;
        let output = output.ok_or_else(|| Error::InvalidGraph("no output node".into()))?;
        let shapes = infer_shapes(&nodes)?;
        Ok(Self {
            nodes,
            shapes,
            input,
            output,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_id(&self) -> NodeId {
        self.input
    }

    pub fn output_id(&self) -> NodeId {
        self.output
    }

    /// (C, H, W) produced by each node for a single sample.
    pub fn shape(&self, id: NodeId) -> [usize; 3] {
        self.shapes[id]
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.shapes[self.input]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Consumers of every node, in topological order. A node feeding both
    /// operands of an add appears twice.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                out[i].push(id);
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor<f64>) -> Result<()> {
        let [_, c, h, w] = x.nchw()?;
        if [c, h, w] != self.input_dims() {
            return Err(Error::dims("network input", x.dims(), &self.input_dims()));
        }
        Ok(())
    }

    /// Evaluates every node in f64; returns one activation per node.
    pub fn run_float(&self, x: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        self.check_input(x)?;
        let mut acts: Vec<Tensor<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let arg = |k: usize| &acts[node.inputs[k]];
            let y = match &node.op {
                Op::Input { .. } => x.clone(),
                Op::Conv(conv) => conv.forward(arg(0))?,
                Op::Relu => {
                    let mut y = arg(0).clone();
                    relu_real(&mut y);
                    y
                }
                Op::BatchNorm(bn) => bn.forward(arg(0))?,
                Op::Add => {
                    let mut y = arg(0).clone();
                    for (v, r) in y.data_mut().iter_mut().zip(arg(1).data()) {
                        *v += r;
                    }
                    y
                }
                Op::Output => arg(0).clone(),
            };
            acts.push(y);
        }
        Ok(acts)
    }

    /// Network output in f64.
    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.run_float(x)?.swap_remove(self.output))
    }
}

fn infer_shapes(nodes: &[Node]) -> Result<Vec<[usize; 3]>> {
    let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let arg = |k: usize| shapes[node.inputs[k]];
        let shape = match &node.op {
            Op::Input { dims } => *dims,
            Op::Conv(conv) => {
                let [c, h, w] = arg(0);
                let [_, wc, kh, kw] = conv.weight.nchw()?;
                if c != wc {
                    return Err(Error::ShapeMismatch {
                        name: node.name.clone(),
                        expected: vec![c],
                        found: vec![wc],
                    });
                }
                if conv.bias.len() != conv.out_channels() {
                    return Err(Error::ShapeMismatch {
                        name: node.name.clone(),
                        expected: vec![conv.out_channels()],
                        found: vec![conv.bias.len()],
                    });
                }
                match (conv.attrs.out_extent(h, kh), conv.attrs.out_extent(w, kw)) {
                    (Some(oh), Some(ow)) if conv.attrs.stride > 0 => [conv.out_channels(), oh, ow],
                    _ => {
                        return Err(Error::ShapeMismatch {
                            name: node.name.clone(),
                            expected: vec![h, w],
                            found: vec![kh, kw],
                        })
                    }
                }
            }
            Op::BatchNorm(bn) => {
                bn.validate(&node.name)?;
                let s = arg(0);
                if s[0] != bn.channels() {
                    return Err(Error::ShapeMismatch {
                        name: node.name.clone(),
                        expected: vec![s[0]],
                        found: vec![bn.channels()],
                    });
                }
                s
            }
            Op::Add => {
                if arg(0) != arg(1) {
                    return Err(Error::ShapeMismatch {
                        name: node.name.clone(),
                        expected: arg(0).to_vec(),
                        found: arg(1).to_vec(),
                    });
                }
                arg(0)
            }
            Op::Relu | Op::Output => arg(0),
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

#[cfg(test)]
pub(crate) mod testnets {
    //! Small graphs shared by unit tests.
    use super::*;

    pub fn conv(out: usize, inp: usize, k: usize, seed: u32, attrs: ConvAttrs) -> ConvLayer {
        let n = out * inp * k * k;
        let w: Vec<f32> = (0..n)
            .map(|i| ((i as u32 * 7 + seed * 13) % 17) as f32 / 17.0 - 0.5)
            .collect();
        let b: Vec<f32> = (0..out).map(|i| (i as f32 - 1.0) * 0.1).collect();
        ConvLayer::new(Tensor::new(vec![out, inp, k, k], w).unwrap(), b, attrs).unwrap()
    }

    /// input → conv → relu → conv → add(input) → relu → output
    pub fn basic_block(c: usize) -> Graph {
        let same = ConvAttrs::new(1, 1).unwrap();
        Graph::new(vec![
            Node::new("x", Op::Input { dims: [c, 4, 4] }, vec![]),
            Node::new("c1", Op::Conv(conv(c, c, 3, 1, same)), vec![0]),
            Node::new("r1", Op::Relu, vec![1]),
            Node::new("c2", Op::Conv(conv(c, c, 3, 2, same)), vec![2]),
            Node::new("add", Op::Add, vec![3, 0]),
            Node::new("r2", Op::Relu, vec![4]),
            Node::new("y", Op::Output, vec![5]),
        ])
        .unwrap()
    }
}
