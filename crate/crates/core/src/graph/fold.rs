//! Batch-norm folding.

use super::{ConvLayer, Graph, Node, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Absorbs every batch norm into an adjacent convolution and removes it.
///
/// A bn whose producer is a conv used only by that bn folds backwards into
/// the conv's output channels. Otherwise a bn whose sole consumer is an
/// unpadded conv folds forwards into that conv's input channels. Forward
/// folding is refused for padded convs: the zero padding would have to become
/// the bn shift, which a bias cannot express.
pub fn fold_bn(g: &Graph) -> Result<Graph> {
    let mut graph = g.clone();
    while let Some(bn_id) = graph
        .nodes()
        .iter()
        .position(|n| matches!(n.op, Op::BatchNorm(_)))
    {
        graph = fold_one(&graph, bn_id)?;
    }
    Ok(graph)
}

fn fold_one(g: &Graph, bn_id: NodeId) -> Result<Graph> {
    let bn_node = g.node(bn_id);
    let Op::BatchNorm(bn) = &bn_node.op else {
        unreachable!()
    };
    let consumers = g.consumers();
    let producer = bn_node.inputs[0];
    let mut nodes: Vec<Node> = g.nodes().to_vec();

    let backward = matches!(g.node(producer).op, Op::Conv(_)) && consumers[producer] == [bn_id];
    if backward {
        let Op::Conv(conv) = &mut nodes[producer].op else {
            unreachable!()
        };
        *conv = fold_into_output(conv, &bn.affine())?;
    } else {
        let next = match consumers[bn_id][..] {
            [c] if matches!(g.node(c).op, Op::Conv(_)) => c,
            _ => {
                return Err(Error::Unfoldable {
                    node: bn_node.name.clone(),
                    reason: "not adjacent to exactly one convolution".into(),
                })
            }
        };
        let Op::Conv(conv) = &mut nodes[next].op else {
            unreachable!()
        };
        if conv.attrs.padding != 0 {
            return Err(Error::Unfoldable {
                node: bn_node.name.clone(),
                reason: format!(
                    "following convolution `{}` is zero-padded",
                    g.node(next).name
                ),
            });
        }
        *conv = fold_into_input(conv, &bn.affine())?;
    }

    // Drop the bn and reroute its consumers to its producer.
    let remap = |i: NodeId| -> NodeId {
        let i = if i == bn_id { producer } else { i };
        if i > bn_id {
            i - 1
        } else {
            i
        }
    };
    nodes.remove(bn_id);
    for node in &mut nodes {
        for i in &mut node.inputs {
            *i = remap(*i);
        }
    }
    Graph::new(nodes)
}

/// conv → bn: `W′[l] = a_l · W[l]`, `B′_l = a_l · B_l + b_l`.
fn fold_into_output(conv: &ConvLayer, affine: &[(f64, f64)]) -> Result<ConvLayer> {
    let [out, inp, kh, kw] = conv.weight.nchw()?;
    if affine.len() != out {
        return Err(Error::dims(
            "bn channels vs conv outputs",
            &[affine.len()],
            conv.weight.dims(),
        ));
    }
    let per = inp * kh * kw;
    let weight: Vec<f32> = conv
        .weight
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| (f64::from(w) * affine[i / per].0) as f32)
        .collect();
    let bias: Vec<f32> = conv
        .bias
        .iter()
        .zip(affine)
        .map(|(&b, &(a, s))| (a * f64::from(b) + s) as f32)
        .collect();
    ConvLayer::new(
        Tensor::new(conv.weight.dims().to_vec(), weight)?,
        bias,
        conv.attrs,
    )
}

/// bn → conv: `W′[l,k] = a_k · W[l,k]`, `B′_l = B_l + Σ_{k,i,j} W[l,k,i,j] · b_k`.
fn fold_into_input(conv: &ConvLayer, affine: &[(f64, f64)]) -> Result<ConvLayer> {
    let [out, inp, kh, kw] = conv.weight.nchw()?;
    if affine.len() != inp {
        return Err(Error::dims(
            "bn channels vs conv inputs",
            &[affine.len()],
            conv.weight.dims(),
        ));
    }
    let taps = kh * kw;
    let wd = conv.weight.data();
    let weight: Vec<f32> = wd
        .iter()
        .enumerate()
        .map(|(i, &w)| (f64::from(w) * affine[(i / taps) % inp].0) as f32)
        .collect();
    let bias: Vec<f32> = (0..out)
        .map(|l| {
            let shift: f64 = (0..inp * taps)
                .map(|t| f64::from(wd[l * inp * taps + t]) * affine[t / taps].1)
                .sum();
            (f64::from(conv.bias[l]) + shift) as f32
        })
        .collect();
    ConvLayer::new(
        Tensor::new(conv.weight.dims().to_vec(), weight)?,
        bias,
        conv.attrs,
    )
}
