//! Fusion of conv / relu / add nodes into unified modules.

use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::nnops::{relu_real, FusionCase};
use crate::tensor::Tensor;

/// A group of nodes executed as one unit and quantized once at its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedModule {
    pub case: FusionCase,
    pub conv: NodeId,
    /// Member nodes in topological order; `conv` first, `output` last.
    pub members: Vec<NodeId>,
    /// Node feeding the convolution.
    pub input: NodeId,
    /// Other operand of the residual addition (cases c and d).
    pub shortcut: Option<NodeId>,
    /// Node whose value the module produces.
    pub output: NodeId,
}

/// Partitions the compute nodes of a bn-free graph into unified modules,
/// returned in topological order of their outputs.
///
/// Patterns are matched longest first. Each add claims as its trunk the first
/// operand that is a conv consumed only by that add; the other operand is the
/// shortcut. The add plus an exclusive trailing relu forms case (c), the add
/// alone case (d). Remaining convs followed by an exclusive relu form case
/// (b); every other conv is case (a).
pub fn fuse(g: &Graph) -> Result<Vec<UnifiedModule>> {
    let consumers = g.consumers();
    let mut owner: Vec<Option<usize>> = vec![None; g.len()];
    let mut modules = Vec::new();

    let exclusive_relu = |id: NodeId| match consumers[id][..] {
        [r] if matches!(g.node(r).op, Op::Relu) => Some(r),
        _ => None,
    };

    for (id, node) in g.nodes().iter().enumerate() {
        match node.op {
            Op::BatchNorm(_) => {
                return Err(Error::UnsupportedOp {
                    node: node.name.clone(),
                    reason: "batch norm must be folded before fusion".into(),
                })
            }
            Op::Add => {}
            _ => continue,
        }
        let trunk_slot = node.inputs.iter().position(|&i| {
            matches!(g.node(i).op, Op::Conv(_)) && consumers[i] == [id] && owner[i].is_none()
        });
        let Some(slot) = trunk_slot else {
            return Err(Error::UnsupportedOp {
                node: node.name.clone(),
                reason: "residual addition without an exclusive convolution operand".into(),
            });
        };
        let conv = node.inputs[slot];
        let shortcut = node.inputs[1 - slot];
        let relu = exclusive_relu(id);
        let (case, output) = match relu {
            Some(r) => (FusionCase::ResidualRelu, r),
            None => (FusionCase::ResidualNoRelu, id),
        };
        let mut members = vec![conv, id];
        members.extend(relu);
        for &m in &members {
            owner[m] = Some(modules.len());
        }
        modules.push(UnifiedModule {
            case,
            conv,
            members,
            input: g.node(conv).inputs[0],
            shortcut: Some(shortcut),
            output,
        });
    }

    for (id, node) in g.nodes().iter().enumerate() {
        if !matches!(node.op, Op::Conv(_)) || owner[id].is_some() {
            continue;
        }
        let (case, members) = match exclusive_relu(id) {
            Some(r) if owner[r].is_none() => (FusionCase::ConvRelu, vec![id, r]),
            _ => (FusionCase::ConvOnly, vec![id]),
        };
        for &m in &members {
            owner[m] = Some(modules.len());
        }
        modules.push(UnifiedModule {
            case,
            conv: id,
            output: *members.last().expect("non-empty"),
            members,
            input: node.inputs[0],
            shortcut: None,
        });
    }

    if let Some((_, node)) = g
        .nodes()
        .iter()
        .enumerate()
        .find(|(id, n)| matches!(n.op, Op::Relu | Op::Add) && owner[*id].is_none())
    {
        return Err(Error::UnsupportedOp {
            node: node.name.clone(),
            reason: format!(
                "{} does not follow a convolution it can fuse with",
                node.op.kind()
            ),
        });
    }

    modules.sort_by_key(|m| m.output);

    // Every module operand must be the network input or another module's output.
    let produced: Vec<bool> = (0..g.len())
        .map(|id| id == g.input_id() || modules.iter().any(|m| m.output == id))
        .collect();
    for m in &modules {
        for src in std::iter::once(m.input).chain(m.shortcut) {
            if !produced[src] {
                return Err(Error::UnsupportedOp {
                    node: g.node(src).name.clone(),
                    reason: "value is consumed outside the module that computes it".into(),
                });
            }
        }
    }
    let out_src = g.node(g.output_id()).inputs[0];
    if !produced[out_src] {
        return Err(Error::UnsupportedOp {
            node: g.node(out_src).name.clone(),
            reason: "network output is an intermediate module value".into(),
        });
    }
    Ok(modules)
}

/// Activation quantizations after fusion: one per module.
pub fn count_quant_ops(modules: &[UnifiedModule]) -> usize {
    modules.len()
}

/// Activation quantizations without fusion: one per conv, relu and add.
pub fn count_quant_ops_naive(g: &Graph) -> usize {
    g.nodes()
        .iter()
        .filter(|n| matches!(n.op, Op::Conv(_) | Op::Relu | Op::Add))
        .count()
}

/// Runs the fused modules with float kernels; returns each module's output.
pub fn execute_modules_float(
    g: &Graph,
    modules: &[UnifiedModule],
    x: &Tensor<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let mut values: Vec<Option<Tensor<f64>>> = vec![None; g.len()];
    values[g.input_id()] = Some(x.clone());
    let mut outputs = Vec::with_capacity(modules.len());
    for m in modules {
        let Op::Conv(conv) = &g.node(m.conv).op else {
            unreachable!("module anchored on a conv")
        };
        let input = values[m.input].as_ref().expect("produced upstream");
        let mut y = conv.forward(input)?;
        if let Some(s) = m.shortcut {
            let s = values[s].as_ref().expect("produced upstream");
            for (v, r) in y.data_mut().iter_mut().zip(s.data()) {
                *v += r;
            }
        }
        if m.case.has_relu() {
            relu_real(&mut y);
        }
        values[m.output] = Some(y.clone());
        outputs.push(y);
    }
    Ok(outputs)
}
