use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::shape::NodeShapes;
use super::{infer_shapes, Graph, GraphError, NodeId, Op, TensorShape};

/// Cost-relevant identity of a node: operator kind, input shapes and
/// structural hyperparameters. Weights and node ids are excluded, so
/// parameter-identical nodes anywhere share one signature and one set of
/// cost measurements.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeSignature {
    pub kind: String,
    pub inputs: Vec<TensorShape>,
    /// Hyperparameters in a fixed per-kind order.
    pub params: Vec<(String, Vec<usize>)>,
    /// Multiply-accumulate count times two, or element count for data movement.
    pub flops: u64,
}

impl NodeSignature {
    pub fn param(&self, name: &str) -> Option<&[usize]> {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_slice())
    }

    /// The signature's fields as a JSON object, for external measurement tools.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Repr<'a> {
            sig: String,
            kind: &'a str,
            inputs: Vec<&'a [usize]>,
            params: BTreeMap<&'a str, &'a [usize]>,
            flops: u64,
        }
        serde_json::to_value(Repr {
            sig: self.to_string(),
            kind: &self.kind,
            inputs: self.inputs.iter().map(TensorShape::dims).collect(),
            params: self.params.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect(),
            flops: self.flops,
        })
        .expect("signature serializes")
    }
}

/// Canonical text form, e.g. `conv2d[1x3x8x8](out=16,kernel=3x3,stride=1x1,pad=1x1,act=1)`.
/// This string keys the cost database.
impl fmt::Display for NodeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.kind)?;
        for (i, s) in self.inputs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        f.write_str("](")?;
        for (i, (k, v)) in self.params.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}=")?;
            for (j, x) in v.iter().enumerate() {
                if j > 0 {
                    f.write_str("x")?;
                }
                write!(f, "{x}")?;
            }
        }
        f.write_str(")")
    }
}

fn p(name: &str, v: &[usize]) -> (String, Vec<usize>) {
    (name.to_string(), v.to_vec())
}

/// Signature of node `id`, given the graph's inferred shapes.
pub fn signature(graph: &Graph, id: NodeId, shapes: &NodeShapes) -> Result<NodeSignature, GraphError> {
    let node = graph.node(id).ok_or(GraphError::BadNode { id, reason: "no such node".into() })?;
    let inputs: Vec<TensorShape> = node
        .inputs
        .iter()
        .map(|e| shapes.edge(*e).cloned().ok_or(GraphError::DanglingReference { node: id, target: *e }))
        .collect::<Result<_, _>>()?;
    let out_elems = shapes.ports(id).map_or(0, |ps| ps.iter().map(TensorShape::numel).sum::<usize>()) as u64;
    let in_elems: u64 = inputs.iter().map(|s| s.numel() as u64).sum();

    let (params, flops) = match &node.op {
        Op::Input { name } => {
            return Err(GraphError::BadNode { id, reason: format!("input `{name}` has no signature") })
        }
        Op::Conv2d(c) => {
            let cin = inputs[0].dims()[1] as u64;
            let macs = out_elems * cin * (c.kernel[0] * c.kernel[1]) as u64;
            (
                vec![
                    p("out", &[c.out_channels]),
                    p("kernel", &c.kernel),
                    p("stride", &c.stride),
                    p("pad", &c.padding),
                    p("act", &[c.has_activation as usize]),
                ],
                2 * macs + if c.has_activation { out_elems } else { 0 },
            )
        }
        Op::MatMul(m) => {
            let k = *inputs[0].dims().last().unwrap_or(&1) as u64;
            (vec![p("out", &[m.out_features])], 2 * out_elems * k)
        }
        Op::Relu | Op::Identity => (vec![], out_elems),
        Op::Add => (vec![], out_elems),
        Op::Concat { axis } => (vec![p("axis", &[*axis])], out_elems),
        Op::Split { axis, sizes } => (vec![p("axis", &[*axis]), p("sizes", sizes)], in_elems),
        Op::MaxPool(pl) | Op::AvgPool(pl) => (
            vec![p("kernel", &pl.kernel), p("stride", &pl.stride), p("pad", &pl.padding)],
            out_elems * (pl.kernel[0] * pl.kernel[1]) as u64,
        ),
        Op::BatchNorm(_) => (vec![], 2 * out_elems),
    };
    Ok(NodeSignature { kind: node.op.kind_name().to_string(), inputs, params, flops: flops.max(1) })
}

/// Signatures of every operator node, keyed by node id.
pub fn signatures(graph: &Graph) -> Result<BTreeMap<NodeId, NodeSignature>, GraphError> {
    let shapes = infer_shapes(graph)?;
    graph.op_nodes().map(|n| Ok((n.id, signature(graph, n.id, &shapes)?))).collect()
}
