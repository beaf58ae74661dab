use std::collections::{BTreeMap, BTreeSet};

use super::{Edge, Graph, GraphError, NodeId, Op, TensorShape};

/// A graph-level problem reported by [`validate`].
pub type Violation = GraphError;

/// Output shapes of every node, indexed by node id then output port.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeShapes(BTreeMap<NodeId, Vec<TensorShape>>);

impl NodeShapes {
    pub fn edge(&self, e: Edge) -> Option<&TensorShape> {
        self.0.get(&e.node).and_then(|v| v.get(e.port as usize))
    }

    /// First output of a node; every node has at least one.
    pub fn node(&self, id: NodeId) -> Option<&TensorShape> {
        self.0.get(&id).and_then(|v| v.first())
    }

    pub fn ports(&self, id: NodeId) -> Option<&[TensorShape]> {
        self.0.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Vec<TensorShape>)> {
        self.0.iter()
    }
}

fn shape(dims: Vec<usize>) -> Result<TensorShape, String> {
    TensorShape::new(dims).map_err(|e| e.to_string())
}

fn spatial(inp: usize, k: usize, s: usize, p: usize, axis: &str) -> Result<usize, String> {
    if k == 0 || s == 0 {
        return Err(format!("{axis}: kernel and stride must be positive"));
    }
    if inp + 2 * p < k {
        return Err(format!("{axis}: kernel {k} exceeds padded input {}", inp + 2 * p));
    }
    Ok((inp + 2 * p - k) / s + 1)
}

/// Output shapes of `op` applied to tensors of `inputs` shapes.
///
/// Input nodes are resolved by [`infer_shapes`]; this returns an error for them.
pub fn output_shapes(op: &Op, inputs: &[&TensorShape]) -> Result<Vec<TensorShape>, String> {
    if !op.arity().accepts(inputs.len()) {
        return Err(format!("expected {} inputs, got {}", op.arity(), inputs.len()));
    }
    let first = || inputs[0].dims();
    match op {
        Op::Input { .. } => Err("input shapes come from the graph signature".into()),
        Op::Relu | Op::Identity => Ok(vec![inputs[0].clone()]),
        Op::Conv2d(c) => {
            let d = first();
            if d.len() != 4 {
                return Err(format!("conv2d expects a 4-D input, got {}", inputs[0]));
            }
            if c.out_channels == 0 {
                return Err("out_channels must be positive".into());
            }
            let expect = c.out_channels * d[1] * c.kernel[0] * c.kernel[1];
            if c.weight.len() != expect {
                return Err(format!("conv2d weight has {} values, expected {expect}", c.weight.len()));
            }
            if c.bias.len() != c.out_channels {
                return Err(format!("conv2d bias has {} values, expected {}", c.bias.len(), c.out_channels));
            }
            let h = spatial(d[2], c.kernel[0], c.stride[0], c.padding[0], "height")?;
            let w = spatial(d[3], c.kernel[1], c.stride[1], c.padding[1], "width")?;
            Ok(vec![shape(vec![d[0], c.out_channels, h, w])?])
        }
        Op::MatMul(m) => {
            let d = first();
            if d.len() != 2 {
                return Err(format!("matmul expects a 2-D input, got {}", inputs[0]));
            }
            if m.out_features == 0 || m.weight.len() != d[1] * m.out_features {
                return Err(format!("matmul weight has {} values, expected {}", m.weight.len(), d[1] * m.out_features));
            }
            Ok(vec![shape(vec![d[0], m.out_features])?])
        }
        Op::Add => {
            if inputs[0] != inputs[1] {
                return Err(format!("add of {} and {}", inputs[0], inputs[1]));
            }
            Ok(vec![inputs[0].clone()])
        }
        Op::Concat { axis } => {
            let d = first();
            if *axis >= d.len() {
                return Err(format!("concat axis {axis} out of range for rank {}", d.len()));
            }
            let mut out = d.to_vec();
            out[*axis] = 0;
            for s in inputs {
                let sd = s.dims();
                let compatible =
                    sd.len() == d.len() && sd.iter().zip(d).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(format!("concat of {} and {}", inputs[0], s));
                }
                out[*axis] += sd[*axis];
            }
            Ok(vec![shape(out)?])
        }
        Op::Split { axis, sizes } => {
            let d = first();
            if *axis >= d.len() {
                return Err(format!("split axis {axis} out of range for rank {}", d.len()));
            }
            if sizes.is_empty() || sizes.contains(&0) {
                return Err("split sizes must be positive".into());
            }
            let total: usize = sizes.iter().sum();
            if total != d[*axis] {
                return Err(format!("split sizes sum to {total}, axis has {}", d[*axis]));
            }
            sizes
                .iter()
                .map(|&s| {
                    let mut out = d.to_vec();
                    out[*axis] = s;
                    shape(out)
                })
                .collect()
        }
        Op::MaxPool(p) | Op::AvgPool(p) => {
            let d = first();
            if d.len() != 4 {
                return Err(format!("pooling expects a 4-D input, got {}", inputs[0]));
            }
            if 2 * p.padding[0] > p.kernel[0] || 2 * p.padding[1] > p.kernel[1] {
                return Err("pool padding exceeds half the kernel".into());
            }
            let h = spatial(d[2], p.kernel[0], p.stride[0], p.padding[0], "height")?;
            let w = spatial(d[3], p.kernel[1], p.stride[1], p.padding[1], "width")?;
            Ok(vec![shape(vec![d[0], d[1], h, w])?])
        }
        Op::BatchNorm(bn) => {
            let d = first();
            if d.len() < 2 {
                return Err("batchnorm expects a channel axis".into());
            }
            if bn.scale.len() != d[1] || bn.shift.len() != d[1] {
                return Err(format!(
                    "batchnorm has {}/{} constants for {} channels",
                    bn.scale.len(),
                    bn.shift.len(),
                    d[1]
                ));
            }
            Ok(vec![inputs[0].clone()])
        }
    }
}

/// Output shape of every node. Requires a structurally sound graph (no
/// cycles, no dangling references).
pub fn infer_shapes(graph: &Graph) -> Result<NodeShapes, GraphError> {
    let declared: BTreeMap<&str, &TensorShape> = graph.inputs().iter().map(|i| (i.name.as_str(), &i.shape)).collect();
    let mut shapes = NodeShapes::default();
    for id in graph.topo_order()? {
        let node = graph.node(id).expect("topo order yields known ids");
        let out = match &node.op {
            Op::Input { name } => {
                let s = declared.get(name.as_str()).ok_or_else(|| GraphError::MissingInput(name.clone()))?;
                vec![(*s).clone()]
            }
            op => {
                let mut ins = Vec::with_capacity(node.inputs.len());
                for e in &node.inputs {
                    ins.push(shapes.edge(*e).ok_or(GraphError::DanglingReference { node: id, target: *e })?);
                }
                output_shapes(op, &ins).map_err(|reason| GraphError::ShapeMismatch { node: id, reason })?
            }
        };
        shapes.0.insert(id, out);
    }
    Ok(shapes)
}

/// Checks every graph invariant, collecting all violations found.
pub fn validate(graph: &Graph) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();

    let mut names = BTreeSet::new();
    for i in graph.inputs() {
        if !names.insert(i.name.as_str()) {
            v.push(GraphError::BadNode { id: 0, reason: format!("duplicate graph input `{}`", i.name) });
        }
    }
    let mut bound = BTreeSet::new();
    for n in graph.nodes() {
        if let Op::Input { name } = &n.op {
            if !names.contains(name.as_str()) {
                v.push(GraphError::MissingInput(name.clone()));
            }
            if !bound.insert(name.as_str()) {
                v.push(GraphError::BadNode { id: n.id, reason: format!("input `{name}` bound by more than one node") });
            }
        }
        if !n.op.arity().accepts(n.inputs.len()) {
            v.push(GraphError::Arity {
                node: n.id,
                kind: n.op.kind_name(),
                expected: n.op.arity(),
                got: n.inputs.len(),
            });
        }
        for e in &n.inputs {
            let ok = graph.node(e.node).is_some_and(|p| (e.port as usize) < p.op.num_outputs());
            if !ok {
                v.push(GraphError::DanglingReference { node: n.id, target: *e });
            }
        }
    }
    if graph.outputs().is_empty() {
        v.push(GraphError::BadNode { id: 0, reason: "graph has no outputs".into() });
    }
    for e in graph.outputs() {
        let ok = graph.node(e.node).is_some_and(|p| (e.port as usize) < p.op.num_outputs());
        if !ok {
            v.push(GraphError::DanglingOutput(*e));
        }
    }

    if v.is_empty() {
        if let Err(e) = graph.topo_order() {
            v.push(e);
        } else if let Err(e) = infer_shapes(graph) {
            v.push(e);
        }
    }

    if v.is_empty() {
        let mut live = BTreeSet::new();
        let mut stack: Vec<NodeId> = graph.outputs().iter().map(|e| e.node).collect();
        while let Some(id) = stack.pop() {
            if live.insert(id) {
                stack.extend(graph.node(id).into_iter().flat_map(|n| n.inputs.iter().map(|e| e.node)));
            }
        }
        for n in graph.op_nodes() {
            if !live.contains(&n.id) {
                v.push(GraphError::BadNode { id: n.id, reason: "not reachable from any output".into() });
            }
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Edge, GraphBuilder, GraphInput, Node};
    use super::*;

    fn dims(s: &TensorShape) -> Vec<usize> {
        s.dims().to_vec()
    }

    #[test]
    fn identity_preserves_shape() {
        let mut b = GraphBuilder::new(1);
        let x = b.input("x", &[1, 3, 8, 8]);
        let i = b.identity(x);
        b.output(i);
        let s = infer_shapes(&b.build()).unwrap();
        assert_eq!(dims(s.edge(i).unwrap()), [1, 3, 8, 8]);
    }

    #[test]
    fn same_padded_conv() {
        let mut b = GraphBuilder::new(1);
        let x = b.input("x", &[1, 3, 8, 8]);
        let c = b.conv(x, 16, [3, 3], [1, 1], [1, 1], false);
        b.output(c);
        let s = infer_shapes(&b.build()).unwrap();
        assert_eq!(dims(s.edge(c).unwrap()), [1, 16, 8, 8]);
    }

    #[test]
    fn strided_conv_floors() {
        let mut b = GraphBuilder::new(1);
        let x = b.input("x", &[1, 2, 7, 7]);
        let c = b.conv(x, 4, [3, 3], [2, 2], [0, 0], false);
        b.output(c);
        let s = infer_shapes(&b.build()).unwrap();
        assert_eq!(dims(s.edge(c).unwrap()), [1, 4, 3, 3]);
    }

    #[test]
    fn add_of_unequal_shapes_is_a_mismatch() {
        let g = Graph::from_parts(
            vec![
                GraphInput { name: "x".into(), shape: TensorShape::new(vec![1, 3, 8, 8]).unwrap() },
                GraphInput { name: "y".into(), shape: TensorShape::new(vec![1, 4, 8, 8]).unwrap() },
            ],
            vec![
                Node { id: 0, op: Op::Input { name: "x".into() }, inputs: vec![] },
                Node { id: 1, op: Op::Input { name: "y".into() }, inputs: vec![] },
                Node { id: 2, op: Op::Add, inputs: vec![Edge::of(0), Edge::of(1)] },
            ],
            vec![Edge::of(2)],
        );
        let err = infer_shapes(&g).unwrap_err();
        assert!(matches!(err, GraphError::ShapeMismatch { node: 2, .. }));
    }

    #[test]
    fn concat_and_split() {
        let mut b = GraphBuilder::new(1);
        let x = b.input("x", &[1, 3, 4, 4]);
        let y = b.input("y", &[1, 5, 4, 4]);
        let c = b.concat(&[x, y], 1);
        let parts = b.split(c, 1, &[2, 6]);
        b.output(parts[0]);
        b.output(parts[1]);
        let s = infer_shapes(&b.build()).unwrap();
        assert_eq!(dims(s.edge(c).unwrap()), [1, 8, 4, 4]);
        assert_eq!(dims(s.edge(parts[1]).unwrap()), [1, 6, 4, 4]);
    }

    #[test]
    fn validate_reports_cycle() {
        let g = Graph::from_parts(
            vec![],
            vec![
                Node { id: 0, op: Op::Relu, inputs: vec![Edge::of(1)] },
                Node { id: 1, op: Op::Relu, inputs: vec![Edge::of(0)] },
            ],
            vec![Edge::of(1)],
        );
        let v = validate(&g).unwrap_err();
        assert_eq!(v, vec![GraphError::Cycle]);
        assert_eq!(v[0].to_string(), "cycle detected");
    }

    #[test]
    fn validate_accepts_conv_chain() {
        let mut b = GraphBuilder::new(3);
        let x = b.input("x", &[1, 3, 8, 8]);
        let c1 = b.conv(x, 4, [3, 3], [1, 1], [1, 1], false);
        let c2 = b.conv(c1, 4, [1, 1], [1, 1], [0, 0], false);
        let c3 = b.conv(c2, 8, [3, 3], [2, 2], [1, 1], true);
        b.output(c3);
        assert_eq!(validate(&b.build()), Ok(()));
    }

    #[test]
    fn validate_reports_dangling_output() {
        let mut b = GraphBuilder::new(3);
        let x = b.input("x", &[1, 3, 8, 8]);
        let r = b.relu(x);
        b.output(r);
        b.output(Edge::of(42));
        let v = validate(&b.build()).unwrap_err();
        assert!(v.contains(&GraphError::DanglingOutput(Edge::of(42))));
    }

    #[test]
    fn validate_reports_dead_nodes_and_arity() {
        let mut b = GraphBuilder::new(3);
        let x = b.input("x", &[1, 3, 8, 8]);
        let r = b.relu(x);
        let _dead = b.relu(x);
        b.output(r);
        let v = validate(&b.build()).unwrap_err();
        assert!(matches!(v[0], GraphError::BadNode { id: 2, .. }));

        let g = Graph::from_parts(vec![], vec![Node { id: 0, op: Op::Add, inputs: vec![] }], vec![Edge::of(0)]);
        let v = validate(&g).unwrap_err();
        assert!(matches!(v[0], GraphError::Arity { node: 0, got: 0, .. }));
    }
}
