//! Relabeling-invariant graph digests.
//!
//! Nodes are numbered by a post-order depth-first walk that starts at the
//! ordered graph outputs and follows each node's ordered input list. That
//! numbering depends only on structure, never on node ids, and it is a
//! complete invariant for DAGs whose nodes are all reachable from the
//! outputs: two graphs produce the same byte string exactly when one is a
//! relabeling of the other. Nodes unreachable from the outputs do not
//! contribute.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Graph, Node, NodeId, Op};

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

fn put_usizes(buf: &mut Vec<u8>, xs: &[usize]) {
    put_u64(buf, xs.len() as u64);
    for &x in xs {
        put_u64(buf, x as u64);
    }
}

fn put_floats(buf: &mut Vec<u8>, xs: &[f64]) {
    put_u64(buf, xs.len() as u64);
    for x in xs {
        put_u64(buf, x.to_bits());
    }
}

fn put_op(buf: &mut Vec<u8>, op: &Op) {
    put_str(buf, op.kind_name());
    match op {
        Op::Input { name } => put_str(buf, name),
        Op::Conv2d(c) => {
            put_usizes(buf, &[c.out_channels]);
            put_usizes(buf, &c.kernel);
            put_usizes(buf, &c.stride);
            put_usizes(buf, &c.padding);
            put_u64(buf, c.has_activation as u64);
            put_floats(buf, &c.weight);
            put_floats(buf, &c.bias);
        }
        Op::MatMul(m) => {
            put_usizes(buf, &[m.out_features]);
            put_floats(buf, &m.weight);
        }
        Op::Concat { axis } => put_usizes(buf, &[*axis]),
        Op::Split { axis, sizes } => {
            put_usizes(buf, &[*axis]);
            put_usizes(buf, sizes);
        }
        Op::MaxPool(p) | Op::AvgPool(p) => {
            put_usizes(buf, &p.kernel);
            put_usizes(buf, &p.stride);
            put_usizes(buf, &p.padding);
        }
        Op::BatchNorm(bn) => {
            put_floats(buf, &bn.scale);
            put_floats(buf, &bn.shift);
        }
        Op::Relu | Op::Add | Op::Identity => {}
    }
}

/// Post-order numbering of nodes reachable from the outputs.
fn canonical_order(graph: &Graph) -> Vec<NodeId> {
    let mut index: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut order = Vec::new();
    // (node, next input to visit)
    let mut stack: Vec<(NodeId, usize)> = Vec::new();
    for out in graph.outputs() {
        if index.contains_key(&out.node) || graph.node(out.node).is_none() {
            continue;
        }
        stack.push((out.node, 0));
        let mut on_stack = vec![out.node];
        while let Some((id, next)) = stack.pop() {
            let node = graph.node(id).expect("checked before push");
            if let Some(e) = node.inputs.get(next) {
                stack.push((id, next + 1));
                let child = e.node;
                if !index.contains_key(&child) && !on_stack.contains(&child) && graph.node(child).is_some() {
                    on_stack.push(child);
                    stack.push((child, 0));
                }
            } else {
                on_stack.retain(|&x| x != id);
                index.insert(id, order.len());
                order.push(id);
            }
        }
    }
    order
}

/// Byte string identifying the graph up to node relabeling.
pub fn canonical_bytes(graph: &Graph) -> Vec<u8> {
    let order = canonical_order(graph);
    let index: BTreeMap<NodeId, u64> = order.iter().enumerate().map(|(i, &id)| (id, i as u64)).collect();
    let edge_index = |n: NodeId| index.get(&n).copied().unwrap_or(u64::MAX);

    let mut buf = Vec::new();
    put_u64(&mut buf, graph.inputs().len() as u64);
    for i in graph.inputs() {
        put_str(&mut buf, &i.name);
        put_usizes(&mut buf, i.shape.dims());
    }
    put_u64(&mut buf, order.len() as u64);
    for id in &order {
        let node = graph.node(*id).expect("ordered nodes exist");
        put_op(&mut buf, &node.op);
        put_u64(&mut buf, node.inputs.len() as u64);
        for e in &node.inputs {
            put_u64(&mut buf, edge_index(e.node));
            put_u64(&mut buf, e.port as u64);
        }
    }
    put_u64(&mut buf, graph.outputs().len() as u64);
    for e in graph.outputs() {
        put_u64(&mut buf, edge_index(e.node));
        put_u64(&mut buf, e.port as u64);
    }
    buf
}

/// 64-bit digest of [`canonical_bytes`] (leading bytes of SHA-256).
pub fn canonical_hash(graph: &Graph) -> u64 {
    let digest = Sha256::digest(canonical_bytes(graph));
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Renumbers nodes in canonical order; unreachable input nodes follow.
pub fn canonicalize(graph: &Graph) -> Graph {
    let mut order = canonical_order(graph);
    let reached: std::collections::BTreeSet<NodeId> = order.iter().copied().collect();
    order.extend(graph.nodes().filter(|n| n.op.is_input() && !reached.contains(&n.id)).map(|n| n.id));
    let index: BTreeMap<NodeId, NodeId> = order.iter().enumerate().map(|(i, &id)| (id, i as NodeId)).collect();
    let nodes: Vec<Node> = order
        .iter()
        .map(|id| {
            let n = graph.node(*id).expect("ordered nodes exist");
            Node {
                id: index[id],
                op: n.op.clone(),
                inputs: n.inputs.iter().map(|e| super::Edge::new(index[&e.node], e.port)).collect(),
            }
        })
        .collect();
    let outputs = graph.outputs().iter().map(|e| super::Edge::new(index[&e.node], e.port)).collect();
    Graph::from_parts(graph.inputs().to_vec(), nodes, outputs)
}
