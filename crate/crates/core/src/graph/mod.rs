//! Computation-graph IR.
//!
//! A [`Graph`] is a DAG of operator [`Node`]s. Edges are `(node, port)`
//! references into producer outputs; only [`Op::Split`] has more than one
//! output port. Graph inputs are materialized as [`Op::Input`] nodes so every
//! tensor in the graph is addressed the same way. Weights live inline as
//! shared constants, which keeps clones cheap during search.

mod builder;
mod hash;
mod interp;
mod json;
mod shape;
mod signature;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use builder::GraphBuilder;
pub use hash::{canonical_bytes, canonical_hash, canonicalize};
pub use interp::{equivalent, equivalent_with_seed, execute, random_inputs, Tensor};
pub use json::{from_json, from_json_str, to_json, to_json_string};
pub use shape::{infer_shapes, output_shapes, validate, NodeShapes, Violation};
pub use signature::{signature, signatures, NodeSignature};

pub type NodeId = u32;

/// Reference to one output tensor of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub node: NodeId,
    pub port: u32,
}

impl Edge {
    pub const fn new(node: NodeId, port: u32) -> Self {
        Edge { node, port }
    }

    pub const fn of(node: NodeId) -> Self {
        Edge { node, port: 0 }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.port == 0 {
            write!(f, "{}", self.node)
        } else {
            write!(f, "{}:{}", self.node, self.port)
        }
    }
}

/// Dimensions of a dense tensor, channels-first for 4-D activations.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self, GraphError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(GraphError::InvalidShape(dims));
        }
        Ok(TensorShape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("x")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub has_activation: bool,
    /// `[out_channels, in_channels, kh, kw]`, row-major.
    pub weight: Arc<[f64]>,
    pub bias: Arc<[f64]>,
}

impl Conv2d {
    /// Same kernel, stride, padding and activation flag; output width may differ.
    pub fn same_geometry(&self, other: &Conv2d) -> bool {
        self.kernel == other.kernel
            && self.stride == other.stride
            && self.padding == other.padding
            && self.has_activation == other.has_activation
    }

    /// Number of weights per output channel.
    pub fn filter_len(&self) -> usize {
        self.weight.len() / self.out_channels.max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatMul {
    pub out_features: usize,
    /// `[in_features, out_features]`, row-major.
    pub weight: Arc<[f64]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

/// Inference-time batch normalization, pre-reduced to `y = x * scale + shift`
/// per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Arc<[f64]>,
    pub shift: Arc<[f64]>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { name: String },
    Conv2d(Conv2d),
    MatMul(MatMul),
    Relu,
    Add,
    Concat { axis: usize },
    Split { axis: usize, sizes: Vec<usize> },
    MaxPool(Pool),
    AvgPool(Pool),
    BatchNorm(BatchNorm),
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "{k}"),
            Arity::AtLeast(k) => write!(f, ">={k}"),
        }
    }
}

impl Op {
    /// Lowercase operator name, as used in graph files and signatures.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d(_) => "conv2d",
            Op::MatMul(_) => "matmul",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Concat { .. } => "concat",
            Op::Split { .. } => "split",
            Op::MaxPool(_) => "maxpool",
            Op::AvgPool(_) => "avgpool",
            Op::BatchNorm(_) => "batchnorm",
            Op::Identity => "identity",
        }
    }

    pub fn arity(&self) -> Arity {
        match self {
            Op::Input { .. } => Arity::Exactly(0),
            Op::Add => Arity::Exactly(2),
            Op::Concat { .. } => Arity::AtLeast(2),
            _ => Arity::Exactly(1),
        }
    }

    pub fn num_outputs(&self) -> usize {
        match self {
            Op::Split { sizes, .. } => sizes.len(),
            _ => 1,
        }
    }

    pub fn is_input(&self) -> bool {
        matches!(self, Op::Input { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphInput {
    pub name: String,
    pub shape: TensorShape,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node}: shape mismatch: {reason}")]
    ShapeMismatch { node: NodeId, reason: String },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("missing input tensor `{0}`")]
    MissingInput(String),
    #[error("input `{name}`: expected shape {expected}, got {got}")]
    InputShape { name: String, expected: TensorShape, got: TensorShape },
    #[error("cycle detected")]
    Cycle,
    #[error("node {node} references missing tensor {target}")]
    DanglingReference { node: NodeId, target: Edge },
    #[error("graph output references missing tensor {0}")]
    DanglingOutput(Edge),
    #[error("node {node} ({kind}): expected {expected} inputs, got {got}")]
    Arity { node: NodeId, kind: &'static str, expected: Arity, got: usize },
    #[error("node {id}: unknown operator kind `{kind}`")]
    UnknownKind { id: NodeId, kind: String },
    #[error("node {id}: {reason}")]
    BadNode { id: NodeId, reason: String },
    #[error("graph file: {0}")]
    Parse(String),
    #[error("graphs are not comparable: {0}")]
    Incomparable(String),
}

/// An operator graph with designated inputs and outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    inputs: Vec<GraphInput>,
    nodes: BTreeMap<NodeId, Node>,
    outputs: Vec<Edge>,
}

impl Graph {
    /// Assembles a graph without checking it; see [`validate`].
    pub fn from_parts(inputs: Vec<GraphInput>, nodes: Vec<Node>, outputs: Vec<Edge>) -> Self {
        let nodes = nodes.into_iter().map(|n| (n.id, n)).collect();
        Graph { inputs, nodes, outputs }
    }

    pub fn inputs(&self) -> &[GraphInput] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Edge] {
        &self.outputs
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    /// All nodes in ascending id order, including input nodes.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.values()
    }

    /// Operator nodes (everything except graph inputs) in ascending id order.
    pub fn op_nodes(&self) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.values().filter(|n| !n.op.is_input())
    }

    pub fn op_count(&self) -> usize {
        self.op_nodes().count()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_node(&self, name: &str) -> Option<&Node> {
        self.nodes.values().find(|n| matches!(&n.op, Op::Input { name: nm } if nm == name))
    }

    /// Number of references to `edge`: consumer input slots plus graph outputs.
    pub fn uses(&self, edge: Edge) -> usize {
        let consumed: usize = self.nodes.values().map(|n| n.inputs.iter().filter(|&&e| e == edge).count()).sum();
        consumed + self.outputs.iter().filter(|&&e| e == edge).count()
    }

    /// Ids of nodes consuming `edge`, ascending, without repeats.
    pub fn consumers(&self, edge: Edge) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.inputs.contains(&edge)).map(|n| n.id).collect()
    }

    pub fn next_id(&self) -> NodeId {
        self.nodes.keys().next_back().map_or(0, |&id| id + 1)
    }

    /// Renumbers nodes through `map`, which must be injective.
    pub fn relabel(&self, map: impl Fn(NodeId) -> NodeId) -> Graph {
        let remap = |e: &Edge| Edge::new(map(e.node), e.port);
        let nodes = self
            .nodes
            .values()
            .map(|n| Node { id: map(n.id), op: n.op.clone(), inputs: n.inputs.iter().map(remap).collect() })
            .collect();
        Graph::from_parts(self.inputs.clone(), nodes, self.outputs.iter().map(remap).collect())
    }

    /// Kahn's algorithm; ready nodes are released in ascending id order.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut users: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in self.nodes.values() {
            indegree.entry(n.id).or_insert(0);
            for e in &n.inputs {
                if !self.nodes.contains_key(&e.node) {
                    return Err(GraphError::DanglingReference { node: n.id, target: *e });
                }
                *indegree.entry(n.id).or_insert(0) += 1;
                users.entry(e.node).or_default().push(n.id);
            }
        }
        let mut ready: BTreeSet<NodeId> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &u in users.get(&id).into_iter().flatten() {
                let d = indegree.get_mut(&u).expect("user is a node");
                *d -= 1;
                if *d == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(GraphError::Cycle);
        }
        Ok(order)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(&id)
    }

    pub(crate) fn insert_node(&mut self, node: Node) {
        self.nodes.insert(node.id, node);
    }

    pub(crate) fn remove_node(&mut self, id: NodeId) -> Option<Node> {
        self.nodes.remove(&id)
    }

    /// Points every consumer slot and graph output reading `from` at `to`.
    pub(crate) fn replace_uses(&mut self, from: Edge, to: Edge) {
        for n in self.nodes.values_mut() {
            for e in n.inputs.iter_mut() {
                if *e == from {
                    *e = to;
                }
            }
        }
        for e in self.outputs.iter_mut() {
            if *e == from {
                *e = to;
            }
        }
    }

    /// Drops operator nodes that no graph output depends on. Input nodes stay.
    pub(crate) fn prune_dead(&mut self) {
        let mut live: BTreeSet<NodeId> = BTreeSet::new();
        let mut stack: Vec<NodeId> = self.outputs.iter().map(|e| e.node).collect();
        while let Some(id) = stack.pop() {
            if !live.insert(id) {
                continue;
            }
            if let Some(n) = self.nodes.get(&id) {
                stack.extend(n.inputs.iter().map(|e| e.node));
            }
        }
        self.nodes.retain(|id, n| n.op.is_input() || live.contains(id));
    }
}
