use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::shape::output_shapes;
use super::{BatchNorm, Conv2d, Edge, Graph, GraphInput, MatMul, Node, NodeId, Op, Pool, TensorShape};

/// Incremental graph construction with shape tracking and seeded weights.
///
/// Every method panics if the operands are dimensionally incompatible; the
/// builder is meant for programmatic model generation where that is a bug.
pub struct GraphBuilder {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: Vec<Edge>,
    shapes: BTreeMap<Edge, TensorShape>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            inputs: Vec::new(),
            nodes: Vec::new(),
            outputs: Vec::new(),
            shapes: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_id(&self) -> NodeId {
        self.nodes.len() as NodeId
    }

    pub fn shape_of(&self, e: Edge) -> &TensorShape {
        self.shapes.get(&e).expect("edge produced by this builder")
    }

    fn uniform(&mut self, n: usize, scale: f64) -> Arc<[f64]> {
        (0..n).map(|_| self.rng.random_range(-1.0..1.0) * scale).collect()
    }

    /// Appends a node with an explicit operator; returns its output edges.
    pub fn push(&mut self, op: Op, inputs: &[Edge]) -> Vec<Edge> {
        let id = self.next_id();
        let ins: Vec<&TensorShape> = inputs.iter().map(|e| self.shape_of(*e)).collect();
        let outs = output_shapes(&op, &ins).unwrap_or_else(|r| panic!("{} node {id}: {r}", op.kind_name()));
        let edges: Vec<Edge> = (0..outs.len() as u32).map(|p| Edge::new(id, p)).collect();
        for (e, s) in edges.iter().zip(outs) {
            self.shapes.insert(*e, s);
        }
        self.nodes.push(Node { id, op, inputs: inputs.to_vec() });
        edges
    }

    fn push1(&mut self, op: Op, inputs: &[Edge]) -> Edge {
        self.push(op, inputs)[0]
    }

    pub fn input(&mut self, name: &str, dims: &[usize]) -> Edge {
        let shape = TensorShape::new(dims.to_vec()).expect("positive input dims");
        let id = self.next_id();
        self.inputs.push(GraphInput { name: name.to_string(), shape: shape.clone() });
        self.nodes.push(Node { id, op: Op::Input { name: name.to_string() }, inputs: vec![] });
        let e = Edge::of(id);
        self.shapes.insert(e, shape);
        e
    }

    pub fn conv(
        &mut self,
        x: Edge,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        has_activation: bool,
    ) -> Edge {
        let in_channels = self.shape_of(x).dims().get(1).copied().unwrap_or(1);
        let fan_in = in_channels * kernel[0] * kernel[1];
        let weight = self.uniform(out_channels * fan_in, 1.0 / (fan_in as f64).sqrt());
        let bias = self.uniform(out_channels, 0.1);
        self.push1(Op::Conv2d(Conv2d { out_channels, kernel, stride, padding, has_activation, weight, bias }), &[x])
    }

    pub fn matmul(&mut self, x: Edge, out_features: usize) -> Edge {
        let k = self.shape_of(x).dims().last().copied().unwrap_or(1);
        let weight = self.uniform(k * out_features, 1.0 / (k as f64).sqrt());
        self.push1(Op::MatMul(MatMul { out_features, weight }), &[x])
    }

    pub fn relu(&mut self, x: Edge) -> Edge {
        self.push1(Op::Relu, &[x])
    }

    pub fn identity(&mut self, x: Edge) -> Edge {
        self.push1(Op::Identity, &[x])
    }

    pub fn add(&mut self, a: Edge, b: Edge) -> Edge {
        self.push1(Op::Add, &[a, b])
    }

    pub fn concat(&mut self, xs: &[Edge], axis: usize) -> Edge {
        self.push1(Op::Concat { axis }, xs)
    }

    pub fn split(&mut self, x: Edge, axis: usize, sizes: &[usize]) -> Vec<Edge> {
        self.push(Op::Split { axis, sizes: sizes.to_vec() }, &[x])
    }

    pub fn max_pool(&mut self, x: Edge, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Edge {
        self.push1(Op::MaxPool(Pool { kernel, stride, padding }), &[x])
    }

    pub fn avg_pool(&mut self, x: Edge, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Edge {
        self.push1(Op::AvgPool(Pool { kernel, stride, padding }), &[x])
    }

    pub fn batch_norm(&mut self, x: Edge) -> Edge {
        let c = self.shape_of(x).dims()[1];
        let scale: Arc<[f64]> = (0..c).map(|_| self.rng.random_range(0.5..1.5)).collect();
        let shift = self.uniform(c, 0.5);
        self.push1(Op::BatchNorm(BatchNorm { scale, shift }), &[x])
    }

    pub fn output(&mut self, e: Edge) {
        self.outputs.push(e);
    }

    pub fn build(self) -> Graph {
        Graph::from_parts(self.inputs, self.nodes, self.outputs)
    }
}
