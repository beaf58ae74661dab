//! Graph file format.
//!
//! ```json
//! { "inputs":  [{"name": "x", "shape": [1, 3, 8, 8]}],
//!   "nodes":   [{"id": 0, "kind": "input", "params": {"name": "x"}},
//!               {"id": 1, "kind": "conv2d", "inputs": [0],
//!                "params": {"out_channels": 4, "kernel": [3, 3], "stride": [1, 1],
//!                           "padding": [1, 1], "has_activation": false},
//!                "weights": {"kernel": [...], "bias": [...]}}],
//!   "outputs": [1] }
//! ```
//!
//! Edges are a node id (port 0) or `[id, port]`. Weight arrays are inline
//! floats or `"base64:<little-endian f64 bytes>"`. Nodes without weights get
//! deterministic pseudo-random constants seeded by their id.

use std::collections::BTreeMap;
use std::sync::Arc;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{
    infer_shapes, BatchNorm, Conv2d, Edge, Graph, GraphError, GraphInput, MatMul, Node, NodeId, Op, Pool, TensorShape,
};

#[derive(Serialize, Deserialize)]
struct GraphFile {
    inputs: Vec<InputEntry>,
    nodes: Vec<NodeEntry>,
    outputs: Vec<EdgeEntry>,
}

#[derive(Serialize, Deserialize)]
struct InputEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    id: NodeId,
    kind: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    params: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<EdgeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<BTreeMap<String, WeightEntry>>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(untagged)]
enum EdgeEntry {
    Node(NodeId),
    Port([u32; 2]),
}

impl From<EdgeEntry> for Edge {
    fn from(e: EdgeEntry) -> Edge {
        match e {
            EdgeEntry::Node(n) => Edge::of(n),
            EdgeEntry::Port([n, p]) => Edge::new(n, p),
        }
    }
}

impl From<Edge> for EdgeEntry {
    fn from(e: Edge) -> EdgeEntry {
        if e.port == 0 {
            EdgeEntry::Node(e.node)
        } else {
            EdgeEntry::Port([e.node, e.port])
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WeightEntry {
    Inline(Vec<f64>),
    Encoded(String),
}

struct NodeParams<'a> {
    id: NodeId,
    params: &'a Map<String, Value>,
    weights: Option<&'a BTreeMap<String, WeightEntry>>,
}

impl NodeParams<'_> {
    fn err(&self, reason: impl Into<String>) -> GraphError {
        GraphError::BadNode { id: self.id, reason: reason.into() }
    }

    fn usize(&self, key: &str) -> Result<usize, GraphError> {
        self.params
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| self.err(format!("missing or invalid `{key}`")))
    }

    fn pair(&self, key: &str, default: Option<[usize; 2]>) -> Result<[usize; 2], GraphError> {
        match self.params.get(key) {
            None => default.ok_or_else(|| self.err(format!("missing `{key}`"))),
            Some(Value::Number(n)) => {
                let v = n.as_u64().ok_or_else(|| self.err(format!("invalid `{key}`")))? as usize;
                Ok([v, v])
            }
            Some(Value::Array(a)) if a.len() == 2 => {
                let get =
                    |i: usize| a[i].as_u64().map(|v| v as usize).ok_or_else(|| self.err(format!("invalid `{key}`")));
                Ok([get(0)?, get(1)?])
            }
            Some(_) => Err(self.err(format!("invalid `{key}`"))),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<usize>, GraphError> {
        self.params
            .get(key)
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|v| v.as_u64().map(|x| x as usize)).collect())
            .ok_or_else(|| self.err(format!("missing or invalid `{key}`")))
    }

    fn flag(&self, key: &str) -> Result<bool, GraphError> {
        match self.params.get(key) {
            None => Ok(false),
            Some(v) => v.as_bool().ok_or_else(|| self.err(format!("invalid `{key}`"))),
        }
    }

    fn weights(&self, key: &str, len: usize, fill: impl FnOnce(usize) -> Vec<f64>) -> Result<Arc<[f64]>, GraphError> {
        let values = match self.weights.and_then(|w| w.get(key)) {
            None => fill(len),
            Some(WeightEntry::Inline(v)) => v.clone(),
            Some(WeightEntry::Encoded(s)) => {
                let raw = s
                    .strip_prefix("base64:")
                    .ok_or_else(|| self.err(format!("weights `{key}`: expected `base64:` prefix")))?;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(raw)
                    .map_err(|e| self.err(format!("weights `{key}`: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(self.err(format!("weights `{key}`: length not a multiple of 8")));
                }
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
            }
        };
        if values.len() != len {
            return Err(self.err(format!("weights `{key}`: {} values, expected {len}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.err(format!("weights `{key}`: non-finite value")));
        }
        Ok(values.into())
    }
}

fn filler(id: NodeId, lo: f64, hi: f64) -> impl FnOnce(usize) -> Vec<f64> {
    move |n| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7e1f_0000 + id as u64);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }
}

/// Parses a graph document. Node weights whose size depends on input shapes
/// are resolved after the input shapes are known, so nodes are processed in
/// topological order.
pub fn from_json(value: &Value) -> Result<Graph, GraphError> {
    let file: GraphFile = serde_json::from_value(value.clone()).map_err(|e| GraphError::Parse(e.to_string()))?;

    let inputs = file
        .inputs
        .into_iter()
        .map(|i| Ok(GraphInput { shape: TensorShape::new(i.shape)?, name: i.name }))
        .collect::<Result<Vec<_>, GraphError>>()?;

    let mut seen = std::collections::BTreeSet::new();
    for n in &file.nodes {
        if !seen.insert(n.id) {
            return Err(GraphError::BadNode { id: n.id, reason: "duplicate node id".into() });
        }
        const KINDS: [&str; 11] = [
            "input",
            "conv2d",
            "matmul",
            "relu",
            "add",
            "concat",
            "split",
            "maxpool",
            "avgpool",
            "batchnorm",
            "identity",
        ];
        if !KINDS.contains(&n.kind.as_str()) {
            return Err(GraphError::UnknownKind { id: n.id, kind: n.kind.clone() });
        }
    }

    // First pass: weight-free skeleton so shapes can be inferred in order.
    let entries: BTreeMap<NodeId, &NodeEntry> = file.nodes.iter().map(|n| (n.id, n)).collect();
    let mut graph = Graph::from_parts(inputs, Vec::new(), file.outputs.iter().map(|&e| e.into()).collect());
    let skeleton = Graph::from_parts(
        graph.inputs().to_vec(),
        file.nodes
            .iter()
            .map(|n| Node { id: n.id, op: Op::Identity, inputs: n.inputs.iter().map(|&e| e.into()).collect() })
            .collect(),
        graph.outputs().to_vec(),
    );
    let order = skeleton.topo_order()?;

    for id in order {
        let entry = entries[&id];
        let ins: Vec<Edge> = entry.inputs.iter().map(|&e| e.into()).collect();
        let p = NodeParams { id, params: &entry.params, weights: entry.weights.as_ref() };
        let in_channels = || -> Result<usize, GraphError> {
            let e = ins.first().ok_or_else(|| p.err("missing input"))?;
            let shapes = infer_shapes(&graph)?;
            shapes.edge(*e).and_then(|s| s.dims().get(1).copied()).ok_or_else(|| p.err("input has no channel axis"))
        };
        let last_dim = || -> Result<usize, GraphError> {
            let e = ins.first().ok_or_else(|| p.err("missing input"))?;
            let shapes = infer_shapes(&graph)?;
            shapes.edge(*e).and_then(|s| s.dims().last().copied()).ok_or_else(|| p.err("unknown input shape"))
        };
        let op = match entry.kind.as_str() {
            "input" => Op::Input {
                name: p
                    .params
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| p.err("input node needs a `name`"))?
                    .to_string(),
            },
            "conv2d" => {
                let out_channels = p.usize("out_channels")?;
                let kernel = p.pair("kernel", None)?;
                let cin = in_channels()?;
                let fan_in = (cin * kernel[0] * kernel[1]).max(1) as f64;
                let bound = 1.0 / fan_in.sqrt();
                Op::Conv2d(Conv2d {
                    out_channels,
                    kernel,
                    stride: p.pair("stride", Some([1, 1]))?,
                    padding: p.pair("padding", Some([0, 0]))?,
                    has_activation: p.flag("has_activation")?,
                    weight: p.weights(
                        "kernel",
                        out_channels * cin * kernel[0] * kernel[1],
                        filler(id, -bound, bound),
                    )?,
                    bias: p.weights("bias", out_channels, filler(id + 1_000_000, -0.1, 0.1))?,
                })
            }
            "matmul" => {
                let out_features = p.usize("out_features")?;
                let k = last_dim()?;
                let bound = 1.0 / (k.max(1) as f64).sqrt();
                Op::MatMul(MatMul {
                    out_features,
                    weight: p.weights("weight", k * out_features, filler(id, -bound, bound))?,
                })
            }
            "relu" => Op::Relu,
            "add" => Op::Add,
            "identity" => Op::Identity,
            "concat" => Op::Concat { axis: p.usize("axis")? },
            "split" => Op::Split { axis: p.usize("axis")?, sizes: p.list("sizes")? },
            "maxpool" | "avgpool" => {
                let kernel = p.pair("kernel", None)?;
                let pool =
                    Pool { kernel, stride: p.pair("stride", Some(kernel))?, padding: p.pair("padding", Some([0, 0]))? };
                if entry.kind == "maxpool" {
                    Op::MaxPool(pool)
                } else {
                    Op::AvgPool(pool)
                }
            }
            "batchnorm" => {
                let c = in_channels()?;
                Op::BatchNorm(BatchNorm {
                    scale: p.weights("scale", c, filler(id, 0.5, 1.5))?,
                    shift: p.weights("shift", c, filler(id + 1_000_000, -0.5, 0.5))?,
                })
            }
            other => unreachable!("kind `{other}` checked above"),
        };
        graph.insert_node(Node { id, op, inputs: ins });
    }
    Ok(graph)
}

pub fn from_json_str(s: &str) -> Result<Graph, GraphError> {
    let v: Value = serde_json::from_str(s).map_err(|e| GraphError::Parse(e.to_string()))?;
    from_json(&v)
}

fn pair(v: [usize; 2]) -> Value {
    json!([v[0], v[1]])
}

fn floats(v: &[f64]) -> WeightEntry {
    WeightEntry::Inline(v.to_vec())
}

pub fn to_json(graph: &Graph) -> Value {
    let nodes = graph
        .nodes()
        .map(|n| {
            let mut params = Map::new();
            let mut weights = BTreeMap::new();
            match &n.op {
                Op::Input { name } => {
                    params.insert("name".into(), json!(name));
                }
                Op::Conv2d(c) => {
                    params.insert("out_channels".into(), json!(c.out_channels));
                    params.insert("kernel".into(), pair(c.kernel));
                    params.insert("stride".into(), pair(c.stride));
                    params.insert("padding".into(), pair(c.padding));
                    params.insert("has_activation".into(), json!(c.has_activation));
                    weights.insert("kernel".to_string(), floats(&c.weight));
                    weights.insert("bias".to_string(), floats(&c.bias));
                }
                Op::MatMul(m) => {
                    params.insert("out_features".into(), json!(m.out_features));
                    weights.insert("weight".to_string(), floats(&m.weight));
                }
                Op::Concat { axis } => {
                    params.insert("axis".into(), json!(axis));
                }
                Op::Split { axis, sizes } => {
                    params.insert("axis".into(), json!(axis));
                    params.insert("sizes".into(), json!(sizes));
                }
                Op::MaxPool(p) | Op::AvgPool(p) => {
                    params.insert("kernel".into(), pair(p.kernel));
                    params.insert("stride".into(), pair(p.stride));
                    params.insert("padding".into(), pair(p.padding));
                }
                Op::BatchNorm(bn) => {
                    weights.insert("scale".to_string(), floats(&bn.scale));
                    weights.insert("shift".to_string(), floats(&bn.shift));
                }
                Op::Relu | Op::Add | Op::Identity => {}
            }
            NodeEntry {
                id: n.id,
                kind: n.op.kind_name().to_string(),
                params,
                inputs: n.inputs.iter().map(|&e| e.into()).collect(),
                weights: (!weights.is_empty()).then_some(weights),
            }
        })
        .collect();
    let file = GraphFile {
        inputs: graph
            .inputs()
            .iter()
            .map(|i| InputEntry { name: i.name.clone(), shape: i.shape.dims().to_vec() })
            .collect(),
        nodes,
        outputs: graph.outputs().iter().map(|&e| e.into()).collect(),
    };
    serde_json::to_value(file).expect("graph serializes")
}

pub fn to_json_string(graph: &Graph) -> String {
    serde_json::to_string_pretty(&to_json(graph)).expect("graph serializes")
}

#[cfg(test)]
mod tests {
    use super::super::{canonical_hash, GraphBuilder};
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut b = GraphBuilder::new(4);
        let x = b.input("x", &[1, 3, 6, 6]);
        let c = b.conv(x, 4, [3, 3], [1, 1], [1, 1], false);
        let bn = b.batch_norm(c);
        let parts = b.split(bn, 1, &[1, 3]);
        let p = b.max_pool(parts[1], [2, 2], [2, 2], [0, 0]);
        b.output(parts[0]);
        b.output(p);
        let g = b.build();
        let text = to_json_string(&g);
        let back = from_json_str(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(to_json_string(&back), text);
    }

    #[test]
    fn unknown_kind_reports_id() {
        let doc = json!({
            "inputs": [{"name": "x", "shape": [1, 1, 2, 2]}],
            "nodes": [
                {"id": 0, "kind": "input", "params": {"name": "x"}},
                {"id": 7, "kind": "softmax", "inputs": [0]}
            ],
            "outputs": [7]
        });
        assert_eq!(from_json(&doc), Err(GraphError::UnknownKind { id: 7, kind: "softmax".into() }));
    }

    #[test]
    fn missing_weights_are_filled_deterministically() {
        let doc = json!({
            "inputs": [{"name": "x", "shape": [1, 2, 4, 4]}],
            "nodes": [
                {"id": 0, "kind": "input", "params": {"name": "x"}},
                {"id": 1, "kind": "conv2d", "inputs": [0],
                 "params": {"out_channels": 3, "kernel": 3, "padding": 1}},
                {"id": 2, "kind": "batchnorm", "inputs": [1]}
            ],
            "outputs": [2]
        });
        let a = from_json(&doc).unwrap();
        let b = from_json(&doc).unwrap();
        assert_eq!(canonical_hash(&a), canonical_hash(&b));
        assert!(super::super::validate(&a).is_ok());
    }

    #[test]
    fn base64_weights_and_port_edges() {
        let w: Vec<u8> = [2.0f64].iter().flat_map(|v| v.to_le_bytes()).collect();
        let enc = base64::engine::general_purpose::STANDARD.encode(w);
        let doc = json!({
            "inputs": [{"name": "x", "shape": [1, 2, 1, 1]}],
            "nodes": [
                {"id": 0, "kind": "input", "params": {"name": "x"}},
                {"id": 1, "kind": "split", "inputs": [0], "params": {"axis": 1, "sizes": [1, 1]}},
                {"id": 2, "kind": "conv2d", "inputs": [[1, 1]],
                 "params": {"out_channels": 1, "kernel": [1, 1]},
                 "weights": {"kernel": format!("base64:{enc}"), "bias": [0.0]}}
            ],
            "outputs": [2, [1, 0]]
        });
        let g = from_json(&doc).unwrap();
        let Op::Conv2d(c) = &g.node(2).unwrap().op else { panic!("conv expected") };
        assert_eq!(&*c.weight, &[2.0]);
        assert_eq!(g.outputs()[1], Edge::new(1, 0));
        assert_eq!(g.node(2).unwrap().inputs[0], Edge::new(1, 1));
    }

    #[test]
    fn wrong_weight_length_is_rejected() {
        let doc = json!({
            "inputs": [{"name": "x", "shape": [1, 2, 4, 4]}],
            "nodes": [
                {"id": 0, "kind": "input", "params": {"name": "x"}},
                {"id": 1, "kind": "batchnorm", "inputs": [0],
                 "weights": {"scale": [1.0], "shift": [0.0, 0.0]}}
            ],
            "outputs": [1]
        });
        assert!(matches!(from_json(&doc), Err(GraphError::BadNode { id: 1, .. })));
    }
}
