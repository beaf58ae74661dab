//! Reference interpreter.
//!
//! Straightforward double-precision loops with no layout tricks. It exists to
//! check that substitutions preserve semantics, not to be fast.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{infer_shapes, Edge, Graph, GraphError, NodeId, Op, Pool, TensorShape};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f64>) -> Self {
        assert_eq!(shape.numel(), data.len(), "tensor data length");
        Tensor { shape, data }
    }

    pub fn zeros(shape: TensorShape) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![0.0; n] }
    }

    fn dims4(&self) -> [usize; 4] {
        let d = self.shape.dims();
        [d[0], d[1], d[2], d[3]]
    }
}

fn conv2d(x: &Tensor, c: &super::Conv2d, out: &TensorShape) -> Tensor {
    let [n, cin, h, w] = x.dims4();
    let od = out.dims();
    let (cout, oh, ow) = (od[1], od[2], od[3]);
    let [kh, kw] = c.kernel;
    let mut y = Tensor::zeros(out.clone());
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias[o];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * c.stride[0] + ky) as isize - c.padding[0] as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * c.stride[1] + kx) as isize - c.padding[1] as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let wv = c.weight[((o * cin + ci) * kh + ky) * kw + kx];
                                let xv = x.data[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                acc += wv * xv;
                            }
                        }
                    }
                    if c.has_activation {
                        acc = acc.max(0.0);
                    }
                    y.data[((b * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

fn pool(x: &Tensor, p: &Pool, out: &TensorShape, max: bool) -> Tensor {
    let [n, c, h, w] = x.dims4();
    let od = out.dims();
    let (oh, ow) = (od[2], od[3]);
    let area = (p.kernel[0] * p.kernel[1]) as f64;
    let mut y = Tensor::zeros(out.clone());
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                    for ky in 0..p.kernel[0] {
                        let iy = (oy * p.stride[0] + ky) as isize - p.padding[0] as isize;
                        for kx in 0..p.kernel[1] {
                            let ix = (ox * p.stride[1] + kx) as isize - p.padding[1] as isize;
                            let inside = iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w;
                            // padding counts as zero for averages and is skipped for maxima
                            if !inside {
                                continue;
                            }
                            let v = x.data[((b * c + ch) * h + iy as usize) * w + ix as usize];
                            if max {
                                acc = acc.max(v);
                            } else {
                                acc += v;
                            }
                        }
                    }
                    y.data[((b * c + ch) * oh + oy) * ow + ox] = if max { acc } else { acc / area };
                }
            }
        }
    }
    y
}

/// Splits `dims` around `axis` into (outer, axis length, inner) extents.
fn around(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Runs the graph on named inputs and returns the outputs in graph order.
pub fn execute(graph: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<Vec<Tensor>, GraphError> {
    let shapes = infer_shapes(graph)?;
    let mut values: BTreeMap<NodeId, Vec<Tensor>> = BTreeMap::new();
    let get = |values: &BTreeMap<NodeId, Vec<Tensor>>, e: Edge| -> Tensor { values[&e.node][e.port as usize].clone() };
    for id in graph.topo_order()? {
        let node = graph.node(id).expect("topo ids exist");
        let out_shapes = shapes.ports(id).expect("shapes inferred for all nodes");
        let ins: Vec<Tensor> = node.inputs.iter().map(|e| get(&values, *e)).collect();
        let outs = match &node.op {
            Op::Input { name } => {
                let t = inputs.get(name).ok_or_else(|| GraphError::MissingInput(name.clone()))?;
                if t.shape != out_shapes[0] {
                    return Err(GraphError::InputShape {
                        name: name.clone(),
                        expected: out_shapes[0].clone(),
                        got: t.shape.clone(),
                    });
                }
                vec![t.clone()]
            }
            Op::Identity => vec![ins[0].clone()],
            Op::Relu => {
                let mut t = ins[0].clone();
                t.data.iter_mut().for_each(|v| *v = v.max(0.0));
                vec![t]
            }
            Op::Add => {
                let mut t = ins[0].clone();
                t.data.iter_mut().zip(&ins[1].data).for_each(|(a, b)| *a += b);
                vec![t]
            }
            Op::Conv2d(c) => vec![conv2d(&ins[0], c, &out_shapes[0])],
            Op::MatMul(m) => {
                let d = ins[0].shape.dims();
                let (rows, k) = (d[0], d[1]);
                let mut y = Tensor::zeros(out_shapes[0].clone());
                for r in 0..rows {
                    for j in 0..m.out_features {
                        let mut acc = 0.0;
                        for i in 0..k {
                            acc += ins[0].data[r * k + i] * m.weight[i * m.out_features + j];
                        }
                        y.data[r * m.out_features + j] = acc;
                    }
                }
                vec![y]
            }
            Op::BatchNorm(bn) => {
                let mut t = ins[0].clone();
                let (outer, c, inner) = around(t.shape.dims(), 1);
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for v in &mut t.data[base..base + inner] {
                            *v = *v * bn.scale[ch] + bn.shift[ch];
                        }
                    }
                }
                vec![t]
            }
            Op::Concat { axis } => {
                let out = &out_shapes[0];
                let (outer, total, inner) = around(out.dims(), *axis);
                let mut data = Vec::with_capacity(out.numel());
                for o in 0..outer {
                    for t in &ins {
                        let len = t.shape.dims()[*axis] * inner;
                        data.extend_from_slice(&t.data[o * len..(o + 1) * len]);
                    }
                }
                debug_assert_eq!(data.len(), outer * total * inner);
                vec![Tensor::new(out.clone(), data)]
            }
            Op::Split { axis, sizes } => {
                let (outer, total, inner) = around(ins[0].shape.dims(), *axis);
                let mut offset = 0;
                let mut parts = Vec::with_capacity(sizes.len());
                for (s, shape) in sizes.iter().zip(out_shapes) {
                    let mut data = Vec::with_capacity(shape.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        data.extend_from_slice(&ins[0].data[start..start + s * inner]);
                    }
                    offset += s;
                    parts.push(Tensor::new(shape.clone(), data));
                }
                parts
            }
            Op::MaxPool(p) => vec![pool(&ins[0], p, &out_shapes[0], true)],
            Op::AvgPool(p) => vec![pool(&ins[0], p, &out_shapes[0], false)],
        };
        values.insert(id, outs);
    }
    Ok(graph.outputs().iter().map(|e| get(&values, *e)).collect())
}

/// Uniform values in [-1, 1) for every declared graph input.
pub fn random_inputs(graph: &Graph, rng: &mut impl Rng) -> BTreeMap<String, Tensor> {
    graph
        .inputs()
        .iter()
        .map(|i| {
            let data = (0..i.shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
            (i.name.clone(), Tensor::new(i.shape.clone(), data))
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Randomized equivalence check with a fixed seed; see [`equivalent_with_seed`].
pub fn equivalent(g1: &Graph, g2: &Graph, trials: usize, tol: f64) -> Result<bool, GraphError> {
    equivalent_with_seed(g1, g2, trials, tol, 0x5eed)
}

/// Runs both graphs on `trials` random inputs and compares every output
/// element with `|a - b| <= tol * max(1, |a|, |b|)`.
///
/// This can only refute equivalence: `false` comes with a concrete
/// counterexample input, `true` means no difference was observed.
pub fn equivalent_with_seed(g1: &Graph, g2: &Graph, trials: usize, tol: f64, seed: u64) -> Result<bool, GraphError> {
    let mut sig1: Vec<_> = g1.inputs().iter().map(|i| (&i.name, &i.shape)).collect();
    let mut sig2: Vec<_> = g2.inputs().iter().map(|i| (&i.name, &i.shape)).collect();
    sig1.sort();
    sig2.sort();
    if sig1 != sig2 {
        return Err(GraphError::Incomparable("input names or shapes differ".into()));
    }
    if g1.outputs().len() != g2.outputs().len() {
        return Err(GraphError::Incomparable("output counts differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let inputs = random_inputs(g1, &mut rng);
        let o1 = execute(g1, &inputs)?;
        let o2 = execute(g2, &inputs)?;
        for (a, b) in o1.iter().zip(&o2) {
            if a.shape != b.shape {
                return Ok(false);
            }
            if !a.data.iter().zip(&b.data).all(|(x, y)| close(*x, *y, tol)) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::super::{Conv2d, GraphBuilder};
    use super::*;

    fn single_input(g: &Graph, data: Vec<f64>) -> BTreeMap<String, Tensor> {
        let i = &g.inputs()[0];
        BTreeMap::from([(i.name.clone(), Tensor::new(i.shape.clone(), data))])
    }

    #[test]
    fn identity_is_bit_exact() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[1, 1, 2, 2]);
        let i = b.identity(x);
        b.output(i);
        let g = b.build();
        let data = vec![0.1, -2.5e-300, f64::MAX, 3.0];
        let out = execute(&g, &single_input(&g, data.clone())).unwrap();
        let bits: Vec<u64> = out[0].data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn relu_zeroes_negatives() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[1, 1, 1, 3]);
        let r = b.relu(x);
        b.output(r);
        let g = b.build();
        let out = execute(&g, &single_input(&g, vec![-1.0, 0.5, 2.0])).unwrap();
        assert_eq!(out[0].data, vec![0.0, 0.5, 2.0]);
    }

    #[test]
    fn unit_conv_is_identity() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[1, 1, 3, 3]);
        let c = b.push(
            Op::Conv2d(Conv2d {
                out_channels: 1,
                kernel: [1, 1],
                stride: [1, 1],
                padding: [0, 0],
                has_activation: false,
                weight: Arc::from(vec![1.0]),
                bias: Arc::from(vec![0.0]),
            }),
            &[x],
        )[0];
        b.output(c);
        let g = b.build();
        let data: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
        let out = execute(&g, &single_input(&g, data.clone())).unwrap();
        assert_eq!(out[0].data, data);
    }

    #[test]
    fn missing_input_is_reported() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[1, 1, 1, 3]);
        b.output(x);
        let g = b.build();
        assert_eq!(execute(&g, &BTreeMap::new()), Err(GraphError::MissingInput("x".into())));
    }

    #[test]
    fn concat_then_split_round_trips() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[2, 3, 2, 2]);
        let y = b.input("y", &[2, 1, 2, 2]);
        let c = b.concat(&[x, y], 1);
        let parts = b.split(c, 1, &[3, 1]);
        b.output(parts[0]);
        b.output(parts[1]);
        let g = b.build();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = random_inputs(&g, &mut rng);
        let out = execute(&g, &ins).unwrap();
        assert_eq!(out[0], ins["x"]);
        assert_eq!(out[1], ins["y"]);
    }

    #[test]
    fn pools() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[1, 1, 2, 2]);
        let m = b.max_pool(x, [2, 2], [2, 2], [0, 0]);
        let a = b.avg_pool(x, [2, 2], [2, 2], [0, 0]);
        b.output(m);
        b.output(a);
        let g = b.build();
        let out = execute(&g, &single_input(&g, vec![1.0, -2.0, 4.0, 3.0])).unwrap();
        assert_eq!(out[0].data, vec![4.0]);
        assert_eq!(out[1].data, vec![1.5]);
    }

    #[test]
    fn execution_is_deterministic() {
        let mut b = GraphBuilder::new(9);
        let x = b.input("x", &[1, 2, 5, 5]);
        let c = b.conv(x, 3, [3, 3], [2, 2], [1, 1], true);
        let bn = b.batch_norm(c);
        b.output(bn);
        let g = b.build();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = random_inputs(&g, &mut rng);
        assert_eq!(execute(&g, &ins).unwrap(), execute(&g, &ins).unwrap());
    }

    #[test]
    fn equivalence_examples() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[1, 2, 3, 3]);
        let r = b.relu(x);
        b.output(r);
        let relu = b.build();

        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[1, 2, 3, 3]);
        let i = b.identity(x);
        b.output(i);
        let ident = b.build();

        assert!(equivalent(&relu, &relu, 10, 1e-4).unwrap());
        assert!(!equivalent(&relu, &ident, 10, 1e-4).unwrap());
    }
}
