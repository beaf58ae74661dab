//! Semantics-preserving graph substitutions.
//!
//! Each rule is an exact structural pattern plus a constructive rewriter.
//! Matching never looks through commutativity or associativity. The catalog
//! contains both shrinking and growing moves (fusions and their inverses) so
//! the reachable graph space is not a descent to a single fixpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::graph::{canonical_hash, Conv2d, Edge, Graph, Node, NodeId, Op};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("{rule}: stale or invalid match site {binding:?}: {reason}")]
    InvalidSite { rule: SubstitutionRule, binding: Vec<NodeId>, reason: String },
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubstitutionRule {
    /// `conv -> relu` (relu sole consumer) becomes one conv with `has_activation`.
    FuseConvRelu,
    /// Inverse of [`Self::FuseConvRelu`].
    SplitConvActivation,
    /// Two convs reading the same tensor with equal geometry become one wider
    /// conv followed by a channel split.
    MergeParallelConvs,
    /// Inverse of [`Self::MergeParallelConvs`]: a conv whose only consumer is a
    /// channel split becomes one conv per split part.
    SplitWideConv,
    /// Removes an identity, rewiring its consumers to its producer.
    FoldIdentity,
    /// `conv -> batchnorm` (batchnorm sole consumer) folds the per-channel
    /// scale and shift into the conv weights and bias.
    FuseConvBatchNorm,
}

/// Pattern-node to graph-node binding, in the rule's pattern order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatchSite {
    pub binding: Vec<NodeId>,
}

impl SubstitutionRule {
    pub const ALL: [SubstitutionRule; 6] = [
        SubstitutionRule::FuseConvRelu,
        SubstitutionRule::SplitConvActivation,
        SubstitutionRule::MergeParallelConvs,
        SubstitutionRule::SplitWideConv,
        SubstitutionRule::FoldIdentity,
        SubstitutionRule::FuseConvBatchNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SubstitutionRule::FuseConvRelu => "fuse-conv-relu",
            SubstitutionRule::SplitConvActivation => "split-conv-activation",
            SubstitutionRule::MergeParallelConvs => "merge-parallel-convs",
            SubstitutionRule::SplitWideConv => "split-wide-conv",
            SubstitutionRule::FoldIdentity => "fold-identity",
            SubstitutionRule::FuseConvBatchNorm => "fuse-conv-batchnorm",
        }
    }

    /// Pattern nodes, in binding order.
    pub fn pattern(self) -> &'static [&'static str] {
        match self {
            SubstitutionRule::FuseConvRelu => &["conv2d(act=0)", "relu"],
            SubstitutionRule::SplitConvActivation => &["conv2d(act=1)"],
            SubstitutionRule::MergeParallelConvs => &["conv2d", "conv2d"],
            SubstitutionRule::SplitWideConv => &["conv2d", "split(axis=1)"],
            SubstitutionRule::FoldIdentity => &["identity"],
            SubstitutionRule::FuseConvBatchNorm => &["conv2d(act=0)", "batchnorm"],
        }
    }

    pub fn inverse(self) -> Option<SubstitutionRule> {
        match self {
            SubstitutionRule::FuseConvRelu => Some(SubstitutionRule::SplitConvActivation),
            SubstitutionRule::SplitConvActivation => Some(SubstitutionRule::FuseConvRelu),
            SubstitutionRule::MergeParallelConvs => Some(SubstitutionRule::SplitWideConv),
            SubstitutionRule::SplitWideConv => Some(SubstitutionRule::MergeParallelConvs),
            SubstitutionRule::FoldIdentity | SubstitutionRule::FuseConvBatchNorm => None,
        }
    }

    fn invalid(self, site: &MatchSite, reason: impl Into<String>) -> RuleError {
        RuleError::InvalidSite { rule: self, binding: site.binding.clone(), reason: reason.into() }
    }
}

impl fmt::Display for SubstitutionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SubstitutionRule {
    type Err = RuleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubstitutionRule::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| RuleError::UnknownRule(s.to_string()))
    }
}

/// The full catalog, in a fixed order.
pub fn default_rules() -> Vec<SubstitutionRule> {
    SubstitutionRule::ALL.to_vec()
}

/// Only the fusing direction of each pair, plus identity folding.
pub fn fusion_rules() -> Vec<SubstitutionRule> {
    vec![
        SubstitutionRule::FuseConvRelu,
        SubstitutionRule::MergeParallelConvs,
        SubstitutionRule::FoldIdentity,
        SubstitutionRule::FuseConvBatchNorm,
    ]
}

/// `all`, `fusion-only`, `none`, or a comma-separated list of rule names.
pub fn parse_rule_set(spec: &str) -> Result<Vec<SubstitutionRule>, RuleError> {
    match spec.trim() {
        "all" => Ok(default_rules()),
        "fusion-only" => Ok(fusion_rules()),
        "none" | "" => Ok(Vec::new()),
        list => list.split(',').map(|s| s.trim().parse()).collect(),
    }
}

fn conv(g: &Graph, id: NodeId) -> Option<&Conv2d> {
    match &g.node(id)?.op {
        Op::Conv2d(c) => Some(c),
        _ => None,
    }
}

/// Checks the pattern constraints of `rule` at `site`.
fn check(rule: SubstitutionRule, g: &Graph, site: &MatchSite) -> Result<(), String> {
    let b = &site.binding;
    if b.len() != rule.pattern().len() {
        return Err(format!("expected {} bound nodes", rule.pattern().len()));
    }
    let node = |id: NodeId| g.node(id).ok_or_else(|| format!("node {id} missing"));
    // `producer -> consumer` where consumer is the only reader of producer's output
    let sole_consumer = |producer: NodeId, consumer: NodeId| -> Result<(), String> {
        let n = node(consumer)?;
        if n.inputs.first() != Some(&Edge::of(producer)) {
            return Err(format!("node {consumer} does not read node {producer}"));
        }
        if g.uses(Edge::of(producer)) != 1 {
            return Err(format!("node {producer} has other consumers"));
        }
        Ok(())
    };
    match rule {
        SubstitutionRule::FuseConvRelu => {
            let c = conv(g, b[0]).ok_or("first binding is not a conv")?;
            if c.has_activation {
                return Err("conv already has an activation".into());
            }
            if node(b[1])?.op != Op::Relu {
                return Err("second binding is not a relu".into());
            }
            sole_consumer(b[0], b[1])
        }
        SubstitutionRule::SplitConvActivation => {
            let c = conv(g, b[0]).ok_or("binding is not a conv")?;
            if !c.has_activation {
                return Err("conv has no activation".into());
            }
            Ok(())
        }
        SubstitutionRule::MergeParallelConvs => {
            if b[0] >= b[1] {
                return Err("bindings must be ascending".into());
            }
            let (ca, cb) = (
                conv(g, b[0]).ok_or("first binding is not a conv")?,
                conv(g, b[1]).ok_or("second binding is not a conv")?,
            );
            if node(b[0])?.inputs != node(b[1])?.inputs {
                return Err("convs read different tensors".into());
            }
            if !ca.same_geometry(cb) {
                return Err("convs differ in geometry".into());
            }
            Ok(())
        }
        SubstitutionRule::SplitWideConv => {
            conv(g, b[0]).ok_or("first binding is not a conv")?;
            match &node(b[1])?.op {
                Op::Split { axis: 1, sizes } if sizes.len() >= 2 => {}
                _ => return Err("second binding is not a channel split".into()),
            }
            sole_consumer(b[0], b[1])
        }
        SubstitutionRule::FoldIdentity => match node(b[0])?.op {
            Op::Identity => Ok(()),
            _ => Err("binding is not an identity".into()),
        },
        SubstitutionRule::FuseConvBatchNorm => {
            let c = conv(g, b[0]).ok_or("first binding is not a conv")?;
            if c.has_activation {
                return Err("conv has an activation".into());
            }
            if !matches!(node(b[1])?.op, Op::BatchNorm(_)) {
                return Err("second binding is not a batchnorm".into());
            }
            sole_consumer(b[0], b[1])
        }
    }
}

/// Every site where `rule` applies, sorted by binding.
pub fn match_rule(rule: SubstitutionRule, graph: &Graph) -> Vec<MatchSite> {
    let mut candidates: Vec<Vec<NodeId>> = Vec::new();
    match rule {
        SubstitutionRule::FuseConvRelu | SubstitutionRule::SplitWideConv | SubstitutionRule::FuseConvBatchNorm => {
            for n in graph.op_nodes() {
                if let Some(e) = n.inputs.first() {
                    candidates.push(vec![e.node, n.id]);
                }
            }
        }
        SubstitutionRule::SplitConvActivation | SubstitutionRule::FoldIdentity => {
            candidates.extend(graph.op_nodes().map(|n| vec![n.id]));
        }
        SubstitutionRule::MergeParallelConvs => {
            let mut by_input: BTreeMap<Vec<Edge>, Vec<NodeId>> = BTreeMap::new();
            for n in graph.op_nodes() {
                if matches!(n.op, Op::Conv2d(_)) {
                    by_input.entry(n.inputs.clone()).or_default().push(n.id);
                }
            }
            for ids in by_input.values() {
                for (i, &a) in ids.iter().enumerate() {
                    for &b in &ids[i + 1..] {
                        candidates.push(vec![a, b]);
                    }
                }
            }
        }
    }
    let mut sites: Vec<MatchSite> =
        candidates.into_iter().map(|binding| MatchSite { binding }).filter(|s| check(rule, graph, s).is_ok()).collect();
    sites.sort();
    sites
}

/// Applies `rule` at `site`, returning a new graph. The input is untouched.
pub fn apply(rule: SubstitutionRule, graph: &Graph, site: &MatchSite) -> Result<Graph, RuleError> {
    check(rule, graph, site).map_err(|r| rule.invalid(site, r))?;
    let b = &site.binding;
    let mut g = graph.clone();
    match rule {
        SubstitutionRule::FuseConvRelu => {
            let (c, r) = (b[0], b[1]);
            g.replace_uses(Edge::of(r), Edge::of(c));
            g.remove_node(r);
            set_activation(&mut g, c, true);
        }
        SubstitutionRule::SplitConvActivation => {
            let c = b[0];
            let r = g.next_id();
            g.replace_uses(Edge::of(c), Edge::of(r));
            g.insert_node(Node { id: r, op: Op::Relu, inputs: vec![Edge::of(c)] });
            set_activation(&mut g, c, false);
        }
        SubstitutionRule::MergeParallelConvs => {
            let (a, bb) = (b[0], b[1]);
            let ca = conv(graph, a).expect("checked").clone();
            let cb = conv(graph, bb).expect("checked");
            let wide = Conv2d {
                out_channels: ca.out_channels + cb.out_channels,
                weight: ca.weight.iter().chain(cb.weight.iter()).copied().collect(),
                bias: ca.bias.iter().chain(cb.bias.iter()).copied().collect(),
                ..ca.clone()
            };
            let s = g.next_id();
            g.replace_uses(Edge::of(a), Edge::new(s, 0));
            g.replace_uses(Edge::of(bb), Edge::new(s, 1));
            g.remove_node(bb);
            g.node_mut(a).expect("checked").op = Op::Conv2d(wide);
            g.insert_node(Node {
                id: s,
                op: Op::Split { axis: 1, sizes: vec![ca.out_channels, cb.out_channels] },
                inputs: vec![Edge::of(a)],
            });
        }
        SubstitutionRule::SplitWideConv => {
            let (c, s) = (b[0], b[1]);
            let wide = conv(graph, c).expect("checked").clone();
            let Op::Split { sizes, .. } = &graph.node(s).expect("checked").op else { unreachable!("checked split") };
            let input = graph.node(c).expect("checked").inputs.clone();
            let filter = wide.filter_len();
            let mut ids = vec![c, s];
            let mut fresh = g.next_id();
            while ids.len() < sizes.len() {
                ids.push(fresh);
                fresh += 1;
            }
            g.remove_node(s);
            let mut offset = 0;
            for (port, (&size, &id)) in sizes.iter().zip(&ids).enumerate() {
                let part = Conv2d {
                    out_channels: size,
                    weight: Arc::from(&wide.weight[offset * filter..(offset + size) * filter]),
                    bias: Arc::from(&wide.bias[offset..offset + size]),
                    ..wide.clone()
                };
                offset += size;
                g.replace_uses(Edge::new(s, port as u32), Edge::of(id));
                g.insert_node(Node { id, op: Op::Conv2d(part), inputs: input.clone() });
            }
        }
        SubstitutionRule::FoldIdentity => {
            let i = b[0];
            let src = graph.node(i).expect("checked").inputs[0];
            g.replace_uses(Edge::of(i), src);
            g.remove_node(i);
        }
        SubstitutionRule::FuseConvBatchNorm => {
            let (c, bn_id) = (b[0], b[1]);
            let Op::BatchNorm(bn) = &graph.node(bn_id).expect("checked").op else { unreachable!("checked batchnorm") };
            let old = conv(graph, c).expect("checked");
            let filter = old.filter_len();
            let weight = old.weight.iter().enumerate().map(|(i, w)| w * bn.scale[i / filter]).collect();
            let bias = old.bias.iter().enumerate().map(|(o, v)| v * bn.scale[o] + bn.shift[o]).collect();
            g.replace_uses(Edge::of(bn_id), Edge::of(c));
            g.remove_node(bn_id);
            g.node_mut(c).expect("checked").op = Op::Conv2d(Conv2d { weight, bias, ..old.clone() });
        }
    }
    g.prune_dead();
    Ok(g)
}

fn set_activation(g: &mut Graph, id: NodeId, on: bool) {
    if let Some(Node { op: Op::Conv2d(c), .. }) = g.node_mut(id) {
        c.has_activation = on;
    }
}

/// All single-step rewrites of `graph`, in rule order then site order, with
/// duplicates (equal canonical hash) dropped. Each graph is paired with its
/// canonical hash.
pub fn neighbors_hashed(graph: &Graph, rules: &[SubstitutionRule]) -> Vec<(u64, Graph)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &rule in rules {
        for site in match_rule(rule, graph) {
            let next = apply(rule, graph, &site).expect("sites from match_rule are valid");
            let h = canonical_hash(&next);
            if seen.insert(h) {
                out.push((h, next));
            }
        }
    }
    out
}

pub fn neighbors(graph: &Graph, rules: &[SubstitutionRule]) -> Vec<Graph> {
    neighbors_hashed(graph, rules).into_iter().map(|(_, g)| g).collect()
}
