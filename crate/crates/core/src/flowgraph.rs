//! Precision-flow graphs.
//!
//! Nodes are operators or weights; an edge says in which precision, with
//! which quantization granularity and in which storage layout a tensor moves
//! from one node to the next. Three graphs describe a model: the training
//! forward pass, the training backward pass (reversed gradient edges plus
//! saved-for-backward edges) and the inference pass. Rollout is on-policy at
//! the numeric level when the inference graph is an attribute-matching
//! subgraph of the training forward graph.
//!
//! The model reads its casts from these graphs, so editing an edge changes
//! the arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocktensor::{Layout, QuantScheme};
use crate::qlinear::{LinearPlan, TensorFormat};
use crate::tinylm::ModelConfig;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("unknown precision mode {0:?} (expected bf16, unified or mixed)")]
    UnknownMode(String),
    #[error("inference graph names nodes absent from the training graph: {0:?}")]
    Namespace(Vec<String>),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("edge {0} references a missing node")]
    DanglingEdge(String),
    #[error("edge {0} has precision {1} with granularity {2}")]
    BadGranularity(String, Precision, Granularity),
    #[error("graph has no edge {0}")]
    MissingEdge(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    Fp32,
    Bf16,
    Fp8E4M3,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Bf16 => "bf16",
            Precision::Fp8E4M3 => "fp8e4m3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Granularity {
    None,
    PerGroupRow(usize),
    PerBlock(usize),
    PerGroupCol(usize),
}

impl Granularity {
    fn scheme(self) -> Option<QuantScheme> {
        match self {
            Granularity::None => None,
            Granularity::PerGroupRow(g) => Some(QuantScheme::per_group_row(g)),
            Granularity::PerBlock(g) => Some(QuantScheme::per_block(g)),
            Granularity::PerGroupCol(g) => Some(QuantScheme::per_group_col(g)),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scheme() {
            None => f.write_str("none"),
            Some(s) => f.write_str(&s.label()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeRole {
    Activation,
    Gradient,
    SavedActivation,
    WeightRead,
}

impl fmt::Display for EdgeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeRole::Activation => "activation",
            EdgeRole::Gradient => "gradient",
            EdgeRole::SavedActivation => "saved_activation",
            EdgeRole::WeightRead => "weight_read",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Operator,
    Weight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    TrainFwd,
    TrainBwd,
    Infer,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::TrainFwd => "train_fwd",
            Phase::TrainBwd => "train_bwd",
            Phase::Infer => "infer",
        }
    }
}

/// The three precision flows compared in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrecisionMode {
    Bf16,
    UnifiedFp8,
    MixedBf16TrainFp8Rollout,
}

impl PrecisionMode {
    pub const ALL: [PrecisionMode; 3] =
        [PrecisionMode::Bf16, PrecisionMode::UnifiedFp8, PrecisionMode::MixedBf16TrainFp8Rollout];

    pub fn short_name(self) -> &'static str {
        match self {
            PrecisionMode::Bf16 => "bf16",
            PrecisionMode::UnifiedFp8 => "unified",
            PrecisionMode::MixedBf16TrainFp8Rollout => "mixed",
        }
    }
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for PrecisionMode {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bf16" => Ok(PrecisionMode::Bf16),
            "unified" | "unifiedfp8" | "unified_fp8" | "fp8" => Ok(PrecisionMode::UnifiedFp8),
            "mixed" | "mixedbf16trainfp8rollout" | "bf16-train-fp8-rollout" => {
                Ok(PrecisionMode::MixedBf16TrainFp8Rollout)
            }
            _ => Err(FlowError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNode {
    pub id: String,
    pub kind: NodeKind,
    /// Storage precision of a trained parameter; `None` for operators and
    /// for untrained state such as the KV cache.
    pub master_precision: Option<Precision>,
}

/// Identity of an edge across graphs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeKey {
    pub src: String,
    pub dst: String,
    pub role: EdgeRole,
}

impl EdgeKey {
    pub fn new(src: &str, dst: &str, role: EdgeRole) -> Self {
        Self { src: src.to_string(), dst: dst.to_string(), role }
    }
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}[{}]", self.src, self.dst, self.role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub src: String,
    pub dst: String,
    pub precision: Precision,
    pub granularity: Granularity,
    pub layout: Layout,
    pub role: EdgeRole,
}

impl FlowEdge {
    pub fn key(&self) -> EdgeKey {
        EdgeKey::new(&self.src, &self.dst, self.role)
    }

    /// Value-level format for the casts in `qlinear`.
    pub fn format(&self) -> TensorFormat {
        match (self.precision, self.granularity.scheme()) {
            (Precision::Fp8E4M3, Some(s)) => TensorFormat::Fp8(s),
            (Precision::Fp8E4M3, None) => TensorFormat::Fp8(QuantScheme::per_group_row(QuantScheme::DEFAULT_GROUP)),
            (Precision::Bf16, _) => TensorFormat::Bf16,
            (Precision::Fp32, _) => TensorFormat::Fp32,
        }
    }

    fn set_format(&mut self, fmt: EdgeFormat) {
        self.precision = fmt.precision;
        self.granularity = fmt.granularity;
        self.layout = fmt.layout;
    }
}

/// Attribute triple carried by an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeFormat {
    pub precision: Precision,
    pub granularity: Granularity,
    pub layout: Layout,
}

impl EdgeFormat {
    pub const BF16: Self = Self { precision: Precision::Bf16, granularity: Granularity::None, layout: Layout::Row };
    pub const FP32: Self = Self { precision: Precision::Fp32, granularity: Granularity::None, layout: Layout::Row };

    pub fn fp8(granularity: Granularity, layout: Layout) -> Self {
        Self { precision: Precision::Fp8E4M3, granularity, layout }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub phase: Phase,
    nodes: Vec<FlowNode>,
    edges: Vec<FlowEdge>,
    #[serde(skip)]
    node_index: BTreeMap<String, usize>,
    #[serde(skip)]
    edge_index: BTreeMap<EdgeKey, usize>,
}

impl FlowGraph {
    pub fn new(phase: Phase) -> Self {
        Self { phase, nodes: Vec::new(), edges: Vec::new(), node_index: BTreeMap::new(), edge_index: BTreeMap::new() }
    }

    pub fn add_node(&mut self, id: &str, kind: NodeKind, master_precision: Option<Precision>) -> Result<(), FlowError> {
        if self.node_index.contains_key(id) {
            return Err(FlowError::DuplicateNode(id.to_string()));
        }
        self.node_index.insert(id.to_string(), self.nodes.len());
        self.nodes.push(FlowNode { id: id.to_string(), kind, master_precision });
        Ok(())
    }

    /// Adds or replaces the edge with the same `(src, dst, role)`.
    pub fn add_edge(&mut self, src: &str, dst: &str, role: EdgeRole, fmt: EdgeFormat) -> Result<(), FlowError> {
        let key = EdgeKey::new(src, dst, role);
        if !self.node_index.contains_key(src) || !self.node_index.contains_key(dst) {
            return Err(FlowError::DanglingEdge(key.to_string()));
        }
        let edge = FlowEdge {
            src: src.to_string(),
            dst: dst.to_string(),
            precision: fmt.precision,
            granularity: fmt.granularity,
            layout: fmt.layout,
            role,
        };
        check_granularity(&edge)?;
        match self.edge_index.get(&key) {
            Some(&i) => self.edges[i] = edge,
            None => {
                self.edge_index.insert(key, self.edges.len());
                self.edges.push(edge);
            }
        }
        Ok(())
    }

    /// Rewrites the attributes of an existing edge.
    pub fn set_edge(&mut self, src: &str, dst: &str, role: EdgeRole, fmt: EdgeFormat) -> Result<(), FlowError> {
        let key = EdgeKey::new(src, dst, role);
        let &i = self.edge_index.get(&key).ok_or_else(|| FlowError::MissingEdge(key.to_string()))?;
        let mut edge = self.edges[i].clone();
        edge.set_format(fmt);
        check_granularity(&edge)?;
        self.edges[i] = edge;
        Ok(())
    }

    pub fn nodes(&self) -> &[FlowNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[FlowEdge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.node_index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn edge(&self, src: &str, dst: &str, role: EdgeRole) -> Option<&FlowEdge> {
        self.edge_index.get(&EdgeKey::new(src, dst, role)).map(|&i| &self.edges[i])
    }

    /// Format of a required edge.
    pub fn format(&self, src: &str, dst: &str, role: EdgeRole) -> Result<TensorFormat, FlowError> {
        self.edge(src, dst, role)
            .map(FlowEdge::format)
            .ok_or_else(|| FlowError::MissingEdge(EdgeKey::new(src, dst, role).to_string()))
    }

    pub fn node_ids(&self) -> BTreeSet<&str> {
        self.nodes.iter().map(|n| n.id.as_str()).collect()
    }

    /// Re-checks every structural invariant.
    pub fn validate(&self) -> Result<(), FlowError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(FlowError::DuplicateNode(n.id.clone()));
            }
        }
        for e in &self.edges {
            if !seen.contains(e.src.as_str()) || !seen.contains(e.dst.as_str()) {
                return Err(FlowError::DanglingEdge(e.key().to_string()));
            }
            check_granularity(e)?;
        }
        Ok(())
    }

    fn reindex(&mut self) {
        self.node_index = self.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        self.edge_index = self.edges.iter().enumerate().map(|(i, e)| (e.key(), i)).collect();
    }

    /// Parses the JSON form produced by `serde_json::to_string`.
    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        let mut g: FlowGraph = serde_json::from_str(s)?;
        g.reindex();
        Ok(g)
    }
}

fn check_granularity(e: &FlowEdge) -> Result<(), FlowError> {
    let ok = match e.precision {
        Precision::Fp8E4M3 => e.granularity != Granularity::None,
        _ => e.granularity == Granularity::None,
    };
    if ok {
        Ok(())
    } else {
        Err(FlowError::BadGranularity(e.key().to_string(), e.precision, e.granularity))
    }
}

/// The training-forward, training-backward and inference graphs of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    pub mode: PrecisionMode,
    pub train_fwd: FlowGraph,
    pub train_bwd: FlowGraph,
    pub infer: FlowGraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub edge: EdgeKey,
    pub attribute: &'static str,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsistencyReport {
    pub consistent: bool,
    pub mismatches: Vec<Mismatch>,
    pub missing_in_train: Vec<EdgeKey>,
}

impl ConsistencyReport {
    /// Distinct edges with at least one differing attribute.
    pub fn mismatched_edges(&self) -> Vec<&EdgeKey> {
        let mut out: Vec<&EdgeKey> = Vec::new();
        for m in &self.mismatches {
            if out.last() != Some(&&m.edge) && !out.contains(&&m.edge) {
                out.push(&m.edge);
            }
        }
        out
    }
}

/// Compares every inference edge with its training-forward counterpart.
///
/// `expected` values come from the training graph. Weight master precision
/// is not an edge attribute and is never compared.
pub fn check_subgraph(infer: &FlowGraph, train_fwd: &FlowGraph) -> Result<ConsistencyReport, FlowError> {
    let train_ids = train_fwd.node_ids();
    let missing: Vec<String> =
        infer.node_ids().into_iter().filter(|id| !train_ids.contains(id)).map(str::to_string).collect();
    if !missing.is_empty() {
        return Err(FlowError::Namespace(missing));
    }
    let mut mismatches = Vec::new();
    let mut missing_in_train = Vec::new();
    for e in infer.edges() {
        let Some(t) = train_fwd.edge(&e.src, &e.dst, e.role) else {
            missing_in_train.push(e.key());
            continue;
        };
        let mut differ = |attribute: &'static str, expected: String, actual: String| {
            if expected != actual {
                mismatches.push(Mismatch { edge: e.key(), attribute, expected, actual });
            }
        };
        differ("precision", t.precision.to_string(), e.precision.to_string());
        differ("granularity", t.granularity.to_string(), e.granularity.to_string());
        differ("layout", layout_name(t.layout).to_string(), layout_name(e.layout).to_string());
    }
    Ok(ConsistencyReport { consistent: mismatches.is_empty() && missing_in_train.is_empty(), mismatches, missing_in_train })
}

fn layout_name(l: Layout) -> &'static str {
    match l {
        Layout::Row => "row",
        Layout::Col => "col",
    }
}

/// Graphviz rendering with nodes sorted by id and edges by key.
pub fn export_dot(g: &FlowGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", g.phase.name());
    let _ = writeln!(out, "  rankdir=LR;");
    let mut nodes: Vec<&FlowNode> = g.nodes().iter().collect();
    nodes.sort_by(|a, b| a.id.cmp(&b.id));
    for n in nodes {
        let shape = match n.kind {
            NodeKind::Operator => "box",
            NodeKind::Weight => "ellipse",
        };
        match n.master_precision {
            Some(p) => {
                let _ = writeln!(out, "  \"{}\" [shape={shape}, xlabel=\"master {p}\"];", n.id);
            }
            None => {
                let _ = writeln!(out, "  \"{}\" [shape={shape}];", n.id);
            }
        }
    }
    let mut edges: Vec<&FlowEdge> = g.edges().iter().collect();
    edges.sort_by_key(|e| e.key());
    for e in edges {
        let style = match e.role {
            EdgeRole::Activation => "solid",
            EdgeRole::Gradient => "dashed",
            EdgeRole::SavedActivation => "dotted",
            EdgeRole::WeightRead => "bold",
        };
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}/{}\", style={style}, layout={}];",
            e.src,
            e.dst,
            e.precision,
            e.granularity,
            layout_name(e.layout)
        );
    }
    out.push_str("}\n");
    out
}

/// Node ids of the linear operator `name`'s neighbours in the model graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearSite {
    pub op: String,
    pub weight: String,
    pub producer: String,
    pub consumer: String,
}

/// Id prefix of transformer block `l`.
pub fn layer_prefix(l: usize) -> String {
    format!("layer{l}.")
}

/// Linear sites in parameter order: per block qkv, o, up, down; then head.
pub fn linear_sites(n_layers: usize) -> Vec<LinearSite> {
    let site = |op: String, producer: String, consumer: String| LinearSite {
        weight: format!("{op}.weight"),
        op,
        producer,
        consumer,
    };
    let mut out = Vec::new();
    for l in 0..n_layers {
        let p = layer_prefix(l);
        out.push(site(format!("{p}qkv"), format!("{p}attn_norm"), format!("{p}rope")));
        out.push(site(format!("{p}o"), format!("{p}attn"), format!("{p}attn_residual")));
        out.push(site(format!("{p}up"), format!("{p}mlp_norm"), format!("{p}act")));
        out.push(site(format!("{p}down"), format!("{p}act"), format!("{p}mlp_residual")));
    }
    out.push(site("head".into(), "final_norm".into(), "logits".into()));
    out
}

/// Id of the node whose output feeds block `l` (or the final norm when
/// `l == n_layers`).
pub fn stream_source(l: usize) -> String {
    if l == 0 {
        "embed".into()
    } else {
        format!("{}mlp_residual", layer_prefix(l - 1))
    }
}

struct Formats {
    linear_in: EdgeFormat,
    weight_read: EdgeFormat,
    saved_linear_in: EdgeFormat,
    saved_weight: EdgeFormat,
}

impl Formats {
    fn bf16() -> Self {
        let col = EdgeFormat { layout: Layout::Col, ..EdgeFormat::BF16 };
        Self { linear_in: EdgeFormat::BF16, weight_read: EdgeFormat::BF16, saved_linear_in: EdgeFormat::BF16, saved_weight: col }
    }

    fn fp8(g: usize) -> Self {
        Self {
            linear_in: EdgeFormat::fp8(Granularity::PerGroupRow(g), Layout::Row),
            weight_read: EdgeFormat::fp8(Granularity::PerBlock(g), Layout::Row),
            saved_linear_in: EdgeFormat::fp8(Granularity::PerGroupRow(g), Layout::Row),
            saved_weight: EdgeFormat::fp8(Granularity::PerBlock(g), Layout::Col),
        }
    }
}

/// Builds the three graphs of `mode` for the block structure of `cfg`.
pub fn build_graphs(cfg: &ModelConfig, mode: PrecisionMode) -> Result<GraphSet, FlowError> {
    let g = cfg.g;
    let (train, infer) = match mode {
        PrecisionMode::Bf16 => (Formats::bf16(), Formats::bf16()),
        PrecisionMode::UnifiedFp8 => (Formats::fp8(g), Formats::fp8(g)),
        PrecisionMode::MixedBf16TrainFp8Rollout => (Formats::bf16(), Formats::fp8(g)),
    };
    let infer_master = match mode {
        PrecisionMode::Bf16 => Precision::Bf16,
        _ => Precision::Fp8E4M3,
    };
    let train_fwd = forward_graph(cfg.n_layers, Phase::TrainFwd, &train, Precision::Bf16)?;
    let infer = forward_graph(cfg.n_layers, Phase::Infer, &infer, infer_master)?;
    let train_bwd = backward_graph(&train_fwd, cfg.n_layers, &train)?;
    Ok(GraphSet { mode, train_fwd, train_bwd, infer })
}

/// Every edge in every graph of `cfg` set to FP32; the reference flow for
/// finite-difference probes.
pub fn build_fp32_graphs(cfg: &ModelConfig) -> Result<GraphSet, FlowError> {
    let mut set = build_graphs(cfg, PrecisionMode::Bf16)?;
    for graph in [&mut set.train_fwd, &mut set.train_bwd, &mut set.infer] {
        let keys: Vec<EdgeKey> = graph.edges().iter().map(FlowEdge::key).collect();
        for k in keys {
            let layout = graph.edge(&k.src, &k.dst, k.role).map(|e| e.layout).unwrap_or(Layout::Row);
            graph.set_edge(&k.src, &k.dst, k.role, EdgeFormat { layout, ..EdgeFormat::FP32 })?;
        }
    }
    Ok(set)
}

fn forward_graph(n_layers: usize, phase: Phase, f: &Formats, master: Precision) -> Result<FlowGraph, FlowError> {
    use EdgeRole::*;
    let bf = EdgeFormat::BF16;
    let mut gr = FlowGraph::new(phase);
    gr.add_node("embed.weight", NodeKind::Weight, Some(Precision::Bf16))?;
    gr.add_node("embed", NodeKind::Operator, None)?;
    gr.add_edge("embed.weight", "embed", WeightRead, bf)?;
    for l in 0..n_layers {
        let p = layer_prefix(l);
        let n = |s: &str| format!("{p}{s}");
        let src = stream_source(l);
        for op in ["attn_norm", "qkv", "rope", "attn", "o", "attn_residual", "mlp_norm", "up", "act", "down", "mlp_residual"] {
            gr.add_node(&n(op), NodeKind::Operator, None)?;
        }
        gr.add_node(&n("kv_cache"), NodeKind::Weight, None)?;
        for w in ["qkv", "o", "up", "down"] {
            gr.add_node(&n(&format!("{w}.weight")), NodeKind::Weight, Some(master))?;
        }
        gr.add_edge(&src, &n("attn_norm"), Activation, bf)?;
        gr.add_edge(&src, &n("attn_residual"), Activation, bf)?;
        gr.add_edge(&n("qkv"), &n("rope"), Activation, bf)?;
        gr.add_edge(&n("rope"), &n("attn"), Activation, bf)?;
        gr.add_edge(&n("rope"), &n("kv_cache"), Activation, bf)?;
        gr.add_edge(&n("kv_cache"), &n("attn"), Activation, bf)?;
        gr.add_edge(&n("o"), &n("attn_residual"), Activation, bf)?;
        gr.add_edge(&n("attn_residual"), &n("mlp_norm"), Activation, bf)?;
        gr.add_edge(&n("attn_residual"), &n("mlp_residual"), Activation, bf)?;
        gr.add_edge(&n("up"), &n("act"), Activation, bf)?;
        gr.add_edge(&n("down"), &n("mlp_residual"), Activation, bf)?;
    }
    gr.add_node("final_norm", NodeKind::Operator, None)?;
    gr.add_node("head", NodeKind::Operator, None)?;
    gr.add_node("head.weight", NodeKind::Weight, Some(master))?;
    gr.add_node("logits", NodeKind::Operator, None)?;
    gr.add_edge(&stream_source(n_layers), "final_norm", Activation, bf)?;
    gr.add_edge("head", "logits", Activation, bf)?;
    for s in linear_sites(n_layers) {
        gr.add_edge(&s.producer, &s.op, Activation, f.linear_in)?;
        gr.add_edge(&s.weight, &s.op, WeightRead, f.weight_read)?;
    }
    Ok(gr)
}

fn backward_graph(fwd: &FlowGraph, n_layers: usize, f: &Formats) -> Result<FlowGraph, FlowError> {
    let mut gr = FlowGraph::new(Phase::TrainBwd);
    for n in fwd.nodes() {
        gr.add_node(&n.id, n.kind, n.master_precision)?;
    }
    for e in fwd.edges() {
        let into_weight = fwd.node(&e.src).map(|n| n.kind == NodeKind::Weight).unwrap_or(false)
            && e.role == EdgeRole::WeightRead;
        // Parameter gradients go to the optimizer in FP32; gradients between
        // operators stay BF16.
        let fmt = if into_weight { EdgeFormat::FP32 } else { EdgeFormat::BF16 };
        gr.add_edge(&e.dst, &e.src, EdgeRole::Gradient, fmt)?;
    }
    let linear_ops: BTreeSet<String> = linear_sites(n_layers).into_iter().map(|s| s.op).collect();
    for s in linear_sites(n_layers) {
        gr.add_edge(&s.producer, &s.op, EdgeRole::SavedActivation, f.saved_linear_in)?;
        gr.add_edge(&s.weight, &s.op, EdgeRole::SavedActivation, f.saved_weight)?;
    }
    // Non-linear operators keep their BF16 inputs for the backward pass.
    for e in fwd.edges() {
        let dst_op = fwd.node(&e.dst).map(|n| n.kind == NodeKind::Operator).unwrap_or(false);
        let keeps_input = !e.dst.ends_with("residual") && e.dst != "logits";
        if e.role == EdgeRole::Activation && dst_op && keeps_input && !linear_ops.contains(&e.dst) {
            gr.add_edge(&e.src, &e.dst, EdgeRole::SavedActivation, EdgeFormat::BF16)?;
        }
    }
    Ok(gr)
}

impl GraphSet {
    /// Linear-layer plan for `site` as seen by the training pass.
    pub fn train_plan(&self, site: &LinearSite) -> Result<LinearPlan, FlowError> {
        use EdgeRole::*;
        let (f, b) = (&self.train_fwd, &self.train_bwd);
        Ok(LinearPlan {
            input: f.format(&site.producer, &site.op, Activation)?,
            weight: f.format(&site.weight, &site.op, WeightRead)?,
            output: f.format(&site.op, &site.consumer, Activation)?,
            saved_input: b.format(&site.producer, &site.op, SavedActivation)?,
            saved_weight: b.format(&site.weight, &site.op, SavedActivation)?,
            grad_output: b.format(&site.consumer, &site.op, Gradient)?,
            grad_input: b.format(&site.op, &site.producer, Gradient)?,
            grad_weight: b.format(&site.op, &site.weight, Gradient)?,
        })
    }

    /// Linear-layer plan for `site` as seen by rollout; backward fields are
    /// copied from training and never used.
    pub fn infer_plan(&self, site: &LinearSite) -> Result<LinearPlan, FlowError> {
        use EdgeRole::*;
        let i = &self.infer;
        Ok(LinearPlan {
            input: i.format(&site.producer, &site.op, Activation)?,
            weight: i.format(&site.weight, &site.op, WeightRead)?,
            output: i.format(&site.op, &site.consumer, Activation)?,
            ..self.train_plan(site)?
        })
    }

    pub fn check(&self) -> Result<ConsistencyReport, FlowError> {
        check_subgraph(&self.infer, &self.train_fwd)
    }

    pub fn graph(&self, phase: Phase) -> &FlowGraph {
        match phase {
            Phase::TrainFwd => &self.train_fwd,
            Phase::TrainBwd => &self.train_bwd,
            Phase::Infer => &self.infer,
        }
    }

    pub fn graph_mut(&mut self, phase: Phase) -> &mut FlowGraph {
        match phase {
            Phase::TrainFwd => &mut self.train_fwd,
            Phase::TrainBwd => &mut self.train_bwd,
            Phase::Infer => &mut self.infer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig { n_layers: layers, ..ModelConfig::default() }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("unified".parse::<PrecisionMode>().unwrap(), PrecisionMode::UnifiedFp8);
        assert_eq!("BF16".parse::<PrecisionMode>().unwrap(), PrecisionMode::Bf16);
        assert_eq!("mixed".parse::<PrecisionMode>().unwrap(), PrecisionMode::MixedBf16TrainFp8Rollout);
        assert!(matches!("fp4".parse::<PrecisionMode>(), Err(FlowError::UnknownMode(_))));
    }

    #[test]
    fn unified_and_bf16_are_consistent() {
        for mode in [PrecisionMode::UnifiedFp8, PrecisionMode::Bf16] {
            let set = build_graphs(&cfg(2), mode).unwrap();
            let r = set.check().unwrap();
            assert!(r.consistent, "{mode}: {r:?}");
        }
    }

    #[test]
    fn mixed_mismatches_are_the_linear_fp8_edges() {
        for layers in 1..4 {
            let set = build_graphs(&cfg(layers), PrecisionMode::MixedBf16TrainFp8Rollout).unwrap();
            let r = set.check().unwrap();
            assert!(!r.consistent);
            assert!(r.missing_in_train.is_empty());
            let mut got: Vec<EdgeKey> = r.mismatched_edges().into_iter().cloned().collect();
            got.sort();
            let mut want = Vec::new();
            for s in linear_sites(layers) {
                want.push(EdgeKey::new(&s.producer, &s.op, EdgeRole::Activation));
                want.push(EdgeKey::new(&s.weight, &s.op, EdgeRole::WeightRead));
            }
            want.sort();
            assert_eq!(got.len(), 2 * (4 * layers + 1));
            assert_eq!(got, want);
        }
    }

    #[test]
    fn graph_against_itself_is_consistent() {
        for mode in PrecisionMode::ALL {
            let set = build_graphs(&cfg(2), mode).unwrap();
            for g in [&set.train_fwd, &set.train_bwd, &set.infer] {
                assert!(check_subgraph(g, g).unwrap().consistent);
            }
        }
    }

    #[test]
    fn single_flipped_precision_is_reported() {
        let set = build_graphs(&cfg(2), PrecisionMode::UnifiedFp8).unwrap();
        let mut infer = set.infer.clone();
        infer.set_edge("layer1.up", "layer1.act", EdgeRole::Activation, EdgeFormat::FP32).unwrap();
        let r = check_subgraph(&infer, &set.train_fwd).unwrap();
        assert_eq!(r.mismatches.len(), 1);
        assert_eq!(r.mismatches[0].edge, EdgeKey::new("layer1.up", "layer1.act", EdgeRole::Activation));
        assert_eq!(r.mismatches[0].attribute, "precision");
        assert_eq!(r.mismatches[0].expected, "bf16");
        assert_eq!(r.mismatches[0].actual, "fp32");
    }

    #[test]
    fn namespace_mismatch_is_an_error() {
        let set = build_graphs(&cfg(2), PrecisionMode::UnifiedFp8).unwrap();
        let small = build_graphs(&cfg(1), PrecisionMode::UnifiedFp8).unwrap();
        assert!(matches!(check_subgraph(&set.infer, &small.train_fwd), Err(FlowError::Namespace(_))));
    }

    #[test]
    fn extra_infer_edge_is_missing_in_train() {
        let set = build_graphs(&cfg(1), PrecisionMode::Bf16).unwrap();
        let mut infer = set.infer.clone();
        infer.add_edge("embed", "head", EdgeRole::Activation, EdgeFormat::BF16).unwrap();
        let r = check_subgraph(&infer, &set.train_fwd).unwrap();
        assert!(!r.consistent);
        assert_eq!(r.missing_in_train, vec![EdgeKey::new("embed", "head", EdgeRole::Activation)]);
    }

    #[test]
    fn backward_graph_reverses_forward_topology() {
        for mode in PrecisionMode::ALL {
            let set = build_graphs(&cfg(2), mode).unwrap();
            assert_eq!(set.train_bwd.node_ids(), set.train_fwd.node_ids());
            let fwd: BTreeSet<(String, String)> =
                set.train_fwd.edges().iter().map(|e| (e.src.clone(), e.dst.clone())).collect();
            let rev: BTreeSet<(String, String)> = set
                .train_bwd
                .edges()
                .iter()
                .filter(|e| e.role != EdgeRole::SavedActivation)
                .map(|e| (e.dst.clone(), e.src.clone()))
                .collect();
            assert_eq!(fwd, rev);
            assert!(set.train_bwd.edges().iter().filter(|e| e.role == EdgeRole::Gradient).all(|e| e.precision != Precision::Fp8E4M3));
        }
    }

    #[test]
    fn unified_edge_attributes() {
        let set = build_graphs(&cfg(1), PrecisionMode::UnifiedFp8).unwrap();
        let plan = set.train_plan(&linear_sites(1)[0]).unwrap();
        assert_eq!(plan, LinearPlan::unified_fp8(cfg(1).g));
        assert_eq!(set.infer_plan(&linear_sites(1)[0]).unwrap(), plan);
        for n in set.train_fwd.nodes().iter().filter(|n| n.id.ends_with(".weight")) {
            assert_eq!(n.master_precision, Some(Precision::Bf16));
        }
        let fp8: Vec<&FlowEdge> = set.train_fwd.edges().iter().filter(|e| e.precision == Precision::Fp8E4M3).collect();
        assert_eq!(fp8.len(), 2 * 5);
        let mixed = build_graphs(&cfg(1), PrecisionMode::MixedBf16TrainFp8Rollout).unwrap();
        assert!(mixed.train_fwd.edges().iter().all(|e| e.precision == Precision::Bf16));
        let bf = build_graphs(&cfg(1), PrecisionMode::Bf16).unwrap();
        for g in [&bf.train_fwd, &bf.train_bwd, &bf.infer] {
            assert!(g.edges().iter().all(|e| e.precision != Precision::Fp8E4M3));
        }
    }

    #[test]
    fn fp8_edges_need_granularity() {
        let mut g = FlowGraph::new(Phase::Infer);
        g.add_node("a", NodeKind::Operator, None).unwrap();
        g.add_node("b", NodeKind::Operator, None).unwrap();
        let bad = EdgeFormat { precision: Precision::Fp8E4M3, granularity: Granularity::None, layout: Layout::Row };
        assert!(matches!(g.add_edge("a", "b", EdgeRole::Activation, bad), Err(FlowError::BadGranularity(..))));
        assert!(matches!(g.add_edge("a", "c", EdgeRole::Activation, EdgeFormat::BF16), Err(FlowError::DanglingEdge(_))));
        assert!(matches!(g.add_node("a", NodeKind::Weight, None), Err(FlowError::DuplicateNode(_))));
    }

    #[test]
    fn dot_small_graphs() {
        let g = FlowGraph::new(Phase::Infer);
        assert_eq!(export_dot(&g), "digraph \"infer\" {\n  rankdir=LR;\n}\n");
        let mut g = FlowGraph::new(Phase::TrainFwd);
        g.add_node("w", NodeKind::Weight, Some(Precision::Bf16)).unwrap();
        assert_eq!(
            export_dot(&g),
            "digraph \"train_fwd\" {\n  rankdir=LR;\n  \"w\" [shape=ellipse, xlabel=\"master bf16\"];\n}\n"
        );
    }

    #[test]
    fn json_round_trip() {
        let set = build_graphs(&cfg(1), PrecisionMode::UnifiedFp8).unwrap();
        let s = serde_json::to_string(&set.train_bwd).unwrap();
        let back = FlowGraph::from_json(&s).unwrap();
        assert_eq!(back, set.train_bwd);
        assert!(back.edge("head", "head.weight", EdgeRole::Gradient).is_some());
    }
}
