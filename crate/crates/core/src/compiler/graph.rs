use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::CompileError;
use crate::model::{FfnKind, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOp {
    Input,
    Layernorm,
    Matmul,
    BatchMatmul,
    Softmax,
    Add,
    Mul,
    Relu,
    Silu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub op: NodeOp,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_in: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_out: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_head: Option<u32>,
}

impl GraphNode {
    fn new(id: &str, op: NodeOp, inputs: &[&str]) -> Self {
        GraphNode {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            d_in: None,
            d_out: None,
            heads: None,
            kv_heads: None,
            d_head: None,
        }
    }

    fn matmul(id: &str, input: &str, d_in: u32, d_out: u32) -> Self {
        GraphNode { d_in: Some(d_in), d_out: Some(d_out), ..GraphNode::new(id, NodeOp::Matmul, &[input]) }
    }

    fn attention(id: &str, inputs: &[&str], m: &ModelConfig) -> Self {
        GraphNode {
            heads: Some(m.n_heads),
            kv_heads: Some(m.n_kv_heads),
            d_head: Some(m.d_head),
            ..GraphNode::new(id, NodeOp::BatchMatmul, inputs)
        }
    }
}

/// One decoder block, repeated `n_layers` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderGraph {
    pub name: String,
    pub n_layers: u32,
    pub max_ctl: u32,
    pub nodes: Vec<GraphNode>,
}

impl DecoderGraph {
    pub fn from_model(m: &ModelConfig) -> DecoderGraph {
        let d = m.d_model();
        let dkv = m.d_kv();
        let f = m.ffn_dim;
        let mut nodes = vec![
            GraphNode { d_out: Some(d), ..GraphNode::new("x", NodeOp::Input, &[]) },
            GraphNode::new("ln1", NodeOp::Layernorm, &["x"]),
            GraphNode::matmul("q", "ln1", d, d),
            GraphNode::matmul("k", "ln1", d, dkv),
            GraphNode::matmul("v", "ln1", d, dkv),
            GraphNode::attention("qk", &["q", "k"], m),
            GraphNode::new("softmax", NodeOp::Softmax, &["qk"]),
            GraphNode::attention("sv", &["softmax", "v"], m),
            GraphNode::matmul("o", "sv", d, d),
            GraphNode::new("res1", NodeOp::Add, &["x", "o"]),
            GraphNode::new("ln2", NodeOp::Layernorm, &["res1"]),
            GraphNode::matmul("up", "ln2", d, f),
        ];
        match m.ffn {
            FfnKind::Relu => {
                nodes.push(GraphNode::new("act", NodeOp::Relu, &["up"]));
                nodes.push(GraphNode::matmul("down", "act", f, d));
            }
            FfnKind::Swiglu => {
                nodes.push(GraphNode::matmul("gate", "ln2", d, f));
                nodes.push(GraphNode::new("act", NodeOp::Silu, &["gate"]));
                nodes.push(GraphNode::new("glu", NodeOp::Mul, &["act", "up"]));
                nodes.push(GraphNode::matmul("down", "glu", f, d));
            }
        }
        nodes.push(GraphNode::new("res2", NodeOp::Add, &["res1", "down"]));
        DecoderGraph { name: m.name.clone(), n_layers: m.n_layers, max_ctl: m.max_ctl, nodes }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CompileError> {
        serde_json::from_str(s).map_err(|e| CompileError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Input,
    Norm,
    QkvGen,
    Qkt,
    Softmax,
    Sv,
    Proj,
    Residual,
    Ffn1,
    Act,
    Ffn2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedGraph {
    pub graph: DecoderGraph,
    pub roles: Vec<(String, Role)>,
    pub gqa: bool,
    pub swiglu: bool,
    pub unmatched: Vec<String>,
}

impl AnnotatedGraph {
    pub fn role(&self, id: &str) -> Option<Role> {
        self.roles.iter().find(|(n, _)| n == id).map(|(_, r)| *r)
    }

    /// Model shape recovered from the matched graph.
    pub fn model_config(&self) -> Result<ModelConfig, CompileError> {
        let g = &self.graph;
        let node = |role: Role| {
            self.roles
                .iter()
                .find(|(_, r)| *r == role)
                .and_then(|(id, _)| g.nodes.iter().find(|n| &n.id == id))
                .ok_or_else(|| CompileError::Unmatched(vec![format!("{role:?}")]))
        };
        let qk = node(Role::Qkt)?;
        let ffn1 = node(Role::Ffn1)?;
        let m = ModelConfig {
            name: g.name.clone(),
            n_layers: g.n_layers,
            n_heads: qk.heads.unwrap_or(0),
            n_kv_heads: qk.kv_heads.unwrap_or(0),
            d_head: qk.d_head.unwrap_or(0),
            ffn_dim: ffn1.d_out.unwrap_or(0),
            ffn: if self.swiglu { FfnKind::Swiglu } else { FfnKind::Relu },
            max_ctl: g.max_ctl,
        };
        m.validate().map_err(CompileError::Malformed)?;
        Ok(m)
    }
}

/// Classifies graph nodes into decoder roles and detects GQA and SwiGLU.
pub fn match_patterns(graph: &DecoderGraph) -> Result<AnnotatedGraph, CompileError> {
    let idx: HashMap<&str, usize> = graph.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    if idx.len() != graph.nodes.len() {
        return Err(CompileError::Malformed("duplicate node id".into()));
    }
    let mut dims: Vec<u32> = Vec::with_capacity(graph.nodes.len());
    for (i, n) in graph.nodes.iter().enumerate() {
        for inp in &n.inputs {
            match idx.get(inp.as_str()) {
                Some(&j) if j < i => {}
                Some(_) => {
                    return Err(CompileError::Malformed(format!("{}: input {inp} is not earlier (cycle)", n.id)))
                }
                None => return Err(CompileError::Malformed(format!("{}: unknown input {inp}", n.id))),
            }
        }
        let in_dim = |k: usize| n.inputs.get(k).map(|s| dims[idx[s.as_str()]]);
        let dim = match n.op {
            NodeOp::Input => n.d_out.ok_or_else(|| CompileError::Unshaped(n.id.clone()))?,
            NodeOp::Matmul => {
                let (di, dout) = match (n.d_in, n.d_out) {
                    (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                    _ => return Err(CompileError::Unshaped(n.id.clone())),
                };
                if n.inputs.len() != 1 || in_dim(0) != Some(di) {
                    return Err(CompileError::Malformed(format!("{}: input width {:?} != d_in {di}", n.id, in_dim(0))));
                }
                dout
            }
            NodeOp::BatchMatmul => {
                let (h, kv, dh) = match (n.heads, n.kv_heads, n.d_head) {
                    (Some(a), Some(b), Some(c)) if a > 0 && b > 0 && c > 0 => (a, b, c),
                    _ => return Err(CompileError::Unshaped(n.id.clone())),
                };
                if n.inputs.len() != 2 {
                    return Err(CompileError::Malformed(format!("{}: needs two inputs", n.id)));
                }
                if in_dim(1) != Some(kv * dh) {
                    return Err(CompileError::Malformed(format!("{}: kv width mismatch", n.id)));
                }
                h * dh
            }
            NodeOp::Add | NodeOp::Mul => {
                if n.inputs.len() != 2 || in_dim(0) != in_dim(1) {
                    return Err(CompileError::Malformed(format!("{}: operand widths differ", n.id)));
                }
                in_dim(0).unwrap_or(0)
            }
            NodeOp::Layernorm | NodeOp::Softmax | NodeOp::Relu | NodeOp::Silu => {
                if n.inputs.len() != 1 {
                    return Err(CompileError::Malformed(format!("{}: needs one input", n.id)));
                }
                in_dim(0).unwrap_or(0)
            }
        };
        dims.push(dim);
    }

    let consumers =
        |id: &str| -> Vec<&GraphNode> { graph.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == id)).collect() };
    let op_of = |id: &str| graph.nodes[idx[id]].op;
    let mut claims: Vec<Vec<Role>> = vec![Vec::new(); graph.nodes.len()];
    let mut gqa = false;
    let mut swiglu = false;

    for (i, n) in graph.nodes.iter().enumerate() {
        match n.op {
            NodeOp::Input => claims[i].push(Role::Input),
            NodeOp::Layernorm => claims[i].push(Role::Norm),
            NodeOp::Add => claims[i].push(Role::Residual),
            NodeOp::Softmax => claims[i].push(Role::Softmax),
            NodeOp::Relu | NodeOp::Silu => claims[i].push(Role::Act),
            NodeOp::Mul => {
                let gated = n.inputs.iter().any(|s| op_of(s) == NodeOp::Silu);
                if gated {
                    claims[i].push(Role::Act);
                }
            }
            NodeOp::BatchMatmul => {
                if consumers(&n.id).iter().any(|c| c.op == NodeOp::Softmax) {
                    claims[i].push(Role::Qkt);
                    let q = &graph.nodes[idx[n.inputs[0].as_str()]];
                    let k = &graph.nodes[idx[n.inputs[1].as_str()]];
                    if q.d_out != k.d_out || n.heads != n.kv_heads {
                        gqa = true;
                    }
                }
                if op_of(&n.inputs[0]) == NodeOp::Softmax {
                    claims[i].push(Role::Sv);
                }
            }
            NodeOp::Matmul => {}
        }
    }
    let has = |claims: &Vec<Vec<Role>>, id: &str, r: Role| claims[idx[id]].contains(&r);
    for (i, n) in graph.nodes.iter().enumerate() {
        if n.op != NodeOp::Matmul {
            continue;
        }
        let mut roles = Vec::new();
        if consumers(&n.id).iter().any(|c| has(&claims, &c.id, Role::Qkt) || has(&claims, &c.id, Role::Sv)) {
            roles.push(Role::QkvGen);
        }
        let src = n.inputs[0].as_str();
        if has(&claims, src, Role::Sv) {
            roles.push(Role::Proj);
        }
        if has(&claims, src, Role::Act) {
            roles.push(Role::Ffn2);
        }
        // First FFN projection: feeds the second one only through activation nodes.
        let feeds_ffn2 = consumers(&n.id).iter().any(|c| {
            has(&claims, &c.id, Role::Act)
                && (consumers(&c.id).iter().any(|d| d.op == NodeOp::Matmul && has(&claims, &d.inputs[0], Role::Act))
                    || consumers(&c.id).iter().any(|d| has(&claims, &d.id, Role::Act)))
        });
        if feeds_ffn2 {
            roles.push(Role::Ffn1);
        }
        claims[i] = roles;
    }
    for n in &graph.nodes {
        if n.op == NodeOp::Mul && has(&claims, &n.id, Role::Act) {
            let branches: Vec<&str> = n.inputs.iter().map(|s| s.as_str()).collect();
            let silu_fed = branches.iter().any(|b| op_of(b) == NodeOp::Silu);
            let direct_fc = branches.iter().any(|b| op_of(b) == NodeOp::Matmul);
            if silu_fed && direct_fc {
                swiglu = true;
            }
        }
    }

    let mut roles = Vec::new();
    let mut unmatched = Vec::new();
    for (n, c) in graph.nodes.iter().zip(&claims) {
        match c.len() {
            0 => unmatched.push(n.id.clone()),
            1 => roles.push((n.id.clone(), c[0])),
            _ => {
                return Err(CompileError::Ambiguous {
                    node: n.id.clone(),
                    roles: c.iter().map(|r| format!("{r:?}")).collect(),
                })
            }
        }
    }
    Ok(AnnotatedGraph { graph: graph.clone(), roles, gqa, swiglu, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama_shape_sets_gqa() {
        let m = ModelConfig::preset("llama3.1-8b").unwrap();
        let a = match_patterns(&DecoderGraph::from_model(&m)).unwrap();
        assert!(a.gqa && a.swiglu);
        assert!(a.unmatched.is_empty());
        assert_eq!(a.role("up"), Some(Role::Ffn1));
        assert_eq!(a.role("gate"), Some(Role::Ffn1));
        assert_eq!(a.role("down"), Some(Role::Ffn2));
        assert_eq!(a.role("o"), Some(Role::Proj));
        assert_eq!(a.model_config().unwrap(), m);
    }

    #[test]
    fn relu_mlp_has_no_gate() {
        let m = ModelConfig::preset("mpt-7b").unwrap();
        let a = match_patterns(&DecoderGraph::from_model(&m)).unwrap();
        assert!(!a.gqa && !a.swiglu);
        assert_eq!(a.role("up"), Some(Role::Ffn1));
        assert_eq!(a.model_config().unwrap().ffn, FfnKind::Relu);
    }

    #[test]
    fn dangling_matmul_is_reported() {
        let m = ModelConfig::preset("qwen-7b").unwrap();
        let mut g = DecoderGraph::from_model(&m);
        g.nodes.push(GraphNode::matmul("stray", "res2", 4096, 10));
        let a = match_patterns(&g).unwrap();
        assert_eq!(a.unmatched, vec!["stray".to_string()]);
    }

    #[test]
    fn unshaped_and_ambiguous() {
        let m = ModelConfig::toy();
        let mut g = DecoderGraph::from_model(&m);
        g.nodes[2].d_out = None;
        assert!(matches!(match_patterns(&g), Err(CompileError::Unshaped(_))));

        // A projection that also feeds attention claims two roles.
        let mut g = DecoderGraph::from_model(&m);
        let sv = g.nodes.iter().position(|n| n.id == "sv").unwrap();
        g.nodes.insert(sv + 1, GraphNode::matmul("o2", "sv", 32, 16));
        g.nodes.push(GraphNode::attention("qk2", &["q", "o2"], &m));
        g.nodes.push(GraphNode::new("sm2", NodeOp::Softmax, &["qk2"]));
        assert!(matches!(match_patterns(&g), Err(CompileError::Ambiguous { .. })));
    }

    #[test]
    fn json_round_trip() {
        let g = DecoderGraph::from_model(&ModelConfig::toy());
        assert_eq!(DecoderGraph::from_json(&g.to_json()).unwrap(), g);
        assert!(DecoderGraph::from_json("{").is_err());
    }
}
