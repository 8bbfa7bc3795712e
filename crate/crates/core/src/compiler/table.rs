use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{AnnotatedGraph, CompileError, Role};
use crate::isa::OpKind;
use crate::partition::{partition_fc, KvStrategy, LayerShape};
use crate::plan::ParallelismPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PartitionDir {
    /// Output rows split across the tensor-parallel group.
    OutputSplit,
    /// Input columns split; shards yield partial sums.
    InputSplit,
    /// KV heads split across modules, tokens interleaved across banks.
    TokenParallel,
    /// KV heads split across modules, each head confined to one channel.
    HeadFirst,
    /// Executed on the hub with the full vector.
    Hub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Comm {
    None,
    Broadcast,
    Gather,
    Reduce,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub node: String,
    pub role: Role,
    pub op_kind: Option<OpKind>,
    pub dir: PartitionDir,
    pub comm: Comm,
    /// Modules per stage that take part (the tensor-parallel group size for PIM ops).
    pub modules: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTable {
    pub plan: ParallelismPlan,
    pub strategy: KvStrategy,
    pub entries: Vec<TableEntry>,
    pub stages: Vec<Range<u32>>,
}

impl ExecutionTable {
    pub fn entry(&self, node: &str) -> Option<&TableEntry> {
        self.entries.iter().find(|e| e.node == node)
    }

    pub fn with_comm(&self) -> impl Iterator<Item = &TableEntry> {
        self.entries.iter().filter(|e| e.comm != Comm::None)
    }

    /// Global module id of tensor shard `shard` in pipeline stage `stage`.
    pub fn module_id(&self, stage: u32, shard: u32) -> u32 {
        stage * self.plan.tp + shard
    }

    pub fn stage_of_layer(&self, layer: u32) -> Option<u32> {
        self.stages.iter().position(|r| r.contains(&layer)).map(|s| s as u32)
    }
}

pub fn build_execution_table(
    graph: &AnnotatedGraph,
    plan: ParallelismPlan,
    strategy: KvStrategy,
) -> Result<ExecutionTable, CompileError> {
    let m = graph.model_config()?;
    let (tp, pp) = (plan.tp, plan.pp);
    if tp == 0 || pp == 0 {
        return Err(CompileError::Infeasible("tp and pp must be positive".into()));
    }
    if !plan.fits_layers(m.n_layers) {
        return Err(CompileError::Infeasible(format!("pp {pp} leaves a stage of {} layers empty", m.n_layers)));
    }
    if m.n_kv_heads % tp != 0 {
        return Err(CompileError::Infeasible(format!("{} kv heads not divisible by tp {tp}", m.n_kv_heads)));
    }
    for shape in LayerShape::fc_layers(&m) {
        partition_fc(&shape, tp, 2).map_err(|e| CompileError::Infeasible(e.to_string()))?;
    }
    if !graph.unmatched.is_empty() {
        return Err(CompileError::Unmatched(graph.unmatched.clone()));
    }
    let split = |c: Comm| if tp > 1 { c } else { Comm::None };
    let entries = graph
        .roles
        .iter()
        .map(|(node, role)| {
            let (op_kind, dir, comm) = match role {
                Role::QkvGen => (Some(OpKind::QkvGen), PartitionDir::OutputSplit, split(Comm::Broadcast)),
                Role::Ffn1 => (Some(OpKind::Ffn1), PartitionDir::OutputSplit, split(Comm::Broadcast)),
                Role::Proj => (Some(OpKind::Proj), PartitionDir::InputSplit, split(Comm::Reduce)),
                Role::Ffn2 => (Some(OpKind::Ffn2), PartitionDir::InputSplit, split(Comm::Reduce)),
                Role::Qkt | Role::Sv => {
                    let kind = if *role == Role::Qkt { OpKind::Qkt } else { OpKind::Sv };
                    let dir = match strategy {
                        KvStrategy::Itpp => PartitionDir::TokenParallel,
                        KvStrategy::Hfa => PartitionDir::HeadFirst,
                    };
                    (Some(kind), dir, Comm::None)
                }
                Role::Softmax | Role::Act => (None, PartitionDir::Hub, Comm::None),
                Role::Input | Role::Norm | Role::Residual => (None, PartitionDir::Hub, Comm::None),
            };
            let modules = if op_kind.is_some() { tp } else { 1 };
            TableEntry { node: node.clone(), role: *role, op_kind, dir, comm, modules }
        })
        .collect();
    Ok(ExecutionTable { plan, strategy, entries, stages: plan.stage_layers(m.n_layers) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{match_patterns, DecoderGraph};
    use crate::model::ModelConfig;

    fn table(name: &str, tp: u32, pp: u32) -> Result<ExecutionTable, CompileError> {
        let m = ModelConfig::preset(name).unwrap();
        let a = match_patterns(&DecoderGraph::from_model(&m)).unwrap();
        build_execution_table(&a, ParallelismPlan::new(tp, pp), KvStrategy::Itpp)
    }

    #[test]
    fn tp2_pp2_reduces_projection() {
        let t = table("qwen-7b", 2, 2).unwrap();
        assert_eq!(t.stages, vec![0..16, 16..32]);
        let o = t.entry("o").unwrap();
        assert_eq!((o.comm, o.modules, o.dir), (Comm::Reduce, 2, PartitionDir::InputSplit));
        assert_eq!(t.entry("down").unwrap().comm, Comm::Reduce);
        assert_eq!(t.entries.len(), DecoderGraph::from_model(&ModelConfig::preset("qwen-7b").unwrap()).nodes.len());
    }

    #[test]
    fn single_module_has_no_comm() {
        let t = table("qwen-7b", 1, 1).unwrap();
        assert_eq!(t.with_comm().count(), 0);
    }

    #[test]
    fn deep_pipeline() {
        let t = table("qwen-72b", 1, 16).unwrap();
        assert_eq!(t.stages.len(), 16);
        assert!(t.stages.iter().all(|r| r.len() == 5));
        assert_eq!(t.stage_of_layer(79), Some(15));
    }

    #[test]
    fn infeasible_plans() {
        assert!(table("llama3.1-8b", 16, 1).is_err());
        assert!(table("qwen-1.8b", 1, 25).is_err());
        assert!(table("qwen-7b", 0, 1).is_err());
    }
}
