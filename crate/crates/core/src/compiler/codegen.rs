use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{build_execution_table, match_patterns, AttnLayout, CompileError, DecoderGraph, ExecutionTable, FcLayout};
use crate::device::PimTopology;
use crate::dispatcher::{expand, ConfigBuffer, DispatchBudget, Va2PaTable};
use crate::isa::{self, CommandStack, DpaCommand, Entry, LoopBound, OpKind, StackMeta};
use crate::model::{FfnKind, LayerWeights, Matrix, ModelConfig};
use crate::partition::KvStrategy;
use crate::plan::ParallelismPlan;

pub const FC_OPS: [OpKind; 4] = [OpKind::QkvGen, OpKind::Proj, OpKind::Ffn1, OpKind::Ffn2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightRegion {
    pub layer: u32,
    pub op: OpKind,
    pub base_row: u32,
    pub rows: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvRegion {
    pub base_row: u32,
    pub rows_per_chunk: u32,
    pub tokens_per_chunk: u32,
    pub chunks: u32,
}

/// Virtual allocation of weights and KV cache on one module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub module: u32,
    pub stage: u32,
    pub shard: u32,
    pub layers: Range<u32>,
    pub weights: Vec<WeightRegion>,
    pub kv: KvRegion,
    pub attn_stack_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcProgram {
    pub layer: u32,
    pub op: OpKind,
    pub layout: FcLayout,
    pub stack: CommandStack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleProgram {
    pub manifest: Manifest,
    pub attn: AttnLayout,
    /// Score and weighted-sum stacks, two per local layer, resident in the command buffer.
    pub attn_stacks: Vec<CommandStack>,
    /// Concrete FC stacks, streamed per layer.
    pub fc: Vec<FcProgram>,
}

impl ModuleProgram {
    pub fn fc(&self, layer: u32, op: OpKind) -> &FcProgram {
        self.fc.iter().find(|f| f.layer == layer && f.op == op).expect("FC program exists")
    }

    pub fn attn_stack(&self, layer: u32, op: OpKind) -> &CommandStack {
        self.attn_stacks.iter().find(|s| s.meta.layer == layer && s.meta.op == op).expect("attention stack exists")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compiled {
    pub model: ModelConfig,
    pub table: ExecutionTable,
    pub modules: Vec<ModuleProgram>,
}

/// Matrix shape of each FC op held by tensor shard `shard`.
pub fn fc_shard_shape(model: &ModelConfig, tp: u32, shard: u32, op: OpKind) -> (u32, u32) {
    let d = model.d_model();
    let f_per = model.ffn_dim.div_ceil(tp);
    let f_valid = model.ffn_dim.saturating_sub(shard * f_per).min(f_per);
    match op {
        OpKind::QkvGen => (model.qkv_dim() / tp, d),
        OpKind::Proj => (d, d / tp),
        OpKind::Ffn1 => match model.ffn {
            FfnKind::Relu => (f_valid, d),
            FfnKind::Swiglu => (2 * f_valid, d),
        },
        OpKind::Ffn2 => (d, f_valid),
        _ => unreachable!("attention ops have no weights"),
    }
}

/// Range of FFN hidden units held by tensor shard `shard`.
pub fn ffn_slice(model: &ModelConfig, tp: u32, shard: u32) -> Range<usize> {
    let per = model.ffn_dim.div_ceil(tp);
    let lo = (shard * per).min(model.ffn_dim);
    lo as usize..((shard + 1) * per).min(model.ffn_dim) as usize
}

/// Weight matrices of shard `shard`: QKV rows for its kv heads (their query
/// heads, then K, then V), PROJ columns for those query heads, FFN rows and
/// columns for its hidden slice.
pub fn shard_weights(model: &ModelConfig, lw: &LayerWeights, tp: u32, shard: u32) -> [Matrix; 4] {
    let d = model.d_model() as usize;
    let dkv = model.d_kv() as usize;
    let dq = d / tp as usize;
    let dk = dkv / tp as usize;
    let s = shard as usize;
    let pick_rows = |m: &Matrix, ranges: &[Range<usize>]| {
        let mut data = Vec::new();
        let mut rows = 0;
        for r in ranges {
            for i in r.clone() {
                data.extend_from_slice(m.row(i));
                rows += 1;
            }
        }
        Matrix { rows, cols: m.cols, data }
    };
    let pick_cols = |m: &Matrix, r: Range<usize>| {
        let mut data = Vec::with_capacity(m.rows * r.len());
        for i in 0..m.rows {
            data.extend_from_slice(&m.row(i)[r.clone()]);
        }
        Matrix { rows: m.rows, cols: r.len(), data }
    };
    let qkv = pick_rows(
        &lw.qkv,
        &[s * dq..(s + 1) * dq, d + s * dk..d + (s + 1) * dk, d + dkv + s * dk..d + dkv + (s + 1) * dk],
    );
    let proj = pick_cols(&lw.proj, s * dq..(s + 1) * dq);
    let fs = ffn_slice(model, tp, shard);
    let f = model.ffn_dim as usize;
    let ffn1 = match model.ffn {
        FfnKind::Relu => pick_rows(&lw.ffn1, std::slice::from_ref(&fs)),
        FfnKind::Swiglu => pick_rows(&lw.ffn1, &[fs.clone(), f + fs.start..f + fs.end]),
    };
    let ffn2 = pick_cols(&lw.ffn2, fs);
    [qkv, proj, ffn1, ffn2]
}

/// Generates every module's programs and manifest from an execution table.
pub fn codegen(
    table: &ExecutionTable,
    model: &ModelConfig,
    topo: &PimTopology,
    tokens_per_row: Option<u32>,
    budget: &DispatchBudget,
) -> Result<Vec<ModuleProgram>, CompileError> {
    if table.strategy != KvStrategy::Itpp {
        return Err(CompileError::Unmappable("command generation covers token-parallel KV placement only".into()));
    }
    let tp = table.plan.tp;
    let mut out = Vec::new();
    for (stage, layers) in table.stages.iter().enumerate() {
        let stage = stage as u32;
        for shard in 0..tp {
            let module = table.module_id(stage, shard);
            let mut weights = Vec::new();
            let mut fc = Vec::new();
            let mut row = 0u32;
            for (local, _layer) in layers.clone().enumerate() {
                let local = local as u32;
                for op in FC_OPS {
                    let (r, c) = fc_shard_shape(model, tp, shard, op);
                    let layout = FcLayout::new(r, c, row, topo);
                    row = layout.end();
                    if row > topo.rows_per_bank {
                        return Err(CompileError::Unmappable(format!(
                            "module {module}: weights need {row} rows, a bank holds {}",
                            topo.rows_per_bank
                        )));
                    }
                    weights.push(WeightRegion { layer: local, op, base_row: layout.base, rows: layout.row_count() });
                    let meta = StackMeta { layer: local, op, module };
                    fc.push(FcProgram {
                        layer: local,
                        op,
                        layout,
                        stack: CommandStack::from_commands(meta, layout.commands()),
                    });
                }
            }
            let n_local = layers.len() as u32;
            let attn = AttnLayout::new(model, topo, tp, n_local, tokens_per_row, row)?;
            let mut attn_stacks = Vec::with_capacity(2 * n_local as usize);
            for local in 0..n_local {
                attn_stacks.push(attn.qk_stack(StackMeta { layer: local, op: OpKind::Qkt, module }));
                attn_stacks.push(attn.sv_stack(StackMeta { layer: local, op: OpKind::Sv, module }));
            }
            let bytes: usize = attn_stacks.iter().map(|s| isa::serialize(s).len()).sum();
            if bytes > budget.cmd_buffer_bytes {
                return Err(CompileError::BudgetExceeded {
                    module,
                    what: "attention stacks",
                    needed: bytes as u64,
                    budget: budget.cmd_buffer_bytes as u64,
                });
            }
            let manifest = Manifest {
                module,
                stage,
                shard,
                layers: layers.clone(),
                weights,
                kv: KvRegion {
                    base_row: row,
                    rows_per_chunk: attn.rows_per_chunk,
                    tokens_per_chunk: attn.tb,
                    chunks: attn.chunks,
                },
                attn_stack_bytes: bytes,
            };
            out.push(ModuleProgram { manifest, attn, attn_stacks, fc });
        }
    }
    Ok(out)
}

/// Graph to table to programs in one call.
pub fn compile(
    graph: &DecoderGraph,
    plan: ParallelismPlan,
    topo: &PimTopology,
    tokens_per_row: Option<u32>,
) -> Result<Compiled, CompileError> {
    let annotated = match_patterns(graph)?;
    let model = annotated.model_config()?;
    let table = build_execution_table(&annotated, plan, KvStrategy::Itpp)?;
    let modules = codegen(&table, &model, topo, tokens_per_row, &DispatchBudget::default())?;
    Ok(Compiled { model, table, modules })
}

/// Fully unrolled equivalent of a loop-encoded stack for a context of
/// `max_tokens`: every loop is expanded to the chunk count of `max_tokens`
/// over an identity chunk map, leaving only concrete commands.
pub fn unrolled_stack(stack: &CommandStack, layout: &AttnLayout, max_tokens: u32) -> CommandStack {
    let mut cfg = ConfigBuffer::new(stack.meta.layer + 1, layout.tb);
    cfg.add(0, max_tokens.max(1));
    let mut table = Va2PaTable::with_budget(layout.rows_per_chunk, layout.region_base, usize::MAX);
    for c in 0..max_tokens.div_ceil(layout.tb).max(1) {
        table.push_chunk(0, c).expect("fresh identity map");
    }
    let cmds = expand(stack, &cfg, &table, 0).expect("generated stacks expand");
    CommandStack::from_commands(stack.meta, cmds)
}

/// Serialized bytes of the loop-encoded and the unrolled attention stacks of one module.
pub fn stack_sizes(program: &ModuleProgram, max_tokens: u32) -> (usize, usize) {
    let encoded = program.attn_stacks.iter().map(|s| isa::serialize(s).len()).sum();
    let unrolled =
        program.attn_stacks.iter().map(|s| isa::serialize(&unrolled_stack(s, &program.attn, max_tokens)).len()).sum();
    (encoded, unrolled)
}

/// True when a stack holds only token-bounded loops and commands.
pub fn is_loop_encoded(stack: &CommandStack) -> bool {
    stack.entries.iter().any(|e| matches!(e, Entry::Dpa(DpaCommand::DynLoop { bound: LoopBound::TokenRows, .. })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Weights;

    #[test]
    fn toy_compiles_within_budget() {
        let m = ModelConfig::toy();
        for (tp, pp) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            let c = compile(&DecoderGraph::from_model(&m), ParallelismPlan::new(tp, pp), &PimTopology::toy(), None)
                .unwrap();
            assert_eq!(c.modules.len() as u32, tp * pp);
            for p in &c.modules {
                assert!(p.manifest.attn_stack_bytes <= 96 * 1024);
                assert!(p.attn_stacks.iter().all(is_loop_encoded));
                assert!(p.manifest.kv.chunks > 0);
            }
        }
    }

    #[test]
    fn deterministic() {
        let m = ModelConfig::preset("qwen-7b").unwrap();
        let g = DecoderGraph::from_model(&m);
        let a = compile(&g, ParallelismPlan::new(4, 1), &PimTopology::default(), None).unwrap();
        let b = compile(&g, ParallelismPlan::new(4, 1), &PimTopology::default(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shards_cover_weights() {
        let m = ModelConfig::toy();
        let w = Weights::random(&m, 1);
        for tp in [1, 2] {
            let total: [usize; 4] = (0..tp).fold([0; 4], |mut acc, s| {
                let sw = shard_weights(&m, &w.layers[0], tp, s);
                for (a, x) in acc.iter_mut().zip(&sw) {
                    *a += x.data.len();
                }
                acc
            });
            let l = &w.layers[0];
            assert_eq!(total, [l.qkv.data.len(), l.proj.data.len(), l.ffn1.data.len(), l.ffn2.data.len()]);
            for s in 0..tp {
                let sw = shard_weights(&m, l, tp, s);
                for (op, x) in FC_OPS.iter().zip(&sw) {
                    assert_eq!(fc_shard_shape(&m, tp, s, *op), (x.rows as u32, x.cols as u32));
                }
            }
        }
    }

    #[test]
    fn unrolled_grows_encoded_does_not() {
        let m = ModelConfig::preset("qwen-7b").unwrap();
        let c =
            compile(&DecoderGraph::from_model(&m), ParallelismPlan::new(4, 8), &PimTopology::default(), None).unwrap();
        let p = &c.modules[0];
        let (e1, u1) = stack_sizes(p, 4096);
        let (e2, u2) = stack_sizes(p, 8192);
        assert_eq!(e1, e2);
        assert!(u2 > u1 * 19 / 10);
        assert!(u1 > e1);
    }
}
