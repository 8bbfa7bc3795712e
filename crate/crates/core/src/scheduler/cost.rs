use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::compiler::{fc_shard_shape, AttnLayout, CompileError, FcLayout, GPR_SV_IN, PASS_SHIFT};
use crate::device::{epu_cycles, time_commands, Breakdown, ExecMode, ExecReport, PimTopology, TimingParams};
use crate::dispatcher::{expand, ConfigBuffer, Va2PaTable};
use crate::isa::{OpKind, StackMeta};
use crate::model::ModelConfig;
use crate::plan::{Features, ParallelismPlan};

/// Cycles and phase totals of one op on one module.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub cycles: u64,
    pub breakdown: Breakdown,
}

impl OpCost {
    pub fn add(&mut self, o: &OpCost) {
        self.cycles += o.cycles;
        self.breakdown.add(&o.breakdown);
    }

    fn from_report(r: &ExecReport) -> Self {
        OpCost { cycles: r.cycles, breakdown: r.breakdown }
    }
}

/// Memoized per-op cycle model of the modules of one plan.
pub struct CostModel {
    pub model: ModelConfig,
    pub topo: PimTopology,
    pub timing: TimingParams,
    pub plan: ParallelismPlan,
    pub features: Features,
    pub layout: AttnLayout,
    /// Single-channel layout of one (request, head) pair for head-first placement.
    pub pair_layout: AttnLayout,
    pair_topo: PimTopology,
    fc: HashMap<OpKind, OpCost>,
    attn: HashMap<(OpKind, u32), OpCost>,
    pair: HashMap<(OpKind, u32), OpCost>,
}

impl CostModel {
    pub fn new(
        model: &ModelConfig,
        topo: &PimTopology,
        timing: &TimingParams,
        plan: ParallelismPlan,
        features: Features,
        tokens_per_row: Option<u32>,
    ) -> Result<Self, CompileError> {
        let layers = plan.stage_layers(model.n_layers).iter().map(|r| r.len() as u32).max().unwrap_or(0);
        let fc_rows: u32 = (0..layers)
            .map(|_| {
                crate::compiler::FC_OPS
                    .iter()
                    .map(|&op| {
                        let (r, c) = fc_shard_shape(model, plan.tp, 0, op);
                        FcLayout::new(r, c, 0, topo).row_count()
                    })
                    .sum::<u32>()
            })
            .sum();
        let layout = AttnLayout::new(model, topo, plan.tp, layers, tokens_per_row, fc_rows)?;
        let pair_topo = PimTopology { channels: 1, ..*topo };
        let pair_layout = AttnLayout::for_heads(1, model.d_head, 1, 1, &pair_topo, None, 0)?;
        Ok(CostModel {
            model: model.clone(),
            topo: *topo,
            timing: *timing,
            plan,
            features,
            layout,
            pair_layout,
            pair_topo,
            fc: HashMap::new(),
            attn: HashMap::new(),
            pair: HashMap::new(),
        })
    }

    pub fn mode(&self) -> ExecMode {
        if self.features.pingpong {
            ExecMode::PingPong
        } else {
            ExecMode::Serial
        }
    }

    /// One GEMV of `op` on the first tensor shard (the largest).
    pub fn fc(&mut self, op: OpKind) -> OpCost {
        if let Some(c) = self.fc.get(&op) {
            return *c;
        }
        let (r, c) = fc_shard_shape(&self.model, self.plan.tp, 0, op);
        let l = FcLayout::new(r, c, 0, &self.topo);
        let eb = self.topo.element_bytes as u64;
        let copies = if self.timing.broadcast_per_channel { self.topo.channels as u64 } else { 1 };
        let rep =
            time_commands(&l.commands(), &self.topo, &self.timing, self.mode(), |g| l.input_elems(g) * eb * copies);
        let cost = OpCost::from_report(&rep);
        self.fc.insert(op, cost);
        cost
    }

    /// Attention op of one request at `t_cur` tokens under token-parallel placement.
    pub fn attn_itpp(&mut self, op: OpKind, t_cur: u32) -> OpCost {
        let blocks = t_cur.div_ceil(self.layout.tb).max(1);
        if let Some(c) = self.attn.get(&(op, blocks)) {
            return *c;
        }
        let cost = stack_cost(&self.layout, &self.topo, &self.timing, self.mode(), op, blocks);
        self.attn.insert((op, blocks), cost);
        cost
    }

    /// One (request, kv head) pair confined to a single channel.
    fn attn_pair(&mut self, op: OpKind, t_cur: u32) -> OpCost {
        let blocks = t_cur.div_ceil(self.pair_layout.tb).max(1);
        if let Some(c) = self.pair.get(&(op, blocks)) {
            return *c;
        }
        let cost = stack_cost(&self.pair_layout, &self.pair_topo, &self.timing, self.mode(), op, blocks);
        self.pair.insert((op, blocks), cost);
        cost
    }

    /// Attention op of a micro-batch (`t_cur` per request) on one module.
    ///
    /// Head-first placement deals (request, head) pairs round-robin over
    /// channels; channels compute in parallel but share the host interface.
    pub fn attn(&mut self, op: OpKind, batch: &[u32]) -> OpCost {
        let mut total = OpCost::default();
        if self.features.itpp {
            for &t in batch {
                total.add(&self.attn_itpp(op, t));
            }
            return total;
        }
        let kv_local = self.layout.kv_local;
        let gsz = self.model.group_size();
        let mut per_channel = vec![0u64; self.topo.channels as usize];
        let mut io = 0u64;
        let mut pair = 0usize;
        for &t in batch {
            let c = self.attn_pair(op, t);
            for _ in 0..kv_local {
                // Every query head of the group is a separate pass over the pair.
                let ch = pair % per_channel.len();
                per_channel[ch] += c.cycles * gsz as u64;
                io += c.breakdown.transfer() * gsz as u64;
                total.breakdown.add(&c.breakdown.scaled(gsz as u64));
                pair += 1;
            }
        }
        total.cycles = per_channel.into_iter().max().unwrap_or(0).max(io);
        total
    }

    /// Hub softmax cycles exposed for one request. Token-parallel placement
    /// overlaps every head's softmax but the last with device work.
    pub fn softmax(&self, t_cur: u32) -> u64 {
        let heads = (self.model.n_heads / self.plan.tp) as u64;
        let one = epu_cycles(t_cur as usize, &self.timing);
        if self.features.itpp {
            one
        } else {
            one * heads
        }
    }
}

/// Expands the loop-encoded stack of `op` for `blocks` chunks over an
/// identity chunk map and times it.
pub fn stack_cost(
    layout: &AttnLayout,
    topo: &PimTopology,
    timing: &TimingParams,
    mode: ExecMode,
    op: OpKind,
    blocks: u32,
) -> OpCost {
    let meta = StackMeta { layer: 0, op, module: 0 };
    let stack = match op {
        OpKind::Qkt => layout.qk_stack(meta),
        OpKind::Sv => layout.sv_stack(meta),
        _ => unreachable!("not an attention op"),
    };
    let mut cfg = ConfigBuffer::new(1, layout.tb);
    cfg.add(0, blocks * layout.tb);
    let mut table = Va2PaTable::with_budget(layout.rows_per_chunk, layout.region_base, usize::MAX);
    for c in 0..blocks {
        table.push_chunk(0, c).expect("fresh identity map");
    }
    let cmds = expand(&stack, &cfg, &table, 0).expect("generated stacks expand");
    let eb = topo.element_bytes as u64;
    let sv_shape: Vec<u64> = (0..layout.vrows)
        .map(|vr| {
            layout
                .sv_input_shape(vr)
                .iter()
                .map(|&(n, ch)| n * eb * if timing.broadcast_per_channel { ch as u64 } else { 1 })
                .sum()
        })
        .collect();
    let qk_bytes = layout.qk_input_elems() * eb * if timing.broadcast_per_channel { topo.channels as u64 } else { 1 };
    let rep = time_commands(&cmds, topo, timing, mode, |gpr| match op {
        OpKind::Qkt => qk_bytes,
        _ => sv_shape[(((gpr - GPR_SV_IN) & ((1 << PASS_SHIFT) - 1)) % layout.vrows) as usize],
    });
    OpCost::from_report(&rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(features: Features) -> CostModel {
        let m = ModelConfig::preset("qwen-7b").unwrap();
        CostModel::new(
            &m,
            &PimTopology::default(),
            &TimingParams::default(),
            ParallelismPlan::new(4, 1),
            features,
            None,
        )
        .unwrap()
    }

    #[test]
    fn pingpong_never_slower() {
        let mut on = cm(Features::all());
        let mut off = cm(Features { pingpong: false, ..Features::all() });
        for op in crate::compiler::FC_OPS {
            assert!(on.fc(op).cycles <= off.fc(op).cycles);
        }
        for t in [1, 300, 16384] {
            for op in [OpKind::Qkt, OpKind::Sv] {
                assert!(on.attn(op, &[t]).cycles <= off.attn(op, &[t]).cycles);
            }
        }
    }

    #[test]
    fn attention_is_linear_in_blocks() {
        let mut c = cm(Features { pingpong: false, ..Features::all() });
        let a = c.attn_itpp(OpKind::Qkt, 256).cycles;
        let b = c.attn_itpp(OpKind::Qkt, 512).cycles;
        let d = c.attn_itpp(OpKind::Qkt, 1024).cycles;
        assert_eq!(d - b, 2 * (b - a));
    }
}
