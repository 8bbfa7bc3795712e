use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CostModel, OpCost};
use crate::compiler::{unrolled_stack, CompileError, FC_OPS};
use crate::device::{epu_cycles, Breakdown, PimTopology, TimingParams};
use crate::isa::{self, OpKind, StackMeta};
use crate::memmgr::{AllocConfig, AllocatorState};
use crate::model::{FfnKind, ModelConfig};
use crate::partition::{partition_fc, LayerShape};
use crate::plan::{Features, ParallelismPlan};
use crate::request::Request;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub topo: PimTopology,
    pub timing: TimingParams,
    pub plan: ParallelismPlan,
    pub features: Features,
    /// Tokens per KV chunk; `None` packs as many as a PU row holds.
    pub tokens_per_row: Option<u32>,
    /// Generation headroom reserved per lazily admitted request.
    pub max_new_tokens: u32,
    /// Fixed host cost of launching one op on a module.
    pub op_launch_cycles: u32,
    pub record_timeline: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            model: ModelConfig::preset("qwen-7b").expect("preset"),
            topo: PimTopology::default(),
            timing: TimingParams::default(),
            plan: ParallelismPlan::default(),
            features: Features::all(),
            tokens_per_row: None,
            max_new_tokens: 512,
            op_launch_cycles: 0,
            record_timeline: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("plan infeasible: {0}")]
    Infeasible(String),
    #[error("empty trace")]
    EmptyTrace,
    #[error("no request can ever be admitted ({queued} queued, none live)")]
    Deadlock { queued: usize },
}

impl From<CompileError> for SimError {
    fn from(e: CompileError) -> Self {
        SimError::Infeasible(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    StageExec,
    Sync,
    Comm,
    Admit,
    Grow,
    Release,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub start: u64,
    pub end: u64,
    pub kind: EventKind,
    pub stage: Option<u32>,
    pub micro_batch: Option<u32>,
    pub request: Option<u32>,
    /// Requests in the micro-batch for stage events, chunk count for memory events.
    pub size: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<Event>,
}

impl Timeline {
    fn push(&mut self, on: bool, e: Event) {
        if on {
            self.events.push(e);
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for e in &self.events {
            wr.serialize(e)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Text Gantt chart of stage activity, one line per stage, `width` columns.
    pub fn gantt(&self, stages: u32, width: usize) -> String {
        let end = self.events.iter().map(|e| e.end).max().unwrap_or(0).max(1);
        let col = |t: u64| ((t as u128 * width as u128) / end as u128) as usize;
        let mut out = String::new();
        for s in 0..stages {
            let mut line = vec!['.'; width];
            for e in self.events.iter().filter(|e| e.stage == Some(s)) {
                let mark = match e.kind {
                    EventKind::StageExec => {
                        let mb = e.micro_batch.unwrap_or(0);
                        char::from_digit(mb % 36, 36).unwrap_or('#')
                    }
                    EventKind::Sync => 's',
                    EventKind::Comm => 'c',
                    _ => continue,
                };
                let (a, b) = (col(e.start), col(e.end).max(col(e.start) + 1).min(width));
                for c in line.iter_mut().take(b).skip(a) {
                    *c = mark;
                }
            }
            out.push_str(&format!("stage {s:>2} |{}|\n", line.into_iter().collect::<String>()));
        }
        out.push_str(&format!("cycles 0..{end}\n"));
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStats {
    pub calls: u64,
    pub cycles: u64,
    pub breakdown: Breakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub plan: ParallelismPlan,
    pub features: Features,
    /// Micro-batch size averaged over iterations.
    pub avg_b_mu: f64,
    pub iterations: u64,
    pub wall_cycles: u64,
    pub tokens: u64,
    pub tokens_per_sec: f64,
    pub utilization_pct: f64,
    /// Stage-idle share of wall time.
    pub bubble_pct: f64,
    pub avg_batch: f64,
    pub max_batch: u32,
    pub completed: u32,
    pub dropped: u32,
    pub kv_chunks: u32,
    pub sync_events: u64,
    pub comm_cycles: u64,
    pub per_op: BTreeMap<OpKind, OpStats>,
}

/// Busy MAC lane-cycles over available lane-cycles, in percent.
pub fn utilization(macs: u64, modules: u32, wall_cycles: u64, topo: &PimTopology) -> f64 {
    if wall_cycles == 0 || modules == 0 {
        return 0.0;
    }
    let lanes = topo.pus() as f64 * topo.mac_width as f64 * modules as f64;
    100.0 * macs as f64 / (lanes * wall_cycles as f64)
}

/// Bytes of command storage a module needs without loop encoding: one
/// concrete stack per attention op and layer for every possible chunk count.
pub fn static_command_bytes(cost: &CostModel, max_ctl: u32) -> u64 {
    let l = &cost.layout;
    let n = max_ctl.div_ceil(l.tb) as u64;
    let mut total = 0u64;
    for op in [OpKind::Qkt, OpKind::Sv] {
        let meta = StackMeta { layer: 0, op, module: 0 };
        let stack = if op == OpKind::Qkt { l.qk_stack(meta) } else { l.sv_stack(meta) };
        let one = isa::serialize(&unrolled_stack(&stack, l, l.tb)).len() as u64;
        let two = isa::serialize(&unrolled_stack(&stack, l, 2 * l.tb)).len() as u64;
        let per = two - one;
        let base = one - per;
        // Sum over k = 1..=n of (base + k * per).
        total += n * base + per * n * (n + 1) / 2;
    }
    total * l.layers as u64
}

struct Live {
    req: Request,
    /// Tokens the next step attends over (context plus the token being generated).
    ctx: u32,
    generated: u32,
}

/// Cost of one micro-batch through one decoder layer, split at the two
/// tensor-parallel reductions. Each half is device time followed by the
/// host-side reduce that must finish before the next half starts.
struct LayerCost {
    halves: [(u64, u64); 2],
    macs: u64,
    comm: u64,
    ops: Vec<(OpKind, OpCost)>,
}

impl LayerCost {
    fn compute(&self) -> u64 {
        self.halves[0].0 + self.halves[1].0
    }
}

struct Slot {
    mb: usize,
    stage: usize,
    start: u64,
    end: u64,
    /// Device cycles, excluding reduce waits.
    busy: u64,
    ready: u64,
}

struct Schedule {
    b_mu: u32,
    layers: Vec<LayerCost>,
    slots: Vec<Slot>,
    makespan: u64,
}

/// Runs the micro-batches of one stage. Each micro-batch executes `2 * n`
/// halves in order; the device takes the oldest ready micro-batch, so the
/// reduce wait of one micro-batch overlaps the compute of another.
/// Returns (first start, finish, device cycles) per micro-batch.
fn run_stage(arrive: &[u64], layers: &[LayerCost], n: u32) -> Vec<(u64, u64, u64)> {
    let m = arrive.len();
    let segs = 2 * n;
    let mut out = vec![(0u64, 0u64, 0u64); m];
    if layers.iter().all(|l| l.halves[0].1 == 0 && l.halves[1].1 == 0) {
        let mut free = 0u64;
        for j in 0..m {
            let c = layers[j].compute() * n as u64;
            let start = arrive[j].max(free);
            free = start + c;
            out[j] = (start, free, c);
        }
        return out;
    }
    let mut pending: BinaryHeap<Reverse<(u64, usize)>> = (0..m).map(|j| Reverse((arrive[j], j))).collect();
    let mut ready: BTreeSet<usize> = BTreeSet::new();
    let mut next = vec![0u32; m];
    let mut started = vec![false; m];
    let mut dev = 0u64;
    let mut left = m;
    while left > 0 {
        while let Some(&Reverse((r, j))) = pending.peek() {
            if r > dev && !ready.is_empty() {
                break;
            }
            pending.pop();
            dev = dev.max(r);
            ready.insert(j);
        }
        let j = ready.pop_first().expect("a micro-batch is ready");
        let (c, k) = layers[j].halves[(next[j] % 2) as usize];
        if !started[j] {
            started[j] = true;
            out[j].0 = dev;
        }
        dev += c;
        out[j].2 += c;
        next[j] += 1;
        if next[j] == segs {
            out[j].1 = dev + k;
            left -= 1;
        } else {
            pending.push(Reverse((dev + k, j)));
        }
    }
    out
}

/// Pushes every micro-batch through the stages in order; `hand[j]` is the
/// handoff delay of micro-batch `j` between consecutive stages.
fn pipeline(layers: &[LayerCost], stages: &[u32], hand: &[u64]) -> (Vec<Slot>, u64) {
    let mut arrive = vec![0u64; layers.len()];
    let mut slots = Vec::with_capacity(layers.len() * stages.len());
    for (s, &n) in stages.iter().enumerate() {
        let done = run_stage(&arrive, layers, n);
        for (j, &(start, end, busy)) in done.iter().enumerate() {
            slots.push(Slot { mb: j, stage: s, start, end, busy, ready: arrive[j] });
            arrive[j] = end + hand[j];
        }
    }
    let makespan = slots.iter().map(|s| s.end).max().unwrap_or(0);
    (slots, makespan)
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    cost: CostModel,
    stages: Vec<u32>,
    fc: Vec<(OpKind, OpCost)>,
    /// Host elementwise work per request before and after the first reduce.
    host_epu: [u64; 2],
    /// All-reduce bytes per request at the end of each layer half.
    reduce_bytes: Vec<u64>,
    /// Members and micro-batch size of the current split.
    split: Option<(Vec<u32>, u32)>,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, mut cost: CostModel) -> Self {
        let m = &cfg.model;
        let tp = cfg.plan.tp;
        let fc = FC_OPS.iter().map(|&op| (op, cost.fc(op))).collect();
        let d = m.d_model();
        let f = m.ffn_dim.div_ceil(tp) * if m.ffn == FfnKind::Swiglu { 2 } else { 1 };
        let e = epu_cycles(d as usize, &cfg.timing);
        let host_epu = [2 * e, 2 * e + epu_cycles(f as usize, &cfg.timing)];
        let reduce_bytes = if tp > 1 {
            [LayerShape::fc(OpKind::Proj, d, d), LayerShape::fc(OpKind::Ffn2, m.ffn_dim, d)]
                .iter()
                .map(|s| partition_fc(s, tp, cfg.topo.element_bytes).expect("checked feasible").reduce_bytes_per_shard)
                .collect()
        } else {
            Vec::new()
        };
        let stages = cfg.plan.stage_layers(m.n_layers).iter().map(|r| r.len() as u32).collect();
        Sim { cfg, cost, stages, fc, host_epu, reduce_bytes, split: None }
    }

    fn layer_cost(&mut self, ctx: &[u32]) -> LayerCost {
        let b = ctx.len() as u64;
        let launch = self.cfg.op_launch_cycles as u64;
        let mut ops = Vec::with_capacity(FC_OPS.len() + 2);
        let mut halves = [(b * self.host_epu[0], 0), (b * self.host_epu[1], 0)];
        let mut macs = 0u64;
        let half = |op: OpKind| usize::from(matches!(op, OpKind::Ffn1 | OpKind::Ffn2));
        for &(op, c) in &self.fc {
            let total = OpCost { cycles: c.cycles * b + launch, breakdown: c.breakdown.scaled(b) };
            halves[half(op)].0 += total.cycles;
            macs += total.breakdown.macs;
            ops.push((op, total));
        }
        for op in [OpKind::Qkt, OpKind::Sv] {
            let mut c = self.cost.attn(op, ctx);
            if op == OpKind::Qkt {
                let sm: u64 = ctx.iter().map(|&t| self.cost.softmax(t)).sum();
                c.cycles += sm;
                c.breakdown.epu += sm;
            }
            c.cycles += launch;
            halves[0].0 += c.cycles;
            macs += c.breakdown.macs;
            ops.push((op, c));
        }
        let t = &self.cfg.timing;
        let bw = t.internode_bytes_per_cycle();
        for (h, &r) in halves.iter_mut().zip(&self.reduce_bytes) {
            h.1 = t.host_sync_cycles as u64 + ((r * b) as f64 / bw).ceil() as u64;
        }
        let comm = halves[0].1 + halves[1].1;
        LayerCost { halves, macs: macs * self.cfg.plan.tp as u64, comm, ops }
    }

    fn handoff(&self, b: usize) -> (u64, u64) {
        let t = &self.cfg.timing;
        let bytes = b as u64 * self.cfg.model.d_model() as u64 * self.cfg.topo.element_bytes as u64;
        (t.host_sync_cycles as u64, (bytes as f64 / t.internode_bytes_per_cycle()).ceil() as u64)
    }

    /// One iteration of the batch split into micro-batches of `b_mu`, each
    /// passing every stage in order.
    fn schedule(&mut self, ctx: &[u32], b_mu: u32) -> Schedule {
        let layers: Vec<LayerCost> = ctx.chunks(b_mu as usize).map(|c| self.layer_cost(c)).collect();
        let hand: Vec<u64> = ctx
            .chunks(b_mu as usize)
            .map(|c| {
                let (s, x) = self.handoff(c.len());
                s + x
            })
            .collect();
        let (slots, makespan) = pipeline(&layers, &self.stages, &hand);
        Schedule { b_mu, layers, slots, makespan }
    }

    /// Fixed `plan.b_mu`, or the split with the shortest iteration. The
    /// split is re-planned only when the batch membership changes.
    fn best_schedule(&mut self, ctx: &[u32], ids: &[u32]) -> Schedule {
        let b = ctx.len() as u32;
        if self.cfg.plan.b_mu > 0 {
            return self.schedule(ctx, self.cfg.plan.b_mu.min(b));
        }
        if let Some((members, b_mu)) = &self.split {
            if members == ids {
                let b_mu = *b_mu;
                return self.schedule(ctx, b_mu);
            }
        }
        let mut sizes: Vec<u32> = (1..=b).map(|m| b.div_ceil(m)).collect();
        sizes.dedup();
        let mut best: Option<Schedule> = None;
        for s in sizes {
            let cand = self.schedule(ctx, s);
            if best.as_ref().is_none_or(|b| cand.makespan < b.makespan) {
                best = Some(cand);
            }
        }
        let best = best.expect("non-empty batch");
        self.split = Some((ids.to_vec(), best.b_mu));
        best
    }
}

fn alloc_config(cfg: &SimConfig, cost: &CostModel, trace: &[Request]) -> AllocConfig {
    let l = &cost.layout;
    let mut chunks = l.chunks;
    if !cfg.features.dpa {
        let rows =
            static_command_bytes(cost, cfg.model.max_ctl).div_ceil(cfg.topo.pus() as u64 * cfg.topo.row_bytes as u64);
        chunks = chunks.saturating_sub(rows.div_ceil(l.rows_per_chunk as u64) as u32);
    }
    let mut a = AllocConfig::new(cfg.features.alloc_policy(), chunks, l.tb, cfg.model.max_ctl);
    a.max_new_tokens = cfg.max_new_tokens.max(trace.iter().map(|r| r.out_len).max().unwrap_or(0));
    a.rows_per_chunk = l.rows_per_chunk;
    a.region_base = l.region_base;
    a.channels = cfg.topo.channels;
    a.banks_per_channel = cfg.topo.banks_per_channel;
    a
}

/// Runs the decode loop of `trace` to completion.
///
/// Each iteration the host admits queued requests while KV chunks allow,
/// splits the running batch into micro-batches and pushes them through the
/// pipeline stages. Between stages a micro-batch pays a host sync plus the
/// activation transfer. When the last micro-batch leaves the last stage every
/// request has emitted one token; finished requests release their chunks and
/// the rest grow by one token before the next iteration.
pub fn simulate(trace: &[Request], cfg: &SimConfig) -> Result<(Timeline, SimReport), SimError> {
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let plan = cfg.plan;
    if plan.tp == 0 || !plan.fits_layers(cfg.model.n_layers) {
        return Err(SimError::Infeasible(format!("tp {} pp {}", plan.tp, plan.pp)));
    }
    if plan.modules() > cfg.topo.modules() {
        return Err(SimError::Infeasible(format!(
            "{} modules needed, {} available",
            plan.modules(),
            cfg.topo.modules()
        )));
    }
    for shape in LayerShape::fc_layers(&cfg.model) {
        partition_fc(&shape, plan.tp, cfg.topo.element_bytes).map_err(|e| SimError::Infeasible(e.to_string()))?;
    }
    let cost = CostModel::new(&cfg.model, &cfg.topo, &cfg.timing, plan, cfg.features, cfg.tokens_per_row)?;
    let acfg = alloc_config(cfg, &cost, trace);
    let (fit, dropped): (Vec<Request>, Vec<Request>) = trace.iter().partition(|r| {
        r.l_in > 0 && r.out_len > 0 && r.final_len() <= acfg.max_ctl && acfg.commitment(r.l_in) <= acfg.total_chunks
    });
    if fit.is_empty() {
        return Err(SimError::Infeasible("no request fits the KV capacity".into()));
    }

    let mut sim = Sim::new(cfg, cost);
    let rec = cfg.record_timeline;
    let mut tl = Timeline::default();
    let mut alloc = AllocatorState::new(acfg);
    let mut queue: VecDeque<Request> = fit.into_iter().collect();
    let mut live: Vec<Live> = Vec::new();

    let mut t = 0u64;
    let mut iterations = 0u64;
    let mut live_area = 0u128;
    let mut b_mu_sum = 0u64;
    let mut max_batch = 0u32;
    let mut tokens = 0u64;
    let mut completed = 0u32;
    let mut macs = 0u64;
    let mut busy = 0u64;
    let mut sync_events = 0u64;
    let mut comm_cycles = 0u64;
    let mut per_op: BTreeMap<OpKind, OpStats> = BTreeMap::new();

    loop {
        alloc.set_time(t);
        while let Some(&r) = queue.front() {
            if !alloc.can_admit(r.l_in, 0) {
                break;
            }
            queue.pop_front();
            let chunks = alloc.admit(&r).map_err(|e| SimError::Infeasible(e.to_string()))?.len() as u32;
            tl.push(
                rec,
                Event {
                    start: t,
                    end: t,
                    kind: EventKind::Admit,
                    stage: None,
                    micro_batch: None,
                    request: Some(r.id),
                    size: chunks,
                },
            );
            let mut l = Live { req: r, ctx: r.l_in, generated: 0 };
            grow(&mut alloc, &mut l, t, &mut tl, rec)?;
            live.push(l);
        }
        if live.is_empty() {
            if queue.is_empty() {
                break;
            }
            return Err(SimError::Deadlock { queued: queue.len() });
        }
        let b = live.len() as u32;
        max_batch = max_batch.max(b);
        let ctx: Vec<u32> = live.iter().map(|l| l.ctx).collect();
        let ids: Vec<u32> = live.iter().map(|l| l.req.id).collect();
        let sched = sim.best_schedule(&ctx, &ids);
        let mb_sizes: Vec<u32> = ctx.chunks(sched.b_mu as usize).map(|c| c.len() as u32).collect();
        for slot in &sched.slots {
            let lc = &sched.layers[slot.mb];
            let n = sim.stages[slot.stage] as u64;
            let size = mb_sizes[slot.mb];
            macs += lc.macs * n;
            busy += slot.busy;
            comm_cycles += lc.comm * n;
            sync_events += (sim.reduce_bytes.len() as u64) * n;
            for (op, c) in &lc.ops {
                let e = per_op.entry(*op).or_default();
                e.calls += n;
                e.cycles += c.cycles * n;
                e.breakdown.add(&c.breakdown.scaled(n));
            }
            if slot.stage > 0 {
                let (sync, comm) = sim.handoff(size as usize);
                sync_events += 1;
                comm_cycles += comm;
                let s0 = t + slot.ready - sync - comm;
                let stage = Some(slot.stage as u32 - 1);
                let mb = Some(slot.mb as u32);
                tl.push(
                    rec,
                    Event {
                        start: s0,
                        end: s0 + sync,
                        kind: EventKind::Sync,
                        stage,
                        micro_batch: mb,
                        request: None,
                        size,
                    },
                );
                tl.push(
                    rec,
                    Event {
                        start: s0 + sync,
                        end: s0 + sync + comm,
                        kind: EventKind::Comm,
                        stage,
                        micro_batch: mb,
                        request: None,
                        size,
                    },
                );
            }
            tl.push(
                rec,
                Event {
                    start: t + slot.start,
                    end: t + slot.end,
                    kind: EventKind::StageExec,
                    stage: Some(slot.stage as u32),
                    micro_batch: Some(slot.mb as u32),
                    request: None,
                    size,
                },
            );
        }
        iterations += 1;
        b_mu_sum += sched.b_mu as u64;
        live_area += sched.makespan as u128 * b as u128;
        t += sched.makespan;
        tokens += b as u64;
        alloc.set_time(t);
        let mut keep = Vec::with_capacity(live.len());
        for mut l in std::mem::take(&mut live) {
            l.generated += 1;
            if l.generated >= l.req.out_len {
                let rows = alloc.release(l.req.id).map_err(|e| SimError::Infeasible(e.to_string()))?;
                completed += 1;
                tl.push(
                    rec,
                    Event {
                        start: t,
                        end: t,
                        kind: EventKind::Release,
                        stage: None,
                        micro_batch: None,
                        request: Some(l.req.id),
                        size: rows / acfg.rows_per_chunk,
                    },
                );
            } else {
                grow(&mut alloc, &mut l, t, &mut tl, rec)?;
                keep.push(l);
            }
        }
        live = keep;
    }

    let secs = t as f64 / cfg.timing.pim_clock_hz;
    let report = SimReport {
        plan,
        features: cfg.features,
        avg_b_mu: b_mu_sum as f64 / iterations.max(1) as f64,
        iterations,
        wall_cycles: t,
        tokens,
        tokens_per_sec: if secs > 0.0 { tokens as f64 / secs } else { 0.0 },
        utilization_pct: utilization(macs, plan.modules(), t, &cfg.topo),
        bubble_pct: if t > 0 { 100.0 * (1.0 - busy as f64 / (plan.pp as f64 * t as f64)) } else { 0.0 },
        avg_batch: if t > 0 { live_area as f64 / t as f64 } else { 0.0 },
        max_batch,
        completed,
        dropped: dropped.len() as u32,
        kv_chunks: acfg.total_chunks,
        sync_events,
        comm_cycles,
        per_op,
    };
    Ok((tl, report))
}

/// Grows `l` by the token about to be generated.
fn grow(alloc: &mut AllocatorState, l: &mut Live, t: u64, tl: &mut Timeline, rec: bool) -> Result<(), SimError> {
    let c = alloc.grow(l.req.id, l.ctx + 1).map_err(|e| SimError::Infeasible(e.to_string()))?;
    l.ctx += 1;
    if c.is_some() {
        tl.push(
            rec,
            Event {
                start: t,
                end: t,
                kind: EventKind::Grow,
                stage: None,
                micro_batch: None,
                request: Some(l.req.id),
                size: 1,
            },
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(halves: [(u64, u64); 2]) -> LayerCost {
        LayerCost { halves, macs: 0, comm: halves[0].1 + halves[1].1, ops: Vec::new() }
    }

    fn cfg(model: &str, tp: u32, pp: u32) -> SimConfig {
        SimConfig {
            model: ModelConfig::preset(model).unwrap(),
            plan: ParallelismPlan::new(tp, pp),
            ..Default::default()
        }
    }

    fn trace(n: u32, l_in: u32, out_len: u32) -> Vec<Request> {
        (0..n).map(|i| Request::new(i, l_in + 97 * i, out_len + i % 3)).collect()
    }

    #[test]
    fn reduce_wait_overlaps_other_micro_batch() {
        let layers = [layer([(10, 5), (20, 5)]), layer([(10, 5), (20, 5)])];
        assert_eq!(run_stage(&[0, 0], &layers, 1), vec![(0, 45, 30), (10, 65, 30)]);
        // One micro-batch alone pays every wait.
        assert_eq!(run_stage(&[0], &layers[..1], 2), vec![(0, 80, 60)]);
    }

    #[test]
    fn four_stage_toy_gantt() {
        let layers: Vec<LayerCost> = (0..3).map(|_| layer([(4, 0), (6, 0)])).collect();
        let (slots, makespan) = pipeline(&layers, &[1, 1, 1, 1], &[5, 5, 5]);
        let spans: Vec<(usize, usize, u64, u64)> = slots.iter().map(|s| (s.stage, s.mb, s.start, s.end)).collect();
        let want = vec![
            (0, 0, 0, 10),
            (0, 1, 10, 20),
            (0, 2, 20, 30),
            (1, 0, 15, 25),
            (1, 1, 25, 35),
            (1, 2, 35, 45),
            (2, 0, 30, 40),
            (2, 1, 40, 50),
            (2, 2, 50, 60),
            (3, 0, 45, 55),
            (3, 1, 55, 65),
            (3, 2, 65, 75),
        ];
        assert_eq!(spans, want);
        // (stages + micro-batches - 1) slots of work plus the handoffs on the critical path.
        assert_eq!(makespan, (4 + 3 - 1) * 10 + 3 * 5);
        let busy: u64 = slots.iter().map(|s| s.busy).sum();
        assert_eq!(busy, 12 * 10);
    }

    #[test]
    fn single_module_single_request() {
        let c = cfg("qwen-1.8b", 1, 1);
        let (_, r) = simulate(&[Request::new(0, 1000, 16)], &c).unwrap();
        assert_eq!((r.sync_events, r.comm_cycles), (0, 0));
        assert_eq!((r.iterations, r.tokens, r.completed), (16, 16, 1));
        assert!(r.bubble_pct.abs() < 1e-9);
        let per_token = r.wall_cycles as f64 / 16.0 / c.timing.pim_clock_hz;
        assert!((r.tokens_per_sec - 1.0 / per_token).abs() / r.tokens_per_sec < 1e-9);
    }

    #[test]
    fn per_token_latency_grows_with_context() {
        let c = cfg("qwen-1.8b", 1, 1);
        let (_, short) = simulate(&[Request::new(0, 512, 8)], &c).unwrap();
        let (_, long) = simulate(&[Request::new(0, 16384, 8)], &c).unwrap();
        assert!(long.wall_cycles > short.wall_cycles);
    }

    #[test]
    fn deterministic() {
        let mut c = cfg("qwen-7b", 4, 2);
        c.record_timeline = true;
        let t = trace(12, 2000, 20);
        let a = simulate(&t, &c).unwrap();
        let b = simulate(&t, &c).unwrap();
        assert_eq!(serde_json::to_string(&a.1).unwrap(), serde_json::to_string(&b.1).unwrap());
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn work_conservation() {
        let c = cfg("qwen-7b", 2, 4);
        let mut t = trace(20, 3000, 10);
        t.push(Request::new(100, 0, 5));
        t.push(Request::new(101, c.model.max_ctl, 5));
        let (_, r) = simulate(&t, &c).unwrap();
        assert_eq!(r.dropped, 2);
        assert_eq!(r.completed, 20);
        let want: u64 = t.iter().filter(|q| q.id < 100).map(|q| q.out_len as u64).sum();
        assert_eq!(r.tokens, want);
        assert!(r.max_batch as f64 >= r.avg_batch);
    }

    #[test]
    fn timeline_stage_events_respect_order() {
        let mut c = cfg("qwen-1.8b", 1, 4);
        c.record_timeline = true;
        let (tl, r) = simulate(&trace(6, 1500, 4), &c).unwrap();
        let exec: Vec<&Event> = tl.events.iter().filter(|e| e.kind == EventKind::StageExec).collect();
        assert!(!exec.is_empty());
        assert!(exec.iter().all(|e| e.end <= r.wall_cycles && e.start <= e.end));
        // Without reduce waits a stage runs one micro-batch at a time.
        for s in 0..4 {
            let mut v: Vec<(u64, u64)> = exec.iter().filter(|e| e.stage == Some(s)).map(|e| (e.start, e.end)).collect();
            v.sort();
            assert!(v.windows(2).all(|w| w[0].1 <= w[1].0));
        }
        let syncs = tl.events.iter().filter(|e| e.kind == EventKind::Sync).count();
        assert!(syncs > 0);
        let g = tl.gantt(4, 40);
        assert_eq!(g.lines().count(), 5);
        let mut csv = Vec::new();
        tl.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("start,end,kind"));
    }

    #[test]
    fn features_never_slow_down() {
        let t = trace(24, 6000, 12);
        let mut c = cfg("qwen-7b", 4, 2);
        c.features = Features::none();
        let (_, off) = simulate(&t, &c).unwrap();
        c.features = Features::all();
        let (_, on) = simulate(&t, &c).unwrap();
        assert!(on.tokens_per_sec >= off.tokens_per_sec);
        assert!(on.avg_batch >= off.avg_batch);
    }

    #[test]
    fn errors() {
        let c = cfg("qwen-7b", 1, 1);
        assert_eq!(simulate(&[], &c).unwrap_err(), SimError::EmptyTrace);
        let bad = cfg("qwen-7b", 1, 33);
        assert!(matches!(simulate(&trace(1, 10, 1), &bad), Err(SimError::Infeasible(_))));
        let big = SimConfig { topo: PimTopology::default().with_nodes(1), ..cfg("qwen-7b", 4, 4) };
        assert!(matches!(simulate(&trace(1, 10, 1), &big), Err(SimError::Infeasible(_))));
        let none = cfg("qwen-7b", 2, 2);
        assert!(matches!(simulate(&[Request::new(0, 0, 4)], &none), Err(SimError::Infeasible(_))));
    }

    #[test]
    fn auto_micro_batch_beats_every_fixed_size() {
        let t: Vec<Request> = (0..8).map(|i| Request::new(i, 4096, 6)).collect();
        let mut c = cfg("qwen-7b", 2, 4);
        let (_, auto) = simulate(&t, &c).unwrap();
        let mut curve = Vec::new();
        for b_mu in 1..=8 {
            c.plan.b_mu = b_mu;
            let (_, r) = simulate(&t, &c).unwrap();
            assert_eq!(r.avg_b_mu, b_mu as f64);
            curve.push(r.wall_cycles);
        }
        assert!(auto.wall_cycles <= *curve.iter().min().unwrap());
        // Whole batch in one micro-batch serializes the pipeline.
        assert!(curve[7] > *curve.iter().min().unwrap());
    }

    #[test]
    fn dpa_off_loses_capacity_to_command_storage() {
        let mut c = cfg("qwen-7b", 4, 2);
        let (_, on) = simulate(&trace(2, 1000, 2), &c).unwrap();
        c.features.dpa = false;
        let (_, off) = simulate(&trace(2, 1000, 2), &c).unwrap();
        assert!(off.kv_chunks < on.kv_chunks);
    }
}
