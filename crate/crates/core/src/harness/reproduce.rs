use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::report::{breakdown_text, Format, OpBreakdown};
use super::trace::{gen_trace, LenStats, TraceSpec};
use crate::device::{ExecMode, PimTopology, TimingParams};
use crate::isa::OpKind;
use crate::memmgr::{simulate_batching, AllocConfig, AllocPolicy};
use crate::model::ModelConfig;
use crate::plan::{Features, ParallelismPlan};
use crate::request::Request;
use crate::scheduler::{sweep, CostModel, OpCost, SimConfig, SimError, SweepReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[value(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FigureId {
    BatchGrowth,
    LatencyBd,
    TppSweep,
    UtilScaling,
    Pingpong,
}

impl FigureId {
    pub const ALL: [FigureId; 5] =
        [FigureId::BatchGrowth, FigureId::LatencyBd, FigureId::TppSweep, FigureId::UtilScaling, FigureId::Pingpong];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub expected: String,
    pub observed: String,
    pub pass: bool,
}

impl Check {
    fn at_least(name: &str, observed: f64, floor: f64) -> Self {
        Check {
            name: name.into(),
            expected: format!(">= {floor}"),
            observed: format!("{observed:.4}"),
            pass: observed >= floor,
        }
    }

    fn at_most(name: &str, observed: f64, ceil: f64) -> Self {
        Check {
            name: name.into(),
            expected: format!("<= {ceil}"),
            observed: format!("{observed:.4}"),
            pass: observed <= ceil,
        }
    }

    fn within(name: &str, observed: f64, lo: f64, hi: f64) -> Self {
        Check {
            name: name.into(),
            expected: format!("in [{lo}, {hi}]"),
            observed: format!("{observed:.4}"),
            pass: (lo..=hi).contains(&observed),
        }
    }

    fn holds(name: &str, what: &str, observed: String, pass: bool) -> Self {
        Check { name: name.into(), expected: what.into(), observed, pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &str, columns: &[&str]) -> Self {
        Table { title: title.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn to_text(&self) -> String {
        let mut w: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.len());
            }
        }
        let line = |cells: &[String]| {
            cells.iter().enumerate().map(|(i, c)| format!("{c:>width$}", width = w[i])).collect::<Vec<_>>().join("  ")
        };
        let mut s = format!("{}\n{}\n", self.title, line(&self.columns));
        for r in &self.rows {
            s.push_str(&line(r));
            s.push('\n');
        }
        s
    }
}

/// Tables and pass/fail checks of one scripted experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub figure: FigureId,
    pub seed: u64,
    pub tables: Vec<Table>,
    pub notes: Vec<String>,
    pub checks: Vec<Check>,
}

impl Bundle {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Expected-vs-observed lines of the failed checks.
    pub fn diff(&self) -> String {
        let mut s = String::new();
        for c in self.checks.iter().filter(|c| !c.pass) {
            let _ = writeln!(s, "- {}: expected {}", c.name, c.expected);
            let _ = writeln!(s, "+ {}: observed {}", c.name, c.observed);
        }
        s
    }

    pub fn emit(&self, format: Format) -> Vec<u8> {
        match format {
            Format::Json => {
                let mut v = serde_json::to_vec_pretty(self).expect("bundle serializes");
                v.push(b'\n');
                v
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["table", "row", "column", "value"]).expect("in-memory write");
                for t in &self.tables {
                    for (i, r) in t.rows.iter().enumerate() {
                        for (c, v) in t.columns.iter().zip(r) {
                            w.write_record([&t.title, &i.to_string(), c, v]).expect("in-memory write");
                        }
                    }
                }
                for c in &self.checks {
                    w.write_record([
                        "check",
                        &c.name,
                        &c.expected,
                        &format!("{} {}", c.observed, if c.pass { "PASS" } else { "FAIL" }),
                    ])
                    .expect("in-memory write");
                }
                w.into_inner().expect("in-memory flush")
            }
            Format::Text => {
                let mut s = String::new();
                for t in &self.tables {
                    s.push_str(&t.to_text());
                    s.push('\n');
                }
                for n in &self.notes {
                    s.push_str(n);
                    s.push('\n');
                }
                for c in &self.checks {
                    let _ = writeln!(
                        s,
                        "[{}] {}: {} (expected {})",
                        if c.pass { "PASS" } else { "FAIL" },
                        c.name,
                        c.observed,
                        c.expected
                    );
                }
                s.into_bytes()
            }
        }
    }
}

/// KV allocator of one module of `plan`, with no command-storage deduction.
pub fn module_alloc(
    model: &ModelConfig,
    topo: &PimTopology,
    plan: ParallelismPlan,
    policy: AllocPolicy,
) -> Result<AllocConfig, SimError> {
    let c = CostModel::new(model, topo, &TimingParams::default(), plan, Features::all(), None)?;
    let l = &c.layout;
    let mut a = AllocConfig::new(policy, l.chunks, l.tb, model.max_ctl);
    a.rows_per_chunk = l.rows_per_chunk;
    a.region_base = l.region_base;
    Ok(a)
}

/// Average batch under lazy and static allocation of the same capacity.
pub fn batch_growth(trace: &[Request], lazy: AllocConfig) -> (f64, f64) {
    let stat = AllocConfig { policy: AllocPolicy::StaticMax, ..lazy };
    let lazy = AllocConfig { policy: AllocPolicy::Lazy, ..lazy };
    (simulate_batching(trace, lazy).avg_batch, simulate_batching(trace, stat).avg_batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PingpongRow {
    pub op: OpKind,
    pub serial: OpCost,
    pub pingpong: OpCost,
}

impl PingpongRow {
    pub fn reduction_pct(&self) -> f64 {
        100.0 * (1.0 - self.pingpong.cycles as f64 / self.serial.cycles as f64)
    }

    /// Share of serial latency spent moving data over the host interface.
    pub fn serial_dt_share_pct(&self) -> f64 {
        100.0 * self.serial.breakdown.transfer() as f64 / self.serial.cycles as f64
    }
}

/// Per-op latency of one request at `t_cur` on one module, serial against
/// double-buffered transfers.
pub fn pingpong_study(
    model: &ModelConfig,
    topo: &PimTopology,
    timing: &TimingParams,
    tp: u32,
    t_cur: u32,
) -> Result<Vec<PingpongRow>, SimError> {
    let plan = ParallelismPlan::new(tp, 1);
    let mut on = CostModel::new(model, topo, timing, plan, Features::all(), None)?;
    let mut off = CostModel::new(model, topo, timing, plan, Features { pingpong: false, ..Features::all() }, None)?;
    debug_assert_eq!(off.mode(), ExecMode::Serial);
    Ok(OpKind::ALL
        .iter()
        .map(|&op| {
            let (serial, pingpong) = if op.is_attention() {
                (off.attn(op, &[t_cur]), on.attn(op, &[t_cur]))
            } else {
                (off.fc(op), on.fc(op))
            };
            PingpongRow { op, serial, pingpong }
        })
        .collect())
}

/// Sweeps `grid` with lazy allocation on and off.
pub fn tpp_sweep(trace: &[Request], base: &SimConfig, grid: &[ParallelismPlan]) -> (SweepReport, SweepReport) {
    let on = SimConfig { features: Features { dpa: true, ..base.features }, ..base.clone() };
    let off = SimConfig { features: Features { dpa: false, ..base.features }, ..base.clone() };
    (sweep(trace, &on, grid), sweep(trace, &off, grid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilPoint {
    pub model: String,
    pub nodes: u32,
    pub features: Features,
    pub best_plan: Option<ParallelismPlan>,
    pub tokens_per_sec: f64,
    pub utilization_pct: f64,
    pub avg_batch: f64,
}

/// Model presets with node counts scaled to their weight footprint.
pub const UTIL_MODELS: [(&str, u32); 3] = [("qwen-7b", 4), ("qwen-14b", 5), ("qwen-72b", 16)];

/// Best-plan utilization of `model` on `nodes` nodes for one feature set.
pub fn util_point(model: &str, nodes: u32, features: Features, trace: &[Request]) -> UtilPoint {
    let m = ModelConfig::preset(model).expect("preset");
    let topo = PimTopology::default().with_nodes(nodes);
    let base = SimConfig { model: m, topo, features, ..SimConfig::default() };
    let grid: Vec<ParallelismPlan> = ParallelismPlan::grid(topo.modules())
        .into_iter()
        .filter(|p| p.fits_layers(base.model.n_layers) && base.model.n_heads.is_multiple_of(p.tp))
        .collect();
    let s = sweep(trace, &base, &grid);
    let best = s.best();
    UtilPoint {
        model: model.into(),
        nodes,
        features,
        best_plan: best.map(|p| p.plan),
        tokens_per_sec: best.map_or(0.0, |p| p.tokens_per_sec),
        utilization_pct: best.map_or(0.0, |p| p.utilization_pct),
        avg_batch: best.map_or(0.0, |p| p.avg_batch),
    }
}

fn fmt_plan(p: ParallelismPlan) -> String {
    format!("({},{})", p.tp, p.pp)
}

/// Runs the scripted experiment for `figure` and checks its bounds.
pub fn reproduce(figure: FigureId, seed: u64) -> Result<Bundle, SimError> {
    let mut b = Bundle { figure, seed, tables: Vec::new(), notes: Vec::new(), checks: Vec::new() };
    let model7 = ModelConfig::preset("qwen-7b").expect("preset");
    let topo = PimTopology::default();
    let timing = TimingParams::default();
    let synth = |stats: LenStats, n: u32| gen_trace(&TraceSpec::synth(stats, n, seed)).expect("valid preset");
    match figure {
        FigureId::BatchGrowth => {
            let cap = module_alloc(&model7, &topo.with_nodes(4), ParallelismPlan::new(8, 4), AllocPolicy::Lazy)?;
            let short = LenStats { mean: 4096.0, std: 256.0, min: 3072, max: 5120 };
            let mut t = Table::new("average batch, lazy vs static", &["trace", "requests", "lazy", "static", "ratio"]);
            for (name, stats, floor) in [("qmsum", LenStats::QMSUM, 1.8), ("short-uniform", short, 3.0)] {
                let trace = synth(stats, 1000);
                let (lazy, stat) = batch_growth(&trace, cap);
                let r = lazy / stat;
                t.row(vec![name.into(), "1000".into(), format!("{lazy:.2}"), format!("{stat:.2}"), format!("{r:.3}")]);
                b.checks.push(Check::at_least(&format!("{name} lazy/static avg batch"), r, floor));
            }
            b.notes.push(format!(
                "capacity {} chunks of {} tokens, max context {}",
                cap.total_chunks, cap.tokens_per_chunk, cap.max_ctl
            ));
            b.tables.push(t);
        }
        FigureId::Pingpong | FigureId::LatencyBd => {
            let rows = pingpong_study(&model7, &topo, &timing, 4, 16384)?;
            let mut t = Table::new(
                "per-op latency at 16K context, qwen-7b tp=4",
                &["op", "serial", "pingpong", "reduction_pct", "serial_dt_pct"],
            );
            for r in &rows {
                t.row(vec![
                    format!("{:?}", r.op),
                    r.serial.cycles.to_string(),
                    r.pingpong.cycles.to_string(),
                    format!("{:.1}", r.reduction_pct()),
                    format!("{:.1}", r.serial_dt_share_pct()),
                ]);
            }
            b.tables.push(t);
            let get = |op| rows.iter().find(|r| r.op == op).expect("every op");
            if figure == FigureId::Pingpong {
                for (op, lo, hi) in [
                    (OpKind::Qkt, 30.0, 50.0),
                    (OpKind::Sv, 34.0, 54.0),
                    (OpKind::Ffn1, 19.0, 39.0),
                    (OpKind::Ffn2, 18.0, 38.0),
                ] {
                    b.checks.push(Check::within(&format!("{op:?} reduction pct"), get(op).reduction_pct(), lo, hi));
                }
            } else {
                let serial =
                    rows.iter().map(|r| (r.op, OpBreakdown::new(1, r.serial.cycles, &r.serial.breakdown))).collect();
                b.notes.push(format!("serial\n{}", breakdown_text(&serial)));
                for op in [OpKind::Qkt, OpKind::Sv] {
                    b.checks.push(Check::at_least(
                        &format!("{op:?} serial transfer share pct"),
                        get(op).serial_dt_share_pct(),
                        50.0,
                    ));
                }
            }
        }
        FigureId::TppSweep => {
            let trace = synth(LenStats::MUSIQUE, 200);
            let base = SimConfig { model: model7, topo: topo.with_nodes(4), ..SimConfig::default() };
            let grid: Vec<ParallelismPlan> = ParallelismPlan::grid(base.topo.modules()).into_iter().rev().collect();
            let (on, off) = tpp_sweep(&trace, &base, &grid);
            let mut t = Table::new(
                "throughput by (tp,pp), musique 200 requests",
                &["plan", "dpa_tok_s", "dpa_avg_batch", "nodpa_tok_s", "nodpa_avg_batch", "best"],
            );
            for (a, z) in on.points.iter().zip(&off.points) {
                let mark = match (a.best, z.best) {
                    (true, true) => "both",
                    (true, false) => "dpa",
                    (false, true) => "nodpa",
                    _ => "",
                };
                t.row(vec![
                    fmt_plan(a.plan),
                    format!("{:.1}", a.tokens_per_sec),
                    format!("{:.1}", a.avg_batch),
                    format!("{:.1}", z.tokens_per_sec),
                    format!("{:.1}", z.avg_batch),
                    mark.into(),
                ]);
            }
            b.tables.push(t);
            let tps: Vec<f64> = on.feasible().map(|p| p.tokens_per_sec).collect();
            let spread = tps.iter().cloned().fold(0.0, f64::max) / tps.iter().cloned().fold(f64::INFINITY, f64::min);
            b.checks.push(Check::at_least("dpa max/min throughput", spread, 1.3));
            let (bo, bf) = (on.best(), off.best());
            let gain = on
                .points
                .iter()
                .zip(&off.points)
                .filter(|(a, z)| a.infeasible.is_none() && z.tokens_per_sec > 0.0)
                .map(|(a, z)| a.tokens_per_sec / z.tokens_per_sec)
                .fold(0.0, f64::max);
            b.checks.push(Check::at_least("peak per-plan dpa / no-dpa throughput", gain, 1.15));
            let never_worse = on.points.iter().zip(&off.points).all(|(a, z)| a.tokens_per_sec >= z.tokens_per_sec);
            b.checks.push(Check::holds("dpa never slower per plan", "true", never_worse.to_string(), never_worse));
            let flagged = bo.is_some() && bf.is_some();
            b.checks.push(Check::holds(
                "both optima flagged",
                "dpa and no-dpa optimum present",
                format!(
                    "dpa {} no-dpa {}",
                    bo.map_or("-".into(), |p| fmt_plan(p.plan)),
                    bf.map_or("-".into(), |p| fmt_plan(p.plan))
                ),
                flagged,
            ));
        }
        FigureId::UtilScaling => {
            let trace = synth(LenStats::MUSIQUE, 400);
            let mut t = Table::new(
                "best-plan utilization by model",
                &["model", "nodes", "features", "plan", "tok_s", "util_pct", "avg_batch"],
            );
            let mut on = Vec::new();
            let mut off = Vec::new();
            for (m, nodes) in UTIL_MODELS {
                for (f, sink) in [(Features::none(), &mut off), (Features::all(), &mut on)] {
                    let p = util_point(m, nodes, f, &trace);
                    t.row(vec![
                        m.into(),
                        nodes.to_string(),
                        f.label(),
                        p.best_plan.map_or("-".into(), fmt_plan),
                        format!("{:.1}", p.tokens_per_sec),
                        format!("{:.2}", p.utilization_pct),
                        format!("{:.1}", p.avg_batch),
                    ]);
                    sink.push(p.utilization_pct);
                }
            }
            b.tables.push(t);
            for (i, (m, _)) in UTIL_MODELS.iter().enumerate() {
                b.checks.push(Check::at_least(&format!("{m} util on/off"), on[i] / off[i], 1.7));
            }
            let spread = on.iter().cloned().fold(0.0, f64::max) - on.iter().cloned().fold(f64::INFINITY, f64::min);
            b.checks.push(Check::at_most("feature-on util spread pts", spread, 5.0));
            let mono = off.windows(2).all(|w| w[1] <= w[0]);
            b.checks.push(Check::holds("feature-off util non-increasing", "true", format!("{off:.2?}"), mono));
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pingpong_bundle_passes_and_emits() {
        let b = reproduce(FigureId::Pingpong, 1).unwrap();
        assert!(b.pass(), "{}", b.diff());
        assert_eq!(b.checks.len(), 4);
        let text = String::from_utf8(b.emit(Format::Text)).unwrap();
        assert!(text.contains("[PASS] Qkt reduction pct"));
        let back: Bundle = serde_json::from_slice(&b.emit(Format::Json)).unwrap();
        assert_eq!(back, b);
        let csv = String::from_utf8(b.emit(Format::Csv)).unwrap();
        assert!(csv.lines().any(|l| l.starts_with("check,")));
    }

    #[test]
    fn diff_lists_only_failures() {
        let mut b = Bundle { figure: FigureId::TppSweep, seed: 0, tables: vec![], notes: vec![], checks: vec![] };
        b.checks.push(Check::at_least("a", 2.0, 1.0));
        b.checks.push(Check::at_most("b", 2.0, 1.0));
        b.checks.push(Check::within("c", 0.5, 0.0, 1.0));
        assert!(!b.pass());
        assert_eq!(b.diff(), "- b: expected <= 1\n+ b: observed 2.0000\n");
    }

    #[test]
    fn serial_transfer_dominates_attention() {
        let m = ModelConfig::preset("qwen-7b").unwrap();
        let rows = pingpong_study(&m, &PimTopology::default(), &TimingParams::default(), 4, 16384).unwrap();
        assert_eq!(rows.len(), OpKind::ALL.len());
        for r in &rows {
            assert!(r.pingpong.cycles <= r.serial.cycles);
            if r.op.is_attention() {
                assert!(r.serial_dt_share_pct() > 50.0);
            }
        }
    }

    #[test]
    fn lazy_allocation_grows_batch() {
        let m = ModelConfig::preset("qwen-7b").unwrap();
        let cap =
            module_alloc(&m, &PimTopology::default().with_nodes(4), ParallelismPlan::new(8, 4), AllocPolicy::Lazy)
                .unwrap();
        let trace = gen_trace(&TraceSpec::synth(LenStats::QMSUM, 200, 3)).unwrap();
        let (lazy, stat) = batch_growth(&trace, cap);
        assert!(lazy > stat && stat > 0.0);
    }
}
