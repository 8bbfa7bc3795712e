use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::Config;
use crate::device::Breakdown;
use crate::isa::OpKind;
use crate::scheduler::{OpStats, SimReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Text,
}

pub const PHASES: [&str; 6] = ["DT-GB", "DT-Out", "MAC", "EPU", "ACT", "other"];

/// Latency of one op split into phases that add up to the op latency.
///
/// Overlapped phases are scaled down to their exposed share; time no phase
/// accounts for is reported as `other`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpBreakdown {
    pub calls: u64,
    pub cycles: u64,
    pub phases: BTreeMap<String, f64>,
}

impl OpBreakdown {
    pub fn new(calls: u64, cycles: u64, b: &Breakdown) -> Self {
        let raw = [b.dt_gb, b.dt_out, b.mac, b.epu, b.activate];
        let sum: u64 = raw.iter().sum();
        let (scale, other) =
            if sum > cycles { (cycles as f64 / sum as f64, 0.0) } else { (1.0, (cycles - sum) as f64) };
        let mut phases: BTreeMap<String, f64> =
            PHASES.iter().zip(raw).map(|(p, v)| (p.to_string(), v as f64 * scale)).collect();
        phases.insert("other".into(), other);
        OpBreakdown { calls, cycles, phases }
    }

    pub fn from_stats(s: &OpStats) -> Self {
        Self::new(s.calls, s.cycles, &s.breakdown)
    }

    pub fn pct(&self, phase: &str) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        100.0 * self.phases.get(phase).copied().unwrap_or(0.0) / self.cycles as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: Config,
    pub tokens_per_sec: f64,
    pub utilization_pct: f64,
    pub avg_batch: f64,
    pub max_batch: u32,
    pub bubble_pct: f64,
    pub avg_b_mu: f64,
    pub wall_cycles: u64,
    pub tokens: u64,
    pub completed: u32,
    pub dropped: u32,
    pub kv_chunks: u32,
    pub sync_events: u64,
    pub comm_cycles: u64,
    pub latency_breakdown: BTreeMap<OpKind, OpBreakdown>,
}

impl MetricsReport {
    pub fn new(config: &Config, r: &SimReport) -> Self {
        MetricsReport {
            config: config.clone(),
            tokens_per_sec: r.tokens_per_sec,
            utilization_pct: r.utilization_pct,
            avg_batch: r.avg_batch,
            max_batch: r.max_batch,
            bubble_pct: r.bubble_pct,
            avg_b_mu: r.avg_b_mu,
            wall_cycles: r.wall_cycles,
            tokens: r.tokens,
            completed: r.completed,
            dropped: r.dropped,
            kv_chunks: r.kv_chunks,
            sync_events: r.sync_events,
            comm_cycles: r.comm_cycles,
            latency_breakdown: r.per_op.iter().map(|(k, s)| (*k, OpBreakdown::from_stats(s))).collect(),
        }
    }

    fn scalars(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tokens_per_sec", format!("{:.3}", self.tokens_per_sec)),
            ("utilization_pct", format!("{:.3}", self.utilization_pct)),
            ("avg_batch", format!("{:.3}", self.avg_batch)),
            ("max_batch", self.max_batch.to_string()),
            ("bubble_pct", format!("{:.3}", self.bubble_pct)),
            ("avg_b_mu", format!("{:.3}", self.avg_b_mu)),
            ("wall_cycles", self.wall_cycles.to_string()),
            ("tokens", self.tokens.to_string()),
            ("completed", self.completed.to_string()),
            ("dropped", self.dropped.to_string()),
            ("kv_chunks", self.kv_chunks.to_string()),
            ("sync_events", self.sync_events.to_string()),
            ("comm_cycles", self.comm_cycles.to_string()),
        ]
    }
}

fn op_name(op: OpKind) -> String {
    serde_json::to_value(op).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// Horizontal bar of phase shares, one glyph per phase.
pub fn breakdown_bar(b: &OpBreakdown, width: usize) -> String {
    const GLYPH: [char; 6] = ['G', 'O', '#', 'E', 'a', '.'];
    let mut bar = String::new();
    let mut acc = 0.0;
    let mut used = 0usize;
    for (p, g) in PHASES.iter().zip(GLYPH) {
        acc += b.pct(p);
        let upto = ((acc / 100.0) * width as f64).round() as usize;
        for _ in used..upto.min(width) {
            bar.push(g);
        }
        used = used.max(upto.min(width));
    }
    while bar.chars().count() < width {
        bar.push(' ');
    }
    bar
}

pub fn breakdown_text(bd: &BTreeMap<OpKind, OpBreakdown>) -> String {
    let mut s = String::from("latency breakdown (G=DT-GB O=DT-Out #=MAC E=EPU a=ACT .=other)\n");
    for (op, b) in bd {
        let _ = write!(s, "{:<8}|{}|", op_name(*op), breakdown_bar(b, 40));
        for p in PHASES {
            let _ = write!(s, " {p} {:5.1}%", b.pct(p));
        }
        s.push('\n');
    }
    s
}

/// Serializes a report. JSON carries everything; CSV and text carry the
/// metrics and breakdown, with the configuration only in JSON.
pub fn emit_report(r: &MetricsReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let mut v = serde_json::to_vec_pretty(r).expect("report serializes");
            v.push(b'\n');
            v
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["section", "key", "phase", "value"]).expect("in-memory write");
            for (k, v) in r.scalars() {
                w.write_record(["metric", k, "", &v]).expect("in-memory write");
            }
            for (op, b) in &r.latency_breakdown {
                let name = op_name(*op);
                w.write_record(["op_cycles", &name, "", &b.cycles.to_string()]).expect("in-memory write");
                for p in PHASES {
                    w.write_record(["op_phase_pct", &name, p, &format!("{:.3}", b.pct(p))]).expect("in-memory write");
                }
            }
            w.into_inner().expect("in-memory flush")
        }
        Format::Text => {
            let mut s = String::new();
            let c = &r.config;
            let _ = writeln!(
                s,
                "plan tp={} pp={}  features {}  model {}",
                c.plan.tp,
                c.plan.pp,
                c.features.label(),
                c.model.resolve().map(|m| m.name).unwrap_or_default()
            );
            for (k, v) in r.scalars() {
                let _ = writeln!(s, "{k:<16} {v}");
            }
            s.push_str(&breakdown_text(&r.latency_breakdown));
            s.into_bytes()
        }
    }
}
