use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::report::Format;
use super::verify::{DpaCheck, FunctionalCheck};
use crate::compiler::{stack_sizes, Compiled, ExecutionTable};
use crate::plan::ParallelismPlan;
use crate::scheduler::SweepReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSummary {
    pub module: u32,
    pub stage: u32,
    pub shard: u32,
    pub layers: String,
    pub weight_rows: u32,
    pub kv_chunks: u32,
    pub tokens_per_chunk: u32,
    pub fc_commands: usize,
    /// Loop-encoded attention stacks, bytes.
    pub attn_stack_bytes: usize,
    /// The same stacks fully unrolled for the maximum context, bytes.
    pub unrolled_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileSummary {
    pub model: String,
    pub plan: ParallelismPlan,
    pub max_ctl: u32,
    pub table: ExecutionTable,
    pub modules: Vec<ModuleSummary>,
}

/// Per-module footprint of `c`; the unrolled sizes are computed for
/// `max_ctl` tokens on the first module of each stage.
pub fn compile_summary(c: &Compiled) -> CompileSummary {
    let max_ctl = c.model.max_ctl;
    let modules = c
        .modules
        .iter()
        .map(|p| {
            let m = &p.manifest;
            let (encoded, unrolled) = stack_sizes(p, max_ctl);
            ModuleSummary {
                module: m.module,
                stage: m.stage,
                shard: m.shard,
                layers: format!("{}..{}", m.layers.start, m.layers.end),
                weight_rows: m.kv.base_row,
                kv_chunks: m.kv.chunks,
                tokens_per_chunk: m.kv.tokens_per_chunk,
                fc_commands: p.fc.iter().map(|f| f.stack.entries.len()).sum(),
                attn_stack_bytes: encoded,
                unrolled_bytes: unrolled,
            }
        })
        .collect();
    CompileSummary { model: c.model.name.clone(), plan: c.table.plan, max_ctl, table: c.table.clone(), modules }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub functional: FunctionalCheck,
    pub functional_model: String,
    pub dpa: DpaCheck,
    pub dpa_model: String,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.functional.pass && self.dpa.pass
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializes");
    out.push(b'\n');
    out
}

fn csv_rows(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

const MODULE_COLUMNS: [&str; 10] = [
    "module",
    "stage",
    "shard",
    "layers",
    "weight_rows",
    "kv_chunks",
    "tokens_per_chunk",
    "fc_commands",
    "attn_stack_bytes",
    "unrolled_bytes",
];

fn module_row(m: &ModuleSummary) -> Vec<String> {
    vec![
        m.module.to_string(),
        m.stage.to_string(),
        m.shard.to_string(),
        m.layers.clone(),
        m.weight_rows.to_string(),
        m.kv_chunks.to_string(),
        m.tokens_per_chunk.to_string(),
        m.fc_commands.to_string(),
        m.attn_stack_bytes.to_string(),
        m.unrolled_bytes.to_string(),
    ]
}

pub fn emit_compile(s: &CompileSummary, format: Format) -> Vec<u8> {
    match format {
        Format::Json => json(s),
        Format::Csv => csv_rows(&MODULE_COLUMNS, s.modules.iter().map(module_row)),
        Format::Text => {
            let mut t = format!("{} tp={} pp={} max context {}\n", s.model, s.plan.tp, s.plan.pp, s.max_ctl);
            for e in s.table.entries.iter().filter(|e| e.op_kind.is_some()) {
                let _ = writeln!(t, "  {:<8} {:?} {:?} x{}", e.node, e.dir, e.comm, e.modules);
            }
            let _ = writeln!(t, "{}", MODULE_COLUMNS.join(" "));
            for m in &s.modules {
                let _ = writeln!(t, "{}", module_row(m).join(" "));
            }
            t.into_bytes()
        }
    }
}

pub fn emit_verify(r: &VerifyReport, format: Format) -> Vec<u8> {
    let f = &r.functional;
    let d = &r.dpa;
    let rows = vec![
        vec![
            "functional".into(),
            r.functional_model.clone(),
            format!("{:.3e}", f.max_rel_err),
            format!("<= {:e}", f.tolerance),
            f.pass.to_string(),
        ],
        vec![
            "dpa".into(),
            r.dpa_model.clone(),
            d.mismatches.to_string(),
            format!("0 of {}", d.cases),
            d.pass.to_string(),
        ],
    ];
    match format {
        Format::Json => json(r),
        Format::Csv => csv_rows(&["check", "model", "observed", "expected", "pass"], rows),
        Format::Text => {
            let mut t = String::new();
            for row in rows {
                let tag = if row[4] == "true" { "PASS" } else { "FAIL" };
                let _ = writeln!(t, "[{tag}] {} on {}: {} (expected {})", row[0], row[1], row[2], row[3]);
            }
            t.into_bytes()
        }
    }
}

pub fn emit_sweep(s: &SweepReport, format: Format) -> Vec<u8> {
    let rows = s.points.iter().map(|p| {
        vec![
            p.plan.tp.to_string(),
            p.plan.pp.to_string(),
            format!("{:.2}", p.tokens_per_sec),
            format!("{:.2}", p.avg_batch),
            format!("{:.2}", p.utilization_pct),
            if p.best { "best".into() } else { p.infeasible.clone().unwrap_or_default() },
        ]
    });
    let header = ["tp", "pp", "tokens_per_sec", "avg_batch", "util_pct", "note"];
    match format {
        Format::Json => json(&s.points),
        Format::Csv => csv_rows(&header, rows),
        Format::Text => {
            let mut t = format!("{:>4} {:>4} {:>12} {:>9} {:>8}  note\n", "tp", "pp", "tok/s", "avg_b", "util%");
            for r in rows {
                let _ = writeln!(t, "{:>4} {:>4} {:>12} {:>9} {:>8}  {}", r[0], r[1], r[2], r[3], r[4], r[5]);
            }
            t.into_bytes()
        }
    }
}
