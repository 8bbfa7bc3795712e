//! Compares average batch size under on-demand KV chunk allocation and
//! worst-case reservation for a few length distributions.

use pimsim::compiler::{compile, DecoderGraph};
use pimsim::device::PimTopology;
use pimsim::harness::{gen_trace, LenStats, TraceSpec};
use pimsim::memmgr::{simulate_batching, AllocConfig, AllocPolicy};
use pimsim::model::ModelConfig;
use pimsim::plan::ParallelismPlan;

fn main() {
    let m = ModelConfig::preset("qwen-7b").unwrap();
    let topo = PimTopology::default().with_nodes(4);
    let c = compile(&DecoderGraph::from_model(&m), ParallelismPlan::new(8, 4), &topo, None).unwrap();
    let kv = c.modules[0].manifest.kv;
    let mut lazy = AllocConfig::new(AllocPolicy::Lazy, kv.chunks, kv.tokens_per_chunk, 32 * 1024);
    lazy.rows_per_chunk = kv.rows_per_chunk;
    lazy.region_base = kv.base_row;
    let reserve = AllocConfig { policy: AllocPolicy::StaticMax, ..lazy };
    println!("{} chunks of {} tokens per module", kv.chunks, kv.tokens_per_chunk);

    for (name, stats) in [
        ("qmsum", LenStats::QMSUM),
        ("musique", LenStats::MUSIQUE),
        ("narrow 4k", LenStats { mean: 4096.0, std: 256.0, min: 3072, max: 5120 }),
    ] {
        let trace = gen_trace(&TraceSpec::synth(stats, 1000, 42)).unwrap();
        let a = simulate_batching(&trace, lazy);
        let b = simulate_batching(&trace, reserve);
        println!(
            "{name:>10}: lazy {:.1}, reserved {:.1}, ratio {:.2}",
            a.avg_batch,
            b.avg_batch,
            a.avg_batch / b.avg_batch
        );
    }
}
