//! Throughput of every tensor/pipeline split of 32 modules, with and without
//! on-demand KV allocation. Set PIMSIM_WORKERS to bound the thread pool.

use pimsim::device::PimTopology;
use pimsim::harness::{gen_trace, tpp_sweep, LenStats, TraceSpec};
use pimsim::model::ModelConfig;
use pimsim::plan::ParallelismPlan;
use pimsim::scheduler::SimConfig;

fn main() {
    let trace = gen_trace(&TraceSpec::synth(LenStats::MUSIQUE, 200, 42)).unwrap();
    let base = SimConfig {
        model: ModelConfig::preset("qwen-7b").unwrap(),
        topo: PimTopology::default().with_nodes(4),
        ..SimConfig::default()
    };
    let grid = ParallelismPlan::grid(base.topo.modules());
    let (on, off) = tpp_sweep(&trace, &base, &grid);
    println!("{:>8} {:>10} {:>10}", "(tp,pp)", "lazy", "reserved");
    for (a, b) in on.points.iter().zip(&off.points) {
        let mark = |best: bool| if best { "*" } else { " " };
        println!(
            "{:>8} {:>9.0}{} {:>9.0}{}",
            format!("({},{})", a.plan.tp, a.plan.pp),
            a.tokens_per_sec,
            mark(a.best),
            b.tokens_per_sec,
            mark(b.best)
        );
    }
}
