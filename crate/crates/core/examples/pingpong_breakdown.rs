//! Per-operation latency with and without double-buffered transfers.

use pimsim::device::{PimTopology, TimingParams};
use pimsim::harness::pingpong_study;
use pimsim::model::ModelConfig;

fn main() {
    let m = ModelConfig::preset("qwen-7b").unwrap();
    let rows = pingpong_study(&m, &PimTopology::default(), &TimingParams::default(), 4, 16 * 1024).unwrap();
    println!("{:>6} {:>10} {:>10} {:>8} {:>12}", "op", "serial", "pingpong", "saved %", "transfer %");
    for r in rows {
        let share = 100.0 * r.serial.breakdown.transfer() as f64 / r.serial.cycles as f64;
        println!(
            "{:>6} {:>10} {:>10} {:>8.1} {:>12.1}",
            r.op.name(),
            r.serial.cycles,
            r.pingpong.cycles,
            r.reduction_pct(),
            share
        );
    }
}
