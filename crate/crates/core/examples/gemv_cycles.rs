//! Runs fully connected layers through the cycle model and compares against
//! the closed-form estimate.

use pimsim::compiler::FcLayout;
use pimsim::device::{analytic_cycles, GemvShape, ModuleState, PimTopology, TimingParams};

fn main() {
    let topo = PimTopology::default();
    let timing = TimingParams::default();
    println!("{:>12} {:>10} {:>10} {:>8}", "shape", "simulated", "analytic", "dev %");
    for (rows, cols) in [(4096, 4096), (4096, 8192), (8192, 4096), (12288, 12288)] {
        let layout = FcLayout::new(rows, cols, 0, &topo);
        let mut s = ModuleState::new(topo, false);
        let x = vec![0.5f32; cols as usize];
        for (gpr, segs) in layout.inputs(&x, topo.channels) {
            s.set_input(gpr, segs).unwrap();
        }
        let sim = s.execute(&layout.commands(), &timing).unwrap().cycles;
        let model = analytic_cycles(GemvShape { rows, cols }, &topo, &timing);
        let dev = 100.0 * (sim as f64 - model as f64) / model as f64;
        println!("{:>12} {sim:>10} {model:>10} {dev:>8.3}", format!("{rows}x{cols}"));
    }
}
