//! Best-plan utilization as models and node counts grow, with every
//! mechanism on and with all of them off.

use pimsim::harness::{gen_trace, util_point, LenStats, TraceSpec, UTIL_MODELS};
use pimsim::plan::Features;

fn main() {
    let trace = gen_trace(&TraceSpec::synth(LenStats::MUSIQUE, 400, 42)).unwrap();
    for (model, nodes) in UTIL_MODELS {
        for f in [Features::all(), Features::none()] {
            let p = util_point(model, nodes, f, &trace);
            let plan = p.best_plan.map_or("-".into(), |p| format!("({},{})", p.tp, p.pp));
            println!(
                "{model:>12} x{nodes:<2} {:>22} plan {plan:>8} util {:>5.1}% {:>8.0} tok/s",
                f.label(),
                p.utilization_pct,
                p.tokens_per_sec
            );
        }
    }
}
