use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate, SimConfig, SimReport};
use crate::plan::ParallelismPlan;
use crate::request::Request;

/// Environment variable holding the worker thread count for sweeps.
pub const WORKERS_ENV: &str = "PIMSIM_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub plan: ParallelismPlan,
    /// Set when the plan cannot run; the metrics are then zero.
    pub infeasible: Option<String>,
    pub tokens_per_sec: f64,
    pub avg_batch: f64,
    pub utilization_pct: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub reports: Vec<Option<SimReport>>,
}

impl SweepReport {
    pub fn best(&self) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.best)
    }

    pub fn feasible(&self) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(|p| p.infeasible.is_none())
    }
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Simulates `trace` under every plan in `grid`. Points run on a worker pool;
/// results keep grid order, so the output does not depend on the pool size.
pub fn sweep(trace: &[Request], base: &SimConfig, grid: &[ParallelismPlan]) -> SweepReport {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers()).build().expect("thread pool");
    let results: Vec<_> = pool.install(|| {
        grid.par_iter()
            .map(|&plan| {
                let cfg = SimConfig { plan, record_timeline: false, ..base.clone() };
                simulate(trace, &cfg).map(|(_, r)| r)
            })
            .collect()
    });
    let mut points: Vec<SweepPoint> = grid
        .iter()
        .zip(&results)
        .map(|(&plan, r)| match r {
            Ok(r) => SweepPoint {
                plan,
                infeasible: None,
                tokens_per_sec: r.tokens_per_sec,
                avg_batch: r.avg_batch,
                utilization_pct: r.utilization_pct,
                best: false,
            },
            Err(e) => SweepPoint {
                plan,
                infeasible: Some(e.to_string()),
                tokens_per_sec: 0.0,
                avg_batch: 0.0,
                utilization_pct: 0.0,
                best: false,
            },
        })
        .collect();
    let best = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.infeasible.is_none())
        .max_by(|a, b| a.1.tokens_per_sec.total_cmp(&b.1.tokens_per_sec).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    if let Some(i) = best {
        points[i].best = true;
    }
    SweepReport { points, reports: results.into_iter().map(Result::ok).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::PimTopology;

    #[test]
    fn keeps_grid_order_and_flags_one_best() {
        let trace: Vec<Request> = (0..6).map(|i| Request::new(i, 2000 + 300 * i, 4)).collect();
        let base = SimConfig { topo: PimTopology::default().with_nodes(1), ..Default::default() };
        let mut grid = ParallelismPlan::grid(8);
        grid.push(ParallelismPlan::new(1, 64));
        let r = sweep(&trace, &base, &grid);
        assert_eq!(r.points.iter().map(|p| p.plan).collect::<Vec<_>>(), grid);
        assert_eq!(r.points.iter().filter(|p| p.best).count(), 1);
        assert!(r.points.last().unwrap().infeasible.is_some());
        let best = r.best().unwrap();
        assert!(r.feasible().all(|p| p.tokens_per_sec <= best.tokens_per_sec));
        assert_eq!(r.reports.iter().filter(|x| x.is_some()).count(), r.feasible().count());
        for (p, rep) in r.points.iter().zip(&r.reports) {
            if let Some(rep) = rep {
                let one = simulate(&trace, &SimConfig { plan: p.plan, ..base.clone() }).unwrap().1;
                assert_eq!(&one, rep);
            }
        }
    }
}
