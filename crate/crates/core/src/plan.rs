use serde::{Deserialize, Serialize};

use crate::memmgr::AllocPolicy;
use crate::partition::KvStrategy;

/// Tensor x pipeline parallel assignment. `b_mu == 0` selects the micro-batch
/// size automatically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ParallelismPlan {
    pub tp: u32,
    pub pp: u32,
    pub b_mu: u32,
}

impl Default for ParallelismPlan {
    fn default() -> Self {
        ParallelismPlan { tp: 1, pp: 1, b_mu: 0 }
    }
}

impl ParallelismPlan {
    pub fn new(tp: u32, pp: u32) -> Self {
        ParallelismPlan { tp, pp, b_mu: 0 }
    }

    pub fn modules(&self) -> u32 {
        self.tp * self.pp
    }

    /// Layers held by each stage: contiguous blocks, the first `n_layers % pp`
    /// stages taking one layer more than the rest.
    pub fn stage_layers(&self, n_layers: u32) -> Vec<std::ops::Range<u32>> {
        let (base, extra) = (n_layers / self.pp, n_layers % self.pp);
        let end = |s: u32| s * base + s.min(extra);
        (0..self.pp).map(|s| end(s)..end(s + 1)).collect()
    }

    /// True when every stage holds at least one layer.
    pub fn fits_layers(&self, n_layers: u32) -> bool {
        self.pp > 0 && self.pp <= n_layers
    }

    /// All (tp, pp) pairs whose product is `modules`.
    pub fn grid(modules: u32) -> Vec<ParallelismPlan> {
        (1..=modules)
            .filter(|tp| modules.is_multiple_of(*tp))
            .map(|tp| ParallelismPlan::new(tp, modules / tp))
            .collect()
    }
}

/// Optional mechanisms: token-parallel KV placement, dynamic command encoding
/// with lazy allocation, and double-buffered transfers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Features {
    pub itpp: bool,
    pub dpa: bool,
    pub pingpong: bool,
}

impl Default for Features {
    fn default() -> Self {
        Features::all()
    }
}

impl Features {
    pub fn all() -> Self {
        Features { itpp: true, dpa: true, pingpong: true }
    }

    pub fn none() -> Self {
        Features { itpp: false, dpa: false, pingpong: false }
    }

    pub fn strategy(&self) -> KvStrategy {
        if self.itpp {
            KvStrategy::Itpp
        } else {
            KvStrategy::Hfa
        }
    }

    pub fn alloc_policy(&self) -> AllocPolicy {
        if self.dpa {
            AllocPolicy::Lazy
        } else {
            AllocPolicy::StaticMax
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.itpp {
            parts.push("itpp");
        }
        if self.dpa {
            parts.push("dpa");
        }
        if self.pingpong {
            parts.push("pingpong");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_split() {
        let p = ParallelismPlan::new(1, 16);
        let s = p.stage_layers(80);
        assert_eq!(s.len(), 16);
        assert!(s.iter().all(|r| r.len() == 5));
        assert_eq!(ParallelismPlan::new(2, 2).stage_layers(32), vec![0..16, 16..32]);
        assert_eq!(ParallelismPlan::new(1, 3).stage_layers(32), vec![0..11, 11..22, 22..32]);
    }

    #[test]
    fn grid_of_32() {
        let g = ParallelismPlan::grid(32);
        assert_eq!(g.len(), 6);
        assert!(g.iter().all(|p| p.modules() == 32));
        assert!(ParallelismPlan::new(1, 40).fits_layers(80));
        assert!(ParallelismPlan::new(2, 64).fits_layers(80));
        assert_eq!(ParallelismPlan::new(1, 64).stage_layers(80).iter().map(|r| r.len()).sum::<usize>(), 80);
        assert!(!ParallelismPlan::new(1, 81).fits_layers(80));
    }
}
