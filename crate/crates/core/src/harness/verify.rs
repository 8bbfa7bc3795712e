use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{compile, AttnLayout, CompileError, Compiled, DecoderGraph};
use crate::device::{PimTopology, TimingParams};
use crate::dispatcher::{expand, ConfigBuffer, DispatchError, Va2PaTable};
use crate::isa::{CommandStack, PimCommand};
use crate::model::{prefill_cache, reference_step, step_input, ModelConfig, Weights};
use crate::plan::ParallelismPlan;
use crate::runtime::{Runtime, RuntimeError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("{0}")]
    Input(String),
}

/// Simulated decode against the dense reference decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalCheck {
    pub plan: ParallelismPlan,
    pub l_in: Vec<u32>,
    pub steps: u32,
    pub elements: usize,
    /// Largest |sim - ref| / max(|ref|, floor) over every output element.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Denominator floor for relative errors of near-zero reference elements.
pub const REL_FLOOR: f64 = 1e-2;

pub fn rel_err(got: f32, want: f32) -> f64 {
    (got as f64 - want as f64).abs() / (want as f64).abs().max(REL_FLOOR)
}

/// Decodes `steps` tokens for one request per entry of `l_in`, interleaving
/// requests step by step, on the simulator and on the reference decoder.
pub fn functional_check(
    model: &ModelConfig,
    topo: &PimTopology,
    plan: ParallelismPlan,
    l_in: &[u32],
    steps: u32,
    seed: u64,
    tolerance: f64,
) -> Result<FunctionalCheck, VerifyError> {
    if l_in.is_empty() || l_in.contains(&0) {
        return Err(VerifyError::Input("every request needs a non-empty prefix".into()));
    }
    let compiled = compile(&DecoderGraph::from_model(model), plan, topo, None)?;
    let weights = Weights::random(model, seed);
    let mut rt = Runtime::new(&compiled, &weights, *topo, TimingParams::default(), true)?;
    let mut caches = Vec::new();
    for (id, &l) in l_in.iter().enumerate() {
        let cache = prefill_cache(model, l as usize, seed.wrapping_add(id as u64 + 1));
        rt.admit(id as u32, &cache)?;
        caches.push(cache);
    }
    let (mut elements, mut worst) = (0usize, 0f64);
    for step in 0..steps {
        for (id, cache) in caches.iter_mut().enumerate() {
            let x = step_input(model, seed, id as u32, step);
            let want = reference_step(model, &weights, cache, &x);
            let got = rt.step(id as u32, &x)?;
            if got.len() != want.len() {
                return Err(VerifyError::Input(format!("output width {} vs {}", got.len(), want.len())));
            }
            elements += got.len();
            worst = got.iter().zip(&want).map(|(&g, &w)| rel_err(g, w)).fold(worst, f64::max);
        }
    }
    Ok(FunctionalCheck {
        plan,
        l_in: l_in.to_vec(),
        steps,
        elements,
        max_rel_err: worst,
        tolerance,
        pass: worst <= tolerance,
    })
}

/// Loop-encoded expansion under scattered chunk maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpaCheck {
    pub stacks: usize,
    pub cases: usize,
    pub commands: u64,
    pub mismatches: usize,
    pub pass: bool,
}

/// Expands `stack` for `t_cur` tokens with chunk `c` placed at `chunks[c]`.
pub fn expand_with_chunks(
    stack: &CommandStack,
    layout: &AttnLayout,
    t_cur: u32,
    chunks: &[u32],
) -> Result<Vec<PimCommand>, DispatchError> {
    let mut cfg = ConfigBuffer::new(layout.layers, layout.tb);
    cfg.add(0, t_cur);
    let mut table = Va2PaTable::with_budget(layout.rows_per_chunk, layout.region_base, usize::MAX);
    for &c in chunks {
        table.push_chunk(0, c)?;
    }
    expand(stack, &cfg, &table, 0)
}

/// Checks that placing chunks anywhere only relocates rows: expanding under
/// a random chunk map equals expanding under the identity map and moving
/// each row to its chunk's new place.
pub fn dpa_check(compiled: &Compiled, t_values: &[u32], maps: usize, seed: u64) -> Result<DpaCheck, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut stacks, mut cases, mut commands, mut mismatches) = (0, 0, 0u64, 0);
    for p in &compiled.modules {
        let l = &p.attn;
        for stack in &p.attn_stacks {
            stacks += 1;
            for &t in t_values {
                let n = t.div_ceil(l.tb);
                if n > l.chunks {
                    return Err(VerifyError::Input(format!("{t} tokens need {n} chunks, module holds {}", l.chunks)));
                }
                let ident: Vec<u32> = (0..n).collect();
                let base = expand_with_chunks(stack, l, t, &ident)?;
                let mut pool: Vec<u32> = (0..l.chunks).collect();
                for _ in 0..maps {
                    pool.shuffle(&mut rng);
                    let map = &pool[..n as usize];
                    let got = expand_with_chunks(stack, l, t, map)?;
                    let moved = base.iter().map(|c| match *c {
                        PimCommand::DotProd { row, col, width } => {
                            let off = row - l.region_base;
                            let chunk = map[(off / l.rows_per_chunk) as usize];
                            PimCommand::DotProd {
                                row: l.region_base + chunk * l.rows_per_chunk + off % l.rows_per_chunk,
                                col,
                                width,
                            }
                        }
                        other => other,
                    });
                    cases += 1;
                    commands += got.len() as u64;
                    if got.len() != base.len() || !moved.eq(got.iter().copied()) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    Ok(DpaCheck { stacks, cases, commands, mismatches, pass: mismatches == 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_matches_reference() {
        let m = ModelConfig::toy();
        let c = functional_check(&m, &PimTopology::toy(), ParallelismPlan::new(1, 2), &[5, 9], 4, 7, 1e-4).unwrap();
        assert!(c.pass, "{c:?}");
        assert_eq!(c.elements, 2 * 4 * m.d_model() as usize);
    }

    #[test]
    fn relocation_is_consistent() {
        let m = ModelConfig::toy();
        let compiled =
            compile(&DecoderGraph::from_model(&m), ParallelismPlan::new(2, 1), &PimTopology::toy(), None).unwrap();
        let r = dpa_check(&compiled, &[1, 7, 8, 9, 40], 3, 1).unwrap();
        assert!(r.pass);
        assert_eq!(r.cases, r.stacks * 5 * 3);
        assert!(functional_check(&m, &PimTopology::toy(), ParallelismPlan::new(1, 1), &[0], 1, 0, 1e-4).is_err());
    }
}
