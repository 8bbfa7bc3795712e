//! Functional decode engine: runs compiled programs through the dispatcher
//! and module state, with the host doing normalization, residuals and the
//! tensor-parallel reduction.

use std::collections::HashMap;

use thiserror::Error;

use crate::compiler::{shard_weights, CompileError, Compiled, ModuleProgram, FC_OPS};
use crate::device::{epu_apply, Breakdown, DeviceError, EpuKind, ModuleState, PimTopology, TimingParams};
use crate::dispatcher::{expand, update_config, ConfigBuffer, DispatchError, Va2PaTable};
use crate::isa::OpKind;
use crate::model::{FfnKind, KvCache, ModelConfig, Weights};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("module {0} has no free KV chunk")]
    OutOfChunks(u32),
    #[error("request {0} is not resident")]
    UnknownRequest(u32),
    #[error("request {0} is already resident")]
    DuplicateRequest(u32),
}

struct ModuleRt {
    program: ModuleProgram,
    state: ModuleState,
    cfg: ConfigBuffer,
    table: Va2PaTable,
    free: Vec<u32>,
}

impl ModuleRt {
    fn ensure_chunk(&mut self, module: u32, request: u32, tokens: u32) -> Result<(), RuntimeError> {
        let need = tokens.div_ceil(self.program.attn.tb);
        let have = self.table.chunks(request).map_or(0, |c| c.len() as u32);
        for _ in have..need {
            let c = self.free.pop().ok_or(RuntimeError::OutOfChunks(module))?;
            self.table.push_chunk(request, c)?;
        }
        Ok(())
    }

    fn run(
        &mut self,
        cmds: &[crate::isa::PimCommand],
        timing: &TimingParams,
        acc: &mut Breakdown,
    ) -> Result<u64, RuntimeError> {
        let r = self.state.execute(cmds, timing)?;
        acc.add(&r.breakdown);
        Ok(r.cycles)
    }
}

/// Cycle totals gathered while stepping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub module_cycles: u64,
    pub epu_cycles: u64,
    pub breakdown: Breakdown,
}

pub struct Runtime {
    pub model: ModelConfig,
    pub timing: TimingParams,
    modules: Vec<ModuleRt>,
    tp: u32,
    stages: Vec<std::ops::Range<u32>>,
    tokens: HashMap<u32, u32>,
    pub stats: RunStats,
}

impl Runtime {
    /// Loads weights into every module according to its manifest.
    pub fn new(
        compiled: &Compiled,
        weights: &Weights,
        topo: PimTopology,
        timing: TimingParams,
        pingpong: bool,
    ) -> Result<Self, RuntimeError> {
        let model = compiled.model.clone();
        let tp = compiled.table.plan.tp;
        let mut modules = Vec::new();
        for p in &compiled.modules {
            let mut state = ModuleState::new(topo, pingpong);
            for (local, layer) in p.manifest.layers.clone().enumerate() {
                let shards = shard_weights(&model, &weights.layers[layer as usize], tp, p.manifest.shard);
                for (op, m) in FC_OPS.iter().zip(&shards) {
                    p.fc(local as u32, *op).layout.write(m, &mut state)?;
                }
            }
            let kv = p.manifest.kv;
            modules.push(ModuleRt {
                program: p.clone(),
                state,
                cfg: ConfigBuffer::new(p.manifest.layers.len() as u32, kv.tokens_per_chunk),
                table: Va2PaTable::new(kv.rows_per_chunk, kv.base_row),
                free: (0..kv.chunks).rev().collect(),
            });
        }
        Ok(Runtime {
            model,
            timing,
            modules,
            tp,
            stages: compiled.table.stages.clone(),
            tokens: HashMap::new(),
            stats: RunStats::default(),
        })
    }

    pub fn tokens(&self, request: u32) -> Option<u32> {
        self.tokens.get(&request).copied()
    }

    fn module(&mut self, stage: usize, shard: u32) -> &mut ModuleRt {
        &mut self.modules[stage * self.tp as usize + shard as usize]
    }

    /// Makes `request` resident with a prefilled cache (one entry per layer).
    pub fn admit(&mut self, request: u32, cache: &[KvCache]) -> Result<(), RuntimeError> {
        if self.tokens.contains_key(&request) {
            return Err(RuntimeError::DuplicateRequest(request));
        }
        let t = cache[0].len() as u32;
        let dk = (self.model.d_kv() / self.tp) as usize;
        for stage in 0..self.stages.len() {
            let layers = self.stages[stage].clone();
            for shard in 0..self.tp {
                let id = (stage as u32) * self.tp + shard;
                let m = self.module(stage, shard);
                m.ensure_chunk(id, request, t)?;
                m.cfg.add(request, t);
                let lo = shard as usize * dk;
                for (local, layer) in layers.clone().enumerate() {
                    let c = &cache[layer as usize];
                    for tau in 0..t {
                        let (k, v) = (&c.k[tau as usize][lo..lo + dk], &c.v[tau as usize][lo..lo + dk]);
                        write_kv(m, request, local as u32, tau, k, v)?;
                    }
                }
            }
        }
        self.tokens.insert(request, t);
        Ok(())
    }

    /// Frees `request`'s KV chunks on every module.
    pub fn release(&mut self, request: u32) -> Result<(), RuntimeError> {
        self.tokens.remove(&request).ok_or(RuntimeError::UnknownRequest(request))?;
        for m in &mut self.modules {
            m.free.extend(m.table.release(request)?);
            m.cfg.slots.retain(|s| s.request_id != request);
        }
        Ok(())
    }

    fn epu(&mut self, kind: EpuKind, inputs: &[&[f32]]) -> Result<Vec<f32>, RuntimeError> {
        let (v, c) = epu_apply(kind, inputs, &self.timing)?;
        self.stats.epu_cycles += c;
        Ok(v)
    }

    /// Runs one FC op on every shard of `stage` and returns each shard's output.
    fn fc(&mut self, stage: usize, local: u32, op: OpKind, inputs: &[Vec<f32>]) -> Result<Vec<Vec<f32>>, RuntimeError> {
        let timing = self.timing;
        let mut outs = Vec::with_capacity(self.tp as usize);
        let mut cycles = 0;
        for shard in 0..self.tp {
            let mut bd = Breakdown::default();
            let m = self.module(stage, shard);
            let prog = m.program.fc(local, op).clone();
            let channels = m.state.topo.channels;
            for (gpr, segs) in prog.layout.inputs(&inputs[shard as usize], channels) {
                m.state.set_input(gpr, segs)?;
            }
            let cmds: Vec<_> = prog
                .stack
                .entries
                .iter()
                .filter_map(|e| match e {
                    crate::isa::Entry::Pim(c) => Some(*c),
                    _ => None,
                })
                .collect();
            let c = m.run(&cmds, &timing, &mut bd)?;
            outs.push(prog.layout.gather(&mut m.state)?);
            m.state.clear_gpr();
            cycles = cycles.max(c);
            self.stats.breakdown.add(&bd);
        }
        self.stats.module_cycles += cycles;
        Ok(outs)
    }

    /// Attention of one request on every shard of `stage`; returns each
    /// shard's query-head outputs in head order.
    fn attention(
        &mut self,
        stage: usize,
        local: u32,
        request: u32,
        q: &[Vec<f32>],
    ) -> Result<Vec<Vec<f32>>, RuntimeError> {
        let timing = self.timing;
        let scale = 1.0 / (self.model.d_head as f32).sqrt();
        let mut outs = Vec::with_capacity(self.tp as usize);
        let mut cycles = 0;
        for shard in 0..self.tp {
            let mut bd = Breakdown::default();
            let mut cyc = 0;
            let m = self.module(stage, shard);
            let a = m.program.attn;
            let t_cur = m.cfg.slot(request).ok_or(RuntimeError::UnknownRequest(request))?.t_cur;
            for qi in 0..a.gsz {
                for kr in 0..a.krows {
                    m.state.set_input(a.qk_gpr(qi, kr), a.qk_input(&q[shard as usize], qi, kr))?;
                }
            }
            let cmds = expand(m.program.attn_stack(local, OpKind::Qkt), &m.cfg, &m.table, request)?;
            cyc += m.run(&cmds, &timing, &mut bd)?;
            let blocks = t_cur.div_ceil(a.tb);
            let mut probs_by_pass = Vec::new();
            for qi in 0..a.gsz {
                let scores = a.gather_scores(&mut m.state, qi, t_cur)?;
                let mut probs = Vec::with_capacity(scores.len());
                for s in scores {
                    let scaled: Vec<f32> = s.iter().map(|v| v * scale).collect();
                    let (p, c) = epu_apply(EpuKind::Softmax, &[&scaled], &timing)?;
                    bd.epu += c;
                    probs.push(p);
                }
                probs_by_pass.push(probs);
            }
            m.state.clear_gpr();
            for (qi, probs) in probs_by_pass.iter().enumerate() {
                for b in 0..blocks {
                    for vr in 0..a.vrows {
                        m.state.set_input(a.sv_gpr(qi as u32, b, vr), a.sv_input(probs, b, vr))?;
                    }
                }
            }
            let cmds = expand(m.program.attn_stack(local, OpKind::Sv), &m.cfg, &m.table, request)?;
            cyc += m.run(&cmds, &timing, &mut bd)?;
            let d = a.d_h as usize;
            let mut out = vec![0.0f32; (a.kv_local * a.gsz * a.d_h) as usize];
            for qi in 0..a.gsz {
                for (h, v) in a.gather_attn(&mut m.state, qi, blocks)?.into_iter().enumerate() {
                    let qh = h * a.gsz as usize + qi as usize;
                    out[qh * d..(qh + 1) * d].copy_from_slice(&v);
                }
            }
            m.state.clear_gpr();
            outs.push(out);
            cycles = cycles.max(cyc);
            self.stats.breakdown.add(&bd);
        }
        self.stats.module_cycles += cycles;
        Ok(outs)
    }

    /// One decode step of `request` with hidden input `x`; appends the
    /// token's K and V and returns the final hidden state.
    pub fn step(&mut self, request: u32, x: &[f32]) -> Result<Vec<f32>, RuntimeError> {
        let tau = *self.tokens.get(&request).ok_or(RuntimeError::UnknownRequest(request))?;
        let tp = self.tp as usize;
        for (i, m) in self.modules.iter_mut().enumerate() {
            m.ensure_chunk(i as u32, request, tau + 1)?;
            update_config(&mut m.cfg, request, tau + 1)?;
        }
        let d = self.model.d_model() as usize;
        let dq = d / tp;
        let dk = (self.model.d_kv() / self.tp) as usize;
        let ffn = self.model.ffn;
        let mut x = x.to_vec();
        for stage in 0..self.stages.len() {
            for local in 0..self.stages[stage].len() as u32 {
                let h = self.epu(EpuKind::Layernorm, &[&x])?;
                let qkv = self.fc(stage, local, OpKind::QkvGen, &vec![h; tp])?;
                let mut q = Vec::with_capacity(tp);
                for (shard, out) in qkv.iter().enumerate() {
                    let m = self.module(stage, shard as u32);
                    write_kv(m, request, local, tau, &out[dq..dq + dk], &out[dq + dk..dq + 2 * dk])?;
                    q.push(out[..dq].to_vec());
                }
                let attn = self.attention(stage, local, request, &q)?;
                let o = reduce(self.fc(stage, local, OpKind::Proj, &attn)?);
                x = self.epu(EpuKind::Ewadd, &[&x, &o])?;
                let h2 = self.epu(EpuKind::Layernorm, &[&x])?;
                let up = self.fc(stage, local, OpKind::Ffn1, &vec![h2; tp])?;
                let mut act = Vec::with_capacity(tp);
                for u in &up {
                    act.push(match ffn {
                        FfnKind::Relu => self.epu(EpuKind::ActRelu, &[u])?,
                        FfnKind::Swiglu => {
                            let half = u.len() / 2;
                            self.epu(EpuKind::ActSwiglu, &[&u[..half], &u[half..]])?
                        }
                    });
                }
                let y = reduce(self.fc(stage, local, OpKind::Ffn2, &act)?);
                x = self.epu(EpuKind::Ewadd, &[&x, &y])?;
            }
        }
        self.tokens.insert(request, tau + 1);
        Ok(x)
    }
}

/// Sums tensor-parallel partial outputs.
fn reduce(parts: Vec<Vec<f32>>) -> Vec<f32> {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one shard");
    for p in it {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

fn write_kv(m: &mut ModuleRt, request: u32, local: u32, tau: u32, k: &[f32], v: &[f32]) -> Result<(), RuntimeError> {
    let a = m.program.attn;
    let table = &m.table;
    let mut err = None;
    let r = a.write_token(&mut m.state, local, tau, k, v, |va| {
        table.translate(request, va as u64).map_err(|e| {
            err = Some(e);
            DeviceError::Config("unmapped KV row".into())
        })
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(r?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, DecoderGraph};
    use crate::model::{prefill_cache, reference_step, step_input};
    use crate::plan::ParallelismPlan;

    fn close(a: &[f32], b: &[f32]) -> bool {
        let scale = b.iter().fold(1.0f32, |m, v| m.max(v.abs()));
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-4 * scale)
    }

    #[test]
    fn toy_decode_matches_reference() {
        let m = ModelConfig::toy();
        let w = Weights::random(&m, 11);
        let topo = PimTopology::toy();
        for (tp, pp) in [(1, 1), (2, 1), (1, 2)] {
            let c = compile(&DecoderGraph::from_model(&m), ParallelismPlan::new(tp, pp), &topo, None).unwrap();
            let mut rt = Runtime::new(&c, &w, topo, TimingParams::default(), true).unwrap();
            let mut cache = prefill_cache(&m, 6, 5);
            rt.admit(0, &cache).unwrap();
            for step in 0..5 {
                let x = step_input(&m, 3, 0, step);
                let want = reference_step(&m, &w, &mut cache, &x);
                let got = rt.step(0, &x).unwrap();
                assert!(close(&got, &want), "tp {tp} pp {pp} step {step}");
            }
            rt.release(0).unwrap();
        }
    }
}
