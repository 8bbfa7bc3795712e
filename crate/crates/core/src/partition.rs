//! FC tensor sharding and KV-cache placement (head-first or token-parallel).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{GemvShape, PimTopology};
use crate::isa::OpKind;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub op: OpKind,
    pub d_in: u32,
    pub d_out: u32,
    pub n_h: u32,
    pub n_kv_h: u32,
    pub d_h: u32,
    pub t: u32,
}

impl LayerShape {
    pub fn fc(op: OpKind, d_in: u32, d_out: u32) -> Self {
        LayerShape { op, d_in, d_out, n_h: 0, n_kv_h: 0, d_h: 0, t: 0 }
    }

    pub fn attention(op: OpKind, n_h: u32, n_kv_h: u32, d_h: u32, t: u32) -> Self {
        LayerShape { op, d_in: 0, d_out: 0, n_h, n_kv_h, d_h, t }
    }

    /// The four FC layers of a decoder block.
    pub fn fc_layers(model: &ModelConfig) -> [LayerShape; 4] {
        let d = model.d_model();
        [
            LayerShape::fc(OpKind::QkvGen, d, model.qkv_dim()),
            LayerShape::fc(OpKind::Proj, d, d),
            LayerShape::fc(OpKind::Ffn1, d, model.ffn1_dim()),
            LayerShape::fc(OpKind::Ffn2, model.ffn_dim, d),
        ]
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("{op} is not an FC layer")]
    NotFc { op: &'static str },
    #[error("tp {tp} exceeds the splittable dimension {dim}")]
    TpTooLarge { tp: u32, dim: u32 },
    #[error("tp must be at least 1")]
    ZeroTp,
    #[error("KV needs {needed} bytes, capacity is {capacity}")]
    CapacityExceeded { needed: u64, capacity: u64 },
    #[error("head-first placement infeasible: one head needs {needed} bytes, a channel holds {capacity}")]
    HeadExceedsChannel { needed: u64, capacity: u64 },
    #[error("kv heads {kv} not divisible by tp {tp}")]
    HeadsNotDivisible { kv: u32, tp: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcPartition {
    pub op: OpKind,
    pub tp: u32,
    /// Per-shard GEMV including zero padding.
    pub shard: GemvShape,
    /// Output rows (or input columns for reduction layers) that carry real data per shard.
    pub valid: Vec<u32>,
    /// Shards produce partial sums that must be reduced.
    pub reduction: bool,
    pub input_bytes_per_shard: u64,
    pub output_bytes_per_shard: u64,
    /// Ring all-reduce bytes per shard (zero without reduction or when tp = 1).
    pub reduce_bytes_per_shard: u64,
}

/// Splits an FC layer across `tp` modules. Output-split layers (QKV, FFN1)
/// divide rows; input-split layers (PROJ, FFN2) divide columns and need a
/// partial-sum reduction. Uneven splits are zero padded.
pub fn partition_fc(shape: &LayerShape, tp: u32, element_bytes: u32) -> Result<FcPartition, PartitionError> {
    if tp == 0 {
        return Err(PartitionError::ZeroTp);
    }
    let reduction = match shape.op {
        OpKind::QkvGen | OpKind::Ffn1 => false,
        OpKind::Proj | OpKind::Ffn2 => true,
        op => return Err(PartitionError::NotFc { op: op.name() }),
    };
    let dim = if reduction { shape.d_in } else { shape.d_out };
    if tp > dim {
        return Err(PartitionError::TpTooLarge { tp, dim });
    }
    let per = dim.div_ceil(tp);
    let valid: Vec<u32> = (0..tp).map(|i| dim.saturating_sub(i * per).min(per)).collect();
    let shard =
        if reduction { GemvShape { rows: shape.d_out, cols: per } } else { GemvShape { rows: per, cols: shape.d_in } };
    let eb = element_bytes as u64;
    let reduce_bytes_per_shard =
        if reduction && tp > 1 { 2 * (tp as u64 - 1) * shape.d_out as u64 * eb / tp as u64 } else { 0 };
    Ok(FcPartition {
        op: shape.op,
        tp,
        shard,
        valid,
        reduction,
        input_bytes_per_shard: shard.cols as u64 * eb,
        output_bytes_per_shard: shard.rows as u64 * eb,
        reduce_bytes_per_shard,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum KvStrategy {
    Hfa,
    Itpp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KvKind {
    K,
    V,
}

/// Tokens `first, first + stride, ...` (`count` of them) and head dims `dim_lo..dim_hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub module: u32,
    pub channel: u32,
    pub bank: u32,
    pub request: u32,
    pub kv_head: u32,
    pub kind: KvKind,
    pub first_token: u32,
    pub token_stride: u32,
    pub tokens: u32,
    pub dim_lo: u32,
    pub dim_hi: u32,
}

impl Slice {
    pub fn elems(&self) -> u64 {
        self.tokens as u64 * (self.dim_hi - self.dim_lo) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub strategy: KvStrategy,
    pub modules: u32,
    pub channels: u32,
    pub banks_per_channel: u32,
    pub d_h: u32,
    pub slices: Vec<Slice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvRequest {
    pub id: u32,
    pub tokens: u32,
}

/// Tokens held per PU row under token-parallel placement for `kv_local` heads.
pub fn tokens_per_pu_row(topo: &PimTopology, kv_local: u32, d_h: u32) -> u32 {
    (topo.elems_per_row() / (kv_local * d_h)).max(1)
}

/// Places the KV cache of `requests` on the `tp` modules of one pipeline
/// stage holding `layers` layers. Module m holds kv heads
/// `m * n_kv / tp .. (m + 1) * n_kv / tp`.
///
/// HFA deals (request, head) pairs round-robin over channels; inside the
/// channel tokens of K and dims of V are dealt over its banks. ITPP deals K
/// tokens over every PU of the module in runs of `tokens_per_pu_row` and V
/// dims (all local heads flattened) over every PU.
pub fn place_kv(
    strategy: KvStrategy,
    requests: &[KvRequest],
    model: &ModelConfig,
    topo: &PimTopology,
    tp: u32,
    layers: u32,
) -> Result<PlacementPlan, PartitionError> {
    if tp == 0 {
        return Err(PartitionError::ZeroTp);
    }
    if !model.n_kv_heads.is_multiple_of(tp) {
        return Err(PartitionError::HeadsNotDivisible { kv: model.n_kv_heads, tp });
    }
    let kv_local = model.n_kv_heads / tp;
    let d_h = model.d_head;
    let eb = topo.element_bytes as u64;
    let total_tokens: u64 = requests.iter().map(|r| r.tokens as u64).sum();
    let per_module = total_tokens * 2 * kv_local as u64 * d_h as u64 * layers as u64 * eb;
    if per_module > topo.module_capacity_bytes() {
        return Err(PartitionError::CapacityExceeded { needed: per_module, capacity: topo.module_capacity_bytes() });
    }
    let banks = topo.banks_per_channel;
    let p = topo.pus();
    let mut slices = Vec::new();
    for m in 0..tp {
        match strategy {
            KvStrategy::Hfa => {
                let chan_cap = banks as u64 * topo.row_bytes as u64 * topo.rows_per_bank as u64;
                let mut pair = 0u32;
                for r in requests {
                    let head_bytes = r.tokens as u64 * 2 * d_h as u64 * layers as u64 * eb;
                    if head_bytes > chan_cap {
                        return Err(PartitionError::HeadExceedsChannel { needed: head_bytes, capacity: chan_cap });
                    }
                    for h in 0..kv_local {
                        let channel = pair % topo.channels;
                        pair += 1;
                        let head = m * kv_local + h;
                        for b in 0..banks.min(r.tokens) {
                            slices.push(Slice {
                                module: m,
                                channel,
                                bank: b,
                                request: r.id,
                                kv_head: head,
                                kind: KvKind::K,
                                first_token: b,
                                token_stride: banks,
                                tokens: (r.tokens - b).div_ceil(banks),
                                dim_lo: 0,
                                dim_hi: d_h,
                            });
                        }
                        for d in 0..d_h {
                            slices.push(Slice {
                                module: m,
                                channel,
                                bank: d % banks,
                                request: r.id,
                                kv_head: head,
                                kind: KvKind::V,
                                first_token: 0,
                                token_stride: 1,
                                tokens: r.tokens,
                                dim_lo: d,
                                dim_hi: d + 1,
                            });
                        }
                    }
                }
            }
            KvStrategy::Itpp => {
                let tpp = tokens_per_pu_row(topo, kv_local, d_h);
                for r in requests {
                    for h in 0..kv_local {
                        let head = m * kv_local + h;
                        // Token run j (tpp tokens) sits on PU j % P.
                        let runs = r.tokens.div_ceil(tpp);
                        for j in 0..runs {
                            let pu = j % p;
                            let first = j * tpp;
                            slices.push(Slice {
                                module: m,
                                channel: pu / banks,
                                bank: pu % banks,
                                request: r.id,
                                kv_head: head,
                                kind: KvKind::K,
                                first_token: first,
                                token_stride: 1,
                                tokens: tpp.min(r.tokens - first),
                                dim_lo: 0,
                                dim_hi: d_h,
                            });
                        }
                        for d in 0..d_h {
                            let pu = (h * d_h + d) % p;
                            slices.push(Slice {
                                module: m,
                                channel: pu / banks,
                                bank: pu % banks,
                                request: r.id,
                                kv_head: head,
                                kind: KvKind::V,
                                first_token: 0,
                                token_stride: 1,
                                tokens: r.tokens,
                                dim_lo: d,
                                dim_hi: d + 1,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(PlacementPlan { strategy, modules: tp, channels: topo.channels, banks_per_channel: banks, d_h, slices })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub channel_occupancy: f64,
    pub bank_occupancy: f64,
    /// Max over mean of per-bank element load, across every bank of the plan.
    pub imbalance: f64,
}

pub fn occupancy(plan: &PlacementPlan) -> Occupancy {
    let banks = (plan.modules * plan.channels * plan.banks_per_channel) as usize;
    let chans = (plan.modules * plan.channels) as usize;
    let mut load = vec![0u64; banks];
    let mut chan_used = vec![false; chans];
    for s in &plan.slices {
        let c = (s.module * plan.channels + s.channel) as usize;
        chan_used[c] = true;
        load[c * plan.banks_per_channel as usize + s.bank as usize] += s.elems();
    }
    let total: u64 = load.iter().sum();
    if total == 0 {
        return Occupancy { channel_occupancy: 0.0, bank_occupancy: 0.0, imbalance: 1.0 };
    }
    let mean = total as f64 / banks as f64;
    Occupancy {
        channel_occupancy: chan_used.iter().filter(|u| **u).count() as f64 / chans as f64,
        bank_occupancy: load.iter().filter(|l| **l > 0).count() as f64 / banks as f64,
        imbalance: *load.iter().max().expect("nonempty") as f64 / mean,
    }
}

/// Checks that every (request, head, token, dim) element of K and V is placed
/// exactly once, and that each slice sits on the module owning its head.
pub fn check_coverage(plan: &PlacementPlan, requests: &[KvRequest], n_kv_heads: u32) -> Result<(), String> {
    use std::collections::HashMap;
    let kv_local = n_kv_heads / plan.modules;
    let mut seen: HashMap<(u32, u32, KvKind, u32, u32), u32> = HashMap::new();
    for s in &plan.slices {
        if s.kv_head / kv_local != s.module {
            return Err(format!("head {} placed on module {}", s.kv_head, s.module));
        }
        if plan.strategy == KvStrategy::Hfa {
            let first = plan.slices.iter().find(|o| o.request == s.request && o.kv_head == s.kv_head).expect("self");
            if first.channel != s.channel {
                return Err(format!("request {} head {} spans channels", s.request, s.kv_head));
            }
        }
        for i in 0..s.tokens {
            for d in s.dim_lo..s.dim_hi {
                let key = (s.request, s.kv_head, s.kind, s.first_token + i * s.token_stride, d);
                *seen.entry(key).or_default() += 1;
            }
        }
    }
    let expected: u64 = requests.iter().map(|r| r.tokens as u64).sum::<u64>() * n_kv_heads as u64 * plan.d_h as u64 * 2;
    if seen.len() as u64 != expected || seen.values().any(|&c| c != 1) {
        return Err(format!("placed {} distinct elements, expected {expected} each once", seen.len()));
    }
    for (req, _, _, tok, _) in seen.keys() {
        let r = requests.iter().find(|r| r.id == *req).ok_or("unknown request")?;
        if *tok >= r.tokens {
            return Err(format!("token {tok} beyond request length"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Matrix;
    use rand::SeedableRng;

    fn model(n_h: u32, d_h: u32) -> ModelConfig {
        ModelConfig { n_heads: n_h, n_kv_heads: n_h, d_head: d_h, ..ModelConfig::preset("qwen-7b").unwrap() }
    }

    #[test]
    fn ffn1_output_split() {
        let p = partition_fc(&LayerShape::fc(OpKind::Ffn1, 4096, 16384), 4, 2).unwrap();
        assert_eq!(p.shard, GemvShape { rows: 4096, cols: 4096 });
        assert!(!p.reduction);
        assert_eq!(p.reduce_bytes_per_shard, 0);
    }

    #[test]
    fn tp1_is_identity() {
        let p = partition_fc(&LayerShape::fc(OpKind::Proj, 4096, 4096), 1, 2).unwrap();
        assert_eq!(p.shard, GemvShape { rows: 4096, cols: 4096 });
        assert_eq!(p.reduce_bytes_per_shard, 0);
        assert!(partition_fc(&LayerShape::fc(OpKind::Qkt, 1, 1), 1, 2).is_err());
        assert!(partition_fc(&LayerShape::fc(OpKind::Proj, 4, 4), 5, 2).is_err());
    }

    #[test]
    fn proj_shards_reassemble() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (d_out, d_in, tp) = (24usize, 20usize, 8u32);
        let w = Matrix::random(d_out, d_in, &mut rng);
        let x: Vec<f32> = (0..d_in).map(|i| (i as f32 * 0.37).sin()).collect();
        let p = partition_fc(&LayerShape::fc(OpKind::Proj, d_in as u32, d_out as u32), tp, 2).unwrap();
        assert_eq!(p.shard.cols, 3);
        let mut y = vec![0.0f32; d_out];
        for s in 0..tp as usize {
            let lo = s * p.shard.cols as usize;
            for (r, yr) in y.iter_mut().enumerate() {
                for c in 0..p.valid[s] as usize {
                    *yr += w.row(r)[lo + c] * x[lo + c];
                }
            }
        }
        let want = w.matvec(&x);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        assert_eq!(p.valid.iter().sum::<u32>(), d_in as u32);
    }

    #[test]
    fn itpp_single_head_token_slices() {
        let topo = PimTopology { channels: 1, banks_per_channel: 16, row_bytes: 256, ..PimTopology::default() };
        let m = model(1, 8);
        let plan = place_kv(KvStrategy::Itpp, &[KvRequest { id: 0, tokens: 512 }], &m, &topo, 1, 1).unwrap();
        // 128-element rows hold 16 tokens of an 8-wide head.
        for bank in 0..16 {
            let k: u32 = plan.slices.iter().filter(|s| s.kind == KvKind::K && s.bank == bank).map(|s| s.tokens).sum();
            assert_eq!(k, 32);
        }
        check_coverage(&plan, &[KvRequest { id: 0, tokens: 512 }], 1).unwrap();
    }

    #[test]
    fn hfa_matched_dimensions_fill_channels() {
        let topo = PimTopology::default();
        let m = model(16, 128);
        let reqs: Vec<KvRequest> = (0..16).map(|id| KvRequest { id, tokens: 64 }).collect();
        let plan = place_kv(KvStrategy::Hfa, &reqs, &m, &topo, 16, 1).unwrap();
        let occ = occupancy(&plan);
        assert_eq!(occ.channel_occupancy, 1.0);
    }

    #[test]
    fn small_batch_hfa_idles_channels() {
        let topo = PimTopology::default();
        let m = model(32, 128);
        let reqs = [KvRequest { id: 0, tokens: 300 }, KvRequest { id: 1, tokens: 500 }];
        let hfa = occupancy(&place_kv(KvStrategy::Hfa, &reqs, &m, &topo, 16, 1).unwrap());
        let itpp = occupancy(&place_kv(KvStrategy::Itpp, &reqs, &m, &topo, 16, 1).unwrap());
        assert!(hfa.channel_occupancy < 1.0);
        assert_eq!(itpp.channel_occupancy, 1.0);
        assert!(itpp.imbalance <= hfa.imbalance);
    }

    #[test]
    fn empty_plan() {
        let plan = place_kv(KvStrategy::Itpp, &[], &model(4, 8), &PimTopology::toy(), 1, 1).unwrap();
        let occ = occupancy(&plan);
        assert_eq!((occ.channel_occupancy, occ.bank_occupancy, occ.imbalance), (0.0, 0.0, 1.0));
    }

    #[test]
    fn hfa_rejects_oversized_head() {
        let topo = PimTopology { rows_per_bank: 4, ..PimTopology::default() };
        let err = place_kv(KvStrategy::Hfa, &[KvRequest { id: 0, tokens: 300 }], &model(1, 128), &topo, 1, 1);
        assert!(matches!(err, Err(PartitionError::HeadExceedsChannel { .. })));
    }
}
