//! Decoder model shapes, presets and a dense reference decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Relu,
    Swiglu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub n_layers: u32,
    pub n_heads: u32,
    pub n_kv_heads: u32,
    pub d_head: u32,
    pub ffn_dim: u32,
    pub ffn: FfnKind,
    pub max_ctl: u32,
}

impl ModelConfig {
    pub fn d_model(&self) -> u32 {
        self.n_heads * self.d_head
    }

    pub fn d_kv(&self) -> u32 {
        self.n_kv_heads * self.d_head
    }

    pub fn group_size(&self) -> u32 {
        self.n_heads / self.n_kv_heads
    }

    pub fn is_gqa(&self) -> bool {
        self.n_kv_heads < self.n_heads
    }

    /// Output width of the fused QKV projection.
    pub fn qkv_dim(&self) -> u32 {
        self.d_model() + 2 * self.d_kv()
    }

    /// Output width of the first FFN projection (gate rows included for SwiGLU).
    pub fn ffn1_dim(&self) -> u32 {
        match self.ffn {
            FfnKind::Relu => self.ffn_dim,
            FfnKind::Swiglu => 2 * self.ffn_dim,
        }
    }

    /// K and V bytes per token across all layers at `element_bytes` per value.
    pub fn kv_bytes_per_token(&self, element_bytes: u32) -> u64 {
        2 * self.n_layers as u64 * self.d_kv() as u64 * element_bytes as u64
    }

    pub fn weight_elems_per_layer(&self) -> u64 {
        let d = self.d_model() as u64;
        self.qkv_dim() as u64 * d + d * d + self.ffn1_dim() as u64 * d + d * self.ffn_dim as u64
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.d_head == 0 || self.ffn_dim == 0 {
            return Err(format!("model {}: dimensions must be positive", self.name));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(format!("model {}: n_heads must be a multiple of n_kv_heads", self.name));
        }
        if self.max_ctl == 0 {
            return Err(format!("model {}: max_ctl must be positive", self.name));
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Option<ModelConfig> {
        let (n_layers, n_heads, n_kv_heads, d_head, ffn_dim, ffn) = match name {
            "qwen-1.8b" => (24, 16, 16, 64, 5504, FfnKind::Swiglu),
            "qwen-7b" => (32, 32, 32, 128, 11008, FfnKind::Swiglu),
            "qwen-14b" => (40, 40, 40, 128, 13696, FfnKind::Swiglu),
            "qwen-72b" => (80, 64, 64, 128, 24576, FfnKind::Swiglu),
            "mpt-7b" => (32, 32, 32, 128, 16384, FfnKind::Relu),
            "llama3.1-8b" => (32, 32, 8, 128, 14336, FfnKind::Swiglu),
            "toy" => return Some(ModelConfig::toy()),
            _ => return None,
        };
        Some(ModelConfig { name: name.into(), n_layers, n_heads, n_kv_heads, d_head, ffn_dim, ffn, max_ctl: 32768 })
    }

    pub const PRESETS: [&'static str; 7] =
        ["qwen-1.8b", "qwen-7b", "qwen-14b", "qwen-72b", "mpt-7b", "llama3.1-8b", "toy"];

    /// Two-layer GQA SwiGLU model small enough for functional simulation.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            name: "toy".into(),
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 8,
            ffn_dim: 48,
            ffn: FfnKind::Swiglu,
            max_ctl: 256,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let scale = 1.0 / (cols as f32).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    /// Rows: q (n_heads*d_head), k (n_kv*d_head), v (n_kv*d_head).
    pub qkv: Matrix,
    pub proj: Matrix,
    /// Rows: up projection, then gate projection for SwiGLU.
    pub ffn1: Matrix,
    pub ffn2: Matrix,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
}

impl Weights {
    pub fn random(model: &ModelConfig, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.d_model() as usize;
        let layers = (0..model.n_layers)
            .map(|_| LayerWeights {
                qkv: Matrix::random(model.qkv_dim() as usize, d, &mut rng),
                proj: Matrix::random(d, d, &mut rng),
                ffn1: Matrix::random(model.ffn1_dim() as usize, d, &mut rng),
                ffn2: Matrix::random(d, model.ffn_dim as usize, &mut rng),
            })
            .collect();
        Weights { layers }
    }
}

/// Per-layer KV cache of one request: `k[token][kv_head * d_head + i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    pub k: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

/// Random prefilled cache of `tokens` entries for every layer.
pub fn prefill_cache(model: &ModelConfig, tokens: usize, seed: u64) -> Vec<KvCache> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dkv = model.d_kv() as usize;
    (0..model.n_layers)
        .map(|_| {
            let mut gen = || (0..dkv).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
            let k = (0..tokens).map(|_| gen()).collect();
            let v = (0..tokens).map(|_| gen()).collect();
            KvCache { k, v }
        })
        .collect()
}

/// Deterministic decode-step input for a request.
pub fn step_input(model: &ModelConfig, seed: u64, request: u32, step: u32) -> Vec<f32> {
    let mix = seed ^ ((request as u64) << 32) ^ step as u64 ^ 0x9e37_79b9_7f4a_7c15;
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    (0..model.d_model()).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn softmax(x: &[f32]) -> Vec<f32> {
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn layer_norm(x: &[f32]) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Attention of one query head over a cache: softmax(K q / sqrt(d)) V.
pub fn attend(q: &[f32], cache: &KvCache, kv_head: usize, d_head: usize) -> Vec<f32> {
    let lo = kv_head * d_head;
    let scale = 1.0 / (d_head as f32).sqrt();
    let scores: Vec<f32> =
        cache.k.iter().map(|k| k[lo..lo + d_head].iter().zip(q).map(|(a, b)| a * b).sum::<f32>() * scale).collect();
    let p = softmax(&scores);
    let mut out = vec![0.0f32; d_head];
    for (w, v) in p.iter().zip(&cache.v) {
        for (o, x) in out.iter_mut().zip(&v[lo..lo + d_head]) {
            *o += w * x;
        }
    }
    out
}

/// One decode step of one request through every layer. Appends the new K/V
/// to `caches` and returns the final hidden state.
pub fn reference_step(model: &ModelConfig, weights: &Weights, caches: &mut [KvCache], x: &[f32]) -> Vec<f32> {
    let d = model.d_model() as usize;
    let dh = model.d_head as usize;
    let dkv = model.d_kv() as usize;
    let group = model.group_size() as usize;
    let mut x = x.to_vec();
    for (lw, cache) in weights.layers.iter().zip(caches.iter_mut()) {
        let h = layer_norm(&x);
        let qkv = lw.qkv.matvec(&h);
        cache.k.push(qkv[d..d + dkv].to_vec());
        cache.v.push(qkv[d + dkv..d + 2 * dkv].to_vec());
        let mut attn = Vec::with_capacity(d);
        for head in 0..model.n_heads as usize {
            attn.extend(attend(&qkv[head * dh..(head + 1) * dh], cache, head / group, dh));
        }
        let o = lw.proj.matvec(&attn);
        x = add(&x, &o);
        let h2 = layer_norm(&x);
        let up = lw.ffn1.matvec(&h2);
        let f = model.ffn_dim as usize;
        let act = match model.ffn {
            FfnKind::Relu => up.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(),
            FfnKind::Swiglu => (0..f).map(|i| up[i] * up[f + i] / (1.0 + (-up[f + i]).exp())).collect(),
        };
        let y = lw.ffn2.matvec(&act);
        x = add(&x, &y);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in ModelConfig::PRESETS {
            let m = ModelConfig::preset(p).unwrap();
            m.validate().unwrap();
        }
        let m = ModelConfig::preset("qwen-7b").unwrap();
        assert_eq!(m.d_model(), 4096);
        assert_eq!(m.kv_bytes_per_token(2), 512 * 1024);
        assert!(ModelConfig::preset("llama3.1-8b").unwrap().is_gqa());
        assert!(ModelConfig::preset("nope").is_none());
    }

    #[test]
    fn attention_over_identical_values_returns_that_value() {
        let cache = KvCache { k: vec![vec![0.3, -0.2]; 5], v: vec![vec![1.5, 2.5]; 5] };
        let o = attend(&[1.0, 1.0], &cache, 0, 2);
        assert!((o[0] - 1.5).abs() < 1e-6 && (o[1] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn reference_step_is_deterministic_and_grows_cache() {
        let m = ModelConfig::toy();
        let w = Weights::random(&m, 7);
        let mut c1 = prefill_cache(&m, 5, 3);
        let mut c2 = c1.clone();
        let x = step_input(&m, 1, 0, 0);
        let a = reference_step(&m, &w, &mut c1, &x);
        let b = reference_step(&m, &w, &mut c2, &x);
        assert_eq!(a, b);
        assert_eq!(c1[0].len(), 6);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}
