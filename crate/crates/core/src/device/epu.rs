use serde::{Deserialize, Serialize};

use super::{DeviceError, TimingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EpuKind {
    Softmax,
    Layernorm,
    Ewadd,
    Ewmul,
    ActRelu,
    ActSwiglu,
}

impl EpuKind {
    pub fn name(self) -> &'static str {
        match self {
            EpuKind::Softmax => "SOFTMAX",
            EpuKind::Layernorm => "LAYERNORM",
            EpuKind::Ewadd => "EWADD",
            EpuKind::Ewmul => "EWMUL",
            EpuKind::ActRelu => "ACT_RELU",
            EpuKind::ActSwiglu => "ACT_SWIGLU",
        }
    }

    fn arity(self) -> usize {
        match self {
            EpuKind::Softmax | EpuKind::Layernorm | EpuKind::ActRelu => 1,
            EpuKind::Ewadd | EpuKind::Ewmul | EpuKind::ActSwiglu => 2,
        }
    }
}

pub const LAYERNORM_EPS: f32 = 1e-5;

pub fn epu_cycles(len: usize, timing: &TimingParams) -> u64 {
    timing.epu_cycles_per_element as u64 * (len as u64).div_ceil(timing.epu_lanes as u64)
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Hub-side vector operation. `ACT_SWIGLU(x, g)` is `x * silu(g)`.
pub fn epu_apply(kind: EpuKind, inputs: &[&[f32]], timing: &TimingParams) -> Result<(Vec<f32>, u64), DeviceError> {
    let lens: Vec<usize> = inputs.iter().map(|v| v.len()).collect();
    if inputs.len() != kind.arity() || lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(DeviceError::LengthMismatch { kind: kind.name(), lens });
    }
    let a = inputs[0];
    let out = match kind {
        EpuKind::Softmax => {
            let m = a.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = a.iter().map(|v| (v - m).exp()).collect();
            let s: f32 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        EpuKind::Layernorm => {
            let n = a.len().max(1) as f32;
            let mean = a.iter().sum::<f32>() / n;
            let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            a.iter().map(|v| (v - mean) * inv).collect()
        }
        EpuKind::Ewadd => a.iter().zip(inputs[1]).map(|(x, y)| x + y).collect(),
        EpuKind::Ewmul => a.iter().zip(inputs[1]).map(|(x, y)| x * y).collect(),
        EpuKind::ActRelu => a.iter().map(|v| v.max(0.0)).collect(),
        EpuKind::ActSwiglu => a.iter().zip(inputs[1]).map(|(x, g)| x * silu(*g)).collect(),
    };
    let cycles = epu_cycles(a.len(), timing);
    Ok((out, cycles))
}
