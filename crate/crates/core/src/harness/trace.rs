use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};
use thiserror::Error;

use crate::request::Request;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid trace spec: {0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("duplicate request id {0}")]
    DuplicateId(u32),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutLenModel {
    Fixed { k: u32 },
    Uniform { lo: u32, hi: u32 },
}

impl Default for OutLenModel {
    fn default() -> Self {
        OutLenModel::Uniform { lo: 64, hi: 512 }
    }
}

/// Moments of an input-length distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LenStats {
    pub mean: f64,
    pub std: f64,
    pub min: u32,
    pub max: u32,
}

impl LenStats {
    pub const QMSUM: LenStats = LenStats { mean: 13966.0, std: 6182.0, min: 2651, max: 30456 };
    pub const HOTPOTQA: LenStats = LenStats { mean: 13465.0, std: 3921.0, min: 1917, max: 17674 };
    pub const MUSIQUE: LenStats = LenStats { mean: 16362.0, std: 1651.0, min: 6820, max: 17917 };

    pub fn preset(name: &str) -> Option<LenStats> {
        match name.to_ascii_lowercase().as_str() {
            "qmsum" => Some(Self::QMSUM),
            "hotpotqa" => Some(Self::HOTPOTQA),
            "musique" => Some(Self::MUSIQUE),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        let ok = self.min >= 1
            && self.min as f64 <= self.mean
            && self.mean <= self.max as f64
            && self.std >= 0.0
            && self.mean.is_finite()
            && self.std.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TraceError::Invalid(format!("need 1 <= min <= mean <= max and std >= 0, got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TraceSpec {
    Synth {
        #[serde(flatten)]
        stats: LenStats,
        n_requests: u32,
        #[serde(default)]
        out_len: OutLenModel,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl TraceSpec {
    pub fn synth(stats: LenStats, n_requests: u32, seed: u64) -> Self {
        TraceSpec::Synth { stats, n_requests, out_len: OutLenModel::default(), seed }
    }

    pub fn with_seed(&self, new: u64) -> Self {
        match self.clone() {
            TraceSpec::Synth { stats, n_requests, out_len, .. } => {
                TraceSpec::Synth { stats, n_requests, out_len, seed: new }
            }
            s => s,
        }
    }
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec::synth(LenStats::MUSIQUE, 200, 0)
    }
}

/// Mean of N(mu, sigma) restricted to [a, b].
fn truncated_mean(mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let n = StdNormal::new(0.0, 1.0).expect("unit normal");
    let (za, zb) = ((a - mu) / sigma, (b - mu) / sigma);
    let mass = n.cdf(zb) - n.cdf(za);
    if mass < 1e-12 {
        return if zb <= 0.0 { b } else { a };
    }
    mu + sigma * (n.pdf(za) - n.pdf(zb)) / mass
}

/// Location parameter whose truncation to [a, b] has mean `target`.
fn location_for_mean(target: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (a - 10.0 * sigma, b + 10.0 * sigma);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_mean(mid, sigma, a, b) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Samples a synthetic trace or loads a CSV one.
pub fn gen_trace(spec: &TraceSpec) -> Result<Vec<Request>, TraceError> {
    let (stats, n, out_len, seed) = match spec {
        TraceSpec::Csv { path } => return load_trace(std::fs::File::open(path)?),
        TraceSpec::Synth { stats, n_requests, out_len, seed } => (*stats, *n_requests, *out_len, *seed),
    };
    stats.validate()?;
    if let OutLenModel::Uniform { lo, hi } = out_len {
        if lo == 0 || lo > hi {
            return Err(TraceError::Invalid(format!("out_len range [{lo}, {hi}]")));
        }
    }
    if out_len == (OutLenModel::Fixed { k: 0 }) {
        return Err(TraceError::Invalid("out_len 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (stats.min as f64, stats.max as f64);
    let sampler = (stats.std > 0.0 && stats.min < stats.max)
        .then(|| Normal::new(location_for_mean(stats.mean, stats.std, a, b), stats.std).expect("finite moments"));
    let mut out = Vec::with_capacity(n as usize);
    for id in 0..n {
        let l_in = match &sampler {
            None => stats.mean.round() as u32,
            Some(d) => loop {
                let x: f64 = d.sample(&mut rng);
                if (a..=b).contains(&x) {
                    break (x.round() as u32).clamp(stats.min, stats.max);
                }
            },
        };
        let o = match out_len {
            OutLenModel::Fixed { k } => k,
            OutLenModel::Uniform { lo, hi } => rng.random_range(lo..=hi),
        };
        out.push(Request::new(id, l_in, o));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: u32,
    input_len: u32,
    out_len: u32,
}

/// Parses `id,input_len,out_len` rows, keeping file order.
pub fn load_trace<R: Read>(r: R) -> Result<Vec<Request>, TraceError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rd.deserialize::<Row>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            TraceError::Row { line, msg: e.to_string() }
        })?;
        let line = out.len() as u64 + 2;
        if row.input_len == 0 || row.out_len == 0 {
            return Err(TraceError::Row { line, msg: format!("request {} has a zero length", row.id) });
        }
        if !seen.insert(row.id) {
            return Err(TraceError::DuplicateId(row.id));
        }
        out.push(Request::new(row.id, row.input_len, row.out_len));
    }
    Ok(out)
}

pub fn save_trace<W: Write>(trace: &[Request], w: W) -> Result<(), TraceError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in trace {
        wr.serialize(Row { id: r.id, input_len: r.l_in, out_len: r.out_len })?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(t: &[Request]) -> (f64, f64) {
        let n = t.len() as f64;
        let m = t.iter().map(|r| r.l_in as f64).sum::<f64>() / n;
        let v = t.iter().map(|r| (r.l_in as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v.sqrt())
    }

    #[test]
    fn musique_respects_bounds() {
        let t = gen_trace(&TraceSpec::synth(LenStats::MUSIQUE, 1000, 7)).unwrap();
        assert_eq!(t.len(), 1000);
        assert!(t.iter().all(|r| (6820..=17917).contains(&r.l_in)));
        assert!(t.iter().all(|r| (64..=512).contains(&r.out_len)));
    }

    #[test]
    fn zero_std_is_constant() {
        let s = LenStats { mean: 5000.0, std: 0.0, min: 1000, max: 9000 };
        let t = gen_trace(&TraceSpec::synth(s, 50, 1)).unwrap();
        assert!(t.iter().all(|r| r.l_in == 5000));
    }

    #[test]
    fn sample_mean_tracks_preset() {
        for (s, seed) in [(LenStats::QMSUM, 3), (LenStats::HOTPOTQA, 4), (LenStats::MUSIQUE, 5)] {
            let t = gen_trace(&TraceSpec::synth(s, 2000, seed)).unwrap();
            let (m, sd) = moments(&t);
            // Standard error of the mean is below 1% here; 3% leaves room.
            assert!((m - s.mean).abs() / s.mean < 0.03, "{s:?} mean {m}");
            assert!(sd <= s.std * 1.05, "{s:?} std {sd}");
        }
    }

    #[test]
    fn truncated_mean_matches_quadrature() {
        let (mu, sigma, a, b) = (12000.0, 6000.0, 2651.0, 30456.0);
        let steps = 200_000;
        let h = (b - a) / steps as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..steps {
            let x = a + (i as f64 + 0.5) * h;
            let w = (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp();
            num += x * w;
            den += w;
        }
        assert!((truncated_mean(mu, sigma, a, b) - num / den).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_bounds() {
        let s = LenStats { mean: 100.0, std: 5.0, min: 200, max: 300 };
        assert!(matches!(gen_trace(&TraceSpec::synth(s, 5, 0)), Err(TraceError::Invalid(_))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let t = gen_trace(&TraceSpec::synth(LenStats::HOTPOTQA, 20, 9)).unwrap();
        let mut buf = Vec::new();
        save_trace(&t, &mut buf).unwrap();
        assert_eq!(load_trace(buf.as_slice()).unwrap(), t);

        let ok = "id,input_len,out_len\n0,10,5\n1,20,6\n2,30,7\n";
        assert_eq!(load_trace(ok.as_bytes()).unwrap().len(), 3);
        let zero = "id,input_len,out_len\n0,10,5\n1,0,6\n";
        match load_trace(zero.as_bytes()) {
            Err(TraceError::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = "id,input_len,out_len\n4,10,5\n4,11,6\n";
        assert!(matches!(load_trace(dup.as_bytes()), Err(TraceError::DuplicateId(4))));
        let junk = "id,input_len,out_len\n0,ten,5\n";
        assert!(matches!(load_trace(junk.as_bytes()), Err(TraceError::Row { line: 2, .. })));
    }
}
