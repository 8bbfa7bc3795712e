//! KV-cache allocation: static max-context reservation or lazy chunked growth.
//!
//! Capacity is counted in chunks. A chunk is `rows_per_chunk` DRAM rows on
//! every bank of a module and holds `tokens_per_chunk` tokens of one request
//! (K and V of all local layers). All modules of a plan hold identical
//! allocations, so one state stands for the whole system.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatcher::Va2PaTable;
use crate::request::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AllocPolicy {
    StaticMax,
    Lazy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocConfig {
    pub policy: AllocPolicy,
    pub total_chunks: u32,
    pub tokens_per_chunk: u32,
    pub max_ctl: u32,
    /// Generation headroom a lazy admission keeps in reserve per request.
    pub max_new_tokens: u32,
    pub rows_per_chunk: u32,
    pub region_base: u32,
    pub channels: u32,
    pub banks_per_channel: u32,
}

impl AllocConfig {
    pub fn new(policy: AllocPolicy, total_chunks: u32, tokens_per_chunk: u32, max_ctl: u32) -> Self {
        AllocConfig {
            policy,
            total_chunks,
            tokens_per_chunk,
            max_ctl,
            max_new_tokens: 512,
            rows_per_chunk: 1,
            region_base: 0,
            channels: 16,
            banks_per_channel: 16,
        }
    }

    pub fn chunks_for(&self, tokens: u32) -> u32 {
        tokens.div_ceil(self.tokens_per_chunk)
    }

    /// Chunks an admitted request may eventually need under this policy.
    pub fn commitment(&self, l_in: u32) -> u32 {
        match self.policy {
            AllocPolicy::StaticMax => self.chunks_for(self.max_ctl),
            AllocPolicy::Lazy => {
                self.chunks_for(l_in.saturating_add(self.max_new_tokens).min(self.max_ctl)).max(self.chunks_for(l_in))
            }
        }
    }

    fn initial(&self, l_in: u32) -> u32 {
        match self.policy {
            AllocPolicy::StaticMax => self.chunks_for(self.max_ctl),
            AllocPolicy::Lazy => self.chunks_for(l_in),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub module_id: u32,
    pub chan_lo: u32,
    pub chan_hi: u32,
    pub bank_lo: u32,
    pub bank_hi: u32,
    pub row_start: u32,
    pub rows: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("request {0}: invalid context length {1}")]
    Invalid(u32, u32),
    #[error("request {0} is already live")]
    AlreadyLive(u32),
    #[error("request {0} rejected: not enough free chunks")]
    Rejected(u32),
    #[error("request {0} is not live")]
    Unknown(u32),
    #[error("request {request}: growth must be by one token ({old} -> {new})")]
    BadStep { request: u32, old: u32, new: u32 },
    #[error("request {0}: out of memory while growing")]
    OutOfMemory(u32),
    #[error("request {0}: context exceeds max_ctl")]
    ContextOverflow(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveAlloc {
    pub t_cur: u32,
    pub committed: u32,
    pub slots: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocEvent {
    pub time: u64,
    pub event: String,
    pub request: u32,
    pub rows: u32,
    pub free_rows: u64,
}

#[derive(Debug, Clone)]
pub struct AllocatorState {
    pub cfg: AllocConfig,
    free: BTreeSet<u32>,
    live: BTreeMap<u32, LiveAlloc>,
    va2pa: Va2PaTable,
    time: u64,
    log: Vec<AllocEvent>,
}

impl AllocatorState {
    pub fn new(cfg: AllocConfig) -> Self {
        AllocatorState {
            free: (0..cfg.total_chunks).collect(),
            live: BTreeMap::new(),
            va2pa: Va2PaTable::with_budget(cfg.rows_per_chunk, cfg.region_base, usize::MAX),
            time: 0,
            log: Vec::new(),
            cfg,
        }
    }

    pub fn set_time(&mut self, t: u64) {
        self.time = t;
    }

    pub fn free_chunks(&self) -> u32 {
        self.free.len() as u32
    }

    pub fn live_chunks(&self) -> u32 {
        self.live.values().map(|a| a.slots.len() as u32).sum()
    }

    pub fn live_requests(&self) -> usize {
        self.live.len()
    }

    pub fn get(&self, request: u32) -> Option<&LiveAlloc> {
        self.live.get(&request)
    }

    pub fn va2pa(&self) -> &Va2PaTable {
        &self.va2pa
    }

    pub fn events(&self) -> &[AllocEvent] {
        &self.log
    }

    /// Chunks promised to live requests but not yet allocated.
    pub fn outstanding_reserve(&self) -> u32 {
        self.live.values().map(|a| a.committed.saturating_sub(a.slots.len() as u32)).sum()
    }

    /// Whether `admit` would succeed now, optionally after keeping `extra` chunks spare.
    pub fn can_admit(&self, l_in: u32, extra: u32) -> bool {
        let need = self.cfg.commitment(l_in) as u64 + self.outstanding_reserve() as u64 + extra as u64;
        self.free.len() as u64 >= need
    }

    fn chunk(&self, slot: u32) -> Chunk {
        Chunk {
            module_id: 0,
            chan_lo: 0,
            chan_hi: self.cfg.channels,
            bank_lo: 0,
            bank_hi: self.cfg.banks_per_channel,
            row_start: self.cfg.region_base + slot * self.cfg.rows_per_chunk,
            rows: self.cfg.rows_per_chunk,
        }
    }

    fn record(&mut self, event: &str, request: u32, chunks: u32) {
        let r = self.cfg.rows_per_chunk;
        self.log.push(AllocEvent {
            time: self.time,
            event: event.into(),
            request,
            rows: chunks * r,
            free_rows: self.free.len() as u64 * r as u64,
        });
    }

    fn take_slot(&mut self, request: u32) -> u32 {
        let slot = self.free.pop_first().expect("caller checked free space");
        self.va2pa.push_chunk(request, slot).expect("free slot is unmapped");
        self.live.get_mut(&request).expect("live").slots.push(slot);
        slot
    }

    pub fn admit(&mut self, req: &Request) -> Result<Vec<Chunk>, AllocError> {
        if req.l_in == 0 || req.l_in > self.cfg.max_ctl {
            return Err(AllocError::Invalid(req.id, req.l_in));
        }
        if self.live.contains_key(&req.id) {
            return Err(AllocError::AlreadyLive(req.id));
        }
        if !self.can_admit(req.l_in, 0) {
            self.record("reject", req.id, 0);
            return Err(AllocError::Rejected(req.id));
        }
        let n = self.cfg.initial(req.l_in);
        let committed = self.cfg.commitment(req.l_in);
        self.live.insert(req.id, LiveAlloc { t_cur: req.l_in, committed, slots: Vec::with_capacity(n as usize) });
        let slots: Vec<u32> = (0..n).map(|_| self.take_slot(req.id)).collect();
        let chunks = slots.into_iter().map(|s| self.chunk(s)).collect();
        self.record("admit", req.id, n);
        Ok(chunks)
    }

    /// Advances a live request to `new_t_cur`, allocating a chunk when it
    /// crosses a chunk boundary. On error the state is unchanged.
    pub fn grow(&mut self, request: u32, new_t_cur: u32) -> Result<Option<Chunk>, AllocError> {
        let a = self.live.get(&request).ok_or(AllocError::Unknown(request))?;
        if new_t_cur != a.t_cur + 1 {
            return Err(AllocError::BadStep { request, old: a.t_cur, new: new_t_cur });
        }
        if new_t_cur > self.cfg.max_ctl {
            return Err(AllocError::ContextOverflow(request));
        }
        let held = a.slots.len() as u32;
        let out = if self.cfg.chunks_for(new_t_cur) > held {
            if self.free.is_empty() {
                self.record("oom", request, 0);
                return Err(AllocError::OutOfMemory(request));
            }
            let slot = self.take_slot(request);
            self.record("grow", request, 1);
            Some(self.chunk(slot))
        } else {
            None
        };
        self.live.get_mut(&request).expect("live").t_cur = new_t_cur;
        Ok(out)
    }

    /// Returns every chunk of a request to the free pool; yields the freed row count.
    pub fn release(&mut self, request: u32) -> Result<u32, AllocError> {
        let a = self.live.remove(&request).ok_or(AllocError::Unknown(request))?;
        self.va2pa.release(request).expect("live request has a mapping");
        let n = a.slots.len() as u32;
        self.free.extend(a.slots);
        self.record("release", request, n);
        Ok(n * self.cfg.rows_per_chunk)
    }

    /// Checks conservation, per-policy holdings and Va2Pa consistency.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.free_chunks() + self.live_chunks() != self.cfg.total_chunks {
            return Err(format!(
                "conservation: free {} + live {} != total {}",
                self.free_chunks(),
                self.live_chunks(),
                self.cfg.total_chunks
            ));
        }
        let mut seen = BTreeSet::new();
        for (&id, a) in &self.live {
            let want = match self.cfg.policy {
                AllocPolicy::StaticMax => self.cfg.chunks_for(self.cfg.max_ctl),
                AllocPolicy::Lazy => self.cfg.chunks_for(a.t_cur),
            };
            if a.slots.len() as u32 != want {
                return Err(format!("request {id} holds {} chunks, expected {want}", a.slots.len()));
            }
            if self.va2pa.chunks(id) != Some(a.slots.as_slice()) {
                return Err(format!("request {id}: Va2Pa entries differ from live chunks"));
            }
            let r = self.cfg.rows_per_chunk as u64;
            for va in 0..a.slots.len() as u64 * r {
                let row = self.va2pa.translate(id, va).map_err(|e| e.to_string())?;
                let slot = (row - self.cfg.region_base) / self.cfg.rows_per_chunk;
                if !a.slots.contains(&slot) || !seen.insert(row) {
                    return Err(format!("request {id}: va {va} -> row {row} is not exclusively owned"));
                }
            }
            if a.slots.iter().any(|s| self.free.contains(s)) {
                return Err(format!("request {id} holds a free chunk"));
            }
        }
        Ok(())
    }

    pub fn write_event_log<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for e in &self.log {
            wr.serialize(e)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub avg_batch: f64,
    pub max_batch: usize,
    pub steps: u64,
    pub stalls: u64,
    /// Requests whose commitment exceeds total capacity.
    pub dropped: usize,
    pub deadlocked: bool,
}

/// Greedy admit-on-release decode simulation. Every step admits queued
/// requests in FIFO order while they fit, then advances each live request by
/// one token; a request that cannot grow stalls for the step. Finished
/// requests release their chunks at the end of the step.
pub fn simulate_batching(trace: &[Request], cfg: AllocConfig) -> BatchStats {
    let mut cfg = cfg;
    cfg.max_new_tokens = cfg.max_new_tokens.max(trace.iter().map(|r| r.out_len).max().unwrap_or(0));
    let mut st = AllocatorState::new(cfg);
    let (fit, dropped): (Vec<&Request>, Vec<&Request>) =
        trace.iter().partition(|r| r.l_in > 0 && r.l_in <= cfg.max_ctl && cfg.commitment(r.l_in) <= cfg.total_chunks);
    let mut queue: std::collections::VecDeque<&Request> = fit.into_iter().collect();
    let mut generated: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
    let (mut steps, mut live_sum, mut stalls, mut max_batch) = (0u64, 0u64, 0u64, 0usize);
    let mut deadlocked = false;
    while !queue.is_empty() || !generated.is_empty() {
        st.set_time(steps);
        let mut progressed = false;
        while let Some(r) = queue.front() {
            if st.admit(r).is_err() {
                break;
            }
            generated.insert(r.id, (0, r.out_len));
            queue.pop_front();
            progressed = true;
        }
        live_sum += generated.len() as u64;
        max_batch = max_batch.max(generated.len());
        let mut done = Vec::new();
        for (&id, g) in generated.iter_mut() {
            let t = st.get(id).expect("live").t_cur;
            if t >= cfg.max_ctl || st.grow(id, t + 1).is_ok() {
                g.0 += 1;
                progressed = true;
                if g.0 >= g.1 {
                    done.push(id);
                }
            } else {
                stalls += 1;
            }
        }
        for id in done {
            generated.remove(&id);
            st.release(id).expect("live");
        }
        steps += 1;
        if !progressed {
            deadlocked = true;
            break;
        }
    }
    BatchStats {
        avg_batch: if steps == 0 { 0.0 } else { live_sum as f64 / steps as f64 },
        max_batch,
        steps,
        stalls,
        dropped: dropped.len(),
        deadlocked,
    }
}

pub fn avg_batch_size(trace: &[Request], cfg: AllocConfig) -> f64 {
    simulate_batching(trace, cfg).avg_batch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lazy(total: u32) -> AllocatorState {
        AllocatorState::new(AllocConfig::new(AllocPolicy::Lazy, total, 256, 32768))
    }

    #[test]
    fn lazy_admit_takes_prefill_rows() {
        let mut st = lazy(1000);
        let chunks = st.admit(&Request::new(1, 6820, 64)).unwrap();
        assert_eq!(chunks.len(), 27);
        assert_eq!(st.free_chunks(), 973);
        st.check_invariants().unwrap();
    }

    #[test]
    fn zero_length_is_invalid() {
        let mut st = lazy(10);
        assert_eq!(st.admit(&Request::new(1, 0, 5)), Err(AllocError::Invalid(1, 0)));
    }

    #[test]
    fn growth_only_at_boundaries() {
        let mut st = lazy(10);
        st.admit(&Request::new(1, 256, 10)).unwrap();
        assert!(st.grow(1, 257).unwrap().is_some());
        let mut st = lazy(10);
        st.admit(&Request::new(2, 300, 10)).unwrap();
        assert!(st.grow(2, 301).unwrap().is_none());
        assert_eq!(st.get(2).unwrap().slots.len(), 2);
        assert!(matches!(st.grow(2, 303), Err(AllocError::BadStep { .. })));
    }

    #[test]
    fn admit_release_round_trip() {
        let mut st = lazy(50);
        let before = (st.free.clone(), st.live.clone(), st.va2pa.clone());
        st.admit(&Request::new(3, 1000, 10)).unwrap();
        st.release(3).unwrap();
        assert_eq!((st.free.clone(), st.live.clone(), st.va2pa.clone()), before);
        assert_eq!(st.release(3), Err(AllocError::Unknown(3)));
    }

    #[test]
    fn fragmented_space_is_reused() {
        let mut cfg = AllocConfig::new(AllocPolicy::Lazy, 10, 256, 32768);
        cfg.max_new_tokens = 0;
        let mut st = AllocatorState::new(cfg);
        st.admit(&Request::new(1, 512, 0)).unwrap();
        st.admit(&Request::new(2, 512, 0)).unwrap();
        st.admit(&Request::new(3, 512, 0)).unwrap();
        st.admit(&Request::new(4, 512, 0)).unwrap();
        st.release(1).unwrap();
        st.release(3).unwrap();
        // Slots 0,1,4,5 plus 8,9 are free but not contiguous.
        let c = st.admit(&Request::new(5, 1536, 0)).unwrap();
        assert_eq!(c.iter().map(|c| c.row_start).collect::<Vec<_>>(), vec![0, 1, 4, 5, 8, 9]);
        st.check_invariants().unwrap();
    }

    #[test]
    fn static_reserves_max_context() {
        let mut st = AllocatorState::new(AllocConfig::new(AllocPolicy::StaticMax, 300, 256, 32768));
        st.admit(&Request::new(1, 100, 10)).unwrap();
        st.admit(&Request::new(2, 100, 10)).unwrap();
        assert_eq!(st.admit(&Request::new(3, 100, 10)), Err(AllocError::Rejected(3)));
        assert_eq!(st.live_chunks(), 256);
        st.check_invariants().unwrap();
    }

    #[test]
    fn hand_built_batch_sizes() {
        // Capacity 4 chunks of 10 tokens, max_ctl 20: static commits 2 each.
        let trace = [Request::new(0, 5, 2), Request::new(1, 5, 2), Request::new(2, 5, 2), Request::new(3, 5, 2)];
        let mut cfg = AllocConfig::new(AllocPolicy::StaticMax, 4, 10, 20);
        cfg.max_new_tokens = 2;
        // Static: two at a time for 2 steps, twice -> 4 steps, average 2.
        let s = simulate_batching(&trace, cfg);
        assert_eq!((s.steps, s.avg_batch), (4, 2.0));
        // Lazy: commitment ceil(7/10) = 1 each, all four run together for 2 steps.
        cfg.policy = AllocPolicy::Lazy;
        let l = simulate_batching(&trace, cfg);
        assert_eq!((l.steps, l.avg_batch), (2, 4.0));
    }

    #[test]
    fn equal_when_everything_is_max_length() {
        let trace: Vec<Request> = (0..20).map(|i| Request::new(i, 32768 - 8, 8)).collect();
        let base = AllocConfig::new(AllocPolicy::StaticMax, 1024, 256, 32768);
        let s = avg_batch_size(&trace, base);
        let l = avg_batch_size(&trace, AllocConfig { policy: AllocPolicy::Lazy, ..base });
        assert_eq!(s, l);
    }

    #[test]
    fn event_log_csv() {
        let mut st = lazy(10);
        st.admit(&Request::new(1, 300, 1)).unwrap();
        st.release(1).unwrap();
        let mut buf = Vec::new();
        st.write_event_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "time,event,request,rows,free_rows");
        assert_eq!(text.lines().count(), 3);
    }
}
