//! On-module command dispatcher.
//!
//! Holds the configuration buffer (per-request token counts), the Va2Pa table
//! and the resident command image, and expands DPA-encoded stacks into
//! concrete physical-address command sequences.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{self, CommandStack, DpaCommand, Entry, Field, LoopBound, OpKind, PimCommand};

/// Command buffer and address-map buffer sizes of the reference dispatcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchBudget {
    pub cmd_buffer_bytes: usize,
    pub addr_map_bytes: usize,
}

impl Default for DispatchBudget {
    fn default() -> Self {
        DispatchBudget { cmd_buffer_bytes: 96 * 1024, addr_map_bytes: 96 * 1024 }
    }
}

/// Serialized size of one Va2Pa entry: request (2B), va (2B), pa (4B).
pub const VA2PA_ENTRY_BYTES: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DispatchError {
    #[error("request {0} is not present")]
    UnknownRequest(u32),
    #[error("request {request}: virtual address {va} is unmapped")]
    UnmappedVa { request: u32, va: u64 },
    #[error("stack references layer {layer} but the module holds {total} layers")]
    LayerOutOfRange { layer: u32, total: u32 },
    #[error("{what} needs {needed} bytes, budget is {budget}")]
    BudgetExceeded { what: &'static str, needed: usize, budget: usize },
    #[error("request {request}: token count regressed from {old} to {new}")]
    TokenRegression { request: u32, old: u32, new: u32 },
    #[error("request {request}: token count must advance by one ({old} -> {new})")]
    TokenSkip { request: u32, old: u32, new: u32 },
    #[error("physical chunk {0} is already mapped")]
    ChunkInUse(u32),
    #[error("request {0} still has Va2Pa entries")]
    MappingNotReleased(u32),
    #[error("virtual operand became negative")]
    NegativeOperand,
    #[error("malformed stack: {0}")]
    Malformed(String),
    #[error("token count must be at least 1")]
    ZeroTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSlot {
    pub request_id: u32,
    pub t_cur: u32,
}

/// Per-module decoding state written by the host each iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigBuffer {
    pub total_layers: u32,
    pub current_layer: u32,
    /// Tokens covered by one virtual KV row chunk.
    pub tokens_per_row: u32,
    pub slots: Vec<RequestSlot>,
}

impl ConfigBuffer {
    pub fn new(total_layers: u32, tokens_per_row: u32) -> Self {
        ConfigBuffer { total_layers, current_layer: 0, tokens_per_row, slots: Vec::new() }
    }

    pub fn slot(&self, request_id: u32) -> Option<&RequestSlot> {
        self.slots.iter().find(|s| s.request_id == request_id)
    }

    pub fn add(&mut self, request_id: u32, t_cur: u32) {
        self.slots.push(RequestSlot { request_id, t_cur });
    }
}

/// Number of KV row chunks spanned by `t_cur` tokens.
pub fn compute_loop_bound(t_cur: u32, tokens_per_row: u32) -> u32 {
    assert!(tokens_per_row >= 1, "tokens_per_row must be positive");
    t_cur.div_ceil(tokens_per_row)
}

/// Virtual-to-physical row mapping.
///
/// Virtual row `va` of a request lives in virtual chunk `va / rows_per_chunk`;
/// that chunk maps to a physical chunk, and the physical row is
/// `region_base + pa_chunk * rows_per_chunk + va % rows_per_chunk`. With
/// `rows_per_chunk == 1` and `region_base == 0` this is a plain row map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Va2PaTable {
    pub rows_per_chunk: u32,
    pub region_base: u32,
    budget_bytes: usize,
    map: BTreeMap<u32, Vec<u32>>,
    used: BTreeSet<u32>,
}

impl Va2PaTable {
    pub fn new(rows_per_chunk: u32, region_base: u32) -> Self {
        Self::with_budget(rows_per_chunk, region_base, DispatchBudget::default().addr_map_bytes)
    }

    pub fn with_budget(rows_per_chunk: u32, region_base: u32, budget_bytes: usize) -> Self {
        assert!(rows_per_chunk >= 1);
        Va2PaTable { rows_per_chunk, region_base, budget_bytes, map: BTreeMap::new(), used: BTreeSet::new() }
    }

    /// Row-granular table (one row per chunk) preloaded with `request -> [pa...]`.
    pub fn identity_rows(request_id: u32, rows: u32) -> Self {
        let mut t = Va2PaTable::with_budget(1, 0, usize::MAX);
        for r in 0..rows {
            t.push_chunk(request_id, r).expect("fresh table");
        }
        t
    }

    /// Appends the next dense virtual chunk of `request_id`, mapping it to `pa_chunk`.
    pub fn push_chunk(&mut self, request_id: u32, pa_chunk: u32) -> Result<u32, DispatchError> {
        if self.used.contains(&pa_chunk) {
            return Err(DispatchError::ChunkInUse(pa_chunk));
        }
        let needed = (self.entry_count() + 1) * VA2PA_ENTRY_BYTES;
        if needed > self.budget_bytes {
            return Err(DispatchError::BudgetExceeded { what: "Va2Pa table", needed, budget: self.budget_bytes });
        }
        self.used.insert(pa_chunk);
        let v = self.map.entry(request_id).or_default();
        v.push(pa_chunk);
        Ok(v.len() as u32 - 1)
    }

    /// Removes every entry of `request_id`, returning the freed physical chunks.
    pub fn release(&mut self, request_id: u32) -> Result<Vec<u32>, DispatchError> {
        let chunks = self.map.remove(&request_id).ok_or(DispatchError::UnknownRequest(request_id))?;
        for c in &chunks {
            self.used.remove(c);
        }
        Ok(chunks)
    }

    pub fn chunks(&self, request_id: u32) -> Option<&[u32]> {
        self.map.get(&request_id).map(|v| v.as_slice())
    }

    pub fn contains(&self, request_id: u32) -> bool {
        self.map.contains_key(&request_id)
    }

    pub fn requests(&self) -> impl Iterator<Item = u32> + '_ {
        self.map.keys().copied()
    }

    pub fn entry_count(&self) -> usize {
        self.map.values().map(Vec::len).sum()
    }

    pub fn encoded_bytes(&self) -> usize {
        self.entry_count() * VA2PA_ENTRY_BYTES
    }

    /// Translates a virtual row of `request_id` to a physical row.
    pub fn translate(&self, request_id: u32, va: u64) -> Result<u32, DispatchError> {
        let chunks = self.map.get(&request_id).ok_or(DispatchError::UnknownRequest(request_id))?;
        let r = self.rows_per_chunk as u64;
        let pa = chunks.get((va / r) as usize).ok_or(DispatchError::UnmappedVa { request: request_id, va })?;
        Ok(self.region_base + pa * self.rows_per_chunk + (va % r) as u32)
    }
}

/// Expands a DPA-encoded stack for one request into concrete commands.
///
/// Token-derived loop bounds take `compute_loop_bound(t_cur, tokens_per_row)`.
/// Row operands tagged by a modifier are virtual and go through `table`;
/// column and GPR operands tagged by a modifier are offsets and are used as is.
pub fn expand(
    stack: &CommandStack,
    cfg: &ConfigBuffer,
    table: &Va2PaTable,
    request_id: u32,
) -> Result<Vec<PimCommand>, DispatchError> {
    if stack.meta.layer >= cfg.total_layers {
        return Err(DispatchError::LayerOutOfRange { layer: stack.meta.layer, total: cfg.total_layers });
    }
    let slot = cfg.slot(request_id).ok_or(DispatchError::UnknownRequest(request_id))?;
    let mut out = Vec::new();
    let entries = &stack.entries;
    let mut i = 0;
    while i < entries.len() {
        match entries[i] {
            Entry::Pim(cmd) => {
                out.push(cmd);
                i += 1;
            }
            Entry::Dpa(DpaCommand::DynLoop { bound, entry }) => {
                let lb = match bound {
                    LoopBound::Fixed(n) => n,
                    LoopBound::TokenRows => compute_loop_bound(slot.t_cur, cfg.tokens_per_row),
                };
                let (body, next) = collect_body(entries, i + 1, entry as usize)?;
                for iter in 0..lb as i64 {
                    for (cmd, mods) in &body {
                        out.push(apply_mods(cmd, mods, iter, table, request_id)?);
                    }
                }
                i = next;
            }
            Entry::Dpa(DpaCommand::DynModi { .. }) => {
                return Err(DispatchError::Malformed(format!("modifier outside loop at entry {i}")));
            }
        }
    }
    Ok(out)
}

type BodyItem = (PimCommand, Vec<(Field, i32)>);

fn collect_body(entries: &[Entry], start: usize, le: usize) -> Result<(Vec<BodyItem>, usize), DispatchError> {
    let mut body = Vec::with_capacity(le);
    let mut mods = Vec::new();
    let mut j = start;
    while body.len() < le {
        match entries.get(j) {
            Some(Entry::Pim(cmd)) => body.push((*cmd, std::mem::take(&mut mods))),
            Some(Entry::Dpa(DpaCommand::DynModi { target, coefficient })) => mods.push((*target, *coefficient)),
            Some(Entry::Dpa(DpaCommand::DynLoop { .. })) => {
                return Err(DispatchError::Malformed(format!("nested loop at entry {j}")))
            }
            None => return Err(DispatchError::Malformed("loop overruns stack".into())),
        }
        j += 1;
    }
    Ok((body, j))
}

fn apply_mods(
    cmd: &PimCommand,
    mods: &[(Field, i32)],
    iter: i64,
    table: &Va2PaTable,
    request_id: u32,
) -> Result<PimCommand, DispatchError> {
    let mut c = *cmd;
    for &(field, coef) in mods {
        let base =
            cmd.field(field).ok_or_else(|| DispatchError::Malformed(format!("{} has no {field}", cmd.mnemonic())))?;
        let v = base as i64 + iter * coef as i64;
        if v < 0 {
            return Err(DispatchError::NegativeOperand);
        }
        let value = match field {
            Field::Row => table.translate(request_id, v as u64)?,
            Field::Col | Field::Gpr => v as u32,
        };
        c = c.with_field(field, value).expect("field checked above");
    }
    Ok(c)
}

/// Host update for one decoding iteration: the request advanced by one token.
pub fn update_config(cfg: &mut ConfigBuffer, request_id: u32, new_t_cur: u32) -> Result<(), DispatchError> {
    let slot =
        cfg.slots.iter_mut().find(|s| s.request_id == request_id).ok_or(DispatchError::UnknownRequest(request_id))?;
    if new_t_cur < slot.t_cur {
        return Err(DispatchError::TokenRegression { request: request_id, old: slot.t_cur, new: new_t_cur });
    }
    if new_t_cur != slot.t_cur + 1 {
        return Err(DispatchError::TokenSkip { request: request_id, old: slot.t_cur, new: new_t_cur });
    }
    slot.t_cur = new_t_cur;
    Ok(())
}

/// Replaces a finished request's slot with a fresh one. The finished request's
/// Va2Pa entries must already be released.
pub fn replace_slot(
    cfg: &mut ConfigBuffer,
    table: &Va2PaTable,
    finished_id: u32,
    new_id: u32,
    t_cur: u32,
) -> Result<(), DispatchError> {
    if t_cur == 0 {
        return Err(DispatchError::ZeroTokens);
    }
    if table.contains(finished_id) {
        return Err(DispatchError::MappingNotReleased(finished_id));
    }
    let slot =
        cfg.slots.iter_mut().find(|s| s.request_id == finished_id).ok_or(DispatchError::UnknownRequest(finished_id))?;
    *slot = RequestSlot { request_id: new_id, t_cur };
    Ok(())
}

/// Command-buffer image resident on a module.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadedImage {
    pub stacks: BTreeMap<(u32, OpKind), CommandStack>,
    pub bytes: usize,
}

impl LoadedImage {
    pub fn get(&self, layer: u32, op: OpKind) -> Option<&CommandStack> {
        self.stacks.get(&(layer, op))
    }
}

pub fn load_stacks(stacks: &[CommandStack], budget: &DispatchBudget) -> Result<LoadedImage, DispatchError> {
    let bytes: usize = stacks.iter().map(|s| isa::serialize(s).len()).sum();
    if bytes > budget.cmd_buffer_bytes {
        return Err(DispatchError::BudgetExceeded {
            what: "command buffer",
            needed: bytes,
            budget: budget.cmd_buffer_bytes,
        });
    }
    let mut image = LoadedImage { bytes, ..Default::default() };
    for s in stacks {
        image.stacks.insert((s.meta.layer, s.meta.op), s.clone());
    }
    Ok(image)
}

/// Text dump of an expanded sequence, one command per line.
pub fn dump_expanded(cmds: &[PimCommand]) -> String {
    let mut s = String::new();
    for c in cmds {
        s.push_str(&isa::command_text(c, &[]));
        s.push('\n');
    }
    s
}

/// Budget usage report for one module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub module: u32,
    pub cmd_bytes: usize,
    pub cmd_budget: usize,
    pub addr_map_bytes: usize,
    pub addr_map_budget: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode_loop, sample_score_stack, StackMeta};

    fn cfg_for(request: u32, t_cur: u32) -> ConfigBuffer {
        let mut c = ConfigBuffer::new(1, 256);
        c.add(request, t_cur);
        c
    }

    #[test]
    fn loop_bound_examples() {
        assert_eq!(compute_loop_bound(300, 256), 2);
        assert_eq!(compute_loop_bound(256, 256), 1);
        assert_eq!(compute_loop_bound(257, 256), 2);
        assert_eq!(compute_loop_bound(1, 256), 1);
    }

    #[test]
    fn loop_bound_matches_row_counting() {
        for t in 1..=4096u32 {
            // Token k sits in row k / 256; count the distinct rows touched.
            let rows: BTreeSet<u32> = (0..t).map(|k| k / 256).collect();
            assert_eq!(compute_loop_bound(t, 256), rows.len() as u32, "t={t}");
        }
    }

    #[test]
    fn two_row_request_maps_to_33_then_34() {
        let stack = sample_score_stack(LoopBound::TokenRows);
        let mut table = Va2PaTable::new(1, 0);
        table.push_chunk(1, 22).unwrap();
        table.push_chunk(2, 33).unwrap();
        table.push_chunk(2, 34).unwrap();
        let cfg = cfg_for(2, 300);
        let out = expand(&stack, &cfg, &table, 2).unwrap();
        let rows: Vec<u32> = out
            .iter()
            .filter_map(|c| match c {
                PimCommand::DotProd { row, .. } => Some(*row),
                _ => None,
            })
            .collect();
        assert_eq!(rows, vec![33, 33, 34, 34]);
        assert_eq!(out.len(), 8);
        assert_eq!(out[1], PimCommand::RdOut { gpr: 0 });
        assert_eq!(out[7], PimCommand::RdOut { gpr: 3 });
    }

    #[test]
    fn concrete_stack_passes_through() {
        let cmds = [
            PimCommand::WrInp { gpr: 1 },
            PimCommand::DotProd { row: 7, col: 0, width: 8 },
            PimCommand::RdOut { gpr: 2 },
        ];
        let stack = CommandStack::from_commands(StackMeta::default(), cmds);
        let out = expand(&stack, &cfg_for(0, 5), &Va2PaTable::new(1, 0), 0).unwrap();
        assert_eq!(out, cmds.to_vec());
    }

    #[test]
    fn unmapped_va_is_an_error() {
        let stack = sample_score_stack(LoopBound::TokenRows);
        let mut table = Va2PaTable::new(1, 0);
        table.push_chunk(2, 33).unwrap();
        let err = expand(&stack, &cfg_for(2, 300), &table, 2).unwrap_err();
        assert_eq!(err, DispatchError::UnmappedVa { request: 2, va: 1 });
    }

    #[test]
    fn layer_out_of_range() {
        let mut stack = sample_score_stack(LoopBound::Fixed(1));
        stack.meta.layer = 3;
        let err = expand(&stack, &cfg_for(0, 1), &Va2PaTable::identity_rows(0, 4), 0).unwrap_err();
        assert!(matches!(err, DispatchError::LayerOutOfRange { layer: 3, total: 1 }));
    }

    #[test]
    fn chunked_translation() {
        let mut t = Va2PaTable::new(4, 100);
        t.push_chunk(9, 5).unwrap();
        t.push_chunk(9, 2).unwrap();
        assert_eq!(t.translate(9, 0).unwrap(), 120);
        assert_eq!(t.translate(9, 3).unwrap(), 123);
        assert_eq!(t.translate(9, 4).unwrap(), 108);
        assert!(t.translate(9, 8).is_err());
        assert_eq!(t.push_chunk(1, 5), Err(DispatchError::ChunkInUse(5)));
    }

    #[test]
    fn table_budget_enforced() {
        let mut t = Va2PaTable::with_budget(1, 0, 16);
        t.push_chunk(0, 0).unwrap();
        t.push_chunk(0, 1).unwrap();
        assert!(matches!(t.push_chunk(0, 2), Err(DispatchError::BudgetExceeded { .. })));
    }

    #[test]
    fn update_config_rules() {
        let mut cfg = cfg_for(4, 300);
        update_config(&mut cfg, 4, 301).unwrap();
        assert_eq!(compute_loop_bound(cfg.slot(4).unwrap().t_cur, 256), 2);
        assert!(matches!(update_config(&mut cfg, 4, 300), Err(DispatchError::TokenRegression { .. })));
        assert!(matches!(update_config(&mut cfg, 4, 305), Err(DispatchError::TokenSkip { .. })));
        let mut empty = ConfigBuffer::new(1, 256);
        assert_eq!(update_config(&mut empty, 4, 2), Err(DispatchError::UnknownRequest(4)));
    }

    #[test]
    fn replace_requires_release() {
        let mut cfg = cfg_for(2, 300);
        let mut table = Va2PaTable::new(1, 0);
        table.push_chunk(2, 33).unwrap();
        assert_eq!(replace_slot(&mut cfg, &table, 2, 5, 1000), Err(DispatchError::MappingNotReleased(2)));
        table.release(2).unwrap();
        replace_slot(&mut cfg, &table, 2, 5, 1000).unwrap();
        assert_eq!(cfg.slot(5).unwrap().t_cur, 1000);
        assert!(cfg.slot(2).is_none());
    }

    #[test]
    fn load_budget() {
        assert!(load_stacks(&[], &DispatchBudget::default()).unwrap().stacks.is_empty());
        let body = vec![PimCommand::DotProd { row: 0, col: 0, width: 16 }; 10_000];
        let big = CommandStack::from_commands(StackMeta::default(), body);
        assert!(matches!(
            load_stacks(&[big], &DispatchBudget::default()),
            Err(DispatchError::BudgetExceeded { what: "command buffer", .. })
        ));
    }

    #[test]
    fn single_iteration_is_identity() {
        let body = [PimCommand::WrInp { gpr: 3 }];
        let s = encode_loop(StackMeta::default(), &body, &[], LoopBound::Fixed(1)).unwrap();
        let out = expand(&s, &cfg_for(0, 1), &Va2PaTable::new(1, 0), 0).unwrap();
        assert_eq!(out, body.to_vec());
    }
}
