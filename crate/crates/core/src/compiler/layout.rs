//! Row geometry of FC weights and the KV cache, plus the host-side packing
//! of inputs and unpacking of outputs that goes with it.

use serde::{Deserialize, Serialize};

use super::CompileError;
use crate::device::{DeviceError, GprSegment, ModuleState, PimTopology};
use crate::isa::{CommandStack, DpaCommand, Field, LoopBound, PimCommand, StackMeta};
use crate::model::{Matrix, ModelConfig};

pub const GPR_FC_IN: u32 = 0;
pub const GPR_FC_OUT: u32 = 0x0100_0000;
pub const GPR_QK_IN: u32 = 0x1000_0000;
pub const GPR_QK_OUT: u32 = 0x2000_0000;
pub const GPR_SV_IN: u32 = 0x3000_0000;
pub const GPR_SV_OUT: u32 = 0x4000_0000;
/// GPR ids of different query passes are `pass << PASS_SHIFT` apart.
pub const PASS_SHIFT: u32 = 20;

/// Usable elements of one row that a single DOT-PROD can cover.
pub fn dot_span(topo: &PimTopology) -> u32 {
    topo.elems_per_row().min(topo.gb_elems())
}

/// GEMV weight layout: output `g * P + pu` lives on PU `pu`, its input columns
/// split into segments of `seg_elems` stored in consecutive rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcLayout {
    pub rows: u32,
    pub cols: u32,
    pub base: u32,
    pub pus: u32,
    pub groups: u32,
    pub segs: u32,
    pub seg_elems: u32,
}

impl FcLayout {
    pub fn new(rows: u32, cols: u32, base: u32, topo: &PimTopology) -> Self {
        let pus = topo.pus();
        let seg_elems = dot_span(topo);
        FcLayout { rows, cols, base, pus, groups: rows.div_ceil(pus), segs: cols.div_ceil(seg_elems), seg_elems }
    }

    pub fn row_count(&self) -> u32 {
        self.groups * self.segs
    }

    pub fn end(&self) -> u32 {
        self.base + self.row_count()
    }

    pub fn seg_width(&self, s: u32) -> u32 {
        (self.cols - s * self.seg_elems).min(self.seg_elems)
    }

    pub fn write(&self, m: &Matrix, state: &mut ModuleState) -> Result<(), DeviceError> {
        assert_eq!((m.rows as u32, m.cols as u32), (self.rows, self.cols));
        for r in 0..self.rows {
            let (g, pu) = (r / self.pus, r % self.pus);
            let row = m.row(r as usize);
            for s in 0..self.segs {
                let lo = (s * self.seg_elems) as usize;
                let w = self.seg_width(s) as usize;
                state.write_row(self.base + g * self.segs + s, pu, 0, &row[lo..lo + w])?;
            }
        }
        Ok(())
    }

    /// One WR-INP per segment (only once when a single segment suffices), one
    /// DOT-PROD per row, one RD-OUT per output group.
    pub fn commands(&self) -> Vec<PimCommand> {
        let mut out = Vec::with_capacity((self.row_count() * 2 + self.groups) as usize);
        for g in 0..self.groups {
            for s in 0..self.segs {
                if self.segs > 1 || g == 0 {
                    out.push(PimCommand::WrInp { gpr: GPR_FC_IN + s });
                }
                out.push(PimCommand::DotProd { row: self.base + g * self.segs + s, col: 0, width: self.seg_width(s) });
            }
            out.push(PimCommand::RdOut { gpr: GPR_FC_OUT + g });
        }
        out
    }

    pub fn inputs(&self, x: &[f32], channels: u32) -> Vec<(u32, Vec<GprSegment>)> {
        assert_eq!(x.len() as u32, self.cols);
        (0..self.segs)
            .map(|s| {
                let lo = (s * self.seg_elems) as usize;
                let w = self.seg_width(s) as usize;
                (GPR_FC_IN + s, vec![GprSegment::broadcast(x[lo..lo + w].to_vec(), channels)])
            })
            .collect()
    }

    /// Elements each WR-INP of segment `s` carries.
    pub fn input_elems(&self, gpr: u32) -> u64 {
        self.seg_width(gpr - GPR_FC_IN) as u64
    }

    pub fn gather(&self, state: &mut ModuleState) -> Result<Vec<f32>, DeviceError> {
        let mut y = Vec::with_capacity((self.groups * self.pus) as usize);
        for g in 0..self.groups {
            match state.take_gpr(GPR_FC_OUT + g) {
                Some(crate::device::GprData::Output(v)) => y.extend(v),
                _ => return Err(DeviceError::MissingInput(GPR_FC_OUT + g)),
            }
        }
        y.truncate(self.rows as usize);
        Ok(y)
    }
}

/// Token-parallel KV layout of one module.
///
/// Tokens are dealt over every PU in blocks of `tb = P * tpp`: token
/// `b * tb + pu * tpp + j` sits on PU `pu`. One virtual chunk holds one token
/// block for every local layer: `krows` K rows then `vrows` V rows per layer.
/// K rows pack `tpp` tokens times `hpr` heads of `d_h` elements. V rows pack
/// units of `ts` tokens for one output dim `o`, which sits on PU `o % P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnLayout {
    pub kv_local: u32,
    pub d_h: u32,
    pub gsz: u32,
    pub layers: u32,
    pub pus: u32,
    pub banks: u32,
    pub channels: u32,
    pub span: u32,
    pub hpr: u32,
    pub krows: u32,
    pub tpp: u32,
    pub tb: u32,
    pub w: u32,
    pub nog: u32,
    pub ts: u32,
    pub nseg: u32,
    pub opr: u32,
    pub vrows: u32,
    pub rows_per_chunk: u32,
    pub region_base: u32,
    pub chunks: u32,
}

impl AttnLayout {
    /// Largest tokens-per-PU-row the geometry allows.
    pub fn max_tpp(kv_local: u32, d_h: u32, topo: &PimTopology) -> u32 {
        let span = dot_span(topo);
        if kv_local * d_h <= span {
            (span / (kv_local * d_h)).max(1)
        } else {
            1
        }
    }

    /// `tokens_per_row` of `None` packs as many tokens per PU row as fit.
    pub fn new(
        model: &ModelConfig,
        topo: &PimTopology,
        tp: u32,
        layers: u32,
        tokens_per_row: Option<u32>,
        region_base: u32,
    ) -> Result<Self, CompileError> {
        if tp == 0 || !model.n_kv_heads.is_multiple_of(tp) {
            return Err(CompileError::Infeasible(format!("{} kv heads over tp {tp}", model.n_kv_heads)));
        }
        let kv_local = model.n_kv_heads / tp;
        Self::for_heads(kv_local, model.d_head, model.group_size(), layers, topo, tokens_per_row, region_base)
    }

    pub fn for_heads(
        kv_local: u32,
        d_h: u32,
        gsz: u32,
        layers: u32,
        topo: &PimTopology,
        tokens_per_row: Option<u32>,
        region_base: u32,
    ) -> Result<Self, CompileError> {
        let span = dot_span(topo);
        let pus = topo.pus();
        let banks = topo.banks_per_channel;
        if d_h > span {
            return Err(CompileError::Unmappable(format!("head dim {d_h} exceeds row span {span}")));
        }
        if !d_h.is_multiple_of(banks) {
            return Err(CompileError::Unmappable(format!("{banks} banks per channel do not divide head dim {d_h}")));
        }
        let hpr = kv_local.min(span / d_h);
        let krows = kv_local.div_ceil(hpr);
        let max_tpp = Self::max_tpp(kv_local, d_h, topo);
        let tpp = match tokens_per_row {
            None => max_tpp,
            Some(t) => {
                if t == 0 || t % pus != 0 || t / pus > max_tpp {
                    return Err(CompileError::Unmappable(format!(
                        "tokens per row {t} must be a multiple of {pus} up to {}",
                        pus * max_tpp
                    )));
                }
                t / pus
            }
        };
        let tb = pus * tpp;
        let w = kv_local * d_h;
        let nog = w.div_ceil(pus);
        let ts = tb.min(span);
        let nseg = tb / ts;
        let opr = span / ts;
        let vrows = (nog * nseg).div_ceil(opr);
        let rows_per_chunk = layers * (krows + vrows);
        if region_base + rows_per_chunk > topo.rows_per_bank {
            return Err(CompileError::Unmappable("no room for a single KV chunk".into()));
        }
        let chunks = (topo.rows_per_bank - region_base) / rows_per_chunk;
        Ok(AttnLayout {
            kv_local,
            d_h,
            gsz,
            layers,
            pus,
            banks,
            channels: topo.channels,
            span,
            hpr,
            krows,
            tpp,
            tb,
            w,
            nog,
            ts,
            nseg,
            opr,
            vrows,
            rows_per_chunk,
            region_base,
            chunks,
        })
    }

    pub fn tokens_per_chunk(&self) -> u32 {
        self.tb
    }

    fn heads_in_row(&self, kr: u32) -> u32 {
        (self.kv_local - kr * self.hpr).min(self.hpr)
    }

    pub fn k_va(&self, l: u32, b: u32, kr: u32) -> u32 {
        b * self.rows_per_chunk + l * (self.krows + self.vrows) + kr
    }

    pub fn v_va(&self, l: u32, b: u32, vr: u32) -> u32 {
        b * self.rows_per_chunk + l * (self.krows + self.vrows) + self.krows + vr
    }

    /// Virtual row, PU and column of the K vector of token `tau`, local head `h`.
    pub fn k_slot(&self, l: u32, tau: u32, h: u32) -> (u32, u32, u32) {
        let (b, u) = (tau / self.tb, tau % self.tb);
        let (pu, j) = (u / self.tpp, u % self.tpp);
        let col = j * self.hpr * self.d_h + (h % self.hpr) * self.d_h;
        (self.k_va(l, b, h / self.hpr), pu, col)
    }

    /// Virtual row, PU and column of V element `i` of token `tau`, local head `h`.
    pub fn v_slot(&self, l: u32, tau: u32, h: u32, i: u32) -> (u32, u32, u32) {
        let (b, u) = (tau / self.tb, tau % self.tb);
        let o = h * self.d_h + i;
        let q = (o / self.pus) * self.nseg + u / self.ts;
        (self.v_va(l, b, q / self.opr), o % self.pus, (q % self.opr) * self.ts + u % self.ts)
    }

    /// Writes token `tau`'s K and V (all local heads, `kv_local * d_h` each).
    /// `translate` maps a virtual row to a physical one.
    pub fn write_token(
        &self,
        state: &mut ModuleState,
        l: u32,
        tau: u32,
        k: &[f32],
        v: &[f32],
        mut translate: impl FnMut(u32) -> Result<u32, DeviceError>,
    ) -> Result<(), DeviceError> {
        let d = self.d_h as usize;
        for h in 0..self.kv_local {
            let (va, pu, col) = self.k_slot(l, tau, h);
            state.write_row(translate(va)?, pu, col, &k[h as usize * d..(h as usize + 1) * d])?;
            for i in 0..self.d_h {
                let (va, pu, col) = self.v_slot(l, tau, h, i);
                state.write_row(translate(va)?, pu, col, &[v[(h * self.d_h + i) as usize]])?;
            }
        }
        Ok(())
    }

    pub fn passes_qk(&self) -> u32 {
        self.gsz * self.krows
    }

    /// Score stack of one layer. Per (query pass, K row) the query heads are
    /// written once, then a token-bounded loop walks the chunks issuing one
    /// DOT-PROD and RD-OUT per (token slot, head) of the row.
    pub fn qk_stack(&self, meta: StackMeta) -> CommandStack {
        let l = meta.layer;
        let mut s = CommandStack::new(meta);
        for qi in 0..self.gsz {
            for kr in 0..self.krows {
                let pass = qi * self.krows + kr;
                let hk = self.heads_in_row(kr);
                let per_iter = self.tpp * hk;
                s.push(PimCommand::WrInp { gpr: GPR_QK_IN + pass });
                s.push(DpaCommand::DynLoop { bound: LoopBound::TokenRows, entry: 2 * per_iter });
                for j in 0..self.tpp {
                    for hh in 0..hk {
                        s.push(DpaCommand::DynModi { target: Field::Row, coefficient: self.rows_per_chunk as i32 });
                        let col = j * self.hpr * self.d_h + hh * self.d_h;
                        s.push(PimCommand::DotProd { row: self.k_va(l, 0, kr), col, width: self.d_h });
                        s.push(DpaCommand::DynModi { target: Field::Gpr, coefficient: per_iter as i32 });
                        s.push(PimCommand::RdOut { gpr: GPR_QK_OUT + (pass << PASS_SHIFT) + j * hk + hh });
                    }
                }
            }
        }
        s
    }

    /// Units stored in V row `vr`.
    fn row_units(&self, vr: u32) -> std::ops::Range<u32> {
        vr * self.opr..((vr + 1) * self.opr).min(self.nog * self.nseg)
    }

    /// Weighted-sum stack of one layer. Per query pass a token-bounded loop
    /// writes the probabilities for each V row and accumulates every unit of
    /// an output group before one RD-OUT.
    pub fn sv_stack(&self, meta: StackMeta) -> CommandStack {
        let l = meta.layer;
        let mut s = CommandStack::new(meta);
        let units = self.nog * self.nseg;
        let le = self.vrows + units + self.nog;
        for qi in 0..self.gsz {
            let pass = qi << PASS_SHIFT;
            s.push(DpaCommand::DynLoop { bound: LoopBound::TokenRows, entry: le });
            for vr in 0..self.vrows {
                s.push(DpaCommand::DynModi { target: Field::Gpr, coefficient: self.vrows as i32 });
                s.push(PimCommand::WrInp { gpr: GPR_SV_IN + pass + vr });
                for q in self.row_units(vr) {
                    s.push(DpaCommand::DynModi { target: Field::Row, coefficient: self.rows_per_chunk as i32 });
                    s.push(PimCommand::DotProd {
                        row: self.v_va(l, 0, vr),
                        col: (q % self.opr) * self.ts,
                        width: self.ts,
                    });
                    if q % self.nseg == self.nseg - 1 {
                        s.push(DpaCommand::DynModi { target: Field::Gpr, coefficient: self.nog as i32 });
                        s.push(PimCommand::RdOut { gpr: GPR_SV_OUT + pass + q / self.nseg });
                    }
                }
            }
        }
        s
    }

    /// Score-pass input: the query heads of pass (`qi`, `kr`) repeated for
    /// every token slot of a row. `q` holds the module's query heads,
    /// `kv_local * gsz` vectors of `d_h`, grouped by kv head.
    pub fn qk_input(&self, q: &[f32], qi: u32, kr: u32) -> Vec<GprSegment> {
        let d = self.d_h as usize;
        let mut data = vec![0.0; (self.tpp * self.hpr * self.d_h) as usize];
        for j in 0..self.tpp {
            for hh in 0..self.heads_in_row(kr) {
                let qh = ((kr * self.hpr + hh) * self.gsz + qi) as usize;
                let at = ((j * self.hpr + hh) * self.d_h) as usize;
                data[at..at + d].copy_from_slice(&q[qh * d..(qh + 1) * d]);
            }
        }
        vec![GprSegment::broadcast(data, self.channels)]
    }

    pub fn qk_input_elems(&self) -> u64 {
        (self.tpp * self.hpr * self.d_h) as u64
    }

    /// Raw scores of query pass `qi` for the first `t_cur` tokens, one vector per local kv head.
    pub fn gather_scores(&self, state: &mut ModuleState, qi: u32, t_cur: u32) -> Result<Vec<Vec<f32>>, DeviceError> {
        let blocks = t_cur.div_ceil(self.tb);
        let mut scores = vec![vec![0.0f32; t_cur as usize]; self.kv_local as usize];
        for kr in 0..self.krows {
            let pass = qi * self.krows + kr;
            let hk = self.heads_in_row(kr);
            for b in 0..blocks {
                for j in 0..self.tpp {
                    for hh in 0..hk {
                        let gpr = GPR_QK_OUT + (pass << PASS_SHIFT) + b * self.tpp * hk + j * hk + hh;
                        let out = take_output(state, gpr)?;
                        for pu in 0..self.pus {
                            let tau = b * self.tb + pu * self.tpp + j;
                            if tau < t_cur {
                                scores[(kr * self.hpr + hh) as usize][tau as usize] = out[pu as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(scores)
    }

    /// Probability input for V row `vr` of block `b`: each unit gets the
    /// probabilities of its token segment, per channel for the head whose
    /// output dims that channel holds. Tokens at or past `t_cur` get zero.
    pub fn sv_input(&self, probs: &[Vec<f32>], b: u32, vr: u32) -> Vec<GprSegment> {
        let mut segs = Vec::new();
        for q in self.row_units(vr) {
            let (og, sg) = (q / self.nseg, q % self.nseg);
            let offset = (q % self.opr) * self.ts;
            let mut c = 0;
            while c < self.channels {
                let o = og * self.pus + c * self.banks;
                if o >= self.w {
                    break;
                }
                let h = o / self.d_h;
                let mut hi = c + 1;
                while hi < self.channels
                    && (og * self.pus + hi * self.banks) < self.w
                    && (og * self.pus + hi * self.banks) / self.d_h == h
                {
                    hi += 1;
                }
                let p = &probs[h as usize];
                let first = b * self.tb + sg * self.ts;
                let data = (0..self.ts).map(|k| p.get((first + k) as usize).copied().unwrap_or(0.0)).collect();
                segs.push(GprSegment { chan_lo: c, chan_hi: hi, offset, data });
                c = hi;
            }
        }
        segs
    }

    /// Elements of the SV input for row `vr` and the channel count each is sent to.
    pub fn sv_input_shape(&self, vr: u32) -> Vec<(u64, u32)> {
        let probs = vec![Vec::new(); self.kv_local as usize];
        self.sv_input(&probs, 0, vr).iter().map(|s| (s.data.len() as u64, s.chan_hi - s.chan_lo)).collect()
    }

    /// Attention outputs of query pass `qi` summed over `blocks`, one
    /// `d_h` vector per local kv head.
    pub fn gather_attn(&self, state: &mut ModuleState, qi: u32, blocks: u32) -> Result<Vec<Vec<f32>>, DeviceError> {
        let mut acc = vec![0.0f32; self.w as usize];
        for b in 0..blocks {
            for og in 0..self.nog {
                let out = take_output(state, GPR_SV_OUT + (qi << PASS_SHIFT) + b * self.nog + og)?;
                for pu in 0..self.pus {
                    let o = og * self.pus + pu;
                    if o < self.w {
                        acc[o as usize] += out[pu as usize];
                    }
                }
            }
        }
        Ok(acc.chunks(self.d_h as usize).map(|c| c.to_vec()).collect())
    }

    /// GPR id the SV loop reads for block `b`, row `vr`, pass `qi`.
    pub fn sv_gpr(&self, qi: u32, b: u32, vr: u32) -> u32 {
        GPR_SV_IN + (qi << PASS_SHIFT) + b * self.vrows + vr
    }

    pub fn qk_gpr(&self, qi: u32, kr: u32) -> u32 {
        GPR_QK_IN + qi * self.krows + kr
    }
}

fn take_output(state: &mut ModuleState, gpr: u32) -> Result<Vec<f32>, DeviceError> {
    match state.take_gpr(gpr) {
        Some(crate::device::GprData::Output(v)) => Ok(v),
        _ => Err(DeviceError::MissingInput(gpr)),
    }
}
