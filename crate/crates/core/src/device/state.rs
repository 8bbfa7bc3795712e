use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::timing::{time_commands, ExecMode, ExecReport};
use super::{DeviceError, PimTopology, TimingParams};
use crate::isa::PimCommand;

/// Part of a GPR input: `data` lands at GB offset `offset` of every channel in
/// `chan_lo..chan_hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprSegment {
    pub chan_lo: u32,
    pub chan_hi: u32,
    pub offset: u32,
    pub data: Vec<f32>,
}

impl GprSegment {
    pub fn broadcast(data: Vec<f32>, channels: u32) -> Self {
        GprSegment { chan_lo: 0, chan_hi: channels, offset: 0, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GprData {
    Input(Vec<GprSegment>),
    /// One value per PU, in PU order (channel-major).
    Output(Vec<f32>),
}

impl GprData {
    fn elems(&self) -> u64 {
        match self {
            GprData::Input(segs) => segs.iter().map(|s| s.data.len() as u64).sum(),
            GprData::Output(v) => v.len() as u64,
        }
    }
}

/// Bytes a WR_INP of `segs` moves over the interface.
pub(crate) fn input_bytes(segs: &[GprSegment], topo: &PimTopology, timing: &TimingParams) -> u64 {
    segs.iter()
        .map(|s| {
            let copies = if timing.broadcast_per_channel { (s.chan_hi - s.chan_lo) as u64 } else { 1 };
            s.data.len() as u64 * topo.element_bytes as u64 * copies
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct ModuleState {
    pub topo: PimTopology,
    pub pingpong_enabled: bool,
    pub pingpong_bit: u8,
    dram: HashMap<u32, Vec<f32>>,
    gb: [Vec<f32>; 2],
    outregs: Vec<f32>,
    outreg_written: bool,
    gpr: BTreeMap<u32, GprData>,
    gpr_used: u64,
}

impl ModuleState {
    pub fn new(topo: PimTopology, pingpong_enabled: bool) -> Self {
        let gb_len = (topo.channels * topo.gb_elems()) as usize;
        ModuleState {
            pingpong_enabled,
            pingpong_bit: 0,
            dram: HashMap::new(),
            gb: [vec![0.0; gb_len], vec![0.0; gb_len]],
            outregs: vec![0.0; topo.pus() as usize],
            outreg_written: false,
            gpr: BTreeMap::new(),
            gpr_used: 0,
            topo,
        }
    }

    pub fn mode(&self) -> ExecMode {
        if self.pingpong_enabled {
            ExecMode::PingPong
        } else {
            ExecMode::Serial
        }
    }

    fn row_mut(&mut self, row: u32) -> Result<&mut Vec<f32>, DeviceError> {
        if row >= self.topo.rows_per_bank {
            return Err(DeviceError::RowOutOfRange { row, limit: self.topo.rows_per_bank });
        }
        let len = (self.topo.pus() * self.topo.elems_per_row()) as usize;
        Ok(self.dram.entry(row).or_insert_with(|| vec![0.0; len]))
    }

    /// Writes `values` into `row` of processing unit `pu` starting at column `col`.
    pub fn write_row(&mut self, row: u32, pu: u32, col: u32, values: &[f32]) -> Result<(), DeviceError> {
        let e = self.topo.elems_per_row();
        let end = col + values.len() as u32;
        if end > e {
            return Err(DeviceError::ColOutOfRange { col, end, limit: e });
        }
        if pu >= self.topo.pus() {
            return Err(DeviceError::ChannelOutOfRange { lo: pu, hi: pu + 1, limit: self.topo.pus() });
        }
        let base = (pu * e + col) as usize;
        self.row_mut(row)?[base..base + values.len()].copy_from_slice(values);
        Ok(())
    }

    pub fn read_row(&self, row: u32, pu: u32) -> Vec<f32> {
        let e = self.topo.elems_per_row() as usize;
        match self.dram.get(&row) {
            Some(r) => r[pu as usize * e..(pu as usize + 1) * e].to_vec(),
            None => vec![0.0; e],
        }
    }

    /// Rows that have been written at least once.
    pub fn touched_rows(&self) -> usize {
        self.dram.len()
    }

    fn put_gpr(&mut self, gpr: u32, data: GprData) -> Result<(), DeviceError> {
        let eb = self.topo.element_bytes as u64;
        let old = self.gpr.get(&gpr).map(|d| d.elems() * eb).unwrap_or(0);
        let needed = self.gpr_used - old + data.elems() * eb;
        if needed > self.topo.gpr_bytes as u64 {
            return Err(DeviceError::GprOverflow { needed, limit: self.topo.gpr_bytes as u64 });
        }
        self.gpr_used = needed;
        self.gpr.insert(gpr, data);
        Ok(())
    }

    /// Host write of an input vector into the hub GPR.
    pub fn set_input(&mut self, gpr: u32, segments: Vec<GprSegment>) -> Result<(), DeviceError> {
        let gbe = self.topo.gb_elems();
        for s in &segments {
            if s.chan_lo >= s.chan_hi || s.chan_hi > self.topo.channels {
                return Err(DeviceError::ChannelOutOfRange { lo: s.chan_lo, hi: s.chan_hi, limit: self.topo.channels });
            }
            let end = s.offset + s.data.len() as u32;
            if end > gbe {
                return Err(DeviceError::GbOverflow { end, limit: gbe });
            }
        }
        self.put_gpr(gpr, GprData::Input(segments))
    }

    pub fn gpr(&self, gpr: u32) -> Option<&GprData> {
        self.gpr.get(&gpr)
    }

    pub fn output(&self, gpr: u32) -> Option<&[f32]> {
        match self.gpr.get(&gpr) {
            Some(GprData::Output(v)) => Some(v),
            _ => None,
        }
    }

    /// Removes a GPR entry, returning it to the host.
    pub fn take_gpr(&mut self, gpr: u32) -> Option<GprData> {
        let d = self.gpr.remove(&gpr)?;
        self.gpr_used -= d.elems() * self.topo.element_bytes as u64;
        Some(d)
    }

    pub fn clear_gpr(&mut self) {
        self.gpr.clear();
        self.gpr_used = 0;
    }

    pub fn gpr_used_bytes(&self) -> u64 {
        self.gpr_used
    }

    /// WR_INP payload size in bytes for the given GPR entry.
    pub fn input_bytes(&self, gpr: u32, timing: &TimingParams) -> Result<u64, DeviceError> {
        match self.gpr.get(&gpr) {
            Some(GprData::Input(segs)) => Ok(input_bytes(segs, &self.topo, timing)),
            _ => Err(DeviceError::MissingInput(gpr)),
        }
    }

    /// Applies one command's functional effect.
    pub fn step(&mut self, cmd: &PimCommand) -> Result<(), DeviceError> {
        let topo = self.topo;
        match *cmd {
            PimCommand::WrInp { gpr } => {
                let segs = match self.gpr.get(&gpr) {
                    Some(GprData::Input(s)) => s.clone(),
                    _ => return Err(DeviceError::MissingInput(gpr)),
                };
                let dst = if self.pingpong_enabled {
                    // Fill the idle buffer from the live one, then switch to it.
                    let (cur, idle) = (self.pingpong_bit as usize, 1 - self.pingpong_bit as usize);
                    let src = self.gb[cur].clone();
                    self.gb[idle].copy_from_slice(&src);
                    self.pingpong_bit ^= 1;
                    idle
                } else {
                    0
                };
                let gbe = topo.gb_elems() as usize;
                for s in &segs {
                    for ch in s.chan_lo..s.chan_hi {
                        let base = ch as usize * gbe + s.offset as usize;
                        self.gb[dst][base..base + s.data.len()].copy_from_slice(&s.data);
                    }
                }
            }
            PimCommand::DotProd { row, col, width } => {
                if row >= topo.rows_per_bank {
                    return Err(DeviceError::RowOutOfRange { row, limit: topo.rows_per_bank });
                }
                let limit = topo.elems_per_row().min(topo.gb_elems());
                let end = col + width;
                if end > limit {
                    return Err(DeviceError::ColOutOfRange { col, end, limit });
                }
                let buf = &self.gb[if self.pingpong_enabled { self.pingpong_bit as usize } else { 0 }];
                if let Some(data) = self.dram.get(&row) {
                    let e = topo.elems_per_row() as usize;
                    let gbe = topo.gb_elems() as usize;
                    for pu in 0..topo.pus() as usize {
                        let ch = pu / topo.banks_per_channel as usize;
                        let r = &data[pu * e + col as usize..pu * e + end as usize];
                        let x = &buf[ch * gbe + col as usize..ch * gbe + end as usize];
                        let dot: f32 = r.iter().zip(x).map(|(a, b)| a * b).sum();
                        self.outregs[pu] += dot;
                    }
                }
                self.outreg_written = true;
            }
            PimCommand::RdOut { gpr } => {
                if !self.outreg_written {
                    return Err(DeviceError::OutRegUnwritten);
                }
                let vals = std::mem::replace(&mut self.outregs, vec![0.0; topo.pus() as usize]);
                self.outreg_written = false;
                self.put_gpr(gpr, GprData::Output(vals))?;
            }
        }
        Ok(())
    }

    /// Executes `cmds` functionally and returns their cycle report.
    pub fn execute(&mut self, cmds: &[PimCommand], timing: &TimingParams) -> Result<ExecReport, DeviceError> {
        let mut wr = Vec::new();
        for c in cmds {
            if let PimCommand::WrInp { gpr } = c {
                wr.push(self.input_bytes(*gpr, timing)?);
            }
            self.step(c)?;
        }
        let mut it = wr.into_iter();
        Ok(time_commands(cmds, &self.topo, timing, self.mode(), |_| it.next().unwrap_or(0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_state(pp: bool) -> ModuleState {
        ModuleState::new(PimTopology::default(), pp)
    }

    #[test]
    fn zero_row_dot_is_zero() {
        let mut s = default_state(false);
        s.set_input(0, vec![GprSegment::broadcast(vec![3.0; 1024], 16)]).unwrap();
        let tp = TimingParams::default();
        s.step(&PimCommand::WrInp { gpr: 0 }).unwrap();
        let r = s.execute(&[PimCommand::DotProd { row: 5, col: 0, width: 1024 }], &tp).unwrap();
        assert_eq!(r.cycles, 20 + 64);
        s.step(&PimCommand::RdOut { gpr: 1 }).unwrap();
        assert!(s.output(1).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn errors() {
        let mut s = default_state(false);
        assert_eq!(s.step(&PimCommand::RdOut { gpr: 0 }), Err(DeviceError::OutRegUnwritten));
        assert_eq!(s.step(&PimCommand::WrInp { gpr: 9 }), Err(DeviceError::MissingInput(9)));
        assert!(matches!(
            s.step(&PimCommand::DotProd { row: 16384, col: 0, width: 1 }),
            Err(DeviceError::RowOutOfRange { .. })
        ));
        assert!(matches!(
            s.step(&PimCommand::DotProd { row: 0, col: 1000, width: 100 }),
            Err(DeviceError::ColOutOfRange { .. })
        ));
        assert!(matches!(
            s.set_input(0, vec![GprSegment::broadcast(vec![0.0; 1025], 16)]),
            Err(DeviceError::GbOverflow { .. })
        ));
        let mut small = ModuleState::new(PimTopology { gpr_bytes: 16, ..PimTopology::toy() }, false);
        assert!(matches!(
            small.set_input(0, vec![GprSegment::broadcast(vec![0.0; 9], 2)]),
            Err(DeviceError::GprOverflow { .. })
        ));
    }

    #[test]
    fn per_channel_segments() {
        let topo = PimTopology::toy();
        let mut s = ModuleState::new(topo, false);
        for pu in 0..4 {
            s.write_row(0, pu, 0, &[1.0; 16]).unwrap();
        }
        let segs = vec![
            GprSegment { chan_lo: 0, chan_hi: 1, offset: 0, data: vec![1.0; 16] },
            GprSegment { chan_lo: 1, chan_hi: 2, offset: 0, data: vec![2.0; 16] },
        ];
        s.set_input(0, segs).unwrap();
        for c in [
            PimCommand::WrInp { gpr: 0 },
            PimCommand::DotProd { row: 0, col: 0, width: 16 },
            PimCommand::RdOut { gpr: 1 },
        ] {
            s.step(&c).unwrap();
        }
        assert_eq!(s.output(1).unwrap(), &[16.0, 16.0, 32.0, 32.0]);
    }
}
