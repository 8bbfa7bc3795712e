//! Functional and cycle model of one PIM module.

mod analytic;
mod epu;
mod state;
mod timing;

pub use analytic::{analytic_cycles, GemvShape};
pub use epu::{epu_apply, epu_cycles, EpuKind};
pub use state::{GprData, GprSegment, ModuleState};
pub use timing::{time_commands, Breakdown, ExecMode, ExecReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PimTopology {
    pub nodes: u32,
    pub modules_per_node: u32,
    pub channels: u32,
    pub banks_per_channel: u32,
    pub row_bytes: u32,
    pub rows_per_bank: u32,
    pub mac_width: u32,
    pub gb_bytes: u32,
    pub outreg_bytes_per_pu: u32,
    pub gpr_bytes: u32,
    /// Bytes per stored element, used for transfer and capacity accounting.
    pub element_bytes: u32,
}

impl Default for PimTopology {
    fn default() -> Self {
        PimTopology {
            nodes: 1,
            modules_per_node: 8,
            channels: 16,
            banks_per_channel: 16,
            row_bytes: 2048,
            rows_per_bank: 16384,
            mac_width: 16,
            gb_bytes: 2048,
            outreg_bytes_per_pu: 4,
            gpr_bytes: 512 * 1024,
            element_bytes: 2,
        }
    }
}

impl PimTopology {
    /// Tiny module used for functional tests: 2 channels x 2 banks, 16-element rows.
    pub fn toy() -> Self {
        PimTopology {
            nodes: 1,
            modules_per_node: 1,
            channels: 2,
            banks_per_channel: 2,
            row_bytes: 32,
            rows_per_bank: 4096,
            mac_width: 4,
            gb_bytes: 32,
            outreg_bytes_per_pu: 4,
            gpr_bytes: 1 << 20,
            element_bytes: 2,
        }
    }

    pub fn with_nodes(mut self, nodes: u32) -> Self {
        self.nodes = nodes;
        self
    }

    /// Processing units (banks) per module.
    pub fn pus(&self) -> u32 {
        self.channels * self.banks_per_channel
    }

    pub fn elems_per_row(&self) -> u32 {
        self.row_bytes / self.element_bytes
    }

    pub fn gb_elems(&self) -> u32 {
        self.gb_bytes / self.element_bytes
    }

    pub fn modules(&self) -> u32 {
        self.nodes * self.modules_per_node
    }

    pub fn module_capacity_bytes(&self) -> u64 {
        self.pus() as u64 * self.row_bytes as u64 * self.rows_per_bank as u64
    }

    pub fn mac_cycles(&self, width: u32) -> u64 {
        width.div_ceil(self.mac_width) as u64
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let fields = [
            ("nodes", self.nodes),
            ("modules_per_node", self.modules_per_node),
            ("channels", self.channels),
            ("banks_per_channel", self.banks_per_channel),
            ("row_bytes", self.row_bytes),
            ("rows_per_bank", self.rows_per_bank),
            ("mac_width", self.mac_width),
            ("gb_bytes", self.gb_bytes),
            ("outreg_bytes_per_pu", self.outreg_bytes_per_pu),
            ("gpr_bytes", self.gpr_bytes),
            ("element_bytes", self.element_bytes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(DeviceError::Config(format!("{name} must be positive")));
            }
        }
        if !self.row_bytes.is_multiple_of(self.element_bytes) {
            return Err(DeviceError::Config("row_bytes must be a multiple of element_bytes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingParams {
    pub pim_clock_hz: f64,
    pub interface_bytes_per_cycle: u32,
    pub row_activate_cycles: u32,
    pub epu_cycles_per_element: u32,
    /// Elements the hub EPU processes per pass.
    pub epu_lanes: u32,
    pub dispatch_cycles_per_cmd: u32,
    pub host_sync_cycles: u32,
    pub internode_bytes_per_sec: f64,
    /// Fixed command overhead of each WR_INP / RD_OUT transfer.
    pub io_cmd_overhead_cycles: u32,
    /// Charge WR_INP once per destination channel instead of once per broadcast.
    pub broadcast_per_channel: bool,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            pim_clock_hz: 1e9,
            interface_bytes_per_cycle: 64,
            row_activate_cycles: 20,
            epu_cycles_per_element: 1,
            epu_lanes: 64,
            dispatch_cycles_per_cmd: 1,
            host_sync_cycles: 2000,
            internode_bytes_per_sec: 1e10,
            io_cmd_overhead_cycles: 4,
            broadcast_per_channel: false,
        }
    }
}

impl TimingParams {
    pub fn mac_cycles_per_row(&self, topo: &PimTopology) -> u64 {
        topo.mac_cycles(topo.elems_per_row())
    }

    pub fn internode_bytes_per_cycle(&self) -> f64 {
        self.internode_bytes_per_sec / self.pim_clock_hz
    }

    /// Cycles to move `bytes` over the host interface as one transfer command.
    pub fn io_cycles(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.interface_bytes_per_cycle as u64) + self.io_cmd_overhead_cycles as u64
    }

    pub fn peak_flops_per_pu(&self, topo: &PimTopology) -> f64 {
        2.0 * topo.mac_width as f64 * self.pim_clock_hz
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.pim_clock_hz > 0.0 && self.internode_bytes_per_sec > 0.0) {
            return Err(DeviceError::Config("clock and internode bandwidth must be positive".into()));
        }
        let ints = [
            ("interface_bytes_per_cycle", self.interface_bytes_per_cycle),
            ("row_activate_cycles", self.row_activate_cycles),
            ("epu_cycles_per_element", self.epu_cycles_per_element),
            ("epu_lanes", self.epu_lanes),
            ("dispatch_cycles_per_cmd", self.dispatch_cycles_per_cmd),
            ("host_sync_cycles", self.host_sync_cycles),
        ];
        for (name, v) in ints {
            if v == 0 {
                return Err(DeviceError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("row {row} out of range (rows per bank {limit})")]
    RowOutOfRange { row: u32, limit: u32 },
    #[error("columns {col}..{end} exceed {limit} elements")]
    ColOutOfRange { col: u32, end: u32, limit: u32 },
    #[error("global buffer overflow: {end} elements > {limit}")]
    GbOverflow { end: u32, limit: u32 },
    #[error("channel range {lo}..{hi} exceeds {limit} channels")]
    ChannelOutOfRange { lo: u32, hi: u32, limit: u32 },
    #[error("GPR entry {0} holds no input")]
    MissingInput(u32),
    #[error("out-registers read before any DOT_PROD")]
    OutRegUnwritten,
    #[error("GPR capacity exceeded: {needed} bytes > {limit}")]
    GprOverflow { needed: u64, limit: u64 },
    #[error("EPU {kind}: operand lengths {lens:?} do not match")]
    LengthMismatch { kind: &'static str, lens: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_module() {
        let t = PimTopology::default();
        assert_eq!(t.pus(), 256);
        assert_eq!(t.elems_per_row(), 1024);
        assert_eq!(t.module_capacity_bytes(), 8 << 30);
        let tp = TimingParams::default();
        assert_eq!(tp.mac_cycles_per_row(&t), 64);
        assert_eq!(tp.peak_flops_per_pu(&t), 32e9);
        assert_eq!(tp.internode_bytes_per_cycle(), 10.0);
        t.validate().unwrap();
        tp.validate().unwrap();
    }

    #[test]
    fn zero_fields_rejected() {
        let t = PimTopology { mac_width: 0, ..Default::default() };
        assert!(t.validate().is_err());
        let tp = TimingParams { host_sync_cycles: 0, ..Default::default() };
        assert!(tp.validate().is_err());
    }
}
