use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PimTopology, TimingParams};
use crate::isa::PimCommand;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Serial,
    PingPong,
}

/// Per-phase cycle totals. `mac` includes row activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    #[serde(rename = "DT-GB")]
    pub dt_gb: u64,
    #[serde(rename = "DT-Out")]
    pub dt_out: u64,
    #[serde(rename = "MAC")]
    pub mac: u64,
    #[serde(rename = "EPU")]
    pub epu: u64,
    pub activate: u64,
    /// Element multiply-accumulates performed, summed over PUs.
    pub macs: u64,
}

impl Breakdown {
    pub fn transfer(&self) -> u64 {
        self.dt_gb + self.dt_out
    }

    pub fn add(&mut self, o: &Breakdown) {
        self.dt_gb += o.dt_gb;
        self.dt_out += o.dt_out;
        self.mac += o.mac;
        self.epu += o.epu;
        self.activate += o.activate;
        self.macs += o.macs;
    }

    pub fn scaled(&self, k: u64) -> Breakdown {
        Breakdown {
            dt_gb: self.dt_gb * k,
            dt_out: self.dt_out * k,
            mac: self.mac * k,
            epu: self.epu * k,
            activate: self.activate * k,
            macs: self.macs * k,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecReport {
    pub cycles: u64,
    pub commands: u64,
    pub breakdown: Breakdown,
}

/// Cycle model of a command sequence on one module.
///
/// Serial mode runs commands back to back. Ping-pong mode runs compute (row
/// activation and MAC) and transfers (WR_INP, RD_OUT) on separate streams:
/// a WR_INP fills the idle GB while DOT_PRODs read the live one, and the
/// out-register pair lets the next group accumulate while the previous one
/// drains. Transfers take the earliest idle window of the interface after
/// their dependencies resolve, so a prefetch may overtake a pending readout.
/// Once a WR_INP is placed, the next one is booked right away: its buffer's
/// readers all precede it. Command k is never issued before
/// `k * dispatch_cycles_per_cmd`.
///
/// `wr_bytes` is called once per WR_INP, in order, with its GPR index.
pub fn time_commands(
    cmds: &[PimCommand],
    topo: &PimTopology,
    timing: &TimingParams,
    mode: ExecMode,
    mut wr_bytes: impl FnMut(u32) -> u64,
) -> ExecReport {
    let mut bd = Breakdown::default();
    let rd_cost = timing.io_cycles(topo.pus() as u64 * topo.element_bytes as u64);
    let act = timing.row_activate_cycles as u64;
    let dispatch = timing.dispatch_cycles_per_cmd as u64;

    let mut open_row: Option<u32> = None;
    let mut serial_t = 0u64;
    let mut compute_free = 0u64;
    let mut io = Interface::default();
    let mut live = 0usize;
    let mut gb_ready = [0u64; 2];
    let mut last_read = [0u64; 2];
    let mut slot_free = [0u64; 2];
    let mut group = 0usize;
    let mut group_end = 0u64;
    let mut end_max = 0u64;
    let wr_pos: Vec<usize> =
        cmds.iter().enumerate().filter(|(_, c)| matches!(c, PimCommand::WrInp { .. })).map(|(k, _)| k).collect();
    let wr_sizes: Vec<u64> = wr_pos
        .iter()
        .map(|&k| match cmds[k] {
            PimCommand::WrInp { gpr } => wr_bytes(gpr),
            _ => unreachable!(),
        })
        .collect();
    let mut next_wr = 0usize;
    let mut prebooked: Option<(u64, u64)> = None;

    for (k, cmd) in cmds.iter().enumerate() {
        let issue = k as u64 * dispatch;
        let end = match *cmd {
            PimCommand::DotProd { row, width, .. } => {
                let a = if open_row != Some(row) { act } else { 0 };
                open_row = Some(row);
                let m = topo.mac_cycles(width);
                bd.activate += a;
                bd.mac += a + m;
                bd.macs += width as u64 * topo.pus() as u64;
                let start = match mode {
                    ExecMode::Serial => serial_t.max(issue),
                    ExecMode::PingPong => compute_free.max(issue).max(gb_ready[live]).max(slot_free[group % 2]),
                };
                let end = start + a + m;
                compute_free = end;
                last_read[live] = end;
                group_end = end;
                end
            }
            PimCommand::RdOut { .. } => {
                bd.dt_out += rd_cost;
                let start = match mode {
                    ExecMode::Serial => serial_t.max(issue),
                    ExecMode::PingPong => io.book(issue.max(group_end), rd_cost),
                };
                let end = start + rd_cost;
                slot_free[group % 2] = end;
                group += 1;
                end
            }
            PimCommand::WrInp { .. } => {
                let (start, cost) = match mode {
                    ExecMode::Serial => {
                        let cost = timing.io_cycles(wr_sizes[next_wr]);
                        (serial_t.max(issue), cost)
                    }
                    ExecMode::PingPong => match prebooked.take() {
                        Some(b) => b,
                        None => {
                            let cost = timing.io_cycles(wr_sizes[next_wr]);
                            (io.book(issue.max(last_read[1 - live]).max(gb_ready[live]), cost), cost)
                        }
                    },
                };
                next_wr += 1;
                bd.dt_gb += cost;
                let idle = 1 - live;
                let end = start + cost;
                gb_ready[idle] = end;
                live = idle;
                // The following WR_INP targets the buffer whose readers are all
                // issued by now, so the controller can prefetch it immediately.
                if mode == ExecMode::PingPong {
                    if let Some(&k2) = wr_pos.get(next_wr) {
                        let cost = timing.io_cycles(wr_sizes[next_wr]);
                        let ready = (k2 as u64 * dispatch).max(last_read[1 - live]).max(gb_ready[live]);
                        prebooked = Some((io.book(ready, cost), cost));
                    }
                }
                end
            }
        };
        serial_t = end;
        end_max = end_max.max(end);
    }
    ExecReport { cycles: end_max, commands: cmds.len() as u64, breakdown: bd }
}

/// Busy windows of the host interface, merged when adjacent.
#[derive(Default)]
struct Interface {
    busy: BTreeMap<u64, u64>,
}

impl Interface {
    /// Reserves `len` cycles at the earliest start >= `ready`; returns the start.
    fn book(&mut self, ready: u64, len: u64) -> u64 {
        let mut t = ready;
        if let Some((_, &e)) = self.busy.range(..=t).next_back() {
            t = t.max(e);
        }
        for (&s, &e) in self.busy.range(t..) {
            if s >= t + len {
                break;
            }
            t = t.max(e);
        }
        let mut start = t;
        let mut end = t + len;
        if let Some((&s, &e)) = self.busy.range(..=start).next_back() {
            if e == start {
                start = s;
                self.busy.remove(&s);
            }
        }
        if let Some(e) = self.busy.remove(&end) {
            end = e;
        }
        self.busy.insert(start, end);
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cmds: &[PimCommand], mode: ExecMode) -> ExecReport {
        time_commands(cmds, &PimTopology::default(), &TimingParams::default(), mode, |_| 2048)
    }

    #[test]
    fn serial_sums_phases() {
        let cmds = [
            PimCommand::WrInp { gpr: 0 },
            PimCommand::DotProd { row: 0, col: 0, width: 1024 },
            PimCommand::DotProd { row: 0, col: 0, width: 1024 },
            PimCommand::RdOut { gpr: 1 },
        ];
        let r = run(&cmds, ExecMode::Serial);
        assert_eq!(r.breakdown.dt_gb, 32 + 4);
        assert_eq!(r.breakdown.mac, 20 + 64 + 64);
        assert_eq!(r.breakdown.dt_out, 8 + 4);
        assert_eq!(r.cycles, 36 + 148 + 12);
    }

    #[test]
    fn pingpong_overlaps_transfer_with_compute() {
        let mut cmds = Vec::new();
        for s in 0..8 {
            cmds.push(PimCommand::WrInp { gpr: s });
            cmds.push(PimCommand::DotProd { row: s, col: 0, width: 1024 });
            cmds.push(PimCommand::RdOut { gpr: 100 + s });
        }
        let serial = run(&cmds, ExecMode::Serial);
        let pp = run(&cmds, ExecMode::PingPong);
        assert_eq!(serial.breakdown, pp.breakdown);
        assert!(pp.cycles < serial.cycles);
        let b = pp.breakdown;
        assert!(pp.cycles >= b.mac.max(b.transfer()));
    }

    #[test]
    fn interface_fills_gaps() {
        let mut io = Interface::default();
        assert_eq!(io.book(10, 5), 10);
        assert_eq!(io.book(0, 4), 0);
        assert_eq!(io.book(0, 7), 15);
        assert_eq!(io.book(4, 6), 4);
        assert_eq!(io.busy.len(), 1);
        assert_eq!(io.busy[&0], 22);
    }
}
