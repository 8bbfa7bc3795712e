use serde::{Deserialize, Serialize};

use super::{PimTopology, TimingParams};

/// Matrix-vector product `y[rows] = W[rows x cols] x[cols]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemvShape {
    pub rows: u32,
    pub cols: u32,
}

/// Closed-form serial cycle count for the row-sharded GEMV layout: output rows
/// are dealt round-robin over PUs, each PU row holds one input segment, the
/// input segment is rewritten only when it changes, and every output group ends
/// with one out-register readout.
pub fn analytic_cycles(shape: GemvShape, topo: &PimTopology, timing: &TimingParams) -> u64 {
    let p = topo.pus() as u64;
    let seg = topo.elems_per_row().min(topo.gb_elems()) as u64;
    let groups = (shape.rows as u64).div_ceil(p);
    let segs = (shape.cols as u64).div_ceil(seg);
    let last = shape.cols as u64 - (segs - 1) * seg;
    let eb = topo.element_bytes as u64;
    let copies = if timing.broadcast_per_channel { topo.channels as u64 } else { 1 };

    let seg_width = |s: u64| if s + 1 == segs { last } else { seg };
    let wr = |s: u64| timing.io_cycles(seg_width(s) * eb * copies);
    let mac_per_group: u64 = (0..segs).map(|s| seg_width(s).div_ceil(topo.mac_width as u64)).sum();

    let wr_total = if segs == 1 { wr(0) } else { groups * (0..segs).map(wr).sum::<u64>() };
    let act_total = groups * segs * timing.row_activate_cycles as u64;
    let rd_total = groups * timing.io_cycles(p * eb);
    wr_total + act_total + groups * mac_per_group + rd_total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row() {
        let t = PimTopology::default();
        let tp = TimingParams::default();
        let c = analytic_cycles(GemvShape { rows: 1, cols: 1024 }, &t, &tp);
        assert_eq!(c, (32 + 4) + 20 + 64 + (8 + 4));
    }
}
