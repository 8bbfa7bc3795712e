//! Randomized invariant suites shared by the property tests and the
//! acceptance run. Each suite runs on a fixed-seed runner.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pimsim::compiler::{AttnLayout, FcLayout};
use pimsim::device::{ModuleState, PimTopology, TimingParams};
use pimsim::dispatcher::Va2PaTable;
use pimsim::harness::{gen_trace, Config, LenStats, ModelSpec, OutLenModel, TraceSpec};
use pimsim::isa::{
    deserialize, from_text, serialize, to_text, CommandStack, DpaCommand, Entry, Field, LoopBound, OpKind, PimCommand,
    StackMeta,
};
use pimsim::memmgr::{AllocConfig, AllocPolicy, AllocatorState};
use pimsim::model::Matrix;
use pimsim::plan::{Features, ParallelismPlan};
use pimsim::request::Request;
use pimsim::scheduler::{simulate, SimConfig};

pub const CASES: u32 = 1000;

pub type Suite = (&'static str, fn(u32) -> Result<(), String>);

pub const SUITES: [Suite; 6] = [
    ("row conservation", row_conservation),
    ("va2pa consistency", va2pa_consistency),
    ("ping-pong semantic equality", pingpong_equality),
    ("placement coverage and disjointness", placement),
    ("serialization round trip", serialization),
    ("determinism under fixed seed", determinism),
];

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let cfg = RunnerConfig { cases, failure_persistence: None, ..RunnerConfig::default() };
    let mut runner = TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Admit(u32, u32),
    Grow(u32),
    Release(u32),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u32..6, 1u32..300).prop_map(|(id, l)| Op::Admit(id, l)),
        (0u32..6).prop_map(Op::Grow),
        (0u32..6).prop_map(Op::Release),
    ]
}

/// Free plus held chunks always equal the pool, where held is what each
/// live request should own under its policy.
pub fn row_conservation(cases: u32) -> Result<(), String> {
    let s = (any::<bool>(), 4u32..48, 1u32..16, 16u32..256, proptest::collection::vec(op(), 1..80));
    run(cases, s, |(lazy, total, tb, max_ctl, ops)| {
        let policy = if lazy { AllocPolicy::Lazy } else { AllocPolicy::StaticMax };
        let mut a = AllocatorState::new(AllocConfig::new(policy, total, tb, max_ctl));
        let mut model: BTreeMap<u32, u32> = BTreeMap::new();
        let held = |t: u32| if lazy { t.div_ceil(tb) } else { max_ctl.div_ceil(tb) };
        for op in ops {
            match op {
                Op::Admit(id, l) => {
                    let l = l.min(max_ctl);
                    if a.admit(&Request::new(id, l, 1)).is_ok() {
                        prop_assert!(model.insert(id, l).is_none());
                    }
                }
                Op::Grow(id) => {
                    if let Some(t) = model.get_mut(&id) {
                        if a.grow(id, *t + 1).is_ok() {
                            *t += 1;
                        }
                    } else {
                        prop_assert!(a.grow(id, 1).is_err());
                    }
                }
                Op::Release(id) => match model.remove(&id) {
                    Some(t) => prop_assert_eq!(a.release(id).unwrap(), held(t)),
                    None => prop_assert!(a.release(id).is_err()),
                },
            }
            let live: u32 = model.values().map(|&t| held(t)).sum();
            prop_assert_eq!(a.free_chunks() + live, total);
            prop_assert_eq!(a.live_requests(), model.len());
            prop_assert!(a.check_invariants().is_ok());
        }
        Ok(())
    })
}

/// Translation follows the paging rule and never maps two requests to one row.
pub fn va2pa_consistency(cases: u32) -> Result<(), String> {
    let perm = Just((0u32..64).collect::<Vec<_>>()).prop_shuffle();
    let s = (1u32..8, 0u32..100, proptest::collection::vec(0usize..8, 1..6), perm);
    run(cases, s, |(rpc, base, counts, perm)| {
        let mut t = Va2PaTable::with_budget(rpc, base, usize::MAX);
        let mut owned: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut next = perm.iter();
        for (req, &n) in counts.iter().enumerate() {
            let req = req as u32;
            for _ in 0..n {
                let pa = *next.next().unwrap();
                t.push_chunk(req, pa).map_err(|e| TestCaseError::fail(e.to_string()))?;
                owned.entry(req).or_default().push(pa);
            }
        }
        let mut rows = BTreeSet::new();
        for (&req, chunks) in &owned {
            prop_assert_eq!(t.chunks(req), Some(chunks.as_slice()));
            let n = chunks.len() as u64 * rpc as u64;
            for va in 0..n {
                let want = base + chunks[(va / rpc as u64) as usize] * rpc + (va % rpc as u64) as u32;
                prop_assert_eq!(t.translate(req, va).unwrap(), want);
                prop_assert!(rows.insert(want));
            }
            prop_assert!(t.translate(req, n).is_err());
        }
        for (&req, chunks) in &owned {
            prop_assert_eq!(&t.release(req).unwrap(), chunks);
            prop_assert!(t.translate(req, 0).is_err());
        }
        Ok(())
    })
}

fn run_gemv(layout: &FcLayout, m: &Matrix, x: &[f32], pingpong: bool) -> (Vec<f32>, u64) {
    let topo = PimTopology::toy();
    let mut s = ModuleState::new(topo, pingpong);
    layout.write(m, &mut s).unwrap();
    for (gpr, segs) in layout.inputs(x, topo.channels) {
        s.set_input(gpr, segs).unwrap();
    }
    let r = s.execute(&layout.commands(), &TimingParams::default()).unwrap();
    (layout.gather(&mut s).unwrap(), r.cycles)
}

/// Double-buffered execution yields the same values as serial execution,
/// never takes longer, and both match a dense matrix-vector product.
pub fn pingpong_equality(cases: u32) -> Result<(), String> {
    let s = (1u32..40, 1u32..40, any::<u64>());
    run(cases, s, |(rows, cols, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::random(rows as usize, cols as usize, &mut rng);
        let x: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let layout = FcLayout::new(rows, cols, 3, &PimTopology::toy());
        let (serial, sc) = run_gemv(&layout, &m, &x, false);
        let (pp, pc) = run_gemv(&layout, &m, &x, true);
        prop_assert_eq!(&serial, &pp);
        prop_assert!(pc <= sc);
        for (r, &y) in serial.iter().enumerate() {
            let want: f64 = m.row(r).iter().zip(&x).map(|(&a, &b)| a as f64 * b as f64).sum();
            prop_assert!((y as f64 - want).abs() <= 1e-4 * want.abs().max(1.0));
        }
        Ok(())
    })
}

/// Every K element and V element of every token lands in a distinct cell of
/// its own layer and chunk; every FC weight segment gets its own row and PU.
pub fn placement(cases: u32) -> Result<(), String> {
    let topo = PimTopology::toy();
    let s = (1u32..5, 1u32..5, 1u32..4, 1u32..4, 0u32..20, any::<bool>(), 1u32..48, 1u32..48);
    run(cases, s, move |(kv_local, dh_units, gsz, layers, base, packed, rows, cols)| {
        let d_h = dh_units * topo.banks_per_channel;
        let tpr = if packed { None } else { Some(topo.pus()) };
        let l = match AttnLayout::for_heads(kv_local, d_h, gsz, layers, &topo, tpr, base) {
            Ok(l) => l,
            Err(_) => return Ok(()),
        };
        let width = topo.elems_per_row();
        let per_layer = l.krows + l.vrows;
        let tokens = 2 * l.tb + 1;
        let mut cells = BTreeSet::new();
        for layer in 0..layers {
            for tau in 0..tokens {
                let b = tau / l.tb;
                let lo = b * l.rows_per_chunk + layer * per_layer;
                for h in 0..kv_local {
                    let (va, pu, col) = l.k_slot(layer, tau, h);
                    prop_assert!((lo..lo + l.krows).contains(&va) && pu < l.pus && col + d_h <= width);
                    for i in 0..d_h {
                        prop_assert!(cells.insert((va, pu, col + i)));
                    }
                    for i in 0..d_h {
                        let (va, pu, col) = l.v_slot(layer, tau, h, i);
                        prop_assert!((lo + l.krows..lo + per_layer).contains(&va) && pu < l.pus && col < width);
                        prop_assert!(cells.insert((va, pu, col)));
                    }
                }
            }
        }
        prop_assert_eq!(cells.len() as u32, layers * tokens * kv_local * d_h * 2);
        let fc = FcLayout::new(rows, cols, base, &topo);
        let mut slots = BTreeSet::new();
        for r in 0..rows {
            for s in 0..fc.segs {
                prop_assert!(slots.insert((fc.base + (r / fc.pus) * fc.segs + s, r % fc.pus)));
            }
        }
        let covered: u32 = (0..fc.segs).map(|s| fc.seg_width(s)).sum();
        prop_assert_eq!(covered, cols);
        prop_assert!(slots.iter().all(|&(row, _)| row >= base && row < fc.end()));
        Ok(())
    })
}

fn pim() -> impl Strategy<Value = PimCommand> {
    prop_oneof![
        any::<u32>().prop_map(|gpr| PimCommand::WrInp { gpr }),
        (any::<u32>(), any::<u32>(), any::<u32>()).prop_map(|(row, col, width)| PimCommand::DotProd {
            row,
            col,
            width
        }),
        any::<u32>().prop_map(|gpr| PimCommand::RdOut { gpr }),
    ]
}

fn entry() -> impl Strategy<Value = Entry> {
    prop_oneof![
        4 => pim().prop_map(Entry::Pim),
        1 => (prop_oneof![(1u32..1000).prop_map(LoopBound::Fixed), Just(LoopBound::TokenRows)], 1u32..50)
            .prop_map(|(bound, entry)| Entry::Dpa(DpaCommand::DynLoop { bound, entry })),
        1 => (prop_oneof![Just(Field::Row), Just(Field::Col), Just(Field::Gpr)], any::<i32>())
            .prop_map(|(target, coefficient)| Entry::Dpa(DpaCommand::DynModi { target, coefficient })),
    ]
}

/// Binary and text encodings of command stacks, and JSON configurations,
/// decode to what was encoded.
pub fn serialization(cases: u32) -> Result<(), String> {
    let meta = (any::<u32>(), 0usize..OpKind::ALL.len(), any::<u32>()).prop_map(|(layer, op, module)| StackMeta {
        layer,
        op: OpKind::ALL[op],
        module,
    });
    let cfg = (1u32..64, 1u32..64, 0u32..8, any::<[bool; 3]>(), 0u32..100_000, 1u32..10_000, any::<u64>());
    let s = (meta, proptest::collection::vec(pim(), 0..40), proptest::collection::vec(entry(), 0..60), cfg);
    run(cases, s, |(meta, cmds, entries, (tp, pp, b_mu, f, sync, n, seed))| {
        let concrete = CommandStack::from_commands(meta, cmds);
        let raw = CommandStack { meta, entries };
        for stack in [&concrete, &raw] {
            prop_assert_eq!(&deserialize(&serialize(stack)).unwrap(), stack);
        }
        prop_assert_eq!(&from_text(&to_text(&concrete)).unwrap(), &concrete);
        let mut c = Config {
            model: ModelSpec::Preset(["qwen-7b", "qwen-14b", "toy"][(seed % 3) as usize].into()),
            plan: ParallelismPlan { tp, pp, b_mu },
            features: Features { itpp: f[0], dpa: f[1], pingpong: f[2] },
            trace: TraceSpec::Synth {
                stats: LenStats::HOTPOTQA,
                n_requests: n,
                out_len: OutLenModel::Fixed { k: n },
                seed,
            },
            ..Config::default()
        };
        c.timing.host_sync_cycles = sync;
        prop_assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        Ok(())
    })
}

/// The same seed gives the same trace and the same simulation report.
pub fn determinism(cases: u32) -> Result<(), String> {
    let s = (any::<u64>(), 1u32..5, 1u32..6, 1u32..3);
    run(cases, s, |(seed, n, out, pp)| {
        let spec = TraceSpec::Synth {
            stats: LenStats { mean: 1500.0, std: 700.0, min: 16, max: 4000 },
            n_requests: n,
            out_len: OutLenModel::Uniform { lo: 1, hi: out },
            seed,
        };
        let a = gen_trace(&spec).unwrap();
        prop_assert_eq!(&a, &gen_trace(&spec).unwrap());
        let cfg = SimConfig {
            model: pimsim::model::ModelConfig::preset("qwen-1.8b").unwrap(),
            topo: PimTopology::default().with_nodes(1),
            plan: ParallelismPlan::new(2, pp),
            record_timeline: true,
            ..SimConfig::default()
        };
        let (t1, r1) = simulate(&a, &cfg).unwrap();
        let (t2, r2) = simulate(&a, &cfg).unwrap();
        prop_assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        prop_assert_eq!(t1, t2);
        Ok(())
    })
}
