//! Compiles the toy model for a two-stage pipeline, decodes a few tokens on
//! the functional runtime and checks them against the dense reference.

use pimsim::compiler::{compile, DecoderGraph};
use pimsim::device::{PimTopology, TimingParams};
use pimsim::model::{prefill_cache, reference_step, step_input, ModelConfig, Weights};
use pimsim::plan::ParallelismPlan;
use pimsim::runtime::Runtime;

fn main() {
    let m = ModelConfig::toy();
    let topo = PimTopology::toy();
    let c = compile(&DecoderGraph::from_model(&m), ParallelismPlan::new(1, 2), &topo, None).unwrap();
    for (i, module) in c.modules.iter().enumerate() {
        println!(
            "module {i}: {} local layers, {} attention stacks, {} kv chunks",
            module.attn.layers,
            module.attn_stacks.len(),
            module.manifest.kv.chunks
        );
    }

    let w = Weights::random(&m, 7);
    let mut rt = Runtime::new(&c, &w, topo, TimingParams::default(), true).unwrap();
    let mut cache = prefill_cache(&m, 6, 7);
    rt.admit(0, &cache).unwrap();
    for step in 0..4 {
        let x = step_input(&m, 7, 0, step);
        let want = reference_step(&m, &w, &mut cache, &x);
        let got = rt.step(0, &x).unwrap();
        let err = got.iter().zip(&want).map(|(g, r)| (g - r).abs()).fold(0f32, f32::max);
        println!("step {step}: {} tokens cached, max abs error {err:.2e}", rt.tokens(0).unwrap());
    }
}
