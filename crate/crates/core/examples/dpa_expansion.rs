//! Expands a dynamic score stack for a request whose KV lives in two
//! non-adjacent chunks, then prints the stack and the concrete commands.

use pimsim::dispatcher::{compute_loop_bound, expand, ConfigBuffer, Va2PaTable};
use pimsim::isa::{command_text, sample_score_stack, serialize, to_text, LoopBound};

fn main() {
    let stack = sample_score_stack(LoopBound::TokenRows);
    println!("stack ({} bytes encoded):\n{}", serialize(&stack).len(), to_text(&stack));

    let mut table = Va2PaTable::new(1, 0);
    table.push_chunk(1, 22).unwrap();
    table.push_chunk(2, 33).unwrap();
    table.push_chunk(2, 34).unwrap();
    let mut cfg = ConfigBuffer::new(1, 256);
    cfg.add(2, 300);

    println!("loop bound for 300 tokens at 256 per row: {}", compute_loop_bound(300, 256));
    for c in expand(&stack, &cfg, &table, 2).unwrap() {
        println!("  {}", command_text(&c, &[]));
    }
}
