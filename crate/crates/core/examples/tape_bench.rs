//! Rough throughput probe for the autodiff tape: an MLP-shaped workload of
//! dot products plus a backward sweep, sized like one scene forward pass.

use riskforge_core::diff::Tape;
use std::time::Instant;

fn main() {
    let mut tape = Tape::<f64>::new();
    let layer_in = 132usize;
    let layer_out = 64usize;
    let repeats = 200usize; // ~ edges * layers in a mid-size scene

    let start = Instant::now();
    let mut total_nodes = 0usize;
    let mut acc = 0.0f64;
    for _ in 0..20 {
        tape.reset();
        let w: Vec<_> = (0..layer_in * layer_out)
            .map(|i| tape.input(0.01 * (i % 97) as f64))
            .collect();
        let x: Vec<_> = (0..layer_in).map(|i| tape.input(0.1 * (i % 13) as f64)).collect();
        let mut outs = Vec::new();
        for _ in 0..repeats {
            for o in 0..layer_out {
                let row = &w[o * layer_in..(o + 1) * layer_in];
                let d = tape.dot(row, &x);
                outs.push(tape.tanh(d));
            }
        }
        let s = tape.sum_set(&outs);
        let g = tape.backward(s);
        acc += g.wrt(w[0]);
        total_nodes += tape.len();
    }
    let dt = start.elapsed();
    let flops = 20.0 * (repeats * layer_out * layer_in * 2) as f64;
    println!(
        "nodes/build: {}  wall: {:?}  eff GFLOP/s: {:.2}  (sink {acc:.3e})",
        total_nodes / 20,
        dt / 20,
        flops / dt.as_secs_f64() / 1e9
    );
}
