//! Rough single-core throughput check for the conv kernels.

use dptta_core::tensor::ops;
use std::time::Instant;

fn bench(name: &str, b: usize, ci: usize, co: usize, h: usize, w: usize, d: usize, reps: usize) {
    let x = vec![0.5f32; b * ci * h * w];
    let wt = vec![0.01f32; co * ci * 9];
    let bias = vec![0.0f32; co];
    let mut out = vec![0.0f32; b * co * h * w];
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; wt.len()];
    let mut db = vec![0.0f32; co];
    let dy = vec![1.0f32; out.len()];

    let t0 = Instant::now();
    for _ in 0..reps {
        ops::conv2d_fwd(&x, [b, ci, h, w], &wt, [co, ci, 3, 3], &bias, d, true, &mut out).unwrap();
    }
    let fwd_s = t0.elapsed().as_secs_f64();
    // Interior MACs only (edges do less work); 2 flops per MAC.
    let flops = (reps * b * co * ci * 9 * h * w) as f64 * 2.0;
    let fwd_gfs = flops / fwd_s / 1e9;

    let t1 = Instant::now();
    for _ in 0..reps {
        ops::conv2d_bwd(
            &x,
            [b, ci, h, w],
            &wt,
            [co, ci, 3, 3],
            d,
            true,
            &out,
            &dy,
            Some(&mut dx),
            &mut dw,
            &mut db,
        );
    }
    let bwd_s = t1.elapsed().as_secs_f64();
    let bwd_gfs = 2.0 * flops / bwd_s / 1e9;

    println!("{name}: fwd {fwd_gfs:.1} GF/s ({:.0} ms/rep) | bwd {bwd_gfs:.1} GF/s ({:.0} ms/rep)",
        fwd_s / reps as f64 * 1e3, bwd_s / reps as f64 * 1e3);
}

fn main() {
    bench("b64  8->8  30x30 d2", 64, 8, 8, 30, 30, 2, 40);
    bench("b64 32->32 15x15 d1", 64, 32, 32, 15, 15, 1, 40);
    bench("b64 16->16 30x30 d1", 64, 16, 16, 30, 30, 1, 20);
    bench("b64  8-> 4 30x30 d2", 64, 8, 4, 30, 30, 2, 40);
}
