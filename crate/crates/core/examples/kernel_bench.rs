use egru_lm::math::{dense_matvec, matvec_fast, DenseMatrix, Real};
use egru_lm::Rng;
use std::time::Instant;

fn main() {
    let mut rng = Rng::new(1);
    let rows = 128;
    let cols = 256;
    let mut w = DenseMatrix::zeros(rows, cols);
    rng.fill_uniform(&mut w.data, -0.1, 0.1);
    let mut x = vec![0.0f32; cols];
    rng.fill_uniform(&mut x, -1.0, 1.0);

    let iters = 40_000;
    let t = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        sink += matvec_fast(&w, &x)[0];
    }
    let dt = t.elapsed().as_secs_f64();
    let gf = (iters as f64 * rows as f64 * cols as f64 * 2.0) / dt / 1e9;
    println!("fast:   {gf:.2} GFLOP/s (sink {sink})");

    let t = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        sink += dense_matvec(&w, &x)[0];
    }
    let dt = t.elapsed().as_secs_f64();
    let gf = (iters as f64 * rows as f64 * cols as f64 * 2.0) / dt / 1e9;
    println!("serial: {gf:.2} GFLOP/s (sink {sink})");

    let t = Instant::now();
    let mut grad = DenseMatrix::zeros(rows, cols);
    for _ in 0..iters {
        let g = vec![0.5f32; rows];
        <f32 as Real>::outer_acc(&mut grad, &g, &x);
    }
    let dt = t.elapsed().as_secs_f64();
    let gf = (iters as f64 * rows as f64 * cols as f64 * 2.0) / dt / 1e9;
    println!("outer:  {gf:.2} GFLOP/s (sink {})", grad.data[7]);
}
