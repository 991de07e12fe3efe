use std::time::Instant;
use afrd_core::tensor::conv::{conv2d_forward, conv2d_backward};
fn main() {
    // plain axpy throughput reference
    let n = 1 << 16;
    let x = vec![1.0f32; n];
    let mut o = vec![0.0f32; n];
    let t = Instant::now();
    let iters = 20000;
    for i in 0..iters {
        let w = (i % 3) as f32 * 0.5;
        for (ov, xv) in o.iter_mut().zip(&x) { *ov += w * *xv; }
    }
    let el = t.elapsed().as_secs_f64();
    println!("axpy: {:.2} GFLOP/s", 2.0 * n as f64 * iters as f64 / el / 1e9);

    // head conv: b8 ci256 co256 h4 k3 s1 p1
    let (b, ci, co, h, k) = (8usize, 256usize, 256usize, 4usize, 3usize);
    let x = vec![0.5f32; b*ci*h*h];
    let w = vec![0.01f32; co*ci*k*k];
    let bias = vec![0.0f32; co];
    let mut out = vec![0.0f32; b*co*h*h];
    let t = Instant::now();
    let iters = 50;
    for _ in 0..iters {
        conv2d_forward(&x, &w, &bias, &mut out, (b, ci, h, h), (co, k, k), 1, 1);
    }
    let el = t.elapsed().as_secs_f64() / iters as f64;
    let macs = (b*co*ci*k*k*h*h) as f64;
    println!("head fwd: {:.2} ms, {:.2} GFLOP/s", el*1e3, 2.0*macs/el/1e9);

    let g = vec![0.1f32; b*co*h*h];
    let mut dx = vec![0.0f32; b*ci*h*h];
    let mut dw = vec![0.0f32; co*ci*k*k];
    let mut db = vec![0.0f32; co];
    let t = Instant::now();
    for _ in 0..iters {
        conv2d_backward(&x, &w, &g, &mut dx, &mut dw, &mut db, (b, ci, h, h), (co, k, k), 1, 1);
    }
    let el = t.elapsed().as_secs_f64() / iters as f64;
    println!("head bwd: {:.2} ms, {:.2} GFLOP/s", el*1e3, 2.0*2.0*macs/el/1e9);

    // up0conv: ci64 co64 h16
    let (ci, co, h) = (64usize, 64usize, 16usize);
    let x = vec![0.5f32; b*ci*h*h];
    let w = vec![0.01f32; co*ci*k*k];
    let bias = vec![0.0f32; co];
    let mut out = vec![0.0f32; b*co*h*h];
    let t = Instant::now();
    for _ in 0..iters {
        conv2d_forward(&x, &w, &bias, &mut out, (b, ci, h, h), (co, k, k), 1, 1);
    }
    let el = t.elapsed().as_secs_f64() / iters as f64;
    let macs = (b*co*ci*k*k*h*h) as f64;
    println!("up0 fwd: {:.2} ms, {:.2} GFLOP/s", el*1e3, 2.0*macs/el/1e9);
}
