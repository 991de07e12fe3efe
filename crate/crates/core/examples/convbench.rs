use std::time::Instant;
fn timeit(name: &str, iters: usize, mut f: impl FnMut()) -> f64 {
    let t = Instant::now();
    for _ in 0..iters { f(); }
    let s = t.elapsed().as_secs_f64() / iters as f64;
    println!("{name}: {:.3} ms/iter", s * 1e3);
    s
}
fn main() {
    use afrd_core::tensor::Tensor;
    let b = 8usize;
    // forward+backward of the whole decoder path at batch 8, via the graph
    let mk = |c: usize, h: usize| -> Tensor<f32> {
        Tensor::from_vec((0..b*c*h*h).map(|i| (i % 7) as f32 * 0.1).collect(), &[b, c, h, h]).unwrap()
    };
    let w = |co: usize, ci: usize, k: usize| -> Tensor<f32> {
        Tensor::param((0..co*ci*k*k).map(|i| (i % 5) as f32 * 0.01).collect(), &[co, ci, k, k]).unwrap()
    };
    let bias = |c: usize| Tensor::param(vec![0.0f32; c], &[c]).unwrap();

    // raw kernel timings at training shapes
    let shapes: Vec<(&str, usize, usize, usize, usize, usize, usize)> = vec![
        // name, ci, co, h, k, stride, pad
        ("down0a 64->128 @16 s2", 64, 128, 16, 3, 2, 1),
        ("down0b 128->256 @8 s2", 128, 256, 8, 3, 2, 1),
        ("head 256->256 @4 s1", 256, 256, 4, 3, 1, 1),
        ("up1conv 128->128 @8 s1", 128, 128, 8, 3, 1, 1),
        ("up0conv 64->64 @16 s1", 64, 64, 16, 3, 1, 1),
    ];
    let mut total = 0.0;
    for (name, ci, co, h, k, s, p) in shapes {
        let x = mk(ci, h);
        let wt = w(co, ci, k);
        let bt = bias(co);
        total += timeit(&format!("graph fwd+bwd {name}"), 20, || {
            let y = x.conv2d(&wt, &bt, s, p).unwrap();
            let l = y.mean_all();
            l.backward().unwrap();
        });
    }
    println!("sum of conv fwd+bwd paths: {:.3} ms/batch8 = {:.4} s/set", total*1e3, total/8.0);
}
