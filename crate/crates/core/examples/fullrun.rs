use afrd_core::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let fusion: FusionMode = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(FusionMode::Attention);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    if !tmp.join("index.csv").exists() {
        let spec = afrd_core::data::SceneSpec { seed: 42, ..Default::default() };
        let t0 = Instant::now();
        afrd_core::data::generate(&spec, 150, 30, 30, &tmp).unwrap();
        println!("generated in {:?}", t0.elapsed());
    }
    let (train, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let cfg = TrainConfig { epochs, seed, ..Default::default() };
    let t1 = Instant::now();
    let eval = afrd_core::pipeline::run_variant(&train, &test, 6, 64, fusion, &cfg, 4.0).unwrap();
    println!("fusion={fusion} seed={seed} epochs={epochs} in {:?}: i_auroc {:.4} p_auroc {:?}", t1.elapsed(), eval.i_auroc, eval.p_auroc);
}
