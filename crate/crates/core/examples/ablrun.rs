use afrd_core::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = args.get(1).map(|s| s.split(',').map(|t| t.parse().unwrap()).collect()).unwrap_or(vec![0]);
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let base = TrainConfig::default();
    let rows = afrd_core::pipeline::run_ablation::<f32>(&tmp, &base, &seeds, 4.0).unwrap();
    for r in &rows {
        println!("{:12} i_auroc {:.4} p_auroc {:?} per-seed {:?}", r.variant, r.i_auroc, r.p_auroc, r.per_seed_i_auroc);
    }
}
