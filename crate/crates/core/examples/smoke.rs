use afrd_core::*;
use std::time::Instant;

fn main() {
    let tmp = std::path::PathBuf::from("/tmp/afrd_smoke");
    let _ = std::fs::remove_dir_all(&tmp);
    let spec = afrd_core::data::SceneSpec { seed: 7, ..Default::default() };
    let t0 = Instant::now();
    let index = afrd_core::data::generate(&spec, 12, 4, 4, &tmp).unwrap();
    println!("generated {} entries in {:?}", index.entries.len(), t0.elapsed());
    println!("tree hash {}", afrd_core::data::tree_hash(&tmp).unwrap());
    let (train, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    println!("train {} test {}", train.len(), test.len());
    let cfg = TrainConfig { epochs: 2, seed: 0, ..Default::default() };
    let t1 = Instant::now();
    let (model, report) = afrd_core::pipeline::train_model(&train, 6, 64, FusionMode::Attention, &cfg).unwrap();
    println!("trained 2 epochs in {:?}; losses {:?}", t1.elapsed(), report.epoch_loss);
    let t2 = Instant::now();
    let (eval, _) = afrd_core::pipeline::evaluate_model(&model, &test, 4.0).unwrap();
    println!("eval in {:?}: i_auroc {:.4} p_auroc {:?}", t2.elapsed(), eval.i_auroc, eval.p_auroc);
}
