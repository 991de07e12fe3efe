use afrd_core::*;

fn main() {
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let (train, _) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let cfg = TrainConfig { epochs: 5, seed: 0, ..Default::default() };
    let (_, report) = afrd_core::pipeline::train_model(&train, 6, 64, FusionMode::Attention, &cfg).unwrap();
    for (e, om) in report.epoch_omega.iter().enumerate() {
        println!("epoch {e}:");
        for (l, w) in om.iter().enumerate() {
            println!("  level {l}: {:?}", w.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
        }
    }
}
