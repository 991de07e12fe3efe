use afrd_core::*;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let (train, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let cfg = TrainConfig { epochs, seed: 0, ..Default::default() };
    let (model, rep) = afrd_core::pipeline::train_model(&train, 6, 64, FusionMode::Attention, &cfg).unwrap();
    println!("final loss {:.4}", rep.epoch_loss.last().unwrap());
    // per-level mean cos on 5 train + 5 normal-test + 5 anomalous-test sets
    let groups: Vec<(&str, Vec<&ImageSet<f32>>)> = vec![
        ("train", train.iter().take(5).collect()),
        ("test-norm", test.iter().filter(|s| s.label == Label::Normal).take(5).collect()),
        ("test-anom", test.iter().filter(|s| s.label == Label::Anomalous).take(5).collect()),
    ];
    for (name, sets) in groups {
        let mut per_level = [0.0f64; 3];
        // also per-level in-mask vs out-mask mean (1-cos), upsampled
        let mut inmask = [0.0f64; 3];
        let mut outmask = [0.0f64; 3];
        for set in &sets {
            let feats = model.teacher_forward(set).unwrap();
            let (fused, _) = model.fuse(&feats).unwrap();
            let emb = model.bottleneck_forward(&fused, false).unwrap();
            let dec = model.student_forward(&emb, false).unwrap();
            for l in 0..3 {
                let c = fused.levels[l].cosine_map(&dec.levels[l], 1e-8).unwrap();
                per_level[l] += c.mean_all().item() as f64 / sets.len() as f64;
                let up = c.reshape(&[1, 1, c.shape()[1], c.shape()[2]]).unwrap()
                    .bilinear_upsample(set.height, set.width).unwrap();
                let u = up.to_vec();
                if let Some(m) = &set.mask {
                    let (mut mi, mut ni, mut mo, mut no) = (0.0, 0, 0.0, 0);
                    for (v, mk) in u.iter().zip(m) {
                        if *mk != 0 { mi += 1.0 - *v as f64; ni += 1; } else { mo += 1.0 - *v as f64; no += 1; }
                    }
                    inmask[l] += mi / ni.max(1) as f64 / sets.len() as f64;
                    outmask[l] += mo / no.max(1) as f64 / sets.len() as f64;
                }
            }
        }
        println!("{name}: mean cos per level {:?}", per_level.map(|v| (v * 1e4).round() / 1e4));
        if name == "test-anom" {
            println!("  in-mask 1-cos {:?}", inmask.map(|v| (v * 1e4).round() / 1e4));
            println!("  out-mask 1-cos {:?}", outmask.map(|v| (v * 1e4).round() / 1e4));
        }
    }
}
