use afrd_core::*;

fn main() {
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let (train, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let cfg = TrainConfig { epochs: 20, seed: 0, ..Default::default() };
    let (model, _) = afrd_core::pipeline::train_model(&train, 6, 64, FusionMode::Attention, &cfg).unwrap();

    // distill loss on a training sample, train-mode vs eval-mode BN
    for (name, train_bn) in [("train-bn", true), ("eval-bn", false)] {
        let set = &train[0];
        let feats = model.teacher_forward(set).unwrap();
        let (fused, _) = model.fuse(&feats).unwrap();
        let emb = model.bottleneck_forward(&fused, train_bn).unwrap();
        let dec = model.student_forward(&emb, train_bn).unwrap();
        let mut loss = 0.0;
        for l in 0..3 {
            let c = fused.levels[l].cosine_map(&dec.levels[l], 1e-8).unwrap();
            let m = c.mean_all().item();
            loss += 1.0 - m as f64;
        }
        println!("{name}: train-sample distill loss {loss:.4}");
    }
    // raw (unsmoothed would need internals) smoothed scores on test samples
    for set in test.iter().take(4).chain(test.iter().rev().take(4)) {
        let r = afrd_core::score::score(&model, set, 4.0).unwrap();
        let mmax = r.map.iter().cloned().fold(f64::MIN, f64::max);
        let mmean = r.map.iter().sum::<f64>() / r.map.len() as f64;
        // in-mask vs out-mask mean for anomalous
        let inout = set.mask.as_ref().map(|m| {
            let (mut mi, mut ni, mut mo, mut no) = (0.0, 0usize, 0.0, 0usize);
            for (v, mk) in r.map.iter().zip(m) {
                if *mk != 0 { mi += v; ni += 1; } else { mo += v; no += 1; }
            }
            (mi / ni.max(1) as f64, mo / no.max(1) as f64)
        });
        println!("{} label={:?} max={mmax:.4} mean={mmean:.4} inout={inout:?}", set.sample_id, set.label);
    }
}
