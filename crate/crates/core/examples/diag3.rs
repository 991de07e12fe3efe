use afrd_core::*;

fn main() {
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let (train, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let cfg = TrainConfig { epochs: 20, seed: 0, ..Default::default() };
    let (model, _) = afrd_core::pipeline::train_model(&train, 6, 64, FusionMode::Attention, &cfg).unwrap();
    let mut mean_map = vec![0.0f64; 64 * 64];
    let mut n = 0;
    for set in test.iter().filter(|s| s.label == Label::Normal) {
        let r = afrd_core::score::score(&model, set, 4.0).unwrap();
        let (mut bi, mut bv) = (0, f64::MIN);
        for (i, v) in r.map.iter().enumerate() {
            if *v > bv { bv = *v; bi = i; }
            mean_map[i] += *v;
        }
        n += 1;
        if n <= 8 { println!("normal argmax at ({}, {}) = {:.3}", bi / 64, bi % 64, bv); }
    }
    // print 8x8 downsampled mean normal map
    println!("mean normal score map (8x8 blocks):");
    for by in 0..8 {
        let mut row = String::new();
        for bx in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 { for x in 0..8 {
                acc += mean_map[(by * 8 + y) * 64 + bx * 8 + x];
            }}
            row.push_str(&format!("{:6.3}", acc / 64.0 / n as f64));
        }
        println!("{row}");
    }
    for set in test.iter().filter(|s| s.label == Label::Anomalous).take(5) {
        let r = afrd_core::score::score(&model, set, 4.0).unwrap();
        let (mut bi, mut bv) = (0, f64::MIN);
        for (i, v) in r.map.iter().enumerate() { if *v > bv { bv = *v; bi = i; } }
        let in_mask = set.mask.as_ref().unwrap()[bi] != 0;
        println!("anom argmax at ({}, {}) = {:.3} in_mask={in_mask}", bi / 64, bi % 64, bv);
    }
}
