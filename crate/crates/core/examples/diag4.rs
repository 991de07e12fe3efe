use afrd_core::*;

fn main() {
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let (train, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let cfg = TrainConfig { epochs: 20, seed: 0, ..Default::default() };
    let (model, _) = afrd_core::pipeline::train_model(&train, 6, 64, FusionMode::Attention, &cfg).unwrap();
    let sizes = [16usize, 8, 4];
    let mut acc: Vec<Vec<f64>> = sizes.iter().map(|s| vec![0.0; s * s]).collect();
    let mut tnorm: Vec<Vec<f64>> = sizes.iter().map(|s| vec![0.0; s * s]).collect();
    let mut snorm: Vec<Vec<f64>> = sizes.iter().map(|s| vec![0.0; s * s]).collect();
    let normals: Vec<_> = test.iter().filter(|s| s.label == Label::Normal).collect();
    for set in &normals {
        let feats = model.teacher_forward(set).unwrap();
        let (fused, _) = model.fuse(&feats).unwrap();
        let emb = model.bottleneck_forward(&fused, false).unwrap();
        let dec = model.student_forward(&emb, false).unwrap();
        for l in 0..3 {
            let c = fused.levels[l].cosine_map(&dec.levels[l], 1e-8).unwrap().to_vec();
            for (a, v) in acc[l].iter_mut().zip(&c) { *a += 1.0 - *v as f64; }
            // per-location channel norms
            let ft = fused.levels[l].to_vec();
            let st = dec.levels[l].to_vec();
            let ch = fused.levels[l].shape()[1];
            let hw = sizes[l] * sizes[l];
            for i in 0..hw {
                let mut nf = 0.0; let mut ns = 0.0;
                for cc in 0..ch {
                    nf += (ft[cc * hw + i] as f64).powi(2);
                    ns += (st[cc * hw + i] as f64).powi(2);
                }
                tnorm[l][i] += nf.sqrt();
                snorm[l][i] += ns.sqrt();
            }
        }
    }
    let n = normals.len() as f64;
    for l in 0..3 {
        let s = sizes[l];
        let (mut bi, mut bv) = (0, f64::MIN);
        for (i, v) in acc[l].iter().enumerate() { if *v > bv { bv = *v; bi = i; } }
        println!("level {l}: worst cell ({}, {}) mean 1-cos {:.3}, teacher norm {:.3}, student norm {:.3}",
            bi / s, bi % s, bv / n, tnorm[l][bi] / n, snorm[l][bi] / n);
        let med = {
            let mut v: Vec<f64> = tnorm[l].iter().map(|x| x / n).collect();
            v.sort_by(f64::total_cmp); v[v.len()/2]
        };
        println!("  median teacher norm {med:.3}");
        if l == 1 {
            for r in 0..8 {
                println!("  {}", (0..8).map(|c| format!("{:5.2}", acc[l][r*8+c] / n)).collect::<String>());
            }
        }
    }
}
