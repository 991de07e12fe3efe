use afrd_core::*;
use afrd_core::model::Label;

fn main() {
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let (train, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let cfg = TrainConfig { epochs: 20, seed: 0, ..Default::default() };
    let (model, _) = afrd_core::pipeline::train_model(&train, 6, 64, FusionMode::Attention, &cfg).unwrap();
    // per-anomalous-sample: in-mask mean/max vs global normal-pixel quantiles
    let mut normal_pixels: Vec<f64> = Vec::new();
    for set in test.iter().filter(|s| s.label == Label::Normal) {
        let res = afrd_core::score::score(&model, set, 4.0).unwrap();
        normal_pixels.extend(res.map.iter().map(|v| *v as f64));
    }
    normal_pixels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| normal_pixels[((normal_pixels.len() - 1) as f64 * p) as usize];
    println!("normal pixel quantiles: p50 {:.4} p90 {:.4} p99 {:.4} max {:.4}", q(0.5), q(0.9), q(0.99), q(1.0));
    for set in test.iter().filter(|s| s.label == Label::Anomalous) {
        let res = afrd_core::score::score(&model, set, 4.0).unwrap();
        let mask = set.mask.as_ref().unwrap();
        let s = 64usize;
        let (mut mi, mut mx, mut ci) = (0f64, 0f64, 0usize);
        let mut below_p90 = 0usize;
        for i in 0..s*s {
            if mask[i] != 0 {
                let v = res.map[i] as f64;
                mi += v; ci += 1; mx = mx.max(v);
                if v < q(0.9) { below_p90 += 1; }
            }
        }
        println!("{}: mask {} px, in-mask mean {:.4} max {:.4}, frac below normal-p90 {:.2}",
            set.sample_id, ci, mi/ci as f64, mx, below_p90 as f64 / ci as f64);
    }

    // pooled P-AUROC variants: full vs excluding anomalous out-of-mask pixels
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut scores_x = Vec::new();
    let mut labels_x = Vec::new();
    for set in &test {
        let res = afrd_core::score::score(&model, set, 4.0).unwrap();
        match (&set.label, &set.mask) {
            (Label::Anomalous, Some(mask)) => {
                for i in 0..64*64 {
                    let v = res.map[i];
                    scores.push(v); labels.push((mask[i] != 0) as u8);
                    if mask[i] != 0 { scores_x.push(v); labels_x.push(1u8); }
                }
            }
            _ => {
                for i in 0..64*64 {
                    let v = res.map[i];
                    scores.push(v); labels.push(0u8);
                    scores_x.push(v); labels_x.push(0u8);
                }
            }
        }
    }
    println!("pooled P-AUROC {:.4}", afrd_core::score::auroc(&scores, &labels).unwrap());
    println!("P-AUROC excluding anomalous out-of-mask {:.4}", afrd_core::score::auroc(&scores_x, &labels_x).unwrap());

    // effect of dilating ground-truth masks by k pixels
    for k in [0usize, 2, 4, 6] {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for set in &test {
            let res = afrd_core::score::score(&model, set, 4.0).unwrap();
            let s = 64usize;
            let dil: Vec<u8> = match &set.mask {
                Some(mask) => {
                    let mut d = vec![0u8; s * s];
                    for y in 0..s { for x in 0..s {
                        if mask[y*s+x] != 0 {
                            let (y0, y1) = (y.saturating_sub(k), (y+k).min(s-1));
                            let (x0, x1) = (x.saturating_sub(k), (x+k).min(s-1));
                            for yy in y0..=y1 { for xx in x0..=x1 { d[yy*s+xx] = 1; } }
                        }
                    }}
                    d
                }
                None => vec![0u8; s * s],
            };
            for i in 0..s*s {
                scores.push(res.map[i]);
                labels.push(dil[i]);
            }
        }
        println!("dilate {k}: P-AUROC {:.4}", afrd_core::score::auroc(&scores, &labels).unwrap());
    }
}
