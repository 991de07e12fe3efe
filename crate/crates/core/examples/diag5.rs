use afrd_core::*;
use afrd_core::model::Label;

fn main() {
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let (train, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let cfg = TrainConfig { epochs: 20, seed: 0, ..Default::default() };
    let (model, _) = afrd_core::pipeline::train_model(&train, 6, 64, FusionMode::Attention, &cfg).unwrap();

    // per-level residual stats on test normals vs in/out mask on anomalous
    let mut lvl_norm = [0f64; 3];
    let mut lvl_anom_in = [0f64; 3];
    let mut lvl_anom_out = [0f64; 3];
    let (mut n_norm, mut n_anom) = (0usize, 0usize);
    // full-res smoothed map stats
    let mut in_mask = 0f64; let mut out_mask = 0f64; let mut norm_mean = 0f64; let mut norm_max = 0f64;
    for set in &test {
        let (fused, _) = model.fuse(&model.teacher_forward(set).unwrap()).unwrap();
        let emb = model.bottleneck_forward(&fused, false).unwrap();
        let dec = model.student_forward(&emb, false).unwrap();
        let res = afrd_core::score::score(&model, set, 4.0).unwrap();
        let s = 64usize;
        match (&set.label, &set.mask) {
            (Label::Anomalous, Some(mask)) => {
                n_anom += 1;
                let (mut mi, mut mo, mut ci, mut co) = (0f64, 0f64, 0usize, 0usize);
                for i in 0..s*s {
                    if mask[i] != 0 { mi += res.map[i] as f64; ci += 1; } else { mo += res.map[i] as f64; co += 1; }
                }
                in_mask += mi / ci as f64; out_mask += mo / co as f64;
                for l in 0..3 {
                    let cm = fused.levels[l].cosine_map(&dec.levels[l], 1e-8).unwrap();
                    let v = cm.to_vec();
                    let hw = v.len();
                    let side = (hw as f64).sqrt() as usize;
                    let scale = s / side;
                    let (mut ai, mut ao, mut ni, mut no) = (0f64, 0f64, 0usize, 0usize);
                    for yy in 0..side { for xx in 0..side {
                        let m = mask[(yy*scale+scale/2)*s + xx*scale+scale/2] != 0;
                        let r = 1.0 - v[yy*side+xx] as f64;
                        if m { ai += r; ni += 1; } else { ao += r; no += 1; }
                    }}
                    if ni > 0 { lvl_anom_in[l] += ai / ni as f64; }
                    lvl_anom_out[l] += ao / no.max(1) as f64;
                }
            }
            _ => {
                n_norm += 1;
                let mm: f64 = res.map.iter().map(|v| *v as f64).sum::<f64>() / (s*s) as f64;
                norm_mean += mm;
                norm_max += res.map.iter().cloned().fold(f64::MIN, f64::max);
                for l in 0..3 {
                    let cm = fused.levels[l].cosine_map(&dec.levels[l], 1e-8).unwrap();
                    let v = cm.to_vec();
                    lvl_norm[l] += v.iter().map(|c| 1.0 - *c as f64).sum::<f64>() / v.len() as f64;
                }
            }
        }
    }
    for l in 0..3 {
        println!("level {l}: normal res {:.4}  anom in-mask {:.4} out-mask {:.4}",
            lvl_norm[l]/n_norm as f64, lvl_anom_in[l]/n_anom as f64, lvl_anom_out[l]/n_anom as f64);
    }
    println!("smoothed map: normal mean {:.4} max {:.4} | anom in-mask {:.4} out-mask {:.4}",
        norm_mean/n_norm as f64, norm_max/n_norm as f64, in_mask/n_anom as f64, out_mask/n_anom as f64);

    // spatial structure of normal residual at level 0
    let side = 16usize;
    let mut acc = vec![0f64; side*side];
    for set in test.iter().filter(|s| s.label == Label::Normal) {
        let (fused, _) = model.fuse(&model.teacher_forward(set).unwrap()).unwrap();
        let emb = model.bottleneck_forward(&fused, false).unwrap();
        let dec = model.student_forward(&emb, false).unwrap();
        let cm = fused.levels[0].cosine_map(&dec.levels[0], 1e-8).unwrap();
        for (a, c) in acc.iter_mut().zip(cm.to_vec()) { *a += 1.0 - c as f64; }
    }
    println!("level0 mean residual map over normals (x10, row per line):");
    for y in 0..side {
        let row: String = (0..side).map(|x| format!("{:4.1}", 10.0*acc[y*side+x]/n_norm as f64)).collect();
        println!("{row}");
    }
}
