use afrd_core::*;
use afrd_core::model::Label;

fn main() {
    let tmp = std::path::PathBuf::from("/tmp/afrd_full");
    let (_, test) = afrd_core::data::load_dataset::<f32>(&tmp).unwrap();
    let model = AfrdModel::<f32>::init(afrd_core::pipeline::model_config(6, 64, FusionMode::Attention), 0).unwrap();
    let normals: Vec<_> = test.iter().filter(|s| s.label == Label::Normal).collect();
    let side = 16usize; let c = 64usize;
    // fused level-0 features for each normal
    let mut feats: Vec<Vec<f32>> = Vec::new();
    for set in &normals {
        let (fused, _) = model.fuse(&model.teacher_forward(set).unwrap()).unwrap();
        feats.push(fused.levels[0].to_vec());
    }
    println!("fused level0 mean norm per location (x1):");
    for y in 0..side {
        let row: String = (0..side).map(|x| {
            let mut acc = 0f64;
            for f in &feats {
                let mut n = 0f64;
                for ch in 0..c { let v = f[ch*side*side + y*side + x] as f64; n += v*v; }
                acc += n.sqrt();
            }
            format!("{:5.1}", acc / feats.len() as f64)
        }).collect();
        println!("{row}");
    }
    println!("cross-sample direction stability (mean cos to sample-0 direction, x100):");
    for y in 0..side {
        let row: String = (0..side).map(|x| {
            let f0 = &feats[0];
            let mut acc = 0f64;
            for f in &feats[1..] {
                let (mut d, mut na, mut nb) = (0f64, 0f64, 0f64);
                for ch in 0..c {
                    let a = f0[ch*side*side + y*side + x] as f64;
                    let b = f[ch*side*side + y*side + x] as f64;
                    d += a*b; na += a*a; nb += b*b;
                }
                acc += d / (na.sqrt()*nb.sqrt() + 1e-8);
            }
            format!("{:4.0}", 100.0*acc / (feats.len()-1) as f64)
        }).collect();
        println!("{row}");
    }
}
