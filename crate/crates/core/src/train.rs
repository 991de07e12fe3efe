//! Knowledge-distillation training: multi-level cosine loss, AdamW with
//! decoupled weight decay, deterministic seeded runs.
//!
//! The teacher is frozen, so its per-set feature pyramids are computed once
//! and reused across epochs; only attention, bottleneck and student run
//! inside the per-step graph.

use crate::model::{AfrdModel, FeaturePyramid, FusionMode, ImageSet, Label, COSINE_EPS};
use crate::tensor::{Real, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient in parameter '{0}'; step aborted")]
    NonFiniteGrad(String),
    #[error("training set '{0}' is labelled anomalous; only normal sets may be used for training")]
    AnomalousSample(String),
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub level_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            batch_size: 8,
            epochs: 20,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            level_weights: vec![1.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Inconsistent("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Inconsistent("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    /// `[epoch][level][lighting]` mean attention weight.
    pub epoch_omega: Vec<Vec<Vec<f64>>>,
    pub wall_time_secs: f64,
    pub checkpoint_path: Option<std::path::PathBuf>,
}

impl TrainReport {
    /// CSV: `epoch,loss,omega_entropy_l0,...` one row per epoch.
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let levels = self.epoch_omega.first().map_or(3, |o| o.len());
        let mut out = String::new();
        out.push_str("epoch,loss");
        for l in 0..levels {
            out.push_str(&format!(",omega_entropy_l{l}"));
        }
        out.push('\n');
        for (e, loss) in self.epoch_loss.iter().enumerate() {
            out.push_str(&format!("{},{:.8}", e + 1, loss));
            for l in 0..levels {
                let ent = entropy(&self.epoch_omega[e][l]);
                out.push_str(&format!(",{ent:.8}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Line-oriented text log of the same data plus raw weights.
    pub fn write_log(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for (e, loss) in self.epoch_loss.iter().enumerate() {
            let omegas: Vec<String> = self.epoch_omega[e]
                .iter()
                .enumerate()
                .map(|(l, w)| format!("omega_l{l}={w:.5?}"))
                .collect();
            writeln!(f, "epoch={} loss={:.8} {}", e + 1, loss, omegas.join(" ")).map_err(|er| TrainError::Io {
                path: path.display().to_string(),
                source: er,
            })?;
        }
        Ok(())
    }
}

fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// AdamW

/// Decoupled-weight-decay Adam. Moments are kept per parameter tensor in
/// the order of `AfrdModel::trainable_params`.
pub struct AdamW<R: Real> {
    pub t: u64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &[(String, Tensor<R>)]) -> Self {
        AdamW {
            t: 0,
            m: params.iter().map(|(_, p)| vec![R::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![R::zero(); p.numel()]).collect(),
        }
    }

    /// One update with bias-corrected moments:
    /// `p ← p − lr·m̂/(√v̂+eps) − lr·wd·p`. Missing gradients count as zero;
    /// a non-finite gradient aborts the step before touching any parameter.
    pub fn step(&mut self, params: &[(String, Tensor<R>)], cfg: &TrainConfig) -> Result<(), TrainError> {
        let grads: Vec<Option<Vec<R>>> = params.iter().map(|(_, p)| p.grad()).collect();
        for ((name, _), g) in params.iter().zip(&grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFiniteGrad(name.clone()));
                }
            }
        }
        self.t += 1;
        let (b1, b2) = (R::from_f64(cfg.betas.0), R::from_f64(cfg.betas.1));
        let one = R::one();
        let bc1 = R::from_f64(1.0 - cfg.betas.0.powi(self.t as i32));
        let bc2 = R::from_f64(1.0 - cfg.betas.1.powi(self.t as i32));
        let lr = R::from_f64(cfg.learning_rate);
        let eps = R::from_f64(cfg.eps);
        let decay = R::from_f64(cfg.learning_rate * cfg.weight_decay);
        for (i, (_, p)) in params.iter().enumerate() {
            let zero;
            let g: &[R] = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = vec![R::zero(); p.numel()];
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|pd| {
                for k in 0..pd.len() {
                    m[k] = b1 * m[k] + (one - b1) * g[k];
                    v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    pd[k] = pd[k] - lr * mhat / (vhat.sqrt() + eps) - decay * pd[k];
                }
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss

/// Multi-level distillation loss:
/// `Σ_l w_l · mean_{h,w} (1 − cos(F_f^l, F_d^l))`.
pub fn distill_loss<R: Real>(
    fused: &FeaturePyramid<R>,
    decoded: &FeaturePyramid<R>,
    level_weights: &[f64],
) -> Result<Tensor<R>, TensorError> {
    if fused.levels.len() != decoded.levels.len() {
        return Err(TensorError::DimMismatch {
            op: "distill_loss",
            axis: "levels",
            expected: fused.levels.len(),
            got: decoded.levels.len(),
        });
    }
    let mut total: Option<Tensor<R>> = None;
    for (l, (f, d)) in fused.levels.iter().zip(&decoded.levels).enumerate() {
        let w = level_weights.get(l).copied().unwrap_or(1.0);
        let cos_mean = f.cosine_map(d, COSINE_EPS)?.mean_all();
        // w·(1 − mean cos)
        let term = cos_mean.affine(R::from_f64(-w), R::from_f64(w));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

// ---------------------------------------------------------------------------
// Teacher feature cache

/// Frozen-teacher pyramids for every training set, computed once.
pub struct TeacherCache<R: Real> {
    /// `[set][lighting]` pyramids with `[1,C,H,W]` levels.
    pub per_set: Vec<Vec<FeaturePyramid<R>>>,
}

/// Lightings a model consumes from a dataset sample.
pub fn lighting_selection<R: Real>(model: &AfrdModel<R>, set: &ImageSet<R>) -> Result<Vec<usize>, TrainError> {
    match model.config.fusion {
        FusionMode::Single(j) => {
            // The pipeline slices datasets down to lighting j beforehand, so
            // a single-lighting model always consumes one-lighting sets.
            if set.n_lightings() != 1 {
                return Err(TrainError::Inconsistent(format!(
                    "single:{} model expects pre-sliced one-lighting sets, sample '{}' has {}",
                    j,
                    set.sample_id,
                    set.n_lightings()
                )));
            }
            Ok(vec![0])
        }
        _ => {
            if set.n_lightings() != model.config.n_lightings {
                return Err(TrainError::Inconsistent(format!(
                    "sample '{}' has {} lightings, model expects {}",
                    set.sample_id,
                    set.n_lightings(),
                    model.config.n_lightings
                )));
            }
            Ok((0..set.n_lightings()).collect())
        }
    }
}

pub fn build_teacher_cache<R: Real>(model: &AfrdModel<R>, sets: &[ImageSet<R>]) -> Result<TeacherCache<R>, TrainError> {
    let mut per_set = Vec::with_capacity(sets.len());
    for set in sets {
        let selection = lighting_selection(model, set)?;
        if set.height != model.config.image_size || set.width != model.config.image_size {
            return Err(TrainError::Inconsistent(format!(
                "sample '{}' is {}x{}, model expects {}",
                set.sample_id, set.height, set.width, model.config.image_size
            )));
        }
        let x = model.prepare_input(&set.images_tensor(&selection)?);
        let levels = model.teacher.forward(&x)?;
        per_set.push(crate::model::split_pyramids(&levels, selection.len())?);
    }
    Ok(TeacherCache { per_set })
}

// ---------------------------------------------------------------------------
// Training loop

/// Train attention + bottleneck + student on anomaly-free image sets.
/// Deterministic for a fixed seed; the teacher is never updated.
pub fn train<R: Real>(
    model: &AfrdModel<R>,
    train_sets: &[ImageSet<R>],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train_sets.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for s in train_sets {
        if s.label != Label::Normal {
            return Err(TrainError::AnomalousSample(s.sample_id.clone()));
        }
    }
    let started = Instant::now();
    let cache = build_teacher_cache(model, train_sets)?;
    let params = model.trainable_params();
    let mut optim = AdamW::new(&params);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let n_levels = model.config.stage_widths.len();
    let n = model.config.n_lightings;

    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut epoch_omega = Vec::with_capacity(config.epochs);
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_sets.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut omega_sum = vec![vec![0.0f64; n]; n_levels];
        for batch in order.chunks(config.batch_size) {
            for (_, p) in &params {
                p.zero_grad();
            }
            // Fuse each set, then batch the fused pyramids so bottleneck and
            // student see all sets of the batch at once.
            let mut fused_levels: Vec<Vec<Tensor<R>>> = vec![Vec::new(); n_levels];
            for &si in batch {
                let (fused, weights) = model.fuse(&cache.per_set[si])?;
                for (l, lv) in fused.levels.into_iter().enumerate() {
                    fused_levels[l].push(lv);
                }
                for (l, w) in weights.iter().enumerate() {
                    for (j, v) in w.to_vec().iter().enumerate() {
                        omega_sum[l][j] += v.as_f64();
                    }
                }
            }
            let fused = FeaturePyramid {
                levels: fused_levels
                    .into_iter()
                    .map(|parts| Tensor::concat(&parts, 0))
                    .collect::<Result<_, _>>()?,
            };
            let embedding = model.bottleneck_forward(&fused, true)?;
            let decoded = model.student_forward(&embedding, true)?;
            let loss = distill_loss(&fused, &decoded, &config.level_weights)?;
            loss_sum += loss.item().as_f64() * batch.len() as f64;
            loss.backward()?;
            optim.step(&params, config)?;
        }
        epoch_loss.push(loss_sum / train_sets.len() as f64);
        let denom = train_sets.len() as f64;
        epoch_omega.push(
            omega_sum
                .into_iter()
                .map(|lv| lv.into_iter().map(|v| v / denom).collect())
                .collect(),
        );
    }
    Ok(TrainReport {
        epoch_loss,
        epoch_omega,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint_path: None,
    })
}
