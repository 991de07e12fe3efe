//! End-to-end pipeline helpers: train a model on a dataset tree, evaluate
//! it, and run the fusion ablation grid. Shared by the CLI and by tests so
//! both exercise the same code path.

use crate::data::{self, DataError};
use crate::model::{AfrdModel, FusionMode, ImageSet, ModelConfig};
use crate::score::{self, EvalError, EvalReport};
use crate::tensor::Real;
use crate::train::{self, TrainConfig, TrainError, TrainReport};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
}

/// Default anomaly-map smoothing bandwidth in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// Build a model config for a dataset with `n_lightings` images of
/// `image_size` per sample under the given fusion mode.
pub fn model_config(n_lightings: usize, image_size: usize, fusion: FusionMode) -> ModelConfig {
    let effective = match fusion {
        FusionMode::Single(_) => 1,
        _ => n_lightings,
    };
    ModelConfig {
        n_lightings: effective,
        image_size,
        fusion,
        ..ModelConfig::default()
    }
}

/// Train a fresh model on `train_sets` and return it with the report.
pub fn train_model<R: Real>(
    train_sets: &[ImageSet<R>],
    n_lightings: usize,
    image_size: usize,
    fusion: FusionMode,
    cfg: &TrainConfig,
) -> Result<(AfrdModel<R>, TrainReport), PipelineError> {
    let mc = model_config(n_lightings, image_size, fusion);
    mc.validate()?;
    let mut model = AfrdModel::init(mc, cfg.seed)?;
    let report = train::train(&mut model, train_sets, cfg)?;
    Ok((model, report))
}

/// Evaluate a trained model over a test split.
pub fn evaluate_model<R: Real>(
    model: &AfrdModel<R>,
    test_sets: &[ImageSet<R>],
    sigma: f64,
) -> Result<(EvalReport, Vec<score::AnomalyResult>), PipelineError> {
    Ok(score::evaluate(model, test_sets, sigma)?)
}

/// One ablation row: a fusion variant with its test metrics averaged over
/// the seeds it was run with.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: FusionMode,
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    pub per_seed_i_auroc: Vec<f64>,
}

/// Restrict every set to one lighting, for the single-lighting baselines.
pub fn select_lighting<R: Real>(sets: &[ImageSet<R>], j: usize) -> Result<Vec<ImageSet<R>>, PipelineError> {
    sets.iter()
        .map(|s| {
            let img = s.images.get(j).ok_or_else(|| {
                PipelineError::Config(format!("sample {} has no lighting {j}", s.sample_id))
            })?;
            Ok(ImageSet::new(
                s.sample_id.clone(),
                vec![img.clone()],
                s.height,
                s.width,
                s.label,
                s.mask.clone(),
            )?)
        })
        .collect()
}

/// Train and evaluate one variant for one seed on an already-loaded dataset.
/// Single-lighting variants run on the corresponding one-lighting slice of
/// the data and share every other code path.
pub fn run_variant<R: Real>(
    train_sets: &[ImageSet<R>],
    test_sets: &[ImageSet<R>],
    n_lightings: usize,
    image_size: usize,
    fusion: FusionMode,
    cfg: &TrainConfig,
    sigma: f64,
) -> Result<EvalReport, PipelineError> {
    let sliced;
    let (tr, te) = match fusion {
        FusionMode::Single(j) => {
            sliced = (select_lighting(train_sets, j)?, select_lighting(test_sets, j)?);
            (&sliced.0[..], &sliced.1[..])
        }
        _ => (train_sets, test_sets),
    };
    let (model, _) = train_model(tr, n_lightings, image_size, fusion, cfg)?;
    Ok(evaluate_model(&model, te, sigma)?.0)
}

/// Run the full fusion ablation: every single-lighting variant, mean
/// fusion, and attention fusion, each averaged over `seeds`.
pub fn run_ablation<R: Real>(
    root: &Path,
    base: &TrainConfig,
    seeds: &[u64],
    sigma: f64,
) -> Result<Vec<AblationRow>, PipelineError> {
    let (train_sets, test_sets) = data::load_dataset::<R>(root)?;
    let n_lightings = train_sets
        .first()
        .map(|s| s.images.len())
        .ok_or_else(|| PipelineError::Config("empty training split".into()))?;
    let image_size = train_sets[0].height;

    let mut variants: Vec<FusionMode> = (0..n_lightings).map(FusionMode::Single).collect();
    variants.push(FusionMode::Mean);
    variants.push(FusionMode::Attention);

    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut p_sum = 0.0;
        let mut p_count = 0usize;
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..base.clone() };
            let report = run_variant(
                &train_sets,
                &test_sets,
                n_lightings,
                image_size,
                variant,
                &cfg,
                sigma,
            )?;
            per_seed.push(report.i_auroc);
            if let Some(p) = report.p_auroc {
                p_sum += p;
                p_count += 1;
            }
        }
        let i_auroc = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(AblationRow {
            variant,
            i_auroc,
            p_auroc: (p_count > 0).then(|| p_sum / p_count as f64),
            per_seed_i_auroc: per_seed,
        });
    }
    Ok(rows)
}

/// Write ablation results as `variant,i_auroc,p_auroc` rows.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<(), PipelineError> {
    let mut out = String::from("variant,i_auroc,p_auroc\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:.6},{}\n",
            row.variant,
            row.i_auroc,
            row.p_auroc.map_or(String::new(), |p| format!("{p:.6}")),
        ));
    }
    std::fs::write(path, out).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Human-readable one-line summary naming the best variant.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let best = rows
        .iter()
        .max_by(|a, b| a.i_auroc.partial_cmp(&b.i_auroc).unwrap())
        .expect("non-empty ablation");
    format!(
        "best variant: {} (I-AUROC {:.4} over {} seed(s))",
        best.variant,
        best.i_auroc,
        best.per_seed_i_auroc.len()
    )
}
