//! Inference-time anomaly scoring and ROC evaluation.
//!
//! Per pyramid level the anomaly map is `1 − cos(F_f, F_d)` per position,
//! bilinearly upsampled to the input resolution; the per-level maps are
//! summed, Gaussian smoothed, and the image score is the max of the
//! smoothed map. AUROC uses the rank (Mann–Whitney) statistic with
//! mid-rank tie handling, so it equals the pairwise-probability definition
//! exactly.

use crate::model::{AfrdModel, ImageSet, Label, COSINE_EPS};
use crate::tensor::{Real, TensorError};
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model has non-finite parameters; refusing to score")]
    NonFiniteModel,
    #[error("sample '{0}': {1}")]
    Sample(String, String),
    #[error("AUROC undefined: {0}")]
    UndefinedMetric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-sample scoring output.
#[derive(Debug, Clone)]
pub struct AnomalyResult {
    pub sample_id: String,
    /// `[H,W]` smoothed anomaly map, values ≥ 0.
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub image_score: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    /// `(sample_id, label, image_score)` per test sample.
    pub per_sample: Vec<(String, Label, f64)>,
    /// `(fpr, tpr)` points of the image-level ROC curve.
    pub roc_points: Vec<(f64, f64)>,
}

/// Score one image set. The raw (pre-smoothing) map is the sum over levels
/// of upsampled `1 − cos` maps; `smooth_sigma = 0` disables smoothing.
pub fn score<R: Real>(model: &AfrdModel<R>, set: &ImageSet<R>, smooth_sigma: f64) -> Result<AnomalyResult, EvalError> {
    if model.has_non_finite() {
        return Err(EvalError::NonFiniteModel);
    }
    let feats = model
        .teacher_forward(set)
        .map_err(|e| EvalError::Sample(set.sample_id.clone(), e.to_string()))?;
    let (fused, _weights) = model.fuse(&feats)?;
    let embedding = model.bottleneck_forward(&fused, false)?;
    let decoded = model.student_forward(&embedding, false)?;
    let (h, w) = (set.height, set.width);
    let mut map = vec![0f64; h * w];
    for (f, d) in fused.levels.iter().zip(&decoded.levels) {
        let cos = f.cosine_map(d, COSINE_EPS)?;
        let (lh, lw) = (cos.shape()[1], cos.shape()[2]);
        let level_map = cos
            .affine(R::from_f64(-1.0), R::one()) // 1 − cos
            .reshape(&[1, 1, lh, lw])?
            .bilinear_upsample(h, w)?;
        level_map.with_data(|d| {
            for (m, v) in map.iter_mut().zip(d) {
                *m += v.as_f64();
            }
        });
    }
    let map = if smooth_sigma > 0.0 {
        gaussian_smooth(&map, h, w, smooth_sigma)
    } else {
        map
    };
    let image_score = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(AnomalyResult {
        sample_id: set.sample_id.clone(),
        map,
        height: h,
        width: w,
        image_score,
    })
}

/// Separable Gaussian blur, kernel truncated at 4σ and normalized,
/// reflective (mirror) boundary handling.
pub fn gaussian_smooth(map: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let z: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= z;
    }
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        // Mirror about the edges until in range; period 2(n-1).
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let mut tmp = vec![0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = reflect(c as isize + ki as isize - radius, w as isize);
                acc += kv * map[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0f64; h * w];
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = reflect(r as isize + ki as isize - radius, h as isize);
                acc += kv * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Rank-based AUROC with mid-rank tie handling:
/// `(Σ ranks of positives − n₊(n₊+1)/2) / (n₊·n₋)`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::UndefinedMetric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|l| **l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::UndefinedMetric(
            "both classes must be present".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());
    // Mid-ranks: tied scores share the average of their 1-based ranks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] != 0 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Pixel-level AUROC over the pooled per-pixel population of all results;
/// normal samples contribute all-negative pixels.
pub fn pixel_auroc(results: &[AnomalyResult], masks: &[Option<Vec<u8>>]) -> Result<f64, EvalError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (res, mask) in results.iter().zip(masks) {
        match mask {
            Some(m) => {
                if m.len() != res.map.len() {
                    return Err(EvalError::Sample(
                        res.sample_id.clone(),
                        format!("mask has {} pixels, map has {}", m.len(), res.map.len()),
                    ));
                }
                scores.extend_from_slice(&res.map);
                labels.extend(m.iter().map(|v| u8::from(*v != 0)));
            }
            None => {
                scores.extend_from_slice(&res.map);
                labels.extend(std::iter::repeat(0u8).take(res.map.len()));
            }
        }
    }
    if !labels.iter().any(|l| *l != 0) {
        return Err(EvalError::UndefinedMetric("no anomalous pixels in the pool".into()));
    }
    auroc(&scores, &labels)
}

/// `(fpr, tpr)` points across all score thresholds, in increasing fpr order.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|l| **l != 0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap());
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        pts.push((fp as f64 / n_neg, tp as f64 / n_pos));
        i = j + 1;
    }
    pts
}

/// Score every test set and compute I-AUROC plus (when any mask exists)
/// P-AUROC.
pub fn evaluate<R: Real>(
    model: &AfrdModel<R>,
    test_sets: &[ImageSet<R>],
    smooth_sigma: f64,
) -> Result<(EvalReport, Vec<AnomalyResult>), EvalError> {
    let mut results = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        results.push(score(model, set, smooth_sigma)?);
    }
    report_from_results(test_sets, results)
}

/// Build an [`EvalReport`] from precomputed per-sample results.
pub fn report_from_results<R: Real>(
    test_sets: &[ImageSet<R>],
    results: Vec<AnomalyResult>,
) -> Result<(EvalReport, Vec<AnomalyResult>), EvalError> {
    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let labels: Vec<u8> = test_sets
        .iter()
        .map(|s| u8::from(s.label == Label::Anomalous))
        .collect();
    let i_auroc = auroc(&scores, &labels)?;
    let any_mask = test_sets.iter().any(|s| s.mask.is_some());
    let p_auroc = if any_mask {
        let masks: Vec<Option<Vec<u8>>> = test_sets.iter().map(|s| s.mask.clone()).collect();
        Some(pixel_auroc(&results, &masks)?)
    } else {
        None
    };
    let per_sample = test_sets
        .iter()
        .zip(&results)
        .map(|(s, r)| (s.sample_id.clone(), s.label, r.image_score))
        .collect();
    Ok((
        EvalReport {
            i_auroc,
            p_auroc,
            per_sample,
            roc_points: roc_points(&scores, &labels),
        },
        results,
    ))
}

impl EvalReport {
    /// Per-sample scores CSV: `sample_id,label,image_score`.
    pub fn write_scores_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from("sample_id,label,image_score\n");
        for (id, label, score) in &self.per_sample {
            let l = match label {
                Label::Normal => 0,
                Label::Anomalous => 1,
            };
            out.push_str(&format!("{id},{l},{score:.10}\n"));
        }
        std::fs::write(path, out).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// ROC points CSV: `fpr,tpr`.
    pub fn write_roc_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from("fpr,tpr\n");
        for (fpr, tpr) in &self.roc_points {
            out.push_str(&format!("{fpr:.10},{tpr:.10}\n"));
        }
        std::fs::write(path, out).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Export an anomaly map as an 8-bit PGM (min-max normalized per map) with
/// a sidecar text file recording the normalization range.
pub fn write_map_pgm(result: &AnomalyResult, dir: &Path) -> Result<(), EvalError> {
    let io = |path: &Path, source: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let lo = result.map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = result.map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = result
        .map
        .iter()
        .map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let pgm_path = dir.join(format!("{}.pgm", result.sample_id));
    let mut f = std::fs::File::create(&pgm_path).map_err(|e| io(&pgm_path, e))?;
    write!(f, "P5\n{} {}\n255\n", result.width, result.height).map_err(|e| io(&pgm_path, e))?;
    f.write_all(&bytes).map_err(|e| io(&pgm_path, e))?;
    let side_path = dir.join(format!("{}.range.txt", result.sample_id));
    std::fs::write(&side_path, format!("min={lo:.10}\nmax={hi:.10}\n")).map_err(|e| io(&side_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// O(n²) pairwise-probability definition of AUROC:
    /// P(s⁺ > s⁻) + ½·P(s⁺ = s⁻) over all positive/negative pairs.
    fn auroc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] == 0 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_perfect_and_inverted() {
        let labels = [0u8, 0, 1, 1];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
    }

    #[test]
    fn auroc_all_tied_is_half() {
        let labels = [0u8, 1, 0, 1, 1];
        assert_eq!(auroc(&[3.0; 5], &labels).unwrap(), 0.5);
    }

    #[test]
    fn auroc_mixed_ties_hand_value() {
        // scores: neg {1, 2}, pos {2, 3}; pairs: (2>1)=1, (2=2)=.5, (3>1)=1,
        // (3>2)=1 → 3.5/4
        let v = auroc(&[1.0, 2.0, 2.0, 3.0], &[0, 0, 1, 1]).unwrap();
        assert!((v - 0.875).abs() < 1e-15);
    }

    #[test]
    fn auroc_matches_pairwise_oracle_on_random_ties() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(5..60);
            // coarse quantization forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0f64..1.0) * 8.0).floor() / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pairwise(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_monotone_transform_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
        let base = auroc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (s * 1.7).exp()).collect();
        assert!((auroc(&mapped, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn auroc_complement_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..30).map(|i| u8::from(i < 10)).collect();
        let a = auroc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_one_class_is_error() {
        assert!(auroc(&[1.0, 2.0], &[0, 0]).is_err());
        assert!(auroc(&[1.0, 2.0], &[1, 1]).is_err());
    }

    #[test]
    fn pixel_auroc_pools_normals_as_negative() {
        let r1 = AnomalyResult {
            sample_id: "a".into(),
            map: vec![0.9, 0.1, 0.1, 0.1],
            height: 2,
            width: 2,
            image_score: 0.9,
        };
        let r2 = AnomalyResult {
            sample_id: "b".into(),
            map: vec![0.2, 0.2, 0.2, 0.2],
            height: 2,
            width: 2,
            image_score: 0.2,
        };
        let masks = vec![Some(vec![1, 0, 0, 0]), None];
        let v = pixel_auroc(&[r1, r2], &masks).unwrap();
        // one positive (0.9) vs 7 negatives, all smaller
        assert_eq!(v, 1.0);
    }

    #[test]
    fn gaussian_smooth_constant_preserved() {
        let map = vec![1.25; 32 * 32];
        let sm = gaussian_smooth(&map, 32, 32, 4.0);
        for v in sm {
            assert!((v - 1.25).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_smooth_reduces_peak() {
        let mut map = vec![0.0; 33 * 33];
        map[16 * 33 + 16] = 1.0;
        let sm = gaussian_smooth(&map, 33, 33, 2.0);
        let total_before: f64 = 1.0;
        let total_after: f64 = sm.iter().sum();
        assert!(sm[16 * 33 + 16] < 0.1);
        assert!((total_after - total_before).abs() < 1e-9, "interior mass preserved");
    }

    #[test]
    fn roc_points_monotone() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.8];
        let labels = [0, 0, 1, 1, 0];
        let pts = roc_points(&scores, &labels);
        assert_eq!(pts[0], (0.0, 0.0));
        assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
        for w in pts.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }
}
