//! The AFRD network: a frozen teacher encoder, per-level attention fusion,
//! a bottleneck projection, and a student decoder that mirrors the teacher.
//!
//! The teacher maps an image to a 3-level feature pyramid (strides 4, 8, 16
//! relative to the input). Per-lighting pyramids are fused level-by-level
//! into a convex combination whose weights come from a small FC head; the
//! bottleneck compresses the fused pyramid to one coarse embedding and the
//! student decodes it back into a pyramid with teacher shapes.

use crate::tensor::{Real, Result, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::cell::RefCell;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
}

/// One physical sample: N per-lighting RGB images plus an optional
/// ground-truth defect mask.
#[derive(Clone)]
pub struct ImageSet<R: Real> {
    pub sample_id: String,
    /// N buffers, each `[3,H,W]` row-major with values in `[0,1]`.
    pub images: Vec<Vec<R>>,
    pub height: usize,
    pub width: usize,
    pub label: Label,
    /// `[H,W]` binary map (0 normal, 1 anomalous pixel).
    pub mask: Option<Vec<u8>>,
}

impl<R: Real> ImageSet<R> {
    pub fn new(
        sample_id: String,
        images: Vec<Vec<R>>,
        height: usize,
        width: usize,
        label: Label,
        mask: Option<Vec<u8>>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(TensorError::Invalid {
                op: "ImageSet",
                msg: format!("{sample_id}: at least one lighting required"),
            });
        }
        for (j, img) in images.iter().enumerate() {
            if img.len() != 3 * height * width {
                return Err(TensorError::Invalid {
                    op: "ImageSet",
                    msg: format!(
                        "{sample_id}: lighting {j} has {} values, expected {}",
                        img.len(),
                        3 * height * width
                    ),
                });
            }
        }
        if let Some(m) = &mask {
            if m.len() != height * width {
                return Err(TensorError::Invalid {
                    op: "ImageSet",
                    msg: format!("{sample_id}: mask size {} != {}", m.len(), height * width),
                });
            }
            if label == Label::Normal && m.iter().any(|v| *v != 0) {
                return Err(TensorError::Invalid {
                    op: "ImageSet",
                    msg: format!("{sample_id}: normal sample with nonempty mask"),
                });
            }
        }
        Ok(ImageSet {
            sample_id,
            images,
            height,
            width,
            label,
            mask,
        })
    }

    pub fn n_lightings(&self) -> usize {
        self.images.len()
    }

    /// Stack the selected lightings into an `[N,3,H,W]` constant tensor.
    pub fn images_tensor(&self, lightings: &[usize]) -> Result<Tensor<R>> {
        let mut data = Vec::with_capacity(lightings.len() * 3 * self.height * self.width);
        for &j in lightings {
            let img = self.images.get(j).ok_or_else(|| TensorError::Invalid {
                op: "images_tensor",
                msg: format!("{}: lighting index {} out of range ({})", self.sample_id, j, self.images.len()),
            })?;
            data.extend_from_slice(img);
        }
        Tensor::from_vec(data, &[lightings.len(), 3, self.height, self.width])
    }
}

/// Ordered per-level feature maps, finest first / coarsest last.
#[derive(Clone)]
pub struct FeaturePyramid<R: Real> {
    pub levels: Vec<Tensor<R>>,
}

/// Per-level simplex weights over the N lightings, extracted for reporting.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub per_level: Vec<Vec<f64>>,
}

impl AttentionWeights {
    /// Shannon entropy (nats) of each level's weight vector.
    pub fn entropy(&self) -> Vec<f64> {
        self.per_level
            .iter()
            .map(|w| -w.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Softmax-FC attention over the N lightings (the full method).
    Attention,
    /// Fixed uniform weights 1/N, no FC.
    Mean,
    /// Only lighting `j` of the dataset feeds an N=1 attention model.
    Single(usize),
}

impl std::str::FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::parse(s)
    }
}

impl FusionMode {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention" => Ok(FusionMode::Attention),
            "mean" => Ok(FusionMode::Mean),
            _ => {
                if let Some(j) = s.strip_prefix("single:") {
                    j.parse::<usize>()
                        .map(FusionMode::Single)
                        .map_err(|_| format!("bad lighting index in '{s}'"))
                } else {
                    Err(format!("unknown fusion mode '{s}' (attention|mean|single:<j>)"))
                }
            }
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::Attention => write!(f, "attention"),
            FusionMode::Mean => write!(f, "mean"),
            FusionMode::Single(j) => write!(f, "single:{j}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Number of lightings the model consumes (1 for single-lighting).
    pub n_lightings: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_width: usize,
    pub stage_widths: [usize; 3],
    pub embed_width: usize,
    pub fusion: FusionMode,
    /// Global-average-pool features before the attention FC (resolution
    /// independent). `false` flattens the full spatial maps.
    pub pooled_attention: bool,
    /// Normalize inputs with ImageNet statistics before the teacher.
    pub normalize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_lightings: 6,
            image_size: 64,
            in_channels: 3,
            stem_width: 32,
            stage_widths: [64, 128, 256],
            embed_width: 32,
            fusion: FusionMode::Attention,
            pooled_attention: true,
            normalize_input: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| TensorError::Invalid { op: "ModelConfig", msg };
        if self.n_lightings < 1 {
            return Err(bad("n_lightings must be >= 1".into()));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(bad(format!("image_size {} must be a positive multiple of 16", self.image_size)));
        }
        if self.stem_width < 1 || self.embed_width < 1 || self.stage_widths.iter().any(|w| *w < 1) {
            return Err(bad("channel widths must be >= 1".into()));
        }
        if let FusionMode::Single(_) = self.fusion {
            if self.n_lightings != 1 {
                return Err(bad("single-lighting fusion requires n_lightings == 1".into()));
            }
        }
        Ok(())
    }

    /// `(channels, side)` of each pyramid level for this input size.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        (0..3)
            .map(|l| (self.stage_widths[l], self.image_size / (4 << l)))
            .collect()
    }

    fn attention_in_features(&self, level: usize) -> usize {
        let (c, s) = self.level_shapes()[level];
        if self.pooled_attention {
            self.n_lightings * c
        } else {
            self.n_lightings * c * s * s
        }
    }
}

// ---------------------------------------------------------------------------
// Layers

pub struct Conv2d<R: Real> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
    pub stride: usize,
    pub pad: usize,
}

impl<R: Real> Conv2d<R> {
    fn init(rng: &mut ChaCha12Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, frozen: bool) -> Self {
        let fan_in = cin * k * k;
        let w = he_uniform(rng, cout * cin * k * k, fan_in);
        let mk = if frozen { Tensor::from_vec } else { Tensor::param };
        Conv2d {
            weight: mk(w, &[cout, cin, k, k]).unwrap(),
            bias: mk(vec![R::zero(); cout], &[cout]).unwrap(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad)
    }
}

pub struct ConvT2d<R: Real> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
    pub stride: usize,
    pub pad: usize,
}

impl<R: Real> ConvT2d<R> {
    fn init(rng: &mut ChaCha12Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = cin * k * k;
        let w = he_uniform(rng, cin * cout * k * k, fan_in);
        ConvT2d {
            weight: Tensor::param(w, &[cin, cout, k, k]).unwrap(),
            bias: Tensor::param(vec![R::zero(); cout], &[cout]).unwrap(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        x.conv_transpose2d(&self.weight, &self.bias, self.stride, self.pad)
    }
}

pub struct Linear<R: Real> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> Linear<R> {
    fn init(rng: &mut ChaCha12Rng, din: usize, dout: usize) -> Self {
        let w = he_uniform(rng, dout * din, din);
        Linear {
            weight: Tensor::param(w, &[dout, din]).unwrap(),
            bias: Tensor::param(vec![R::zero(); dout], &[dout]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        x.linear(&self.weight, &self.bias)
    }
}

pub struct BatchNorm2d<R: Real> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    pub running_mean: RefCell<Vec<R>>,
    pub running_var: RefCell<Vec<R>>,
}

impl<R: Real> BatchNorm2d<R> {
    fn init(c: usize, frozen: bool) -> Self {
        let mk = if frozen { Tensor::from_vec } else { Tensor::param };
        BatchNorm2d {
            gamma: mk(vec![R::one(); c], &[c]).unwrap(),
            beta: mk(vec![R::zero(); c], &[c]).unwrap(),
            running_mean: RefCell::new(vec![R::zero(); c]),
            running_var: RefCell::new(vec![R::one(); c]),
        }
    }

    pub fn forward(&self, x: &Tensor<R>, train: bool) -> Result<Tensor<R>> {
        let (y, stats) = x.batchnorm2d(
            &self.gamma,
            &self.beta,
            &self.running_mean.borrow(),
            &self.running_var.borrow(),
            BN_EPS,
            train,
        )?;
        if let Some((mean, var)) = stats {
            let mom = R::from_f64(BN_MOMENTUM);
            let keep = R::one() - mom;
            let m = (x.numel() / x.shape()[1]) as f64;
            // Unbiased variance feeds the running estimate.
            let unbias = R::from_f64(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            for (r, b) in self.running_mean.borrow_mut().iter_mut().zip(&mean) {
                *r = keep * *r + mom * *b;
            }
            for (r, b) in self.running_var.borrow_mut().iter_mut().zip(&var) {
                *r = keep * *r + mom * *b * unbias;
            }
        }
        Ok(y)
    }
}

fn he_uniform<R: Real>(rng: &mut ChaCha12Rng, n: usize, fan_in: usize) -> Vec<R> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| R::from_f64(rng.gen_range(-limit..limit))).collect()
}

/// conv → bn → relu
struct ConvBnRelu<R: Real> {
    conv: Conv2d<R>,
    bn: BatchNorm2d<R>,
}

impl<R: Real> ConvBnRelu<R> {
    fn init(
        rng: &mut ChaCha12Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        frozen: bool,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::init(rng, cin, cout, k, stride, pad, frozen),
            bn: BatchNorm2d::init(cout, frozen),
        }
    }

    fn forward(&self, x: &Tensor<R>, train: bool) -> Result<Tensor<R>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu())
    }
}

// ---------------------------------------------------------------------------
// Network blocks

pub struct TeacherEncoder<R: Real> {
    stem: ConvBnRelu<R>,
    stages: Vec<(ConvBnRelu<R>, ConvBnRelu<R>)>,
}

impl<R: Real> TeacherEncoder<R> {
    /// Pyramid over the batch: one `[B,C_l,H_l,W_l]` tensor per level.
    /// Always eval mode; parameters are frozen leaves, so no graph is kept.
    pub fn forward(&self, x: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
        let mut h = self.stem.forward(x, false)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        for (down, keep) in &self.stages {
            h = down.forward(&h, false)?;
            h = keep.forward(&h, false)?;
            levels.push(h.clone());
        }
        Ok(levels)
    }
}

pub struct Bottleneck<R: Real> {
    down0a: ConvBnRelu<R>,
    down0b: ConvBnRelu<R>,
    down1: ConvBnRelu<R>,
    proj: ConvBnRelu<R>,
}

pub struct StudentDecoder<R: Real> {
    head: ConvBnRelu<R>,
    up1: (ConvT2d<R>, BatchNorm2d<R>, ConvBnRelu<R>),
    up0: (ConvT2d<R>, BatchNorm2d<R>, ConvBnRelu<R>),
    /// Plain per-level output projections. No ReLU here: a rectified output
    /// unit that goes silent at some position for every training sample
    /// receives no gradient and can never match the target there.
    out: [Conv2d<R>; 3],
}

pub struct AfrdModel<R: Real> {
    pub config: ModelConfig,
    pub teacher: TeacherEncoder<R>,
    /// One FC per pyramid level; absent in mean-fusion mode.
    pub attention: Option<Vec<Linear<R>>>,
    pub bottleneck: Bottleneck<R>,
    pub student: StudentDecoder<R>,
}

impl<R: Real> AfrdModel<R> {
    /// Deterministic seeded initialization; the teacher comes out frozen.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let [c0, c1, c2] = config.stage_widths;

        let stem = ConvBnRelu::init(&mut rng, config.in_channels, config.stem_width, 3, 2, 1, true);
        let mut stages = Vec::new();
        let mut cin = config.stem_width;
        for &cout in &config.stage_widths {
            let down = ConvBnRelu::init(&mut rng, cin, cout, 3, 2, 1, true);
            let keep = ConvBnRelu::init(&mut rng, cout, cout, 3, 1, 1, true);
            stages.push((down, keep));
            cin = cout;
        }
        let teacher = TeacherEncoder { stem, stages };

        let attention = match config.fusion {
            FusionMode::Mean => None,
            _ => Some(
                (0..3)
                    .map(|l| {
                        let fc = Linear::init(&mut rng, config.attention_in_features(l), config.n_lightings);
                        // Near-zero logits: fusion starts at uniform 1/N and
                        // the softmax departs from it only where the loss
                        // demands, instead of at an arbitrary init-dependent
                        // mixture.
                        fc.weight.update_data(|d| d.iter_mut().for_each(|v| *v = *v * R::from_f64(0.05)));
                        fc
                    })
                    .collect(),
            ),
        };

        let bottleneck = Bottleneck {
            down0a: ConvBnRelu::init(&mut rng, c0, c0, 3, 2, 1, false),
            down0b: ConvBnRelu::init(&mut rng, c0, c0, 3, 2, 1, false),
            down1: ConvBnRelu::init(&mut rng, c1, c1, 3, 2, 1, false),
            proj: ConvBnRelu::init(&mut rng, c0 + c1 + c2, config.embed_width, 1, 1, 0, false),
        };

        let student = StudentDecoder {
            head: ConvBnRelu::init(&mut rng, config.embed_width, c2, 3, 1, 1, false),
            up1: (
                ConvT2d::init(&mut rng, c2, c1, 2, 2, 0),
                BatchNorm2d::init(c1, false),
                ConvBnRelu::init(&mut rng, c1, c1, 3, 1, 1, false),
            ),
            up0: (
                ConvT2d::init(&mut rng, c1, c0, 2, 2, 0),
                BatchNorm2d::init(c0, false),
                ConvBnRelu::init(&mut rng, c0, c0, 3, 1, 1, false),
            ),
            out: [
                Conv2d::init(&mut rng, c0, c0, 3, 1, 1, false),
                Conv2d::init(&mut rng, c1, c1, 3, 1, 1, false),
                Conv2d::init(&mut rng, c2, c2, 3, 1, 1, false),
            ],
        };

        Ok(AfrdModel {
            config,
            teacher,
            attention,
            bottleneck,
            student,
        })
    }

    /// Teacher pyramids for one image set, one pyramid per lighting.
    /// Deterministic: the teacher runs in eval mode with frozen statistics.
    pub fn teacher_forward(&self, set: &ImageSet<R>) -> Result<Vec<FeaturePyramid<R>>> {
        if set.height != self.config.image_size || set.width != self.config.image_size {
            return Err(TensorError::DimMismatch {
                op: "teacher_forward",
                axis: "image_size",
                expected: self.config.image_size,
                got: set.height,
            });
        }
        if set.n_lightings() != self.config.n_lightings {
            return Err(TensorError::DimMismatch {
                op: "teacher_forward",
                axis: "n_lightings",
                expected: self.config.n_lightings,
                got: set.n_lightings(),
            });
        }
        let lightings: Vec<usize> = (0..set.n_lightings()).collect();
        let x = self.prepare_input(&set.images_tensor(&lightings)?);
        let levels = self.teacher.forward(&x)?;
        split_pyramids(&levels, self.config.n_lightings)
    }

    pub(crate) fn prepare_input(&self, x: &Tensor<R>) -> Tensor<R> {
        if !self.config.normalize_input {
            return x.clone();
        }
        // ImageNet channel statistics.
        const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
        const STD: [f64; 3] = [0.229, 0.224, 0.225];
        let shape = x.shape().to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut data = x.to_vec();
        for bi in 0..b {
            for ch in 0..c {
                let m = R::from_f64(MEAN[ch.min(2)]);
                let s = R::from_f64(1.0 / STD[ch.min(2)]);
                for v in data[(bi * c + ch) * hw..][..hw].iter_mut() {
                    *v = (*v - m) * s;
                }
            }
        }
        Tensor::from_vec(data, &shape).unwrap()
    }

    /// Attention weights for one pyramid level: ω = softmax(FC(concat(pooled
    /// or flattened per-lighting features))). Shape `[1,N]`. In mean mode
    /// this is the constant 1/N vector.
    pub fn attention_weights(&self, feats: &[FeaturePyramid<R>], level: usize) -> Result<Tensor<R>> {
        let n = self.config.n_lightings;
        if feats.len() != n {
            return Err(TensorError::DimMismatch {
                op: "attention_weights",
                axis: "n_lightings",
                expected: n,
                got: feats.len(),
            });
        }
        match (&self.attention, self.config.fusion) {
            (None, _) | (_, FusionMode::Mean) => Tensor::from_vec(vec![R::from_f64(1.0 / n as f64); n], &[1, n]),
            (Some(fcs), _) => {
                let mut parts = Vec::with_capacity(n);
                for f in feats {
                    let lv = &f.levels[level];
                    let v = if self.config.pooled_attention {
                        lv.global_avg_pool()?
                    } else {
                        lv.flatten()?
                    };
                    parts.push(v.reshape(&[1, v.numel()])?);
                }
                let cat = Tensor::concat(&parts, 1)?;
                fcs[level].forward(&cat)?.softmax(1)
            }
        }
    }

    /// Convex combination of per-lighting pyramids at every level with the
    /// given per-level weights.
    pub fn attention_fuse(feats: &[FeaturePyramid<R>], weights: &[Tensor<R>]) -> Result<FeaturePyramid<R>> {
        let n_levels = feats
            .first()
            .ok_or_else(|| TensorError::Invalid {
                op: "attention_fuse",
                msg: "no pyramids".into(),
            })?
            .levels
            .len();
        let mut levels = Vec::with_capacity(n_levels);
        for l in 0..n_levels {
            let parts: Vec<Tensor<R>> = feats.iter().map(|f| f.levels[l].clone()).collect();
            levels.push(Tensor::weighted_sum(&parts, &weights[l])?);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Weights for all levels plus the fused pyramid in one call.
    pub fn fuse(&self, feats: &[FeaturePyramid<R>]) -> Result<(FeaturePyramid<R>, Vec<Tensor<R>>)> {
        let n_levels = feats[0].levels.len();
        let mut weights = Vec::with_capacity(n_levels);
        for l in 0..n_levels {
            weights.push(self.attention_weights(feats, l)?);
        }
        let fused = Self::attention_fuse(feats, &weights)?;
        Ok((fused, weights))
    }

    /// Compress a fused pyramid to the coarse embedding `F_b`.
    pub fn bottleneck_forward(&self, fused: &FeaturePyramid<R>, train: bool) -> Result<Tensor<R>> {
        let b = &self.bottleneck;
        let d0 = b.down0b.forward(&b.down0a.forward(&fused.levels[0], train)?, train)?;
        let d1 = b.down1.forward(&fused.levels[1], train)?;
        let cat = Tensor::concat(&[d0, d1, fused.levels[2].clone()], 1)?;
        b.proj.forward(&cat, train)
    }

    /// Decode the embedding into a pyramid with teacher shapes.
    pub fn student_forward(&self, embedding: &Tensor<R>, train: bool) -> Result<FeaturePyramid<R>> {
        let s = &self.student;
        let h2 = s.head.forward(embedding, train)?;
        let out2 = s.out[2].forward(&h2)?;
        let h = s.up1.0.forward(&h2)?;
        let h = s.up1.1.forward(&h, train)?.relu();
        let h1 = s.up1.2.forward(&h, train)?;
        let out1 = s.out[1].forward(&h1)?;
        let h = s.up0.0.forward(&h1)?;
        let h = s.up0.1.forward(&h, train)?.relu();
        let h0 = s.up0.2.forward(&h, train)?;
        let out0 = s.out[0].forward(&h0)?;
        Ok(FeaturePyramid {
            levels: vec![out0, out1, out2],
        })
    }

    /// All parameters in a fixed order, teacher included.
    pub fn named_params(&self) -> Vec<(String, Tensor<R>)> {
        let mut out = Vec::new();
        let push_cbr = |out: &mut Vec<(String, Tensor<R>)>, name: &str, l: &ConvBnRelu<R>| {
            out.push((format!("{name}.conv.weight"), l.conv.weight.clone()));
            out.push((format!("{name}.conv.bias"), l.conv.bias.clone()));
            out.push((format!("{name}.bn.gamma"), l.bn.gamma.clone()));
            out.push((format!("{name}.bn.beta"), l.bn.beta.clone()));
        };
        push_cbr(&mut out, "teacher.stem", &self.teacher.stem);
        for (i, (down, keep)) in self.teacher.stages.iter().enumerate() {
            push_cbr(&mut out, &format!("teacher.stage{i}.down"), down);
            push_cbr(&mut out, &format!("teacher.stage{i}.keep"), keep);
        }
        if let Some(fcs) = &self.attention {
            for (l, fc) in fcs.iter().enumerate() {
                out.push((format!("attention.level{l}.weight"), fc.weight.clone()));
                out.push((format!("attention.level{l}.bias"), fc.bias.clone()));
            }
        }
        push_cbr(&mut out, "bottleneck.down0a", &self.bottleneck.down0a);
        push_cbr(&mut out, "bottleneck.down0b", &self.bottleneck.down0b);
        push_cbr(&mut out, "bottleneck.down1", &self.bottleneck.down1);
        push_cbr(&mut out, "bottleneck.proj", &self.bottleneck.proj);
        push_cbr(&mut out, "student.head", &self.student.head);
        for (name, up) in [("up1", &self.student.up1), ("up0", &self.student.up0)] {
            out.push((format!("student.{name}.convt.weight"), up.0.weight.clone()));
            out.push((format!("student.{name}.convt.bias"), up.0.bias.clone()));
            out.push((format!("student.{name}.bn.gamma"), up.1.gamma.clone()));
            out.push((format!("student.{name}.bn.beta"), up.1.beta.clone()));
            push_cbr(&mut out, &format!("student.{name}.post"), &up.2);
        }
        for (l, conv) in self.student.out.iter().enumerate() {
            out.push((format!("student.out{l}.weight"), conv.weight.clone()));
            out.push((format!("student.out{l}.bias"), conv.bias.clone()));
        }
        out
    }

    /// The exact trainable set: attention, bottleneck and student.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<R>)> {
        self.named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// Batch-norm running statistics, in a fixed order matching the blocks.
    pub fn named_buffers(&self) -> Vec<(String, &BatchNorm2d<R>)> {
        let mut out: Vec<(String, &BatchNorm2d<R>)> = Vec::new();
        out.push(("teacher.stem.bn".into(), &self.teacher.stem.bn));
        for (i, (down, keep)) in self.teacher.stages.iter().enumerate() {
            out.push((format!("teacher.stage{i}.down.bn"), &down.bn));
            out.push((format!("teacher.stage{i}.keep.bn"), &keep.bn));
        }
        out.push(("bottleneck.down0a.bn".into(), &self.bottleneck.down0a.bn));
        out.push(("bottleneck.down0b.bn".into(), &self.bottleneck.down0b.bn));
        out.push(("bottleneck.down1.bn".into(), &self.bottleneck.down1.bn));
        out.push(("bottleneck.proj.bn".into(), &self.bottleneck.proj.bn));
        out.push(("student.head.bn".into(), &self.student.head.bn));
        for (name, up) in [("up1", &self.student.up1), ("up0", &self.student.up0)] {
            out.push((format!("student.{name}.bn"), &up.1));
            out.push((format!("student.{name}.post.bn"), &up.2.bn));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// True when any parameter contains a non-finite value.
    pub fn has_non_finite(&self) -> bool {
        self.named_params().iter().any(|(_, t)| !t.is_finite())
    }
}

/// Split batched per-level teacher outputs `[N,C,H,W]` into N single-image
/// pyramids `[1,C,H,W]`. Inputs must be constants (teacher outputs are).
pub fn split_pyramids<R: Real>(levels: &[Tensor<R>], n: usize) -> Result<Vec<FeaturePyramid<R>>> {
    let mut pyramids: Vec<FeaturePyramid<R>> = (0..n).map(|_| FeaturePyramid { levels: Vec::new() }).collect();
    for lv in levels {
        let shape = lv.shape();
        if shape[0] != n {
            return Err(TensorError::DimMismatch {
                op: "split_pyramids",
                axis: "batch",
                expected: n,
                got: shape[0],
            });
        }
        let plane = lv.numel() / n;
        let sub_shape = [1, shape[1], shape[2], shape[3]];
        lv.with_data(|d| {
            for (j, pyr) in pyramids.iter_mut().enumerate() {
                pyr.levels
                    .push(Tensor::from_vec(d[j * plane..][..plane].to_vec(), &sub_shape).unwrap());
            }
        });
    }
    Ok(pyramids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(n: usize, fusion: FusionMode) -> ModelConfig {
        ModelConfig {
            n_lightings: n,
            image_size: 32,
            fusion,
            ..ModelConfig::default()
        }
    }

    fn toy_set(n: usize, size: usize, seed: u64) -> ImageSet<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| (0..3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        ImageSet::new("toy".into(), images, size, size, Label::Normal, None).unwrap()
    }

    #[test]
    fn level_shapes_contract() {
        let cfg = ModelConfig {
            image_size: 64,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.level_shapes(), vec![(64, 16), (128, 8), (256, 4)]);
    }

    #[test]
    fn teacher_shapes_match_contract() {
        let set = toy_set(2, 64, 1);
        let cfg = ModelConfig { n_lightings: 2, image_size: 64, ..ModelConfig::default() };
        let model = AfrdModel::<f32>::init(cfg, 0).unwrap();
        let feats = model.teacher_forward(&set).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].levels[0].shape(), &[1, 64, 16, 16]);
        assert_eq!(feats[0].levels[1].shape(), &[1, 128, 8, 8]);
        assert_eq!(feats[0].levels[2].shape(), &[1, 256, 4, 4]);
    }

    #[test]
    fn student_mirrors_teacher_shapes() {
        let set = toy_set(3, 32, 2);
        let model = AfrdModel::<f32>::init(tiny_config(3, FusionMode::Attention), 0).unwrap();
        let feats = model.teacher_forward(&set).unwrap();
        let (fused, _) = model.fuse(&feats).unwrap();
        let emb = model.bottleneck_forward(&fused, false).unwrap();
        let dec = model.student_forward(&emb, false).unwrap();
        for l in 0..3 {
            assert_eq!(dec.levels[l].shape(), fused.levels[l].shape());
        }
    }

    #[test]
    fn attention_weights_are_simplex() {
        let set = toy_set(4, 32, 3);
        let model = AfrdModel::<f32>::init(tiny_config(4, FusionMode::Attention), 7).unwrap();
        let feats = model.teacher_forward(&set).unwrap();
        for l in 0..3 {
            let w = model.attention_weights(&feats, l).unwrap().to_vec();
            assert_eq!(w.len(), 4);
            let sum: f32 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "simplex violated: {sum}");
            assert!(w.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn mean_mode_weights_uniform() {
        let set = toy_set(5, 32, 4);
        let model = AfrdModel::<f32>::init(tiny_config(5, FusionMode::Mean), 0).unwrap();
        let feats = model.teacher_forward(&set).unwrap();
        let w = model.attention_weights(&feats, 0).unwrap().to_vec();
        assert!(w.iter().all(|v| (*v - 0.2).abs() < 1e-7));
        assert!(model.attention.is_none());
    }

    #[test]
    fn single_lighting_weight_is_one() {
        let set = toy_set(1, 32, 5);
        let model = AfrdModel::<f32>::init(tiny_config(1, FusionMode::Single(0)), 0).unwrap();
        let feats = model.teacher_forward(&set).unwrap();
        let w = model.attention_weights(&feats, 0).unwrap().to_vec();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn one_hot_fusion_selects_pyramid() {
        let set = toy_set(3, 32, 6);
        let model = AfrdModel::<f32>::init(tiny_config(3, FusionMode::Attention), 0).unwrap();
        let feats = model.teacher_forward(&set).unwrap();
        let one_hot = Tensor::from_vec(vec![0.0f32, 1.0, 0.0], &[1, 3]).unwrap();
        let fused = AfrdModel::attention_fuse(&feats, &[one_hot.clone(), one_hot.clone(), one_hot]).unwrap();
        for l in 0..3 {
            assert_eq!(fused.levels[l].to_vec(), feats[1].levels[l].to_vec());
        }
    }

    #[test]
    fn uniform_fusion_is_permutation_invariant() {
        let set = toy_set(3, 32, 8);
        let model = AfrdModel::<f32>::init(tiny_config(3, FusionMode::Mean), 0).unwrap();
        let feats = model.teacher_forward(&set).unwrap();
        let (fused, w) = model.fuse(&feats).unwrap();
        let permuted = vec![feats[2].clone(), feats[0].clone(), feats[1].clone()];
        let fused_p = AfrdModel::attention_fuse(&permuted, &w).unwrap();
        for l in 0..3 {
            let a = fused.levels[l].to_vec();
            let b = fused_p.levels[l].to_vec();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn teacher_is_frozen_and_deterministic() {
        let set = toy_set(2, 32, 9);
        let model = AfrdModel::<f32>::init(tiny_config(2, FusionMode::Attention), 3).unwrap();
        let a = model.teacher_forward(&set).unwrap();
        let b = model.teacher_forward(&set).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            for (la, lb) in pa.levels.iter().zip(&pb.levels) {
                assert_eq!(la.to_vec(), lb.to_vec(), "teacher forward not bitwise stable");
                assert!(!la.requires_grad());
            }
        }
        for (name, p) in model.named_params() {
            if name.starts_with("teacher.") {
                assert!(!p.requires_grad(), "{name} must be frozen");
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = AfrdModel::<f32>::init(tiny_config(2, FusionMode::Attention), 5).unwrap();
        let b = AfrdModel::<f32>::init(tiny_config(2, FusionMode::Attention), 5).unwrap();
        let c = AfrdModel::<f32>::init(tiny_config(2, FusionMode::Attention), 6).unwrap();
        let (na, nb): (Vec<_>, Vec<_>) = (a.named_params(), b.named_params());
        assert_eq!(na.len(), nb.len());
        let mut any_differs = false;
        for ((name_a, pa), (_, pb)) in na.iter().zip(&nb) {
            assert_eq!(pa.to_vec(), pb.to_vec(), "{name_a} differs across same-seed inits");
        }
        for ((_, pa), (_, pc)) in na.iter().zip(&c.named_params()) {
            if pa.to_vec() != pc.to_vec() {
                any_differs = true;
            }
        }
        assert!(any_differs, "different seeds produced identical params");
    }

    #[test]
    fn fusion_mode_parse_roundtrip() {
        for s in ["attention", "mean", "single:0", "single:4"] {
            let m = FusionMode::parse(s).unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!(FusionMode::parse("single:x").is_err());
        assert!(FusionMode::parse("maximum").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.image_size = 50;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.fusion = FusionMode::Single(0);
        cfg.n_lightings = 6;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn image_set_rejects_bad_dims() {
        let img = vec![0.0f32; 10];
        assert!(ImageSet::new("x".into(), vec![img], 8, 8, Label::Normal, None).is_err());
        let img = vec![0.0f32; 3 * 64];
        let mask = vec![0u8; 3];
        assert!(ImageSet::new("x".into(), vec![img], 8, 8, Label::Normal, Some(mask)).is_err());
    }

    #[test]
    fn split_pyramids_roundtrip() {
        let lv = Tensor::<f32>::from_vec((0..2 * 3 * 2 * 2).map(|v| v as f32).collect(), &[2, 3, 2, 2]).unwrap();
        let pyrs = split_pyramids(&[lv.clone()], 2).unwrap();
        assert_eq!(pyrs.len(), 2);
        assert_eq!(pyrs[0].levels[0].shape(), &[1, 3, 2, 2]);
        assert_eq!(pyrs[1].levels[0].to_vec(), lv.to_vec()[12..].to_vec());
    }
}
