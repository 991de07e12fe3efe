//! Deterministic synthetic multi-lighting sample renderer.
//!
//! A sample is a corrugated height field with a near-uniform albedo, shaded
//! with a Lambertian model under N directional lights:
//! `intensity = albedo · max(0, n̂·l̂) + ambient`. Geometric defects (bump,
//! dent, scratch) perturb the height field, so their contrast depends on
//! the light direction; stains perturb the albedo and are visible under
//! every lighting.

use super::DataError;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub const AMBIENT: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    Bump,
    Dent,
    Scratch,
    Stain,
}

impl DefectKind {
    pub fn all() -> Vec<DefectKind> {
        vec![DefectKind::Bump, DefectKind::Dent, DefectKind::Scratch, DefectKind::Stain]
    }

    pub fn is_geometric(self) -> bool {
        !matches!(self, DefectKind::Stain)
    }
}

/// Scene description for the generator.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub n_lightings: usize,
    pub image_size: usize,
    /// Unit direction vectors pointing from the surface toward each light.
    pub light_directions: Vec<[f64; 3]>,
    /// Fraction of anomalous samples when a split does not give explicit
    /// counts (the CLI always does; kept for external callers).
    pub anomaly_rate: f64,
    pub defect_kinds: Vec<DefectKind>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_lightings: 6,
            image_size: 64,
            light_directions: default_lights(6),
            anomaly_rate: 0.5,
            defect_kinds: DefectKind::all(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn with_lightings(n: usize, image_size: usize, seed: u64) -> Self {
        SceneSpec {
            n_lightings: n,
            image_size,
            light_directions: default_lights(n),
            seed,
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_lightings != self.light_directions.len() {
            return Err(DataError::Spec(format!(
                "n_lightings {} != {} light directions",
                self.n_lightings,
                self.light_directions.len()
            )));
        }
        if self.image_size < 16 {
            return Err(DataError::Spec("image_size must be >= 16".into()));
        }
        if self.defect_kinds.is_empty() {
            return Err(DataError::Spec("at least one defect kind required".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(DataError::Spec("anomaly_rate must be in [0,1]".into()));
        }
        for l in &self.light_directions {
            let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(DataError::Spec(format!("light direction {l:?} is not unit-norm")));
            }
        }
        Ok(())
    }
}

/// N directions with equally spaced azimuths and deliberately unequal
/// elevations; for N = 6 the last one is near-vertical, loosely mirroring a
/// light box with corner lights plus a camera light. Lower lights cast
/// stronger relief shading, so the elevation mix makes defect visibility
/// genuinely lighting-dependent; every elevation still keeps the whole
/// default surface family lit (`n̂·l̂ > 0`).
pub fn default_lights(n: usize) -> Vec<[f64; 3]> {
    const ELEVS: [f64; 5] = [30.0, 65.0, 35.0, 70.0, 45.0];
    let mut out = Vec::with_capacity(n);
    let ring = if n == 6 { 5 } else { n };
    for i in 0..ring {
        let az = 2.0 * std::f64::consts::PI * i as f64 / ring as f64;
        let elev = ELEVS[i % ELEVS.len()].to_radians();
        out.push([elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()]);
    }
    if n == 6 {
        let e = 80f64.to_radians();
        out.push([e.cos(), 0.0, e.sin()]);
    }
    out
}

/// Height field plus per-channel albedo; the ground truth a shading oracle
/// needs to reproduce any rendered pixel.
#[derive(Debug, Clone)]
pub struct SampleGeometry {
    pub size: usize,
    /// `[S,S]` height in pixel units.
    pub height: Vec<f64>,
    /// `[3,S,S]` per-channel albedo in `[0,1]`.
    pub albedo: Vec<f64>,
}

/// Inward normal from central differences of the height field, indices
/// clamped at the border.
pub fn surface_normal(height: &[f64], size: usize, x: usize, y: usize) -> [f64; 3] {
    let at = |xx: isize, yy: isize| -> f64 {
        let xx = xx.clamp(0, size as isize - 1) as usize;
        let yy = yy.clamp(0, size as isize - 1) as usize;
        height[yy * size + xx]
    };
    let dx = (at(x as isize + 1, y as isize) - at(x as isize - 1, y as isize)) / 2.0;
    let dy = (at(x as isize, y as isize + 1) - at(x as isize, y as isize - 1)) / 2.0;
    let norm = (dx * dx + dy * dy + 1.0).sqrt();
    [-dx / norm, -dy / norm, 1.0 / norm]
}

/// Lambertian shading of the whole geometry under one light: returns a
/// float `[3,S,S]` image in `[0,1]` (pre-quantization).
pub fn shade(geom: &SampleGeometry, light: &[f64; 3]) -> Vec<f64> {
    let s = geom.size;
    let mut out = vec![0f64; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let n = surface_normal(&geom.height, s, x, y);
            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            for c in 0..3 {
                let v = geom.albedo[c * s * s + y * s + x] * lambert + AMBIENT;
                out[c * s * s + y * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Defect-free object: a brushed corrugated surface. It models a machined
/// part under repeated inspection: the ridge pattern is the same for every
/// sample up to small manufacturing jitter in frequency, orientation, phase
/// and depth, so the normal class is a tight family a model can learn from
/// a modest training split.
pub fn base_geometry(spec: &SceneSpec, rng: &mut ChaCha12Rng) -> SampleGeometry {
    let s = spec.image_size;
    let sf = s as f64;
    let mut height = vec![0f64; s * s];
    let cycles = 6.0 + rng.gen_range(-0.02..0.02);
    let theta = rng.gen_range(-0.01..0.01f64);
    let phase = rng.gen_range(-0.04..0.04f64);
    let amp = 0.55 + rng.gen_range(-0.02..0.02);
    let (ct, st) = (theta.cos(), theta.sin());
    let k = std::f64::consts::TAU * cycles / sf;
    for y in 0..s {
        for x in 0..s {
            let u = x as f64 * ct + y as f64 * st;
            height[y * s + x] = amp * (k * u + phase).sin();
        }
    }
    // gentle overall bow so the surface is not perfectly flat on average
    add_gaussian(&mut height, s, sf / 2.0, sf / 2.0, sf / 2.5, 0.75 + rng.gen_range(-0.05..0.05));
    // Per-sample machining micro-texture: smoothed isotropic height noise,
    // fresh for every sample. It sets the detection floor — a defect is
    // only visible to a light that raises its local contrast above the
    // texture's — so the floor cannot be memorized away.
    let tex_amp = 1.1 + rng.gen_range(-0.1..0.1);
    let noise: Vec<f64> = (0..s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, s as i64 - 1) as usize;
                    let yy = (y as i64 + dy).clamp(0, s as i64 - 1) as usize;
                    acc += noise[yy * s + xx];
                }
            }
            height[y * s + x] += tex_amp * acc / 9.0;
        }
    }
    let mut albedo = vec![0f64; 3 * s * s];
    let gray = 0.60 + rng.gen_range(-0.01..0.01);
    let base: [f64; 3] = [
        gray + rng.gen_range(-0.01..0.01),
        gray + rng.gen_range(-0.01..0.01),
        gray + rng.gen_range(-0.01..0.01),
    ];
    for c in 0..3 {
        albedo[c * s * s..(c + 1) * s * s].fill(base[c]);
    }
    for v in albedo.iter_mut() {
        *v = v.clamp(0.05, 0.95);
    }
    SampleGeometry { size: s, height, albedo }
}

fn add_gaussian(field: &mut [f64], s: usize, cx: f64, cy: f64, sigma: f64, amp: f64) {
    for y in 0..s {
        for x in 0..s {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            field[y * s + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Pixel-scale striated height noise under a Gaussian window: a random 1-D
/// profile swept along a random direction, so all added slope lies across
/// the striations and the texture is nearly invisible to lights shining
/// along them.
fn add_striations(field: &mut [f64], s: usize, cx: f64, cy: f64, sigma: f64, amp: f64, rng: &mut ChaCha12Rng) {
    let alpha = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (alpha.cos(), alpha.sin());
    let profile: Vec<f64> = (0..2 * s + 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for y in 0..s {
        for x in 0..s {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            let t = x as f64 * ca + y as f64 * sa + s as f64 / 2.0;
            let i = t.floor() as usize;
            let frac = t - t.floor();
            let v = profile[i] * (1.0 - frac) + profile[i + 1] * frac;
            field[y * s + x] += amp * w * v;
        }
    }
}

/// Apply one defect, returning the perturbed geometry and its binary mask.
/// The mask marks photometric defect support: every pixel whose rendering
/// differs visibly (more than one quantization step in mean gray) from the
/// defect-free rendering under at least one of the given lights.
pub fn apply_defect(
    base: &SampleGeometry,
    kind: DefectKind,
    lights: &[[f64; 3]],
    rng: &mut ChaCha12Rng,
) -> (SampleGeometry, Vec<u8>) {
    let s = base.size;
    let sf = s as f64;
    let mut geom = base.clone();
    // Keep defects away from the border so masks stay fully visible.
    let margin = sf / 8.0;
    let cx = rng.gen_range(margin..sf - margin);
    let cy = rng.gen_range(margin..sf - margin);
    match kind {
        DefectKind::Bump | DefectKind::Dent => {
            let amp = rng.gen_range(sf / 220.0..sf / 140.0) * if kind == DefectKind::Dent { -1.0 } else { 1.0 };
            let sigma = rng.gen_range(sf / 16.0..sf / 10.0);
            add_gaussian(&mut geom.height, s, cx, cy, sigma, amp);
            // A deformation spoils the surface finish, but not isotropically:
            // the striations run along one direction, so only lights with an
            // azimuth component across them pick up the damaged interior.
            // The smooth part is kept below the visibility floor so detection
            // hinges on the directional part.
            let stri = rng.gen_range(sf / 56.0..sf / 36.0);
            add_striations(&mut geom.height, s, cx, cy, sigma, stri, rng);
        }
        DefectKind::Scratch => {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let half_len = rng.gen_range(sf / 10.0..sf / 4.5);
            let width = rng.gen_range(1.0..1.6);
            let depth = rng.gen_range(sf / 54.0..sf / 30.0);
            let (dx, dy) = (angle.cos(), angle.sin());
            for y in 0..s {
                for x in 0..s {
                    // distance to the centered segment
                    let px = x as f64 - cx;
                    let py = y as f64 - cy;
                    let t = (px * dx + py * dy).clamp(-half_len, half_len);
                    let qx = px - t * dx;
                    let qy = py - t * dy;
                    let d2 = qx * qx + qy * qy;
                    geom.height[y * s + x] -= depth * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
        DefectKind::Stain => {
            let rx = rng.gen_range(sf / 16.0..sf / 7.0);
            let ry = rng.gen_range(sf / 16.0..sf / 7.0);
            // A discoloration, not a shadow: per-channel factors differ, so
            // the stain rotates the local color direction instead of only
            // scaling intensity (which cosine-based scoring cannot see).
            let factor = [
                rng.gen_range(0.86..0.94),
                rng.gen_range(0.70..0.82),
                rng.gen_range(0.62..0.75),
            ];
            for y in 0..s {
                for x in 0..s {
                    let rho2 = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                    if rho2 < 1.0 {
                        let w = 1.0 - rho2;
                        for c in 0..3 {
                            let a = &mut geom.albedo[c * s * s + y * s + x];
                            *a *= 1.0 - (1.0 - factor[c]) * w;
                        }
                    }
                }
            }
        }
    }
    let mask = visibility_mask(base, &geom, lights);
    (geom, mask)
}

/// Photometric defect support: pixels whose mean-gray rendering differs from
/// the defect-free rendering by more than one quantization step under at
/// least one light.
fn visibility_mask(base: &SampleGeometry, perturbed: &SampleGeometry, lights: &[[f64; 3]]) -> Vec<u8> {
    let s = base.size;
    let mut mask = vec![0u8; s * s];
    for l in lights {
        let a = shade(base, l);
        let b = shade(perturbed, l);
        for i in 0..s * s {
            let ga = (a[i] + a[s * s + i] + a[2 * s * s + i]) / 3.0;
            let gb = (b[i] + b[s * s + i] + b[2 * s * s + i]) / 3.0;
            if (ga - gb).abs() > 4.0 / 255.0 {
                mask[i] = 1;
            }
        }
    }
    mask
}

/// Mean in-mask absolute gray-level difference between the defective and
/// defect-free renderings, per lighting.
pub fn per_light_contrast(base: &SampleGeometry, defective: &SampleGeometry, mask: &[u8], lights: &[[f64; 3]]) -> Vec<f64> {
    let s = base.size;
    let n_mask = mask.iter().filter(|m| **m != 0).count().max(1) as f64;
    lights
        .iter()
        .map(|l| {
            let a = shade(base, l);
            let b = shade(defective, l);
            let mut acc = 0.0;
            for i in 0..s * s {
                if mask[i] != 0 {
                    let ga = (a[i] + a[s * s + i] + a[2 * s * s + i]) / 3.0;
                    let gb = (b[i] + b[s * s + i] + b[2 * s * s + i]) / 3.0;
                    acc += (ga - gb).abs();
                }
            }
            acc / n_mask
        })
        .collect()
}

/// A fully rendered sample: quantized per-lighting images plus mask.
pub struct RenderedSample {
    pub images: Vec<Vec<u8>>, // interleaved RGB per lighting
    pub mask: Option<Vec<u8>>,
    pub geometry: SampleGeometry,
}

/// Render a sample deterministically from its RNG stream. Anomalous
/// geometric defects are resampled until their in-mask contrast differs by
/// at least 2x across lightings (the multi-lighting premise of the
/// benchmark); failure after many attempts is an error.
pub fn render_sample(spec: &SceneSpec, rng: &mut ChaCha12Rng, anomalous: bool) -> Result<RenderedSample, DataError> {
    let base = base_geometry(spec, rng);
    let (geom, mask) = if anomalous {
        let mut chosen = None;
        for _attempt in 0..64 {
            let kind = spec.defect_kinds[rng.gen_range(0..spec.defect_kinds.len())];
            let (geom, mask) = apply_defect(&base, kind, &spec.light_directions, rng);
            if mask.iter().all(|m| *m == 0) {
                continue;
            }
            if kind.is_geometric() {
                let contrast = per_light_contrast(&base, &geom, &mask, &spec.light_directions);
                let max = contrast.iter().cloned().fold(0.0f64, f64::max);
                let min = contrast.iter().cloned().fold(f64::INFINITY, f64::min);
                if max < 2.0 * min.max(1e-4) {
                    continue;
                }
            }
            chosen = Some((geom, mask));
            break;
        }
        let (geom, mask) = chosen.ok_or_else(|| {
            DataError::Spec("could not realize a directionally visible defect; check lighting geometry".into())
        })?;
        (geom, Some(mask))
    } else {
        (base.clone(), None)
    };
    let s = spec.image_size;
    let images = spec
        .light_directions
        .iter()
        .map(|l| {
            let planar = shade(&geom, l);
            // planar [3,S,S] float -> interleaved RGB u8
            let mut rgb = vec![0u8; 3 * s * s];
            for i in 0..s * s {
                for c in 0..3 {
                    rgb[3 * i + c] = quantize(planar[c * s * s + i]);
                }
            }
            rgb
        })
        .collect();
    Ok(RenderedSample {
        images,
        mask,
        geometry: geom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn flat_geometry(size: usize, albedo: f64) -> SampleGeometry {
        SampleGeometry {
            size,
            height: vec![0.0; size * size],
            albedo: vec![albedo; 3 * size * size],
        }
    }

    #[test]
    fn flat_surface_under_zenith_light_is_albedo_plus_ambient() {
        let geom = flat_geometry(8, 0.6);
        let img = shade(&geom, &[0.0, 0.0, 1.0]);
        for v in img {
            assert!((v - (0.6 + AMBIENT)).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_surface_under_grazing_light_is_ambient_only() {
        let geom = flat_geometry(8, 0.6);
        let img = shade(&geom, &[1.0, 0.0, 0.0]);
        for v in img {
            assert!((v - AMBIENT).abs() < 1e-12);
        }
    }

    #[test]
    fn surface_normal_matches_analytic_plane() {
        // height = 0.5·x → gradient (0.5, 0), normal ∝ (−0.5, 0, 1).
        let size = 8;
        let mut height = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                height[y * size + x] = 0.5 * x as f64;
            }
        }
        let n = surface_normal(&height, size, 4, 4);
        let len = (0.25f64 + 1.0).sqrt();
        assert!((n[0] - (-0.5 / len)).abs() < 1e-12);
        assert!(n[1].abs() < 1e-12);
        assert!((n[2] - 1.0 / len).abs() < 1e-12);
    }

    #[test]
    fn shading_matches_pixel_oracle() {
        // Independent recomputation of one rendered pixel from the geometry.
        let spec = SceneSpec::default();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let geom = base_geometry(&spec, &mut rng);
        let light = &spec.light_directions[2];
        let img = shade(&geom, light);
        let s = geom.size;
        for &(x, y) in &[(0usize, 0usize), (13, 7), (31, 50), (63, 63)] {
            let n = surface_normal(&geom.height, s, x, y);
            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            for c in 0..3 {
                let want = (geom.albedo[c * s * s + y * s + x] * lambert + AMBIENT).clamp(0.0, 1.0);
                assert!((img[c * s * s + y * s + x] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_lights_are_unit_norm() {
        for n in [1, 2, 5, 6] {
            for l in default_lights(n) {
                let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
            assert_eq!(default_lights(n).len(), n);
        }
    }

    #[test]
    fn every_defect_kind_yields_nonempty_mask() {
        let spec = SceneSpec::default();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let base = base_geometry(&spec, &mut rng);
        for kind in DefectKind::all() {
            let (geom, mask) = apply_defect(&base, kind, &spec.light_directions, &mut rng);
            assert!(mask.iter().any(|m| *m == 1), "{kind:?} mask empty");
            assert_eq!(mask.len(), spec.image_size * spec.image_size);
            if kind.is_geometric() {
                assert_ne!(geom.height, base.height);
                assert_eq!(geom.albedo, base.albedo);
            } else {
                assert_eq!(geom.height, base.height);
                assert_ne!(geom.albedo, base.albedo);
            }
        }
    }

    #[test]
    fn anomalous_render_satisfies_directional_visibility() {
        let spec = SceneSpec::default();
        for seed in 0..8 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let sample = render_sample(&spec, &mut rng, true).unwrap();
            let mask = sample.mask.expect("anomalous sample has a mask");
            assert!(mask.iter().any(|m| *m == 1));
            assert_eq!(sample.images.len(), spec.n_lightings);
        }
    }

    #[test]
    fn render_is_deterministic_for_a_seed() {
        let spec = SceneSpec::default();
        let a = render_sample(&spec, &mut ChaCha12Rng::seed_from_u64(5), true).unwrap();
        let b = render_sample(&spec, &mut ChaCha12Rng::seed_from_u64(5), true).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.mask, b.mask);
        let c = render_sample(&spec, &mut ChaCha12Rng::seed_from_u64(6), true).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn rendered_pixels_match_quantized_shading() {
        let spec = SceneSpec::default();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let sample = render_sample(&spec, &mut rng, false).unwrap();
        let s = spec.image_size;
        for (j, light) in spec.light_directions.iter().enumerate() {
            let planar = shade(&sample.geometry, light);
            for i in 0..s * s {
                for c in 0..3 {
                    assert_eq!(sample.images[j][3 * i + c], quantize(planar[c * s * s + i]));
                }
            }
        }
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut spec = SceneSpec::default();
        spec.light_directions.pop();
        assert!(spec.validate().is_err());
        let spec = SceneSpec {
            light_directions: vec![[1.0, 1.0, 0.0]; 6],
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = SceneSpec {
            image_size: 8,
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(SceneSpec::default().validate().is_ok());
    }
}
