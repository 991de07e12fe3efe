//! On-disk dataset layout, the synthetic generator driver, and ingestion.
//!
//! Layout under a dataset root:
//!  - `index.csv` — `sample_id,split,label,mask_path,img_path_0..img_path_{N-1}`
//!  - `images/*.ppm` — P6, 8-bit
//!  - `masks/*.pgm` — P5, 0 = normal, 255 = anomalous
//!
//! Trees generated with the same spec and seed are byte-identical;
//! externally prepared trees in the same layout load the same way.

pub mod pnm;
pub mod synth;

pub use synth::{DefectKind, SampleGeometry, SceneSpec};

use crate::model::{ImageSet, Label};
use crate::tensor::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("sample '{sample}': missing lighting {lighting} file {path}")]
    MissingLighting {
        sample: String,
        lighting: usize,
        path: String,
    },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("invalid dataset: {0}")]
    Index(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub sample_id: String,
    pub split: Split,
    pub label: Label,
    pub mask_path: Option<String>,
    pub image_paths: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub n_lightings: usize,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn index_path(root: &Path) -> PathBuf {
        root.join("index.csv")
    }

    pub fn write(&self) -> Result<(), DataError> {
        let mut out = String::from("sample_id,split,label,mask_path");
        for j in 0..self.n_lightings {
            out.push_str(&format!(",img_path_{j}"));
        }
        out.push('\n');
        for e in &self.entries {
            let split = match e.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let label = match e.label {
                Label::Normal => "normal",
                Label::Anomalous => "anomalous",
            };
            out.push_str(&format!(
                "{},{},{},{}",
                e.sample_id,
                split,
                label,
                e.mask_path.as_deref().unwrap_or("")
            ));
            for p in &e.image_paths {
                out.push(',');
                out.push_str(p);
            }
            out.push('\n');
        }
        let path = Self::index_path(&self.root);
        std::fs::write(&path, out).map_err(io_err(&path))
    }

    pub fn read(root: &Path) -> Result<Self, DataError> {
        let path = Self::index_path(root);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DataError::Index("empty index.csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 5 || cols[0] != "sample_id" {
            return Err(DataError::Index(format!("unrecognized header '{header}'")));
        }
        let n_lightings = cols.len() - 4;
        let mut entries = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 + n_lightings {
                return Err(DataError::Index(format!(
                    "line {}: expected {} fields, got {}",
                    ln + 2,
                    4 + n_lightings,
                    fields.len()
                )));
            }
            let split = match fields[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(DataError::Index(format!("line {}: unknown split '{s}'", ln + 2))),
            };
            let label = match fields[2] {
                "normal" => Label::Normal,
                "anomalous" => Label::Anomalous,
                s => return Err(DataError::Index(format!("line {}: unknown label '{s}'", ln + 2))),
            };
            entries.push(IndexEntry {
                sample_id: fields[0].to_string(),
                split,
                label,
                mask_path: if fields[3].is_empty() {
                    None
                } else {
                    Some(fields[3].to_string())
                },
                image_paths: fields[4..].iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            n_lightings,
            entries,
        })
    }
}

/// Stable per-sample RNG stream so parallel rendering never changes bytes.
fn sample_rng(seed: u64, sample_id: &str) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in sample_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha12Rng::seed_from_u64(seed ^ h)
}

/// Render a full benchmark tree: `n_train` normal training sets plus a test
/// split of `n_test_normal` normals and `n_test_anomalous` defectives.
pub fn generate(
    spec: &SceneSpec,
    n_train: usize,
    n_test_normal: usize,
    n_test_anomalous: usize,
    out_dir: &Path,
) -> Result<DatasetIndex, DataError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir.join("images")).map_err(io_err(out_dir))?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(io_err(out_dir))?;

    let mut plan: Vec<(String, Split, bool)> = Vec::new();
    for i in 0..n_train {
        plan.push((format!("train_{i:04}"), Split::Train, false));
    }
    for i in 0..n_test_normal {
        plan.push((format!("test_normal_{i:04}"), Split::Test, false));
    }
    for i in 0..n_test_anomalous {
        plan.push((format!("test_anomalous_{i:04}"), Split::Test, true));
    }

    let s = spec.image_size;
    let entries: Vec<Result<IndexEntry, DataError>> = plan
        .par_iter()
        .map(|(id, split, anomalous)| {
            let mut rng = sample_rng(spec.seed, id);
            let sample = synth::render_sample(spec, &mut rng, *anomalous)?;
            let mut image_paths = Vec::with_capacity(spec.n_lightings);
            for (j, rgb) in sample.images.iter().enumerate() {
                let rel = format!("images/{id}_l{j}.ppm");
                let path = out_dir.join(&rel);
                std::fs::write(&path, pnm::encode_ppm(rgb, s, s)).map_err(io_err(&path))?;
                image_paths.push(rel);
            }
            let mask_path = match &sample.mask {
                Some(mask) => {
                    let rel = format!("masks/{id}.pgm");
                    let bytes: Vec<u8> = mask.iter().map(|m| if *m != 0 { 255 } else { 0 }).collect();
                    let path = out_dir.join(&rel);
                    std::fs::write(&path, pnm::encode_pgm(&bytes, s, s)).map_err(io_err(&path))?;
                    Some(rel)
                }
                None => None,
            };
            Ok(IndexEntry {
                sample_id: id.clone(),
                split: *split,
                label: if *anomalous { Label::Anomalous } else { Label::Normal },
                mask_path,
                image_paths,
            })
        })
        .collect();
    let entries: Vec<IndexEntry> = entries.into_iter().collect::<Result<_, _>>()?;

    let index = DatasetIndex {
        root: out_dir.to_path_buf(),
        n_lightings: spec.n_lightings,
        entries,
    };
    index.write()?;
    Ok(index)
}

/// Load a dataset tree into train/test image sets, images decoded to
/// `[0,1]` floats, masks binarized at 128.
pub fn load_dataset<R: Real>(root: &Path) -> Result<(Vec<ImageSet<R>>, Vec<ImageSet<R>>), DataError> {
    let index = DatasetIndex::read(root)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &index.entries {
        let mut images = Vec::with_capacity(e.image_paths.len());
        let mut dims: Option<(usize, usize)> = None;
        for (j, rel) in e.image_paths.iter().enumerate() {
            let path = root.join(rel);
            let bytes = std::fs::read(&path).map_err(|_| DataError::MissingLighting {
                sample: e.sample_id.clone(),
                lighting: j,
                path: path.display().to_string(),
            })?;
            let (w, h, rgb) = pnm::decode_ppm(&bytes, &path)?;
            if let Some((pw, ph)) = dims {
                if (w, h) != (pw, ph) {
                    return Err(DataError::Format {
                        path: path.display().to_string(),
                        msg: format!(
                            "sample '{}' lighting {} is {}x{}, others are {}x{}",
                            e.sample_id, j, w, h, pw, ph
                        ),
                    });
                }
            } else {
                dims = Some((w, h));
            }
            // interleaved u8 -> planar [3,H,W] floats
            let mut planar = vec![R::zero(); 3 * w * h];
            for i in 0..w * h {
                for c in 0..3 {
                    planar[c * w * h + i] = R::from_f64(rgb[3 * i + c] as f64 / 255.0);
                }
            }
            images.push(planar);
        }
        let (w, h) = dims.ok_or_else(|| DataError::Index(format!("sample '{}' has no images", e.sample_id)))?;
        let mask = match &e.mask_path {
            Some(rel) => {
                let path = root.join(rel);
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                let (mw, mh, gray) = pnm::decode_pgm(&bytes, &path)?;
                if (mw, mh) != (w, h) {
                    return Err(DataError::Format {
                        path: path.display().to_string(),
                        msg: format!("mask is {mw}x{mh}, images are {w}x{h}"),
                    });
                }
                Some(gray.iter().map(|v| u8::from(*v >= 128)).collect())
            }
            None => None,
        };
        let set = ImageSet::new(e.sample_id.clone(), images, h, w, e.label, mask).map_err(|err| {
            DataError::Index(err.to_string())
        })?;
        match e.split {
            Split::Train => train.push(set),
            Split::Test => test.push(set),
        }
    }
    Ok((train, test))
}

/// SHA-256 over the dataset proper: the index and every file it
/// references, as sorted relative paths plus contents. Unrelated files in
/// the tree (logs, config echoes) do not affect the hash.
pub fn tree_hash(root: &Path) -> Result<String, DataError> {
    let index = DatasetIndex::read(root)?;
    let mut files = vec!["index.csv".to_string()];
    for e in &index.entries {
        files.extend(e.image_paths.iter().cloned());
        if let Some(m) = &e.mask_path {
            files.push(m.clone());
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        let path = root.join(rel);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        hasher.update(&bytes);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec::with_lightings(3, 32, seed)
    }

    #[test]
    fn generate_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate(&small_spec(1), 4, 2, 2, dir.path()).unwrap();
        assert_eq!(index.entries.len(), 8);
        let (train, test) = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 4);
        for set in &train {
            assert_eq!(set.label, Label::Normal);
            assert_eq!(set.n_lightings(), 3);
            assert!(set.mask.is_none());
        }
        let anomalous: Vec<_> = test.iter().filter(|s| s.label == Label::Anomalous).collect();
        assert_eq!(anomalous.len(), 2);
        for set in anomalous {
            let mask = set.mask.as_ref().expect("anomalous sample has a mask");
            assert!(mask.iter().any(|m| *m != 0));
        }
        // all pixels land in [0,1]
        for set in &test {
            for img in &set.images {
                assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn index_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate(&small_spec(2), 2, 1, 1, dir.path()).unwrap();
        let read = DatasetIndex::read(dir.path()).unwrap();
        assert_eq!(read.n_lightings, index.n_lightings);
        assert_eq!(read.entries.len(), index.entries.len());
        for (a, b) in read.entries.iter().zip(&index.entries) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.split, b.split);
            assert_eq!(a.label, b.label);
            assert_eq!(a.mask_path, b.mask_path);
            assert_eq!(a.image_paths, b.image_paths);
        }
    }

    #[test]
    fn generation_is_deterministic_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&small_spec(7), 3, 1, 1, d1.path()).unwrap();
        generate(&small_spec(7), 3, 1, 1, d2.path()).unwrap();
        assert_eq!(tree_hash(d1.path()).unwrap(), tree_hash(d2.path()).unwrap());
        let d3 = tempfile::tempdir().unwrap();
        generate(&small_spec(8), 3, 1, 1, d3.path()).unwrap();
        assert_ne!(tree_hash(d1.path()).unwrap(), tree_hash(d3.path()).unwrap());
    }

    #[test]
    fn missing_lighting_file_names_sample_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate(&small_spec(3), 2, 1, 0, dir.path()).unwrap();
        let victim = dir.path().join(&index.entries[1].image_paths[2]);
        std::fs::remove_file(&victim).unwrap();
        let err = match load_dataset::<f32>(dir.path()) {
            Err(e) => e,
            Ok(_) => panic!("load should fail"),
        };
        match err {
            DataError::MissingLighting { sample, lighting, .. } => {
                assert_eq!(sample, index.entries[1].sample_id);
                assert_eq!(lighting, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn corrupt_image_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate(&small_spec(4), 1, 1, 0, dir.path()).unwrap();
        let victim = dir.path().join(&index.entries[0].image_paths[0]);
        std::fs::write(&victim, b"P6 not really").unwrap();
        assert!(matches!(
            load_dataset::<f32>(dir.path()),
            Err(DataError::Format { .. })
        ));
    }

    #[test]
    fn missing_index_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            DatasetIndex::read(dir.path()),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn sample_rng_streams_are_independent() {
        use rand::RngCore;
        let mut a = sample_rng(1, "train_0000");
        let mut b = sample_rng(1, "train_0001");
        let mut c = sample_rng(2, "train_0000");
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
        let mut a2 = sample_rng(1, "train_0000");
        assert_eq!(a2.next_u64(), x);
    }
}
