//! Bags of patch embeddings: synthetic generation, the SGCD binary bag
//! format, and TSV manifests with train/test splits.
//!
//! Bag files are bit-exact: magic "SGCD", u32 version = 1, u32 M, u32 D,
//! then M*D little-endian f32, row-major. Patch embeddings are therefore
//! held f32-quantized in memory so write/load is the identity.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const BAG_MAGIC: [u8; 4] = *b"SGCD";
pub const BAG_VERSION: u32 = 1;

/// One slide: its patch-embedding matrix plus label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub slide_id: String,
    /// M x D_patch, every entry exactly representable as f32.
    pub embeddings: Matrix,
    pub label: usize,
}

impl PatchBag {
    pub fn new(slide_id: String, mut embeddings: Matrix, label: usize) -> Result<Self> {
        if embeddings.rows() == 0 || embeddings.cols() == 0 {
            return Err(Error::Input(format!("bag '{slide_id}' has no patches or zero dim")));
        }
        if !embeddings.is_finite() {
            return Err(Error::Input(format!("bag '{slide_id}' has non-finite embeddings")));
        }
        for v in embeddings.data_mut() {
            *v = *v as f32 as f64;
        }
        Ok(PatchBag { slide_id, embeddings, label })
    }

    pub fn patches(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Parameters of the synthetic bag generator: a per-class Gaussian component
/// plus a shared background component at the origin, mixed per patch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub patch_dim: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    /// Fraction of patches drawn from the class component (rest: background).
    pub signal_fraction: f64,
    /// Scale of the class-mean draws.
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
    /// Shared covariance scale of both components.
    #[serde(default = "default_cov_scale")]
    pub cov_scale: f64,
    pub seed: u64,
}

fn default_mean_scale() -> f64 {
    1.0
}

fn default_cov_scale() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.train_per_class == 0 {
            return Err(Error::Parameter("synthetic spec needs >= 1 class and >= 1 train slide per class".into()));
        }
        if self.patch_dim == 0 {
            return Err(Error::Parameter("synthetic patch dim must be >= 1".into()));
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return Err(Error::Parameter(format!(
                "invalid patches range [{}, {}]",
                self.patches_min, self.patches_max
            )));
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) {
            return Err(Error::Parameter(format!(
                "signal fraction must be in [0, 1], got {}",
                self.signal_fraction
            )));
        }
        Ok(())
    }
}

/// Bags plus split assignments. Split index sets are disjoint and exhaustive;
/// every class appears in the train split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub bags: Vec<PatchBag>,
    pub class_count: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(
        bags: Vec<PatchBag>,
        class_count: usize,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = bags.len();
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= n {
                return Err(Error::Index(format!("split index {i} out of range for {n} bags")));
            }
            if seen[i] {
                return Err(Error::Input(format!("bag {i} assigned to more than one split")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Input("split assignments do not cover every bag".into()));
        }
        for bag in &bags {
            if bag.label >= class_count {
                return Err(Error::Input(format!(
                    "bag '{}' label {} >= class count {}",
                    bag.slide_id, bag.label, class_count
                )));
            }
        }
        let mut train_classes = HashSet::new();
        for &i in &train {
            train_classes.insert(bags[i].label);
        }
        if train_classes.len() != class_count {
            return Err(Error::Input(format!(
                "train split covers {} of {} classes",
                train_classes.len(),
                class_count
            )));
        }
        Ok(Dataset { bags, class_count, train, val, test })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }
}

/// Deterministic synthetic dataset for a fixed seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Matrix> = (0..spec.class_count)
        .map(|_| Matrix::randn(1, spec.patch_dim, spec.mean_scale, &mut rng))
        .collect();

    let mut bags = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..spec.class_count {
        for s in 0..spec.train_per_class + spec.test_per_class {
            let is_train = s < spec.train_per_class;
            let m = rng.gen_range(spec.patches_min..=spec.patches_max);
            let mut emb = Matrix::randn(m, spec.patch_dim, spec.cov_scale, &mut rng);
            for i in 0..m {
                let from_class = rng.gen_range(0.0..1.0) < spec.signal_fraction;
                if from_class {
                    let mean = means[c].row(0);
                    for (v, mu) in emb.row_mut(i).iter_mut().zip(mean) {
                        *v += mu;
                    }
                }
            }
            let split = if is_train { "train" } else { "test" };
            let bag = PatchBag::new(format!("syn_{split}_c{c}_s{s}"), emb, c)?;
            if is_train {
                train.push(bags.len());
            } else {
                test.push(bags.len());
            }
            bags.push(bag);
        }
    }
    Dataset::new(bags, spec.class_count, train, vec![], test)
}

pub fn write_bag_file(bag: &PatchBag, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + bag.embeddings.data().len() * 4);
    buf.extend_from_slice(&BAG_MAGIC);
    buf.extend_from_slice(&BAG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bag.patches() as u32).to_le_bytes());
    buf.extend_from_slice(&(bag.dim() as u32).to_le_bytes());
    for &v in bag.embeddings.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load a bag with an explicit slide id and label (manifests carry both).
pub fn load_bag_file_with(path: &Path, slide_id: &str, label: usize) -> Result<PatchBag> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let need = |offset: u64, n: usize, what: &str| -> Result<()> {
        if bytes.len() < offset as usize + n {
            Err(Error::Format { offset, msg: format!("truncated while reading {what}") })
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if bytes[0..4] != BAG_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {:?}, expected \"SGCD\"", &bytes[0..4]) });
    }
    need(4, 4, "version")?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BAG_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}, expected {BAG_VERSION}") });
    }
    need(8, 8, "shape")?;
    let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = m
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format { offset: 8, msg: format!("shape {m}x{d} overflows") })?;
    need(16, payload, "embedding payload")?;
    if bytes.len() != 16 + payload {
        return Err(Error::Format {
            offset: (16 + payload) as u64,
            msg: format!("{} trailing bytes after payload", bytes.len() - 16 - payload),
        });
    }
    let mut data = Vec::with_capacity(m * d);
    for k in 0..m * d {
        let off = 16 + k * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        data.push(v as f64);
    }
    PatchBag::new(slide_id.to_string(), Matrix::new(m, d, data)?, label)
}

/// Load a bag, deriving the slide id from the file stem (label defaults to 0).
pub fn load_bag_file(path: &Path) -> Result<PatchBag> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bag".to_string());
    load_bag_file_with(path, &stem, 0)
}

/// One manifest record: slide id, bag path, label.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub path: PathBuf,
    pub label: usize,
}

/// Parse a UTF-8 TSV manifest: `slide_id\tpath\tlabel`, `#` comments ignored.
/// Preserves order; rejects malformed lines (with line number) and duplicate ids.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let label: usize = fields[2].trim().parse().map_err(|_| Error::Manifest {
            line: lineno,
            msg: format!("label '{}' is not a non-negative integer", fields[2]),
        })?;
        let slide_id = fields[0].to_string();
        if !ids.insert(slide_id.clone()) {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!("duplicate slide_id '{slide_id}'"),
            });
        }
        out.push(ManifestEntry { slide_id, path: PathBuf::from(fields[1]), label });
    }
    Ok(out)
}

/// Load every bag listed in a manifest. Paths are resolved relative to the
/// manifest's directory unless absolute.
pub fn load_manifest_bags(manifest_path: &Path) -> Result<Vec<PatchBag>> {
    let entries = parse_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    entries
        .iter()
        .map(|e| {
            let p = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
            load_bag_file_with(&p, &e.slide_id, e.label)
        })
        .collect()
}
