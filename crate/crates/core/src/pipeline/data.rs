//! Synthetic identity datasets and the on-disk dataset format.
//!
//! The generator plants latent group structure: group centers sit on the
//! unit hypersphere, identity centers are renormalized perturbations of
//! their group center (round-robin assignment), and samples are noisy
//! copies of identity centers. The planted group labels are kept for
//! analysis only; training never sees them. Feature values are quantized
//! through `f32` at generation time so in-memory data and the binary files
//! (which store 32-bit floats) agree bit for bit.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataConfig {
    /// Total identities; the last `eval_identities` of them form the
    /// held-out split.
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub eval_identities: usize,
    pub input_dim: usize,
    /// Planted clusters, independent of the model's group count.
    pub num_latent_groups: usize,
    /// Per-component noise added to an identity center for each sample.
    pub within_identity_noise: f64,
    /// Per-component perturbation of a group center defining an identity.
    pub within_group_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        SyntheticDataConfig {
            num_identities: 250,
            samples_per_identity: 20,
            eval_identities: 50,
            input_dim: 32,
            num_latent_groups: 8,
            within_identity_noise: 0.15,
            within_group_spread: 0.12,
            seed: 0,
        }
    }
}

impl SyntheticDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0
            || self.samples_per_identity == 0
            || self.input_dim == 0
            || self.num_latent_groups == 0
        {
            return Err(Error::Config("all dataset counts must be positive".into()));
        }
        if self.num_identities < 2 * self.num_latent_groups {
            return Err(Error::Config(format!(
                "need at least two identities per latent group: {} identities for {} groups",
                self.num_identities, self.num_latent_groups
            )));
        }
        if self.eval_identities < 2 {
            return Err(Error::Config("eval split needs at least 2 identities".into()));
        }
        if self.num_identities < self.eval_identities + 2 {
            return Err(Error::Config(format!(
                "train split needs at least 2 identities: {} total, {} held out",
                self.num_identities, self.eval_identities
            )));
        }
        for (name, v) in [
            ("within_identity_noise", self.within_identity_noise),
            ("within_group_spread", self.within_group_spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} must be positive, got {}", name, v)));
            }
        }
        Ok(())
    }

    pub fn train_identities(&self) -> usize {
        self.num_identities - self.eval_identities
    }
}

/// One split of labeled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub identities: Vec<usize>,
    /// Planted group of each sample; analysis only.
    pub latent_groups: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn identity_set(&self) -> BTreeSet<usize> {
        self.identities.iter().copied().collect()
    }

    /// New tensor holding the given rows, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("gather_rows", format!("row {} out of {}", i, self.len())));
            }
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(vec![indices.len(), d], data)
    }

    fn validate(&self) -> Result<()> {
        if self.identities.len() != self.len() || self.latent_groups.len() != self.len() {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} rows with {} identity and {} group labels",
                    self.len(),
                    self.identities.len(),
                    self.latent_groups.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Disjoint train/eval splits from one generator run.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub eval: Dataset,
}

impl GeneratedData {
    /// Confirms no identity appears in both splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let train = self.train.identity_set();
        if let Some(shared) = self.eval.identities.iter().find(|id| train.contains(id)) {
            return Err(Error::invalid(
                "dataset",
                format!("identity {} appears in both splits", shared),
            ));
        }
        Ok(())
    }
}

/// One standard-normal draw (Box-Muller, cosine branch). Two uniform
/// draws per call keep the stream layout simple and reproducible.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // gen() is in [0, 1); flip it to (0, 1] so ln never sees zero.
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen::<f64>();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| standard_normal(rng)).collect()
}

fn renormalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::invalid("generate_synthetic_dataset", "degenerate zero direction"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Deterministic synthetic dataset per the planted-group recipe above.
pub fn generate_synthetic_dataset(cfg: &SyntheticDataConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.input_dim;

    let group_centers: Vec<Vec<f64>> = (0..cfg.num_latent_groups)
        .map(|_| renormalize(gaussian_vec(&mut rng, d)))
        .collect::<Result<_>>()?;

    let mut identity_centers = Vec::with_capacity(cfg.num_identities);
    let mut identity_groups = Vec::with_capacity(cfg.num_identities);
    for id in 0..cfg.num_identities {
        let grp = id % cfg.num_latent_groups;
        let mut c = group_centers[grp].clone();
        for v in c.iter_mut() {
            *v += cfg.within_group_spread * standard_normal(&mut rng);
        }
        identity_centers.push(renormalize(c)?);
        identity_groups.push(grp);
    }

    let total = cfg.num_identities * cfg.samples_per_identity;
    let mut features = Vec::with_capacity(total * d);
    let mut identities = Vec::with_capacity(total);
    let mut groups = Vec::with_capacity(total);
    for id in 0..cfg.num_identities {
        for _ in 0..cfg.samples_per_identity {
            for c in 0..d {
                let v = identity_centers[id][c]
                    + cfg.within_identity_noise * standard_normal(&mut rng);
                features.push((v as f32) as f64);
            }
            identities.push(id);
            groups.push(identity_groups[id]);
        }
    }

    let split_at = cfg.train_identities() * cfg.samples_per_identity;
    let make = |range: std::ops::Range<usize>| -> Result<Dataset> {
        let rows = range.len();
        Ok(Dataset {
            features: Tensor::new(vec![rows, d], features[range.start * d..range.end * d].to_vec())?,
            identities: identities[range.clone()].to_vec(),
            latent_groups: groups[range].to_vec(),
        })
    };
    let data = GeneratedData {
        train: make(0..split_at)?,
        eval: make(split_at..total)?,
    };
    data.check_disjoint()?;
    Ok(data)
}

const FEATURE_MAGIC: &[u8; 12] = b"GRPEMBFEAT01";
const LABEL_MAGIC: &[u8; 12] = b"GRPEMBLABL01";
const FORMAT_VERSION: u32 = 1;

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn write_header(w: &mut impl Write, magic: &[u8; 12]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 12], path: &Path) -> Result<()> {
    let mut m = [0u8; 12];
    r.read_exact(&mut m).map_err(|_| fmt_err(path, "truncated header"))?;
    if &m != magic {
        return Err(fmt_err(path, "unrecognized file magic"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|_| fmt_err(path, "truncated header"))?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(fmt_err(path, format!("unsupported format version {}", version)));
    }
    Ok(())
}

/// Writes `[n x d]` features: 16-byte header, u64 row count, u32 width,
/// then row-major 32-bit floats, everything little-endian.
pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::invalid(
            "write_feature_file",
            format!("expected a matrix, got shape {:?}", t.shape()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FEATURE_MAGIC)?;
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u32).to_le_bytes())?;
    for &v in t.data() {
        let q = v as f32;
        if !q.is_finite() {
            return Err(Error::NonFinite { op: "write_feature_file" });
        }
        w.write_all(&q.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, FEATURE_MAGIC, path)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| fmt_err(path, "truncated count"))?;
    let rows = u64::from_le_bytes(b8) as usize;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| fmt_err(path, "truncated width"))?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut b4).map_err(|_| fmt_err(path, "truncated feature data"))?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    if r.read(&mut b4)? != 0 {
        return Err(fmt_err(path, "trailing bytes after feature data"));
    }
    Tensor::new(vec![rows, cols], data)
}

/// Writes labels as a parallel file: 16-byte header, u64 count, then
/// unsigned 32-bit little-endian values.
pub fn write_label_file(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, LABEL_MAGIC)?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for &l in labels {
        let v = u32::try_from(l)
            .map_err(|_| Error::invalid("write_label_file", format!("label {} exceeds 32 bits", l)))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_label_file(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, LABEL_MAGIC, path)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| fmt_err(path, "truncated count"))?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut b4 = [0u8; 4];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(|_| fmt_err(path, "truncated label data"))?;
        out.push(u32::from_le_bytes(b4) as usize);
    }
    if r.read(&mut b4)? != 0 {
        return Err(fmt_err(path, "trailing bytes after label data"));
    }
    Ok(out)
}

pub const SIDECAR_NAME: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetSidecar {
    version: u32,
    /// Role of each file in the directory.
    files: BTreeMap<String, String>,
    input_dim: usize,
    train_samples: usize,
    eval_samples: usize,
    train_identity_count: usize,
    eval_identity_count: usize,
}

const ROLES: [&str; 6] = [
    "train_features",
    "train_identities",
    "train_latent_groups",
    "eval_features",
    "eval_identities",
    "eval_latent_groups",
];

/// Writes both splits plus a JSON sidecar naming each file's role.
pub fn save_dataset_dir(dir: &Path, data: &GeneratedData) -> Result<()> {
    data.train.validate()?;
    data.eval.validate()?;
    data.check_disjoint()?;
    std::fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for role in ROLES {
        files.insert(role.to_string(), format!("{}.bin", role));
    }
    write_feature_file(&dir.join(&files["train_features"]), &data.train.features)?;
    write_label_file(&dir.join(&files["train_identities"]), &data.train.identities)?;
    write_label_file(&dir.join(&files["train_latent_groups"]), &data.train.latent_groups)?;
    write_feature_file(&dir.join(&files["eval_features"]), &data.eval.features)?;
    write_label_file(&dir.join(&files["eval_identities"]), &data.eval.identities)?;
    write_label_file(&dir.join(&files["eval_latent_groups"]), &data.eval.latent_groups)?;

    let sidecar = DatasetSidecar {
        version: FORMAT_VERSION,
        files,
        input_dim: data.train.dim(),
        train_samples: data.train.len(),
        eval_samples: data.eval.len(),
        train_identity_count: data.train.identity_set().len(),
        eval_identity_count: data.eval.identity_set().len(),
    };
    let path = dir.join(SIDECAR_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<GeneratedData> {
    let sidecar_path = dir.join(SIDECAR_NAME);
    let text = std::fs::read_to_string(&sidecar_path)
        .map_err(|e| fmt_err(&sidecar_path, format!("cannot read sidecar: {}", e)))?;
    let sidecar: DatasetSidecar =
        serde_json::from_str(&text).map_err(|e| fmt_err(&sidecar_path, format!("bad sidecar: {}", e)))?;
    if sidecar.version != FORMAT_VERSION {
        return Err(fmt_err(&sidecar_path, format!("unsupported sidecar version {}", sidecar.version)));
    }
    let file = |role: &str| -> Result<PathBuf> {
        sidecar
            .files
            .get(role)
            .map(|name| dir.join(name))
            .ok_or_else(|| fmt_err(&sidecar_path, format!("sidecar missing role '{}'", role)))
    };
    let load = |prefix: &str| -> Result<Dataset> {
        let ds = Dataset {
            features: read_feature_file(&file(&format!("{}_features", prefix))?)?,
            identities: read_label_file(&file(&format!("{}_identities", prefix))?)?,
            latent_groups: read_label_file(&file(&format!("{}_latent_groups", prefix))?)?,
        };
        ds.validate()?;
        Ok(ds)
    };
    let data = GeneratedData {
        train: load("train")?,
        eval: load("eval")?,
    };
    if data.eval.dim() != data.train.dim() {
        return Err(fmt_err(
            &sidecar_path,
            format!("split widths differ: {} vs {}", data.train.dim(), data.eval.dim()),
        ));
    }
    if data.train.len() != sidecar.train_samples || data.eval.len() != sidecar.eval_samples {
        return Err(fmt_err(&sidecar_path, "sidecar counts disagree with files"));
    }
    data.check_disjoint()?;
    Ok(data)
}
