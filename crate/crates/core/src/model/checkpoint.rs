//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, length-prefixed JSON model
//! configuration, every parameter tensor in canonical order (u32 rank,
//! u32 extents, f64 data), running normalization statistics per layer,
//! and the group-label state, so training resumes exactly where it
//! stopped. All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::grouping::GroupState;
use crate::model::{GroupAwareModel, ModelConfig};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GRPEMBCK";
const VERSION: u32 = 1;

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| fmt_err(path, "truncated checkpoint"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| fmt_err(path, "truncated checkpoint"))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf).map_err(|_| fmt_err(path, "truncated checkpoint"))?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &GroupAwareModel, state: &GroupState) -> Result<()> {
    if state.num_groups() != model.config().num_groups {
        return Err(Error::invalid(
            "save_checkpoint",
            format!(
                "group state tracks {} groups, model has {}",
                state.num_groups(),
                model.config().num_groups
            ),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;

    let cfg = serde_json::to_vec(model.config())?;
    write_u32(&mut w, cfg.len() as u32)?;
    w.write_all(&cfg)?;

    for p in model.params() {
        write_u32(&mut w, p.shape().len() as u32)?;
        for &e in p.shape() {
            write_u32(&mut w, e as u32)?;
        }
        write_f64s(&mut w, p.data())?;
    }

    for bn in model.bn_layers() {
        write_u32(&mut w, bn.dim() as u32)?;
        write_f64s(&mut w, &bn.running_mean)?;
        write_f64s(&mut w, &bn.running_var)?;
    }

    write_u32(&mut w, state.num_groups() as u32)?;
    write_u64(&mut w, state.window() as u64)?;
    write_u64(&mut w, state.batches_seen())?;
    let entries = state.snapshot();
    write_u32(&mut w, entries.len() as u32)?;
    for e in &entries {
        write_f64s(&mut w, e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GroupAwareModel, GroupState)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt_err(path, "truncated checkpoint"))?;
    if &magic != MAGIC {
        return Err(fmt_err(path, "not a model checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported checkpoint version {}", version)));
    }

    let cfg_len = read_u32(&mut r, path)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf).map_err(|_| fmt_err(path, "truncated checkpoint"))?;
    let cfg: ModelConfig =
        serde_json::from_slice(&cfg_buf).map_err(|e| fmt_err(path, format!("bad embedded config: {}", e)))?;

    let mut model = GroupAwareModel::skeleton(cfg)?;
    for p in model.params_mut() {
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        if shape != p.shape() {
            return Err(fmt_err(
                path,
                format!("stored tensor shape {:?} does not match config shape {:?}", shape, p.shape()),
            ));
        }
        let data = read_f64s(&mut r, p.numel(), path)?;
        p.data_mut().copy_from_slice(&data);
    }

    for bn in model.bn_layers_mut() {
        let dim = read_u32(&mut r, path)? as usize;
        if dim != bn.dim() {
            return Err(fmt_err(
                path,
                format!("stored statistics width {} does not match layer width {}", dim, bn.dim()),
            ));
        }
        bn.running_mean = read_f64s(&mut r, dim, path)?;
        bn.running_var = read_f64s(&mut r, dim, path)?;
    }

    let num_groups = read_u32(&mut r, path)? as usize;
    let window = read_u64(&mut r, path)? as usize;
    let batches_seen = read_u64(&mut r, path)?;
    let entry_count = read_u32(&mut r, path)? as usize;
    let mut entries = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        entries.push(read_f64s(&mut r, num_groups, path)?);
    }
    let state = GroupState::from_parts(num_groups, window, batches_seen, entries)?;
    if state.num_groups() != model.config().num_groups {
        return Err(fmt_err(path, "group state does not match model group count"));
    }

    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(fmt_err(path, "trailing bytes after checkpoint payload"));
    }
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ensemble, Fusion};
    use crate::numerics::{BatchStats, Graph, Tensor};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            backbone_layers: vec![4],
            shared_dim: 5,
            embed_dim: 4,
            num_groups: 2,
            num_identities: 3,
            decision_hidden_dim: 3,
            ensemble_mode: Ensemble::Hard,
            fusion_mode: Fusion::Concatenate,
        }
    }

    fn model_and_state() -> (GroupAwareModel, GroupState) {
        let mut rng = StdRng::seed_from_u64(41);
        let mut model = GroupAwareModel::new(cfg(), &mut rng).unwrap();
        // Perturb running statistics so the round trip covers them.
        let stats: Vec<BatchStats> = model
            .bn_layers()
            .iter()
            .map(|bn| BatchStats {
                mean: (0..bn.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                var: (0..bn.dim()).map(|_| rng.gen_range(0.1..2.0)).collect(),
            })
            .collect();
        model.update_running_stats(&stats).unwrap();
        let mut state = GroupState::new(2, 4).unwrap();
        state.update(&Tensor::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.6]]).unwrap()).unwrap();
        state.update(&Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap()).unwrap();
        (model, state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, state) = model_and_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &state).unwrap();
        let (loaded, loaded_state) = load_checkpoint(&path).unwrap();

        assert_eq!(loaded, model);
        assert_eq!(loaded_state, state);

        // Loaded model evaluates identically, bit for bit.
        let mut rng = StdRng::seed_from_u64(42);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let a = model.forward_eval(&mut g1, &x).unwrap();
        let b = loaded.forward_eval(&mut g2, &x).unwrap();
        assert_eq!(g1.value(a.logits).data(), g2.value(b.logits).data());
    }

    #[test]
    fn rejects_foreign_and_damaged_files() {
        let (model, state) = model_and_state();
        let dir = tempfile::tempdir().unwrap();

        let path = dir.path().join("other.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &state).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncation anywhere in the payload is caught.
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Format { .. })));

        // Future version numbers are refused.
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        let vpath = dir.path().join("versioned.ckpt");
        std::fs::write(&vpath, &bumped).unwrap();
        assert!(matches!(load_checkpoint(&vpath), Err(Error::Format { .. })));

        // Trailing garbage is refused.
        let mut padded = bytes;
        padded.push(0);
        let tpath = dir.path().join("padded.ckpt");
        std::fs::write(&tpath, &padded).unwrap();
        assert!(matches!(load_checkpoint(&tpath), Err(Error::Format { .. })));
    }

    #[test]
    fn refuses_mismatched_group_state() {
        let (model, _) = model_and_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let state = GroupState::new(3, 4).unwrap();
        assert!(save_checkpoint(&path, &model, &state).is_err());
    }
}
