//! Paired ablation runs over named configuration variants.
//!
//! Every variant trains on the same generated data with the same run
//! seeds, so rows are comparable pairwise. The table holds one row per
//! variant and seed plus a mean row per variant.

use crate::error::{Error, Result};
use crate::metrics::far_key;
use crate::model::{Ensemble, Fusion, GroupAwareModel, ModelConfig};
use crate::objectives::LossConfig;
use crate::pipeline::data::{generate_synthetic_dataset, SyntheticDataConfig};
use crate::pipeline::evaluate::{evaluate, EvalOptions};
use crate::pipeline::train::{train, Labeling, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// The standard suite: instance-only baseline, both ensembles, ablated
/// labeling and loss, concatenated fusion, and a group-count sweep.
pub fn default_suite() -> Vec<String> {
    [
        "baseline",
        "soft",
        "hard",
        "naive_labels",
        "no_grouping_loss",
        "concat",
        "k4",
        "k16",
        "k32",
    ]
    .map(String::from)
    .to_vec()
}

/// Applies one named variant on top of the shared template configs.
pub fn apply_variant(
    name: &str,
    model: &mut ModelConfig,
    losses: &mut LossConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    match name {
        "baseline" => {
            losses.lambda = 0.0;
            train.disable_group_heads = true;
        }
        "soft" => model.ensemble_mode = Ensemble::Soft,
        "hard" => model.ensemble_mode = Ensemble::Hard,
        "naive_labels" => train.labeling = Labeling::Naive,
        "no_grouping_loss" => losses.lambda = 0.0,
        "concat" => model.fusion_mode = Fusion::Concatenate,
        "k4" => model.num_groups = 4,
        "k16" => model.num_groups = 16,
        "k32" => model.num_groups = 32,
        other => {
            return Err(Error::Config(format!(
                "unknown ablation variant '{}'; known: {}",
                other,
                default_suite().join(", ")
            )))
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub data: SyntheticDataConfig,
    /// Template; `input_dim` and `num_identities` are taken from the data.
    pub model: ModelConfig,
    pub losses: LossConfig,
    /// Template; the run seed is set per row.
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("ablation needs at least one variant".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::Config(format!("variant '{}' listed twice", v)));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("seed {} listed twice", s)));
            }
        }
        Ok(())
    }
}

/// One table row; `seed` is `None` for a variant's mean row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: Option<u64>,
    pub pair_accuracy: f64,
    pub rank1: f64,
    /// True-accept rate at the strictest requested false-accept level.
    pub tar_strictest_far: f64,
    pub kl_to_uniform: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,pair_accuracy,rank1,tar_strictest_far,kl_to_uniform\n");
        for r in &self.rows {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant, seed, r.pair_accuracy, r.rank1, r.tar_strictest_far, r.kl_to_uniform
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Mean row of one variant.
    pub fn mean_of(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed.is_none())
    }
}

/// Trains and evaluates one variant for one seed. Exposed so paired
/// comparisons outside a full suite reuse the exact ablation recipe.
pub fn run_variant(
    cfg: &AblationConfig,
    variant: &str,
    seed: u64,
    out_dir: &Path,
) -> Result<AblationRow> {
    let data = generate_synthetic_dataset(&cfg.data)?;
    let mut mc = cfg.model.clone();
    mc.input_dim = cfg.data.input_dim;
    mc.num_identities = cfg.data.train_identities();
    let mut lc = cfg.losses.clone();
    let mut tc = cfg.train.clone();
    apply_variant(variant, &mut mc, &mut lc, &mut tc)?;
    tc.seed = seed;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GroupAwareModel::new(mc, &mut rng)?;
    train(&mut model, &data.train, &lc, &tc, out_dir)?;
    let report = evaluate(&model, &data.eval, &cfg.eval)?;
    let strictest = far_key(cfg.eval.strictest_far());
    Ok(AblationRow {
        variant: variant.to_string(),
        seed: Some(seed),
        pair_accuracy: report.pair_accuracy,
        rank1: report.rank1,
        tar_strictest_far: *report.tar_at_far.get(&strictest).ok_or_else(|| {
            Error::invalid("run_ablation", format!("report missing level {}", strictest))
        })?,
        kl_to_uniform: report.kl_to_uniform,
    })
}

/// Runs the whole suite; per-run artifacts land under
/// `runs_root/<variant>/seed_<seed>/`. The caller decides where the
/// table's CSV goes.
pub fn run_ablation(cfg: &AblationConfig, runs_root: &Path) -> Result<AblationTable> {
    cfg.validate()?;
    std::fs::create_dir_all(runs_root)?;
    let mut rows = Vec::new();
    for variant in &cfg.variants {
        let mut seed_rows = Vec::new();
        for &seed in &cfg.seeds {
            let run_dir = runs_root.join(variant).join(format!("seed_{}", seed));
            seed_rows.push(run_variant(cfg, variant, seed, &run_dir)?);
        }
        let n = seed_rows.len() as f64;
        let mean = AblationRow {
            variant: variant.clone(),
            seed: None,
            pair_accuracy: seed_rows.iter().map(|r| r.pair_accuracy).sum::<f64>() / n,
            rank1: seed_rows.iter().map(|r| r.rank1).sum::<f64>() / n,
            tar_strictest_far: seed_rows.iter().map(|r| r.tar_strictest_far).sum::<f64>() / n,
            kl_to_uniform: seed_rows.iter().map(|r| r.kl_to_uniform).sum::<f64>() / n,
        };
        rows.extend(seed_rows);
        rows.push(mean);
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> AblationConfig {
        AblationConfig {
            data: SyntheticDataConfig {
                num_identities: 10,
                samples_per_identity: 4,
                eval_identities: 3,
                input_dim: 6,
                num_latent_groups: 2,
                within_identity_noise: 0.2,
                within_group_spread: 0.3,
                seed: 17,
            },
            model: ModelConfig {
                backbone_layers: vec![8],
                shared_dim: 8,
                embed_dim: 4,
                num_groups: 3,
                decision_hidden_dim: 4,
                ..ModelConfig::default()
            },
            losses: LossConfig::default(),
            train: TrainConfig {
                phase1_steps: 2,
                phase2_steps: 3,
                batch_size: 8,
                expectation_window: 4,
                ..TrainConfig::default()
            },
            eval: EvalOptions::default(),
            variants: vec!["baseline".into(), "soft".into()],
            seeds: vec![1, 2],
        }
    }

    #[test]
    fn table_has_seed_rows_and_mean_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let table = run_ablation(&tiny_cfg(), dir.path()).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert_eq!(table.rows[0].variant, "baseline");
        assert_eq!(table.rows[0].seed, Some(1));
        assert_eq!(table.rows[1].seed, Some(2));
        assert_eq!(table.rows[2].seed, None);
        assert_eq!(table.rows[3].variant, "soft");

        let mean = table.mean_of("baseline").unwrap();
        let expect = (table.rows[0].pair_accuracy + table.rows[1].pair_accuracy) / 2.0;
        assert_eq!(mean.pair_accuracy, expect);

        table.write_csv(&dir.path().join("ablation.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("variant,seed,"));
        assert!(csv.contains("baseline,mean,"));
        assert!(dir
            .path()
            .join("soft")
            .join("seed_2")
            .join("model.ckpt")
            .exists());
    }

    #[test]
    fn baseline_row_matches_a_direct_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let table = run_ablation(&cfg, dir.path()).unwrap();
        let from_suite = &table.rows[0];

        // Reproduce the row by hand with the same recipe.
        let data = generate_synthetic_dataset(&cfg.data).unwrap();
        let mut mc = cfg.model.clone();
        mc.input_dim = cfg.data.input_dim;
        mc.num_identities = cfg.data.train_identities();
        let lc = LossConfig {
            lambda: 0.0,
            ..cfg.losses.clone()
        };
        let tc = TrainConfig {
            seed: 1,
            disable_group_heads: true,
            ..cfg.train.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = GroupAwareModel::new(mc, &mut rng).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        train(&mut model, &data.train, &lc, &tc, dir2.path()).unwrap();
        let report = evaluate(&model, &data.eval, &cfg.eval).unwrap();

        assert_eq!(from_suite.pair_accuracy, report.pair_accuracy);
        assert_eq!(from_suite.rank1, report.rank1);
        assert_eq!(from_suite.kl_to_uniform, report.kl_to_uniform);
    }

    #[test]
    fn unknown_variants_and_duplicates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.variants = vec!["warp".into()];
        assert!(run_ablation(&cfg, dir.path()).is_err());

        let mut cfg = tiny_cfg();
        cfg.seeds = vec![1, 1];
        assert!(run_ablation(&cfg, dir.path()).is_err());

        let mut cfg = tiny_cfg();
        cfg.variants = vec!["soft".into(), "soft".into()];
        assert!(run_ablation(&cfg, dir.path()).is_err());
    }

    #[test]
    fn every_named_variant_is_applicable() {
        for name in default_suite() {
            let mut mc = ModelConfig::default();
            let mut lc = LossConfig::default();
            let mut tc = TrainConfig::default();
            apply_variant(&name, &mut mc, &mut lc, &mut tc).unwrap();
        }
    }
}
