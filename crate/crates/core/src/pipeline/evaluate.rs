//! Inference-mode evaluation: verification, identification, and group
//! usage statistics, plus embedding export.

use crate::error::{Error, Result};
use crate::metrics::{
    cosine_similarity, far_key, group_aware_similarity, label_distribution_stats,
    pair_verification_accuracy, rank1_identification, tar_at_far, EvalReport, SimilarityConfig,
};
use crate::model::GroupAwareModel;
use crate::numerics::{argmax, Graph, Tensor};
use crate::pipeline::data::{write_feature_file, Dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Which representation verification and identification run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// The fused instance-plus-group embedding, the network's output.
    Fused,
    /// The instance representation alone, ignoring the group pathway.
    Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub far_levels: Vec<f64>,
    /// Score pairs with the distance-penalized similarity instead of
    /// plain cosine.
    pub use_group_similarity: bool,
    pub similarity: SimilarityConfig,
    pub embedding_source: EmbeddingSource,
    /// Per-class cap on scored pairs; larger sets are subsampled with
    /// `seed`.
    pub pair_cap: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            far_levels: vec![0.1, 0.01, 1e-3, 1e-4],
            use_group_similarity: false,
            similarity: SimilarityConfig::default(),
            embedding_source: EmbeddingSource::Fused,
            pair_cap: 500_000,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.far_levels.is_empty() {
            return Err(Error::Config("need at least one false-accept level".into()));
        }
        if self.pair_cap == 0 {
            return Err(Error::Config("pair cap must be positive".into()));
        }
        self.similarity.validate()
    }

    /// The most demanding false-accept level requested.
    pub fn strictest_far(&self) -> f64 {
        self.far_levels.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Every per-sample representation from one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub instance: Tensor,
    pub fused: Tensor,
    pub decision: Tensor,
    pub group_probs: Tensor,
}

/// Runs the model over a whole dataset in inference mode.
pub fn embed_dataset(model: &GroupAwareModel, data: &Dataset) -> Result<Embeddings> {
    if data.is_empty() {
        return Err(Error::invalid("embed_dataset", "dataset is empty"));
    }
    let mut g = Graph::new();
    let out = model.forward_eval(&mut g, &data.features)?;
    Ok(Embeddings {
        instance: g.value(out.instance_rep).clone(),
        fused: g.value(out.fused).clone(),
        decision: g.value(out.decision_feature).clone(),
        group_probs: g.value(out.group_probs).clone(),
    })
}

/// Keeps at most `cap` elements, chosen without replacement; selection
/// order is normalized so the result depends only on the seed.
fn cap_pairs(pairs: &mut Vec<(usize, usize)>, cap: usize, rng: &mut ChaCha8Rng) {
    if pairs.len() <= cap {
        return;
    }
    let mut keep = rand::seq::index::sample(rng, pairs.len(), cap).into_vec();
    keep.sort_unstable();
    *pairs = keep.into_iter().map(|i| pairs[i]).collect();
}

/// Genuine and impostor scores over identity pairs of the dataset.
pub fn pair_scores(
    emb: &Tensor,
    decision: &Tensor,
    identities: &[usize],
    opts: &EvalOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = emb.rows();
    if identities.len() != n || decision.rows() != n {
        return Err(Error::invalid(
            "pair_scores",
            format!(
                "{} rows with {} identities and {} decision rows",
                n,
                identities.len(),
                decision.rows()
            ),
        ));
    }
    let mut genuine_pairs = Vec::new();
    let mut impostor_pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if identities[i] == identities[j] {
                genuine_pairs.push((i, j));
            } else {
                impostor_pairs.push((i, j));
            }
        }
    }
    if genuine_pairs.is_empty() || impostor_pairs.is_empty() {
        return Err(Error::invalid(
            "pair_scores",
            "need both a genuine and an impostor pair; check identities and sample counts",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    cap_pairs(&mut genuine_pairs, opts.pair_cap, &mut rng);
    cap_pairs(&mut impostor_pairs, opts.pair_cap, &mut rng);

    let score = |i: usize, j: usize| -> Result<f64> {
        if opts.use_group_similarity {
            group_aware_similarity(emb.row(i), emb.row(j), decision.row(i), decision.row(j), &opts.similarity)
        } else {
            cosine_similarity(emb.row(i), emb.row(j))
        }
    };
    let genuine = genuine_pairs.iter().map(|&(i, j)| score(i, j)).collect::<Result<Vec<_>>>()?;
    let impostor = impostor_pairs.iter().map(|&(i, j)| score(i, j)).collect::<Result<Vec<_>>>()?;
    Ok((genuine, impostor))
}

/// Full held-out evaluation. The gallery for identification holds each
/// identity's first sample; every other sample becomes a probe.
pub fn evaluate(model: &GroupAwareModel, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    opts.validate()?;
    let distinct = data.identity_set();
    if distinct.len() < 2 {
        return Err(Error::invalid(
            "evaluate",
            format!("need at least 2 evaluation identities, got {}", distinct.len()),
        ));
    }
    let embeddings = embed_dataset(model, data)?;
    let emb = match opts.embedding_source {
        EmbeddingSource::Fused => &embeddings.fused,
        EmbeddingSource::Instance => &embeddings.instance,
    };

    let (genuine, impostor) = pair_scores(emb, &embeddings.decision, &data.identities, opts)?;
    let mut tar_map = BTreeMap::new();
    for (level, tar) in tar_at_far(&genuine, &impostor, &opts.far_levels)? {
        tar_map.insert(far_key(level), tar);
    }
    let mut labeled: Vec<(f64, bool)> = genuine.iter().map(|&s| (s, true)).collect();
    labeled.extend(impostor.iter().map(|&s| (s, false)));
    let pair_accuracy = pair_verification_accuracy(&labeled)?;

    // Identification: first sample of each identity enrolls it.
    let n = data.len();
    let mut gallery_rows = Vec::new();
    let mut gallery_ids = Vec::new();
    let mut probe_rows = Vec::new();
    let mut probe_ids = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..n {
        if seen.insert(data.identities[i]) {
            gallery_rows.push(i);
            gallery_ids.push(data.identities[i]);
        } else {
            probe_rows.push(i);
            probe_ids.push(data.identities[i]);
        }
    }
    if probe_rows.is_empty() {
        return Err(Error::invalid(
            "evaluate",
            "identification needs an identity with at least two samples",
        ));
    }
    let combined = concat_rows(emb, &embeddings.decision)?;
    let width = emb.cols();
    let gallery = gather(&combined, &gallery_rows)?;
    let probes = gather(&combined, &probe_rows)?;
    let use_group = opts.use_group_similarity;
    let sim_cfg = opts.similarity;
    let rank1 = rank1_identification(&probes, &probe_ids, &gallery, &gallery_ids, |a, b| {
        if use_group {
            group_aware_similarity(&a[..width], &b[..width], &a[width..], &b[width..], &sim_cfg)
        } else {
            cosine_similarity(&a[..width], &b[..width])
        }
    })?;

    // Group usage at inference time: the decision network's own argmax.
    let labels: Vec<usize> = (0..n).map(|i| argmax(embeddings.group_probs.row(i))).collect();
    let (label_histogram, kl_to_uniform) = label_distribution_stats(&labels, model.config().num_groups)?;

    Ok(EvalReport {
        tar_at_far: tar_map,
        rank1,
        pair_accuracy,
        label_histogram,
        kl_to_uniform,
    })
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "concat_rows",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![a.rows(), a.cols() + b.cols()], data)
}

fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &i in rows {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![rows.len(), t.cols()], data)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub const EXPORT_SIDECAR_NAME: &str = "export.json";

#[derive(Debug, Serialize, Deserialize)]
struct ExportSidecar {
    version: u32,
    /// Role of each file in the directory.
    files: BTreeMap<String, String>,
    /// Column count per role.
    columns: BTreeMap<String, usize>,
    samples: usize,
}

/// Writes every per-sample representation to feature files plus a JSON
/// sidecar describing the columns.
pub fn export_embeddings(model: &GroupAwareModel, data: &Dataset, dir: &Path) -> Result<()> {
    let embeddings = embed_dataset(model, data)?;
    std::fs::create_dir_all(dir)?;
    let parts: [(&str, &Tensor); 4] = [
        ("instance", &embeddings.instance),
        ("fused", &embeddings.fused),
        ("decision_feature", &embeddings.decision),
        ("group_probs", &embeddings.group_probs),
    ];
    let mut files = BTreeMap::new();
    let mut columns = BTreeMap::new();
    for (role, tensor) in parts {
        let name = format!("{}.bin", role);
        write_feature_file(&dir.join(&name), tensor)?;
        files.insert(role.to_string(), name);
        columns.insert(role.to_string(), tensor.cols());
    }
    let sidecar = ExportSidecar {
        version: 1,
        files,
        columns,
        samples: data.len(),
    };
    std::fs::write(dir.join(EXPORT_SIDECAR_NAME), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::data::{generate_synthetic_dataset, read_feature_file, SyntheticDataConfig};
    use rand::rngs::StdRng;

    fn eval_data() -> Dataset {
        let cfg = SyntheticDataConfig {
            num_identities: 8,
            samples_per_identity: 4,
            eval_identities: 4,
            input_dim: 6,
            num_latent_groups: 2,
            within_identity_noise: 0.1,
            within_group_spread: 0.3,
            seed: 2,
        };
        generate_synthetic_dataset(&cfg).unwrap().eval
    }

    fn model(seed: u64) -> GroupAwareModel {
        let cfg = ModelConfig {
            input_dim: 6,
            backbone_layers: vec![8],
            shared_dim: 8,
            embed_dim: 4,
            num_groups: 3,
            num_identities: 4,
            decision_hidden_dim: 4,
            ..ModelConfig::default()
        };
        let mut rng: StdRng = SeedableRng::seed_from_u64(seed);
        GroupAwareModel::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn report_fields_are_complete_and_sane() {
        let data = eval_data();
        let report = evaluate(&model(1), &data, &EvalOptions::default()).unwrap();
        assert_eq!(report.tar_at_far.len(), 4);
        assert!(report.tar_at_far.contains_key("0.0001"));
        for (_, &tar) in &report.tar_at_far {
            assert!((0.0..=1.0).contains(&tar));
        }
        assert!((0.0..=1.0).contains(&report.rank1));
        assert!((0.5..=1.0).contains(&report.pair_accuracy));
        assert_eq!(report.label_histogram.iter().sum::<u64>(), data.len() as u64);
        assert!(report.kl_to_uniform.is_finite() && report.kl_to_uniform >= 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = eval_data();
        let m = model(1);
        let a = evaluate(&m, &data, &EvalOptions::default()).unwrap();
        let b = evaluate(&m, &data, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_penalty_group_similarity_matches_plain_cosine() {
        let data = eval_data();
        let m = model(4);
        let plain = evaluate(&m, &data, &EvalOptions::default()).unwrap();
        let zero_beta = evaluate(
            &m,
            &data,
            &EvalOptions {
                use_group_similarity: true,
                similarity: SimilarityConfig { beta: 0.0, ..SimilarityConfig::default() },
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert_eq!(plain, zero_beta);
    }

    #[test]
    fn instance_view_of_a_zero_headed_model_matches_the_fused_view() {
        let data = eval_data();
        let mut m = model(7);
        m.zero_group_heads();
        let fused = evaluate(&m, &data, &EvalOptions::default()).unwrap();
        let instance = evaluate(
            &m,
            &data,
            &EvalOptions {
                embedding_source: EmbeddingSource::Instance,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert_eq!(fused, instance);
    }

    #[test]
    fn pair_capping_is_deterministic_and_bounded() {
        let data = eval_data();
        let m = model(1);
        let opts = EvalOptions {
            pair_cap: 10,
            ..EvalOptions::default()
        };
        let emb = embed_dataset(&m, &data).unwrap();
        let (g1, i1) = pair_scores(&emb.fused, &emb.decision, &data.identities, &opts).unwrap();
        let (g2, i2) = pair_scores(&emb.fused, &emb.decision, &data.identities, &opts).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(i1, i2);
        assert!(g1.len() <= 10 && i1.len() <= 10);
        let report = evaluate(&m, &data, &opts).unwrap();
        assert!((0.5..=1.0).contains(&report.pair_accuracy));
    }

    #[test]
    fn degenerate_eval_sets_are_rejected() {
        let data = eval_data();
        let m = model(1);

        // One identity only.
        let first_id = data.identities[0];
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.identities[i] == first_id).collect();
        let single = Dataset {
            features: data.gather_rows(&rows).unwrap(),
            identities: vec![first_id; rows.len()],
            latent_groups: vec![0; rows.len()],
        };
        assert!(evaluate(&m, &single, &EvalOptions::default()).is_err());

        // Two identities but one sample each: no genuine pairs.
        let two = Dataset {
            features: data.gather_rows(&[0, 4]).unwrap(),
            identities: vec![data.identities[0], data.identities[4]],
            latent_groups: vec![0, 0],
        };
        assert!(evaluate(&m, &two, &EvalOptions::default()).is_err());
    }

    #[test]
    fn export_writes_all_roles_and_is_reproducible() {
        let data = eval_data();
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        export_embeddings(&m, &data, dir.path()).unwrap();

        let sidecar: ExportSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(EXPORT_SIDECAR_NAME)).unwrap())
                .unwrap();
        assert_eq!(sidecar.samples, data.len());
        assert_eq!(sidecar.files.len(), 4);

        let probs = read_feature_file(&dir.path().join(&sidecar.files["group_probs"])).unwrap();
        assert_eq!(probs.rows(), data.len());
        assert_eq!(probs.cols(), sidecar.columns["group_probs"]);
        // Rows remain normalized after the 32-bit round trip.
        for i in 0..probs.rows() {
            let sum: f64 = probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-7, "row {} sums to {}", i, sum);
        }

        let emb1 = read_feature_file(&dir.path().join(&sidecar.files["fused"])).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        export_embeddings(&m, &data, dir2.path()).unwrap();
        let emb2 = read_feature_file(&dir2.path().join("fused.bin")).unwrap();
        assert_eq!(emb1, emb2);
    }
}
