//! Few-shot evaluation: reference-subset selection with relabeling,
//! accuracy with a 95% confidence interval, and projector diagnostics.
//!
//! At test time the episode way is usually smaller than the reference bank,
//! so each prototype (in ascending slot order) greedily claims the nearest
//! unused reference row by Euclidean distance on normalized copies; the row
//! is relabeled to that slot for the episode.

use crate::embedding;
use crate::episodes::EpisodeSource;
use crate::error::{MlnError, Result};
use crate::head::{self, HeadConfig, PrototypeSet, ReferenceBank};
use crate::num::linalg::DEFAULT_RANK_TOL;
use crate::num::matrix::{argmax, norm, Matrix};
use crate::num::rng::RngStream;
use crate::trainer::Model;

/// Accuracy report over a batch of evaluation episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub way: usize,
    pub shots: usize,
    pub mean_acc: f64,
    /// 1.96 · s / sqrt(n), s the sample standard deviation.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub seed: u64,
    pub wall_secs: f64,
}

pub const REPORT_HEADER: &str = "way,shots,episodes,mean_acc,ci95";

impl EvalReport {
    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.way, self.shots, self.episodes, self.mean_acc, self.ci95)
    }
}

/// Mean and 95% CI half-width (normal approximation) of a sample.
pub fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Greedy reference-subset selection: prototypes in ascending slot order
/// each claim the unused reference row with the smallest Euclidean distance
/// (on normalized copies). Returns the selected rows in slot order plus the
/// slot -> bank-row mapping. Ties break toward the lower row index.
pub fn select_references(bank: &ReferenceBank, protos: &PrototypeSet) -> Result<(Matrix, Vec<usize>)> {
    let way = protos.protos.rows();
    if bank.n_ref() < way {
        return Err(MlnError::BankTooSmall { n_ref: bank.n_ref(), way });
    }
    let refs_hat = head::normalize_rows(&bank.refs)?;
    let protos_hat = head::normalize_rows(&protos.protos)?;
    let mut used = vec![false; bank.n_ref()];
    let mut mapping = Vec::with_capacity(way);
    let mut selected = Vec::with_capacity(way);
    for slot in 0..way {
        let mut best: Option<(usize, f64)> = None;
        for row in 0..bank.n_ref() {
            if used[row] {
                continue;
            }
            let d: f64 = refs_hat
                .row(row)
                .iter()
                .zip(protos_hat.row(slot))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            // strict < keeps the lowest row index on ties
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((row, d));
            }
        }
        let (row, _) = best.expect("unused rows remain while way <= n_ref");
        used[row] = true;
        mapping.push(row);
        selected.push(bank.refs.row(row).to_vec());
    }
    Ok((Matrix::from_rows(&selected)?, mapping))
}

fn classify_episode(
    model: &Model,
    episode: &crate::episodes::Episode,
    head: &HeadConfig,
) -> Result<f64> {
    let sup_x = Matrix::from_rows(
        &episode.support.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
    )?;
    let sup_e = embedding::embed_batch(&model.params, &sup_x)?;
    let support: Vec<(Vec<f64>, usize)> = (0..sup_e.rows())
        .map(|r| (sup_e.row(r).to_vec(), episode.support[r].1))
        .collect();
    let protos = head::class_averages(&support, episode.way)?;
    let (refs, _) = select_references(&model.bank, &protos)?;
    let errs = head::error_vectors(&refs, &protos, head.normalize)?;
    let proj = head::build_projector(&errs, DEFAULT_RANK_TOL)?;
    let refs_scored = if head.normalize { head::normalize_rows(&refs)? } else { refs };

    let q_x = Matrix::from_rows(
        &episode.queries.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
    )?;
    let q_e = embedding::embed_batch(&model.params, &q_x)?;
    let mut correct = 0usize;
    for (qi, (_, slot)) in episode.queries.iter().enumerate() {
        let scores = head::nulled_logits(q_e.row(qi), &refs_scored, &proj, head.logit_mode)?;
        if argmax(&scores) == *slot {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.queries.len() as f64)
}

/// Runs `episodes` evaluation episodes and reports mean accuracy with a 95%
/// confidence interval. Per-episode seeds derive from `seed` + episode
/// index, so the report is order-deterministic.
pub fn evaluate(
    model: &Model,
    source: &EpisodeSource,
    head: &HeadConfig,
    way: usize,
    shots: usize,
    queries_per_class: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let base = RngStream::new(seed);
    let mut per_episode = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = base.derive(ep as u64);
        let episode = source.sample(way, shots, queries_per_class, &mut rng)?;
        per_episode.push(classify_episode(model, &episode, head)?);
    }
    let (mean_acc, ci95) = mean_ci95(&per_episode);
    Ok(EvalReport {
        episodes,
        way,
        shots,
        mean_acc,
        ci95,
        per_episode,
        seed,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Projector diagnostics for one episode.
#[derive(Debug, Clone)]
pub struct ProjectorDiagnostics {
    /// ‖P v_k‖ per class.
    pub nulled_error_norms: Vec<f64>,
    /// Alignment Δ_k per class.
    pub alignments: Vec<f64>,
    pub trace: f64,
    pub rank: usize,
    /// Projected pairwise reference distances, (k, l, distance) for k < l.
    pub ref_distances: Vec<(usize, usize, f64)>,
}

impl ProjectorDiagnostics {
    /// CSV dump: one `kind,i,j,value` line per quantity.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,i,j,value\n");
        for (k, v) in self.nulled_error_norms.iter().enumerate() {
            out.push_str(&format!("nulled_error_norm,{k},,{v}\n"));
        }
        for (k, v) in self.alignments.iter().enumerate() {
            out.push_str(&format!("alignment,{k},,{v}\n"));
        }
        out.push_str(&format!("trace,,,{}\n", self.trace));
        out.push_str(&format!("rank,,,{}\n", self.rank));
        for (k, l, d) in &self.ref_distances {
            out.push_str(&format!("projected_ref_distance,{k},{l},{d}\n"));
        }
        out
    }
}

/// Builds one episode's projector and surfaces ‖Pv_k‖, Δ_k, trace(P),
/// rank(V), and pairwise projected reference distances.
pub fn inspect_projector(
    model: &Model,
    episode: &crate::episodes::Episode,
    head: &HeadConfig,
) -> Result<ProjectorDiagnostics> {
    let sup_x = Matrix::from_rows(
        &episode.support.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
    )?;
    let sup_e = embedding::embed_batch(&model.params, &sup_x)?;
    let support: Vec<(Vec<f64>, usize)> = (0..sup_e.rows())
        .map(|r| (sup_e.row(r).to_vec(), episode.support[r].1))
        .collect();
    let protos = head::class_averages(&support, episode.way)?;
    let (refs, _) = select_references(&model.bank, &protos)?;
    let errs = head::error_vectors(&refs, &protos, head.normalize)?;
    let proj = head::build_projector(&errs, DEFAULT_RANK_TOL)?;

    let p = &proj.projector;
    let way = episode.way;
    let nulled_error_norms: Vec<f64> = (0..way)
        .map(|k| {
            let v = errs.errs.column(k);
            let pv: Vec<f64> = (0..p.rows())
                .map(|r| p.row(r).iter().zip(&v).map(|(a, b)| a * b).sum())
                .collect();
            norm(&pv)
        })
        .collect();
    let (refs_hat, protos_hat) = if head.normalize {
        (head::normalize_rows(&refs)?, head::normalize_rows(&protos.protos)?)
    } else {
        (refs.clone(), protos.protos.clone())
    };
    let alignments = head::alignment_score(&refs_hat, &protos_hat, &proj)?;

    let projected = refs_hat.matmul(p)?;
    let mut ref_distances = Vec::new();
    for k in 0..way {
        for l in k + 1..way {
            let d: f64 = projected
                .row(k)
                .iter()
                .zip(projected.row(l))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            ref_distances.push((k, l, d));
        }
    }
    Ok(ProjectorDiagnostics {
        nulled_error_norms,
        alignments,
        trace: p.trace(),
        rank: proj.rank,
        ref_distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingConfig;
    use crate::episodes::gen_gaussian_episode;
    use crate::trainer::TrainConfig;

    fn toy_model(seed: u64) -> Model {
        // wide enough that no input zeroes out every hidden ReLU unit
        let emb_config = EmbeddingConfig::new(4, vec![16, 8], seed).unwrap();
        let params = embedding::init_params(&emb_config, &mut RngStream::new(seed));
        let bank = ReferenceBank::init(6, 8, &mut RngStream::new(seed + 1)).unwrap();
        Model { emb_config, params, bank }
    }

    #[test]
    fn select_references_zero_distance_is_forced() {
        let model = toy_model(1);
        // prototypes exactly equal to bank rows 4, 2, 0
        let rows = [4usize, 2, 0];
        let protos = PrototypeSet {
            protos: Matrix::from_rows(
                &rows.iter().map(|&r| model.bank.refs.row(r).to_vec()).collect::<Vec<_>>(),
            )
            .unwrap(),
        };
        let (selected, mapping) = select_references(&model.bank, &protos).unwrap();
        assert_eq!(mapping, vec![4, 2, 0]);
        for (slot, &r) in rows.iter().enumerate() {
            assert_eq!(selected.row(slot), model.bank.refs.row(r));
        }
    }

    #[test]
    fn select_references_with_equal_counts_is_a_permutation() {
        let mut rng = RngStream::new(2);
        let bank = ReferenceBank::init(4, 5, &mut rng).unwrap();
        let protos = PrototypeSet { protos: rng.normal_matrix(4, 5, 0.0, 1.0) };
        let (_, mapping) = select_references(&bank, &protos).unwrap();
        let mut sorted = mapping.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn select_references_tie_breaks_to_lower_row() {
        // rows 0 and 1 are identical, so both are equidistant from anything
        let refs = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let bank = ReferenceBank { refs };
        let protos = PrototypeSet {
            protos: Matrix::from_rows(&[vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap(),
        };
        let (_, mapping) = select_references(&bank, &protos).unwrap();
        assert_eq!(mapping, vec![0, 1]);
    }

    #[test]
    fn select_references_errors_when_bank_too_small() {
        let bank = ReferenceBank { refs: Matrix::identity(2) };
        let protos = PrototypeSet { protos: Matrix::identity(3) };
        assert!(matches!(
            select_references(&bank, &protos),
            Err(MlnError::BankTooSmall { .. })
        ));
    }

    #[test]
    fn ci_formula_hand_example() {
        let (mean, ci) = mean_ci95(&[1.0, 0.0, 1.0, 1.0]);
        assert!((mean - 0.75).abs() < 1e-12);
        assert!((ci - 0.49).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_deterministic_per_seed() {
        let model = toy_model(3);
        let head = TrainConfig::default().head_config(8);
        let source = EpisodeSource::Gaussian { dim: 4, sigma: 0.3 };
        let a = evaluate(&model, &source, &head, 3, 1, 4, 20, 9).unwrap();
        let b = evaluate(&model, &source, &head, 3, 1, 4, 20, 9).unwrap();
        assert_eq!(a.per_episode, b.per_episode);
        assert_eq!(a.mean_acc, b.mean_acc);
        // report self-consistency: mean/CI recomputable from the list
        let (m, c) = mean_ci95(&a.per_episode);
        assert_eq!(m, a.mean_acc);
        assert_eq!(c, a.ci95);
    }

    #[test]
    fn untrained_model_on_coincident_classes_scores_chance() {
        // all classes share one mean and sigma = 0, so every item is
        // identical: logits tie, argmax picks slot 0, accuracy = 1/way
        let model = toy_model(4);
        let head = TrainConfig::default().head_config(8);
        let way = 4;
        let item = vec![0.3, -0.2, 0.7, 0.1];
        let episode = crate::episodes::Episode {
            support: (0..way).map(|s| (item.clone(), s)).collect(),
            queries: (0..way).flat_map(|s| vec![(item.clone(), s); 5]).collect(),
            way,
            shots: 1,
        };
        let acc = classify_episode(&model, &episode, &head).unwrap();
        assert!((acc - 1.0 / way as f64).abs() < 1e-12);
    }

    #[test]
    fn evaluation_does_not_mutate_the_model() {
        let model = toy_model(5);
        let before = model.clone();
        let head = TrainConfig::default().head_config(8);
        let source = EpisodeSource::Gaussian { dim: 4, sigma: 0.3 };
        evaluate(&model, &source, &head, 3, 1, 4, 10, 1).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn inspect_reports_nulled_errors_and_trace() {
        let model = toy_model(6);
        let head = TrainConfig::default().head_config(8);
        let episode = gen_gaussian_episode(3, 2, 2, 4, 0.2, &mut RngStream::new(13)).unwrap();
        let diag = inspect_projector(&model, &episode, &head).unwrap();
        assert!(diag.nulled_error_norms.iter().all(|&n| n <= 1e-8));
        assert!((diag.trace - (8.0 - diag.rank as f64)).abs() < 1e-6);
        assert_eq!(diag.ref_distances.len(), 3);
        let csv = diag.to_csv();
        assert!(csv.starts_with("kind,i,j,value\n"));
        assert!(csv.contains("trace,,,"));
    }
}
