use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    bucket_labels, class_indices, cv_regress, fisher_score, transform_labels, CvResult, Hypothesis, ProbeError,
    RegressionKind, ScoreKind, Targets,
};
use crate::data::LabelValues;
use crate::model::{encode, GatingMode, Normalization, SmixaeConfig, SmixaeParams};
use crate::numerics::Tensor;
use crate::par::map_indices;

const FISHER_KEEP: usize = 50;
const BUCKETS: usize = 10;

/// The bottleneck vectors of one expert on the rows where it was admitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSamples {
    pub expert: usize,
    /// Row indices into the labeled dataset.
    pub rows: Vec<usize>,
    /// `rows.len() x b`
    pub points: DMatrix<f64>,
}

/// A probing task: which label column to predict, how to transform it, and
/// which regression to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub label: String,
    pub hypothesis: Hypothesis,
    pub regression: RegressionKind,
    pub folds: usize,
    pub seed: u64,
}

impl ProbeTask {
    pub fn score_kind(&self) -> ScoreKind {
        self.regression.score_kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProbeResult {
    pub expert: usize,
    pub activations: usize,
    pub fisher: f64,
    pub cv_score: f64,
    pub fold_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub score_kind: ScoreKind,
    pub experts: Vec<ExpertProbeResult>,
    pub top1: f64,
    pub top1_expert: usize,
    pub top5_mean: f64,
}

impl ProbeReport {
    fn from_ranked(task: ProbeTask, experts: Vec<ExpertProbeResult>) -> Result<Self, ProbeError> {
        let first = experts.first().ok_or(ProbeError::NoQualifyingExperts)?;
        let top = &experts[..experts.len().min(5)];
        Ok(Self {
            score_kind: task.score_kind(),
            top1: first.cv_score,
            top1_expert: first.expert,
            top5_mean: top.iter().map(|e| e.cv_score).sum::<f64>() / top.len() as f64,
            task,
            experts,
        })
    }
}

/// Runs inference-mode gating over `x` (normalized first when given) and
/// groups admitted bottleneck vectors by expert.
pub fn collect_expert_samples(
    params: &SmixaeParams<f32>,
    config: &SmixaeConfig,
    x: &Tensor<f32>,
    normalization: Option<&Normalization>,
) -> Result<Vec<ExpertSamples>, ProbeError> {
    let mut x = x.clone();
    if let Some(norm) = normalization {
        norm.apply(&mut x);
    }
    let latents = encode(params, &x, config, GatingMode::Inference)?;
    let (batch, j, b) = (latents.batch_size(), config.j, config.b);
    Ok((0..j)
        .map(|i| {
            let rows: Vec<usize> = (0..batch).filter(|&r| latents.admitted(r, i)).collect();
            let points = DMatrix::from_fn(rows.len(), b, |r, c| latents.latent(rows[r], i)[c] as f64);
            ExpertSamples { expert: i, rows, points }
        })
        .collect())
}

/// Fisher filter, then cross-validated regression on the survivors, sorted
/// by score (descending, ties by expert index).
pub fn rank_expert_samples(
    samples: &[ExpertSamples],
    labels: &LabelValues,
    task: &ProbeTask,
) -> Result<ProbeReport, ProbeError> {
    // Fisher classes are defined once over the full label set.
    let (fisher_classes, targets) = if task.regression.is_classification() {
        if task.hypothesis != Hypothesis::Identity {
            return Err(ProbeError::Labels(format!(
                "{:?} regression takes raw class labels, not hypothesis {}",
                task.regression, task.hypothesis
            )));
        }
        let (idx, _) = class_indices(labels)?;
        (idx.clone(), Targets::Classes(idx))
    } else {
        let y = transform_labels(labels, task.hypothesis)?;
        let classes = match task.hypothesis {
            Hypothesis::Cyclic(_) => class_indices(labels)?.0,
            _ => bucket_labels(&labels.as_f64(), BUCKETS)?,
        };
        (classes, Targets::Real(y))
    };

    let qualifying: Vec<&ExpertSamples> = samples.iter().filter(|s| s.rows.len() >= task.folds).collect();
    let mut scored: Vec<(usize, f64)> = map_indices(qualifying.len(), |q| {
        let s = qualifying[q];
        let classes: Vec<usize> = s.rows.iter().map(|&r| fisher_classes[r]).collect();
        (q, fisher_score(&s.points, &classes).unwrap_or(0.0))
    });
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(qualifying[a.0].expert.cmp(&qualifying[b.0].expert)));
    scored.truncate(FISHER_KEEP);

    let fits: Vec<Option<(usize, f64, CvResult)>> = map_indices(scored.len(), |i| {
        let (q, fisher) = scored[i];
        let s = qualifying[q];
        cv_regress(&s.points, &targets.select(&s.rows), task.regression, task.folds, task.seed)
            .ok()
            .map(|cv| (q, fisher, cv))
    });
    let mut results: Vec<ExpertProbeResult> = fits
        .into_iter()
        .flatten()
        .map(|(q, fisher, cv)| ExpertProbeResult {
            expert: qualifying[q].expert,
            activations: qualifying[q].rows.len(),
            fisher,
            cv_score: cv.score,
            fold_scores: cv.fold_scores,
        })
        .collect();
    results.sort_by(|a, b| b.cv_score.total_cmp(&a.cv_score).then(a.expert.cmp(&b.expert)));
    ProbeReport::from_ranked(task.clone(), results)
}

/// [`collect_expert_samples`] followed by [`rank_expert_samples`].
pub fn rank_experts(
    params: &SmixaeParams<f32>,
    config: &SmixaeConfig,
    x: &Tensor<f32>,
    normalization: Option<&Normalization>,
    labels: &LabelValues,
    task: &ProbeTask,
) -> Result<ProbeReport, ProbeError> {
    if labels.len() != x.rows() {
        return Err(ProbeError::Shape(format!("{} rows but {} labels", x.rows(), labels.len())));
    }
    let samples = collect_expert_samples(params, config, x, normalization)?;
    rank_expert_samples(&samples, labels, task)
}

/// `R²_per − R²_lin`: how much better a ring `(cos, sin)(2πc/L)` of the
/// position label is explained by the activations than the position itself.
pub fn delta_r2_periodic(
    x: &DMatrix<f64>,
    chars: &[f64],
    period: f64,
    folds: usize,
    seed: u64,
) -> Result<f64, ProbeError> {
    if !(period > 0.0) {
        return Err(ProbeError::Labels(format!("period must be positive, got {period}")));
    }
    if let Some(i) = chars.iter().position(|&c| !(0.0..period).contains(&c)) {
        return Err(ProbeError::Labels(format!(
            "position labels must lie in [0, {period}), row {i} is {}",
            chars[i]
        )));
    }
    let m = chars.len();
    let per = DMatrix::from_fn(m, 2, |r, c| {
        let a = TAU * chars[r] / period;
        if c == 0 {
            a.cos()
        } else {
            a.sin()
        }
    });
    let lin = DMatrix::from_column_slice(m, 1, chars);
    let r_per = cv_regress(x, &Targets::Real(per), RegressionKind::Linear, folds, seed)?.score;
    let r_lin = cv_regress(x, &Targets::Real(lin), RegressionKind::Linear, folds, seed)?.score;
    Ok(r_per - r_lin)
}

/// Ranks experts by [`delta_r2_periodic`]; each result's `fisher` field is 0
/// and `fold_scores` is empty.
pub fn rank_newline_samples(
    samples: &[ExpertSamples],
    chars: &[f64],
    period: f64,
    folds: usize,
    seed: u64,
) -> Result<ProbeReport, ProbeError> {
    let qualifying: Vec<&ExpertSamples> = samples.iter().filter(|s| s.rows.len() >= folds).collect();
    let deltas = map_indices(qualifying.len(), |q| {
        let s = qualifying[q];
        let c: Vec<f64> = s.rows.iter().map(|&r| chars[r]).collect();
        delta_r2_periodic(&s.points, &c, period, folds, seed)
    });
    let mut results = Vec::new();
    for (s, d) in qualifying.iter().zip(deltas) {
        results.push(ExpertProbeResult {
            expert: s.expert,
            activations: s.rows.len(),
            fisher: 0.0,
            cv_score: d?,
            fold_scores: Vec::new(),
        });
    }
    results.sort_by(|a, b| b.cv_score.total_cmp(&a.cv_score).then(a.expert.cmp(&b.expert)));
    let task = ProbeTask {
        label: String::new(),
        hypothesis: Hypothesis::Identity,
        regression: RegressionKind::Linear,
        folds,
        seed,
    };
    ProbeReport::from_ranked(task, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn task(hyp: Hypothesis, seed: u64) -> ProbeTask {
        ProbeTask {
            label: "k".into(),
            hypothesis: hyp,
            regression: RegressionKind::Linear,
            folds: 5,
            seed,
        }
    }

    fn noise_expert(i: usize, m: usize, rng: &mut impl Rng) -> ExpertSamples {
        ExpertSamples {
            expert: i,
            rows: (0..m).collect(),
            points: DMatrix::from_fn(m, 3, |_, _| StandardNormal.sample(rng)),
        }
    }

    #[test]
    fn planted_cyclic_expert_wins() {
        let m = 700;
        let mut rng = seeded_rng(5);
        let k: Vec<i64> = (0..m).map(|i| (i % 7) as i64).collect();
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut samples: Vec<ExpertSamples> = (0..64).map(|i| noise_expert(i, m, &mut rng)).collect();
        samples[17].points = DMatrix::from_fn(m, 3, |r, c| {
            let a = TAU * k[r] as f64 / 7.0;
            [a.cos(), a.sin(), 0.0][c] + noise.sample(&mut rng)
        });
        let rep = rank_expert_samples(&samples, &LabelValues::Int(k), &task(Hypothesis::Cyclic(7), 1)).unwrap();
        assert_eq!(rep.top1_expert, 17);
        assert!(rep.top1 >= 0.95, "{}", rep.top1);
        assert_eq!(rep.experts.len(), 50);
        let top5: f64 = rep.experts[..5].iter().map(|e| e.cv_score).sum::<f64>() / 5.0;
        assert_eq!(rep.top5_mean, top5);
    }

    #[test]
    fn identical_experts_tie_by_index() {
        let mut rng = seeded_rng(2);
        let base = noise_expert(0, 60, &mut rng);
        let samples: Vec<ExpertSamples> = (0..6)
            .map(|i| ExpertSamples { expert: i, ..base.clone() })
            .collect();
        let labels = LabelValues::Real((0..60).map(|i| i as f64).collect());
        let rep = rank_expert_samples(&samples, &labels, &task(Hypothesis::Identity, 3)).unwrap();
        let order: Vec<usize> = rep.experts.iter().map(|e| e.expert).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4, 5]);
        assert!(rep.experts.iter().all(|e| e.cv_score == rep.top1));
    }

    #[test]
    fn results_follow_expert_permutation() {
        let mut rng = seeded_rng(9);
        let labels = LabelValues::Real((0..80).map(|i| (i % 13) as f64).collect());
        let mut samples: Vec<ExpertSamples> = (0..8).map(|i| noise_expert(i, 80, &mut rng)).collect();
        samples[3].points.column_mut(1).copy_from(&DMatrix::from_fn(80, 1, |r, _| (r % 13) as f64).column(0));
        let a = rank_expert_samples(&samples, &labels, &task(Hypothesis::Identity, 0)).unwrap();
        let perm = [5, 2, 7, 0, 6, 1, 3, 4];
        let shuffled: Vec<ExpertSamples> = perm
            .iter()
            .map(|&p| ExpertSamples { expert: 10 + p, ..samples[p].clone() })
            .collect();
        let b = rank_expert_samples(&shuffled, &labels, &task(Hypothesis::Identity, 0)).unwrap();
        assert_eq!(a.top1_expert, 3);
        assert_eq!(b.top1_expert, 13);
        for (x, y) in a.experts.iter().zip(&b.experts) {
            assert_eq!(x.expert + 10, y.expert);
            assert_eq!(x.cv_score, y.cv_score);
        }
    }

    #[test]
    fn sparse_experts_skipped_and_empty_is_error() {
        let mut rng = seeded_rng(1);
        let mut few = noise_expert(0, 4, &mut rng);
        few.rows = vec![0, 1, 2, 3];
        let labels = LabelValues::Real((0..10).map(f64::from).collect());
        assert!(matches!(
            rank_expert_samples(&[few], &labels, &task(Hypothesis::Identity, 0)),
            Err(ProbeError::NoQualifyingExperts)
        ));
    }

    #[test]
    fn ring_beats_line() {
        let m = 400;
        let mut rng = seeded_rng(3);
        let c: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..80.0)).collect();
        let ring = DMatrix::from_fn(m, 3, |r, k| {
            let a = TAU * c[r] / 80.0;
            [a.cos(), a.sin(), 0.0][k]
        });
        assert!(delta_r2_periodic(&ring, &c, 80.0, 5, 0).unwrap() > 0.3);
        let line = DMatrix::from_fn(m, 3, |r, k| [c[r] * 0.1, -0.5 * c[r] + 2.0, 1.0][k]);
        assert!(delta_r2_periodic(&line, &c, 80.0, 5, 0).unwrap() <= 0.05);
        assert!(delta_r2_periodic(&line, &[90.0; 400], 80.0, 5, 0).is_err());
    }
}
