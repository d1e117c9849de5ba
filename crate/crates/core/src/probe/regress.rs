use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ProbeError, RegressionKind};
use crate::numerics::seeded_rng;

const RIDGE: f64 = 1e-6;
const L2: f64 = 1e-4;
const MAX_ITERS: usize = 2000;
const GRAD_TOL: f64 = 1e-6;

/// What a probe predicts: real-valued columns or class indices `0..k`.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(DMatrix<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.nrows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Real(y) => Targets::Real(y.select_rows(rows)),
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub score: f64,
    pub fold_scores: Vec<f64>,
}

/// Seeded `folds`-fold cross-validation: fit on the other folds, score the
/// held-out one (R² for linear and ridge, accuracy for logistic and
/// multinomial), report the mean.
pub fn cv_regress(
    x: &DMatrix<f64>,
    targets: &Targets,
    kind: RegressionKind,
    folds: usize,
    seed: u64,
) -> Result<CvResult, ProbeError> {
    let m = x.nrows();
    if targets.len() != m {
        return Err(ProbeError::Shape(format!("{m} rows but {} targets", targets.len())));
    }
    if folds < 2 || m < folds {
        return Err(ProbeError::Folds(format!("{m} rows cannot be split into {folds} folds")));
    }
    match (kind.is_classification(), targets) {
        (true, Targets::Real(_)) | (false, Targets::Classes(_)) => {
            return Err(ProbeError::Labels(format!("{kind:?} regression does not fit these targets")))
        }
        _ => {}
    }
    let assignment = match targets {
        Targets::Classes(c) => {
            let k = c.iter().max().map_or(0, |&v| v + 1);
            if kind == RegressionKind::Logistic && k != 2 {
                return Err(ProbeError::Labels(format!("logistic regression needs 2 classes, got {k}")));
            }
            let plain = shuffled_folds(m, folds, seed);
            if folds_cover_classes(&plain, c, k, folds) {
                plain
            } else {
                stratified_folds(c, k, folds, seed)?
            }
        }
        Targets::Real(_) => shuffled_folds(m, folds, seed),
    };

    let mut fold_scores = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<usize> = (0..m).filter(|&i| assignment[i] != f).collect();
        let test: Vec<usize> = (0..m).filter(|&i| assignment[i] == f).collect();
        let (xtr, xte) = (x.select_rows(&train), x.select_rows(&test));
        let score = match (targets.select(&train), targets.select(&test)) {
            (Targets::Real(ytr), Targets::Real(yte)) => {
                let model = fit_linear(&xtr, &ytr)?;
                r2_score(&yte, &model.predict(&xte))
            }
            (Targets::Classes(ctr), Targets::Classes(cte)) => {
                let k = match targets {
                    Targets::Classes(c) => c.iter().max().map_or(0, |&v| v + 1),
                    Targets::Real(_) => unreachable!(),
                };
                let model = fit_softmax(&xtr, &ctr, k, kind);
                let pred = model.predict(&xte);
                pred.iter().zip(&cte).filter(|(p, c)| p == c).count() as f64 / cte.len() as f64
            }
            _ => unreachable!(),
        };
        fold_scores.push(score);
    }
    Ok(CvResult {
        score: fold_scores.iter().sum::<f64>() / folds as f64,
        fold_scores,
    })
}

/// Fold index per row: a seeded permutation cut into near-equal blocks.
fn shuffled_folds(m: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut seeded_rng(seed));
    let mut out = vec![0; m];
    for (pos, &row) in perm.iter().enumerate() {
        out[row] = pos * folds / m;
    }
    out
}

fn folds_cover_classes(assign: &[usize], classes: &[usize], k: usize, folds: usize) -> bool {
    let mut total = vec![0usize; k];
    let mut per = vec![vec![0usize; k]; folds];
    for (&f, &c) in assign.iter().zip(classes) {
        total[c] += 1;
        per[f][c] += 1;
    }
    per.iter()
        .all(|fold| (0..k).all(|c| total[c] == 0 || total[c] > fold[c]))
}

fn stratified_folds(classes: &[usize], k: usize, folds: usize, seed: u64) -> Result<Vec<usize>, ProbeError> {
    let mut by_class = vec![Vec::new(); k];
    for (i, &c) in classes.iter().enumerate() {
        by_class[c].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.len() == 1) {
        return Err(ProbeError::Folds(format!(
            "class {c} has a single sample; some training fold must miss it"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut out = vec![0; classes.len()];
    let mut next = 0;
    for rows in &mut by_class {
        rows.shuffle(&mut rng);
        for &r in rows.iter() {
            out[r] = next % folds;
            next += 1;
        }
    }
    Ok(out)
}

struct LinearModel {
    coef: DMatrix<f64>,
    intercept: DVector<f64>,
}

impl LinearModel {
    fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.coef;
        for mut row in y.row_iter_mut() {
            row += self.intercept.transpose();
        }
        y
    }
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()))
}

fn center(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

/// Least squares on centered data with a small ridge on the Gram matrix.
fn fit_linear(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LinearModel, ProbeError> {
    let (xm, ym) = (column_means(x), column_means(y));
    let (xc, yc) = (center(x, &xm), center(y, &ym));
    let mut gram = xc.transpose() * &xc;
    for i in 0..gram.nrows() {
        gram[(i, i)] += RIDGE;
    }
    let rhs = xc.transpose() * &yc;
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| ProbeError::Shape("singular design matrix".into()))?,
    };
    let intercept = ym - coef.transpose() * xm;
    Ok(LinearModel { coef, intercept })
}

/// Mean over target columns of the coefficient of determination.
fn r2_score(y: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
    let cols = y.ncols();
    let mut total = 0.0;
    for c in 0..cols {
        let yc = y.column(c);
        let mean = yc.mean();
        let ss_tot: f64 = yc.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = yc.iter().zip(pred.column(c).iter()).map(|(a, b)| (a - b).powi(2)).sum();
        total += if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    total / cols as f64
}

struct SoftmaxModel {
    mean: DVector<f64>,
    scale: DVector<f64>,
    /// `(d + 1) x k`; last row is the bias. Binary models use `k = 1`.
    w: DMatrix<f64>,
    binary: bool,
}

impl SoftmaxModel {
    fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        standardized_design(x, &self.mean, &self.scale)
    }

    fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let logits = self.design(x) * &self.w;
        logits
            .row_iter()
            .map(|r| {
                if self.binary {
                    usize::from(r[0] > 0.0)
                } else {
                    r.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0
                }
            })
            .collect()
    }
}

fn standardized_design(x: &DMatrix<f64>, mean: &DVector<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let (m, d) = x.shape();
    DMatrix::from_fn(m, d + 1, |r, c| if c == d { 1.0 } else { (x[(r, c)] - mean[c]) / scale[c] })
}

/// Full-batch gradient descent on the L2-penalized logistic (binary) or
/// softmax (multinomial) log-loss over standardized features.
fn fit_softmax(x: &DMatrix<f64>, classes: &[usize], k: usize, kind: RegressionKind) -> SoftmaxModel {
    let (m, d) = x.shape();
    let mean = column_means(x);
    let scale = DVector::from_iterator(
        d,
        x.column_iter().zip(mean.iter()).map(|(c, mu)| {
            let sd = (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        }),
    );
    let xs = standardized_design(x, &mean, &scale);
    let binary = kind == RegressionKind::Logistic;
    let outs = if binary { 1 } else { k };
    let step = if binary {
        1.0 / (0.25 * (d + 1) as f64 + L2)
    } else {
        1.0 / (0.5 * (d + 1) as f64 + L2)
    };
    let mut w = DMatrix::zeros(d + 1, outs);
    for _ in 0..MAX_ITERS {
        let logits = &xs * &w;
        let mut resid = DMatrix::zeros(m, outs);
        for r in 0..m {
            if binary {
                let p = 1.0 / (1.0 + (-logits[(r, 0)]).exp());
                resid[(r, 0)] = p - (classes[r] == 1) as u8 as f64;
            } else {
                let max = logits.row(r).max();
                let z: f64 = logits.row(r).iter().map(|v| (v - max).exp()).sum();
                for c in 0..outs {
                    resid[(r, c)] = (logits[(r, c)] - max).exp() / z - (classes[r] == c) as u8 as f64;
                }
            }
        }
        let mut grad = xs.transpose() * resid / m as f64;
        for c in 0..outs {
            for i in 0..d {
                grad[(i, c)] += L2 * w[(i, c)];
            }
        }
        if grad.amax() < GRAD_TOL {
            break;
        }
        w -= grad * step;
    }
    SoftmaxModel { mean, scale, w, binary }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(m: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded_rng(seed);
        DMatrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn exact_affine_targets_score_one() {
        let x = gaussian(200, 3, 1);
        let y = DMatrix::from_fn(200, 2, |r, c| {
            if c == 0 {
                2.0 * x[(r, 0)] - x[(r, 2)] + 0.5
            } else {
                -x[(r, 1)] + 3.0
            }
        });
        let res = cv_regress(&x, &Targets::Real(y), RegressionKind::Linear, 5, 0).unwrap();
        assert!((res.score - 1.0).abs() < 1e-9, "{}", res.score);
        assert_eq!(res.fold_scores.len(), 5);
    }

    #[test]
    fn separable_binary_is_perfect() {
        let mut x = gaussian(200, 2, 2);
        let mut classes = Vec::new();
        for r in 0..200 {
            let c = usize::from(x[(r, 0)] + x[(r, 1)] > 0.0);
            // push each class away from the boundary
            let push = if c == 1 { 0.5 } else { -0.5 };
            x[(r, 0)] += push;
            x[(r, 1)] += push;
            classes.push(c);
        }
        let res = cv_regress(&x, &Targets::Classes(classes), RegressionKind::Logistic, 5, 3).unwrap();
        assert_eq!(res.score, 1.0);
    }

    #[test]
    fn separable_multiclass() {
        let centers = [(0.0, 5.0), (5.0, 0.0), (-5.0, -5.0)];
        let noise = gaussian(150, 2, 4);
        let classes: Vec<usize> = (0..150).map(|i| i % 3).collect();
        let x = DMatrix::from_fn(150, 2, |r, c| {
            let (a, b) = centers[classes[r]];
            (if c == 0 { a } else { b }) + 0.5 * noise[(r, c)]
        });
        let res = cv_regress(&x, &Targets::Classes(classes), RegressionKind::Multinomial, 5, 1).unwrap();
        assert_eq!(res.score, 1.0);
    }

    #[test]
    fn noise_r2_band() {
        let mut worst = (f64::INFINITY, f64::NEG_INFINITY);
        for seed in 0..50 {
            let x = gaussian(500, 3, 100 + seed);
            let y = gaussian(500, 1, 900 + seed);
            let s = cv_regress(&x, &Targets::Real(y), RegressionKind::Linear, 5, seed).unwrap().score;
            worst = (worst.0.min(s), worst.1.max(s));
        }
        assert!(worst.0 >= -0.2 && worst.1 <= 0.05, "{worst:?}");
    }

    #[test]
    fn cv_score_is_mean_of_folds() {
        let x = gaussian(60, 2, 5);
        let y = gaussian(60, 1, 6);
        let res = cv_regress(&x, &Targets::Real(y), RegressionKind::Ridge, 5, 7).unwrap();
        let mean = res.fold_scores.iter().sum::<f64>() / 5.0;
        assert_eq!(res.score, mean);
    }

    #[test]
    fn rare_class_triggers_stratification() {
        // 2 members of class 1 among 40 rows; plain folds may put both in one fold.
        let x = gaussian(40, 2, 8);
        let mut classes = vec![0; 40];
        classes[3] = 1;
        classes[4] = 1;
        for seed in 0..20 {
            let res = cv_regress(&x, &Targets::Classes(classes.clone()), RegressionKind::Logistic, 5, seed);
            assert!(res.is_ok());
        }
        classes[4] = 0;
        let plain = shuffled_folds(40, 5, 0);
        assert!(!folds_cover_classes(&plain, &classes, 2, 5));
        assert!(matches!(
            cv_regress(&x, &Targets::Classes(classes), RegressionKind::Logistic, 5, 0),
            Err(ProbeError::Folds(_))
        ));
    }

    #[test]
    fn folds_are_deterministic_and_balanced() {
        let a = shuffled_folds(23, 5, 11);
        assert_eq!(a, shuffled_folds(23, 5, 11));
        for f in 0..5 {
            let n = a.iter().filter(|&&x| x == f).count();
            assert!((4..=5).contains(&n));
        }
    }

    #[test]
    fn kind_target_mismatch() {
        let x = gaussian(10, 2, 0);
        assert!(cv_regress(&x, &Targets::Classes(vec![0; 10]), RegressionKind::Linear, 5, 0).is_err());
        assert!(cv_regress(&x, &Targets::Real(DMatrix::zeros(10, 1)), RegressionKind::Logistic, 5, 0).is_err());
        assert!(cv_regress(&x, &Targets::Real(DMatrix::zeros(10, 1)), RegressionKind::Linear, 11, 0).is_err());
    }
}
