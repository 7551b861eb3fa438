//! Propensity score construction.
//!
//! The score is fit by logistic maximum likelihood (Newton-Raphson with step
//! halving). Model terms are chosen by the iterative procedure of Imbens and
//! Rubin: starting from a baseline covariate set, linear terms are added one
//! at a time by largest likelihood-ratio statistic while its implied z value
//! (sqrt of the LR statistic, one degree of freedom) exceeds a threshold,
//! then squared and pairwise interaction terms of the selected linear terms
//! are screened the same way against a stricter threshold.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// One model term beyond the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    /// A covariate entering linearly.
    Linear(String),
    /// A squared covariate.
    Quadratic(String),
    /// A product of two distinct covariates.
    Interaction(String, String),
}

impl Term {
    pub fn label(&self) -> String {
        match self {
            Term::Linear(a) => a.clone(),
            Term::Quadratic(a) => format!("{a}^2"),
            Term::Interaction(a, b) => format!("{a}:{b}"),
        }
    }

    fn values(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let col = |name: &str| {
            ds.covariate(name)
                .map(|c| c.values.as_slice())
                .ok_or_else(|| Error::MissingColumn {
                    column: name.to_string(),
                })
        };
        match self {
            Term::Linear(a) => Ok(col(a)?.to_vec()),
            Term::Quadratic(a) => Ok(col(a)?.iter().map(|v| v * v).collect()),
            Term::Interaction(a, b) => {
                let (xa, xb) = (col(a)?, col(b)?);
                Ok(xa.iter().zip(xb).map(|(u, v)| u * v).collect())
            }
        }
    }
}

/// Selected model terms plus the selection thresholds that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSet {
    /// Baseline covariates, always in the model.
    pub baseline: Vec<String>,
    /// Linear terms added by stage 2 (baseline not repeated here).
    pub linear: Vec<String>,
    /// Squared/interaction terms added by stage 3.
    pub quadratic_interaction: Vec<Term>,
    /// z threshold for admitting a linear term.
    pub c_linear: f64,
    /// z threshold for admitting a squared/interaction term.
    pub c_quadratic: f64,
}

impl TermSet {
    /// Baseline-only model with the conventional thresholds.
    pub fn baseline_only(baseline: &[&str]) -> Self {
        TermSet {
            baseline: baseline.iter().map(|s| s.to_string()).collect(),
            linear: Vec::new(),
            quadratic_interaction: Vec::new(),
            c_linear: 1.0,
            c_quadratic: 1.96,
        }
    }

    /// All linear terms: baseline followed by stage-2 additions.
    pub fn all_linear(&self) -> Vec<String> {
        let mut v = self.baseline.clone();
        v.extend(self.linear.iter().cloned());
        v
    }

    /// Every term beyond the intercept, in design-matrix order.
    pub fn terms(&self) -> Vec<Term> {
        let mut v: Vec<Term> = self.all_linear().into_iter().map(Term::Linear).collect();
        v.extend(self.quadratic_interaction.iter().cloned());
        v
    }

    fn validate(&self) -> Result<()> {
        if self.c_linear <= 0.0 || self.c_quadratic <= 0.0 {
            return Err(Error::InvalidConfig(
                "selection thresholds must be positive".into(),
            ));
        }
        let labels: Vec<String> = self.terms().iter().map(Term::label).collect();
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate term '{l}'")));
            }
        }
        Ok(())
    }
}

/// Fitted logistic propensity model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    pub terms: TermSet,
    /// "(intercept)" followed by term labels, aligned with `coefficients`.
    pub coefficient_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub log_likelihood: f64,
    /// Fitted probability per unit, strictly inside (0, 1).
    pub scores: Vec<f64>,
    /// logit(score) per unit.
    pub linearized: Vec<f64>,
    /// Raw-score common-support bounds, set by trimming.
    pub support_bounds: Option<(f64, f64)>,
    /// Max-norm of the log-likelihood gradient at the solution.
    pub gradient_max_norm: f64,
}

pub const GRADIENT_TOL: f64 = 1e-8;
pub const STEP_TOL: f64 = 1e-10;
const MAX_ITER: usize = 100;

/// The linearized (logit) propensity score.
pub fn linearized_score(e: f64) -> Result<f64> {
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::DegenerateScore { value: e });
    }
    Ok((e / (1.0 - e)).ln())
}

struct Design {
    names: Vec<String>,
    /// column-major: columns[j][i]
    columns: Vec<Vec<f64>>,
    n: usize,
}

fn build_design(ds: &Dataset, terms: &TermSet) -> Result<Design> {
    let n = ds.n_units();
    let mut names = vec!["(intercept)".to_string()];
    let mut columns = vec![vec![1.0; n]];
    for term in terms.terms() {
        names.push(term.label());
        columns.push(term.values(ds)?);
    }
    Ok(Design { names, columns, n })
}

fn log_likelihood(eta: &[f64], d: &[u8]) -> f64 {
    eta.iter()
        .zip(d)
        .map(|(&e, &di)| {
            // log(1+exp(e)) computed stably on both tails
            let log1pexp = if e > 30.0 { e } else { e.exp().ln_1p() };
            f64::from(di) * e - log1pexp
        })
        .sum()
}

fn sigmoid(e: f64) -> f64 {
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let x = e.exp();
        x / (1.0 + x)
    }
}

/// Gradient of the logistic log-likelihood at `beta`: X'(d - p).
pub(crate) fn logit_gradient(design_cols: &[Vec<f64>], d: &[u8], beta: &[f64]) -> Vec<f64> {
    let n = design_cols[0].len();
    let mut eta = vec![0.0; n];
    for (j, col) in design_cols.iter().enumerate() {
        for i in 0..n {
            eta[i] += beta[j] * col[i];
        }
    }
    let resid: Vec<f64> = (0..n).map(|i| f64::from(d[i]) - sigmoid(eta[i])).collect();
    design_cols
        .iter()
        .map(|col| col.iter().zip(&resid).map(|(x, r)| x * r).sum())
        .collect()
}

fn separating_term(design: &Design, beta: &[f64]) -> String {
    // the term contributing most to the diverging linear predictor
    let mut best = 0usize;
    let mut best_mag = f64::NEG_INFINITY;
    for (j, col) in design.columns.iter().enumerate() {
        let spread = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - col.iter().cloned().fold(f64::INFINITY, f64::min);
        let scale = if j == 0 { 1.0 } else { spread };
        let mag = beta[j].abs() * scale.max(1e-12);
        if mag > best_mag {
            best_mag = mag;
            best = j;
        }
    }
    design.names[best].clone()
}

/// Fit the logistic model for treatment on the given terms by maximum
/// likelihood. Convergence: gradient max-norm below 1e-8 or Newton step
/// below 1e-10. The log-likelihood is non-decreasing across iterations by
/// step halving.
pub fn fit_logit(ds: &Dataset, terms: &TermSet) -> Result<PropensityModel> {
    terms.validate()?;
    let design = build_design(ds, terms)?;
    let d = &ds.treatment;
    let n = design.n;
    let k = design.columns.len();
    if n == 0 {
        return Err(Error::EmptyGroup {
            group: "sample",
            context: String::new(),
        });
    }
    let n_treated = d.iter().filter(|&&x| x == 1).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::PerfectSeparation {
            term: "(intercept)".into(),
        });
    }

    // rank check at beta = 0 (W = I/4, so X'X carries the rank)
    let xtx = cross_product(&design.columns, None);
    if let Err(bad) = xtx.cholesky() {
        return Err(Error::RankDeficient {
            columns: bad.iter().map(|&j| design.names[j].clone()).collect(),
        });
    }

    let mut beta = vec![0.0; k];
    let mut eta = vec![0.0; n];
    let mut ll = log_likelihood(&eta, d);

    for _iter in 0..MAX_ITER {
        let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();

        // separation: every unit perfectly predicted while the MLE diverges
        let eps = 1e-8;
        let separated = (0..n).all(|i| {
            if d[i] == 1 {
                p[i] > 1.0 - eps
            } else {
                p[i] < eps
            }
        });
        if separated {
            return Err(Error::PerfectSeparation {
                term: separating_term(&design, &beta),
            });
        }

        let grad: Vec<f64> = design
            .columns
            .iter()
            .map(|col| {
                col.iter()
                    .zip(p.iter().zip(d))
                    .map(|(x, (pi, &di))| x * (f64::from(di) - pi))
                    .sum()
            })
            .collect();
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < GRADIENT_TOL {
            return finish(design, terms.clone(), beta, eta, ll, grad_norm);
        }

        let w: Vec<f64> = p.iter().map(|&pi| pi * (1.0 - pi)).collect();
        let hessian = cross_product(&design.columns, Some(&w));
        let delta = hessian.solve(&grad).map_err(|bad| Error::RankDeficient {
            columns: bad.iter().map(|&j| design.names[j].clone()).collect(),
        })?;

        // step halving keeps the log-likelihood non-decreasing
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial_beta: Vec<f64> = beta
                .iter()
                .zip(&delta)
                .map(|(b, dl)| b + step * dl)
                .collect();
            let mut trial_eta = vec![0.0; n];
            for (j, col) in design.columns.iter().enumerate() {
                let bj = trial_beta[j];
                for i in 0..n {
                    trial_eta[i] += bj * col[i];
                }
            }
            let trial_ll = log_likelihood(&trial_eta, d);
            if trial_ll >= ll - 1e-12 * (1.0 + ll.abs()) {
                let step_norm = delta.iter().fold(0.0f64, |m, x| m.max((x * step).abs()));
                beta = trial_beta;
                eta = trial_eta;
                ll = trial_ll;
                accepted = true;
                if step_norm < STEP_TOL {
                    let g = logit_gradient(&design.columns, d, &beta);
                    let gn = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    return finish(design, terms.clone(), beta, eta, ll, gn);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // cannot improve: treat the current point as the solution if the
            // gradient is already tiny, otherwise report non-convergence
            if grad_norm < 1e-6 {
                return finish(design, terms.clone(), beta, eta, ll, grad_norm);
            }
            return Err(Error::NoConvergence {
                iterations: MAX_ITER,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITER,
    })
}

fn cross_product(columns: &[Vec<f64>], weights: Option<&[f64]>) -> SymMatrix {
    let k = columns.len();
    let mut m = SymMatrix::zeros(k);
    for a in 0..k {
        for b in a..k {
            let s: f64 = match weights {
                Some(w) => columns[a]
                    .iter()
                    .zip(&columns[b])
                    .zip(w)
                    .map(|((x, y), wi)| x * y * wi)
                    .sum(),
                None => columns[a].iter().zip(&columns[b]).map(|(x, y)| x * y).sum(),
            };
            m.set(a, b, s);
            m.set(b, a, s);
        }
    }
    m
}

fn finish(
    design: Design,
    terms: TermSet,
    beta: Vec<f64>,
    eta: Vec<f64>,
    ll: f64,
    gradient_max_norm: f64,
) -> Result<PropensityModel> {
    let scores: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    for &s in &scores {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::DegenerateScore { value: s });
        }
    }
    let linearized: Vec<f64> = eta.clone();
    let w: Vec<f64> = scores.iter().map(|&p| p * (1.0 - p)).collect();
    let info = cross_product(&design.columns, Some(&w));
    let std_errors = match info.inverse() {
        Ok(inv) => (0..beta.len()).map(|j| inv.get(j, j).sqrt()).collect(),
        Err(_) => vec![f64::NAN; beta.len()],
    };
    Ok(PropensityModel {
        terms,
        coefficient_names: design.names,
        coefficients: beta,
        std_errors,
        log_likelihood: ll,
        scores,
        linearized,
        support_bounds: None,
        gradient_max_norm,
    })
}

/// Outcome of one candidate-model fit during term selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOutcome {
    Accepted,
    Rejected,
    Failed,
}

/// One fitted candidate model in the selection log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionEntry {
    /// 2 = linear screening, 3 = squared/interaction screening.
    pub stage: u8,
    pub round: usize,
    pub term: String,
    /// Likelihood-ratio statistic vs the current model (NaN when the fit failed).
    pub lr: f64,
    /// Implied z value, sqrt(max(lr, 0)).
    pub z: f64,
    pub outcome: CandidateOutcome,
}

/// The squared/interaction candidate pool over a set of linear terms:
/// all x_i * x_j with i <= j, K(K+1)/2 candidates in column order.
pub fn quadratic_candidates(linear: &[String]) -> Vec<Term> {
    let mut pool = Vec::with_capacity(linear.len() * (linear.len() + 1) / 2);
    for i in 0..linear.len() {
        for j in i..linear.len() {
            if i == j {
                pool.push(Term::Quadratic(linear[i].clone()));
            } else {
                pool.push(Term::Interaction(linear[i].clone(), linear[j].clone()));
            }
        }
    }
    pool
}

/// Iterative term selection. Stage 2 screens the non-baseline covariates as
/// linear terms against `c_linear`; stage 3 screens squares and interactions
/// of the selected linear terms against `c_quadratic`. Candidates whose fit
/// fails (non-convergence, rank deficiency, separation) are skipped and
/// logged. Ties on the LR statistic resolve to the earlier candidate in
/// column order, so the procedure is deterministic.
pub fn select_terms(
    ds: &Dataset,
    baseline: &[&str],
    c_linear: f64,
    c_quadratic: f64,
) -> Result<(TermSet, Vec<SelectionEntry>)> {
    for name in baseline {
        if ds.covariate(name).is_none() {
            return Err(Error::MissingColumn {
                column: name.to_string(),
            });
        }
    }
    let mut terms = TermSet {
        baseline: baseline.iter().map(|s| s.to_string()).collect(),
        linear: Vec::new(),
        quadratic_interaction: Vec::new(),
        c_linear,
        c_quadratic,
    };
    let mut log = Vec::new();
    let mut current = fit_logit(ds, &terms)?;

    // stage 2: linear candidates in dataset column order
    let mut pool: Vec<String> = ds
        .covariates
        .iter()
        .map(|c| c.name.clone())
        .filter(|n| !terms.baseline.contains(n))
        .collect();
    let mut round = 0usize;
    loop {
        round += 1;
        let mut best: Option<(usize, f64)> = None;
        let mut entries = Vec::with_capacity(pool.len());
        for (idx, cand) in pool.iter().enumerate() {
            let mut trial = terms.clone();
            trial.linear.push(cand.clone());
            match fit_logit(ds, &trial) {
                Ok(model) => {
                    let lr = (2.0 * (model.log_likelihood - current.log_likelihood)).max(0.0);
                    entries.push((idx, lr, false));
                    if best.map_or(true, |(_, b)| lr > b) {
                        best = Some((idx, lr));
                    }
                }
                Err(_) => entries.push((idx, f64::NAN, true)),
            }
        }
        let accepted_idx = match best {
            Some((idx, lr)) if lr.sqrt() > c_linear => Some(idx),
            _ => None,
        };
        for (idx, lr, failed) in entries {
            log.push(SelectionEntry {
                stage: 2,
                round,
                term: pool[idx].clone(),
                lr,
                z: if failed { f64::NAN } else { lr.max(0.0).sqrt() },
                outcome: if failed {
                    CandidateOutcome::Failed
                } else if Some(idx) == accepted_idx {
                    CandidateOutcome::Accepted
                } else {
                    CandidateOutcome::Rejected
                },
            });
        }
        match accepted_idx {
            Some(idx) => {
                let name = pool.remove(idx);
                terms.linear.push(name);
                current = fit_logit(ds, &terms)?;
            }
            None => break,
        }
        if pool.is_empty() {
            break;
        }
    }

    // stage 3: squared/interaction candidates of the selected linear terms
    let mut pool = quadratic_candidates(&terms.all_linear());
    let mut round = 0usize;
    loop {
        round += 1;
        if pool.is_empty() {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        let mut entries = Vec::with_capacity(pool.len());
        for (idx, cand) in pool.iter().enumerate() {
            let mut trial = terms.clone();
            trial.quadratic_interaction.push(cand.clone());
            match fit_logit(ds, &trial) {
                Ok(model) => {
                    let lr = (2.0 * (model.log_likelihood - current.log_likelihood)).max(0.0);
                    entries.push((idx, lr, false));
                    if best.map_or(true, |(_, b)| lr > b) {
                        best = Some((idx, lr));
                    }
                }
                Err(_) => entries.push((idx, f64::NAN, true)),
            }
        }
        let accepted_idx = match best {
            Some((idx, lr)) if lr.sqrt() > c_quadratic => Some(idx),
            _ => None,
        };
        for (idx, lr, failed) in entries {
            log.push(SelectionEntry {
                stage: 3,
                round,
                term: pool[idx].label(),
                lr,
                z: if failed { f64::NAN } else { lr.max(0.0).sqrt() },
                outcome: if failed {
                    CandidateOutcome::Failed
                } else if Some(idx) == accepted_idx {
                    CandidateOutcome::Accepted
                } else {
                    CandidateOutcome::Rejected
                },
            });
        }
        match accepted_idx {
            Some(idx) => {
                let term = pool.remove(idx);
                terms.quadratic_interaction.push(term);
                current = fit_logit(ds, &terms)?;
            }
            None => break,
        }
    }

    Ok((terms, log))
}

/// Report of a common-support trim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrimReport {
    /// Lowest treated score and highest control score, on the raw scale.
    pub bounds: (f64, f64),
    pub treated_dropped: usize,
    pub controls_dropped: usize,
    /// Indices (into the pre-trim dataset) of retained units.
    pub retained: Vec<usize>,
}

/// Enforce common support: drop treated units scoring above the highest
/// control score and control units scoring below the lowest treated score.
/// The model's per-unit scores are subset in step with the returned dataset
/// and `support_bounds` is recorded.
pub fn trim_common_support(ds: &Dataset, model: &mut PropensityModel) -> Result<(Dataset, TrimReport)> {
    let n = ds.n_units();
    assert_eq!(model.scores.len(), n, "model scores misaligned with dataset");
    let max_control = (0..n)
        .filter(|&i| ds.treatment[i] == 0)
        .map(|i| model.scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let min_treated = (0..n)
        .filter(|&i| ds.treatment[i] == 1)
        .map(|i| model.scores[i])
        .fold(f64::INFINITY, f64::min);
    if !max_control.is_finite() {
        return Err(Error::EmptyGroup {
            group: "control",
            context: " before trimming".into(),
        });
    }
    if !min_treated.is_finite() {
        return Err(Error::EmptyGroup {
            group: "treated",
            context: " before trimming".into(),
        });
    }

    let mut retained = Vec::with_capacity(n);
    let mut treated_dropped = 0usize;
    let mut controls_dropped = 0usize;
    for i in 0..n {
        let s = model.scores[i];
        if ds.treatment[i] == 1 {
            if s > max_control {
                treated_dropped += 1;
            } else {
                retained.push(i);
            }
        } else if s < min_treated {
            controls_dropped += 1;
        } else {
            retained.push(i);
        }
    }
    let any_treated = retained.iter().any(|&i| ds.treatment[i] == 1);
    let any_control = retained.iter().any(|&i| ds.treatment[i] == 0);
    if !any_treated {
        return Err(Error::EmptyGroup {
            group: "treated",
            context: " after trimming".into(),
        });
    }
    if !any_control {
        return Err(Error::EmptyGroup {
            group: "control",
            context: " after trimming".into(),
        });
    }

    let trimmed = ds.subset(&retained);
    model.scores = retained.iter().map(|&i| model.scores[i]).collect();
    model.linearized = retained.iter().map(|&i| model.linearized[i]).collect();
    model.support_bounds = Some((min_treated, max_control));
    let report = TrimReport {
        bounds: (min_treated, max_control),
        treated_dropped,
        controls_dropped,
        retained,
    };
    Ok((trimmed, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Column, Dataset};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn dataset_with(x: Vec<f64>, d: Vec<u8>) -> Dataset {
        let n = x.len();
        let ids = (0..n).map(|i| i.to_string()).collect();
        let col = Column {
            name: "x1".into(),
            values: x,
            missing: vec![false; n],
        };
        Dataset::from_parts(ids, vec![col], d, vec![0.0; n], None).unwrap()
    }

    #[test]
    fn intercept_only_balanced_sample_gives_zero() {
        let ds = dataset_with(vec![0.0; 10], vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0]);
        let terms = TermSet::baseline_only(&[]);
        let model = fit_logit(&ds, &terms).unwrap();
        assert!(model.coefficients[0].abs() < 1e-10);
        assert!(model.scores.iter().all(|&s| (s - 0.5).abs() < 1e-10));
    }

    #[test]
    fn all_treated_is_perfect_separation() {
        let ds = dataset_with(vec![1.0, 2.0, 3.0], vec![1, 1, 1]);
        let terms = TermSet::baseline_only(&[]);
        let err = fit_logit(&ds, &terms).unwrap_err();
        assert!(matches!(err, Error::PerfectSeparation { .. }));
    }

    #[test]
    fn separating_covariate_is_detected() {
        // x1 > 0 exactly predicts treatment
        let x: Vec<f64> = (0..40).map(|i| i as f64 - 19.5).collect();
        let d: Vec<u8> = x.iter().map(|&v| u8::from(v > 0.0)).collect();
        let ds = dataset_with(x, d);
        let terms = TermSet::baseline_only(&["x1"]);
        let err = fit_logit(&ds, &terms).unwrap_err();
        match err {
            Error::PerfectSeparation { term } => assert_eq!(term, "x1"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn duplicate_column_is_rank_deficient() {
        let x: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let d: Vec<u8> = (0..30).map(|i| (i % 2) as u8).collect();
        let n = x.len();
        let ids = (0..n).map(|i| i.to_string()).collect();
        let cols = vec![
            Column {
                name: "x1".into(),
                values: x.clone(),
                missing: vec![false; n],
            },
            Column {
                name: "x2".into(),
                values: x,
                missing: vec![false; n],
            },
        ];
        let ds = Dataset::from_parts(ids, cols, d, vec![0.0; n], None).unwrap();
        let terms = TermSet::baseline_only(&["x1", "x2"]);
        let err = fit_logit(&ds, &terms).unwrap_err();
        match err {
            Error::RankDeficient { columns } => assert_eq!(columns, vec!["x2".to_string()]),
            other => panic!("unexpected: {other}"),
        }
    }

    /// Independent oracle: plain Newton iteration with a hand-rolled 2x2
    /// solve, no step halving, fixed iteration count.
    fn newton_oracle_2(x: &[f64], d: &[u8]) -> (f64, f64) {
        let n = x.len();
        let (mut b0, mut b1) = (0.0f64, 0.0f64);
        for _ in 0..60 {
            let mut g0 = 0.0;
            let mut g1 = 0.0;
            let mut h00 = 0.0;
            let mut h01 = 0.0;
            let mut h11 = 0.0;
            for i in 0..n {
                let eta = b0 + b1 * x[i];
                let p = 1.0 / (1.0 + (-eta).exp());
                let r = f64::from(d[i]) - p;
                let w = p * (1.0 - p);
                g0 += r;
                g1 += x[i] * r;
                h00 += w;
                h01 += x[i] * w;
                h11 += x[i] * x[i] * w;
            }
            let det = h00 * h11 - h01 * h01;
            let s0 = (h11 * g0 - h01 * g1) / det;
            let s1 = (h00 * g1 - h01 * g0) / det;
            b0 += s0;
            b1 += s1;
        }
        (b0, b1)
    }

    #[test]
    fn matches_independent_newton_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d: Vec<u8> = x
            .iter()
            .map(|&xi| {
                let p = 1.0 / (1.0 + (-(0.5 - 1.0 * xi)).exp());
                u8::from(rng.gen::<f64>() < p)
            })
            .collect();
        let ds = dataset_with(x.clone(), d.clone());
        let terms = TermSet::baseline_only(&["x1"]);
        let model = fit_logit(&ds, &terms).unwrap();
        let (b0, b1) = newton_oracle_2(&x, &d);
        assert!((model.coefficients[0] - b0).abs() < 1e-4);
        assert!((model.coefficients[1] - b1).abs() < 1e-4);
        assert!(model.gradient_max_norm < 1e-6);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 60;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let d: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect();
        let cols = vec![vec![1.0; n], x];
        for _ in 0..10 {
            let beta = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let grad = logit_gradient(&cols, &d, &beta);
            let h = 1e-6;
            for j in 0..2 {
                let mut bp = beta;
                let mut bm = beta;
                bp[j] += h;
                bm[j] -= h;
                let ll_at = |b: &[f64; 2]| {
                    let eta: Vec<f64> =
                        (0..n).map(|i| b[0] * cols[0][i] + b[1] * cols[1][i]).collect();
                    log_likelihood(&eta, &d)
                };
                let fd = (ll_at(&bp) - ll_at(&bm)) / (2.0 * h);
                let denom = grad[j].abs().max(1.0);
                assert!(
                    (grad[j] - fd).abs() / denom < 1e-6,
                    "gradient mismatch: {} vs {}",
                    grad[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn linearized_score_values() {
        assert!(linearized_score(0.5).unwrap().abs() < 1e-12);
        assert!((linearized_score(0.7310585786300049).unwrap() - 1.0).abs() < 1e-9);
        assert!((linearized_score(0.923).unwrap() - 2.4838).abs() < 5e-5);
        assert!(linearized_score(0.0).is_err());
        assert!(linearized_score(1.0).is_err());
    }

    #[test]
    fn quadratic_pool_size_is_triangular() {
        let linear: Vec<String> = (0..22).map(|i| format!("v{i}")).collect();
        assert_eq!(quadratic_candidates(&linear).len(), 253);
        let linear: Vec<String> = (0..3).map(|i| format!("v{i}")).collect();
        assert_eq!(quadratic_candidates(&linear).len(), 6);
    }

    #[test]
    fn empty_candidate_pool_returns_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 80;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<u8> = x
            .iter()
            .map(|&xi| u8::from(rng.gen::<f64>() < 1.0 / (1.0 + (-xi).exp())))
            .collect();
        let ds = dataset_with(x, d);
        // x1 is baseline and the only covariate: stage 2 pool is empty and
        // stage 3 screens x1^2 only
        let (terms, log) = select_terms(&ds, &["x1"], 1.0, 1.96).unwrap();
        assert!(terms.linear.is_empty());
        assert!(log.iter().all(|e| e.stage == 3));
    }

    #[test]
    fn selection_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 150;
        let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<u8> = x1
            .iter()
            .zip(&x2)
            .map(|(&a, &b)| {
                let p = 1.0 / (1.0 + (-(0.8 * a + 0.5 * b)).exp());
                u8::from(rng.gen::<f64>() < p)
            })
            .collect();
        let ids = (0..n).map(|i| i.to_string()).collect();
        let cols = vec![
            Column {
                name: "x1".into(),
                values: x1,
                missing: vec![false; n],
            },
            Column {
                name: "x2".into(),
                values: x2,
                missing: vec![false; n],
            },
        ];
        let ds = Dataset::from_parts(ids, cols, d, vec![0.0; n], None).unwrap();
        let (a, _) = select_terms(&ds, &["x1"], 1.0, 1.96).unwrap();
        let (b, _) = select_terms(&ds, &["x1"], 1.0, 1.96).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trim_drops_treated_above_max_control() {
        // controls score up to 0.923; one treated sits above at 0.95
        let scores = vec![0.10, 0.923, 0.95, 0.50, 0.003];
        let treatment = vec![0u8, 0, 1, 1, 1];
        let n = scores.len();
        let ds = dataset_with(vec![0.0; n], treatment);
        let mut model = PropensityModel {
            terms: TermSet::baseline_only(&[]),
            coefficient_names: vec!["(intercept)".into()],
            coefficients: vec![0.0],
            std_errors: vec![0.0],
            log_likelihood: 0.0,
            scores: scores.clone(),
            linearized: scores.iter().map(|&s| linearized_score(s).unwrap()).collect(),
            support_bounds: None,
            gradient_max_norm: 0.0,
        };
        let (trimmed, report) = trim_common_support(&ds, &mut model).unwrap();
        assert_eq!(report.treated_dropped, 1);
        assert_eq!(report.bounds.1, 0.923);
        assert!(!trimmed.unit_ids.contains(&"2".to_string()));
        // controls below the lowest treated score (0.003) would drop too
        assert_eq!(report.controls_dropped, 0);
    }

    #[test]
    fn trim_identity_when_fully_overlapping() {
        let scores = vec![0.30, 0.70, 0.30, 0.60];
        let treatment = vec![0u8, 0, 1, 1];
        let ds = dataset_with(vec![0.0; 4], treatment);
        let mut model = PropensityModel {
            terms: TermSet::baseline_only(&[]),
            coefficient_names: vec!["(intercept)".into()],
            coefficients: vec![0.0],
            std_errors: vec![0.0],
            log_likelihood: 0.0,
            scores: scores.clone(),
            linearized: vec![0.0; 4],
            support_bounds: None,
            gradient_max_norm: 0.0,
        };
        let (trimmed, report) = trim_common_support(&ds, &mut model).unwrap();
        assert_eq!(trimmed.n_units(), 4);
        assert_eq!(report.treated_dropped + report.controls_dropped, 0);
    }

    #[test]
    fn trim_matches_brute_force_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 100;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let treatment: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.4)).collect();
        let ds = dataset_with(vec![0.0; n], treatment.clone());
        let mut model = PropensityModel {
            terms: TermSet::baseline_only(&[]),
            coefficient_names: vec!["(intercept)".into()],
            coefficients: vec![0.0],
            std_errors: vec![0.0],
            log_likelihood: 0.0,
            scores: scores.clone(),
            linearized: vec![0.0; n],
            support_bounds: None,
            gradient_max_norm: 0.0,
        };
        let (_, report) = trim_common_support(&ds, &mut model).unwrap();

        let max_c = scores
            .iter()
            .zip(&treatment)
            .filter(|(_, &d)| d == 0)
            .map(|(&s, _)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_t = scores
            .iter()
            .zip(&treatment)
            .filter(|(_, &d)| d == 1)
            .map(|(&s, _)| s)
            .fold(f64::INFINITY, f64::min);
        let expected: Vec<usize> = (0..n)
            .filter(|&i| {
                if treatment[i] == 1 {
                    scores[i] <= max_c
                } else {
                    scores[i] >= min_t
                }
            })
            .collect();
        assert_eq!(report.retained, expected);

        // two-sided support holds by construction
        for &i in &report.retained {
            if treatment[i] == 1 {
                assert!(report
                    .retained
                    .iter()
                    .any(|&j| treatment[j] == 0 && scores[j] >= scores[i]));
            } else {
                assert!(report
                    .retained
                    .iter()
                    .any(|&j| treatment[j] == 1 && scores[j] <= scores[i]));
            }
        }
    }
}
