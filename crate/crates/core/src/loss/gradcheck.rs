//! Central finite-difference check of the analytic loss gradients.
//!
//! The forward pass used for the differences is a separate, direct
//! evaluation of the loss definitions in double-double arithmetic. In plain
//! f64 the rounding noise of `f(x+h) - f(x-h)` is around `1e-16·|f| / h`,
//! which at small temperatures swamps gradient entries near the 1e-8
//! relative-error floor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_loss, LossConfig, LossKind};
use crate::batch::Batch;
use crate::ddouble::Dd;
use crate::error::{Error, Result};
use crate::modality::MaskMatrix;

const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBlock {
    pub name: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `[row, coord]` for queries, `[row, col, coord]` for candidates.
    pub worst_at: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub step: f64,
    pub loss: f64,
    pub blocks: Vec<GradientBlock>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Slot {
    Query(usize),
    Candidate(usize, usize),
}

pub(crate) struct Problem<'a> {
    kind: LossKind,
    queries: Vec<Vec<Dd>>,
    grid: Vec<Vec<Vec<Dd>>>,
    positives: Vec<usize>,
    mask: Option<&'a MaskMatrix>,
    tau: Dd,
    normalize: bool,
}

fn to_dd(v: &[f64]) -> Vec<Dd> {
    v.iter().copied().map(Dd::from).collect()
}

fn dd_dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

impl<'a> Problem<'a> {
    fn new(
        kind: LossKind,
        batch: &Batch,
        mask: Option<&'a MaskMatrix>,
        config: &LossConfig,
    ) -> Self {
        Self::from_parts(
            kind,
            (0..batch.n())
                .map(|r| to_dd(batch.query(r).as_slice()))
                .collect(),
            (0..batch.n())
                .map(|r| {
                    batch
                        .candidate_row(r)
                        .iter()
                        .map(|c| to_dd(c.as_slice()))
                        .collect()
                })
                .collect(),
            (0..batch.n()).map(|r| batch.positive_column(r)).collect(),
            mask,
            config,
        )
    }

    pub(crate) fn from_parts(
        kind: LossKind,
        queries: Vec<Vec<Dd>>,
        grid: Vec<Vec<Vec<Dd>>>,
        positives: Vec<usize>,
        mask: Option<&'a MaskMatrix>,
        config: &LossConfig,
    ) -> Self {
        Self {
            kind,
            queries,
            grid,
            positives,
            mask,
            tau: Dd::from(config.temperature),
            normalize: config.normalize_inputs,
        }
    }

    fn similarity(&self, a: &[Dd], b: &[Dd]) -> Dd {
        let d = dd_dot(a, b);
        let s = if self.normalize {
            d / (dd_dot(a, a) * dd_dot(b, b)).sqrt()
        } else {
            d
        };
        s / self.tau
    }

    /// `lse(s over active) - s_p`
    fn row(&self, anchor: &[Dd], cands: &[Option<&[Dd]>], p: usize) -> Dd {
        let sims: Vec<Option<Dd>> = cands
            .iter()
            .map(|c| c.map(|c| self.similarity(anchor, c)))
            .collect();
        let m = sims
            .iter()
            .flatten()
            .copied()
            .fold(
                Dd::from(f64::NEG_INFINITY),
                |a, b| if b.hi > a.hi { b } else { a },
            );
        let z: Dd = sims.iter().flatten().map(|s| (*s - m).exp()).sum();
        m + z.ln() - sims[p].expect("positive is active")
    }

    pub(crate) fn eval(&self, patch: Option<(Slot, &[Dd])>) -> Dd {
        let q = |r: usize| -> &[Dd] {
            match patch {
                Some((Slot::Query(pr), v)) if pr == r => v,
                _ => &self.queries[r],
            }
        };
        let c = |r: usize, k: usize| -> &[Dd] {
            match patch {
                Some((Slot::Candidate(pr, pk), v)) if pr == r && pk == k => v,
                _ => &self.grid[r][k],
            }
        };
        let n = self.queries.len();
        let cols = self.grid[0].len();
        let forward: Dd = (0..n)
            .map(|r| {
                let cands: Vec<Option<&[Dd]>> = (0..cols)
                    .map(|k| {
                        let keep = match (self.kind, self.mask) {
                            (LossKind::Mamcl, Some(m)) => m.get(r, k),
                            _ => true,
                        };
                        keep.then(|| c(r, k))
                    })
                    .collect();
                self.row(q(r), &cands, self.positives[r])
            })
            .sum();
        let nn = Dd::from(n as f64);
        if self.kind != LossKind::Bidirectional {
            return forward / nn;
        }
        let all_queries: Vec<Option<&[Dd]>> = (0..n).map(|j| Some(q(j))).collect();
        let backward: Dd = (0..n)
            .map(|r| self.row(c(r, self.positives[r]), &all_queries, r))
            .sum();
        (forward + backward) / (nn + nn)
    }
}

/// Loss value from the double-double reference evaluation.
pub fn reference_loss(
    kind: LossKind,
    batch: &Batch,
    mask: Option<&MaskMatrix>,
    config: &LossConfig,
) -> Result<f64> {
    config.validate()?;
    let owned;
    let mask = match (kind, mask) {
        (LossKind::Mamcl, None) => {
            owned = batch.modality_mask()?;
            Some(&owned)
        }
        (_, m) => m,
    };
    Ok(Problem::new(kind, batch, mask, config).eval(None).to_f64())
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOMINATOR_FLOOR)
}

/// Compare analytic gradients with `(f(x+h) - f(x-h)) / 2h` on every
/// query and candidate coordinate.
pub fn gradient_check(
    kind: LossKind,
    batch: &Batch,
    mask: Option<&MaskMatrix>,
    config: &LossConfig,
    step: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let owned;
    let mask = match (kind, mask) {
        (LossKind::Mamcl, None) => {
            owned = batch.modality_mask()?;
            Some(&owned)
        }
        (_, m) => m,
    };
    let analytic = compute_loss(kind, batch, mask, config)?;
    let problem = Problem::new(kind, batch, mask, config);
    let h = Dd::from(step);
    let two_h = h + h;

    let numeric = |slot: Slot, base: &[Dd], i: usize| -> f64 {
        let mut v = base.to_vec();
        v[i] = base[i] + h;
        let plus = problem.eval(Some((slot, &v)));
        v[i] = base[i] - h;
        let minus = problem.eval(Some((slot, &v)));
        ((plus - minus) / two_h).to_f64()
    };

    let (n, cols, d) = (batch.n(), batch.cols(), batch.dim());

    let query_errors: Vec<(f64, f64, Vec<usize>)> = (0..n * d)
        .into_par_iter()
        .map(|idx| {
            let (r, i) = (idx / d, idx % d);
            let num = numeric(Slot::Query(r), &problem.queries[r], i);
            let a = analytic.grad_queries[r][i];
            (relative_error(a, num), (a - num).abs(), vec![r, i])
        })
        .collect();

    let cand_errors: Vec<(f64, f64, Vec<usize>)> = (0..n * cols * d)
        .into_par_iter()
        .map(|idx| {
            let (r, rest) = (idx / (cols * d), idx % (cols * d));
            let (k, i) = (rest / d, rest % d);
            let num = numeric(Slot::Candidate(r, k), &problem.grid[r][k], i);
            let a = analytic.grad_candidates[r][k][i];
            (relative_error(a, num), (a - num).abs(), vec![r, k, i])
        })
        .collect();

    let summarize = |name: &str, errs: Vec<(f64, f64, Vec<usize>)>| {
        let coordinates = errs.len();
        let max_abs = errs.iter().map(|e| e.1).fold(0.0, f64::max);
        let worst =
            errs.into_iter()
                .fold(None::<(f64, Vec<usize>)>, |best, (rel, _, at)| match best {
                    Some((b, _)) if b >= rel => best,
                    _ => Some((rel, at)),
                });
        let (max_relative_error, worst_at) = worst.unwrap_or((0.0, vec![]));
        GradientBlock {
            name: name.to_string(),
            coordinates,
            max_relative_error,
            max_absolute_error: max_abs,
            worst_at,
        }
    };

    let blocks = vec![
        summarize("queries", query_errors),
        summarize("candidates", cand_errors),
    ];
    let max_relative_error = blocks
        .iter()
        .map(|b| b.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        kind,
        step,
        loss: analytic.value,
        blocks,
        max_relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Embedding;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_row_checks_clean() {
        let b =
            Batch::from_grid(vec![e(&[1.0, 2.0])], vec![vec![e(&[0.5, -1.0])]], vec![0]).unwrap();
        let r = gradient_check(LossKind::Infonce, &b, None, &LossConfig::default(), 1e-5).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn masked_coordinates_have_zero_numeric_derivative() {
        let b = Batch::from_grid(
            vec![e(&[1.0, 0.3, -0.2])],
            vec![vec![
                e(&[0.9, 0.1, 0.0]),
                e(&[0.2, 1.0, 0.4]),
                e(&[-0.5, 0.5, 1.0]),
            ]],
            vec![0],
        )
        .unwrap();
        let m = MaskMatrix::from_rows(vec![vec![true, false, true]], &[0]).unwrap();
        let r =
            gradient_check(LossKind::Mamcl, &b, Some(&m), &LossConfig::default(), 1e-5).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
        let analytic = super::super::mamcl_loss(&b, &m, &LossConfig::default()).unwrap();
        assert!(analytic.grad_candidates[0][1].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn reference_matches_fast_path() {
        let b = Batch::from_grid(
            vec![e(&[1.0, 0.3]), e(&[-0.4, 0.8])],
            vec![
                vec![e(&[0.9, 0.1]), e(&[0.2, 1.0])],
                vec![e(&[-0.5, 0.5]), e(&[1.0, 1.0])],
            ],
            vec![0, 1],
        )
        .unwrap();
        let cfg = LossConfig::with_temperature(0.1);
        let fast = super::super::infonce_loss(&b, &cfg).unwrap().value;
        let slow = reference_loss(LossKind::Infonce, &b, None, &cfg).unwrap();
        assert!((fast - slow).abs() < 1e-13);
    }

    #[test]
    fn step_out_of_range() {
        let b = Batch::from_grid(vec![e(&[1.0])], vec![vec![e(&[1.0])]], vec![0]).unwrap();
        assert!(gradient_check(LossKind::Infonce, &b, None, &LossConfig::default(), 0.1).is_err());
    }
}
