//! Contrastive objectives over a [`Batch`]: InfoNCE, modality-masked InfoNCE
//! (MAMCL) and the bidirectional in-batch variant, each with exact analytic
//! gradients w.r.t. the raw (pre-normalisation) embeddings.
//!
//! Every row reduces to the same kernel: with temperature-scaled similarities
//! `s_k`, an active column set `A` and the positive column `p`,
//!
//! ```text
//! loss = ln(1 + Σ_{k∈A, k≠p} exp(s_k - s_p))
//! ∂loss/∂s_k = softmax_A(s)_k - [k = p]
//! ```
//!
//! Masked columns are never part of `A`. They are skipped outright rather
//! than carried as `-inf`, so their embeddings are never read and their
//! gradients are exactly zero.

mod gradcheck;

pub use gradcheck::{gradient_check, reference_loss, GradCheckReport, GradientBlock};
pub(crate) use gradcheck::{relative_error, Problem};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::math::{dot, log1p_sum_exp, normalize_with_norm, project_through_normalization};
use crate::modality::MaskMatrix;

pub const DEFAULT_TEMPERATURE: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    /// L2-normalise embeddings before the dot product (cosine similarity).
    /// When off, inputs are taken as already unit length and the raw dot
    /// product is used.
    pub normalize_inputs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            normalize_inputs: true,
        }
    }
}

impl LossConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Infonce,
    Mamcl,
    Bidirectional,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Infonce => "infonce",
            LossKind::Mamcl => "mamcl",
            LossKind::Bidirectional => "bidirectional",
        })
    }
}

/// `S[n][k] = cos(q_n, c_nk) / τ`, optionally with excluded (masked) cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    excluded: Option<Vec<bool>>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_masked(&self) -> bool {
        self.excluded.is_some()
    }

    /// The entry, or `None` when the cell is masked out (the `-inf` of the
    /// masked matrix).
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.cols + col;
        match &self.excluded {
            Some(ex) if ex[i] => None,
            _ => Some(self.entries[i]),
        }
    }

    /// Apply a modality mask: `S̃ = S` where kept, excluded elsewhere.
    pub fn masked(&self, mask: &MaskMatrix) -> Result<Self> {
        if mask.rows() != self.rows || mask.cols() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, similarity matrix is {}x{}",
                mask.rows(),
                mask.cols(),
                self.rows,
                self.cols
            )));
        }
        let excluded = (0..self.rows)
            .flat_map(|r| mask.row(r).iter().map(|k| !k))
            .zip(
                self.excluded
                    .iter()
                    .flatten()
                    .copied()
                    .chain(std::iter::repeat(false)),
            )
            .map(|(a, b)| a || b)
            .collect();
        Ok(Self {
            excluded: Some(excluded),
            ..self.clone()
        })
    }

    /// Softmax over the row's non-excluded cells; excluded cells get 0.
    pub fn row_probabilities(&self, row: usize) -> Vec<f64> {
        let vals: Vec<Option<f64>> = (0..self.cols).map(|c| self.get(row, c)).collect();
        let m = vals
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals
            .iter()
            .map(|v| v.map_or(0.0, |x| (x - m).exp()))
            .collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

pub fn similarity_matrix(batch: &Batch, config: &LossConfig) -> Result<SimilarityMatrix> {
    config.validate()?;
    let (rows, cols) = (batch.n(), batch.cols());
    let mut entries = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let q = Prepared::new(batch.query(r).as_slice(), config)?;
        for c in 0..cols {
            let cand = Prepared::new(batch.candidate(r, c).as_slice(), config)?;
            entries.push(dot(&q.dir, &cand.dir) / config.temperature);
        }
    }
    Ok(SimilarityMatrix {
        rows,
        cols,
        entries,
        excluded: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub per_row_losses: Vec<f64>,
    /// N × d
    pub grad_queries: Vec<Vec<f64>>,
    /// N × (1+K) × d, aligned with the batch's candidate grid.
    pub grad_candidates: Vec<Vec<Vec<f64>>>,
    /// Rows with no active negative (loss 0).
    pub degenerate_rows: usize,
}

/// A vector ready for the similarity kernel: its direction (unit when
/// normalising, raw otherwise) and the norm needed to backpropagate.
struct Prepared {
    dir: Vec<f64>,
    norm: Option<f64>,
}

impl Prepared {
    fn new(v: &[f64], config: &LossConfig) -> Result<Self> {
        if config.normalize_inputs {
            let (dir, n) = normalize_with_norm(v)?;
            Ok(Self { dir, norm: Some(n) })
        } else {
            Ok(Self {
                dir: v.to_vec(),
                norm: None,
            })
        }
    }

    /// Map a gradient w.r.t. `dir` to one w.r.t. the raw vector, scaled by `w`.
    fn backprop(&self, grad_dir: &[f64], w: f64) -> Vec<f64> {
        let g = match self.norm {
            Some(n) => project_through_normalization(grad_dir, &self.dir, n),
            None => grad_dir.to_vec(),
        };
        g.into_iter().map(|x| x * w).collect()
    }
}

/// Loss and gradients of one anchor against its candidate list.
struct RowOutput {
    loss: f64,
    degenerate: bool,
    grad_anchor: Vec<f64>,
    /// `None` for masked columns.
    grad_candidates: Vec<Option<Vec<f64>>>,
}

/// Row kernel. `candidates[k] == None` marks an excluded column; `weight`
/// scales the gradients (the batch-mean factor).
fn row_kernel(
    anchor: &Prepared,
    candidates: &[Option<Prepared>],
    positive: usize,
    tau: f64,
    weight: f64,
) -> RowOutput {
    let d = anchor.dir.len();
    let pos = candidates[positive]
        .as_ref()
        .expect("positive column is never masked");
    let s_p = dot(&anchor.dir, &pos.dir) / tau;

    let shifted: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != positive)
        .filter_map(|(k, c)| {
            c.as_ref()
                .map(|c| (k, dot(&anchor.dir, &c.dir) / tau - s_p))
        })
        .collect();

    if shifted.is_empty() {
        return RowOutput {
            loss: 0.0,
            degenerate: true,
            grad_anchor: vec![0.0; d],
            grad_candidates: candidates
                .iter()
                .map(|c| c.as_ref().map(|_| vec![0.0; d]))
                .collect(),
        };
    }

    let xs: Vec<f64> = shifted.iter().map(|&(_, x)| x).collect();
    let loss = log1p_sum_exp(&xs);

    // dℓ/ds_k: softmax minus the one-hot at p
    let mut coeff = vec![0.0; candidates.len()];
    coeff[positive] = (-loss).exp_m1();
    for &(k, x) in &shifted {
        coeff[k] = (x - loss).exp();
    }

    let mut grad_anchor_dir = vec![0.0; d];
    for (k, c) in candidates.iter().enumerate() {
        if let Some(c) = c {
            let a = coeff[k] / tau;
            for (g, v) in grad_anchor_dir.iter_mut().zip(&c.dir) {
                *g += a * v;
            }
        }
    }

    let grad_candidates = candidates
        .iter()
        .enumerate()
        .map(|(k, c)| {
            c.as_ref().map(|c| {
                let a = coeff[k] / tau;
                let g: Vec<f64> = anchor.dir.iter().map(|v| a * v).collect();
                c.backprop(&g, weight)
            })
        })
        .collect();

    RowOutput {
        loss,
        degenerate: false,
        grad_anchor: anchor.backprop(&grad_anchor_dir, weight),
        grad_candidates,
    }
}

/// Per-row query→candidate pass over the grid; `keep(row, col)` decides
/// which cells are active.
fn forward_rows(
    batch: &Batch,
    config: &LossConfig,
    mask: Option<&MaskMatrix>,
    weight: f64,
) -> Result<Vec<RowOutput>> {
    (0..batch.n())
        .into_par_iter()
        .map(|r| {
            let anchor = Prepared::new(batch.query(r).as_slice(), config)?;
            let cands = (0..batch.cols())
                .map(|c| {
                    if mask.is_some_and(|m| !m.get(r, c)) {
                        Ok(None)
                    } else {
                        Prepared::new(batch.candidate(r, c).as_slice(), config).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(row_kernel(
                &anchor,
                &cands,
                batch.positive_column(r),
                config.temperature,
                weight,
            ))
        })
        .collect()
}

fn assemble(batch: &Batch, rows: Vec<RowOutput>) -> LossResult {
    let d = batch.dim();
    let n = batch.n();
    let per_row_losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let value = per_row_losses.iter().sum::<f64>() / n as f64;
    let degenerate_rows = rows.iter().filter(|r| r.degenerate).count();
    let mut grad_queries = Vec::with_capacity(n);
    let mut grad_candidates = Vec::with_capacity(n);
    for r in rows {
        grad_queries.push(r.grad_anchor);
        grad_candidates.push(
            r.grad_candidates
                .into_iter()
                .map(|g| g.unwrap_or_else(|| vec![0.0; d]))
                .collect(),
        );
    }
    LossResult {
        value,
        per_row_losses,
        grad_queries,
        grad_candidates,
        degenerate_rows,
    }
}

/// Mean over rows of `-log softmax` at the positive column, all candidates active.
pub fn infonce_loss(batch: &Batch, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    let rows = forward_rows(batch, config, None, 1.0 / batch.n() as f64)?;
    Ok(assemble(batch, rows))
}

/// InfoNCE restricted, per row, to candidates the mask keeps.
pub fn mamcl_loss(batch: &Batch, mask: &MaskMatrix, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    if mask.rows() != batch.n() || mask.cols() != batch.cols() {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, batch grid is {}x{}",
            mask.rows(),
            mask.cols(),
            batch.n(),
            batch.cols()
        )));
    }
    for r in 0..batch.n() {
        let p = batch.positive_column(r);
        if !mask.get(r, p) {
            return Err(Error::MaskDropsPositive { row: r, column: p });
        }
    }
    let rows = forward_rows(batch, config, Some(mask), 1.0 / batch.n() as f64)?;
    Ok(assemble(batch, rows))
}

/// `½ (L_{q→c} + L_{c→q})` over a pure in-batch pairing.
///
/// The candidate→query direction anchors on each row's positive cell
/// `c_n = grid[n][p_n]` and ranks it against every query, so its gradient
/// lands on that cell.
pub fn bidirectional_infonce_loss(batch: &Batch, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    if !batch.is_pure_in_batch() {
        return Err(Error::RequiresInBatchOnly(format!(
            "batch has {} hard-negative slots and {} candidates for {} rows",
            batch.hard_negative_slots(),
            batch.cols(),
            batch.n()
        )));
    }
    let n = batch.n();
    let weight = 0.5 / n as f64;
    let forward = forward_rows(batch, config, None, weight)?;

    let queries = (0..n)
        .map(|j| Prepared::new(batch.query(j).as_slice(), config).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let backward = (0..n)
        .into_par_iter()
        .map(|r| {
            let anchor = Prepared::new(
                batch.candidate(r, batch.positive_column(r)).as_slice(),
                config,
            )?;
            Ok(row_kernel(&anchor, &queries, r, config.temperature, weight))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut result = assemble(batch, forward);
    for (r, out) in backward.into_iter().enumerate() {
        result.per_row_losses[r] = 0.5 * (result.per_row_losses[r] + out.loss);
        let p = batch.positive_column(r);
        for (g, a) in result.grad_candidates[r][p]
            .iter_mut()
            .zip(&out.grad_anchor)
        {
            *g += a;
        }
        for (j, gq) in out.grad_candidates.into_iter().enumerate() {
            let gq = gq.expect("queries are never masked");
            for (g, a) in result.grad_queries[j].iter_mut().zip(&gq) {
                *g += a;
            }
        }
    }
    result.value = result.per_row_losses.iter().sum::<f64>() / n as f64;
    Ok(result)
}

/// Dispatch on [`LossKind`]. For MAMCL without an explicit mask the batch's
/// modality mask is used.
pub fn compute_loss(
    kind: LossKind,
    batch: &Batch,
    mask: Option<&MaskMatrix>,
    config: &LossConfig,
) -> Result<LossResult> {
    match kind {
        LossKind::Infonce => infonce_loss(batch, config),
        LossKind::Mamcl => match mask {
            Some(m) => mamcl_loss(batch, m, config),
            None => mamcl_loss(batch, &batch.modality_mask()?, config),
        },
        LossKind::Bidirectional => bidirectional_infonce_loss(batch, config),
    }
}
