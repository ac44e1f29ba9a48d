//! Toy encoder: one affine map `raw ↦ W·raw + b` per modality signature,
//! trained with seeded mini-batch SGD on any of the contrastive losses.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{assemble_batch, Batch, BatchOptions, CandidateSource, Sample};
use crate::ddouble::Dd;
use crate::error::{Error, Result};
use crate::loss::{
    compute_loss, relative_error, GradCheckReport, GradientBlock, LossConfig, LossKind, Problem,
};
use crate::math::Embedding;
use crate::modality::{MaskMatrix, ModalitySignature};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// d × f, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Projection {
    fn zeros(f: usize, d: usize) -> Self {
        Self {
            weight: vec![0.0; d * f],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub f: usize,
    pub d: usize,
    pub projections: BTreeMap<ModalitySignature, Projection>,
}

impl EncoderParams {
    pub fn new(
        f: usize,
        d: usize,
        projections: BTreeMap<ModalitySignature, Projection>,
    ) -> Result<Self> {
        if f == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder dims must be positive, got f={f} d={d}"
            )));
        }
        for (sig, p) in &projections {
            if p.weight.len() != d * f || p.bias.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "projection for {sig}: weight {} (want {}), bias {} (want {d})",
                    p.weight.len(),
                    d * f,
                    p.bias.len()
                )));
            }
            if let Some(i) = p.weight.iter().chain(&p.bias).position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(Self { f, d, projections })
    }

    /// Weights and biases uniform in `[-1/√f, 1/√f]`, drawn signature by
    /// signature in canonical order.
    pub fn init(f: usize, d: usize, signatures: &[ModalitySignature], seed: u64) -> Result<Self> {
        let mut sigs = signatures.to_vec();
        sigs.sort();
        sigs.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (f.max(1) as f64).sqrt();
        let projections = sigs
            .into_iter()
            .map(|s| {
                let weight = (0..d * f)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                let bias = (0..d).map(|_| rng.random_range(-bound..=bound)).collect();
                (s, Projection { weight, bias })
            })
            .collect();
        Self::new(f, d, projections)
    }

    fn zeros_like(&self) -> Self {
        Self {
            f: self.f,
            d: self.d,
            projections: self
                .projections
                .keys()
                .map(|&s| (s, Projection::zeros(self.f, self.d)))
                .collect(),
        }
    }

    pub fn signatures(&self) -> Vec<ModalitySignature> {
        self.projections.keys().copied().collect()
    }

    /// Projections used for `sig` and their weights: its own, or the
    /// available members' averaged for a fused signature.
    fn resolve(&self, sig: ModalitySignature) -> Result<Vec<(ModalitySignature, f64)>> {
        if self.projections.contains_key(&sig) {
            return Ok(vec![(sig, 1.0)]);
        }
        let members: Vec<ModalitySignature> = sig
            .members()
            .map(ModalitySignature::single)
            .filter(|m| self.projections.contains_key(m))
            .collect();
        if members.is_empty() {
            return Err(Error::UnknownSignature(sig.to_string()));
        }
        let w = 1.0 / members.len() as f64;
        Ok(members.into_iter().map(|m| (m, w)).collect())
    }

    pub fn encode(&self, raw: &[f64], sig: ModalitySignature) -> Result<Embedding> {
        if raw.len() != self.f {
            return Err(Error::ShapeMismatch(format!(
                "raw features have length {}, encoder expects {}",
                raw.len(),
                self.f
            )));
        }
        let parts = self.resolve(sig)?;
        let mut out = vec![0.0; self.d];
        for (s, w) in parts {
            let p = &self.projections[&s];
            for (i, o) in out.iter_mut().enumerate() {
                let row = &p.weight[i * self.f..(i + 1) * self.f];
                let v: f64 = row.iter().zip(raw).map(|(a, x)| a * x).sum::<f64>() + p.bias[i];
                *o += w * v;
            }
        }
        Embedding::new(out)
    }

    fn encode_dd(
        &self,
        raw: &[f64],
        sig: ModalitySignature,
        patch: Option<(Coord, Dd)>,
    ) -> Result<Vec<Dd>> {
        let parts = self.resolve(sig)?;
        let mut out = vec![Dd::ZERO; self.d];
        for (s, w) in parts {
            let p = &self.projections[&s];
            let entry = |is_bias: bool, idx: usize, base: f64| match patch {
                Some((c, v)) if c.signature == s && c.is_bias == is_bias && c.index == idx => v,
                _ => Dd::from(base),
            };
            for (i, o) in out.iter_mut().enumerate() {
                let v: Dd = (0..self.f)
                    .map(|j| {
                        entry(false, i * self.f + j, p.weight[i * self.f + j]) * Dd::from(raw[j])
                    })
                    .sum::<Dd>()
                    + entry(true, i, p.bias[i]);
                *o = *o + Dd::from(w) * v;
            }
        }
        Ok(out)
    }

    /// Accumulate `scale · ∂L/∂(encode(raw, sig))` into parameter gradients.
    fn add_embedding_gradient(
        &mut self,
        raw: &[f64],
        sig: ModalitySignature,
        grad: &[f64],
    ) -> Result<()> {
        let f = self.f;
        for (s, w) in self.resolve(sig)? {
            let p = self.projections.get_mut(&s).expect("resolved");
            for (i, g) in grad.iter().enumerate() {
                let g = w * g;
                if g == 0.0 {
                    continue;
                }
                for (wij, x) in p.weight[i * f..(i + 1) * f].iter_mut().zip(raw) {
                    *wij += g * x;
                }
                p.bias[i] += g;
            }
        }
        Ok(())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.projections
            .values_mut()
            .flat_map(|p| p.weight.iter_mut().chain(p.bias.iter_mut()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.projections
            .values()
            .flat_map(|p| p.weight.iter().chain(p.bias.iter()))
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Coord {
    signature: ModalitySignature,
    is_bias: bool,
    index: usize,
}

/// One raw item before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawItem {
    pub features: Vec<f64>,
    pub signature: ModalitySignature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub query: RawItem,
    pub positive: RawItem,
    #[serde(default)]
    pub hard_negatives: Vec<RawItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Keep only candidates whose signature equals the positive's.
    Modality,
    /// Keep everything (MAMCL then coincides with InfoNCE).
    AllOnes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub momentum: f64,
    pub loss: LossConfig,
    pub use_hard_negatives: bool,
    pub in_batch_negatives: bool,
    pub mask: MaskPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            loss_kind: LossKind::Mamcl,
            momentum: 0.0,
            loss: LossConfig::default(),
            use_hard_negatives: true,
            in_batch_negatives: true,
            mask: MaskPolicy::Modality,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-row loss of each epoch, measured on the fly.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub degenerate_rows: usize,
}

/// Loss and parameter gradients for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub per_row_losses: Vec<f64>,
    pub degenerate_rows: usize,
    pub gradients: EncoderParams,
}

/// Encoded batch plus what is needed to route gradients back to raw items.
struct Encoded<'a> {
    batch: Batch,
    mask: Option<MaskMatrix>,
    examples: &'a [&'a TrainingExample],
    use_hard_negatives: bool,
}

impl Encoded<'_> {
    fn item(&self, source: CandidateSource) -> &RawItem {
        match source {
            CandidateSource::Positive { row } => &self.examples[row].positive,
            CandidateSource::HardNegative { row, index } => {
                &self.examples[row].hard_negatives[index]
            }
            CandidateSource::External => unreachable!("training batches are assembled"),
        }
    }
}

fn encode_batch<'a>(
    params: &EncoderParams,
    examples: &'a [&'a TrainingExample],
    config: &TrainConfig,
    batch_seed: u64,
) -> Result<Encoded<'a>> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let bidirectional = config.loss_kind == LossKind::Bidirectional;
    let use_hard_negatives = config.use_hard_negatives && !bidirectional;
    let samples = examples
        .par_iter()
        .map(|ex| {
            let hard = if use_hard_negatives {
                ex.hard_negatives
                    .iter()
                    .map(|h| Ok((params.encode(&h.features, h.signature)?, h.signature)))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(Sample::new(
                ex.id.clone(),
                (
                    params.encode(&ex.query.features, ex.query.signature)?,
                    ex.query.signature,
                ),
                (
                    params.encode(&ex.positive.features, ex.positive.signature)?,
                    ex.positive.signature,
                ),
                hard,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let options = BatchOptions {
        include_in_batch_negatives: config.in_batch_negatives || bidirectional,
        pad_hard_negatives: true,
        seed: batch_seed,
    };
    let batch = assemble_batch(&samples, &options)?;
    let mask = match (config.loss_kind, config.mask) {
        (LossKind::Mamcl, MaskPolicy::Modality) => Some(batch.modality_mask()?),
        (LossKind::Mamcl, MaskPolicy::AllOnes) => {
            Some(MaskMatrix::all_ones(batch.n(), batch.cols()))
        }
        _ => None,
    };
    Ok(Encoded {
        batch,
        mask,
        examples,
        use_hard_negatives,
    })
}

/// Loss of one mini-batch and its gradient w.r.t. every encoder parameter.
/// `batch_seed` drives hard-negative padding only.
pub fn loss_and_gradients(
    params: &EncoderParams,
    examples: &[TrainingExample],
    config: &TrainConfig,
    batch_seed: u64,
) -> Result<StepOutput> {
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    step(params, &refs, config, batch_seed)
}

fn step(
    params: &EncoderParams,
    examples: &[&TrainingExample],
    config: &TrainConfig,
    batch_seed: u64,
) -> Result<StepOutput> {
    let enc = encode_batch(params, examples, config, batch_seed)?;
    let b = &enc.batch;
    let result = compute_loss(config.loss_kind, b, enc.mask.as_ref(), &config.loss)?;

    // Sum cell gradients per raw item before the outer products.
    let n = b.n();
    let query_grads = &result.grad_queries;
    let mut positive_grads = vec![vec![0.0; params.d]; n];
    let mut hard_grads: Vec<Vec<Vec<f64>>> = examples
        .iter()
        .map(|ex| {
            vec![
                vec![0.0; params.d];
                if enc.use_hard_negatives {
                    ex.hard_negatives.len()
                } else {
                    0
                }
            ]
        })
        .collect();
    for r in 0..n {
        for c in 0..b.cols() {
            let target = match b.source(r, c) {
                CandidateSource::Positive { row } => &mut positive_grads[row],
                CandidateSource::HardNegative { row, index } => &mut hard_grads[row][index],
                CandidateSource::External => unreachable!("training batches are assembled"),
            };
            for (t, g) in target.iter_mut().zip(&result.grad_candidates[r][c]) {
                *t += g;
            }
        }
    }

    let mut gradients = params.zeros_like();
    for (r, ex) in examples.iter().enumerate() {
        gradients.add_embedding_gradient(
            &ex.query.features,
            ex.query.signature,
            &query_grads[r],
        )?;
        gradients.add_embedding_gradient(
            &ex.positive.features,
            ex.positive.signature,
            &positive_grads[r],
        )?;
        for (h, g) in hard_grads[r].iter().enumerate() {
            let item = &ex.hard_negatives[h];
            gradients.add_embedding_gradient(&item.features, item.signature, g)?;
        }
    }

    Ok(StepOutput {
        loss: result.value,
        per_row_losses: result.per_row_losses,
        degenerate_rows: result.degenerate_rows,
        gradients,
    })
}

/// Seeded shuffled mini-batch SGD (with optional momentum).
pub fn train(
    params: &EncoderParams,
    dataset: &[TrainingExample],
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let mut params = params.clone();
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(config.epochs),
        steps: 0,
        degenerate_rows: 0,
    };

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<&TrainingExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let out = step(&params, &examples, config, rng.random())?;
            total += out.per_row_losses.iter().sum::<f64>();
            log.degenerate_rows += out.degenerate_rows;
            log.steps += 1;
            for (v, g) in velocity.values_mut().zip(out.gradients.values()) {
                *v = config.momentum * *v + g;
            }
            for (p, v) in params.values_mut().zip(velocity.values()) {
                *p -= config.learning_rate * v;
            }
        }
        log.epoch_losses.push(total / dataset.len() as f64);
    }
    if let Some(i) = params.values().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok((params, log))
}

/// Central finite-difference check of [`loss_and_gradients`] on every
/// encoder parameter, with the loss re-evaluated end to end (encode, then
/// contrastive loss) in double-double arithmetic.
pub fn gradient_check(
    params: &EncoderParams,
    examples: &[TrainingExample],
    config: &TrainConfig,
    batch_seed: u64,
    step_size: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&step_size) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {step_size} outside [1e-7, 1e-3]"
        )));
    }
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let analytic = step(params, &refs, config, batch_seed)?;
    let enc = encode_batch(params, &refs, config, batch_seed)?;
    let b = &enc.batch;
    let h = Dd::from(step_size);

    let eval = |patch: Option<(Coord, Dd)>| -> Result<Dd> {
        let queries = refs
            .iter()
            .map(|ex| params.encode_dd(&ex.query.features, ex.query.signature, patch))
            .collect::<Result<Vec<_>>>()?;
        let grid = (0..b.n())
            .map(|r| {
                (0..b.cols())
                    .map(|c| {
                        let item = enc.item(b.source(r, c));
                        params.encode_dd(&item.features, item.signature, patch)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let positives = (0..b.n()).map(|r| b.positive_column(r)).collect();
        let problem = Problem::from_parts(
            config.loss_kind,
            queries,
            grid,
            positives,
            enc.mask.as_ref(),
            &config.loss,
        );
        Ok(problem.eval(None))
    };

    let mut blocks = Vec::new();
    for (&sig, proj) in &params.projections {
        let grads = &analytic.gradients.projections[&sig];
        for (is_bias, base, analytic_vals, name) in [
            (false, &proj.weight, &grads.weight, format!("{sig}.weight")),
            (true, &proj.bias, &grads.bias, format!("{sig}.bias")),
        ] {
            let errs = (0..base.len())
                .into_par_iter()
                .map(|index| {
                    let coord = Coord {
                        signature: sig,
                        is_bias,
                        index,
                    };
                    let x = Dd::from(base[index]);
                    let plus = eval(Some((coord, x + h)))?;
                    let minus = eval(Some((coord, x - h)))?;
                    let numeric = ((plus - minus) / (h + h)).to_f64();
                    let a = analytic_vals[index];
                    Ok((relative_error(a, numeric), (a - numeric).abs(), index))
                })
                .collect::<Result<Vec<_>>>()?;
            let (rel, at) =
                errs.iter().fold(
                    (0.0, 0),
                    |best, e| if e.0 > best.0 { (e.0, e.2) } else { best },
                );
            blocks.push(GradientBlock {
                name,
                coordinates: base.len(),
                max_relative_error: rel,
                max_absolute_error: errs.iter().map(|e| e.1).fold(0.0, f64::max),
                worst_at: vec![at],
            });
        }
    }
    let max_relative_error = blocks
        .iter()
        .map(|b| b.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        kind: config.loss_kind,
        step: step_size,
        loss: analytic.loss,
        blocks,
        max_relative_error,
    })
}
