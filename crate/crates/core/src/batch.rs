//! Batch assembly: per-row candidate lists of positive, hard negatives and
//! in-batch negatives.
//!
//! Row layout is `[own positive] ++ [own hard negatives, padded to H] ++
//! [positives of every other row, in row order]`. The positive therefore
//! sits at column 0, but the column is recorded per row and the loss code
//! only ever reads it from [`Batch::positive_column`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Embedding;
use crate::modality::{build_mask, MaskMatrix, ModalitySignature};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub query: Embedding,
    pub query_signature: ModalitySignature,
    pub positive: Embedding,
    pub positive_signature: ModalitySignature,
    pub hard_negatives: Vec<Embedding>,
    pub hard_negative_signatures: Vec<ModalitySignature>,
}

impl Sample {
    pub fn new(
        sample_id: impl Into<String>,
        (query, query_signature): (Embedding, ModalitySignature),
        (positive, positive_signature): (Embedding, ModalitySignature),
        hard_negatives: Vec<(Embedding, ModalitySignature)>,
    ) -> Self {
        let (hard_negatives, hard_negative_signatures) = hard_negatives.into_iter().unzip();
        Self {
            sample_id: sample_id.into(),
            query,
            query_signature,
            positive,
            positive_signature,
            hard_negatives,
            hard_negative_signatures,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hard_negatives.len() != self.hard_negative_signatures.len() {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: {} hard negatives but {} signatures",
                self.sample_id,
                self.hard_negatives.len(),
                self.hard_negative_signatures.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub include_in_batch_negatives: bool,
    /// Equalise ragged hard-negative lists by cyclic reuse instead of failing.
    pub pad_hard_negatives: bool,
    pub seed: u64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            include_in_batch_negatives: true,
            pad_hard_negatives: true,
            seed: 0,
        }
    }
}

/// Where a candidate cell came from, so gradients can be routed back to the
/// item that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateSource {
    Positive { row: usize },
    HardNegative { row: usize, index: usize },
    External,
}

#[derive(Debug, Clone)]
pub struct Batch {
    sample_ids: Vec<String>,
    queries: Vec<Embedding>,
    query_signatures: Vec<ModalitySignature>,
    candidates: Vec<Vec<Embedding>>,
    candidate_signatures: Vec<Vec<ModalitySignature>>,
    sources: Vec<Vec<CandidateSource>>,
    positive_columns: Vec<usize>,
    hard_negative_slots: usize,
    in_batch: bool,
}

pub fn assemble_batch(samples: &[Sample], options: &BatchOptions) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in samples {
        s.validate()?;
    }
    let n = samples.len();
    let lens = samples.iter().map(|s| s.hard_negatives.len());
    let (min_h, max_h) = lens.fold((usize::MAX, 0), |(lo, hi), h| (lo.min(h), hi.max(h)));
    if min_h != max_h && !options.pad_hard_negatives {
        return Err(Error::RaggedHardNegatives {
            min: min_h,
            max: max_h,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut candidates = Vec::with_capacity(n);
    let mut signatures = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);

    for (row, s) in samples.iter().enumerate() {
        let mut src = vec![CandidateSource::Positive { row }];
        src.extend(
            (0..s.hard_negatives.len()).map(|index| CandidateSource::HardNegative { row, index }),
        );

        let missing = max_h - s.hard_negatives.len();
        if missing > 0 {
            let pool: Vec<CandidateSource> = if s.hard_negatives.is_empty() {
                if !options.include_in_batch_negatives || n < 2 {
                    return Err(Error::NothingToPad { row });
                }
                (0..n)
                    .filter(|&m| m != row)
                    .map(|m| CandidateSource::Positive { row: m })
                    .collect()
            } else {
                src[1..].to_vec()
            };
            let offset = rng.random_range(0..pool.len());
            src.extend((0..missing).map(|j| pool[(offset + j) % pool.len()]));
        }

        if options.include_in_batch_negatives {
            src.extend(
                (0..n)
                    .filter(|&m| m != row)
                    .map(|m| CandidateSource::Positive { row: m }),
            );
        }

        let (cells, sigs): (Vec<_>, Vec<_>) = src
            .iter()
            .map(|source| match *source {
                CandidateSource::Positive { row } => (
                    samples[row].positive.clone(),
                    samples[row].positive_signature,
                ),
                CandidateSource::HardNegative { row, index } => (
                    samples[row].hard_negatives[index].clone(),
                    samples[row].hard_negative_signatures[index],
                ),
                CandidateSource::External => {
                    unreachable!("assembled batches have no external cells")
                }
            })
            .unzip();
        candidates.push(cells);
        signatures.push(sigs);
        sources.push(src);
    }

    let batch = Batch {
        sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
        queries: samples.iter().map(|s| s.query.clone()).collect(),
        query_signatures: samples.iter().map(|s| s.query_signature).collect(),
        candidates,
        candidate_signatures: signatures,
        sources,
        positive_columns: vec![0; n],
        hard_negative_slots: max_h,
        in_batch: options.include_in_batch_negatives,
    };
    batch.check_dims()?;
    Ok(batch)
}

impl Batch {
    /// Batch from an explicit candidate grid. All items are tagged `text`
    /// until [`Batch::with_signatures`] says otherwise.
    pub fn from_grid(
        queries: Vec<Embedding>,
        candidates: Vec<Vec<Embedding>>,
        positive_columns: Vec<usize>,
    ) -> Result<Self> {
        let n = queries.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if candidates.len() != n || positive_columns.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} queries, {} candidate rows, {} positive columns",
                candidates.len(),
                positive_columns.len()
            )));
        }
        let cols = candidates[0].len();
        for (r, row) in candidates.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {r} has {} candidates, expected {cols}",
                    row.len()
                )));
            }
            if positive_columns[r] >= cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {r}: positive column {} outside {cols} candidates",
                    positive_columns[r]
                )));
            }
        }
        let batch = Self {
            sample_ids: (0..n).map(|i| format!("row{i}")).collect(),
            queries,
            query_signatures: vec![ModalitySignature::TEXT; n],
            candidate_signatures: vec![vec![ModalitySignature::TEXT; cols]; n],
            sources: vec![vec![CandidateSource::External; cols]; n],
            candidates,
            positive_columns,
            hard_negative_slots: cols.saturating_sub(1),
            in_batch: false,
        };
        batch.check_dims()?;
        Ok(batch)
    }

    /// Pure in-batch pairing: row n's candidates are every positive, with its
    /// own first.
    pub fn in_batch_pairs(queries: Vec<Embedding>, positives: Vec<Embedding>) -> Result<Self> {
        if queries.len() != positives.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} queries but {} positives",
                queries.len(),
                positives.len()
            )));
        }
        let samples: Vec<Sample> = queries
            .into_iter()
            .zip(positives)
            .enumerate()
            .map(|(i, (q, p))| {
                Sample::new(
                    format!("pair{i}"),
                    (q, ModalitySignature::TEXT),
                    (p, ModalitySignature::TEXT),
                    vec![],
                )
            })
            .collect();
        assemble_batch(&samples, &BatchOptions::default())
    }

    pub fn with_signatures(
        mut self,
        query_signatures: Vec<ModalitySignature>,
        candidate_signatures: Vec<Vec<ModalitySignature>>,
    ) -> Result<Self> {
        let (n, cols) = (self.n(), self.cols());
        if query_signatures.len() != n
            || candidate_signatures.len() != n
            || candidate_signatures.iter().any(|r| r.len() != cols)
        {
            return Err(Error::ShapeMismatch(format!(
                "signature grid does not match the {n}x{cols} candidate grid"
            )));
        }
        self.query_signatures = query_signatures;
        self.candidate_signatures = candidate_signatures;
        Ok(self)
    }

    fn check_dims(&self) -> Result<()> {
        let d = self.queries[0].dim();
        let bad = self.queries.iter().any(|q| q.dim() != d)
            || self.candidates.iter().flatten().any(|c| c.dim() != d);
        if bad {
            return Err(Error::ShapeMismatch(format!(
                "embeddings in one batch must share dimension {d}"
            )));
        }
        Ok(())
    }

    /// Number of rows (N).
    pub fn n(&self) -> usize {
        self.queries.len()
    }

    /// Candidates per row (1 + K).
    pub fn cols(&self) -> usize {
        self.candidates[0].len()
    }

    /// Negatives per row (K).
    pub fn k(&self) -> usize {
        self.cols() - 1
    }

    pub fn dim(&self) -> usize {
        self.queries[0].dim()
    }

    pub fn sample_id(&self, row: usize) -> &str {
        &self.sample_ids[row]
    }

    pub fn query(&self, row: usize) -> &Embedding {
        &self.queries[row]
    }

    pub fn query_signature(&self, row: usize) -> ModalitySignature {
        self.query_signatures[row]
    }

    pub fn candidate(&self, row: usize, col: usize) -> &Embedding {
        &self.candidates[row][col]
    }

    pub fn candidate_row(&self, row: usize) -> &[Embedding] {
        &self.candidates[row]
    }

    pub fn candidate_signature(&self, row: usize, col: usize) -> ModalitySignature {
        self.candidate_signatures[row][col]
    }

    pub fn source(&self, row: usize, col: usize) -> CandidateSource {
        self.sources[row][col]
    }

    pub fn positive_column(&self, row: usize) -> usize {
        self.positive_columns[row]
    }

    pub fn hard_negative_slots(&self) -> usize {
        self.hard_negative_slots
    }

    /// True when every candidate is some row's positive and each row sees
    /// every positive exactly once.
    pub fn is_pure_in_batch(&self) -> bool {
        let n = self.n();
        if !self.in_batch || self.hard_negative_slots != 0 || self.cols() != n {
            return false;
        }
        (0..n).all(|row| {
            let mut seen = vec![false; n];
            let own_ok =
                self.sources[row][self.positive_columns[row]] == CandidateSource::Positive { row };
            own_ok
                && self.sources[row].iter().all(|s| match *s {
                    CandidateSource::Positive { row: m } => !std::mem::replace(&mut seen[m], true),
                    _ => false,
                })
        })
    }

    /// Modality mask for this batch: keep a cell iff its signature equals the
    /// row positive's.
    pub fn modality_mask(&self) -> Result<MaskMatrix> {
        let positive: Vec<_> = (0..self.n())
            .map(|r| self.candidate_signatures[r][self.positive_columns[r]])
            .collect();
        build_mask(
            &positive,
            &self.candidate_signatures,
            &self.positive_columns,
        )
    }

    pub fn replace_query(&mut self, row: usize, e: Embedding) -> Result<()> {
        if e.dim() != self.dim() {
            return Err(Error::ShapeMismatch("replacement query dimension".into()));
        }
        self.queries[row] = e;
        Ok(())
    }

    pub fn replace_candidate(&mut self, row: usize, col: usize, e: Embedding) -> Result<()> {
        if e.dim() != self.dim() {
            return Err(Error::ShapeMismatch(
                "replacement candidate dimension".into(),
            ));
        }
        self.candidates[row][col] = e;
        Ok(())
    }
}

/// Gaussian samples for checks and demos: text queries, positives and
/// hard negatives alternating image/video by row.
pub fn random_samples(
    n: usize,
    hard_negatives: usize,
    dim: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Result<Embedding> {
        loop {
            let v: Vec<f64> = (0..dim)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                return Embedding::new(v);
            }
        }
    };
    (0..n)
        .map(|i| {
            let sig = if i % 2 == 0 {
                ModalitySignature::IMAGE
            } else {
                ModalitySignature::VIDEO
            };
            let q = draw()?;
            let p = draw()?;
            let h = (0..hard_negatives)
                .map(|_| Ok((draw()?, sig)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample::new(
                format!("r{i}"),
                (q, ModalitySignature::TEXT),
                (p, sig),
                h,
            ))
        })
        .collect()
}
