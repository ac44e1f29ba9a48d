//! Synthetic multimodal data with a controllable modal gap.
//!
//! Each concept is a unit latent vector `z`. Each signature `s` owns a fixed
//! offset `o_s` with `‖o_s‖ = δ`, and an observation of a concept under `s`
//! is `z + o_s + σ·ε`. Latents, offsets, training noise and evaluation noise
//! come from separate ChaCha streams of the same seed, so changing e.g. the
//! evaluation tasks never perturbs the training set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{RawItem, TrainingExample};
use crate::error::{Error, Result};
use crate::math::{dot, norm};
use crate::modality::ModalitySignature;

const LATENT_STREAM: u64 = 0;
const OFFSET_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM_BASE: u64 = 0x100;

/// One training task: queries under `query`, positives under `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub query: ModalitySignature,
    pub target: ModalitySignature,
    /// Number of examples; defaults to `samples_per_concept` per training concept.
    #[serde(default)]
    pub count: Option<usize>,
}

impl PairSpec {
    pub fn task_name(&self) -> String {
        task_name(self.query, self.target)
    }
}

pub fn task_name(query: ModalitySignature, target: ModalitySignature) -> String {
    format!("{query}->{target}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_concepts: usize,
    pub latent_dim: usize,
    pub modal_gap: f64,
    pub noise: f64,
    pub signatures: Vec<ModalitySignature>,
    pub samples_per_concept: usize,
    pub hard_negative_count: usize,
    pub seed: u64,
    /// Training tasks. Empty means the first signature paired with each
    /// of the others (or with itself when it is the only one).
    pub pairs: Vec<PairSpec>,
    /// The last `holdout_concepts` concepts never appear in training and
    /// form the out-of-distribution evaluation split.
    pub holdout_concepts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_concepts: 64,
            latent_dim: 16,
            modal_gap: 1.0,
            noise: 0.1,
            signatures: vec![
                ModalitySignature::TEXT,
                ModalitySignature::IMAGE,
                ModalitySignature::VIDEO,
            ],
            samples_per_concept: 1,
            hard_negative_count: 2,
            seed: 0,
            pairs: Vec::new(),
            holdout_concepts: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_concepts == 0 {
            return bad("n_concepts must be positive".into());
        }
        if self.latent_dim < 2 {
            return bad(format!(
                "latent_dim must be at least 2, got {}",
                self.latent_dim
            ));
        }
        if !(self.modal_gap >= 0.0 && self.modal_gap.is_finite()) {
            return bad(format!(
                "modal_gap must be finite and >= 0, got {}",
                self.modal_gap
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if self.signatures.is_empty() {
            return bad("at least one signature is required".into());
        }
        if self.samples_per_concept == 0 {
            return bad("samples_per_concept must be positive".into());
        }
        if self.holdout_concepts >= self.n_concepts {
            return bad(format!(
                "holdout_concepts ({}) must leave at least one training concept out of {}",
                self.holdout_concepts, self.n_concepts
            ));
        }
        if self.hard_negative_count >= self.training_concepts() && self.hard_negative_count > 0 {
            return bad(format!(
                "hard_negative_count {} needs more than {} training concepts",
                self.hard_negative_count,
                self.training_concepts()
            ));
        }
        for p in &self.resolved_pairs() {
            for s in [p.query, p.target] {
                if !self.signatures.contains(&s) {
                    return bad(format!(
                        "pair {} uses signature {s} not in `signatures`",
                        p.task_name()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn training_concepts(&self) -> usize {
        self.n_concepts - self.holdout_concepts
    }

    pub fn resolved_pairs(&self) -> Vec<PairSpec> {
        if !self.pairs.is_empty() {
            return self.pairs.clone();
        }
        let first = self.signatures[0];
        let rest: Vec<ModalitySignature> = self.signatures[1..]
            .iter()
            .copied()
            .filter(|s| *s != first)
            .collect();
        let targets = if rest.is_empty() { vec![first] } else { rest };
        targets
            .into_iter()
            .map(|target| PairSpec {
                query: first,
                target,
                count: None,
            })
            .collect()
    }

    fn pair_count(&self, p: &PairSpec) -> usize {
        p.count
            .unwrap_or(self.samples_per_concept * self.training_concepts())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub task: String,
    pub concept: usize,
    pub hard_negative_concepts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub latents: Vec<Vec<f64>>,
    pub offsets: BTreeMap<ModalitySignature, Vec<f64>>,
    pub examples: Vec<TrainingExample>,
    /// Aligned with `examples`.
    pub meta: Vec<ExampleMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Concepts seen in training, fresh observations.
    #[default]
    Ind,
    /// Held-out concepts.
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub id: String,
    pub concept: usize,
    pub item: RawItem,
}

/// Queries, a candidate pool with one item per concept, and the query → pool
/// id ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub task: String,
    pub queries: Vec<LabeledItem>,
    pub pool: Vec<LabeledItem>,
    pub ground_truth: BTreeMap<String, String>,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// For each training concept, the other training concepts ordered by
/// latent cosine (highest first, ties by index), truncated to `h`.
fn nearest_concepts(latents: &[Vec<f64>], training: usize, h: usize) -> Vec<Vec<usize>> {
    (0..training)
        .map(|c| {
            let mut others: Vec<(usize, f64)> = (0..training)
                .filter(|&o| o != c)
                .map(|o| (o, dot(&latents[c], &latents[o])))
                .collect();
            others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            others.into_iter().take(h).map(|(o, _)| o).collect()
        })
        .collect()
}

impl SynthDataset {
    pub fn observe(
        &self,
        concept: usize,
        sig: ModalitySignature,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let offset = self
            .offsets
            .get(&sig)
            .ok_or_else(|| Error::UnknownSignature(sig.to_string()))?;
        let z = self
            .latents
            .get(concept)
            .ok_or_else(|| Error::InvalidConfig(format!("concept {concept} out of range")))?;
        let sigma = self.config.noise;
        Ok(z.iter()
            .zip(offset)
            .map(|(z, o)| {
                let e: f64 = rng.sample(StandardNormal);
                z + o + sigma * e
            })
            .collect())
    }

    /// Concepts of a split, in index order.
    pub fn split_concepts(&self, split: Split) -> std::ops::Range<usize> {
        let t = self.config.training_concepts();
        match split {
            Split::Ind => 0..t,
            Split::Ood => t..self.config.n_concepts,
        }
    }

    /// Evaluation set for one task: `queries_per_concept` fresh query
    /// observations per concept of the split, and one fresh target
    /// observation per concept as the pool.
    pub fn retrieval_set(
        &self,
        query: ModalitySignature,
        target: ModalitySignature,
        split: Split,
        queries_per_concept: usize,
    ) -> Result<RetrievalSet> {
        let concepts = self.split_concepts(split);
        if concepts.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "split {split:?} has no concepts"
            )));
        }
        if queries_per_concept == 0 {
            return Err(Error::InvalidConfig(
                "queries_per_concept must be positive".into(),
            ));
        }
        let stream = EVAL_STREAM_BASE
            | (u64::from(query.bits()) << 4)
            | u64::from(target.bits())
            | if split == Split::Ood { 0x80 } else { 0 };
        let mut rng = seeded(self.config.seed, stream);
        let task = task_name(query, target);
        let mut pool = Vec::with_capacity(concepts.len());
        for c in concepts.clone() {
            pool.push(LabeledItem {
                id: format!("cand/{target}/{c:06}"),
                concept: c,
                item: RawItem {
                    features: self.observe(c, target, &mut rng)?,
                    signature: target,
                },
            });
        }
        let mut queries = Vec::new();
        let mut ground_truth = BTreeMap::new();
        for c in concepts {
            for j in 0..queries_per_concept {
                let id = format!("query/{task}/{c:06}/{j}");
                ground_truth.insert(id.clone(), format!("cand/{target}/{c:06}"));
                queries.push(LabeledItem {
                    id,
                    concept: c,
                    item: RawItem {
                        features: self.observe(c, query, &mut rng)?,
                        signature: query,
                    },
                });
            }
        }
        Ok(RetrievalSet {
            task,
            queries,
            pool,
            ground_truth,
        })
    }

    pub fn task_examples(&self, task: &str) -> impl Iterator<Item = &TrainingExample> + '_ {
        let task = task.to_string();
        self.examples
            .iter()
            .zip(&self.meta)
            .filter(move |(_, m)| m.task == task)
            .map(|(e, _)| e)
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let dim = config.latent_dim;

    let mut rng = seeded(config.seed, LATENT_STREAM);
    let latents: Vec<Vec<f64>> = (0..config.n_concepts)
        .map(|_| random_direction(&mut rng, dim))
        .collect();

    let mut rng = seeded(config.seed, OFFSET_STREAM);
    let mut offsets = BTreeMap::new();
    for &s in &config.signatures {
        let dir = random_direction(&mut rng, dim);
        offsets.entry(s).or_insert_with(|| {
            dir.iter()
                .map(|x| x * config.modal_gap)
                .collect::<Vec<f64>>()
        });
    }

    let training = config.training_concepts();
    let neighbours = nearest_concepts(&latents, training, config.hard_negative_count);

    let mut dataset = SynthDataset {
        config: config.clone(),
        latents,
        offsets,
        examples: Vec::new(),
        meta: Vec::new(),
    };

    let mut rng = seeded(config.seed, TRAIN_STREAM);
    for pair in config.resolved_pairs() {
        let task = pair.task_name();
        for i in 0..config.pair_count(&pair) {
            let concept = i % training;
            let query = dataset.observe(concept, pair.query, &mut rng)?;
            let positive = dataset.observe(concept, pair.target, &mut rng)?;
            let hard_negative_concepts = neighbours[concept].clone();
            let hard_negatives = hard_negative_concepts
                .iter()
                .map(|&o| {
                    Ok(RawItem {
                        features: dataset.observe(o, pair.target, &mut rng)?,
                        signature: pair.target,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            dataset.examples.push(TrainingExample {
                id: format!("{task}/{i:06}"),
                query: RawItem {
                    features: query,
                    signature: pair.query,
                },
                positive: RawItem {
                    features: positive,
                    signature: pair.target,
                },
                hard_negatives,
            });
            dataset.meta.push(ExampleMeta {
                task: task.clone(),
                concept,
                hard_negative_concepts,
            });
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: ModalitySignature = ModalitySignature::TEXT;
    const I: ModalitySignature = ModalitySignature::IMAGE;
    const V: ModalitySignature = ModalitySignature::VIDEO;

    #[test]
    fn default_pairs_anchor_on_first_signature() {
        let c = SynthConfig::default();
        let names: Vec<String> = c.resolved_pairs().iter().map(PairSpec::task_name).collect();
        assert_eq!(names, ["text->image", "text->video"]);
        let solo = SynthConfig {
            signatures: vec![I],
            ..c
        };
        assert_eq!(solo.resolved_pairs()[0].task_name(), "image->image");
    }

    #[test]
    fn counts_follow_pairs() {
        let c = SynthConfig {
            n_concepts: 10,
            pairs: vec![
                PairSpec {
                    query: T,
                    target: T,
                    count: Some(7),
                },
                PairSpec {
                    query: T,
                    target: V,
                    count: None,
                },
            ],
            samples_per_concept: 2,
            ..Default::default()
        };
        let d = generate(&c).unwrap();
        assert_eq!(d.task_examples("text->text").count(), 7);
        assert_eq!(d.task_examples("text->video").count(), 20);
        assert_eq!(d.examples.len(), d.meta.len());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = SynthConfig::default();
        for c in [
            SynthConfig {
                latent_dim: 1,
                ..base.clone()
            },
            SynthConfig {
                noise: -0.1,
                ..base.clone()
            },
            SynthConfig {
                modal_gap: f64::NAN,
                ..base.clone()
            },
            SynthConfig {
                n_concepts: 2,
                hard_negative_count: 2,
                ..base.clone()
            },
            SynthConfig {
                holdout_concepts: 64,
                ..base.clone()
            },
            SynthConfig {
                pairs: vec![PairSpec {
                    query: T,
                    target: ModalitySignature::new([crate::Modality::Text, crate::Modality::Video])
                        .unwrap(),
                    count: None,
                }],
                ..base.clone()
            },
        ] {
            assert!(
                matches!(generate(&c), Err(Error::InvalidConfig(_))),
                "{c:?}"
            );
        }
    }

    #[test]
    fn offsets_have_gap_norm() {
        let d = generate(&SynthConfig {
            modal_gap: 0.7,
            ..Default::default()
        })
        .unwrap();
        for o in d.offsets.values() {
            assert!((norm(o) - 0.7).abs() < 1e-12);
        }
        for z in &d.latents {
            assert!((norm(z) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn holdout_concepts_stay_out_of_training() {
        let d = generate(&SynthConfig {
            n_concepts: 20,
            holdout_concepts: 5,
            ..Default::default()
        })
        .unwrap();
        for m in &d.meta {
            assert!(m.concept < 15);
            assert!(m
                .hard_negative_concepts
                .iter()
                .all(|&c| c < 15 && c != m.concept));
        }
        let ood = d.retrieval_set(T, I, Split::Ood, 2).unwrap();
        assert_eq!(ood.pool.len(), 5);
        assert_eq!(ood.queries.len(), 10);
        assert!(ood.pool.iter().all(|p| p.concept >= 15));
    }
}
