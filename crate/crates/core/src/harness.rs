//! Seed-paired ablation runs on synthetic data: masking on/off, hard
//! negatives on/off, and training-data composition sweeps.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{train, EncoderParams, MaskPolicy, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalReport, TaggedEmbedding};
use crate::loss::LossKind;
use crate::modality::ModalitySignature;
use crate::synthgen::{generate, task_name, PairSpec, Split, SynthConfig, SynthDataset};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub loss_kind: LossKind,
    /// Restrict each row to candidates sharing the positive's signature.
    pub mask_enabled: bool,
    pub hard_negatives_enabled: bool,
}

fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub query: ModalitySignature,
    pub target: ModalitySignature,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub split: Split,
}

impl EvalTask {
    pub fn name(&self) -> String {
        let base = task_name(self.query, self.target);
        match self.split {
            Split::Ind => base,
            Split::Ood => format!("{base}@ood"),
        }
    }
}

/// Sample counts per training pair; must add up to the sweep budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub label: String,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub budget: usize,
    /// Training pairs, aligned with every composition's `counts`. Any
    /// `count` given here is ignored.
    pub pairs: Vec<PairSpec>,
    pub compositions: Vec<Composition>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub generator: SynthConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub eval_tasks: Vec<EvalTask>,
    pub seeds: Vec<u64>,
    /// Embedding dimension; defaults to the generator's latent dimension.
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default = "one")]
    pub queries_per_concept: usize,
    /// Masked arms use an all-ones mask (sanity check: must match InfoNCE).
    #[serde(default)]
    pub force_all_ones_mask: bool,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentSpec {
    fn check_common(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.queries_per_concept == 0 {
            return bad("queries_per_concept must be positive".into());
        }
        for t in &self.eval_tasks {
            if t.ks.is_empty() || t.ks.contains(&0) {
                return bad(format!("task {}: K values must be positive", t.name()));
            }
        }
        for a in &self.arms {
            if a.mask_enabled && a.loss_kind == LossKind::Bidirectional {
                return bad(format!(
                    "arm {}: masking is not defined for the bidirectional loss",
                    a.label
                ));
            }
        }
        self.generator
            .validate()
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    fn check_ablation(
        &self,
        what: &str,
        differs: impl Fn(&Arm, &Arm) -> (bool, bool),
    ) -> Result<()> {
        self.check_common()?;
        if self.arms.len() != 2 {
            return Err(Error::InvalidSpec(format!(
                "{what} ablation needs exactly two arms, got {}",
                self.arms.len()
            )));
        }
        if self.eval_tasks.is_empty() {
            return Err(Error::InvalidSpec(
                "at least one eval task is required".into(),
            ));
        }
        let (toggled, others_equal) = differs(&self.arms[0], &self.arms[1]);
        if !toggled || !others_equal {
            return Err(Error::InvalidSpec(format!(
                "{what} ablation arms must differ only in the toggled factor: {:?} vs {:?}",
                self.arms[0], self.arms[1]
            )));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serialises");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn embedding_dim(&self) -> usize {
        self.embedding_dim.unwrap_or(self.generator.latent_dim)
    }
}

/// Whether two loss kinds belong to the masked/unmasked InfoNCE family,
/// where the mask flag alone decides the objective.
fn same_family(a: LossKind, b: LossKind) -> bool {
    a == b || (a != LossKind::Bidirectional && b != LossKind::Bidirectional)
}

/// Training config for one arm. With the mask on the objective is MAMCL
/// with the modality mask; with it off, InfoNCE (or bidirectional).
pub fn arm_train_config(spec: &ExperimentSpec, arm: &Arm, seed: u64) -> TrainConfig {
    let loss_kind = match (arm.loss_kind, arm.mask_enabled) {
        (LossKind::Bidirectional, _) => LossKind::Bidirectional,
        (_, true) => LossKind::Mamcl,
        (_, false) => LossKind::Infonce,
    };
    TrainConfig {
        seed,
        loss_kind,
        use_hard_negatives: arm.hard_negatives_enabled,
        mask: if spec.force_all_ones_mask {
            MaskPolicy::AllOnes
        } else {
            MaskPolicy::Modality
        },
        ..spec.train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arm: String,
    pub seed: u64,
    pub task: String,
    pub final_loss: f64,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub arm: String,
    pub task: String,
    pub recall_at: BTreeMap<usize, MeanStd>,
    pub final_loss: MeanStd,
}

/// Per-seed R@1 difference `treatment − control` on one task; the task
/// `"average"` uses the mean R@1 over all tasks of each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub task: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    /// Generated training examples per pair task.
    pub sample_counts: BTreeMap<String, usize>,
    /// Mean R@1 over seeds per evaluation task.
    pub recall_at_1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub protocol: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    pub tasks: Vec<String>,
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
    pub deltas: Vec<PairedDelta>,
    pub treatment: Option<String>,
    pub control: Option<String>,
    pub sweep: Vec<SweepRow>,
}

impl ExperimentReport {
    pub fn cell(&self, arm: &str, seed: u64, task: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.arm == arm && c.seed == seed && c.task == task)
    }

    pub fn delta(&self, task: &str) -> Option<&PairedDelta> {
        self.deltas.iter().find(|d| d.task == task)
    }

    /// Seed-paired R@1 difference `a − b` between two tasks of one arm.
    pub fn task_gap(&self, arm: &str, a: &str, b: &str) -> Option<MeanStd> {
        let per_seed: Option<Vec<f64>> = self
            .seeds
            .iter()
            .map(|&s| {
                Some(
                    self.cell(arm, s, a)?.report.recall(1)?
                        - self.cell(arm, s, b)?.report.recall(1)?,
                )
            })
            .collect();
        per_seed.filter(|v| !v.is_empty()).map(|v| MeanStd::of(&v))
    }

    /// True when `own` is the arm's best task by mean R@1 or trails another
    /// task by less than two standard deviations of the seed-paired gap.
    pub fn own_task_best_or_tied(&self, arm: &str, own: &str) -> bool {
        self.tasks.iter().filter(|t| t.as_str() != own).all(|t| {
            self.task_gap(arm, own, t)
                .is_some_and(|g| g.mean >= 0.0 || -g.mean < 2.0 * g.std)
        })
    }

    /// `arm,task,R@k mean,R@k std...,final_loss mean` for every aggregate.
    pub fn aggregates_csv(&self) -> Result<String> {
        let ks: Vec<usize> = self
            .aggregates
            .first()
            .map(|a| a.recall_at.keys().copied().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["arm".to_string(), "task".to_string()];
        for k in &ks {
            header.push(format!("R@{k}_mean"));
            header.push(format!("R@{k}_std"));
        }
        header.push("final_loss_mean".into());
        w.write_record(&header)?;
        for a in &self.aggregates {
            let mut rec = vec![a.arm.clone(), a.task.clone()];
            for k in &ks {
                let m = a
                    .recall_at
                    .get(k)
                    .map(|m| (m.mean, m.std))
                    .unwrap_or((f64::NAN, f64::NAN));
                rec.push(m.0.to_string());
                rec.push(m.1.to_string());
            }
            rec.push(a.final_loss.mean.to_string());
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Configurations × tasks table of mean R@1.
    pub fn sweep_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["composition".to_string()];
        header.extend(self.tasks.iter().cloned());
        w.write_record(&header)?;
        for row in &self.sweep {
            let mut rec = vec![row.label.clone()];
            rec.extend(self.tasks.iter().map(|t| row.recall_at_1[t].to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    pub fn deltas_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "mean", "std", "per_seed"])?;
        for d in &self.deltas {
            let per: Vec<String> = d.per_seed.iter().map(|x| x.to_string()).collect();
            w.write_record([
                d.task.clone(),
                d.mean.to_string(),
                d.std.to_string(),
                per.join(" "),
            ])?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

struct Run {
    arm: String,
    seed: u64,
    final_loss: f64,
    reports: Vec<(String, RetrievalReport)>,
}

fn evaluate_tasks(
    params: &EncoderParams,
    data: &SynthDataset,
    tasks: &[EvalTask],
    queries_per_concept: usize,
) -> Result<Vec<(String, RetrievalReport)>> {
    let tag = |items: &[crate::synthgen::LabeledItem]| {
        items
            .iter()
            .map(|l| {
                Ok(TaggedEmbedding {
                    id: l.id.clone(),
                    signature: l.item.signature,
                    embedding: params.encode(&l.item.features, l.item.signature)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    tasks
        .iter()
        .map(|t| {
            let set = data.retrieval_set(t.query, t.target, t.split, queries_per_concept)?;
            let report = evaluate(
                &tag(&set.queries)?,
                &tag(&set.pool)?,
                &set.ground_truth,
                &t.ks,
            )?;
            Ok((t.name(), report))
        })
        .collect()
}

/// Generate, train from the seed's initialisation and evaluate.
fn run_one(
    spec: &ExperimentSpec,
    generator: &SynthConfig,
    data: &SynthDataset,
    arm: &Arm,
    label: &str,
    seed: u64,
) -> Result<Run> {
    let init = EncoderParams::init(
        generator.latent_dim,
        spec.embedding_dim(),
        &generator.signatures,
        seed,
    )?;
    let cfg = arm_train_config(spec, arm, seed);
    let (params, log) = train(&init, &data.examples, &cfg)?;
    Ok(Run {
        arm: label.to_string(),
        seed,
        final_loss: log.epoch_losses.last().copied().unwrap_or(0.0),
        reports: evaluate_tasks(&params, data, &spec.eval_tasks, spec.queries_per_concept)?,
    })
}

fn seeded_generator(base: &SynthConfig, seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..base.clone()
    }
}

fn assemble_report(
    spec: &ExperimentSpec,
    protocol: &str,
    arms: Vec<String>,
    tasks: Vec<String>,
    runs: Vec<Run>,
    paired: Option<(String, String)>,
) -> ExperimentReport {
    let cells: Vec<Cell> = runs
        .iter()
        .flat_map(|r| {
            r.reports.iter().map(move |(task, report)| Cell {
                arm: r.arm.clone(),
                seed: r.seed,
                task: task.clone(),
                final_loss: r.final_loss,
                report: report.clone(),
            })
        })
        .collect();

    let mut aggregates = Vec::new();
    for arm in &arms {
        for task in &tasks {
            let mine: Vec<&Cell> = cells
                .iter()
                .filter(|c| &c.arm == arm && &c.task == task)
                .collect();
            let ks: Vec<usize> = mine[0].report.recall_at.keys().copied().collect();
            let recall_at = ks
                .iter()
                .map(|k| {
                    let xs: Vec<f64> = mine.iter().map(|c| c.report.recall_at[k]).collect();
                    (*k, MeanStd::of(&xs))
                })
                .collect();
            let losses: Vec<f64> = mine.iter().map(|c| c.final_loss).collect();
            aggregates.push(Aggregate {
                arm: arm.clone(),
                task: task.clone(),
                recall_at,
                final_loss: MeanStd::of(&losses),
            });
        }
    }

    let mut deltas = Vec::new();
    if let Some((treat, ctrl)) = &paired {
        let r1 = |arm: &str, seed: u64, task: &str| {
            cells
                .iter()
                .find(|c| c.arm == arm && c.seed == seed && c.task == task)
                .and_then(|c| {
                    c.report
                        .recall(1)
                        .or_else(|| c.report.recall_at.values().next().copied())
                })
                .expect("every cell present")
        };
        for task in &tasks {
            let per_seed: Vec<f64> = spec
                .seeds
                .iter()
                .map(|&s| r1(treat, s, task) - r1(ctrl, s, task))
                .collect();
            let m = MeanStd::of(&per_seed);
            deltas.push(PairedDelta {
                task: task.clone(),
                per_seed,
                mean: m.mean,
                std: m.std,
            });
        }
        let per_seed: Vec<f64> = spec
            .seeds
            .iter()
            .map(|&s| {
                tasks
                    .iter()
                    .map(|t| r1(treat, s, t) - r1(ctrl, s, t))
                    .sum::<f64>()
                    / tasks.len() as f64
            })
            .collect();
        let m = MeanStd::of(&per_seed);
        deltas.push(PairedDelta {
            task: "average".into(),
            per_seed,
            mean: m.mean,
            std: m.std,
        });
    }

    let (treatment, control) = match paired {
        Some((t, c)) => (Some(t), Some(c)),
        None => (None, None),
    };
    ExperimentReport {
        name: spec.name.clone(),
        protocol: protocol.into(),
        config_hash: spec.config_hash(),
        seeds: spec.seeds.clone(),
        arms,
        tasks,
        cells,
        aggregates,
        deltas,
        treatment,
        control,
        sweep: Vec::new(),
    }
}

/// Train every arm on every seed's dataset (shared across arms) and
/// evaluate every task. Deltas are `arms[treatment] − arms[control]`.
fn run_paired(spec: &ExperimentSpec, protocol: &str, treatment: usize) -> Result<ExperimentReport> {
    let jobs: Vec<(u64, usize)> = spec
        .seeds
        .iter()
        .flat_map(|&s| (0..spec.arms.len()).map(move |a| (s, a)))
        .collect();
    let datasets: BTreeMap<u64, (SynthConfig, SynthDataset)> = spec
        .seeds
        .par_iter()
        .map(|&s| {
            let g = seeded_generator(&spec.generator, s);
            let d = generate(&g)?;
            Ok((s, (g, d)))
        })
        .collect::<Result<_>>()?;
    let runs = jobs
        .par_iter()
        .map(|&(s, a)| {
            let (g, d) = &datasets[&s];
            let arm = &spec.arms[a];
            run_one(spec, g, d, arm, &arm.label, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let arms = spec.arms.iter().map(|a| a.label.clone()).collect();
    let tasks = spec.eval_tasks.iter().map(EvalTask::name).collect();
    let control = 1 - treatment;
    Ok(assemble_report(
        spec,
        protocol,
        arms,
        tasks,
        runs,
        Some((
            spec.arms[treatment].label.clone(),
            spec.arms[control].label.clone(),
        )),
    ))
}

/// Masking on vs off; deltas are masked − unmasked.
pub fn run_mamcl_ablation(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.check_ablation("mamcl", |a, b| {
        (
            a.mask_enabled != b.mask_enabled,
            same_family(a.loss_kind, b.loss_kind)
                && a.hard_negatives_enabled == b.hard_negatives_enabled,
        )
    })?;
    let treatment = if spec.arms[0].mask_enabled { 0 } else { 1 };
    run_paired(spec, "mamcl_ablation", treatment)
}

/// Hard negatives on vs off; deltas are with − without.
pub fn run_hard_negative_ablation(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.check_ablation("hard-negative", |a, b| {
        (
            a.hard_negatives_enabled != b.hard_negatives_enabled,
            a.loss_kind == b.loss_kind && a.mask_enabled == b.mask_enabled,
        )
    })?;
    let treatment = if spec.arms[0].hard_negatives_enabled {
        0
    } else {
        1
    };
    run_paired(spec, "hard_negative_ablation", treatment)
}

/// One model per composition per seed, each evaluated on every task.
/// Without explicit eval tasks, every sweep pair is evaluated.
pub fn run_composition_sweep(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.check_common()?;
    let sweep = spec
        .sweep
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("composition sweep needs a `sweep` section".into()))?;
    if sweep.pairs.is_empty() || sweep.compositions.is_empty() {
        return Err(Error::InvalidSpec(
            "sweep needs pairs and compositions".into(),
        ));
    }
    if spec.arms.len() > 1 {
        return Err(Error::InvalidSpec(
            "composition sweep trains a single arm".into(),
        ));
    }
    for c in &sweep.compositions {
        if c.counts.len() != sweep.pairs.len() {
            return Err(Error::InvalidSpec(format!(
                "composition {} has {} counts for {} pairs",
                c.label,
                c.counts.len(),
                sweep.pairs.len()
            )));
        }
        let allocated: usize = c.counts.iter().sum();
        if allocated != sweep.budget {
            return Err(Error::BudgetMismatch {
                label: c.label.clone(),
                allocated,
                budget: sweep.budget,
            });
        }
    }

    let mut spec = spec.clone();
    if spec.eval_tasks.is_empty() {
        spec.eval_tasks = sweep
            .pairs
            .iter()
            .map(|p| EvalTask {
                query: p.query,
                target: p.target,
                ks: default_ks(),
                split: Split::Ind,
            })
            .collect();
    }
    let arm = spec.arms.first().cloned().unwrap_or(Arm {
        label: "model".into(),
        loss_kind: spec.train.loss_kind,
        mask_enabled: spec.train.loss_kind == LossKind::Mamcl,
        hard_negatives_enabled: spec.train.use_hard_negatives,
    });

    let generator_for = |c: &Composition, seed: u64| SynthConfig {
        pairs: sweep
            .pairs
            .iter()
            .zip(&c.counts)
            .filter(|(_, &n)| n > 0)
            .map(|(p, &n)| PairSpec {
                count: Some(n),
                ..p.clone()
            })
            .collect(),
        seed,
        ..spec.generator.clone()
    };

    let jobs: Vec<(usize, u64)> = (0..sweep.compositions.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(ci, seed)| {
            let comp = &sweep.compositions[ci];
            let g = generator_for(comp, seed);
            let data = generate(&g)?;
            let counts: BTreeMap<String, usize> = sweep
                .pairs
                .iter()
                .map(|p| (p.task_name(), data.task_examples(&p.task_name()).count()))
                .collect();
            let run = run_one(&spec, &g, &data, &arm, &comp.label, seed)?;
            Ok((run, counts))
        })
        .collect::<Result<Vec<_>>>()?;

    let labels: Vec<String> = sweep.compositions.iter().map(|c| c.label.clone()).collect();
    let tasks: Vec<String> = spec.eval_tasks.iter().map(EvalTask::name).collect();
    let mut counts_by_label: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut runs = Vec::with_capacity(results.len());
    for (run, counts) in results {
        counts_by_label.insert(run.arm.clone(), counts);
        runs.push(run);
    }
    let mut report = assemble_report(
        &spec,
        "composition_sweep",
        labels.clone(),
        tasks.clone(),
        runs,
        None,
    );
    report.sweep = labels
        .iter()
        .map(|l| SweepRow {
            label: l.clone(),
            sample_counts: counts_by_label[l].clone(),
            recall_at_1: report
                .aggregates
                .iter()
                .filter(|a| &a.arm == l)
                .map(|a| {
                    (
                        a.task.clone(),
                        a.recall_at.get(&1).map_or(f64::NAN, |m| m.mean),
                    )
                })
                .collect(),
        })
        .collect();
    Ok(report)
}
