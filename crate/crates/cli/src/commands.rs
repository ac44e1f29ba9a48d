use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mamcl_core::encoder::{self, EncoderParams, TrainConfig, TrainingExample};
use mamcl_core::eval::{evaluate, RetrievalReport, TaggedEmbedding};
use mamcl_core::harness::{
    run_composition_sweep, run_hard_negative_ablation, run_mamcl_ablation, EvalTask,
    ExperimentReport, ExperimentSpec,
};
use mamcl_core::io_store::{self, Dtype, EmbeddingStore, Role, SidecarRecord};
use mamcl_core::loss::{gradient_check, GradCheckReport, LossConfig, LossKind};
use mamcl_core::synthgen::{generate, LabeledItem, SynthConfig, SynthDataset};
use mamcl_core::{assemble_batch, random_samples, BatchOptions};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, Manifest, Resolved, TOOL};
use crate::{CliError, Common};

const MAMCL_ABLATION: &str = include_str!("../../../configs/mamcl_ablation.json");
const COMPOSITION_SWEEP: &str = include_str!("../../../configs/composition_sweep.json");

fn builtin<T: DeserializeOwned>(text: &str) -> T {
    serde_json::from_str(text).expect("bundled config parses")
}

fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

fn one() -> usize {
    1
}

fn default_eval_tasks(g: &SynthConfig) -> Vec<EvalTask> {
    g.resolved_pairs()
        .into_iter()
        .map(|p| EvalTask {
            query: p.query,
            target: p.target,
            ks: default_ks(),
            split: Default::default(),
        })
        .collect()
}

fn load<T: Serialize + DeserializeOwned>(
    c: &Common,
    name: &str,
    defaults: &T,
    seed_keys: &[&str],
) -> Result<Resolved<T>, CliError> {
    resolve(
        defaults,
        name,
        c.config.as_ref(),
        &c.overrides,
        c.seed,
        seed_keys,
    )
}

fn write_manifest<T>(c: &Common, name: &str, r: &Resolved<T>) -> Result<(), CliError> {
    let m = Manifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.into(),
        seed: r.seed,
        config: r.value.clone(),
    };
    io_store::write_json(&c.out.join("manifest.json"), &m)?;
    Ok(())
}

fn done(name: &str, out: &Path, started: Instant) {
    eprintln!(
        "mamcl {name}: wrote {} in {:.2}s",
        out.display(),
        started.elapsed().as_secs_f64()
    );
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub generator: SynthConfig,
    /// Empty means one task per training pair.
    pub eval_tasks: Vec<EvalTask>,
    pub queries_per_concept: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: SynthConfig::default(),
            eval_tasks: Vec::new(),
            queries_per_concept: 1,
        }
    }
}

fn labeled_bundle(
    queries: &[LabeledItem],
    pool: &[LabeledItem],
    truth: &BTreeMap<String, String>,
    dim: usize,
) -> Result<(EmbeddingStore, Vec<SidecarRecord>), CliError> {
    let mut store = EmbeddingStore::new(dim, Dtype::F32);
    let mut records = Vec::new();
    for (items, role) in [(queries, Role::Query), (pool, Role::Candidate)] {
        for l in items {
            records.push(SidecarRecord {
                id: l.id.clone(),
                row: store.push(&l.item.features)? as u64,
                signature: l.item.signature,
                role,
                positive_id: truth.get(&l.id).cloned(),
                hard_negative_ids: Vec::new(),
            });
        }
    }
    Ok((store, records))
}

fn file_stem(task: &str) -> String {
    task.replace("->", "_to_").replace(['+', '@'], "_")
}

pub fn gen_data(c: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let r = load(c, "gen-data", &DataConfig::default(), &["generator.seed"])?;
    let cfg = &r.typed;
    let data = generate(&cfg.generator)?;
    let (store, records) = io_store::examples_to_bundle(&data.examples, Dtype::F32)?;
    io_store::write_bundle(&c.out.join("train"), &store, &records)?;
    let tasks = if cfg.eval_tasks.is_empty() {
        default_eval_tasks(&cfg.generator)
    } else {
        cfg.eval_tasks.clone()
    };
    for t in &tasks {
        let set = data.retrieval_set(t.query, t.target, t.split, cfg.queries_per_concept)?;
        let (store, records) = labeled_bundle(
            &set.queries,
            &set.pool,
            &set.ground_truth,
            cfg.generator.latent_dim,
        )?;
        io_store::write_bundle(
            &c.out.join("eval").join(file_stem(&t.name())),
            &store,
            &records,
        )?;
    }
    io_store::write_json(&c.out.join("meta.json"), &data.meta)?;
    write_manifest(c, "gen-data", &r)?;
    done("gen-data", &c.out, started);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub generator: SynthConfig,
    pub train: TrainConfig,
    /// Defaults to the feature dimension.
    pub embedding_dim: Option<usize>,
    /// Train on `<dataset>.uemb` + `<dataset>.jsonl` instead of generating.
    pub dataset: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let spec: ExperimentSpec = builtin::<AblateConfig>(MAMCL_ABLATION).spec;
        Self {
            generator: spec.generator,
            train: spec.train,
            embedding_dim: None,
            dataset: None,
        }
    }
}

pub fn train(c: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let r = load(
        c,
        "train",
        &TrainRunConfig::default(),
        &["generator.seed", "train.seed"],
    )?;
    let cfg = &r.typed;
    let (examples, f): (Vec<TrainingExample>, usize) = match &cfg.dataset {
        Some(base) => {
            let (store, records) = io_store::read_bundle(base)?;
            (io_store::bundle_to_examples(&store, &records)?, store.dim)
        }
        None => (generate(&cfg.generator)?.examples, cfg.generator.latent_dim),
    };
    let mut sigs: Vec<_> = cfg.generator.signatures.clone();
    for e in &examples {
        sigs.push(e.query.signature);
        sigs.push(e.positive.signature);
    }
    let init = EncoderParams::init(f, cfg.embedding_dim.unwrap_or(f), &sigs, cfg.train.seed)?;
    let (params, log) = encoder::train(&init, &examples, &cfg.train)?;
    io_store::write_params(&c.out.join("params"), &params, cfg.train.seed)?;
    io_store::write_json(&c.out.join("train_log.json"), &log)?;
    write_manifest(c, "train", &r)?;
    done("train", &c.out, started);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRunConfig {
    /// Parameter files base path (`<params>.json` + `<params>.uemb`).
    pub params: Option<PathBuf>,
    pub generator: SynthConfig,
    pub eval_tasks: Vec<EvalTask>,
    pub queries_per_concept: usize,
    /// Evaluate an existing embedding bundle instead: query rows against
    /// candidate rows, ground truth from `positive_id`.
    pub embeddings: Option<PathBuf>,
    pub ks: Vec<usize>,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        let t = TrainRunConfig::default();
        Self {
            params: None,
            generator: t.generator,
            eval_tasks: Vec::new(),
            queries_per_concept: one(),
            embeddings: None,
            ks: default_ks(),
        }
    }
}

fn tag(params: &EncoderParams, items: &[LabeledItem]) -> Result<Vec<TaggedEmbedding>, CliError> {
    items
        .iter()
        .map(|l| {
            Ok(TaggedEmbedding {
                id: l.id.clone(),
                signature: l.item.signature,
                embedding: params.encode(&l.item.features, l.item.signature)?,
            })
        })
        .collect()
}

fn eval_bundle(base: &Path, ks: &[usize]) -> Result<RetrievalReport, CliError> {
    let (store, records) = io_store::read_bundle(base)?;
    let mut queries = Vec::new();
    let mut pool = Vec::new();
    let mut truth = BTreeMap::new();
    for r in &records {
        let t = TaggedEmbedding {
            id: r.id.clone(),
            signature: r.signature,
            embedding: store.embedding(r.row as usize)?,
        };
        match r.role {
            Role::Query => {
                if let Some(p) = &r.positive_id {
                    truth.insert(r.id.clone(), p.clone());
                }
                queries.push(t);
            }
            Role::Candidate => pool.push(t),
        }
    }
    Ok(evaluate(&queries, &pool, &truth, ks)?)
}

fn eval_csv(reports: &BTreeMap<String, RetrievalReport>) -> Result<String, CliError> {
    let mut out = String::new();
    for (i, (task, rep)) in reports.iter().enumerate() {
        for (j, line) in rep.to_csv()?.lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    out.push_str(&format!("task,{line}\n"));
                }
            } else {
                out.push_str(&format!("{task},{line}\n"));
            }
        }
    }
    Ok(out)
}

pub fn eval(c: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let r = load(c, "eval", &EvalRunConfig::default(), &["generator.seed"])?;
    let cfg = &r.typed;
    let mut reports = BTreeMap::new();
    if let Some(base) = &cfg.embeddings {
        reports.insert("embeddings".to_string(), eval_bundle(base, &cfg.ks)?);
    } else {
        let base = cfg.params.as_ref().ok_or_else(|| {
            CliError::config("eval needs `params` (trained parameters) or `embeddings`")
        })?;
        let (params, _) = io_store::read_params(base)?;
        let data: SynthDataset = generate(&cfg.generator)?;
        let tasks = if cfg.eval_tasks.is_empty() {
            default_eval_tasks(&cfg.generator)
        } else {
            cfg.eval_tasks.clone()
        };
        for t in &tasks {
            let set = data.retrieval_set(t.query, t.target, t.split, cfg.queries_per_concept)?;
            let rep = evaluate(
                &tag(&params, &set.queries)?,
                &tag(&params, &set.pool)?,
                &set.ground_truth,
                &t.ks,
            )?;
            reports.insert(t.name(), rep);
        }
    }
    io_store::write_json(&c.out.join("eval.json"), &reports)?;
    io_store::write_text(&c.out.join("eval.csv"), &eval_csv(&reports)?)?;
    write_manifest(c, "eval", &r)?;
    done("eval", &c.out, started);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub kinds: Vec<LossKind>,
    pub batches: usize,
    pub n: usize,
    pub hard_negatives: usize,
    pub dim: usize,
    pub temperature: f64,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Also check the encoder parameter gradients end to end.
    pub encoder: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            kinds: vec![LossKind::Infonce, LossKind::Mamcl, LossKind::Bidirectional],
            batches: 10,
            n: 4,
            hard_negatives: 3,
            dim: 5,
            temperature: 0.03,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            encoder: true,
        }
    }
}

#[derive(Serialize)]
struct GradcheckOutput {
    tolerance: f64,
    max_relative_error: f64,
    passed: bool,
    checks: Vec<GradCheckEntry>,
}

#[derive(Serialize)]
struct GradCheckEntry {
    target: String,
    batch: usize,
    passed: bool,
    report: GradCheckReport,
}

pub fn gradcheck(c: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let r = load(c, "gradcheck", &GradcheckConfig::default(), &["seed"])?;
    let cfg = &r.typed;
    let loss = LossConfig::with_temperature(cfg.temperature);
    let mut checks = Vec::new();
    for b in 0..cfg.batches {
        let seed = cfg.seed.wrapping_add(b as u64);
        for &kind in &cfg.kinds {
            let hard = if kind == LossKind::Bidirectional {
                0
            } else {
                cfg.hard_negatives
            };
            let samples = random_samples(cfg.n, hard, cfg.dim, seed)?;
            let batch = assemble_batch(
                &samples,
                &BatchOptions {
                    seed,
                    ..Default::default()
                },
            )?;
            let report = gradient_check(kind, &batch, None, &loss, cfg.step)?;
            checks.push(GradCheckEntry {
                target: format!("loss:{kind}"),
                batch: b,
                passed: report.passes(cfg.tolerance),
                report,
            });
        }
    }
    if cfg.encoder {
        let data = generate(&SynthConfig {
            n_concepts: 8,
            latent_dim: 4,
            hard_negative_count: 1,
            seed: cfg.seed,
            ..Default::default()
        })?;
        let params = EncoderParams::init(4, 3, &data.config.signatures, cfg.seed)?;
        let subset: Vec<TrainingExample> = data
            .examples
            .iter()
            .step_by(2)
            .take(cfg.n.max(2))
            .cloned()
            .collect();
        for &kind in &cfg.kinds {
            let tc = TrainConfig {
                loss_kind: kind,
                loss,
                ..Default::default()
            };
            let report = encoder::gradient_check(&params, &subset, &tc, cfg.seed, cfg.step)?;
            checks.push(GradCheckEntry {
                target: format!("encoder:{kind}"),
                batch: 0,
                passed: report.passes(cfg.tolerance),
                report,
            });
        }
    }
    let max_relative_error = checks
        .iter()
        .map(|e| e.report.max_relative_error)
        .fold(0.0, f64::max);
    let passed = checks.iter().all(|e| e.passed);
    let out = GradcheckOutput {
        tolerance: cfg.tolerance,
        max_relative_error,
        passed,
        checks,
    };
    io_store::write_json(&c.out.join("gradcheck.json"), &out)?;
    write_manifest(c, "gradcheck", &r)?;
    done("gradcheck", &c.out, started);
    if !passed {
        return Err(CliError::Numeric(format!(
            "max relative error {max_relative_error:e} exceeds {:e}",
            cfg.tolerance
        )));
    }
    eprintln!("mamcl gradcheck: max relative error {max_relative_error:e}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Mamcl,
    HardNegative,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateConfig {
    pub protocol: Protocol,
    #[serde(flatten)]
    pub spec: ExperimentSpec,
}

fn write_experiment(out: &Path, report: &ExperimentReport) -> Result<(), CliError> {
    io_store::write_json(&out.join("report.json"), report)?;
    io_store::write_text(&out.join("aggregates.csv"), &report.aggregates_csv()?)?;
    if !report.deltas.is_empty() {
        io_store::write_text(&out.join("deltas.csv"), &report.deltas_csv()?)?;
    }
    if !report.sweep.is_empty() {
        io_store::write_text(&out.join("sweep.csv"), &report.sweep_csv()?)?;
    }
    Ok(())
}

fn seeds_override(c: &Common) -> Vec<String> {
    // `--seed` pins a single-seed experiment.
    let mut o = c.overrides.clone();
    if let Some(s) = c.seed {
        o.push(format!("seeds=[{s}]"));
    }
    o
}

pub fn ablate(c: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let defaults: AblateConfig = builtin(MAMCL_ABLATION);
    let r = resolve(
        &defaults,
        "ablate",
        c.config.as_ref(),
        &seeds_override(c),
        c.seed,
        &[],
    )?;
    let cfg = &r.typed;
    let report = match cfg.protocol {
        Protocol::Mamcl => run_mamcl_ablation(&cfg.spec)?,
        Protocol::HardNegative => run_hard_negative_ablation(&cfg.spec)?,
    };
    write_experiment(&c.out, &report)?;
    write_manifest(c, "ablate", &r)?;
    for d in &report.deltas {
        eprintln!("  delta {:<24} {:+.4} ± {:.4}", d.task, d.mean, d.std);
    }
    done("ablate", &c.out, started);
    Ok(())
}

pub fn sweep(c: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let defaults: ExperimentSpec = builtin(COMPOSITION_SWEEP);
    let r = resolve(
        &defaults,
        "sweep",
        c.config.as_ref(),
        &seeds_override(c),
        c.seed,
        &[],
    )?;
    let report = run_composition_sweep(&r.typed)?;
    write_experiment(&c.out, &report)?;
    write_manifest(c, "sweep", &r)?;
    done("sweep", &c.out, started);
    Ok(())
}
