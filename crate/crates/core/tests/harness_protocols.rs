use mamcl_core::harness::{Arm, Composition, EvalTask, SweepSpec};
use mamcl_core::synthgen::{PairSpec, Split};
use mamcl_core::{
    run_composition_sweep, run_hard_negative_ablation, run_mamcl_ablation, Error, ExperimentReport,
    ExperimentSpec, LossKind, ModalitySignature, SynthConfig, TrainConfig,
};

const T: ModalitySignature = ModalitySignature::TEXT;
const I: ModalitySignature = ModalitySignature::IMAGE;
const V: ModalitySignature = ModalitySignature::VIDEO;

fn arm(label: &str, kind: LossKind, mask: bool, hn: bool) -> Arm {
    Arm {
        label: label.into(),
        loss_kind: kind,
        mask_enabled: mask,
        hard_negatives_enabled: hn,
    }
}

fn task(target: ModalitySignature) -> EvalTask {
    EvalTask {
        query: T,
        target,
        ks: vec![1, 5],
        split: Split::Ind,
    }
}

fn spec(arms: Vec<Arm>) -> ExperimentSpec {
    ExperimentSpec {
        name: "protocol-test".into(),
        generator: SynthConfig {
            n_concepts: 16,
            latent_dim: 6,
            samples_per_concept: 1,
            hard_negative_count: 2,
            ..SynthConfig::default()
        },
        train: TrainConfig {
            learning_rate: 0.02,
            epochs: 4,
            batch_size: 8,
            momentum: 0.9,
            ..TrainConfig::default()
        },
        arms,
        eval_tasks: vec![task(I), task(V)],
        seeds: vec![1, 2, 3],
        embedding_dim: None,
        queries_per_concept: 1,
        force_all_ones_mask: false,
        sweep: None,
    }
}

fn mask_arms() -> Vec<Arm> {
    vec![
        arm("mamcl", LossKind::Mamcl, true, false),
        arm("infonce", LossKind::Infonce, false, false),
    ]
}

fn hn_arms() -> Vec<Arm> {
    vec![
        arm("with", LossKind::Mamcl, true, true),
        arm("without", LossKind::Mamcl, true, false),
    ]
}

/// Every (seed, task) cell of the two arms holds the same report and loss.
fn assert_arms_identical(r: &ExperimentReport) {
    let (a, b) = (&r.arms[0], &r.arms[1]);
    for &seed in &r.seeds {
        for t in &r.tasks {
            let (x, y) = (r.cell(a, seed, t).unwrap(), r.cell(b, seed, t).unwrap());
            assert_eq!(x.report, y.report, "seed {seed} task {t}");
            assert_eq!(x.final_loss.to_bits(), y.final_loss.to_bits());
        }
    }
    assert!(r
        .deltas
        .iter()
        .all(|d| d.per_seed.iter().all(|&x| x == 0.0)));
}

#[test]
fn all_ones_mask_makes_the_arms_identical() {
    let s = ExperimentSpec {
        force_all_ones_mask: true,
        ..spec(mask_arms())
    };
    assert_arms_identical(&run_mamcl_ablation(&s).unwrap());
}

#[test]
fn no_generated_hard_negatives_makes_the_arms_identical() {
    let mut s = spec(hn_arms());
    s.generator.hard_negative_count = 0;
    assert_arms_identical(&run_hard_negative_ablation(&s).unwrap());
}

#[test]
fn zero_learning_rate_makes_the_arms_identical() {
    let mut s = spec(hn_arms());
    s.train.learning_rate = 0.0;
    let r = run_hard_negative_ablation(&s).unwrap();
    for &seed in &r.seeds {
        for t in &r.tasks {
            assert_eq!(
                r.cell("with", seed, t).unwrap().report,
                r.cell("without", seed, t).unwrap().report
            );
        }
    }
    assert!(r
        .deltas
        .iter()
        .all(|d| d.per_seed.iter().all(|&x| x == 0.0)));
}

#[test]
fn single_target_signature_stays_within_noise() {
    // One target signature: the modality mask keeps every candidate, so the
    // arms coincide and every paired delta is exactly zero.
    let mut s = spec(mask_arms());
    s.generator.signatures = vec![T, I];
    s.eval_tasks = vec![task(I)];
    s.seeds = vec![1, 2, 3, 4, 5];
    let r = run_mamcl_ablation(&s).unwrap();
    let d = r.delta("text->image").unwrap();
    assert!(d.mean.abs() <= 2.0 * d.std, "{} ± {}", d.mean, d.std);
    assert!(d.per_seed.iter().all(|&x| x == 0.0));
}

#[test]
fn ablation_reports_are_complete_and_deterministic() {
    let s = spec(mask_arms());
    let a = run_mamcl_ablation(&s).unwrap();
    assert_eq!(a.cells.len(), 2 * 3 * 2);
    for arm in ["mamcl", "infonce"] {
        for seed in [1, 2, 3] {
            for t in ["text->image", "text->video"] {
                assert!(a.cell(arm, seed, t).is_some());
            }
        }
    }
    assert_eq!(a.delta("average").unwrap().per_seed.len(), 3);
    let b = run_mamcl_ablation(&s).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.config_hash, s.config_hash());
}

#[test]
fn ood_tasks_evaluate_held_out_concepts() {
    let mut s = spec(mask_arms());
    s.generator.holdout_concepts = 4;
    s.eval_tasks.push(EvalTask {
        split: Split::Ood,
        ..task(I)
    });
    s.seeds = vec![1];
    let r = run_mamcl_ablation(&s).unwrap();
    let ood = r.cell("mamcl", 1, "text->image@ood").unwrap();
    assert_eq!(ood.report.pool_size, 4);
}

fn sweep_spec(budget: usize, compositions: Vec<(&str, Vec<usize>)>) -> ExperimentSpec {
    let pair = |target| PairSpec {
        query: T,
        target,
        count: None,
    };
    let mut s = spec(vec![]);
    s.eval_tasks.clear();
    s.generator.n_concepts = 30;
    s.sweep = Some(SweepSpec {
        budget,
        pairs: vec![pair(T), pair(I), pair(V)],
        compositions: compositions
            .into_iter()
            .map(|(l, counts)| Composition {
                label: l.into(),
                counts,
            })
            .collect(),
    });
    s
}

#[test]
fn sweep_budget_accounting_is_exact() {
    let s = sweep_spec(
        600,
        vec![("even", vec![200, 200, 200]), ("tv", vec![0, 0, 600])],
    );
    let r = run_composition_sweep(&s).unwrap();
    let even = r.sweep.iter().find(|row| row.label == "even").unwrap();
    assert_eq!(
        even.sample_counts.values().copied().collect::<Vec<_>>(),
        [200, 200, 200]
    );
    let tv = r.sweep.iter().find(|row| row.label == "tv").unwrap();
    assert_eq!(tv.sample_counts["text->video"], 600);
    assert_eq!(tv.sample_counts.values().sum::<usize>(), 600);
    assert_eq!(r.tasks, ["text->text", "text->image", "text->video"]);
    assert_eq!(r.cells.len(), 2 * 3 * 3);
    assert!(r
        .sweep_csv()
        .unwrap()
        .starts_with("composition,text->text,text->image,text->video\n"));
}

#[test]
fn sweep_rejects_unbalanced_budgets() {
    let s = sweep_spec(600, vec![("short", vec![100, 200, 200])]);
    assert!(matches!(
        run_composition_sweep(&s),
        Err(Error::BudgetMismatch { allocated: 500, .. })
    ));
}

#[test]
fn shipped_configs_parse_as_specs() {
    for text in [
        include_str!("../../../configs/mamcl_ablation.json"),
        include_str!("../../../configs/hard_negative_ablation.json"),
        include_str!("../../../configs/composition_sweep.json"),
    ] {
        let s: ExperimentSpec = serde_json::from_str(text).unwrap();
        assert!(s.seeds.len() >= 5);
        assert_eq!(s.generator.modal_gap, 1.0);
        assert_eq!(s.generator.noise, 0.1);
    }
}
