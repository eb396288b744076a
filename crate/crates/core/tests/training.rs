mod common;

use common::{bits, small_config};
use mile_core::checkpoint;
use mile_core::data::datagen::generate_dataset;
use mile_core::data::synth::synthetic_corpus;
use mile_core::data::{Sample, SampleBuilder, TemplateSet};
use mile_core::tensor::cosine_lr_at;
use mile_core::train::{epoch_order, resume, train, Paradigm, RunOutput, Stage, TrainConfig, TrainData};
use mile_core::tuning::{apply_plan, verify_masking};
use mile_core::{Component, MileModel, Mode, ModelConfig, TuningPlan};
use proptest::prelude::*;
use std::path::Path;

struct Corpus {
    origin: Vec<Sample<f32>>,
    instruct: Vec<Sample<f32>>,
}

fn corpus(config: &ModelConfig, n: usize) -> Corpus {
    let records = synthetic_corpus(n, 3);
    let (inst, _) = generate_dataset(&records, 3, 3, &TemplateSet::builtin()).unwrap();
    let builder = SampleBuilder {
        image_size: config.image_size,
        max_text_len: 256,
        base_dir: Path::new("."),
    };
    Corpus {
        origin: builder.origin(&records).unwrap(),
        instruct: builder.instruct(&inst).unwrap(),
    }
}

fn config() -> ModelConfig {
    ModelConfig {
        max_text_len: 192,
        attention_budget: 200,
        ..small_config()
    }
}

fn model(plan: &str) -> MileModel<f32> {
    let mut m = MileModel::new(config()).unwrap();
    apply_plan(&mut m, &plan.parse().unwrap()).unwrap();
    m
}

fn train_cfg(paradigm: Paradigm) -> TrainConfig {
    TrainConfig {
        base_lr: 3e-3,
        epochs: 2,
        instruct_epochs: Some(2),
        batch_size: 3,
        seed: 7,
        paradigm,
        ..TrainConfig::default()
    }
}

fn param_bits(m: &MileModel<f32>) -> Vec<(String, Vec<u64>)> {
    m.params.snapshot().into_iter().map(|(n, v)| (n, bits(&v))).collect()
}

#[test]
fn runs_are_deterministic() {
    let data = corpus(&config(), 8);
    let d = TrainData { origin: Some(&data.origin), instruct: Some(&data.instruct) };
    let cfg = train_cfg(Paradigm::OriginThenInstruct);
    let (mut a, mut b) = (model("LoRA2,T,IA3"), model("LoRA2,T,IA3"));
    let la = train(&mut a, &cfg, &d, &RunOutput::default(), None).unwrap();
    let lb = train(&mut b, &cfg, &d, &RunOutput::default(), None).unwrap();
    assert_eq!(la.to_csv(), lb.to_csv());
    assert_eq!(param_bits(&a), param_bits(&b));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = corpus(&config(), 8);
    let d = TrainData { origin: Some(&data.origin), instruct: None };
    // 8 samples at batch 3: 3 steps per epoch, 6 in total.
    let cfg = TrainConfig { checkpoint_every: Some(4), ..train_cfg(Paradigm::Origin) };

    let mut full = model("F,LoRA2,T");
    let whole = train(&mut full, &cfg, &d, &RunOutput::default(), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = RunOutput::in_dir(dir.path().join("a"));
    let mut interrupted = model("F,LoRA2,T");
    train(&mut interrupted, &cfg, &d, &first, None).unwrap();
    let ckpt = first.last_checkpoint().unwrap();

    let (resumed, log) = resume::<f32>(&ckpt, &cfg, &d, &RunOutput::in_dir(dir.path().join("b"))).unwrap();
    assert_eq!(log.steps.first().map(|s| s.step), Some(4));
    assert_eq!(log.steps, whole.steps[4..]);
    assert_eq!(param_bits(&resumed), param_bits(&full));
}

#[test]
fn resume_across_stage_boundary() {
    let data = corpus(&config(), 8);
    let d = TrainData { origin: Some(&data.origin), instruct: Some(&data.instruct) };
    let cfg = train_cfg(Paradigm::OriginThenInstruct);
    let mut full = model("T,T,T");
    let whole = train(&mut full, &cfg, &d, &RunOutput::default(), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::in_dir(dir.path().join("a"));
    train(&mut model("T,T,T"), &cfg, &d, &out, None).unwrap();
    let stage_ckpt = out.stage_checkpoint(Stage::Origin).unwrap();
    let (resumed, log) = resume::<f32>(&stage_ckpt, &cfg, &d, &RunOutput::in_dir(dir.path().join("b"))).unwrap();
    assert!(log.steps.iter().all(|s| s.stage == Stage::Instruct));
    assert_eq!(log.steps, whole.stage_steps(Stage::Instruct).cloned().collect::<Vec<_>>());
    assert_eq!(param_bits(&resumed), param_bits(&full));
}

#[test]
fn zero_instruct_epochs_equals_origin_training() {
    let data = corpus(&config(), 8);
    let d = TrainData { origin: Some(&data.origin), instruct: Some(&data.instruct) };
    let mut a = model("F,T,LoRA2");
    let mut b = model("F,T,LoRA2");
    let two = TrainConfig { instruct_epochs: Some(0), ..train_cfg(Paradigm::OriginThenInstruct) };
    let la = train(&mut a, &two, &d, &RunOutput::default(), None).unwrap();
    let lb = train(&mut b, &train_cfg(Paradigm::Origin), &d, &RunOutput::default(), None).unwrap();
    assert_eq!(la.steps, lb.steps);
    assert_eq!(param_bits(&a), param_bits(&b));
}

#[test]
fn two_stage_run_writes_csv_and_checkpoints() {
    let data = corpus(&config(), 6);
    let d = TrainData { origin: Some(&data.origin), instruct: Some(&data.instruct) };
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::in_dir(dir.path());
    let mut m = model("F,IA3,IA3");
    let log = train(&mut m, &train_cfg(Paradigm::OriginThenInstruct), &d, &out, None).unwrap();
    let csv = std::fs::read_to_string(out.loss_csv().unwrap()).unwrap();
    assert_eq!(csv, log.to_csv());
    assert_eq!(csv.lines().count(), 1 + 4 + 4);
    assert!(out.stage_checkpoint(Stage::Origin).unwrap().exists());
    let (loaded, state) = checkpoint::load::<f32>(&out.final_checkpoint().unwrap()).unwrap();
    assert!(state.is_none());
    assert_eq!(param_bits(&loaded), param_bits(&m));
    assert_eq!(loaded.plan(), m.plan());
    // Each stage restarts its own cosine schedule.
    for stage in [Stage::Origin, Stage::Instruct] {
        let lrs: Vec<f64> = log.stage_steps(stage).map(|s| s.lr).collect();
        assert_eq!(lrs[0], 3e-3);
    }
}

fn all_plans() -> Vec<TuningPlan> {
    let vit = [Mode::Freeze, Mode::Full, Mode::LoRA(2), Mode::IA3];
    let text = [
        Mode::Freeze,
        Mode::Full,
        Mode::LoRA(2),
        Mode::IA3,
        Mode::Prefix(Some(2)),
        Mode::Ptv2(Some(2)),
    ];
    let mut plans = Vec::new();
    for v in vit {
        for j in text {
            for d in text {
                plans.push(TuningPlan::new(v, j, d));
            }
        }
    }
    plans
}

#[test]
fn freeze_contract_sampled_plans() {
    // The acceptance run covers every combination; this keeps a fast subset.
    let config = config();
    let data: Vec<Sample<f32>> = corpus(&config, 4).origin;
    for plan in all_plans().into_iter().step_by(7) {
        let mut m = MileModel::<f32>::new(config.clone()).unwrap();
        apply_plan(&mut m, &plan).unwrap();
        let trainable = m.params.iter().filter(|(_, _, t)| t.trainable).count();
        let check = verify_masking(&mut m, 3, &data, 1e-2).unwrap();
        assert!(check.ok(), "{plan}: {check:?}");
        if trainable == 0 {
            assert_eq!(plan, "F,F,F".parse().unwrap());
        }
    }
}

#[test]
fn frozen_components_keep_their_flags() {
    let m = model("F,LoRA2,T");
    for (_, name, t) in m.params.iter() {
        let expected = match Component::of_param(name).unwrap() {
            Component::Vit => false,
            Component::Jtm => name.starts_with("peft/"),
            Component::Dec => true,
        };
        // Decoder embeddings are shared with the joint encoder.
        if name.starts_with("jtm/") && !name.contains("/layers/") && name != "jtm/norm" {
            continue;
        }
        assert_eq!(t.trainable, expected, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_trace_endpoints(total in 1usize..500, base in 1e-6f64..1.0, frac in 0.0f64..1.0) {
        let min = base * frac;
        prop_assert!((cosine_lr_at(0, total, base, min).unwrap() - base).abs() <= 1e-15);
        prop_assert!((cosine_lr_at(total, total, base, min).unwrap() - min).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr_at(s, total, base, min).unwrap();
            let want = min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * s as f64 / total as f64).cos());
            prop_assert!((lr - want).abs() <= 1e-12 * base);
            prop_assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn epoch_orders_are_permutations(seed in any::<u64>(), epoch in 0usize..1000, n in 1usize..200) {
        let mut order = epoch_order(seed, epoch, n);
        prop_assert_eq!(order.clone(), epoch_order(seed, epoch, n));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }
}
