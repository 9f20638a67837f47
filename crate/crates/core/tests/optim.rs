//! Finetuning procedures and pretraining.

use std::collections::BTreeMap;

use icl_lab::harness::gradcheck::{lcgd_inputs, lcgd_reference_loss};
use icl_lab::model::{init_params, logits, names, InitScheme, ModelConfig, Parameters};
use icl_lab::numerics::{central_difference, cross_entropy_logits, relative_error, Prng, Tensor, FD_STEP};
use icl_lab::optim::{
    finetune_gd, finetune_lcgd, gd_gradients, lcgd_gradients, lcgd_loss, pretrain, FinetuneConfig, LcgdHeadInput,
    LcgdLeaves, LossTokenPolicy, PretrainConfig, TrainableSet,
};
use icl_lab::tasks::{format_demo, format_icl_prompt, sample_episode, Demo, TaskConfig};

fn model(n_layers: usize, seed: u64) -> Parameters {
    let task = TaskConfig::default();
    let cfg = ModelConfig {
        n_layers,
        n_heads: 2,
        d_model: 16,
        vocab_size: task.vocab_size(),
        max_seq_len: 40,
        mlp_ratio: 2,
        layer_norm_eps: 1e-5,
    };
    let mut p = init_params(&cfg, seed, &InitScheme::Random).unwrap();
    let mut prng = Prng::new(seed + 1000);
    let all: Vec<String> = p.names().map(String::from).collect();
    for n in all {
        let noise = prng.gaussian(p.get(&n).shape(), 0.3);
        p.get_mut(&n).axpy(1.0, &noise);
    }
    p
}

fn demos(seed: u64) -> Vec<Demo> {
    sample_episode(&TaskConfig::default(), &mut Prng::new(seed))
        .unwrap()
        .demonstrations
}

fn prompt(seed: u64) -> Vec<usize> {
    let task = TaskConfig::default();
    let e = sample_episode(&task, &mut Prng::new(seed)).unwrap();
    let mut t = format_icl_prompt(&task, &e, 40).unwrap();
    t.push(e.gold);
    t
}

fn cfg(lr: f64) -> FinetuneConfig {
    FinetuneConfig {
        learning_rate: lr,
        ..Default::default()
    }
}

fn layer_tensors(p: &Parameters, layer: usize) -> Vec<String> {
    p.names()
        .filter(|n| names::layer_of(n) == Some(layer))
        .map(String::from)
        .collect()
}

fn perturb(p: &mut Parameters, tensors: &[String], seed: u64) {
    let mut prng = Prng::new(seed);
    for n in tensors {
        let noise = prng.gaussian(p.get(n).shape(), 0.5);
        p.get_mut(n).axpy(1.0, &noise);
    }
}

#[test]
fn zero_learning_rate_is_a_null_step() {
    let p = model(2, 1);
    let task = TaskConfig::default();
    let (gd, _) = finetune_gd(&p, &task, &demos(1), &cfg(0.0)).unwrap();
    let (lc, _) = finetune_lcgd(&p, &task, &demos(1), &cfg(0.0)).unwrap();
    assert!(gd.bitwise_eq(&p));
    assert!(lc.bitwise_eq(&p));
}

#[test]
fn gd_step_matches_finite_differences() {
    let p = model(2, 2);
    let task = TaskConfig::default();
    let demo = demos(2)[0].clone();
    let lr = 0.05;
    let (out, _) = finetune_gd(&p, &task, std::slice::from_ref(&demo), &cfg(lr)).unwrap();
    let tokens = format_demo(&task, &demo);
    let n = tokens.len();
    for l in 0..2 {
        let name = names::w_k(l);
        let numeric = central_difference(
            |w| {
                let mut q = p.clone();
                *q.get_mut(&name) = w.clone();
                cross_entropy_logits(logits(&q, &tokens).unwrap().row(n - 2), tokens[n - 1]).unwrap()
            },
            p.get(&name),
            FD_STEP,
        );
        let mut delta = out.get(&name).clone();
        delta.axpy(-1.0, p.get(&name));
        let mut expect = numeric.clone();
        expect.data_mut().iter_mut().for_each(|v| *v *= -lr);
        let err = relative_error(&delta, &expect);
        assert!(err <= 1e-4, "layer {l}: rel err {err}");
    }
}

#[test]
fn only_trainable_tensors_move() {
    let p = model(2, 3);
    let task = TaskConfig::default();
    let kv = [names::w_k(0), names::w_v(0), names::w_k(1), names::w_v(1)];
    for (method, out) in [
        ("GD", finetune_gd(&p, &task, &demos(3), &cfg(0.1)).unwrap().0),
        ("LCGD", finetune_lcgd(&p, &task, &demos(3), &cfg(0.1)).unwrap().0),
    ] {
        for (name, t) in out.tensors() {
            let same = t.bitwise_eq(p.get(name));
            assert_eq!(same, !kv.contains(name), "{method} {name}");
        }
    }
    let only_q = FinetuneConfig {
        trainable: TrainableSet::Names(vec![names::w_q(1)]),
        ..cfg(0.1)
    };
    let (out, _) = finetune_gd(&p, &task, &demos(3), &only_q).unwrap();
    for (name, t) in out.tensors() {
        assert_eq!(t.bitwise_eq(p.get(name)), name != &names::w_q(1), "{name}");
    }
    let bogus = FinetuneConfig {
        trainable: TrainableSet::Names(vec!["nope".into()]),
        ..cfg(0.1)
    };
    assert!(finetune_gd(&p, &task, &demos(3), &bogus).is_err());
}

#[test]
fn finetuning_leaves_input_untouched() {
    let p = model(2, 4);
    let before = p.clone();
    let task = TaskConfig::default();
    finetune_gd(&p, &task, &demos(4), &cfg(0.5)).unwrap();
    finetune_lcgd(&p, &task, &demos(4), &cfg(0.5)).unwrap();
    assert!(p.bitwise_eq(&before));
}

#[test]
fn lcgd_reaches_only_key_and_value() {
    let p = model(3, 5);
    let tokens = prompt(5);
    let (_, grads) = lcgd_gradients(&p, &tokens, tokens.len() - 2, LcgdHeadInput::Residual, LcgdLeaves::All).unwrap();
    for (name, g) in &grads {
        let kv = name.ends_with("attn.w_k") || name.ends_with("attn.w_v");
        if kv {
            assert!(g.norm() > 0.0, "{name}");
        } else {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} has gradient");
        }
    }
}

#[test]
fn single_layer_loss_is_one_term() {
    let p = model(1, 6);
    let tokens = prompt(6);
    let i = tokens.len() - 2;
    let loss = lcgd_loss(&p, &tokens, i).unwrap();
    let reference = lcgd_reference_loss(&p, &lcgd_inputs(&p, &tokens, i).unwrap(), LcgdHeadInput::Residual).unwrap();
    assert!((loss - reference).abs() <= 1e-12);
    let (_, grads) = lcgd_gradients(&p, &tokens, i, LcgdHeadInput::Residual, LcgdLeaves::All).unwrap();
    let moved: Vec<&String> = grads.iter().filter(|(_, g)| g.norm() > 0.0).map(|(n, _)| n).collect();
    assert_eq!(moved, vec![&names::w_k(0), &names::w_v(0)]);
    assert!(lcgd_loss(&p, &tokens, tokens.len() - 1).is_err());
}

#[test]
fn top_layer_value_gradient_matches_finite_differences_of_loss() {
    let p = model(3, 7);
    let tokens = prompt(7);
    let i = tokens.len() - 2;
    let name = names::w_v(2);
    let (_, grads) = lcgd_gradients(&p, &tokens, i, LcgdHeadInput::Residual, LcgdLeaves::KeyValue).unwrap();
    let numeric = central_difference(
        |w| {
            let mut q = p.clone();
            *q.get_mut(&name) = w.clone();
            lcgd_loss(&q, &tokens, i).unwrap()
        },
        p.get(&name),
        FD_STEP,
    );
    let err = relative_error(&grads[&name], &numeric);
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn lcgd_step_matches_finite_differences_per_layer() {
    let p = model(3, 8);
    let task = TaskConfig::default();
    let demo = demos(8)[0].clone();
    let lr = 0.05;
    let one_token = FinetuneConfig {
        loss_tokens: Some(LossTokenPolicy::LabelOnly),
        ..cfg(lr)
    };
    let (out, trace) = finetune_lcgd(&p, &task, std::slice::from_ref(&demo), &one_token).unwrap();
    assert_eq!(trace.n_steps(), 1);
    let tokens = format_demo(&task, &demo);
    let inputs = lcgd_inputs(&p, &tokens, tokens.len() - 2).unwrap();
    for l in 0..3 {
        let name = names::w_k(l);
        let numeric = central_difference(
            |w| {
                let mut q = p.clone();
                *q.get_mut(&name) = w.clone();
                lcgd_reference_loss(&q, &inputs, LcgdHeadInput::Residual).unwrap()
            },
            p.get(&name),
            FD_STEP,
        );
        let mut delta = out.get(&name).clone();
        delta.axpy(-1.0, p.get(&name));
        let mut expect = numeric;
        expect.data_mut().iter_mut().for_each(|v| *v *= -lr);
        let err = relative_error(&delta, &expect);
        assert!(err <= 1e-4, "layer {l}: rel err {err}");
    }
}

#[test]
fn lcgd_updates_take_effect_at_next_token() {
    let p = model(2, 9);
    let task = TaskConfig::default();
    let demo = demos(9)[0].clone();
    let lr = 0.1;
    let (out, trace) = finetune_lcgd(&p, &task, std::slice::from_ref(&demo), &cfg(lr)).unwrap();
    let tokens = format_demo(&task, &demo);
    let mut manual = p.clone();
    for i in 0..tokens.len() - 1 {
        let (_, g) = lcgd_gradients(&manual, &tokens, i, LcgdHeadInput::Residual, LcgdLeaves::KeyValue).unwrap();
        for (name, t) in &g {
            manual.get_mut(name).axpy(-lr, t);
        }
    }
    assert!(out.bitwise_eq(&manual));
    assert_eq!(trace.n_steps(), tokens.len() - 1);
}

fn kv_grads(g: &BTreeMap<String, Tensor>, l: usize) -> [Tensor; 2] {
    [g[&names::w_k(l)].clone(), g[&names::w_v(l)].clone()]
}

#[test]
fn lcgd_gradients_are_layer_causal() {
    let p = model(4, 10);
    let tokens = prompt(10);
    let i = tokens.len() - 2;
    let (_, base) = lcgd_gradients(&p, &tokens, i, LcgdHeadInput::Residual, LcgdLeaves::KeyValue).unwrap();
    for l in 0..4 {
        let mut q = p.clone();
        let above: Vec<String> = (l + 1..4).flat_map(|m| layer_tensors(&p, m)).collect();
        perturb(&mut q, &above, 77 + l as u64);
        let (_, g) = lcgd_gradients(&q, &tokens, i, LcgdHeadInput::Residual, LcgdLeaves::KeyValue).unwrap();
        for (a, b) in kv_grads(&base, l).iter().zip(kv_grads(&g, l).iter()) {
            assert!(a.max_abs_diff(b) <= 1e-12, "layer {l}");
        }
    }
}

#[test]
fn gd_gradients_are_not_layer_causal() {
    let p = model(4, 11);
    let tokens = prompt(11);
    let n = tokens.len();
    let targets = [(n - 2, tokens[n - 1])];
    let kv: Vec<String> = (0..4).flat_map(|l| [names::w_k(l), names::w_v(l)]).collect();
    let (_, base) = gd_gradients(&p, &tokens, &targets, &kv).unwrap();
    for l in 0..3 {
        let mut q = p.clone();
        perturb(&mut q, &layer_tensors(&p, l + 1), 99 + l as u64);
        let (_, g) = gd_gradients(&q, &tokens, &targets, &kv).unwrap();
        let change = base[&names::w_k(l)].max_abs_diff(&g[&names::w_k(l)]);
        assert!(change >= 1e-6, "layer {l}: change {change}");
    }
}

#[test]
fn sequential_gd_depends_on_order() {
    let p = model(2, 12);
    let task = TaskConfig::default();
    let d = demos(12);
    let forward = finetune_gd(&p, &task, &d, &cfg(0.2)).unwrap().0;
    let reversed = FinetuneConfig {
        demo_order: Some((0..d.len()).rev().collect()),
        ..cfg(0.2)
    };
    let backward = finetune_gd(&p, &task, &d, &reversed).unwrap().0;
    assert!(forward.max_abs_diff(&backward) > 0.0);
}

#[test]
fn gradient_norms_replay() {
    let p = model(2, 13);
    let task = TaskConfig::default();
    let d = demos(13);
    let (_, a) = finetune_gd(&p, &task, &d, &cfg(0.1)).unwrap();
    let (_, b) = finetune_gd(&p, &task, &d, &cfg(0.1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_steps(), d.len());
    let tokens = format_demo(&task, &d[0]);
    let n = tokens.len();
    let kv: Vec<String> = (0..2).flat_map(|l| [names::w_k(l), names::w_v(l)]).collect();
    let (_, g) = gd_gradients(&p, &tokens, &[(n - 2, tokens[n - 1])], &kv).unwrap();
    for l in 0..2 {
        let sq: f64 = [names::w_k(l), names::w_v(l)].iter().map(|k| g[k].norm().powi(2)).sum();
        assert_eq!(a.norms[l][0], sq.sqrt());
    }
    assert!(a.norms.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn divergence_reports_step() {
    let mut p = model(2, 14);
    p.get_mut(&names::ln1_gain(0)).data_mut()[0] = f64::NAN;
    let task = TaskConfig::default();
    let errors = [
        finetune_gd(&p, &task, &demos(14), &cfg(0.1)).map(|_| ()),
        finetune_lcgd(&p, &task, &demos(14), &cfg(0.1)).map(|_| ()),
    ];
    for err in errors.map(|r| r.expect_err("non-finite weights must fail")) {
        assert!(err.to_string().contains("step 0"), "{err}");
    }
}

#[test]
fn pretraining_zero_steps_is_initialization() {
    let task = TaskConfig::default();
    let m = ModelConfig::tiny(task.vocab_size(), 40);
    let out = pretrain(&m, &task, &PretrainConfig::new(0, 3)).unwrap();
    assert!(out.params.bitwise_eq(&init_params(&m, 3, &InitScheme::Random).unwrap()));
    assert!(out.log.is_empty());
}

#[test]
fn pretraining_reduces_loss() {
    let task = TaskConfig::default();
    let m = ModelConfig::tiny(task.vocab_size(), 40);
    let out = pretrain(&m, &task, &PretrainConfig::new(300, 1)).unwrap();
    let mean = |r: &[icl_lab::optim::LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let first = mean(&out.log[..20]);
    let last = mean(&out.log[280..]);
    assert!(last < first, "{first} -> {last}");
}
