//! Forward pass, trace capture and the unembedding head.

use icl_lab::model::{
    forward_trace, icl_slice, init_params, logits, names, unembed, Capture, InitScheme, ModelConfig, OutputSite,
    Parameters,
};
use icl_lab::numerics::{central_difference, cross_entropy_logits, relative_error, Prng, Tensor, FD_STEP};
use icl_lab::tasks::{format_icl_prompt, format_zsl_prompt, sample_episode, test_span, TaskConfig};

fn model(seed: u64) -> Parameters {
    let task = TaskConfig::default();
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 16,
        vocab_size: task.vocab_size(),
        max_seq_len: 40,
        mlp_ratio: 2,
        layer_norm_eps: 1e-5,
    };
    let mut p = init_params(&cfg, seed, &InitScheme::Random).unwrap();
    // Larger weights so attention is far from uniform.
    let mut prng = Prng::new(seed + 100);
    let all: Vec<String> = p.names().map(String::from).collect();
    for n in all {
        let noise = prng.gaussian(p.get(&n).shape(), 0.3);
        p.get_mut(&n).axpy(1.0, &noise);
    }
    p
}

#[test]
fn trace_shapes() {
    let p = model(1);
    let tokens = [3, 20, 17, 21, 5, 20];
    let t = forward_trace(&p, &tokens, Capture::ALL).unwrap();
    let cfg = p.config();
    assert_eq!(t.logits.shape(), &[6, cfg.vocab_size]);
    assert_eq!(t.attention_outputs.len(), cfg.n_layers);
    assert!(t.attention_outputs.iter().all(|a| a.shape() == [6, cfg.d_model]));
    assert_eq!(t.attention_maps.len(), cfg.n_layers);
    for layer in &t.attention_maps {
        assert_eq!(layer.len(), cfg.n_heads);
        assert!(layer.iter().all(|m| m.unmasked().len() == 6 * 7 / 2));
    }
    assert_eq!(t.hidden_states.as_ref().unwrap().len(), cfg.n_layers);
    assert!(t.attention_maps[0][0].get(1, 4).is_none());
}

#[test]
fn trace_is_pure() {
    let p = model(2);
    let tokens = [1, 20, 16, 21, 1, 20];
    let a = forward_trace(&p, &tokens, Capture::ALL).unwrap();
    let b = forward_trace(&p, &tokens, Capture::ALL).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn capture_never_changes_logits() {
    let p = model(3);
    let tokens = [4, 20, 18, 21, 9, 20, 17, 21, 4, 20];
    let on = forward_trace(&p, &tokens, Capture::ALL).unwrap();
    let off = forward_trace(&p, &tokens, Capture::NONE).unwrap();
    assert!(on.logits.bitwise_eq(&off.logits));
    assert!(on.logits.bitwise_eq(&logits(&p, &tokens).unwrap()));
    assert!(off.attention_maps.is_empty() && off.attention_outputs.is_empty());
}

#[test]
fn zero_demo_icl_equals_zsl() {
    let task = TaskConfig::default();
    let p = model(4);
    let mut prng = Prng::new(4);
    for _ in 0..5 {
        let e = sample_episode(&task, &mut prng).unwrap().without_demonstrations();
        let icl_tokens = format_icl_prompt(&task, &e, 40).unwrap();
        let zsl_tokens = format_zsl_prompt(&task, &e, 40).unwrap();
        assert_eq!(icl_tokens, zsl_tokens);
        let icl = icl_slice(
            &forward_trace(&p, &icl_tokens, Capture::ALL).unwrap(),
            test_span(&task, &e),
        )
        .unwrap();
        let zsl = forward_trace(&p, &zsl_tokens, Capture::ALL).unwrap();
        assert!(icl.bitwise_eq(&zsl));
    }
}

#[test]
fn slicing_aligns_with_bare_prompt() {
    let task = TaskConfig::default();
    let p = model(5);
    let e = sample_episode(&task, &mut Prng::new(5)).unwrap();
    let full = forward_trace(&p, &format_icl_prompt(&task, &e, 40).unwrap(), Capture::ALL).unwrap();
    let span = test_span(&task, &e);
    let n = span.len();
    let sliced = icl_slice(&full, span.clone()).unwrap();
    let zsl = forward_trace(&p, &format_zsl_prompt(&task, &e, 40).unwrap(), Capture::ALL).unwrap();
    assert_eq!(sliced.len(), zsl.len());
    for (a, b) in sliced
        .attention_maps
        .iter()
        .flatten()
        .zip(zsl.attention_maps.iter().flatten())
    {
        assert_eq!(a.unmasked().len(), n * (n + 1) / 2);
        assert_eq!(a.unmasked().len(), b.unmasked().len());
    }
    // Map entries are the full trace's entries at shifted positions.
    let m = &full.attention_maps[1][0];
    assert_eq!(sliced.attention_maps[1][0].get(1, 0), m.get(span.start + 1, span.start));
    // Full span is the identity.
    assert!(icl_slice(&full, 0..full.len()).unwrap().bitwise_eq(&full));
    assert!(icl_slice(&full, 3..3).is_err());
    assert!(icl_slice(&full, 0..full.len() + 1).is_err());
}

#[test]
fn post_residual_site_adds_layer_input() {
    let p = model(6);
    let tokens = [2, 20, 19, 21, 2, 20];
    let sub = forward_trace(&p, &tokens, Capture::ALL).unwrap();
    let post = forward_trace(
        &p,
        &tokens,
        Capture {
            output_site: OutputSite::PostResidual,
            ..Capture::ALL
        },
    )
    .unwrap();
    let hidden = sub.hidden_states.as_ref().unwrap();
    // Layer 1 input is layer 0 output.
    let expect: Vec<f64> = hidden[0]
        .data()
        .iter()
        .zip(sub.attention_outputs[1].data())
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(post.attention_outputs[1].data(), expect.as_slice());
}

#[test]
fn logits_match_unembedded_final_state() {
    let p = model(7);
    let tokens = [7, 20, 16, 21, 7, 20];
    let t = forward_trace(&p, &tokens, Capture::ALL).unwrap();
    for i in 0..tokens.len() {
        let u = unembed(&p, t.final_hidden.row(i)).unwrap();
        for (a, b) in u.iter().zip(t.logits.row(i)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    assert!(unembed(&p, &[0.0; 3]).is_err());
}

#[test]
fn zero_unembedding_gives_zero_logits() {
    let mut p = model(8);
    let shape = p.get(names::UNEMBEDDING).shape().to_vec();
    *p.get_mut(names::UNEMBEDDING) = Tensor::zeros(&shape);
    let u = unembed(&p, &vec![0.7; p.config().d_model]).unwrap();
    assert!(u.iter().all(|&v| v == 0.0));
}

#[test]
fn unembed_cross_entropy_gradient_matches_finite_differences() {
    use icl_lab::model::{unembed_on_tape, Bound};
    use icl_lab::numerics::Tape;

    let p = model(9);
    let h = Prng::new(9).gaussian(&[1, p.config().d_model], 1.0);
    let target = 5;
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, &p);
    let hv = tape.leaf("h", h.clone());
    let l = unembed_on_tape(&mut tape, &bound, p.config(), hv);
    let loss = tape.cross_entropy(l, &[(0, target)]);
    let analytic = tape.backward(loss).unwrap().named("h").unwrap().clone();
    let numeric = central_difference(
        |x| cross_entropy_logits(&unembed(&p, x.data()).unwrap(), target).unwrap(),
        &h,
        FD_STEP,
    );
    let err = relative_error(&analytic, &numeric);
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn bad_token_lists_rejected() {
    let p = model(10);
    assert!(forward_trace(&p, &[], Capture::ALL).is_err());
    assert!(forward_trace(&p, &[0; 41], Capture::ALL).is_err());
    assert!(forward_trace(&p, &[22], Capture::ALL).is_err());
}
