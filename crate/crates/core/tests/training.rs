use awi_core::autodiff::Tape;
use awi_core::corpus::{build_vocab, synthetic, EncodedTurn, EOS};
use awi_core::model::{self, dialogue_nll_value};
use awi_core::trainer::{evaluate_nll, evaluate_perplexity, train_dialogue, NllTotals};
use awi_core::{
    AwiParams, DecodeConfig, EncodedDialogue, ModelDims, Session, StateCarry, TrainConfig, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dims(vocab: usize) -> ModelDims {
    ModelDims {
        vocab,
        embed: 6,
        hidden: 8,
        align: 4,
        layers: 1,
        plain_lstm: false,
    }
}

fn one_turn(src: Vec<usize>, tgt: Vec<usize>) -> EncodedDialogue {
    EncodedDialogue {
        id: "one".into(),
        turns: vec![EncodedTurn { src, tgt }],
    }
}

/// A small model trained for a few epochs on synthetic dialogues.
fn trained_tiny() -> (Trainer, awi_core::Vocab, Vec<awi_core::Dialogue>) {
    let all = synthetic::generate(21, 60);
    let vocab = build_vocab(&all, 1);
    let train: Vec<_> = all.iter().map(|d| vocab.encode_dialogue(d)).collect();
    let config = TrainConfig {
        hidden: 10,
        align: 5,
        embed: 8,
        max_epochs: 3,
        seed: 21,
        init_scale: 0.3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, vocab.len()).unwrap();
    trainer.fit(&train, &train, |_| {}).unwrap();
    (trainer, vocab, all)
}

#[test]
fn small_sgd_step_decreases_the_example_loss() {
    for seed in 0..5 {
        let mut params =
            AwiParams::random(tiny_dims(20), 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let d = one_turn(vec![4, 9, 12, EOS], vec![7, 15, EOS]);
        let (before, _) = dialogue_nll_value(&params, &d, StateCarry::Full).unwrap();
        train_dialogue(&mut params, &d, 1e-3, 0.0, StateCarry::Full, &mut |_| {}).unwrap();
        let (after, _) = dialogue_nll_value(&params, &d, StateCarry::Full).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn nll_is_nonnegative_and_zero_model_is_uniform() {
    let d = EncodedDialogue {
        id: "z".into(),
        turns: vec![
            EncodedTurn {
                src: vec![4, EOS],
                tgt: vec![5, 6, EOS],
            },
            EncodedTurn {
                src: vec![7, 8, 9, EOS],
                tgt: vec![EOS],
            },
        ],
    };
    let zero = AwiParams::zeros(tiny_dims(20)).unwrap();
    let (nll, n) = dialogue_nll_value(&zero, &d, StateCarry::Full).unwrap();
    assert_eq!(n, 4);
    assert!((nll - 4.0 * 20f64.ln()).abs() < 1e-12);
    for seed in 0..10 {
        let p =
            AwiParams::random(tiny_dims(20), 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (nll, _) = dialogue_nll_value(&p, &d, StateCarry::Full).unwrap();
        assert!(nll >= 0.0);
    }
}

#[test]
fn certain_model_has_unit_perplexity() {
    // Every target is just </s>, and the readout bias makes it certain.
    let mut params = AwiParams::zeros(tiny_dims(12)).unwrap();
    params.readout.b_o.set(0, EOS, 1000.0);
    let dev: Vec<_> = (0..3)
        .map(|i| one_turn(vec![4 + i, EOS], vec![EOS]))
        .collect();
    assert_eq!(
        evaluate_perplexity(&params, &dev, StateCarry::Full).unwrap(),
        1.0
    );
    assert_eq!(
        NllTotals {
            nll: 0.0,
            tokens: 7
        }
        .perplexity(),
        1.0
    );
}

#[test]
fn perplexity_of_union_is_token_weighted_geometric_mean() {
    let all = synthetic::generate(2, 30);
    let vocab = build_vocab(&all, 1);
    let enc: Vec<_> = all.iter().map(|d| vocab.encode_dialogue(d)).collect();
    let params = AwiParams::random(
        tiny_dims(vocab.len()),
        0.5,
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let (a, b) = enc.split_at(11);
    let ta = evaluate_nll(&params, a, StateCarry::Full).unwrap();
    let tb = evaluate_nll(&params, b, StateCarry::Full).unwrap();
    let joint = evaluate_perplexity(&params, &enc, StateCarry::Full).unwrap();
    let (na, nb) = (ta.tokens as f64, tb.tokens as f64);
    let combined = ((na * ta.perplexity().ln() + nb * tb.perplexity().ln()) / (na + nb)).exp();
    assert!(
        (joint - combined).abs() / joint < 1e-12,
        "{joint} vs {combined}"
    );
}

#[test]
fn evaluation_is_deterministic() {
    let all = synthetic::generate(5, 40);
    let vocab = build_vocab(&all, 1);
    let enc: Vec<_> = all.iter().map(|d| vocab.encode_dialogue(d)).collect();
    let params = AwiParams::random(
        tiny_dims(vocab.len()),
        0.5,
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    let a = evaluate_nll(&params, &enc, StateCarry::Full).unwrap();
    let b = evaluate_nll(&params, &enc, StateCarry::Full).unwrap();
    assert_eq!(a.nll.to_bits(), b.nll.to_bits());
    let serial: f64 = enc
        .iter()
        .map(|d| dialogue_nll_value(&params, d, StateCarry::Full).unwrap().0)
        .sum();
    assert_eq!(a.nll.to_bits(), serial.to_bits());
}

#[test]
fn trained_model_is_sensitive_to_turn_order_and_carry() {
    let (trainer, vocab, all) = trained_tiny();
    let d = vocab.encode_dialogue(&all[0]);
    let mut swapped = d.clone();
    swapped.turns.swap(0, 2);
    let (orig, _) = dialogue_nll_value(&trainer.params, &d, StateCarry::Full).unwrap();
    let (perm, _) = dialogue_nll_value(&trainer.params, &swapped, StateCarry::Full).unwrap();
    assert_ne!(orig, perm);
    // Under Reset every turn is scored from the zero state, so order only
    // reorders the sum.
    let (reset, _) = dialogue_nll_value(&trainer.params, &d, StateCarry::Reset).unwrap();
    let (reset_perm, _) = dialogue_nll_value(&trainer.params, &swapped, StateCarry::Reset).unwrap();
    assert!((reset - reset_perm).abs() < 1e-9);
    assert_ne!(orig, reset);
}

#[test]
fn session_state_moves_after_each_reply() {
    let (trainer, vocab, _) = trained_tiny();
    let params = &trainer.params;
    let mut session = Session::new(params, DecodeConfig::greedy(15));
    let mut clone = session.clone();
    let before = session.state.clone();
    let reply = session
        .respond(params, &vocab, "my device shows a blue error")
        .unwrap();
    assert_ne!(session.state.intention_h, before.intention_h);
    assert_ne!(session.state.prev_dec_h, before.prev_dec_h);
    assert_eq!(session.turn_index(), 1);
    let again = clone
        .respond(params, &vocab, "my device shows a blue error")
        .unwrap();
    assert_eq!(reply, again);
    assert_eq!(reply.attention.len(), reply.reply_tokens.len());
    for row in &reply.attention {
        assert_eq!(row.len(), reply.source_tokens.len());
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_learning_rate_epoch_keeps_parameters() {
    let all = synthetic::generate(8, 4);
    let vocab = build_vocab(&all, 1);
    let enc: Vec<_> = all.iter().map(|d| vocab.encode_dialogue(d)).collect();
    let mut params = AwiParams::random(
        tiny_dims(vocab.len()),
        0.2,
        &mut ChaCha8Rng::seed_from_u64(8),
    )
    .unwrap();
    let before = params.clone();
    train_dialogue(
        &mut params,
        &enc[0],
        0.0,
        5.0,
        StateCarry::Full,
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(params, before);
}

#[test]
fn gradient_of_later_turn_reaches_first_turn_parameters() {
    let mut tape = Tape::new();
    let params = AwiParams::random(tiny_dims(20), 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let nodes = params.bind(&mut tape);
    let state = model::StateNodes::zeros(&mut tape, 8, 0);
    let first = model::turn_nll(&mut tape, &nodes, &state, &[5, 6, EOS], &[7, EOS]).unwrap();
    let nodes2 = params.bind(&mut tape);
    let second =
        model::turn_nll(&mut tape, &nodes2, &first.next_state, &[8, EOS], &[9, EOS]).unwrap();
    tape.backward(second.nll).unwrap();
    let mut g = params.zeros_like();
    g.accumulate_grads(&tape, &nodes);
    assert!(g.encoder[0].w_x.max_abs() > 0.0);
    assert!(g.intention.w_x.max_abs() > 0.0);
}
