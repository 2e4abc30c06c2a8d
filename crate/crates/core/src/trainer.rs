//! Sentence-level SGD: one plain gradient step per turn, dialogues shuffled
//! every epoch with turn order kept, learning rate halved whenever the
//! development perplexity goes up.

use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::EncodedDialogue;
use crate::error::{AwiError, Result};
use crate::gradcheck::ParamSet;
use crate::model::{self, AwiParams, ModelDims, ParamNodes, StateCarry, StateNodes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub align: usize,
    pub embed: usize,
    pub layers: usize,
    pub lr0: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub grad_clip: f64,
    pub plain_lstm: bool,
    /// Half-width of the uniform initialisation.
    pub init_scale: f64,
    /// [`StateCarry::Reset`] trains the no-memory ablation.
    pub carry: StateCarry,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 50,
            align: 25,
            embed: 50,
            layers: 1,
            lr0: 0.1,
            max_epochs: 10,
            seed: 1,
            grad_clip: 5.0,
            plain_lstm: false,
            init_scale: crate::cells::INIT_SCALE,
            carry: StateCarry::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.align == 0 || self.embed == 0 || self.layers == 0 {
            return Err(AwiError::Config(
                "hidden, align, embed and layers must be positive".into(),
            ));
        }
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(AwiError::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.grad_clip.is_nan()
            || self.grad_clip < 0.0
            || self.init_scale.is_nan()
            || self.init_scale < 0.0
        {
            return Err(AwiError::Config(
                "grad_clip and init_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: self.embed,
            hidden: self.hidden,
            align: self.align,
            layers: self.layers,
            plain_lstm: self.plain_lstm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_ppl: f64,
    pub dev_ppl: f64,
}

impl EpochRecord {
    /// `epoch, lr, train_ppl, dev_ppl`
    pub fn metrics_line(&self) -> String {
        format!(
            "{}, {}, {:.6}, {:.6}",
            self.epoch, self.lr, self.train_ppl, self.dev_ppl
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_dev_ppl: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(lr0: f64) -> Self {
        TrainState {
            epoch: 0,
            lr: lr0,
            best_dev_ppl: f64::INFINITY,
            history: Vec::new(),
        }
    }
}

/// Halve `lr` iff the development perplexity strictly increased.
pub fn lr_update(lr: f64, prev_dev_ppl: f64, new_dev_ppl: f64) -> f64 {
    if new_dev_ppl > prev_dev_ppl {
        lr / 2.0
    } else {
        lr
    }
}

/// Summed negative log-likelihood and target-token count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NllTotals {
    pub nll: f64,
    pub tokens: usize,
}

impl NllTotals {
    pub fn perplexity(&self) -> f64 {
        (self.nll / self.tokens as f64).exp()
    }

    pub fn merge(self, other: NllTotals) -> NllTotals {
        NllTotals {
            nll: self.nll + other.nll,
            tokens: self.tokens + other.tokens,
        }
    }
}

/// Per-dialogue likelihoods are computed on worker threads against shared
/// read-only parameters, then summed in corpus order, so the result does not
/// depend on the thread count.
pub fn evaluate_nll(
    params: &AwiParams,
    dialogues: &[EncodedDialogue],
    carry: StateCarry,
) -> Result<NllTotals> {
    if dialogues.is_empty() {
        return Err(AwiError::Domain(
            "perplexity of an empty dialogue set".into(),
        ));
    }
    let workers = std::thread::available_parallelism()
        .map(NonZeroUsize::get)
        .unwrap_or(1)
        .min(dialogues.len());
    let chunk = dialogues.len().div_ceil(workers);
    let per_dialogue: Vec<Result<(f64, usize)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = dialogues
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|d| model::dialogue_nll_value(params, d, carry))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut totals = NllTotals::default();
    for r in per_dialogue {
        let (nll, tokens) = r?;
        totals.nll += nll;
        totals.tokens += tokens;
    }
    Ok(totals)
}

/// `exp(Σ nll / Σ target tokens)` over all turns of all dialogues.
pub fn evaluate_perplexity(
    params: &AwiParams,
    dialogues: &[EncodedDialogue],
    carry: StateCarry,
) -> Result<f64> {
    evaluate_nll(params, dialogues, carry).map(|t| t.perplexity())
}

/// Emitted before each turn is processed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnEvent<'a> {
    pub dialogue_id: &'a str,
    pub turn: usize,
}

/// Scales `grads` so its global norm is at most `clip`; returns the
/// pre-clipping norm.
pub fn clip_global_norm(grads: &mut AwiParams, clip: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if clip > 0.0 && norm > clip {
        let k = clip / norm;
        grads
            .tensors_mut()
            .into_iter()
            .for_each(|t| t.scale_in_place(k));
    }
    norm
}

pub fn sgd_step(params: &mut AwiParams, grads: &AwiParams, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        p.axpy(-lr, g);
    }
}

/// Online training on one dialogue: after every turn the turn's loss is
/// backpropagated through the whole dialogue so far (earlier turns keep the
/// parameter values they were run with) and the parameters are updated.
/// The next turn runs with the updated parameters.
pub fn train_dialogue(
    params: &mut AwiParams,
    dialogue: &EncodedDialogue,
    lr: f64,
    grad_clip: f64,
    carry: StateCarry,
    on_turn: &mut dyn FnMut(TurnEvent<'_>),
) -> Result<NllTotals> {
    let hidden = params.dims.hidden;
    let mut tape = Tape::new();
    let mut bound: Vec<ParamNodes> = Vec::with_capacity(dialogue.turns.len());
    let mut state = StateNodes::zeros(&mut tape, hidden, 0);
    let mut totals = NllTotals::default();
    for (k, turn) in dialogue.turns.iter().enumerate() {
        on_turn(TurnEvent {
            dialogue_id: &dialogue.id,
            turn: k,
        });
        let nodes = params.bind(&mut tape);
        let out = model::turn_nll(&mut tape, &nodes, &state, &turn.src, &turn.tgt)?;
        bound.push(nodes);
        let loss = tape.value(out.nll).data()[0];
        if !loss.is_finite() {
            return Err(AwiError::Numeric(format!(
                "non-finite loss {loss} on dialogue {:?} turn {k} (lr {lr})",
                dialogue.id
            )));
        }
        tape.backward(out.nll)?;
        let mut grads = params.zeros_like();
        for b in &bound {
            grads.accumulate_grads(&tape, b);
        }
        let norm = clip_global_norm(&mut grads, grad_clip);
        if !norm.is_finite() {
            return Err(AwiError::Numeric(format!(
                "non-finite gradient norm on dialogue {:?} turn {k} (loss {loss}, lr {lr})",
                dialogue.id
            )));
        }
        sgd_step(params, &grads, lr);
        totals.nll += loss;
        totals.tokens += out.token_count;
        state = carry.next(&mut tape, hidden, &out.next_state);
    }
    Ok(totals)
}

/// Owns the parameters, the configuration and the shuffling generator.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: AwiParams,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Random initialisation from `config.seed`.
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = AwiParams::random(config.dims(vocab_size), config.init_scale, &mut rng)?;
        Ok(Trainer {
            config,
            params,
            rng,
        })
    }

    pub fn with_params(config: TrainConfig, params: AwiParams) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            config,
            params,
            rng,
        })
    }

    /// A fresh random permutation of `0..n` for the next epoch.
    pub fn shuffle_order(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// One pass over `train` in a freshly shuffled order at `state.lr`.
    /// Returns the online training totals; `state.epoch` is advanced.
    pub fn train_epoch(
        &mut self,
        train: &[EncodedDialogue],
        state: &mut TrainState,
        on_turn: &mut dyn FnMut(TurnEvent<'_>),
    ) -> Result<NllTotals> {
        if train.is_empty() {
            return Err(AwiError::Domain("no training dialogues".into()));
        }
        let order = self.shuffle_order(train.len());
        let mut totals = NllTotals::default();
        for i in order {
            let t = train_dialogue(
                &mut self.params,
                &train[i],
                state.lr,
                self.config.grad_clip,
                self.config.carry,
                on_turn,
            )?;
            totals = totals.merge(t);
        }
        state.epoch += 1;
        Ok(totals)
    }

    /// Runs `max_epochs` epochs. After each one the development perplexity
    /// is measured and drives [`lr_update`].
    pub fn fit(
        &mut self,
        train: &[EncodedDialogue],
        dev: &[EncodedDialogue],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainState> {
        let mut state = TrainState::new(self.config.lr0);
        let mut prev_dev = f64::INFINITY;
        for _ in 0..self.config.max_epochs {
            let lr = state.lr;
            let train_totals = self.train_epoch(train, &mut state, &mut |_| {})?;
            let dev_ppl = evaluate_perplexity(&self.params, dev, self.config.carry)?;
            let record = EpochRecord {
                epoch: state.epoch,
                lr,
                train_ppl: train_totals.perplexity(),
                dev_ppl,
            };
            on_epoch(&record);
            state.history.push(record);
            state.best_dev_ppl = state.best_dev_ppl.min(dev_ppl);
            state.lr = lr_update(lr, prev_dev, dev_ppl);
            prev_dev = dev_ppl;
        }
        Ok(state)
    }
}
