//! Interactive generation: chat sessions carrying dialogue state across
//! exchanges, greedy and beam-search decoding, attention traces.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::cells::LstmState;
use crate::corpus::{self, TokenId, Vocab, BOS, EOS};
use crate::error::{AwiError, Result};
use crate::model::{self, AwiParams, DialogueState, ParamNodes, StateCarry, TurnContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_len: usize,
    /// Exponent of the length penalty used to rank finished hypotheses.
    pub length_norm: f64,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_width: 1,
            max_len,
            length_norm: 0.0,
        }
    }

    /// Width 4, length exponent 0.6.
    pub fn chat() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_width: 4,
            max_len: 40,
            length_norm: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(AwiError::Config("max_len must be at least 1".into()));
        }
        if self.mode == DecodeMode::Beam && self.beam_width == 0 {
            return Err(AwiError::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

/// A partial or finished reply during decoding.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities, always `<= 0`.
    pub log_prob: f64,
    pub state: LstmState,
    /// One `1 x T` alignment row per emitted token.
    pub alphas: Vec<NodeId>,
    pub finished: bool,
}

impl Hypothesis {
    fn start(state: LstmState) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            state,
            alphas: Vec::new(),
            finished: false,
        }
    }

    /// `log_prob / len^length_norm`.
    pub fn score(&self, length_norm: f64) -> f64 {
        normalized_score(self.log_prob, self.tokens.len(), length_norm)
    }
}

pub fn normalized_score(log_prob: f64, len: usize, length_norm: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_norm)
}

fn last_token(h: &Hypothesis) -> TokenId {
    h.tokens.last().copied().unwrap_or(BOS)
}

/// Repeatedly takes the most probable token until `</s>` or `max_len`.
pub fn greedy_decode(
    tape: &mut Tape,
    params: &ParamNodes,
    turn: &TurnContext,
    init: LstmState,
    max_len: usize,
) -> Result<Hypothesis> {
    let mut hyp = Hypothesis::start(init);
    while hyp.tokens.len() < max_len && !hyp.finished {
        let step = model::decode_step(tape, params, last_token(&hyp), &hyp.state, turn)?;
        let lp = tape.value(step.log_probs);
        let y = lp.argmax();
        hyp.log_prob += lp.data()[y];
        hyp.tokens.push(y);
        hyp.state = step.state;
        hyp.alphas.push(step.alpha);
        hyp.finished = y == EOS;
    }
    Ok(hyp)
}

/// Beam search. Every live hypothesis is expanded over the whole
/// vocabulary and the `width` best by cumulative log-probability survive;
/// hypotheses ending in `</s>` leave the beam for the finished pool.
/// Hypotheses still live at `max_len` join the pool unfinished. The greedy
/// hypothesis is also entered, so the result never scores below greedy.
/// The pool is ranked by [`Hypothesis::score`].
pub fn beam_search(
    tape: &mut Tape,
    params: &ParamNodes,
    turn: &TurnContext,
    init: LstmState,
    width: usize,
    max_len: usize,
    length_norm: f64,
) -> Result<Hypothesis> {
    let mut pool = vec![greedy_decode(tape, params, turn, init.clone(), max_len)?];
    pool.extend(beam_pool(tape, params, turn, init, width, max_len)?);
    Ok(best_of(pool, length_norm))
}

/// Highest [`Hypothesis::score`]; earlier entries win ties.
fn best_of(pool: Vec<Hypothesis>, length_norm: f64) -> Hypothesis {
    pool.into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.score(length_norm)
                .total_cmp(&b.score(length_norm))
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h)
        .expect("non-empty hypothesis pool")
}

/// Every hypothesis that left the beam, plus those alive at `max_len`.
fn beam_pool(
    tape: &mut Tape,
    params: &ParamNodes,
    turn: &TurnContext,
    init: LstmState,
    width: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(AwiError::Config("beam width must be at least 1".into()));
    }
    let mut pool = Vec::new();
    let mut live = vec![Hypothesis::start(init)];
    for _ in 0..max_len {
        // (hypothesis, token, cumulative log-prob)
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        let mut steps = Vec::with_capacity(live.len());
        for (hi, h) in live.iter().enumerate() {
            let step = model::decode_step(tape, params, last_token(h), &h.state, turn)?;
            for (y, lp) in tape.value(step.log_probs).data().iter().enumerate() {
                candidates.push((hi, y, h.log_prob + lp));
            }
            steps.push(step);
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        candidates.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (hi, y, log_prob) in candidates {
            let parent = &live[hi];
            let step = &steps[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(y);
            let mut alphas = parent.alphas.clone();
            alphas.push(step.alpha);
            let hyp = Hypothesis {
                tokens,
                log_prob,
                state: step.state.clone(),
                alphas,
                finished: y == EOS,
            };
            if hyp.finished {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    pool.extend(live);
    Ok(pool)
}

/// One generated reply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    /// Detokenized text with specials removed.
    pub text: String,
    /// Reply tokens including the trailing `</s>` when one was produced.
    pub reply_tokens: Vec<String>,
    /// Source tokens including the trailing `</s>`.
    pub source_tokens: Vec<String>,
    /// `reply_tokens.len() x source_tokens.len()` alignment weights.
    pub attention: Vec<Vec<f64>>,
    pub log_prob: f64,
}

/// A live conversation with the model.
#[derive(Clone, Debug)]
pub struct Session {
    pub state: DialogueState,
    pub decode: DecodeConfig,
    pub carry: StateCarry,
}

impl Session {
    pub fn new(params: &AwiParams, decode: DecodeConfig) -> Self {
        Session {
            state: DialogueState::zeros(params.dims.hidden),
            decode,
            carry: StateCarry::Full,
        }
    }

    pub fn with_carry(mut self, carry: StateCarry) -> Self {
        self.carry = carry;
        self
    }

    pub fn turn_index(&self) -> usize {
        self.state.turn_index
    }

    /// Encodes `user_text` from the carried state, decodes a reply, and
    /// carries the new intention and final decoder state forward.
    pub fn respond(&mut self, params: &AwiParams, vocab: &Vocab, user_text: &str) -> Result<Reply> {
        if corpus::tokenize(user_text).is_empty() {
            return Err(AwiError::Domain("empty user utterance".into()));
        }
        if vocab.len() != params.dims.vocab {
            return Err(AwiError::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                params.dims.vocab
            )));
        }
        self.decode.validate()?;
        let src = vocab.encode(user_text);
        let mut tape = Tape::new();
        let nodes = params.bind(&mut tape);
        let state = self.state.to_tape(&mut tape);
        let start = model::begin_turn(&mut tape, &nodes, &state, &src)?;
        let hyp = match self.decode.mode {
            DecodeMode::Greedy => greedy_decode(
                &mut tape,
                &nodes,
                &start.context,
                start.decoder_init,
                self.decode.max_len,
            )?,
            DecodeMode::Beam => beam_search(
                &mut tape,
                &nodes,
                &start.context,
                start.decoder_init,
                self.decode.beam_width,
                self.decode.max_len,
                self.decode.length_norm,
            )?,
        };
        let next = model::end_turn(&state, start.intention, &hyp.state);
        let next = self.carry.next(&mut tape, params.dims.hidden, &next);
        self.state = next.to_values(&tape);

        let label = |id: &TokenId| vocab.token(*id).unwrap_or("<unk>").to_string();
        Ok(Reply {
            text: vocab.decode(&hyp.tokens),
            reply_tokens: hyp.tokens.iter().map(label).collect(),
            source_tokens: src.iter().map(label).collect(),
            attention: hyp
                .alphas
                .iter()
                .map(|a| tape.value(*a).data().to_vec())
                .collect(),
            log_prob: hyp.log_prob,
        })
    }
}

/// Replays the user side of each synthetic dialogue through a fresh greedy
/// session and checks that the last reply names the colour the dialogue
/// opened with. Returns the fraction answered correctly.
pub fn synthetic_color_accuracy(
    params: &AwiParams,
    vocab: &Vocab,
    dialogues: &[corpus::Dialogue],
    carry: StateCarry,
) -> Result<f64> {
    if dialogues.is_empty() {
        return Err(AwiError::Domain("no dialogues to score".into()));
    }
    let mut correct = 0;
    for d in dialogues {
        let mut session = Session::new(params, DecodeConfig::greedy(20)).with_carry(carry);
        let mut last = None;
        for t in &d.turns {
            last = Some(session.respond(params, vocab, &t.user)?);
        }
        let answer = last
            .as_ref()
            .and_then(|r| corpus::synthetic::first_color(&r.text));
        if answer.is_some() && answer == corpus::synthetic::opening_color(d) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dialogues.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, StateNodes};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(vocab: usize, seed: u64) -> AwiParams {
        let dims = ModelDims {
            vocab,
            embed: 5,
            hidden: 6,
            align: 3,
            layers: 1,
            plain_lstm: false,
        };
        AwiParams::random(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn run<T>(
        p: &AwiParams,
        f: impl FnOnce(&mut Tape, &ParamNodes, &TurnContext, LstmState) -> T,
    ) -> T {
        let mut tape = Tape::new();
        let nodes = p.bind(&mut tape);
        let state = StateNodes::zeros(&mut tape, p.dims.hidden, 0);
        let start = model::begin_turn(&mut tape, &nodes, &state, &[3, 4, EOS]).unwrap();
        f(&mut tape, &nodes, &start.context, start.decoder_init)
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..10 {
            let p = setup(7, seed);
            let (g, b) = run(&p, |tape, n, ctx, init| {
                let g = greedy_decode(tape, n, ctx, init.clone(), 6).unwrap();
                let pool = beam_pool(tape, n, ctx, init, 1, 6).unwrap();
                assert_eq!(pool.len(), 1);
                (g, best_of(pool, 0.0))
            });
            assert_eq!(g.tokens, b.tokens);
            assert_eq!(g.log_prob, b.log_prob);
        }
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        for seed in 0..10 {
            let p = setup(7, seed);
            for norm in [0.0, 0.6, 1.0] {
                let (g, b) = run(&p, |tape, n, ctx, init| {
                    let g = greedy_decode(tape, n, ctx, init.clone(), 5).unwrap();
                    let b = beam_search(tape, n, ctx, init, 3, 5, norm).unwrap();
                    (g, b)
                });
                assert!(b.score(norm) >= g.score(norm));
            }
        }
    }

    #[test]
    fn log_prob_never_increases_along_hypothesis() {
        let p = setup(7, 3);
        let h = run(&p, |tape, n, ctx, init| {
            beam_search(tape, n, ctx, init, 4, 6, 0.6).unwrap()
        });
        assert!(h.log_prob <= 0.0);
        assert_eq!(h.finished, h.tokens.last() == Some(&EOS));
        assert!(h.tokens.len() <= 6);
    }

    #[test]
    fn zero_width_and_empty_input_are_rejected() {
        let p = setup(7, 1);
        let err = run(&p, |tape, n, ctx, init| {
            beam_search(tape, n, ctx, init, 0, 3, 0.0)
        });
        assert!(err.is_err());
        let vocab = Vocab::with_size(7).unwrap();
        let mut s = Session::new(&p, DecodeConfig::greedy(5));
        assert!(matches!(
            s.respond(&p, &vocab, "   "),
            Err(AwiError::Domain(_))
        ));
        assert_eq!(s.turn_index(), 0);
    }

    #[test]
    fn respond_shapes_and_state() {
        let p = setup(9, 5);
        let vocab = Vocab::with_size(9).unwrap();
        let mut s = Session::new(&p, DecodeConfig::greedy(6));
        let mut twin = s.clone();
        let r = s.respond(&p, &vocab, "w4 w5 w6").unwrap();
        let r2 = twin.respond(&p, &vocab, "w4 w5 w6").unwrap();
        assert_eq!(r, r2);
        assert_eq!(r.source_tokens.len(), 4);
        assert_eq!(r.attention.len(), r.reply_tokens.len());
        for row in &r.attention {
            assert_eq!(row.len(), 4);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(s.turn_index(), 1);
        assert_ne!(s.state, DialogueState::zeros(6));
    }
}
