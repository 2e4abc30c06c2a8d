//! The attention-with-intention network: a word-level encoder, a turn-level
//! intention LSTM, and an attentive decoder, threaded across the turns of a
//! dialogue.
//!
//! Per turn:
//!
//! 1. The encoder reads the user utterance. Its bottom layer starts from the
//!    previous turn's final decoder `(h, c)`.
//! 2. The intention cell steps once on `[fixed ; prev_dec_h]`, where `fixed`
//!    is the encoder's last hidden state.
//! 3. The decoder's bottom layer starts from the new intention `(h, c)`.
//!    Each step attends over the source-word embeddings with
//!    `e_t = vᵀ tanh(W_ah·h_prev + W_ae·ctx_t)` and reads out
//!    `log softmax(W_oh·h + W_oc·c_j + W_oy·E[y_prev] + b_o)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::cells::{self, CellState, LstmLayerNodes, LstmLayerParams, LstmState};
use crate::corpus::{EncodedDialogue, EncodedTurn, TokenId, BOS, EOS, SPECIALS};
use crate::error::{AwiError, Result};
use crate::gradcheck::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub align: usize,
    pub layers: usize,
    /// Drop the depth gates so every stack is a plain LSTM.
    pub plain_lstm: bool,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < SPECIALS.len() {
            return Err(AwiError::Config(format!(
                "vocabulary of {} is smaller than the {} specials",
                self.vocab,
                SPECIALS.len()
            )));
        }
        if self.embed == 0 || self.hidden == 0 || self.align == 0 || self.layers == 0 {
            return Err(AwiError::Config(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn depth_gated(&self, layer: usize) -> bool {
        layer > 0 && !self.plain_lstm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `A x H`
    pub w_ah: Tensor,
    /// `A x D`
    pub w_ae: Tensor,
    /// `1 x A`
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutParams {
    /// `V x H`
    pub w_oh: Tensor,
    /// `V x D`
    pub w_oc: Tensor,
    /// `V x D`
    pub w_oy: Tensor,
    /// `1 x V`
    pub b_o: Tensor,
}

/// Every trainable weight. Attention contexts are embedding rows, so the
/// context width equals the embedding width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AwiParams {
    pub dims: ModelDims,
    /// `V x D`, shared by source words, decoder inputs and the readout.
    pub embedding: Tensor,
    pub encoder: Vec<LstmLayerParams>,
    pub intention: LstmLayerParams,
    pub decoder: Vec<LstmLayerParams>,
    pub attention: AttentionParams,
    pub readout: ReadoutParams,
}

impl AwiParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            vocab: v,
            embed: d,
            hidden: h,
            align: a,
            layers,
            ..
        } = dims;
        let stack = |input: usize| {
            (0..layers)
                .map(|l| {
                    LstmLayerParams::zeros(if l == 0 { input } else { h }, h, dims.depth_gated(l))
                })
                .collect()
        };
        Ok(AwiParams {
            dims,
            embedding: Tensor::zeros(v, d),
            encoder: stack(d),
            intention: LstmLayerParams::zeros(2 * h, h, false),
            decoder: stack(2 * d),
            attention: AttentionParams {
                w_ah: Tensor::zeros(a, h),
                w_ae: Tensor::zeros(a, d),
                v: Tensor::zeros(1, a),
            },
            readout: ReadoutParams {
                w_oh: Tensor::zeros(v, h),
                w_oc: Tensor::zeros(v, d),
                w_oy: Tensor::zeros(v, d),
                b_o: Tensor::zeros(1, v),
            },
        })
    }

    /// Uniform in `[-scale, scale]`; LSTM forget biases set to 1.
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, scale: f64, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            vocab: v,
            embed: d,
            hidden: h,
            align: a,
            layers,
            ..
        } = dims;
        let stack = |input: usize, rng: &mut R| -> Vec<LstmLayerParams> {
            (0..layers)
                .map(|l| {
                    let i = if l == 0 { input } else { h };
                    LstmLayerParams::random(i, h, dims.depth_gated(l), scale, rng)
                })
                .collect()
        };
        let embedding = Tensor::uniform(v, d, scale, rng);
        let encoder = stack(d, rng);
        let intention = LstmLayerParams::random(2 * h, h, false, scale, rng);
        let decoder = stack(2 * d, rng);
        Ok(AwiParams {
            dims,
            embedding,
            encoder,
            intention,
            decoder,
            attention: AttentionParams {
                w_ah: Tensor::uniform(a, h, scale, rng),
                w_ae: Tensor::uniform(a, d, scale, rng),
                v: Tensor::uniform(1, a, scale, rng),
            },
            readout: ReadoutParams {
                w_oh: Tensor::uniform(v, h, scale, rng),
                w_oc: Tensor::uniform(v, d, scale, rng),
                w_oy: Tensor::uniform(v, d, scale, rng),
                b_o: Tensor::uniform(1, v, scale, rng),
            },
        })
    }

    /// Every tensor with a stable dotted name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, p) in self.encoder.iter().enumerate() {
            out.extend(p.named_tensors(&format!("encoder.{l}")));
        }
        out.extend(self.intention.named_tensors("intention"));
        for (l, p) in self.decoder.iter().enumerate() {
            out.extend(p.named_tensors(&format!("decoder.{l}")));
        }
        out.extend([
            ("attention.w_ah".to_string(), &self.attention.w_ah),
            ("attention.w_ae".to_string(), &self.attention.w_ae),
            ("attention.v".to_string(), &self.attention.v),
            ("readout.w_oh".to_string(), &self.readout.w_oh),
            ("readout.w_oc".to_string(), &self.readout.w_oc),
            ("readout.w_oy".to_string(), &self.readout.w_oy),
            ("readout.b_o".to_string(), &self.readout.b_o),
        ]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    /// Copies every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            hidden: self.dims.hidden,
            embedding: tape.leaf(self.embedding.clone()),
            encoder: self.encoder.iter().map(|p| p.bind(tape)).collect(),
            intention: self.intention.bind(tape),
            decoder: self.decoder.iter().map(|p| p.bind(tape)).collect(),
            w_ah: tape.leaf(self.attention.w_ah.clone()),
            w_ae: tape.leaf(self.attention.w_ae.clone()),
            v: tape.leaf(self.attention.v.clone()),
            w_oh: tape.leaf(self.readout.w_oh.clone()),
            w_oc: tape.leaf(self.readout.w_oc.clone()),
            w_oy: tape.leaf(self.readout.w_oy.clone()),
            b_o: tape.leaf(self.readout.b_o.clone()),
        }
    }

    /// Same dims and structure, every element zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Adds the leaf gradients of one bound copy into `self`.
    pub fn accumulate_grads(&mut self, tape: &Tape, nodes: &ParamNodes) {
        for (dst, id) in self.tensors_mut().into_iter().zip(nodes.ids()) {
            if let Some(g) = tape.grad_ref(id) {
                dst.add_assign(g);
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

impl ParamSet for AwiParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for p in &mut self.encoder {
            out.extend(p.tensors_mut());
        }
        out.extend(self.intention.tensors_mut());
        for p in &mut self.decoder {
            out.extend(p.tensors_mut());
        }
        out.extend([
            &mut self.attention.w_ah,
            &mut self.attention.w_ae,
            &mut self.attention.v,
            &mut self.readout.w_oh,
            &mut self.readout.w_oc,
            &mut self.readout.w_oy,
            &mut self.readout.b_o,
        ]);
        out
    }
}

/// [`AwiParams`] copied onto a tape.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    hidden: usize,
    pub embedding: NodeId,
    pub encoder: Vec<LstmLayerNodes>,
    pub intention: LstmLayerNodes,
    pub decoder: Vec<LstmLayerNodes>,
    pub w_ah: NodeId,
    pub w_ae: NodeId,
    pub v: NodeId,
    pub w_oh: NodeId,
    pub w_oc: NodeId,
    pub w_oy: NodeId,
    pub b_o: NodeId,
}

impl ParamNodes {
    /// Same order as [`AwiParams::named_tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        for p in &self.encoder {
            out.extend(p.ids());
        }
        out.extend(self.intention.ids());
        for p in &self.decoder {
            out.extend(p.ids());
        }
        out.extend([
            self.w_ah, self.w_ae, self.v, self.w_oh, self.w_oc, self.w_oy, self.b_o,
        ]);
        out
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Cross-turn state as plain values, e.g. held by a chat session.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueState {
    pub intention_h: Tensor,
    pub intention_c: Tensor,
    /// Last top-layer decoder hidden of the previous turn.
    pub prev_dec_h: Tensor,
    pub prev_dec_c: Tensor,
    pub turn_index: usize,
}

impl DialogueState {
    pub fn zeros(hidden: usize) -> Self {
        DialogueState {
            intention_h: Tensor::zeros(1, hidden),
            intention_c: Tensor::zeros(1, hidden),
            prev_dec_h: Tensor::zeros(1, hidden),
            prev_dec_c: Tensor::zeros(1, hidden),
            turn_index: 0,
        }
    }

    pub fn to_tape(&self, tape: &mut Tape) -> StateNodes {
        StateNodes {
            intention: CellState {
                h: tape.leaf(self.intention_h.clone()),
                c: tape.leaf(self.intention_c.clone()),
            },
            prev_dec: CellState {
                h: tape.leaf(self.prev_dec_h.clone()),
                c: tape.leaf(self.prev_dec_c.clone()),
            },
            turn_index: self.turn_index,
        }
    }
}

/// Cross-turn state living on a tape, so gradients flow between turns.
#[derive(Clone, Copy, Debug)]
pub struct StateNodes {
    pub intention: CellState,
    pub prev_dec: CellState,
    pub turn_index: usize,
}

impl StateNodes {
    pub fn zeros(tape: &mut Tape, hidden: usize, turn_index: usize) -> Self {
        StateNodes {
            intention: CellState::zeros(tape, hidden),
            prev_dec: CellState::zeros(tape, hidden),
            turn_index,
        }
    }

    pub fn to_values(&self, tape: &Tape) -> DialogueState {
        DialogueState {
            intention_h: tape.value(self.intention.h).clone(),
            intention_c: tape.value(self.intention.c).clone(),
            prev_dec_h: tape.value(self.prev_dec.h).clone(),
            prev_dec_c: tape.value(self.prev_dec.c).clone(),
            turn_index: self.turn_index,
        }
    }
}

/// Encoder output for one user utterance.
#[derive(Clone, Debug)]
pub struct TurnContext {
    pub source: Vec<TokenId>,
    /// Top-layer encoder hidden per position.
    pub enc_h: Vec<NodeId>,
    /// Attention contexts: the embedding row of each source word.
    pub ctx: Vec<NodeId>,
    /// `T x D` stack of `ctx`.
    pub ctx_matrix: NodeId,
    /// `T x A` projection `ctx · W_aeᵀ`, shared by every decoder step.
    pub ctx_proj: NodeId,
    /// Last encoder hidden, the turn's fixed-size summary.
    pub fixed: NodeId,
    pub enc_final: LstmState,
}

impl TurnContext {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

fn check_ids(ids: &[TokenId], vocab: usize) -> Result<()> {
    match ids.iter().find(|id| **id >= vocab) {
        Some(id) => Err(AwiError::Vocabulary {
            id: *id,
            size: vocab,
        }),
        None => Ok(()),
    }
}

/// A stack's initial state: the bottom layer takes `bottom`, upper layers
/// start from zeros.
fn initial_stack_state(
    tape: &mut Tape,
    layers: usize,
    hidden: usize,
    bottom: CellState,
) -> LstmState {
    let mut s = vec![bottom];
    s.extend((1..layers).map(|_| CellState::zeros(tape, hidden)));
    s
}

pub fn encode_turn(
    tape: &mut Tape,
    params: &ParamNodes,
    src: &[TokenId],
    state: &StateNodes,
) -> Result<TurnContext> {
    if src.is_empty() {
        return Err(AwiError::Domain("empty source utterance".into()));
    }
    check_ids(src, tape.value(params.embedding).rows())?;
    let hidden = params.hidden;
    let mut enc = initial_stack_state(tape, params.encoder.len(), hidden, state.prev_dec);
    let mut enc_h = Vec::with_capacity(src.len());
    let mut ctx = Vec::with_capacity(src.len());
    for &id in src {
        let x = tape.lookup(params.embedding, id)?;
        enc = cells::stack_step(tape, &params.encoder, x, &enc)?;
        enc_h.push(enc.last().expect("non-empty stack").h);
        ctx.push(x);
    }
    let ctx_matrix = tape.stack_rows(&ctx)?;
    let ctx_proj = tape.matmul_t(ctx_matrix, params.w_ae)?;
    Ok(TurnContext {
        source: src.to_vec(),
        fixed: *enc_h.last().expect("non-empty source"),
        enc_h,
        ctx,
        ctx_matrix,
        ctx_proj,
        enc_final: enc,
    })
}

/// One step of the intention cell on `[fixed ; prev_dec_h]`.
pub fn intention_step(
    tape: &mut Tape,
    params: &ParamNodes,
    fixed: NodeId,
    state: &StateNodes,
) -> Result<CellState> {
    let x = tape.concat(fixed, state.prev_dec.h)?;
    cells::lstm_step(tape, &params.intention, x, state.intention, None)
}

/// Additive attention over the turn's source contexts. Returns the `1 x T`
/// alignment weights and the `1 x D` weighted context.
pub fn attention(
    tape: &mut Tape,
    params: &ParamNodes,
    dec_h_prev: NodeId,
    turn: &TurnContext,
) -> Result<(NodeId, NodeId)> {
    let query = tape.matmul_t(dec_h_prev, params.w_ah)?;
    let hidden = tape.add_row(turn.ctx_proj, query)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul_t(params.v, hidden)?;
    let alpha = tape.softmax(scores)?;
    let context = tape.matmul(alpha, turn.ctx_matrix)?;
    Ok((alpha, context))
}

#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// `1 x V` log-probabilities of the next token.
    pub log_probs: NodeId,
    pub state: LstmState,
    /// `1 x T` alignment weights used for this step.
    pub alpha: NodeId,
}

pub fn decode_step(
    tape: &mut Tape,
    params: &ParamNodes,
    y_prev: TokenId,
    dec_state: &[CellState],
    turn: &TurnContext,
) -> Result<DecodeStep> {
    let top = dec_state
        .last()
        .ok_or_else(|| AwiError::Config("empty decoder state".into()))?;
    let (alpha, context) = attention(tape, params, top.h, turn)?;
    let y_emb = tape.lookup(params.embedding, y_prev)?;
    let input = tape.concat(y_emb, context)?;
    let state = cells::stack_step(tape, &params.decoder, input, dec_state)?;
    let h = state.last().expect("non-empty stack").h;
    let from_h = tape.matmul_t(h, params.w_oh)?;
    let from_c = tape.matmul_t(context, params.w_oc)?;
    let from_y = tape.matmul_t(y_emb, params.w_oy)?;
    let logits = tape.add(from_h, from_c)?;
    let logits = tape.add(logits, from_y)?;
    let logits = tape.add(logits, params.b_o)?;
    let log_probs = tape.log_softmax(logits)?;
    Ok(DecodeStep {
        log_probs,
        state,
        alpha,
    })
}

/// Everything a turn produces before decoding starts.
#[derive(Clone, Debug)]
pub struct TurnStart {
    pub context: TurnContext,
    pub intention: CellState,
    pub decoder_init: LstmState,
}

/// Encode, step the intention cell, and seed the decoder from it.
pub fn begin_turn(
    tape: &mut Tape,
    params: &ParamNodes,
    state: &StateNodes,
    src: &[TokenId],
) -> Result<TurnStart> {
    let context = encode_turn(tape, params, src, state)?;
    let intention = intention_step(tape, params, context.fixed, state)?;
    let decoder_init = initial_stack_state(tape, params.decoder.len(), params.hidden, intention);
    Ok(TurnStart {
        context,
        intention,
        decoder_init,
    })
}

/// State handed to the next turn once decoding has finished.
pub fn end_turn(state: &StateNodes, intention: CellState, dec_final: &[CellState]) -> StateNodes {
    StateNodes {
        intention,
        prev_dec: *dec_final.last().expect("non-empty decoder state"),
        turn_index: state.turn_index + 1,
    }
}

#[derive(Clone, Debug)]
pub struct TurnOutput {
    /// `1 x 1` negative log-likelihood of the target.
    pub nll: NodeId,
    pub next_state: StateNodes,
    pub token_count: usize,
    /// One `1 x T` alignment row per target token.
    pub alphas: Vec<NodeId>,
}

/// Teacher-forced negative log-likelihood of `tgt` given `src`, starting
/// from `<s>`. `tgt` must end with `</s>`.
pub fn turn_nll(
    tape: &mut Tape,
    params: &ParamNodes,
    state: &StateNodes,
    src: &[TokenId],
    tgt: &[TokenId],
) -> Result<TurnOutput> {
    if tgt.last() != Some(&EOS) {
        return Err(AwiError::Corpus(
            "target sequence must end with </s>".into(),
        ));
    }
    check_ids(tgt, tape.value(params.embedding).rows())?;
    let start = begin_turn(tape, params, state, src)?;
    let mut dec = start.decoder_init;
    let mut y_prev = BOS;
    let mut total: Option<NodeId> = None;
    let mut alphas = Vec::with_capacity(tgt.len());
    for &y in tgt {
        let step = decode_step(tape, params, y_prev, &dec, &start.context)?;
        let lp = tape.pick(step.log_probs, y)?;
        total = Some(match total {
            Some(t) => tape.add(t, lp)?,
            None => lp,
        });
        alphas.push(step.alpha);
        dec = step.state;
        y_prev = y;
    }
    let nll = tape.scale(total.expect("non-empty target"), -1.0);
    Ok(TurnOutput {
        nll,
        next_state: end_turn(state, start.intention, &dec),
        token_count: tgt.len(),
        alphas,
    })
}

/// How state is handed from one turn to the next.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateCarry {
    /// Thread intention and decoder state across turns.
    #[default]
    Full,
    /// Ablation: every turn starts from the zero state.
    Reset,
}

impl StateCarry {
    pub fn next(self, tape: &mut Tape, hidden: usize, out: &StateNodes) -> StateNodes {
        match self {
            StateCarry::Full => *out,
            StateCarry::Reset => StateNodes::zeros(tape, hidden, out.turn_index),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DialogueOutput {
    /// `1 x 1` total negative log-likelihood.
    pub nll: NodeId,
    pub token_count: usize,
    pub turns: Vec<TurnOutput>,
}

/// Sums [`turn_nll`] over the turns, starting from the zero state.
pub fn dialogue_nll(
    tape: &mut Tape,
    params: &ParamNodes,
    dialogue: &EncodedDialogue,
    carry: StateCarry,
) -> Result<DialogueOutput> {
    if dialogue.turns.is_empty() {
        return Err(AwiError::Domain(format!(
            "dialogue {:?} has no turns",
            dialogue.id
        )));
    }
    let mut state = StateNodes::zeros(tape, params.hidden, 0);
    let mut total: Option<NodeId> = None;
    let mut token_count = 0;
    let mut turns = Vec::with_capacity(dialogue.turns.len());
    for EncodedTurn { src, tgt } in &dialogue.turns {
        let out = turn_nll(tape, params, &state, src, tgt)?;
        total = Some(match total {
            Some(t) => tape.add(t, out.nll)?,
            None => out.nll,
        });
        token_count += out.token_count;
        state = carry.next(tape, params.hidden, &out.next_state);
        turns.push(out);
    }
    Ok(DialogueOutput {
        nll: total.expect("non-empty dialogue"),
        token_count,
        turns,
    })
}

/// Forward-only dialogue likelihood on a private tape: `(nll, tokens)`.
pub fn dialogue_nll_value(
    params: &AwiParams,
    dialogue: &EncodedDialogue,
    carry: StateCarry,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape);
    let out = dialogue_nll(&mut tape, &nodes, dialogue, carry)?;
    Ok((tape.value(out.nll).data()[0], out.token_count))
}
