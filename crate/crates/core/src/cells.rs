//! LSTM and depth-gated LSTM cells.
//!
//! Packed gate order along the `4H` dimension is input, forget, output,
//! candidate (`i, f, o, g`). Checkpoints depend on it.
//!
//! A depth-gated layer additionally carries the lower layer's memory cell
//! (at the same time step) into its own cell:
//!
//! ```text
//! d = σ(b_d + W_dx·x + w_dc ⊙ c_prev + w_dl ⊙ c_below)
//! c = f ⊙ c_prev + i ⊙ g + d ⊙ c_below
//! ```
//!
//! Layers without depth-gate parameters (the bottom layer, or every layer
//! when the plain-LSTM switch is set) are standard LSTMs.

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{AwiError, Result};
use crate::tensor::Tensor;

pub const INIT_SCALE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthGateParams {
    /// `H x I`
    pub w_dx: Tensor,
    /// `1 x H`, peephole onto the layer's own previous cell.
    pub w_dc: Tensor,
    /// `1 x H`, peephole onto the lower layer's current cell.
    pub w_dl: Tensor,
    /// `1 x H`
    pub b_d: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    /// `4H x I`
    pub w_x: Tensor,
    /// `4H x H`
    pub w_h: Tensor,
    /// `1 x 4H`
    pub b: Tensor,
    pub depth: Option<DepthGateParams>,
}

impl LstmLayerParams {
    pub fn zeros(input: usize, hidden: usize, depth_gated: bool) -> Self {
        LstmLayerParams {
            w_x: Tensor::zeros(4 * hidden, input),
            w_h: Tensor::zeros(4 * hidden, hidden),
            b: Tensor::zeros(1, 4 * hidden),
            depth: depth_gated.then(|| DepthGateParams {
                w_dx: Tensor::zeros(hidden, input),
                w_dc: Tensor::zeros(1, hidden),
                w_dl: Tensor::zeros(1, hidden),
                b_d: Tensor::zeros(1, hidden),
            }),
        }
    }

    /// Uniform weights in `[-scale, scale]`, forget-gate bias set to 1.
    pub fn random<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        depth_gated: bool,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut b = Tensor::uniform(1, 4 * hidden, scale, rng);
        b.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
        let w_x = Tensor::uniform(4 * hidden, input, scale, rng);
        let w_h = Tensor::uniform(4 * hidden, hidden, scale, rng);
        let depth = depth_gated.then(|| DepthGateParams {
            w_dx: Tensor::uniform(hidden, input, scale, rng),
            w_dc: Tensor::uniform(1, hidden, scale, rng),
            w_dl: Tensor::uniform(1, hidden, scale, rng),
            b_d: Tensor::uniform(1, hidden, scale, rng),
        });
        LstmLayerParams { w_x, w_h, b, depth }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (format!("{prefix}.w_x"), &self.w_x),
            (format!("{prefix}.w_h"), &self.w_h),
            (format!("{prefix}.b"), &self.b),
        ];
        if let Some(d) = &self.depth {
            out.extend([
                (format!("{prefix}.w_dx"), &d.w_dx),
                (format!("{prefix}.w_dc"), &d.w_dc),
                (format!("{prefix}.w_dl"), &d.w_dl),
                (format!("{prefix}.b_d"), &d.b_d),
            ]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_x, &mut self.w_h, &mut self.b];
        if let Some(d) = &mut self.depth {
            out.extend([&mut d.w_dx, &mut d.w_dc, &mut d.w_dl, &mut d.b_d]);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmLayerNodes {
        LstmLayerNodes {
            w_x: tape.leaf(self.w_x.clone()),
            w_h: tape.leaf(self.w_h.clone()),
            b: tape.leaf(self.b.clone()),
            depth: self.depth.as_ref().map(|d| DepthGateNodes {
                w_dx: tape.leaf(d.w_dx.clone()),
                w_dc: tape.leaf(d.w_dc.clone()),
                w_dl: tape.leaf(d.w_dl.clone()),
                b_d: tape.leaf(d.b_d.clone()),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DepthGateNodes {
    pub w_dx: NodeId,
    pub w_dc: NodeId,
    pub w_dl: NodeId,
    pub b_d: NodeId,
}

/// An [`LstmLayerParams`] copied onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayerNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
    pub depth: Option<DepthGateNodes>,
}

impl LstmLayerNodes {
    /// Same order as [`LstmLayerParams::named_tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.w_x, self.w_h, self.b];
        if let Some(d) = &self.depth {
            out.extend([d.w_dx, d.w_dc, d.w_dl, d.b_d]);
        }
        out
    }
}

/// Hidden activity and memory cell of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: NodeId,
    pub c: NodeId,
}

impl CellState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        CellState {
            h: tape.leaf(Tensor::zeros(1, hidden)),
            c: tape.leaf(Tensor::zeros(1, hidden)),
        }
    }
}

/// One [`CellState`] per layer, bottom first.
pub type LstmState = Vec<CellState>;

/// Gate activations of one step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub input: NodeId,
    pub forget: NodeId,
    pub output: NodeId,
    pub candidate: NodeId,
    pub depth: Option<NodeId>,
}

pub fn lstm_step(
    tape: &mut Tape,
    params: &LstmLayerNodes,
    x: NodeId,
    prev: CellState,
    c_below: Option<NodeId>,
) -> Result<CellState> {
    lstm_step_with_gates(tape, params, x, prev, c_below).map(|(s, _)| s)
}

pub fn lstm_step_with_gates(
    tape: &mut Tape,
    params: &LstmLayerNodes,
    x: NodeId,
    prev: CellState,
    c_below: Option<NodeId>,
) -> Result<(CellState, Gates)> {
    let hidden = tape.value(params.w_h).cols();
    if tape.value(params.w_h).rows() != 4 * hidden {
        return Err(AwiError::shapes(
            "recurrent weights must be 4H x H",
            tape.value(params.w_h).shape(),
            (4 * hidden, hidden),
        ));
    }
    for (what, id) in [("previous h", prev.h), ("previous c", prev.c)] {
        if tape.value(id).shape() != (1, hidden) {
            return Err(AwiError::shapes(what, tape.value(id).shape(), (1, hidden)));
        }
    }

    let from_x = tape.matmul_t(x, params.w_x)?;
    let from_h = tape.matmul_t(prev.h, params.w_h)?;
    let pre = tape.add(from_x, from_h)?;
    let pre = tape.add(pre, params.b)?;

    let slice = |tape: &mut Tape, k: usize| tape.slice_cols(pre, k * hidden, hidden);
    let i_pre = slice(tape, 0)?;
    let f_pre = slice(tape, 1)?;
    let o_pre = slice(tape, 2)?;
    let g_pre = slice(tape, 3)?;
    let input = tape.sigmoid(i_pre);
    let forget = tape.sigmoid(f_pre);
    let output = tape.sigmoid(o_pre);
    let candidate = tape.tanh(g_pre);

    let kept = tape.mul(forget, prev.c)?;
    let written = tape.mul(input, candidate)?;
    let mut c = tape.add(kept, written)?;

    let depth = match (params.depth, c_below) {
        (Some(dp), Some(below)) => {
            if tape.value(below).shape() != (1, hidden) {
                return Err(AwiError::shapes(
                    "lower cell",
                    tape.value(below).shape(),
                    (1, hidden),
                ));
            }
            let d_x = tape.matmul_t(x, dp.w_dx)?;
            let d_c = tape.mul(dp.w_dc, prev.c)?;
            let d_l = tape.mul(dp.w_dl, below)?;
            let d_pre = tape.add(dp.b_d, d_x)?;
            let d_pre = tape.add(d_pre, d_c)?;
            let d_pre = tape.add(d_pre, d_l)?;
            let d = tape.sigmoid(d_pre);
            let carried = tape.mul(d, below)?;
            c = tape.add(c, carried)?;
            Some(d)
        }
        (None, None) => None,
        (Some(_), None) => {
            return Err(AwiError::Config(
                "depth-gated layer stepped without the lower layer's cell".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(AwiError::Config(
                "lower layer's cell given to a layer without depth gate".into(),
            ))
        }
    };

    let squashed = tape.tanh(c);
    let h = tape.mul(output, squashed)?;
    Ok((
        CellState { h, c },
        Gates {
            input,
            forget,
            output,
            candidate,
            depth,
        },
    ))
}

/// Steps every layer of a stack once. Layer 0 reads `x`; layer `l > 0`
/// reads the new `h` of layer `l − 1`, and its depth gate (if any) reads the
/// new `c` of layer `l − 1`.
pub fn stack_step(
    tape: &mut Tape,
    stack: &[LstmLayerNodes],
    x: NodeId,
    prev: &[CellState],
) -> Result<LstmState> {
    if stack.is_empty() {
        return Err(AwiError::Config("empty LSTM stack".into()));
    }
    if stack.len() != prev.len() {
        return Err(AwiError::Config(format!(
            "stack has {} layers but state has {}",
            stack.len(),
            prev.len()
        )));
    }
    let mut out: LstmState = Vec::with_capacity(stack.len());
    let mut input = x;
    for (l, (layer, prev_l)) in stack.iter().zip(prev).enumerate() {
        let below = if l > 0 && layer.depth.is_some() {
            Some(out[l - 1].c)
        } else {
            None
        };
        let state = lstm_step(tape, layer, input, *prev_l, below)?;
        input = state.h;
        out.push(state);
    }
    Ok(out)
}
