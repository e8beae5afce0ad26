//! Word embedding and bidirectional LSTM encoding of token sequences.
//!
//! Each token becomes `u_t = h_t(fwd) + h_t(bwd)`. Sequences are right-padded
//! with id [`PAD_ID`]; the backward direction starts at the last valid token,
//! and padded rows of the output are exact zeros.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DanError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;

const GATES: [&str; 4] = ["input", "forget", "output", "cell"];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    valid_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, valid_len: usize) -> Result<Self> {
        if valid_len > ids.len() {
            return Err(DanError::OutOfRange {
                what: "valid_len",
                index: valid_len,
                limit: ids.len(),
            });
        }
        Ok(TokenSequence { ids, valid_len })
    }

    /// A sequence with no padding.
    pub fn unpadded(ids: Vec<usize>) -> Self {
        let valid_len = ids.len();
        TokenSequence { ids, valid_len }
    }

    /// Right-pads with [`PAD_ID`] up to `len` tokens.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut ids = self.ids.clone();
        if ids.len() < len {
            ids.resize(len, PAD_ID);
        }
        TokenSequence {
            ids,
            valid_len: self.valid_len,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[..self.valid_len]
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Reverses the valid prefix, keeping the padding in place.
    pub fn reversed(&self) -> Self {
        let mut ids = self.ids.clone();
        ids[..self.valid_len].reverse();
        TokenSequence {
            ids,
            valid_len: self.valid_len,
        }
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id >= vocab_size) {
            Some(&id) => Err(DanError::OutOfRange {
                what: "token id",
                index: id,
                limit: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

/// Per-token features `u_t`, shape `[T, d]`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedText {
    pub rows: Var,
    pub valid_len: usize,
}

impl EncodedText {
    pub fn mask(&self, tape: &Tape) -> Vec<bool> {
        let t = tape.value(self.rows).rows();
        (0..t).map(|i| i < self.valid_len).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct GateVars {
    w_x: Var,
    w_h: Var,
    b: Var,
}

/// One direction's LSTM weights, loaded on a tape. Gates are ordered
/// input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    gates: [GateVars; 4],
}

impl LstmVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut gates = Vec::with_capacity(4);
        for gate in GATES {
            gates.push(GateVars {
                w_x: tape.param(store, &format!("{prefix}/{gate}/w_x"))?,
                w_h: tape.param(store, &format!("{prefix}/{gate}/w_h"))?,
                b: tape.param(store, &format!("{prefix}/{gate}/b"))?,
            });
        }
        Ok(LstmVars {
            gates: [gates[0], gates[1], gates[2], gates[3]],
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    pub embed: Var,
    pub fwd: LstmVars,
    pub bwd: LstmVars,
}

impl TextVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(TextVars {
            embed: tape.param(store, &format!("{prefix}/text/embed"))?,
            fwd: LstmVars::load(tape, store, &format!("{prefix}/text/lstm_fwd"))?,
            bwd: LstmVars::load(tape, store, &format!("{prefix}/text/lstm_bwd"))?,
        })
    }

    /// Shares the forward direction's weights with the backward direction.
    pub fn tied(self) -> Self {
        TextVars {
            bwd: self.fwd,
            ..self
        }
    }
}

/// Adds the embedding matrix `[d, vocab]` and both LSTM directions under
/// `{prefix}/text/`. Forget-gate biases start at 1.
pub fn init_text_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    vocab_size: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    let embed: Vec<f64> = (0..hidden * vocab_size)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    store.insert(format!("{prefix}/text/embed"), Tensor::matrix(hidden, vocab_size, embed)?)?;
    for dir in ["lstm_fwd", "lstm_bwd"] {
        for gate in GATES {
            let base = format!("{prefix}/text/{dir}/{gate}");
            store.insert_glorot(format!("{base}/w_x"), hidden, hidden, rng)?;
            store.insert_glorot(format!("{base}/w_h"), hidden, hidden, rng)?;
            let bias = if gate == "forget" { 1.0 } else { 0.0 };
            store.insert(format!("{base}/b"), Tensor::filled(&[hidden], bias))?;
        }
    }
    Ok(())
}

/// Looks up `x_t = M w_t` for every id in the sequence, giving `[T, d]`.
pub fn embed_tokens(tape: &mut Tape, seq: &TokenSequence, embed: Var) -> Result<Var> {
    tape.gather_columns(embed, seq.ids())
}

/// One LSTM update; returns `(h_t, c_t)`.
pub fn recurrent_step(
    tape: &mut Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    params: &LstmVars,
) -> Result<(Var, Var)> {
    let mut pre = [x; 4];
    for (slot, gate) in pre.iter_mut().zip(&params.gates) {
        let from_x = tape.affine(x, gate.w_x, Some(gate.b))?;
        let from_h = tape.affine(h_prev, gate.w_h, None)?;
        *slot = tape.add(from_x, from_h)?;
    }
    let input = tape.sigmoid_elem(pre[0]);
    let forget = tape.sigmoid_elem(pre[1]);
    let output = tape.sigmoid_elem(pre[2]);
    let candidate = tape.tanh_elem(pre[3]);

    let kept = tape.mul_elem(forget, c_prev)?;
    let written = tape.mul_elem(input, candidate)?;
    let c = tape.add(kept, written)?;
    let squashed = tape.tanh_elem(c);
    let h = tape.mul_elem(output, squashed)?;
    Ok((h, c))
}

/// Runs both directions over the valid tokens and sums their hidden states.
pub fn encode_bidirectional(
    tape: &mut Tape,
    seq: &TokenSequence,
    vars: &TextVars,
) -> Result<EncodedText> {
    let valid = seq.valid_len();
    if valid == 0 {
        return Err(DanError::EmptyInput("encode_bidirectional"));
    }
    let embedded = tape.gather_columns(vars.embed, seq.valid_ids())?;
    let d = tape.value(embedded).cols();
    let xs: Vec<Var> = (0..valid)
        .map(|t| tape.row(embedded, t))
        .collect::<Result<_>>()?;

    let zero = tape.constant(Tensor::zeros(&[d]));
    let mut fwd = Vec::with_capacity(valid);
    let (mut h, mut c) = (zero, zero);
    for &x in &xs {
        (h, c) = recurrent_step(tape, x, h, c, &vars.fwd)?;
        fwd.push(h);
    }
    let mut bwd = vec![zero; valid];
    let (mut h, mut c) = (zero, zero);
    for t in (0..valid).rev() {
        (h, c) = recurrent_step(tape, xs[t], h, c, &vars.bwd)?;
        bwd[t] = h;
    }

    let mut rows = Vec::with_capacity(seq.len());
    for t in 0..valid {
        rows.push(tape.add(fwd[t], bwd[t])?);
    }
    if seq.len() > valid {
        // Padded rows hang off a constant, so nothing flows back through them.
        let pad = tape.constant(Tensor::zeros(&[d]));
        rows.resize(seq.len(), pad);
    }
    Ok(EncodedText {
        rows: tape.stack_rows(&rows)?,
        valid_len: valid,
    })
}
