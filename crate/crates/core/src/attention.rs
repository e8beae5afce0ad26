//! Memory-conditioned soft attention over image regions and words.
//!
//! At step `k` both mechanisms score every item with a two-layer gated
//! network, `h_n = tanh(W x_n + b) ⊙ tanh(W_m m + b_m)`, normalise the scores
//! `W_h h_n + b_h` with a softmax, and average the items with those weights.
//! The visual context is additionally projected by `P` and squashed with
//! `tanh` so it lands in the same space as the textual context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DanError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::EncodedText;

/// Region features `[N, D_v]` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    features: Tensor,
}

impl RegionSet {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(DanError::Shape {
                op: "RegionSet",
                left: features.shape().to_vec(),
                right: vec![],
            });
        }
        if features.shape()[0] == 0 {
            return Err(DanError::EmptyInput("RegionSet"));
        }
        Ok(RegionSet { features })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        RegionSet::new(Tensor::from_rows(rows)?)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn num_regions(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| self.features.row(i).to_vec()).collect();
        RegionSet::from_rows(&rows)
    }

    /// Records the features on `tape` as a constant.
    pub fn load(&self, tape: &mut Tape) -> Var {
        tape.constant(self.features.clone())
    }
}

/// Weights on the simplex plus the context vector they produce at one step.
#[derive(Clone, Copy, Debug)]
pub struct AttentionResult {
    pub weights: Var,
    pub context: Var,
    pub step: usize,
}

/// Inverted dropout, active only during training.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    pub fn seeded(rate: f64, seed: u64) -> Self {
        Dropout::new(rate, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).shape().to_vec();
        let len = tape.value(x).len();
        let mask = (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul_elem(x, mask)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VisualStepVars {
    pub w_v: Var,
    pub b_v: Var,
    pub w_m: Var,
    pub b_m: Var,
    pub w_h: Var,
    pub b_h: Var,
    pub p: Var,
    pub b_p: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TextualStepVars {
    pub w_u: Var,
    pub b_u: Var,
    pub w_m: Var,
    pub b_m: Var,
    pub w_h: Var,
    pub b_h: Var,
}

/// Visual attention weights for every step plus the step-0 projection.
#[derive(Clone, Debug)]
pub struct VisualVars {
    pub p0: Var,
    pub b_p0: Var,
    /// Index `k - 1` holds step `k`.
    pub steps: Vec<VisualStepVars>,
}

#[derive(Clone, Debug)]
pub struct TextualVars {
    pub steps: Vec<TextualStepVars>,
}

impl VisualVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, prefix: &str, steps: usize) -> Result<Self> {
        let base = format!("{prefix}/visual");
        let p0 = tape.param(store, &format!("{base}/p0"))?;
        let b_p0 = tape.param(store, &format!("{base}/b_p0"))?;
        let steps = (1..=steps)
            .map(|k| {
                let s = format!("{base}/step{k}");
                let mut get = |n: &str| tape.param(store, &format!("{s}/{n}"));
                Ok(VisualStepVars {
                    w_v: get("w_v")?,
                    b_v: get("b_v")?,
                    w_m: get("w_m")?,
                    b_m: get("b_m")?,
                    w_h: get("w_h")?,
                    b_h: get("b_h")?,
                    p: get("p")?,
                    b_p: get("b_p")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(VisualVars { p0, b_p0, steps })
    }
}

impl TextualVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, prefix: &str, steps: usize) -> Result<Self> {
        let steps = (1..=steps)
            .map(|k| {
                let s = format!("{prefix}/textual/step{k}");
                let mut get = |n: &str| tape.param(store, &format!("{s}/{n}"));
                Ok(TextualStepVars {
                    w_u: get("w_u")?,
                    b_u: get("b_u")?,
                    w_m: get("w_m")?,
                    b_m: get("b_m")?,
                    w_h: get("w_h")?,
                    b_h: get("b_h")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TextualVars { steps })
    }
}

/// Adds the step-0 projection and `steps` distinct sets of visual attention
/// weights under `{prefix}/visual/`.
pub fn init_visual_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    steps: usize,
    hidden: usize,
    region_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let base = format!("{prefix}/visual");
    store.insert_glorot(format!("{base}/p0"), hidden, region_dim, rng)?;
    store.insert_zeros(format!("{base}/b_p0"), &[hidden])?;
    for k in 1..=steps {
        let s = format!("{base}/step{k}");
        store.insert_glorot(format!("{s}/w_v"), hidden, region_dim, rng)?;
        store.insert_zeros(format!("{s}/b_v"), &[hidden])?;
        store.insert_glorot(format!("{s}/w_m"), hidden, hidden, rng)?;
        store.insert_zeros(format!("{s}/b_m"), &[hidden])?;
        store.insert_glorot(format!("{s}/w_h"), 1, hidden, rng)?;
        store.insert_zeros(format!("{s}/b_h"), &[1])?;
        store.insert_glorot(format!("{s}/p"), hidden, region_dim, rng)?;
        store.insert_zeros(format!("{s}/b_p"), &[hidden])?;
    }
    Ok(())
}

pub fn init_textual_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    steps: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    for k in 1..=steps {
        let s = format!("{prefix}/textual/step{k}");
        store.insert_glorot(format!("{s}/w_u"), hidden, hidden, rng)?;
        store.insert_zeros(format!("{s}/b_u"), &[hidden])?;
        store.insert_glorot(format!("{s}/w_m"), hidden, hidden, rng)?;
        store.insert_zeros(format!("{s}/b_m"), &[hidden])?;
        store.insert_glorot(format!("{s}/w_h"), 1, hidden, rng)?;
        store.insert_zeros(format!("{s}/b_h"), &[1])?;
    }
    Ok(())
}

struct Scorer {
    w_x: Var,
    b_x: Var,
    w_m: Var,
    b_m: Var,
    w_h: Var,
    b_h: Var,
}

/// Gated hidden layer followed by the scalar scoring layer; returns `[n]` scores.
fn gated_scores(
    tape: &mut Tape,
    items: Var,
    memory: Var,
    s: &Scorer,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let n = tape.value(items).rows();
    let item_branch = tape.affine_rows(items, s.w_x, Some(s.b_x))?;
    let item_branch = tape.tanh_elem(item_branch);
    let memory_branch = tape.affine(memory, s.w_m, Some(s.b_m))?;
    let memory_branch = tape.tanh_elem(memory_branch);
    let mut hidden = tape.mul_row_broadcast(item_branch, memory_branch)?;
    if let Some(dropout) = dropout {
        hidden = dropout.apply(tape, hidden)?;
    }
    let scores = tape.affine_rows(hidden, s.w_h, Some(s.b_h))?;
    tape.reshape(scores, vec![n])
}

/// Visual attention at one step, conditioned on `memory`.
pub fn visual_attend(
    tape: &mut Tape,
    regions: Var,
    memory: Var,
    params: &VisualStepVars,
    step: usize,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionResult> {
    let rv = tape.value(regions);
    if rv.rank() != 2 || rv.shape()[0] == 0 {
        return Err(DanError::EmptyInput("visual_attend"));
    }
    let n = rv.shape()[0];
    let scorer = Scorer {
        w_x: params.w_v,
        b_x: params.b_v,
        w_m: params.w_m,
        b_m: params.b_m,
        w_h: params.w_h,
        b_h: params.b_h,
    };
    let scores = gated_scores(tape, regions, memory, &scorer, dropout)?;
    let weights = tape.softmax_masked(scores, &vec![true; n])?;
    let pooled = tape.weighted_sum(weights, regions)?;
    let projected = tape.affine(pooled, params.p, Some(params.b_p))?;
    let context = tape.tanh_elem(projected);
    Ok(AttentionResult {
        weights,
        context,
        step,
    })
}

/// Textual attention at one step. Padded positions receive weight exactly 0
/// and the context is the plain weighted average of the valid `u_t`.
pub fn textual_attend(
    tape: &mut Tape,
    text: &EncodedText,
    memory: Var,
    params: &TextualStepVars,
    step: usize,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionResult> {
    if text.valid_len == 0 {
        return Err(DanError::EmptyInput("textual_attend"));
    }
    let mask = text.mask(tape);
    let scorer = Scorer {
        w_x: params.w_u,
        b_x: params.b_u,
        w_m: params.w_m,
        b_m: params.b_m,
        w_h: params.w_h,
        b_h: params.b_h,
    };
    let scores = gated_scores(tape, text.rows, memory, &scorer, dropout)?;
    let weights = tape.softmax_masked(scores, &mask)?;
    let context = tape.weighted_sum(weights, text.rows)?;
    Ok(AttentionResult {
        weights,
        context,
        step,
    })
}

/// `tanh(P0 · mean(v_n) + b)`.
pub fn global_visual_context(tape: &mut Tape, regions: Var, p0: Var, b_p0: Var) -> Result<Var> {
    let n = tape.value(regions).rows();
    let mean = tape.mean_rows(regions, n)?;
    let projected = tape.affine(mean, p0, Some(b_p0))?;
    Ok(tape.tanh_elem(projected))
}

/// Mean of the valid rows of the encoded text.
pub fn global_textual_context(tape: &mut Tape, text: &EncodedText) -> Result<Var> {
    tape.mean_rows(text.rows, text.valid_len)
}
