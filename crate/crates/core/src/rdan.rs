//! Reasoning network: visual and textual attention steered by one joint
//! memory, followed by a softmax answer classifier.
//!
//! ```text
//! m0 = v0 ⊙ u0
//! m_k = m_{k-1} + v_k ⊙ u_k      (v_k, u_k both attend with m_{k-1})
//! p_ans = softmax(W_ans m_K + b_ans)
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    global_textual_context, global_visual_context, init_textual_params, init_visual_params,
    textual_attend, visual_attend, AttentionResult, Dropout, RegionSet, TextualStepVars,
    TextualVars, VisualStepVars, VisualVars,
};
use crate::error::{DanError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{encode_bidirectional, init_text_params, EncodedText, TextVars, TokenSequence};
use crate::trace::{AttentionTrace, StepWeights};

pub const PREFIX: &str = "rdan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDanConfig {
    /// Number of dual-attention steps `K`.
    pub steps: usize,
    pub hidden: usize,
    pub region_dim: usize,
    pub num_answers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl RDanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DanError::Config("r-DAN needs at least one attention step".into()));
        }
        let dims = [
            ("hidden", self.hidden),
            ("region_dim", self.region_dim),
            ("num_answers", self.num_answers),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(DanError::Config(format!("{name} must be at least 1")));
        }
        Ok(())
    }
}

/// An image/question pair with its gold answer.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaExample {
    pub regions: RegionSet,
    pub question: TokenSequence,
    pub answer: usize,
    /// Annotator counts per answer id, when available.
    pub label_counts: Option<BTreeMap<usize, u32>>,
}

impl VqaExample {
    /// Counts used by the accuracy metric. Without annotator data the gold
    /// answer counts as three agreeing labels, which reduces to exact match.
    pub fn effective_counts(&self) -> BTreeMap<usize, u32> {
        match &self.label_counts {
            Some(c) => c.clone(),
            None => BTreeMap::from([(self.answer, 3)]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct JointMemory {
    pub m: Var,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct RDanVars {
    pub text: TextVars,
    pub visual: VisualVars,
    pub textual: TextualVars,
    pub w_ans: Var,
    pub b_ans: Var,
}

impl RDanVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, config: &RDanConfig) -> Result<Self> {
        Ok(RDanVars {
            text: TextVars::load(tape, store, PREFIX)?,
            visual: VisualVars::load(tape, store, PREFIX, config.steps)?,
            textual: TextualVars::load(tape, store, PREFIX, config.steps)?,
            w_ans: tape.param(store, &format!("{PREFIX}/answer/w"))?,
            b_ans: tape.param(store, &format!("{PREFIX}/answer/b"))?,
        })
    }
}

/// The global contexts and the memory built from them.
#[derive(Clone, Copy, Debug)]
pub struct InitialMemory {
    pub memory: JointMemory,
    pub v0: Var,
    pub u0: Var,
}

/// `m0 = v0 ⊙ u0` from the global visual and textual contexts.
pub fn init_joint_memory(
    tape: &mut Tape,
    regions: Var,
    text: &EncodedText,
    visual: &VisualVars,
) -> Result<InitialMemory> {
    let v0 = global_visual_context(tape, regions, visual.p0, visual.b_p0)?;
    let u0 = global_textual_context(tape, text)?;
    let m = tape.mul_elem(v0, u0)?;
    Ok(InitialMemory {
        memory: JointMemory { m, step: 0 },
        v0,
        u0,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct RDanStep {
    pub memory: JointMemory,
    pub visual: AttentionResult,
    pub textual: AttentionResult,
}

/// One dual-attention step. Both attentions read the same `m_{k-1}`.
pub fn rdan_step(
    tape: &mut Tape,
    memory: &JointMemory,
    regions: Var,
    text: &EncodedText,
    visual: &VisualStepVars,
    textual: &TextualStepVars,
    mut dropout: Option<&mut Dropout>,
) -> Result<RDanStep> {
    let step = memory.step + 1;
    let v = visual_attend(tape, regions, memory.m, visual, step, dropout.as_deref_mut())?;
    let u = textual_attend(tape, text, memory.m, textual, step, dropout)?;
    let joint = tape.mul_elem(v.context, u.context)?;
    let m = tape.add(memory.m, joint)?;
    Ok(RDanStep {
        memory: JointMemory { m, step },
        visual: v,
        textual: u,
    })
}

#[derive(Clone, Debug)]
pub struct RDanForward {
    pub logits: Var,
    pub probs: Var,
    pub initial: InitialMemory,
    pub steps: Vec<RDanStep>,
}

impl RDanForward {
    pub fn final_memory(&self) -> Var {
        self.steps.last().map_or(self.initial.memory.m, |s| s.memory.m)
    }

    pub fn trace(&self, tape: &Tape) -> AttentionTrace {
        AttentionTrace {
            steps: self
                .steps
                .iter()
                .map(|s| StepWeights {
                    visual: tape.value(s.visual.weights).data().to_vec(),
                    textual: tape.value(s.textual.weights).data().to_vec(),
                })
                .collect(),
        }
    }
}

/// Full forward pass to the answer distribution.
pub fn rdan_forward(
    tape: &mut Tape,
    vars: &RDanVars,
    config: &RDanConfig,
    regions: &RegionSet,
    question: &TokenSequence,
    mut dropout: Option<&mut Dropout>,
) -> Result<RDanForward> {
    check_inputs(config.region_dim, config.vocab_size, regions, question)?;
    let regions = regions.load(tape);
    let text = encode_bidirectional(tape, question, &vars.text)?;
    let initial = init_joint_memory(tape, regions, &text, &vars.visual)?;
    let mut memory = initial.memory;
    let mut steps = Vec::with_capacity(config.steps);
    for (vs, ts) in vars.visual.steps.iter().zip(&vars.textual.steps) {
        let step = rdan_step(tape, &memory, regions, &text, vs, ts, dropout.as_deref_mut())?;
        memory = step.memory;
        steps.push(step);
    }
    let logits = tape.affine(memory.m, vars.w_ans, Some(vars.b_ans))?;
    let probs = tape.softmax_masked(logits, &vec![true; config.num_answers])?;
    Ok(RDanForward {
        logits,
        probs,
        initial,
        steps,
    })
}

pub(crate) fn check_inputs(
    region_dim: usize,
    vocab_size: usize,
    regions: &RegionSet,
    text: &TokenSequence,
) -> Result<()> {
    if regions.dim() != region_dim {
        return Err(DanError::Shape {
            op: "region features",
            left: vec![region_dim],
            right: vec![regions.dim()],
        });
    }
    text.check_vocab(vocab_size)
}

/// `−log p[target]`, computed from the logits.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    tape.cross_entropy(logits, target)
}

/// `min(#annotators who gave the predicted answer / 3, 1)`.
pub fn vqa_accuracy(predicted: usize, label_counts: &BTreeMap<usize, u32>) -> f64 {
    let count = label_counts.get(&predicted).copied().unwrap_or(0);
    (f64::from(count) / 3.0).min(1.0)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn predict_answer(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Multiple-choice readout: the best answer among `candidates`, ties to the
/// lowest id.
pub fn predict_among(probs: &[f64], candidates: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &c in candidates {
        if c >= probs.len() {
            continue;
        }
        best = match best {
            Some(b) if probs[b] > probs[c] || (probs[b] == probs[c] && b < c) => Some(b),
            _ => Some(c),
        };
    }
    best
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub answer: usize,
    pub probs: Vec<f64>,
    pub trace: AttentionTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RDan {
    config: RDanConfig,
    params: ParamStore,
}

impl RDan {
    pub fn new(config: RDanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.hidden;
        init_text_params(&mut params, PREFIX, config.vocab_size, d, &mut rng)?;
        init_visual_params(&mut params, PREFIX, config.steps, d, config.region_dim, &mut rng)?;
        init_textual_params(&mut params, PREFIX, config.steps, d, &mut rng)?;
        params.insert_glorot(format!("{PREFIX}/answer/w"), config.num_answers, d, &mut rng)?;
        params.insert(format!("{PREFIX}/answer/b"), Tensor::zeros(&[config.num_answers]))?;
        Ok(RDan { config, params })
    }

    /// Rebuilds a model from stored parameters, checking that every expected
    /// parameter is present with the right shape.
    pub fn from_parts(config: RDanConfig, params: ParamStore) -> Result<Self> {
        let reference = RDan::new(config.clone(), 0)?;
        check_same_layout(&reference.params, &params)?;
        Ok(RDan { config, params })
    }

    pub fn config(&self) -> &RDanConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn load_vars(&self, tape: &mut Tape) -> Result<RDanVars> {
        RDanVars::load(tape, &self.params, &self.config)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &RDanVars,
        regions: &RegionSet,
        question: &TokenSequence,
        dropout: Option<&mut Dropout>,
    ) -> Result<RDanForward> {
        rdan_forward(tape, vars, &self.config, regions, question, dropout)
    }

    /// Cross-entropy of one example.
    pub fn example_loss(
        &self,
        tape: &mut Tape,
        vars: &RDanVars,
        example: &VqaExample,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let fwd = self.forward(tape, vars, &example.regions, &example.question, dropout)?;
        cross_entropy_loss(tape, fwd.logits, example.answer)
    }

    /// Mean cross-entropy over a batch, on one tape.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        examples: &[&VqaExample],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        if examples.is_empty() {
            return Err(DanError::EmptyInput("batch_loss"));
        }
        let vars = self.load_vars(tape)?;
        let losses = examples
            .iter()
            .map(|ex| self.example_loss(tape, &vars, ex, dropout.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        let total = tape.add_n(&losses)?;
        Ok(tape.scale(total, 1.0 / examples.len() as f64))
    }

    /// Inference with dropout disabled.
    pub fn predict(&self, regions: &RegionSet, question: &TokenSequence) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = self.load_vars(&mut tape)?;
        let fwd = self.forward(&mut tape, &vars, regions, question, None)?;
        let probs = tape.value(fwd.probs).data().to_vec();
        Ok(Prediction {
            answer: predict_answer(&probs),
            trace: fwd.trace(&tape),
            probs,
        })
    }
}

pub(crate) fn check_same_layout(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        let got = found
            .get(name)
            .ok_or_else(|| DanError::UnknownParam(name.to_string()))?;
        if got.shape() != t.shape() {
            return Err(DanError::Shape {
                op: "parameter layout",
                left: t.shape().to_vec(),
                right: got.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = found.names().find(|n| expected.get(n).is_none()) {
        return Err(DanError::UnknownParam(extra.to_string()));
    }
    Ok(())
}
