//! Matching network: separate visual and textual memories, a stepwise
//! inner-product similarity, and a bidirectional max-margin ranking loss.
//!
//! Because the visual attention only ever reads `m_v` and the textual one only
//! reads `m_u`, each modality can be run on its own. Concatenating the context
//! vectors `[v0; …; vK]` and `[u0; …; uK]` gives embeddings whose inner product
//! is exactly the network similarity `S = Σ_k v_k · u_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    global_textual_context, global_visual_context, init_textual_params, init_visual_params,
    textual_attend, visual_attend, AttentionResult, Dropout, RegionSet, TextualStepVars,
    TextualVars, VisualStepVars, VisualVars,
};
use crate::error::{DanError, Result};
use crate::params::ParamStore;
use crate::rdan::{check_inputs, check_same_layout};
use crate::tape::{Tape, Var};
use crate::text::{encode_bidirectional, init_text_params, EncodedText, TextVars, TokenSequence};
use crate::trace::{AttentionTrace, StepWeights};

pub const PREFIX: &str = "mdan";

/// Margin used by the original large-scale setup (512-d models).
pub const PAPER_MARGIN: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MDanConfig {
    /// Number of attention steps `K`; zero leaves only the global contexts.
    pub steps: usize,
    pub hidden: usize,
    pub region_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub margin: f64,
}

impl MDanConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden", self.hidden),
            ("region_dim", self.region_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(DanError::Config(format!("{name} must be at least 1")));
        }
        if !(self.margin >= 0.0) {
            return Err(DanError::Config(format!("margin {} must be nonnegative", self.margin)));
        }
        Ok(())
    }

    /// The 512-d margin rescaled to this model's width, `100 · d / 512`.
    pub fn scaled_margin(hidden: usize) -> f64 {
        PAPER_MARGIN * hidden as f64 / 512.0
    }

    pub fn embedding_dim(&self) -> usize {
        (self.steps + 1) * self.hidden
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// A point in the joint space: `K + 1` stacked context vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub modality: Modality,
    pub z: Vec<f64>,
}

impl JointEmbedding {
    pub fn dot(&self, other: &JointEmbedding) -> f64 {
        self.z.iter().zip(&other.z).map(|(a, b)| a * b).sum()
    }

    /// Block `k` (the step-`k` context vector).
    pub fn block(&self, k: usize, hidden: usize) -> &[f64] {
        &self.z[k * hidden..(k + 1) * hidden]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DualMemories {
    pub m_v: Var,
    pub m_u: Var,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct MDanVars {
    pub text: TextVars,
    pub visual: VisualVars,
    pub textual: TextualVars,
}

impl MDanVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, config: &MDanConfig) -> Result<Self> {
        Ok(MDanVars {
            text: TextVars::load(tape, store, PREFIX)?,
            visual: VisualVars::load(tape, store, PREFIX, config.steps)?,
            textual: TextualVars::load(tape, store, PREFIX, config.steps)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MDanStep {
    pub memories: DualMemories,
    pub similarity: Var,
    pub visual: AttentionResult,
    pub textual: AttentionResult,
}

/// One step: visual attention reads `m_v` only, textual attention reads `m_u`
/// only, memories are updated additively and `s_k = v_k · u_k` is returned.
pub fn mdan_step(
    tape: &mut Tape,
    mem: &DualMemories,
    regions: Var,
    text: &EncodedText,
    visual: &VisualStepVars,
    textual: &TextualStepVars,
    mut dropout: Option<&mut Dropout>,
) -> Result<MDanStep> {
    let step = mem.step + 1;
    let v = visual_attend(tape, regions, mem.m_v, visual, step, dropout.as_deref_mut())?;
    let u = textual_attend(tape, text, mem.m_u, textual, step, dropout)?;
    let m_v = tape.add(mem.m_v, v.context)?;
    let m_u = tape.add(mem.m_u, u.context)?;
    let similarity = tape.dot(v.context, u.context)?;
    Ok(MDanStep {
        memories: DualMemories { m_v, m_u, step },
        similarity,
        visual: v,
        textual: u,
    })
}

#[derive(Clone, Debug)]
pub struct Similarity {
    /// `S = Σ_{k=0..K} s_k`.
    pub total: Var,
    /// `s_0, …, s_K`.
    pub per_step: Vec<Var>,
    pub v0: Var,
    pub u0: Var,
    pub steps: Vec<MDanStep>,
}

impl Similarity {
    pub fn visual_contexts(&self) -> Vec<Var> {
        std::iter::once(self.v0)
            .chain(self.steps.iter().map(|s| s.visual.context))
            .collect()
    }

    pub fn textual_contexts(&self) -> Vec<Var> {
        std::iter::once(self.u0)
            .chain(self.steps.iter().map(|s| s.textual.context))
            .collect()
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

/// Runs the paired network and accumulates the stepwise similarities.
pub fn mdan_similarity(
    tape: &mut Tape,
    vars: &MDanVars,
    config: &MDanConfig,
    regions: &RegionSet,
    text: &TokenSequence,
    mut dropout: Option<&mut Dropout>,
) -> Result<Similarity> {
    check_inputs(config.region_dim, config.vocab_size, regions, text)?;
    let regions = regions.load(tape);
    let encoded = encode_bidirectional(tape, text, &vars.text)?;
    let v0 = global_visual_context(tape, regions, vars.visual.p0, vars.visual.b_p0)?;
    let u0 = global_textual_context(tape, &encoded)?;
    let mut per_step = vec![tape.dot(v0, u0)?];
    let mut mem = DualMemories {
        m_v: v0,
        m_u: u0,
        step: 0,
    };
    let mut steps = Vec::with_capacity(config.steps);
    for (vs, ts) in vars.visual.steps.iter().zip(&vars.textual.steps) {
        let step = mdan_step(tape, &mem, regions, &encoded, vs, ts, dropout.as_deref_mut())?;
        mem = step.memories;
        per_step.push(step.similarity);
        steps.push(step);
    }
    let total = tape.add_n(&per_step)?;
    Ok(Similarity {
        total,
        per_step,
        v0,
        u0,
        steps,
    })
}

/// Context vectors and attention of a single-modality pipeline.
#[derive(Clone, Debug)]
pub struct Pipeline {
    /// `x_0, …, x_K`.
    pub contexts: Vec<Var>,
    pub attention: Vec<AttentionResult>,
}

impl Pipeline {
    pub fn embedding(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat(&self.contexts)
    }
}

/// Visual half of the network; touches no text parameters or inputs.
pub fn image_pipeline(
    tape: &mut Tape,
    visual: &VisualVars,
    regions: Var,
    mut dropout: Option<&mut Dropout>,
) -> Result<Pipeline> {
    let v0 = global_visual_context(tape, regions, visual.p0, visual.b_p0)?;
    let mut contexts = vec![v0];
    let mut attention = Vec::with_capacity(visual.steps.len());
    let mut memory = v0;
    for (k, vs) in visual.steps.iter().enumerate() {
        let att = visual_attend(tape, regions, memory, vs, k + 1, dropout.as_deref_mut())?;
        memory = tape.add(memory, att.context)?;
        contexts.push(att.context);
        attention.push(att);
    }
    Ok(Pipeline {
        contexts,
        attention,
    })
}

/// Textual half of the network; touches no visual parameters or inputs.
pub fn text_pipeline(
    tape: &mut Tape,
    text_vars: &TextVars,
    textual: &TextualVars,
    seq: &TokenSequence,
    mut dropout: Option<&mut Dropout>,
) -> Result<Pipeline> {
    let encoded = encode_bidirectional(tape, seq, text_vars)?;
    let u0 = global_textual_context(tape, &encoded)?;
    let mut contexts = vec![u0];
    let mut attention = Vec::with_capacity(textual.steps.len());
    let mut memory = u0;
    for (k, ts) in textual.steps.iter().enumerate() {
        let att = textual_attend(tape, &encoded, memory, ts, k + 1, dropout.as_deref_mut())?;
        memory = tape.add(memory, att.context)?;
        contexts.push(att.context);
        attention.push(att);
    }
    Ok(Pipeline {
        contexts,
        attention,
    })
}

/// Indices into a batch of positive pairs: the positive pair plus the items
/// whose image and sentence serve as negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quadruplet {
    pub positive: usize,
    pub negative_image: usize,
    pub negative_text: usize,
}

/// Draws, for every item, a negative image and a negative sentence uniformly
/// from the other items of the batch.
pub fn sample_negatives<R: Rng + ?Sized>(batch_size: usize, rng: &mut R) -> Result<Vec<Quadruplet>> {
    if batch_size < 2 {
        return Err(DanError::Config(format!(
            "negative sampling needs a batch of at least 2, got {batch_size}"
        )));
    }
    let mut other = |i: usize| {
        let j = rng.random_range(0..batch_size - 1);
        if j >= i {
            j + 1
        } else {
            j
        }
    };
    Ok((0..batch_size)
        .map(|i| Quadruplet {
            positive: i,
            negative_image: other(i),
            negative_text: other(i),
        })
        .collect())
}

pub fn sample_negatives_seeded(batch_size: usize, seed: u64) -> Result<Vec<Quadruplet>> {
    sample_negatives(batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A positive image/sentence pair.
#[derive(Clone, Copy, Debug)]
pub struct PairRef<'a> {
    pub regions: &'a RegionSet,
    pub text: &'a TokenSequence,
}

/// `Σ max(0, m − S(v,u) + S(v⁻,u)) + max(0, m − S(v,u) + S(v,u⁻))` over the
/// quadruplets. Each image and sentence of the batch is embedded once and
/// similarities are taken as inner products in the joint space.
pub fn ranking_loss(
    tape: &mut Tape,
    vars: &MDanVars,
    config: &MDanConfig,
    pairs: &[PairRef<'_>],
    quads: &[Quadruplet],
    margin: f64,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if quads.is_empty() || pairs.is_empty() {
        return Err(DanError::EmptyInput("ranking_loss"));
    }
    if !(margin >= 0.0) {
        return Err(DanError::Config(format!("margin {margin} must be nonnegative")));
    }
    let n = pairs.len();
    if let Some(q) = quads
        .iter()
        .find(|q| q.positive >= n || q.negative_image >= n || q.negative_text >= n)
    {
        return Err(DanError::OutOfRange {
            what: "quadruplet index",
            index: q.positive.max(q.negative_image).max(q.negative_text),
            limit: n,
        });
    }
    let mut z_v = Vec::with_capacity(n);
    let mut z_u = Vec::with_capacity(n);
    for pair in pairs {
        check_inputs(config.region_dim, config.vocab_size, pair.regions, pair.text)?;
        let regions = pair.regions.load(tape);
        let img = image_pipeline(tape, &vars.visual, regions, dropout.as_deref_mut())?;
        z_v.push(img.embedding(tape)?);
        let txt = text_pipeline(tape, &vars.text, &vars.textual, pair.text, dropout.as_deref_mut())?;
        z_u.push(txt.embedding(tape)?);
    }
    let margin_var = tape.constant(crate::tensor::Tensor::scalar(margin));
    let mut hinges = Vec::with_capacity(2 * quads.len());
    for q in quads {
        let positive = tape.dot(z_v[q.positive], z_u[q.positive])?;
        let gap = tape.sub(margin_var, positive)?;
        let neg_image = tape.dot(z_v[q.negative_image], z_u[q.positive])?;
        let neg_text = tape.dot(z_v[q.positive], z_u[q.negative_text])?;
        for neg in [neg_image, neg_text] {
            let arg = tape.add(gap, neg)?;
            hinges.push(tape.relu_elem(arg));
        }
    }
    tape.add_n(&hinges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MDan {
    config: MDanConfig,
    params: ParamStore,
}

impl MDan {
    pub fn new(config: MDanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.hidden;
        init_text_params(&mut params, PREFIX, config.vocab_size, d, &mut rng)?;
        init_visual_params(&mut params, PREFIX, config.steps, d, config.region_dim, &mut rng)?;
        init_textual_params(&mut params, PREFIX, config.steps, d, &mut rng)?;
        Ok(MDan { config, params })
    }

    pub fn from_parts(config: MDanConfig, params: ParamStore) -> Result<Self> {
        let reference = MDan::new(config.clone(), 0)?;
        check_same_layout(&reference.params, &params)?;
        Ok(MDan { config, params })
    }

    pub fn config(&self) -> &MDanConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn load_vars(&self, tape: &mut Tape) -> Result<MDanVars> {
        MDanVars::load(tape, &self.params, &self.config)
    }

    /// Similarity of one pair through the full network, with its trace.
    pub fn similarity(&self, regions: &RegionSet, text: &TokenSequence) -> Result<(f64, Vec<f64>, AttentionTrace)> {
        let mut tape = Tape::new();
        let vars = self.load_vars(&mut tape)?;
        let sim = mdan_similarity(&mut tape, &vars, &self.config, regions, text, None)?;
        let per_step = sim.per_step.iter().map(|&s| tape.scalar(s)).collect();
        Ok((tape.scalar(sim.total), per_step, sim.trace(&tape)))
    }

    /// Embeds an image through the visual pipeline alone.
    pub fn embed_image(&self, regions: &RegionSet) -> Result<JointEmbedding> {
        if regions.dim() != self.config.region_dim {
            return Err(DanError::Shape {
                op: "region features",
                left: vec![self.config.region_dim],
                right: vec![regions.dim()],
            });
        }
        let mut tape = Tape::new();
        let visual = VisualVars::load(&mut tape, &self.params, PREFIX, self.config.steps)?;
        let regions = regions.load(&mut tape);
        let pipeline = image_pipeline(&mut tape, &visual, regions, None)?;
        let z = pipeline.embedding(&mut tape)?;
        Ok(JointEmbedding {
            modality: Modality::Image,
            z: tape.value(z).data().to_vec(),
        })
    }

    /// Embeds a sentence through the textual pipeline alone.
    pub fn embed_text(&self, text: &TokenSequence) -> Result<JointEmbedding> {
        text.check_vocab(self.config.vocab_size)?;
        let mut tape = Tape::new();
        let text_vars = TextVars::load(&mut tape, &self.params, PREFIX)?;
        let textual = TextualVars::load(&mut tape, &self.params, PREFIX, self.config.steps)?;
        let pipeline = text_pipeline(&mut tape, &text_vars, &textual, text, None)?;
        let z = pipeline.embedding(&mut tape)?;
        Ok(JointEmbedding {
            modality: Modality::Text,
            z: tape.value(z).data().to_vec(),
        })
    }

    /// Summed ranking loss of a batch with the configured margin.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        pairs: &[PairRef<'_>],
        quads: &[Quadruplet],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let vars = self.load_vars(tape)?;
        ranking_loss(tape, &vars, &self.config, pairs, quads, self.config.margin, dropout)
    }
}
