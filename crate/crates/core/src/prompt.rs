//! Learnable soft prompt and soft embedding, and text-context assembly.
//!
//! A pair `(a, o)` becomes the context `[SOS, v_1..v_k, e_a, e_o, EOS, PAD..]`
//! padded to the encoder's context length. The `v_i` rows come from the soft
//! prompt, `e_a` and `e_o` from the soft embedding table, whose first `|A|`
//! rows are attributes and whose remaining `|O|` rows are objects. The prompt
//! mode decides which of the two blocks the optimizer may touch.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::data::{CompositionSpace, Pair};
use crate::encoders::{FrozenEncoders, EOS, INIT_STD, PAD, SOS};
use crate::error::{Error, Result};

pub const PROMPT_PARAM: &str = "prompt.theta";
pub const EMBEDDING_PARAM: &str = "prompt.phi";

/// Which blocks are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptMode {
    /// Fixed phrase rows and frozen vocabulary rows; nothing trains.
    ClipHard,
    /// Soft prompt trains, concept rows stay frozen.
    CoopSoftPrompt,
    /// Concept rows train, phrase rows stay fixed.
    CspSoftEmbedding,
    /// Both the soft prompt and the concept rows train.
    PromptCompVl,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::ClipHard,
        PromptMode::CoopSoftPrompt,
        PromptMode::CspSoftEmbedding,
        PromptMode::PromptCompVl,
    ];

    pub fn trains_prompt(self) -> bool {
        matches!(self, PromptMode::CoopSoftPrompt | PromptMode::PromptCompVl)
    }

    pub fn trains_embedding(self) -> bool {
        matches!(self, PromptMode::CspSoftEmbedding | PromptMode::PromptCompVl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ClipHard => "clip_hard",
            PromptMode::CoopSoftPrompt => "coop_soft_prompt",
            PromptMode::CspSoftEmbedding => "csp_soft_embedding",
            PromptMode::PromptCompVl => "promptcompvl",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown prompt mode '{s}' (expected clip_hard, coop_soft_prompt, csp_soft_embedding or promptcompvl)"
                ))
            })
    }
}

/// Starting point for a trainable soft prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptInit {
    Random,
    /// Copy the fixed phrase rows used by the hard-prompt modes.
    Hard,
}

impl fmt::Display for PromptInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptInit::Random => "random",
            PromptInit::Hard => "hard",
        })
    }
}

impl FromStr for PromptInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PromptInit::Random),
            "hard" => Ok(PromptInit::Hard),
            other => Err(Error::Config(format!(
                "unknown prompt init '{other}' (expected random or hard)"
            ))),
        }
    }
}

/// Context length and prompt length must leave room for SOS, attr, obj, EOS.
pub fn check_layout(prompt_len: usize, ctx_len: usize) -> Result<()> {
    if prompt_len + 4 > ctx_len {
        return Err(Error::Config(format!(
            "prompt length {prompt_len} + 4 exceeds context length {ctx_len}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    mode: PromptMode,
    /// `[k × d]`; `None` when `k = 0`.
    soft_prompt: Option<Parameter>,
    /// `[(|A|+|O|) × d]`
    soft_embedding: Parameter,
    n_attrs: usize,
    n_objs: usize,
}

/// Build the initial prompt state. With `frozen_vocab`, concept rows are
/// copied from it; otherwise they, the fixed phrase rows, and a random soft
/// prompt are drawn from N(0, 0.02²) on separate seeded streams.
pub fn init_prompt_state(
    space: &CompositionSpace,
    mode: PromptMode,
    prompt_len: usize,
    d_model: usize,
    seed: u64,
    frozen_vocab: Option<&Tensor>,
    init: PromptInit,
) -> Result<PromptState> {
    let rows = space.n_attrs() + space.n_objs();
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let table = match frozen_vocab {
        Some(v) => {
            if v.shape() != [rows, d_model] {
                return Err(Error::Contract(format!(
                    "frozen vocabulary is {:?}, expected [{rows}, {d_model}]",
                    v.shape()
                )));
            }
            v.clone()
        }
        None => Tensor::randn(vec![rows, d_model], INIT_STD, &mut stream(2)),
    };
    let soft_prompt = if prompt_len == 0 {
        None
    } else {
        let hard = Tensor::randn(vec![prompt_len, d_model], INIT_STD, &mut stream(1));
        let t = if mode.trains_prompt() && init == PromptInit::Random {
            Tensor::randn(vec![prompt_len, d_model], INIT_STD, &mut stream(3))
        } else {
            hard
        };
        Some(Parameter::new(PROMPT_PARAM, t, !mode.trains_prompt()))
    };
    Ok(PromptState {
        mode,
        soft_prompt,
        soft_embedding: Parameter::new(EMBEDDING_PARAM, table, !mode.trains_embedding()),
        n_attrs: space.n_attrs(),
        n_objs: space.n_objs(),
    })
}

/// Differentiable handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub prompt: Option<Var>,
    pub embedding: Var,
}

impl PromptState {
    /// Reassemble from stored tensors (checkpoint loading).
    pub fn from_parts(
        mode: PromptMode,
        soft_prompt: Option<Tensor>,
        soft_embedding: Tensor,
        n_attrs: usize,
        n_objs: usize,
    ) -> Result<Self> {
        if soft_embedding.shape().len() != 2 || soft_embedding.rows() != n_attrs + n_objs {
            return Err(Error::Contract(format!(
                "soft embedding {:?} does not hold {} attribute and {} object rows",
                soft_embedding.shape(),
                n_attrs,
                n_objs
            )));
        }
        if let Some(p) = &soft_prompt {
            if p.shape().len() != 2 || p.cols() != soft_embedding.cols() {
                return Err(Error::shape("prompt_state", p.shape(), soft_embedding.shape()));
            }
        }
        Ok(Self {
            mode,
            soft_prompt: soft_prompt.map(|t| Parameter::new(PROMPT_PARAM, t, !mode.trains_prompt())),
            soft_embedding: Parameter::new(EMBEDDING_PARAM, soft_embedding, !mode.trains_embedding()),
            n_attrs,
            n_objs,
        })
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn prompt_len(&self) -> usize {
        self.soft_prompt.as_ref().map_or(0, |p| p.tensor.rows())
    }

    pub fn d_model(&self) -> usize {
        self.soft_embedding.tensor.cols()
    }

    pub fn n_attrs(&self) -> usize {
        self.n_attrs
    }

    pub fn n_objs(&self) -> usize {
        self.n_objs
    }

    pub fn soft_prompt(&self) -> Option<&Parameter> {
        self.soft_prompt.as_ref()
    }

    pub fn soft_embedding(&self) -> &Parameter {
        &self.soft_embedding
    }

    pub fn attr_row(&self, attr: usize) -> &[f64] {
        self.soft_embedding.tensor.row(attr)
    }

    pub fn obj_row(&self, obj: usize) -> &[f64] {
        self.soft_embedding.tensor.row(self.n_attrs + obj)
    }

    /// Both blocks, trainable or not, in storage order.
    pub fn params(&self) -> Vec<&Parameter> {
        self.soft_prompt.iter().chain([&self.soft_embedding]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.soft_prompt.iter_mut().chain([&mut self.soft_embedding]).collect()
    }

    /// Exactly the blocks the mode allows the optimizer to update.
    pub fn trainable_params(&self) -> Vec<&Parameter> {
        self.params().into_iter().filter(|p| !p.frozen).collect()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.trainable_params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Serialized form of the state, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.mode.as_str().as_bytes().to_vec();
        for p in self.params() {
            out.extend_from_slice(p.name.as_bytes());
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Record both blocks on `tape`; frozen blocks become constants.
    pub fn register(&self, tape: &mut Tape) -> PromptVars {
        let reg = |tape: &mut Tape, p: &Parameter| {
            if p.frozen {
                tape.constant(p.tensor.clone())
            } else {
                tape.leaf(p.tensor.clone())
            }
        };
        PromptVars {
            prompt: self.soft_prompt.as_ref().map(|p| reg(tape, p)),
            embedding: reg(tape, &self.soft_embedding),
        }
    }

    /// Row indices into the token bank `[SOS, EOS, PAD, v_1..v_k, concepts..]`
    /// and the EOS position.
    pub fn context_indices(&self, pair: Pair, ctx_len: usize) -> Result<(Vec<usize>, usize)> {
        let k = self.prompt_len();
        check_layout(k, ctx_len)?;
        if pair.attr >= self.n_attrs || pair.obj >= self.n_objs {
            return Err(Error::Lookup(format!(
                "pair {pair:?} outside {}×{} composition space",
                self.n_attrs, self.n_objs
            )));
        }
        let concepts = 3 + k;
        let mut ix = Vec::with_capacity(ctx_len);
        ix.push(SOS);
        ix.extend(3..3 + k);
        ix.push(concepts + pair.attr);
        ix.push(concepts + self.n_attrs + pair.obj);
        ix.push(EOS);
        ix.resize(ctx_len, PAD);
        Ok((ix, k + 3))
    }

    /// Packed `[n·L × d]` contexts for `pairs` on the tape, plus EOS positions.
    pub fn contexts_on_tape(
        &self,
        tape: &mut Tape,
        vars: PromptVars,
        encoders: &FrozenEncoders,
        pairs: &[Pair],
    ) -> Result<(Var, Vec<usize>)> {
        let l = encoders.text.dims.ctx_len;
        if encoders.text.dims.d_model != self.d_model() {
            return Err(Error::shape(
                "build_context",
                encoders.text.special.shape(),
                self.soft_embedding.tensor.shape(),
            ));
        }
        let mut indices = Vec::with_capacity(pairs.len() * l);
        let mut eos = Vec::with_capacity(pairs.len());
        for &p in pairs {
            let (ix, e) = self.context_indices(p, l)?;
            indices.extend(ix);
            eos.push(e);
        }
        let special = tape.constant(encoders.text.special.clone());
        let mut parts = vec![special];
        parts.extend(vars.prompt);
        parts.push(vars.embedding);
        let bank = tape.concat_rows(&parts)?;
        let ctx = tape.gather_rows(bank, &indices)?;
        Ok((ctx, eos))
    }

    /// The `[L × d]` context for one pair and its EOS position.
    pub fn build_context(&self, pair: Pair, encoders: &FrozenEncoders) -> Result<(Tensor, usize)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let (ctx, eos) = self.contexts_on_tape(&mut tape, vars, encoders, &[pair])?;
        Ok((tape.value(ctx).clone(), eos[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CompositionSpace, PairSplits};
    use crate::encoders::{init_frozen, EncoderDims};

    fn space(na: usize, no: usize) -> CompositionSpace {
        CompositionSpace::new(
            (0..na).map(|i| format!("a{i}")).collect(),
            (0..no).map(|i| format!("o{i}")).collect(),
            PairSplits {
                train: vec![Pair::new(0, 0)],
                ..Default::default()
            },
            vec![],
        )
        .unwrap()
    }

    fn dims(d: usize) -> EncoderDims {
        EncoderDims {
            d_model: d,
            ..EncoderDims::default()
        }
    }

    #[test]
    fn same_seed_same_state() {
        let s = space(5, 7);
        let a = init_prompt_state(&s, PromptMode::PromptCompVl, 3, 64, 9, None, PromptInit::Random).unwrap();
        let b = init_prompt_state(&s, PromptMode::PromptCompVl, 3, 64, 9, None, PromptInit::Random).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = init_prompt_state(&s, PromptMode::PromptCompVl, 3, 64, 10, None, PromptInit::Random).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn trainable_sets_per_mode() {
        let s = space(5, 7);
        let names = |m| {
            init_prompt_state(&s, m, 3, 64, 1, None, PromptInit::Random)
                .unwrap()
                .trainable_params()
                .iter()
                .map(|p| p.name.clone())
                .collect::<Vec<_>>()
        };
        assert!(names(PromptMode::ClipHard).is_empty());
        assert_eq!(names(PromptMode::CoopSoftPrompt), [PROMPT_PARAM]);
        assert_eq!(names(PromptMode::CspSoftEmbedding), [EMBEDDING_PARAM]);
        assert_eq!(names(PromptMode::PromptCompVl), [PROMPT_PARAM, EMBEDDING_PARAM]);
    }

    #[test]
    fn trainable_scalar_count_for_both_blocks() {
        let s = space(5, 7);
        let st = init_prompt_state(&s, PromptMode::PromptCompVl, 3, 64, 1, None, PromptInit::Random).unwrap();
        assert_eq!(st.trainable_scalar_count(), 3 * 64 + 12 * 64);
        let st = init_prompt_state(&s, PromptMode::ClipHard, 3, 64, 1, None, PromptInit::Random).unwrap();
        assert_eq!(st.trainable_scalar_count(), 0);
    }

    #[test]
    fn hard_modes_share_phrase_rows_and_vocab_is_copied() {
        let s = space(2, 2);
        let vocab = Tensor::from_rows(&[vec![1.0; 4], vec![2.0; 4], vec![3.0; 4], vec![4.0; 4]]).unwrap();
        let clip = init_prompt_state(&s, PromptMode::ClipHard, 2, 4, 5, Some(&vocab), PromptInit::Random).unwrap();
        let csp = init_prompt_state(&s, PromptMode::CspSoftEmbedding, 2, 4, 5, None, PromptInit::Random).unwrap();
        let coop_hard = init_prompt_state(&s, PromptMode::CoopSoftPrompt, 2, 4, 5, None, PromptInit::Hard).unwrap();
        assert_eq!(clip.soft_embedding().tensor, vocab);
        assert_eq!(clip.soft_prompt(), csp.soft_prompt());
        assert_eq!(clip.soft_prompt().unwrap().tensor, coop_hard.soft_prompt().unwrap().tensor);
        let bad = Tensor::zeros(vec![3, 4]);
        assert!(matches!(
            init_prompt_state(&s, PromptMode::ClipHard, 2, 4, 5, Some(&bad), PromptInit::Random),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn context_layout_with_three_prompt_vectors() {
        let s = space(5, 7);
        let st = init_prompt_state(&s, PromptMode::PromptCompVl, 3, 16, 1, None, PromptInit::Random).unwrap();
        let (ix, eos) = st.context_indices(Pair::new(2, 4), 8).unwrap();
        assert_eq!(eos, 6);
        assert_eq!(ix, vec![SOS, 3, 4, 5, 6 + 2, 6 + 5 + 4, EOS, PAD]);

        let enc = init_frozen(3, dims(16)).unwrap();
        let (ctx, eos) = st.build_context(Pair::new(2, 4), &enc).unwrap();
        assert_eq!(eos, 6);
        let prompt = &st.soft_prompt().unwrap().tensor;
        assert_eq!(ctx.row(0), enc.text.special.row(SOS));
        for i in 0..3 {
            assert_eq!(ctx.row(1 + i), prompt.row(i));
        }
        assert_eq!(ctx.row(4), st.attr_row(2));
        assert_eq!(ctx.row(5), st.obj_row(4));
        assert_eq!(ctx.row(6), enc.text.special.row(EOS));
        assert_eq!(ctx.row(7), enc.text.special.row(PAD));
    }

    #[test]
    fn empty_prompt_and_overlong_prompt() {
        let s = space(2, 2);
        let st = init_prompt_state(&s, PromptMode::CspSoftEmbedding, 0, 16, 1, None, PromptInit::Random).unwrap();
        let (ix, eos) = st.context_indices(Pair::new(1, 0), 8).unwrap();
        assert_eq!(ix, vec![SOS, 3 + 1, 3 + 2, EOS, PAD, PAD, PAD, PAD]);
        assert_eq!(eos, 3);
        let st = init_prompt_state(&s, PromptMode::PromptCompVl, 5, 16, 1, None, PromptInit::Random).unwrap();
        assert!(matches!(st.context_indices(Pair::new(0, 0), 8), Err(Error::Config(_))));
    }

    #[test]
    fn swapping_pair_changes_only_concept_slots() {
        let s = space(3, 3);
        let st = init_prompt_state(&s, PromptMode::PromptCompVl, 2, 16, 1, None, PromptInit::Random).unwrap();
        let enc = init_frozen(3, dims(16)).unwrap();
        let (a, _) = st.build_context(Pair::new(0, 2), &enc).unwrap();
        let (b, _) = st.build_context(Pair::new(2, 0), &enc).unwrap();
        for r in 0..8 {
            assert_eq!(a.row(r) == b.row(r), r != 3 && r != 4, "row {r}");
        }
    }

    #[test]
    fn gradient_reaches_only_used_rows() {
        let s = space(3, 4);
        let st = init_prompt_state(&s, PromptMode::PromptCompVl, 2, 16, 1, None, PromptInit::Random).unwrap();
        let enc = init_frozen(3, dims(16)).unwrap();
        let mut tape = Tape::new();
        let vars = st.register(&mut tape);
        let (ctx, eos) = st.contexts_on_tape(&mut tape, vars, &enc, &[Pair::new(1, 2)]).unwrap();
        let t = enc.text.encode_on_tape(&mut tape, ctx, &eos).unwrap();
        let loss = tape.sum(t).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(vars.embedding).unwrap();
        for r in 0..7 {
            let nonzero = g.row(r).iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, r == 1 || r == 3 + 2, "row {r}");
        }
        assert!(tape.grad(vars.prompt.unwrap()).unwrap().data().iter().any(|v| *v != 0.0));
    }
}
