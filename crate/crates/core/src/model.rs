//! Scoring head: text vectors for a pair set, temperature-scaled cosine
//! logits, and argmax prediction over a target set.

use crate::autodiff::{dot, softmax_row, Tape, Tensor, Var};
use crate::data::{CompositionSpace, Pair};
use crate::encoders::{FrozenEncoders, ImageFeatureTable};
use crate::error::{Error, Result};
use crate::prompt::{PromptState, PromptVars};

pub const DEFAULT_TAU: f64 = 0.01;

/// Pairs encoded per tape when building a text matrix without gradients.
const TEXT_CHUNK: usize = 256;

/// Everything needed to score images against pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub encoders: FrozenEncoders,
    pub prompt: PromptState,
    tau: f64,
    attrs: Vec<String>,
    objs: Vec<String>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

impl ModelSnapshot {
    pub fn new(
        encoders: FrozenEncoders,
        prompt: PromptState,
        tau: f64,
        attrs: Vec<String>,
        objs: Vec<String>,
    ) -> Result<Self> {
        check_tau(tau)?;
        if prompt.n_attrs() != attrs.len() || prompt.n_objs() != objs.len() {
            return Err(Error::Contract(format!(
                "prompt state covers {}×{} primitives, vocabulary has {}×{}",
                prompt.n_attrs(),
                prompt.n_objs(),
                attrs.len(),
                objs.len()
            )));
        }
        if prompt.d_model() != encoders.dims().d_model {
            return Err(Error::Contract(format!(
                "prompt width {} does not match encoder width {}",
                prompt.d_model(),
                encoders.dims().d_model
            )));
        }
        crate::prompt::check_layout(prompt.prompt_len(), encoders.dims().ctx_len)?;
        Ok(Self {
            encoders,
            prompt,
            tau,
            attrs,
            objs,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        check_tau(tau)?;
        self.tau = tau;
        Ok(())
    }

    pub fn attrs(&self) -> &[String] {
        &self.attrs
    }

    pub fn objs(&self) -> &[String] {
        &self.objs
    }

    /// The snapshot was built for a space with exactly these primitives.
    pub fn check_space(&self, space: &CompositionSpace) -> Result<()> {
        if space.attrs() != self.attrs.as_slice() || space.objs() != self.objs.as_slice() {
            return Err(Error::Data(
                "model vocabulary does not match the composition space".into(),
            ));
        }
        Ok(())
    }

    /// Text vectors for `pairs` on the tape, differentiable in `vars`.
    pub fn texts_on_tape(&self, tape: &mut Tape, vars: PromptVars, pairs: &[Pair]) -> Result<Var> {
        let (ctx, eos) = self.prompt.contexts_on_tape(tape, vars, &self.encoders, pairs)?;
        self.encoders.text.encode_on_tape(tape, ctx, &eos)
    }

    /// `[|pairs| × d]` unit-norm text vectors.
    pub fn text_matrix(&self, pairs: &[Pair]) -> Result<Tensor> {
        if pairs.is_empty() {
            return Err(Error::Contract("text_matrix needs at least one pair".into()));
        }
        let d = self.encoders.dims().d_model;
        let mut data = Vec::with_capacity(pairs.len() * d);
        let mut tape = Tape::new();
        for chunk in pairs.chunks(TEXT_CHUNK) {
            tape.reset();
            let vars = self.prompt.register(&mut tape);
            let t = self.texts_on_tape(&mut tape, vars, chunk)?;
            data.extend_from_slice(tape.value(t).data());
        }
        Tensor::matrix(pairs.len(), d, data)
    }

    pub fn image_vector(&self, features: &ImageFeatureTable, id: &str) -> Result<Vec<f64>> {
        self.encoders.encode_image(features, id)
    }

    /// `[|ids| × d]` unit-norm image vectors.
    pub fn image_matrix(&self, features: &ImageFeatureTable, ids: &[&str]) -> Result<Tensor> {
        let d = self.encoders.dims().d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for id in ids {
            data.extend(self.image_vector(features, id)?);
        }
        Tensor::matrix(ids.len(), d, data)
    }
}

/// `cos(image, texts[i]) / tau` for every row; both sides must already be unit norm.
pub fn logits(image_vec: &[f64], texts: &Tensor, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let (_, d) = texts.dims2("logits")?;
    if image_vec.len() != d {
        return Err(Error::shape("logits", &[image_vec.len()], texts.shape()));
    }
    Ok((0..texts.rows()).map(|i| dot(image_vec, texts.row(i)) / tau).collect())
}

/// Softmax over one logit vector; `-inf` entries get probability exactly 0.
pub fn label_probability(logits: &[f64]) -> Result<Vec<f64>> {
    softmax_row(logits, 0)
}

/// Index of the largest finite-or-`+inf` entry, lowest index on ties.
/// `None` when every entry is `-inf` (or NaN).
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s == f64::NEG_INFINITY || s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// A text matrix for a fixed target set, computed once and reused per image.
#[derive(Clone, Debug)]
pub struct Scorer {
    pairs: Vec<Pair>,
    texts: Tensor,
    tau: f64,
    allowed: Option<Vec<bool>>,
}

impl Scorer {
    /// `allowed[j] == false` removes pair `j` from every score row.
    pub fn new(snapshot: &ModelSnapshot, pairs: &[Pair], allowed: Option<&[bool]>) -> Result<Self> {
        if let Some(a) = allowed {
            if a.len() != pairs.len() {
                return Err(Error::shape("mask", &[a.len()], &[pairs.len()]));
            }
        }
        Ok(Self {
            pairs: pairs.to_vec(),
            texts: snapshot.text_matrix(pairs)?,
            tau: snapshot.tau,
            allowed: allowed.map(<[bool]>::to_vec),
        })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn texts(&self) -> &Tensor {
        &self.texts
    }

    /// Logits with masked pairs set to `-inf`.
    pub fn scores(&self, image_vec: &[f64]) -> Result<Vec<f64>> {
        let mut s = logits(image_vec, &self.texts, self.tau)?;
        if let Some(a) = &self.allowed {
            for (v, ok) in s.iter_mut().zip(a) {
                if !ok {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        Ok(s)
    }

    pub fn predict(&self, image_vec: &[f64]) -> Result<Pair> {
        let s = self.scores(image_vec)?;
        argmax(&s)
            .map(|j| self.pairs[j])
            .ok_or_else(|| Error::Contract("every target pair is masked".into()))
    }

    /// Up to `k` unmasked pairs by descending cosine similarity, lowest index first on ties.
    pub fn rank(&self, image_vec: &[f64], k: usize) -> Result<Vec<(Pair, f64)>> {
        let s = self.scores(image_vec)?;
        let mut order: Vec<usize> = (0..s.len()).filter(|&j| s[j] != f64::NEG_INFINITY).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        Ok(order
            .into_iter()
            .take(k)
            .map(|j| (self.pairs[j], s[j] * self.tau))
            .collect())
    }
}

/// Most similar unmasked target pair for one image.
pub fn predict(
    snapshot: &ModelSnapshot,
    features: &ImageFeatureTable,
    image_id: &str,
    target_pairs: &[Pair],
    allowed: Option<&[bool]>,
) -> Result<Pair> {
    if target_pairs.is_empty() {
        return Err(Error::Contract("empty target set".into()));
    }
    let image = snapshot.image_vector(features, image_id)?;
    Scorer::new(snapshot, target_pairs, allowed)?.predict(&image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::norm;
    use crate::data::PairSplits;
    use crate::encoders::{init_frozen, EncoderDims};
    use crate::prompt::{init_prompt_state, PromptInit, PromptMode};

    fn snapshot(na: usize, no: usize, d: usize) -> ModelSnapshot {
        let space = CompositionSpace::new(
            (0..na).map(|i| format!("a{i}")).collect(),
            (0..no).map(|i| format!("o{i}")).collect(),
            PairSplits {
                train: vec![Pair::new(0, 0)],
                ..Default::default()
            },
            vec![],
        )
        .unwrap();
        let dims = EncoderDims {
            d_model: d,
            d_img: 4,
            ..EncoderDims::default()
        };
        let enc = init_frozen(11, dims).unwrap();
        let prompt =
            init_prompt_state(&space, PromptMode::PromptCompVl, 3, d, 11, None, PromptInit::Random).unwrap();
        ModelSnapshot::new(enc, prompt, DEFAULT_TAU, space.attrs().to_vec(), space.objs().to_vec()).unwrap()
    }

    fn all_pairs(na: usize, no: usize) -> Vec<Pair> {
        (0..na).flat_map(|a| (0..no).map(move |o| Pair::new(a, o))).collect()
    }

    #[test]
    fn text_rows_are_unit_norm_and_row_independent() {
        let s = snapshot(3, 3, 16);
        let pairs = all_pairs(3, 3);
        let t = s.text_matrix(&pairs).unwrap();
        for r in 0..t.rows() {
            assert!((norm(t.row(r)) - 1.0).abs() < 1e-9);
        }
        let dup = s.text_matrix(&[pairs[4], pairs[4], pairs[1]]).unwrap();
        assert_eq!(dup.row(0), dup.row(1));
        assert_eq!(dup.row(0), t.row(4));
        assert_eq!(dup.row(2), t.row(1));
        assert!(matches!(s.text_matrix(&[Pair::new(3, 0)]), Err(Error::Lookup(_))));
    }

    #[test]
    fn chunked_text_matrix_matches_single_contexts() {
        let s = snapshot(20, 15, 8);
        let pairs = all_pairs(20, 15);
        let t = s.text_matrix(&pairs).unwrap();
        for &j in &[0, 255, 256, 299] {
            let (ctx, eos) = s.prompt.build_context(pairs[j], &s.encoders).unwrap();
            let v = s.encoders.text.encode_text(&ctx, eos).unwrap();
            for (a, b) in v.iter().zip(t.row(j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_examples() {
        let texts = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.3, 0.91_f64.sqrt()]]).unwrap();
        let l = logits(&[1.0, 0.0], &texts, 1.0).unwrap();
        assert_eq!(l[0], 1.0);
        assert_eq!(l[1], 0.0);
        let l = logits(&[1.0, 0.0], &texts, 0.01).unwrap();
        assert!((l[2] - 30.0).abs() < 1e-12);
        assert!(matches!(logits(&[1.0, 0.0], &texts, 0.0), Err(Error::Config(_))));
        assert!(matches!(logits(&[1.0, 0.0], &texts, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn probabilities_sum_to_one_and_respect_mask() {
        let p = label_probability(&[3.0, f64::NEG_INFINITY, -1.0, 0.5]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
        assert!(matches!(
            label_probability(&[f64::NEG_INFINITY; 3]),
            Err(Error::AllMasked { .. })
        ));
    }

    #[test]
    fn argmax_ties_and_masks() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[f64::NEG_INFINITY, -5.0]), Some(1));
        assert_eq!(argmax(&[f64::NEG_INFINITY]), None);
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn prediction_ignores_temperature() {
        let mut s = snapshot(3, 4, 16);
        let pairs = all_pairs(3, 4);
        let mut features = ImageFeatureTable::new(4);
        features.insert("x", &[0.3, -1.0, 0.2, 0.7]).unwrap();
        let mut preds = Vec::new();
        for tau in [0.01, 0.07, 1.0] {
            s.set_tau(tau).unwrap();
            preds.push(predict(&s, &features, "x", &pairs, None).unwrap());
        }
        assert!(preds.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(predict(&s, &features, "x", &pairs[5..6], None).unwrap(), pairs[5]);
        assert!(matches!(predict(&s, &features, "x", &[], None), Err(Error::Contract(_))));
        assert!(matches!(
            predict(&s, &features, "x", &pairs[..2], Some(&[false, false])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(predict(&s, &features, "nope", &pairs, None), Err(Error::Lookup(_))));
    }

    #[test]
    fn image_equal_to_text_row_wins() {
        let s = snapshot(2, 1, 16);
        let pairs = all_pairs(2, 1);
        let scorer = Scorer::new(&s, &pairs, None).unwrap();
        let image = scorer.texts().row(0).to_vec();
        let sc = scorer.scores(&image).unwrap();
        assert!((sc[0] * s.tau() - 1.0).abs() < 1e-12);
        assert!(sc[1] < sc[0]);
        assert_eq!(scorer.predict(&image).unwrap(), pairs[0]);
        let masked = Scorer::new(&s, &pairs, Some(&[false, true])).unwrap();
        assert_eq!(masked.predict(&image).unwrap(), pairs[1]);
        let ranked = scorer.rank(&image, 5).unwrap();
        assert_eq!(ranked.len(), 2);
        assert_eq!(ranked[0].0, pairs[0]);
    }

    #[test]
    fn bad_temperature_rejected() {
        let mut s = snapshot(2, 2, 8);
        assert!(matches!(s.set_tau(0.0), Err(Error::Config(_))));
        assert!(matches!(s.set_tau(f64::NAN), Err(Error::Config(_))));
        assert_eq!(s.tau(), DEFAULT_TAU);
    }
}
