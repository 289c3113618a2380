//! Frozen encoder stand-ins: a miniature causal text transformer and a
//! precomputed image-feature table with a fixed linear projection.
//!
//! Feature-table file layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CZSLFEAT"
//! version  u32      1
//! count    u64      number of records
//! d_img    u32      feature width
//! record × count:
//!   id_len u32, id bytes (UTF-8), d_img × f64
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{matmul_raw, norm, Tape, Tensor, Var, MIN_NORM};
use crate::error::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const INIT_STD: f64 = 0.02;

/// Shape of the frozen encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ctx_len: usize,
    pub d_img: usize,
    pub causal: bool,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            d_model: 64,
            blocks: 2,
            heads: 4,
            ctx_len: 8,
            d_img: 32,
            causal: true,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.blocks == 0 || self.heads == 0 || self.ctx_len == 0 || self.d_img == 0
        {
            return Err(Error::Config(format!("encoder dims must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_up: Tensor,
    pub ff_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderWeights {
    pub dims: EncoderDims,
    /// Rows `SOS`, `EOS`, `PAD`.
    pub special: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub projection: Tensor,
}

/// Both frozen encoders. Nothing in here is ever handed to an optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoders {
    pub text: TextEncoderWeights,
    /// `[d_img × d_model]`
    pub image_projection: Tensor,
}

/// Deterministic N(0, 0.02²) initialization; layer-norm gains start at 1 and biases at 0.
pub fn init_frozen(seed: u64, dims: EncoderDims) -> Result<FrozenEncoders> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.d_model;
    let mut w = |r: usize, c: usize| Tensor::randn(vec![r, c], INIT_STD, &mut rng);
    let special = w(3, d);
    let positional = w(dims.ctx_len, d);
    let blocks = (0..dims.blocks)
        .map(|_| BlockWeights {
            ln1_gain: Tensor::filled(vec![1, d], 1.0),
            ln1_bias: Tensor::zeros(vec![1, d]),
            wq: w(d, d),
            wk: w(d, d),
            wv: w(d, d),
            wo: w(d, d),
            ln2_gain: Tensor::filled(vec![1, d], 1.0),
            ln2_bias: Tensor::zeros(vec![1, d]),
            ff_up: w(d, 4 * d),
            ff_down: w(4 * d, d),
        })
        .collect();
    let projection = w(d, d);
    let image_projection = w(dims.d_img, d);
    Ok(FrozenEncoders {
        text: TextEncoderWeights {
            dims,
            special,
            positional,
            blocks,
            projection,
        },
        image_projection,
    })
}

impl FrozenEncoders {
    /// All weights under stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let t = &self.text;
        let mut out = vec![
            ("enc.special".to_string(), &t.special),
            ("enc.positional".to_string(), &t.positional),
        ];
        for (i, b) in t.blocks.iter().enumerate() {
            for (n, w) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("ff_up", &b.ff_up),
                ("ff_down", &b.ff_down),
            ] {
                out.push((format!("enc.block{i}.{n}"), w));
            }
        }
        out.push(("enc.projection".to_string(), &t.projection));
        out.push(("enc.image_projection".to_string(), &self.image_projection));
        out
    }

    /// Rebuild from named records, checking every shape against `dims`.
    pub fn from_named(dims: EncoderDims, records: &HashMap<String, Tensor>) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = records.get(&name).ok_or_else(|| Error::Integrity {
                record: name.clone(),
                msg: "missing encoder weight".into(),
            })?;
            if t.shape() != shape {
                return Err(Error::Integrity {
                    record: name,
                    msg: format!("shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            Ok(t.clone())
        };
        let mut blocks = Vec::with_capacity(dims.blocks);
        for i in 0..dims.blocks {
            let n = |s: &str| format!("enc.block{i}.{s}");
            blocks.push(BlockWeights {
                ln1_gain: take(n("ln1_gain"), &[1, d])?,
                ln1_bias: take(n("ln1_bias"), &[1, d])?,
                wq: take(n("wq"), &[d, d])?,
                wk: take(n("wk"), &[d, d])?,
                wv: take(n("wv"), &[d, d])?,
                wo: take(n("wo"), &[d, d])?,
                ln2_gain: take(n("ln2_gain"), &[1, d])?,
                ln2_bias: take(n("ln2_bias"), &[1, d])?,
                ff_up: take(n("ff_up"), &[d, 4 * d])?,
                ff_down: take(n("ff_down"), &[4 * d, d])?,
            });
        }
        Ok(Self {
            text: TextEncoderWeights {
                dims,
                special: take("enc.special".into(), &[3, d])?,
                positional: take("enc.positional".into(), &[dims.ctx_len, d])?,
                blocks,
                projection: take("enc.projection".into(), &[d, d])?,
            },
            image_projection: take("enc.image_projection".into(), &[dims.d_img, d])?,
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.text.dims
    }

    /// Projected, unit-norm image vector for `id`.
    pub fn encode_image(&self, table: &ImageFeatureTable, id: &str) -> Result<Vec<f64>> {
        let feature = table.get(id)?;
        let (di, d) = (self.image_projection.rows(), self.image_projection.cols());
        if feature.len() != di {
            return Err(Error::shape("encode_image", &[feature.len()], self.image_projection.shape()));
        }
        let mut v = matmul_raw(feature, self.image_projection.data(), 1, di, d);
        let n = norm(&v);
        if !(n >= MIN_NORM) {
            return Err(Error::Degenerate { row: 0 });
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }
}

impl TextEncoderWeights {
    /// Encode `n` packed contexts `[n·ctx_len × d]` on the tape, returning the
    /// unit-norm `[n × d]` text vectors read off at each `eos` position.
    pub fn encode_on_tape(&self, tape: &mut Tape, contexts: Var, eos: &[usize]) -> Result<Var> {
        let l = self.dims.ctx_len;
        let d = self.dims.d_model;
        let shape = tape.value(contexts).shape().to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] != eos.len() * l || eos.is_empty() {
            return Err(Error::Contract(format!(
                "encode_text expects {} contexts of {l}×{d}, got {shape:?}",
                eos.len()
            )));
        }
        if let Some(&bad) = eos.iter().find(|&&e| e >= l) {
            return Err(Error::Contract(format!(
                "eos position {bad} outside context length {l}"
            )));
        }
        let mut pos = Vec::with_capacity(shape[0] * d);
        for _ in 0..eos.len() {
            pos.extend_from_slice(self.positional.data());
        }
        let pos = tape.constant(Tensor::matrix(shape[0], d, pos)?);
        let mut x = tape.add(contexts, pos)?;
        for b in &self.blocks {
            let c = |tape: &mut Tape, t: &Tensor| tape.constant(t.clone());
            let (g1, b1) = (c(tape, &b.ln1_gain), c(tape, &b.ln1_bias));
            let h = tape.layer_norm_rows(x)?;
            let h = tape.mul_row(h, g1)?;
            let h = tape.add_row(h, b1)?;
            let (wq, wk, wv, wo) = (c(tape, &b.wq), c(tape, &b.wk), c(tape, &b.wv), c(tape, &b.wo));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let a = tape.attention(q, k, v, l, self.dims.heads, self.dims.causal)?;
            let a = tape.matmul(a, wo)?;
            x = tape.add(x, a)?;
            let (g2, b2) = (c(tape, &b.ln2_gain), c(tape, &b.ln2_bias));
            let h = tape.layer_norm_rows(x)?;
            let h = tape.mul_row(h, g2)?;
            let h = tape.add_row(h, b2)?;
            let (up, down) = (c(tape, &b.ff_up), c(tape, &b.ff_down));
            let f = tape.matmul(h, up)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, down)?;
            x = tape.add(x, f)?;
        }
        let rows: Vec<usize> = eos.iter().enumerate().map(|(i, e)| i * l + e).collect();
        let eos_states = tape.gather_rows(x, &rows)?;
        let proj = tape.constant(self.projection.clone());
        let out = tape.matmul(eos_states, proj)?;
        tape.l2_normalize_rows(out)
    }

    /// Single-context convenience wrapper without gradients.
    pub fn encode_text(&self, context: &Tensor, eos_position: usize) -> Result<Vec<f64>> {
        if context.shape() != [self.dims.ctx_len, self.dims.d_model] {
            return Err(Error::Contract(format!(
                "context must be {}×{}, got {:?}",
                self.dims.ctx_len,
                self.dims.d_model,
                context.shape()
            )));
        }
        let mut tape = Tape::new();
        let c = tape.constant(context.clone());
        let out = self.encode_on_tape(&mut tape, c, &[eos_position])?;
        Ok(tape.value(out).data().to_vec())
    }
}

const FEAT_MAGIC: &[u8; 8] = b"CZSLFEAT";
const FEAT_VERSION: u32 = 1;

/// Image id → raw feature vector, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureTable {
    d_img: usize,
    ids: Vec<String>,
    values: Vec<f64>,
    index: HashMap<String, usize>,
}

impl ImageFeatureTable {
    pub fn new(d_img: usize) -> Self {
        Self {
            d_img,
            ids: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, feature: &[f64]) -> Result<()> {
        let id = id.into();
        if feature.len() != self.d_img {
            return Err(Error::shape("feature_table", &[self.d_img], &[feature.len()]));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Data(format!("duplicate image id '{id}'")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.extend_from_slice(feature);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        let i = *self
            .index
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("unknown image id '{id}'")))?;
        Ok(&self.values[i * self.d_img..(i + 1) * self.d_img])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.values.len() * 8 + self.ids.len() * 16);
        out.extend_from_slice(FEAT_MAGIC);
        out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d_img as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in &self.values[i * self.d_img..(i + 1) * self.d_img] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let bad = |msg: &str| Error::Integrity {
            record: "feature table header".into(),
            msg: msg.into(),
        };
        if r.take(8).map_err(|_| bad("truncated"))? != FEAT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().map_err(|_| bad("truncated"))?;
        if version != FEAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = r.u64().map_err(|_| bad("truncated"))?;
        let d_img = r.u32().map_err(|_| bad("truncated"))? as usize;
        if d_img == 0 {
            return Err(bad("d_img is zero"));
        }
        let mut table = Self::new(d_img);
        let mut feature = vec![0.0; d_img];
        for i in 0..count {
            let rec = |msg: &str| Error::Integrity {
                record: format!("feature record {i}"),
                msg: msg.into(),
            };
            let len = r.u32().map_err(|_| rec("truncated"))? as usize;
            let id = std::str::from_utf8(r.take(len).map_err(|_| rec("truncated"))?)
                .map_err(|_| rec("id is not UTF-8"))?
                .to_string();
            for v in feature.iter_mut() {
                *v = r.f64().map_err(|_| rec("truncated"))?;
            }
            table.insert(id, &feature).map_err(|e| rec(&e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let s = self.bytes.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, ()> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> std::result::Result<f64, ()> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u8(&mut self) -> std::result::Result<u8, ()> {
        Ok(self.take(1)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradient;

    fn small_dims() -> EncoderDims {
        EncoderDims {
            d_model: 16,
            blocks: 2,
            heads: 4,
            ctx_len: 8,
            d_img: 6,
            causal: true,
        }
    }

    fn random_context(seed: u64, dims: EncoderDims) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![dims.ctx_len, dims.d_model], INIT_STD, &mut rng)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_frozen(42, EncoderDims::default()).unwrap();
        let b = init_frozen(42, EncoderDims::default()).unwrap();
        let c = init_frozen(43, EncoderDims::default()).unwrap();
        for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert!(x.bit_eq(y));
        }
        assert_ne!(a.text.special, c.text.special);
        assert_ne!(a.image_projection, c.image_projection);
    }

    #[test]
    fn named_round_trip_is_lossless() {
        let enc = init_frozen(42, EncoderDims::default()).unwrap();
        let records: HashMap<String, Tensor> = enc
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let back = FrozenEncoders::from_named(enc.dims(), &records).unwrap();
        assert_eq!(back, enc);
    }

    #[test]
    fn text_output_is_unit_norm() {
        let dims = small_dims();
        let enc = init_frozen(1, dims).unwrap();
        for seed in 0..5 {
            let v = enc.text.encode_text(&random_context(seed, dims), 5).unwrap();
            assert!((norm(&v) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn positions_after_eos_do_not_matter() {
        let dims = small_dims();
        let enc = init_frozen(2, dims).unwrap();
        let a = random_context(3, dims);
        let mut b = a.clone();
        for v in &mut b.data_mut()[6 * dims.d_model..] {
            *v = 0.7;
        }
        assert_eq!(enc.text.encode_text(&a, 5).unwrap(), enc.text.encode_text(&b, 5).unwrap());
    }

    #[test]
    fn bidirectional_flag_lets_later_positions_in() {
        let dims = EncoderDims {
            causal: false,
            ..small_dims()
        };
        let enc = init_frozen(2, dims).unwrap();
        let a = random_context(3, dims);
        let mut b = a.clone();
        for v in &mut b.data_mut()[6 * dims.d_model..] {
            *v = 0.7;
        }
        assert_ne!(enc.text.encode_text(&a, 5).unwrap(), enc.text.encode_text(&b, 5).unwrap());
    }

    #[test]
    fn wrong_context_length_is_rejected() {
        let dims = small_dims();
        let enc = init_frozen(2, dims).unwrap();
        let ctx = Tensor::zeros(vec![7, dims.d_model]);
        assert!(matches!(enc.text.encode_text(&ctx, 3), Err(Error::Contract(_))));
        let ctx = random_context(1, dims);
        assert!(matches!(enc.text.encode_text(&ctx, 8), Err(Error::Contract(_))));
    }

    #[test]
    fn text_gradient_matches_finite_differences() {
        let dims = small_dims();
        let enc = init_frozen(5, dims).unwrap();
        let ctx = random_context(6, dims);
        let target = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            Tensor::randn(vec![1, dims.d_model], 1.0, &mut rng)
        };
        let check = check_gradient(&ctx, 1e-5, |t, x| {
            let y = enc.text.encode_on_tape(t, x, &[5])?;
            let w = t.constant(target.clone());
            let p = t.mul(y, w)?;
            t.sum(p)
        })
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "{check:?}");
        // nothing reaches the positions past eos
        assert!(check.analytic[6 * dims.d_model..].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn image_encoding() {
        let enc = init_frozen(9, small_dims()).unwrap();
        let mut table = ImageFeatureTable::new(6);
        table.insert("a", &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let v1 = enc.encode_image(&table, "a").unwrap();
        let v2 = enc.encode_image(&table, "a").unwrap();
        assert!((norm(&v1) - 1.0).abs() < 1e-9);
        assert_eq!(v1, v2);
        assert!(matches!(enc.encode_image(&table, "zz"), Err(Error::Lookup(m)) if m.contains("zz")));
    }

    #[test]
    fn identity_projection_normalizes_raw_feature() {
        let mut enc = init_frozen(9, small_dims()).unwrap();
        enc.image_projection = Tensor::zeros(vec![6, 16]);
        for i in 0..6 {
            enc.image_projection.data_mut()[i * 16 + i] = 1.0;
        }
        let mut table = ImageFeatureTable::new(6);
        table.insert("x", &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let v = enc.encode_image(&table, "x").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(v[2..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn feature_file_round_trip_and_truncation() {
        let mut table = ImageFeatureTable::new(3);
        table.insert("img_0", &[1.0, 2.0, 3.0]).unwrap();
        table.insert("ünï", &[-0.5, 0.0, 1e-300]).unwrap();
        let bytes = table.to_bytes();
        assert_eq!(&bytes[..8], b"CZSLFEAT");
        assert_eq!(ImageFeatureTable::from_bytes(&bytes).unwrap(), table);
        let err = ImageFeatureTable::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("feature record 1"), "{err}");
    }
}
