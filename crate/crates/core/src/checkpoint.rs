//! Binary checkpoint format. All integers little-endian, strings are a
//! `u32` byte length followed by UTF-8.
//!
//! ```text
//! magic      8 bytes  "CZSLCKPT"
//! version    u32      1
//! config     u32 count, (key, value) strings
//! seed       u64
//! epoch      u64      completed epochs
//! mode       string
//! tau        f64
//! dims       u32 d_model, blocks, heads, ctx_len, d_img; u8 causal
//! vocab      u32 count + attribute names, u32 count + object names
//! tensors    u32 count, (name, u32 ndim, u64 dims.., f64 values..)
//! optimizer  kind string, f64 lr, beta1, beta2, eps, u64 steps,
//!            u32 count, (name, tensor) moment records
//! best       u8 present; u64 epoch, f64 auc (its prompt tensors are
//!            stored under "best/" in the tensor section)
//! history    u32 count, (u64 epoch, f64 loss, f64 acc, u8 has_val,
//!            f64 S, U, HM, AUC)
//! checksum   32 bytes SHA-256 of everything above
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{Optimizer, OptimizerConfig, OptimizerKind, Tensor};
use crate::encoders::{ByteReader, EncoderDims, FrozenEncoders};
use crate::error::{Error, Result};
use crate::evaluation::Summary;
use crate::model::ModelSnapshot;
use crate::prompt::{PromptMode, PromptState, EMBEDDING_PARAM, PROMPT_PARAM};
use crate::training::{BestSnapshot, EpochRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CZSLCKPT";
pub const VERSION: u32 = 1;
const BEST_PREFIX: &str = "best/";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    r: ByteReader<'a>,
}

fn integrity(record: &str, msg: impl Into<String>) -> Error {
    Error::Integrity {
        record: record.into(),
        msg: msg.into(),
    }
}

impl<'a> Reader<'a> {
    fn trunc(rec: &str) -> impl FnOnce(()) -> Error + '_ {
        move |_| integrity(rec, "truncated")
    }
    fn u8(&mut self, rec: &str) -> Result<u8> {
        self.r.u8().map_err(Self::trunc(rec))
    }
    fn u32(&mut self, rec: &str) -> Result<usize> {
        self.r.u32().map(|v| v as usize).map_err(Self::trunc(rec))
    }
    fn u64(&mut self, rec: &str) -> Result<u64> {
        self.r.u64().map_err(Self::trunc(rec))
    }
    fn f64(&mut self, rec: &str) -> Result<f64> {
        self.r.f64().map_err(Self::trunc(rec))
    }
    fn str(&mut self, rec: &str) -> Result<String> {
        let n = self.u32(rec)?;
        let b = self.r.take(n).map_err(Self::trunc(rec))?;
        String::from_utf8(b.to_vec()).map_err(|_| integrity(rec, "string is not UTF-8"))
    }
    fn tensor(&mut self, rec: &str) -> Result<(String, Tensor)> {
        let name = self.str(rec)?;
        let rec = format!("tensor {name}");
        let ndim = self.u32(&rec)?;
        let mut shape = Vec::new();
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = self.u64(&rec)? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| integrity(&rec, "shape overflows"))?;
            shape.push(d);
        }
        let bytes = numel.checked_mul(8).ok_or_else(|| integrity(&rec, "shape overflows"))?;
        let raw = self.r.take(bytes).map_err(Self::trunc(&rec))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| integrity(&rec, e.to_string()))?;
        Ok((name, t))
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    let entries = state.config.entries();
    w.u32(entries.len());
    for (k, v) in &entries {
        w.str(k);
        w.str(v);
    }
    w.u64(state.config.seed);
    w.u64(state.epoch as u64);
    let snap = &state.snapshot;
    w.str(snap.prompt.mode().as_str());
    w.f64(snap.tau());
    let d = snap.encoders.dims();
    for v in [d.d_model, d.blocks, d.heads, d.ctx_len, d.d_img] {
        w.u32(v);
    }
    w.u8(d.causal as u8);
    for names in [snap.attrs(), snap.objs()] {
        w.u32(names.len());
        for n in names {
            w.str(n);
        }
    }
    let mut tensors: Vec<(String, &Tensor)> = snap.encoders.named_tensors();
    for p in snap.prompt.params() {
        tensors.push((p.name.clone(), &p.tensor));
    }
    if let Some(b) = &state.best {
        for p in b.prompt.params() {
            tensors.push((format!("{BEST_PREFIX}{}", p.name), &p.tensor));
        }
    }
    w.u32(tensors.len());
    for (n, t) in &tensors {
        w.tensor(n, t);
    }
    let oc = state.optimizer.config();
    w.str(&oc.kind.to_string());
    for v in [oc.lr, oc.beta1, oc.beta2, oc.eps] {
        w.f64(v);
    }
    w.u64(state.optimizer.steps());
    let moments = state.optimizer.state_tensors();
    w.u32(moments.len());
    for (n, t) in &moments {
        w.tensor(n, t);
    }
    match &state.best {
        Some(b) => {
            w.u8(1);
            w.u64(b.epoch as u64);
            w.f64(b.auc);
        }
        None => w.u8(0),
    }
    w.u32(state.history.len());
    for r in &state.history {
        w.u64(r.epoch as u64);
        w.f64(r.loss);
        w.f64(r.train_acc);
        w.u8(r.val.is_some() as u8);
        let v = r.val.unwrap_or(Summary {
            s: 0.0,
            u: 0.0,
            hm: 0.0,
            auc: 0.0,
        });
        for x in [v.s, v.u, v.hm, v.auc] {
            w.f64(x);
        }
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

fn prompt_from(
    tensors: &mut HashMap<String, Tensor>,
    prefix: &str,
    mode: PromptMode,
    n_attrs: usize,
    n_objs: usize,
) -> Result<PromptState> {
    let phi_name = format!("{prefix}{EMBEDDING_PARAM}");
    let phi = tensors
        .remove(&phi_name)
        .ok_or_else(|| integrity(&format!("tensor {phi_name}"), "missing"))?;
    let theta = tensors.remove(&format!("{prefix}{PROMPT_PARAM}"));
    PromptState::from_parts(mode, theta, phi, n_attrs, n_objs)
        .map_err(|e| integrity(&format!("tensor {phi_name}"), e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut rd = Reader {
        r: ByteReader { bytes, pos: 0 },
    };
    let magic = rd.r.take(8).map_err(Reader::trunc("header"))?;
    if magic != MAGIC {
        return Err(integrity("header", "not a checkpoint (bad magic)"));
    }
    let version = rd.u32("header")?;
    if version != VERSION as usize {
        return Err(integrity(
            "header",
            format!("unsupported checkpoint version {version} (this build reads version {VERSION})"),
        ));
    }
    let n = rd.u32("config")?;
    let mut entries = Vec::new();
    for _ in 0..n {
        entries.push((rd.str("config")?, rd.str("config")?));
    }
    let config = TrainConfig::from_entries(&entries).map_err(|e| integrity("config", e.to_string()))?;
    let seed = rd.u64("seed")?;
    if seed != config.seed {
        return Err(integrity("seed", "disagrees with the config echo"));
    }
    let epoch = rd.u64("epoch")? as usize;
    let mode: PromptMode = rd.str("mode")?.parse().map_err(|e: Error| integrity("mode", e.to_string()))?;
    let tau = rd.f64("tau")?;
    let mut dv = [0usize; 5];
    for v in dv.iter_mut() {
        *v = rd.u32("dims")?;
    }
    let causal = match rd.u8("dims")? {
        0 => false,
        1 => true,
        _ => return Err(integrity("dims", "causal flag is not 0 or 1")),
    };
    let dims = EncoderDims {
        d_model: dv[0],
        blocks: dv[1],
        heads: dv[2],
        ctx_len: dv[3],
        d_img: dv[4],
        causal,
    };
    dims.validate().map_err(|e| integrity("dims", e.to_string()))?;
    let mut vocab = [Vec::new(), Vec::new()];
    for v in vocab.iter_mut() {
        let n = rd.u32("vocab")?;
        for _ in 0..n {
            v.push(rd.str("vocab")?);
        }
    }
    let [attrs, objs] = vocab;
    let n = rd.u32("tensors")?;
    let mut tensors = HashMap::new();
    for i in 0..n {
        let (name, t) = rd.tensor(&format!("tensor #{i}"))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(integrity(&format!("tensor {name}"), "duplicate name"));
        }
    }
    let encoders = FrozenEncoders::from_named(dims, &tensors)?;
    let prompt = prompt_from(&mut tensors, "", mode, attrs.len(), objs.len())?;
    let best_prompt = if tensors.contains_key(&format!("{BEST_PREFIX}{EMBEDDING_PARAM}")) {
        Some(prompt_from(&mut tensors, BEST_PREFIX, mode, attrs.len(), objs.len())?)
    } else {
        None
    };
    let snapshot = ModelSnapshot::new(encoders, prompt, tau, attrs, objs).map_err(|e| integrity("tensors", e.to_string()))?;

    let kind: OptimizerKind = rd
        .str("optimizer")?
        .parse()
        .map_err(|e: Error| integrity("optimizer", e.to_string()))?;
    let oc = OptimizerConfig {
        kind,
        lr: rd.f64("optimizer")?,
        beta1: rd.f64("optimizer")?,
        beta2: rd.f64("optimizer")?,
        eps: rd.f64("optimizer")?,
    };
    let steps = rd.u64("optimizer")?;
    let n = rd.u32("optimizer")?;
    let mut moments = Vec::new();
    for i in 0..n {
        moments.push(rd.tensor(&format!("optimizer record #{i}"))?);
    }
    let optimizer = Optimizer::restore(oc, steps, &moments)?;

    let best = match rd.u8("best")? {
        0 => None,
        1 => {
            let epoch = rd.u64("best")? as usize;
            let auc = rd.f64("best")?;
            let prompt = best_prompt.ok_or_else(|| integrity("best", "best prompt tensors missing"))?;
            Some(BestSnapshot { epoch, auc, prompt })
        }
        _ => return Err(integrity("best", "flag is not 0 or 1")),
    };
    let n = rd.u32("history")?;
    let mut history = Vec::new();
    for i in 0..n {
        let rec = format!("history #{i}");
        let epoch = rd.u64(&rec)? as usize;
        let loss = rd.f64(&rec)?;
        let train_acc = rd.f64(&rec)?;
        let has_val = rd.u8(&rec)?;
        let mut v = [0.0; 4];
        for x in v.iter_mut() {
            *x = rd.f64(&rec)?;
        }
        history.push(EpochRecord {
            epoch,
            loss,
            train_acc,
            val: (has_val == 1).then_some(Summary {
                s: v[0],
                u: v[1],
                hm: v[2],
                auc: v[3],
            }),
        });
    }
    let body = rd.r.pos;
    let stored = rd.r.take(32).map_err(Reader::trunc("checksum"))?;
    if rd.r.pos != bytes.len() {
        return Err(integrity("checksum", "trailing bytes"));
    }
    if Sha256::digest(&bytes[..body]).as_slice() != stored {
        return Err(integrity("checksum", "content does not match its SHA-256 digest"));
    }
    Ok(TrainState {
        config,
        epoch,
        snapshot,
        optimizer,
        best,
        history,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Human-readable summary for `czsl inspect`.
pub fn describe(state: &TrainState) -> String {
    let snap = &state.snapshot;
    let p = &snap.prompt;
    let mut s = String::new();
    let _ = writeln!(s, "format version: {VERSION}");
    let _ = writeln!(s, "mode: {}", p.mode());
    let _ = writeln!(s, "epoch: {}", state.epoch);
    let _ = writeln!(s, "seed: {}", state.config.seed);
    match p.soft_prompt() {
        Some(t) => {
            let _ = writeln!(s, "theta: {}x{}{}", t.tensor.rows(), t.tensor.cols(), frozen_tag(t.frozen));
        }
        None => {
            let _ = writeln!(s, "theta: 0x{} (empty)", p.d_model());
        }
    }
    let e = &p.soft_embedding().tensor;
    let _ = writeln!(s, "phi: {}x{}{}", e.rows(), e.cols(), frozen_tag(p.soft_embedding().frozen));
    let _ = writeln!(s, "trainable scalars: {}", p.trainable_scalar_count());
    let enc: usize = snap.encoders.named_tensors().iter().map(|(_, t)| t.numel()).sum();
    let _ = writeln!(s, "frozen encoder scalars: {enc}");
    let _ = writeln!(s, "attributes: {}", snap.attrs().len());
    let _ = writeln!(s, "objects: {}", snap.objs().len());
    match &state.best {
        Some(b) => {
            let _ = writeln!(s, "best epoch: {} (val AUC {})", b.epoch, b.auc);
        }
        None => {
            let _ = writeln!(s, "best epoch: none");
        }
    }
    let _ = writeln!(s, "config:");
    for (k, v) in state.config.entries() {
        let _ = writeln!(s, "  {k} = {v}");
    }
    s
}

fn frozen_tag(frozen: bool) -> &'static str {
    if frozen {
        " (frozen)"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::training::{train, Trainer};

    fn trained() -> TrainState {
        let (space, feats) = synth_generate(&SynthConfig {
            n_attrs: 3,
            n_objs: 4,
            d_img: 8,
            images_per_pair: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            d_model: 16,
            ..TrainConfig::default()
        };
        train(&cfg, &space, &feats, None).unwrap().0
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let st = trained();
        let bytes = to_bytes(&st);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, st);
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(describe(&back), describe(&st));
    }

    #[test]
    fn fresh_state_without_best_round_trips() {
        let (space, feats) = synth_generate(&SynthConfig {
            n_attrs: 3,
            n_objs: 3,
            d_img: 4,
            images_per_pair: 5,
            unseen_frac: 0.3,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            d_model: 8,
            heads: 2,
            prompt_len: 0,
            mode: crate::prompt::PromptMode::CspSoftEmbedding,
            ..TrainConfig::default()
        };
        let st = Trainer::new(&cfg, &space, &feats).unwrap().into_state();
        assert_eq!(from_bytes(&to_bytes(&st)).unwrap(), st);
    }

    #[test]
    fn truncation_and_corruption_are_reported() {
        let bytes = to_bytes(&trained());
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            match from_bytes(&bytes[..cut]) {
                Err(Error::Integrity { record, .. }) => assert!(!record.is_empty()),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Integrity { record, .. }) if record == "checksum"));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = to_bytes(&trained());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported checkpoint version 2"), "{err}");
    }

    #[test]
    fn describe_lists_block_shapes() {
        let text = describe(&trained());
        assert!(text.contains("theta: 3x16\n"), "{text}");
        assert!(text.contains("phi: 7x16\n"), "{text}");
        assert!(text.contains("trainable scalars: 160\n"), "{text}");
    }
}
