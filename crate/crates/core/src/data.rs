//! Composition spaces, split files, target sets and the synthetic generator.
//!
//! A data directory holds whitespace-separated UTF-8 text files:
//!
//! - `train_pairs.txt`: one `attribute object` per line, the seen pairs.
//! - either `val_seen_pairs.txt`, `val_unseen_pairs.txt`, `test_seen_pairs.txt`,
//!   `test_unseen_pairs.txt`, or the combined `val_pairs.txt` / `test_pairs.txt`
//!   in which membership in `train_pairs.txt` decides seen versus unseen.
//! - optional `attrs.txt` / `objs.txt`: one name per line. Without them the
//!   vocabularies are the sorted union of names used by the pair files.
//! - optional `samples.txt`: `image_id attribute object split` per line,
//!   with `split` one of `train`, `val`, `test`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::ImageFeatureTable;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub attr: usize,
    pub obj: usize,
}

impl Pair {
    pub fn new(attr: usize, obj: usize) -> Self {
        Self { attr, obj }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Evaluation phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Val,
    Test,
}

impl Phase {
    pub fn split(self) -> Split {
        match self {
            Phase::Val => Split::Val,
            Phase::Test => Split::Test,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.split().as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Phase::Val),
            "test" => Ok(Phase::Test),
            other => Err(Error::Config(format!("unknown phase '{other}' (expected val or test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CzslSetting {
    /// Target set is the phase's unseen pairs.
    Standard,
    /// Target set is the phase's seen and unseen pairs (closed world).
    Generalized,
    /// Target set is every attribute-object combination.
    OpenWorld,
}

impl fmt::Display for CzslSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CzslSetting::Standard => "standard",
            CzslSetting::Generalized => "generalized",
            CzslSetting::OpenWorld => "open_world",
        })
    }
}

impl FromStr for CzslSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CzslSetting::Standard),
            "generalized" => Ok(CzslSetting::Generalized),
            "open_world" => Ok(CzslSetting::OpenWorld),
            other => Err(Error::Config(format!(
                "unknown setting '{other}' (expected standard, generalized or open_world)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image_id: String,
    pub pair: Pair,
    pub split: Split,
}

/// Vocabularies, pair splits and labelled samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositionSpace {
    attrs: Vec<String>,
    objs: Vec<String>,
    train_pairs: Vec<Pair>,
    val_seen: Vec<Pair>,
    val_unseen: Vec<Pair>,
    test_seen: Vec<Pair>,
    test_unseen: Vec<Pair>,
    samples: Vec<Sample>,
    seen: HashSet<Pair>,
}

/// Pair sets making up a [`CompositionSpace`].
#[derive(Clone, Debug, Default)]
pub struct PairSplits {
    pub train: Vec<Pair>,
    pub val_seen: Vec<Pair>,
    pub val_unseen: Vec<Pair>,
    pub test_seen: Vec<Pair>,
    pub test_unseen: Vec<Pair>,
}

impl CompositionSpace {
    pub fn new(
        attrs: Vec<String>,
        objs: Vec<String>,
        splits: PairSplits,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let space = Self {
            seen: splits.train.iter().copied().collect(),
            attrs,
            objs,
            train_pairs: splits.train,
            val_seen: splits.val_seen,
            val_unseen: splits.val_unseen,
            test_seen: splits.test_seen,
            test_unseen: splits.test_unseen,
            samples,
        };
        space.validate()?;
        Ok(space)
    }

    fn validate(&self) -> Result<()> {
        let v = |file: &str, msg: String| Error::Validation {
            file: file.to_string(),
            line: 0,
            msg,
        };
        if self.attrs.is_empty() || self.objs.is_empty() {
            return Err(v("attrs/objs", "vocabularies must be nonempty".into()));
        }
        for (file, names) in [("attrs", &self.attrs), ("objs", &self.objs)] {
            let mut set = HashSet::new();
            for n in names {
                if !set.insert(n) {
                    return Err(v(file, format!("duplicate name '{n}'")));
                }
            }
        }
        let named = [
            ("train_pairs", &self.train_pairs),
            ("val_seen_pairs", &self.val_seen),
            ("val_unseen_pairs", &self.val_unseen),
            ("test_seen_pairs", &self.test_seen),
            ("test_unseen_pairs", &self.test_unseen),
        ];
        for (file, pairs) in named {
            let mut set = HashSet::new();
            for p in pairs.iter() {
                if p.attr >= self.attrs.len() || p.obj >= self.objs.len() {
                    return Err(v(file, format!("pair {p:?} outside A×O")));
                }
                if !set.insert(*p) {
                    return Err(v(file, format!("duplicate pair '{}'", self.pair_name(*p))));
                }
            }
        }
        for (seen_file, seen, unseen_file, unseen) in [
            ("val_seen_pairs", &self.val_seen, "val_unseen_pairs", &self.val_unseen),
            ("test_seen_pairs", &self.test_seen, "test_unseen_pairs", &self.test_unseen),
        ] {
            for p in seen.iter() {
                if !self.seen.contains(p) {
                    return Err(v(
                        seen_file,
                        format!("seen pair '{}' is not a training pair", self.pair_name(*p)),
                    ));
                }
            }
            let seen_set: HashSet<_> = seen.iter().collect();
            for p in unseen.iter() {
                if self.seen.contains(p) || seen_set.contains(p) {
                    return Err(v(
                        unseen_file,
                        format!(
                            "pair '{}' is both seen and unseen (seen ∩ unseen must be empty)",
                            self.pair_name(*p)
                        ),
                    ));
                }
            }
        }
        let val: HashSet<&Pair> = self.val_seen.iter().chain(&self.val_unseen).collect();
        let test: HashSet<&Pair> = self.test_seen.iter().chain(&self.test_unseen).collect();
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(&s.image_id) {
                return Err(v("samples", format!("duplicate image id '{}'", s.image_id)));
            }
            let ok = match s.split {
                Split::Train => self.seen.contains(&s.pair),
                Split::Val => val.contains(&s.pair),
                Split::Test => test.contains(&s.pair),
            };
            if !ok {
                return Err(v(
                    "samples",
                    format!(
                        "sample '{}' labelled '{}' is not in the {} pair set",
                        s.image_id,
                        self.pair_name(s.pair),
                        s.split.as_str()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn attrs(&self) -> &[String] {
        &self.attrs
    }

    pub fn objs(&self) -> &[String] {
        &self.objs
    }

    pub fn n_attrs(&self) -> usize {
        self.attrs.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objs.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.attrs.len() * self.objs.len()
    }

    pub fn train_pairs(&self) -> &[Pair] {
        &self.train_pairs
    }

    pub fn seen_pairs(&self, phase: Phase) -> &[Pair] {
        match phase {
            Phase::Val => &self.val_seen,
            Phase::Test => &self.test_seen,
        }
    }

    pub fn unseen_pairs(&self, phase: Phase) -> &[Pair] {
        match phase {
            Phase::Val => &self.val_unseen,
            Phase::Test => &self.test_unseen,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Training pairs are the seen set Y_seen.
    pub fn is_seen(&self, pair: Pair) -> bool {
        self.seen.contains(&pair)
    }

    pub fn contains(&self, pair: Pair) -> bool {
        pair.attr < self.attrs.len() && pair.obj < self.objs.len()
    }

    pub fn pair_name(&self, p: Pair) -> String {
        let a = self.attrs.get(p.attr).map_or("?", String::as_str);
        let o = self.objs.get(p.obj).map_or("?", String::as_str);
        format!("{a} {o}")
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|a| a == name)
    }

    pub fn obj_index(&self, name: &str) -> Option<usize> {
        self.objs.iter().position(|o| o == name)
    }

    pub fn stats(&self) -> SplitStats {
        let count = |s: Split| self.samples_in(s).count();
        SplitStats {
            attrs: self.n_attrs(),
            objs: self.n_objs(),
            pairs: self.n_pairs(),
            train_pairs: self.train_pairs.len(),
            train_images: count(Split::Train),
            val_seen_pairs: self.val_seen.len(),
            val_unseen_pairs: self.val_unseen.len(),
            val_images: count(Split::Val),
            test_seen_pairs: self.test_seen.len(),
            test_unseen_pairs: self.test_unseen.len(),
            test_images: count(Split::Test),
        }
    }
}

/// Per-split counts, printed in the usual dataset-statistics row layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitStats {
    pub attrs: usize,
    pub objs: usize,
    pub pairs: usize,
    pub train_pairs: usize,
    pub train_images: usize,
    pub val_seen_pairs: usize,
    pub val_unseen_pairs: usize,
    pub val_images: usize,
    pub test_seen_pairs: usize,
    pub test_unseen_pairs: usize,
    pub test_images: usize,
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("# Attr.", self.attrs),
            ("# Obj.", self.objs),
            ("# Attr. x Obj.", self.pairs),
            ("# Train Pair", self.train_pairs),
            ("# Train Img.", self.train_images),
            ("# Val. Seen Pair", self.val_seen_pairs),
            ("# Val. Unseen Pair", self.val_unseen_pairs),
            ("# Val. Img.", self.val_images),
            ("# Test Seen Pair", self.test_seen_pairs),
            ("# Test Unseen Pair", self.test_unseen_pairs),
            ("# Test Img.", self.test_images),
        ];
        for (label, n) in rows {
            writeln!(f, "{label:<20}{n}")?;
        }
        Ok(())
    }
}

/// Pairs the model must choose among, in attribute-major order.
pub fn target_set(space: &CompositionSpace, setting: CzslSetting, phase: Phase) -> Vec<Pair> {
    let mut pairs: Vec<Pair> = match setting {
        CzslSetting::Standard => space.unseen_pairs(phase).to_vec(),
        CzslSetting::Generalized => space
            .seen_pairs(phase)
            .iter()
            .chain(space.unseen_pairs(phase))
            .copied()
            .collect(),
        CzslSetting::OpenWorld => (0..space.n_attrs())
            .flat_map(|a| (0..space.n_objs()).map(move |o| Pair::new(a, o)))
            .collect(),
    };
    pairs.sort();
    pairs.dedup();
    pairs
}

// ---------------------------------------------------------------------------
// Split files

const TRAIN_FILE: &str = "train_pairs.txt";
const SPLIT_FILES: [&str; 4] = [
    "val_seen_pairs.txt",
    "val_unseen_pairs.txt",
    "test_seen_pairs.txt",
    "test_unseen_pairs.txt",
];
const COMBINED_FILES: [&str; 2] = ["val_pairs.txt", "test_pairs.txt"];
const SAMPLES_FILE: &str = "samples.txt";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-blank lines as `(1-based line number, whitespace tokens)`.
fn token_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, t)| !t.is_empty())
}

struct NamedPairs {
    file: String,
    lines: Vec<(usize, String, String)>,
}

fn read_pair_file(dir: &Path, name: &str) -> Result<NamedPairs> {
    let text = read_text(&dir.join(name))?;
    let mut lines = Vec::new();
    for (line, toks) in token_lines(&text) {
        if toks.len() != 2 {
            return Err(Error::Validation {
                file: name.into(),
                line,
                msg: format!("expected 'attribute object', found {} fields", toks.len()),
            });
        }
        lines.push((line, toks[0].to_string(), toks[1].to_string()));
    }
    Ok(NamedPairs {
        file: name.into(),
        lines,
    })
}

fn read_vocab(dir: &Path, name: &str) -> Result<Option<Vec<String>>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = read_text(&path)?;
    let mut out = Vec::new();
    for (line, toks) in token_lines(&text) {
        if toks.len() != 1 {
            return Err(Error::Validation {
                file: name.into(),
                line,
                msg: "expected one name per line".into(),
            });
        }
        out.push(toks[0].to_string());
    }
    Ok(Some(out))
}

struct Resolver {
    attrs: HashMap<String, usize>,
    objs: HashMap<String, usize>,
}

impl Resolver {
    fn new(attrs: &[String], objs: &[String]) -> Self {
        let index = |v: &[String]| v.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            attrs: index(attrs),
            objs: index(objs),
        }
    }

    fn pair(&self, file: &str, line: usize, a: &str, o: &str) -> Result<Pair> {
        let err = |kind: &str, n: &str| Error::Validation {
            file: file.into(),
            line,
            msg: format!("unknown {kind} '{n}'"),
        };
        let attr = *self.attrs.get(a).ok_or_else(|| err("attribute", a))?;
        let obj = *self.objs.get(o).ok_or_else(|| err("object", o))?;
        Ok(Pair { attr, obj })
    }

    fn resolve(&self, np: &NamedPairs) -> Result<Vec<Pair>> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(np.lines.len());
        for (line, a, o) in &np.lines {
            let p = self.pair(&np.file, *line, a, o)?;
            if !seen.insert(p) {
                return Err(Error::Validation {
                    file: np.file.clone(),
                    line: *line,
                    msg: format!("duplicate pair '{a} {o}'"),
                });
            }
            out.push(p);
        }
        Ok(out)
    }
}

/// Read and validate a data directory (see the module docs for the layout).
pub fn load_splits(dir: &Path) -> Result<CompositionSpace> {
    let train = read_pair_file(dir, TRAIN_FILE)?;
    let separate = SPLIT_FILES.iter().all(|f| dir.join(f).exists());
    let others: Vec<NamedPairs> = if separate {
        SPLIT_FILES
            .iter()
            .map(|f| read_pair_file(dir, f))
            .collect::<Result<_>>()?
    } else if COMBINED_FILES.iter().all(|f| dir.join(f).exists()) {
        COMBINED_FILES
            .iter()
            .map(|f| read_pair_file(dir, f))
            .collect::<Result<_>>()?
    } else {
        return Err(Error::Validation {
            file: dir.display().to_string(),
            line: 0,
            msg: format!(
                "missing split files: need {} or {}",
                SPLIT_FILES.join(", "),
                COMBINED_FILES.join(", ")
            ),
        });
    };

    let collect_names = |pick: fn(&(usize, String, String)) -> &String| {
        let mut names: Vec<String> = std::iter::once(&train)
            .chain(&others)
            .flat_map(|np| np.lines.iter().map(pick).cloned())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        names.sort();
        names
    };
    let attrs = match read_vocab(dir, "attrs.txt")? {
        Some(v) => v,
        None => collect_names(|l| &l.1),
    };
    let objs = match read_vocab(dir, "objs.txt")? {
        Some(v) => v,
        None => collect_names(|l| &l.2),
    };
    let resolver = Resolver::new(&attrs, &objs);
    let train_pairs = resolver.resolve(&train)?;
    let train_set: HashSet<Pair> = train_pairs.iter().copied().collect();

    let mut splits = PairSplits {
        train: train_pairs,
        ..Default::default()
    };
    if separate {
        let resolved: Vec<Vec<Pair>> = others.iter().map(|np| resolver.resolve(np)).collect::<Result<_>>()?;
        // line-level disjointness errors before the structural checks in `new`
        for phase in 0..2 {
            let seen: HashSet<Pair> = resolved[2 * phase].iter().copied().collect();
            let np = &others[2 * phase + 1];
            for ((line, a, o), p) in np.lines.iter().zip(&resolved[2 * phase + 1]) {
                if seen.contains(p) || train_set.contains(p) {
                    return Err(Error::Validation {
                        file: np.file.clone(),
                        line: *line,
                        msg: format!("pair '{a} {o}' is both seen and unseen (seen ∩ unseen must be empty)"),
                    });
                }
            }
            let np = &others[2 * phase];
            for ((line, a, o), p) in np.lines.iter().zip(&resolved[2 * phase]) {
                if !train_set.contains(p) {
                    return Err(Error::Validation {
                        file: np.file.clone(),
                        line: *line,
                        msg: format!("seen pair '{a} {o}' is not a training pair"),
                    });
                }
            }
        }
        let mut it = resolved.into_iter();
        splits.val_seen = it.next().unwrap();
        splits.val_unseen = it.next().unwrap();
        splits.test_seen = it.next().unwrap();
        splits.test_unseen = it.next().unwrap();
    } else {
        let split = |np: &NamedPairs| -> Result<(Vec<Pair>, Vec<Pair>)> {
            let pairs = resolver.resolve(np)?;
            Ok(pairs.into_iter().partition(|p| train_set.contains(p)))
        };
        (splits.val_seen, splits.val_unseen) = split(&others[0])?;
        (splits.test_seen, splits.test_unseen) = split(&others[1])?;
    }

    let mut samples = Vec::new();
    let samples_path = dir.join(SAMPLES_FILE);
    if samples_path.exists() {
        let text = read_text(&samples_path)?;
        let val: HashSet<Pair> = splits.val_seen.iter().chain(&splits.val_unseen).copied().collect();
        let test: HashSet<Pair> = splits.test_seen.iter().chain(&splits.test_unseen).copied().collect();
        let mut ids = HashSet::new();
        for (line, toks) in token_lines(&text) {
            let bad = |msg: String| Error::Validation {
                file: SAMPLES_FILE.into(),
                line,
                msg,
            };
            if toks.len() != 4 {
                return Err(bad(format!(
                    "expected 'image_id attribute object split', found {} fields",
                    toks.len()
                )));
            }
            let pair = resolver.pair(SAMPLES_FILE, line, toks[1], toks[2])?;
            let split: Split = toks[3].parse().map_err(|_| bad(format!("unknown split '{}'", toks[3])))?;
            if !ids.insert(toks[0]) {
                return Err(bad(format!("duplicate image id '{}'", toks[0])));
            }
            let member = match split {
                Split::Train => train_set.contains(&pair),
                Split::Val => val.contains(&pair),
                Split::Test => test.contains(&pair),
            };
            if !member {
                return Err(bad(format!(
                    "pair '{} {}' is not in the {} pair set",
                    toks[1], toks[2], toks[3]
                )));
            }
            samples.push(Sample {
                image_id: toks[0].to_string(),
                pair,
                split,
            });
        }
    }
    CompositionSpace::new(attrs, objs, splits, samples)
}

/// Write every file read by [`load_splits`], in the separate-file layout.
pub fn save_splits(space: &CompositionSpace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    let lines = |names: &[String]| names.iter().map(|n| format!("{n}\n")).collect::<String>();
    let pairs = |ps: &[Pair]| ps.iter().map(|p| format!("{}\n", space.pair_name(*p))).collect::<String>();
    write("attrs.txt", lines(&space.attrs))?;
    write("objs.txt", lines(&space.objs))?;
    write(TRAIN_FILE, pairs(&space.train_pairs))?;
    write(SPLIT_FILES[0], pairs(&space.val_seen))?;
    write(SPLIT_FILES[1], pairs(&space.val_unseen))?;
    write(SPLIT_FILES[2], pairs(&space.test_seen))?;
    write(SPLIT_FILES[3], pairs(&space.test_unseen))?;
    let samples = space
        .samples
        .iter()
        .map(|s| format!("{} {} {}\n", s.image_id, space.pair_name(s.pair), s.split.as_str()))
        .collect();
    write(SAMPLES_FILE, samples)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Generator settings for a dataset where each image feature is the sum of an
/// attribute prototype and an object prototype plus Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub d_img: usize,
    pub noise: f64,
    pub images_per_pair: usize,
    pub unseen_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_attrs: 8,
            n_objs: 8,
            d_img: 32,
            noise: 0.05,
            images_per_pair: 20,
            unseen_frac: 0.25,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// `round(unseen_frac · |A|·|O|)`.
    pub fn unseen_count(&self) -> usize {
        (self.unseen_frac * (self.n_attrs * self.n_objs) as f64).round() as usize
    }

    /// Seen-pair image allotment `(train, val, test)`; unseen pairs put all
    /// `images_per_pair` images into their phase.
    pub fn seen_image_split(&self) -> (usize, usize, usize) {
        let held = (self.images_per_pair / 5).max(1);
        (self.images_per_pair.saturating_sub(2 * held), held, held)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_attrs == 0 || self.n_objs == 0 || self.d_img == 0 {
            return bad("attrs, objs and d_img must be positive".into());
        }
        if !(self.unseen_frac > 0.0 && self.unseen_frac < 1.0) {
            return bad(format!(
                "unseen fraction must lie in (0, 1), got {} (no trainable pairs would remain)",
                self.unseen_frac
            ));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.seen_image_split().0 == 0 {
            return bad("images per pair must be at least 3".into());
        }
        let unseen = self.unseen_count();
        if unseen < 2 {
            return bad(format!(
                "{} unseen pairs is too few; val and test each need one",
                unseen
            ));
        }
        Ok(())
    }
}

/// Generate a composition space with split files and the matching feature table.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(CompositionSpace, ImageFeatureTable)> {
    cfg.validate()?;
    let (na, no) = (cfg.n_attrs, cfg.n_objs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut all: Vec<Pair> = (0..na).flat_map(|a| (0..no).map(move |o| Pair::new(a, o))).collect();
    all.shuffle(&mut rng);
    let mut attr_seen = vec![no; na];
    let mut obj_seen = vec![na; no];
    let mut unseen = Vec::new();
    let target = cfg.unseen_count();
    for p in &all {
        if unseen.len() == target {
            break;
        }
        if attr_seen[p.attr] > 1 && obj_seen[p.obj] > 1 {
            attr_seen[p.attr] -= 1;
            obj_seen[p.obj] -= 1;
            unseen.push(*p);
        }
    }
    if unseen.len() < target {
        return Err(Error::Data(format!(
            "cannot hold out {target} of {} pairs while every attribute and object stays in a training pair",
            na * no
        )));
    }
    let half = unseen.len() / 2;
    let mut val_unseen = unseen[..half].to_vec();
    let mut test_unseen = unseen[half..].to_vec();
    val_unseen.sort();
    test_unseen.sort();
    let unseen_set: HashSet<Pair> = unseen.iter().copied().collect();
    let mut train: Vec<Pair> = all.iter().copied().filter(|p| !unseen_set.contains(p)).collect();
    train.sort();

    let prototypes = draw_prototypes(na + no, cfg.d_img, &mut rng);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let (n_train, n_val, n_test) = cfg.seen_image_split();
    let val_set: HashSet<Pair> = val_unseen.iter().copied().collect();

    let mut table = ImageFeatureTable::new(cfg.d_img);
    let mut samples = Vec::new();
    let mut feature = vec![0.0; cfg.d_img];
    for a in 0..na {
        for o in 0..no {
            let p = Pair::new(a, o);
            let plan: Vec<(Split, usize)> = if unseen_set.contains(&p) {
                let phase = if val_set.contains(&p) { Split::Val } else { Split::Test };
                vec![(phase, cfg.images_per_pair)]
            } else {
                vec![(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)]
            };
            let mut k = 0;
            for (split, count) in plan {
                for _ in 0..count {
                    for (i, f) in feature.iter_mut().enumerate() {
                        let base = prototypes[a][i] + prototypes[na + o][i];
                        *f = if cfg.noise > 0.0 { base + noise.sample(&mut rng) } else { base };
                    }
                    let id = format!("a{a:02}_o{o:02}_{k:03}");
                    table.insert(id.clone(), &feature)?;
                    samples.push(Sample {
                        image_id: id,
                        pair: p,
                        split,
                    });
                    k += 1;
                }
            }
        }
    }

    let width = |n: usize| n.saturating_sub(1).to_string().len().max(2);
    let attrs = (0..na).map(|a| format!("attr{a:0w$}", w = width(na))).collect();
    let objs = (0..no).map(|o| format!("obj{o:0w$}", w = width(no))).collect();
    let space = CompositionSpace::new(
        attrs,
        objs,
        PairSplits {
            val_seen: train.clone(),
            test_seen: train.clone(),
            train,
            val_unseen,
            test_unseen,
        },
        samples,
    )?;
    Ok((space, table))
}

/// Unit prototypes; orthonormal (Gram-Schmidt) whenever `n ≤ d`.
fn draw_prototypes(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        if out.len() < d {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nrm);
        out.push(v);
    }
    out
}
