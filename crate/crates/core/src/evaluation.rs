//! Metric engine: calibration-bias sweep, S/U/HM/AUC, feasibility masking.
//!
//! For each image, let `ms`/`mu` be its best seen-pair and best unseen-pair
//! scores. Adding a bias `c` to every unseen column flips the image's
//! prediction from the seen to the unseen argmax exactly when
//! `c >= ms - mu`, so these gaps are the only biases at which any accuracy
//! can change. The sweep evaluates `-inf` plus every distinct gap. At an
//! exact tie the unseen pair wins.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{dot, norm, Tensor, MIN_NORM};
use crate::data::{target_set, CompositionSpace, CzslSetting, Pair, Phase};
use crate::encoders::ImageFeatureTable;
use crate::error::{Error, Result};
use crate::model::{argmax, ModelSnapshot, Scorer};

pub const MIT_STATES_THRESHOLD: f64 = 0.40691;
pub const UT_ZAPPOS_THRESHOLD: f64 = 0.5299;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub s: f64,
    pub u: f64,
    pub hm: f64,
    pub auc: f64,
}

/// `N_img × P` cosine/τ scores; disallowed pairs are `-inf`.
pub fn score_matrix(
    snapshot: &ModelSnapshot,
    features: &ImageFeatureTable,
    image_ids: &[&str],
    target_pairs: &[Pair],
    allowed: Option<&[bool]>,
) -> Result<Tensor> {
    let scorer = Scorer::new(snapshot, target_pairs, allowed)?;
    let mut data = Vec::with_capacity(image_ids.len() * target_pairs.len());
    for id in image_ids {
        data.extend(scorer.scores(&snapshot.image_vector(features, id)?)?);
    }
    Tensor::matrix(image_ids.len(), target_pairs.len(), data)
}

fn harmonic(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

fn best_in(row: &[f64], flags: &[bool], want: bool) -> (f64, Option<usize>) {
    let cols: Vec<f64> = row
        .iter()
        .zip(flags)
        .map(|(&v, &f)| if f == want { v } else { f64::NEG_INFINITY })
        .collect();
    match argmax(&cols) {
        Some(j) => (cols[j], Some(j)),
        None => (f64::NEG_INFINITY, None),
    }
}

/// Full accuracy curve over every distinct calibration bias, in increasing bias order.
/// `truth[i]` is the target-set column of image `i`'s label; `seen[j]` flags seen columns.
pub fn bias_sweep(scores: &Tensor, truth: &[usize], seen: &[bool]) -> Result<Vec<CurvePoint>> {
    let (n, p) = scores.dims2("bias_sweep")?;
    if truth.len() != n || seen.len() != p {
        return Err(Error::shape("bias_sweep", &[truth.len(), seen.len()], &[n, p]));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= p) {
        return Err(Error::Index { value: t, bound: p });
    }
    let n_seen = truth.iter().filter(|&&t| seen[t]).count();
    let n_unseen = n - n_seen;
    if n_seen == 0 || n_unseen == 0 {
        return Err(Error::Contract(format!(
            "bias sweep needs seen- and unseen-labeled images, got {n_seen} and {n_unseen}"
        )));
    }

    // Per image: (gap at which it flips, +1/-1/0 change in correct counts when it flips).
    let mut flips: Vec<(f64, i64, bool)> = Vec::new();
    let (mut seen_hits, mut unseen_hits) = (0i64, 0i64);
    for (i, &t) in truth.iter().enumerate() {
        let row = scores.row(i);
        let (ms, js) = best_in(row, seen, true);
        let (mu, ju) = best_in(row, seen, false);
        let correct_seen = js == Some(t);
        let correct_unseen = ju == Some(t);
        let label_seen = seen[t];
        let starts_unseen = js.is_none() && ju.is_some();
        let correct_now = if starts_unseen { correct_unseen } else { correct_seen };
        if correct_now {
            if label_seen {
                seen_hits += 1;
            } else {
                unseen_hits += 1;
            }
        }
        if js.is_some() && ju.is_some() {
            let delta = correct_unseen as i64 - correct_seen as i64;
            flips.push((ms - mu, delta, label_seen));
        }
    }
    flips.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (ns, nu) = (n_seen as f64, n_unseen as f64);
    let mut curve = vec![CurvePoint {
        bias: f64::NEG_INFINITY,
        seen_acc: seen_hits as f64 / ns,
        unseen_acc: unseen_hits as f64 / nu,
    }];
    let mut k = 0;
    while k < flips.len() {
        let c = flips[k].0;
        while k < flips.len() && flips[k].0 == c {
            let (_, delta, label_seen) = flips[k];
            if label_seen {
                seen_hits += delta;
            } else {
                unseen_hits += delta;
            }
            k += 1;
        }
        curve.push(CurvePoint {
            bias: c,
            seen_acc: seen_hits as f64 / ns,
            unseen_acc: unseen_hits as f64 / nu,
        });
    }
    Ok(curve)
}

/// Monotone frontier of the curve as `(unseen_acc, seen_acc)`: points ordered
/// along the unseen axis (higher seen accuracy first on ties), with seen
/// accuracy clipped to be non-increasing. A sweep curve is already monotone,
/// so for it this is exactly the bias order and nothing is clipped.
pub fn auc_path(curve: &[CurvePoint]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.unseen_acc, p.seen_acc)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    for i in (0..pts.len().saturating_sub(1)).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    pts
}

pub fn summarize(curve: &[CurvePoint]) -> Summary {
    let fold = |f: &dyn Fn(&CurvePoint) -> f64| curve.iter().map(f).fold(0.0, f64::max);
    let frontier = auc_path(curve);
    // Seen accuracy integrated over the unseen-accuracy axis.
    let auc = frontier
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .fold(0.0, |a, b| a + b);
    Summary {
        s: fold(&|p| p.seen_acc),
        u: fold(&|p| p.unseen_acc),
        hm: fold(&|p| harmonic(p.seen_acc, p.unseen_acc)),
        auc,
    }
}

/// The curve point with the highest harmonic mean (earliest on ties).
pub fn best_hm_point(curve: &[CurvePoint]) -> Option<CurvePoint> {
    let mut best: Option<(f64, CurvePoint)> = None;
    for p in curve {
        let h = harmonic(p.seen_acc, p.unseen_acc);
        if best.is_none_or(|(b, _)| h > b) {
            best = Some((h, *p));
        }
    }
    best.map(|(_, p)| p)
}

/// Plausibility of every non-training pair from primitive-embedding similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityScores {
    scores: BTreeMap<Pair, f64>,
    /// Primitives without any seen partner; their half of the score is 0.
    pub unpartnered: Vec<String>,
}

impl FeasibilityScores {
    /// `+inf` for training pairs.
    pub fn score(&self, pair: Pair) -> f64 {
        self.scores.get(&pair).copied().unwrap_or(f64::INFINITY)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Pair, f64)> + '_ {
        self.scores.iter().map(|(p, s)| (*p, *s))
    }

    /// `true` where the pair survives the threshold.
    pub fn allowed(&self, pairs: &[Pair], threshold: f64) -> Vec<bool> {
        pairs.iter().map(|&p| self.score(p) >= threshold).collect()
    }
}

fn cosine(a: &[f64], b: &[f64], row: usize) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if !(na >= MIN_NORM && nb >= MIN_NORM) {
        return Err(Error::Degenerate { row });
    }
    Ok(dot(a, b) / (na * nb))
}

/// `embedding` is the `(|A|+|O|) × d` soft-embedding table, attributes first.
pub fn feasibility_scores(space: &CompositionSpace, embedding: &Tensor) -> Result<FeasibilityScores> {
    let (na, no) = (space.n_attrs(), space.n_objs());
    let (rows, _) = embedding.dims2("feasibility_scores")?;
    if rows != na + no {
        return Err(Error::shape("feasibility_scores", embedding.shape(), &[na + no]));
    }
    let attr = |a: usize| embedding.row(a);
    let obj = |o: usize| embedding.row(na + o);
    let mut objs_of = vec![Vec::new(); na];
    let mut attrs_of = vec![Vec::new(); no];
    for p in space.train_pairs() {
        objs_of[p.attr].push(p.obj);
        attrs_of[p.obj].push(p.attr);
    }
    let mut unpartnered = Vec::new();
    for (a, v) in objs_of.iter().enumerate() {
        if v.is_empty() {
            unpartnered.push(space.attrs()[a].clone());
        }
    }
    for (o, v) in attrs_of.iter().enumerate() {
        if v.is_empty() {
            unpartnered.push(space.objs()[o].clone());
        }
    }
    let mut scores = BTreeMap::new();
    for a in 0..na {
        for o in 0..no {
            let pair = Pair::new(a, o);
            if space.is_seen(pair) {
                continue;
            }
            let mut f_attr = f64::NEG_INFINITY;
            for &o2 in &objs_of[a] {
                f_attr = f_attr.max(cosine(obj(o), obj(o2), na + o)?);
            }
            let mut f_obj = f64::NEG_INFINITY;
            for &a2 in &attrs_of[o] {
                f_obj = f_obj.max(cosine(attr(a), attr(a2), a)?);
            }
            let half = |f: f64| if f == f64::NEG_INFINITY { 0.0 } else { f };
            scores.insert(pair, (half(f_attr) + half(f_obj)) / 2.0);
        }
    }
    Ok(FeasibilityScores { scores, unpartnered })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub setting: CzslSetting,
    pub phase: Phase,
    pub summary: Summary,
    pub threshold: Option<f64>,
    pub n_images: usize,
    pub n_pairs: usize,
    pub curve: Vec<CurvePoint>,
    /// Run configuration the report came from, for provenance.
    pub config: Vec<(String, String)>,
}

/// Score every image of `phase` against the setting's target set and sweep.
///
/// In the standard setting only unseen pairs are candidates, so there is no
/// bias to sweep: the single curve point carries the unseen accuracy and
/// seen accuracy 0.
pub fn evaluate(
    snapshot: &ModelSnapshot,
    space: &CompositionSpace,
    features: &ImageFeatureTable,
    setting: CzslSetting,
    phase: Phase,
    threshold: Option<f64>,
) -> Result<EvalReport> {
    snapshot.check_space(space)?;
    match (setting, threshold) {
        (CzslSetting::OpenWorld, None) => {
            return Err(Error::Config(
                "open_world evaluation needs a feasibility threshold".into(),
            ))
        }
        (CzslSetting::OpenWorld, Some(t)) if t.is_nan() => {
            return Err(Error::Config("feasibility threshold is NaN".into()))
        }
        (s, Some(_)) if s != CzslSetting::OpenWorld => {
            return Err(Error::Config(format!(
                "a feasibility threshold only applies to open_world, not {s}"
            )))
        }
        _ => {}
    }
    let pairs = target_set(space, setting, phase);
    if pairs.is_empty() {
        return Err(Error::Data(format!("empty target set for {setting} {phase}")));
    }
    let column: BTreeMap<Pair, usize> = pairs.iter().enumerate().map(|(j, p)| (*p, j)).collect();
    let samples: Vec<_> = space
        .samples_in(phase.split())
        .filter(|s| column.contains_key(&s.pair))
        .collect();
    if samples.is_empty() {
        return Err(Error::Data(format!("no {phase} images for the {setting} target set")));
    }
    let allowed = match threshold {
        Some(t) => Some(feasibility_scores(space, &snapshot.prompt.soft_embedding().tensor)?.allowed(&pairs, t)),
        None => None,
    };
    let ids: Vec<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
    let truth: Vec<usize> = samples.iter().map(|s| column[&s.pair]).collect();
    let scores = score_matrix(snapshot, features, &ids, &pairs, allowed.as_deref())?;
    let curve = if setting == CzslSetting::Standard {
        let hits = (0..scores.rows())
            .filter(|&i| argmax(scores.row(i)) == Some(truth[i]))
            .count();
        vec![CurvePoint {
            bias: 0.0,
            seen_acc: 0.0,
            unseen_acc: hits as f64 / truth.len() as f64,
        }]
    } else {
        let seen: Vec<bool> = pairs.iter().map(|&p| space.is_seen(p)).collect();
        bias_sweep(&scores, &truth, &seen)?
    };
    Ok(EvalReport {
        setting,
        phase,
        summary: summarize(&curve),
        threshold,
        n_images: ids.len(),
        n_pairs: pairs.len(),
        curve,
        config: Vec::new(),
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "setting: {}", self.setting)?;
        writeln!(f, "phase: {}", self.phase)?;
        writeln!(f, "images: {}", self.n_images)?;
        writeln!(f, "pairs: {}", self.n_pairs)?;
        writeln!(f, "S: {}", self.summary.s)?;
        writeln!(f, "U: {}", self.summary.u)?;
        writeln!(f, "HM: {}", self.summary.hm)?;
        writeln!(f, "AUC: {}", self.summary.auc)?;
        match self.threshold {
            Some(t) => writeln!(f, "threshold: {t}")?,
            None => writeln!(f, "threshold: none")?,
        }
        writeln!(f, "curve: {}", self.curve.len())?;
        for p in &self.curve {
            writeln!(f, "{} {} {}", p.bias, p.seen_acc, p.unseen_acc)?;
        }
        writeln!(f, "config: {}", self.config.len())?;
        for (k, v) in &self.config {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn report_error(line: usize, msg: impl Into<String>) -> Error {
    Error::Validation {
        file: "report".into(),
        line,
        msg: msg.into(),
    }
}

struct Lines<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next line and its 1-based number.
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let l = self
            .lines
            .get(self.pos)
            .ok_or_else(|| report_error(self.pos + 1, format!("missing {what}")))?;
        self.pos += 1;
        Ok((self.pos, l))
    }

    fn field(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, l) = self.next(&format!("field '{key}'"))?;
        let v = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(": "))
            .ok_or_else(|| report_error(n, format!("expected '{key}: ...'")))?;
        Ok((n, v))
    }

    fn num<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let (n, v) = self.field(key)?;
        parse_num(n, v)
    }
}

fn parse_num<T: FromStr>(line: usize, v: &str) -> Result<T> {
    v.parse().map_err(|_| report_error(line, format!("bad number '{v}'")))
}

impl FromStr for EvalReport {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut r = Lines {
            lines: text.lines().collect(),
            pos: 0,
        };
        let setting = r.field("setting")?.1.parse()?;
        let phase = r.field("phase")?.1.parse()?;
        let n_images = r.num("images")?;
        let n_pairs = r.num("pairs")?;
        let summary = Summary {
            s: r.num("S")?,
            u: r.num("U")?,
            hm: r.num("HM")?,
            auc: r.num("AUC")?,
        };
        let (n, t) = r.field("threshold")?;
        let threshold = if t == "none" { None } else { Some(parse_num(n, t)?) };
        let count: usize = r.num("curve")?;
        let mut curve = Vec::new();
        for _ in 0..count {
            let (n, l) = r.next("curve point")?;
            let parts: Vec<&str> = l.split(' ').collect();
            if parts.len() != 3 {
                return Err(report_error(n, "curve point needs bias, seen and unseen accuracy"));
            }
            curve.push(CurvePoint {
                bias: parse_num(n, parts[0])?,
                seen_acc: parse_num(n, parts[1])?,
                unseen_acc: parse_num(n, parts[2])?,
            });
        }
        let count: usize = r.num("config")?;
        let mut config = Vec::new();
        for _ in 0..count {
            let (n, l) = r.next("config entry")?;
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| report_error(n, "expected 'key = value'"))?;
            config.push((k.to_string(), v.to_string()));
        }
        if r.pos < r.lines.len() {
            return Err(report_error(r.pos + 1, "trailing content"));
        }
        Ok(EvalReport {
            setting,
            phase,
            summary,
            threshold,
            n_images,
            n_pairs,
            curve,
            config,
        })
    }
}
