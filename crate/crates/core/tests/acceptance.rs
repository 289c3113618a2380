//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use czsl_core::autodiff::gradcheck::relative_error;
use czsl_core::autodiff::{norm, Tensor};
use czsl_core::checkpoint;
use czsl_core::data::{
    load_splits, synth_generate, target_set, CompositionSpace, CzslSetting, Phase, Split, SynthConfig,
};
use czsl_core::encoders::ImageFeatureTable;
use czsl_core::evaluation::{
    best_hm_point, bias_sweep, evaluate, feasibility_scores, summarize, CurvePoint, MIT_STATES_THRESHOLD,
};
use czsl_core::model::{label_probability, logits, ModelSnapshot, Scorer};
use czsl_core::prompt::{PromptMode, PromptState};
use czsl_core::training::{loss_and_grads, run, train, train_step, OutputDir, TrainConfig, TrainState, Trainer};
use czsl_core::Error;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e(err: Error) -> String {
    err.to_string()
}

fn within(limit: Duration, t: Instant, what: &str) -> Result<f64, String> {
    let secs = t.elapsed().as_secs_f64();
    ensure(t.elapsed() < limit, || format!("{what} took {secs:.1}s, limit {}s", limit.as_secs()))?;
    Ok(secs)
}

fn synth(n_attrs: usize, n_objs: usize, unseen_frac: f64, seed: u64) -> (CompositionSpace, ImageFeatureTable) {
    synth_generate(&SynthConfig {
        n_attrs,
        n_objs,
        unseen_frac,
        images_per_pair: 5,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_config(mode: PromptMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        d_model: 16,
        heads: 2,
        blocks: 1,
        ..TrainConfig::default()
    }
}

// 1 -------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let (space, feats) = synth(2, 2, 0.5, 3);
    let cfg = TrainConfig {
        prompt_len: 2,
        d_model: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut snap = TrainState::init(&cfg, &space, feats.d_img()).map_err(e)?.snapshot;
    let train: Vec<_> = space.samples_in(Split::Train).collect();
    let ids: Vec<&str> = train.iter().map(|s| s.image_id.as_str()).collect();
    let images = snap.image_matrix(&feats, &ids).map_err(e)?;
    let pairs = space.train_pairs().to_vec();
    let labels: Vec<usize> = train
        .iter()
        .map(|s| pairs.iter().position(|p| *p == s.pair).unwrap())
        .collect();

    let (_, grads) = loss_and_grads(&snap, &images, &labels, &pairs).map_err(e)?;
    let h = 1e-5;
    let (mut worst, mut scalars) = (0.0f64, 0);
    for (pi, grad) in grads.iter().enumerate() {
        let grad = grad.as_ref().ok_or("a trainable block has no gradient")?;
        for j in 0..grad.numel() {
            let orig = snap.prompt.params_mut()[pi].tensor.data()[j];
            let mut eval_at = |x: f64| -> Result<f64, String> {
                snap.prompt.params_mut()[pi].tensor.data_mut()[j] = x;
                Ok(loss_and_grads(&snap, &images, &labels, &pairs).map_err(e)?.0.loss)
            };
            let numeric = (eval_at(orig + h)? - eval_at(orig - h)?) / (2.0 * h);
            snap.prompt.params_mut()[pi].tensor.data_mut()[j] = orig;
            worst = worst.max(relative_error(grad.data()[j], numeric));
            scalars += 1;
        }
    }
    ensure(scalars == 2 * 16 + 4 * 16, || format!("checked {scalars} scalars, expected 96"))?;
    ensure(worst <= 1e-4, || format!("max relative error {worst:.3e} > 1e-4"))?;
    let secs = within(Duration::from_secs(30), t, "gradient check")?;
    Ok(format!("{scalars} scalars of theta and phi, max rel err {worst:.2e}, {secs:.1}s"))
}

// 2 -------------------------------------------------------------------------

fn freeze_contract() -> Outcome {
    let (space, feats) = synth(4, 4, 0.25, 5);
    let train: Vec<_> = space.samples_in(Split::Train).collect();
    let mut notes = Vec::new();
    for mode in [PromptMode::PromptCompVl, PromptMode::CspSoftEmbedding, PromptMode::CoopSoftPrompt] {
        let cfg = TrainConfig {
            batch_size: 8,
            ..small_config(mode, 11)
        };
        let TrainState {
            mut snapshot,
            mut optimizer,
            ..
        } = TrainState::init(&cfg, &space, feats.d_img()).map_err(e)?;
        let initial = snapshot.clone();
        for step in 0..100 {
            let start = (step * cfg.batch_size) % train.len();
            let batch: Vec<_> = train.iter().cycle().skip(start).take(cfg.batch_size).copied().collect();
            train_step(&mut snapshot, &mut optimizer, &space, &feats, &batch).map_err(e)?;
        }
        for ((name, a), (_, b)) in initial.encoders.named_tensors().iter().zip(snapshot.encoders.named_tensors()) {
            ensure(a.bit_eq(b), || format!("{mode}: encoder tensor {name} changed"))?;
        }
        for (before, after) in initial.prompt.params().iter().zip(snapshot.prompt.params()) {
            let same = before.tensor.bit_eq(&after.tensor);
            let should_train = match before.name.as_str() {
                "prompt.theta" => mode.trains_prompt(),
                _ => mode.trains_embedding(),
            };
            ensure(same != should_train, || {
                format!("{mode}: {} {}", before.name, if same { "never moved" } else { "moved while frozen" })
            })?;
        }
        notes.push(mode.as_str());
    }
    Ok(format!("100 steps each in {}", notes.join(", ")))
}

// 3 -------------------------------------------------------------------------

fn invariants() -> Outcome {
    let (space, feats) = synth(4, 5, 0.25, 9);
    let cfg = small_config(PromptMode::PromptCompVl, 9);
    let mut snap = TrainState::init(&cfg, &space, feats.d_img()).map_err(e)?.snapshot;
    let pairs = target_set(&space, CzslSetting::OpenWorld, Phase::Test);
    let texts = snap.text_matrix(&pairs).map_err(e)?;
    let mut worst_norm = 0.0f64;
    for i in 0..texts.rows() {
        worst_norm = worst_norm.max((norm(texts.row(i)) - 1.0).abs());
    }
    let mut worst_sum = 0.0f64;
    let ids: Vec<&str> = feats.ids().iter().map(String::as_str).collect();
    let mut baseline = Vec::new();
    for id in &ids {
        let v = snap.image_vector(&feats, id).map_err(e)?;
        worst_norm = worst_norm.max((norm(&v) - 1.0).abs());
        for tau in [0.01, 0.07, 1.0] {
            let p = label_probability(&logits(&v, &texts, tau).map_err(e)?).map_err(e)?;
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_norm <= 1e-9, || format!("norm deviates by {worst_norm:.2e}"))?;
    ensure(worst_sum <= 1e-9, || format!("probability row sums deviate by {worst_sum:.2e}"))?;
    for (k, tau) in [0.01, 0.07, 1.0].into_iter().enumerate() {
        snap.set_tau(tau).map_err(e)?;
        let scorer = Scorer::new(&snap, &pairs, None).map_err(e)?;
        for (i, id) in ids.iter().enumerate() {
            let p = scorer.predict(&snap.image_vector(&feats, id).map_err(e)?).map_err(e)?;
            if k == 0 {
                baseline.push(p);
            } else {
                ensure(baseline[i] == p, || format!("prediction for {id} changes at tau {tau}"))?;
            }
        }
    }
    Ok(format!(
        "{} texts + {} images, max norm dev {worst_norm:.1e}, max prob-sum dev {worst_sum:.1e}",
        texts.rows(),
        ids.len()
    ))
}

// 4, 9 ----------------------------------------------------------------------

struct Benchmark {
    space: CompositionSpace,
    feats: ImageFeatureTable,
}

impl Benchmark {
    fn new() -> Self {
        let (space, feats) = synth_generate(&SynthConfig {
            n_attrs: 8,
            n_objs: 8,
            d_img: 32,
            noise: 0.05,
            images_per_pair: 20,
            unseen_frac: 0.25,
            seed: 7,
        })
        .unwrap();
        Self { space, feats }
    }

    fn config(mode: PromptMode) -> TrainConfig {
        TrainConfig {
            mode,
            seed: 7,
            epochs: 30,
            ..TrainConfig::default()
        }
    }

    fn trained(&self, mode: PromptMode) -> Result<ModelSnapshot, String> {
        let (state, _) = train(&Self::config(mode), &self.space, &self.feats, None).map_err(e)?;
        Ok(state.best_snapshot())
    }

    fn test_report(&self, snap: &ModelSnapshot) -> Result<czsl_core::evaluation::EvalReport, String> {
        evaluate(snap, &self.space, &self.feats, CzslSetting::Generalized, Phase::Test, None).map_err(e)
    }
}

fn generalization(bench: &Benchmark) -> Result<(String, f64), String> {
    let t = Instant::now();
    let base = TrainState::init(&Benchmark::config(PromptMode::ClipHard), &bench.space, bench.feats.d_img())
        .map_err(e)?
        .snapshot;
    let base_auc = bench.test_report(&base)?.summary.auc;
    let report = bench.test_report(&bench.trained(PromptMode::PromptCompVl)?)?;
    let best = best_hm_point(&report.curve).ok_or("empty curve")?;
    let auc = report.summary.auc;
    ensure(best.unseen_acc >= 0.90, || format!("unseen acc at best HM {:.3} < 0.90", best.unseen_acc))?;
    ensure(auc > base_auc, || format!("AUC {auc:.4} does not beat clip_hard baseline {base_auc:.4}"))?;
    let secs = within(Duration::from_secs(300), t, "train + eval")?;
    Ok((
        format!(
            "U@bestHM {:.3} (S {:.3}, HM {:.3}), AUC {auc:.4} vs clip_hard {base_auc:.4}, {secs:.1}s",
            best.unseen_acc, best.seen_acc, report.summary.hm
        ),
        auc,
    ))
}

fn mode_ordering(bench: &Benchmark, promptcompvl_auc: f64) -> Outcome {
    let mut parts = vec![format!("promptcompvl {promptcompvl_auc:.4}")];
    for mode in [PromptMode::CoopSoftPrompt, PromptMode::CspSoftEmbedding] {
        let auc = bench.test_report(&bench.trained(mode)?)?.summary.auc;
        ensure(promptcompvl_auc >= auc - 0.02, || {
            format!("promptcompvl AUC {promptcompvl_auc:.4} < {mode} AUC {auc:.4} - 0.02")
        })?;
        parts.push(format!("{mode} {auc:.4}"));
    }
    let base = TrainState::init(&Benchmark::config(PromptMode::ClipHard), &bench.space, bench.feats.d_img())
        .map_err(e)?
        .snapshot;
    parts.push(format!("clip_hard {:.4}", bench.test_report(&base)?.summary.auc));
    Ok(format!("test AUC: {}", parts.join(", ")))
}

// 5 -------------------------------------------------------------------------

/// Apply `bias` to unseen columns and take the argmax, preferring unseen
/// columns on ties and the lowest index within a group.
fn oracle_predict(row: &[f64], seen: &[bool], bias: f64) -> usize {
    let biased: Vec<f64> = row.iter().zip(seen).map(|(&v, &s)| if s { v } else { v + bias }).collect();
    let top = biased.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let at_top = |want_seen: bool| (0..row.len()).find(|&j| seen[j] == want_seen && biased[j] == top);
    at_top(false).or_else(|| at_top(true)).unwrap()
}

fn oracle_curve(rows: &[Vec<f64>], truth: &[usize], seen: &[bool]) -> Vec<CurvePoint> {
    let best = |row: &[f64], want: bool| {
        row.iter()
            .zip(seen)
            .filter(|(_, &s)| s == want)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut gaps: Vec<f64> = rows
        .iter()
        .filter_map(|r| {
            let (ms, mu) = (best(r, true), best(r, false));
            (ms.is_finite() && mu.is_finite()).then_some(ms - mu)
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();
    // any finite bias below every gap behaves like -inf
    let below = gaps.first().map_or(0.0, |g| g - 1.0);
    let n_seen = truth.iter().filter(|&&t| seen[t]).count() as f64;
    let n_unseen = truth.len() as f64 - n_seen;
    let point = |bias: f64, label: f64| {
        let (mut s, mut u) = (0.0, 0.0);
        for (row, &t) in rows.iter().zip(truth) {
            if oracle_predict(row, seen, bias) == t {
                if seen[t] {
                    s += 1.0;
                } else {
                    u += 1.0;
                }
            }
        }
        CurvePoint {
            bias: label,
            seen_acc: s / n_seen,
            unseen_acc: u / n_unseen,
        }
    };
    std::iter::once(point(below, f64::NEG_INFINITY))
        .chain(gaps.iter().map(|&g| point(g, g)))
        .collect()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = 0;
    let mut points = 0;
    while cases < 200 {
        let n = rng.random_range(2..=6);
        let p = rng.random_range(2..=8);
        let seen: Vec<bool> = (0..p).map(|_| rng.random_bool(0.5)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..p)).collect();
        if truth.iter().all(|&t| seen[t]) || truth.iter().all(|&t| !seen[t]) {
            continue;
        }
        // dyadic scores keep every gap and biased score exact
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r: Vec<f64> = (0..p)
                    .map(|_| {
                        if rng.random_bool(0.1) {
                            f64::NEG_INFINITY
                        } else {
                            rng.random_range(-8i32..=8) as f64 / 4.0
                        }
                    })
                    .collect();
                r[truth[i]] = rng.random_range(-8i32..=8) as f64 / 4.0;
                r
            })
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let scores = Tensor::matrix(n, p, flat).unwrap();
        let curve = bias_sweep(&scores, &truth, &seen).map_err(e)?;
        let expect = oracle_curve(&rows, &truth, &seen);
        ensure(curve == expect, || format!("case {cases}: sweep {curve:?} != oracle {expect:?}"))?;

        let got = summarize(&curve);
        let hm = |c: &CurvePoint| {
            let d = c.seen_acc + c.unseen_acc;
            if d == 0.0 {
                0.0
            } else {
                2.0 * c.seen_acc * c.unseen_acc / d
            }
        };
        let s = expect.iter().map(|c| c.seen_acc).fold(0.0, f64::max);
        let u = expect.iter().map(|c| c.unseen_acc).fold(0.0, f64::max);
        let h = expect.iter().map(hm).fold(0.0, f64::max);
        let mut auc = 0.0;
        for w in expect.windows(2) {
            auc += (w[1].unseen_acc - w[0].unseen_acc) * (w[1].seen_acc + w[0].seen_acc) * 0.5;
        }
        ensure(got.s == s && got.u == u && got.hm == h, || format!("case {cases}: summary {got:?}"))?;
        ensure((got.auc - auc).abs() <= 1e-12, || format!("case {cases}: AUC {} vs trapezoid {auc}", got.auc))?;
        cases += 1;
        points += curve.len();
    }
    Ok(format!("{cases} random matrices, {points} curve points matched exactly"))
}

// 6 -------------------------------------------------------------------------

struct Table {
    attrs: usize,
    objs: usize,
    train: usize,
    val: usize,
    test: usize,
    images: [usize; 3],
}

fn write_fixture(dir: &Path, t: &Table, combined: bool, overlap: bool) {
    let names = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i:03}\n")).collect::<String>();
    fs::write(dir.join("attrs.txt"), names("a", t.attrs)).unwrap();
    fs::write(dir.join("objs.txt"), names("o", t.objs)).unwrap();
    let total = t.attrs * t.objs;
    let stride = (2..total).rev().find(|s| gcd(*s, total) == 1 && s % 7 != 0).unwrap();
    let pair = |i: usize| {
        let k = (i * stride) % total;
        (k / t.objs, k % t.objs)
    };
    let line = |&(a, o): &(usize, usize)| format!("a{a:03} o{o:03}\n");
    let train: Vec<_> = (0..t.train).map(pair).collect();
    let val_unseen: Vec<_> = (t.train..t.train + t.val).map(pair).collect();
    let mut test_unseen: Vec<_> = (t.train + t.val..t.train + t.val + t.test).map(pair).collect();
    let val_seen = train[..t.val].to_vec();
    let test_seen = train[train.len() - t.test..].to_vec();
    if overlap {
        test_unseen[t.test / 2] = test_seen[0];
    }
    let body = |ps: &[(usize, usize)]| ps.iter().map(line).collect::<String>();
    fs::write(dir.join("train_pairs.txt"), body(&train)).unwrap();
    if combined {
        fs::write(dir.join("val_pairs.txt"), body(&[val_seen.clone(), val_unseen.clone()].concat())).unwrap();
        fs::write(dir.join("test_pairs.txt"), body(&[test_seen.clone(), test_unseen.clone()].concat())).unwrap();
    } else {
        fs::write(dir.join("val_seen_pairs.txt"), body(&val_seen)).unwrap();
        fs::write(dir.join("val_unseen_pairs.txt"), body(&val_unseen)).unwrap();
        fs::write(dir.join("test_seen_pairs.txt"), body(&test_seen)).unwrap();
        fs::write(dir.join("test_unseen_pairs.txt"), body(&test_unseen)).unwrap();
    }
    let mut samples = String::new();
    let groups = [
        ("train", train.clone()),
        ("val", [val_seen, val_unseen].concat()),
        ("test", [test_seen, test_unseen].concat()),
    ];
    let mut id = 0;
    for ((split, pairs), &n) in groups.iter().zip(&t.images) {
        for i in 0..n {
            let (a, o) = pairs[i % pairs.len()];
            writeln!(samples, "img{id:06} a{a:03} o{o:03} {split}").unwrap();
            id += 1;
        }
    }
    fs::write(dir.join("samples.txt"), samples).unwrap();
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn split_fidelity() -> Outcome {
    let tables = [
        (
            "MIT-States",
            Table {
                attrs: 115,
                objs: 245,
                train: 1262,
                val: 300,
                test: 400,
                images: [30338, 10420, 19191],
            },
            28175,
        ),
        (
            "UT-Zappos",
            Table {
                attrs: 16,
                objs: 12,
                train: 83,
                val: 15,
                test: 18,
                images: [22998, 3214, 2914],
            },
            192,
        ),
    ];
    let mut notes = Vec::new();
    for (name, t, product) in &tables {
        for combined in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            write_fixture(dir.path(), t, combined, false);
            let space = load_splits(dir.path()).map_err(|err| format!("{name}: {err}"))?;
            let s = space.stats();
            let got = [
                s.attrs,
                s.objs,
                s.pairs,
                s.train_pairs,
                s.val_seen_pairs,
                s.val_unseen_pairs,
                s.test_seen_pairs,
                s.test_unseen_pairs,
                s.train_images,
                s.val_images,
                s.test_images,
            ];
            let want = [
                t.attrs, t.objs, *product, t.train, t.val, t.val, t.test, t.test, t.images[0], t.images[1], t.images[2],
            ];
            ensure(got == want, || format!("{name} (combined={combined}): got {got:?}, want {want:?}"))?;
            let ow = target_set(&space, CzslSetting::OpenWorld, Phase::Test).len();
            ensure(ow == *product, || format!("{name}: open-world target set has {ow} pairs"))?;
        }
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), t, false, true);
        match load_splits(dir.path()) {
            Err(Error::Validation { file, line, .. }) => {
                notes.push(format!("{name} overlap rejected at {file}:{line}"));
            }
            other => return Err(format!("{name}: overlapping fixture gave {other:?}")),
        }
    }
    Ok(format!("115/245/28175/1262/300+300/400+400 and 16/12/192/83/15+15/18+18 in both layouts; {}", notes.join("; ")))
}

// 7 -------------------------------------------------------------------------

fn open_world_masking() -> Outcome {
    let (space, _) = synth(6, 6, 0.5, 13);
    let d = 16;
    let cfg = small_config(PromptMode::PromptCompVl, 13);
    let mut snap = TrainState::init(&cfg, &space, 24).map_err(e)?.snapshot;
    // two clusters of primitives, so feasibility scores straddle the threshold
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rows = space.n_attrs() + space.n_objs();
    let centres: Vec<Vec<f64>> = (0..2).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut phi = Vec::with_capacity(rows * d);
    for r in 0..rows {
        for c in &centres[r % 2] {
            phi.push(c + 0.8 * rng.random_range(-1.0..1.0));
        }
    }
    let theta = snap.prompt.soft_prompt().map(|p| p.tensor.clone());
    snap.prompt = PromptState::from_parts(
        PromptMode::PromptCompVl,
        theta,
        Tensor::matrix(rows, d, phi).unwrap(),
        space.n_attrs(),
        space.n_objs(),
    )
    .map_err(e)?;

    let pairs = target_set(&space, CzslSetting::OpenWorld, Phase::Test);
    let feas = feasibility_scores(&space, &snap.prompt.soft_embedding().tensor).map_err(e)?;
    let allowed = feas.allowed(&pairs, MIT_STATES_THRESHOLD);
    let masked: Vec<usize> = (0..pairs.len()).filter(|&j| !allowed[j]).collect();
    ensure(!masked.is_empty(), || "no pair falls below the threshold".into())?;
    ensure(masked.len() < pairs.len() - space.train_pairs().len(), || "every non-train pair is masked".into())?;
    ensure(masked.iter().all(|&j| !space.is_seen(pairs[j])), || "a training pair was masked".into())?;
    let open_unseen = pairs.iter().zip(&allowed).filter(|(p, &a)| a && !space.is_seen(**p)).count();

    let masked_scorer = Scorer::new(&snap, &pairs, Some(&allowed)).map_err(e)?;
    let open_scorer = Scorer::new(&snap, &pairs, None).map_err(e)?;
    let mut images = ImageFeatureTable::new(24);
    let mut hits_without_mask = 0;
    for i in 0..2000 {
        let f: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        images.insert(format!("probe{i}"), &f).map_err(e)?;
        let v = snap.image_vector(&images, &format!("probe{i}")).map_err(e)?;
        let scores = masked_scorer.scores(&v).map_err(e)?;
        for &j in &masked {
            ensure(scores[j] == f64::NEG_INFINITY, || format!("masked column {j} scored {}", scores[j]))?;
        }
        let p = masked_scorer.predict(&v).map_err(e)?;
        ensure(!masked.contains(&pairs.iter().position(|q| *q == p).unwrap()), || {
            format!("probe{i} predicted masked pair {}", space.pair_name(p))
        })?;
        let q = open_scorer.predict(&v).map_err(e)?;
        if masked.contains(&pairs.iter().position(|x| *x == q).unwrap()) {
            hits_without_mask += 1;
        }
    }

    let mut thresholds: Vec<f64> = feas.iter().map(|(_, s)| s).collect();
    thresholds.extend([-1.0, 0.0, MIT_STATES_THRESHOLD, 0.6, 1.0, 2.0]);
    thresholds.sort_by(f64::total_cmp);
    let counts: Vec<usize> = thresholds
        .iter()
        .map(|&t| feas.allowed(&pairs, t).iter().filter(|&&a| a).count())
        .collect();
    ensure(counts.windows(2).all(|w| w[1] <= w[0]), || format!("allowed counts not monotone: {counts:?}"))?;
    Ok(format!(
        "{} of {} non-train pairs masked, {open_unseen} kept; 0 masked predictions over 2000 probes \
         ({hits_without_mask} would land on them unmasked); counts monotone over {} thresholds",
        masked.len(),
        pairs.len() - space.train_pairs().len(),
        thresholds.len()
    ))
}

// 8 -------------------------------------------------------------------------

fn determinism() -> Outcome {
    let (space, feats) = synth(5, 5, 0.25, 21);
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        checkpoint_every: 3,
        ..small_config(PromptMode::PromptCompVl, 21)
    };
    let full = |dir: &Path| -> Result<(Vec<u8>, String), String> {
        let (state, _) = train(&cfg, &space, &feats, Some(dir)).map_err(e)?;
        let bytes = fs::read(dir.join(OutputDir::FINAL)).map_err(|x| x.to_string())?;
        let loaded = checkpoint::from_bytes(&bytes).map_err(e)?;
        ensure(loaded == state, || "checkpoint does not load back to the trained state".into())?;
        let report = evaluate(&loaded.best_snapshot(), &space, &feats, CzslSetting::Generalized, Phase::Test, None)
            .map_err(e)?;
        Ok((bytes, report.to_string()))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ckpt_a, rep_a) = full(a.path())?;
    let (ckpt_b, rep_b) = full(b.path())?;
    ensure(ckpt_a == ckpt_b, || "final checkpoints differ between identical runs".into())?;
    ensure(rep_a == rep_b, || "reports differ between identical runs".into())?;

    let mid = checkpoint::load(&a.path().join("epoch-003.ckpt")).map_err(e)?;
    ensure(mid.epoch == 3, || format!("mid checkpoint is at epoch {}", mid.epoch))?;
    let trainer = Trainer::resume(mid, &space, &feats).map_err(e)?;
    let (resumed, _) = run(trainer, None, |_| {}).map_err(e)?;
    ensure(checkpoint::to_bytes(&resumed) == ckpt_a, || "resumed run differs from the uninterrupted run".into())?;
    Ok(format!(
        "{} byte checkpoints and {} byte reports identical; resume from epoch 3 bit-exact",
        ckpt_a.len(),
        rep_a.len()
    ))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let bench = Benchmark::new();
    let mut promptcompvl_auc = None;
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "freeze contract", freeze_contract()),
        (3, "unit norm, probability and temperature invariants", invariants()),
    ];
    let gen = generalization(&bench).map(|(msg, auc)| {
        promptcompvl_auc = Some(auc);
        msg
    });
    results.push((4, "compositional generalization at desk scale", gen));
    results.push((5, "metric engine against brute-force oracle", metric_oracle()));
    results.push((6, "split fidelity", split_fidelity()));
    results.push((7, "open-world masking", open_world_masking()));
    results.push((8, "determinism and resumability", determinism()));
    let order = match promptcompvl_auc {
        Some(auc) => mode_ordering(&bench, auc),
        None => Err("promptcompvl run failed in criterion 4".into()),
    };
    results.push((9, "prompt-mode ordering", order));

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {n}: {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n}: {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
