use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use czsl_core::checkpoint;
use czsl_core::config::RunConfig;
use czsl_core::data::{load_splits, save_splits, synth_generate, target_set, CompositionSpace, CzslSetting};
use czsl_core::encoders::ImageFeatureTable;
use czsl_core::evaluation::{evaluate, feasibility_scores};
use czsl_core::model::{ModelSnapshot, Scorer};
use czsl_core::prompt::PromptMode;
use czsl_core::training::{run, OutputDir, TrainState, Trainer};
use czsl_core::{Error, Result};

const FEATURE_FILE: &str = "features.bin";

#[derive(Parser)]
#[command(name = "czsl", version, about = "Compositional zero-shot learning with soft prompts over frozen encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic composition space and feature table.
    Synth(SynthArgs),
    /// Train the soft prompt and soft embedding.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the untrained model) and print a report.
    Eval(EvalArgs),
    /// Predict the pair for one image.
    Predict(PredictArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Feature table (default: <data-dir>/features.bin)
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// clip_hard | coop_soft_prompt | csp_soft_embedding | promptcompvl
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    prompt_len: Option<String>,
    #[arg(long)]
    context_length: Option<String>,
    #[arg(long)]
    prompt_init: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    heads: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    attrs: Option<String>,
    #[arg(long)]
    objs: Option<String>,
    #[arg(long)]
    d_img: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    images_per_pair: Option<String>,
    #[arg(long)]
    unseen_frac: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    /// constant | cosine
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    /// Continue from this checkpoint instead of starting fresh
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Without a checkpoint the untrained model is evaluated
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// standard | generalized | open_world
    #[arg(long)]
    setting: Option<String>,
    /// val | test
    #[arg(long)]
    phase: Option<String>,
    #[arg(long)]
    feasibility_threshold: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    image_id: String,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn push(v: &mut Vec<(String, String)>, key: &str, value: &Option<String>) {
    if let Some(x) = value {
        v.push((key.to_string(), x.clone()));
    }
}

fn push_path(v: &mut Vec<(String, String)>, key: &str, value: &Option<PathBuf>) {
    if let Some(p) = value {
        v.push((key.to_string(), p.display().to_string()));
    }
}

impl Common {
    fn overrides(&self, v: &mut Vec<(String, String)>) {
        push(v, "seed", &self.seed);
        push_path(v, "data_dir", &self.data_dir);
        push_path(v, "features", &self.features);
        push_path(v, "out", &self.out);
    }

    fn resolve(&self, extra: Vec<(String, String)>) -> Result<RunConfig> {
        let mut v = Vec::new();
        self.overrides(&mut v);
        v.extend(extra);
        RunConfig::resolve(self.config.as_deref(), &v)
    }
}

impl ModelArgs {
    fn overrides(&self, v: &mut Vec<(String, String)>) {
        push(v, "mode", &self.mode);
        push(v, "tau", &self.tau);
        push(v, "prompt_len", &self.prompt_len);
        push(v, "ctx_len", &self.context_length);
        push(v, "prompt_init", &self.prompt_init);
        push(v, "d_model", &self.d_model);
        push(v, "blocks", &self.blocks);
        push(v, "heads", &self.heads);
    }
}

impl EvalArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut v = Vec::new();
        self.model.overrides(&mut v);
        push(&mut v, "setting", &self.setting);
        push(&mut v, "phase", &self.phase);
        push(&mut v, "feasibility_threshold", &self.feasibility_threshold);
        push_path(&mut v, "checkpoint", &self.checkpoint);
        self.common.resolve(v)
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{flag} is required")))
}

fn load_inputs(cfg: &RunConfig) -> Result<(CompositionSpace, ImageFeatureTable)> {
    let dir = require(&cfg.data_dir, "--data-dir")?;
    let space = load_splits(dir)?;
    let path = cfg.features.clone().unwrap_or_else(|| dir.join(FEATURE_FILE));
    let features = ImageFeatureTable::load(&path)?;
    Ok((space, features))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut v = Vec::new();
    push(&mut v, "attrs", &a.attrs);
    push(&mut v, "objs", &a.objs);
    push(&mut v, "d_img", &a.d_img);
    push(&mut v, "noise", &a.noise);
    push(&mut v, "images_per_pair", &a.images_per_pair);
    push(&mut v, "unseen_frac", &a.unseen_frac);
    let cfg = a.common.resolve(v)?;
    let out = require(&cfg.out, "--out")?;
    let (space, features) = synth_generate(&cfg.synth)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    save_splits(&space, out)?;
    features.save(&out.join(FEATURE_FILE))?;
    print!("{}", space.stats());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut v = Vec::new();
    a.model.overrides(&mut v);
    push(&mut v, "epochs", &a.epochs);
    push(&mut v, "batch_size", &a.batch_size);
    push(&mut v, "lr", &a.lr);
    push(&mut v, "optimizer", &a.optimizer);
    push(&mut v, "schedule", &a.schedule);
    push(&mut v, "checkpoint_every", &a.checkpoint_every);
    push(&mut v, "patience", &a.patience);
    let cfg = a.common.resolve(v)?;
    cfg.train.validate()?;
    if cfg.train.mode == PromptMode::ClipHard {
        return Err(Error::Config(
            "mode clip_hard has no trainable parameters; use `czsl eval` without --checkpoint for the zero-shot baseline".into(),
        ));
    }
    let (space, features) = load_inputs(&cfg)?;
    let out = OutputDir::prepare(require(&cfg.out, "--out")?)?;
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(checkpoint::load(p)?, &space, &features)?,
        None => {
            if cfg.train.mode == PromptMode::CoopSoftPrompt && cfg.train.prompt_len == 0 {
                return Err(Error::Config("coop_soft_prompt with --prompt-len 0 has nothing to train".into()));
            }
            Trainer::new(&cfg.train, &space, &features)?
        }
    };
    let (state, stats) = run(trainer, Some(&out), |r| println!("{}", r.log_line()))?;
    println!("checkpoint: {}", out.final_checkpoint().display());
    match (stats.best_epoch, stats.best) {
        (Some(e), Some(b)) => println!(
            "best val epoch={e} S={:.4} U={:.4} HM={:.4} AUC={:.4}",
            b.s, b.u, b.hm, b.auc
        ),
        _ => println!("best val none (no validation images); final epoch {}", state.epoch),
    }
    Ok(())
}

fn snapshot_for(cfg: &RunConfig, model: &ModelArgs, space: &CompositionSpace, d_img: usize) -> Result<(ModelSnapshot, Vec<(String, String)>)> {
    let (mut snap, mut echo) = match &cfg.checkpoint {
        Some(p) => {
            let st = checkpoint::load(p)?;
            (st.best_snapshot(), st.config.entries())
        }
        None => {
            let st = TrainState::init(&cfg.train, space, d_img)?;
            (st.snapshot, cfg.train.entries())
        }
    };
    snap.check_space(space)?;
    if let Some(t) = &model.tau {
        snap.set_tau(t.parse().map_err(|_| Error::Config(format!("invalid value '{t}' for 'tau'")))?)?;
        echo.retain(|(k, _)| k != "tau");
        echo.push(("tau".into(), t.clone()));
    }
    echo.push(("setting".into(), cfg.setting.to_string()));
    echo.push(("phase".into(), cfg.phase.to_string()));
    echo.push((
        "feasibility_threshold".into(),
        cfg.feasibility_threshold.map_or("none".into(), |t| t.to_string()),
    ));
    Ok((snap, echo))
}

fn check_threshold(cfg: &RunConfig) -> Result<Option<f64>> {
    match (cfg.setting, cfg.feasibility_threshold) {
        (CzslSetting::OpenWorld, None) => Err(Error::Config(
            "--setting open_world requires --feasibility-threshold (e.g. 0.40691)".into(),
        )),
        (CzslSetting::OpenWorld, t) => Ok(t),
        (s, Some(_)) => Err(Error::Config(format!(
            "--feasibility-threshold only applies to --setting open_world, not {s}"
        ))),
        (_, None) => Ok(None),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let threshold = check_threshold(&cfg)?;
    let (space, features) = load_inputs(&cfg)?;
    let (snap, echo) = snapshot_for(&cfg, &a.model, &space, features.d_img())?;
    let mut report = evaluate(&snap, &space, &features, cfg.setting, cfg.phase, threshold)?;
    report.config = echo;
    let text = report.to_string();
    print!("{text}");
    if let Some(out) = &cfg.out {
        write_file(out, &text)?;
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let cfg = a.eval.resolve()?;
    let threshold = check_threshold(&cfg)?;
    let (space, features) = load_inputs(&cfg)?;
    let (snap, _) = snapshot_for(&cfg, &a.eval.model, &space, features.d_img())?;
    let pairs = target_set(&space, cfg.setting, cfg.phase);
    let allowed = match threshold {
        Some(t) => Some(feasibility_scores(&space, &snap.prompt.soft_embedding().tensor)?.allowed(&pairs, t)),
        None => None,
    };
    let image = snap.image_vector(&features, &a.image_id)?;
    let scorer = Scorer::new(&snap, &pairs, allowed.as_deref())?;
    let best = scorer.predict(&image)?;
    println!("{}", space.pair_name(best));
    for (rank, (p, sim)) in scorer.rank(&image, 5)?.into_iter().enumerate() {
        println!("{}. {} {:.6}", rank + 1, space.pair_name(p), sim);
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let st = checkpoint::load(&a.checkpoint)?;
    print!("{}", checkpoint::describe(&st));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
