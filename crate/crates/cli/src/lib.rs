//! `ampose` command-line front end.
//!
//! Every subcommand prints the fully resolved configuration it runs with, so
//! a run can be repeated from that snapshot alone.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ampose_core::data::{
    convert_raw_record, load_dataset, read_records, synth_dataset, write_records, Dataset,
    PoseRecord, PoseSample, RawRecord, Split,
};
use ampose_core::metrics::{evaluate, EvalOptions, EvalReport, PckMode};
use ampose_core::model::{build_model, Model, ModelConfig};
use ampose_core::numerics::Tensor;
use ampose_core::params::Parameterized;
use ampose_core::skeleton::Skeleton;
use ampose_core::training::{
    check_gradients, load_checkpoint, predict_dataset, randomize_params, save_checkpoint, EpochLog,
    GradCheckSettings, TrainConfig, Trainer,
};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Largest model `gradcheck` accepts; each parameter costs two forward passes.
pub const GRADCHECK_MAX_PARAMS: usize = 5_000;
/// Relative-error bound `gradcheck` must beat.
pub const GRADCHECK_TOL: f64 = 1e-4;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_LOG_FILE: &str = "run.log";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Parser)]
#[command(name = "ampose", version, about = "2D-to-3D human pose lifting")]
pub struct Cli {
    /// Disable all multi-threading.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics log and config snapshot.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Lift 2D inputs to 3D poses.
    Predict(PredictArgs),
    /// Print parameter and FLOP counts and the skeleton partition.
    Inspect(InspectArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic dataset.
    SynthData(SynthArgs),
    /// Convert pixel / world-millimetre records to the dataset format.
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML file with optional `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override applied after the file, e.g. `model.channels=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Optional validation dataset for the per-epoch MPJPE.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint; `--set train.*` overrides still apply.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score the ground truth against itself instead of running the model.
    #[arg(long)]
    pub identity: bool,
    #[arg(long, value_enum, default_value_t = PckModeArg::PerJoint)]
    pub pck_mode: PckModeArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PckModeArg {
    PerJoint,
    PerPose,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input records; `pose3d` is ignored if present.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Inspect the model stored in a checkpoint instead of a config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Perturb one analytic gradient entry; the check must then fail.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Builtin skeleton name or skeleton file.
    #[arg(long, default_value = "h36m17")]
    pub skeleton: String,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long, default_value = "h36m17")]
    pub skeleton: String,
    /// Raw records (see `RawRecord` in the data module).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything a run depends on besides its data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// File config, then `--set` overrides, then `--seed`.
    pub fn load(args: &ConfigArgs) -> Result<Self> {
        Self::load_over(Self::default(), args)
    }

    fn load_over(base: RunConfig, args: &ConfigArgs) -> Result<Self> {
        let mut value = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let file: RunConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                toml::Value::try_from(file)?
            }
            None => toml::Value::try_from(base)?,
        };
        for o in &args.overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| anyhow!("invalid configuration after overrides: {e}"))?;
        if let Some(seed) = args.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    /// Copy with the skeleton inlined.
    pub fn resolved(&self) -> Result<Self> {
        Ok(RunConfig {
            model: self.model.resolved()?,
            train: self.train.clone(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Set `a.b.c = value` in a TOML tree. The value is parsed as a TOML literal
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not KEY=VALUE"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{part}` is not a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("override `{key}` does not name a table field"))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parse arguments and run; the binary maps an error to exit status 1.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    if cli.deterministic {
        ampose_core::parallel::set_serial(true);
    }
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::SynthData(a) => cmd_synth(&a, out),
        Command::Convert(a) => cmd_convert(&a, out),
    }
}

fn echo_config(out: &mut dyn Write, cfg: &RunConfig, overrides: &[String]) -> Result<String> {
    let text = cfg.resolved()?.to_toml()?;
    for o in overrides {
        writeln!(out, "# override {o}")?;
    }
    writeln!(out, "# resolved configuration\n{text}")?;
    Ok(text)
}

fn load_data(path: &Path, skeleton: &Skeleton) -> Result<Dataset> {
    load_dataset(path, skeleton).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, mut trainer) = match &a.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let base = RunConfig {
                model: ck.model_config.clone(),
                train: ck.train_config.clone(),
            };
            let cfg = RunConfig::load_over(base, &a.cfg)?;
            if cfg.model != ck.model_config {
                bail!("model settings cannot change when resuming");
            }
            let mut trainer = Trainer::resume(&ck)?;
            cfg.train.validate()?;
            trainer.config = cfg.train.clone();
            (cfg, trainer)
        }
        None => {
            let cfg = RunConfig::load(&a.cfg)?;
            let model = build_model(&cfg.model, cfg.train.seed)?;
            let trainer = Trainer::new(model, cfg.train.clone())?;
            (cfg, trainer)
        }
    };
    let skeleton = trainer.model.skeleton().clone();
    let train = load_data(&a.data, &skeleton)?;
    let val = a
        .val
        .as_deref()
        .map(|p| load_data(p, &skeleton))
        .transpose()?;
    let val = val.map(|v| Dataset {
        split: Split::Val,
        ..v
    });

    fs::create_dir_all(&a.out)?;
    let marker = a.out.join(INCOMPLETE_MARKER);
    fs::write(&marker, "training did not finish\n")?;
    let config_text = echo_config(out, &cfg, &a.cfg.overrides)?;
    fs::write(a.out.join(CONFIG_FILE), &config_text)?;
    let mut log = format!(
        "deterministic = {}\nparallel = {}\n",
        !ampose_core::parallel::is_parallel(),
        ampose_core::parallel::is_parallel()
    );
    for o in &a.cfg.overrides {
        log.push_str(&format!("override {o}\n"));
    }
    fs::write(a.out.join(RUN_LOG_FILE), log)?;

    let metrics_path = a.out.join(METRICS_FILE);
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(a.checkpoint.is_some())
        .write(true)
        .truncate(a.checkpoint.is_none())
        .open(&metrics_path)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let result = trainer.run(&train, val.as_ref(), |entry: &EpochLog, t: &Trainer| {
        serde_json::to_writer(&mut metrics, entry).map_err(std::io::Error::from)?;
        metrics.write_all(b"\n")?;
        save_checkpoint(&t.checkpoint(), &ckpt_path)?;
        Ok(())
    });
    if let Err(e) = result {
        fs::write(&marker, format!("training failed: {e}\n"))?;
        return Err(e.into());
    }
    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    metrics.flush()?;
    fs::remove_file(&marker)?;
    writeln!(
        out,
        "trained {} steps over {} epochs; checkpoint {}",
        trainer.progress.step,
        trainer.progress.epoch,
        ckpt_path.display()
    )?;
    Ok(())
}

fn open_model(path: &Path) -> Result<Model> {
    let ck =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model()?)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let model = open_model(&a.checkpoint)?;
    let data = load_data(&a.data, model.skeleton())?;
    let gts: Vec<Tensor> = data.samples.iter().map(|s| s.pose3d.clone()).collect();
    let preds = if a.identity {
        gts.clone()
    } else {
        predict_dataset(&model, &data)?
    };
    let actions: Vec<Option<String>> = data.samples.iter().map(|s| s.meta.action.clone()).collect();
    let opts = EvalOptions {
        pck_mode: match a.pck_mode {
            PckModeArg::PerJoint => PckMode::PerJoint,
            PckModeArg::PerPose => PckMode::PerPose,
        },
        ..EvalOptions::default()
    };
    let report = evaluate(&preds, &gts, Some(&actions), &opts)?;
    writeln!(out, "# model\n{}", toml::to_string(model.config())?)?;
    writeln!(
        out,
        "samples {}  MPJPE {:.3} mm  PCK@{} {:.4}  AUC {:.4}",
        report.n_samples, report.mpjpe_mm, opts.pck_threshold_mm, report.pck, report.auc
    )?;
    for (action, e) in &report.per_action_mpjpe_mm {
        writeln!(out, "  {action:<20} {e:.3} mm")?;
    }
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let model = open_model(&a.checkpoint)?;
    let j = model.num_joints();
    let records = read_records(&a.data)?;
    let mut inputs = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        inputs.push(r.input(j, i)?);
    }
    let mut written = Vec::with_capacity(records.len());
    for (chunk_records, chunk_inputs) in records.chunks(256).zip(inputs.chunks(256)) {
        let refs: Vec<&Tensor> = chunk_inputs.iter().collect();
        for (r, y) in chunk_records.iter().zip(model.predict_poses(&refs)?) {
            written.push(PoseRecord {
                pose2d: r.pose2d.clone(),
                pose3d: Some(y.into_data()),
                meta: r.meta.clone(),
            });
        }
    }
    let mut tmp = a.out.as_os_str().to_owned();
    tmp.push(".partial");
    write_records(&tmp, &written)?;
    fs::rename(&tmp, &a.out)?;
    writeln!(out, "# model\n{}", toml::to_string(model.config())?)?;
    writeln!(
        out,
        "wrote {} predictions to {}",
        written.len(),
        a.out.display()
    )?;
    Ok(())
}

fn format_matrix(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:6.3}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let model = match &a.checkpoint {
        Some(path) => open_model(path)?,
        None => {
            let cfg = RunConfig::load(&a.cfg)?;
            echo_config(out, &cfg, &a.cfg.overrides)?;
            build_model(&cfg.model, cfg.train.seed)?
        }
    };
    write!(out, "{}", model.summary())?;
    let part = model.partition();
    let titles = ["self", "closer to root", "farther from root"];
    for (k, title) in titles.iter().enumerate() {
        writeln!(out, "normalized group {} ({title})", k + 1)?;
        write!(out, "{}", format_matrix(&part.normalized[k]))?;
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let base = RunConfig {
        model: ModelConfig::tiny(),
        ..RunConfig::default()
    };
    let cfg = RunConfig::load_over(base, &a.cfg)?;
    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    let n = model.num_params();
    if n > GRADCHECK_MAX_PARAMS {
        bail!(
            "refusing to gradcheck a model with {n} parameters (limit {GRADCHECK_MAX_PARAMS}); \
             reduce model.channels or model.depth, or use the default tiny config"
        );
    }
    echo_config(out, &cfg, &a.cfg.overrides)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    randomize_params(&mut model, 0.5, &mut rng);
    // Targets in metres keep the loss of order one, so rounding noise in the
    // central differences stays far below the tolerance.
    let data = synth_dataset(cfg.train.seed, 3, model.skeleton())?;
    let samples: Vec<PoseSample> = data
        .samples
        .into_iter()
        .map(|s| PoseSample {
            pose3d: s.pose3d.scale(1e-3),
            ..s
        })
        .collect();
    let refs: Vec<&PoseSample> = samples.iter().collect();
    let settings = GradCheckSettings::default();
    let report = check_gradients(
        &model,
        &refs,
        cfg.train.exclude_root,
        settings,
        a.corrupt_gradient,
    )?;
    let pass = report.passes(GRADCHECK_TOL);
    writeln!(
        out,
        "checked {} entries (h = {:e}, floor = {:e}); max relative error {:.3e} at {:?}; {}",
        report.entries_checked,
        settings.h,
        settings.floor,
        report.max_rel_error,
        report.worst,
        if pass { "PASS" } else { "FAIL" }
    )?;
    if pass {
        Ok(())
    } else {
        bail!(
            "gradient check failed: max relative error {:.3e} >= {GRADCHECK_TOL:e}",
            report.max_rel_error
        )
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let skeleton = Skeleton::load(&a.skeleton)?;
    let data = synth_dataset(a.seed, a.n, &skeleton)?;
    data.save(&a.out)?;
    writeln!(
        out,
        "wrote {} samples ({} joints, seed {}) to {}",
        data.len(),
        skeleton.num_joints(),
        a.seed,
        a.out.display()
    )?;
    Ok(())
}

pub fn cmd_convert(a: &ConvertArgs, out: &mut dyn Write) -> Result<()> {
    let skeleton = Skeleton::load(&a.skeleton)?;
    let text = fs::read_to_string(&a.data)?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let index = records.len();
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| anyhow!("record {index}: {e}"))?;
        records.push(convert_raw_record(&raw, &skeleton, index)?);
    }
    write_records(&a.out, &records)?;
    writeln!(
        out,
        "converted {} records to {}",
        records.len(),
        a.out.display()
    )?;
    Ok(())
}
