//! The `fcsin` command line: dataset construction, training, interpolation
//! and evaluation.
//!
//! Every option flag is bound to one configuration key (see [`FLAGS`]); the
//! help text of each flag names it. Settings are layered as: built-in
//! defaults (or, for `interpolate`/`evaluate`, the checkpoint's embedded
//! configuration) < `--config FILE` < `--set KEY=VALUE` < dedicated flags.
//! `FCSIN_SEED` supplies `train.seed` when nothing else sets it.
//!
//! Exit codes: 0 success, 1 runtime fault, 2 usage or contract error.
//!
//! ```
//! use fcsin_core::training::CONFIG_KEYS;
//! for f in fcsin_cli::FLAGS {
//!     assert!(CONFIG_KEYS.iter().any(|(k, _)| *k == f.key), "--{} -> {}", f.long, f.key);
//! }
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};

use fcsin_core::eval_metrics::evaluate;
use fcsin_core::frames_io::{build_dataset, load_raster, sketchize_tree, BuildOptions, DatasetIndex, Raster};
use fcsin_core::guidance::extract_guidance;
use fcsin_core::training::{Checkpoint, TrainConfig, Trainer, CHECKPOINT_FILE, CONFIG_KEYS, LOSS_LOG_FILE};
use fcsin_core::u_transformer::predict;

pub const SEED_ENV: &str = "FCSIN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlagKind {
    Value,
    Switch,
}

/// An option flag and the configuration key it sets.
#[derive(Clone, Copy, Debug)]
pub struct FlagSpec {
    /// Subcommand, or `None` for flags accepted everywhere.
    pub command: Option<&'static str>,
    pub long: &'static str,
    pub key: &'static str,
    pub kind: FlagKind,
    pub help: &'static str,
}

const fn flag(command: Option<&'static str>, long: &'static str, key: &'static str, help: &'static str) -> FlagSpec {
    FlagSpec {
        command,
        long,
        key,
        kind: FlagKind::Value,
        help,
    }
}

const fn switch(command: &'static str, long: &'static str, key: &'static str, help: &'static str) -> FlagSpec {
    FlagSpec {
        command: Some(command),
        long,
        key,
        kind: FlagKind::Switch,
        help,
    }
}

pub const FLAGS: &[FlagSpec] = &[
    flag(None, "threads", "runtime.threads", "Worker threads (0 = all cores); results do not depend on it"),
    flag(Some("sketchize"), "min-stroke-px", "sketch.min_stroke_px", "Drop stroke fragments smaller than this"),
    flag(Some("build-dataset"), "stride", "dataset.stride", "Frame offset between triplet members"),
    flag(Some("build-dataset"), "split", "dataset.split", "Split name written to the manifest"),
    flag(Some("build-dataset"), "min-stroke-px", "sketch.min_stroke_px", "Drop stroke fragments smaller than this"),
    flag(Some("train"), "data", "data.root", "Dataset directory (holding index.manifest)"),
    flag(Some("train"), "out", "train.out_dir", "Run directory for checkpoints and the loss log"),
    flag(Some("train"), "epochs", "train.epochs", "Passes over the dataset"),
    flag(Some("train"), "batch-size", "train.batch_size", "Triplets per optimizer step"),
    flag(Some("train"), "lr", "optim.lr", "AdaMax learning rate"),
    flag(Some("train"), "max-steps", "train.max_steps", "Stop after this many steps (0 = no limit)"),
    flag(Some("train"), "checkpoint-every", "train.checkpoint_every", "Steps between checkpoints"),
    flag(Some("train"), "seed", "train.seed", "Seed for initialisation, shuffling and augmentation (env FCSIN_SEED when unset)"),
    flag(Some("train"), "ablate", "ablate", "Disable components: comma list of no-pixel, no-sketch, no-region, no-ccb"),
    flag(Some("train"), "trace-times", "trace_times", "Point-trace timestamps, e.g. 0.25,0.5,0.75"),
    flag(Some("train"), "resume", "train.resume", "Continue from this checkpoint"),
    switch("interpolate", "dump-guidance", "output.dump_guidance", "Also write the guidance maps and flows"),
    switch("interpolate", "dump-overlays", "output.dump_overlays", "Also write keypoint-match and region debug images"),
    switch("evaluate", "predict-target", "eval.predict_target", "Oracle mode: score the ground truth against itself"),
];

fn help_for(f: &FlagSpec) -> String {
    format!("{} [config: {}]", f.help, f.key)
}

fn flags_for(cmd: Option<&str>) -> impl Iterator<Item = &'static FlagSpec> + '_ {
    FLAGS.iter().filter(move |f| f.command == cmd)
}

fn with_flags(mut c: Command, name: Option<&str>) -> Command {
    for f in flags_for(name) {
        let mut a = Arg::new(f.long).long(f.long).help(help_for(f));
        a = match f.kind {
            FlagKind::Value => a.value_name("VALUE").action(ArgAction::Set),
            FlagKind::Switch => a.action(ArgAction::SetTrue),
        };
        if name.is_none() {
            a = a.global(true);
        }
        c = c.arg(a);
    }
    c
}

fn positional(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .required(true)
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

/// The full command tree.
pub fn command() -> Command {
    let root = Command::new("fcsin")
        .about("Sketch inbetweening with pixel, stroke and region guidance")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Configuration file of `key = value` lines [config: all keys]"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .global(true)
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("Override one configuration key; repeatable [config: any key]"),
        );
    let root = with_flags(root, None);
    let subs = [
        Command::new("sketchize")
            .about("Convert colour frames to line sketches (one PNG per frame plus a manifest)")
            .arg(positional("input", "Directory of frames or of clip sub-directories"))
            .arg(positional("output", "Directory receiving the sketches")),
        Command::new("build-dataset")
            .about("Assemble sketch triplets from clips of ordered frames")
            .arg(positional("frames", "Directory of clip sub-directories"))
            .arg(positional("output", "Dataset directory to create")),
        Command::new("train").about("Train the interpolation network"),
        Command::new("interpolate")
            .about("Synthesise the middle frame between two keyframes")
            .arg(positional("checkpoint", "Trained checkpoint"))
            .arg(positional("frame0", "First keyframe"))
            .arg(positional("frame1", "Second keyframe"))
            .arg(positional("output", "PNG to write")),
        Command::new("evaluate")
            .about("Score a checkpoint on a dataset (PSNR, SSIM, IE, CD)")
            .arg(positional("checkpoint", "Trained checkpoint"))
            .arg(positional("dataset", "Dataset directory"))
            .arg(positional("output", "Directory for metrics.csv and the summary")),
    ];
    subs.into_iter().fold(root, |r, s| {
        let name = s.get_name().to_string();
        r.subcommand(with_flags(s, Some(&name)))
    })
}

/// Parsed command plus the configuration it runs with.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: String,
    pub config: TrainConfig,
    pub seed: u64,
}

/// Layer config file, `--set` and dedicated flags over `base`.
pub fn resolve_config(command: &str, m: &ArgMatches, base: TrainConfig) -> anyhow::Result<RunConfig> {
    let mut cfg = base;
    let mut explicit: Vec<String> = Vec::new();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        explicit.extend(cfg.apply_text(&text)?);
    }
    for s in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| fcsin_core::Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k.trim(), v)?;
        explicit.push(k.trim().to_string());
    }
    for f in FLAGS.iter().filter(|f| f.command.is_none() || f.command == Some(command)) {
        match f.kind {
            FlagKind::Value => {
                if let Some(v) = m.get_one::<String>(f.long) {
                    cfg.set(f.key, v)?;
                    explicit.push(f.key.to_string());
                }
            }
            FlagKind::Switch => {
                if m.get_flag(f.long) {
                    cfg.set(f.key, "true")?;
                }
            }
        }
    }
    if !explicit.iter().any(|k| k == "train.seed") {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.set("train.seed", &v)
                .map_err(|_| fcsin_core::Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
        }
    }
    cfg.validate()?;
    Ok(RunConfig {
        command: command.to_string(),
        seed: cfg.seed,
        config: cfg,
    })
}

/// Exit status for an error: 2 for usage/contract problems, 1 for runtime faults.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    use fcsin_core::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Contract(_) | E::Config(_) | E::Dataset(_) | E::Io { .. }) => 2,
        Some(E::Image { .. } | E::Checkpoint(_) | E::NonFiniteLoss { .. }) => 1,
        None => 1,
    }
}

/// Parse `args` and run; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&m) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(m: &ArgMatches) -> anyhow::Result<()> {
    let (name, sub) = m.subcommand().ok_or_else(|| anyhow!("no command given"))?;
    let base = match name {
        "interpolate" | "evaluate" => {
            let p = sub.get_one::<PathBuf>("checkpoint").expect("required");
            Some(Checkpoint::load(p)?)
        }
        _ => None,
    };
    let rc = resolve_config(name, sub, base.as_ref().map(|c| c.config.clone()).unwrap_or_default())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(rc.config.threads)
        .build()
        .context("building the worker pool")?;
    pool.install(|| match name {
        "sketchize" => cmd_sketchize(sub, &rc),
        "build-dataset" => cmd_build_dataset(sub, &rc),
        "train" => cmd_train(&rc),
        "interpolate" => cmd_interpolate(sub, &rc, base.expect("loaded above")),
        "evaluate" => cmd_evaluate(sub, &rc, base.expect("loaded above")),
        other => bail!("unknown command {other}"),
    })
}

fn path<'a>(m: &'a ArgMatches, id: &str) -> &'a Path {
    m.get_one::<PathBuf>(id).expect("required positional")
}

fn cmd_sketchize(m: &ArgMatches, rc: &RunConfig) -> anyhow::Result<()> {
    let counts = sketchize_tree(path(m, "input"), path(m, "output"), &rc.config.sketch)?;
    for (clip, n) in &counts {
        println!("{clip}: {n} frames");
    }
    println!("total: {} frames", counts.iter().map(|c| c.1).sum::<usize>());
    Ok(())
}

fn cmd_build_dataset(m: &ArgMatches, rc: &RunConfig) -> anyhow::Result<()> {
    let opts = BuildOptions {
        stride: rc.config.dataset_stride,
        split: rc.config.dataset_split.clone(),
        sketch: rc.config.sketch.clone(),
    };
    let idx = build_dataset(path(m, "frames"), path(m, "output"), &opts)?;
    for s in &idx.skipped {
        println!("skipped {}: {} frame(s), need {}", s.clip, s.frames, s.needed);
    }
    println!("{} triplets written to {}", idx.len(), idx.root.display());
    Ok(())
}

fn cmd_train(rc: &RunConfig) -> anyhow::Result<()> {
    let cfg = &rc.config;
    if cfg.data.root.is_empty() {
        return Err(fcsin_core::Error::Config("no dataset given (use --data or data.root)".into()).into());
    }
    let index = DatasetIndex::load(&cfg.data.root)?;
    let out = PathBuf::from(&cfg.out_dir);
    let mut trainer = if cfg.resume.is_empty() {
        Trainer::new(cfg.clone(), &index)?
    } else {
        let ck = Checkpoint::load(&cfg.resume)?;
        let mut t = Trainer::from_checkpoint(ck, &index)?;
        t.set_stop(cfg.epochs, cfg.max_steps);
        t
    };
    println!(
        "training: {} triplets, {} parameters, seed {}",
        index.len(),
        trainer.params().count(),
        trainer.config().seed
    );
    let records = trainer.run(Some(&out))?;
    if let Some(last) = records.last() {
        println!("step {}: total {:.6} (l1 {:.6}, lpips {:.6})", last.step, last.total, last.l1, last.lpips);
    }
    println!(
        "checkpoint: {}\nloss log: {}",
        out.join(CHECKPOINT_FILE).display(),
        out.join(LOSS_LOG_FILE).display()
    );
    Ok(())
}

/// Keyframes are used as single-channel sketches.
fn load_sketch(p: &Path) -> anyhow::Result<Raster> {
    let r = load_raster(p)?;
    Ok(if r.channels() == 1 { r } else { Raster::from_plane(&r.to_gray())? })
}

fn cmd_interpolate(m: &ArgMatches, rc: &RunConfig, ck: Checkpoint) -> anyhow::Result<()> {
    let (i0, i1) = (load_sketch(path(m, "frame0"))?, load_sketch(path(m, "frame1"))?);
    if (i0.height(), i0.width()) != (i1.height(), i1.width()) {
        return Err(fcsin_core::Error::Contract(format!(
            "keyframe sizes differ: {}x{} vs {}x{}",
            i0.width(),
            i0.height(),
            i1.width(),
            i1.height()
        ))
        .into());
    }
    let cfg = &rc.config;
    let g = extract_guidance(&i0, &i1, &cfg.guidance_config())?;
    let out = predict(&cfg.net_config(), &ck.params, &g.bundle)?;
    let dest = path(m, "output");
    out.save_png(dest)?;
    println!("wrote {}", dest.display());
    if cfg.dump_guidance || cfg.dump_overlays {
        let stem = dest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dir = dest.with_file_name(format!("{stem}_guidance"));
        if cfg.dump_guidance {
            g.dump(&dir)?;
        }
        if cfg.dump_overlays {
            g.dump_overlays(&dir, &i0, &i1, rc.seed)?;
        }
        println!("guidance written to {}", dir.display());
    }
    Ok(())
}

fn cmd_evaluate(m: &ArgMatches, rc: &RunConfig, ck: Checkpoint) -> anyhow::Result<()> {
    let index = DatasetIndex::load(path(m, "dataset"))?;
    let report = evaluate(&rc.config, &ck.params, &index)?;
    let out = path(m, "output");
    report.write(out)?;
    println!("{}", report.summary_line());
    Ok(())
}

/// Every config key a flag can reach, for documentation.
pub fn flag_keys() -> Vec<&'static str> {
    let mut v: Vec<&str> = FLAGS.iter().map(|f| f.key).collect();
    v.sort();
    v.dedup();
    debug_assert!(v.iter().all(|k| CONFIG_KEYS.iter().any(|(c, _)| c == k)));
    v
}
