//! `ast`: data generation, training, evaluation, segmentation and
//! verification from the command line.

mod settings;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ast_core::checkpoint;
use ast_core::config::{RunConfig, Scenario};
use ast_core::data::{self, Dataset, LabeledScene};
use ast_core::metrics::{image_metrics, MetricsReport};
use ast_core::model::Model;
use ast_core::train::{self, RunOutput};
use ast_core::{verify, Error, Precision};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use settings::{Resolver, SEED_VAR};

#[derive(Parser)]
#[command(name = "ast", version, about = "Unsupervised multi-object segmentation with attention and soft-argmax")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration; keys not given fall back to the selected profile.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Field override such as `train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data and training; takes precedence over the config and AST_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Bt,
    Ct,
    FrozenBg,
}

impl ScenarioArg {
    fn name(self) -> &'static str {
        match self {
            ScenarioArg::Bt => "bt",
            ScenarioArg::Ct => "ct",
            ScenarioArg::FrozenBg => "frozen-bg",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain the background autoencoder.
    PretrainBg {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Train the foreground model under one of the three scenarios.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        /// Pretrained background checkpoint; required for ct and frozen-bg.
        #[arg(long)]
        bg_ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint, or a directory of predicted label maps, on a dataset.
    Eval {
        #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
        ckpt: Option<PathBuf>,
        /// Directory of predicted label PNGs named like the dataset's labels.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Segment one image.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Label PNG destination.
        #[arg(long)]
        out: PathBuf,
        /// Optional side-by-side input and reconstruction PNG.
        #[arg(long)]
        recon: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Run the localization, gradient, compositing, loss and metric suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn resolve(args: &ConfigArgs, mut flags: Vec<(&str, Value)>) -> CliResult<RunConfig> {
    if let Some(seed) = args.seed {
        flags.push(("train.seed", seed.into()));
        flags.push(("data.seed", seed.into()));
    }
    let resolver = Resolver {
        config: args.config.as_deref(),
        overrides: &args.overrides,
        env_seed: std::env::var(SEED_VAR).ok(),
    };
    Ok(resolver.resolve(&flags)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(io_err(path))?;
    Ok(())
}

fn prepare_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(())
}

fn training_scenes(cfg: &RunConfig, data: Option<&Path>) -> CliResult<Vec<LabeledScene>> {
    let scenes = match data {
        Some(dir) => Dataset::load(dir)?.scenes,
        None => Dataset::generate(&cfg.data, cfg.data.count).scenes,
    };
    if let Some(s) = scenes.iter().find(|s| s.size != cfg.model.image_size) {
        return Err(Failure::Usage(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            s.size, cfg.model.image_size
        )));
    }
    Ok(scenes)
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenData { cfg, out, count } => {
            let mut flags = Vec::new();
            if let Some(n) = count {
                flags.push(("data.count", n.into()));
            }
            let cfg = resolve(&cfg, flags)?;
            data::write_dataset(&out, &cfg.data, cfg.data.count)?;
            println!("wrote {} scenes to {}", cfg.data.count, out.display());
            Ok(())
        }
        Command::PretrainBg {
            cfg,
            data,
            out,
            steps,
            quiet,
        } => {
            let mut flags = Vec::new();
            if let Some(n) = steps {
                flags.push(("train.bg_pretrain_steps", n.into()));
            }
            if let Some(o) = &out {
                flags.push(("output_dir", o.to_string_lossy().into_owned().into()));
            }
            let cfg = resolve(&cfg, flags)?;
            let scenes = training_scenes(&cfg, data.as_deref())?;
            let dir = cfg.output_dir.clone();
            prepare_dir(&dir)?;
            write_json(&dir.join("config.json"), &cfg)?;
            let mut model = Model::new(&cfg.model, cfg.train.seed)?;
            let log_path = dir.join("pretrain_log.jsonl");
            let mut log = create(&log_path)?;
            let mut output = RunOutput {
                log: Some(&mut log),
                checkpoint_dir: Some(&dir),
                progress: !quiet,
                ..Default::default()
            };
            let start = Instant::now();
            match cfg.precision {
                Precision::F32 => train::pretrain_background::<f32>(&mut model, &scenes, &cfg.train, &mut output)?,
                Precision::F64 => train::pretrain_background::<f64>(&mut model, &scenes, &cfg.train, &mut output)?,
            };
            log.flush().map_err(io_err(&log_path))?;
            println!(
                "background checkpoint {} ({:.0} s)",
                dir.join("background.ckpt").display(),
                start.elapsed().as_secs_f64()
            );
            Ok(())
        }
        Command::Train {
            cfg,
            scenario,
            bg_ckpt,
            data,
            out,
            steps,
            precision,
            quiet,
        } => {
            let mut flags = Vec::new();
            if let Some(s) = scenario {
                flags.push(("train.scenario", s.name().into()));
            }
            if let Some(n) = steps {
                flags.push(("train.total_steps", n.into()));
            }
            if let Some(o) = &out {
                flags.push(("output_dir", o.to_string_lossy().into_owned().into()));
            }
            if let Some(p) = precision {
                flags.push(("precision", if matches!(p, PrecisionArg::F32) { "f32" } else { "f64" }.into()));
            }
            let cfg = resolve(&cfg, flags)?;
            train_command(&cfg, bg_ckpt.as_deref(), data.as_deref(), quiet)
        }
        Command::Eval {
            ckpt,
            pred,
            data,
            out,
            precision,
        } => {
            let dataset = Dataset::load(&data)?;
            let report = match (ckpt, pred) {
                (Some(ckpt), _) => {
                    let model = checkpoint::load(&ckpt)?;
                    check_sizes(&model, &dataset.scenes)?;
                    match precision {
                        PrecisionArg::F32 => train::evaluate::<f32>(&model, &dataset.scenes)?,
                        PrecisionArg::F64 => train::evaluate::<f64>(&model, &dataset.scenes)?,
                    }
                }
                (None, Some(dir)) => score_predictions(&dir, &dataset)?,
                (None, None) => return Err(Failure::Usage("one of --ckpt or --pred is required".into())),
            };
            match out {
                Some(path) => {
                    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                        prepare_dir(dir)?;
                    }
                    write_json(&path, &report)?;
                    println!(
                        "mIoU {:.4} ARI-FG {:.4} MSC-FG {:.4} MSE {}",
                        report.miou,
                        report.ari_fg,
                        report.msc_fg,
                        report.mse.map_or("n/a".to_string(), |m| format!("{m:.1}"))
                    );
                }
                None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
            }
            Ok(())
        }
        Command::Segment {
            ckpt,
            image,
            out,
            recon,
            precision,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let (w, h, rgb) = data::load_rgb(&image)?;
            let n = model.config.image_size;
            if w != n || h != n {
                return Err(Failure::Usage(format!(
                    "{} is {w}x{h} but the checkpoint expects {n}x{n}",
                    image.display()
                )));
            }
            let scene = LabeledScene {
                size: n,
                image: rgb.clone(),
                labels: vec![0; n * n],
            };
            let planes = vec![scene.planar()];
            let inf = match precision {
                PrecisionArg::F32 => train::infer::<f32>(&model, &planes)?,
                PrecisionArg::F64 => train::infer::<f64>(&model, &planes)?,
            };
            data::save_labels(&out, n, &inf.labels[0])?;
            if let Some(path) = recon {
                save_side_by_side(&path, n, &rgb, &inf.reconstructions[0])?;
            }
            let used = inf.labels[0].iter().copied().collect::<std::collections::BTreeSet<_>>();
            println!("labels {:?} written to {}", used, out.display());
            Ok(())
        }
        Command::Verify { seed, json } => {
            let report = verify::run_all(seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            } else {
                for s in &report.suites {
                    println!(
                        "{:<12} {:>5} checks {:>3} failures  worst {:.3e}  {:.1} s",
                        s.name,
                        s.checks,
                        s.failures.len(),
                        s.worst,
                        s.seconds
                    );
                    for f in s.failures.iter().take(10) {
                        println!("    {f}");
                    }
                }
                println!(
                    "{} of {} checks passed",
                    report.checks() - report.failures(),
                    report.checks()
                );
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime(Error::Contract {
                    op: "verify",
                    msg: format!("{} checks failed", report.failures()),
                }))
            }
        }
    }
}

fn check_sizes(model: &Model, scenes: &[LabeledScene]) -> CliResult {
    let n = model.config.image_size;
    match scenes.iter().find(|s| s.size != n) {
        Some(s) => Err(Failure::Usage(format!(
            "dataset images are {0}x{0} but the checkpoint expects {n}x{n}",
            s.size
        ))),
        None => Ok(()),
    }
}

fn train_command(cfg: &RunConfig, bg_ckpt: Option<&Path>, data: Option<&Path>, quiet: bool) -> CliResult {
    let needs_bg = matches!(cfg.train.scenario, Scenario::Ct | Scenario::FrozenBg);
    if needs_bg && bg_ckpt.is_none() {
        return Err(Failure::Usage(
            "the ct and frozen-bg scenarios need a pretrained background (--bg-ckpt)".into(),
        ));
    }
    let scenes = training_scenes(cfg, data)?;
    let mut model = Model::new(&cfg.model, cfg.train.seed)?;
    if let Some(path) = bg_ckpt {
        let bg = checkpoint::load(path)?;
        checkpoint::copy_background(&bg, &mut model)?;
    }
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let log_path = dir.join("log.jsonl");
    let eval_path = dir.join("eval.jsonl");
    let mut log = create(&log_path)?;
    let mut evals = create(&eval_path)?;
    let mut output = RunOutput {
        log: Some(&mut log),
        evals: Some(&mut evals),
        checkpoint_dir: Some(&dir),
        progress: !quiet,
    };
    let start = Instant::now();
    let summary = match cfg.precision {
        Precision::F32 => train::train::<f32>(&mut model, &scenes, &cfg.train, Some(&scenes), &mut output)?,
        Precision::F64 => train::train::<f64>(&mut model, &scenes, &cfg.train, Some(&scenes), &mut output)?,
    };
    log.flush().map_err(io_err(&log_path))?;
    evals.flush().map_err(io_err(&eval_path))?;
    if let Some(r) = summary.evals.last() {
        println!(
            "final mIoU {:.4} ARI-FG {:.4} MSC-FG {:.4} MSE {} after {} steps ({:.0} s)",
            r.miou,
            r.ari_fg,
            r.msc_fg,
            r.mse.map_or("n/a".to_string(), |m| format!("{m:.1}")),
            r.step,
            start.elapsed().as_secs_f64()
        );
    }
    println!("checkpoint {}", dir.join("final.ckpt").display());
    Ok(())
}

fn score_predictions(dir: &Path, dataset: &Dataset) -> CliResult<MetricsReport> {
    let per_image = dataset
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("{i:06}.png"));
            let (w, h, pred) = data::load_labels(&path)?;
            if w != s.size || h != s.size {
                return Err(Error::Config(format!(
                    "{} is {w}x{h}, labels are {1}x{1}",
                    path.display(),
                    s.size
                )));
            }
            image_metrics(i, &pred, &s.labels, None)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(MetricsReport::from_images(per_image))
}

fn save_side_by_side(path: &Path, n: usize, rgb: &[u8], recon: &[f64]) -> CliResult {
    let mut img = image::RgbImage::new(2 * n as u32, n as u32);
    let plane = n * n;
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            img.put_pixel(x as u32, y as u32, image::Rgb([rgb[3 * p], rgb[3 * p + 1], rgb[3 * p + 2]]));
            let px = |c: usize| (recon[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((n + x) as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}
