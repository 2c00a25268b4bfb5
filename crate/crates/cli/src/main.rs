//! `bevbeam` command-line driver.

mod plots;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevbeam::config::RunConfig;
use bevbeam::data::dataset::{parse_index, INDEX_FILE};
use bevbeam::data::synthetic::{generate_synthetic, CodebookSpec, SyntheticConfig};
use bevbeam::metrics::{dba_curve, parse_predictions, rank_beams, DbaReport, ScoredSample};
use bevbeam::pipeline::{eval_run, load_model, train_run, Part, Prepared, BEST_CHECKPOINT};
use bevbeam::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bevbeam", version, about = "BEV fusion mmWave beam prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic drive-by dataset.
    Generate(GenerateArgs),
    /// Train a model and keep the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file.
    Eval(EvalArgs),
    /// Write ranked beams per sample.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    sequences: usize,
    #[arg(long, default_value_t = 64)]
    beams: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    scenarios: usize,
    /// Codebook field of view, degrees.
    #[arg(long, default_value_t = 90.0)]
    fov: f64,
    /// GPS noise standard deviation, meters.
    #[arg(long, default_value_t = 1.0)]
    gps_sigma: f64,
    #[arg(long, default_value_t = 256)]
    camera_size: usize,
    /// Per-frame probability that the vehicle is hidden from all sensors.
    #[arg(long, default_value_t = 0.15)]
    occlusion: f64,
}

/// Configuration shared by the model commands. Precedence: flags, then
/// `--set`, then the config file, then the preset.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML file with flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to start from when no config file is given: `paper` or `desk`.
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Override any config key, e.g. `--set temporal_layers=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beams: Option<usize>,
    #[arg(long)]
    ablation: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: Vec<(&'static str, String)>) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => match self.preset.as_str() {
                "paper" => RunConfig::default(),
                "desk" => RunConfig::desk(),
                other => {
                    return Err(Error::config(
                        "preset",
                        format!("unknown preset `{other}` (paper, desk)"),
                    ))
                }
            },
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(kv.clone(), "expected KEY=VALUE"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
        let flags = [
            ("data_dir", path(&self.data)),
            ("out_dir", path(&self.out)),
            ("seed", self.seed.map(|v| v.to_string())),
            ("beams", self.beams.map(|v| v.to_string())),
            ("ablation", self.ablation.clone()),
        ];
        pairs.extend(
            flags
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
        );
        pairs.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
        base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a checkpoint of the same architecture.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Defaults to `best.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score an existing predictions CSV instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// `train`, `val`, `test` or `all`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write PNG plots of the confusion matrix and DBA curve.
    #[arg(long)]
    plots: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output CSV; defaults to `predictions.csv` in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Contract(_) | Error::Dimension { .. } => 3,
        Error::Numeric(_) => 4,
        Error::CheckpointMismatch { .. } => 5,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_sequences: a.sequences,
        codebook: CodebookSpec {
            beams: a.beams,
            fov_deg: a.fov,
        },
        scenarios: a.scenarios,
        seed: a.seed,
        gps_sigma: a.gps_sigma,
        camera_size: a.camera_size,
        occlusion_prob: a.occlusion,
        ..SyntheticConfig::default()
    };
    let summary = generate_synthetic(&cfg, &a.out)?;
    let echo = a.out.join("generate.txt");
    std::fs::write(&echo, format!("{a:#?}\n")).map_err(|e| Error::io(&echo, e))?;
    println!(
        "generated {} sequences in {}",
        summary.sequences,
        a.out.display()
    );
    let hist: Vec<String> = summary
        .label_histogram
        .iter()
        .map(usize::to_string)
        .collect();
    println!("label histogram: {}", hist.join(" "));
    let covered = summary.label_histogram.iter().filter(|&&c| c > 0).count();
    println!("beams covered: {covered}/{}", a.beams);
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(v) = a.epochs {
        extra.push(("epochs", v.to_string()));
    }
    if let Some(v) = a.lr {
        extra.push(("lr", format!("{v:e}")));
    }
    if let Some(v) = a.batch_size {
        extra.push(("batch_size", v.to_string()));
    }
    let cfg = a.cfg.resolve(extra)?;
    let outcome = train_run(&cfg, a.resume.as_deref())?;
    let last = outcome.logs.last().and_then(|l| l.val_dba);
    match last {
        Some(v) => println!("final val_dba {v:.6}"),
        None => println!("final val_dba n/a (empty validation split)"),
    }
    if let Some(b) = outcome.best_val_dba {
        println!("best val_dba {b:.6}");
    }
    println!("outputs in {}", outcome.out_dir.display());
    Ok(())
}

fn write_reports(report: &DbaReport, out: &Path) -> Result<()> {
    let p = out.join("report.csv");
    report.write_csv(create(&p)?)?;
    let p = out.join("confusion.csv");
    report.write_confusion_csv(create(&p)?)?;
    Ok(())
}

/// Scenario of each seq_id from the dataset index, when one is present.
fn scenario_map(data_dir: &Path) -> HashMap<String, u32> {
    let Ok(f) = File::open(data_dir.join(INDEX_FILE)) else {
        return HashMap::new();
    };
    parse_index(BufReader::new(f))
        .map(|es| es.into_iter().map(|e| (e.seq_id, e.scenario_id)).collect())
        .unwrap_or_default()
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.cfg.resolve(Vec::new())?;
    let out = &cfg.out_dir;
    let dba_cfg = cfg.dba_config();
    let (report, samples) = if let Some(pred_path) = &a.predictions {
        let f = File::open(pred_path).map_err(|e| Error::io(pred_path, e))?;
        let rows = parse_predictions(BufReader::new(f), cfg.beams)
            .map_err(|e| Error::format(pred_path, 0, e.to_string()))?;
        if rows.is_empty() {
            return Err(Error::format(pred_path, 0, "no prediction rows"));
        }
        let scen = scenario_map(&cfg.data_dir);
        let samples: Vec<ScoredSample> = rows
            .into_iter()
            .map(|r| ScoredSample {
                scenario: scen.get(&r.seq_id).copied().unwrap_or(0),
                seq_id: r.seq_id,
                ranked: vec![r.rank1, r.rank2, r.rank3],
                label: r.label,
            })
            .collect();
        (
            DbaReport::from_samples("predictions", &samples, cfg.beams, &dba_cfg)?,
            samples,
        )
    } else {
        let ck = a
            .checkpoint
            .clone()
            .unwrap_or_else(|| out.join(BEST_CHECKPOINT));
        let model = load_model(&cfg, &ck)?;
        let data = Prepared::open(&cfg)?;
        let part: Part = a.split.parse()?;
        let (report, probs) = eval_run(&cfg, &model, &data, part, cfg.ablation)?;
        let src = data.subset(part);
        let samples = probs
            .iter()
            .zip(src.indices)
            .map(|(p, &i)| {
                let e = &data.dataset.entries()[i];
                ScoredSample {
                    seq_id: e.seq_id.clone(),
                    scenario: e.scenario_id,
                    ranked: rank_beams(p),
                    label: e.label,
                }
            })
            .collect::<Vec<_>>();
        (report, samples)
    };
    cfg.echo(out)?;
    write_reports(&report, out)?;
    println!(
        "mode {} samples {} dba {:.6} top1 {:.4} top2 {:.4} top3 {:.4}",
        report.mode, report.samples, report.dba, report.top_k[0], report.top_k[1], report.top_k[2]
    );
    for (sc, (n, d)) in &report.per_scenario {
        println!("  scenario {sc}: {n} samples, dba {d:.6}");
    }
    if a.plots {
        let preds: Vec<Vec<usize>> = samples.iter().map(|s| s.ranked.clone()).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let curve = dba_curve(&preds, &labels, &dba_cfg)?;
        plots::confusion_heatmap(&report.confusion, &out.join("confusion.png"))?;
        plots::line_plot(&curve, &out.join("dba_curve.png"))?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let cfg = a.cfg.resolve(Vec::new())?;
    let ck = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(BEST_CHECKPOINT));
    let model = load_model(&cfg, &ck)?;
    let data = Prepared::open(&cfg)?;
    let part: Part = a.split.parse()?;
    let (_, probs) = eval_run(&cfg, &model, &data, part, cfg.ablation)?;
    let path = a
        .output
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("predictions.csv"));
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "seq_id,rank1,rank2,rank3,prob1,prob2,prob3").map_err(io)?;
    for (p, &i) in probs.iter().zip(data.indices(part)) {
        let ranked = rank_beams(p);
        let cell = |k: usize, f: &dyn Fn(usize) -> String| {
            ranked.get(k).map(|&b| f(b)).unwrap_or_default()
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            data.dataset.entries()[i].seq_id,
            cell(0, &|b| b.to_string()),
            cell(1, &|b| b.to_string()),
            cell(2, &|b| b.to_string()),
            cell(0, &|b| format!("{:.6e}", p[b])),
            cell(1, &|b| format!("{:.6e}", p[b])),
            cell(2, &|b| format!("{:.6e}", p[b])),
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;
    println!("wrote {} predictions to {}", probs.len(), path.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("BEVBEAM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::config(
            "BEVBEAM_THREADS",
            format!("expected a positive integer, got `{v}`"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("BEVBEAM_THREADS", e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.cmd {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
