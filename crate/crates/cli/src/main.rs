//! `proof`: synthesize embedding datasets, run class-incremental training,
//! re-evaluate checkpoints, sweep seeds and run the retrieval variant.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use proof_core::dataset::{
    make_task_stream, read_dataset, synth_split, write_dataset, DataError, DatasetManifest, EmbeddingDataset,
    SynthConfig, DEFAULT_TEXT_GAP, DEFAULT_TEXT_NOISE,
};
use proof_core::eval::{round2, RunReport};
use proof_core::model::ModelState;
use proof_core::rng::RNG_VERSION;
use proof_core::trainer::{evaluate_stage, retrieval_recall, run_incremental, train_retrieval, RunOptions};

use config::{Settings, TrainFlags};
use manifest::{InputFile, RunManifest, Timings};

#[derive(Parser, Debug)]
#[command(name = "proof", version)]
#[command(about = "Class-incremental learning over frozen image/text embeddings")]
#[command(after_help = "Examples:
  proof synth --classes 20 --per-class 50 --dim 16 --seed 7 --separation 5 --out toy.emb1
  proof train --data toy.emb1 --inc 4 --out-dir runs/toy
  proof eval --checkpoint runs/toy/stage_05.ckpt --data toy.emb1
  proof sweep --data toy.emb1 --inc 4 --out-dir runs/sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic EMB1 dataset
    Synth(SynthArgs),
    /// Run the incremental protocol and write checkpoints and reports
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset
    Eval(EvalArgs),
    /// Repeat `train` over several seeds and aggregate the results
    Sweep(SweepArgs),
    /// Incremental cross-modal retrieval on a paired EMB1 file
    Retrieve(RetrieveArgs),
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long = "per-class", default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1993)]
    seed: u64,
    /// Image noise has per-coordinate standard deviation 1/separation
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Strength of the shared image-to-text distortion
    #[arg(long = "text-gap", default_value_t = DEFAULT_TEXT_GAP)]
    text_gap: f64,
    /// Per-class text perturbation
    #[arg(long = "text-noise", default_value_t = DEFAULT_TEXT_NOISE)]
    text_noise: f64,
    #[arg(long)]
    out: PathBuf,
    /// Records per class in the held-out split (requires --test-out)
    #[arg(long = "test-per-class", requires = "test_out")]
    test_per_class: Option<usize>,
    #[arg(long = "test-out", requires = "test_per_class")]
    test_out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Training split (EMB1)
    #[arg(long)]
    data: PathBuf,
    /// Test split (EMB1); defaults to the training split
    #[arg(long)]
    test: Option<PathBuf>,
    /// Also score classes not yet learned (A_U, A_HM)
    #[arg(long = "eval-zeroshot")]
    eval_zeroshot: bool,
    /// Paired EMB1 file for the probe score
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Score dataset classes the checkpoint has not learned
    #[arg(long = "eval-zeroshot")]
    eval_zeroshot: bool,
    #[arg(long)]
    probe: Option<PathBuf>,
    /// Paired EMB1 file: report R@1/5/10 in both directions
    #[arg(long)]
    recall: Option<PathBuf>,
    /// Write the report as JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1993u64, 1994, 1995, 1996, 1997])]
    seeds: Vec<u64>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(clap::Args, Debug)]
struct RetrieveArgs {
    /// Paired EMB1 file: record i pairs with the text of its label
    #[arg(long)]
    data: PathBuf,
    /// Contiguous tasks the pairs are split into, in file order
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> anyhow::Result<EmbeddingDataset> {
    read_dataset(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let cfg = SynthConfig::new(a.classes, a.per_class, a.dim, a.seed, a.separation)
        .with_test(a.test_per_class.unwrap_or(0))
        .with_text_gap(a.text_gap)
        .with_text_noise(a.text_noise);
    let (train, test) = match synth_split(&cfg) {
        Ok(v) => v,
        Err(DataError::Argument(m)) => return usage(m),
        Err(e) => return Err(anyhow!(e).into()),
    };
    write_dataset(&train, &a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.test_out {
        write_dataset(&test, path).with_context(|| format!("cannot write {}", path.display()))?;
        outputs.push(path.clone());
    }
    for (i, path) in outputs.iter().enumerate() {
        let mut params = serde_json::Map::new();
        params.insert("config".into(), serde_json::to_value(&cfg).map_err(anyhow::Error::from)?);
        let manifest = DatasetManifest {
            source: "synthetic".into(),
            split: Some(if i == 0 { "train" } else { "test" }.into()),
            params,
            ..DatasetManifest::default()
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?;
        write_text(&sidecar(path), &(json + "\n"))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn settings(flags: &TrainFlags) -> CmdResult<Settings> {
    Settings::resolve(flags).or_else(usage)
}

fn stage_line(report: &RunReport) -> String {
    let mut out = String::new();
    for s in &report.stages {
        let _ = writeln!(
            out,
            "stage {:>2}  classes {:>4}  acc {:>6.2}  zs {:>6.2}  simplecil {:>6.2}",
            s.stage,
            s.classes_seen,
            round2(s.accuracy),
            round2(s.zs_accuracy),
            round2(s.simplecil_accuracy)
        );
    }
    out
}

struct TrainOutcome {
    report: RunReport,
}

fn run_train(
    data: &Path,
    test: Option<&Path>,
    probe: Option<&Path>,
    eval_zeroshot: bool,
    out_dir: &Path,
    s: &Settings,
    command: &str,
) -> CmdResult<TrainOutcome> {
    let t0 = Instant::now();
    let train = load(data)?;
    let test_ds = match test {
        Some(p) => load(p)?,
        None => train.clone(),
    };
    let probe_pairs = match probe {
        Some(p) => {
            let ds = load(p)?;
            if ds.dim() != train.dim() {
                return Err(anyhow!("probe file has dimension {}, data has {}", ds.dim(), train.dim()).into());
            }
            Some(ds.pairs())
        }
        None => None,
    };
    let stream = make_task_stream(train.num_classes(), s.base, s.inc, s.train.seed)
        .context("cannot build the task stream")?;
    let load_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let opts = RunOptions {
        zero_shot: eval_zeroshot,
        probe: probe_pairs,
    };
    let run = run_incremental(&train, &test_ds, &stream, &s.train, &opts).context("training failed")?;
    let train_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut checkpoints = Vec::new();
    for (b, state) in run.states.iter().enumerate() {
        let path = out_dir.join(format!("stage_{:02}.ckpt", b + 1));
        state.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
        checkpoints.push(path.display().to_string());
    }
    let csv = out_dir.join("report.csv");
    write_text(&csv, &run.report.to_csv())?;
    let json = out_dir.join("report.json");
    write_text(&json, &(run.report.to_json() + "\n"))?;

    let mut inputs = vec![InputFile::new("data", data)?];
    if let Some(p) = test {
        inputs.push(InputFile::new("test", p)?);
    }
    if let Some(p) = probe {
        inputs.push(InputFile::new("probe", p)?);
    }
    let mut config = serde_json::to_value(s).map_err(anyhow::Error::from)?;
    config["eval_zeroshot"] = eval_zeroshot.into();
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        rng: RNG_VERSION.into(),
        config,
        inputs,
        stream: serde_json::json!({
            "base": stream.base,
            "inc": stream.inc,
            "seed": stream.seed,
            "class_order": stream.class_order,
            "tasks": stream.tasks,
        }),
        reports: vec![csv.display().to_string(), json.display().to_string()],
        checkpoints,
        timings: Timings {
            load_seconds,
            train_seconds,
            write_seconds: t2.elapsed().as_secs_f64(),
        },
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(TrainOutcome { report: run.report })
}

fn cmd_train(a: &TrainArgs) -> CmdResult<TrainOutcome> {
    let s = settings(&a.flags)?;
    let out = run_train(
        &a.data,
        a.test.as_deref(),
        a.probe.as_deref(),
        a.eval_zeroshot,
        &a.out_dir,
        &s,
        "train",
    )?;
    print!("{}", stage_line(&out.report));
    if let (Some(avg), Some(last)) = (out.report.average_accuracy(), out.report.last_accuracy()) {
        println!("average accuracy {:.2}  last accuracy {:.2}", round2(avg), round2(last));
    }
    Ok(out)
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let state = ModelState::load(&a.checkpoint).with_context(|| format!("cannot load {}", a.checkpoint.display()))?;
    let ds = load(&a.data)?;
    state.check_dataset(&ds).with_context(|| format!("{} does not fit {}", a.checkpoint.display(), a.data.display()))?;
    let seen: Vec<u32> = state.seen().iter().map(|c| c.id).collect();
    let unseen: Vec<u32> = (0..ds.num_classes() as u32).filter(|c| !seen.contains(c)).collect();
    let probe = match &a.probe {
        Some(p) => {
            let pds = load(p)?;
            if pds.dim() != state.dim() {
                return Err(anyhow!("probe file has dimension {}, checkpoint has {}", pds.dim(), state.dim()).into());
            }
            Some(pds.pairs())
        }
        None => None,
    };
    let opts = RunOptions {
        zero_shot: a.eval_zeroshot,
        probe,
    };
    let mut report = RunReport::default();
    if !seen.is_empty() {
        let stage = evaluate_stage(&state, &ds, &seen, &unseen, state.tasks_learned(), 0, &opts)
            .context("evaluation failed")?;
        report.stages.push(stage);
        print!("{}", report.to_csv());
    }
    if let Some(p) = &a.recall {
        let pds = load(p)?;
        if pds.dim() != state.dim() {
            return Err(anyhow!("paired file has dimension {}, checkpoint has {}", pds.dim(), state.dim()).into());
        }
        let pairs = pds.pairs();
        let refs: Vec<_> = pairs.iter().collect();
        let recall = retrieval_recall(&state, &refs).context("recall evaluation failed")?;
        report.retrieval.push(proof_core::eval::RetrievalStage {
            stage: state.tasks_learned(),
            pairs: pairs.len(),
            recall,
        });
        print!("{}", report.retrieval_csv());
    }
    if let Some(out) = &a.out {
        write_text(out, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

/// Population mean and standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub const SWEEP_HEADER: &str = "seed,average_accuracy,average_std,last_accuracy,last_std";

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    if a.seeds.is_empty() {
        return usage("--seeds needs at least one seed");
    }
    let base = settings(&a.flags)?;
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let mut avgs = Vec::new();
    let mut lasts = Vec::new();
    for &seed in &a.seeds {
        let mut s = base;
        s.train.seed = seed;
        let dir = a.out_dir.join(format!("seed_{seed}"));
        let out = run_train(&a.data, a.test.as_deref(), None, false, &dir, &s, "sweep")?;
        let avg = round2(out.report.average_accuracy().unwrap_or(0.0));
        let last = round2(out.report.last_accuracy().unwrap_or(0.0));
        let _ = writeln!(csv, "{seed},{avg:.2},,{last:.2},");
        println!("seed {seed}: average {avg:.2}  last {last:.2}");
        avgs.push(avg);
        lasts.push(last);
    }
    let (am, asd) = mean_std(&avgs);
    let (lm, lsd) = mean_std(&lasts);
    let _ = writeln!(
        csv,
        "mean,{:.2},{:.2},{:.2},{:.2}",
        round2(am),
        round2(asd),
        round2(lm),
        round2(lsd)
    );
    let path = a.out_dir.join("sweep.csv");
    write_text(&path, &csv)?;
    println!("mean average {:.2} ± {:.2}  mean last {:.2} ± {:.2}", round2(am), round2(asd), round2(lm), round2(lsd));
    Ok(())
}

fn cmd_retrieve(a: &RetrieveArgs) -> CmdResult {
    let s = settings(&a.flags)?;
    if a.tasks == 0 {
        return usage("--tasks must be positive");
    }
    let t0 = Instant::now();
    let ds = load(&a.data)?;
    let pairs = ds.pairs();
    let n = pairs.len();
    if n < a.tasks {
        return Err(anyhow!("{n} pairs cannot fill {} tasks", a.tasks).into());
    }
    let tasks: Vec<Vec<usize>> = (0..a.tasks).map(|t| (t * n / a.tasks..(t + 1) * n / a.tasks).collect()).collect();
    let load_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let run = train_retrieval(&pairs, &tasks, &s.train).context("retrieval training failed")?;
    let train_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let report = RunReport {
        stages: Vec::new(),
        retrieval: run.stages,
    };
    let csv = a.out_dir.join("retrieval.csv");
    write_text(&csv, &report.retrieval_csv())?;
    let json = a.out_dir.join("report.json");
    write_text(&json, &(report.to_json() + "\n"))?;
    let ckpt = a.out_dir.join("final.ckpt");
    run.state.save(&ckpt).with_context(|| format!("cannot write {}", ckpt.display()))?;
    let manifest = RunManifest {
        command: "retrieve".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        rng: RNG_VERSION.into(),
        config: serde_json::to_value(s.train).map_err(anyhow::Error::from)?,
        inputs: vec![InputFile::new("data", &a.data)?],
        stream: serde_json::json!({ "tasks": tasks.iter().map(|t| [t[0], t.len()]).collect::<Vec<_>>() }),
        reports: vec![csv.display().to_string(), json.display().to_string()],
        checkpoints: vec![ckpt.display().to_string()],
        timings: Timings {
            load_seconds,
            train_seconds,
            write_seconds: t2.elapsed().as_secs_f64(),
        },
    };
    manifest.write(&a.out_dir.join("manifest.json"))?;
    print!("{}", report.retrieval_csv());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[70.0]), (70.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn cli_shape_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
