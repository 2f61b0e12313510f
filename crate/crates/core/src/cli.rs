//! The `consmooth` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    probe_model, radius_grid, summarize, trajectory_endpoint_fd, CertifiedAccuracyTable, ProbePoint,
};
use crate::certify::{
    certify, certify_dataset, read_records_csv, write_records_csv, BaseClassifier, CertificationRecord,
    HalfspaceOracle, ModelClassifier,
};
use crate::data::even_stride;
use crate::error::{Error, Result};
use crate::finetune::{FinetuneInit, FinetuneMetrics, Finetuner};
use crate::io::{read_dataset, to_json_lines, to_pretty_json, write_atomic, write_dataset, Checkpoint, RunConfig, Stage};
use crate::model::ModelParams;
use crate::numerics::SeededRng;
use crate::pretrain::{PretrainMetrics, Pretrainer};

#[derive(Parser, Debug)]
#[command(name = "consmooth", version, about = "Noise-consistent pre-training and certified smoothing")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Noise-consistent pre-training of encoder and projector.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning at one smoothing noise level.
    Finetune(FinetuneArgs),
    /// Certify test samples of a model, or points of an analytic oracle.
    Certify(CertifyArgs),
    /// Certified-accuracy curves and summaries from record files.
    Evaluate(EvaluateArgs),
    /// Linear probe on noisy representations and trajectory-endpoint distance.
    Probe(ProbeArgs),
    /// Materialize the configured train and test splits.
    GenData,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub iters: Option<u64>,
    /// Stop after this many completed iterations (the schedule still spans `iters`).
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Pre-trained checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Start from a random initialization instead.
    #[arg(long, conflicts_with = "init")]
    pub random_init: bool,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub eta1: Option<f64>,
    #[arg(long)]
    pub eta2: Option<f64>,
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[arg(long, conflicts_with_all = ["init", "random_init"])]
    pub resume: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Oracle {
    Halfspace,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    pub oracle: Option<Oracle>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub n0: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of samples or oracle points to certify.
    #[arg(long)]
    pub count: Option<usize>,
    /// Oracle margin `(w . x + b) / |w|` of every generated point.
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    /// Oracle input dimension.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Record 0 ms for every sample so outputs are byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Record CSV files, one per noise level.
    #[arg(long, required = true)]
    pub records: Vec<PathBuf>,
    /// Noise level of each record file, in order; defaults to the configured level.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Vec<f64>,
    /// Smoothing noises per record, for the per-noise latency.
    #[arg(long)]
    pub n: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code,
/// printing a single `error: kind=... msg="..."` line on failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

pub fn error_line(kind: &str, msg: &str) -> String {
    let msg = msg.replace(['\n', '\r'], " ");
    format!("error: kind={kind} msg={}", serde_json::to_string(&msg).expect("strings serialize"))
}

/// Configuration after applying `--config`, `--seed` and `--out`.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

/// Runs a parsed command and returns the files it wrote.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Pretrain(a) => pretrain(&mut cfg, a),
        Command::Finetune(a) => finetune(&mut cfg, a),
        Command::Certify(a) => certify_cmd(&mut cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Probe(a) => probe(&cfg, a),
        Command::GenData => gen_data(&cfg),
    }
}

/// Seed-derived streams for each stage.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const FINETUNE_INIT: u64 = 3;
    pub const FINETUNE: u64 = 4;
}

fn stream(seed: u64, which: u64) -> SeededRng {
    SeededRng::substream(seed, 0, which)
}

fn read_metrics<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn load_stage(path: &Path, stage: Stage) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.stage != stage {
        return Err(Error::Config(format!(
            "{} is a {:?} checkpoint, expected {stage:?}",
            path.display(),
            ck.stage
        )));
    }
    Ok(ck)
}

fn pretrain(cfg: &mut RunConfig, a: &PretrainArgs) -> Result<Vec<PathBuf>> {
    if let Some(k) = a.iters {
        cfg.pretrain.iters = k;
    }
    cfg.validate()?;
    let (train, _) = cfg.data.load(cfg.seed)?;
    let out = &cfg.output_dir;
    let metrics_path = out.join("pretrain_metrics.jsonl");
    let mut metrics: Vec<PretrainMetrics> = Vec::new();
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_stage(p, Stage::Pretrain)?;
            let optimizer = ck
                .optimizer
                .ok_or_else(|| Error::Format("pre-training checkpoint has no optimizer state".into()))?;
            metrics = read_metrics(&metrics_path)?;
            metrics.retain(|m| m.iter <= ck.progress);
            Pretrainer {
                params: ck.params,
                optimizer,
                rng: SeededRng::from_state(&ck.rng)?,
                iter: ck.progress,
            }
        }
        None => {
            let params = ModelParams::init(&cfg.model, &mut stream(cfg.seed, streams::MODEL_INIT))?;
            Pretrainer::new(params, &cfg.pretrain, stream(cfg.seed, streams::PRETRAIN))?
        }
    };
    trainer.run(&train, &cfg.pretrain, &cfg.schedule, a.stop_at, |m| {
        metrics.push(m.clone());
        Ok(())
    })?;
    let ck = Checkpoint {
        stage: Stage::Pretrain,
        progress: trainer.iter,
        params: trainer.params,
        optimizer: Some(trainer.optimizer),
        rng: trainer.rng.state(),
    };
    let ck_path = out.join("pretrain.ckpt");
    ck.save(&ck_path)?;
    write_atomic(&metrics_path, &to_json_lines(&metrics)?)?;
    Ok(vec![ck_path, metrics_path])
}

fn finetune(cfg: &mut RunConfig, a: &FinetuneArgs) -> Result<Vec<PathBuf>> {
    let f = &mut cfg.finetune;
    if let Some(s) = a.sigma {
        f.sigma = s;
    }
    if let Some(e) = a.epochs {
        f.epochs = e;
    }
    if a.eta1.is_some() {
        f.eta1 = a.eta1;
    }
    if let Some(e) = a.eta2 {
        f.eta2 = e;
    }
    if a.random_init {
        f.init = FinetuneInit::Random;
    } else if a.init.is_some() {
        f.init = FinetuneInit::Pretrained;
    }
    cfg.validate()?;
    let (train, _) = cfg.data.load(cfg.seed)?;
    let out = &cfg.output_dir;
    let metrics_path = out.join("finetune_metrics.jsonl");
    let mut metrics: Vec<FinetuneMetrics> = Vec::new();
    let mut tuner = if let Some(p) = &a.resume {
        let ck = load_stage(p, Stage::Finetune)?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Format("fine-tuning checkpoint has no optimizer state".into()))?;
        metrics = read_metrics(&metrics_path)?;
        metrics.retain(|m| m.epoch <= ck.progress);
        Finetuner {
            params: ck.params,
            optimizer,
            rng: SeededRng::from_state(&ck.rng)?,
            epoch: ck.progress,
        }
    } else {
        let params = match cfg.finetune.init {
            FinetuneInit::Pretrained => {
                let p = a.init.as_ref().ok_or_else(|| {
                    Error::Config("pretrained init needs --init <checkpoint> (or pass --random-init)".into())
                })?;
                load_stage(p, Stage::Pretrain)?.params
            }
            FinetuneInit::Random => ModelParams::init(&cfg.model, &mut stream(cfg.seed, streams::FINETUNE_INIT))?,
        };
        Finetuner::new(params, &cfg.finetune, stream(cfg.seed, streams::FINETUNE))?
    };
    tuner.run(&train, &cfg.finetune, a.stop_at, |m| {
        metrics.push(m.clone());
        Ok(())
    })?;
    let ck = Checkpoint {
        stage: Stage::Finetune,
        progress: tuner.epoch,
        params: tuner.params,
        optimizer: Some(tuner.optimizer),
        rng: tuner.rng.state(),
    };
    let ck_path = out.join("finetune.ckpt");
    ck.save(&ck_path)?;
    write_atomic(&metrics_path, &to_json_lines(&metrics)?)?;
    Ok(vec![ck_path, metrics_path])
}

/// Oracle points with signed margin `margin` and their halfspace.
pub fn halfspace_fixture(dim: usize, count: usize, margin: f64, seed: u64) -> Result<(HalfspaceOracle, Vec<Vec<f64>>)> {
    if dim == 0 {
        return Err(Error::InvalidArgument("oracle dimension must be positive".into()));
    }
    let mut rng = SeededRng::substream(seed, u64::MAX, 0);
    let w: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
    let b = rng.uniform_range(-1.0, 1.0);
    let oracle = HalfspaceOracle::new(w.clone(), b)?;
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let points = (0..count)
        .map(|_| {
            let mut x: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
            let shift = (margin - oracle.margin(&x)?) / norm;
            x.iter_mut().zip(&w).for_each(|(v, wi)| *v += shift * wi);
            Ok(x)
        })
        .collect::<Result<_>>()?;
    Ok((oracle, points))
}

fn certify_cmd(cfg: &mut RunConfig, a: &CertifyArgs) -> Result<Vec<PathBuf>> {
    let c = &mut cfg.certify;
    if let Some(s) = a.sigma {
        c.sigma = s;
    }
    if let Some(n) = a.n {
        c.n = n;
    }
    if let Some(n0) = a.n0 {
        c.n0 = n0;
    }
    if let Some(al) = a.alpha {
        c.alpha = al;
    }
    if a.no_timing {
        c.record_timing = false;
    }
    cfg.validate()?;
    let count = a.count.unwrap_or(cfg.data.certify_count);
    let records: Vec<CertificationRecord> = match (&a.oracle, &a.checkpoint) {
        (Some(Oracle::Halfspace), _) => {
            let (oracle, points) = halfspace_fixture(a.dim, count, a.margin, cfg.seed)?;
            let label = usize::from(a.margin >= 0.0);
            points
                .iter()
                .enumerate()
                .map(|(i, x)| certify(&oracle as &dyn BaseClassifier, x, label, i as u64, &cfg.certify, cfg.seed))
                .collect::<Result<_>>()?
        }
        (None, Some(p)) => {
            let params = Checkpoint::load(p)?.params;
            let (_, test) = cfg.data.load(cfg.seed)?;
            let stride = even_stride(test.len(), count);
            let ids: Vec<usize> = (0..test.len()).step_by(stride).take(count).collect();
            let f = ModelClassifier::new(&params, cfg.certify.sigma)?;
            certify_dataset(&f, &test, &ids, &cfg.certify, cfg.seed, |_| Ok(()))?
        }
        (None, None) => return Err(Error::Config("certify needs --checkpoint or --oracle".into())),
    };
    let mut buf = Vec::new();
    write_records_csv(&mut buf, &records)?;
    let path = cfg.output_dir.join("certify.csv");
    write_atomic(&path, &buf)?;
    Ok(vec![path])
}

fn evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<Vec<PathBuf>> {
    let sigmas = if a.sigmas.is_empty() {
        vec![cfg.certify.sigma; a.records.len()]
    } else {
        a.sigmas.clone()
    };
    if sigmas.len() != a.records.len() {
        return Err(Error::InvalidArgument(format!(
            "{} record files but {} noise levels",
            a.records.len(),
            sigmas.len()
        )));
    }
    let runs: Vec<Vec<CertificationRecord>> = a
        .records
        .iter()
        .map(|p| {
            let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            let recs = read_records_csv(f)?;
            if recs.is_empty() {
                return Err(Error::InvalidArgument(format!("{} holds no records", p.display())));
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    let radii = radius_grid(cfg.analysis.radius_max, cfg.analysis.radius_step)?;
    let pairs: Vec<(f64, &[CertificationRecord])> = sigmas.iter().copied().zip(runs.iter().map(|r| &r[..])).collect();
    let table = CertifiedAccuracyTable::build(&pairs, &radii)?;
    let n = a.n.unwrap_or(cfg.certify.n);
    let summaries = runs
        .iter()
        .zip(&sigmas)
        .map(|(r, &sigma)| Ok(SigmaSummary { sigma, summary: summarize(r, &radii, n)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    let curve = cfg.output_dir.join("curve.csv");
    let summary = cfg.output_dir.join("summary.json");
    write_atomic(&curve, &csv)?;
    write_atomic(&summary, &to_pretty_json(&summaries)?)?;
    Ok(vec![curve, summary])
}

#[derive(Serialize)]
struct SigmaSummary {
    sigma: f64,
    #[serde(flatten)]
    summary: crate::analysis::EvaluationSummary,
}

#[derive(Serialize)]
struct ProbeReport {
    probe: Vec<ProbePoint>,
    t_n: f64,
    t_0: f64,
    endpoint_fd: f64,
}

fn probe(cfg: &RunConfig, a: &ProbeArgs) -> Result<Vec<PathBuf>> {
    let params = Checkpoint::load(&a.checkpoint)?.params;
    let (train, test) = cfg.data.load(cfg.seed)?;
    let probe = probe_model(&params, &train, &test, &cfg.analysis.probe_sigmas, cfg.seed, &cfg.analysis.probe)?;
    let (t_n, t_0) = (cfg.schedule.t_max, cfg.schedule.t_min);
    let endpoint_fd = trajectory_endpoint_fd(&params, &test, t_n, t_0, cfg.seed)?;
    let path = cfg.output_dir.join("probe.json");
    write_atomic(&path, &to_pretty_json(&ProbeReport { probe, t_n, t_0, endpoint_fd })?)?;
    Ok(vec![path])
}

fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (train, test) = cfg.data.load(cfg.seed)?;
    let (tp, sp) = (cfg.output_dir.join("train.bin"), cfg.output_dir.join("test.bin"));
    write_dataset(&tp, &train)?;
    write_dataset(&sp, &test)?;
    // Reading back guards against a silently truncated write.
    read_dataset(&tp)?;
    Ok(vec![tp, sp])
}
