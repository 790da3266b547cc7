use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use streamphy::eval::{
    ablation_run, evaluate_stream, expressivity_experiment, timing_probe, write_csv_grid, write_pgm, EvalPlan,
    ExpressivityConfig, Variant,
};
use streamphy::fields::{gen_synthetic, read_streams, sample_streams, split_records, write_streams, FieldRecord, GenConfig, SamplingConfig};
use streamphy::model::Model;
use streamphy::rng::SeedStream;
use streamphy::train::{resume, train, Checkpoint, TrainConfig};

/// Streaming reconstruction of spatiotemporal fields from sparse observations.
#[derive(Parser)]
#[command(name = "streamphy", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic records, the train/test split and training streams.
    GenData(Common),
    /// Train a model on the generated training streams.
    Train(TrainArgs),
    /// Reconstruct full grids frame by frame from an observation stream file.
    Infer(InferArgs),
    /// Score a checkpoint on the held-out records under uniform and slab sampling.
    Eval(EvalArgs),
    /// Fit FT-FiLM and FTM decoders to exp(x y) and compare.
    Expressivity(Common),
    /// Train and score every ablation variant.
    Ablate(Common),
    /// Time online inference for several stream lengths.
    Timing(TimingArgs),
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to score; defaults to the one in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also dump per-frame reconstructions of this many test records.
    #[arg(long, default_value_t = 0)]
    dump: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Observation streams (JSON lines).
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Query grid extents, comma separated.
    #[arg(long, default_value = "32,32", value_delimiter = ',')]
    grid: Vec<usize>,
}

#[derive(Args)]
struct TimingArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to time; a freshly initialized model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblationConfig {
    variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TimingConfig {
    lengths: Vec<usize>,
    observations: usize,
    grid: Vec<usize>,
    repeats: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            lengths: vec![16, 32, 64],
            observations: 64,
            grid: vec![32, 32],
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Drives generation, splitting and stream sampling.
    seed: u64,
    output_dir: PathBuf,
    generator: GenConfig,
    test_records: Option<usize>,
    sampling: SamplingConfig,
    train: TrainConfig,
    eval: EvalPlan,
    expressivity: ExpressivityConfig,
    ablation: AblationConfig,
    timing: TimingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            generator: GenConfig::default(),
            test_records: None,
            sampling: SamplingConfig::default(),
            train: TrainConfig::default(),
            eval: EvalPlan::default(),
            expressivity: ExpressivityConfig::default(),
            ablation: AblationConfig::default(),
            timing: TimingConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("malformed config {path}: key `{key}`: {reason}")]
struct ConfigError {
    path: String,
    key: String,
    reason: String,
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(&c.config).with_context(|| format!("cannot read config {}", c.config.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError {
        path: c.config.display().to_string(),
        key: e.path().to_string(),
        reason: e.inner().to_string(),
    })?;
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &RunConfig) -> anyhow::Result<Self> {
        fs::create_dir_all(&cfg.output_dir)
            .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
        Ok(Self { root: cfg.output_dir.clone() })
    }
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn record(&self, id: usize) -> PathBuf {
        self.data().join("records").join(format!("{id:05}.spfr"))
    }
    fn split(&self) -> PathBuf {
        self.data().join("split.json")
    }
    fn train_streams(&self) -> PathBuf {
        self.data().join("train_streams.jsonl")
    }
    fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.spck")
    }
    fn dir(&self, name: &str) -> anyhow::Result<PathBuf> {
        let p = self.root.join(name);
        fs::create_dir_all(&p)?;
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct Split {
    train: Vec<usize>,
    test: Vec<usize>,
}

fn load_split(l: &Layout) -> anyhow::Result<Split> {
    let p = l.split();
    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}; run gen-data first", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_records(l: &Layout, ids: &[usize]) -> anyhow::Result<Vec<FieldRecord>> {
    ids.iter()
        .map(|&id| FieldRecord::load(&l.record(id), id).with_context(|| format!("loading record {id}")))
        .collect()
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_manifest(l: &Layout, command: &str, cfg: &RunConfig, started: u64, extra: serde_json::Value) -> anyhow::Result<()> {
    let m = serde_json::json!({
        "command": command,
        "build": format!("streamphy {} {}", env!("CARGO_PKG_VERSION"), option_env!("STREAMPHY_BUILD_ID").unwrap_or("dev")),
        "config": cfg,
        "threads": rayon::current_num_threads(),
        "started_unix": started,
        "finished_unix": now(),
        "details": extra,
    });
    fs::write(l.root.join(format!("manifest-{command}.json")), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn gen_data(c: &Common) -> anyhow::Result<()> {
    let started = now();
    let cfg = load_config(c)?;
    let l = Layout::new(&cfg)?;
    let root = SeedStream::new(cfg.seed);
    let records = gen_synthetic(&cfg.generator, root.child("data").seed())?;
    fs::create_dir_all(l.data().join("records"))?;
    for r in &records {
        r.save(&l.record(r.id))?;
    }
    let (train_ids, test_ids) = split_records(records.len(), cfg.test_records, root.child("split"))?;
    let streams = sample_streams(train_ids.iter().map(|&i| &records[i]), &cfg.sampling, root.child("train-streams"))?;
    write_streams(&l.train_streams(), &streams)?;
    write_json(&l.split(), &Split { train: train_ids.clone(), test: test_ids.clone() })?;
    println!(
        "wrote {} records ({} train, {} test) and {} training streams to {}",
        records.len(),
        train_ids.len(),
        test_ids.len(),
        streams.len(),
        l.data().display()
    );
    write_manifest(&l, "gen-data", &cfg, started, serde_json::json!({ "streams": streams.len() }))
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let started = now();
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let l = Layout::new(&cfg)?;
    let streams = read_streams(&l.train_streams()).context("run gen-data first")?;
    let log = l.root.join("train_log.jsonl");
    let out = match &a.resume {
        Some(p) => resume(Checkpoint::load(p)?, &streams, cfg.train.epochs, Some(&log))?,
        None => train(&cfg.train, &streams, Some(&log))?,
    };
    out.checkpoint.save(&l.checkpoint())?;
    for (e, loss) in out.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.6}", e + 1);
    }
    println!("trained {} epochs in {:.1}s -> {}", out.epoch_losses.len(), out.seconds, l.checkpoint().display());
    write_manifest(
        &l,
        "train",
        &cfg,
        started,
        serde_json::json!({ "seconds": out.seconds, "stopped_early": out.stopped_early, "epochs_done": out.checkpoint.epochs_done }),
    )
}

fn dump_frames(dir: &Path, extents: &[usize], lo: f64, hi: f64, m: usize, y: &[f64]) -> streamphy::Result<()> {
    write_csv_grid(&dir.join(format!("frame{m:03}.csv")), extents, y)?;
    write_pgm(&dir.join(format!("frame{m:03}.pgm")), extents, y, lo, hi)
}

fn infer(a: &InferArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = &ck.model;
    let coords = streamphy::fields::grid_coords(&a.grid);
    let (lo, hi) = (
        model.value_stats.mean - 3.0 * model.value_stats.std,
        model.value_stats.mean + 3.0 * model.value_stats.std,
    );
    let streams = read_streams(&a.stream)?;
    fs::create_dir_all(&a.out)?;
    for (j, s) in streams.iter().enumerate() {
        let dir = a.out.join(format!("stream{j:03}"));
        fs::create_dir_all(&dir)?;
        let mut proc = model.processor();
        for (m, obs) in s.frames.iter().enumerate() {
            proc.push(obs).with_context(|| format!("stream {j} frame {m}"))?;
            let y = proc.reconstruct(&coords)?;
            dump_frames(&dir, &a.grid, lo, hi, m, &y)?;
        }
        println!("stream {j} (record {}): {} frames -> {}", s.record_id, s.frames.len(), dir.display());
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = load_config(&a.common)?;
    let l = Layout::new(&cfg)?;
    let ck = Checkpoint::load(&a.checkpoint.clone().unwrap_or_else(|| l.checkpoint()))?;
    let split = load_split(&l)?;
    let test = load_records(&l, &split.test)?;
    let (uniform, slab) = cfg.eval.run(&ck.model, &test, "full")?;
    let dir = l.dir("eval")?;
    uniform.save(&dir.join("uniform.json"))?;
    slab.save(&dir.join("slab.json"))?;
    for r in [&uniform, &slab] {
        println!("{:?} rho {:.3}: mean VRMSE {:.4} over {} records", r.pattern, r.rho, r.mean_vrmse, r.records.len());
    }
    if a.dump > 0 {
        let stats = ck.model.value_stats;
        let seed = SeedStream::new(cfg.eval.seed).child("uniform");
        for rec in test.iter().take(a.dump) {
            let s = streamphy::fields::sample(rec, streamphy::fields::Pattern::Uniform, cfg.eval.uniform_rho, seed.index(rec.id as u64))?;
            let out = l.dir(&format!("eval/frames/record{:05}", rec.id))?;
            let (lo, hi) = (stats.mean - 3.0 * stats.std, stats.mean + 3.0 * stats.std);
            evaluate_stream(&ck.model, s.frames, rec, |m, y| dump_frames(&out, &rec.extents, lo, hi, m, y))?;
            for m in 0..rec.frames() {
                write_pgm(&out.join(format!("truth{m:03}.pgm")), &rec.extents, rec.frame(m), lo, hi)?;
            }
        }
    }
    write_manifest(&l, "eval", &cfg, started, serde_json::json!({ "uniform": uniform.mean_vrmse, "slab": slab.mean_vrmse }))
}

fn expressivity(c: &Common) -> anyhow::Result<()> {
    let started = now();
    let cfg = load_config(c)?;
    let l = Layout::new(&cfg)?;
    let rep = expressivity_experiment(&cfg.expressivity)?;
    for r in &rep.runs {
        println!("seed {}: FT-FiLM RMSE {:.4e}  FTM RMSE {:.4e}  FTM rank {}", r.seed, r.ftfilm_rmse, r.ftm_rmse, r.ftm_rank);
    }
    println!("median FT-FiLM {:.4e}, median FTM {:.4e}", rep.median_ftfilm_rmse, rep.median_ftm_rmse);
    for u in &rep.unconverged {
        println!("not converged: {u}");
    }
    write_json(&l.root.join("expressivity.json"), &rep)?;
    write_manifest(&l, "expressivity", &cfg, started, serde_json::json!({ "seconds": rep.seconds }))
}

fn ablate(c: &Common) -> anyhow::Result<()> {
    let started = now();
    let cfg = load_config(c)?;
    let l = Layout::new(&cfg)?;
    let streams = read_streams(&l.train_streams()).context("run gen-data first")?;
    let split = load_split(&l)?;
    let test = load_records(&l, &split.test)?;
    let table = ablation_run(&cfg.train, &streams, &test, &cfg.eval, &cfg.ablation.variants, &[])?;
    let dir = l.dir("ablation")?;
    let text = table.to_text();
    print!("{text}");
    fs::write(dir.join("table.txt"), &text)?;
    table.write_csv(&dir.join("table.csv"))?;
    write_json(&dir.join("reports.json"), &table)?;
    write_manifest(&l, "ablate", &cfg, started, serde_json::json!({}))
}

fn timing(a: &TimingArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = load_config(&a.common)?;
    let l = Layout::new(&cfg)?;
    let fresh;
    let ck;
    let model = match &a.checkpoint {
        Some(p) => {
            ck = Checkpoint::load(p)?;
            &ck.model
        }
        None => {
            fresh = Model::new(&cfg.train.model, SeedStream::new(cfg.train.seed))?;
            &fresh
        }
    };
    let t = &cfg.timing;
    let rep = timing_probe(model, &t.lengths, t.observations, &t.grid, t.repeats, SeedStream::new(cfg.seed).child("timing"))?;
    for e in &rep.entries {
        println!(
            "T={:>3}: total {:.4}s  per frame {:.3}ms  state {} scalars",
            e.frames,
            e.total_seconds,
            e.per_frame_seconds * 1e3,
            e.state_len
        );
    }
    write_json(&l.root.join("timing.json"), &rep)?;
    write_manifest(&l, "timing", &cfg, started, serde_json::json!({}))
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("STREAMPHY_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("STREAMPHY_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Expressivity(c) => expressivity(c),
        Command::Ablate(c) => ablate(c),
        Command::Timing(a) => timing(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
