use std::error::Error as StdError;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::Serialize;

use symdiff_core::equitest::{invariance_battery, GroupKind, TestConfig};
use symdiff_core::io::{
    generate_toy_dataset, load_dataset, load_json, load_params, save_dataset, save_json, save_params,
    ToyDatasetSpec,
};
use symdiff_core::matching::euler_generate_flow;
use symdiff_core::nets::{init_params, InitMode, Model};
use symdiff_core::sampler::generate_batch;
use symdiff_core::schedule::ScheduleKind;
use symdiff_core::train::{mean_nll_bound, train as run_training, TrainConfig};
use symdiff_core::{Activation, GammaKind, NBodyState, NetConfig, RngStream, RunConfig, TrainMode};

type CmdResult<T = ()> = Result<T, Box<dyn StdError>>;

const SAMPLE_STREAM: u64 = 0x5341_4d50;
const EVAL_STREAM: u64 = 0x4556_414c;
const INIT_STREAM: u64 = 0x494e_4954;

/// Caps rayon's worker count from `SYMDIFF_THREADS`.
pub fn init_threads() -> CmdResult {
    if let Ok(v) = std::env::var("SYMDIFF_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| format!("SYMDIFF_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            return Err("SYMDIFF_THREADS must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    n_templates: u64,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(2..))]
    n_points: u64,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 0.05, value_parser = non_negative)]
    jitter: f64,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite non-negative number, got {s:?}")),
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite positive number, got {s:?}")),
    }
}

fn probability(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("expected a number in (0, 1), got {s:?}")),
    }
}

pub fn gen_data(a: &GenDataArgs) -> CmdResult {
    let spec = ToyDatasetSpec {
        n_templates: a.n_templates as usize,
        n_points: a.n_points as usize,
        d: a.d,
        jitter: a.jitter,
        count: a.count as usize,
        seed: a.seed,
    };
    let data = generate_toy_dataset(&spec)?;
    save_dataset(&data, &a.out)?;
    println!(
        "wrote {} samples (N={}, d={}, templates={}) to {}",
        spec.count,
        spec.n_points,
        spec.d,
        spec.n_templates,
        a.out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Symdiff,
    Aug,
    Plain,
    SymdiffHaar,
    Score,
    Flow,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Symdiff => TrainMode::Symdiff,
            ModeArg::Aug => TrainMode::Aug,
            ModeArg::Plain => TrainMode::Plain,
            ModeArg::SymdiffHaar => TrainMode::SymdiffHaar,
            ModeArg::Score => TrainMode::Score,
            ModeArg::Flow => TrainMode::Flow,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActArg {
    Silu,
    Tanh,
    Gelu,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    /// Zeroed output layers: the denoiser starts at 0, the head at the identity.
    Standard,
    Random,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Parameter file to write; the run config goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV (default `<out>.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    lr: f64,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Symdiff)]
    mode: ModeArg,
    /// Number of diffusion steps.
    #[arg(long = "T", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    t_steps: u64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    schedule: ScheduleArg,
    /// Use the identity for every rotation draw (debugging aid).
    #[arg(long)]
    gamma_dirac: bool,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    kernels: usize,
    #[arg(long, default_value_t = 16)]
    emb: usize,
    #[arg(long, default_value_t = 64)]
    time_emb: usize,
    #[arg(long, default_value_t = 16)]
    f_hidden: usize,
    #[arg(long, default_value_t = 2)]
    f_depth: usize,
    #[arg(long, value_enum, default_value_t = ActArg::Silu)]
    activation: ActArg,
    #[arg(long)]
    attention: bool,
    #[arg(long, value_enum, default_value_t = InitArg::Standard)]
    init: InitArg,
    /// Euler steps used when sampling flow models.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    flow_steps: u64,
}

fn config_path(params: &Path) -> PathBuf {
    let mut s = params.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let data = load_dataset(&a.data).map_err(|e| format!("cannot read {}: {e}", a.data.display()))?;
    let (n, d) = (data[0].n(), data[0].d());
    let mode = TrainMode::from(a.mode);
    let net = NetConfig {
        feature_dim: d,
        hidden: a.hidden,
        depth: a.depth,
        kernels: a.kernels,
        emb: a.emb,
        time_emb: a.time_emb,
        activation: match a.activation {
            ActArg::Silu => Activation::Silu,
            ActArg::Tanh => Activation::Tanh,
            ActArg::Gelu => Activation::Gelu,
        },
        attention: a.attention,
        f_hidden: a.f_hidden,
        f_depth: a.f_depth,
        noise_dim: 3,
    };
    let run = RunConfig {
        mode,
        gamma: if a.gamma_dirac { GammaKind::Identity } else { mode.gamma() },
        steps_t: a.t_steps as usize,
        schedule: match a.schedule {
            ScheduleArg::Cosine => ScheduleKind::Cosine,
            ScheduleArg::Linear => ScheduleKind::Linear,
        },
        n_points: n,
        net,
        flow_steps: a.flow_steps as usize,
    };
    let sched = run.schedule()?;
    let init = match a.init {
        InitArg::Standard => InitMode::Standard,
        InitArg::Random => InitMode::Random,
    };
    let mut model = Model::new(run.net.clone(), init, &mut RngStream::with_stream(a.seed, INIT_STREAM))?;
    let cfg = TrainConfig {
        mode,
        gamma: run.gamma,
        steps: a.steps,
        batch: a.batch as usize,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
    };
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".csv");
        PathBuf::from(s)
    });
    let mut csv = BufWriter::new(File::create(&metrics)?);
    writeln!(csv, "step,loss,grad_norm,wall_ms")?;
    let start = Instant::now();
    let mut write_err = None;
    run_training(&mut model, &sched, &data, &cfg, |m| {
        let ms = start.elapsed().as_millis();
        if let Err(e) = writeln!(csv, "{},{},{},{}", m.step, m.loss, m.grad_norm, ms) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    csv.flush()?;
    save_params(&model.params, &a.out)?;
    save_json(&run, &config_path(&a.out))?;
    println!(
        "trained {} for {} steps on {} samples; params {}, metrics {}",
        mode.name(),
        a.steps,
        data.len(),
        a.out.display(),
        metrics.display()
    );
    Ok(())
}

fn load_model(params: &Path) -> CmdResult<(RunConfig, Model)> {
    let cfg_path = config_path(params);
    let run: RunConfig =
        load_json(&cfg_path).map_err(|e| format!("cannot read run config {}: {e}", cfg_path.display()))?;
    run.net.validate()?;
    let store = load_params(params).map_err(|e| format!("cannot read {}: {e}", params.display()))?;
    let expected = init_params(&run.net, InitMode::Standard, &mut RngStream::new(0))?;
    if !store.same_layout(&expected) {
        return Err(format!(
            "parameters in {} do not match the network described by {}",
            params.display(),
            cfg_path.display()
        )
        .into());
    }
    Ok((run.clone(), Model::with_params(run.net, store)))
}

fn draw_samples(run: &RunConfig, model: &Model, count: usize, stream: &RngStream) -> CmdResult<Vec<NBodyState>> {
    let (n, d) = (run.n_points, run.net.feature_dim);
    let nets = model.nets();
    match run.mode {
        TrainMode::Score => Err("sampling from score models is not supported; train with a diffusion or flow mode".into()),
        TrainMode::Flow => {
            use rayon::prelude::*;
            Ok((0..count)
                .into_par_iter()
                .map(|i| euler_generate_flow(&nets, run.gamma, n, d, run.flow_steps, &mut stream.child(i as u64)))
                .collect::<Result<Vec<_>, _>>()?)
        }
        _ => Ok(generate_batch(&nets, &run.schedule()?, run.gamma, n, d, count, stream)?),
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn sample(a: &SampleArgs) -> CmdResult {
    let (run, model) = load_model(&a.params)?;
    let samples = draw_samples(&run, &model, a.count as usize, &RngStream::with_stream(a.seed, SAMPLE_STREAM))?;
    save_dataset(&samples, &a.out)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    /// Held-out data for the NLL bound.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Diffusion steps sampled per data point for the bound.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    n_t: u64,
    /// Ignore the first `skip` data points (e.g. the training part of a larger file).
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Evaluate the bound on at most this many data points.
    #[arg(long)]
    max_samples: Option<usize>,
    /// Also run the invariance battery on generated samples.
    #[arg(long)]
    equivariance: bool,
    /// Samples per side in each two-sample test.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..))]
    n: u64,
    #[arg(long, default_value_t = 0.01, value_parser = probability)]
    alpha: f64,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    n_perm: u64,
    #[arg(long, default_value_t = 5)]
    rotations: usize,
    #[arg(long, default_value_t = 5)]
    permutations: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct TestEntry {
    label: String,
    group: &'static str,
    n: usize,
    statistic: f64,
    p_value: f64,
    reject: bool,
}

#[derive(Serialize)]
struct EvalReport {
    mode: &'static str,
    gamma: GammaKind,
    n_eval: usize,
    nll_bound: Option<f64>,
    prior_kl: Option<f64>,
    mean_lt: Option<f64>,
    l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    equivariance: Option<Vec<TestEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    equivariance_all_pass: Option<bool>,
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let (run, model) = load_model(&a.params)?;
    let mut data = load_dataset(&a.data).map_err(|e| format!("cannot read {}: {e}", a.data.display()))?;
    if data[0].n() != run.n_points || data[0].d() != run.net.feature_dim {
        return Err(format!(
            "data has N={}, d={} but the model was trained on N={}, d={}",
            data[0].n(),
            data[0].d(),
            run.n_points,
            run.net.feature_dim
        )
        .into());
    }
    if a.skip >= data.len() {
        return Err(format!("--skip {} leaves no data ({} samples)", a.skip, data.len()).into());
    }
    data.drain(..a.skip);
    if let Some(m) = a.max_samples {
        data.truncate(m.max(1));
    }
    let root = RngStream::with_stream(a.seed, EVAL_STREAM);
    let mut report = EvalReport {
        mode: run.mode.name(),
        gamma: run.gamma,
        n_eval: data.len(),
        nll_bound: None,
        prior_kl: None,
        mean_lt: None,
        l1: None,
        equivariance: None,
        equivariance_all_pass: None,
    };
    if run.mode.is_diffusion() {
        let sched = run.schedule()?;
        let b = mean_nll_bound(&model.nets(), &sched, &data, run.gamma, a.n_t as usize, &root.child(0))?;
        report.nll_bound = Some(b.total);
        report.prior_kl = Some(b.prior);
        report.mean_lt = Some(b.diffusion / (sched.steps().max(2) - 1) as f64);
        report.l1 = Some(b.reconstruction);
    }
    if a.equivariance {
        let n = a.n as usize;
        let pool = draw_samples(&run, &model, 2 * n, &root.child(1))?;
        let (pa, pb) = pool.split_at(n);
        let cfg = TestConfig { n, alpha: a.alpha, n_perm: a.n_perm as usize };
        let results = invariance_battery(pa, pb, a.rotations, a.permutations, cfg, &mut root.child(2))?;
        report.equivariance_all_pass = Some(results.iter().all(|(_, r)| !r.reject));
        report.equivariance = Some(
            results
                .into_iter()
                .map(|(kind, r)| TestEntry {
                    label: r.label,
                    group: match kind {
                        GroupKind::Rotation => "rotation",
                        GroupKind::Permutation => "permutation",
                    },
                    n: r.n,
                    statistic: r.statistic,
                    p_value: r.p_value,
                    reject: r.reject,
                })
                .collect(),
        );
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
