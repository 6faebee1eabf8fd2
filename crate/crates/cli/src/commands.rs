//! Subcommand implementations over resolved configurations.

use crate::config::{ConfigError, ConfigResult, Resolved};
use crate::manifest::{DirLock, RunManifest};
use anyhow::{anyhow, Context};
use gradalign::attack::{attack_summary_csv, make_frame_target, run_attack, AttackConfig, AttackMode, AttackResult};
use gradalign::attribution::{attribute, heatmap_pgm, normalize_map, write_raw, AttrOptions, AttributionMap, Method, Normalization};
use gradalign::data::{load_cifar_binary, make_moons_2d, make_synthetic_digits, CifarOptions, Dataset};
use gradalign::experiments::{bound_csv, bound_sweep, near_boundary_pairs, pair_csv, pair_stats, surface_csv, surface_grid, GridSpec};
use gradalign::metrics::{adv_insertion_curve, gamma_grid, insertion_curve, rps, ReconstructionSource, SimilarityMeasure, RPS_CSV_HEADER};
use gradalign::train::{
    train, write_outputs, OptimizerConfig, OptimizerKind, Regularizer, RunConfig, TrainOptions, CHECKPOINT_FILE, LOSSES_FILE,
    TIMING_FILE,
};
use gradalign::{Activation, LayerSpec, Network, Tensor};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const COMMANDS: [&str; 7] = ["train", "attack", "eval-rps", "eval-insertion", "surface", "bound-sweep", "attribute"];

/// How a command failed; selects the exit code.
#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<gradalign::Error> for Failure {
    fn from(e: gradalign::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

fn s(v: impl ToString) -> String {
    v.to_string()
}

fn data_defaults(kind: &str) -> Vec<(&'static str, String)> {
    vec![
        ("data", s(kind)),
        ("data_path", String::new()),
        ("data_seed", s(0)),
        ("n", s(1000)),
        ("classes", s(10)),
        ("side", s(16)),
        ("noise", s(0.1)),
        ("test_fraction", s(0.2)),
        ("class_subset", String::new()),
        ("per_class_limit", String::new()),
        ("standardize", s(false)),
    ]
}

fn eval_defaults(kind: &str) -> Vec<(&'static str, String)> {
    let mut d = data_defaults(kind);
    d.extend([
        ("checkpoint", String::new()),
        ("split", s("test")),
        ("count", s(100)),
        ("seed", s(0)),
        ("smooth_sigma", s(0.1)),
        ("smooth_samples", s(16)),
    ]);
    d
}

fn train_defaults(reg: Regularizer) -> Vec<(&'static str, String)> {
    let c = RunConfig::for_regularizer(reg);
    let o = &c.optimizer;
    let mut d = data_defaults("synthetic");
    d.extend([
        ("model", s("mini_lenet")),
        ("hidden", s("16")),
        ("activation", s("softplus")),
        ("beta", s(c.softplus_beta)),
        ("reg", s(reg)),
        ("lambda_cos", s(c.lambda_cos)),
        ("lambda_l2", s(c.lambda_l2)),
        ("lambda", s(c.lambda)),
        ("eps", s("8/255")),
        ("optimizer", s(o.kind.name())),
        ("lr", s(o.lr)),
        ("weight_decay", s(o.weight_decay)),
        ("momentum", s(o.momentum)),
        ("epochs", s(30)),
        ("batch_size", s(c.batch_size)),
        ("milestones", String::new()),
        ("decay_factor", s(c.decay_factor)),
        ("detach", s(c.detach_base_gradient)),
        ("hessian_probes", s(c.hessian_probes)),
        ("teacher", String::new()),
        ("atex_eps", s(c.atex.epsilon)),
        ("atex_n_i", s(c.atex.n_i)),
        ("atex_n_p", s(c.atex.n_p)),
        ("iga_eps", s("8/255")),
        ("iga_steps", s(c.iga.steps)),
        ("seed", s(0)),
    ]);
    d
}

/// Default keys and values for a command; `reg` only matters for train.
pub fn defaults(command: &str, reg: Regularizer) -> ConfigResult<Vec<(&'static str, String)>> {
    let mut d = match command {
        "train" => train_defaults(reg),
        "attack" => {
            let mut d = eval_defaults("synthetic");
            d.extend([
                ("count", s(10)),
                ("mode", s("targeted")),
                ("eps", s("4/255")),
                ("iters", s(100)),
                ("step", String::new()),
                ("frame_width", s(2)),
                ("method", s("grad")),
                ("revert_on_increase", s(false)),
            ]);
            d
        }
        "eval-rps" => {
            let mut d = eval_defaults("synthetic");
            d.extend([
                ("method", s("grad")),
                ("measure", s("cossim")),
                ("eps", s("8/255")),
                ("samples", s(10)),
            ]);
            d
        }
        "eval-insertion" => {
            let mut d = eval_defaults("synthetic");
            d.extend([
                ("method", s("grad")),
                ("adversarial", s(true)),
                ("attack_eps", s("4/255")),
                ("iters", s(100)),
                ("frame_width", s(2)),
                ("source", s("clean")),
                ("percent", s(false)),
            ]);
            d
        }
        "surface" => {
            let mut d = eval_defaults("moons");
            d.extend([
                ("n", s(400)),
                ("grid_n", s(41)),
                ("pad", s(0.5)),
                ("pairs", s(20)),
                ("radius", s(0.05)),
                ("pair", String::new()),
            ]);
            d
        }
        "bound-sweep" => {
            let mut d = eval_defaults("synthetic");
            d.extend([("eps_list", s("1e-4,1e-3,1e-2")), ("points", s(1000))]);
            d
        }
        "attribute" => {
            let mut d = eval_defaults("synthetic");
            d.extend([
                ("index", s(0)),
                ("class", String::new()),
                ("method", s("grad")),
                ("normalization", s("none")),
            ]);
            d
        }
        other => return Err(ConfigError(format!("unknown command '{other}'"))),
    };
    d.push(("out", format!("runs/{command}")));
    Ok(d)
}

fn bad(key: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("key '{key}': {msg}"))
}

/// The `(train, test)` split described by the data keys.
pub fn load_data(r: &Resolved) -> CmdResult<(Dataset, Dataset)> {
    let seed = r.u64("data_seed")?;
    let ds = match r.str("data") {
        "synthetic" => make_synthetic_digits(r.usize("n")?, r.usize("classes")?, r.usize("side")?, seed)
            .map_err(|e| bad("data", e))?,
        "moons" => make_moons_2d(r.usize("n")?, r.f64("noise")?, seed).map_err(|e| bad("data", e))?,
        "cifar" => {
            let path = r.opt_str("data_path").ok_or_else(|| bad("data_path", "required for data=cifar"))?;
            let subset = r.usize_list("class_subset")?;
            let opts = CifarOptions {
                class_subset: (!subset.is_empty()).then_some(subset),
                per_class_limit: r.opt_usize("per_class_limit")?,
                standardize: r.bool("standardize")?,
                expected_rows: None,
            };
            load_cifar_binary(path, &opts).with_context(|| format!("loading {path}"))?
        }
        other => return Err(bad("data", format!("unknown dataset '{other}' (synthetic, moons, cifar)")).into()),
    };
    Ok(ds.split(r.f64("test_fraction")?, seed).map_err(|e| bad("test_fraction", e))?)
}

fn eval_split(r: &Resolved) -> CmdResult<Dataset> {
    let (tr, te) = load_data(r)?;
    let ds = match r.str("split") {
        "test" => te,
        "train" => tr,
        other => return Err(bad("split", format!("expected test or train, got '{other}'")).into()),
    };
    Ok(ds.take(r.usize("count")?))
}

fn load_checkpoint(r: &Resolved) -> CmdResult<Network> {
    let path = r.opt_str("checkpoint").ok_or_else(|| bad("checkpoint", "required"))?;
    Ok(Network::load(path).with_context(|| format!("loading checkpoint {path}"))?)
}

fn parse_activation(r: &Resolved) -> ConfigResult<Activation> {
    match r.str("activation") {
        "relu" => Ok(Activation::Relu),
        "softplus" => Ok(Activation::softplus(r.f64("beta")?)),
        "identity" => Ok(Activation::Identity),
        other => Err(bad("activation", format!("unknown activation '{other}' (relu, softplus, identity)"))),
    }
}

/// The training configuration described by `r`.
pub fn run_config(r: &Resolved) -> ConfigResult<RunConfig> {
    let reg: Regularizer = r.parse("reg")?;
    let base = RunConfig::for_regularizer(reg);
    let kind: OptimizerKind = r.parse("optimizer")?;
    let cfg = RunConfig {
        regularizer: reg,
        lambda_cos: r.f64("lambda_cos")?,
        lambda_l2: r.f64("lambda_l2")?,
        lambda: r.f64("lambda")?,
        epsilon: r.f64("eps")?,
        optimizer: OptimizerConfig {
            kind,
            lr: r.f64("lr")?,
            weight_decay: r.f64("weight_decay")?,
            momentum: r.f64("momentum")?,
            ..base.optimizer
        },
        epochs: r.usize("epochs")?,
        batch_size: r.usize("batch_size")?,
        milestones: r.usize_list("milestones")?,
        decay_factor: r.f64("decay_factor")?,
        softplus_beta: r.f64("beta")?,
        detach_base_gradient: r.bool("detach")?,
        hessian_probes: r.usize("hessian_probes")?,
        atex: gradalign::train::AtexConfig {
            epsilon: r.f64("atex_eps")?,
            n_i: r.usize("atex_n_i")?,
            n_p: r.usize("atex_n_p")?,
            ..base.atex
        },
        iga: gradalign::train::IgaConfig { epsilon: r.f64("iga_eps")?, steps: r.usize("iga_steps")? },
        seed: r.u64("seed")?,
    };
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

fn build_network(r: &Resolved, data: &Dataset) -> CmdResult<Network> {
    let act = parse_activation(r)?;
    let seed = r.u64("seed")?;
    let shape = data.sample_shape().to_vec();
    let classes = data.class_count();
    let net = match r.str("model") {
        "mini_lenet" => match shape[..] {
            [c, h, w] if h == w => Network::mini_lenet(c, h, classes, act, seed)?,
            _ => return Err(bad("model", format!("mini_lenet needs square [C, H, W] inputs, got {shape:?}")).into()),
        },
        "lenet" => Network::lenet(classes, act, seed)?,
        "mlp" => {
            let mut widths = vec![shape.iter().product()];
            widths.extend(r.usize_list("hidden")?);
            widths.push(classes);
            let mut specs = if shape.len() > 1 { vec![LayerSpec::Flatten] } else { Vec::new() };
            specs.extend(widths.windows(2).map(|w| LayerSpec::Dense { inputs: w[0], outputs: w[1], bias: true }));
            Network::init(&specs, &shape, act, seed)?
        }
        other => return Err(bad("model", format!("unknown model '{other}' (mini_lenet, lenet, mlp)")).into()),
    };
    Ok(net)
}

/// Writes a manifest for `files` and returns the run directory.
fn finish(command: &str, r: &Resolved, started: Instant, dir: &Path, files: Vec<String>) -> CmdResult<PathBuf> {
    let m = RunManifest::collect(command, r.echo(), started.elapsed().as_secs_f64(), dir, &files)?;
    m.write(dir)?;
    Ok(dir.to_path_buf())
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>, files: &mut Vec<String>) -> CmdResult<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    files.push(name.to_string());
    Ok(())
}

fn heatmap(scores: &Tensor, method: Method, class: usize) -> Vec<u8> {
    heatmap_pgm(&AttributionMap { scores: scores.clone(), method, class, normalized: None })
}

pub fn run(command: &str, r: &Resolved) -> CmdResult<PathBuf> {
    let dir = PathBuf::from(r.str("out"));
    // Validate the configuration before touching the output directory.
    match command {
        "train" => {
            run_config(r)?;
        }
        _ => {
            load_checkpoint_path(r)?;
        }
    }
    let _lock = DirLock::acquire(&dir)?;
    let started = Instant::now();
    let files = match command {
        "train" => cmd_train(r, &dir)?,
        "attack" => cmd_attack(r, &dir)?,
        "eval-rps" => cmd_eval_rps(r, &dir)?,
        "eval-insertion" => cmd_eval_insertion(r, &dir)?,
        "surface" => cmd_surface(r, &dir)?,
        "bound-sweep" => cmd_bound_sweep(r, &dir)?,
        "attribute" => cmd_attribute(r, &dir)?,
        other => return Err(ConfigError(format!("unknown command '{other}'")).into()),
    };
    finish(command, r, started, &dir, files)
}

fn load_checkpoint_path(r: &Resolved) -> ConfigResult<()> {
    r.opt_str("checkpoint").map(|_| ()).ok_or_else(|| bad("checkpoint", "required"))
}

fn cmd_train(r: &Resolved, dir: &Path) -> CmdResult<Vec<String>> {
    let cfg = run_config(r)?;
    let (tr, te) = load_data(r)?;
    let net = build_network(r, &tr)?;
    let teacher = match r.opt_str("teacher") {
        Some(p) => Some(Network::load(p).with_context(|| format!("loading teacher {p}"))?),
        None => None,
    };
    if cfg.regularizer == Regularizer::Atex && teacher.is_none() {
        return Err(bad("teacher", "atex needs a teacher checkpoint").into());
    }
    let opts = TrainOptions { eval: (!te.is_empty()).then_some(&te), teacher: teacher.as_ref(), ..Default::default() };
    let (trained, report) = train(&net, &tr, &cfg, &opts)?;
    write_outputs(dir, &trained, &report)?;
    let mut files = vec![CHECKPOINT_FILE.to_string(), LOSSES_FILE.to_string(), TIMING_FILE.to_string()];
    let summary = format!(
        "final_accuracy={}\nepochs={}\ntotal_seconds={}\npeak_memory_bytes={}\nparameters={}\n",
        report.final_accuracy().map_or("nan".to_string(), |a| a.to_string()),
        report.epochs.len(),
        report.total_seconds(),
        report.peak_memory_bytes(),
        trained.parameter_count(),
    );
    write(dir, "report.txt", summary, &mut files)?;
    Ok(files)
}

fn attack_config(r: &Resolved, eps_key: &str, shape: &[usize]) -> CmdResult<AttackConfig> {
    let eps = r.f64(eps_key)?;
    let target = make_frame_target(shape, r.usize("frame_width")?).map_err(|e| bad("frame_width", e))?.scores;
    let mut cfg = AttackConfig::targeted(eps, target);
    cfg.iterations = r.usize("iters")?;
    cfg.seed = r.u64("seed")?;
    Ok(cfg)
}

fn cmd_attack(r: &Resolved, dir: &Path) -> CmdResult<Vec<String>> {
    let net = load_checkpoint(r)?;
    let data = eval_split(r)?;
    let mut cfg = attack_config(r, "eps", net.input_shape())?;
    cfg.step_size = r.opt_f64("step")?;
    cfg.method = r.parse("method")?;
    cfg.revert_on_increase = r.bool("revert_on_increase")?;
    cfg.mode = match r.str("mode") {
        "targeted" => AttackMode::Targeted,
        "untargeted" => {
            cfg.target = None;
            AttackMode::Untargeted
        }
        other => return Err(bad("mode", format!("expected targeted or untargeted, got '{other}'")).into()),
    };
    let mut rows: Vec<(usize, usize, AttackResult)> = Vec::with_capacity(data.len());
    let mut files = Vec::new();
    let mut trace = String::from("sample,iteration,loss\n");
    for i in 0..data.len() {
        let y = data.labels()[i];
        let res = run_attack(&net, &data.input(i), y, &cfg)?;
        for (k, l) in res.loss_trace.iter().enumerate() {
            trace += &format!("{i},{k},{l}\n");
        }
        write(dir, &format!("maps/{i:04}_original.pgm"), heatmap(&res.original_map, cfg.method, y), &mut files)?;
        write(dir, &format!("maps/{i:04}_adversarial.pgm"), heatmap(&res.map, cfg.method, y), &mut files)?;
        rows.push((i, y, res));
    }
    if let Some(t) = &cfg.target {
        write(dir, "maps/target.pgm", heatmap(t, cfg.method, 0), &mut files)?;
    }
    write(dir, "attack.csv", attack_summary_csv(&rows, cfg.target.as_ref()), &mut files)?;
    write(dir, "trace.csv", trace, &mut files)?;
    Ok(files)
}

fn attr_options(r: &Resolved, data: &Dataset) -> CmdResult<AttrOptions> {
    Ok(AttrOptions {
        bounds: Some(data.bounds().clone()),
        smooth_sigma: r.f64("smooth_sigma")?,
        smooth_samples: r.usize("smooth_samples")?,
        seed: r.u64("seed")?,
    })
}

fn cmd_eval_rps(r: &Resolved, dir: &Path) -> CmdResult<Vec<String>> {
    let net = load_checkpoint(r)?;
    let data = eval_split(r)?;
    let opts = attr_options(r, &data)?;
    let methods: Vec<Method> =
        r.list("method").map(|m| m.parse().map_err(|e| bad("method", e))).collect::<ConfigResult<_>>()?;
    let measures: Vec<SimilarityMeasure> =
        r.list("measure").map(|m| m.parse().map_err(|e| bad("measure", e))).collect::<ConfigResult<_>>()?;
    let eps = r.f64_list("eps")?;
    let samples = r.usize("samples")?;
    let seed = r.u64("seed")?;
    let mut csv = format!("{RPS_CSV_HEADER}\n");
    for &m in &methods {
        for &k in &measures {
            for &e in &eps {
                let res = rps(&net, &data, m, k, e, samples, seed, &opts)?;
                csv += &format!("{m},{k},{e},{},{},{}\n", res.mean, res.evaluated, res.skipped);
            }
        }
    }
    let mut files = Vec::new();
    write(dir, "rps.csv", csv, &mut files)?;
    Ok(files)
}

pub const INSERTION_SUMMARY_HEADER: &str = "method,metric,mean_over_gamma";

fn cmd_eval_insertion(r: &Resolved, dir: &Path) -> CmdResult<Vec<String>> {
    let net = load_checkpoint(r)?;
    let data = eval_split(r)?;
    let method: Method = r.parse("method")?;
    let percent = r.bool("percent")?;
    let grid = gamma_grid();
    let scale = if percent { 100.0 } else { 1.0 };
    let mut files = Vec::new();
    let ins = insertion_curve(&net, &data, method, &grid, &attr_options(r, &data)?)?;
    write(dir, "insertion.csv", ins.csv(percent), &mut files)?;
    let mut summary = format!("{INSERTION_SUMMARY_HEADER}\n{method},ins,{}\n", ins.mean_over_gamma * scale);
    if r.bool("adversarial")? {
        let source = match r.str("source") {
            "clean" => ReconstructionSource::Clean,
            "adversarial" => ReconstructionSource::Adversarial,
            other => return Err(bad("source", format!("expected clean or adversarial, got '{other}'")).into()),
        };
        let cfg = attack_config(r, "attack_eps", net.input_shape())?;
        let (adv, _) = adv_insertion_curve(&net, &data, method, &cfg, &grid, source)?;
        write(dir, "adv_insertion.csv", adv.csv(percent), &mut files)?;
        summary += &format!("{method},adv_ins,{}\n", adv.mean_over_gamma * scale);
    }
    write(dir, "insertion_summary.csv", summary, &mut files)?;
    Ok(files)
}

fn cmd_surface(r: &Resolved, dir: &Path) -> CmdResult<Vec<String>> {
    let net = load_checkpoint(r)?;
    let (tr, te) = load_data(r)?;
    let all = if tr.is_empty() { te } else { tr };
    let spec = GridSpec::around(&all, r.f64("pad")?, r.usize("grid_n")?).map_err(|e| bad("grid_n", e))?;
    let grid = surface_grid(&net, &spec)?;
    let mut pairs = Vec::new();
    let explicit = r.f64_list("pair")?;
    match explicit.len() {
        0 => {}
        4 => pairs.push(pair_stats(&net, [explicit[0], explicit[1]], [explicit[2], explicit[3]])?),
        n => return Err(bad("pair", format!("expected ax0,ax1,bx0,bx1, got {n} numbers")).into()),
    }
    let wanted = r.usize("pairs")?;
    if wanted > 0 {
        pairs.extend(near_boundary_pairs(&net, &all, wanted, r.f64("radius")?, r.u64("seed")?)?);
    }
    let mut files = Vec::new();
    write(dir, "surface.csv", surface_csv(&grid), &mut files)?;
    write(dir, "pairs.csv", pair_csv(&pairs), &mut files)?;
    Ok(files)
}

fn cmd_bound_sweep(r: &Resolved, dir: &Path) -> CmdResult<Vec<String>> {
    let net = load_checkpoint(r)?;
    let (tr, te) = load_data(r)?;
    let data = match r.str("split") {
        "train" => tr,
        _ => te,
    };
    let rows = bound_sweep(&net, &data, &r.f64_list("eps_list")?, r.usize("points")?, r.u64("seed")?)?;
    let mut files = Vec::new();
    write(dir, "bound.csv", bound_csv(&rows), &mut files)?;
    Ok(files)
}

fn cmd_attribute(r: &Resolved, dir: &Path) -> CmdResult<Vec<String>> {
    let net = load_checkpoint(r)?;
    let (tr, te) = load_data(r)?;
    let data = if r.str("split") == "train" { tr } else { te };
    let i = r.usize("index")?;
    if i >= data.len() {
        return Err(bad("index", format!("{i} out of range for {} samples", data.len())).into());
    }
    let class = r.opt_usize("class")?.unwrap_or(data.labels()[i]);
    let method: Method = r.parse("method")?;
    let mut map = attribute(&net, &data.input(i), class, method, &attr_options(r, &data)?)?;
    if r.str("normalization") != "none" {
        let n: Normalization = r.parse("normalization")?;
        map = normalize_map(&map, n)?;
    }
    let mut files = Vec::new();
    write(dir, "attribution.pgm", heatmap_pgm(&map), &mut files)?;
    write_raw(&map, dir.join("attribution.bin")).map_err(|e| anyhow!(e))?;
    files.push("attribution.bin".into());
    files.push("attribution.bin.txt".into());
    Ok(files)
}
