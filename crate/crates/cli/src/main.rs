//! `mfplsim` command-line front end: simulate, fit, predict, bench.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use mfplsim::fassmr::{msep, predict_dataset, FitResult};
use mfplsim::functional::{read_curves, read_response, write_csv, BiFunctionalDataset};
use mfplsim::method::{MethodRegistry, MethodSettings, SelectionMethod};
use mfplsim::simlab::{gen_design, monte_carlo, DesignKind, DesignSpec, MetricsSummary};
use mfplsim::{Error, ErrorKind, Result};

#[derive(Parser, Debug)]
#[command(name = "mfplsim", version, about = "Impact-point selection for bi-functional partial linear single-index models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, env = "MFPLSIM_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "MFPLSIM_METHOD")]
    method: Option<String>,
    #[arg(long, global = true, env = "MFPLSIM_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "MFPLSIM_WORKERS")]
    workers: Option<usize>,
    #[arg(long, global = true, env = "MFPLSIM_OUT")]
    out: Option<PathBuf>,
    /// Comma-separated candidate numbers of thinned points.
    #[arg(long, global = true, env = "MFPLSIM_W_SET", value_delimiter = ',')]
    w_set: Option<Vec<usize>>,
    #[arg(long, global = true, env = "MFPLSIM_LAMBDA_MIN_RATIO")]
    lambda_min_ratio: Option<f64>,
    #[arg(long, global = true, env = "MFPLSIM_BANDWIDTH_QUANTILES", value_delimiter = ',')]
    bandwidth_quantiles: Option<Vec<f64>>,
    #[arg(long, global = true, env = "MFPLSIM_M_KNOTS", value_delimiter = ',')]
    m_knots: Option<Vec<usize>>,
    /// Keep every k-th candidate direction.
    #[arg(long, global = true, env = "MFPLSIM_DIRECTION_STRIDE")]
    direction_stride: Option<usize>,
    /// Two-stage split as `n1,n2`.
    #[arg(long, global = true, env = "MFPLSIM_SPLIT", value_delimiter = ',', num_args = 1)]
    split: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a train/test pair and its ground truth.
    Simulate(DesignArgs),
    /// Fit a method on CSV data.
    Fit(DataArgs),
    /// Predict with a saved fit.
    Predict(PredictArgs),
    /// Monte Carlo comparison of several methods.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct DesignArgs {
    #[arg(long, env = "MFPLSIM_DESIGN")]
    design: Option<DesignKind>,
    #[arg(long, env = "MFPLSIM_N")]
    n: Option<usize>,
    #[arg(long, env = "MFPLSIM_P")]
    p: Option<usize>,
    #[arg(long, env = "MFPLSIM_N_TEST")]
    n_test: Option<usize>,
    #[arg(long, env = "MFPLSIM_NOISE_RATIO")]
    noise_ratio: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Directory holding `<prefix>_zeta.csv`, `<prefix>_x.csv`, `<prefix>_y.csv`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    zeta: Option<PathBuf>,
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    y: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// `fit.json` written by `fit`.
    #[arg(long)]
    fit: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Number of replicates.
    #[arg(long, env = "MFPLSIM_M")]
    m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Also write one row per replicate.
    #[arg(long)]
    per_replicate: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataPaths {
    dir: Option<PathBuf>,
    zeta: Option<PathBuf>,
    x: Option<PathBuf>,
    y: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DesignFields {
    kind: Option<DesignKind>,
    n: Option<usize>,
    p: Option<usize>,
    n_test: Option<usize>,
    noise_ratio: Option<f64>,
}

/// Everything a command needs; read from `--config`, then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    method: Option<String>,
    methods: Vec<String>,
    design: DesignFields,
    seed: Option<u64>,
    m: Option<usize>,
    workers: Option<usize>,
    out: Option<PathBuf>,
    data: DataPaths,
    fit: Option<PathBuf>,
    settings: MethodSettings,
    per_replicate: bool,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn apply_common(&mut self, c: &Common) -> Result<()> {
        if let Some(v) = &c.method {
            self.method = Some(v.clone());
        }
        if let Some(v) = c.seed {
            self.seed = Some(v);
        }
        if let Some(v) = c.workers {
            self.workers = Some(v);
        }
        if let Some(v) = &c.out {
            self.out = Some(v.clone());
        }
        let s = &mut self.settings;
        if let Some(v) = &c.w_set {
            s.w_set = v.clone();
        }
        if let Some(v) = c.lambda_min_ratio {
            s.scad.lambda_min_ratio = v;
        }
        if let Some(v) = &c.bandwidth_quantiles {
            s.bandwidth_quantiles = v.clone();
        }
        if let Some(v) = &c.m_knots {
            s.m_knots = v.clone();
        }
        if let Some(v) = c.direction_stride {
            s.direction_stride = v;
        }
        if let Some(v) = &c.split {
            match v.as_slice() {
                [n1, n2] => s.split = Some((*n1, *n2)),
                _ => return Err(Error::Config("--split takes exactly two values, n1,n2".into())),
            }
        }
        Ok(())
    }

    fn apply_design(&mut self, d: &DesignArgs) {
        let f = &mut self.design;
        f.kind = d.design.or(f.kind);
        f.n = d.n.or(f.n);
        f.p = d.p.or(f.p);
        f.n_test = d.n_test.or(f.n_test);
        f.noise_ratio = d.noise_ratio.or(f.noise_ratio);
    }

    fn apply_data(&mut self, d: &DataArgs) {
        let p = &mut self.data;
        for (dst, src) in [
            (&mut p.dir, &d.data),
            (&mut p.zeta, &d.zeta),
            (&mut p.x, &d.x),
            (&mut p.y, &d.y),
        ] {
            if src.is_some() {
                *dst = src.clone();
            }
        }
    }

    fn design_spec(&self) -> Result<DesignSpec> {
        let f = &self.design;
        let missing = |name: &str| Error::Config(format!("design field `{name}` is required"));
        let mut spec = DesignSpec::new(
            f.kind.ok_or_else(|| missing("kind"))?,
            f.n.ok_or_else(|| missing("n"))?,
            f.p.ok_or_else(|| missing("p"))?,
            self.seed.unwrap_or(0),
        );
        if let Some(v) = f.n_test {
            spec.n_test = v;
        }
        if let Some(v) = f.noise_ratio {
            spec.noise_ratio = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(dir)
    }

    fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

fn data_path(paths: &DataPaths, explicit: &Option<PathBuf>, prefix: &str, part: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    match &paths.dir {
        Some(dir) => Ok(dir.join(format!("{prefix}_{part}.csv"))),
        None => Err(Error::Config(format!("no path for the {part} file; pass --data or --{part}"))),
    }
}

/// Loads curves and, when the file exists, responses. Missing responses become zeros.
fn load_data(paths: &DataPaths, prefix: &str, need_y: bool) -> Result<(BiFunctionalDataset, bool)> {
    let zeta_path = data_path(paths, &paths.zeta, prefix, "zeta")?;
    let x_path = data_path(paths, &paths.x, prefix, "x")?;
    let y_path = data_path(paths, &paths.y, prefix, "y")?;
    let (zeta_grid, zeta) = read_curves(&zeta_path)?;
    let (x_grid, x) = read_curves(&x_path)?;
    let has_y = need_y || y_path.exists();
    let y = if has_y {
        read_response(&y_path)?
    } else {
        DVector::zeros(zeta.nrows())
    };
    if zeta.nrows() != y.len() || x.nrows() != y.len() {
        return Err(Error::Size(format!(
            "row counts differ: zeta {}, x {}, y {}",
            zeta.nrows(),
            x.nrows(),
            y.len()
        )));
    }
    let data = BiFunctionalDataset::new(zeta_grid.into(), zeta, x_grid.into(), x, y)?;
    Ok((data, has_y))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Numerical(format!("{}: {other:?}", path.display())),
    }
}

fn finish(path: &Path, mut w: csv::Writer<fs::File>) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.design_spec()?;
    let out = cfg.out_dir()?;
    let (train, test, truth) = gen_design(&spec)?;
    write_csv(&train, out.join("train_zeta.csv"), out.join("train_x.csv"), out.join("train_y.csv"))?;
    write_csv(&test, out.join("test_zeta.csv"), out.join("test_x.csv"), out.join("test_y.csv"))?;
    write_json(&out.join("truth.json"), &truth)?;
    write_json(&out.join("design.json"), &spec)
}

fn method(cfg: &RunConfig, name: &str) -> Result<Box<dyn SelectionMethod>> {
    MethodRegistry::default().create(name, &cfg.settings)
}

fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let name = cfg.method.as_deref().unwrap_or("fassmr");
    let method = method(cfg, name)?;
    let (data, _) = load_data(&cfg.data, "train", true)?;
    let out = cfg.out_dir()?;
    let fit = with_workers(cfg.workers, || method.fit(&data))?;

    write_json(&out.join("fit.json"), &fit)?;
    let path = out.join("coefficients.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["j", "t_j", "beta_j"]).map_err(|e| csv_error(&path, e))?;
    for (j, (&t, &b)) in fit.zeta_grid.points().iter().zip(&fit.beta_full).enumerate() {
        w.write_record([j.to_string(), t.to_string(), b.to_string()])
            .map_err(|e| csv_error(&path, e))?;
    }
    finish(&path, w)?;

    let path = out.join("link.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["index", "residual"]).map_err(|e| csv_error(&path, e))?;
    for (u, r) in fit.link.index.iter().zip(&fit.link.residuals) {
        w.write_record([u.to_string(), r.to_string()]).map_err(|e| csv_error(&path, e))?;
    }
    finish(&path, w)?;

    if name == "iassmr" {
        write_json(&out.join("stage_trace.json"), &fit.stage_trace)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictSummary {
    n: usize,
    extrapolated: usize,
    msep: Option<f64>,
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let fit_path = cfg
        .fit
        .clone()
        .ok_or_else(|| Error::Config("predict needs --fit".into()))?;
    let text = fs::read_to_string(&fit_path).map_err(|source| Error::Io {
        path: fit_path.clone(),
        source,
    })?;
    let fit: FitResult = serde_json::from_str(&text)?;
    let (data, has_y) = load_data(&cfg.data, "test", false)?;
    let out = cfg.out_dir()?;
    let preds = predict_dataset(&fit, &data)?;

    let path = out.join("predictions.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["i", "prediction", "extrapolated"];
    if has_y {
        header.push("observed");
    }
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for (i, (value, extra)) in preds.iter().enumerate() {
        let mut row = vec![i.to_string(), value.to_string(), extra.to_string()];
        if has_y {
            row.push(data.y()[i].to_string());
        }
        w.write_record(&row).map_err(|e| csv_error(&path, e))?;
    }
    finish(&path, w)?;

    let values: Vec<f64> = preds.iter().map(|p| p.0).collect();
    let summary = PredictSummary {
        n: values.len(),
        extrapolated: preds.iter().filter(|p| p.1).count(),
        msep: if has_y {
            Some(msep(&values, data.y().as_slice())?)
        } else {
            None
        },
    };
    write_json(&out.join("predict_summary.json"), &summary)
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.design_spec()?;
    let m = cfg.m.unwrap_or(20);
    let names = if cfg.methods.is_empty() {
        vec!["fassmr".to_string(), "pls".to_string()]
    } else {
        cfg.methods.clone()
    };
    let methods = names
        .iter()
        .map(|n| method(cfg, n))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn SelectionMethod> = methods.iter().map(|m| m.as_ref()).collect();
    let out = cfg.out_dir()?;
    let summary = monte_carlo(&spec, &refs, m, cfg.workers)?;
    write_summary(&out, &summary, cfg.per_replicate)
}

fn write_summary(out: &Path, summary: &MetricsSummary, per_replicate: bool) -> Result<()> {
    // timings vary run to run, so they live apart from the reproducible summary
    let stable = summary.without_timing();
    let path = out.join("summary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "design", "n", "p", "m", "method", "replicates", "failures", "mean_msep", "sd_msep",
        "mean_right", "mean_wrong", "recovery_rate",
    ])
    .map_err(|e| csv_error(&path, e))?;
    for s in &stable.methods {
        w.write_record([
            stable.spec.kind.name().to_string(),
            stable.spec.n.to_string(),
            stable.spec.p.to_string(),
            stable.m.to_string(),
            s.method.clone(),
            s.replicates.to_string(),
            s.failures.to_string(),
            s.mean_msep.to_string(),
            s.sd_msep.to_string(),
            s.mean_right.to_string(),
            s.mean_wrong.to_string(),
            s.recovery_rate.to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    finish(&path, w)?;
    let mut slim = stable.clone();
    slim.replicates.clear();
    write_json(&out.join("summary.json"), &slim)?;

    let path = out.join("timing.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["method", "mean_seconds", "ratio_to_first"])
        .map_err(|e| csv_error(&path, e))?;
    let base = summary.methods.first().map(|s| s.mean_seconds).unwrap_or(f64::NAN);
    for s in &summary.methods {
        w.write_record([
            s.method.clone(),
            s.mean_seconds.to_string(),
            (s.mean_seconds / base).to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    finish(&path, w)?;

    if per_replicate {
        let path = out.join("replicates.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["method", "replicate", "msep", "right", "wrong", "support", "reps_recovered", "failed"])
            .map_err(|e| csv_error(&path, e))?;
        for r in &stable.replicates {
            let support: Vec<String> = r.support.indices().iter().map(|j| j.to_string()).collect();
            w.write_record([
                r.method.clone(),
                r.replicate.to_string(),
                r.msep.to_string(),
                r.right.to_string(),
                r.wrong.to_string(),
                support.join(" "),
                r.reps_recovered.to_string(),
                r.failed.clone().unwrap_or_default(),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
        finish(&path, w)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    cfg.apply_common(&cli.common)?;
    match &cli.command {
        Command::Simulate(d) => cfg.apply_design(d),
        Command::Fit(d) => cfg.apply_data(d),
        Command::Predict(p) => {
            cfg.apply_data(&p.data);
            if p.fit.is_some() {
                cfg.fit = p.fit.clone();
            }
        }
        Command::Bench(b) => {
            cfg.apply_design(&b.design);
            cfg.m = b.m.or(cfg.m);
            if let Some(v) = &b.methods {
                cfg.methods = v.clone();
            }
            cfg.per_replicate |= b.per_replicate;
        }
    }
    cfg.validate()?;
    match cli.command {
        Command::Simulate(_) => cmd_simulate(&cfg),
        Command::Fit(_) => cmd_fit(&cfg),
        Command::Predict(_) => cmd_predict(&cfg),
        Command::Bench(_) => cmd_bench(&cfg),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let report = serde_json::json!({
                "error": format!("{kind:?}").to_lowercase(),
                "message": e.to_string(),
            });
            eprintln!("{report}");
            ExitCode::from(exit_code(kind))
        }
    }
}
