//! Command-line surface: experiment configs, CSV/SVG artifact emission,
//! and the train / sample / eval / sweep-lambda / gradcheck commands.

use crate::metrics::{
    self, diversity, energy_distance, mode_coverage, sliced_w2, MetricsReport,
};
use crate::model::ParamSnapshot;
use crate::sampler::{self, Branch};
use crate::trainer::{TrainConfig, Trainer, TrainerError};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Sample-set size used when computing metrics during train/eval/sweep.
const EVAL_SET_SIZE: usize = 2000;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Divergence(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Divergence(m) => write!(f, "divergence: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Diverged { .. } => CliError::Divergence(e.to_string()),
            TrainerError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// TrainConfig plus artifact-emission settings; same flat key=value file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub nfe_list: Vec<usize>,
    pub eval_every: usize,
    pub plot: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            output_dir: PathBuf::from("out"),
            nfe_list: vec![1, 2, 4, 8],
            eval_every: 1000,
            plot: false,
        }
    }
}

fn parse_nfe_list(s: &str) -> Result<Vec<usize>, CliError> {
    let list: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse()).collect();
    match list {
        Ok(v) if !v.is_empty() && v.iter().all(|&k| k >= 1) => Ok(v),
        _ => Err(CliError::Usage(format!(
            "nfe list '{s}' must be comma-separated integers >= 1"
        ))),
    }
}

impl ExperimentConfig {
    /// Split the file into cli-level keys and TrainConfig keys; unknown keys
    /// are rejected by the TrainConfig parser.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        let mut train_lines = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            let Some((key, value)) = line.split_once('=') else {
                train_lines.push_str(raw);
                train_lines.push('\n');
                continue;
            };
            let bad = |e: &dyn std::fmt::Display| {
                CliError::Usage(format!("line {}: {}: {e}", lineno + 1, key.trim()))
            };
            match key.trim() {
                "output_dir" => cfg.output_dir = PathBuf::from(value.trim()),
                "nfe_list" => cfg.nfe_list = parse_nfe_list(value.trim())?,
                "eval_every" => {
                    cfg.eval_every = value.trim().parse().map_err(|e| bad(&e))?;
                    if cfg.eval_every == 0 {
                        return Err(CliError::Usage("eval_every must be positive".into()));
                    }
                }
                "plot" => cfg.plot = value.trim().parse().map_err(|e| bad(&e))?,
                _ => {
                    train_lines.push_str(raw);
                    train_lines.push('\n');
                }
            }
        }
        cfg.train = TrainConfig::parse(&train_lines)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_seed_override()?;
        Ok(cfg)
    }

    /// TWINFLOW_SEED, when set, replaces the configured seed.
    pub fn apply_seed_override(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var("TWINFLOW_SEED") {
            self.train.seed = v.parse().map_err(|e| {
                CliError::Usage(format!("TWINFLOW_SEED '{v}' is not a valid seed: {e}"))
            })?;
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let mut out = self.train.to_key_values();
        let nfe: Vec<String> = self.nfe_list.iter().map(|k| k.to_string()).collect();
        let _ = write!(
            out,
            "output_dir = {}\nnfe_list = {}\neval_every = {}\nplot = {}\n",
            self.output_dir.display(),
            nfe.join(","),
            self.eval_every,
            self.plot,
        );
        out
    }
}

/// 17-significant-digit float rendering (round-trip safe).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics helpers
// ---------------------------------------------------------------------------

/// Generate from the EMA weights and score against a fresh reference draw.
/// Seeding is derived from (seed, step, nfe) so re-runs are identical.
fn evaluate_checkpoint(
    trainer: &Trainer,
    weights: &ParamSnapshot,
    nfe: usize,
    step: usize,
) -> Result<MetricsReport, CliError> {
    let spec = trainer.config.dataset_spec();
    let seed = trainer
        .config
        .seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(step as u64)
        .wrapping_add((nfe as u64) << 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (reference, _) = spec.sample(EVAL_SET_SIZE, &mut rng);
    let labels: Option<Vec<usize>> = (spec.n_classes() > 0).then(|| {
        (0..EVAL_SET_SIZE).map(|_| rng.gen_range(0..spec.n_classes())).collect()
    });
    let run = sampler::sample(
        &trainer.net.config,
        weights,
        EVAL_SET_SIZE,
        nfe,
        labels.as_deref(),
        Branch::Real,
        &mut rng,
        false,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let dim = spec.dim();
    let sw2 = sliced_w2(&run.samples, &reference, dim, metrics::DEFAULT_N_PROJ, &mut rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let ed = energy_distance(&run.samples, &reference, dim, metrics::DEFAULT_MAX_PAIRS, &mut rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let modes = if matches!(spec, crate::data::DatasetSpec::Ring8 { .. }) {
        mode_coverage(&run.samples, metrics::ring8_default_radius_tol()).0
    } else {
        0
    };
    let div = diversity(&run.samples, dim, metrics::DEFAULT_MAX_PAIRS, &mut rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(MetricsReport {
        sliced_w2: sw2,
        energy_dist: ed,
        modes_recovered: modes,
        diversity: div,
        nfe,
    })
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    write_file(&out.join("config.resolved"), &cfg.to_key_values())?;

    let mut trainer = Trainer::new(cfg.train.clone())?;
    let mut loss_csv = String::from("step,base,adv,rectify,total,grad_norm\n");
    let mut metrics_csv =
        String::from("checkpoint_step,nfe,sliced_w2,energy_dist,modes_recovered,diversity\n");

    let total = cfg.train.steps;
    while trainer.step < total {
        let rec = trainer.step_once()?;
        let _ = writeln!(
            loss_csv,
            "{},{},{},{},{},{}",
            rec.step,
            fmt_f64(rec.base),
            fmt_f64(rec.adv),
            fmt_f64(rec.rectify),
            fmt_f64(rec.total),
            fmt_f64(rec.grad_norm),
        );
        if trainer.step % cfg.eval_every == 0 || trainer.step == total {
            let ckpt = out.join(format!("ckpt_step{}.bin", trainer.step));
            trainer.save_to_path(&ckpt)?;
            let ema = trainer.ema_snapshot();
            for &nfe in &cfg.nfe_list {
                let report = evaluate_checkpoint(&trainer, &ema, nfe, trainer.step)?;
                let _ = writeln!(
                    metrics_csv,
                    "{},{},{},{},{},{}",
                    trainer.step,
                    nfe,
                    fmt_f64(report.sliced_w2),
                    fmt_f64(report.energy_dist),
                    report.modes_recovered,
                    fmt_f64(report.diversity),
                );
            }
        }
    }
    trainer.save_to_path(&out.join("ckpt_final.bin"))?;
    write_file(&out.join("loss.csv"), &loss_csv)?;
    write_file(&out.join("metrics.csv"), &metrics_csv)?;
    Ok(())
}

pub fn cmd_sample(
    ckpt: &Path,
    nfe: usize,
    n: usize,
    branch: Branch,
    out: &Path,
    svg: bool,
) -> Result<(), CliError> {
    if nfe == 0 {
        return Err(CliError::Usage("--nfe must be >= 1".into()));
    }
    if n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    let trainer = load_checkpoint(ckpt)?;
    let spec = trainer.config.dataset_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.config.seed);
    let labels: Option<Vec<usize>> = (spec.n_classes() > 0)
        .then(|| (0..n).map(|_| rng.gen_range(0..spec.n_classes())).collect());
    let run = sampler::sample(
        &trainer.net.config,
        &trainer.ema,
        n,
        nfe,
        labels.as_deref(),
        branch,
        &mut rng,
        false,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let dim = trainer.net.config.data_dim;
    let mut csv = String::from("sample_id");
    for d in 0..dim {
        let _ = write!(csv, ",dim_{d}");
    }
    if labels.is_some() {
        csv.push_str(",label");
    }
    csv.push('\n');
    for (i, row) in run.samples.chunks(dim).enumerate() {
        let _ = write!(csv, "{i}");
        for v in row {
            let _ = write!(csv, ",{}", fmt_f64(*v));
        }
        if let Some(l) = &labels {
            let _ = write!(csv, ",{}", l[i]);
        }
        csv.push('\n');
    }
    fs::create_dir_all(out)?;
    write_file(&out.join("samples.csv"), &csv)?;
    if svg {
        if dim != 2 {
            return Err(CliError::Usage("--svg requires 2-D data".into()));
        }
        let svg_text = scatter_svg(&run.samples, labels.as_deref());
        write_file(&out.join("samples.svg"), &svg_text)?;
    }
    Ok(())
}

pub fn cmd_eval(ckpt: &Path, nfe_list: &[usize], out: &Path) -> Result<(), CliError> {
    let trainer = load_checkpoint(ckpt)?;
    let ema = trainer.ema_snapshot();
    let mut csv =
        String::from("checkpoint_step,nfe,sliced_w2,energy_dist,modes_recovered,diversity\n");
    for &nfe in nfe_list {
        let report = evaluate_checkpoint(&trainer, &ema, nfe, trainer.step)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            trainer.step,
            nfe,
            fmt_f64(report.sliced_w2),
            fmt_f64(report.energy_dist),
            report.modes_recovered,
            fmt_f64(report.diversity),
        );
    }
    fs::create_dir_all(out)?;
    write_file(&out.join("metrics.csv"), &csv)?;
    Ok(())
}

pub fn cmd_sweep_lambda(config_path: &Path, lambdas: &[f64]) -> Result<(), CliError> {
    if lambdas.is_empty() {
        return Err(CliError::Usage("--lambdas must be nonempty".into()));
    }
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(CliError::Usage(format!("lambda {l} outside [0, 1]")));
        }
    }
    let base = ExperimentConfig::load(config_path)?;
    fs::create_dir_all(&base.output_dir)?;
    // rows collected per λ in argument order; each λ is an independent run
    let mut csv = String::from("lambda,nfe,sliced_w2,modes,diversity\n");
    for &lambda in lambdas {
        let mut cfg = base.train.clone();
        cfg.lambda = lambda;
        let mut trainer = Trainer::new(cfg)?;
        trainer.run(trainer.config.steps)?;
        let ema = trainer.ema_snapshot();
        for &nfe in &base.nfe_list {
            let report = evaluate_checkpoint(&trainer, &ema, nfe, trainer.step)?;
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                fmt_f64(lambda),
                nfe,
                fmt_f64(report.sliced_w2),
                report.modes_recovered,
                fmt_f64(report.diversity),
            );
        }
    }
    write_file(&base.output_dir.join("sweep.csv"), &csv)?;
    Ok(())
}

pub fn cmd_gradcheck() -> Result<(), CliError> {
    let report = crate::gradcheck::run(0, 100);
    println!(
        "gradcheck: {} cases, {} gradient entries, max relative error {:.3e}",
        report.cases, report.gradients_checked, report.max_rel_err
    );
    if report.max_rel_err < 1e-4 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradcheck failed: max relative error {:.3e} >= 1e-4",
            report.max_rel_err
        )))
    }
}

fn load_checkpoint(path: &Path) -> Result<Trainer, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    Trainer::load_from_path(path).map_err(CliError::from)
}

// ---------------------------------------------------------------------------
// SVG scatter (hand-written, no plotting dependency)
// ---------------------------------------------------------------------------

const SVG_SIZE: f64 = 600.0;
const SVG_MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn scatter_svg(points: &[f64], labels: Option<&[usize]>) -> String {
    let xs: Vec<f64> = points.iter().step_by(2).copied().collect();
    let ys: Vec<f64> = points.iter().skip(1).step_by(2).copied().collect();
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = (min(&xs), max(&xs));
    let (y0, y1) = (min(&ys), max(&ys));
    let span = ((x1 - x0).max(y1 - y0)).max(1e-9);
    let inner = SVG_SIZE - 2.0 * SVG_MARGIN;
    let px = |x: f64| SVG_MARGIN + (x - x0) / span * inner;
    let py = |y: f64| SVG_SIZE - SVG_MARGIN - (y - y0) / span * inner;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" \
         viewBox=\"0 0 {s} {s}\">\n<rect width=\"{s}\" height=\"{s}\" fill=\"white\"/>\n",
        s = SVG_SIZE
    );
    for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
        let color = match labels {
            Some(l) => PALETTE[l[i] % PALETTE.len()],
            None => PALETTE[0],
        };
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            px(*x),
            py(*y),
            color
        );
    }
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// argument parsing
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "twinflow",
    about = "Twin-trajectory any-step flow matching on 2-D synthetic data",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a key=value config file
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate samples from a checkpoint
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// real (data branch) or fake (twin branch, negative times)
        #[arg(long, default_value = "real")]
        branch: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write a scatter SVG
        #[arg(long, default_value_t = false)]
        svg: bool,
    },
    /// Compute metrics for a checkpoint at several NFE settings
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated NFE list, e.g. 1,2,4,8
        #[arg(long, default_value = "1,2,4,8")]
        nfe: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per lambda and aggregate final metrics into sweep.csv
    SweepLambda {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated lambda values in [0, 1]
        #[arg(long)]
        lambdas: String,
    },
    /// Run the finite-difference autodiff verification suite
    Gradcheck,
}

/// Dispatch a parsed command; the caller maps the error to an exit code.
pub fn dispatch(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config } => cmd_train(config),
        Command::Sample { ckpt, nfe, n, branch, out, svg } => {
            let branch = Branch::from_str(branch).map_err(CliError::Usage)?;
            cmd_sample(ckpt, *nfe, *n, branch, out, *svg)
        }
        Command::Eval { ckpt, nfe, out } => {
            let list = parse_nfe_list(nfe)?;
            cmd_eval(ckpt, &list, out)
        }
        Command::SweepLambda { config, lambdas } => {
            let parsed: Result<Vec<f64>, _> =
                lambdas.split(',').map(|p| p.trim().parse()).collect();
            let parsed = parsed
                .map_err(|e| CliError::Usage(format!("bad --lambdas '{lambdas}': {e}")))?;
            cmd_sweep_lambda(config, &parsed)
        }
        Command::Gradcheck => cmd_gradcheck(),
    }
}

/// Entry point used by main(); returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are success, not usage errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use tempfile::tempdir;

    fn fast_config(dir: &Path) -> String {
        format!(
            "dataset = gauss_unit\nhidden = 16\ndepth = 2\nn_freq = 4\nbatch_size = 16\n\
             steps = 10\nlr = 1e-3\nseed = 1\noutput_dir = {}\nnfe_list = 1,2\neval_every = 5\n",
            dir.display()
        )
    }

    #[test]
    fn experiment_config_parses_cli_keys_and_rejects_unknown() {
        let cfg = ExperimentConfig::parse(
            "dataset = ring8\noutput_dir = /tmp/x\nnfe_list = 1,4\neval_every = 50\nplot = true\n",
        )
        .unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.nfe_list, vec![1, 4]);
        assert_eq!(cfg.eval_every, 50);
        assert!(cfg.plot);
        assert!(matches!(cfg.train.dataset, DatasetSpec::Ring8 { .. }));
        assert!(matches!(
            ExperimentConfig::parse("bogus_key = 1\n"),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn fmt_f64_round_trips() {
        for v in [0.0, 1.0 / 3.0, -1.2345678901234567e-12, 1e300, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn train_writes_artifacts_with_expected_row_counts() {
        let dir = tempdir().unwrap();
        let config_path = dir.path().join("config");
        fs::write(&config_path, fast_config(dir.path())).unwrap();
        cmd_train(&config_path).unwrap();

        let loss = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        let lines: Vec<&str> = loss.lines().collect();
        assert_eq!(lines[0], "step,base,adv,rectify,total,grad_norm");
        assert_eq!(lines.len(), 11, "header + 10 rows");

        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        // checkpoints at steps 5 and 10, two nfe values each
        assert_eq!(metrics.lines().count(), 1 + 2 * 2);
        assert!(dir.path().join("ckpt_step5.bin").exists());
        assert!(dir.path().join("ckpt_step10.bin").exists());
        assert!(dir.path().join("ckpt_final.bin").exists());
        assert!(dir.path().join("config.resolved").exists());
    }

    #[test]
    fn train_twice_is_byte_identical() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            let config_path = dir.path().join("config");
            fs::write(&config_path, fast_config(dir.path())).unwrap();
            cmd_train(&config_path).unwrap();
        }
        let a = fs::read(dir_a.path().join("loss.csv")).unwrap();
        let b = fs::read(dir_b.path().join("loss.csv")).unwrap();
        assert_eq!(a, b);
        let ma = fs::read(dir_a.path().join("metrics.csv")).unwrap();
        let mb = fs::read(dir_b.path().join("metrics.csv")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn sample_writes_expected_rows_and_svg() {
        let dir = tempdir().unwrap();
        let config_path = dir.path().join("config");
        fs::write(&config_path, fast_config(dir.path())).unwrap();
        cmd_train(&config_path).unwrap();

        let out = dir.path().join("samples_out");
        cmd_sample(
            &dir.path().join("ckpt_final.bin"),
            1,
            100,
            Branch::Real,
            &out,
            true,
        )
        .unwrap();
        let csv = fs::read_to_string(out.join("samples.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sample_id,dim_0,dim_1");
        assert_eq!(lines.len(), 101);
        let svg = fs::read_to_string(out.join("samples.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 100);
    }

    #[test]
    fn eval_writes_one_row_per_nfe() {
        let dir = tempdir().unwrap();
        let config_path = dir.path().join("config");
        fs::write(&config_path, fast_config(dir.path())).unwrap();
        cmd_train(&config_path).unwrap();
        let out = dir.path().join("eval_out");
        cmd_eval(&dir.path().join("ckpt_final.bin"), &[1, 2, 4], &out).unwrap();
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("checkpoint_step,nfe,"));
    }

    #[test]
    fn missing_checkpoint_is_usage_error() {
        let dir = tempdir().unwrap();
        let err = cmd_sample(
            &dir.path().join("nope.bin"),
            1,
            10,
            Branch::Real,
            dir.path(),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn sweep_lambda_emits_full_grid() {
        let dir = tempdir().unwrap();
        let config_path = dir.path().join("config");
        fs::write(&config_path, fast_config(dir.path())).unwrap();
        cmd_sweep_lambda(&config_path, &[0.0, 0.5]).unwrap();
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "lambda,nfe,sliced_w2,modes,diversity");
        assert_eq!(lines.len(), 1 + 2 * 2, "2 lambdas x 2 nfe settings");
        assert!(matches!(
            cmd_sweep_lambda(&config_path, &[1.5]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn seed_env_override_applies() {
        // set/remove is process-global: keep this the only env-touching test
        let dir = tempdir().unwrap();
        let config_path = dir.path().join("config");
        fs::write(&config_path, fast_config(dir.path())).unwrap();
        std::env::set_var("TWINFLOW_SEED", "777");
        let cfg = ExperimentConfig::load(&config_path);
        std::env::remove_var("TWINFLOW_SEED");
        assert_eq!(cfg.unwrap().train.seed, 777);
    }

    #[test]
    fn run_maps_errors_to_exit_codes() {
        assert_eq!(run(["twinflow", "not-a-command"]), EXIT_USAGE);
        assert_eq!(run(["twinflow", "train", "--config", "/does/not/exist"]), EXIT_USAGE);
        assert_eq!(run(["twinflow", "--help"]), EXIT_OK);
    }

    #[test]
    fn gradcheck_command_passes() {
        cmd_gradcheck().unwrap();
    }

    #[test]
    fn scatter_svg_handles_degenerate_extent() {
        let svg = scatter_svg(&[1.0, 1.0, 1.0, 1.0], None);
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));
    }
}
