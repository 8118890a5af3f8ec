//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or build error (including
//! a collapsed spatial ladder), 3 a tolerance or verification failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{count_flops, render, ReportFormat, TargetCheck};
use crate::arch::config::MacroConfig;
use crate::arch::export::export_graph;
use crate::arch::graph::build_model;
use crate::arch::preset::Preset;
use crate::context::TestHooks;
use crate::error::Error;
use crate::verify::gradcheck::{tiny_model, toy_smg, DEFAULT_TOLERANCE};
use crate::verify::overfit::{toy_model, OverfitConfig};
use crate::verify::{gradcheck, op_targets_for, overfit_toy, run_invariant_suite, GradCheckOptions, GradCheckReport, GradTarget};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hcgnet", version, about = "Build, cost and verify HCGNet models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Shape table and parameter/MAC report, checked against published targets for presets.
    Summarize(SummarizeArgs),
    /// Run the invariant suite on a seeded random forward pass.
    Verify(VerifyArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Overfit a small synthetic dataset with SGD.
    Overfit(OverfitArgs),
    /// Write the graph document as JSON.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Structured,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Structured => ReportFormat::Structured,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    A1,
    A2,
    A3,
    B,
    C,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::A1 => Preset::A1,
            PresetArg::A2 => Preset::A2,
            PresetArg::A3 => Preset::A3,
            PresetArg::B => Preset::B,
            PresetArg::C => Preset::C,
        }
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Built-in preset.
    #[arg(long, value_enum, ignore_case = true)]
    pub preset: Option<PresetArg>,
    /// TOML model description.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = false, multiple = false)]
pub struct OptionalSource {
    #[arg(long, value_enum, ignore_case = true)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Input resolution; defaults to the model's own.
    #[arg(long)]
    pub input: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Write the document here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub common: Common,
    /// Parameter tolerance, percent.
    #[arg(long, default_value_t = 5.0)]
    pub tol_params: f64,
    /// MAC tolerance, percent.
    #[arg(long, default_value_t = 15.0)]
    pub tol_flops: f64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradScope {
    /// Every op kind plus the reference SMG module.
    All,
    Ops,
    Smg,
    /// The whole model, which must stay under 100000 parameters.
    Model,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model whose op kinds are checked; the tiny model when omitted.
    #[command(flatten)]
    pub source: OptionalSource,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "all")]
    pub target: GradScope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative error bound.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct OverfitArgs {
    /// Model to train; the toy model when omitted.
    #[command(flatten)]
    pub source: OptionalSource,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    /// Final training accuracy required for a zero exit.
    #[arg(long, default_value_t = 0.95)]
    pub min_accuracy: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Input resolution; defaults to the model's own.
    #[arg(long)]
    pub input: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// A failed invocation: exit code plus message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Divergence { .. } => EXIT_CHECK,
            Error::UnsupportedDtype(_) => EXIT_USAGE,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// What a subcommand produced: the document and whether its checks held.
struct Output {
    document: String,
    passed: bool,
}

fn load(preset: Option<PresetArg>, config: Option<&PathBuf>) -> Result<Option<(MacroConfig, Option<Preset>)>, Error> {
    if let Some(p) = preset {
        let p = Preset::from(p);
        return Ok(Some((p.config(), Some(p))));
    }
    match config {
        Some(path) => Ok(Some((MacroConfig::from_path(path)?, None))),
        None => Ok(None),
    }
}

fn with_input(mut cfg: MacroConfig, input: Option<usize>) -> MacroConfig {
    if let Some(r) = input {
        cfg.input = r;
    }
    cfg
}

fn summarize(a: &SummarizeArgs) -> Result<Output, Error> {
    let (cfg, preset) = load(a.source.preset, a.source.config.as_ref())?.expect("clap requires a source");
    let cfg = with_input(cfg, a.common.input);
    let model = build_model(&cfg)?;
    let report = count_flops(&model, cfg.input)?;
    let check = preset
        .map(Preset::target)
        .filter(|t| t.input == cfg.input)
        .map(|t| TargetCheck::new(&report, t, a.tol_params, a.tol_flops));
    Ok(Output {
        document: render(&report, a.common.format.into(), check.as_ref()),
        passed: check.as_ref().is_none_or(TargetCheck::passed),
    })
}

fn verify(a: &VerifyArgs) -> Result<Output, Error> {
    let (cfg, _) = load(a.source.preset, a.source.config.as_ref())?.expect("clap requires a source");
    let cfg = with_input(cfg, a.common.input);
    let report = run_invariant_suite(&cfg, a.seed, TestHooks::default())?;
    let document = match a.common.format {
        Format::Structured => json(&report),
        Format::Text => {
            let mut s = format!("invariant suite for {} (seed {})\n", report.model, report.seed);
            for c in &report.checks {
                let _ = writeln!(s, "{} {:<22} residual {:.3e}  {}", verdict(c.passed), c.name, c.residual, c.detail);
            }
            s
        }
    };
    Ok(Output {
        document,
        passed: report.passed(),
    })
}

#[derive(Serialize)]
struct GradCheckDocument {
    seed: u64,
    tolerance: f64,
    passed: bool,
    reports: Vec<GradCheckReport>,
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Output, Error> {
    let cfg = match load(a.source.preset, a.source.config.as_ref())? {
        Some((cfg, _)) => with_input(cfg, a.common.input),
        None => with_input(tiny_model(), a.common.input),
    };
    let opts = GradCheckOptions {
        seed: a.seed,
        tolerance: a.tol,
        ..Default::default()
    };
    let mut targets = Vec::new();
    if matches!(a.target, GradScope::All | GradScope::Ops) {
        let model = build_model(&cfg)?;
        targets.extend(op_targets_for(&model).into_iter().map(GradTarget::Op));
    }
    if matches!(a.target, GradScope::All | GradScope::Smg) {
        targets.push(GradTarget::Smg(toy_smg()));
    }
    if a.target == GradScope::Model {
        targets.push(GradTarget::Model(cfg));
    }
    let reports = targets.iter().map(|t| gradcheck(t, &opts)).collect::<Result<Vec<_>, _>>()?;
    let passed = reports.iter().all(GradCheckReport::passed);
    let document = match a.common.format {
        Format::Structured => json(&GradCheckDocument {
            seed: a.seed,
            tolerance: a.tol,
            passed,
            reports,
        }),
        Format::Text => {
            let mut s = format!("gradient checks, seed {}, tolerance {:e}\n", a.seed, a.tol);
            for r in &reports {
                let _ = writeln!(
                    s,
                    "{} {:<40} max rel {:.3e}  max abs {:.3e}",
                    verdict(r.passed()),
                    r.target,
                    r.max_rel_err,
                    r.max_abs_err
                );
                for p in r.params.iter().filter(|p| !p.failing.is_empty()) {
                    for f in &p.failing {
                        let _ = writeln!(
                            s,
                            "     {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                            p.name, f.index, f.analytic, f.numeric, f.rel_err
                        );
                    }
                }
            }
            s
        }
    };
    Ok(Output { document, passed })
}

#[derive(Serialize)]
struct OverfitDocument<'a> {
    model: &'a str,
    seed: u64,
    steps: usize,
    lr: f64,
    samples: usize,
    smoothed_monotone: bool,
    passed: bool,
    trace: &'a crate::verify::OverfitTrace,
}

fn overfit_cmd(a: &OverfitArgs) -> Result<Output, Error> {
    let model = match load(a.source.preset, a.source.config.as_ref())? {
        Some((cfg, _)) => cfg,
        None => toy_model(),
    };
    let model = with_input(model, a.common.input);
    let cfg = OverfitConfig {
        model,
        samples: a.samples,
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let trace = overfit_toy(&cfg)?;
    let monotone = trace.smoothed_monotone();
    let passed = monotone && trace.final_accuracy >= a.min_accuracy;
    let document = match a.common.format {
        Format::Structured => json(&OverfitDocument {
            model: &cfg.model.name,
            seed: a.seed,
            steps: a.steps,
            lr: a.lr,
            samples: a.samples,
            smoothed_monotone: monotone,
            passed,
            trace: &trace,
        }),
        Format::Text => {
            let mut s = format!(
                "overfit {} on {} samples, {} steps, lr {}, seed {}\n",
                cfg.model.name, a.samples, a.steps, a.lr, a.seed
            );
            let stride = (a.steps / 10).max(1);
            for (t, (l, acc)) in trace.losses.iter().zip(&trace.accuracy).enumerate() {
                if t % stride == 0 {
                    let _ = writeln!(s, "step {t:>5}  loss {l:.6}  accuracy {acc:.3}");
                }
            }
            let _ = writeln!(s, "final      loss {:.6}  accuracy {:.3}", trace.final_loss, trace.final_accuracy);
            let _ = writeln!(s, "smoothed loss non-increasing: {monotone}");
            let _ = writeln!(s, "{}", verdict(passed));
            s
        }
    };
    Ok(Output { document, passed })
}

fn export(a: &ExportArgs) -> Result<Output, Error> {
    let (cfg, _) = load(a.source.preset, a.source.config.as_ref())?.expect("clap requires a source");
    let model = build_model(&with_input(cfg, a.input))?;
    Ok(Output {
        document: export_graph(&model)?,
        passed: true,
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports always serialize");
    s.push('\n');
    s
}

/// Runs a parsed invocation, writing the document to `stdout` or `--out`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), Failure> {
    let (result, out) = match &cli.command {
        Command::Summarize(a) => (summarize(a), a.common.out.as_ref()),
        Command::Verify(a) => (verify(a), a.common.out.as_ref()),
        Command::Gradcheck(a) => (gradcheck_cmd(a), a.common.out.as_ref()),
        Command::Overfit(a) => (overfit_cmd(a), a.common.out.as_ref()),
        Command::Export(a) => (export(a), a.out.as_ref()),
    };
    let output = result?;
    let written = match out {
        Some(path) => std::fs::write(path, &output.document).map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => stdout
            .write_all(output.document.as_bytes())
            .map_err(|e| format!("cannot write output: {e}")),
    };
    if let Err(message) = written {
        return Err(Failure {
            code: EXIT_USAGE,
            message,
        });
    }
    if output.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK,
            message: "one or more checks failed".into(),
        })
    }
}

/// Parses `args` (program name first) and runs them, returning the exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}
