//! `eqckn` command line: fit, represent, verify, sweep, report.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::ckn::Network;
use crate::config::{parse_config, GroupConfig, RunConfig};
use crate::error::{Error, Result};
use crate::report::{regenerate_plotdata, write_reports, Runtime};
use crate::stability::readout_vector;
use crate::sweep::{fit_model, prepare_dataset, run_stability_sweep, split_for_protocol, Model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "eqckn", version, about = "Group-equivariant convolutional kernel networks")]
struct Cli {
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the configured network and write its manifest.
    Fit {
        config: PathBuf,
        /// Output directory (default: `<output dir>/network`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one image's representation as a CSV row.
    Represent {
        config: PathBuf,
        /// IDX image file.
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Load a saved network instead of fitting one.
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Run every invariant suite; exits 1 if a hard check fails.
    Verify { config: PathBuf },
    /// Run the stability protocol and write the report bundle.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate plot data from an existing `report.json`.
    Report { dir: PathBuf },
}

/// Result of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub summary: String,
    pub paths: Vec<PathBuf>,
}

impl CommandOutcome {
    fn ok(summary: String, paths: Vec<PathBuf>) -> Self {
        CommandOutcome {
            exit_code: EXIT_OK,
            summary,
            paths,
        }
    }
}

/// Maps an error onto the exit-code taxonomy.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Idx { .. } | Error::Embedding(_) => EXIT_IO,
        Error::Config { .. }
        | Error::UnknownKey { .. }
        | Error::MissingKey { .. }
        | Error::InvalidParameter { .. }
        | Error::InvalidDims(_)
        | Error::InsufficientData(_)
        | Error::Unsupported(_) => EXIT_USAGE,
        _ => EXIT_INVARIANT,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn fit_configured(cfg: &RunConfig) -> Result<Network> {
    let ds = prepare_dataset(cfg)?;
    let (fit_set, _) = split_for_protocol(&ds, cfg.data.train);
    let n = &cfg.network;
    let seed = cfg.network_spec().seed;
    if n.overrides.is_empty() {
        return fit_model(cfg, Model::Equivariant, &n.kernel, n.kappa, n.sigma, seed, &fit_set);
    }
    let group = std::sync::Arc::new(crate::group::build_group(cfg.group.kind())?);
    let maps = fit_set.images[..n.fit_images.min(fit_set.len())]
        .iter()
        .map(|im| input_map(cfg, &group, im))
        .collect::<Result<Vec<_>>>()?;
    crate::ckn::fit_network(&group, &maps, &cfg.network_spec())
}

fn input_map(
    cfg: &RunConfig,
    group: &std::sync::Arc<crate::group::DiscretizedGroup>,
    img: &crate::signal::BaseImage,
) -> Result<crate::signal::FeatureMap> {
    match cfg.group {
        GroupConfig::S2 { scale, .. } => crate::signal::stereographic_project(img, group, scale),
        GroupConfig::Se2 { .. } => crate::signal::lift(img, group),
    }
}

fn execute(cli: Cli, out: &mut (dyn Write + Send)) -> Result<CommandOutcome> {
    match cli.command {
        Command::Fit { config, out: dir } => {
            let cfg = load_config(&config, cli.seed)?;
            let net = fit_configured(&cfg)?;
            let dir = dir.unwrap_or_else(|| cfg.output.join("network"));
            net.save(&dir)?;
            Ok(CommandOutcome::ok(
                format!("fitted {} layers on {:?}; manifest in {}", net.n_layers(), cfg.group.kind(), dir.display()),
                vec![dir.join("network.txt")],
            ))
        }
        Command::Represent {
            config,
            image,
            index,
            network,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let images = crate::data::load_idx_images(&image)?;
            let img = images.get(index).ok_or_else(|| {
                Error::param("index", format!("{index} is out of range for {} images", images.len()))
            })?;
            let (h, w) = cfg.image_dims();
            let img = if (img.height(), img.width()) != (h, w) {
                crate::data::resize(img, h, w)?
            } else {
                img.clone()
            };
            let net = match network {
                Some(p) => Network::load(&p)?,
                None => fit_configured(&cfg)?,
            };
            let x = input_map(&cfg, net.group(), &img)?;
            let v = readout_vector(&net.forward(&x)?, cfg.network.readout);
            let row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", row.join(",")).map_err(|e| Error::io("<stdout>", e))?;
            Ok(CommandOutcome::ok(
                format!("{}-dimensional {} representation of image {index}", v.len(), cfg.network.readout),
                vec![],
            ))
        }
        Command::Verify { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let ds = prepare_dataset(&cfg)?;
            let checks = crate::verify::run_verify(&cfg, &ds)?;
            let mut failed = 0;
            for c in &checks {
                let status = match (c.passed, c.hard) {
                    (true, _) => "PASS",
                    (false, true) => {
                        failed += 1;
                        "FAIL"
                    }
                    (false, false) => "WARN",
                };
                writeln!(out, "{status} {}: {}", c.name, c.detail).map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(CommandOutcome {
                exit_code: if failed == 0 { EXIT_OK } else { EXIT_INVARIANT },
                summary: format!("{} checks, {failed} hard failures", checks.len()),
                paths: vec![],
            })
        }
        Command::Sweep { config, out: dir } => {
            let cfg = load_config(&config, cli.seed)?;
            let start = Instant::now();
            let ds = prepare_dataset(&cfg)?;
            let report = run_stability_sweep(&cfg, &ds, cfg.seed)?;
            let dir = dir.unwrap_or_else(|| cfg.output.clone());
            let runtime = Runtime {
                seconds: start.elapsed().as_secs_f64(),
                threads: rayon::current_num_threads(),
                version: env!("CARGO_PKG_VERSION").into(),
            };
            let paths = write_reports(&report, &cfg, &runtime, &dir)?;
            for c in &report.checks {
                let status = if c.passed { "PASS" } else if c.hard { "FAIL" } else { "WARN" };
                writeln!(out, "{status} {}: {}", c.name, c.detail).map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(CommandOutcome::ok(
                format!("{} cells written to {}", report.cells.len(), dir.display()),
                paths,
            ))
        }
        Command::Report { dir } => {
            let paths = regenerate_plotdata(&dir)?;
            Ok(CommandOutcome::ok(
                format!("regenerated {} plot files in {}", paths.len(), dir.display()),
                paths,
            ))
        }
    }
}

/// Parses `args` (including the program name), runs the command, and
/// writes command output to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return CommandOutcome {
                exit_code: code,
                summary: text,
                paths: vec![],
            };
        }
    };
    let threads = cli.threads;
    let go = move || execute(cli, out);
    let result = match threads {
        Some(0) => Err(Error::param("threads", "must be ≥ 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(go),
            Err(e) => Err(Error::param("threads", e.to_string())),
        },
        None => go(),
    };
    match result {
        Ok(outcome) => {
            let _ = writeln!(err, "{}", outcome.summary);
            outcome
        }
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(err, "error: {e}");
            CommandOutcome {
                exit_code: code,
                summary: e.to_string(),
                paths: vec![],
            }
        }
    }
}
