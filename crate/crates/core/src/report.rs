//! Report bundle: JSON, CSV, JSON lines and gnuplot-ready plot data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::sweep::{Cell, Model, StabilityReport};

pub const REPORT_JSON: &str = "report.json";
pub const DISTANCES_CSV: &str = "distances.csv";
pub const BOUNDS_JSONL: &str = "bounds.jsonl";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const CONFIG_TEXT: &str = "config.ini";
pub const RUNTIME_JSON: &str = "runtime.json";
pub const PLOTDATA_DIR: &str = "plotdata";

/// Wall-clock facts kept apart from the reproducible files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Runtime {
    pub seconds: f64,
    pub threads: usize,
    pub version: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    seed: u64,
    version: &'a str,
    config: &'a str,
    files: Vec<String>,
}

/// The slice of `report.json` needed to rebuild plot data.
#[derive(Deserialize)]
struct ReportCells {
    cells: Vec<Cell>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One row per cell; floats use the shortest text that round-trips.
pub fn distances_csv(cells: &[Cell]) -> String {
    let mut s = String::from("alpha,kappa,sigma,kernel,model,same_class_mrd,mixed_mrd,panel,self_mrd\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.alpha,
            c.kappa,
            c.sigma,
            c.kernel,
            c.model.name(),
            c.same_class_mrd,
            c.mixed_mrd,
            c.panel,
            c.self_mrd
        );
    }
    s
}

/// Plot files keyed by name: one per `(panel, kernel)`, with the swept
/// value in the first column and one column per model and pool.
pub fn plotdata(cells: &[Cell]) -> Vec<(String, String)> {
    let mut groups: Vec<(String, String)> = Vec::new();
    for c in cells {
        let g = (c.panel.clone(), c.kernel.clone());
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let models = [Model::Equivariant, Model::Baseline];
    groups
        .into_iter()
        .map(|(panel, kernel)| {
            let x_of = |c: &Cell| match panel.as_str() {
                "kappa" => c.kappa,
                "sigma" => c.sigma,
                _ => c.alpha,
            };
            let axis = match panel.as_str() {
                "kappa" => "kappa",
                "sigma" => "sigma",
                _ => "alpha",
            };
            let sel: Vec<&Cell> = cells.iter().filter(|c| c.panel == panel && c.kernel == kernel).collect();
            let mut xs: Vec<f64> = sel.iter().map(|c| x_of(c)).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            let mut s = format!("# panel {panel}, kernel {kernel}\n# {axis}");
            for m in models {
                let _ = write!(s, " {0}_same_class {0}_mixed", m.name());
            }
            s.push('\n');
            for x in xs {
                let _ = write!(s, "{x}");
                for m in models {
                    match sel.iter().find(|c| c.model == m && x_of(c).to_bits() == x.to_bits()) {
                        Some(c) => {
                            let _ = write!(s, " {} {}", c.same_class_mrd, c.mixed_mrd);
                        }
                        None => s.push_str(" nan nan"),
                    }
                }
                s.push('\n');
            }
            let name = if panel == "rotated" {
                "rotated.csv".to_string()
            } else {
                format!("{panel}_{}.csv", file_stem(&kernel))
            };
            (name, s)
        })
        .collect()
}

fn write_plotdata(cells: &[Cell], dir: &Path) -> Result<Vec<PathBuf>> {
    let pd = dir.join(PLOTDATA_DIR);
    fs::create_dir_all(&pd).map_err(|e| Error::io(&pd, e))?;
    plotdata(cells)
        .into_iter()
        .map(|(name, text)| {
            let p = pd.join(name);
            write_file(&p, &text)?;
            Ok(p)
        })
        .collect()
}

/// Writes the full bundle into `dir` and returns the paths written.
pub fn write_reports(report: &StabilityReport, config: &RunConfig, runtime: &Runtime, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();

    let p = dir.join(REPORT_JSON);
    write_file(&p, &serde_json::to_string_pretty(report)?)?;
    paths.push(p);

    let p = dir.join(DISTANCES_CSV);
    write_file(&p, &distances_csv(&report.cells))?;
    paths.push(p);

    let mut lines = String::new();
    for b in &report.bounds {
        lines.push_str(&serde_json::to_string(b)?);
        lines.push('\n');
    }
    let p = dir.join(BOUNDS_JSONL);
    write_file(&p, &lines)?;
    paths.push(p);

    paths.extend(write_plotdata(&report.cells, dir)?);

    let p = dir.join(CONFIG_TEXT);
    let text = config.to_text();
    write_file(&p, &text)?;
    paths.push(p);

    let manifest = Manifest {
        config_hash: config.hash(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION"),
        config: CONFIG_TEXT,
        files: paths
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
            .collect(),
    };
    let p = dir.join(MANIFEST_JSON);
    write_file(&p, &serde_json::to_string_pretty(&manifest)?)?;
    paths.push(p);

    let p = dir.join(RUNTIME_JSON);
    write_file(&p, &serde_json::to_string_pretty(runtime)?)?;
    paths.push(p);
    Ok(paths)
}

/// Rebuilds `plotdata/` from `report.json` in `dir`.
pub fn regenerate_plotdata(dir: &Path) -> Result<Vec<PathBuf>> {
    let p = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let cells: ReportCells = serde_json::from_str(&text)?;
    write_plotdata(&cells.cells, dir)
}
