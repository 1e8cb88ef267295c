//! Run configuration: strict `key = value` sections.
//!
//! ```text
//! [run]       seed (required)
//! [group]     kind = se2 | s2; height, width, n_theta | n_beta, n_phi, scale
//! [network]   layers, sigma0, channels, kappa, sigma, kernel, epsilon,
//!             fit_patches, fit_images, fiber_offsets, fiber_pooling, readout
//! [layer.K]   kappa, sigma, channels, kernel (overrides for layer K, 1-based)
//! [sweep]     alphas, kappas, sigmas, kernels, panel_kernels, panel_alpha,
//!             include_zero_alpha, rotated, bound_triples, probes
//! [protocol]  refs_per_class, mixed_pool, tau_smoothness, tau_grad
//! [data]      source = synthetic | idx; n_per_class, images, labels,
//!             height, width, rotate, train
//! [output]    dir
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::ckn::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::group::GroupKind;
use crate::ini::{self, Section};
use crate::kernel::KernelSpec;
use crate::stability::Readout;

/// A kernel together with the text it was configured from.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelChoice {
    pub label: String,
    pub spec: KernelSpec,
}

impl KernelChoice {
    pub fn parse(label: &str) -> Result<Self> {
        Ok(KernelChoice {
            label: label.trim().to_string(),
            spec: KernelSpec::parse(label)?,
        })
    }

    /// The label with characters unsafe in file names replaced.
    pub fn file_stem(&self) -> String {
        self.label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect()
    }
}

impl std::str::FromStr for KernelChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        KernelChoice::parse(s).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroupConfig {
    Se2 { height: usize, width: usize, n_theta: usize },
    /// `scale` is the stereographic scale in pixels.
    S2 { n_beta: usize, n_phi: usize, scale: f64 },
}

impl GroupConfig {
    pub fn kind(&self) -> GroupKind {
        match *self {
            GroupConfig::Se2 {
                height,
                width,
                n_theta,
            } => GroupKind::Se2 {
                height,
                width,
                n_theta,
            },
            GroupConfig::S2 { n_beta, n_phi, .. } => GroupKind::S2 { n_beta, n_phi },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerOverride {
    pub kappa: Option<f64>,
    pub sigma: Option<f64>,
    pub channels: Option<usize>,
    pub kernel: Option<KernelChoice>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub layers: usize,
    pub sigma0: f64,
    pub channels: usize,
    pub kappa: f64,
    /// Last-layer pooling scale `σ_N`; earlier layers use `σ_N 2^{k−N}`.
    pub sigma: f64,
    pub kernel: KernelChoice,
    pub epsilon: f64,
    pub fit_patches: usize,
    pub fit_images: usize,
    pub fiber_offsets: bool,
    pub fiber_pooling: bool,
    pub readout: Readout,
    /// Keyed by 1-based layer index.
    pub overrides: BTreeMap<usize, LayerOverride>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub kappas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub kernels: Vec<KernelChoice>,
    /// Kernels used by the κ and σ panels.
    pub panel_kernels: Vec<KernelChoice>,
    /// Deformation scale at which the κ and σ panels are evaluated.
    pub panel_alpha: f64,
    pub include_zero_alpha: bool,
    pub rotated: bool,
    pub bound_triples: usize,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub refs_per_class: usize,
    pub mixed_pool: usize,
    /// Correlation length of generated deformations, in grid units.
    pub tau_smoothness: f64,
    /// `‖∇τ‖∞` of generated deformations before scaling by `α`.
    pub tau_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { n_per_class: usize },
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image size; defaults to the SE(2) grid, or 16×16 on S².
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub rotate: bool,
    /// Images reserved for fitting; the rest feed the protocol.
    pub train: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub group: GroupConfig,
    pub network: NetworkConfig,
    pub sweep: SweepConfig,
    pub protocol: ProtocolConfig,
    pub data: DataConfig,
    pub output: PathBuf,
}

/// Offsets for seeds derived from [`RunConfig::seed`].
pub mod seed_stream {
    pub const NETWORK: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PROTOCOL: u64 = 3;
    pub const SWEEP: u64 = 4;
    pub const VERIFY: u64 = 5;
}

fn f64_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn kernel_list(v: &[KernelChoice]) -> String {
    v.iter().map(|k| k.label.clone()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Image size used for planar data.
    pub fn image_dims(&self) -> (usize, usize) {
        match self.group {
            GroupConfig::Se2 { height, width, .. } => (height, width),
            GroupConfig::S2 { .. } => (self.data.height.unwrap_or(16), self.data.width.unwrap_or(16)),
        }
    }

    /// Layer specs for the configured network with per-layer overrides.
    pub fn network_spec(&self) -> NetworkSpec {
        let n = &self.network;
        self.spec_with(&n.kernel.spec, n.kappa, n.sigma, true)
    }

    /// Layer specs for a sweep cell: every layer uses `kernel` and `kappa`,
    /// and `σ_k = σ_N 2^{k−N}`.
    pub fn cell_spec(&self, kernel: &KernelSpec, kappa: f64, sigma_n: f64) -> NetworkSpec {
        self.spec_with(kernel, kappa, sigma_n, false)
    }

    fn spec_with(&self, kernel: &KernelSpec, kappa: f64, sigma_n: f64, overrides: bool) -> NetworkSpec {
        let n = &self.network;
        let mut layers = Vec::with_capacity(n.layers);
        let mut prev_sigma = if n.sigma0 > 0.0 { n.sigma0 } else { 1.0 };
        for k in 1..=n.layers {
            let o = overrides.then(|| n.overrides.get(&k)).flatten();
            let sigma = o
                .and_then(|o| o.sigma)
                .unwrap_or(sigma_n * 2f64.powi(k as i32 - n.layers as i32));
            let kern = o.and_then(|o| o.kernel.as_ref()).map_or(kernel, |k| &k.spec);
            let mut ls = LayerSpec::new(
                o.and_then(|o| o.kappa).unwrap_or(kappa),
                sigma,
                o.and_then(|o| o.channels).unwrap_or(n.channels),
                *kern,
            );
            ls.stride = (prev_sigma.floor() as usize).max(1);
            ls.cap_to_grid = true;
            ls.fiber_offsets = n.fiber_offsets;
            ls.fiber_pooling = n.fiber_pooling;
            layers.push(ls);
            prev_sigma = sigma;
        }
        NetworkSpec {
            sigma0: n.sigma0,
            layers,
            eps: n.epsilon,
            seed: crate::rng::derive_seed(self.seed, seed_stream::NETWORK),
            fit_patches: n.fit_patches,
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]\nseed = {}\n", self.seed);
        match self.group {
            GroupConfig::Se2 {
                height,
                width,
                n_theta,
            } => {
                let _ = writeln!(
                    s,
                    "[group]\nkind = se2\nheight = {height}\nwidth = {width}\nn_theta = {n_theta}\n"
                );
            }
            GroupConfig::S2 { n_beta, n_phi, scale } => {
                let _ = writeln!(
                    s,
                    "[group]\nkind = s2\nn_beta = {n_beta}\nn_phi = {n_phi}\nscale = {scale}\n"
                );
            }
        }
        let n = &self.network;
        let _ = writeln!(
            s,
            "[network]\nlayers = {}\nsigma0 = {}\nchannels = {}\nkappa = {}\nsigma = {}\nkernel = {}\n\
             epsilon = {}\nfit_patches = {}\nfit_images = {}\nfiber_offsets = {}\nfiber_pooling = {}\nreadout = {}\n",
            n.layers,
            n.sigma0,
            n.channels,
            n.kappa,
            n.sigma,
            n.kernel.label,
            n.epsilon,
            n.fit_patches,
            n.fit_images,
            n.fiber_offsets,
            n.fiber_pooling,
            n.readout
        );
        for (k, o) in &n.overrides {
            let _ = writeln!(s, "[layer.{k}]");
            if let Some(v) = o.kappa {
                let _ = writeln!(s, "kappa = {v}");
            }
            if let Some(v) = o.sigma {
                let _ = writeln!(s, "sigma = {v}");
            }
            if let Some(v) = o.channels {
                let _ = writeln!(s, "channels = {v}");
            }
            if let Some(v) = &o.kernel {
                let _ = writeln!(s, "kernel = {}", v.label);
            }
            s.push('\n');
        }
        let w = &self.sweep;
        let _ = writeln!(
            s,
            "[sweep]\nalphas = {}\nkappas = {}\nsigmas = {}\nkernels = {}\npanel_kernels = {}\npanel_alpha = {}\n\
             include_zero_alpha = {}\nrotated = {}\nbound_triples = {}\nprobes = {}\n",
            f64_list(&w.alphas),
            f64_list(&w.kappas),
            f64_list(&w.sigmas),
            kernel_list(&w.kernels),
            kernel_list(&w.panel_kernels),
            w.panel_alpha,
            w.include_zero_alpha,
            w.rotated,
            w.bound_triples,
            w.probes
        );
        let p = &self.protocol;
        let _ = writeln!(
            s,
            "[protocol]\nrefs_per_class = {}\nmixed_pool = {}\ntau_smoothness = {}\ntau_grad = {}\n",
            p.refs_per_class, p.mixed_pool, p.tau_smoothness, p.tau_grad
        );
        s.push_str("[data]\n");
        match &self.data.source {
            DataSource::Synthetic { n_per_class } => {
                let _ = writeln!(s, "source = synthetic\nn_per_class = {n_per_class}");
            }
            DataSource::Idx { images, labels } => {
                let _ = writeln!(
                    s,
                    "source = idx\nimages = {}\nlabels = {}",
                    images.display(),
                    labels.display()
                );
            }
        }
        if let Some(h) = self.data.height {
            let _ = writeln!(s, "height = {h}");
        }
        if let Some(w) = self.data.width {
            let _ = writeln!(s, "width = {w}");
        }
        let _ = writeln!(s, "rotate = {}\ntrain = {}\n", self.data.rotate, self.data.train);
        let _ = writeln!(s, "[output]\ndir = {}", self.output.display());
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

const GROUP_KEYS: &[&str] = &["kind", "height", "width", "n_theta", "n_beta", "n_phi", "scale"];
const NETWORK_KEYS: &[&str] = &[
    "layers",
    "sigma0",
    "channels",
    "kappa",
    "sigma",
    "kernel",
    "epsilon",
    "fit_patches",
    "fit_images",
    "fiber_offsets",
    "fiber_pooling",
    "readout",
];
const LAYER_KEYS: &[&str] = &["kappa", "sigma", "channels", "kernel"];
const SWEEP_KEYS: &[&str] = &[
    "alphas",
    "kappas",
    "sigmas",
    "kernels",
    "panel_kernels",
    "panel_alpha",
    "include_zero_alpha",
    "rotated",
    "bound_triples",
    "probes",
];
const PROTOCOL_KEYS: &[&str] = &["refs_per_class", "mixed_pool", "tau_smoothness", "tau_grad"];
const DATA_KEYS: &[&str] = &[
    "source",
    "n_per_class",
    "images",
    "labels",
    "height",
    "width",
    "rotate",
    "train",
];

fn bad(section: &Section, key: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config {
        line: section.get(key).map_or(section.line, |(_, l)| l),
        reason: format!("[{}] {key}: {reason}", section.name),
    }
}

fn positive(section: &Section, key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(section, key, format!("must be finite and > 0, got {v}")))
    }
}

fn non_empty<T>(section: &Section, key: &str, v: Vec<T>) -> Result<Vec<T>> {
    if v.is_empty() {
        Err(bad(section, key, "list must not be empty"))
    } else {
        Ok(v)
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let sections = ini::parse(text)?;
    let empty = Section::default();
    let mut by_name: BTreeMap<&str, &Section> = BTreeMap::new();
    let mut layers: BTreeMap<usize, &Section> = BTreeMap::new();
    for s in &sections {
        match s.name.as_str() {
            "" => {
                if let Some((k, _, _)) = s.entries.first() {
                    return Err(Error::UnknownKey {
                        section: String::new(),
                        key: k.clone(),
                    });
                }
            }
            "run" | "group" | "network" | "sweep" | "protocol" | "data" | "output" => {
                by_name.insert(s.name.as_str(), s);
            }
            name => match name.strip_prefix("layer.").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 => {
                    layers.insert(k, s);
                }
                _ => {
                    return Err(Error::Config {
                        line: s.line,
                        reason: format!("unknown section [{name}]"),
                    })
                }
            },
        }
    }
    let get = |name: &str| by_name.get(name).copied().unwrap_or(&empty);

    let run = get("run");
    run.check_keys(&["seed"])?;
    let seed: u64 = match by_name.get("run") {
        Some(r) => r.require("seed")?,
        None => {
            return Err(Error::MissingKey {
                section: "run".into(),
                key: "seed".into(),
            })
        }
    };

    let g = get("group");
    g.check_keys(GROUP_KEYS)?;
    let kind: String = g.parse("kind")?.unwrap_or_else(|| "se2".into());
    let group = match kind.as_str() {
        "se2" => {
            for k in ["n_beta", "n_phi", "scale"] {
                if g.get(k).is_some() {
                    return Err(bad(g, k, "not used by kind = se2"));
                }
            }
            let group = GroupConfig::Se2 {
                height: g.parse("height")?.unwrap_or(16),
                width: g.parse("width")?.unwrap_or(16),
                n_theta: g.parse("n_theta")?.unwrap_or(8),
            };
            if let GroupConfig::Se2 { height, width, n_theta } = group {
                if height == 0 || width == 0 || n_theta == 0 {
                    return Err(bad(g, "height", "grid dimensions must be ≥ 1"));
                }
            }
            group
        }
        "s2" => {
            for k in ["height", "width", "n_theta"] {
                if g.get(k).is_some() {
                    return Err(bad(g, k, "not used by kind = s2"));
                }
            }
            let n_beta: usize = g.parse("n_beta")?.unwrap_or(16);
            let n_phi: usize = g.parse("n_phi")?.unwrap_or(32);
            if n_beta < 2 || n_phi < 2 {
                return Err(bad(g, "n_beta", "S² grid needs n_beta, n_phi ≥ 2"));
            }
            let scale = positive(g, "scale", g.parse("scale")?.unwrap_or(8.0))?;
            GroupConfig::S2 { n_beta, n_phi, scale }
        }
        other => return Err(bad(g, "kind", format!("expected se2 or s2, got `{other}`"))),
    };

    let n = get("network");
    n.check_keys(NETWORK_KEYS)?;
    let kernel = n
        .parse::<KernelChoice>("kernel")?
        .unwrap_or_else(|| KernelChoice::parse("exponential").expect("valid"));
    let mut network = NetworkConfig {
        layers: n.parse("layers")?.unwrap_or(2),
        sigma0: n.parse("sigma0")?.unwrap_or(1.0),
        channels: n.parse("channels")?.unwrap_or(16),
        kappa: n.parse("kappa")?.unwrap_or(2.0),
        sigma: n.parse("sigma")?.unwrap_or(3.0),
        kernel,
        epsilon: n.parse("epsilon")?.unwrap_or(crate::nystrom::DEFAULT_EPS),
        fit_patches: n.parse("fit_patches")?.unwrap_or(1000),
        fit_images: n.parse("fit_images")?.unwrap_or(10),
        fiber_offsets: n.parse("fiber_offsets")?.unwrap_or(false),
        fiber_pooling: n.parse("fiber_pooling")?.unwrap_or(false),
        readout: n.parse("readout")?.unwrap_or_default(),
        overrides: BTreeMap::new(),
    };
    if network.layers == 0 {
        return Err(bad(n, "layers", "must be ≥ 1"));
    }
    if network.channels == 0 || network.fit_patches == 0 || network.fit_images == 0 {
        return Err(bad(n, "channels", "channels, fit_patches and fit_images must be ≥ 1"));
    }
    if !(network.sigma0 >= 0.0 && network.sigma0.is_finite()) {
        return Err(bad(n, "sigma0", "must be finite and ≥ 0"));
    }
    positive(n, "kappa", network.kappa)?;
    positive(n, "sigma", network.sigma)?;
    positive(n, "epsilon", network.epsilon)?;
    for (k, s) in layers {
        s.check_keys(LAYER_KEYS)?;
        if k > network.layers {
            return Err(Error::Config {
                line: s.line,
                reason: format!("[layer.{k}] but the network has {} layers", network.layers),
            });
        }
        network.overrides.insert(
            k,
            LayerOverride {
                kappa: s.parse("kappa")?,
                sigma: s.parse("sigma")?,
                channels: s.parse("channels")?,
                kernel: s.parse("kernel")?,
            },
        );
    }

    let w = get("sweep");
    w.check_keys(SWEEP_KEYS)?;
    let sweep = SweepConfig {
        alphas: non_empty(w, "alphas", w.parse_list("alphas")?.unwrap_or(vec![0.1, 0.5, 1.0, 2.5, 5.0]))?,
        kappas: non_empty(w, "kappas", w.parse_list("kappas")?.unwrap_or(vec![2.0, 5.0, 8.0, 10.0]))?,
        sigmas: non_empty(w, "sigmas", w.parse_list("sigmas")?.unwrap_or(vec![1.0, 3.0, 5.0, 10.0]))?,
        kernels: non_empty(
            w,
            "kernels",
            match w.parse_list("kernels")? {
                Some(v) => v,
                None => ["exponential", "arccos1", "rbf:5", "rbf:10"]
                    .iter()
                    .map(|s| KernelChoice::parse(s))
                    .collect::<Result<_>>()?,
            },
        )?,
        panel_kernels: non_empty(
            w,
            "panel_kernels",
            match w.parse_list("panel_kernels")? {
                Some(v) => v,
                None => ["rbf:5", "rbf:10"]
                    .iter()
                    .map(|s| KernelChoice::parse(s))
                    .collect::<Result<_>>()?,
            },
        )?,
        panel_alpha: w.parse("panel_alpha")?.unwrap_or(1.0),
        include_zero_alpha: w.parse("include_zero_alpha")?.unwrap_or(true),
        rotated: w.parse("rotated")?.unwrap_or(true),
        bound_triples: w.parse("bound_triples")?.unwrap_or(20),
        probes: w.parse("probes")?.unwrap_or(100),
    };
    for (key, list) in [("alphas", &sweep.alphas), ("kappas", &sweep.kappas), ("sigmas", &sweep.sigmas)] {
        let min = if key == "alphas" { 0.0 } else { f64::MIN_POSITIVE };
        if let Some(v) = list.iter().find(|v| !(**v >= min && v.is_finite())) {
            return Err(bad(w, key, format!("invalid axis value {v}")));
        }
    }
    if !(sweep.panel_alpha >= 0.0 && sweep.panel_alpha.is_finite()) {
        return Err(bad(w, "panel_alpha", "must be finite and ≥ 0"));
    }

    let p = get("protocol");
    p.check_keys(PROTOCOL_KEYS)?;
    let protocol = ProtocolConfig {
        refs_per_class: p.parse("refs_per_class")?.unwrap_or(4),
        mixed_pool: p.parse("mixed_pool")?.unwrap_or(50),
        tau_smoothness: positive(p, "tau_smoothness", p.parse("tau_smoothness")?.unwrap_or(2.0))?,
        tau_grad: p.parse("tau_grad")?.unwrap_or(0.1),
    };
    if !(protocol.tau_grad > 0.0 && protocol.tau_grad <= 0.5) {
        return Err(bad(p, "tau_grad", "must lie in (0, 0.5]"));
    }
    if protocol.refs_per_class == 0 || protocol.mixed_pool == 0 {
        return Err(bad(p, "refs_per_class", "refs_per_class and mixed_pool must be ≥ 1"));
    }

    let d = get("data");
    d.check_keys(DATA_KEYS)?;
    let source: String = d.parse("source")?.unwrap_or_else(|| "synthetic".into());
    let source = match source.as_str() {
        "synthetic" => {
            for k in ["images", "labels"] {
                if d.get(k).is_some() {
                    return Err(bad(d, k, "not used by source = synthetic"));
                }
            }
            DataSource::Synthetic {
                n_per_class: d.parse("n_per_class")?.unwrap_or(8),
            }
        }
        "idx" => {
            if d.get("n_per_class").is_some() {
                return Err(bad(d, "n_per_class", "not used by source = idx"));
            }
            DataSource::Idx {
                images: d.require::<PathBuf>("images")?,
                labels: d.require::<PathBuf>("labels")?,
            }
        }
        other => return Err(bad(d, "source", format!("expected synthetic or idx, got `{other}`"))),
    };
    let data = DataConfig {
        source,
        height: d.parse("height")?,
        width: d.parse("width")?,
        rotate: d.parse("rotate")?.unwrap_or(false),
        train: d.parse("train")?.unwrap_or(20),
    };

    let o = get("output");
    o.check_keys(&["dir"])?;
    let output = o.parse::<PathBuf>("dir")?.unwrap_or_else(|| PathBuf::from("eqckn-out"));

    Ok(RunConfig {
        seed,
        group,
        network,
        sweep,
        protocol,
        data,
        output,
    })
}
