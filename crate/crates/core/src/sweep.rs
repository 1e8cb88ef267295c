//! The stability protocol: reference and deformed sets, and the grid sweep
//! over deformation scale, patch size, pooling scale and kernel.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::sync::Arc;

use rand::seq::index::sample;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckn::{fit_network, Network};
use crate::config::{seed_stream, GroupConfig, KernelChoice, RunConfig};
use crate::data::{rotate_image, Dataset};
use crate::deformation::{apply_deformation, generate_tau, BaseGrid, DeformationField};
use crate::error::{Error, Result};
use crate::group::{build_group, DiscretizedGroup, GroupElement, GroupKind, So3};
use crate::kernel::{certify_nonexpansive, CertReport};
use crate::rng::{derive_seed, rng_from};
use crate::signal::{lift, stereographic_project, BaseImage, FeatureMap};
use crate::stability::{
    readout_vector, relative_distance_mean, verify_global_invariance, verify_stability_telescoping,
    BoundCheck, Readout,
};

/// Parameters of the generated deformation fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauParams {
    pub smoothness: f64,
    pub grad: f64,
}

#[derive(Clone, Debug)]
pub struct Reference {
    pub image: BaseImage,
    pub label: u8,
    /// Index into the protocol dataset.
    pub source_index: usize,
    pub tau: DeformationField,
}

/// References, their deformed copies and the comparison pools. Pool members
/// are `(reference, alpha index)` pairs.
#[derive(Clone, Debug)]
pub struct ProtocolSets {
    pub references: Vec<Reference>,
    pub alphas: Vec<f64>,
    /// `deformed[r][a]` is reference `r` deformed at `alphas[a]`.
    pub deformed: Vec<Vec<BaseImage>>,
    pub same_class: Vec<Vec<(usize, usize)>>,
    pub mixed: Vec<Vec<(usize, usize)>>,
    pub seed: u64,
    pub mixed_seeds: Vec<u64>,
}

const TAU_STREAM: u64 = 0x7A0;
const MIXED_STREAM: u64 = 0x313;
const ROTATION_STREAM: u64 = 0x207;

/// `L_{ατ}` applied to a planar image, resampled periodically and clamped
/// back into `[0, 1]`.
pub fn deform_image(img: &BaseImage, tau: &DeformationField, alpha: f64) -> Result<BaseImage> {
    if alpha == 0.0 {
        return Ok(img.clone());
    }
    let group = Arc::new(build_group(GroupKind::Se2 {
        height: img.height(),
        width: img.width(),
        n_theta: 1,
    })?);
    apply_deformation(&lift(img, &group)?, tau, alpha)?.to_image()
}

impl ProtocolSets {
    pub fn n_references(&self) -> usize {
        self.references.len()
    }

    pub fn n_deformed(&self) -> usize {
        self.deformed.iter().map(Vec::len).sum()
    }

    /// Reference `r` deformed at an arbitrary `alpha`, reusing stored copies.
    pub fn image_at(&self, r: usize, alpha: f64) -> Result<BaseImage> {
        if let Some(a) = self.alphas.iter().position(|&x| x.to_bits() == alpha.to_bits()) {
            return Ok(self.deformed[r][a].clone());
        }
        let refr = &self.references[r];
        deform_image(&refr.image, &refr.tau, alpha)
    }
}

/// Draws `refs_per_class` references per class `0..10` without replacement,
/// one deformation per reference, and the same-class and mixed pools.
pub fn build_protocol_sets(
    dataset: &Dataset,
    alphas: &[f64],
    tau: TauParams,
    refs_per_class: usize,
    mixed_pool: usize,
    seed: u64,
) -> Result<ProtocolSets> {
    if alphas.is_empty() {
        return Err(Error::param("alphas", "need at least one deformation scale"));
    }
    if refs_per_class == 0 {
        return Err(Error::param("refs_per_class", "must be ≥ 1"));
    }
    let counts = dataset.class_counts();
    if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n < refs_per_class) {
        return Err(Error::InsufficientData(format!(
            "class {c} has {n} images, the protocol needs {refs_per_class} per class for 10 classes"
        )));
    }
    let first = &dataset.images[0];
    let grid = BaseGrid::Plane {
        height: first.height(),
        width: first.width(),
    };
    let mut references = Vec::with_capacity(10 * refs_per_class);
    for class in 0..10u8 {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        let mut rng = rng_from(derive_seed(seed, class as u64));
        let mut picks = sample(&mut rng, members.len(), refs_per_class).into_vec();
        picks.sort_unstable();
        for p in picks {
            let idx = members[p];
            let r = references.len() as u64;
            let tau_seed = derive_seed(derive_seed(seed, TAU_STREAM), r);
            references.push(Reference {
                image: dataset.images[idx].clone(),
                label: class,
                source_index: idx,
                tau: generate_tau(grid, tau.smoothness, tau.grad, tau_seed)?,
            });
        }
    }
    let deformed = references
        .par_iter()
        .map(|r| alphas.iter().map(|&a| deform_image(&r.image, &r.tau, a)).collect())
        .collect::<Result<Vec<Vec<BaseImage>>>>()?;

    let n_alpha = alphas.len();
    let total = references.len() * n_alpha;
    if mixed_pool > total {
        return Err(Error::InsufficientData(format!(
            "mixed pool of {mixed_pool} exceeds the {total} deformed images"
        )));
    }
    let same_class = references
        .iter()
        .map(|r| {
            references
                .iter()
                .enumerate()
                .filter(|(_, o)| o.label == r.label)
                .flat_map(|(j, _)| (0..n_alpha).map(move |a| (j, a)))
                .collect()
        })
        .collect();
    let mixed_seeds: Vec<u64> = (0..references.len())
        .map(|r| derive_seed(derive_seed(seed, MIXED_STREAM), r as u64))
        .collect();
    let mixed = mixed_seeds
        .iter()
        .map(|&s| {
            let mut picks = sample(&mut rng_from(s), total, mixed_pool).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| (i / n_alpha, i % n_alpha)).collect()
        })
        .collect();
    Ok(ProtocolSets {
        references,
        alphas: alphas.to_vec(),
        deformed,
        same_class,
        mixed,
        seed,
        mixed_seeds,
    })
}

/// Which network a representation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// The network on the configured group.
    Equivariant,
    /// The same architecture on the translation-only grid (`n_theta = 1`).
    Baseline,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Equivariant => "equivariant",
            Model::Baseline => "baseline",
        }
    }
}

/// One row of the sweep output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub panel: String,
    pub model: Model,
    pub kernel: String,
    pub alpha: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub same_class_mrd: f64,
    pub mixed_mrd: f64,
    /// Distance to the reference's own deformed copy only.
    pub self_mrd: f64,
    pub flags: Vec<String>,
    /// Seed the cell's network was fitted with.
    pub seed: u64,
}

/// Per-reference same-class distances along the α axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSeries {
    pub model: Model,
    pub kernel: String,
    pub reference: usize,
    pub label: u8,
    pub alphas: Vec<f64>,
    pub same_class: Vec<f64>,
    pub non_decreasing: bool,
    /// Distance to the reference's own deformation at each α.
    pub own: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceRecord {
    pub model: Model,
    pub element: String,
    pub lattice_exact: bool,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub model: Model,
    pub operator: String,
    pub n_probes: usize,
    pub max_ratio: f64,
}

/// A named pass/fail trend check with the numbers behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub passed: bool,
    /// Hard checks gate the `verify`-style exit status; soft ones are reported.
    pub hard: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axes {
    pub alphas: Vec<f64>,
    pub kappas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub kernels: Vec<String>,
    pub panel_kernels: Vec<String>,
    pub panel_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub n_references: usize,
    pub n_deformed: usize,
    pub same_class_pool: usize,
    pub mixed_pool: usize,
    pub reference_indices: Vec<usize>,
    pub labels: Vec<u8>,
    pub tau_seeds: Vec<u64>,
    pub mixed_seeds: Vec<u64>,
    pub dataset: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub config_hash: String,
    pub seed: u64,
    pub group: String,
    pub readout: Readout,
    pub axes: Axes,
    pub protocol: ProtocolSummary,
    pub cells: Vec<Cell>,
    pub series: Vec<ReferenceSeries>,
    pub equivariance: Vec<EquivarianceRecord>,
    pub probes: Vec<ProbeRecord>,
    pub bounds: Vec<BoundCheck>,
    pub certification: Vec<CertReport>,
    pub checks: Vec<CheckSummary>,
}

impl StabilityReport {
    pub fn check(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Orders images so classes alternate, then splits off the first `train`
/// for fitting; the rest feed the protocol.
pub fn split_for_protocol(dataset: &Dataset, train: usize) -> (Dataset, Dataset) {
    let mut rank = [0usize; 256];
    let mut order: Vec<(usize, u8, usize)> = dataset
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let r = rank[l as usize];
            rank[l as usize] += 1;
            (r, l, i)
        })
        .collect();
    order.sort_unstable();
    let interleaved = Dataset {
        images: order.iter().map(|&(_, _, i)| dataset.images[i].clone()).collect(),
        labels: order.iter().map(|&(_, l, _)| l).collect(),
        provenance: dataset.provenance.clone(),
        split: dataset.split.clone(),
    };
    interleaved.split_at(train)
}

/// Loads or generates the configured dataset at the grid's image size.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data_seed = derive_seed(cfg.seed, seed_stream::DATA);
    let (h, w) = cfg.image_dims();
    let mut ds = match &cfg.data.source {
        crate::config::DataSource::Synthetic { n_per_class } => {
            crate::data::make_synthetic(*n_per_class, h, w, data_seed)?
        }
        crate::config::DataSource::Idx { images, labels } => crate::data::load_idx(images, labels)?,
    };
    if ds.images.iter().any(|im| (im.height(), im.width()) != (h, w)) {
        ds = ds.resized(h, w)?;
    }
    if cfg.data.rotate {
        ds = crate::data::make_rotated(&ds, derive_seed(data_seed, 1))?;
    }
    Ok(ds)
}

/// Feature map of a planar image as seen by `model`.
fn model_input(cfg: &RunConfig, group: &Arc<DiscretizedGroup>, model: Model, img: &BaseImage) -> Result<FeatureMap> {
    match (cfg.group, model) {
        (GroupConfig::S2 { scale, .. }, Model::Equivariant) => stereographic_project(img, group, scale),
        _ => lift(img, group),
    }
}

fn model_group(cfg: &RunConfig, model: Model) -> Result<Arc<DiscretizedGroup>> {
    let kind = match model {
        Model::Equivariant => cfg.group.kind(),
        Model::Baseline => {
            let (height, width) = cfg.image_dims();
            GroupKind::Se2 {
                height,
                width,
                n_theta: 1,
            }
        }
    };
    Ok(Arc::new(build_group(kind)?))
}

/// Fits the configured network for `model` on the first `fit_images` images.
pub fn fit_model(
    cfg: &RunConfig,
    model: Model,
    kernel: &KernelChoice,
    kappa: f64,
    sigma_n: f64,
    seed: u64,
    fit_set: &Dataset,
) -> Result<Network> {
    let group = model_group(cfg, model)?;
    let n = cfg.network.fit_images.min(fit_set.len());
    if n == 0 {
        return Err(Error::InsufficientData("no images available for fitting".into()));
    }
    let maps = fit_set.images[..n]
        .iter()
        .map(|im| model_input(cfg, &group, model, im))
        .collect::<Result<Vec<_>>>()?;
    let mut spec = cfg.cell_spec(&kernel.spec, kappa, sigma_n);
    spec.seed = seed;
    fit_network(&group, &maps, &spec)
}

#[derive(Clone, Debug)]
struct NetKey {
    kernel: KernelChoice,
    kappa: f64,
    sigma: f64,
    model: Model,
}

impl NetKey {
    fn same(&self, other: &NetKey) -> bool {
        self.kernel.label == other.kernel.label
            && self.kappa.to_bits() == other.kappa.to_bits()
            && self.sigma.to_bits() == other.sigma.to_bits()
            && self.model == other.model
    }
}

#[derive(Clone, Debug)]
struct CellPlan {
    panel: &'static str,
    key: usize,
    alpha: f64,
    rotated: bool,
}

/// Representations of one network: references plus every requested slice.
struct NetReps {
    seed: u64,
    flags: Vec<String>,
    refs: Vec<Vec<f64>>,
    /// `(alpha bits, rotated)` to per-reference representations.
    slices: BTreeMap<(u64, bool), Vec<Vec<f64>>>,
}

fn network_flags(net: &Network) -> Vec<String> {
    let mut flags = Vec::new();
    for k in 0..net.n_layers() {
        let p = &net.layer(k).patch;
        if p.is_capped() {
            flags.push(format!("layer{}_patch_capped", k + 1));
        }
        if p.is_degenerate() {
            flags.push(format!("layer{}_patch_degenerate", k + 1));
        }
    }
    flags
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    relative_distance_mean(b, &[a]).unwrap_or(f64::NAN)
}

/// Runs the full protocol for `config` on `dataset` with master seed `seed`.
pub fn run_stability_sweep(config: &RunConfig, dataset: &Dataset, seed: u64) -> Result<StabilityReport> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let cfg = &cfg;
    let sw = &cfg.sweep;
    let (fit_set, protocol_set) = split_for_protocol(dataset, cfg.data.train);
    if fit_set.is_empty() {
        return Err(Error::InsufficientData("the fitting split is empty; raise [data] train".into()));
    }
    let mut axis_alphas = sw.alphas.clone();
    if sw.include_zero_alpha && !axis_alphas.contains(&0.0) {
        axis_alphas.insert(0, 0.0);
    }
    let sets = build_protocol_sets(
        &protocol_set,
        &sw.alphas,
        TauParams {
            smoothness: cfg.protocol.tau_smoothness,
            grad: cfg.protocol.tau_grad,
        },
        cfg.protocol.refs_per_class,
        cfg.protocol.mixed_pool,
        derive_seed(seed, seed_stream::PROTOCOL),
    )?;
    let n_refs = sets.n_references();

    // Network grid.
    let net_cfg = &cfg.network;
    let mut keys: Vec<NetKey> = Vec::new();
    let mut plans: Vec<CellPlan> = Vec::new();
    let key_of = |keys: &mut Vec<NetKey>, k: NetKey| -> usize {
        match keys.iter().position(|x| x.same(&k)) {
            Some(i) => i,
            None => {
                keys.push(k);
                keys.len() - 1
            }
        }
    };
    let models = [Model::Equivariant, Model::Baseline];
    for kernel in &sw.kernels {
        for model in models {
            let key = key_of(
                &mut keys,
                NetKey {
                    kernel: kernel.clone(),
                    kappa: net_cfg.kappa,
                    sigma: net_cfg.sigma,
                    model,
                },
            );
            for &alpha in &axis_alphas {
                plans.push(CellPlan {
                    panel: "alpha",
                    key,
                    alpha,
                    rotated: false,
                });
            }
        }
    }
    for kernel in &sw.panel_kernels {
        for model in models {
            for &kappa in &sw.kappas {
                let key = key_of(
                    &mut keys,
                    NetKey {
                        kernel: kernel.clone(),
                        kappa,
                        sigma: net_cfg.sigma,
                        model,
                    },
                );
                plans.push(CellPlan {
                    panel: "kappa",
                    key,
                    alpha: sw.panel_alpha,
                    rotated: false,
                });
            }
            for &sigma in &sw.sigmas {
                let key = key_of(
                    &mut keys,
                    NetKey {
                        kernel: kernel.clone(),
                        kappa: net_cfg.kappa,
                        sigma,
                        model,
                    },
                );
                plans.push(CellPlan {
                    panel: "sigma",
                    key,
                    alpha: sw.panel_alpha,
                    rotated: false,
                });
            }
        }
    }
    if sw.rotated {
        for model in models {
            let key = key_of(
                &mut keys,
                NetKey {
                    kernel: net_cfg.kernel.clone(),
                    kappa: net_cfg.kappa,
                    sigma: net_cfg.sigma,
                    model,
                },
            );
            for &alpha in &sw.alphas {
                plans.push(CellPlan {
                    panel: "rotated",
                    key,
                    alpha,
                    rotated: true,
                });
            }
        }
    }

    // Images for every slice, shared by all networks.
    let mut slice_keys: Vec<(u64, bool)> = plans.iter().map(|p| (p.alpha.to_bits(), p.rotated)).collect();
    slice_keys.sort_unstable();
    slice_keys.dedup();
    let rot_seed = derive_seed(seed, ROTATION_STREAM);
    let angle = Uniform::new(0.0, TAU).expect("valid range");
    let images: BTreeMap<(u64, bool), Vec<BaseImage>> = slice_keys
        .par_iter()
        .map(|&(bits, rotated)| {
            let alpha = f64::from_bits(bits);
            let imgs = (0..n_refs)
                .map(|r| {
                    let img = sets.image_at(r, alpha)?;
                    if rotated {
                        let s = derive_seed(derive_seed(rot_seed, r as u64), bits);
                        rotate_image(&img, angle.sample(&mut rng_from(s)))
                    } else {
                        Ok(img)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(((bits, rotated), imgs))
        })
        .collect::<Result<_>>()?;

    // Fit each network and represent everything it needs.
    let net_seed = derive_seed(seed, seed_stream::NETWORK);
    let reps: Vec<NetReps> = keys
        .par_iter()
        .enumerate()
        .map(|(i, key)| -> Result<NetReps> {
            let s = derive_seed(net_seed, i as u64);
            let net = fit_model(cfg, key.model, &key.kernel, key.kappa, key.sigma, s, &fit_set)?;
            let group = net.group().clone();
            let rep = |img: &BaseImage| -> Result<Vec<f64>> {
                let x = model_input(cfg, &group, key.model, img)?;
                Ok(readout_vector(&net.forward(&x)?, net_cfg.readout))
            };
            let refs = sets
                .references
                .iter()
                .map(|r| rep(&r.image))
                .collect::<Result<Vec<_>>>()?;
            let mut slices = BTreeMap::new();
            for p in plans.iter().filter(|p| p.key == i) {
                let sk = (p.alpha.to_bits(), p.rotated);
                if slices.contains_key(&sk) {
                    continue;
                }
                let v = if p.alpha == 0.0 && !p.rotated {
                    refs.clone()
                } else {
                    images[&sk].iter().map(&rep).collect::<Result<Vec<_>>>()?
                };
                slices.insert(sk, v);
            }
            Ok(NetReps {
                seed: s,
                flags: network_flags(&net),
                refs,
                slices,
            })
        })
        .collect::<Result<_>>()?;

    for r in reps.iter().flat_map(|r| &r.refs) {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateReference { norm });
        }
    }

    // Per-reference relative distances for each plan.
    let per_ref = |p: &CellPlan| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let nr = &reps[p.key];
        let slice = &nr.slices[&(p.alpha.to_bits(), p.rotated)];
        let mut same = Vec::with_capacity(n_refs);
        let mut mixed = Vec::with_capacity(n_refs);
        let mut own = Vec::with_capacity(n_refs);
        for r in 0..n_refs {
            let base = &nr.refs[r];
            let s: Vec<f64> = sets.same_class[r].iter().map(|&(j, _)| rel(&slice[j], base)).collect();
            let m: Vec<f64> = sets.mixed[r].iter().map(|&(j, _)| rel(&slice[j], base)).collect();
            same.push(mean(&s));
            mixed.push(mean(&m));
            own.push(rel(&slice[r], base));
        }
        (same, mixed, own)
    };

    let mut cells = Vec::with_capacity(plans.len());
    let mut same_by_plan = Vec::with_capacity(plans.len());
    let mut own_by_plan = Vec::with_capacity(plans.len());
    for p in &plans {
        let key = &keys[p.key];
        let (same, mixed, own) = per_ref(p);
        let mut flags = reps[p.key].flags.clone();
        if !crate::deformation::within_invertibility_limit(p.alpha, cfg.protocol.tau_grad) {
            flags.push("inadmissible_deformation".into());
        }
        if p.rotated {
            flags.push("rotation_augmented".into());
        }
        cells.push(Cell {
            panel: p.panel.into(),
            model: key.model,
            kernel: key.kernel.label.clone(),
            alpha: p.alpha,
            kappa: key.kappa,
            sigma: key.sigma,
            same_class_mrd: mean(&same),
            mixed_mrd: mean(&mixed),
            self_mrd: mean(&own),
            flags,
            seed: reps[p.key].seed,
        });
        same_by_plan.push(same);
        own_by_plan.push(own);
    }

    // Per-reference α series on the α panel.
    let mut series = Vec::new();
    for kernel in &sw.kernels {
        for model in models {
            let idx: Vec<usize> = plans
                .iter()
                .enumerate()
                .filter(|(i, p)| {
                    p.panel == "alpha"
                        && cells[*i].model == model
                        && cells[*i].kernel == kernel.label
                        && sw.alphas.iter().any(|a| a.to_bits() == p.alpha.to_bits())
                })
                .map(|(i, _)| i)
                .collect();
            let mut order = idx.clone();
            order.sort_by(|&a, &b| plans[a].alpha.total_cmp(&plans[b].alpha));
            for r in 0..n_refs {
                let vals: Vec<f64> = order.iter().map(|&i| same_by_plan[i][r]).collect();
                series.push(ReferenceSeries {
                    model,
                    kernel: kernel.label.clone(),
                    reference: r,
                    label: sets.references[r].label,
                    alphas: order.iter().map(|&i| plans[i].alpha).collect(),
                    non_decreasing: vals.windows(2).all(|w| w[1] >= w[0]),
                    same_class: vals,
                    own: order.iter().map(|&i| own_by_plan[i][r]).collect(),
                });
            }
        }
    }

    // Diagnostics on the configured equivariant network.
    let base_net = fit_model(
        cfg,
        Model::Equivariant,
        &net_cfg.kernel,
        net_cfg.kappa,
        net_cfg.sigma,
        derive_seed(net_seed, u64::MAX),
        &fit_set,
    )?;
    let base_group = base_net.group().clone();
    let input = |r: usize| model_input(cfg, &base_group, Model::Equivariant, &sets.references[r].image);
    let equivariance = equivariance_records(&base_net, &input(0)?)?;
    let probes = schur_probe_records(&base_net, sw.probes, derive_seed(seed, seed_stream::SWEEP))?;
    let bounds = bound_checks(cfg, &base_net, &sets, &input)?;

    let mut cert_kernels: Vec<&KernelChoice> = Vec::new();
    for k in sw.kernels.iter().chain(&sw.panel_kernels).chain(std::iter::once(&net_cfg.kernel)) {
        if !cert_kernels.iter().any(|c| c.label == k.label) {
            cert_kernels.push(k);
        }
    }
    let certification = cert_kernels
        .iter()
        .enumerate()
        .map(|(i, k)| certify_nonexpansive(&k.spec, 10_000, derive_seed(seed, 0xCE27 + i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let checks = trend_checks(cfg, &cells, &series, &bounds, &equivariance, &probes);

    Ok(StabilityReport {
        config_hash: cfg.hash(),
        seed,
        group: format!("{:?}", cfg.group.kind()),
        readout: net_cfg.readout,
        axes: Axes {
            alphas: axis_alphas,
            kappas: sw.kappas.clone(),
            sigmas: sw.sigmas.clone(),
            kernels: sw.kernels.iter().map(|k| k.label.clone()).collect(),
            panel_kernels: sw.panel_kernels.iter().map(|k| k.label.clone()).collect(),
            panel_alpha: sw.panel_alpha,
        },
        protocol: ProtocolSummary {
            n_references: n_refs,
            n_deformed: sets.n_deformed(),
            same_class_pool: sets.same_class.first().map_or(0, Vec::len),
            mixed_pool: sets.mixed.first().map_or(0, Vec::len),
            reference_indices: sets.references.iter().map(|r| r.source_index).collect(),
            labels: sets.references.iter().map(|r| r.label).collect(),
            tau_seeds: sets.references.iter().map(|r| r.tau.seed()).collect(),
            mixed_seeds: sets.mixed_seeds.clone(),
            dataset: format!("{} [{}]", protocol_set.provenance, protocol_set.split),
        },
        cells,
        series,
        equivariance,
        probes,
        bounds,
        certification,
        checks,
    })
}

/// Lattice-exact and off-lattice group elements for `group`, labelled.
pub fn test_elements(group: &DiscretizedGroup) -> Vec<(String, GroupElement, bool)> {
    match group.kind() {
        GroupKind::Se2 {
            height,
            width,
            n_theta,
        } => {
            let mut out = vec![("translate(3,-2)".to_string(), GroupElement::se2(3.0, -2.0, 0.0), true)];
            if height == width {
                for k in 1..n_theta {
                    let theta = TAU * k as f64 / n_theta as f64;
                    let exact = (theta / FRAC_PI_2 - (theta / FRAC_PI_2).round()).abs() < 1e-12;
                    if exact {
                        out.push((format!("rotate({k}/{n_theta} turn)"), GroupElement::se2(1.0, 2.0, theta), true));
                    }
                }
            }
            if n_theta > 1 {
                // About the grid center: rotating about a corner tears the
                // torus and swamps the discretization error.
                let theta = TAU / n_theta as f64;
                let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
                let (s, c) = theta.sin_cos();
                out.push((
                    "rotate(1 fiber step, center)+shift(0.5,0.25)".to_string(),
                    GroupElement::se2(cx - (c * cx - s * cy) + 0.5, cy - (s * cx + c * cy) + 0.25, theta),
                    false,
                ));
            }
            out
        }
        GroupKind::S2 { n_phi, .. } => vec![
            (
                "rot_z(1 phi step)".to_string(),
                GroupElement::So3(So3::rot_z(TAU / n_phi as f64)),
                true,
            ),
            (
                "rot_y(0.3)".to_string(),
                GroupElement::So3(So3::rot_y(0.3)),
                false,
            ),
        ],
        GroupKind::So3 { .. } => Vec::new(),
    }
}

pub fn equivariance_records(net: &Network, x: &FeatureMap) -> Result<Vec<EquivarianceRecord>> {
    test_elements(net.group())
        .into_iter()
        .map(|(name, g, exact)| {
            Ok(EquivarianceRecord {
                model: Model::Equivariant,
                element: name,
                lattice_exact: exact,
                relative_error: crate::ckn::verify_equivariance(net, x, &g)?,
            })
        })
        .collect()
}

/// `max ‖A_k x‖ / ‖x‖` over band-limited unit probes, per pooling layer.
pub fn schur_probe_records(net: &Network, n_probes: usize, seed: u64) -> Result<Vec<ProbeRecord>> {
    if n_probes == 0 {
        return Ok(Vec::new());
    }
    (0..net.n_layers())
        .map(|k| {
            let op = |x: &FeatureMap| net.pool_layer(k, x);
            let channels = net.layer(k).embedding.p();
            Ok(ProbeRecord {
                model: Model::Equivariant,
                operator: format!("A{}", k + 1),
                n_probes,
                max_ratio: crate::deformation::probe_norm(&op, net.group(), channels, n_probes, derive_seed(seed, k as u64))?,
            })
        })
        .collect()
}

fn bound_checks(
    cfg: &RunConfig,
    net: &Network,
    sets: &ProtocolSets,
    input: &(dyn Fn(usize) -> Result<FeatureMap> + Sync),
) -> Result<Vec<BoundCheck>> {
    let n = cfg.sweep.bound_triples;
    let elements: Vec<GroupElement> = test_elements(net.group())
        .into_iter()
        .filter(|(_, _, exact)| *exact)
        .map(|(_, g, _)| g)
        .collect();
    let grid = BaseGrid::of_group(net.group())?;
    let planar = matches!(grid, BaseGrid::Plane { .. });
    let per_triple: Vec<Vec<BoundCheck>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<BoundCheck>> {
            let r = (i * 7) % sets.n_references();
            let alpha = sets.alphas[i % sets.alphas.len()];
            let x = input(r)?;
            // Fields live on the planar image grid; S² networks draw their own.
            let tau = if planar {
                sets.references[r].tau.clone()
            } else {
                generate_tau(grid, cfg.protocol.tau_smoothness * net.group().grid_step(), cfg.protocol.tau_grad, sets.references[r].tau.seed())?
            };
            let t = verify_stability_telescoping(net, &x, &tau, alpha)?.with_label(format!("triple {i}: ref {r}"));
            let mut out = vec![t];
            if let Some(g) = elements.get(i % elements.len().max(1)) {
                out.push(verify_global_invariance(net, &x, g, &tau, alpha)?.with_label(format!("triple {i}: ref {r}")));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_triple.into_iter().flatten().collect())
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn trend_checks(
    cfg: &RunConfig,
    cells: &[Cell],
    series: &[ReferenceSeries],
    bounds: &[BoundCheck],
    equivariance: &[EquivarianceRecord],
    probes: &[ProbeRecord],
) -> Vec<CheckSummary> {
    let sw = &cfg.sweep;
    let mut out = Vec::new();
    for kernel in &sw.kernels {
        let s: Vec<&ReferenceSeries> = series
            .iter()
            .filter(|s| s.model == Model::Equivariant && s.kernel == kernel.label)
            .collect();
        if s.is_empty() {
            continue;
        }
        let frac = s.iter().filter(|s| s.non_decreasing).count() as f64 / s.len() as f64;
        out.push(CheckSummary {
            name: format!("alpha_monotone[{}]", kernel.label),
            passed: frac >= 0.9,
            hard: true,
            detail: format!("{:.4} of references non-decreasing in alpha (need >= 0.9)", frac),
        });
    }
    if sw.rotated {
        let avg = |m: Model| {
            let v: Vec<f64> = cells
                .iter()
                .filter(|c| c.panel == "rotated" && c.model == m)
                .map(|c| c.same_class_mrd)
                .collect();
            mean(&v)
        };
        let (e, b) = (avg(Model::Equivariant), avg(Model::Baseline));
        out.push(CheckSummary {
            name: "rotated_equivariant_le_baseline".into(),
            passed: e <= b,
            hard: true,
            detail: format!("equivariant {e} vs baseline {b}"),
        });
    }
    for kernel in &sw.panel_kernels {
        for model in [Model::Equivariant, Model::Baseline] {
            let mut v: Vec<(f64, f64)> = cells
                .iter()
                .filter(|c| c.panel == "sigma" && c.model == model && c.kernel == kernel.label)
                .map(|c| (c.sigma, c.same_class_mrd))
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            let vals: Vec<f64> = v.iter().map(|x| x.1).collect();
            out.push(CheckSummary {
                name: format!("sigma_non_increasing[{}, {}]", model.name(), kernel.label),
                passed: non_increasing(&vals),
                hard: false,
                detail: format!("same-class distances over sigma: {vals:?}"),
            });
        }
    }
    let pick = |label: &str| -> Option<f64> {
        let v: Vec<f64> = cells
            .iter()
            .filter(|c| c.panel == "alpha" && c.model == Model::Equivariant && c.kernel == label && c.alpha > 0.0)
            .map(|c| c.same_class_mrd)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    if let (Some(e), Some(a)) = (pick("exponential"), pick("arccos1")) {
        let r = (e - a).abs() / e.max(a);
        out.push(CheckSummary {
            name: "kernel_insensitivity".into(),
            passed: r <= 0.25,
            hard: false,
            detail: format!("exponential {e} vs arccos1 {a}: relative difference {r}"),
        });
    }
    let tel: Vec<&BoundCheck> = bounds
        .iter()
        .filter(|b| b.kind == crate::stability::BoundKind::Telescoping)
        .collect();
    out.push(CheckSummary {
        name: "telescoping_bound".into(),
        passed: bounds.iter().all(|b| b.holds),
        hard: true,
        detail: format!(
            "{} of {} telescoping and {} of {} invariance checks hold",
            tel.iter().filter(|b| b.holds).count(),
            tel.len(),
            bounds.iter().filter(|b| b.kind != crate::stability::BoundKind::Telescoping && b.holds).count(),
            bounds.len() - tel.len()
        ),
    });
    let worst_exact = equivariance
        .iter()
        .filter(|e| e.lattice_exact)
        .map(|e| e.relative_error)
        .fold(0.0, f64::max);
    out.push(CheckSummary {
        name: "lattice_equivariance".into(),
        passed: worst_exact <= 1e-9,
        hard: true,
        detail: format!("max relative error over lattice-exact elements {worst_exact:e}"),
    });
    let worst_probe = probes.iter().map(|p| p.max_ratio).fold(0.0, f64::max);
    out.push(CheckSummary {
        name: "pooling_schur".into(),
        passed: worst_probe <= 1.0 + 1e-10,
        hard: true,
        detail: format!("max probe ratio {worst_probe}"),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;
    use crate::data::make_synthetic;

    fn dataset() -> Dataset {
        make_synthetic(5, 8, 8, 1).unwrap()
    }

    #[test]
    fn protocol_counts_and_pools() {
        let ds = make_synthetic(6, 12, 12, 2).unwrap();
        let tau = TauParams {
            smoothness: 2.0,
            grad: 0.1,
        };
        let alphas = [0.1, 0.5, 1.0, 2.5, 5.0];
        let s = build_protocol_sets(&ds, &alphas, tau, 4, 50, 9).unwrap();
        assert_eq!(s.n_references(), 40);
        assert_eq!(s.n_deformed(), 200);
        assert!(s.same_class.iter().all(|p| p.len() == 20));
        assert!(s.mixed.iter().all(|p| p.len() == 50));
        for (r, pool) in s.same_class.iter().enumerate() {
            assert!(pool.iter().all(|&(j, _)| s.references[j].label == s.references[r].label));
        }
        for pool in &s.mixed {
            let mut p = pool.clone();
            p.dedup();
            assert_eq!(p.len(), 50, "mixed pool drawn without replacement");
        }
        // Four distinct references per class.
        for c in 0..10u8 {
            let mut idx: Vec<usize> = s.references.iter().filter(|r| r.label == c).map(|r| r.source_index).collect();
            idx.dedup();
            assert_eq!(idx.len(), 4);
        }
        let again = build_protocol_sets(&ds, &alphas, tau, 4, 50, 9).unwrap();
        assert_eq!(again.mixed, s.mixed);
        assert_eq!(again.deformed, s.deformed);
        assert_ne!(build_protocol_sets(&ds, &alphas, tau, 4, 50, 10).unwrap().mixed, s.mixed);
    }

    #[test]
    fn zero_alpha_copies_are_bitwise_references() {
        let ds = dataset();
        let tau = TauParams {
            smoothness: 1.5,
            grad: 0.1,
        };
        let s = build_protocol_sets(&ds, &[0.0, 1.0], tau, 2, 5, 3).unwrap();
        for (r, d) in s.references.iter().zip(&s.deformed) {
            assert_eq!(d[0], r.image);
            assert_ne!(d[1], r.image);
        }
    }

    #[test]
    fn insufficient_classes_error() {
        let ds = make_synthetic(3, 8, 8, 0).unwrap();
        let tau = TauParams {
            smoothness: 1.5,
            grad: 0.1,
        };
        assert!(matches!(
            build_protocol_sets(&ds, &[1.0], tau, 4, 5, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(build_protocol_sets(&ds, &[1.0], tau, 2, 21, 0).is_err());
    }

    #[test]
    fn split_interleaves_classes() {
        let ds = make_synthetic(3, 4, 4, 0).unwrap();
        let (fit, rest) = split_for_protocol(&ds, 10);
        assert_eq!(fit.labels, (0..10).collect::<Vec<u8>>());
        assert_eq!(rest.class_counts(), [2; 10]);
    }

    #[test]
    fn smoke_single_cell() {
        let cfg = parse_config_str(
            "[run]\nseed = 5\n[group]\nkind = se2\nheight = 8\nwidth = 8\nn_theta = 4\n\
             [network]\nchannels = 4\nsigma = 2\nfit_patches = 200\nfit_images = 4\n\
             [sweep]\nalphas = 1\nkappas = 2\nsigmas = 2\nkernels = exponential\npanel_kernels = exponential\n\
             rotated = false\nbound_triples = 2\nprobes = 3\n\
             [protocol]\nrefs_per_class = 1\nmixed_pool = 3\n[data]\nn_per_class = 3\ntrain = 10\n",
        )
        .unwrap();
        let ds = prepare_dataset(&cfg).unwrap();
        let rep = run_stability_sweep(&cfg, &ds, 5).unwrap();
        assert!(!rep.cells.is_empty());
        for c in &rep.cells {
            assert!(c.same_class_mrd.is_finite() && c.same_class_mrd >= 0.0);
            assert!(c.mixed_mrd.is_finite() && c.mixed_mrd >= 0.0);
        }
        let zero: Vec<&Cell> = rep.cells.iter().filter(|c| c.alpha == 0.0).collect();
        assert_eq!(zero.len(), 2);
        assert!(zero.iter().all(|c| c.self_mrd == 0.0));
        assert!(rep.bounds.iter().all(|b| b.holds));
        let again = run_stability_sweep(&cfg, &ds, 5).unwrap();
        assert_eq!(again.cells, rep.cells);
    }
}
