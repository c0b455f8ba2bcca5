//! Config-driven end-to-end runs: sample, map basins, refine barriers,
//! build and annotate the ELM, write artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::barrier::{BarrierTable, CrossingStore};
use crate::basin::{BasinMapper, MinimaRegistry, Tolerances};
use crate::elm::{
    annotate_mass_volume, build_tree, convergence_report, prune_with_remap, tree_distance,
    ChainSummary, ConvergenceReport, ElmTree, LeafSpec,
};
use crate::error::{Error, Result};
use crate::gwl::{GammaTable, Sampler, SamplerConfig, SamplerState, REFINE_CADENCE};
use crate::model::{Dataset, EnergyModel, ModelPoint};
use crate::models::bernoulli::BernoulliModel;
use crate::models::bicluster::{load_matrix_csv, Bicluster, BiclusterModel};
use crate::models::gmm::{
    derive_bounds, sample_moments, FreeMask, GmmBounds, GmmModel, GmmParams, GmmPrior,
};
use crate::models::toy::DoubleWell1D;
use crate::rng::substream;

/// Ground-truth mixture description (`{K, d, alphas, means, covs, seed}`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmSpecFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub alphas: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl GmmSpecFile {
    pub fn from_params(params: &GmmParams, seed: u64) -> Self {
        let d = params.d();
        GmmSpecFile {
            k: params.k(),
            d,
            alphas: params.weights.clone(),
            means: params.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covs: params
                .covs
                .iter()
                .map(|c| (0..d).map(|r| (0..d).map(|cc| c[(r, cc)]).collect()).collect())
                .collect(),
            seed,
        }
    }

    pub fn params(&self) -> Result<GmmParams> {
        if self.alphas.len() != self.k || self.means.len() != self.k || self.covs.len() != self.k {
            return Err(Error::config("gmm spec arrays must have K entries"));
        }
        Ok(GmmParams {
            weights: self.alphas.clone(),
            means: self.means.iter().map(|m| DVector::from_column_slice(m)).collect(),
            covs: self
                .covs
                .iter()
                .map(|c| DMatrix::from_fn(self.d, self.d, |r, cc| c[r][cc]))
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// `[model]` section of a run config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: String,
    pub dataset: Option<PathBuf>,
    pub k: Option<usize>,
    /// "niw" (data-scaled default) or "flat".
    pub prior: Option<String>,
    pub eps_m: Option<f64>,
    /// Bernoulli: noise level of the energy (flip convention).
    pub flip_prob: Option<f64>,
    /// Bi-cluster: count matrix CSV and prior strength.
    pub matrix: Option<PathBuf>,
    pub alpha: Option<f64>,
    /// Double-well toy: tilt of the asymmetric term.
    pub tilt: Option<f64>,
    /// Restricted GMM: ground-truth spec pinning the fixed blocks.
    pub truth: Option<PathBuf>,
    /// Indices of the component means left free.
    pub free_means: Option<Vec<usize>>,
    /// Explicit per-coordinate mean bound interval [lo, hi].
    pub mean_box: Option<[f64; 2]>,
}

/// `[pipeline]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    pub merge_eps: f64,
    /// Absolute prune depth; 0 disables pruning.
    pub prune_depth: f64,
    /// Prune depth as a fraction of the pilot energy range (overrides the
    /// absolute value when > 0).
    pub prune_depth_rel: f64,
    pub chains: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            merge_eps: 1e-2,
            prune_depth: 0.0,
            prune_depth_rel: 0.0,
            chains: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Full run configuration (TOML sections [model], [sampler], [pipeline],
/// [output]).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sampler: SamplerConfig,
    pub pipeline: PipelineSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies a `section.key=value` override (flags win over the file).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
        let mut doc: toml::Value = toml::Value::try_from(&*self)
            .map_err(|e| Error::config(format!("config serialization: {e}")))?;
        let mut cursor = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            cursor = cursor
                .get_mut(part)
                .ok_or_else(|| Error::config(format!("unknown config section `{part}`")))?;
        }
        let leaf = parts.last().unwrap();
        let parsed: toml::Value = value
            .parse::<i64>()
            .map(toml::Value::Integer)
            .or_else(|_| value.parse::<f64>().map(toml::Value::Float))
            .or_else(|_| value.parse::<bool>().map(toml::Value::Boolean))
            .unwrap_or_else(|_| toml::Value::String(value.to_string()));
        cursor
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{key}` does not address a table entry")))?
            .insert(leaf.to_string(), parsed);
        *self = doc
            .try_into()
            .map_err(|e| Error::config(format!("override `{spec}` rejected: {e}")))?;
        Ok(())
    }

    /// Stable hash of the canonicalized config.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).unwrap_or_default();
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of the run-defining sections; where the artifacts land does not
    /// change what the run is.
    pub fn content_hash(&self) -> String {
        let mut reduced = self.clone();
        reduced.output.dir = None;
        reduced.hash()
    }

    /// Hash ignoring budget and output location: a checkpoint may be resumed
    /// with a larger budget or a different output directory, but never under
    /// different model or sampler parameters.
    pub fn resume_hash(&self) -> String {
        let mut reduced = self.clone();
        reduced.sampler.budget = 0;
        reduced.output.dir = None;
        reduced.hash()
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            merge_eps: self.pipeline.merge_eps,
            ..Tolerances::default()
        }
    }
}

/// Builds the configured energy model. Paths resolve relative to `base`.
pub fn build_model(cfg: &ModelSection, base: &Path) -> Result<Box<dyn EnergyModel>> {
    let resolve = |p: &PathBuf| -> PathBuf {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };
    match cfg.kind.as_str() {
        "gmm" => {
            let ds_path = cfg
                .dataset
                .as_ref()
                .ok_or_else(|| Error::config("gmm model needs `dataset`"))?;
            let dataset = Dataset::load(&resolve(ds_path))?;
            let k = cfg.k.ok_or_else(|| Error::config("gmm model needs `k`"))?;
            let data: Vec<DVector<f64>> = dataset
                .points
                .iter()
                .map(|p| DVector::from_column_slice(p))
                .collect();
            let prior = match cfg.prior.as_deref().unwrap_or("niw") {
                "flat" => GmmPrior::Flat,
                "niw" => {
                    let (mean, cov) = sample_moments(&data)?;
                    GmmPrior::default_for(k, &mean, &cov, data.len())
                }
                other => return Err(Error::config(format!("unknown prior `{other}`"))),
            };
            match (&cfg.truth, &cfg.free_means) {
                (Some(truth), Some(free)) => {
                    let spec = GmmSpecFile::load(&resolve(truth))?;
                    let base_params = spec.params()?;
                    let mask = FreeMask::means_only(k, free);
                    let bounds = match cfg.mean_box {
                        Some([lo, hi]) => {
                            let derived = derive_bounds(&data, cfg.eps_m.unwrap_or(0.0))?;
                            GmmBounds {
                                center: vec![(lo + hi) / 2.0; spec.d],
                                r_bound: (hi - lo) / 2.0,
                                ..derived
                            }
                        }
                        None => derive_bounds(&data, cfg.eps_m.unwrap_or(0.0))?,
                    };
                    Ok(Box::new(GmmModel::restricted(
                        &dataset,
                        k,
                        prior,
                        base_params,
                        mask,
                        bounds,
                    )?))
                }
                _ => Ok(Box::new(GmmModel::new(
                    &dataset,
                    k,
                    prior,
                    cfg.eps_m.unwrap_or(0.0),
                )?)),
            }
        }
        "bernoulli" => {
            let ds_path = cfg
                .dataset
                .as_ref()
                .ok_or_else(|| Error::config("bernoulli model needs `dataset`"))?;
            let dataset = Dataset::load(&resolve(ds_path))?;
            let k = cfg
                .k
                .ok_or_else(|| Error::config("bernoulli model needs `k`"))?;
            // the energy noise level is clamped away from the degenerate
            // endpoints; zero-noise data still maps under a near-zero level
            let flip = cfg.flip_prob.unwrap_or(0.1).clamp(0.01, 0.99);
            Ok(Box::new(BernoulliModel::new(&dataset, k, flip)?))
        }
        "bicluster" => {
            let mpath = cfg
                .matrix
                .as_ref()
                .ok_or_else(|| Error::config("bicluster model needs `matrix`"))?;
            let matrix = load_matrix_csv(&resolve(mpath))?;
            let alpha = cfg
                .alpha
                .ok_or_else(|| Error::config("bicluster model needs `alpha`"))?;
            Ok(Box::new(BiclusterModel::new(matrix, alpha)?))
        }
        "double-well" => Ok(Box::new(DoubleWell1D::new(cfg.tilt.unwrap_or(0.0), 2.5))),
        other => Err(Error::config(format!("unknown model kind `{other}`"))),
    }
}

/// Everything a finished run produces.
pub struct RunArtifacts {
    /// Pruned, mass/volume-annotated tree.
    pub tree: ElmTree,
    pub registry: MinimaRegistry,
    pub barriers: BarrierTable,
    pub gamma: GammaTable,
    pub grid: crate::gwl::EnergyGrid,
    pub report: ConvergenceReport,
    pub meta: Meta,
    /// basin -> absorbing basin map produced by pruning.
    pub prune_remap: BTreeMap<u32, u32>,
    /// Final per-chain states (the checkpoint payload).
    pub chains: Vec<ChainCheckpoint>,
}

impl RunArtifacts {
    pub fn checkpoint(&self, config_hash: String) -> Checkpoint {
        Checkpoint {
            config_hash,
            chains: self
                .chains
                .iter()
                .map(|c| ChainCheckpoint {
                    state: c.state.clone(),
                    registry: c.registry.clone(),
                    crossings: c.crossings.clone(),
                    barriers: c.barriers.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub model: String,
    pub config: String,
    pub seed: u64,
}

/// Serialized chain for checkpointing.
#[derive(Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub state: SamplerState,
    pub registry: MinimaRegistry,
    pub crossings: CrossingStore,
    pub barriers: BarrierTable,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub chains: Vec<ChainCheckpoint>,
}

struct FinishedChain {
    state: SamplerState,
    registry: MinimaRegistry,
    crossings: CrossingStore,
    barriers: BarrierTable,
    energies: Vec<f64>,
    snapshots: Vec<(u64, MinimaRegistry, BarrierTable)>,
}

fn drive_chain(
    model: &dyn EnergyModel,
    cfg: &RunConfig,
    idx: usize,
    resume: Option<ChainCheckpoint>,
    want_snapshots: bool,
) -> Result<FinishedChain> {
    let mut sampler = match resume {
        Some(ck) => Sampler {
            model,
            cfg: cfg.sampler.clone(),
            state: ck.state,
            mapper: BasinMapper::with_registry(cfg.tolerances(), ck.registry),
            crossings: ck.crossings,
            barriers: ck.barriers,
            log: Default::default(),
            adapt: true,
            freeze_gamma: false,
        },
        None => Sampler::init(
            model,
            cfg.sampler.clone(),
            substream(cfg.sampler.seed, &format!("chain-{idx}")),
            cfg.tolerances(),
        )?,
    };
    let budget = cfg.sampler.budget;
    let snap_every = (budget / 10).max(1);
    let mut snapshots = Vec::new();
    while sampler.state.t < budget {
        sampler.step()?;
        if sampler.state.t % REFINE_CADENCE == 0 {
            sampler.refine_barriers()?;
        }
        if want_snapshots && sampler.state.t % snap_every == 0 {
            snapshots.push((
                sampler.state.t,
                sampler.mapper.registry().clone(),
                sampler.barriers.clone(),
            ));
        }
    }
    sampler.refine_barriers()?;
    let energies = sampler.log.energies();
    Ok(FinishedChain {
        state: sampler.state,
        registry: sampler.mapper.into_registry(),
        crossings: sampler.crossings,
        barriers: sampler.barriers,
        energies,
        snapshots,
    })
}

fn leaf_specs(registry: &MinimaRegistry) -> Vec<LeafSpec> {
    registry
        .live()
        .map(|e| LeafSpec {
            basin_id: e.id,
            energy: e.energy,
            location: Some(e.location.clone()),
        })
        .collect()
}

fn tree_of(registry: &MinimaRegistry, barriers: &BarrierTable, du: f64) -> Result<ElmTree> {
    build_tree(&leaf_specs(registry), barriers, du)
}

/// Runs the full mapping pipeline (possibly multi-chain) and assembles the
/// merged, annotated, pruned ELM.
pub fn run_map(model: &dyn EnergyModel, cfg: &RunConfig) -> Result<RunArtifacts> {
    run_map_inner(model, cfg, None)
}

/// Resumes from a checkpoint and completes the remaining budget.
pub fn resume_map(
    model: &dyn EnergyModel,
    cfg: &RunConfig,
    checkpoint: Checkpoint,
) -> Result<RunArtifacts> {
    if checkpoint.config_hash != cfg.resume_hash() {
        return Err(Error::config(
            "checkpoint was produced by a different configuration",
        ));
    }
    run_map_inner(model, cfg, Some(checkpoint))
}

fn run_map_inner(
    model: &dyn EnergyModel,
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
) -> Result<RunArtifacts> {
    let n_chains = cfg.pipeline.chains.max(1);
    let mut resumes: Vec<Option<ChainCheckpoint>> = match resume {
        Some(ck) => {
            if ck.chains.len() != n_chains {
                return Err(Error::config(
                    "checkpoint chain count does not match the configuration",
                ));
            }
            ck.chains.into_iter().map(Some).collect()
        }
        None => (0..n_chains).map(|_| None).collect(),
    };
    let want_snapshots = n_chains >= 2;
    let mut chains = Vec::with_capacity(n_chains);
    for (idx, slot) in resumes.iter_mut().enumerate() {
        chains.push(drive_chain(model, cfg, idx, slot.take(), want_snapshots)?);
    }

    // merge: chain 0's live minima seed the merged registry, later chains
    // match by location within the merge tolerance or append
    let tol = cfg.tolerances();
    let mut merged = MinimaRegistry::default();
    let mut remaps: Vec<BTreeMap<u32, u32>> = Vec::with_capacity(n_chains);
    for chain in &chains {
        let mut remap = BTreeMap::new();
        for entry in chain.registry.live() {
            let mut matched = None;
            for m in merged.live() {
                if crate::model::raw_distance(model, &entry.location, &m.location) < tol.merge_eps
                {
                    matched = Some(m.id);
                    break;
                }
            }
            let id = match matched {
                Some(id) => {
                    if entry.energy < merged.entries[id as usize].energy {
                        merged.entries[id as usize].energy = entry.energy;
                        merged.entries[id as usize].location = entry.location.clone();
                    }
                    id
                }
                None => {
                    let id = merged.entries.len() as u32;
                    merged.entries.push(crate::basin::MinEntry {
                        id,
                        location: entry.location.clone(),
                        energy: entry.energy,
                        discovery_t: entry.discovery_t,
                        alias_of: None,
                    });
                    id
                }
            };
            remap.insert(entry.id, id);
        }
        remaps.push(remap);
    }
    let compose = |chain: &FinishedChain, remap: &BTreeMap<u32, u32>| {
        let reg = chain.registry.clone();
        let remap = remap.clone();
        move |id: u32| -> u32 {
            let live = reg.resolve(id);
            remap.get(&live).copied().unwrap_or(live)
        }
    };
    let mut gamma = GammaTable::default();
    let mut barriers = BarrierTable::default();
    for (chain, remap) in chains.iter().zip(&remaps) {
        let f = compose(chain, remap);
        gamma.absorb(&chain.state.gamma.resolved(&f));
        let rb = chain.barriers.resolved(&f);
        for (&(i, j), e) in &rb.entries {
            match barriers.entries.get(&(i, j)) {
                Some(cur) if cur.energy <= e.energy => {}
                _ => {
                    barriers.entries.insert((i, j), e.clone());
                }
            }
        }
    }
    // barrier validity against the merged minima
    for (&(i, j), e) in barriers.entries.iter_mut() {
        let floor = [i, j]
            .iter()
            .filter_map(|&id| merged.get(id).map(|m| m.energy))
            .fold(f64::NEG_INFINITY, f64::max);
        if e.energy < floor {
            e.energy = floor;
        }
    }

    let grid = chains[0].state.grid.clone();
    let mut tree = tree_of(&merged, &barriers, grid.du)?;
    annotate_mass_volume(&mut tree, &gamma, &grid)?;

    // pruning threshold
    let range = chains[0].state.pilot_high - chains[0].state.pilot_low;
    let depth = if cfg.pipeline.prune_depth_rel > 0.0 {
        cfg.pipeline.prune_depth_rel * range
    } else {
        cfg.pipeline.prune_depth
    };
    let (tree, prune_remap) = if depth > 0.0 {
        let (pruned_tree, remap) = prune_with_remap(&tree, depth);
        // fold the pruned basins' weight into their absorbers and re-derive
        // mass and volume on the pruned structure
        let gamma2 = gamma.resolved(|b| remap.get(&b).copied().unwrap_or(b));
        let mut t = pruned_tree;
        annotate_mass_volume(&mut t, &gamma2, &grid)?;
        (t, remap)
    } else {
        (tree, BTreeMap::new())
    };

    // convergence report
    let summaries: Vec<ChainSummary> = chains
        .iter()
        .map(|c| ChainSummary {
            energies: c.energies.clone(),
            discovery_times: c.registry.discovery_times(),
            last_barrier_update_t: c.barriers.last_update_t(),
        })
        .collect();
    let mut distance_series = Vec::new();
    if n_chains >= 2 {
        let n_snaps = chains.iter().map(|c| c.snapshots.len()).min().unwrap_or(0);
        for s in 0..n_snaps {
            let mut total = 0.0;
            let mut pairs = 0usize;
            let mut trees = Vec::new();
            for chain in &chains {
                let (t_at, reg, bar) = &chain.snapshots[s];
                let _ = t_at;
                if reg.live_count() == 0 {
                    continue;
                }
                trees.push(tree_of(reg, bar, grid.du)?);
            }
            for i in 0..trees.len() {
                for j in i + 1..trees.len() {
                    total += tree_distance(model, &trees[i], &trees[j])?;
                    pairs += 1;
                }
            }
            if pairs > 0 {
                distance_series.push((chains[0].snapshots[s].0, total / pairs as f64));
            }
        }
    }
    let window = (cfg.sampler.budget / 10).max(1);
    let report = convergence_report(&summaries, cfg.sampler.budget, window, distance_series);

    Ok(RunArtifacts {
        tree,
        registry: merged,
        barriers,
        gamma,
        grid,
        report,
        meta: Meta {
            model: model.spec().name.clone(),
            config: cfg.content_hash(),
            seed: cfg.sampler.seed,
        },
        prune_remap,
        chains: chains
            .into_iter()
            .map(|c| ChainCheckpoint {
                state: c.state,
                registry: c.registry,
                crossings: c.crossings,
                barriers: c.barriers,
            })
            .collect(),
    })
}

impl GammaTable {
    /// Merges another table into this one (gamma values add; in log space
    /// that is a log-sum-exp per bin).
    pub fn absorb(&mut self, other: &GammaTable) {
        for (&key, &lg) in &other.log_gamma {
            match self.log_gamma.get_mut(&key) {
                Some(cur) => {
                    let m = cur.max(lg);
                    *cur = m + ((*cur - m).exp() + (lg - m).exp()).ln();
                }
                None => {
                    self.log_gamma.insert(key, lg);
                }
            }
        }
        for (&key, &v) in &other.visits {
            *self.visits.entry(key).or_insert(0) += v;
        }
    }
}

/// elm.json document ({meta, nodes, root}).
#[derive(Serialize, Deserialize)]
pub struct ElmJson {
    pub meta: Meta,
    pub nodes: Vec<crate::elm::ElmNode>,
    pub root: usize,
}

/// Writes elm.json, registry.json, barriers.json, convergence.json and
/// checkpoint.json into `dir`.
pub fn write_artifacts(
    dir: &Path,
    artifacts: &RunArtifacts,
    checkpoint: Option<&Checkpoint>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let elm = ElmJson {
        meta: artifacts.meta.clone(),
        nodes: artifacts.tree.nodes.clone(),
        root: artifacts.tree.root,
    };
    std::fs::write(dir.join("elm.json"), serde_json::to_string_pretty(&elm)?)?;
    let registry = serde_json::json!({
        "meta": artifacts.meta,
        "minima": artifacts.registry.export_json(),
        // machine-readable form used by `analyze learners` / `analyze erc`
        "entries": artifacts.registry,
    });
    std::fs::write(
        dir.join("registry.json"),
        serde_json::to_string_pretty(&registry)?,
    )?;
    let barriers = serde_json::json!({
        "meta": artifacts.meta,
        "barriers": artifacts.barriers.export_json(),
    });
    std::fs::write(
        dir.join("barriers.json"),
        serde_json::to_string_pretty(&barriers)?,
    )?;
    let convergence = serde_json::json!({
        "meta": artifacts.meta,
        "report": artifacts.report,
    });
    std::fs::write(
        dir.join("convergence.json"),
        serde_json::to_string_pretty(&convergence)?,
    )?;
    if let Some(ck) = checkpoint {
        std::fs::write(dir.join("checkpoint.json"), serde_json::to_string(ck)?)?;
    }
    Ok(())
}

/// Runs the pipeline for a config, writes artifacts, returns them.
pub fn execute(cfg: &RunConfig, base: &Path) -> Result<RunArtifacts> {
    let model = build_model(&cfg.model, base)?;
    let artifacts = run_map(model.as_ref(), cfg)?;
    if let Some(dir) = &cfg.output.dir {
        let dir = if dir.is_absolute() {
            dir.clone()
        } else {
            base.join(dir)
        };
        let checkpoint = artifacts.checkpoint(cfg.resume_hash());
        write_artifacts(&dir, &artifacts, Some(&checkpoint))?;
    }
    Ok(artifacts)
}

/// One cell of a difficulty grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifficultyCell {
    pub condition: BTreeMap<String, f64>,
    pub leaf_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    pub converged: bool,
}

/// Difficulty grid spec (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifficultyGrid {
    pub model: String,
    pub cells: Vec<BTreeMap<String, f64>>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub eps_max: Option<f64>,
    #[serde(default)]
    pub algorithm: Option<String>,
    #[serde(default)]
    pub runs: Option<u64>,
}

impl DifficultyGrid {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn cell_param(cell: &BTreeMap<String, f64>, key: &str) -> Result<f64> {
    cell.get(key)
        .copied()
        .ok_or_else(|| Error::config(format!("difficulty cell is missing `{key}`")))
}

/// Runs the full pipeline per grid cell and scores each landscape.
pub fn difficulty_map(grid: &DifficultyGrid) -> Result<Vec<DifficultyCell>> {
    let mut out = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let outcome = run_difficulty_cell(grid, cell);
        match outcome {
            Ok(c) => out.push(c),
            Err(e) => {
                // a cell that fails to converge (or errors) is an outcome,
                // not a crash of the whole map
                log::warn!("difficulty cell {cell:?} failed: {e}");
                out.push(DifficultyCell {
                    condition: cell.clone(),
                    leaf_count: 0,
                    auc: None,
                    regime: None,
                    converged: false,
                });
            }
        }
    }
    Ok(out)
}

fn run_difficulty_cell(
    grid: &DifficultyGrid,
    cell: &BTreeMap<String, f64>,
) -> Result<DifficultyCell> {
    let seed = cell.get("seed").copied().unwrap_or(0.0) as u64;
    let mut cfg = RunConfig {
        sampler: SamplerConfig {
            seed,
            ..grid.sampler.clone()
        },
        pipeline: grid.pipeline.clone(),
        ..RunConfig::default()
    };
    match grid.model.as_str() {
        "bernoulli" => {
            let k = cell_param(cell, "k")? as usize;
            let n = cell_param(cell, "n")? as usize;
            let m = cell_param(cell, "m")? as usize;
            let flip = cell_param(cell, "flip_prob")?;
            let mut rng = substream(seed, "cell-templates");
            let templates: Vec<Vec<u8>> = (0..k)
                .map(|_| {
                    use rand::RngExt;
                    (0..n)
                        .map(|_| if rng.random::<f64>() < 0.5 { 1u8 } else { 0u8 })
                        .collect()
                })
                .collect();
            let alphas = vec![1.0 / k as f64; k];
            let ds = crate::models::bernoulli::sample_sketches(
                &templates,
                &alphas,
                flip,
                m,
                &mut substream(seed, "cell-data"),
            )?;
            let model = BernoulliModel::new(&ds, k, flip.clamp(0.01, 0.99))?;
            let artifacts = run_map(&model, &cfg)?;
            Ok(DifficultyCell {
                condition: cell.clone(),
                leaf_count: artifacts.tree.leaf_count(),
                auc: None,
                regime: None,
                converged: artifacts.report.converged,
            })
        }
        "bicluster" => {
            let n_alt = cell_param(cell, "n_alt")? as usize;
            let overlap = cell_param(cell, "overlap")? as usize;
            let p_noise = cell.get("p_noise").copied().unwrap_or(0.0);
            let n_obs = cell_param(cell, "n_obs")? as usize;
            let alpha = cell_param(cell, "alpha")?;
            let gen = crate::models::bicluster::generate_matrix(
                n_alt,
                overlap,
                p_noise,
                n_obs,
                &mut substream(seed, "cell-matrix"),
            )?;
            let model = BiclusterModel::new(gen.matrix.clone(), alpha)?;
            let artifacts = run_map(&model, &cfg)?;
            let regime = bicluster_regime(&model, &artifacts, &gen.truth_rows, &gen.truth_cols)?;
            Ok(DifficultyCell {
                condition: cell.clone(),
                leaf_count: artifacts.tree.leaf_count(),
                auc: None,
                regime: Some(regime.into()),
                converged: artifacts.report.converged,
            })
        }
        "gmm" => {
            let k = cell_param(cell, "k")? as usize;
            let d = cell_param(cell, "d")? as usize;
            let m = cell_param(cell, "m")? as usize;
            let sep = cell_param(cell, "sep")?;
            let labels = cell.get("labels").copied().unwrap_or(0.0);
            let truth = synth_gmm_truth(k, d, sep, seed)?;
            let ds = crate::models::gmm::sample_gmm(
                &truth,
                m,
                labels,
                &mut substream(seed, "cell-data"),
            )?;
            let data: Vec<DVector<f64>> = ds
                .points
                .iter()
                .map(|p| DVector::from_column_slice(p))
                .collect();
            let (mean, cov) = sample_moments(&data)?;
            let model = GmmModel::new(
                &ds,
                k,
                GmmPrior::default_for(k, &mean, &cov, m),
                0.0,
            )?;
            cfg.sampler.seed = seed;
            let artifacts = run_map(&model, &cfg)?;
            let auc = match (&grid.algorithm, grid.eps_max, grid.runs) {
                (Some(alg), Some(eps_max), Some(runs)) => {
                    let alg = crate::harness::Algorithm::parse(alg)?;
                    let mapper =
                        BasinMapper::with_registry(cfg.tolerances(), artifacts.registry.clone());
                    let hist = crate::harness::landing_frequencies(
                        &model, &mapper, alg, runs, seed, None,
                    )?;
                    let minima: BTreeMap<u32, ModelPoint> = artifacts
                        .registry
                        .live()
                        .map(|e| (e.id, e.location.clone()))
                        .collect();
                    let curve =
                        crate::harness::erc(&model, &hist, &minima, &model.point_of(&truth))?;
                    Some(crate::harness::auc(&curve, eps_max)?)
                }
                _ => None,
            };
            Ok(DifficultyCell {
                condition: cell.clone(),
                leaf_count: artifacts.tree.leaf_count(),
                auc,
                regime: None,
                converged: artifacts.report.converged,
            })
        }
        other => Err(Error::config(format!("unknown difficulty model `{other}`"))),
    }
}

/// Synthetic GMM truth rescaled to hit a target separability exactly:
/// random unit-covariance components whose mean spread is scaled to c.
pub fn synth_gmm_truth(k: usize, d: usize, sep: f64, seed: u64) -> Result<GmmParams> {
    use rand::RngExt;
    if k < 1 || d < 1 {
        return Err(Error::config("need k >= 1 and d >= 1"));
    }
    let mut rng = substream(seed, "gmm-truth");
    let mut means: Vec<DVector<f64>> = (0..k)
        .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    let covs = vec![DMatrix::<f64>::identity(d, d); k];
    let weights = vec![1.0 / k as f64; k];
    if k >= 2 {
        let params = GmmParams {
            weights: weights.clone(),
            means: means.clone(),
            covs: covs.clone(),
        };
        let current = crate::models::gmm::separability(&params)?;
        if current <= 0.0 {
            return Err(Error::config("degenerate random means"));
        }
        let scale = sep / current;
        for m in means.iter_mut() {
            *m *= scale;
        }
    }
    Ok(GmmParams {
        weights,
        means,
        covs,
    })
}

/// Regime of a bi-cluster landscape per the classification rules: I when
/// the global minimum is a correct bi-cluster (or its transpose) with few
/// leaves, II when the maximal bi-cluster dominates, III otherwise.
pub fn bicluster_regime(
    model: &BiclusterModel,
    artifacts: &RunArtifacts,
    truth_rows: &[usize],
    truth_cols: &[usize],
) -> Result<&'static str> {
    let global = artifacts
        .tree
        .leaves()
        .min_by(|a, b| a.energy.total_cmp(&b.energy))
        .ok_or_else(|| Error::Empty("tree has no leaves".into()))?;
    let basin = global
        .basin_id
        .ok_or_else(|| Error::config("leaf without basin id"))?;
    let entry = artifacts
        .registry
        .get(basin)
        .ok_or_else(|| Error::config("basin missing from registry"))?;
    let bc = model.bicluster_of(&entry.location)?;
    let truth = Bicluster {
        rows: truth_rows.to_vec(),
        cols: truth_cols.to_vec(),
    };
    let transpose = Bicluster {
        rows: truth_cols.to_vec(),
        cols: truth_rows.to_vec(),
    };
    let correct = bc == truth || bc == transpose;
    let maximal = bc.rows.len() == model.n_rows() && bc.cols.len() == model.n_cols();
    if correct && artifacts.tree.leaf_count() < 6 {
        Ok("I")
    } else if maximal {
        Ok("II")
    } else {
        Ok("III")
    }
}
