//! Generalized Wang-Landau sampler.
//!
//! The chain targets pi(x) / gamma_phi(x), where phi(x) is the
//! (basin, energy-interval) bin of x and the log weights grow by eta at the
//! occupied bin every iteration. As the weights converge to the bin masses
//! the chain visits all bins with asymptotically equal probability, which is
//! what drags it over barriers and into every basin.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::barrier::{refine_all, BarrierTable, CrossingStore};
use crate::basin::{BasinMapper, Tolerances};
use crate::error::{Error, Result};
use crate::model::{EnergyModel, ModelPoint};

/// Deterministic 1/t decay constant of the adaptation step.
const C0: f64 = 1.0;
/// Flat-histogram checks run every this many steps.
const CHECK_INTERVAL: u64 = 100;
/// Barrier refinement cadence in sampler steps.
pub const REFINE_CADENCE: u64 = 10_000;
/// Pilot random scan size used to calibrate the energy grid.
const PILOT_POINTS: usize = 1000;

/// Uniform energy intervals [u_min + j du, u_min + (j+1) du). Energies below
/// the origin fold into interval 0; the grid extends upward on demand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyGrid {
    pub u_min: f64,
    pub du: f64,
    pub n_intervals: u32,
}

impl EnergyGrid {
    pub fn new(u_min: f64, du: f64) -> Result<Self> {
        if !(du > 0.0) || !du.is_finite() {
            return Err(Error::config(format!("interval width du = {du} must be > 0")));
        }
        Ok(EnergyGrid {
            u_min,
            du,
            n_intervals: 1,
        })
    }

    /// Interval index of an energy, extending the grid upward when needed.
    pub fn interval_of(&mut self, e: f64) -> u32 {
        let j = ((e - self.u_min) / self.du).floor();
        if j < 0.0 {
            return 0;
        }
        let j = j as u32;
        if j >= self.n_intervals {
            self.n_intervals = j + 1;
        }
        j
    }

    /// Lower edge of interval j (the representative bin energy).
    pub fn u_of(&self, j: u32) -> f64 {
        self.u_min + j as f64 * self.du
    }
}

/// (basin, energy interval) bin index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BinKey {
    pub basin: u32,
    pub interval: u32,
}

impl BinKey {
    fn tag(&self) -> String {
        format!("{}:{}", self.basin, self.interval)
    }

    fn parse(s: &str) -> Option<BinKey> {
        let (b, i) = s.split_once(':')?;
        Some(BinKey {
            basin: b.parse().ok()?,
            interval: i.parse().ok()?,
        })
    }
}

impl Serialize for BinKey {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.tag())
    }
}

impl<'de> Deserialize<'de> for BinKey {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        BinKey::parse(&s).ok_or_else(|| D::Error::custom(format!("bad bin key `{s}`")))
    }
}

/// Adaptive log weights and visit counts per bin. Unseen bins read as
/// log gamma = 0, visits = 0.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GammaTable {
    pub log_gamma: BTreeMap<BinKey, f64>,
    pub visits: BTreeMap<BinKey, u64>,
}

impl GammaTable {
    pub fn log_gamma(&self, key: BinKey) -> f64 {
        self.log_gamma.get(&key).copied().unwrap_or(0.0)
    }

    pub fn visits(&self, key: BinKey) -> u64 {
        self.visits.get(&key).copied().unwrap_or(0)
    }

    pub fn bump(&mut self, key: BinKey, eta: f64) {
        *self.log_gamma.entry(key).or_insert(0.0) += eta;
        *self.visits.entry(key).or_insert(0) += 1;
    }

    /// Table with basin ids remapped; bins that merge accumulate in log
    /// space (gamma values add).
    pub fn resolved(&self, resolve: impl Fn(u32) -> u32) -> GammaTable {
        let mut out = GammaTable::default();
        for (&key, &lg) in &self.log_gamma {
            let rk = BinKey {
                basin: resolve(key.basin),
                interval: key.interval,
            };
            match out.log_gamma.get_mut(&rk) {
                Some(cur) => {
                    let m = cur.max(lg);
                    *cur = m + ((*cur - m).exp() + (lg - m).exp()).ln();
                }
                None => {
                    out.log_gamma.insert(rk, lg);
                }
            }
        }
        for (&key, &v) in &self.visits {
            let rk = BinKey {
                basin: resolve(key.basin),
                interval: key.interval,
            };
            *out.visits.entry(rk).or_insert(0) += v;
        }
        out
    }
}

/// Proposal kernel used for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Random,
    Augmented,
}

/// One chain state transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t: u64,
    pub point: ModelPoint,
    pub bin: BinKey,
    pub energy: f64,
    pub accepted: bool,
    pub kernel: Kernel,
}

/// Append-only chain record; consecutive entries are consecutive states.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SampleLog {
    pub entries: Vec<LogEntry>,
}

impl SampleLog {
    pub fn energies(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.energy).collect()
    }
}

/// Sampler configuration; one seed drives every substream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Energy interval width; zero or absent selects the pilot-scan default
    /// (energy range / 100).
    pub du: f64,
    pub eta0: f64,
    pub flatness: f64,
    pub eta_min: f64,
    pub p_aug0: f64,
    /// Kernel-mixing decay time; zero selects budget / 5.
    pub tau: f64,
    pub budget: u64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            du: 0.0,
            eta0: 1.0,
            flatness: 1.3,
            eta_min: 1e-6,
            p_aug0: 0.5,
            tau: 0.0,
            budget: 10_000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 1 {
            return Err(Error::config("budget must be >= 1"));
        }
        if !(self.eta0 > 0.0) {
            return Err(Error::config("eta0 must be > 0"));
        }
        if self.du < 0.0 {
            return Err(Error::config("du must be >= 0 (0 = auto)"));
        }
        if !(self.flatness >= 1.0) {
            return Err(Error::config("flatness factor must be >= 1"));
        }
        if !(self.eta_min > 0.0) {
            return Err(Error::config("eta_min must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.p_aug0) {
            return Err(Error::config("p_aug0 must be in [0, 1]"));
        }
        if self.tau < 0.0 {
            return Err(Error::config("tau must be >= 0 (0 = budget/5)"));
        }
        Ok(())
    }

    fn tau_effective(&self) -> f64 {
        if self.tau > 0.0 {
            self.tau
        } else {
            (self.budget as f64 / 5.0).max(1.0)
        }
    }
}

/// Serializable part of the sampler (the checkpoint payload).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerState {
    pub current: ModelPoint,
    pub current_energy: f64,
    pub current_bin: BinKey,
    pub t: u64,
    /// Flat-histogram halving track.
    pub eta_halve: f64,
    /// Effective step size actually applied (monotone non-increasing).
    pub eta: f64,
    pub gamma: GammaTable,
    pub grid: EnergyGrid,
    pub window_visits: BTreeMap<BinKey, u64>,
    pub rng: ChaCha8Rng,
    pub accepts: [u64; 2],
    pub proposals: [u64; 2],
    pub pilot_low: f64,
    pub pilot_high: f64,
}

/// A running GWL chain over one model.
pub struct Sampler<'m> {
    pub model: &'m dyn EnergyModel,
    pub cfg: SamplerConfig,
    pub state: SamplerState,
    pub mapper: BasinMapper,
    pub crossings: CrossingStore,
    pub barriers: BarrierTable,
    pub log: SampleLog,
    /// Schedule adaptation on/off (off after freezing).
    pub adapt: bool,
    /// Gamma updates on/off (frozen for flat-histogram verification).
    pub freeze_gamma: bool,
}

impl<'m> Sampler<'m> {
    /// Initializes the chain: pilot scan, uniform start point, first basin
    /// attribution, grid construction. log gamma starts identically zero.
    pub fn init(
        model: &'m dyn EnergyModel,
        cfg: SamplerConfig,
        mut rng: ChaCha8Rng,
        tolerances: Tolerances,
    ) -> Result<Self> {
        cfg.validate()?;
        model.spec().validate()?;
        if !model.spec().bounded {
            return Err(Error::config(format!(
                "model `{}` declares an unbounded space",
                model.spec().name
            )));
        }
        // pilot scan calibrates the interval width and the barrier threshold
        let mut e_low = f64::INFINITY;
        let mut e_high = f64::NEG_INFINITY;
        for _ in 0..PILOT_POINTS {
            let p = model.random_point(&mut rng);
            if let Ok(e) = model.energy(&p) {
                if e.is_finite() {
                    e_low = e_low.min(e);
                    e_high = e_high.max(e);
                }
            }
        }
        if !e_low.is_finite() {
            return Err(Error::config(
                "pilot scan found no finite energies; space appears degenerate",
            ));
        }
        let range = (e_high - e_low).max(0.0);
        let du = if cfg.du > 0.0 {
            cfg.du
        } else if range > 0.0 {
            range / 100.0
        } else {
            1.0
        };

        let mut tol = tolerances;
        tol.energy_scale = range.max(f64::MIN_POSITIVE);
        let mut mapper = BasinMapper::new(tol);

        let current = model.random_point(&mut rng);
        let current_energy = model.energy(&current)?;
        let basin = mapper.attribute(model, &current, 0)?;
        let first_min_energy = mapper
            .registry()
            .get(mapper.resolve(basin))
            .map(|e| e.energy)
            .unwrap_or(current_energy);
        let mut grid = EnergyGrid::new(first_min_energy - 2.0 * du, du)?;
        let current_bin = BinKey {
            basin,
            interval: grid.interval_of(current_energy),
        };
        let state = SamplerState {
            current,
            current_energy,
            current_bin,
            t: 0,
            eta_halve: cfg.eta0,
            eta: cfg.eta0,
            gamma: GammaTable::default(),
            grid,
            window_visits: BTreeMap::new(),
            rng,
            accepts: [0, 0],
            proposals: [0, 0],
            pilot_low: e_low,
            pilot_high: e_high,
        };
        Ok(Sampler {
            model,
            cfg,
            state,
            mapper,
            crossings: CrossingStore::default(),
            barriers: BarrierTable::default(),
            log: SampleLog::default(),
            adapt: true,
            freeze_gamma: false,
        })
    }

    /// Probability of picking the augmented kernel at time t; decays
    /// exponentially so late-stage exploration relies on the random walk.
    pub fn p_aug(&self, t: u64) -> f64 {
        if !self.model.spec().has_augmented_proposal {
            return 0.0;
        }
        self.cfg.p_aug0 * (-(t as f64) / self.cfg.tau_effective()).exp()
    }

    /// log of the Metropolis acceptance probability:
    /// min(0, log_q_ratio + E(x) - E(y) + log gamma(x) - log gamma(y)).
    /// Non-finite candidate energies reject outright.
    pub fn acceptance_log_prob(&self, cand_energy: f64, cand_bin: BinKey, log_q_ratio: f64) -> f64 {
        if !cand_energy.is_finite() {
            return f64::NEG_INFINITY;
        }
        let lg_cur = self.state.gamma.log_gamma(self.state.current_bin);
        let lg_cand = self.state.gamma.log_gamma(cand_bin);
        (log_q_ratio + self.state.current_energy - cand_energy + lg_cur - lg_cand).min(0.0)
    }

    /// Effective eta for the step at time t.
    ///
    /// Flat-histogram halving alone stalls on landscapes with hundreds of
    /// bins (a late-discovered bin keeps the window uneven indefinitely), so
    /// the halving track is combined with a deterministic stochastic-
    /// approximation decay eta0 * t0 / max(t, t0), floored by c0/t and
    /// eta_min and kept monotone.
    fn eta_for_step(&mut self) -> f64 {
        let t = self.state.t.max(1) as f64;
        let t0 = (20.0 * self.state.gamma.log_gamma.len().max(1) as f64).max(1000.0);
        let decay = self.cfg.eta0 * t0 / t.max(t0);
        let target = self
            .state
            .eta_halve
            .min(decay)
            .max(C0 / t)
            .max(self.cfg.eta_min);
        self.state.eta = self.state.eta.min(target);
        self.state.eta
    }

    /// Flat-histogram check over the visit window: when occupied-bin counts
    /// are even enough, halve the step and reset the window.
    pub fn update_schedule(&mut self) {
        let occupied: Vec<u64> = self
            .state
            .window_visits
            .values()
            .copied()
            .filter(|&v| v > 0)
            .collect();
        if occupied.is_empty() {
            return;
        }
        let max = *occupied.iter().max().unwrap() as f64;
        let min = *occupied.iter().min().unwrap() as f64;
        if max / min <= self.cfg.flatness {
            self.state.eta_halve = (self.state.eta_halve / 2.0).max(self.cfg.eta_min);
            self.state.window_visits.clear();
        }
    }

    /// One Metropolis step plus the Wang-Landau weight update. The update
    /// applies to the retained state's bin whether or not the proposal was
    /// accepted.
    pub fn step(&mut self) -> Result<&LogEntry> {
        let t = self.state.t;
        let use_aug = {
            let p = self.p_aug(t);
            p > 0.0 && self.state.rng.random::<f64>() < p
        };
        let kernel = if use_aug {
            Kernel::Augmented
        } else {
            Kernel::Random
        };
        self.state.proposals[kernel as usize] += 1;

        let proposal = if use_aug {
            self.model
                .propose_augmented(&self.state.current, &mut self.state.rng)
        } else {
            self.model
                .propose_random(&self.state.current, &mut self.state.rng)
        };

        let mut accepted = false;
        let mut crossing: Option<(u32, ModelPoint, f64, u32, ModelPoint, f64)> = None;
        if let Ok((cand, log_q_ratio)) = proposal {
            let cand_energy = self.model.energy(&cand).unwrap_or(f64::NAN);
            if cand_energy.is_finite() {
                // attribution failure aborts the step; the chain stays put
                if let Ok(cand_basin) = self.mapper.attribute(self.model, &cand, t) {
                    let cand_bin = BinKey {
                        basin: cand_basin,
                        interval: self.state.grid.interval_of(cand_energy),
                    };
                    let log_alpha = self.acceptance_log_prob(cand_energy, cand_bin, log_q_ratio);
                    let u: f64 = self.state.rng.random();
                    if u.ln() < log_alpha {
                        accepted = true;
                        self.state.accepts[kernel as usize] += 1;
                        if cand_bin.basin != self.state.current_bin.basin {
                            crossing = Some((
                                self.state.current_bin.basin,
                                self.state.current.clone(),
                                self.state.current_energy,
                                cand_bin.basin,
                                cand.clone(),
                                cand_energy,
                            ));
                        }
                        self.state.current = cand;
                        self.state.current_energy = cand_energy;
                        self.state.current_bin = cand_bin;
                    }
                }
            }
        }

        let eta = self.eta_for_step();
        if !self.freeze_gamma {
            self.state.gamma.bump(self.state.current_bin, eta);
        } else {
            *self
                .state
                .gamma
                .visits
                .entry(self.state.current_bin)
                .or_insert(0) += 1;
        }
        *self
            .state
            .window_visits
            .entry(self.state.current_bin)
            .or_insert(0) += 1;
        self.state.t += 1;

        if let Some((ba, a, ea, bb, b, eb)) = crossing {
            self.crossings.record(ba, a, ea, bb, b, eb);
        }
        if self.adapt && self.state.t % CHECK_INTERVAL == 0 {
            self.update_schedule();
        }
        self.log.entries.push(LogEntry {
            t: self.state.t,
            point: self.state.current.clone(),
            bin: self.state.current_bin,
            energy: self.state.current_energy,
            accepted,
            kernel,
        });
        Ok(self.log.entries.last().unwrap())
    }

    /// Runs ridge-descent refinement over all stored crossings.
    pub fn refine_barriers(&mut self) -> Result<()> {
        refine_all(
            &self.crossings,
            &mut self.barriers,
            self.model,
            &mut self.mapper,
            self.cfg.seed,
            self.state.t,
        )
    }

    /// Executes the configured budget with periodic barrier refinement.
    pub fn run(&mut self) -> Result<()> {
        while self.state.t < self.cfg.budget {
            self.step()?;
            if self.state.t % REFINE_CADENCE == 0 {
                self.refine_barriers()?;
            }
        }
        self.refine_barriers()?;
        Ok(())
    }

    /// Stops adaptation and freezes the weights (flat-histogram checks).
    pub fn freeze(&mut self) {
        self.adapt = false;
        self.freeze_gamma = true;
    }
}
