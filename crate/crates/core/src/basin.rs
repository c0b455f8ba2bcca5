//! Basin attribution: descends any point to its local minimum and maintains
//! the registry of distinct minima.
//!
//! Two descended minima denote the same basin when they are closer than the
//! merge tolerance in bound-normalized coordinates, or when the straight
//! line between them carries no energy barrier (flat-bottomed basins would
//! otherwise spawn endless false minima).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{raw_distance, EnergyModel, Encoding, ModelPoint, SpaceKind};

/// Descent and merging tolerances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tolerances {
    /// Bound-normalized gradient norm below which descent stops.
    pub g_tol: f64,
    /// Step size below which descent stops.
    pub s_tol: f64,
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    pub backtrack: f64,
    /// Minima merge radius in bound-normalized coordinates.
    pub merge_eps: f64,
    /// Barrier detection threshold as a fraction of the energy range.
    pub delta_barrier_rel: f64,
    /// Interior samples along the merge segment.
    pub n_line: usize,
    /// Discrete descent moves only on improvements beyond this.
    pub tie_tol: f64,
    /// Energy range of the landscape (set from the pilot scan).
    pub energy_scale: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            g_tol: 1e-6,
            s_tol: 1e-10,
            max_iters: 10_000,
            armijo_c1: 1e-4,
            backtrack: 0.5,
            merge_eps: 1e-2,
            delta_barrier_rel: 1e-6,
            n_line: 50,
            tie_tol: 1e-9,
            energy_scale: 1.0,
        }
    }
}

/// One accepted descent step.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub point: ModelPoint,
    pub energy: f64,
    pub step_size: f64,
}

/// Record of a descent run; energies decrease along `steps`.
#[derive(Debug, Clone)]
pub struct DescentTrace {
    pub steps: Vec<TraceStep>,
    pub converged: bool,
    pub iterations: usize,
}

/// A registered local minimum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinEntry {
    pub id: u32,
    pub location: ModelPoint,
    pub energy: f64,
    pub discovery_t: u64,
    /// Set when this entry was merged into another basin.
    pub alias_of: Option<u32>,
}

/// Registry of discovered minima. Ids are dense and stable; merges record an
/// alias instead of renumbering.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MinimaRegistry {
    pub entries: Vec<MinEntry>,
}

impl MinimaRegistry {
    pub fn resolve(&self, id: u32) -> u32 {
        let mut cur = id;
        loop {
            match self.entries.get(cur as usize).and_then(|e| e.alias_of) {
                Some(next) => cur = next,
                None => return cur,
            }
        }
    }

    pub fn live(&self) -> impl Iterator<Item = &MinEntry> {
        self.entries.iter().filter(|e| e.alias_of.is_none())
    }

    pub fn live_count(&self) -> usize {
        self.live().count()
    }

    pub fn get(&self, id: u32) -> Option<&MinEntry> {
        self.entries.get(id as usize)
    }

    /// Discovery times of all registrations, for convergence monitoring.
    pub fn discovery_times(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.discovery_t).collect()
    }

    pub fn export_json(&self) -> serde_json::Value {
        let items: Vec<serde_json::Value> = self
            .live()
            .map(|e| {
                let aliases: Vec<u32> = self
                    .entries
                    .iter()
                    .filter(|o| o.alias_of.is_some() && self.resolve(o.id) == e.id)
                    .map(|o| o.id)
                    .collect();
                serde_json::json!({
                    "id": e.id,
                    "energy": e.energy,
                    "location": e.location.encoding.to_json_value(),
                    "aliases": aliases,
                })
            })
            .collect();
        serde_json::json!(items)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum MemoKey {
    Cells(Vec<i64>),
    Words(Vec<u8>),
}

/// Outcome of matching a descended point against a frozen registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    Mapped(u32),
    /// Farther than the over-tolerance from every live minimum.
    Unmapped { nearest: u32 },
}

/// Attributes points to basins, registering new minima as they appear.
pub struct BasinMapper {
    pub tol: Tolerances,
    registry: MinimaRegistry,
    memo: HashMap<MemoKey, u32>,
    pub memo_enabled: bool,
}

impl BasinMapper {
    pub fn new(tol: Tolerances) -> Self {
        BasinMapper {
            tol,
            registry: MinimaRegistry::default(),
            memo: HashMap::new(),
            memo_enabled: true,
        }
    }

    pub fn registry(&self) -> &MinimaRegistry {
        &self.registry
    }

    pub fn into_registry(self) -> MinimaRegistry {
        self.registry
    }

    /// Restores a mapper around an existing registry (checkpoint resume).
    pub fn with_registry(tol: Tolerances, registry: MinimaRegistry) -> Self {
        BasinMapper {
            tol,
            registry,
            memo: HashMap::new(),
            memo_enabled: true,
        }
    }

    pub fn resolve(&self, id: u32) -> u32 {
        self.registry.resolve(id)
    }

    /// Projected gradient descent with Armijo backtracking line search.
    pub fn descend_continuous(
        &self,
        model: &dyn EnergyModel,
        start: &ModelPoint,
    ) -> Result<(ModelPoint, f64, DescentTrace)> {
        let widths: Vec<f64> = model
            .coordinate_bounds()
            .iter()
            .map(|&(lo, hi)| (hi - lo).max(f64::MIN_POSITIVE))
            .collect();
        let mut x = model.project(start);
        let mut e = model.energy(&x)?;
        let mut trace = DescentTrace {
            steps: vec![TraceStep {
                point: x.clone(),
                energy: e,
                step_size: 0.0,
            }],
            converged: false,
            iterations: 0,
        };
        let mut t_init = 1.0f64;
        // stagnation window: a descent crawling inside a tiny neighborhood
        // sits at a basin bottom whose conditioning the line search cannot
        // resolve any faster; attribution only needs merge-radius accuracy
        const STALL_WINDOW: usize = 25;
        let mut stall_anchor: Option<(Vec<f64>, f64)> = None;
        for iter in 0..self.tol.max_iters {
            trace.iterations = iter;
            if iter % STALL_WINDOW == 0 {
                let coords = x.coords()?.to_vec();
                if let Some((prev, prev_e)) = stall_anchor.replace((coords.clone(), e)) {
                    let moved: f64 = prev
                        .iter()
                        .zip(&coords)
                        .zip(&widths)
                        .map(|((a, b), w)| ((a - b) / w).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let dropped = prev_e - e;
                    if moved < self.tol.merge_eps / 10.0
                        && dropped < 1e-10 * (1.0 + e.abs())
                    {
                        trace.converged = true;
                        return Ok((x, e, trace));
                    }
                }
            }
            let g = model.gradient(&x)?;
            let gnorm2: f64 = g.iter().map(|v| v * v).sum();
            let scaled_norm: f64 = g
                .iter()
                .zip(&widths)
                .map(|(v, w)| (v * w) * (v * w))
                .sum::<f64>()
                .sqrt();
            if scaled_norm <= self.tol.g_tol {
                trace.converged = true;
                return Ok((x, e, trace));
            }
            let coords = x.coords()?.to_vec();
            // cap the move at 5% of the bound box per iteration so descent
            // follows the gradient flow instead of teleporting across basins
            let gmax_frac = g
                .iter()
                .zip(&widths)
                .map(|(v, w)| (v / w).abs())
                .fold(0.0_f64, f64::max);
            let t_cap = if gmax_frac > 0.0 {
                0.05 / gmax_frac
            } else {
                f64::INFINITY
            };
            let mut t = t_init.min(t_cap);
            loop {
                let stepped: Vec<f64> = coords.iter().zip(&g).map(|(c, gi)| c - t * gi).collect();
                let cand = model.project(&ModelPoint {
                    model_id: x.model_id,
                    encoding: Encoding::Continuous(stepped),
                });
                let e_cand = model.energy(&cand).unwrap_or(f64::INFINITY);
                // decreases below rounding noise would let the search
                // oscillate forever on micro-improvements
                let noise = 32.0 * f64::EPSILON * e.abs().max(1.0);
                if e_cand <= e - (self.tol.armijo_c1 * t * gnorm2).max(noise) {
                    x = cand;
                    e = e_cand;
                    trace.steps.push(TraceStep {
                        point: x.clone(),
                        energy: e,
                        step_size: t,
                    });
                    t_init = (t * 2.0).min(1.0);
                    break;
                }
                t *= self.tol.backtrack;
                if t < self.tol.s_tol {
                    // no acceptable step left: boundary or flat region
                    trace.converged = true;
                    return Ok((x, e, trace));
                }
            }
        }
        trace.iterations = self.tol.max_iters;
        Ok((x, e, trace))
    }

    /// Greedy best-neighbor coordinate descent with lexicographic tie-break.
    pub fn descend_discrete(
        &self,
        model: &dyn EnergyModel,
        start: &ModelPoint,
    ) -> Result<(ModelPoint, f64, DescentTrace)> {
        if let Some(res) = model.descend_hint(start, self.tol.tie_tol) {
            let (point, energy, moves) = res?;
            return Ok((
                point.clone(),
                energy,
                DescentTrace {
                    steps: vec![TraceStep {
                        point,
                        energy,
                        step_size: moves as f64,
                    }],
                    converged: true,
                    iterations: moves,
                },
            ));
        }
        let mut x = start.clone();
        let mut e = model.energy(&x)?;
        let mut trace = DescentTrace {
            steps: vec![TraceStep {
                point: x.clone(),
                energy: e,
                step_size: 0.0,
            }],
            converged: false,
            iterations: 0,
        };
        for iter in 0..self.tol.max_iters {
            trace.iterations = iter;
            let mut best: Option<(f64, Vec<u8>)> = None;
            for nb in model.neighbors(&x)? {
                let e_nb = match model.energy(&nb) {
                    Ok(v) => v,
                    Err(_) => continue,
                };
                let words = nb.words()?.to_vec();
                let better = match &best {
                    None => true,
                    Some((be, bw)) => e_nb.total_cmp(be).then(words.cmp(bw)).is_lt(),
                };
                if better {
                    best = Some((e_nb, words));
                }
            }
            match best {
                Some((be, bw)) if be < e - self.tol.tie_tol => {
                    x = ModelPoint::discrete(x.model_id, bw);
                    e = be;
                    trace.steps.push(TraceStep {
                        point: x.clone(),
                        energy: e,
                        step_size: 1.0,
                    });
                }
                _ => {
                    trace.converged = true;
                    return Ok((x, e, trace));
                }
            }
        }
        trace.iterations = self.tol.max_iters;
        Ok((x, e, trace))
    }

    pub fn descend(
        &self,
        model: &dyn EnergyModel,
        start: &ModelPoint,
    ) -> Result<(ModelPoint, f64, DescentTrace)> {
        match model.spec().kind {
            SpaceKind::Continuous => self.descend_continuous(model, start),
            SpaceKind::Discrete => self.descend_discrete(model, start),
        }
    }

    fn memo_key(&self, model: &dyn EnergyModel, point: &ModelPoint) -> MemoKey {
        match &point.encoding {
            Encoding::Continuous(coords) => {
                let cell = self.tol.merge_eps / 2.0;
                let cells = coords
                    .iter()
                    .zip(model.coordinate_bounds())
                    .map(|(&x, (lo, hi))| {
                        let w = (hi - lo).max(f64::MIN_POSITIVE);
                        (((x - lo) / w) / cell).floor() as i64
                    })
                    .collect();
                MemoKey::Cells(cells)
            }
            Encoding::Discrete(words) => MemoKey::Words(words.clone()),
        }
    }

    /// Center of a quantization cell, projected into bounds. Descending from
    /// the center keeps attribution a pure function of the cell.
    fn cell_start(&self, model: &dyn EnergyModel, key: &MemoKey, point: &ModelPoint) -> ModelPoint {
        match key {
            MemoKey::Cells(cells) => {
                let cell = self.tol.merge_eps / 2.0;
                let coords = cells
                    .iter()
                    .zip(model.coordinate_bounds())
                    .map(|(&c, (lo, hi))| {
                        let w = (hi - lo).max(f64::MIN_POSITIVE);
                        lo + (c as f64 + 0.5) * cell * w
                    })
                    .collect();
                model.project(&ModelPoint::continuous(point.model_id, coords))
            }
            MemoKey::Words(_) => point.clone(),
        }
    }

    /// Basin id of `point`, registering a new minimum when the descent ends
    /// somewhere not yet covered by the merge rules.
    pub fn attribute(
        &mut self,
        model: &dyn EnergyModel,
        point: &ModelPoint,
        t: u64,
    ) -> Result<u32> {
        let key = self.memo_key(model, point);
        if self.memo_enabled {
            if let Some(&id) = self.memo.get(&key) {
                return Ok(self.registry.resolve(id));
            }
        }
        let start = if self.memo_enabled {
            self.cell_start(model, &key, point)
        } else {
            point.clone()
        };
        let (minpt, e, trace) = self.descend(model, &start)?;
        if !trace.converged {
            return Err(Error::DescentNonConvergence(trace.iterations));
        }
        let id = self.match_or_register(model, minpt, e, t)?;
        if self.memo_enabled {
            self.memo.insert(key, id);
        }
        Ok(self.registry.resolve(id))
    }

    /// Matches a frozen registry without registering anything new: nearest
    /// live minimum within the merge radius, else nearest by model distance
    /// with an over-tolerance flag.
    pub fn match_only(&self, model: &dyn EnergyModel, point: &ModelPoint) -> Result<MatchOutcome> {
        let (minpt, _e, trace) = self.descend(model, point)?;
        if !trace.converged {
            return Err(Error::DescentNonConvergence(trace.iterations));
        }
        if self.registry.live_count() == 0 {
            return Err(Error::Empty("registry has no minima".into()));
        }
        let mut best_raw = (f64::INFINITY, 0u32);
        for entry in self.registry.live() {
            let d = raw_distance(model, &minpt, &entry.location);
            if d < best_raw.0 {
                best_raw = (d, entry.id);
            }
        }
        if best_raw.0 < self.tol.merge_eps {
            return Ok(MatchOutcome::Mapped(best_raw.1));
        }
        let mut best_md = (f64::INFINITY, 0u32);
        for entry in self.registry.live() {
            let d = model.model_distance(&minpt, &entry.location)?;
            if d < best_md.0 {
                best_md = (d, entry.id);
            }
        }
        if best_md.0 <= 10.0 * self.tol.merge_eps {
            Ok(MatchOutcome::Mapped(best_md.1))
        } else {
            Ok(MatchOutcome::Unmapped { nearest: best_md.1 })
        }
    }

    fn match_or_register(
        &mut self,
        model: &dyn EnergyModel,
        minpt: ModelPoint,
        energy: f64,
        t: u64,
    ) -> Result<u32> {
        let mut merged: Vec<u32> = Vec::new();
        let live_ids: Vec<u32> = self.registry.live().map(|e| e.id).collect();
        let mut distance_matched = false;
        for &id in &live_ids {
            let d = raw_distance(model, &minpt, &self.registry.entries[id as usize].location);
            if d < self.tol.merge_eps {
                merged.push(id);
                distance_matched = true;
            }
        }
        if !distance_matched {
            for &id in &live_ids {
                let loc = self.registry.entries[id as usize].location.clone();
                if !self.line_barrier_exists(model, &minpt, &loc)? {
                    merged.push(id);
                }
            }
        }
        if merged.is_empty() {
            let id = self.registry.entries.len() as u32;
            self.registry.entries.push(MinEntry {
                id,
                location: minpt,
                energy,
                discovery_t: t,
                alias_of: None,
            });
            return Ok(id);
        }
        merged.sort_unstable();
        let canonical = merged[0];
        for &other in &merged[1..] {
            let (other_e, other_loc) = {
                let e = &self.registry.entries[other as usize];
                (e.energy, e.location.clone())
            };
            self.registry.entries[other as usize].alias_of = Some(canonical);
            if other_e < self.registry.entries[canonical as usize].energy {
                let c = &mut self.registry.entries[canonical as usize];
                c.energy = other_e;
                c.location = other_loc;
            }
        }
        if energy < self.registry.entries[canonical as usize].energy {
            let c = &mut self.registry.entries[canonical as usize];
            c.energy = energy;
            c.location = minpt;
        }
        Ok(canonical)
    }

    /// True when the straight line (continuous) or lexicographic stepping
    /// path (discrete) between `a` and `b` rises above both endpoints by more
    /// than the barrier threshold.
    pub fn line_barrier_exists(
        &self,
        model: &dyn EnergyModel,
        a: &ModelPoint,
        b: &ModelPoint,
    ) -> Result<bool> {
        let e_a = model.energy(a)?;
        let e_b = model.energy(b)?;
        let threshold = e_a.max(e_b) + self.tol.delta_barrier_rel * self.tol.energy_scale.abs();
        let mut max_interior = f64::NEG_INFINITY;
        match (&a.encoding, &b.encoding) {
            (Encoding::Continuous(xa), Encoding::Continuous(xb)) => {
                for i in 1..=self.tol.n_line {
                    let s = i as f64 / (self.tol.n_line + 1) as f64;
                    let coords: Vec<f64> = xa
                        .iter()
                        .zip(xb)
                        .map(|(&u, &v)| u + s * (v - u))
                        .collect();
                    let p = model.project(&ModelPoint::continuous(a.model_id, coords));
                    let e = model.energy(&p).unwrap_or(f64::INFINITY);
                    max_interior = max_interior.max(e);
                    if max_interior > threshold {
                        return Ok(true);
                    }
                }
            }
            (Encoding::Discrete(wa), Encoding::Discrete(wb)) => {
                let mut cur = wa.clone();
                for idx in 0..cur.len() {
                    while cur[idx] != wb[idx] {
                        if cur[idx] < wb[idx] {
                            cur[idx] += 1;
                        } else {
                            cur[idx] -= 1;
                        }
                        if cur.as_slice() == wb.as_slice() {
                            break;
                        }
                        let p = ModelPoint::discrete(a.model_id, cur.clone());
                        let e = model.energy(&p).unwrap_or(f64::INFINITY);
                        max_interior = max_interior.max(e);
                        if max_interior > threshold {
                            return Ok(true);
                        }
                    }
                }
            }
            _ => {
                return Err(Error::ModelMismatch(
                    "line barrier between mixed encodings".into(),
                ))
            }
        }
        Ok(max_interior > threshold)
    }
}
