//! Energy-barrier estimation between basins.
//!
//! The sampler records the lowest-energy consecutive-state pair that crossed
//! each basin pair; ridge descent then walks that pair down the ridge by
//! alternating constrained minimizations until neither side improves,
//! refining the barrier upper bound.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basin::BasinMapper;
use crate::error::Result;
use crate::model::{EnergyModel, Encoding, ModelPoint, SpaceKind};
use crate::rng::substream;

fn pair_key(i: u32, j: u32) -> (u32, u32) {
    (i.min(j), i.max(j))
}

/// JSON-friendly serialization of unordered-pair keyed maps: tuples cannot
/// key JSON objects, so entries flatten to [i, j, value] triples.
mod pair_map {
    use serde::de::{Deserialize, Deserializer};
    use serde::ser::{Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer, V: Serialize>(
        map: &BTreeMap<(u32, u32), V>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let items: Vec<(u32, u32, &V)> = map.iter().map(|(&(i, j), v)| (i, j, v)).collect();
        items.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, V: Deserialize<'de>>(
        de: D,
    ) -> Result<BTreeMap<(u32, u32), V>, D::Error> {
        let items: Vec<(u32, u32, V)> = Vec::deserialize(de)?;
        Ok(items.into_iter().map(|(i, j, v)| ((i, j), v)).collect())
    }
}

/// Lowest-energy crossing pair seen for one basin pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossingPair {
    pub basin_a: u32,
    pub a: ModelPoint,
    pub energy_a: f64,
    pub basin_b: u32,
    pub b: ModelPoint,
    pub energy_b: f64,
    /// min(E(a), E(b)); the retention key.
    pub key_energy: f64,
}

/// Per-pair argmin store of crossing events.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CrossingStore {
    #[serde(with = "pair_map")]
    pub pairs: BTreeMap<(u32, u32), CrossingPair>,
}

impl CrossingStore {
    /// Records a crossing (x_t, x_{t+1}); keeps the pair with the lowest
    /// key energy. Same-basin calls are contract violations and ignored.
    pub fn record(
        &mut self,
        basin_a: u32,
        a: ModelPoint,
        energy_a: f64,
        basin_b: u32,
        b: ModelPoint,
        energy_b: f64,
    ) {
        if basin_a == basin_b {
            log::warn!("crossing recorded within basin {basin_a}; ignored");
            return;
        }
        let key_energy = energy_a.min(energy_b);
        let pair = CrossingPair {
            basin_a,
            a,
            energy_a,
            basin_b,
            b,
            energy_b,
            key_energy,
        };
        let entry = self.pairs.entry(pair_key(basin_a, basin_b));
        match entry {
            std::collections::btree_map::Entry::Occupied(mut o) => {
                if key_energy < o.get().key_energy {
                    o.insert(pair);
                }
            }
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(pair);
            }
        }
    }

    /// Store with basin ids remapped through `resolve`; merged pairs keep the
    /// lowest key energy, self-pairs are dropped.
    pub fn resolved(&self, resolve: impl Fn(u32) -> u32) -> CrossingStore {
        let mut out = CrossingStore::default();
        for pair in self.pairs.values() {
            let (ra, rb) = (resolve(pair.basin_a), resolve(pair.basin_b));
            if ra == rb {
                continue;
            }
            let key = pair_key(ra, rb);
            let mut pair = pair.clone();
            pair.basin_a = ra;
            pair.basin_b = rb;
            match out.pairs.get(&key) {
                Some(existing) if existing.key_energy <= pair.key_energy => {}
                _ => {
                    out.pairs.insert(key, pair);
                }
            }
        }
        out
    }
}

/// Barrier upper bound for one basin pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarrierEntry {
    pub point: ModelPoint,
    pub energy: f64,
    /// Sampler time of the last strict improvement.
    pub updated_t: u64,
    /// Key energy of the crossing pair this entry was refined from.
    pub refined_from: f64,
}

/// Unordered-pair keyed table of barrier upper bounds; entries only decrease.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BarrierTable {
    #[serde(with = "pair_map")]
    pub entries: BTreeMap<(u32, u32), BarrierEntry>,
}

impl BarrierTable {
    pub fn get(&self, i: u32, j: u32) -> Option<&BarrierEntry> {
        self.entries.get(&pair_key(i, j))
    }

    /// Inserts downward: the entry only changes if `energy` improves it.
    fn offer(&mut self, i: u32, j: u32, point: ModelPoint, energy: f64, refined_from: f64, t: u64) {
        let key = pair_key(i, j);
        match self.entries.get_mut(&key) {
            Some(e) => {
                e.refined_from = refined_from;
                if energy < e.energy {
                    e.point = point;
                    e.energy = energy;
                    e.updated_t = t;
                }
            }
            None => {
                self.entries.insert(
                    key,
                    BarrierEntry {
                        point,
                        energy,
                        updated_t: t,
                        refined_from,
                    },
                );
            }
        }
    }

    /// Table with basin ids remapped; merged pairs keep the lower barrier.
    pub fn resolved(&self, resolve: impl Fn(u32) -> u32) -> BarrierTable {
        let mut out = BarrierTable::default();
        for (&(i, j), e) in &self.entries {
            let (ri, rj) = (resolve(i), resolve(j));
            if ri == rj {
                continue;
            }
            let key = pair_key(ri, rj);
            match out.entries.get(&key) {
                Some(cur) if cur.energy <= e.energy => {}
                _ => {
                    out.entries.insert(key, e.clone());
                }
            }
        }
        out
    }

    pub fn last_update_t(&self) -> u64 {
        self.entries.values().map(|e| e.updated_t).max().unwrap_or(0)
    }

    pub fn export_json(&self) -> serde_json::Value {
        let items: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|(&(i, j), e)| {
                serde_json::json!({
                    "i": i,
                    "j": j,
                    "energy": e.energy,
                    "point": e.point.encoding.to_json_value(),
                })
            })
            .collect();
        serde_json::json!(items)
    }
}

const N_RING: usize = 24;
const MAX_ROUNDS: usize = 100;

/// Samples a point uniformly in the bound-normalized ball of radius `r`
/// around `center` (continuous models).
fn sample_in_ball(
    model: &dyn EnergyModel,
    center: &ModelPoint,
    r: f64,
    rng: &mut ChaCha8Rng,
) -> ModelPoint {
    let coords = center.coords().expect("continuous point");
    let bounds = model.coordinate_bounds();
    let dim = coords.len();
    let mut dir: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let radius = r * rng.random::<f64>().powf(1.0 / dim as f64);
    for d in dir.iter_mut() {
        *d *= radius / norm;
    }
    let stepped: Vec<f64> = coords
        .iter()
        .zip(&dir)
        .zip(&bounds)
        .map(|((&c, &d), &(lo, hi))| c + d * (hi - lo))
        .collect();
    model.project(&ModelPoint {
        model_id: center.model_id,
        encoding: Encoding::Continuous(stepped),
    })
}

/// Best in-basin point of a sampled neighborhood; shrinks the radius until
/// the target basin is hit, doubles it (capped) after success.
fn constrained_min(
    model: &dyn EnergyModel,
    mapper: &mut BasinMapper,
    center: &ModelPoint,
    target_basin: u32,
    r: &mut f64,
    r_cap: f64,
    rng: &mut ChaCha8Rng,
    t: u64,
) -> Result<Option<(ModelPoint, f64)>> {
    loop {
        let mut best: Option<(ModelPoint, f64)> = None;
        match model.spec().kind {
            SpaceKind::Continuous => {
                for _ in 0..N_RING {
                    let cand = sample_in_ball(model, center, *r, rng);
                    let Ok(e) = model.energy(&cand) else { continue };
                    if !e.is_finite() {
                        continue;
                    }
                    let Ok(basin) = mapper.attribute(model, &cand, t) else {
                        continue;
                    };
                    if basin != target_basin {
                        continue;
                    }
                    if best.as_ref().map(|(_, be)| e < *be).unwrap_or(true) {
                        best = Some((cand, e));
                    }
                }
            }
            SpaceKind::Discrete => {
                for cand in model.neighbors(center)? {
                    let Ok(e) = model.energy(&cand) else { continue };
                    if !e.is_finite() {
                        continue;
                    }
                    let Ok(basin) = mapper.attribute(model, &cand, t) else {
                        continue;
                    };
                    if basin != target_basin {
                        continue;
                    }
                    if best.as_ref().map(|(_, be)| e < *be).unwrap_or(true) {
                        best = Some((cand, e));
                    }
                }
                return Ok(best);
            }
        }
        match best {
            Some(found) => {
                *r = (*r * 2.0).min(r_cap);
                return Ok(Some(found));
            }
            None => {
                *r /= 2.0;
                if *r < 1e-9 * r_cap.max(1e-12) {
                    return Ok(None);
                }
            }
        }
    }
}

/// Ridge descent from a crossing pair (a0 in basin k, b0 in basin l).
/// Returns the refined barrier point and energy.
/// Contracts a crossing pair onto the basin boundary. Continuous models
/// bisect the straight segment on basin attribution; discrete models walk
/// the lexicographic stepping path until the basin changes.
fn straddle_boundary(
    model: &dyn EnergyModel,
    mapper: &mut BasinMapper,
    pair: &CrossingPair,
    basin_k: u32,
    basin_l: u32,
    t: u64,
) -> Result<(ModelPoint, f64, ModelPoint, f64)> {
    match model.spec().kind {
        SpaceKind::Continuous => {
            let xa = pair.a.coords()?.to_vec();
            let xb = pair.b.coords()?.to_vec();
            let point_at = |s: f64| {
                let coords: Vec<f64> = xa
                    .iter()
                    .zip(&xb)
                    .map(|(&u, &v)| u + s * (v - u))
                    .collect();
                model.project(&ModelPoint::continuous(pair.a.model_id, coords))
            };
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                let p = point_at(mid);
                match mapper.attribute(model, &p, t) {
                    Ok(basin) if basin == basin_k => lo = mid,
                    Ok(basin) if basin == basin_l => hi = mid,
                    // a third basin or a failed descent: hug the k side
                    _ => hi = mid,
                }
            }
            let a = point_at(lo);
            let b = point_at(hi);
            let ea = model.energy(&a)?;
            let eb = model.energy(&b)?;
            Ok((a, ea, b, eb))
        }
        SpaceKind::Discrete => {
            let wa = pair.a.words()?.to_vec();
            let wb = pair.b.words()?;
            let mut prev = pair.a.clone();
            let mut prev_e = pair.energy_a;
            let mut cur = wa.clone();
            for idx in 0..cur.len() {
                while cur[idx] != wb[idx] {
                    if cur[idx] < wb[idx] {
                        cur[idx] += 1;
                    } else {
                        cur[idx] -= 1;
                    }
                    let p = ModelPoint::discrete(pair.a.model_id, cur.clone());
                    let Ok(e) = model.energy(&p) else {
                        continue;
                    };
                    match mapper.attribute(model, &p, t) {
                        Ok(basin) if basin == basin_k => {
                            prev = p;
                            prev_e = e;
                        }
                        Ok(_) => return Ok((prev, prev_e, p, e)),
                        Err(_) => continue,
                    }
                }
            }
            Ok((prev, prev_e, pair.b.clone(), pair.energy_b))
        }
    }
}

/// Ridge descent from a crossing pair (a0 in basin k, b0 in basin l).
/// Returns the refined barrier point and energy.
///
/// The pair is first contracted onto the basin boundary, then walked down
/// the ridge by alternating constrained argmins (each side replaced by the
/// best in-basin point near the other side); once the walk stalls the
/// neighborhood radius shrinks so the final pair hugs the saddle.
pub fn ridge_descent(
    model: &dyn EnergyModel,
    mapper: &mut BasinMapper,
    pair: &CrossingPair,
    basin_k: u32,
    basin_l: u32,
    rng: &mut ChaCha8Rng,
    t: u64,
) -> Result<(ModelPoint, f64)> {
    let gap = crate::model::raw_distance(model, &pair.a, &pair.b);
    let (mut a, mut ea, mut b, mut eb) =
        straddle_boundary(model, mapper, pair, basin_k, basin_l, t)?;
    let r_cap = (gap / 2.0).max(1e-4);
    let mut r = r_cap;
    let mut last_est = ea.max(eb);
    let mut stale = 0usize;
    for _ in 0..MAX_ROUNDS {
        match constrained_min(model, mapper, &b, basin_k, &mut r, r_cap, rng, t)? {
            Some((cand, e)) => {
                a = cand;
                ea = e;
            }
            None => break,
        }
        let moved = match constrained_min(model, mapper, &a, basin_l, &mut r, r_cap, rng, t)? {
            Some((cand, e)) => {
                let moved = crate::model::raw_distance(model, &cand, &b) > 1e-9;
                b = cand;
                eb = e;
                moved
            }
            None => break,
        };
        let est = ea.max(eb);
        if est < last_est - 1e-12 * (1.0 + last_est.abs()) {
            stale = 0;
        } else {
            stale += 1;
            // walk has stalled; shrink the neighborhood to tighten the hug
            r /= 2.0;
        }
        last_est = est;
        if !moved || r < 1e-3 * r_cap || stale >= 8 {
            break;
        }
    }
    if ea >= eb {
        Ok((a, ea))
    } else {
        Ok((b, eb))
    }
}

/// Refines every stored crossing pair whose best pair changed since the last
/// refinement; table entries only move downward and never drop below either
/// basin's minimum energy.
pub fn refine_all(
    store: &CrossingStore,
    table: &mut BarrierTable,
    model: &dyn EnergyModel,
    mapper: &mut BasinMapper,
    seed: u64,
    t: u64,
) -> Result<()> {
    let resolved = store.resolved(|id| mapper.resolve(id));
    for (&(i, j), pair) in &resolved.pairs {
        if let Some(existing) = table.get(i, j) {
            if existing.refined_from == pair.key_energy {
                continue;
            }
        }
        let mut rng = substream(
            seed,
            &format!("ridge-{i}-{j}-{:x}", pair.key_energy.to_bits()),
        );
        let (point, energy) = match ridge_descent(
            model,
            mapper,
            pair,
            pair.basin_a,
            pair.basin_b,
            &mut rng,
            t,
        ) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("ridge descent for ({i},{j}) failed: {e}; keeping crossing bound");
                (pair.b.clone(), pair.energy_a.max(pair.energy_b))
            }
        };
        // validity: a barrier cannot sit below either basin minimum
        let floor = [i, j]
            .iter()
            .filter_map(|&id| mapper.registry().get(id).map(|e| e.energy))
            .fold(f64::NEG_INFINITY, f64::max);
        let energy = energy.max(floor);
        table.offer(i, j, point, energy, pair.key_energy, t);
    }
    Ok(())
}
