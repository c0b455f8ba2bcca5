//! Mixture-of-Bernoulli-templates energy over a discretized parameter space.
//!
//! A model point is K binary templates of n bits plus K mixture weights on
//! the grid {0, 0.1, ..., 1.0}. Data bits match the owning template with
//! probability p and flip with probability 1 - p; the paper's text and figure
//! captions use p in opposite senses, so the public surface only speaks of
//! `flip_prob = 1 - p`.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, EnergyModel, ModelPoint, ModelSpec, SpaceKind};
use crate::rng::fnv1a64;

/// Weight grid resolution: weights are multiples of 1/WEIGHT_STEPS.
pub const WEIGHT_STEPS: u8 = 10;

/// Template file format: bitstrings plus grid weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateFile {
    pub n: usize,
    pub templates: Vec<String>,
    pub alphas: Vec<f64>,
    pub flip_prob: f64,
}

impl TemplateFile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tf: TemplateFile = serde_json::from_str(&text)?;
        tf.validate()?;
        Ok(tf)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Empty("template file has no templates".into()));
        }
        if self.templates.iter().any(|t| t.len() != self.n) {
            return Err(Error::config("template bitstring length != n"));
        }
        if self
            .templates
            .iter()
            .any(|t| t.bytes().any(|b| b != b'0' && b != b'1'))
        {
            return Err(Error::config("templates must be 0/1 strings"));
        }
        if self.alphas.len() != self.templates.len() {
            return Err(Error::config("one alpha per template required"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn bits(&self) -> Vec<Vec<u8>> {
        self.templates
            .iter()
            .map(|t| t.bytes().map(|b| b - b'0').collect())
            .collect()
    }

    /// Weights as grid steps (tenths), largest-remainder rounded to sum 10.
    pub fn grid_weights(&self) -> Vec<u8> {
        round_to_grid(&self.alphas)
    }
}

/// Largest-remainder rounding of a non-negative vector onto the grid of
/// tenths summing to exactly 1.0. Ties go to the lower index.
pub fn round_to_grid(weights: &[f64]) -> Vec<u8> {
    let total: f64 = weights.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let scaled: Vec<f64> = weights
        .iter()
        .map(|w| w.max(0.0) / total * WEIGHT_STEPS as f64)
        .collect();
    let mut out: Vec<u8> = scaled.iter().map(|s| s.floor() as u8).collect();
    let assigned: u8 = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = WEIGHT_STEPS.saturating_sub(assigned);
    for &i in &order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

enum Move {
    Flip { comp: usize, bit: usize },
    Transfer { from: usize, to: usize },
}

pub struct BernoulliModel {
    k: usize,
    n: usize,
    data: Vec<Vec<u8>>,
    /// Probability that a data bit equals the template bit (1 - flip_prob).
    p_match: f64,
    spec: ModelSpec,
}

impl BernoulliModel {
    pub fn new(dataset: &Dataset, k: usize, flip_prob: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("K must be >= 1"));
        }
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(Error::config("flip_prob must be in [0, 1]"));
        }
        dataset.validate()?;
        let data: Vec<Vec<u8>> = dataset
            .points
            .iter()
            .map(|p| {
                p.iter()
                    .map(|&v| {
                        if v == 0.0 {
                            Ok(0u8)
                        } else if v == 1.0 {
                            Ok(1u8)
                        } else {
                            Err(Error::config("sketch data must be 0/1"))
                        }
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let n = data[0].len();
        let name = format!("bernoulli-k{k}-n{n}");
        let spec = ModelSpec {
            id: fnv1a64(format!("{name}-m{}", data.len()).as_bytes()),
            name,
            kind: SpaceKind::Discrete,
            dimension: k * n + k,
            bounds: format!("{k} templates of {n} bits, weights on tenths grid"),
            bounded: true,
            has_gradient: false,
            has_augmented_proposal: true,
        };
        Ok(BernoulliModel {
            k,
            n,
            data,
            p_match: 1.0 - flip_prob,
            spec,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.data.len()
    }

    pub fn flip_prob(&self) -> f64 {
        1.0 - self.p_match
    }

    pub fn point_from(&self, templates: &[Vec<u8>], grid_weights: &[u8]) -> Result<ModelPoint> {
        if templates.len() != self.k || grid_weights.len() != self.k {
            return Err(Error::config("template/weight count must equal K"));
        }
        let mut words = Vec::with_capacity(self.spec.dimension);
        for t in templates {
            if t.len() != self.n {
                return Err(Error::config("template length must equal n"));
            }
            words.extend_from_slice(t);
        }
        words.extend_from_slice(grid_weights);
        let p = ModelPoint::discrete(self.spec.id, words);
        if !self.in_bounds(&p) {
            return Err(Error::config("point violates Bernoulli bounds"));
        }
        Ok(p)
    }

    fn split<'a>(&self, words: &'a [u8]) -> (&'a [u8], &'a [u8]) {
        words.split_at(self.k * self.n)
    }

    /// Per-(point, component) log likelihood of the bit pattern.
    fn loglik(&self, bits: &[u8], comp: usize, point_idx: usize) -> f64 {
        let tpl = &bits[comp * self.n..(comp + 1) * self.n];
        let row = &self.data[point_idx];
        let mut mismatches = 0usize;
        for j in 0..self.n {
            if row[j] != tpl[j] {
                mismatches += 1;
            }
        }
        let matches = self.n - mismatches;
        // p in {0, 1} degenerates to a match indicator; keep 0 * ln 0 = 0
        let mut acc = 0.0;
        if matches > 0 {
            acc += matches as f64 * self.p_match.ln();
        }
        if mismatches > 0 {
            acc += mismatches as f64 * (1.0 - self.p_match).ln();
        }
        acc
    }

    fn scratch(&self, point: &ModelPoint) -> Result<BtScratch> {
        let words = point.words()?;
        if words.len() != self.spec.dimension {
            return Err(Error::config("encoding length mismatch"));
        }
        let (bits, wts) = self.split(words);
        let m = self.data.len();
        let mut ell = vec![0.0; m * self.k];
        for i in 0..m {
            for kk in 0..self.k {
                ell[i * self.k + kk] = self.loglik(bits, kk, i);
            }
        }
        let log_a: Vec<f64> = wts
            .iter()
            .map(|&w| (w as f64 / WEIGHT_STEPS as f64).ln())
            .collect();
        let mut scratch = BtScratch {
            ell,
            log_a,
            lse: vec![0.0; m],
            energy: 0.0,
        };
        scratch.refresh(self.k)?;
        Ok(scratch)
    }

    fn delta_mismatch(&self) -> f64 {
        // cost of one bit turning from match to mismatch
        (1.0 - self.p_match).ln() - self.p_match.ln()
    }

    /// Responsibilities r_ik under the given point.
    fn responsibilities(&self, scratch: &BtScratch) -> Vec<f64> {
        let m = self.data.len();
        let mut resp = vec![0.0; m * self.k];
        for i in 0..m {
            for kk in 0..self.k {
                let la = scratch.log_a[kk] + scratch.ell[i * self.k + kk];
                resp[i * self.k + kk] = (la - scratch.lse[i]).exp();
            }
        }
        resp
    }

    fn move_count(&self, wts: &[u8]) -> usize {
        let donors = wts.iter().filter(|&&w| w >= 1).count();
        self.k * self.n + donors * (self.k - 1)
    }

    fn nth_move(&self, wts: &[u8], idx: usize) -> Result<Move> {
        if idx < self.k * self.n {
            return Ok(Move::Flip {
                comp: idx / self.n,
                bit: idx % self.n,
            });
        }
        let mut rest = idx - self.k * self.n;
        for from in 0..self.k {
            if wts[from] == 0 {
                continue;
            }
            if rest < self.k - 1 {
                let mut to = rest;
                if to >= from {
                    to += 1;
                }
                return Ok(Move::Transfer { from, to });
            }
            rest -= self.k - 1;
        }
        Err(Error::config("neighbor index out of range"))
    }

    fn apply_move(&self, words: &[u8], mv: &Move) -> Vec<u8> {
        let mut out = words.to_vec();
        match *mv {
            Move::Flip { comp, bit } => {
                let idx = comp * self.n + bit;
                out[idx] = 1 - out[idx];
            }
            Move::Transfer { from, to } => {
                out[self.k * self.n + from] -= 1;
                out[self.k * self.n + to] += 1;
            }
        }
        out
    }
}

struct BtScratch {
    /// m x k per-point per-component bit log likelihoods.
    ell: Vec<f64>,
    log_a: Vec<f64>,
    lse: Vec<f64>,
    energy: f64,
}

impl BtScratch {
    fn refresh(&mut self, k: usize) -> Result<()> {
        let m = self.lse.len();
        let mut total = 0.0;
        for i in 0..m {
            let mut best = f64::NEG_INFINITY;
            for kk in 0..k {
                let la = self.log_a[kk] + self.ell[i * k + kk];
                if la > best {
                    best = la;
                }
            }
            let lse = if best == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let mut s = 0.0;
                for kk in 0..k {
                    s += (self.log_a[kk] + self.ell[i * k + kk] - best).exp();
                }
                best + s.ln()
            };
            self.lse[i] = lse;
            total -= lse;
        }
        self.energy = total;
        if !self.energy.is_finite() {
            return Err(Error::evaluation("non-finite Bernoulli energy"));
        }
        Ok(())
    }
}

impl EnergyModel for BernoulliModel {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn energy(&self, point: &ModelPoint) -> Result<f64> {
        let words = point.words()?;
        if words.len() != self.spec.dimension {
            return Err(Error::config("encoding length mismatch"));
        }
        let (bits, wts) = self.split(words);
        let mut total = 0.0;
        let log_a: Vec<f64> = wts
            .iter()
            .map(|&w| (w as f64 / WEIGHT_STEPS as f64).ln())
            .collect();
        let mut terms = vec![0.0; self.k];
        for i in 0..self.data.len() {
            for kk in 0..self.k {
                terms[kk] = log_a[kk] + self.loglik(bits, kk, i);
            }
            let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if m == f64::NEG_INFINITY {
                return Err(Error::evaluation(
                    "data point has zero likelihood under every component",
                ));
            }
            let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            total -= lse;
        }
        if !total.is_finite() {
            return Err(Error::evaluation("non-finite Bernoulli energy"));
        }
        Ok(total)
    }

    fn project(&self, point: &ModelPoint) -> ModelPoint {
        // lattice points are either valid or rejected at construction
        point.clone()
    }

    fn in_bounds(&self, point: &ModelPoint) -> bool {
        let Ok(words) = point.words() else {
            return false;
        };
        if words.len() != self.spec.dimension {
            return false;
        }
        let (bits, wts) = self.split(words);
        bits.iter().all(|&b| b <= 1)
            && wts.iter().all(|&w| w <= WEIGHT_STEPS)
            && wts.iter().map(|&w| w as u32).sum::<u32>() == WEIGHT_STEPS as u32
    }

    fn neighbors(&self, point: &ModelPoint) -> Result<Vec<ModelPoint>> {
        let words = point.words()?;
        let (_, wts) = self.split(words);
        let count = self.move_count(wts);
        let mut out = Vec::with_capacity(count);
        for idx in 0..count {
            let mv = self.nth_move(wts, idx)?;
            out.push(ModelPoint::discrete(self.spec.id, self.apply_move(words, &mv)));
        }
        Ok(out)
    }

    fn neighbor_count(&self, point: &ModelPoint) -> Result<usize> {
        let words = point.words()?;
        let (_, wts) = self.split(words);
        Ok(self.move_count(wts))
    }

    fn nth_neighbor(&self, point: &ModelPoint, idx: usize) -> Result<ModelPoint> {
        let words = point.words()?;
        let (_, wts) = self.split(words);
        let mv = self.nth_move(wts, idx)?;
        Ok(ModelPoint::discrete(self.spec.id, self.apply_move(words, &mv)))
    }

    fn coordinate_bounds(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 1.0); self.k * self.n];
        out.extend(vec![(0.0, WEIGHT_STEPS as f64); self.k]);
        out
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> ModelPoint {
        let mut words = Vec::with_capacity(self.spec.dimension);
        for _ in 0..self.k * self.n {
            words.push(if rng.random::<f64>() < 0.5 { 1 } else { 0 });
        }
        words.extend(random_composition(self.k, WEIGHT_STEPS, rng));
        ModelPoint::discrete(self.spec.id, words)
    }

    fn propose_augmented(
        &self,
        point: &ModelPoint,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ModelPoint, f64)> {
        if !(self.p_match > 0.0 && self.p_match < 1.0) {
            return Err(Error::unsupported(
                "augmented proposal requires 0 < flip_prob < 1",
            ));
        }
        let words = point.words()?;
        let scratch = self.scratch(point)?;
        let resp = self.responsibilities(&scratch);
        let m = self.data.len();

        // 1. latent template assignments
        let mut assign = vec![0usize; m];
        let mut log_p_z_x = 0.0;
        for i in 0..m {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.k - 1;
            for kk in 0..self.k {
                acc += resp[i * self.k + kk];
                if u < acc {
                    pick = kk;
                    break;
                }
            }
            assign[i] = pick;
            log_p_z_x += resp[i * self.k + pick].max(f64::MIN_POSITIVE).ln();
        }

        // 2. per-bit posterior for each template given its members
        let mut counts = vec![0usize; self.k];
        let mut ones = vec![0usize; self.k * self.n];
        for (i, &kk) in assign.iter().enumerate() {
            counts[kk] += 1;
            for j in 0..self.n {
                ones[kk * self.n + j] += self.data[i][j] as usize;
            }
        }
        let lp = self.p_match.ln();
        let lq = (1.0 - self.p_match).ln();
        let mut new_words = words.to_vec();
        let mut log_p_bits = 0.0;
        let mut bit_prob_one = vec![0.5; self.k * self.n];
        for kk in 0..self.k {
            for j in 0..self.n {
                let c1 = ones[kk * self.n + j] as f64;
                let c0 = counts[kk] as f64 - c1;
                let l1 = c1 * lp + c0 * lq;
                let l0 = c0 * lp + c1 * lq;
                let p1 = 1.0 / (1.0 + (l0 - l1).exp());
                bit_prob_one[kk * self.n + j] = p1;
                let bit = if rng.random::<f64>() < p1 { 1u8 } else { 0u8 };
                new_words[kk * self.n + j] = bit;
                log_p_bits += if bit == 1 {
                    p1.max(f64::MIN_POSITIVE).ln()
                } else {
                    (1.0 - p1).max(f64::MIN_POSITIVE).ln()
                };
            }
        }

        // 3. weights: deterministic grid rounding of the member counts
        let fracs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let grid = round_to_grid(&fracs);
        new_words[self.k * self.n..].copy_from_slice(&grid);

        let cand = ModelPoint::discrete(self.spec.id, new_words);

        // reverse factors under the same Z: labels from the candidate's
        // responsibilities, current bits from the same per-bit posterior
        let cand_scratch = self.scratch(&cand)?;
        let cand_resp = self.responsibilities(&cand_scratch);
        let mut log_p_z_y = 0.0;
        for i in 0..m {
            log_p_z_y += cand_resp[i * self.k + assign[i]]
                .max(f64::MIN_POSITIVE)
                .ln();
        }
        let mut log_p_bits_rev = 0.0;
        for idx in 0..self.k * self.n {
            let p1 = bit_prob_one[idx];
            log_p_bits_rev += if words[idx] == 1 {
                p1.max(f64::MIN_POSITIVE).ln()
            } else {
                (1.0 - p1).max(f64::MIN_POSITIVE).ln()
            };
        }
        let log_q_ratio = (log_p_z_y + log_p_bits_rev) - (log_p_z_x + log_p_bits);
        Ok((cand, log_q_ratio))
    }

    fn model_distance(&self, a: &ModelPoint, b: &ModelPoint) -> Result<f64> {
        let (wa, wb) = (a.words()?, b.words()?);
        let (bits_a, wts_a) = self.split(wa);
        let (bits_b, wts_b) = self.split(wb);
        let cost = |i: usize, j: usize| -> f64 {
            let ta = &bits_a[i * self.n..(i + 1) * self.n];
            let tb = &bits_b[j * self.n..(j + 1) * self.n];
            let ham = ta
                .iter()
                .zip(tb)
                .filter(|(x, y)| x != y)
                .count() as f64
                / self.n as f64;
            let dw = (wts_a[i] as f64 - wts_b[j] as f64).abs() / WEIGHT_STEPS as f64;
            ham / self.k as f64 + dw
        };
        if self.k <= 8 {
            let mut perm: Vec<usize> = (0..self.k).collect();
            let mut best = f64::INFINITY;
            permute_visit(&mut perm, 0, &mut |p| {
                let total: f64 = (0..self.k).map(|i| cost(i, p[i])).sum();
                if total < best {
                    best = total;
                }
            });
            Ok(best)
        } else {
            let mut used = vec![false; self.k];
            let mut total = 0.0;
            for i in 0..self.k {
                let (j, c) = (0..self.k)
                    .filter(|&j| !used[j])
                    .map(|j| (j, cost(i, j)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                used[j] = true;
                total += c;
            }
            Ok(total)
        }
    }

    fn descend_hint(
        &self,
        start: &ModelPoint,
        tie_tol: f64,
    ) -> Option<Result<(ModelPoint, f64, usize)>> {
        if !(self.p_match > 0.0 && self.p_match < 1.0) {
            return None;
        }
        Some(self.descend_fast(start, tie_tol))
    }
}

impl BernoulliModel {
    /// Greedy best-improvement coordinate descent with incremental energy
    /// deltas. Matches the generic routine's semantics: move only when the
    /// best neighbor improves by more than `tie_tol`, ties broken by
    /// lexicographic encoding order.
    fn descend_fast(&self, start: &ModelPoint, tie_tol: f64) -> Result<(ModelPoint, f64, usize)> {
        let mut words = start.words()?.to_vec();
        if words.len() != self.spec.dimension {
            return Err(Error::config("encoding length mismatch"));
        }
        let mut scratch = self.scratch(start)?;
        let m = self.data.len();
        let k = self.k;
        let d_mis = self.delta_mismatch();
        let mut moves_made = 0usize;
        let max_moves = 20 * self.spec.dimension + 100;

        loop {
            if moves_made > max_moves {
                return Err(Error::DescentNonConvergence(moves_made));
            }
            let (bits, wts) = words.split_at(k * self.n);
            let mut deltas: Vec<(f64, usize)> = Vec::with_capacity(self.move_count(wts));

            // bit flips: only component `comp`'s term changes per point
            for comp in 0..k {
                let la_base = scratch.log_a[comp];
                for bit in 0..self.n {
                    let tpl_bit = bits[comp * self.n + bit];
                    let mut delta = 0.0;
                    for i in 0..m {
                        let la = la_base + scratch.ell[i * k + comp];
                        let sign = if self.data[i][bit] == tpl_bit {
                            d_mis
                        } else {
                            -d_mis
                        };
                        let w = (la - scratch.lse[i]).exp();
                        // lse' = lse + ln(1 + w * (exp(sign) - 1))
                        let grow = w * (sign.exp() - 1.0);
                        let new_lse = if grow <= -1.0 {
                            f64::NEG_INFINITY
                        } else {
                            scratch.lse[i] + grow.ln_1p()
                        };
                        delta -= new_lse - scratch.lse[i];
                    }
                    deltas.push((delta, comp * self.n + bit));
                }
            }
            // weight transfers: two mixture terms change per point
            let mut move_idx = k * self.n;
            for from in 0..k {
                if wts[from] == 0 {
                    continue;
                }
                for to in 0..k {
                    if to == from {
                        continue;
                    }
                    let la_from_new = ((wts[from] - 1) as f64 / WEIGHT_STEPS as f64).ln();
                    let la_to_new = ((wts[to] + 1) as f64 / WEIGHT_STEPS as f64).ln();
                    let mut delta = 0.0;
                    for i in 0..m {
                        let mut best = f64::NEG_INFINITY;
                        let mut terms = [0.0f64; 16];
                        for kk in 0..k {
                            let la = if kk == from {
                                la_from_new + scratch.ell[i * k + kk]
                            } else if kk == to {
                                la_to_new + scratch.ell[i * k + kk]
                            } else {
                                scratch.log_a[kk] + scratch.ell[i * k + kk]
                            };
                            terms[kk.min(15)] = la;
                            if la > best {
                                best = la;
                            }
                        }
                        let new_lse = if best == f64::NEG_INFINITY {
                            f64::NEG_INFINITY
                        } else {
                            let mut s = 0.0;
                            for kk in 0..k {
                                s += (terms[kk.min(15)] - best).exp();
                            }
                            best + s.ln()
                        };
                        delta -= new_lse - scratch.lse[i];
                    }
                    deltas.push((delta, move_idx));
                    move_idx += 1;
                }
            }

            let best_delta = deltas
                .iter()
                .map(|(d, _)| *d)
                .fold(f64::INFINITY, f64::min);
            if !(best_delta < -tie_tol) {
                break;
            }
            // near-ties resolved exactly like the generic path: smallest
            // resulting encoding wins
            let margin = 1e-12 * (1.0 + scratch.energy.abs());
            let mut chosen: Option<(Vec<u8>, usize)> = None;
            for &(d, idx) in &deltas {
                if d <= best_delta + margin {
                    let mv = self.nth_move(wts, idx)?;
                    let cand = self.apply_move(&words, &mv);
                    if chosen.as_ref().map(|(w, _)| cand < *w).unwrap_or(true) {
                        chosen = Some((cand, idx));
                    }
                }
            }
            let (new_words, idx) = chosen.expect("non-empty candidate set");
            // apply incrementally
            if idx < k * self.n {
                let comp = idx / self.n;
                let bit = idx % self.n;
                let old_bit = words[idx];
                for i in 0..m {
                    let sign = if self.data[i][bit] == old_bit {
                        d_mis
                    } else {
                        -d_mis
                    };
                    scratch.ell[i * k + comp] += sign;
                }
            } else {
                let (_, new_wts) = new_words.split_at(k * self.n);
                for kk in 0..k {
                    scratch.log_a[kk] = (new_wts[kk] as f64 / WEIGHT_STEPS as f64).ln();
                }
            }
            words = new_words;
            scratch.refresh(k)?;
            moves_made += 1;
        }
        let point = ModelPoint::discrete(self.spec.id, words);
        // exact recompute guards against incremental drift
        let energy = self.energy(&point)?;
        Ok((point, energy, moves_made))
    }
}

fn permute_visit(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute_visit(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// Uniform random composition of `total` into `k` non-negative parts via the
/// stars-and-bars bijection.
fn random_composition(k: usize, total: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    if k == 1 {
        return vec![total];
    }
    let slots = total as usize + k - 1;
    let mut bars: Vec<usize> = Vec::with_capacity(k - 1);
    // uniform (k-1)-subset of slots by sequential sampling
    let mut need = k - 1;
    for slot in 0..slots {
        let left = slots - slot;
        if need > 0 && rng.random::<f64>() < need as f64 / left as f64 {
            bars.push(slot);
            need -= 1;
        }
    }
    let mut out = Vec::with_capacity(k);
    let mut prev: i64 = -1;
    for &b in &bars {
        out.push((b as i64 - prev - 1) as u8);
        prev = b as i64;
    }
    out.push((slots as i64 - 1 - prev) as u8);
    out
}

/// Largest pairwise Jaccard overlap of the on-bits of the templates.
pub fn template_overlap(templates: &[Vec<u8>]) -> Result<f64> {
    if templates.len() < 2 {
        return Err(Error::config("overlap requires at least 2 templates"));
    }
    let mut best = 0.0f64;
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            let inter = templates[i]
                .iter()
                .zip(&templates[j])
                .filter(|(a, b)| **a == 1 && **b == 1)
                .count();
            let union = templates[i]
                .iter()
                .zip(&templates[j])
                .filter(|(a, b)| **a == 1 || **b == 1)
                .count();
            let v = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            best = best.max(v);
        }
    }
    Ok(best)
}

/// Samples m sketches: pick a template by weight, flip each bit
/// independently with probability `flip_prob`. True template ids are stored
/// as dataset labels.
pub fn sample_sketches(
    templates: &[Vec<u8>],
    alphas: &[f64],
    flip_prob: f64,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if m == 0 {
        return Err(Error::config("cannot sample an empty sketch set"));
    }
    if templates.len() != alphas.len() || templates.is_empty() {
        return Err(Error::config("one alpha per template required"));
    }
    let total: f64 = alphas.iter().sum();
    let mut points = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut comp = templates.len() - 1;
        for (j, &a) in alphas.iter().enumerate() {
            acc += a;
            if u < acc {
                comp = j;
                break;
            }
        }
        let row: Vec<f64> = templates[comp]
            .iter()
            .map(|&b| {
                let flip = rng.random::<f64>() < flip_prob;
                if flip {
                    (1 - b) as f64
                } else {
                    b as f64
                }
            })
            .collect();
        points.push(row);
        labels.push(Some(comp));
    }
    Ok(Dataset {
        points,
        labels: Some(labels),
        meta: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    fn tiny_model(k: usize, n: usize, flip: f64, seed: u64) -> (BernoulliModel, Vec<Vec<u8>>) {
        let mut rng = substream(seed, "bt-data");
        let templates: Vec<Vec<u8>> = (0..k)
            .map(|_| {
                (0..n)
                    .map(|_| if rng.random::<f64>() < 0.5 { 1 } else { 0 })
                    .collect()
            })
            .collect();
        let alphas = vec![1.0 / k as f64; k];
        let ds = sample_sketches(&templates, &alphas, flip, 12, &mut rng).unwrap();
        (BernoulliModel::new(&ds, k, flip).unwrap(), templates)
    }

    #[test]
    fn half_noise_energy_is_flat() {
        let (model, templates) = tiny_model(2, 6, 0.5, 3);
        let p1 = model
            .point_from(&templates, &[5, 5])
            .unwrap();
        let other: Vec<Vec<u8>> = templates.iter().map(|t| t.iter().map(|b| 1 - b).collect()).collect();
        let p2 = model.point_from(&other, &[5, 5]).unwrap();
        let expected = model.m() as f64 * model.n() as f64 * std::f64::consts::LN_2;
        assert_abs_diff_eq!(model.energy(&p1).unwrap(), expected, epsilon = 1e-9);
        assert_abs_diff_eq!(model.energy(&p2).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn single_template_exact_match_energy() {
        // K=1, every datum equals the template, match prob 0.9
        let n = 8;
        let template = vec![vec![1u8, 0, 1, 1, 0, 0, 1, 0]];
        let ds = Dataset {
            points: (0..5)
                .map(|_| template[0].iter().map(|&b| b as f64).collect())
                .collect(),
            labels: None,
            meta: None,
        };
        let model = BernoulliModel::new(&ds, 1, 0.1).unwrap();
        let p = model.point_from(&template, &[10]).unwrap();
        let expected = -(5.0 * n as f64 * 0.9f64.ln());
        assert_abs_diff_eq!(model.energy(&p).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn energy_matches_direct_probability_table() {
        // exhaustive oracle on a 2-template 8-bit instance
        let (model, templates) = tiny_model(2, 8, 0.2, 11);
        let point = model.point_from(&templates, &[7, 3]).unwrap();
        let p = 0.8f64;
        let mut expected = 0.0;
        for i in 0..model.m() {
            let mut lik = 0.0;
            for (kk, tpl) in templates.iter().enumerate() {
                let alpha = if kk == 0 { 0.7 } else { 0.3 };
                let matches = tpl
                    .iter()
                    .zip(&model.data[i])
                    .filter(|(a, b)| a == b)
                    .count();
                lik += alpha * p.powi(matches as i32) * (1.0 - p).powi((model.n() - matches) as i32);
            }
            expected -= lik.ln();
        }
        assert_abs_diff_eq!(model.energy(&point).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn energy_is_permutation_symmetric() {
        let (model, templates) = tiny_model(2, 6, 0.15, 5);
        let p1 = model.point_from(&templates, &[6, 4]).unwrap();
        let swapped = vec![templates[1].clone(), templates[0].clone()];
        let p2 = model.point_from(&swapped, &[4, 6]).unwrap();
        assert_abs_diff_eq!(
            model.energy(&p1).unwrap(),
            model.energy(&p2).unwrap(),
            epsilon = 1e-9
        );
        assert!(model.model_distance(&p1, &p2).unwrap() < 1e-12);
    }

    #[test]
    fn boundary_weights_restrict_transfers() {
        let (model, templates) = tiny_model(2, 4, 0.1, 9);
        let p = model.point_from(&templates, &[10, 0]).unwrap();
        let nbrs = model.neighbors(&p).unwrap();
        // K*n flips plus a single valid transfer (1.0, 0.0) -> (0.9, 0.1)
        assert_eq!(nbrs.len(), 2 * 4 + 1);
        assert_eq!(model.neighbor_count(&p).unwrap(), nbrs.len());
        let transfer = nbrs.last().unwrap();
        let words = transfer.words().unwrap();
        assert_eq!(&words[8..], &[9, 1]);
    }

    #[test]
    fn neighbors_are_symmetric_exhaustively() {
        let (model, templates) = tiny_model(2, 4, 0.1, 13);
        let mut rng = substream(4, "sym");
        let mut points = vec![model.point_from(&templates, &[5, 5]).unwrap()];
        for _ in 0..10 {
            points.push(model.random_point(&mut rng));
        }
        for p in &points {
            for nb in model.neighbors(p).unwrap() {
                assert!(model.in_bounds(&nb));
                let back = model.neighbors(&nb).unwrap();
                assert!(
                    back.iter().any(|q| q == p),
                    "neighborhood is not symmetric"
                );
            }
        }
    }

    #[test]
    fn fast_descent_matches_generic_greedy() {
        for seed in [1u64, 2, 3, 4, 5] {
            let (model, _) = tiny_model(2, 5, 0.2, seed);
            let mut rng = substream(seed, "start");
            let start = model.random_point(&mut rng);
            let tie_tol = 1e-9;

            // generic reference: materialize neighbors, full energies
            let mut cur = start.clone();
            let mut cur_e = model.energy(&cur).unwrap();
            loop {
                let mut best: Option<(f64, Vec<u8>)> = None;
                for nb in model.neighbors(&cur).unwrap() {
                    let e = model.energy(&nb).unwrap();
                    let w = nb.words().unwrap().to_vec();
                    let better = match &best {
                        None => true,
                        Some((be, bw)) => e.total_cmp(be).then(w.cmp(bw)).is_lt(),
                    };
                    if better {
                        best = Some((e, w));
                    }
                }
                let (be, bw) = best.unwrap();
                if be < cur_e - tie_tol {
                    cur = ModelPoint::discrete(model.spec().id, bw);
                    cur_e = be;
                } else {
                    break;
                }
            }

            let (fast_pt, fast_e, _) = model.descend_hint(&start, tie_tol).unwrap().unwrap();
            assert_eq!(fast_pt, cur, "seed {seed}: descent endpoints differ");
            assert_abs_diff_eq!(fast_e, cur_e, epsilon = 1e-9);
        }
    }

    #[test]
    fn overlap_examples() {
        let a = vec![1u8, 1, 1, 0, 0, 0];
        let b = vec![0u8, 0, 0, 1, 1, 1];
        assert_eq!(template_overlap(&[a.clone(), b]).unwrap(), 0.0);
        assert_eq!(template_overlap(&[a.clone(), a.clone()]).unwrap(), 1.0);
        // 2 shared of 6 union
        let c = vec![1u8, 1, 0, 0, 1, 1];
        let d = vec![1u8, 1, 1, 1, 0, 0];
        assert_abs_diff_eq!(
            template_overlap(&[c, d]).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-12
        );
        let zero = vec![0u8; 6];
        assert_eq!(template_overlap(&[zero.clone(), zero]).unwrap(), 0.0);
    }

    #[test]
    fn sketch_sampler_flip_rate() {
        let mut rng = substream(17, "sketch");
        let templates = vec![vec![1u8; 50], vec![0u8; 50]];
        let alphas = vec![0.5, 0.5];
        // flip_prob = 0 copies templates exactly
        let ds0 = sample_sketches(&templates, &alphas, 0.0, 20, &mut rng).unwrap();
        for (i, row) in ds0.points.iter().enumerate() {
            let label = ds0.label(i).unwrap();
            let tpl: Vec<f64> = templates[label].iter().map(|&b| b as f64).collect();
            assert_eq!(row, &tpl);
        }
        // empirical flip rate within 3 sigma at m*n = 1e5
        let flip = 0.2;
        let ds = sample_sketches(&templates, &alphas, flip, 2000, &mut rng).unwrap();
        let mut flips = 0usize;
        let total = 2000 * 50;
        for (i, row) in ds.points.iter().enumerate() {
            let tpl = &templates[ds.label(i).unwrap()];
            flips += row
                .iter()
                .zip(tpl)
                .filter(|(r, t)| **r != **t as f64)
                .count();
        }
        let mean = flip * total as f64;
        let sigma = (flip * (1.0 - flip) * total as f64).sqrt();
        assert!(
            ((flips as f64) - mean).abs() < 3.0 * sigma,
            "flip count {flips} outside 3 sigma of {mean}"
        );
    }

    #[test]
    fn random_composition_is_valid_and_covers() {
        let mut rng = substream(23, "comp");
        let mut seen_extreme = false;
        for _ in 0..500 {
            let c = random_composition(3, WEIGHT_STEPS, &mut rng);
            assert_eq!(c.len(), 3);
            assert_eq!(c.iter().map(|&v| v as u32).sum::<u32>(), 10);
            if c.iter().any(|&v| v == 10) {
                seen_extreme = true;
            }
        }
        assert!(seen_extreme, "composition sampler never hit a vertex");
    }

    #[test]
    fn augmented_proposal_matches_enumeration() {
        // 2-template 4-bit instance: the composite kernel's proposal
        // distribution is checked against exhaustive enumeration over the
        // sampled labels.
        let templates = vec![vec![1u8, 1, 0, 0], vec![0u8, 0, 1, 1]];
        let mut rng = substream(31, "aug-data");
        let ds = sample_sketches(&templates, &[0.5, 0.5], 0.15, 3, &mut rng).unwrap();
        let model = BernoulliModel::new(&ds, 2, 0.15).unwrap();
        let x = model.point_from(&templates, &[5, 5]).unwrap();

        // enumerate P(y | x) = sum_Z P(Z|x) P(bits_y|Z) 1(w_y = round(Z))
        // for a few candidate y drawn from the kernel, then compare with
        // empirical frequencies.
        let scratch = model.scratch(&x).unwrap();
        let resp = model.responsibilities(&scratch);
        let m = model.m();
        let kernel_prob = |y: &ModelPoint| -> f64 {
            let wy = y.words().unwrap();
            let mut total = 0.0;
            for z_code in 0..(1usize << m) {
                let assign: Vec<usize> = (0..m).map(|i| (z_code >> i) & 1).collect();
                let mut pz = 1.0;
                for (i, &zi) in assign.iter().enumerate() {
                    pz *= resp[i * 2 + zi];
                }
                if pz == 0.0 {
                    continue;
                }
                let counts = [
                    assign.iter().filter(|&&z| z == 0).count(),
                    assign.iter().filter(|&&z| z == 1).count(),
                ];
                let grid = round_to_grid(&[counts[0] as f64, counts[1] as f64]);
                if grid != wy[8..10] {
                    continue;
                }
                let mut pbits = 1.0;
                let lp = model.p_match.ln();
                let lq = (1.0 - model.p_match).ln();
                for kk in 0..2 {
                    for j in 0..4 {
                        let c1: f64 = (0..m)
                            .filter(|&i| assign[i] == kk)
                            .map(|i| model.data[i][j] as f64)
                            .sum();
                        let c0 = counts[kk] as f64 - c1;
                        let l1 = c1 * lp + c0 * lq;
                        let l0 = c0 * lp + c1 * lq;
                        let p1 = 1.0 / (1.0 + (l0 - l1).exp());
                        pbits *= if wy[kk * 4 + j] == 1 { p1 } else { 1.0 - p1 };
                    }
                }
                total += pz * pbits;
            }
            total
        };

        let draws = 20_000;
        let mut freq: std::collections::HashMap<Vec<u8>, usize> = std::collections::HashMap::new();
        let mut rng = substream(77, "aug-draws");
        for _ in 0..draws {
            let (y, q) = model.propose_augmented(&x, &mut rng).unwrap();
            assert!(q.is_finite());
            *freq.entry(y.words().unwrap().to_vec()).or_default() += 1;
        }
        // check the three most frequent outcomes against enumeration
        let mut top: Vec<(Vec<u8>, usize)> = freq.into_iter().collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (words, count) in top.into_iter().take(3) {
            let y = ModelPoint::discrete(model.spec().id, words);
            let p = kernel_prob(&y);
            let expected = p * draws as f64;
            let sigma = (p * (1.0 - p) * draws as f64).sqrt().max(1.0);
            assert!(
                ((count as f64) - expected).abs() < 4.0 * sigma,
                "kernel frequency {count} vs enumerated {expected:.1} (sigma {sigma:.1})"
            );
        }
    }

    #[test]
    fn distance_example_five_bits() {
        // both templates differ in 5 of 162 bits, equal weights
        let n = 162;
        let t1 = vec![vec![0u8; n], vec![1u8; n]];
        let mut t2 = t1.clone();
        for j in 0..5 {
            t2[0][j] = 1 - t2[0][j];
            t2[1][j] = 1 - t2[1][j];
        }
        let ds = Dataset {
            points: vec![vec![0.0; n], vec![1.0; n]],
            labels: None,
            meta: None,
        };
        let model = BernoulliModel::new(&ds, 2, 0.1).unwrap();
        let a = model.point_from(&t1, &[5, 5]).unwrap();
        let b = model.point_from(&t2, &[5, 5]).unwrap();
        // brute-force oracle over permutations
        let mut oracle = f64::INFINITY;
        for perm in [[0usize, 1], [1, 0]] {
            let mut acc = 0.0;
            for (i, &j) in perm.iter().enumerate() {
                let ham = t1[i]
                    .iter()
                    .zip(&t2[j])
                    .filter(|(x, y)| x != y)
                    .count() as f64
                    / n as f64;
                acc += ham / 2.0;
            }
            oracle = oracle.min(acc);
        }
        let d = model.model_distance(&a, &b).unwrap();
        assert_abs_diff_eq!(d, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(d, 5.0 / 162.0, epsilon = 1e-12);
    }
}
