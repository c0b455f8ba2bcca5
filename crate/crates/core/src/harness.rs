//! Reference learning algorithms and landscape-difficulty scoring.
//!
//! The harness runs EM / k-means / two-step EM many times from random
//! initializations, attributes each outcome onto the ELM's basins, and turns
//! the landing frequencies into Error-Recall curves and AUC difficulty
//! scores.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basin::{BasinMapper, MatchOutcome};
use crate::error::{Error, Result};
use crate::model::{Dataset, EnergyModel, ModelPoint};
use crate::models::gmm::{psd_project, GmmModel, GmmParams, GmmPrior};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Em,
    KMeans,
    TwoStepEm,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Em => "em",
            Algorithm::KMeans => "kmeans",
            Algorithm::TwoStepEm => "2em",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(Algorithm::Em),
            "kmeans" => Ok(Algorithm::KMeans),
            "2em" | "two-step-em" => Ok(Algorithm::TwoStepEm),
            other => Err(Error::config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Result of one fit.
#[derive(Debug, Clone)]
pub struct Fit {
    pub params: GmmParams,
    /// Energy after each iteration (EM) or of the final model (k-means).
    pub energies: Vec<f64>,
    pub converged: bool,
}

/// Random initialization: uniform weights, means drawn from distinct data
/// points, covariances at the sample covariance.
pub fn init_params(model: &GmmModel, rng: &mut ChaCha8Rng) -> GmmParams {
    let (k, m) = (model.k(), model.n_points());
    let mut idx: Vec<usize> = (0..m).collect();
    for i in 0..k.min(m) {
        let j = i + rng.random_range(0..(m - i));
        idx.swap(i, j);
    }
    let means: Vec<DVector<f64>> = (0..k)
        .map(|i| model.data()[idx[i % m]].clone())
        .collect();
    let (_, cov) = crate::models::gmm::sample_moments(model.data())
        .unwrap_or_else(|_| (means[0].clone(), DMatrix::identity(model.d(), model.d())));
    let sigma = psd_project(&cov, model.bounds.eps_eig, model.bounds.l_cap);
    GmmParams {
        weights: vec![1.0 / k as f64; k],
        means,
        covs: vec![sigma; k],
    }
}

fn responsibilities(model: &GmmModel, params: &GmmParams) -> Result<Vec<Vec<f64>>> {
    let k = model.k();
    let mut out = Vec::with_capacity(model.n_points());
    let preps: Vec<(DMatrix<f64>, f64)> = params
        .covs
        .iter()
        .map(|c| {
            let lu = c.clone().lu();
            let det = lu.determinant();
            if !(det > 0.0) {
                return Err(Error::evaluation("singular covariance in E-step"));
            }
            let inv = lu
                .try_inverse()
                .ok_or_else(|| Error::evaluation("singular covariance in E-step"))?;
            Ok((inv, det.ln()))
        })
        .collect::<Result<_>>()?;
    let d = model.d() as f64;
    for (i, z) in model.data().iter().enumerate() {
        let mut row = vec![0.0; k];
        match model.labels()[i] {
            Some(l) => row[l] = 1.0,
            None => {
                let logs: Vec<f64> = (0..k)
                    .map(|j| {
                        let delta = z - &params.means[j];
                        let quad = (&preps[j].0 * &delta).dot(&delta);
                        params.weights[j].max(f64::MIN_POSITIVE).ln()
                            - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + preps[j].1 + quad)
                    })
                    .collect();
                let mx = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let total: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..k {
                    row[j] = ((logs[j] - mx).exp()) / total;
                }
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// One prior-regularized M-step (the joint MAP update).
fn m_step(model: &GmmModel, resp: &[Vec<f64>]) -> Result<GmmParams> {
    let (k, d, m) = (model.k(), model.d(), model.n_points());
    let counts: Vec<f64> = (0..k)
        .map(|j| resp.iter().map(|r| r[j]).sum())
        .collect();
    let mut zbars: Vec<DVector<f64>> = vec![DVector::zeros(d); k];
    for (i, z) in model.data().iter().enumerate() {
        for j in 0..k {
            zbars[j] += resp[i][j] * z;
        }
    }
    for j in 0..k {
        if counts[j] > 0.0 {
            zbars[j] /= counts[j];
        }
    }
    let mut scatters: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, d); k];
    for (i, z) in model.data().iter().enumerate() {
        for j in 0..k {
            if resp[i][j] > 0.0 {
                let delta = z - &zbars[j];
                scatters[j] += resp[i][j] * (&delta * delta.transpose());
            }
        }
    }

    match model.prior() {
        GmmPrior::DirichletNiw {
            concentration,
            mean,
            scale,
            dof,
            scatter,
        } => {
            let m0 = DVector::from_column_slice(mean);
            let psi0 = DMatrix::from_fn(d, d, |r, c| scatter[r][c]);
            let conc_sum: f64 = concentration.iter().sum();
            let denom = m as f64 + conc_sum - k as f64;
            let mut weights: Vec<f64> = (0..k)
                .map(|j| ((counts[j] + concentration[j] - 1.0) / denom).max(1e-12))
                .collect();
            let ws: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= ws);
            let mut means = Vec::with_capacity(k);
            let mut covs = Vec::with_capacity(k);
            for j in 0..k {
                let n = counts[j];
                let kappa_n = scale + n;
                let mu = (*scale * &m0 + n * &zbars[j]) / kappa_n;
                let dm = &zbars[j] - &m0;
                let psi_n = &psi0 + &scatters[j] + (scale * n / kappa_n) * (&dm * dm.transpose());
                let sigma = psi_n / (dof + n + d as f64 + 2.0);
                means.push(mu);
                covs.push(sigma);
            }
            Ok(GmmParams {
                weights,
                means,
                covs,
            })
        }
        GmmPrior::Flat => {
            if counts.iter().any(|&n| n < 1.0) {
                return Err(Error::evaluation("component collapsed in flat-prior M-step"));
            }
            let weights: Vec<f64> = counts.iter().map(|&n| n / m as f64).collect();
            let means = zbars;
            let covs: Vec<DMatrix<f64>> = (0..k)
                .map(|j| {
                    psd_project(
                        &(scatters[j].clone() / counts[j]),
                        model.bounds.eps_eig,
                        model.bounds.l_cap,
                    )
                })
                .collect();
            Ok(GmmParams {
                weights,
                means,
                covs,
            })
        }
    }
}

/// MAP EM: E-step responsibilities, prior-regularized M-step, until the
/// energy change drops below 1e-8. A degenerate component triggers one
/// random re-initialization; a second failure is reported as such.
pub fn em_fit(
    model: &GmmModel,
    init: &GmmParams,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Fit> {
    match em_once(model, init, max_iters) {
        Ok(fit) => Ok(fit),
        Err(_) => {
            let retry = init_params(model, rng);
            em_once(model, &retry, max_iters)
        }
    }
}

fn em_once(model: &GmmModel, init: &GmmParams, max_iters: usize) -> Result<Fit> {
    let mut params = init.clone();
    let mut energies = vec![model.energy_of_params(&params)?];
    let mut converged = false;
    for _ in 0..max_iters {
        let resp = responsibilities(model, &params)?;
        params = m_step(model, &resp)?;
        let e = model.energy_of_params(&params)?;
        let prev = *energies.last().unwrap();
        energies.push(e);
        if (prev - e).abs() < 1e-8 {
            converged = true;
            break;
        }
    }
    // final result projected into bounds
    let point = model.project(&model.point_of(&params));
    params = model.params_of(&point)?;
    Ok(Fit {
        params,
        energies,
        converged,
    })
}

/// Lloyd iterations on the means, then weights and covariances from the
/// final hard assignment. Empty clusters re-seed at the farthest point.
pub fn kmeans_fit(model: &GmmModel, max_iters: usize, rng: &mut ChaCha8Rng) -> Result<Fit> {
    let (k, m) = (model.k(), model.n_points());
    let init = init_params(model, rng);
    let mut means = init.means;
    let mut assign = vec![0usize; m];
    let mut distortions = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let mut changed = false;
        let mut distortion = 0.0;
        for (i, z) in model.data().iter().enumerate() {
            let (j, d2) = (0..k)
                .map(|j| (j, (z - &means[j]).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            distortion += d2;
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        distortions.push(distortion);
        let mut counts = vec![0usize; k];
        let mut sums = vec![DVector::<f64>::zeros(model.d()); k];
        for (i, z) in model.data().iter().enumerate() {
            counts[assign[i]] += 1;
            sums[assign[i]] += z;
        }
        for j in 0..k {
            if counts[j] > 0 {
                means[j] = &sums[j] / counts[j] as f64;
            } else {
                // re-seed an empty cluster at the farthest point
                let far = (0..m)
                    .max_by(|&a, &b| {
                        let da = (model.data()[a].clone() - &means[assign[a]]).norm();
                        let db = (model.data()[b].clone() - &means[assign[b]]).norm();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                means[j] = model.data()[far].clone();
                changed = true;
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }
    // estimate weights and covariances from the hard assignment
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    let weights: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / m as f64).max(1e-12))
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.into_iter().map(|w| w / total).collect();
    let covs: Vec<DMatrix<f64>> = (0..k)
        .map(|j| {
            let mut s = DMatrix::<f64>::zeros(model.d(), model.d());
            for (i, z) in model.data().iter().enumerate() {
                if assign[i] == j {
                    let delta = z - &means[j];
                    s += &delta * delta.transpose();
                }
            }
            if counts[j] > 0 {
                s /= counts[j] as f64;
            }
            psd_project(&s, model.bounds.eps_eig, model.bounds.l_cap)
        })
        .collect();
    let params = GmmParams {
        weights,
        means,
        covs,
    };
    let point = model.project(&model.point_of(&params));
    let params = model.params_of(&point)?;
    let e = model.energy_of_params(&params).unwrap_or(f64::INFINITY);
    Ok(Fit {
        params,
        energies: distortions.into_iter().chain([e]).collect(),
        converged,
    })
}

/// Two-step EM: run EM with an excess of ceil(K ln K) + K components, keep
/// the K heaviest after collapse detection, and polish with plain EM.
pub fn two_step_em_fit(model: &GmmModel, max_iters: usize, rng: &mut ChaCha8Rng) -> Result<Fit> {
    let k = model.k();
    let k_big = ((k as f64) * (k as f64).ln()).ceil() as usize + k;
    if k_big <= k {
        let init = init_params(model, rng);
        return em_fit(model, &init, max_iters, rng);
    }
    let ds = model.to_dataset();
    let prior_big = match model.prior() {
        GmmPrior::Flat => GmmPrior::Flat,
        GmmPrior::DirichletNiw { .. } => {
            let (mean, cov) = crate::models::gmm::sample_moments(model.data())?;
            GmmPrior::default_for(k_big, &mean, &cov, model.n_points())
        }
    };
    let big = GmmModel::new(&ds, k_big, prior_big, 0.0)?;
    let init = init_params(&big, rng);
    let coarse = em_fit(&big, &init, max_iters, rng)?;
    // keep the K heaviest components
    let mut order: Vec<usize> = (0..k_big).collect();
    order.sort_by(|&a, &b| {
        coarse.params.weights[b]
            .total_cmp(&coarse.params.weights[a])
            .then(a.cmp(&b))
    });
    let kept = &order[..k];
    let wsum: f64 = kept.iter().map(|&j| coarse.params.weights[j]).sum();
    let pruned = GmmParams {
        weights: kept
            .iter()
            .map(|&j| coarse.params.weights[j] / wsum)
            .collect(),
        means: kept.iter().map(|&j| coarse.params.means[j].clone()).collect(),
        covs: kept.iter().map(|&j| coarse.params.covs[j].clone()).collect(),
    };
    em_fit(model, &pruned, max_iters, rng)
}

impl GmmModel {
    /// Reconstructs the dataset this model was built from.
    pub fn to_dataset(&self) -> Dataset {
        let any_labeled = self.labels().iter().any(|l| l.is_some());
        Dataset {
            points: self
                .data()
                .iter()
                .map(|z| z.iter().copied().collect())
                .collect(),
            labels: if any_labeled {
                Some(self.labels().to_vec())
            } else {
                None
            },
            meta: None,
        }
    }
}

/// One learner run for the results CSV.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub algorithm: String,
    pub run: u64,
    /// None when the fit failed or landed out of tolerance.
    pub basin_id: Option<u32>,
    pub error: Option<f64>,
    pub energy: f64,
    pub converged: bool,
}

/// Landing frequencies of one algorithm over the ELM basins.
#[derive(Debug, Clone, Serialize)]
pub struct LandingHistogram {
    pub algorithm: String,
    pub counts: BTreeMap<u32, u64>,
    pub n_runs: u64,
    /// Fit failures plus outputs farther than the over-tolerance from every
    /// registered minimum.
    pub failures: u64,
    pub records: Vec<RunRecord>,
}

impl LandingHistogram {
    pub fn mapped_total(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Runs `alg` `n_runs` times with per-run substreams and attributes each
/// output via descend-then-match against the frozen registry.
pub fn landing_frequencies(
    model: &GmmModel,
    mapper: &BasinMapper,
    alg: Algorithm,
    n_runs: u64,
    seed: u64,
    theta_star: Option<&ModelPoint>,
) -> Result<LandingHistogram> {
    let mut hist = LandingHistogram {
        algorithm: alg.name().to_string(),
        counts: BTreeMap::new(),
        n_runs,
        failures: 0,
        records: Vec::new(),
    };
    for run in 0..n_runs {
        let mut rng = substream(seed, &format!("learner-{}-run-{run}", alg.name()));
        let fit = match alg {
            Algorithm::Em => {
                let init = init_params(model, &mut rng);
                em_fit(model, &init, 500, &mut rng)
            }
            Algorithm::KMeans => kmeans_fit(model, 500, &mut rng),
            Algorithm::TwoStepEm => two_step_em_fit(model, 500, &mut rng),
        };
        let fit = match fit {
            Ok(f) => f,
            Err(_) => {
                hist.failures += 1;
                hist.records.push(RunRecord {
                    algorithm: alg.name().into(),
                    run,
                    basin_id: None,
                    error: None,
                    energy: f64::NAN,
                    converged: false,
                });
                continue;
            }
        };
        let point = model.point_of(&fit.params);
        let energy = model.energy(&point).unwrap_or(f64::INFINITY);
        match mapper.match_only(model, &point) {
            Ok(MatchOutcome::Mapped(id)) => {
                let id = mapper.resolve(id);
                *hist.counts.entry(id).or_insert(0) += 1;
                let error = match theta_star {
                    Some(ts) => {
                        let min_loc = mapper
                            .registry()
                            .get(id)
                            .map(|e| e.location.clone())
                            .unwrap();
                        Some(model.model_distance(&min_loc, ts)?)
                    }
                    None => None,
                };
                hist.records.push(RunRecord {
                    algorithm: alg.name().into(),
                    run,
                    basin_id: Some(id),
                    error,
                    energy,
                    converged: fit.converged,
                });
            }
            Ok(MatchOutcome::Unmapped { .. }) | Err(_) => {
                hist.failures += 1;
                hist.records.push(RunRecord {
                    algorithm: alg.name().into(),
                    run,
                    basin_id: None,
                    error: None,
                    energy,
                    converged: fit.converged,
                });
            }
        }
    }
    Ok(hist)
}

/// Error-Recall curve: cumulative landing frequency within increasing model
/// distance of the reference point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErcCurve {
    /// (error, recall) with strictly increasing errors and non-decreasing
    /// recall; recall is normalized by the total run count.
    pub points: Vec<(f64, f64)>,
}

pub fn erc(
    model: &dyn EnergyModel,
    hist: &LandingHistogram,
    minima: &BTreeMap<u32, ModelPoint>,
    theta_star: &ModelPoint,
) -> Result<ErcCurve> {
    let mut buckets: Vec<(f64, u64)> = Vec::new();
    for (&basin, &count) in &hist.counts {
        let loc = minima
            .get(&basin)
            .ok_or_else(|| Error::config(format!("basin {basin} missing from the minima map")))?;
        let error = model.model_distance(loc, theta_star)?;
        buckets.push((error, count));
    }
    buckets.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut cum = 0u64;
    let denom = hist.n_runs.max(1) as f64;
    for (error, count) in buckets {
        cum += count;
        match points.last_mut() {
            Some(last) if (error - last.0).abs() <= 1e-12 => {
                last.1 = cum as f64 / denom;
            }
            _ => points.push((error, cum as f64 / denom)),
        }
    }
    Ok(ErcCurve { points })
}

/// Normalized area under the recall step function over [0, eps_max].
pub fn auc(curve: &ErcCurve, eps_max: f64) -> Result<f64> {
    if !(eps_max > 0.0) {
        return Err(Error::config("eps_max must be > 0"));
    }
    let mut area = 0.0;
    let mut prev_e = 0.0;
    let mut recall = 0.0;
    for &(e, r) in &curve.points {
        if e >= eps_max {
            break;
        }
        if e > prev_e {
            area += recall * (e - prev_e);
            prev_e = e;
        }
        recall = r;
    }
    area += recall * (eps_max - prev_e);
    Ok((area / eps_max).clamp(0.0, 1.0))
}
