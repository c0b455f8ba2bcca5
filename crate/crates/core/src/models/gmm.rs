//! Gaussian mixture clustering energy over a bounded parameter space.
//!
//! The energy is the negative log posterior of a K-component mixture: data
//! log-likelihood (with optional per-point supervision) plus a Dirichlet
//! prior on the weights and a Normal-Inverse-Wishart prior on each
//! (mean, covariance) pair. Parameters live in a space bounded by the data:
//! means inside a ball around the sample mean, covariance eigenvalues capped
//! by the sample covariance spectrum.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{
    uniform_in_box, Dataset, EnergyModel, ModelPoint, ModelSpec, SpaceKind,
};
use crate::rng::fnv1a64;

const LN_2PI: f64 = 1.8378770664093453;

/// Mixture parameters: weights on the simplex, one mean and covariance per
/// component.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GmmParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.means.first().map(|m| m.len()).unwrap_or(0)
    }

    /// Flat layout: weights, then means, then covariances (row-major).
    pub fn to_flat(&self) -> Vec<f64> {
        let (k, d) = (self.k(), self.d());
        let mut out = Vec::with_capacity(k + k * d + k * d * d);
        out.extend_from_slice(&self.weights);
        for m in &self.means {
            out.extend(m.iter());
        }
        for c in &self.covs {
            for r in 0..d {
                for cc in 0..d {
                    out.push(c[(r, cc)]);
                }
            }
        }
        out
    }

    pub fn from_flat(k: usize, d: usize, flat: &[f64]) -> Result<Self> {
        let expected = k + k * d + k * d * d;
        if flat.len() != expected {
            return Err(Error::config(format!(
                "flat GMM vector has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let weights = flat[..k].to_vec();
        let mut means = Vec::with_capacity(k);
        for j in 0..k {
            means.push(DVector::from_column_slice(&flat[k + j * d..k + (j + 1) * d]));
        }
        let mut covs = Vec::with_capacity(k);
        let base = k + k * d;
        for j in 0..k {
            let s = &flat[base + j * d * d..base + (j + 1) * d * d];
            covs.push(DMatrix::from_row_slice(d, d, s));
        }
        Ok(GmmParams {
            weights,
            means,
            covs,
        })
    }
}

/// Data-derived bounds of the parameter space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmBounds {
    /// Sample mean; centre of the mean ball.
    pub center: Vec<f64>,
    /// Radius of the mean ball: max_i ||z_i - mu_o|| + eps_m.
    pub r_bound: f64,
    /// Eigenvalue cap: lambda_max(Sigma_o) + eps_m.
    pub l_cap: f64,
    /// Eigenvalue floor.
    pub eps_eig: f64,
}

/// Sample mean and unbiased sample covariance of a dataset.
pub fn sample_moments(data: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if data.len() < 2 {
        return Err(Error::config("need at least 2 data points"));
    }
    let d = data[0].len();
    let m = data.len() as f64;
    let mut mean = DVector::zeros(d);
    for z in data {
        mean += z;
    }
    mean /= m;
    let mut cov = DMatrix::zeros(d, d);
    for z in data {
        let delta = z - &mean;
        cov += &delta * delta.transpose();
    }
    cov /= m - 1.0;
    Ok((mean, cov))
}

/// Derives the space bounds from the data.
///
/// `eps_m <= 0` selects the default margin `0.1 * sqrt(lambda_max(Sigma_o))`.
pub fn derive_bounds(data: &[DVector<f64>], eps_m: f64) -> Result<GmmBounds> {
    let (center, cov) = sample_moments(data)?;
    let max_dist = data
        .iter()
        .map(|z| (z - &center).norm())
        .fold(0.0_f64, f64::max);
    if max_dist == 0.0 {
        return Err(Error::config("degenerate dataset: all points identical"));
    }
    let lam_max = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0_f64, |a, &b| a.max(b));
    if lam_max <= 0.0 {
        return Err(Error::config("degenerate dataset: zero sample covariance"));
    }
    let eps_m = if eps_m > 0.0 {
        eps_m
    } else {
        0.1 * lam_max.sqrt()
    };
    let l_cap = lam_max + eps_m;
    Ok(GmmBounds {
        center: center.iter().copied().collect(),
        r_bound: max_dist + eps_m,
        l_cap,
        eps_eig: 1e-4 * l_cap,
    })
}

/// Projects a square matrix onto the symmetric matrices with eigenvalues in
/// `[eps, cap]`: symmetrize, eigendecompose, clamp, reconstruct.
pub fn psd_project(mat: &DMatrix<f64>, eps: f64, cap: f64) -> DMatrix<f64> {
    let sym = (mat + mat.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lambda = eig.eigenvalues.map(|l| l.clamp(eps, cap));
    &eig.eigenvectors * DMatrix::from_diagonal(&lambda) * eig.eigenvectors.transpose()
}

/// Separability c = min_ij ||mu_i - mu_j|| / (sqrt(d) * max(sigma_i, sigma_j))
/// with sigma the square root of the largest covariance eigenvalue.
pub fn separability(params: &GmmParams) -> Result<f64> {
    let k = params.k();
    if k < 2 {
        return Err(Error::config("separability requires at least 2 components"));
    }
    let d = params.d() as f64;
    let sigmas: Vec<f64> = params
        .covs
        .iter()
        .map(|c| {
            c.clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(0.0_f64, |a, &b| a.max(b))
                .sqrt()
        })
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let dist = (&params.means[i] - &params.means[j]).norm();
            let c = dist / (d.sqrt() * sigmas[i].max(sigmas[j]));
            best = best.min(c);
        }
    }
    Ok(best)
}

/// Prior over mixture parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum GmmPrior {
    /// P(theta) constant; the energy is the pure negative log likelihood.
    Flat,
    /// Dirichlet on the weights, Normal-Inverse-Wishart on each component.
    DirichletNiw {
        concentration: Vec<f64>,
        mean: Vec<f64>,
        scale: f64,
        dof: f64,
        scatter: Vec<Vec<f64>>,
    },
}

impl GmmPrior {
    /// Weakly informative, data-scaled default: Dirichlet(1 + m/(10K)),
    /// NIW(mu_o, 0.1, d + 2, Sigma_o).
    pub fn default_for(k: usize, mean: &DVector<f64>, cov: &DMatrix<f64>, m: usize) -> Self {
        let d = mean.len();
        GmmPrior::DirichletNiw {
            concentration: vec![1.0 + m as f64 / (10.0 * k as f64); k],
            mean: mean.iter().copied().collect(),
            scale: 0.1,
            dof: d as f64 + 2.0,
            scatter: (0..d)
                .map(|r| (0..d).map(|c| cov[(r, c)]).collect())
                .collect(),
        }
    }

    pub fn validate(&self, k: usize, d: usize) -> Result<()> {
        match self {
            GmmPrior::Flat => Ok(()),
            GmmPrior::DirichletNiw {
                concentration,
                mean,
                scale,
                dof,
                scatter,
            } => {
                if concentration.len() != k || concentration.iter().any(|&c| c <= 0.0) {
                    return Err(Error::config("Dirichlet concentrations must be positive, one per component"));
                }
                if mean.len() != d || scatter.len() != d {
                    return Err(Error::config("NIW hyperparameter dimension mismatch"));
                }
                if *scale <= 0.0 {
                    return Err(Error::config("NIW scale must be positive"));
                }
                if *dof <= d as f64 - 1.0 {
                    return Err(Error::config("NIW dof must exceed d - 1"));
                }
                Ok(())
            }
        }
    }
}

/// Hyperparameters of one NIW factor in dense form.
#[derive(Debug, Clone)]
struct NiwParams {
    mean: DVector<f64>,
    scale: f64,
    dof: f64,
    scatter: DMatrix<f64>,
}

fn ln_multigamma(d: usize, a: f64) -> f64 {
    let mut acc = (d * (d - 1)) as f64 / 4.0 * std::f64::consts::PI.ln();
    for i in 1..=d {
        acc += ln_gamma(a + (1.0 - i as f64) / 2.0);
    }
    acc
}

/// log Dirichlet(w; c), including the normalization constant.
fn ln_dirichlet(weights: &[f64], conc: &[f64]) -> f64 {
    let mut acc = ln_gamma(conc.iter().sum());
    for (&w, &c) in weights.iter().zip(conc) {
        acc -= ln_gamma(c);
        acc += (c - 1.0) * w.ln();
    }
    acc
}

/// log NIW(mu, Sigma; m0, kappa0, nu0, Psi0) given the precomputed inverse
/// and log-determinant of Sigma.
fn ln_niw(
    mu: &DVector<f64>,
    inv: &DMatrix<f64>,
    logdet: f64,
    niw: &NiwParams,
) -> f64 {
    let d = mu.len();
    let df = d as f64;
    let delta = mu - &niw.mean;
    let quad = (inv * &delta).dot(&delta);
    let ln_normal =
        -0.5 * df * LN_2PI + 0.5 * df * niw.scale.ln() - 0.5 * logdet - 0.5 * niw.scale * quad;
    let psi_logdet = niw
        .scatter
        .clone()
        .lu()
        .determinant()
        .max(f64::MIN_POSITIVE)
        .ln();
    let tr = (inv * &niw.scatter).trace();
    let ln_iw = 0.5 * niw.dof * psi_logdet
        - 0.5 * niw.dof * df * std::f64::consts::LN_2
        - ln_multigamma(d, niw.dof / 2.0)
        - 0.5 * (niw.dof + df + 1.0) * logdet
        - 0.5 * tr;
    ln_normal + ln_iw
}

/// Which parameter blocks vary. Fixed blocks are carried by the model and
/// excluded from the encoding, which is how restricted landscapes (a few
/// free means, everything else pinned) are expressed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreeMask {
    pub weights: bool,
    pub means: Vec<bool>,
    pub covs: Vec<bool>,
}

impl FreeMask {
    pub fn all(k: usize) -> Self {
        FreeMask {
            weights: true,
            means: vec![true; k],
            covs: vec![true; k],
        }
    }

    /// Only the listed component means vary.
    pub fn means_only(k: usize, free_means: &[usize]) -> Self {
        let mut means = vec![false; k];
        for &i in free_means {
            means[i] = true;
        }
        FreeMask {
            weights: false,
            means,
            covs: vec![false; k],
        }
    }
}

/// Per-component cached inverse and log-determinant.
struct CompPrep {
    inv: DMatrix<f64>,
    logdet: f64,
    log_norm: f64,
}

fn prep_component(cov: &DMatrix<f64>) -> Result<CompPrep> {
    let d = cov.nrows();
    let lu = cov.clone().lu();
    let det = lu.determinant();
    if !det.is_finite() || det <= 0.0 {
        return Err(Error::evaluation(format!(
            "covariance has non-positive determinant {det}"
        )));
    }
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::evaluation("covariance is numerically singular"))?;
    let logdet = det.ln();
    Ok(CompPrep {
        inv,
        logdet,
        log_norm: -0.5 * (d as f64 * LN_2PI + logdet),
    })
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// The GMM energy model. Owns the dataset, prior, bounds and free mask.
pub struct GmmModel {
    k: usize,
    d: usize,
    data: Vec<DVector<f64>>,
    labels: Vec<Option<usize>>,
    prior: GmmPrior,
    niw: Option<NiwParams>,
    concentration: Option<Vec<f64>>,
    /// Prior used by the augmented proposal; equals the model prior when it
    /// is informative, else the data-scaled default.
    aug_niw: NiwParams,
    aug_concentration: Vec<f64>,
    pub bounds: GmmBounds,
    base: Vec<f64>,
    free: FreeMask,
    spec: ModelSpec,
}

impl GmmModel {
    /// Fully free model over all K components.
    pub fn new(dataset: &Dataset, k: usize, prior: GmmPrior, eps_m: f64) -> Result<Self> {
        let data: Vec<DVector<f64>> = dataset
            .points
            .iter()
            .map(|p| DVector::from_column_slice(p))
            .collect();
        let bounds = derive_bounds(&data, eps_m)?;
        let (mean, cov) = sample_moments(&data)?;
        let base = GmmParams {
            weights: vec![1.0 / k as f64; k],
            means: vec![mean.clone(); k],
            covs: vec![psd_project(&cov, bounds.eps_eig, bounds.l_cap); k],
        };
        GmmModel::restricted(dataset, k, prior, base, FreeMask::all(k), bounds)
    }

    /// Model with fixed blocks taken from `base` and the given free mask.
    pub fn restricted(
        dataset: &Dataset,
        k: usize,
        prior: GmmPrior,
        base: GmmParams,
        free: FreeMask,
        bounds: GmmBounds,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("K must be >= 1"));
        }
        let data: Vec<DVector<f64>> = dataset
            .points
            .iter()
            .map(|p| DVector::from_column_slice(p))
            .collect();
        if data.is_empty() {
            return Err(Error::Empty("GMM dataset is empty".into()));
        }
        let d = data[0].len();
        if base.k() != k || base.d() != d {
            return Err(Error::config("base parameters do not match K/d"));
        }
        if free.means.len() != k || free.covs.len() != k {
            return Err(Error::config("free mask does not match K"));
        }
        prior.validate(k, d)?;
        let labels: Vec<Option<usize>> = (0..data.len())
            .map(|i| dataset.label(i))
            .collect();
        if labels.iter().flatten().any(|&l| l >= k) {
            return Err(Error::config("dataset label out of component range"));
        }

        let (mean, cov) = sample_moments(&data).unwrap_or_else(|_| {
            (data[0].clone(), DMatrix::identity(d, d))
        });
        let (niw, concentration) = match &prior {
            GmmPrior::Flat => (None, None),
            GmmPrior::DirichletNiw {
                concentration,
                mean,
                scale,
                dof,
                scatter,
            } => (
                Some(NiwParams {
                    mean: DVector::from_column_slice(mean),
                    scale: *scale,
                    dof: *dof,
                    scatter: DMatrix::from_fn(d, d, |r, c| scatter[r][c]),
                }),
                Some(concentration.clone()),
            ),
        };
        let (aug_niw, aug_concentration) = match (&niw, &concentration) {
            (Some(n), Some(c)) => (n.clone(), c.clone()),
            _ => {
                let def = GmmPrior::default_for(k, &mean, &cov, data.len());
                match def {
                    GmmPrior::DirichletNiw {
                        concentration,
                        mean,
                        scale,
                        dof,
                        scatter,
                    } => (
                        NiwParams {
                            mean: DVector::from_column_slice(&mean),
                            scale,
                            dof,
                            scatter: DMatrix::from_fn(d, d, |r, c| scatter[r][c]),
                        },
                        concentration,
                    ),
                    GmmPrior::Flat => unreachable!(),
                }
            }
        };

        let dim = free_dim(&free, k, d);
        if dim == 0 {
            return Err(Error::config("free mask leaves no free coordinates"));
        }
        let name = format!("gmm-k{k}-d{d}-{}", if all_free(&free) { "full" } else { "restricted" });
        let spec = ModelSpec {
            id: fnv1a64(format!("{name}-{}", data.len()).as_bytes()),
            name,
            kind: SpaceKind::Continuous,
            dimension: dim,
            bounds: format!(
                "mean ball radius {:.4}, eigenvalues in [{:.3e}, {:.4}]",
                bounds.r_bound, bounds.eps_eig, bounds.l_cap
            ),
            bounded: true,
            has_gradient: true,
            has_augmented_proposal: true,
        };
        Ok(GmmModel {
            k,
            d,
            data,
            labels,
            prior,
            niw,
            concentration,
            aug_niw,
            aug_concentration,
            bounds,
            base: base.to_flat(),
            free,
            spec,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_points(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[DVector<f64>] {
        &self.data
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }

    pub fn free_mask(&self) -> &FreeMask {
        &self.free
    }

    /// Layout of the free coordinates inside the full flat vector.
    fn free_indices(&self) -> Vec<usize> {
        let (k, d) = (self.k, self.d);
        let mut idx = Vec::with_capacity(self.spec.dimension);
        if self.free.weights {
            idx.extend(0..k);
        }
        for (j, &f) in self.free.means.iter().enumerate() {
            if f {
                idx.extend(k + j * d..k + (j + 1) * d);
            }
        }
        let base = k + k * d;
        for (j, &f) in self.free.covs.iter().enumerate() {
            if f {
                idx.extend(base + j * d * d..base + (j + 1) * d * d);
            }
        }
        idx
    }

    /// Full parameter struct for an encoding.
    pub fn params_of(&self, point: &ModelPoint) -> Result<GmmParams> {
        let coords = point.coords()?;
        if coords.len() != self.spec.dimension {
            return Err(Error::config(format!(
                "encoding has {} coordinates, expected {}",
                coords.len(),
                self.spec.dimension
            )));
        }
        let mut full = self.base.clone();
        for (slot, &c) in self.free_indices().iter().zip(coords) {
            full[*slot] = c;
        }
        GmmParams::from_flat(self.k, self.d, &full)
    }

    /// Encoding of a full parameter struct (fixed blocks are dropped).
    pub fn point_of(&self, params: &GmmParams) -> ModelPoint {
        let full = params.to_flat();
        let coords = self.free_indices().iter().map(|&i| full[i]).collect();
        ModelPoint::continuous(self.spec.id, coords)
    }

    fn preps(&self, params: &GmmParams) -> Result<Vec<CompPrep>> {
        params.covs.iter().map(prep_component).collect()
    }

    fn log_gauss(&self, prep: &CompPrep, mu: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let delta = z - mu;
        prep.log_norm - 0.5 * (&prep.inv * &delta).dot(&delta)
    }

    fn log_prior(&self, params: &GmmParams, preps: &[CompPrep]) -> f64 {
        match (&self.niw, &self.concentration) {
            (Some(niw), Some(conc)) => {
                let mut acc = ln_dirichlet(&params.weights, conc);
                for j in 0..self.k {
                    acc += ln_niw(&params.means[j], &preps[j].inv, preps[j].logdet, niw);
                }
                acc
            }
            _ => 0.0,
        }
    }

    /// Energy of explicit parameters (used by the learner harness, which
    /// iterates on `GmmParams` directly).
    pub fn energy_of_params(&self, params: &GmmParams) -> Result<f64> {
        let preps = self.preps(params)?;
        let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();
        let mut total = 0.0;
        let mut scratch = vec![0.0; self.k];
        for (i, z) in self.data.iter().enumerate() {
            let e_i = match self.labels[i] {
                Some(l) => log_w[l] + self.log_gauss(&preps[l], &params.means[l], z),
                None => {
                    for j in 0..self.k {
                        scratch[j] = log_w[j] + self.log_gauss(&preps[j], &params.means[j], z);
                    }
                    log_sum_exp(&scratch)
                }
            };
            total -= e_i;
        }
        total -= self.log_prior(params, &preps);
        if !total.is_finite() {
            return Err(Error::evaluation(format!("non-finite GMM energy {total}")));
        }
        Ok(total)
    }

    /// Gradient with respect to the full flat layout.
    fn full_gradient(&self, params: &GmmParams) -> Result<Vec<f64>> {
        let (k, d) = (self.k, self.d);
        let preps = self.preps(params)?;
        let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();

        let mut g_w = vec![0.0; k];
        let mut g_mu = vec![DVector::<f64>::zeros(d); k];
        let mut g_cov = vec![DMatrix::<f64>::zeros(d, d); k];

        let mut log_terms = vec![0.0; k];
        for (i, z) in self.data.iter().enumerate() {
            match self.labels[i] {
                Some(l) => {
                    g_w[l] -= 1.0 / params.weights[l];
                    let delta = &params.means[l] - z;
                    g_mu[l] += &preps[l].inv * &delta;
                    let s = &preps[l].inv * (z - &params.means[l]);
                    g_cov[l] += 0.5 * (&preps[l].inv - &s * s.transpose());
                }
                None => {
                    for j in 0..k {
                        log_terms[j] = log_w[j] + self.log_gauss(&preps[j], &params.means[j], z);
                    }
                    let lse = log_sum_exp(&log_terms);
                    for j in 0..k {
                        let resp = (log_terms[j] - lse).exp();
                        // d(-ln f)/d alpha_j = -G_j / f
                        g_w[j] -= (log_terms[j] - log_w[j] - lse).exp();
                        let delta = &params.means[j] - z;
                        g_mu[j] += resp * (&preps[j].inv * &delta);
                        let s = &preps[j].inv * (z - &params.means[j]);
                        g_cov[j] += resp * 0.5 * (&preps[j].inv - &s * s.transpose());
                    }
                }
            }
        }

        if let (Some(niw), Some(conc)) = (&self.niw, &self.concentration) {
            for j in 0..k {
                g_w[j] -= (conc[j] - 1.0) / params.weights[j];
                let inv = &preps[j].inv;
                let delta = &params.means[j] - &niw.mean;
                g_mu[j] += niw.scale * (inv * &delta);
                let s = inv * &delta;
                let df = d as f64;
                g_cov[j] += 0.5 * inv - 0.5 * niw.scale * (&s * s.transpose());
                g_cov[j] += 0.5 * (niw.dof + df + 1.0) * inv - 0.5 * (inv * &niw.scatter * inv);
            }
        }

        let mut flat = Vec::with_capacity(k + k * d + k * d * d);
        flat.extend_from_slice(&g_w);
        for g in &g_mu {
            flat.extend(g.iter());
        }
        for g in &g_cov {
            for r in 0..d {
                for c in 0..d {
                    flat.push(g[(r, c)]);
                }
            }
        }
        Ok(flat)
    }

    /// Conjugate posterior of one component given its assigned points.
    fn niw_posterior(&self, members: &[usize]) -> NiwParams {
        let prior = &self.aug_niw;
        let n = members.len() as f64;
        if members.is_empty() {
            return prior.clone();
        }
        let d = self.d;
        let mut zbar = DVector::zeros(d);
        for &i in members {
            zbar += &self.data[i];
        }
        zbar /= n;
        let mut scatter = DMatrix::zeros(d, d);
        for &i in members {
            let delta = &self.data[i] - &zbar;
            scatter += &delta * delta.transpose();
        }
        let kappa_n = prior.scale + n;
        let dm = &zbar - &prior.mean;
        let psi_n = &prior.scatter + scatter + (prior.scale * n / kappa_n) * (&dm * dm.transpose());
        NiwParams {
            mean: (prior.scale * &prior.mean + n * zbar) / kappa_n,
            scale: kappa_n,
            dof: prior.dof + n,
            scatter: psi_n,
        }
    }

    /// Samples (mu, Sigma) ~ NIW via a Bartlett-decomposition Wishart draw.
    fn sample_niw(&self, post: &NiwParams, rng: &mut ChaCha8Rng) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.d;
        let psi_inv = post
            .scatter
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::evaluation("singular NIW scatter"))?;
        let l = nalgebra::Cholesky::new(psi_inv)
            .ok_or_else(|| Error::evaluation("NIW scatter inverse not PD"))?
            .l()
            .clone_owned();
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            let chi = rand_distr::ChiSquared::new(post.dof - i as f64)
                .map_err(|e| Error::evaluation(format!("chi-squared dof: {e}")))?;
            a[(i, i)] = rng.sample(chi).max(f64::MIN_POSITIVE).sqrt();
            for j in 0..i {
                a[(i, j)] = rng.sample(rand_distr::StandardNormal);
            }
        }
        let w = &l * a;
        let wishart = &w * w.transpose();
        let sigma = wishart
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::evaluation("singular Wishart draw"))?;
        let sig_chol = nalgebra::Cholesky::new(sigma.clone() / post.scale)
            .ok_or_else(|| Error::evaluation("NIW covariance draw not PD"))?;
        let z = DVector::from_fn(d, |_, _| rng.sample(rand_distr::StandardNormal));
        let mu = &post.mean + sig_chol.l() * z;
        Ok((mu, sigma))
    }
}

fn free_dim(free: &FreeMask, k: usize, d: usize) -> usize {
    let mut dim = 0;
    if free.weights {
        dim += k;
    }
    dim += free.means.iter().filter(|&&f| f).count() * d;
    dim += free.covs.iter().filter(|&&f| f).count() * d * d;
    dim
}

fn all_free(free: &FreeMask) -> bool {
    free.weights && free.means.iter().all(|&f| f) && free.covs.iter().all(|&f| f)
}

impl EnergyModel for GmmModel {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn energy(&self, point: &ModelPoint) -> Result<f64> {
        self.energy_of_params(&self.params_of(point)?)
    }

    fn gradient(&self, point: &ModelPoint) -> Result<Vec<f64>> {
        let params = self.params_of(point)?;
        let full = self.full_gradient(&params)?;
        let mut g: Vec<f64> = self.free_indices().iter().map(|&i| full[i]).collect();
        if self.free.weights {
            // report the weight block in the simplex tangent
            let mean = g[..self.k].iter().sum::<f64>() / self.k as f64;
            for gw in &mut g[..self.k] {
                *gw -= mean;
            }
        }
        Ok(g)
    }

    fn project(&self, point: &ModelPoint) -> ModelPoint {
        let params = self
            .params_of(point)
            .expect("projection requires a well-formed encoding");
        let mut p = params;
        if self.free.weights {
            for w in &mut p.weights {
                *w = w.max(0.0);
            }
            let s: f64 = p.weights.iter().sum();
            if s <= 0.0 {
                p.weights = vec![1.0 / self.k as f64; self.k];
            } else if (s - 1.0).abs() > 1e-12 {
                for w in &mut p.weights {
                    *w /= s;
                }
            }
        }
        let center = DVector::from_column_slice(&self.bounds.center);
        for (j, free) in self.free.means.iter().enumerate() {
            if *free {
                let v = &p.means[j] - &center;
                let norm = v.norm();
                if norm > self.bounds.r_bound * (1.0 + 1e-12) {
                    p.means[j] = &center + v * (self.bounds.r_bound / norm);
                }
            }
        }
        for (j, free) in self.free.covs.iter().enumerate() {
            if *free {
                p.covs[j] = psd_project(&p.covs[j], self.bounds.eps_eig, self.bounds.l_cap);
            }
        }
        self.point_of(&p)
    }

    fn in_bounds(&self, point: &ModelPoint) -> bool {
        let params = match self.params_of(point) {
            Ok(p) => p,
            Err(_) => return false,
        };
        if self.free.weights {
            let s: f64 = params.weights.iter().sum();
            if (s - 1.0).abs() > 1e-9 || params.weights.iter().any(|&w| w < -1e-12) {
                return false;
            }
        }
        let center = DVector::from_column_slice(&self.bounds.center);
        let r_tol = self.bounds.r_bound * (1.0 + 1e-9);
        for (j, free) in self.free.means.iter().enumerate() {
            if *free && (&params.means[j] - &center).norm() > r_tol {
                return false;
            }
        }
        let slack = 1e-9 * self.bounds.l_cap;
        for (j, free) in self.free.covs.iter().enumerate() {
            if !*free {
                continue;
            }
            let c = &params.covs[j];
            let asym = (c - c.transpose()).abs().max();
            if asym > 1e-9 * self.bounds.l_cap.max(1.0) {
                return false;
            }
            let eig = c.clone().symmetric_eigen().eigenvalues;
            if eig
                .iter()
                .any(|&l| l < self.bounds.eps_eig - slack || l > self.bounds.l_cap + slack)
            {
                return false;
            }
        }
        true
    }

    fn coordinate_bounds(&self) -> Vec<(f64, f64)> {
        let (k, d) = (self.k, self.d);
        let mut out = Vec::with_capacity(self.spec.dimension);
        if self.free.weights {
            out.extend(std::iter::repeat((0.0, 1.0)).take(k));
        }
        for (j, &f) in self.free.means.iter().enumerate() {
            if f {
                for c in 0..d {
                    let center = self.bounds.center[c];
                    out.push((center - self.bounds.r_bound, center + self.bounds.r_bound));
                }
                let _ = j;
            }
        }
        for &f in &self.free.covs {
            if f {
                for _ in 0..d * d {
                    out.push((-self.bounds.l_cap, self.bounds.l_cap));
                }
            }
        }
        out
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> ModelPoint {
        let raw = uniform_in_box(self.spec.id, &self.coordinate_bounds(), rng);
        self.project(&raw)
    }

    fn propose_augmented(
        &self,
        point: &ModelPoint,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ModelPoint, f64)> {
        let params = self.params_of(point)?;
        let preps = self.preps(&params)?;
        let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();

        // 1. latent labels from the posterior responsibilities under x
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.k];
        let mut log_p_z_given_x = 0.0;
        let mut assignment = vec![0usize; self.data.len()];
        let mut log_terms = vec![0.0; self.k];
        for (i, z) in self.data.iter().enumerate() {
            let j = match self.labels[i] {
                Some(l) => l,
                None => {
                    for j in 0..self.k {
                        log_terms[j] = log_w[j] + self.log_gauss(&preps[j], &params.means[j], z);
                    }
                    let lse = log_sum_exp(&log_terms);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = self.k - 1;
                    for j in 0..self.k {
                        acc += (log_terms[j] - lse).exp();
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    log_p_z_given_x += log_terms[pick] - lse;
                    pick
                }
            };
            assignment[i] = j;
            members[j].push(i);
        }

        // 2. parameters from the conjugate posteriors given Z
        let counts: Vec<f64> = members.iter().map(|m| m.len() as f64).collect();
        let post_conc: Vec<f64> = self
            .aug_concentration
            .iter()
            .zip(&counts)
            .map(|(c, n)| c + n)
            .collect();
        let mut weights = vec![0.0; self.k];
        let mut wsum = 0.0;
        for j in 0..self.k {
            let gamma = rand_distr::Gamma::new(post_conc[j], 1.0)
                .map_err(|e| Error::evaluation(format!("gamma draw: {e}")))?;
            weights[j] = rng.sample(gamma).max(f64::MIN_POSITIVE);
            wsum += weights[j];
        }
        for w in &mut weights {
            *w /= wsum;
        }
        let mut means = Vec::with_capacity(self.k);
        let mut covs = Vec::with_capacity(self.k);
        let mut posteriors = Vec::with_capacity(self.k);
        for j in 0..self.k {
            let post = self.niw_posterior(&members[j]);
            let (mu, sigma) = self.sample_niw(&post, rng)?;
            means.push(mu);
            covs.push(sigma);
            posteriors.push(post);
        }
        let proposal = GmmParams {
            weights,
            means,
            covs,
        };
        let cand = self.project(&self.point_of(&proposal));
        let cand_params = self.params_of(&cand)?;
        let cand_preps = self.preps(&cand_params)?;

        // composite-kernel density at the sampled values, with the label
        // factor evaluated for this Z only
        let mut log_q_fwd = log_p_z_given_x + ln_dirichlet(&cand_params.weights, &post_conc);
        for j in 0..self.k {
            log_q_fwd += ln_niw(
                &cand_params.means[j],
                &cand_preps[j].inv,
                cand_preps[j].logdet,
                &posteriors[j],
            );
        }

        // reverse move: same Z drawn under the candidate, back to x
        let cand_log_w: Vec<f64> = cand_params.weights.iter().map(|w| w.ln()).collect();
        let mut log_p_z_given_y = 0.0;
        for (i, z) in self.data.iter().enumerate() {
            if self.labels[i].is_some() {
                continue;
            }
            for j in 0..self.k {
                log_terms[j] =
                    cand_log_w[j] + self.log_gauss(&cand_preps[j], &cand_params.means[j], z);
            }
            let lse = log_sum_exp(&log_terms);
            log_p_z_given_y += log_terms[assignment[i]] - lse;
        }
        let mut log_q_rev = log_p_z_given_y + ln_dirichlet(&params.weights, &post_conc);
        for j in 0..self.k {
            log_q_rev += ln_niw(&params.means[j], &preps[j].inv, preps[j].logdet, &posteriors[j]);
        }

        Ok((cand, log_q_rev - log_q_fwd))
    }

    fn model_distance(&self, a: &ModelPoint, b: &ModelPoint) -> Result<f64> {
        let pa = self.params_of(a)?;
        let pb = self.params_of(b)?;
        let k = self.k;
        let wm = 2.0 * self.bounds.r_bound;
        let wc = 2.0 * self.bounds.l_cap;
        // squared per-pair cost; the RMS over blocks decomposes per component
        let cost = |i: usize, j: usize| -> f64 {
            let dm = (&pa.means[i] - &pb.means[j]).norm() / wm;
            let dc = (&pa.covs[i] - &pb.covs[j]).norm() / wc;
            let dw = (pa.weights[i] - pb.weights[j]).abs();
            dm * dm + dc * dc + dw * dw
        };
        let best = if k <= 8 {
            let mut perm: Vec<usize> = (0..k).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                let total: f64 = (0..k).map(|i| cost(i, p[i])).sum();
                if total < best {
                    best = total;
                }
            });
            best
        } else {
            // greedy fallback for very large K
            let mut used = vec![false; k];
            let mut total = 0.0;
            for i in 0..k {
                let (j, c) = (0..k)
                    .filter(|&j| !used[j])
                    .map(|j| (j, cost(i, j)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                used[j] = true;
                total += c;
            }
            total
        };
        Ok((best / (3.0 * k as f64)).sqrt())
    }
}

fn permute(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// Random feasible point in the strict interior of the bounds: weights away
/// from the simplex boundary, means inside the ball, covariance eigenvalues
/// well clear of the floor and cap. Finite-difference gradient checks need
/// the well-conditioned interior; boundary points are feasible but their
/// curvature is beyond what central differences at h = 1e-5 resolve.
pub fn random_interior_point(model: &GmmModel, rng: &mut ChaCha8Rng) -> ModelPoint {
    let (k, d) = (model.k(), model.d());
    let b = &model.bounds;
    let mut weights: Vec<f64> = (0..k).map(|_| 0.1 + rng.random::<f64>()).collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    let center = DVector::from_column_slice(&b.center);
    let means = (0..k)
        .map(|_| {
            let dir = DVector::from_fn(d, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let norm = dir.norm().max(f64::MIN_POSITIVE);
            let r = 0.8 * b.r_bound * rng.random::<f64>().powf(1.0 / d as f64);
            &center + dir * (r / norm)
        })
        .collect();
    let covs = (0..k)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let raw = &a * a.transpose() + DMatrix::<f64>::identity(d, d);
            let top = raw
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(0.0_f64, |m, &l| m.max(l));
            // rescale the spectrum into [0.05, 0.9] of the cap
            let lo = 0.05 * b.l_cap;
            let scale = (0.9 * b.l_cap - lo) / top;
            raw * scale + DMatrix::<f64>::identity(d, d) * lo
        })
        .collect();
    model.point_of(&GmmParams {
        weights,
        means,
        covs,
    })
}

/// Ancestral sampling from a mixture; the first `ceil(fraction * m)` points
/// carry their true component labels.
pub fn sample_gmm(
    params: &GmmParams,
    m: usize,
    label_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if m == 0 {
        return Err(Error::config("cannot sample an empty dataset"));
    }
    let k = params.k();
    let chols: Vec<_> = params
        .covs
        .iter()
        .map(|c| {
            nalgebra::Cholesky::new(c.clone())
                .ok_or_else(|| Error::config("sampling requires PD covariances"))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_labeled = (label_fraction * m as f64).ceil() as usize;
    let mut points = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = k - 1;
        for j in 0..k {
            acc += params.weights[j];
            if u < acc {
                comp = j;
                break;
            }
        }
        let d = params.d();
        let zeta = DVector::from_fn(d, |_, _| rng.sample(rand_distr::StandardNormal));
        let z = &params.means[comp] + chols[comp].l() * zeta;
        points.push(z.iter().copied().collect());
        labels.push(if i < n_labeled { Some(comp) } else { None });
    }
    let any_labeled = labels.iter().any(|l| l.is_some());
    Ok(Dataset {
        points,
        labels: if any_labeled { Some(labels) } else { None },
        meta: None,
    })
}
