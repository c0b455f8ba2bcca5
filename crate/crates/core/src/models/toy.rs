//! Small analytic landscapes used for testing and benchmarking the pipeline.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{uniform_in_box, EnergyModel, ModelPoint, ModelSpec, SpaceKind};
use crate::rng::fnv1a64;

/// E(x) = ||x||^2 on a box [-half_width, half_width]^d. Convex, one minimum.
pub struct QuadraticBowl {
    dim: usize,
    half_width: f64,
    spec: ModelSpec,
}

impl QuadraticBowl {
    pub fn new(dim: usize, half_width: f64) -> Self {
        let name = format!("quadratic-{dim}d");
        let spec = ModelSpec {
            id: fnv1a64(name.as_bytes()),
            name,
            kind: SpaceKind::Continuous,
            dimension: dim,
            bounds: format!("box [-{half_width}, {half_width}]^{dim}"),
            bounded: true,
            has_gradient: true,
            has_augmented_proposal: false,
        };
        QuadraticBowl {
            dim,
            half_width,
            spec,
        }
    }
}

impl EnergyModel for QuadraticBowl {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn energy(&self, point: &ModelPoint) -> Result<f64> {
        Ok(point.coords()?.iter().map(|x| x * x).sum())
    }

    fn gradient(&self, point: &ModelPoint) -> Result<Vec<f64>> {
        Ok(point.coords()?.iter().map(|x| 2.0 * x).collect())
    }

    fn project(&self, point: &ModelPoint) -> ModelPoint {
        let coords = point
            .coords()
            .expect("continuous point")
            .iter()
            .map(|&x| x.clamp(-self.half_width, self.half_width))
            .collect();
        ModelPoint::continuous(self.spec.id, coords)
    }

    fn in_bounds(&self, point: &ModelPoint) -> bool {
        point
            .coords()
            .map(|c| c.iter().all(|x| x.abs() <= self.half_width + 1e-12))
            .unwrap_or(false)
    }

    fn coordinate_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-self.half_width, self.half_width); self.dim]
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> ModelPoint {
        uniform_in_box(self.spec.id, &self.coordinate_bounds(), rng)
    }

    fn model_distance(&self, a: &ModelPoint, b: &ModelPoint) -> Result<f64> {
        let (x, y) = (a.coords()?, b.coords()?);
        Ok(x.iter()
            .zip(y)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt())
    }
}

/// E(x) = (x^2 - 1)^2 + tilt * x on [-half_width, half_width].
///
/// `tilt = 0` is the symmetric double well with minima at +-1 and a barrier
/// of height 1 at the origin. A small tilt makes the wells asymmetric (used
/// by the mass-estimation checks).
pub struct DoubleWell1D {
    tilt: f64,
    half_width: f64,
    spec: ModelSpec,
}

impl DoubleWell1D {
    pub fn new(tilt: f64, half_width: f64) -> Self {
        let name = format!("double-well-tilt-{tilt}");
        let spec = ModelSpec {
            id: fnv1a64(name.as_bytes()),
            name,
            kind: SpaceKind::Continuous,
            dimension: 1,
            bounds: format!("interval [-{half_width}, {half_width}]"),
            bounded: true,
            has_gradient: true,
            has_augmented_proposal: false,
        };
        DoubleWell1D {
            tilt,
            half_width,
            spec,
        }
    }

    pub fn symmetric() -> Self {
        DoubleWell1D::new(0.0, 2.5)
    }
}

impl EnergyModel for DoubleWell1D {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn energy(&self, point: &ModelPoint) -> Result<f64> {
        let x = point.coords()?[0];
        Ok((x * x - 1.0).powi(2) + self.tilt * x)
    }

    fn gradient(&self, point: &ModelPoint) -> Result<Vec<f64>> {
        let x = point.coords()?[0];
        Ok(vec![4.0 * x * (x * x - 1.0) + self.tilt])
    }

    fn project(&self, point: &ModelPoint) -> ModelPoint {
        let x = point.coords().expect("continuous point")[0];
        ModelPoint::continuous(self.spec.id, vec![x.clamp(-self.half_width, self.half_width)])
    }

    fn in_bounds(&self, point: &ModelPoint) -> bool {
        point
            .coords()
            .map(|c| c[0].abs() <= self.half_width + 1e-12)
            .unwrap_or(false)
    }

    fn coordinate_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-self.half_width, self.half_width)]
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> ModelPoint {
        uniform_in_box(self.spec.id, &self.coordinate_bounds(), rng)
    }

    fn model_distance(&self, a: &ModelPoint, b: &ModelPoint) -> Result<f64> {
        Ok((a.coords()?[0] - b.coords()?[0]).abs())
    }
}

/// Negative log of a mixture of isotropic Gaussian pits in 2-D.
///
/// E(x) = -ln sum_i w_i exp(-||x - c_i||^2 / (2 sigma^2)). Adjacent pits
/// connect through saddles, which makes this the reference landscape for
/// barrier-estimation checks.
pub struct GaussianWells2D {
    centers: Vec<[f64; 2]>,
    weights: Vec<f64>,
    sigma2: f64,
    half_width: f64,
    spec: ModelSpec,
}

impl GaussianWells2D {
    pub fn new(centers: Vec<[f64; 2]>, weights: Vec<f64>, sigma2: f64, half_width: f64) -> Self {
        assert_eq!(centers.len(), weights.len());
        let name = format!("gaussian-wells-{}", centers.len());
        let spec = ModelSpec {
            id: fnv1a64(name.as_bytes()),
            name,
            kind: SpaceKind::Continuous,
            dimension: 2,
            bounds: format!("box [-{half_width}, {half_width}]^2"),
            bounded: true,
            has_gradient: true,
            has_augmented_proposal: false,
        };
        GaussianWells2D {
            centers,
            weights,
            sigma2,
            half_width,
            spec,
        }
    }

    /// Two equal-weight wells at (-1, 0) and (1, 0).
    pub fn twin(sigma2: f64) -> Self {
        GaussianWells2D::new(
            vec![[-1.0, 0.0], [1.0, 0.0]],
            vec![0.5, 0.5],
            sigma2,
            2.5,
        )
    }

    fn mix(&self, x: f64, y: f64) -> (f64, Vec<f64>) {
        let terms: Vec<f64> = self
            .centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| {
                let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                w * (-d2 / (2.0 * self.sigma2)).exp()
            })
            .collect();
        (terms.iter().sum(), terms)
    }
}

impl EnergyModel for GaussianWells2D {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn energy(&self, point: &ModelPoint) -> Result<f64> {
        let c = point.coords()?;
        let (total, _) = self.mix(c[0], c[1]);
        Ok(-total.max(f64::MIN_POSITIVE).ln())
    }

    fn gradient(&self, point: &ModelPoint) -> Result<Vec<f64>> {
        let c = point.coords()?;
        let (total, terms) = self.mix(c[0], c[1]);
        let total = total.max(f64::MIN_POSITIVE);
        let mut g = vec![0.0; 2];
        for (center, t) in self.centers.iter().zip(&terms) {
            g[0] += t / total * (c[0] - center[0]) / self.sigma2;
            g[1] += t / total * (c[1] - center[1]) / self.sigma2;
        }
        Ok(g)
    }

    fn project(&self, point: &ModelPoint) -> ModelPoint {
        let coords = point
            .coords()
            .expect("continuous point")
            .iter()
            .map(|&x| x.clamp(-self.half_width, self.half_width))
            .collect();
        ModelPoint::continuous(self.spec.id, coords)
    }

    fn in_bounds(&self, point: &ModelPoint) -> bool {
        point
            .coords()
            .map(|c| c.iter().all(|x| x.abs() <= self.half_width + 1e-12))
            .unwrap_or(false)
    }

    fn coordinate_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-self.half_width, self.half_width); 2]
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> ModelPoint {
        uniform_in_box(self.spec.id, &self.coordinate_bounds(), rng)
    }

    fn model_distance(&self, a: &ModelPoint, b: &ModelPoint) -> Result<f64> {
        let (x, y) = (a.coords()?, b.coords()?);
        Ok(x.iter()
            .zip(y)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt())
    }
}
