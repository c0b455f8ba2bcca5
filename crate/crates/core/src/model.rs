//! The contract every energy model implements.
//!
//! The sampler, basin mapper and learner harness only see this interface, so
//! they work unchanged across continuous (Gaussian mixture) and discrete
//! (Bernoulli template, bi-cluster) model spaces.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a model space is a bounded subset of R^n or a finite lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceKind {
    Continuous,
    Discrete,
}

/// Parameter assignment of a model point.
///
/// Continuous models use a real vector (the free coordinates of the model).
/// Discrete models use a byte vector whose interpretation is model-specific
/// (template bits, grid weight indices, membership flags).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoding {
    Continuous(Vec<f64>),
    Discrete(Vec<u8>),
}

impl Encoding {
    pub fn len(&self) -> usize {
        match self {
            Encoding::Continuous(v) => v.len(),
            Encoding::Discrete(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_continuous(&self) -> Result<&[f64]> {
        match self {
            Encoding::Continuous(v) => Ok(v),
            Encoding::Discrete(_) => Err(Error::unsupported(
                "expected a continuous encoding, got a discrete one",
            )),
        }
    }

    pub fn as_discrete(&self) -> Result<&[u8]> {
        match self {
            Encoding::Discrete(v) => Ok(v),
            Encoding::Continuous(_) => Err(Error::unsupported(
                "expected a discrete encoding, got a continuous one",
            )),
        }
    }

    /// Plain JSON array form, used for `location` fields in exports.
    pub fn to_json_value(&self) -> serde_json::Value {
        match self {
            Encoding::Continuous(v) => serde_json::json!(v),
            Encoding::Discrete(v) => serde_json::json!(v),
        }
    }
}

/// A point in a model space, tagged with the id of the owning model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub model_id: u64,
    pub encoding: Encoding,
}

impl ModelPoint {
    pub fn continuous(model_id: u64, coords: Vec<f64>) -> Self {
        ModelPoint {
            model_id,
            encoding: Encoding::Continuous(coords),
        }
    }

    pub fn discrete(model_id: u64, words: Vec<u8>) -> Self {
        ModelPoint {
            model_id,
            encoding: Encoding::Discrete(words),
        }
    }

    pub fn coords(&self) -> Result<&[f64]> {
        self.encoding.as_continuous()
    }

    pub fn words(&self) -> Result<&[u8]> {
        self.encoding.as_discrete()
    }
}

/// Static description of a model space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Stable identifier carried by every point of this model.
    pub id: u64,
    /// Human-readable model name used in exports.
    pub name: String,
    pub kind: SpaceKind,
    /// Number of coordinates in the encoding.
    pub dimension: usize,
    /// Free-form description of the bound construction.
    pub bounds: String,
    /// The declared space is bounded. Sampling an unbounded space is a
    /// configuration error.
    pub bounded: bool,
    pub has_gradient: bool,
    pub has_augmented_proposal: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 1 {
            return Err(Error::config("model dimension must be >= 1"));
        }
        if self.kind == SpaceKind::Continuous && !self.has_gradient {
            return Err(Error::config("continuous models must provide a gradient"));
        }
        Ok(())
    }
}

/// Fraction of coordinate bound width used as the random-walk step scale.
pub const DEFAULT_PROP_SCALE: f64 = 0.05;

/// An energy model over a bounded space.
///
/// Implementations must be pure given `(point, dataset)`: no hidden mutable
/// state, so a model instance may be shared read-only across threads. All
/// randomness is drawn from the caller-provided RNG.
pub trait EnergyModel: Send + Sync {
    fn spec(&self) -> &ModelSpec;

    /// E(x). Must be finite for in-bound points; degenerate parameters are an
    /// evaluation error, never a silent clamp.
    fn energy(&self, point: &ModelPoint) -> Result<f64>;

    /// dE/dx for continuous models.
    fn gradient(&self, point: &ModelPoint) -> Result<Vec<f64>> {
        let _ = point;
        Err(Error::unsupported(format!(
            "gradient is not defined for model `{}`",
            self.spec().name
        )))
    }

    /// Projects onto the feasible set. Total and idempotent.
    fn project(&self, point: &ModelPoint) -> ModelPoint;

    fn in_bounds(&self, point: &ModelPoint) -> bool;

    /// The finite symmetric move set of a discrete model.
    fn neighbors(&self, point: &ModelPoint) -> Result<Vec<ModelPoint>> {
        let _ = point;
        Err(Error::unsupported(format!(
            "neighbors is not defined for model `{}`",
            self.spec().name
        )))
    }

    /// |N(x)| without materializing the neighborhood.
    fn neighbor_count(&self, point: &ModelPoint) -> Result<usize> {
        Ok(self.neighbors(point)?.len())
    }

    /// The idx-th neighbor in the same order `neighbors` uses.
    fn nth_neighbor(&self, point: &ModelPoint, idx: usize) -> Result<ModelPoint> {
        let mut n = self.neighbors(point)?;
        if idx >= n.len() {
            return Err(Error::config(format!(
                "neighbor index {idx} out of range ({} neighbors)",
                n.len()
            )));
        }
        Ok(n.swap_remove(idx))
    }

    /// Per-coordinate (lo, hi) bound boxes. For continuous models these drive
    /// uniform initialization, proposal scales and bound-normalized
    /// distances; discrete models report the lattice extent per coordinate.
    fn coordinate_bounds(&self) -> Vec<(f64, f64)>;

    /// Draws a uniform point in bounds (continuous: uniform in the bound box,
    /// then projected; discrete: a uniform valid assignment).
    fn random_point(&self, rng: &mut ChaCha8Rng) -> ModelPoint;

    /// Random-walk proposal. Returns the candidate (already projected into
    /// bounds) and log Q(y,x) - log Q(x,y).
    fn propose_random(&self, point: &ModelPoint, rng: &mut ChaCha8Rng) -> Result<(ModelPoint, f64)> {
        match self.spec().kind {
            SpaceKind::Continuous => {
                let coords = point.coords()?;
                let bounds = self.coordinate_bounds();
                let scale = self.prop_scale();
                let normal = rand_distr::StandardNormal;
                let stepped: Vec<f64> = coords
                    .iter()
                    .zip(&bounds)
                    .map(|(&x, &(lo, hi))| {
                        let sigma = scale * (hi - lo);
                        let z: f64 = rng.sample(normal);
                        x + sigma * z
                    })
                    .collect();
                let cand = self.project(&ModelPoint::continuous(point.model_id, stepped));
                // Symmetric Gaussian kernel; the projection correction is not
                // applied (out-of-bound mass is folded onto the boundary).
                Ok((cand, 0.0))
            }
            SpaceKind::Discrete => {
                let n_here = self.neighbor_count(point)?;
                if n_here == 0 {
                    return Err(Error::evaluation("discrete point has no neighbors"));
                }
                let idx = rng.random_range(0..n_here);
                let cand = self.nth_neighbor(point, idx)?;
                let n_there = self.neighbor_count(&cand)?;
                Ok((cand, (n_here as f64).ln() - (n_there as f64).ln()))
            }
        }
    }

    /// Data-augmentation proposal: latent labels from p(Z|x), then parameters
    /// from p(theta|Z). Only models with latent structure support it.
    fn propose_augmented(
        &self,
        point: &ModelPoint,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ModelPoint, f64)> {
        let _ = (point, rng);
        Err(Error::unsupported(format!(
            "model `{}` has no augmented proposal",
            self.spec().name
        )))
    }

    /// Pseudometric between two points of the same model, invariant under the
    /// model's label-permutation symmetry.
    fn model_distance(&self, a: &ModelPoint, b: &ModelPoint) -> Result<f64>;

    /// Step scale of the random-walk kernel as a fraction of bound width.
    fn prop_scale(&self) -> f64 {
        DEFAULT_PROP_SCALE
    }

    /// Optional fast in-model coordinate descent (same greedy best-neighbor
    /// semantics as the generic routine, including the lexicographic
    /// tie-break). Returns `(minimum, energy, moves)`.
    fn descend_hint(&self, start: &ModelPoint, tie_tol: f64) -> Option<Result<(ModelPoint, f64, usize)>> {
        let _ = (start, tie_tol);
        None
    }
}

/// Checks the `model_id` tag of a point against a model.
pub fn check_owner(model: &dyn EnergyModel, point: &ModelPoint) -> Result<()> {
    if point.model_id != model.spec().id {
        return Err(Error::ModelMismatch(format!(
            "point belongs to model {:#x}, not `{}` ({:#x})",
            point.model_id,
            model.spec().name,
            model.spec().id
        )));
    }
    Ok(())
}

/// Bound-normalized distance between raw encodings. This is the metric used
/// for minima merging; unlike [`EnergyModel::model_distance`] it does *not*
/// quotient label permutations, so symmetric copies of a minimum stay
/// distinct basins.
pub fn raw_distance(model: &dyn EnergyModel, a: &ModelPoint, b: &ModelPoint) -> f64 {
    match (&a.encoding, &b.encoding) {
        (Encoding::Continuous(x), Encoding::Continuous(y)) => {
            let bounds = model.coordinate_bounds();
            x.iter()
                .zip(y)
                .zip(&bounds)
                .map(|((&xi, &yi), &(lo, hi))| {
                    let w = (hi - lo).max(f64::MIN_POSITIVE);
                    ((xi - yi) / w).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        }
        (Encoding::Discrete(x), Encoding::Discrete(y)) => {
            if x == y {
                0.0
            } else {
                1.0
            }
        }
        _ => f64::INFINITY,
    }
}

/// Uniform draw in the coordinate bound box (continuous helper).
pub fn uniform_in_box(model_id: u64, bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> ModelPoint {
    let coords = bounds
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..=hi))
        .collect();
    ModelPoint::continuous(model_id, coords)
}

/// A dataset as stored on disk: JSON with fields `points`, `labels`, `meta`.
///
/// Continuous models read real vectors; discrete models read 0/1 vectors with
/// optional integer labels.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Dataset {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ds: Dataset = serde_json::from_str(&text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Empty("dataset has no points".into()));
        }
        let d = self.points[0].len();
        if self.points.iter().any(|p| p.len() != d) {
            return Err(Error::config("dataset points have inconsistent dimension"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::config("labels length does not match points"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Label of point `i`, if any.
    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l[i])
    }
}
