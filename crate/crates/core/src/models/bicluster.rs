//! Bi-clustering energy over row/column index-set pairs of a count matrix.
//!
//! The coherence term is zero exactly when the selected submatrix is
//! multiplicatively coherent (rank one); the prior term rewards covered
//! counts and charges one unit of `alpha` per selected row and column, which
//! keeps all-zero rows and columns out of the optimum.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, EnergyModel, ModelPoint, ModelSpec, SpaceKind};
use crate::rng::fnv1a64;

/// Row and column index sets of a bi-cluster (export form).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bicluster {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

pub struct BiclusterModel {
    matrix: Vec<Vec<f64>>,
    n_rows: usize,
    n_cols: usize,
    alpha: f64,
    spec: ModelSpec,
}

impl BiclusterModel {
    pub fn new(matrix: Vec<Vec<f64>>, alpha: f64) -> Result<Self> {
        if matrix.is_empty() || matrix[0].is_empty() {
            return Err(Error::Empty("count matrix is empty".into()));
        }
        let n_cols = matrix[0].len();
        if matrix.iter().any(|r| r.len() != n_cols) {
            return Err(Error::config("count matrix rows have unequal length"));
        }
        if matrix.iter().flatten().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::config("count matrix entries must be finite and >= 0"));
        }
        let n_rows = matrix.len();
        let name = format!("bicluster-{n_rows}x{n_cols}");
        let spec = ModelSpec {
            id: fnv1a64(format!("{name}-a{alpha}").as_bytes()),
            name,
            kind: SpaceKind::Discrete,
            dimension: n_rows + n_cols,
            bounds: format!("subsets of {n_rows} rows x {n_cols} columns"),
            bounded: true,
            has_gradient: false,
            has_augmented_proposal: false,
        };
        Ok(BiclusterModel {
            matrix,
            n_rows,
            n_cols,
            alpha,
            spec,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    pub fn point_from(&self, bc: &Bicluster) -> Result<ModelPoint> {
        let mut words = vec![0u8; self.n_rows + self.n_cols];
        for &r in &bc.rows {
            if r >= self.n_rows {
                return Err(Error::config("row index out of range"));
            }
            words[r] = 1;
        }
        for &c in &bc.cols {
            if c >= self.n_cols {
                return Err(Error::config("column index out of range"));
            }
            words[self.n_rows + c] = 1;
        }
        Ok(ModelPoint::discrete(self.spec.id, words))
    }

    pub fn bicluster_of(&self, point: &ModelPoint) -> Result<Bicluster> {
        let words = point.words()?;
        if words.len() != self.n_rows + self.n_cols {
            return Err(Error::config("encoding length mismatch"));
        }
        Ok(Bicluster {
            rows: (0..self.n_rows).filter(|&r| words[r] == 1).collect(),
            cols: (0..self.n_cols)
                .filter(|&c| words[self.n_rows + c] == 1)
                .collect(),
        })
    }

    /// Coherence term alone (non-negative up to rounding).
    pub fn coherence(&self, point: &ModelPoint) -> Result<f64> {
        let (coh, _) = self.terms(point)?;
        Ok(coh)
    }

    fn terms(&self, point: &ModelPoint) -> Result<(f64, f64)> {
        let words = point.words()?;
        if words.len() != self.n_rows + self.n_cols {
            return Err(Error::config("encoding length mismatch"));
        }
        let rows: Vec<usize> = (0..self.n_rows).filter(|&r| words[r] == 1).collect();
        let cols: Vec<usize> = (0..self.n_cols)
            .filter(|&c| words[self.n_rows + c] == 1)
            .collect();
        let mut s = 0.0;
        let mut sum_a_log_a = 0.0;
        let mut col_sums = vec![0.0; cols.len()];
        let mut sum_r_log_r = 0.0;
        for &r in &rows {
            let mut row_sum = 0.0;
            for (ci, &c) in cols.iter().enumerate() {
                let a = self.matrix[r][c];
                row_sum += a;
                col_sums[ci] += a;
                sum_a_log_a += xlogx(a);
            }
            s += row_sum;
            sum_r_log_r += xlogx(row_sum);
        }
        let sum_c_log_c: f64 = col_sums.iter().map(|&c| xlogx(c)).sum();
        let coherence = xlogx(s) + sum_a_log_a - sum_r_log_r - sum_c_log_c;
        let prior = self.alpha * (2.0 * s - rows.len() as f64 - cols.len() as f64);
        Ok((coherence, prior))
    }
}

impl EnergyModel for BiclusterModel {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn energy(&self, point: &ModelPoint) -> Result<f64> {
        let (coherence, prior) = self.terms(point)?;
        Ok(coherence - prior)
    }

    fn project(&self, point: &ModelPoint) -> ModelPoint {
        point.clone()
    }

    fn in_bounds(&self, point: &ModelPoint) -> bool {
        point
            .words()
            .map(|w| w.len() == self.n_rows + self.n_cols && w.iter().all(|&b| b <= 1))
            .unwrap_or(false)
    }

    fn neighbors(&self, point: &ModelPoint) -> Result<Vec<ModelPoint>> {
        let words = point.words()?;
        let mut out = Vec::with_capacity(words.len());
        for i in 0..words.len() {
            let mut w = words.to_vec();
            w[i] = 1 - w[i];
            out.push(ModelPoint::discrete(self.spec.id, w));
        }
        Ok(out)
    }

    fn neighbor_count(&self, _point: &ModelPoint) -> Result<usize> {
        Ok(self.n_rows + self.n_cols)
    }

    fn nth_neighbor(&self, point: &ModelPoint, idx: usize) -> Result<ModelPoint> {
        let words = point.words()?;
        if idx >= words.len() {
            return Err(Error::config("neighbor index out of range"));
        }
        let mut w = words.to_vec();
        w[idx] = 1 - w[idx];
        Ok(ModelPoint::discrete(self.spec.id, w))
    }

    fn coordinate_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.n_rows + self.n_cols]
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> ModelPoint {
        let words = (0..self.n_rows + self.n_cols)
            .map(|_| if rng.random::<f64>() < 0.5 { 1 } else { 0 })
            .collect();
        ModelPoint::discrete(self.spec.id, words)
    }

    fn model_distance(&self, a: &ModelPoint, b: &ModelPoint) -> Result<f64> {
        // 1 - Jaccard over the tagged row+column index set
        let (wa, wb) = (a.words()?, b.words()?);
        let mut inter = 0usize;
        let mut union = 0usize;
        for (x, y) in wa.iter().zip(wb) {
            if *x == 1 && *y == 1 {
                inter += 1;
            }
            if *x == 1 || *y == 1 {
                union += 1;
            }
        }
        Ok(if union == 0 {
            0.0
        } else {
            1.0 - inter as f64 / union as f64
        })
    }
}

/// Exports a bi-cluster with its energy as JSON ({rows, cols, energy}).
pub fn export_bicluster(model: &BiclusterModel, point: &ModelPoint) -> Result<serde_json::Value> {
    let bc = model.bicluster_of(point)?;
    Ok(serde_json::json!({
        "rows": bc.rows,
        "cols": bc.cols,
        "energy": model.energy(point)?,
    }))
}

/// Synthetic And-Or generator output.
#[derive(Debug, Clone)]
pub struct GeneratedMatrix {
    pub matrix: Vec<Vec<f64>>,
    /// Elements selectable by factor a (the true bi-cluster rows).
    pub truth_rows: Vec<usize>,
    /// Elements selectable by factor b (the true bi-cluster columns).
    pub truth_cols: Vec<usize>,
}

/// Draws `n_obs` (element-for-a, element-for-b) pairs and accumulates the
/// symmetric co-occurrence matrix over the element universe; factors share
/// `overlap_count` elements. Background noise increments every cell with
/// probability `p_noise` per observation.
pub fn generate_matrix(
    n_alt: usize,
    overlap_count: usize,
    p_noise: f64,
    n_obs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedMatrix> {
    if n_alt == 0 {
        return Err(Error::config("need at least one alternative element"));
    }
    if overlap_count > n_alt {
        return Err(Error::config("overlap cannot exceed the alternative count"));
    }
    if !(0.0..=1.0).contains(&p_noise) {
        return Err(Error::config("noise level must be in [0, 1]"));
    }
    let universe = 2 * n_alt - overlap_count;
    let a_elems: Vec<usize> = (0..n_alt).collect();
    let b_elems: Vec<usize> = (n_alt - overlap_count..universe).collect();
    let mut matrix = vec![vec![0.0; universe]; universe];
    for _ in 0..n_obs {
        let x = a_elems[rng.random_range(0..n_alt)];
        let y = b_elems[rng.random_range(0..n_alt)];
        matrix[x][y] += 1.0;
        matrix[y][x] += 1.0;
    }
    if p_noise > 0.0 {
        let binom = rand_distr::Binomial::new(n_obs as u64, p_noise)
            .map_err(|e| Error::config(format!("noise binomial: {e}")))?;
        for row in matrix.iter_mut() {
            for cell in row.iter_mut() {
                *cell += rng.sample(binom) as f64;
            }
        }
    }
    Ok(GeneratedMatrix {
        matrix,
        truth_rows: a_elems,
        truth_cols: b_elems,
    })
}

/// Writes a count matrix as plain CSV.
pub fn save_matrix_csv(matrix: &[Vec<f64>], path: &std::path::Path) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in matrix {
        let rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        wtr.write_record(&rec)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a count matrix from CSV.
pub fn load_matrix_csv(path: &std::path::Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let row: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::config(format!("bad matrix cell `{f}`: {e}")))
            })
            .collect::<Result<_>>()?;
        out.push(row);
    }
    if out.is_empty() {
        return Err(Error::Empty("matrix CSV has no rows".into()));
    }
    Ok(out)
}

/// Convenience: a bi-cluster dataset is just its matrix; datasets passed as
/// JSON points are not used by this model.
pub fn dataset_placeholder() -> Dataset {
    Dataset {
        points: vec![vec![0.0]],
        labels: None,
        meta: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    fn model_from(matrix: Vec<Vec<f64>>, alpha: f64) -> BiclusterModel {
        BiclusterModel::new(matrix, alpha).unwrap()
    }

    #[test]
    fn empty_bicluster_has_zero_energy() {
        let m = model_from(vec![vec![1.0, 2.0], vec![3.0, 4.0]], 0.3);
        let p = m
            .point_from(&Bicluster {
                rows: vec![],
                cols: vec![],
            })
            .unwrap();
        assert_eq!(m.energy(&p).unwrap(), 0.0);
    }

    #[test]
    fn rank_one_submatrix_is_coherent() {
        // a_{x,y} = u_x * v_y
        let u = [1.0, 2.0, 3.0];
        let v = [2.0, 5.0];
        let matrix: Vec<Vec<f64>> = u.iter().map(|&a| v.iter().map(|&b| a * b).collect()).collect();
        let m = model_from(matrix, 0.0);
        let p = m
            .point_from(&Bicluster {
                rows: vec![0, 1, 2],
                cols: vec![0, 1],
            })
            .unwrap();
        assert_abs_diff_eq!(m.coherence(&p).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn worked_two_by_two_energy() {
        // direct arithmetic oracle for [[1,1],[1,3]] at alpha = 0:
        // E = s ln s + sum a ln a - sum r ln r - sum c ln c
        let m = model_from(vec![vec![1.0, 1.0], vec![1.0, 3.0]], 0.0);
        let p = m
            .point_from(&Bicluster {
                rows: vec![0, 1],
                cols: vec![0, 1],
            })
            .unwrap();
        let s: f64 = 6.0;
        let oracle = s * s.ln() + 3.0 * 3.0f64.ln()
            - (2.0 * 2.0f64.ln() + 4.0 * 4.0f64.ln())
            - (2.0 * 2.0f64.ln() + 4.0 * 4.0f64.ln());
        assert_abs_diff_eq!(m.energy(&p).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 0.1834500701737538, epsilon = 1e-12);
    }

    #[test]
    fn transpose_symmetry() {
        let mut rng = substream(5, "bc");
        let gen = generate_matrix(3, 1, 0.05, 50, &mut rng).unwrap();
        let n = gen.matrix.len();
        let transposed: Vec<Vec<f64>> = (0..n)
            .map(|c| (0..n).map(|r| gen.matrix[r][c]).collect())
            .collect();
        let m1 = model_from(gen.matrix.clone(), 0.1);
        let m2 = model_from(transposed, 0.1);
        let bc = Bicluster {
            rows: vec![0, 2],
            cols: vec![1, 3, 4],
        };
        let swapped = Bicluster {
            rows: bc.cols.clone(),
            cols: bc.rows.clone(),
        };
        let e1 = m1.energy(&m1.point_from(&bc).unwrap()).unwrap();
        let e2 = m2.energy(&m2.point_from(&swapped).unwrap()).unwrap();
        assert_abs_diff_eq!(e1, e2, epsilon = 1e-9);
    }

    #[test]
    fn zero_row_costs_alpha_only() {
        // row 2 is entirely zero inside the chosen columns
        let matrix = vec![
            vec![2.0, 4.0, 0.0],
            vec![1.0, 2.0, 0.0],
            vec![0.0, 0.0, 5.0],
        ];
        let without = Bicluster {
            rows: vec![0, 1],
            cols: vec![0, 1],
        };
        let with = Bicluster {
            rows: vec![0, 1, 2],
            cols: vec![0, 1],
        };
        for alpha in [0.0, 0.4] {
            let m = model_from(matrix.clone(), alpha);
            let e0 = m.energy(&m.point_from(&without).unwrap()).unwrap();
            let e1 = m.energy(&m.point_from(&with).unwrap()).unwrap();
            assert_abs_diff_eq!(e1 - e0, alpha, epsilon = 1e-12);
        }
    }

    #[test]
    fn neighbors_toggle_each_index() {
        let m = model_from(vec![vec![1.0; 3]; 3], 0.0);
        let empty = m
            .point_from(&Bicluster {
                rows: vec![],
                cols: vec![],
            })
            .unwrap();
        let nbrs = m.neighbors(&empty).unwrap();
        assert_eq!(nbrs.len(), 6);
        // from the empty state every move is an addition
        for nb in &nbrs {
            assert_eq!(nb.words().unwrap().iter().map(|&b| b as usize).sum::<usize>(), 1);
        }
        let full = m
            .point_from(&Bicluster {
                rows: vec![0, 1, 2],
                cols: vec![0, 1, 2],
            })
            .unwrap();
        for nb in m.neighbors(&full).unwrap() {
            assert_eq!(nb.words().unwrap().iter().map(|&b| b as usize).sum::<usize>(), 5);
        }
        // exhaustive symmetry on the 3x3 lattice
        let mut rng = substream(8, "sym");
        for _ in 0..20 {
            let p = m.random_point(&mut rng);
            for nb in m.neighbors(&p).unwrap() {
                assert!(m.neighbors(&nb).unwrap().iter().any(|q| *q == p));
            }
        }
    }

    #[test]
    fn coherence_is_nonnegative_on_random_submatrices() {
        let mut rng = substream(12, "coh");
        for _ in 0..200 {
            let gen = generate_matrix(4, 2, 0.1, 80, &mut rng).unwrap();
            let m = model_from(gen.matrix, 0.0);
            let p = m.random_point(&mut rng);
            assert!(m.coherence(&p).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn generator_blocks_and_overlap() {
        let mut rng = substream(3, "gen");
        // no noise, no overlap: counts confined to the two disjoint blocks
        let gen = generate_matrix(4, 0, 0.0, 200, &mut rng).unwrap();
        assert_eq!(gen.matrix.len(), 8);
        for (r, row) in gen.matrix.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let in_block = (gen.truth_rows.contains(&r) && gen.truth_cols.contains(&c))
                    || (gen.truth_cols.contains(&r) && gen.truth_rows.contains(&c));
                if !in_block {
                    assert_eq!(v, 0.0, "count outside blocks at ({r},{c})");
                }
            }
        }
        let total: f64 = gen.matrix.iter().flatten().sum();
        assert_eq!(total, 400.0);

        // full overlap: both factors share all elements
        let full = generate_matrix(4, 4, 0.0, 50, &mut rng).unwrap();
        assert_eq!(full.matrix.len(), 4);
        assert_eq!(full.truth_rows, full.truth_cols);
    }

    #[test]
    fn generator_frequencies_match_product_law() {
        let mut rng = substream(41, "freq");
        let n_alt = 4;
        let n_obs = 40_000;
        let gen = generate_matrix(n_alt, 0, 0.0, n_obs, &mut rng).unwrap();
        // each (a, b) pair has probability 1/16; cell (x, y) with x in a-set,
        // y in b-set accumulates n_obs / 16 expected counts
        let expect = n_obs as f64 / (n_alt * n_alt) as f64;
        let sigma = (n_obs as f64 * (1.0 / 16.0) * (15.0 / 16.0)).sqrt();
        for &r in &gen.truth_rows {
            for &c in &gen.truth_cols {
                let v = gen.matrix[r][c];
                assert!(
                    (v - expect).abs() < 4.0 * sigma,
                    "cell ({r},{c}) = {v}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let matrix = vec![vec![1.0, 2.5, 0.0], vec![0.0, 3.0, 4.0]];
        save_matrix_csv(&matrix, &path).unwrap();
        let back = load_matrix_csv(&path).unwrap();
        assert_eq!(back, matrix);
    }
}
