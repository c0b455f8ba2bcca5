//! Energy Landscape Map construction and annotation.
//!
//! Leaves are local minima, internal nodes are barriers; the tree merges
//! basins in ascending barrier order with the single-linkage rule (the
//! barrier between a merged cluster and anything else is the lower of its
//! members' barriers). Nodes carry the probability mass and the volume of
//! their basin, both estimated from the converged Wang-Landau weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::barrier::BarrierTable;
use crate::error::{Error, Result};
use crate::gwl::{EnergyGrid, GammaTable};
use crate::model::{EnergyModel, ModelPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Leaf,
    Barrier,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElmNode {
    pub id: usize,
    pub kind: NodeKind,
    pub energy: f64,
    pub mass: f64,
    pub volume: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basin_id: Option<u32>,
    pub children: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElmTree {
    pub nodes: Vec<ElmNode>,
    pub root: usize,
}

/// Leaf input to tree construction.
#[derive(Debug, Clone)]
pub struct LeafSpec {
    pub basin_id: u32,
    pub energy: f64,
    pub location: Option<ModelPoint>,
}

impl ElmTree {
    pub fn leaves(&self) -> impl Iterator<Item = &ElmNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Leaf)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().count()
    }

    pub fn node(&self, id: usize) -> &ElmNode {
        &self.nodes[id]
    }

    fn parent_of(&self, id: usize) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.children.contains(&id))
    }

    /// Basin depth of a leaf: parent barrier energy minus leaf energy.
    pub fn leaf_depth(&self, id: usize) -> f64 {
        match self.parent_of(id) {
            Some(p) => self.nodes[p].energy - self.nodes[id].energy,
            None => 0.0,
        }
    }

    fn subtree_leaves(&self, id: usize) -> Vec<usize> {
        let mut stack = vec![id];
        let mut out = Vec::new();
        while let Some(n) = stack.pop() {
            if self.nodes[n].kind == NodeKind::Leaf {
                out.push(n);
            } else {
                stack.extend(&self.nodes[n].children);
            }
        }
        out.sort_unstable();
        out
    }

    /// Energy of the lowest common ancestor of two leaves.
    pub fn lca_energy(&self, a: usize, b: usize) -> f64 {
        let mut anc = std::collections::BTreeSet::new();
        let mut cur = a;
        anc.insert(cur);
        while let Some(p) = self.parent_of(cur) {
            anc.insert(p);
            cur = p;
        }
        let mut cur = b;
        loop {
            if anc.contains(&cur) {
                return self.nodes[cur].energy;
            }
            match self.parent_of(cur) {
                Some(p) => cur = p,
                None => return self.nodes[self.root].energy,
            }
        }
    }
}

/// Builds the merge tree from minima and pairwise barrier upper bounds.
///
/// Pairs never observed to cross carry an infinite barrier and join last at
/// (max observed energy + du), which keeps the tree connected.
pub fn build_tree(leaves: &[LeafSpec], barriers: &BarrierTable, du: f64) -> Result<ElmTree> {
    if leaves.is_empty() {
        return Err(Error::Empty("cannot build a tree with no minima".into()));
    }
    let mut leaves = leaves.to_vec();
    leaves.sort_by_key(|l| l.basin_id);

    let mut nodes: Vec<ElmNode> = leaves
        .iter()
        .enumerate()
        .map(|(i, l)| ElmNode {
            id: i,
            kind: NodeKind::Leaf,
            energy: l.energy,
            mass: 0.0,
            volume: 0.0,
            basin_id: Some(l.basin_id),
            children: vec![],
            location: l.location.as_ref().map(|p| p.encoding.to_json_value()),
        })
        .collect();

    let k = leaves.len();
    if k == 1 {
        return Ok(ElmTree {
            nodes,
            root: 0,
        });
    }

    // cluster index -> current tree node; barrier map between live clusters
    let mut cluster_node: Vec<Option<usize>> = (0..k).map(Some).collect();
    let mut dist: BTreeMap<(usize, usize), (f64, Option<serde_json::Value>)> = BTreeMap::new();
    let index_of_basin: BTreeMap<u32, usize> = leaves
        .iter()
        .enumerate()
        .map(|(i, l)| (l.basin_id, i))
        .collect();
    for (&(bi, bj), entry) in &barriers.entries {
        if let (Some(&ci), Some(&cj)) = (index_of_basin.get(&bi), index_of_basin.get(&bj)) {
            let key = (ci.min(cj), ci.max(cj));
            let cur = dist.get(&key).map(|d| d.0).unwrap_or(f64::INFINITY);
            if entry.energy < cur {
                dist.insert(key, (entry.energy, Some(entry.point.encoding.to_json_value())));
            }
        }
    }

    let fallback = {
        let max_leaf = leaves.iter().map(|l| l.energy).fold(f64::NEG_INFINITY, f64::max);
        let max_bar = dist
            .values()
            .map(|d| d.0)
            .fold(f64::NEG_INFINITY, f64::max);
        max_leaf.max(max_bar) + du
    };

    let subtree_min = |nodes: &[ElmNode], id: usize| -> f64 {
        let mut stack = vec![id];
        let mut best = f64::INFINITY;
        while let Some(n) = stack.pop() {
            if nodes[n].children.is_empty() {
                best = best.min(nodes[n].energy);
            } else {
                stack.extend(&nodes[n].children);
            }
        }
        best
    };

    let mut alive = k;
    while alive > 1 {
        // lowest finite barrier first, deterministic tie-break on indices
        let mut best: Option<((usize, usize), f64, Option<serde_json::Value>)> = None;
        for (&(ci, cj), (e, pt)) in &dist {
            if cluster_node[ci].is_none() || cluster_node[cj].is_none() {
                continue;
            }
            let better = match &best {
                None => true,
                Some((_, be, _)) => e < be,
            };
            if better {
                best = Some(((ci, cj), *e, pt.clone()));
            }
        }
        let ((ci, cj), barrier_e, barrier_pt) = match best {
            Some(v) => v,
            None => {
                // no crossing observed between the remaining clusters
                let mut iter = (0..k).filter(|&c| cluster_node[c].is_some());
                let ci = iter.next().unwrap();
                let cj = iter.next().unwrap();
                ((ci, cj), fallback, None)
            }
        };
        let na = cluster_node[ci].unwrap();
        let nb = cluster_node[cj].unwrap();
        // merge heights never sink below the children
        let energy = barrier_e.max(nodes[na].energy).max(nodes[nb].energy);
        let (first, second) = {
            let ka = (subtree_min(&nodes, na), na);
            let kb = (subtree_min(&nodes, nb), nb);
            if (ka.0, ka.1) <= (kb.0, kb.1) {
                (na, nb)
            } else {
                (nb, na)
            }
        };
        let new_id = nodes.len();
        nodes.push(ElmNode {
            id: new_id,
            kind: NodeKind::Barrier,
            energy,
            mass: 0.0,
            volume: 0.0,
            basin_id: None,
            children: vec![first, second],
            location: barrier_pt,
        });
        cluster_node[ci] = Some(new_id);
        cluster_node[cj] = None;
        alive -= 1;
        // single linkage: the merged cluster's barrier to anything else is
        // the lower of its members' barriers
        for other in 0..k {
            if other == ci || other == cj || cluster_node[other].is_none() {
                continue;
            }
            let key_a = (ci.min(other), ci.max(other));
            let key_b = (cj.min(other), cj.max(other));
            let da = dist.get(&key_a).cloned();
            let db = dist.get(&key_b).cloned();
            let merged = match (da, db) {
                (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
                (Some(a), None) => Some(a),
                (None, Some(b)) => Some(b),
                (None, None) => None,
            };
            if let Some(m) = merged {
                dist.insert(key_a, m);
            }
            dist.remove(&key_b);
        }
    }
    let root = nodes.len() - 1;
    Ok(ElmTree { nodes, root })
}

/// Probability mass per basin: P(D_i) = sum_j gamma_ij / sum gamma.
pub fn mass_of_basins(gamma: &GammaTable) -> Result<BTreeMap<u32, f64>> {
    if gamma.log_gamma.is_empty() {
        return Err(Error::Empty("gamma table has no visited bins".into()));
    }
    let total = log_sum(gamma.log_gamma.values().copied());
    let mut per_basin: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (key, &lg) in &gamma.log_gamma {
        per_basin.entry(key.basin).or_default().push(lg);
    }
    Ok(per_basin
        .into_iter()
        .map(|(b, lgs)| (b, (log_sum(lgs.into_iter()) - total).exp()))
        .collect())
}

/// Relative basin sizes: A(D_i) proportional to sum_j gamma_ij * e^{u_j}
/// (the normalization alpha is fixed to 1, so only ratios are meaningful).
pub fn size_of_basins(gamma: &GammaTable, grid: &EnergyGrid) -> Result<BTreeMap<u32, f64>> {
    if gamma.log_gamma.is_empty() {
        return Err(Error::Empty("gamma table has no visited bins".into()));
    }
    let total = log_sum(gamma.log_gamma.values().copied());
    let mut per_basin: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (key, &lg) in &gamma.log_gamma {
        per_basin
            .entry(key.basin)
            .or_default()
            .push(lg + grid.u_of(key.interval));
    }
    Ok(per_basin
        .into_iter()
        .map(|(b, lgs)| (b, (log_sum(lgs.into_iter()) - total).exp()))
        .collect())
}

fn log_sum(vals: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = vals.collect();
    let m = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn interval_clamped(grid: &EnergyGrid, e: f64) -> u32 {
    let j = ((e - grid.u_min) / grid.du).floor();
    if j < 0.0 {
        0
    } else {
        (j as u32).min(grid.n_intervals.saturating_sub(1))
    }
}

/// Annotates every node with mass and volume.
///
/// A leaf's volume accumulates the bin cross-sections of its basin up to its
/// parent barrier; a barrier node adds to its children the shared slab
/// between its own level and its parent's level.
pub fn annotate_mass_volume(
    tree: &mut ElmTree,
    gamma: &GammaTable,
    grid: &EnergyGrid,
) -> Result<()> {
    let masses = mass_of_basins(gamma)?;
    let total = log_sum(gamma.log_gamma.values().copied());
    // per-basin cumulative cross-section by interval
    let mut cum: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
    for (key, &lg) in &gamma.log_gamma {
        cum.entry(key.basin)
            .or_default()
            .push((key.interval, (lg + grid.u_of(key.interval) - total).exp()));
    }
    for sections in cum.values_mut() {
        sections.sort_by_key(|&(j, _)| j);
    }
    let cum_at = |basin: u32, j: u32| -> f64 {
        cum.get(&basin)
            .map(|sections| {
                sections
                    .iter()
                    .take_while(|&&(jj, _)| jj <= j)
                    .map(|&(_, a)| a)
                    .sum()
            })
            .unwrap_or(0.0)
    };
    let lowest = |basin: u32| -> Option<u32> {
        cum.get(&basin).and_then(|s| s.first().map(|&(j, _)| j))
    };

    // parent energies (root's cap is the top of the observed grid)
    let mut parent_energy = vec![grid.u_of(grid.n_intervals); tree.nodes.len()];
    for node in &tree.nodes {
        for &c in &node.children {
            parent_energy[c] = node.energy;
        }
    }

    // leaves first
    for id in 0..tree.nodes.len() {
        if tree.nodes[id].kind != NodeKind::Leaf {
            continue;
        }
        let basin = tree.nodes[id].basin_id.unwrap();
        tree.nodes[id].mass = masses.get(&basin).copied().unwrap_or(0.0);
        let mut volume = 0.0;
        if let Some(j0) = lowest(basin) {
            let j_cut = interval_clamped(grid, parent_energy[id]);
            let mut j = j0;
            while j <= j_cut {
                volume += cum_at(basin, j) * grid.du;
                j += 1;
            }
        }
        tree.nodes[id].volume = volume;
    }

    // internal nodes bottom-up (children always precede parents by id)
    for id in 0..tree.nodes.len() {
        if tree.nodes[id].kind != NodeKind::Barrier {
            continue;
        }
        let children = tree.nodes[id].children.clone();
        let mass: f64 = children.iter().map(|&c| tree.nodes[c].mass).sum();
        let child_vol: f64 = children.iter().map(|&c| tree.nodes[c].volume).sum();
        let member_basins: Vec<u32> = tree
            .subtree_leaves(id)
            .into_iter()
            .filter_map(|l| tree.nodes[l].basin_id)
            .collect();
        let jn = interval_clamped(grid, tree.nodes[id].energy);
        let jp = interval_clamped(grid, parent_energy[id]);
        let mut shared = 0.0;
        let mut j = jn + 1;
        while j <= jp {
            let width: f64 = member_basins.iter().map(|&b| cum_at(b, j)).sum();
            shared += width * grid.du;
            j += 1;
        }
        tree.nodes[id].mass = mass;
        tree.nodes[id].volume = child_vol + shared;
    }
    Ok(())
}

/// Removes leaves shallower than `min_depth`, reallocating their mass and
/// volume onto the lowest-energy leaf of the sibling subtree. Returns the
/// pruned tree and the basin remap (pruned basin -> absorbing basin).
pub fn prune_with_remap(tree: &ElmTree, min_depth: f64) -> (ElmTree, BTreeMap<u32, u32>) {
    #[derive(Clone)]
    struct WNode {
        kind: NodeKind,
        energy: f64,
        mass: f64,
        volume: f64,
        basin_id: Option<u32>,
        children: Vec<usize>,
        location: Option<serde_json::Value>,
        own_excess: f64,
        dead: bool,
    }
    let mut work: Vec<WNode> = tree
        .nodes
        .iter()
        .map(|n| {
            let child_volume: f64 = n.children.iter().map(|&c| tree.nodes[c].volume).sum();
            WNode {
                kind: n.kind,
                energy: n.energy,
                mass: n.mass,
                volume: n.volume,
                basin_id: n.basin_id,
                children: n.children.clone(),
                location: n.location.clone(),
                own_excess: if n.children.is_empty() {
                    0.0
                } else {
                    (n.volume - child_volume).max(0.0)
                },
                dead: false,
            }
        })
        .collect();
    let mut root = tree.root;
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();

    loop {
        let parent_of = |work: &[WNode], id: usize| -> Option<usize> {
            work.iter()
                .position(|n| !n.dead && n.children.contains(&id))
        };
        // shallowest qualifying leaf first, then lowest id
        let mut candidate: Option<(f64, usize, usize)> = None;
        for id in 0..work.len() {
            if work[id].dead || work[id].kind != NodeKind::Leaf {
                continue;
            }
            let Some(p) = parent_of(&work, id) else { continue };
            let depth = work[p].energy - work[id].energy;
            if depth < min_depth {
                let better = match candidate {
                    None => true,
                    Some((d, i, _)) => (depth, id) < (d, i),
                };
                if better {
                    candidate = Some((depth, id, p));
                }
            }
        }
        let Some((_, leaf, parent)) = candidate else { break };
        let sibling = *work[parent]
            .children
            .iter()
            .find(|&&c| c != leaf)
            .expect("barrier nodes are binary");
        // lowest-energy leaf of the sibling subtree absorbs mass and volume
        let absorb = {
            let mut stack = vec![sibling];
            let mut best: Option<(f64, usize)> = None;
            while let Some(n) = stack.pop() {
                if work[n].kind == NodeKind::Leaf {
                    let key = (work[n].energy, n);
                    if best.map(|b| key < (b.0, b.1)).unwrap_or(true) {
                        best = Some(key);
                    }
                } else {
                    stack.extend(&work[n].children);
                }
            }
            best.unwrap().1
        };
        work[absorb].mass += work[leaf].mass;
        work[absorb].volume += work[leaf].volume;
        if let (Some(from), Some(to)) = (work[leaf].basin_id, work[absorb].basin_id) {
            remap.insert(from, to);
        }
        // splice the parent out
        if parent == root {
            root = sibling;
        } else if let Some(gp) = parent_of(&work, parent) {
            let slot = work[gp].children.iter().position(|&c| c == parent).unwrap();
            work[gp].children[slot] = sibling;
        }
        work[leaf].dead = true;
        work[parent].dead = true;
    }

    // collapse alias chains in the remap
    let resolve = |remap: &BTreeMap<u32, u32>, mut b: u32| -> u32 {
        while let Some(&next) = remap.get(&b) {
            if next == b {
                break;
            }
            b = next;
        }
        b
    };
    let remap: BTreeMap<u32, u32> = remap
        .keys()
        .map(|&k| (k, resolve(&remap, k)))
        .collect();

    // re-aggregate internal nodes bottom-up and compact ids
    let mut order: Vec<usize> = Vec::new();
    fn visit(work: &[WNode], id: usize, order: &mut Vec<usize>) {
        for &c in &work[id].children {
            visit(work, c, order);
        }
        order.push(id);
    }
    visit(&work, root, &mut order);
    let mut new_ids: BTreeMap<usize, usize> = BTreeMap::new();
    let mut nodes: Vec<ElmNode> = Vec::with_capacity(order.len());
    for &old in &order {
        let id = nodes.len();
        new_ids.insert(old, id);
        let children: Vec<usize> = work[old].children.iter().map(|c| new_ids[c]).collect();
        let (mass, volume) = if children.is_empty() {
            (work[old].mass, work[old].volume)
        } else {
            (
                children.iter().map(|&c| nodes[c].mass).sum(),
                children.iter().map(|&c| nodes[c].volume).sum::<f64>() + work[old].own_excess,
            )
        };
        nodes.push(ElmNode {
            id,
            kind: work[old].kind,
            energy: work[old].energy,
            mass,
            volume,
            basin_id: work[old].basin_id,
            children,
            location: work[old].location.clone(),
        });
    }
    let root = new_ids[&root];
    (ElmTree { nodes, root }, remap)
}

/// Prune without the remap (spec surface).
pub fn prune(tree: &ElmTree, min_depth: f64) -> ElmTree {
    prune_with_remap(tree, min_depth).0
}

/// Distance between two trees over the same model: greedy leaf matching by
/// model distance, summed leaf and matched-barrier energy gaps, plus the
/// depth of every unmatched leaf.
pub fn tree_distance(model: &dyn EnergyModel, t1: &ElmTree, t2: &ElmTree) -> Result<f64> {
    let leaves1: Vec<usize> = t1.leaves().map(|n| n.id).collect();
    let leaves2: Vec<usize> = t2.leaves().map(|n| n.id).collect();
    let loc = |tree: &ElmTree, id: usize| -> Result<ModelPoint> {
        let node = tree.node(id);
        let v = node
            .location
            .as_ref()
            .ok_or_else(|| Error::config("tree leaves need locations for matching"))?;
        let enc = location_to_encoding(model, v)?;
        Ok(ModelPoint {
            model_id: model.spec().id,
            encoding: enc,
        })
    };
    let mut pairs: Vec<(f64, f64, f64, usize, usize)> = Vec::new();
    for &a in &leaves1 {
        for &b in &leaves2 {
            let d = model.model_distance(&loc(t1, a)?, &loc(t2, b)?)?;
            let (ea, eb) = (t1.node(a).energy, t2.node(b).energy);
            pairs.push((d, ea.min(eb), ea.max(eb), a, b));
        }
    }
    pairs.sort_by(|x, y| {
        x.0.total_cmp(&y.0)
            .then(x.1.total_cmp(&y.1))
            .then(x.2.total_cmp(&y.2))
    });
    let mut used1 = std::collections::BTreeSet::new();
    let mut used2 = std::collections::BTreeSet::new();
    let mut matched: Vec<(usize, usize)> = Vec::new();
    let mut d = 0.0;
    for (_, _, _, a, b) in pairs {
        if used1.contains(&a) || used2.contains(&b) {
            continue;
        }
        used1.insert(a);
        used2.insert(b);
        d += (t1.node(a).energy - t2.node(b).energy).abs();
        matched.push((a, b));
    }
    for i in 0..matched.len() {
        for j in i + 1..matched.len() {
            let (a1, b1) = matched[i];
            let (a2, b2) = matched[j];
            d += (t1.lca_energy(a1, a2) - t2.lca_energy(b1, b2)).abs();
        }
    }
    for &a in &leaves1 {
        if !used1.contains(&a) {
            d += t1.leaf_depth(a);
        }
    }
    for &b in &leaves2 {
        if !used2.contains(&b) {
            d += t2.leaf_depth(b);
        }
    }
    Ok(d)
}

fn location_to_encoding(
    model: &dyn EnergyModel,
    v: &serde_json::Value,
) -> Result<crate::model::Encoding> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::config("leaf location is not an array"))?;
    match model.spec().kind {
        crate::model::SpaceKind::Continuous => Ok(crate::model::Encoding::Continuous(
            arr.iter()
                .map(|x| x.as_f64().ok_or_else(|| Error::config("bad coordinate")))
                .collect::<Result<_>>()?,
        )),
        crate::model::SpaceKind::Discrete => Ok(crate::model::Encoding::Discrete(
            arr.iter()
                .map(|x| {
                    x.as_u64()
                        .map(|u| u as u8)
                        .ok_or_else(|| Error::config("bad discrete coordinate"))
                })
                .collect::<Result<_>>()?,
        )),
    }
}

/// Per-chain inputs to the convergence verdict.
#[derive(Debug, Clone)]
pub struct ChainSummary {
    pub energies: Vec<f64>,
    /// Sampler times at which minima were registered.
    pub discovery_times: Vec<u64>,
    pub last_barrier_update_t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Cumulative count of registered minima over sampler time.
    pub leaf_count_series: Vec<(u64, usize)>,
    pub last_barrier_update_t: u64,
    /// Potential scale reduction factor of the energy traces.
    pub psrf_energy: f64,
    /// Distance between per-chain trees over time (multi-chain runs).
    pub tree_distance_series: Vec<(u64, f64)>,
    pub converged: bool,
}

/// Split-halves potential scale reduction factor over energy traces. With
/// several chains their second halves are compared; a single chain is split
/// against itself.
pub fn psrf(traces: &[Vec<f64>]) -> f64 {
    let mut sequences: Vec<&[f64]> = Vec::new();
    let halves: Vec<Vec<f64>>;
    if traces.len() >= 2 {
        halves = traces
            .iter()
            .map(|t| t[t.len() / 2..].to_vec())
            .collect();
        sequences = halves.iter().map(|h| h.as_slice()).collect();
    } else if traces.len() == 1 {
        let tail = &traces[0][traces[0].len() / 2..];
        let mid = tail.len() / 2;
        if mid < 2 {
            return 1.0;
        }
        halves = vec![tail[..mid].to_vec(), tail[mid..].to_vec()];
        sequences = halves.iter().map(|h| h.as_slice()).collect();
    }
    let n = sequences.iter().map(|s| s.len()).min().unwrap_or(0);
    if n < 2 || sequences.len() < 2 {
        return 1.0;
    }
    let m = sequences.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = sequences
        .iter()
        .map(|s| s[..n].iter().sum::<f64>() / nf)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = sequences
        .iter()
        .zip(&means)
        .map(|(s, mu)| s[..n].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w <= 1e-300 {
        return 1.0;
    }
    let v = (nf - 1.0) / nf * w + b / nf;
    (v / w).sqrt()
}

/// Stop rule: no new leaf and no barrier update in the last `window` steps,
/// and the energy-trace PSRF below 1.1.
pub fn convergence_report(
    chains: &[ChainSummary],
    budget: u64,
    window: u64,
    tree_distance_series: Vec<(u64, f64)>,
) -> ConvergenceReport {
    let mut discoveries: Vec<u64> = chains
        .iter()
        .flat_map(|c| c.discovery_times.iter().copied())
        .collect();
    discoveries.sort_unstable();
    let leaf_count_series: Vec<(u64, usize)> = discoveries
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i + 1))
        .collect();
    let last_leaf_t = discoveries.last().copied().unwrap_or(0);
    let last_barrier_update_t = chains
        .iter()
        .map(|c| c.last_barrier_update_t)
        .max()
        .unwrap_or(0);
    let traces: Vec<Vec<f64>> = chains.iter().map(|c| c.energies.clone()).collect();
    let psrf_energy = psrf(&traces);
    let converged = budget.saturating_sub(last_leaf_t) >= window
        && budget.saturating_sub(last_barrier_update_t) >= window
        && psrf_energy < 1.1;
    ConvergenceReport {
        leaf_count_series,
        last_barrier_update_t,
        psrf_energy,
        tree_distance_series,
        converged,
    }
}

/// DOT rendering: leaves as boxes labeled "id\nE=..\nm=..", barrier nodes as
/// points, nodes ranked by energy level.
pub fn to_dot(tree: &ElmTree) -> String {
    let mut out = String::from("digraph elm {\n  rankdir=BT;\n  node [fontsize=10];\n");
    for node in &tree.nodes {
        match node.kind {
            NodeKind::Leaf => {
                let label = format!(
                    "{}\\nE={:.4}\\nm={:.4}",
                    node.basin_id.unwrap_or_default(),
                    node.energy,
                    node.mass
                );
                out.push_str(&format!("  n{} [shape=box, label=\"{label}\"];\n", node.id));
            }
            NodeKind::Barrier => {
                out.push_str(&format!("  n{} [shape=point];\n", node.id));
            }
        }
    }
    for node in &tree.nodes {
        for &c in &node.children {
            out.push_str(&format!("  n{} -> n{};\n", node.id, c));
        }
    }
    // rank groups by quantized energy so the drawing's y axis tracks energy
    let (lo, hi) = tree.nodes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), n| {
        (l.min(n.energy), h.max(n.energy))
    });
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut ranks: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for node in &tree.nodes {
        let level = ((node.energy - lo) / span * 20.0).round() as i64;
        ranks.entry(level).or_default().push(node.id);
    }
    for ids in ranks.values() {
        out.push_str("  { rank=same;");
        for id in ids {
            out.push_str(&format!(" n{id};"));
        }
        out.push_str(" }\n");
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gwl::BinKey;
    use crate::model::ModelPoint;
    use approx::assert_abs_diff_eq;

    fn leaf(basin: u32, energy: f64) -> LeafSpec {
        LeafSpec {
            basin_id: basin,
            energy,
            location: Some(ModelPoint::continuous(1, vec![basin as f64])),
        }
    }

    fn table(entries: &[(u32, u32, f64)]) -> BarrierTable {
        let mut t = BarrierTable::default();
        for &(i, j, e) in entries {
            t.entries.insert(
                (i.min(j), i.max(j)),
                crate::barrier::BarrierEntry {
                    point: ModelPoint::continuous(1, vec![0.0]),
                    energy: e,
                    updated_t: 0,
                    refined_from: 0.0,
                },
            );
        }
        t
    }

    #[test]
    fn worked_three_leaf_merge() {
        // minima {1,2,3}, barriers B(0,1)=4, B(0,2)=6, B(1,2)=5:
        // merge (0,1) at 4, then with 2 at min(6,5)=5
        let leaves = vec![leaf(0, 1.0), leaf(1, 2.0), leaf(2, 3.0)];
        let barriers = table(&[(0, 1, 4.0), (0, 2, 6.0), (1, 2, 5.0)]);
        let tree = build_tree(&leaves, &barriers, 0.1).unwrap();
        assert_eq!(tree.leaf_count(), 3);
        let root = tree.node(tree.root);
        assert_abs_diff_eq!(root.energy, 5.0);
        let first_merge = tree
            .nodes
            .iter()
            .find(|n| n.kind == NodeKind::Barrier && n.id != tree.root)
            .unwrap();
        assert_abs_diff_eq!(first_merge.energy, 4.0);
        // merge heights are non-decreasing from leaf to root
        for l in tree.leaves().map(|n| n.id).collect::<Vec<_>>() {
            let mut cur = l;
            let mut e = tree.node(l).energy;
            while let Some(p) = tree.parent_of(cur) {
                assert!(tree.node(p).energy >= e - 1e-12);
                e = tree.node(p).energy;
                cur = p;
            }
        }
    }

    #[test]
    fn single_leaf_and_empty() {
        let tree = build_tree(&[leaf(0, 1.0)], &BarrierTable::default(), 0.1).unwrap();
        assert_eq!(tree.leaf_count(), 1);
        assert_eq!(tree.root, 0);
        assert!(build_tree(&[], &BarrierTable::default(), 0.1).is_err());
    }

    #[test]
    fn missing_pairs_join_last_at_fallback() {
        // basin 2 never co-crossed with anyone
        let leaves = vec![leaf(0, 1.0), leaf(1, 1.5), leaf(2, 0.5)];
        let barriers = table(&[(0, 1, 3.0)]);
        let tree = build_tree(&leaves, &barriers, 0.25).unwrap();
        let root = tree.node(tree.root);
        assert_abs_diff_eq!(root.energy, 3.0 + 0.25);
    }

    #[test]
    fn single_linkage_matches_kruskal_oracle() {
        // oracle: sort pairs by barrier, union-find; the merge height of the
        // dendrogram equals the MST edge that first connects the clusters
        use crate::rng::substream;
        use rand::RngExt;
        let mut rng = substream(99, "slk");
        for trial in 0..300 {
            let k = 2 + (rng.random_range(0..5u32) as usize);
            let leaves: Vec<LeafSpec> = (0..k)
                .map(|i| leaf(i as u32, rng.random::<f64>()))
                .collect();
            let mut entries = Vec::new();
            for i in 0..k as u32 {
                for j in i + 1..k as u32 {
                    entries.push((i, j, 1.0 + 3.0 * rng.random::<f64>()));
                }
            }
            let barriers = table(&entries);
            let tree = build_tree(&leaves, &barriers, 0.1).unwrap();

            // oracle merge heights via Kruskal
            let mut sorted = entries.clone();
            sorted.sort_by(|a, b| a.2.total_cmp(&b.2));
            let mut parent: Vec<usize> = (0..k).collect();
            fn find(p: &mut Vec<usize>, i: usize) -> usize {
                if p[i] != i {
                    let r = find(p, p[i]);
                    p[i] = r;
                }
                p[i]
            }
            let mut heights: BTreeMap<(u32, u32), f64> = BTreeMap::new();
            for (i, j, e) in sorted {
                let (ri, rj) = (find(&mut parent, i as usize), find(&mut parent, j as usize));
                if ri != rj {
                    parent[ri] = rj;
                    // merging two clusters at height e: every cross pair of
                    // their members meets at e or below in the dendrogram
                    heights.insert((i, j), e);
                }
            }
            // check: the LCA energy of two leaves equals the Kruskal height
            // of the path-max edge; verify over all pairs using union-find
            // reconstruction
            let mut parent2: Vec<usize> = (0..k).collect();
            let mut merged_at: Vec<Vec<f64>> = vec![vec![0.0; k]; k];
            let mut sorted2 = entries.clone();
            sorted2.sort_by(|a, b| a.2.total_cmp(&b.2));
            let mut groups: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
            for (i, j, e) in sorted2 {
                let (ri, rj) = (
                    find(&mut parent2, i as usize),
                    find(&mut parent2, j as usize),
                );
                if ri != rj {
                    for &a in &groups[ri] {
                        for &b in &groups[rj] {
                            merged_at[a][b] = e;
                            merged_at[b][a] = e;
                        }
                    }
                    let moved = groups[rj].clone();
                    groups[ri].extend(moved);
                    parent2[rj] = ri;
                }
            }
            let leaf_nodes: Vec<usize> = tree.leaves().map(|n| n.id).collect();
            for (ai, &a) in leaf_nodes.iter().enumerate() {
                for &b in &leaf_nodes[ai + 1..] {
                    let ba = tree.node(a).basin_id.unwrap() as usize;
                    let bb = tree.node(b).basin_id.unwrap() as usize;
                    let got = tree.lca_energy(a, b);
                    let want = merged_at[ba][bb];
                    assert!(
                        (got - want).abs() < 1e-9,
                        "trial {trial}: LCA({ba},{bb}) = {got}, oracle {want}"
                    );
                }
            }
        }
    }

    fn gamma_of(entries: &[(u32, u32, f64)]) -> GammaTable {
        let mut g = GammaTable::default();
        for &(basin, interval, lg) in entries {
            g.log_gamma.insert(BinKey { basin, interval }, lg);
            g.visits.insert(BinKey { basin, interval }, 1);
        }
        g
    }

    #[test]
    fn mass_examples() {
        // two bins, gamma = {1, 3} -> masses {0.25, 0.75}
        let g = gamma_of(&[(0, 0, 1.0f64.ln()), (1, 0, 3.0f64.ln())]);
        let m = mass_of_basins(&g).unwrap();
        assert_abs_diff_eq!(m[&0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m[&1], 0.75, epsilon = 1e-12);
        // all bins of one basin -> mass 1
        let g = gamma_of(&[(0, 0, 0.3), (0, 1, 1.7)]);
        let m = mass_of_basins(&g).unwrap();
        assert_abs_diff_eq!(m[&0], 1.0, epsilon = 1e-12);
        assert!(mass_of_basins(&GammaTable::default()).is_err());
    }

    #[test]
    fn size_examples() {
        let grid = EnergyGrid {
            u_min: 0.0,
            du: 1.0,
            n_intervals: 2,
        };
        // equal gamma at u=0 and u=1: size ratio e
        let g = gamma_of(&[(0, 0, 0.5), (1, 1, 0.5)]);
        let s = size_of_basins(&g, &grid).unwrap();
        assert_abs_diff_eq!(s[&1] / s[&0], std::f64::consts::E, epsilon = 1e-12);
        // symmetric basins visited equally have equal sizes
        let g = gamma_of(&[(0, 0, 1.2), (1, 0, 1.2)]);
        let s = size_of_basins(&g, &grid).unwrap();
        assert_abs_diff_eq!(s[&0], s[&1], epsilon = 1e-15);
    }

    #[test]
    fn volume_single_bin_leaf() {
        // leaf with one occupied interval: volume = A * du
        let grid = EnergyGrid {
            u_min: 0.0,
            du: 0.5,
            n_intervals: 4,
        };
        let g = gamma_of(&[(0, 0, 1.0), (1, 0, 1.0)]);
        let leaves = vec![leaf(0, 0.1), leaf(1, 0.1)];
        let barriers = table(&[(0, 1, 1.4)]);
        let mut tree = build_tree(&leaves, &barriers, grid.du).unwrap();
        annotate_mass_volume(&mut tree, &g, &grid).unwrap();
        let l0 = &tree.nodes[0];
        // A(bin) = gamma e^{u}/sum = e^1/(e^1+e^1) ... both identical
        let a = (1.0f64 + 0.0).exp() / (2.0 * 1.0f64.exp());
        // slabs at intervals 0..=2 (cutoff = parent at 1.4 -> j=2)
        assert_abs_diff_eq!(l0.volume, a * grid.du * 3.0, epsilon = 1e-12);
        // symmetric basins get equal volumes; masses sum to 1
        assert_abs_diff_eq!(tree.nodes[0].volume, tree.nodes[1].volume, epsilon = 1e-12);
        let mass_sum: f64 = tree.leaves().map(|n| n.mass).sum();
        assert_abs_diff_eq!(mass_sum, 1.0, epsilon = 1e-9);
        // parent volume >= children volumes
        let root = tree.node(tree.root);
        let kids: f64 = root.children.iter().map(|&c| tree.nodes[c].volume).sum();
        assert!(root.volume >= kids - 1e-12);
    }

    #[test]
    fn prune_examples() {
        let leaves = vec![leaf(0, 0.0), leaf(1, 0.95), leaf(2, 0.2)];
        let barriers = table(&[(0, 1, 1.0), (1, 2, 1.2), (0, 2, 2.0)]);
        let mut tree = build_tree(&leaves, &barriers, 0.1).unwrap();
        // hand-set masses/volumes to check reallocation
        for n in tree.nodes.iter_mut() {
            if n.kind == NodeKind::Leaf {
                n.mass = 1.0 / 3.0;
                n.volume = 1.0;
            }
        }
        // min_depth = 0 leaves the tree unchanged
        let (same, remap) = prune_with_remap(&tree, 0.0);
        assert_eq!(same.leaf_count(), 3);
        assert!(remap.is_empty());
        // leaf 1 has depth 1.0 - 0.95 = 0.05 < 0.1: pruned
        let (pruned, remap) = prune_with_remap(&tree, 0.1);
        assert_eq!(pruned.leaf_count(), 2);
        assert_eq!(remap.get(&1), Some(&0));
        let absorb = pruned
            .leaves()
            .find(|n| n.basin_id == Some(0))
            .unwrap();
        assert_abs_diff_eq!(absorb.mass, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(absorb.volume, 2.0, epsilon = 1e-12);
        // idempotent at fixed depth
        let again = prune(&pruned, 0.1);
        assert_eq!(again.leaf_count(), pruned.leaf_count());
        let j1 = serde_json::to_string(&again).unwrap();
        let j2 = serde_json::to_string(&pruned).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn deep_leaves_survive_pruning() {
        let leaves = vec![leaf(0, 0.0), leaf(1, 0.5)];
        let barriers = table(&[(0, 1, 5.0)]);
        let tree = build_tree(&leaves, &barriers, 0.1).unwrap();
        let pruned = prune(&tree, 1.0);
        assert_eq!(pruned.leaf_count(), 2);
    }

    #[test]
    fn tree_distance_properties() {
        use crate::models::toy::QuadraticBowl;
        let model = QuadraticBowl::new(1, 10.0);
        let mkleaf = |basin: u32, energy: f64, x: f64| LeafSpec {
            basin_id: basin,
            energy,
            location: Some(ModelPoint::continuous(model.spec().id, vec![x])),
        };
        let t1 = build_tree(
            &[mkleaf(0, 0.0, -1.0), mkleaf(1, 0.4, 1.0)],
            &table(&[(0, 1, 1.0)]),
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(tree_distance(&model, &t1, &t1).unwrap(), 0.0);
        // one extra shallow leaf adds exactly its depth
        let t2 = build_tree(
            &[
                mkleaf(0, 0.0, -1.0),
                mkleaf(1, 0.4, 1.0),
                mkleaf(2, 0.9, 5.0),
            ],
            &table(&[(0, 1, 1.0), (1, 2, 1.3), (0, 2, 1.6)]),
            0.1,
        )
        .unwrap();
        let d12 = tree_distance(&model, &t1, &t2).unwrap();
        let extra = t2
            .leaves()
            .find(|n| n.basin_id == Some(2))
            .unwrap();
        assert_abs_diff_eq!(d12, t2.leaf_depth(extra.id), epsilon = 1e-9);
        // symmetry
        let d21 = tree_distance(&model, &t2, &t1).unwrap();
        assert_abs_diff_eq!(d12, d21, epsilon = 1e-12);
    }

    #[test]
    fn convergence_verdicts() {
        let flat_energy: Vec<f64> = (0..200).map(|i| ((i % 7) as f64).sin()).collect();
        // quiet chain: no discoveries or barrier updates near the end
        let quiet = ChainSummary {
            energies: flat_energy.clone(),
            discovery_times: vec![0, 10, 50],
            last_barrier_update_t: 60,
        };
        let report = convergence_report(&[quiet.clone()], 1000, 100, vec![]);
        assert!(report.converged);
        assert_eq!(report.leaf_count_series.last().unwrap().1, 3);
        // a minimum discovered at the very end blocks convergence
        let late = ChainSummary {
            discovery_times: vec![0, 999],
            ..quiet.clone()
        };
        assert!(!convergence_report(&[late], 1000, 100, vec![]).converged);
        // chains exploring different energy levels fail the PSRF gate
        let shifted = ChainSummary {
            energies: flat_energy.iter().map(|e| e + 50.0).collect(),
            ..quiet.clone()
        };
        let r = convergence_report(&[quiet, shifted], 1000, 100, vec![]);
        assert!(r.psrf_energy > 1.1);
        assert!(!r.converged);
    }

    #[test]
    fn leaf_series_is_monotone() {
        let c = ChainSummary {
            energies: vec![0.0; 10],
            discovery_times: vec![5, 1, 3, 3],
            last_barrier_update_t: 0,
        };
        let r = convergence_report(&[c], 100, 10, vec![]);
        let counts: Vec<usize> = r.leaf_count_series.iter().map(|&(_, c)| c).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        let times: Vec<u64> = r.leaf_count_series.iter().map(|&(t, _)| t).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn dot_output_is_well_formed() {
        let leaves = vec![leaf(0, 0.0), leaf(1, 0.5)];
        let tree = build_tree(&leaves, &table(&[(0, 1, 1.0)]), 0.1).unwrap();
        let dot = to_dot(&tree);
        assert!(dot.starts_with("digraph elm {"));
        assert!(dot.trim_end().ends_with('}'));
        assert_eq!(dot.matches("shape=box").count(), 2);
        assert_eq!(dot.matches("shape=point").count(), 1);
        assert_eq!(dot.matches("->").count(), 2);
        // braces balance
        assert_eq!(dot.matches('{').count(), dot.matches('}').count());
    }
}
