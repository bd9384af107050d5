use crate::{PredictorError, Result};
use kbp_core::phantom::{distance_to_surface, Phantom, StructureId};
use kbp_core::{DoseDistribution, InfluenceMatrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const RF_FEATURES: usize = 10;

pub const RF_FEATURE_NAMES: [&str; RF_FEATURES] = [
    "structure",
    "y_mm",
    "z_plane",
    "dist_larynx_mm",
    "dist_esophagus_mm",
    "dist_lim_post_neck_mm",
    "dist_ptv56_mm",
    "dist_ptv63_mm",
    "dist_ptv70_mm",
    "influence_row_sum",
];

const DISTANCE_STRUCTURES: [StructureId; 6] = [
    StructureId::Larynx,
    StructureId::Esophagus,
    StructureId::LimPostNeck,
    StructureId::Ptv56,
    StructureId::Ptv63,
    StructureId::Ptv70,
];

/// Feature rows for every voxel, in voxel order. The structure label enters
/// as its integer code, so splits on it are ordinal.
pub fn rf_feature_matrix(phantom: &Phantom, influence: &InfluenceMatrix) -> Result<Vec<[f64; RF_FEATURES]>> {
    if influence.dims != phantom.dims() {
        return Err(PredictorError::DimMismatch { expected: phantom.dims(), actual: influence.dims });
    }
    let grid = &phantom.grid;
    let distances = DISTANCE_STRUCTURES
        .iter()
        .map(|&s| distance_to_surface(grid, s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let sums = influence.row_sums();
    Ok((0..grid.len())
        .map(|v| {
            let [_, y, z] = grid.coords(v);
            let mut f = [0.0; RF_FEATURES];
            f[0] = grid.labels[v].code() as f64;
            f[1] = y as f64 * grid.spacing[1];
            f[2] = z as f64;
            for (k, d) in distances.iter().enumerate() {
                f[3 + k] = d[v];
            }
            f[9] = sums[v];
            f
        })
        .collect())
}

/// Features of a single voxel.
pub fn extract_rf_features(phantom: &Phantom, influence: &InfluenceMatrix, voxel: usize) -> Result<[f64; RF_FEATURES]> {
    if voxel >= phantom.grid.len() {
        return Err(PredictorError::InvalidConfig(format!("voxel {voxel} out of range")));
    }
    Ok(rf_feature_matrix(phantom, influence)?[voxel])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    /// Features tried per split; `None` tries all of them.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { trees: 10, max_features: None, min_samples_split: 2, min_samples_leaf: 1, max_depth: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64, samples: usize },
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64; RF_FEATURES]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split { feature, threshold, left, right } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &RegressionTree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub config: ForestConfig,
    pub feature_names: Vec<String>,
    pub trees: Vec<RegressionTree>,
}

impl RandomForest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        if f.trees.is_empty() || f.feature_names.len() != RF_FEATURES {
            return Err(PredictorError::Checkpoint("forest has no trees or the wrong feature set".into()));
        }
        Ok(f)
    }
}

struct Builder<'a> {
    x: &'a [[f64; RF_FEATURES]],
    y: &'a [f64],
    cfg: &'a ForestConfig,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Builder<'_> {
    fn best_split(&self, rows: &[usize], features: &[usize], buf: &mut Vec<(f64, f64)>) -> Option<BestSplit> {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let parent = total * total / n as f64;
        let min_leaf = self.cfg.min_samples_leaf.max(1);
        let mut best: Option<BestSplit> = None;
        for &f in features {
            buf.clear();
            buf.extend(rows.iter().map(|&r| (self.x[r][f], self.y[r])));
            buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if buf[0].0 == buf[n - 1].0 {
                continue;
            }
            let mut left = 0.0;
            for i in 0..n - 1 {
                left += buf[i].1;
                let nl = i + 1;
                if buf[i].0 == buf[i + 1].0 || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let right = total - left;
                let score = left * left / nl as f64 + right * right / (n - nl) as f64;
                if best.as_ref().is_none_or(|b| score > b.score) {
                    let (a, c) = (buf[i].0, buf[i + 1].0);
                    let mid = 0.5 * (a + c);
                    let threshold = if mid < c { mid } else { a };
                    best = Some(BestSplit { feature: f, threshold, score });
                }
            }
        }
        best.filter(|b| b.score > parent * (1.0 + 1e-12) + 1e-12)
    }

    fn build(&mut self, rows: &mut [usize], rng: &mut ChaCha8Rng) {
        let mut stack: Vec<(usize, usize, usize, usize)> = Vec::new();
        self.nodes.push(Node::Leaf { value: 0.0, samples: 0 });
        stack.push((0, 0, rows.len(), 0));
        let mut features: Vec<usize> = (0..RF_FEATURES).collect();
        let mut buf = Vec::with_capacity(rows.len());
        while let Some((id, lo, hi, depth)) = stack.pop() {
            let slice = &mut rows[lo..hi];
            let n = slice.len();
            let mean = slice.iter().map(|&r| self.y[r]).sum::<f64>() / n as f64;
            let leaf = Node::Leaf { value: mean, samples: n };
            let pure = slice.iter().all(|&r| self.y[r] == self.y[slice[0]]);
            if n < self.cfg.min_samples_split.max(2) || pure || self.cfg.max_depth.is_some_and(|d| depth >= d) {
                self.nodes[id] = leaf;
                continue;
            }
            let tried = match self.cfg.max_features {
                Some(k) if k < RF_FEATURES => {
                    features.shuffle(rng);
                    &features[..k.max(1)]
                }
                _ => &features[..],
            };
            let Some(split) = self.best_split(slice, tried, &mut buf) else {
                self.nodes[id] = leaf;
                continue;
            };
            let mut k = 0;
            for i in 0..n {
                if self.x[slice[i]][split.feature] <= split.threshold {
                    slice.swap(i, k);
                    k += 1;
                }
            }
            let (l, r) = (self.nodes.len(), self.nodes.len() + 1);
            self.nodes.push(Node::Leaf { value: 0.0, samples: 0 });
            self.nodes.push(Node::Leaf { value: 0.0, samples: 0 });
            self.nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left: l, right: r };
            stack.push((r, lo + k, hi, depth + 1));
            stack.push((l, lo, lo + k, depth + 1));
        }
    }
}

/// Bagged CART regression trees split on variance reduction. Tree `t`
/// draws its bootstrap sample from a generator seeded with `seed + t`.
pub fn rf_train(x: &[[f64; RF_FEATURES]], y: &[f64], cfg: &ForestConfig) -> Result<RandomForest> {
    if x.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    if x.len() < 2 {
        return Err(PredictorError::TooFewRows(x.len()));
    }
    if x.len() != y.len() || cfg.trees == 0 {
        return Err(PredictorError::InvalidConfig(format!("{} rows, {} targets, {} trees", x.len(), y.len(), cfg.trees)));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(PredictorError::InvalidConfig("non-finite feature or target".into()));
    }
    let trees = (0..cfg.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64));
            let mut rows: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
            let mut b = Builder { x, y, cfg, nodes: Vec::new() };
            b.build(&mut rows, &mut rng);
            RegressionTree { nodes: b.nodes }
        })
        .collect();
    Ok(RandomForest { config: *cfg, feature_names: RF_FEATURE_NAMES.iter().map(|s| s.to_string()).collect(), trees })
}

/// Mean of the tree predictions.
pub fn rf_predict(forest: &RandomForest, x: &[f64; RF_FEATURES]) -> f64 {
    forest.trees.iter().map(|t| t.predict(x)).sum::<f64>() / forest.trees.len() as f64
}

pub fn predict_volume_rf(forest: &RandomForest, phantom: &Phantom, influence: &InfluenceMatrix) -> Result<DoseDistribution> {
    let features = rf_feature_matrix(phantom, influence)?;
    let values = features.iter().map(|f| rf_predict(forest, f).max(0.0)).collect();
    Ok(DoseDistribution { dims: phantom.dims(), spacing: phantom.spacing(), values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, f: impl Fn(usize) -> [f64; RF_FEATURES]) -> Vec<[f64; RF_FEATURES]> {
        (0..n).map(f).collect()
    }

    #[test]
    fn constant_target_is_reproduced() {
        let x = rows(50, |i| [i as f64; RF_FEATURES]);
        let y = vec![3.25; 50];
        let f = rf_train(&x, &y, &ForestConfig::default()).unwrap();
        assert_eq!(f.trees.len(), 10);
        assert!(x.iter().all(|r| rf_predict(&f, r) == 3.25));
        assert_eq!(rf_predict(&f, &[1e6; RF_FEATURES]), 3.25);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let x = rows(1, |_| [0.0; RF_FEATURES]);
        assert!(matches!(rf_train(&x, &[1.0], &ForestConfig::default()), Err(PredictorError::TooFewRows(1))));
        assert!(matches!(rf_train(&[], &[], &ForestConfig::default()), Err(PredictorError::EmptyDataset)));
    }

    #[test]
    fn a_step_function_is_learned_exactly() {
        let x = rows(40, |i| {
            let mut r = [0.0; RF_FEATURES];
            r[4] = i as f64;
            r[7] = (i * 7 % 13) as f64;
            r
        });
        let y: Vec<f64> = (0..40).map(|i| if i < 17 { 10.0 } else { 60.0 }).collect();
        let f = rf_train(&x, &y, &ForestConfig { seed: 5, ..Default::default() }).unwrap();
        for t in &f.trees {
            assert!(matches!(t.nodes[0], Node::Split { feature: 4, .. }));
        }
        let mut probe = [0.0; RF_FEATURES];
        probe[4] = 3.0;
        assert_eq!(rf_predict(&f, &probe), 10.0);
        probe[4] = 30.0;
        assert_eq!(rf_predict(&f, &probe), 60.0);
    }

    #[test]
    fn json_round_trip_and_seeded_determinism() {
        let x = rows(60, |i| {
            let mut r = [0.0; RF_FEATURES];
            for (k, v) in r.iter_mut().enumerate() {
                *v = ((i * (k + 3)) % 17) as f64;
            }
            r
        });
        let y: Vec<f64> = (0..60).map(|i| (i as f64).sin() * 10.0).collect();
        let cfg = ForestConfig { seed: 9, ..Default::default() };
        let a = rf_train(&x, &y, &cfg).unwrap();
        let b = rf_train(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let back = RandomForest::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        let c = rf_train(&x, &y, &ForestConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(c, a);
    }
}
