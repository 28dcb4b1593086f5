//! Synthetic desk-scale benchmarks with known structure, plus the JSON
//! graph interchange format used by the CLI and the evaluator protocol.

use crate::graph_core::{GraphError, GraphInstance, SplitMasks};
use crate::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn schema(field: &str, message: impl Into<String>) -> DatasetError {
    DatasetError::Schema { field: field.to_string(), message: message.into() }
}

/// Stochastic block model for node classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub communities: usize,
    pub nodes_per_community: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    /// Skip the p_out <= p_in learnability check.
    #[serde(default)]
    pub allow_unlearnable: bool,
}

impl Default for SbmConfig {
    fn default() -> Self {
        SbmConfig {
            communities: 3,
            nodes_per_community: 20,
            p_in: 0.3,
            p_out: 0.02,
            feature_dim: 8,
            feature_noise: 0.5,
            seed: 0,
            allow_unlearnable: false,
        }
    }
}

impl SbmConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.communities == 0 || self.nodes_per_community == 0 {
            return Err(DatasetError::InvalidConfig("empty community layout".into()));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DatasetError::InvalidConfig(format!("{name} = {p} outside [0,1]")));
            }
        }
        if !self.allow_unlearnable && self.p_out > self.p_in {
            return Err(DatasetError::InvalidConfig(format!(
                "p_out = {} > p_in = {} (set allow_unlearnable to force)",
                self.p_out, self.p_in
            )));
        }
        if self.feature_dim < self.communities {
            return Err(DatasetError::InvalidConfig(format!(
                "feature_dim = {} smaller than community count {}",
                self.feature_dim, self.communities
            )));
        }
        if self.feature_noise < 0.0 {
            return Err(DatasetError::InvalidConfig("negative feature noise".into()));
        }
        if self.nodes_per_community < 5 {
            return Err(DatasetError::InvalidConfig(
                "need at least 5 nodes per community for a 60/20/20 split".into(),
            ));
        }
        Ok(())
    }
}

/// Erdos-Renyi graph set labeled by triangle density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSetConfig {
    pub num_graphs: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub edge_prob: f64,
    pub triangle_density_threshold: f64,
    pub seed: u64,
}

impl Default for GraphSetConfig {
    fn default() -> Self {
        GraphSetConfig {
            num_graphs: 40,
            nodes_min: 8,
            nodes_max: 14,
            edge_prob: 0.35,
            // expected ER triangle density is p^3; splitting there keeps
            // the two classes roughly balanced
            triangle_density_threshold: 0.043,
            seed: 0,
        }
    }
}

impl GraphSetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_graphs == 0 {
            return Err(DatasetError::InvalidConfig("num_graphs = 0".into()));
        }
        if self.nodes_min == 0 || self.nodes_min > self.nodes_max {
            return Err(DatasetError::InvalidConfig(format!(
                "bad node range [{}, {}]",
                self.nodes_min, self.nodes_max
            )));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(DatasetError::InvalidConfig(format!(
                "edge_prob = {} outside [0,1]",
                self.edge_prob
            )));
        }
        Ok(())
    }
}

/// Standard-normal draw via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Community graph: intra edges with p_in, inter with p_out, features =
/// one-hot community plus Gaussian noise, 60/20/20 stratified masks.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<GraphInstance, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.communities;
    let m = cfg.nodes_per_community;
    let n = c * m;
    let community = |node: usize| node / m;

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if community(i) == community(j) { cfg.p_in } else { cfg.p_out };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let mut features = Mat::zeros(n, cfg.feature_dim);
    for i in 0..n {
        for j in 0..cfg.feature_dim {
            let base = if j == community(i) { 1.0 } else { 0.0 };
            features.set(i, j, base + cfg.feature_noise * gauss(&mut rng));
        }
    }

    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for k in 0..c {
        let mut members: Vec<usize> = (k * m..(k + 1) * m).collect();
        // Fisher-Yates per community
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let n_train = (m * 6) / 10;
        let n_val = (m * 2) / 10;
        for (pos, &node) in members.iter().enumerate() {
            if pos < n_train {
                train[node] = true;
            } else if pos < n_train + n_val {
                val[node] = true;
            } else {
                test[node] = true;
            }
        }
    }

    let mut g = GraphInstance::new(n, edges, features)?;
    g.node_labels = Some((0..n).map(community).collect());
    g.split_masks = Some(SplitMasks { train, val, test });
    Ok(g)
}

/// Triangle count via common neighbors per edge (each triangle is seen
/// from all three of its edges).
pub fn triangle_count(g: &GraphInstance) -> usize {
    let adj = g.adjacency();
    let mut total = 0usize;
    for &(u, v) in &g.edges {
        for w in 0..g.n {
            if adj.get(u, w) != 0.0 && adj.get(v, w) != 0.0 {
                total += 1;
            }
        }
    }
    total / 3
}

/// Triangles divided by the number of node triples.
pub fn triangle_density(g: &GraphInstance) -> f64 {
    if g.n < 3 {
        return 0.0;
    }
    let triples = g.n * (g.n - 1) * (g.n - 2) / 6;
    triangle_count(g) as f64 / triples as f64
}

/// One Erdos-Renyi graph with degree one-hot features and a binary
/// triangle-density label.
fn generate_er_graph(
    n: usize,
    feature_width: usize,
    edge_prob: f64,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GraphInstance, DatasetError> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < edge_prob {
                edges.push((i, j));
            }
        }
    }
    let mut degrees = vec![0usize; n];
    for &(u, v) in &edges {
        degrees[u] += 1;
        degrees[v] += 1;
    }
    let mut features = Mat::zeros(n, feature_width);
    for (i, &d) in degrees.iter().enumerate() {
        features.set(i, d.min(feature_width - 1), 1.0);
    }
    let mut g = GraphInstance::new(n, edges, features)?;
    g.graph_label = Some(if triangle_density(&g) > threshold { 1.0 } else { 0.0 });
    Ok(g)
}

/// The graph-classification benchmark: ER graphs with a shared feature
/// width so one model fits every instance.
pub fn generate_graph_set(cfg: &GraphSetConfig) -> Result<Vec<GraphInstance>, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.nodes_max;
    (0..cfg.num_graphs)
        .map(|_| {
            let n = rng.gen_range(cfg.nodes_min..=cfg.nodes_max);
            generate_er_graph(n, width, cfg.edge_prob, cfg.triangle_density_threshold, &mut rng)
        })
        .collect()
}

fn as_usize(v: &Value, field: &str) -> Result<usize, DatasetError> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| schema(field, "expected a non-negative integer"))
}

fn as_f64(v: &Value, field: &str) -> Result<f64, DatasetError> {
    v.as_f64().ok_or_else(|| schema(field, "expected a number"))
}

fn as_array<'a>(v: &'a Value, field: &str) -> Result<&'a Vec<Value>, DatasetError> {
    v.as_array().ok_or_else(|| schema(field, "expected an array"))
}

fn require<'a>(obj: &'a Value, field: &str) -> Result<&'a Value, DatasetError> {
    obj.get(field).ok_or_else(|| schema(field, "missing required field"))
}

fn parse_bool_mask(v: &Value, field: &str, n: usize) -> Result<Vec<bool>, DatasetError> {
    let arr = as_array(v, field)?;
    if arr.len() != n {
        return Err(schema(field, format!("expected {n} entries, found {}", arr.len())));
    }
    arr.iter()
        .enumerate()
        .map(|(i, b)| b.as_bool().ok_or_else(|| schema(&format!("{field}[{i}]"), "expected a bool")))
        .collect()
}

/// Parse a graph from the interchange schema.
pub fn graph_from_json(value: &Value) -> Result<GraphInstance, DatasetError> {
    if !value.is_object() {
        return Err(schema("", "expected a JSON object"));
    }
    let n = as_usize(require(value, "n")?, "n")?;

    let mut edges = Vec::new();
    for (i, e) in as_array(require(value, "edges")?, "edges")?.iter().enumerate() {
        let field = format!("edges[{i}]");
        let pair = as_array(e, &field)?;
        if pair.len() != 2 {
            return Err(schema(&field, "expected a [u, v] pair"));
        }
        edges.push((as_usize(&pair[0], &field)?, as_usize(&pair[1], &field)?));
    }

    let rows = as_array(require(value, "features")?, "features")?;
    if rows.len() != n {
        return Err(schema("features", format!("expected {n} rows, found {}", rows.len())));
    }
    let cols = rows
        .first()
        .map(|r| as_array(r, "features[0]").map(|a| a.len()))
        .transpose()?
        .unwrap_or(0);
    let mut features = Mat::zeros(n, cols);
    for (i, row) in rows.iter().enumerate() {
        let field = format!("features[{i}]");
        let vals = as_array(row, &field)?;
        if vals.len() != cols {
            return Err(schema(&field, format!("expected {cols} columns, found {}", vals.len())));
        }
        for (j, v) in vals.iter().enumerate() {
            features.set(i, j, as_f64(v, &format!("{field}[{j}]"))?);
        }
    }

    let mut g = GraphInstance::new(n, edges, features)?;

    match value.get("node_labels") {
        None | Some(Value::Null) => {}
        Some(v) => {
            let arr = as_array(v, "node_labels")?;
            if arr.len() != n {
                return Err(schema("node_labels", format!("expected {n} entries")));
            }
            g.node_labels = Some(
                arr.iter()
                    .enumerate()
                    .map(|(i, l)| as_usize(l, &format!("node_labels[{i}]")))
                    .collect::<Result<_, _>>()?,
            );
        }
    }
    match value.get("graph_label") {
        None | Some(Value::Null) => {}
        Some(v) => g.graph_label = Some(as_f64(v, "graph_label")?),
    }
    match value.get("masks") {
        None | Some(Value::Null) => {}
        Some(v) => {
            let part = |key: &str| -> Result<Vec<bool>, DatasetError> {
                let field = format!("masks.{key}");
                let mask = v.get(key).ok_or_else(|| schema(&field, "missing required field"))?;
                parse_bool_mask(mask, &field, n)
            };
            g.split_masks =
                Some(SplitMasks { train: part("train")?, val: part("val")?, test: part("test")? });
        }
    }
    Ok(g)
}

/// Serialize a graph to the interchange schema.
pub fn graph_to_json(g: &GraphInstance) -> Value {
    let features: Vec<Vec<f64>> = (0..g.n).map(|i| g.features.row(i).to_vec()).collect();
    json!({
        "n": g.n,
        "edges": g.edges.iter().map(|&(u, v)| vec![u, v]).collect::<Vec<_>>(),
        "features": features,
        "node_labels": g.node_labels,
        "graph_label": g.graph_label,
        "masks": g.split_masks.as_ref().map(|m| json!({
            "train": m.train,
            "val": m.val,
            "test": m.test,
        })),
    })
}

pub fn load_graph_json(path: &Path) -> Result<GraphInstance, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| schema("", format!("invalid JSON: {e}")))?;
    graph_from_json(&value)
}

pub fn save_graph_json(g: &GraphInstance, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, serde_json::to_string_pretty(&graph_to_json(g)).unwrap())?;
    Ok(())
}

/// Graph sets are stored one JSON object per line.
pub fn save_graph_set(graphs: &[GraphInstance], path: &Path) -> Result<(), DatasetError> {
    let lines: Vec<String> =
        graphs.iter().map(|g| serde_json::to_string(&graph_to_json(g)).unwrap()).collect();
    std::fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

pub fn load_graph_set(path: &Path) -> Result<Vec<GraphInstance>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let value: Value = serde_json::from_str(line)
                .map_err(|e| schema("", format!("invalid JSON line: {e}")))?;
            graph_from_json(&value)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn disjoint_cliques_when_p_in_one_p_out_zero() {
        let cfg = SbmConfig { p_in: 1.0, p_out: 0.0, ..Default::default() };
        let g = generate_sbm(&cfg).unwrap();
        let comp = g.components();
        let labels = g.node_labels.as_ref().unwrap();
        for i in 0..g.n {
            for j in 0..g.n {
                assert_eq!(comp[i] == comp[j], labels[i] == labels[j]);
            }
        }
    }

    #[test]
    fn zero_noise_features_are_exact_one_hots() {
        let cfg = SbmConfig { feature_noise: 0.0, ..Default::default() };
        let g = generate_sbm(&cfg).unwrap();
        let labels = g.node_labels.as_ref().unwrap();
        for i in 0..g.n {
            let row = g.features.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, labels[i]);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn same_seed_gives_identical_graph() {
        let cfg = SbmConfig { seed: 42, ..Default::default() };
        assert_eq!(generate_sbm(&cfg).unwrap(), generate_sbm(&cfg).unwrap());
    }

    #[test]
    fn masks_are_stratified_disjoint_and_complete() {
        let g = generate_sbm(&SbmConfig::default()).unwrap();
        let m = g.split_masks.as_ref().unwrap();
        let labels = g.node_labels.as_ref().unwrap();
        for i in 0..g.n {
            let count =
                m.train[i] as usize + m.val[i] as usize + m.test[i] as usize;
            assert_eq!(count, 1);
        }
        for c in 0..3 {
            let in_split = |mask: &[bool]| {
                (0..g.n).filter(|&i| mask[i] && labels[i] == c).count()
            };
            assert_eq!(in_split(&m.train), 12);
            assert_eq!(in_split(&m.val), 4);
            assert_eq!(in_split(&m.test), 4);
        }
    }

    #[test]
    fn learnability_check_is_overridable() {
        let cfg = SbmConfig { p_in: 0.05, p_out: 0.2, ..Default::default() };
        assert!(generate_sbm(&cfg).is_err());
        let cfg = SbmConfig { allow_unlearnable: true, ..cfg };
        assert!(generate_sbm(&cfg).is_ok());
    }

    #[test]
    fn sbm_edge_counts_within_binomial_bounds() {
        // aggregate intra/inter edge counts over 100 seeds against 5-sigma
        // binomial bounds
        let base = SbmConfig::default();
        let m = base.nodes_per_community;
        let c = base.communities;
        let intra_pairs = c * m * (m - 1) / 2;
        let inter_pairs = (c * m) * (c * m - 1) / 2 - intra_pairs;
        let (mut intra, mut inter) = (0usize, 0usize);
        for seed in 0..100 {
            let g = generate_sbm(&SbmConfig { seed, ..base.clone() }).unwrap();
            let labels = g.node_labels.as_ref().unwrap();
            for &(u, v) in &g.edges {
                if labels[u] == labels[v] {
                    intra += 1;
                } else {
                    inter += 1;
                }
            }
        }
        let check = |count: usize, trials: usize, p: f64| {
            let mean = trials as f64 * p;
            let sd = (trials as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (count as f64 - mean).abs() < 5.0 * sd,
                "count {count} vs mean {mean} sd {sd}"
            );
        };
        check(intra, 100 * intra_pairs, base.p_in);
        check(inter, 100 * inter_pairs, base.p_out);
    }

    #[test]
    fn empty_graph_labeled_zero() {
        let g = GraphInstance::new(6, vec![], Mat::zeros(6, 2)).unwrap();
        assert_eq!(triangle_density(&g), 0.0);
    }

    #[test]
    fn complete_k5_labeled_one_for_any_threshold_below_one() {
        let mut edges = Vec::new();
        for i in 0..5 {
            for j in (i + 1)..5 {
                edges.push((i, j));
            }
        }
        let g = GraphInstance::new(5, edges, Mat::zeros(5, 2)).unwrap();
        assert_eq!(triangle_density(&g), 1.0);
    }

    #[test]
    fn triangle_count_matches_triple_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let g = generate_er_graph(10, 10, 0.4, 0.05, &mut rng).unwrap();
            let adj = g.adjacency();
            let mut brute = 0usize;
            for a in 0..10 {
                for b in (a + 1)..10 {
                    for c in (b + 1)..10 {
                        if adj.get(a, b) != 0.0 && adj.get(b, c) != 0.0 && adj.get(a, c) != 0.0 {
                            brute += 1;
                        }
                    }
                }
            }
            assert_eq!(triangle_count(&g), brute);
            let want = if triangle_density(&g) > 0.05 { 1.0 } else { 0.0 };
            assert_eq!(g.graph_label, Some(want));
        }
    }

    #[test]
    fn graph_set_is_deterministic_with_fixed_width() {
        let cfg = GraphSetConfig::default();
        let a = generate_graph_set(&cfg).unwrap();
        let b = generate_graph_set(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.num_graphs);
        assert!(a.iter().all(|g| g.features.cols == cfg.nodes_max));
        assert!(a.iter().all(|g| g.graph_label.is_some()));
    }

    #[test]
    fn graph_set_has_both_labels() {
        let graphs = generate_graph_set(&GraphSetConfig::default()).unwrap();
        let ones = graphs.iter().filter(|g| g.graph_label == Some(1.0)).count();
        assert!(ones > 0 && ones < graphs.len(), "degenerate label split: {ones}");
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.json");
        let g = generate_sbm(&SbmConfig::default()).unwrap();
        save_graph_json(&g, &path).unwrap();
        let loaded = load_graph_json(&path).unwrap();
        assert_eq!(g, loaded);
    }

    #[test]
    fn graph_set_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("set.ndjson");
        let graphs = generate_graph_set(&GraphSetConfig { num_graphs: 5, ..Default::default() })
            .unwrap();
        save_graph_set(&graphs, &path).unwrap();
        assert_eq!(load_graph_set(&path).unwrap(), graphs);
    }

    #[test]
    fn self_loop_is_rejected_on_load() {
        let v = json!({"n": 2, "edges": [[0, 0]], "features": [[1.0], [2.0]]});
        match graph_from_json(&v) {
            Err(DatasetError::Graph(GraphError::SelfLoop(0))) => {}
            other => panic!("expected self-loop error, got {other:?}"),
        }
    }

    #[test]
    fn missing_n_names_the_field() {
        let v = json!({"edges": [], "features": []});
        match graph_from_json(&v) {
            Err(DatasetError::Schema { field, .. }) => assert_eq!(field, "n"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bad_feature_row_names_the_row() {
        let v = json!({"n": 2, "edges": [], "features": [[1.0], [1.0, 2.0]]});
        match graph_from_json(&v) {
            Err(DatasetError::Schema { field, .. }) => assert_eq!(field, "features[1]"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
