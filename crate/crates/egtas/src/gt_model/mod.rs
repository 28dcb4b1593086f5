//! The desk-scale graph Transformer assembled from an `ArchitectureSpec`:
//! parameter containers, MHA/FFN blocks, GNN blocks, graph-aware
//! positional embeddings and attention biases, topologies, and the three
//! GNN/Transformer combination modes. Gradients are exact reverse-mode
//! via the tape in `autodiff`.

mod forward;

pub use forward::{
    apply_positional_embeddings, assemble_forward, attention_bias, forward_output,
    gnn_block_forward, loss_and_gradients, loss_and_gradients_with, transformer_block_forward,
    DropoutRates, ForwardTrace, Targets,
};

use crate::graph_core::{
    adjacency_svd, bfs_all_pairs, common_neighbor_counts, normalized_laplacian_eig,
    DistanceMatrix, GraphInstance, UNREACHABLE,
};
use crate::linalg::Mat;
use crate::search_space::ArchitectureSpec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Softmax mask constant: large-negative instead of -inf keeps the
/// softmax finite.
pub const MASK_CONST: f64 = -1e9;
/// Width of each structural-function embedding used by the PEM bias.
pub const PEM_EMBED_DIM: usize = 4;
/// Common-neighbor counts are clamped at this value before embedding.
pub const CN_CLAMP: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown option `{value}` for field `{field}`")]
    UnknownOption { field: &'static str, value: String },
    #[error("gnn_block_forward called on a spec with gnn_block = None")]
    NoGnnBlock,
    #[error("non-finite activation during forward pass")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty mask: no target nodes selected")]
    EmptyMask,
    #[error(transparent)]
    Graph(#[from] crate::graph_core::GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Vanilla,
    Jk,
    Residual,
    Gcnii,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combination {
    Before,
    Alternate,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnnKind {
    Gcn,
    Sage,
    Gat,
    GatV2,
    Gin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PeSet {
    pub le: bool,
    pub svd: bool,
    pub dc: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AmSet {
    pub pem: bool,
    pub se: bool,
    pub mask: bool,
}

impl AmSet {
    pub fn is_empty(&self) -> bool {
        !(self.pem || self.se || self.mask)
    }
}

/// `ArchitectureSpec` resolved to typed operations.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedSpec {
    pub topology: Topology,
    pub combination: Combination,
    pub gnn: Option<GnnKind>,
    pub pe: PeSet,
    pub am: AmSet,
    pub scale_name: String,
}

impl TypedSpec {
    pub fn parse(spec: &ArchitectureSpec) -> Result<Self, ModelError> {
        let topology = match spec.topology.as_str() {
            "Vanilla" => Topology::Vanilla,
            "JK" => Topology::Jk,
            "Residual" => Topology::Residual,
            "GCNII" => Topology::Gcnii,
            other => {
                return Err(ModelError::UnknownOption { field: "topology", value: other.into() })
            }
        };
        let combination = match spec.combination.as_str() {
            "Before" => Combination::Before,
            "Alternate" => Combination::Alternate,
            "Parallel" => Combination::Parallel,
            other => {
                return Err(ModelError::UnknownOption {
                    field: "combination",
                    value: other.into(),
                })
            }
        };
        let gnn = match spec.gnn_block.as_str() {
            "GCN" => Some(GnnKind::Gcn),
            "SAGE" => Some(GnnKind::Sage),
            "GAT" => Some(GnnKind::Gat),
            "GATv2" => Some(GnnKind::GatV2),
            "GIN" => Some(GnnKind::Gin),
            "None" => None,
            other => {
                return Err(ModelError::UnknownOption { field: "gnn_block", value: other.into() })
            }
        };
        let mut pe = PeSet::default();
        for op in &spec.pe_set {
            match op.as_str() {
                "LE" => pe.le = true,
                "SVD" => pe.svd = true,
                "DC" => pe.dc = true,
                other => {
                    return Err(ModelError::UnknownOption { field: "pe_set", value: other.into() })
                }
            }
        }
        let mut am = AmSet::default();
        for op in &spec.am_set {
            match op.as_str() {
                "PEM" => am.pem = true,
                "SE" => am.se = true,
                "Mask" => am.mask = true,
                other => {
                    return Err(ModelError::UnknownOption { field: "am_set", value: other.into() })
                }
            }
        }
        Ok(TypedSpec { topology, combination, gnn, pe, am, scale_name: spec.scale.clone() })
    }
}

/// Per-scale hyper-parameters: layers, hidden dim, heads, head dim,
/// FFN hidden dim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelScale {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
}

impl ModelScale {
    /// Named presets. Mini/Small/Middle/Large follow the published size
    /// table; Desk is a test-sized preset.
    pub fn preset(name: &str) -> Option<ModelScale> {
        let (layers, hidden_dim, heads, head_dim, ffn_dim) = match name {
            "Mini" => (3, 64, 4, 5, 64),
            "Small" => (6, 80, 8, 10, 80),
            "Middle" => (12, 80, 8, 10, 80),
            "Large" => (12, 512, 32, 16, 512),
            "Desk" => (2, 8, 2, 4, 16),
            _ => return None,
        };
        Some(ModelScale { layers, hidden_dim, heads, head_dim, ffn_dim })
    }
}

/// Knobs of the graph-aware strategies that the encoding does not fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub k_le: usize,
    pub k_svd: usize,
    pub mask_threshold: u32,
    pub gcnii_alpha: f64,
    pub max_distance_bucket: u32,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            k_le: 4,
            k_svd: 4,
            mask_threshold: 2,
            gcnii_alpha: 0.1,
            max_distance_bucket: 8,
        }
    }
}

/// Named tensors for every learnable quantity. Order is the construction
/// order and is deterministic per spec.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterSet {
    pub entries: Vec<(String, Mat)>,
}

impl ParameterSet {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, m)| (n.clone(), Mat::zeros(m.rows, m.cols)))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }
}

/// The GA phenotype: a parameterized network plus everything needed to
/// run it on a graph.
#[derive(Debug, Clone)]
pub struct GraphTransformerModel {
    pub spec: ArchitectureSpec,
    pub typed: TypedSpec,
    pub scale: ModelScale,
    pub params: ParameterSet,
    pub config: EncodingConfig,
    /// Input feature width the parameters were shaped for.
    pub input_dim: usize,
    /// Readout width (class count for NC, 1 for GC).
    pub output_dim: usize,
}

fn init_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let fan_in = if rows > 1 { rows } else { cols };
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in &mut m.data {
        *v = rng.gen_range(-bound..bound);
    }
    m
}

/// Build a model with all parameters initialized; deterministic per seed.
pub fn build_model(
    spec: &ArchitectureSpec,
    scale: ModelScale,
    config: EncodingConfig,
    input_dim: usize,
    output_dim: usize,
    init_rng: &mut ChaCha8Rng,
) -> Result<GraphTransformerModel, ModelError> {
    let typed = TypedSpec::parse(spec)?;
    let d = scale.hidden_dim;
    let mut params = ParameterSet::default();
    let push = |params: &mut ParameterSet, name: String, rows, cols, rng: &mut ChaCha8Rng| {
        params.entries.push((name, init_mat(rows, cols, rng)));
    };

    // input projection over raw features plus any concatenated PE columns
    let mut in_cols = input_dim;
    if typed.pe.le {
        in_cols += config.k_le;
    }
    if typed.pe.svd {
        in_cols += 2 * config.k_svd;
    }
    push(&mut params, "input.w".into(), in_cols, d, init_rng);
    push(&mut params, "input.b".into(), 1, d, init_rng);
    if typed.pe.dc {
        let buckets = config.max_distance_bucket as usize + 1;
        push(&mut params, "pe.deg_in".into(), buckets, d, init_rng);
        push(&mut params, "pe.deg_out".into(), buckets, d, init_rng);
    }

    let dist_buckets = config.max_distance_bucket as usize + 2; // last = unreachable
    if typed.am.se {
        push(&mut params, "am.se_table".into(), dist_buckets, 1, init_rng);
    }
    if typed.am.pem {
        push(&mut params, "am.pem_dist".into(), dist_buckets, PEM_EMBED_DIM, init_rng);
        push(&mut params, "am.pem_cn".into(), CN_CLAMP + 1, PEM_EMBED_DIM, init_rng);
        push(&mut params, "am.pem_b".into(), 2 * PEM_EMBED_DIM, 1, init_rng);
    }

    for l in 0..scale.layers {
        for h in 0..scale.heads {
            push(&mut params, format!("block{l}.head{h}.wq"), d, scale.head_dim, init_rng);
            push(&mut params, format!("block{l}.head{h}.wk"), d, scale.head_dim, init_rng);
            push(&mut params, format!("block{l}.head{h}.wv"), d, scale.head_dim, init_rng);
        }
        push(&mut params, format!("block{l}.wo"), scale.heads * scale.head_dim, d, init_rng);
        push(&mut params, format!("block{l}.ffn.w1"), d, scale.ffn_dim, init_rng);
        push(&mut params, format!("block{l}.ffn.b1"), 1, scale.ffn_dim, init_rng);
        push(&mut params, format!("block{l}.ffn.w2"), scale.ffn_dim, d, init_rng);
        push(&mut params, format!("block{l}.ffn.b2"), 1, d, init_rng);
        match typed.gnn {
            None => {}
            Some(GnnKind::Gcn) => {
                push(&mut params, format!("block{l}.gnn.w"), d, d, init_rng);
            }
            Some(GnnKind::Sage) => {
                push(&mut params, format!("block{l}.gnn.w"), 2 * d, d, init_rng);
            }
            Some(GnnKind::Gat) => {
                push(&mut params, format!("block{l}.gnn.w"), d, d, init_rng);
                push(&mut params, format!("block{l}.gnn.a_l"), d, 1, init_rng);
                push(&mut params, format!("block{l}.gnn.a_r"), d, 1, init_rng);
            }
            Some(GnnKind::GatV2) => {
                push(&mut params, format!("block{l}.gnn.wl"), d, d, init_rng);
                push(&mut params, format!("block{l}.gnn.wr"), d, d, init_rng);
                push(&mut params, format!("block{l}.gnn.a"), d, 1, init_rng);
            }
            Some(GnnKind::Gin) => {
                push(&mut params, format!("block{l}.gnn.w1"), d, d, init_rng);
                push(&mut params, format!("block{l}.gnn.b1"), 1, d, init_rng);
                push(&mut params, format!("block{l}.gnn.w2"), d, d, init_rng);
                push(&mut params, format!("block{l}.gnn.b2"), 1, d, init_rng);
            }
        }
    }

    if typed.topology == Topology::Jk && scale.layers > 1 {
        push(&mut params, "jk.w".into(), scale.layers * d, d, init_rng);
        push(&mut params, "jk.b".into(), 1, d, init_rng);
    }

    push(&mut params, "readout.w".into(), d, output_dim, init_rng);
    push(&mut params, "readout.b".into(), 1, output_dim, init_rng);

    Ok(GraphTransformerModel {
        spec: spec.clone(),
        typed,
        scale,
        params,
        config,
        input_dim,
        output_dim,
    })
}

/// Graph-dependent constants computed once per (graph, spec) pair.
#[derive(Debug, Clone)]
pub struct GraphPrecomp {
    /// n x k_le spectral columns, zero-padded when the graph has fewer
    /// non-trivial eigenvalues than requested.
    pub spectral: Option<Mat>,
    /// n x 2*k_svd scaled left/right singular columns, zero-padded.
    pub svd: Option<Mat>,
    pub degrees: Vec<usize>,
    pub dists: Option<DistanceMatrix>,
    pub common_neighbors: Option<Vec<usize>>,
    pub gnn: Option<GnnPrecomp>,
}

#[derive(Debug, Clone)]
pub enum GnnPrecomp {
    /// Symmetric-normalized adjacency with self-loops.
    Gcn(Mat),
    /// Row-normalized adjacency (mean of neighbors; zero row if none).
    Sage(Mat),
    /// Additive attention mask: 0 inside the closed neighborhood,
    /// MASK_CONST outside.
    GatMask(Mat),
    /// A + (1 + eps) I with eps = 0.
    Gin(Mat),
}

pub fn distance_bucket(dist: u32, max_bucket: u32) -> usize {
    if dist == UNREACHABLE {
        max_bucket as usize + 1
    } else {
        dist.min(max_bucket) as usize
    }
}

/// Compute exactly the graph quantities the spec needs.
pub fn precompute(
    g: &GraphInstance,
    model: &GraphTransformerModel,
) -> Result<GraphPrecomp, ModelError> {
    let typed = &model.typed;
    let cfg = &model.config;
    let n = g.n;

    let spectral = if typed.pe.le {
        let comp = g.components();
        let deg = g.degrees();
        let mut nontrivial = vec![false; n];
        for (node, &c) in comp.iter().enumerate() {
            if deg[node] > 0 {
                nontrivial[c] = true;
            }
        }
        let skip = nontrivial.iter().filter(|&&b| b).count();
        let avail = n.saturating_sub(skip.max(1));
        let k = cfg.k_le.min(avail);
        let mut cols = Mat::zeros(n, cfg.k_le);
        if k > 0 {
            let emb = normalized_laplacian_eig(g, k)?;
            for i in 0..n {
                for j in 0..k {
                    cols.set(i, j, emb.vectors.get(i, j));
                }
            }
        }
        Some(cols)
    } else {
        None
    };

    let svd = if typed.pe.svd {
        let k = cfg.k_svd.min(n);
        let mut cols = Mat::zeros(n, 2 * cfg.k_svd);
        if k > 0 {
            let emb = adjacency_svd(g, k)?;
            for i in 0..n {
                for j in 0..k {
                    cols.set(i, j, emb.left.get(i, j));
                    cols.set(i, cfg.k_svd + j, emb.right.get(i, j));
                }
            }
        }
        Some(cols)
    } else {
        None
    };

    let needs_dists = typed.am.se || typed.am.pem || typed.am.mask;
    let dists = needs_dists.then(|| bfs_all_pairs(g));
    let common_neighbors = typed.am.pem.then(|| common_neighbor_counts(g));

    let gnn = match typed.gnn {
        None => None,
        Some(GnnKind::Gcn) => {
            let a = g.adjacency();
            let deg = g.degrees();
            let dinv: Vec<f64> = deg.iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
            let norm = Mat::from_fn(n, n, |i, j| {
                let aij = if i == j { 1.0 } else { a.get(i, j) };
                dinv[i] * aij * dinv[j]
            });
            Some(GnnPrecomp::Gcn(norm))
        }
        Some(GnnKind::Sage) => {
            let a = g.adjacency();
            let deg = g.degrees();
            let mean = Mat::from_fn(n, n, |i, j| {
                if deg[i] == 0 {
                    0.0
                } else {
                    a.get(i, j) / deg[i] as f64
                }
            });
            Some(GnnPrecomp::Sage(mean))
        }
        Some(GnnKind::Gat) | Some(GnnKind::GatV2) => {
            let a = g.adjacency();
            let mask = Mat::from_fn(n, n, |i, j| {
                if i == j || a.get(i, j) != 0.0 {
                    0.0
                } else {
                    MASK_CONST
                }
            });
            Some(GnnPrecomp::GatMask(mask))
        }
        Some(GnnKind::Gin) => {
            let a = g.adjacency();
            let agg = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { a.get(i, j) });
            Some(GnnPrecomp::Gin(agg))
        }
    };

    Ok(GraphPrecomp {
        spectral,
        svd,
        degrees: g.degrees(),
        dists,
        common_neighbors,
        gnn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec_named(gnn: &str, topo: &str) -> ArchitectureSpec {
        ArchitectureSpec {
            topology: topo.into(),
            combination: "Alternate".into(),
            gnn_block: gnn.into(),
            pe_set: vec![],
            am_set: vec![],
            scale: "Desk".into(),
        }
    }

    #[test]
    fn table3_presets() {
        let mini = ModelScale::preset("Mini").unwrap();
        assert_eq!((mini.layers, mini.hidden_dim, mini.heads, mini.head_dim, mini.ffn_dim),
                   (3, 64, 4, 5, 64));
        let small = ModelScale::preset("Small").unwrap();
        assert_eq!((small.layers, small.hidden_dim, small.heads, small.head_dim, small.ffn_dim),
                   (6, 80, 8, 10, 80));
        let middle = ModelScale::preset("Middle").unwrap();
        assert_eq!((middle.layers, middle.hidden_dim), (12, 80));
        let large = ModelScale::preset("Large").unwrap();
        assert_eq!((large.layers, large.hidden_dim, large.heads, large.head_dim, large.ffn_dim),
                   (12, 512, 32, 16, 512));
        assert!(ModelScale::preset("Huge").is_none());
    }

    #[test]
    fn no_gnn_means_no_gnn_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = build_model(
            &spec_named("None", "Vanilla"),
            ModelScale::preset("Desk").unwrap(),
            EncodingConfig::default(),
            5,
            3,
            &mut rng,
        )
        .unwrap();
        assert!(model.params.entries.iter().all(|(n, _)| !n.contains("gnn")));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            build_model(
                &spec_named("GAT", "GCNII"),
                ModelScale::preset("Desk").unwrap(),
                EncodingConfig::default(),
                4,
                2,
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(build().params, build().params);
    }

    #[test]
    fn unknown_gnn_name_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = build_model(
            &spec_named("MLP", "Vanilla"),
            ModelScale::preset("Desk").unwrap(),
            EncodingConfig::default(),
            4,
            2,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::UnknownOption { field: "gnn_block", .. }));
    }
}
