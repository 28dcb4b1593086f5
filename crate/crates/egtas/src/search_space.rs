//! The unified macro/micro search space: operation menu, integer
//! encoding/decoding of architectures, uniform sampling, and exhaustive
//! enumeration.
//!
//! An architecture is a 6-gene integer chromosome indexing the operation
//! menu: topology, combination mode, GNN block, positional-embedding
//! subset, attention-matrix subset, model scale.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Encoding dimension: one gene per searched component.
pub const ENCODING_DIM: usize = 6;

pub const PE_BASE_OPS: [&str; 3] = ["LE", "SVD", "DC"];
pub const AM_BASE_OPS: [&str; 3] = ["PEM", "SE", "Mask"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SearchSpaceError {
    #[error("unknown option `{value}` for field `{field}`")]
    UnknownOption { field: &'static str, value: String },
    #[error("gene {position} value {value} out of bounds (bound {bound})")]
    GeneOutOfBounds { position: usize, value: usize, bound: usize },
}

/// The ordered operation menu. Subset rows (positional embedding,
/// attention matrix) are indexed by a 3-bit mask: bit 0 = LE (resp. PEM),
/// bit 1 = SVD (resp. SE), bit 2 = DC (resp. Mask), so index 0 is the
/// empty set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationTable {
    pub topology_options: Vec<String>,
    pub combination_options: Vec<String>,
    pub gnn_options: Vec<String>,
    pub pe_options: Vec<Vec<String>>,
    pub am_options: Vec<Vec<String>>,
    pub scale_options: Vec<String>,
}

fn power_set(base: &[&str; 3]) -> Vec<Vec<String>> {
    (0u8..8)
        .map(|mask| {
            (0..3)
                .filter(|b| mask >> b & 1 == 1)
                .map(|b| base[b].to_string())
                .collect()
        })
        .collect()
}

impl Default for OperationTable {
    fn default() -> Self {
        OperationTable {
            topology_options: ["Vanilla", "JK", "Residual", "GCNII"]
                .map(String::from)
                .to_vec(),
            combination_options: ["Before", "Alternate", "Parallel"].map(String::from).to_vec(),
            gnn_options: ["GCN", "SAGE", "GAT", "GATv2", "GIN", "None"]
                .map(String::from)
                .to_vec(),
            pe_options: power_set(&PE_BASE_OPS),
            am_options: power_set(&AM_BASE_OPS),
            scale_options: ["Mini", "Small", "Middle", "Large"].map(String::from).to_vec(),
        }
    }
}

impl OperationTable {
    /// Per-gene index bounds, in gene order.
    pub fn bounds(&self) -> [usize; ENCODING_DIM] {
        [
            self.topology_options.len(),
            self.combination_options.len(),
            self.gnn_options.len(),
            self.pe_options.len(),
            self.am_options.len(),
            self.scale_options.len(),
        ]
    }

    pub fn cardinality(&self) -> u64 {
        self.bounds().iter().map(|&b| b as u64).product()
    }
}

/// The GA genotype: 6 non-negative integers, each indexing a table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchitectureEncoding {
    pub genes: [usize; ENCODING_DIM],
}

impl ArchitectureEncoding {
    pub fn new(genes: [usize; ENCODING_DIM]) -> Self {
        ArchitectureEncoding { genes }
    }

    pub fn validate(&self, table: &OperationTable) -> Result<(), SearchSpaceError> {
        let bounds = table.bounds();
        for (position, (&value, &bound)) in self.genes.iter().zip(bounds.iter()).enumerate() {
            if value >= bound {
                return Err(SearchSpaceError::GeneOutOfBounds { position, value, bound });
            }
        }
        Ok(())
    }
}

/// The decoded architecture: option names instead of indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub topology: String,
    pub combination: String,
    pub gnn_block: String,
    pub pe_set: Vec<String>,
    pub am_set: Vec<String>,
    pub scale: String,
}

fn find_name(
    options: &[String],
    name: &str,
    field: &'static str,
) -> Result<usize, SearchSpaceError> {
    options
        .iter()
        .position(|o| o == name)
        .ok_or_else(|| SearchSpaceError::UnknownOption { field, value: name.to_string() })
}

fn find_subset(
    options: &[Vec<String>],
    subset: &[String],
    field: &'static str,
) -> Result<usize, SearchSpaceError> {
    options
        .iter()
        .position(|o| o.len() == subset.len() && subset.iter().all(|s| o.contains(s)))
        .ok_or_else(|| SearchSpaceError::UnknownOption { field, value: subset.join(",") })
}

pub fn encode(
    spec: &ArchitectureSpec,
    table: &OperationTable,
) -> Result<ArchitectureEncoding, SearchSpaceError> {
    Ok(ArchitectureEncoding::new([
        find_name(&table.topology_options, &spec.topology, "topology")?,
        find_name(&table.combination_options, &spec.combination, "combination")?,
        find_name(&table.gnn_options, &spec.gnn_block, "gnn_block")?,
        find_subset(&table.pe_options, &spec.pe_set, "pe_set")?,
        find_subset(&table.am_options, &spec.am_set, "am_set")?,
        find_name(&table.scale_options, &spec.scale, "scale")?,
    ]))
}

pub fn decode(
    enc: &ArchitectureEncoding,
    table: &OperationTable,
) -> Result<ArchitectureSpec, SearchSpaceError> {
    enc.validate(table)?;
    let g = enc.genes;
    Ok(ArchitectureSpec {
        topology: table.topology_options[g[0]].clone(),
        combination: table.combination_options[g[1]].clone(),
        gnn_block: table.gnn_options[g[2]].clone(),
        pe_set: table.pe_options[g[3]].clone(),
        am_set: table.am_options[g[4]].clone(),
        scale: table.scale_options[g[5]].clone(),
    })
}

/// One uniform draw per gene; deterministic for a given RNG state.
pub fn sample_uniform(table: &OperationTable, rng: &mut ChaCha8Rng) -> ArchitectureEncoding {
    let bounds = table.bounds();
    let mut genes = [0usize; ENCODING_DIM];
    for (g, &b) in genes.iter_mut().zip(bounds.iter()) {
        *g = rng.gen_range(0..b);
    }
    ArchitectureEncoding::new(genes)
}

/// Every encoding exactly once, in lexicographic gene order.
pub fn enumerate_all(table: &OperationTable) -> impl Iterator<Item = ArchitectureEncoding> {
    let bounds = table.bounds();
    let total = table.cardinality();
    (0..total).map(move |mut idx| {
        let mut genes = [0usize; ENCODING_DIM];
        for pos in (0..ENCODING_DIM).rev() {
            let b = bounds[pos] as u64;
            genes[pos] = (idx % b) as usize;
            idx /= b;
        }
        ArchitectureEncoding::new(genes)
    })
}
