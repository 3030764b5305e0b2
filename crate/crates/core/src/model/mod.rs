//! Recommendation model representation.
//!
//! A model is a set of nets (one user net, at most one candidate net), the
//! dense layers of each net and the embedding tables feeding them. The
//! [`ModelHeader`] carries everything except the float payloads and is what
//! the planner and analyzer work from; [`ModelSpec`] adds the payloads.

mod generate;
mod io;
mod ops;

pub use generate::{generate_model, Archetype, SizeBudget};
pub use io::{load_header, load_partial, load_spec, save_spec, PartialModel, SPEC_MAGIC};
pub use ops::{fc_forward, fc_forward_into, sls_pool, sls_pool_into};

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TableId = u32;
pub type NetId = u32;
pub type LayerId = u32;

pub const MIB: u64 = 1024 * 1024;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("index {index} out of range for table {table_id} with {num_rows} rows")]
    IndexOutOfRange {
        table_id: TableId,
        index: u64,
        num_rows: u64,
    },
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },
    #[error("size budget of {budget} bytes is below the 1 MiB minimum")]
    BudgetTooSmall { budget: u64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid model: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Sum,
    /// Concatenation of exactly `width` looked-up rows.
    Concat { width: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetRole {
    User,
    Candidate,
}

/// Distribution of lookups per feature instance, used by the request
/// generator. The table's estimated pooling factor is its mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LookupDist {
    Constant(u32),
    /// P(k) proportional to k^-alpha on 1..=max.
    PowerLaw { alpha: f64, max: u32 },
}

impl LookupDist {
    pub fn mean(&self) -> f64 {
        match *self {
            LookupDist::Constant(k) => k as f64,
            LookupDist::PowerLaw { alpha, max } => {
                let (mut num, mut den) = (0.0, 0.0);
                for k in 1..=max.max(1) {
                    let p = (k as f64).powf(-alpha);
                    num += k as f64 * p;
                    den += p;
                }
                num / den
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableMeta {
    pub table_id: TableId,
    pub net_id: NetId,
    pub num_rows: u64,
    pub dim: u32,
    pub pooling: Pooling,
    pub est_pooling_factor: f64,
    pub lookups: LookupDist,
}

impl TableMeta {
    pub fn size_bytes(&self) -> u64 {
        self.num_rows * self.dim as u64 * 4
    }

    /// Width of this table's pooled output for one feature instance.
    pub fn pooled_width(&self) -> usize {
        match self.pooling {
            Pooling::Sum => self.dim as usize,
            Pooling::Concat { width } => self.dim as usize * width as usize,
        }
    }

    pub fn profile(&self) -> TableProfile {
        TableProfile {
            table_id: self.table_id,
            est_pooling_factor: self.est_pooling_factor,
            size_bytes: self.size_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub meta: TableMeta,
    /// Row-major `num_rows x dim`.
    pub values: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(meta: TableMeta, values: Vec<f32>) -> Result<Self, ModelError> {
        let expected = meta.num_rows as usize * meta.dim as usize;
        if values.len() != expected {
            return Err(ModelError::DimensionMismatch {
                context: format!("table {} values", meta.table_id),
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { meta, values })
    }

    pub fn table_id(&self) -> TableId {
        self.meta.table_id
    }

    pub fn num_rows(&self) -> u64 {
        self.meta.num_rows
    }

    pub fn dim(&self) -> usize {
        self.meta.dim as usize
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        let m = self.dim();
        &self.values[r * m..(r + 1) * m]
    }

    /// Rows `r` with `r % count == index`, renumbered `r / count`.
    pub fn partition(&self, index: u32, count: u32) -> EmbeddingTable {
        let (index, count) = (index as u64, count as u64);
        let rows = partition_rows(self.meta.num_rows, index, count);
        let m = self.dim();
        let mut values = Vec::with_capacity(rows as usize * m);
        let mut r = index;
        while r < self.meta.num_rows {
            values.extend_from_slice(self.row(r as usize));
            r += count;
        }
        let mut meta = self.meta.clone();
        meta.num_rows = rows;
        EmbeddingTable { meta, values }
    }
}

/// Number of rows of an `n`-row table landing in partition `index` of `count`.
pub fn partition_rows(n: u64, index: u64, count: u64) -> u64 {
    if index >= n {
        0
    } else {
        (n - index).div_ceil(count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMeta {
    pub layer_id: LayerId,
    pub net_id: NetId,
    pub in_dim: u32,
    pub out_dim: u32,
    pub activation: Activation,
}

impl LayerMeta {
    pub fn param_count(&self) -> u64 {
        self.in_dim as u64 * self.out_dim as u64 + self.out_dim as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub meta: LayerMeta,
    /// Row-major `out x in`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(meta: LayerMeta, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self, ModelError> {
        let w = meta.in_dim as usize * meta.out_dim as usize;
        if weight.len() != w {
            return Err(ModelError::DimensionMismatch {
                context: format!("layer {} weight", meta.layer_id),
                expected: w,
                actual: weight.len(),
            });
        }
        if bias.len() != meta.out_dim as usize {
            return Err(ModelError::DimensionMismatch {
                context: format!("layer {} bias", meta.layer_id),
                expected: meta.out_dim as usize,
                actual: bias.len(),
            });
        }
        Ok(Self { meta, weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.meta.in_dim as usize
    }

    pub fn out_dim(&self) -> usize {
        self.meta.out_dim as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub net_id: NetId,
    pub role: NetRole,
    pub dense_input_dim: u32,
    pub table_ids: Vec<TableId>,
    pub bottom_layers: Vec<LayerId>,
    pub interaction_layers: Vec<LayerId>,
    pub top_layers: Vec<LayerId>,
}

impl Net {
    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.bottom_layers
            .iter()
            .chain(&self.interaction_layers)
            .chain(&self.top_layers)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableProfile {
    pub table_id: TableId,
    pub est_pooling_factor: f64,
    pub size_bytes: u64,
}

/// Everything about a model except its float payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHeader {
    pub model_id: String,
    pub default_batch_size: u32,
    pub nets: Vec<Net>,
    pub tables: Vec<TableMeta>,
    pub layers: Vec<LayerMeta>,
}

impl ModelHeader {
    pub fn table(&self, id: TableId) -> Option<&TableMeta> {
        self.tables.iter().find(|t| t.table_id == id)
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerMeta> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn net(&self, id: NetId) -> Option<&Net> {
        self.nets.iter().find(|n| n.net_id == id)
    }

    pub fn user_net(&self) -> &Net {
        self.nets
            .iter()
            .find(|n| n.role == NetRole::User)
            .expect("validated model has a user net")
    }

    pub fn candidate_net(&self) -> Option<&Net> {
        self.nets.iter().find(|n| n.role == NetRole::Candidate)
    }

    /// Nets in execution order: user first, then candidate.
    pub fn nets_in_order(&self) -> Vec<&Net> {
        let mut nets = vec![self.user_net()];
        nets.extend(self.candidate_net());
        nets
    }

    pub fn profiles(&self) -> Vec<TableProfile> {
        self.tables.iter().map(TableMeta::profile).collect()
    }

    pub fn sparse_bytes(&self) -> u64 {
        self.tables.iter().map(TableMeta::size_bytes).sum()
    }

    pub fn dense_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count() * 4).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.sparse_bytes() + self.dense_bytes()
    }

    /// Width of the user net's output vector fed to the candidate net, or 0.
    pub fn user_output_dim(&self) -> usize {
        if self.candidate_net().is_none() {
            return 0;
        }
        let user = self.user_net();
        user.layer_ids()
            .last()
            .and_then(|id| self.layer(id))
            .map(|l| l.out_dim as usize)
            .unwrap_or(0)
    }

    /// Input width of a net's interaction stage: bottom output, pooled
    /// sparse outputs and, for the candidate net, the user net output.
    pub fn interaction_input_dim(&self, net: &Net) -> usize {
        let bottom_out = net
            .bottom_layers
            .last()
            .and_then(|id| self.layer(*id))
            .map(|l| l.out_dim as usize)
            .unwrap_or(net.dense_input_dim as usize);
        let pooled: usize = net
            .table_ids
            .iter()
            .filter_map(|id| self.table(*id))
            .map(TableMeta::pooled_width)
            .sum();
        let user = if net.role == NetRole::Candidate {
            self.user_output_dim()
        } else {
            0
        };
        bottom_out + pooled + user
    }

    /// Item-level dense input width expected on each candidate.
    pub fn candidate_dense_dim(&self) -> usize {
        match self.candidate_net() {
            Some(c) => c.dense_input_dim as usize,
            None => self.user_net().dense_input_dim as usize,
        }
    }

    /// Request-level dense input width (0 for single-net models).
    pub fn user_dense_dim(&self) -> usize {
        if self.candidate_net().is_some() {
            self.user_net().dense_input_dim as usize
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Validation(m));
        if self.default_batch_size == 0 {
            return fail("default batch size must be at least 1".into());
        }
        let users = self.nets.iter().filter(|n| n.role == NetRole::User).count();
        let cands = self.nets.iter().filter(|n| n.role == NetRole::Candidate).count();
        if users != 1 || cands > 1 {
            return fail(format!(
                "expected one user net and at most one candidate net, found {users} and {cands}"
            ));
        }
        let mut net_ids = HashSet::new();
        for n in &self.nets {
            if !net_ids.insert(n.net_id) {
                return fail(format!("duplicate net id {}", n.net_id));
            }
        }

        let mut table_owner: HashMap<TableId, NetId> = HashMap::new();
        for t in &self.tables {
            if t.num_rows == 0 || t.dim == 0 {
                return fail(format!("table {} has an empty dimension", t.table_id));
            }
            if t.num_rows > u32::MAX as u64 {
                return fail(format!("table {} exceeds 2^32 rows", t.table_id));
            }
            if let Pooling::Concat { width: 0 } = t.pooling {
                return fail(format!("table {} has concat width 0", t.table_id));
            }
            if !t.est_pooling_factor.is_finite() || t.est_pooling_factor < 0.0 {
                return fail(format!("table {} has an invalid pooling factor", t.table_id));
            }
            if !net_ids.contains(&t.net_id) {
                return fail(format!("table {} references unknown net {}", t.table_id, t.net_id));
            }
            if table_owner.insert(t.table_id, t.net_id).is_some() {
                return fail(format!("duplicate table id {}", t.table_id));
            }
        }
        let mut referenced = HashSet::new();
        for n in &self.nets {
            for id in &n.table_ids {
                match table_owner.get(id) {
                    None => return fail(format!("net {} references unknown table {id}", n.net_id)),
                    Some(owner) if *owner != n.net_id => {
                        return fail(format!("table {id} belongs to net {owner}, listed by net {}", n.net_id))
                    }
                    _ => {}
                }
                if !referenced.insert(*id) {
                    return fail(format!("table {id} referenced more than once"));
                }
            }
        }
        if referenced.len() != self.tables.len() {
            return fail("some tables are not referenced by any net".into());
        }

        let mut layer_ids = HashSet::new();
        for l in &self.layers {
            if l.in_dim == 0 || l.out_dim == 0 {
                return fail(format!("layer {} has an empty dimension", l.layer_id));
            }
            if !layer_ids.insert(l.layer_id) {
                return fail(format!("duplicate layer id {}", l.layer_id));
            }
        }
        let mut used_layers = HashSet::new();
        for n in &self.nets {
            for id in n.layer_ids() {
                let Some(l) = self.layer(id) else {
                    return fail(format!("net {} references unknown layer {id}", n.net_id));
                };
                if l.net_id != n.net_id {
                    return fail(format!("layer {id} belongs to net {}, listed by net {}", l.net_id, n.net_id));
                }
                if !used_layers.insert(id) {
                    return fail(format!("layer {id} used more than once"));
                }
            }
            if n.top_layers.is_empty() {
                return fail(format!("net {} has no top layers", n.net_id));
            }
            let mut width = n.dense_input_dim as usize;
            for id in &n.bottom_layers {
                width = self.chain_step(n, *id, width)?;
            }
            width = self.interaction_input_dim(n);
            for id in n.interaction_layers.iter().chain(&n.top_layers) {
                width = self.chain_step(n, *id, width)?;
            }
            let scores = n.role == NetRole::Candidate || self.candidate_net().is_none();
            if scores && width != 1 {
                return fail(format!("scoring net {} must end in width 1, ends in {width}", n.net_id));
            }
        }
        if used_layers.len() != self.layers.len() {
            return fail("some layers are not used by any net".into());
        }
        Ok(())
    }

    fn chain_step(&self, net: &Net, id: LayerId, width: usize) -> Result<usize, ModelError> {
        let l = self.layer(id).expect("checked above");
        if l.in_dim as usize != width {
            return Err(ModelError::Validation(format!(
                "net {} layer {id} expects input width {}, chain provides {width}",
                net.net_id, l.in_dim
            )));
        }
        Ok(l.out_dim as usize)
    }
}

/// A complete model: header plus all payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model_id: String,
    pub default_batch_size: u32,
    pub nets: Vec<Net>,
    pub tables: Vec<EmbeddingTable>,
    pub layers: Vec<DenseLayer>,
}

impl ModelSpec {
    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            model_id: self.model_id.clone(),
            default_batch_size: self.default_batch_size,
            nets: self.nets.clone(),
            tables: self.tables.iter().map(|t| t.meta.clone()).collect(),
            layers: self.layers.iter().map(|l| l.meta.clone()).collect(),
        }
    }

    pub fn table(&self, id: TableId) -> Option<&EmbeddingTable> {
        self.tables.iter().find(|t| t.meta.table_id == id)
    }

    pub fn layer(&self, id: LayerId) -> Option<&DenseLayer> {
        self.layers.iter().find(|l| l.meta.layer_id == id)
    }

    pub fn profiles(&self) -> Vec<TableProfile> {
        self.tables.iter().map(|t| t.meta.profile()).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.header().validate()?;
        for t in &self.tables {
            let expected = t.meta.num_rows as usize * t.meta.dim as usize;
            if t.values.len() != expected {
                return Err(ModelError::DimensionMismatch {
                    context: format!("table {} values", t.meta.table_id),
                    expected,
                    actual: t.values.len(),
                });
            }
        }
        for l in &self.layers {
            let w = l.meta.in_dim as usize * l.meta.out_dim as usize;
            if l.weight.len() != w || l.bias.len() != l.meta.out_dim as usize {
                return Err(ModelError::DimensionMismatch {
                    context: format!("layer {} parameters", l.meta.layer_id),
                    expected: w + l.meta.out_dim as usize,
                    actual: l.weight.len() + l.bias.len(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        generate_model(Archetype::LongTail, SizeBudget::mib(1), 3).unwrap()
    }

    #[test]
    fn partition_rows_cover_table() {
        for n in 1..40u64 {
            for p in 1..9u64 {
                let total: u64 = (0..p).map(|i| partition_rows(n, i, p)).sum();
                assert_eq!(total, n, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn partition_extracts_modulus_rows() {
        let meta = TableMeta {
            table_id: 0,
            net_id: 0,
            num_rows: 5,
            dim: 1,
            pooling: Pooling::Sum,
            est_pooling_factor: 1.0,
            lookups: LookupDist::Constant(1),
        };
        let t = EmbeddingTable::new(meta, vec![0., 1., 2., 3., 4.]).unwrap();
        assert_eq!(t.partition(0, 2).values, vec![0., 2., 4.]);
        assert_eq!(t.partition(1, 2).values, vec![1., 3.]);
    }

    #[test]
    fn dimension_mutations_fail_validation() {
        let spec = tiny();
        spec.validate().unwrap();

        let mut s = spec.clone();
        s.tables[0].meta.num_rows += 1;
        assert!(s.validate().is_err());

        let mut s = spec.clone();
        s.tables[1].meta.dim += 1;
        assert!(s.validate().is_err());

        for i in 0..spec.layers.len() {
            let mut s = spec.clone();
            s.layers[i].meta.in_dim += 1;
            assert!(s.validate().is_err(), "layer {i} in_dim");
            let mut s = spec.clone();
            s.layers[i].meta.out_dim += 1;
            assert!(s.validate().is_err(), "layer {i} out_dim");
        }

        let mut s = spec.clone();
        s.nets[0].dense_input_dim += 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn unknown_net_reference_is_rejected() {
        let mut h = tiny().header();
        h.tables[0].net_id = 77;
        assert!(matches!(h.validate(), Err(ModelError::Validation(_))));
    }

    #[test]
    fn lookup_dist_means() {
        assert_eq!(LookupDist::Constant(5).mean(), 5.0);
        let m = LookupDist::PowerLaw { alpha: 0.0, max: 3 }.mean();
        assert!((m - 2.0).abs() < 1e-12);
    }
}
