//! Client-facing ranking request.

use std::collections::HashSet;

use crate::model::{ModelHeader, NetRole, TableId};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeature {
    pub table_id: TableId,
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub dense: Vec<f32>,
    pub sparse: Vec<SparseFeature>,
}

/// One ranking request: request-level (user) features plus the candidate
/// items to score. User-net tables are looked up from `user_sparse`,
/// candidate-net tables from each candidate's `sparse`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingRequest {
    pub request_id: u64,
    pub user_dense: Vec<f32>,
    pub user_sparse: Vec<SparseFeature>,
    pub candidates: Vec<Candidate>,
}

impl RankingRequest {
    pub fn total_lookups(&self) -> usize {
        let user: usize = self.user_sparse.iter().map(|f| f.indices.len()).sum();
        let cand: usize = self
            .candidates
            .iter()
            .flat_map(|c| &c.sparse)
            .map(|f| f.indices.len())
            .sum();
        user + cand
    }

    /// Structural check against a model. Returns a human-readable reason.
    pub fn validate(&self, header: &ModelHeader) -> Result<(), String> {
        if self.candidates.is_empty() {
            return Err("request has no candidates".into());
        }
        if self.user_dense.len() != header.user_dense_dim() {
            return Err(format!(
                "user dense width {} does not match model ({})",
                self.user_dense.len(),
                header.user_dense_dim()
            ));
        }
        let user_net = header.user_net();
        check_features(header, &self.user_sparse, user_net.net_id, "user")?;
        let cand_dim = header.candidate_dense_dim();
        let cand_net = header.candidate_net();
        for (i, c) in self.candidates.iter().enumerate() {
            if c.dense.len() != cand_dim {
                return Err(format!("candidate {i} dense width {} does not match model ({cand_dim})", c.dense.len()));
            }
            match cand_net {
                Some(net) => check_features(header, &c.sparse, net.net_id, "candidate")?,
                None if !c.sparse.is_empty() => {
                    return Err(format!("candidate {i} carries sparse features but the model has no candidate net"))
                }
                None => {}
            }
        }
        Ok(())
    }
}

fn check_features(
    header: &ModelHeader,
    features: &[SparseFeature],
    net_id: u32,
    what: &str,
) -> Result<(), String> {
    let mut seen = HashSet::new();
    for f in features {
        let Some(t) = header.table(f.table_id) else {
            return Err(format!("{what} feature references unknown table {}", f.table_id));
        };
        if t.net_id != net_id {
            return Err(format!("{what} feature references table {} of net {}", f.table_id, t.net_id));
        }
        if !seen.insert(f.table_id) {
            return Err(format!("{what} features list table {} twice", f.table_id));
        }
        if let Some(&ix) = f.indices.iter().find(|&&ix| ix as u64 >= t.num_rows) {
            return Err(format!("index {ix} out of range for table {} ({} rows)", t.table_id, t.num_rows));
        }
    }
    Ok(())
}

/// Which feature scope feeds a net's tables.
pub fn net_scope(role: NetRole) -> &'static str {
    match role {
        NetRole::User => "request",
        NetRole::Candidate => "item",
    }
}
