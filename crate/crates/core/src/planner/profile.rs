use std::collections::HashMap;

use super::PlanError;
use crate::model::{ModelHeader, NetRole, TableId, TableProfile};
use crate::request::RankingRequest;

/// Requests sampled for pooling-factor estimation unless configured otherwise.
pub const DEFAULT_PROFILE_SAMPLE: usize = 1000;

/// Mean lookups per feature instance for every table over a request sample.
///
/// User-net tables have one instance per request; candidate-net tables have
/// one instance per candidate item.
pub fn estimate_pooling_factors(
    header: &ModelHeader,
    requests: &[RankingRequest],
) -> Result<Vec<TableProfile>, PlanError> {
    if requests.is_empty() {
        return Err(PlanError::EmptySample);
    }
    let mut lookups: HashMap<TableId, u64> = HashMap::new();
    let mut items = 0u64;
    for r in requests {
        for f in &r.user_sparse {
            *lookups.entry(f.table_id).or_default() += f.indices.len() as u64;
        }
        for c in &r.candidates {
            items += 1;
            for f in &c.sparse {
                *lookups.entry(f.table_id).or_default() += f.indices.len() as u64;
            }
        }
    }
    let n_requests = requests.len() as u64;
    Ok(header
        .tables
        .iter()
        .map(|t| {
            let role = header.net(t.net_id).map(|n| n.role).unwrap_or(NetRole::User);
            let instances = match role {
                NetRole::User => n_requests,
                NetRole::Candidate => items,
            };
            let total = lookups.get(&t.table_id).copied().unwrap_or(0);
            TableProfile {
                table_id: t.table_id,
                est_pooling_factor: if instances == 0 { 0.0 } else { total as f64 / instances as f64 },
                size_bytes: t.size_bytes(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::test_support::header_with_sizes;
    use crate::request::{Candidate, SparseFeature};

    fn req(id: u64, user: Vec<SparseFeature>, cands: Vec<Vec<SparseFeature>>) -> RankingRequest {
        RankingRequest {
            request_id: id,
            user_dense: vec![],
            user_sparse: user,
            candidates: cands.into_iter().map(|sparse| Candidate { dense: vec![], sparse }).collect(),
        }
    }

    #[test]
    fn constant_lookups_and_absent_table() {
        // net0 (user): tables 0,1; net1 (candidate): tables 2,3.
        let h = header_with_sizes(&[&[4, 4], &[4, 4]]);
        let f = |t, n| SparseFeature { table_id: t, indices: vec![0; n] };
        let sample: Vec<RankingRequest> = (0..10)
            .map(|i| req(i, vec![f(0, 2)], (0..3).map(|_| vec![f(3, 5)]).collect()))
            .collect();
        let p = estimate_pooling_factors(&h, &sample).unwrap();
        assert_eq!(p[0].est_pooling_factor, 2.0);
        assert_eq!(p[1].est_pooling_factor, 0.0);
        assert_eq!(p[2].est_pooling_factor, 0.0);
        assert_eq!(p[3].est_pooling_factor, 5.0);
    }

    #[test]
    fn empty_sample_rejected() {
        let h = header_with_sizes(&[&[4]]);
        assert!(matches!(estimate_pooling_factors(&h, &[]), Err(PlanError::EmptySample)));
    }
}
