use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroUsize;
use std::ops::Range;
use std::str::FromStr;

use crate::model::TableId;
use crate::request::RankingRequest;

/// Candidates per batch, or the whole request as one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Fixed(NonZeroUsize),
    Single,
}

impl BatchSize {
    /// Panics on zero.
    pub fn fixed(n: usize) -> Self {
        BatchSize::Fixed(NonZeroUsize::new(n).expect("batch size must be at least 1"))
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Fixed(n) => write!(f, "{n}"),
            BatchSize::Single => f.write_str("single"),
        }
    }
}

impl FromStr for BatchSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "inf" => Ok(BatchSize::Single),
            n => n
                .parse::<usize>()
                .ok()
                .and_then(NonZeroUsize::new)
                .map(BatchSize::Fixed)
                .ok_or_else(|| format!("batch size must be a positive integer or `single`, got `{s}`")),
        }
    }
}

/// Lookups of one table for a batch, flattened. `lengths[i]` is the lookup
/// count of instance `i`: one instance for request-level features, one per
/// item for item-level features.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchFeature {
    pub table_id: TableId,
    pub lengths: Vec<u32>,
    pub indices: Vec<u32>,
}

impl BatchFeature {
    pub fn instances(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Index slices per instance.
    pub fn per_instance(&self) -> impl Iterator<Item = &[u32]> {
        let mut at = 0usize;
        self.lengths.iter().map(move |&n| {
            let s = &self.indices[at..at + n as usize];
            at += n as usize;
            s
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_index: u32,
    pub items: Range<usize>,
    /// Sorted by table id.
    pub features: Vec<BatchFeature>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature(&self, table: TableId) -> Option<&BatchFeature> {
        self.features.iter().find(|f| f.table_id == table)
    }
}

/// Partition a request's candidates into contiguous batches, preserving
/// order. Request-level features are repeated in every batch.
pub fn split_batches(request: &RankingRequest, batch_size: BatchSize) -> Vec<Batch> {
    let n = request.candidates.len();
    let size = match batch_size {
        BatchSize::Fixed(s) => s.get(),
        BatchSize::Single => n.max(1),
    };
    let user: Vec<BatchFeature> = request
        .user_sparse
        .iter()
        .map(|f| BatchFeature { table_id: f.table_id, lengths: vec![f.indices.len() as u32], indices: f.indices.clone() })
        .collect();
    (0..n.div_ceil(size))
        .map(|b| {
            let items = b * size..((b + 1) * size).min(n);
            let mut per_table: BTreeMap<TableId, BatchFeature> = BTreeMap::new();
            for (slot, c) in request.candidates[items.clone()].iter().enumerate() {
                for f in &c.sparse {
                    let e = per_table.entry(f.table_id).or_insert_with(|| BatchFeature {
                        table_id: f.table_id,
                        lengths: vec![0; items.len()],
                        indices: Vec::new(),
                    });
                    e.lengths[slot] = f.indices.len() as u32;
                }
            }
            // Indices are appended in item order so each instance's slice is
            // contiguous.
            for (id, feat) in per_table.iter_mut() {
                for c in &request.candidates[items.clone()] {
                    if let Some(f) = c.sparse.iter().find(|f| f.table_id == *id) {
                        feat.indices.extend_from_slice(&f.indices);
                    }
                }
            }
            let mut features = user.clone();
            features.extend(per_table.into_values());
            features.sort_by_key(|f| f.table_id);
            Batch { batch_index: b as u32, items, features }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::{Candidate, SparseFeature};

    fn request(n: usize) -> RankingRequest {
        RankingRequest {
            request_id: 1,
            user_dense: vec![],
            user_sparse: vec![SparseFeature { table_id: 0, indices: vec![3, 4] }],
            candidates: (0..n)
                .map(|i| Candidate {
                    dense: vec![i as f32],
                    sparse: if i % 3 == 0 {
                        vec![]
                    } else {
                        vec![SparseFeature { table_id: 1, indices: (0..i as u32 % 4).collect() }]
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn sizes_and_order() {
        let r = request(100);
        let b = split_batches(&r, BatchSize::fixed(32));
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
        let joined: Vec<usize> = b.iter().flat_map(|b| b.items.clone()).collect();
        assert_eq!(joined, (0..100).collect::<Vec<_>>());
        assert_eq!(split_batches(&request(5), BatchSize::Single).len(), 1);
    }

    #[test]
    fn lengths_match_indices() {
        let r = request(10);
        for b in split_batches(&r, BatchSize::fixed(4)) {
            let user = b.feature(0).unwrap();
            assert_eq!(user.lengths, vec![2]);
            let item = b.feature(1).unwrap();
            assert_eq!(item.instances(), b.len());
            assert_eq!(item.lengths.iter().sum::<u32>() as usize, item.indices.len());
            for (slot, (got, i)) in item.per_instance().zip(b.items.clone()).enumerate() {
                let want: Vec<u32> = r.candidates[i].sparse.first().map(|f| f.indices.clone()).unwrap_or_default();
                assert_eq!(got, want.as_slice(), "slot {slot}");
            }
        }
    }

    #[test]
    fn parse_batch_size() {
        assert_eq!("single".parse::<BatchSize>().unwrap(), BatchSize::Single);
        assert_eq!("8".parse::<BatchSize>().unwrap(), BatchSize::fixed(8));
        assert!("0".parse::<BatchSize>().is_err());
    }
}
