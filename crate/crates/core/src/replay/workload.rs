use std::collections::HashMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ReplayError;
use crate::model::{LookupDist, ModelHeader, NetRole, Pooling, TableId, TableMeta};
use crate::request::{Candidate, RankingRequest, SparseFeature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Next request only after the previous response.
    Serial,
    /// Sends on a fixed schedule regardless of responses.
    OpenLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountDist {
    Constant { value: u32 },
    Uniform { min: u32, max: u32 },
}

impl CountDist {
    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match *self {
            CountDist::Constant { value } => value,
            CountDist::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueDist {
    Uniform { min: f32, max: f32 },
}

impl ValueDist {
    fn sample(&self, rng: &mut impl Rng) -> f32 {
        match *self {
            ValueDist::Uniform { min, max } if max > min => rng.gen_range(min..max),
            ValueDist::Uniform { min, .. } => min,
        }
    }
}

/// Lookups-per-instance distribution for one table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LookupSpec {
    Constant { value: u32 },
    PowerLaw { alpha: f64, max: u32 },
}

impl From<LookupSpec> for LookupDist {
    fn from(s: LookupSpec) -> Self {
        match s {
            LookupSpec::Constant { value } => LookupDist::Constant(value),
            LookupSpec::PowerLaw { alpha, max } => LookupDist::PowerLaw { alpha, max },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableOverride {
    pub table: TableId,
    pub lookups: LookupSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub seed: u64,
    pub candidates: CountDist,
    pub dense: ValueDist,
    /// Applied to every table without an explicit override; when unset each
    /// table uses the distribution recorded in the model.
    #[serde(default)]
    pub default_lookups: Option<LookupSpec>,
    #[serde(default)]
    pub overrides: Vec<TableOverride>,
    pub mode: ReplayMode,
    #[serde(default)]
    pub target_qps: Option<f64>,
    #[serde(default)]
    pub requests: Option<usize>,
    #[serde(default)]
    pub duration_s: Option<f64>,
}

impl Default for WorkloadProfile {
    fn default() -> Self {
        WorkloadProfile {
            seed: 1,
            candidates: CountDist::Constant { value: 64 },
            dense: ValueDist::Uniform { min: -1.0, max: 1.0 },
            default_lookups: None,
            overrides: Vec::new(),
            mode: ReplayMode::Serial,
            target_qps: None,
            requests: Some(100),
            duration_s: None,
        }
    }
}

impl WorkloadProfile {
    pub fn from_toml(text: &str) -> Result<Self, ReplayError> {
        let p: WorkloadProfile = toml::from_str(text).map_err(|e| ReplayError::ProfileMismatch(e.to_string()))?;
        p.check_shape()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Requests to send: the explicit count, else rate × duration.
    pub fn request_count(&self) -> Option<usize> {
        self.requests.or_else(|| match (self.target_qps, self.duration_s) {
            (Some(q), Some(d)) => Some((q * d).round() as usize),
            _ => None,
        })
    }

    fn check_shape(&self) -> Result<(), ReplayError> {
        let bad = |m: String| Err(ReplayError::ProfileMismatch(m));
        match self.candidates {
            CountDist::Constant { value: 0 } => return bad("requests need at least one candidate".into()),
            CountDist::Uniform { min, max } if min == 0 || min > max => {
                return bad(format!("candidate range {min}..={max} is empty or admits zero"))
            }
            _ => {}
        }
        if self.mode == ReplayMode::OpenLoop && !self.target_qps.is_some_and(|q| q > 0.0) {
            return bad("open-loop mode needs target_qps > 0".into());
        }
        for spec in self.overrides.iter().map(|o| o.lookups).chain(self.default_lookups) {
            if let LookupSpec::PowerLaw { alpha, max } = spec {
                if max == 0 || !alpha.is_finite() {
                    return bad(format!("power-law lookups need max >= 1 and finite alpha, got {alpha}/{max}"));
                }
            }
        }
        Ok(())
    }

    /// Lookup distribution in force for a table.
    pub fn lookups_for(&self, table: &TableMeta) -> LookupDist {
        if let Pooling::Concat { width } = table.pooling {
            return LookupDist::Constant(width);
        }
        self.overrides
            .iter()
            .find(|o| o.table == table.table_id)
            .map(|o| o.lookups.into())
            .or(self.default_lookups.map(Into::into))
            .unwrap_or(table.lookups)
    }
}

enum Sampler {
    Constant(u32),
    Weighted(WeightedIndex<f64>),
}

impl Sampler {
    fn new(d: LookupDist) -> Self {
        match d {
            LookupDist::Constant(k) => Sampler::Constant(k),
            LookupDist::PowerLaw { alpha, max } => {
                let w: Vec<f64> = (1..=max.max(1)).map(|k| (k as f64).powf(-alpha)).collect();
                Sampler::Weighted(WeightedIndex::new(w).expect("positive weights"))
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match self {
            Sampler::Constant(k) => *k,
            Sampler::Weighted(w) => w.sample(rng) as u32 + 1,
        }
    }
}

/// Deterministic synthetic requests for a model. Request ids run `0..n`.
pub fn generate_requests(
    header: &ModelHeader,
    profile: &WorkloadProfile,
    n: usize,
) -> Result<Vec<RankingRequest>, ReplayError> {
    profile.check_shape()?;
    for o in &profile.overrides {
        let Some(t) = header.table(o.table) else {
            return Err(ReplayError::ProfileMismatch(format!("override for unknown table {}", o.table)));
        };
        if let Pooling::Concat { width } = t.pooling {
            if o.lookups != (LookupSpec::Constant { value: width }) {
                return Err(ReplayError::ProfileMismatch(format!(
                    "concat table {} takes exactly {width} lookups",
                    o.table
                )));
            }
        }
    }
    let samplers: HashMap<TableId, Sampler> =
        header.tables.iter().map(|t| (t.table_id, Sampler::new(profile.lookups_for(t)))).collect();
    let user = header.user_net();
    let cand = header.candidate_net();
    let user_dim = header.user_dense_dim();
    let cand_dim = header.candidate_dense_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);

    let features = |tables: &[TableId], rng: &mut ChaCha8Rng| -> Vec<SparseFeature> {
        tables
            .iter()
            .filter_map(|&tid| {
                let rows = header.table(tid).map(|t| t.num_rows).unwrap_or(0);
                let k = samplers[&tid].sample(rng);
                (k > 0 && rows > 0).then(|| SparseFeature {
                    table_id: tid,
                    indices: (0..k).map(|_| rng.gen_range(0..rows) as u32).collect(),
                })
            })
            .collect()
    };

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let n_cand = profile.candidates.sample(&mut rng) as usize;
        let user_dense = (0..user_dim).map(|_| profile.dense.sample(&mut rng)).collect();
        let user_sparse = features(&user.table_ids, &mut rng);
        let candidates = (0..n_cand)
            .map(|_| Candidate {
                dense: (0..cand_dim).map(|_| profile.dense.sample(&mut rng)).collect(),
                sparse: match cand {
                    Some(c) if c.role == NetRole::Candidate => features(&c.table_ids, &mut rng),
                    _ => Vec::new(),
                },
            })
            .collect();
        out.push(RankingRequest { request_id: i as u64, user_dense, user_sparse, candidates });
    }
    Ok(out)
}
