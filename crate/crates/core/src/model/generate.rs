//! Seeded synthetic model generators.
//!
//! Three archetypes: `LongTail` (two nets, many tables with a heavy-tailed
//! size distribution and sizeable pooling factors), `LongTailSmall` (the
//! same shape with fewer, narrower tables and lighter lookups) and
//! `SingleDominant` (one net where a single table with pooling factor 1
//! holds most of the bytes).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Activation, DenseLayer, EmbeddingTable, LayerId, LayerMeta, LookupDist, ModelError,
    ModelSpec, Net, NetId, NetRole, Pooling, TableMeta, MIB,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    LongTail,
    LongTailSmall,
    SingleDominant,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [
        Archetype::LongTail,
        Archetype::LongTailSmall,
        Archetype::SingleDominant,
    ];
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Archetype::LongTail => "long_tail",
            Archetype::LongTailSmall => "long_tail_small",
            Archetype::SingleDominant => "single_dominant",
        })
    }
}

impl FromStr for Archetype {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "long_tail" => Ok(Archetype::LongTail),
            "long_tail_small" => Ok(Archetype::LongTailSmall),
            "single_dominant" => Ok(Archetype::SingleDominant),
            other => Err(format!("unknown archetype `{other}`")),
        }
    }
}

/// Total model size target in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeBudget {
    pub total_bytes: u64,
}

impl SizeBudget {
    pub fn mib(m: u64) -> Self {
        Self { total_bytes: m * MIB }
    }
}

struct Shape {
    tables: usize,
    emb_dim: u32,
    dense_in: u32,
    bottom_hidden: u32,
    user_out: u32,
    max_lookups: (u32, u32),
    alpha: (f64, f64),
}

fn shape(archetype: Archetype, budget: u64) -> Shape {
    let large = budget >= 8 * MIB;
    match archetype {
        Archetype::LongTail => Shape {
            tables: if large { 56 } else { 32 },
            emb_dim: if large { 32 } else { 16 },
            dense_in: if large { 16 } else { 8 },
            bottom_hidden: if large { 64 } else { 16 },
            user_out: if large { 16 } else { 8 },
            max_lookups: (16, 128),
            alpha: (0.6, 1.4),
        },
        Archetype::LongTailSmall => Shape {
            tables: if large { 28 } else { 16 },
            emb_dim: 16,
            dense_in: 8,
            bottom_hidden: 16,
            user_out: 8,
            max_lookups: (4, 32),
            alpha: (1.0, 2.0),
        },
        Archetype::SingleDominant => Shape {
            tables: 39,
            emb_dim: if large { 32 } else { 16 },
            dense_in: if large { 16 } else { 8 },
            bottom_hidden: if large { 64 } else { 16 },
            user_out: 0,
            max_lookups: (4, 24),
            alpha: (1.0, 2.0),
        },
    }
}

/// Generate a synthetic model. Deterministic in `(archetype, budget, seed)`.
pub fn generate_model(
    archetype: Archetype,
    budget: SizeBudget,
    seed: u64,
) -> Result<ModelSpec, ModelError> {
    if budget.total_bytes < MIB {
        return Err(ModelError::BudgetTooSmall { budget: budget.total_bytes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7ab1e5);
    let sh = shape(archetype, budget.total_bytes);
    let two_nets = archetype != Archetype::SingleDominant;

    // Table-to-net wiring: roughly 40% of tables on the user net.
    let n_user = if two_nets { (sh.tables * 2) / 5 } else { sh.tables };
    let dominant = (!two_nets).then(|| rng.gen_range(0..sh.tables));

    let mut lookups = Vec::with_capacity(sh.tables);
    for t in 0..sh.tables {
        if Some(t) == dominant {
            lookups.push(LookupDist::Constant(1));
        } else {
            let alpha = rng.gen_range(sh.alpha.0..sh.alpha.1);
            let max = rng.gen_range(sh.max_lookups.0..=sh.max_lookups.1);
            lookups.push(LookupDist::PowerLaw { alpha, max });
        }
    }

    let pooled = |range: std::ops::Range<usize>| range.len() as u32 * sh.emb_dim;
    let dense_budget = budget.total_bytes / 50;

    // Layer plan per net: (net, role, dense_in, interaction_in, final_out).
    let mut layers: Vec<DenseLayer> = Vec::new();
    let mut nets: Vec<Net> = Vec::new();
    let mut next_layer: LayerId = 0;

    let mut plan_net = |rng: &mut ChaCha8Rng,
                        layers: &mut Vec<DenseLayer>,
                        net_id: NetId,
                        role: NetRole,
                        tables: std::ops::Range<usize>,
                        extra_in: u32,
                        out: u32,
                        out_act: Activation,
                        hidden: u32|
     -> Net {
        let mut mk = |in_dim: u32, out_dim: u32, act: Activation| -> LayerId {
            let id = next_layer;
            next_layer += 1;
            layers.push(init_layer(rng, id, net_id, in_dim, out_dim, act));
            id
        };
        let b0 = mk(sh.dense_in, sh.bottom_hidden, Activation::Relu);
        let b1 = mk(sh.bottom_hidden, sh.dense_in, Activation::Relu);
        let inter_in = sh.dense_in + pooled(tables.clone()) + extra_in;
        let i0 = mk(inter_in, hidden, Activation::Relu);
        let t0 = mk(hidden, out, out_act);
        Net {
            net_id,
            role,
            dense_input_dim: sh.dense_in,
            table_ids: tables.map(|t| t as u32).collect(),
            bottom_layers: vec![b0, b1],
            interaction_layers: vec![i0],
            top_layers: vec![t0],
        }
    };

    let fixed_params = |n_nets: u64| -> u64 {
        let b = sh.dense_in as u64 * sh.bottom_hidden as u64 * 2 + sh.bottom_hidden as u64 + sh.dense_in as u64;
        n_nets * b
    };
    let inter_widths: u64 = if two_nets {
        (sh.dense_in + pooled(0..n_user)) as u64
            + (sh.dense_in + pooled(n_user..sh.tables) + sh.user_out) as u64
    } else {
        (sh.dense_in + pooled(0..sh.tables)) as u64
    };
    let n_nets = if two_nets { 2 } else { 1 };
    let spare = (dense_budget / 4).saturating_sub(fixed_params(n_nets));
    let hidden = (spare / (inter_widths + 2 * sh.user_out as u64 + 2)).clamp(4, 256) as u32;

    if two_nets {
        nets.push(plan_net(&mut rng, &mut layers, 0, NetRole::User, 0..n_user, 0, sh.user_out, Activation::Relu, hidden));
        nets.push(plan_net(
            &mut rng,
            &mut layers,
            1,
            NetRole::Candidate,
            n_user..sh.tables,
            sh.user_out,
            1,
            Activation::Sigmoid,
            hidden,
        ));
    } else {
        nets.push(plan_net(&mut rng, &mut layers, 0, NetRole::User, 0..sh.tables, 0, 1, Activation::Sigmoid, hidden));
    }

    let dense_bytes: u64 = layers.iter().map(|l| l.meta.param_count() * 4).sum();
    let sparse_budget = budget.total_bytes - dense_bytes;

    // Heavy-tailed (Pareto) relative sizes; the dominant table takes a fixed share.
    let mut weights: Vec<f64> = (0..sh.tables)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-6..1.0);
            u.powf(-1.0 / 1.1).min(400.0)
        })
        .collect();
    if let Some(d) = dominant {
        let share = rng.gen_range(0.89..0.93);
        let rest: f64 = weights.iter().enumerate().filter(|(i, _)| *i != d).map(|(_, w)| w).sum();
        weights[d] = rest * share / (1.0 - share);
    }
    let wsum: f64 = weights.iter().sum();

    let mut tables = Vec::with_capacity(sh.tables);
    for (t, w) in weights.iter().enumerate() {
        let bytes = (sparse_budget as f64 * w / wsum).floor() as u64;
        let num_rows = (bytes / (sh.emb_dim as u64 * 4)).max(1);
        let net_id = if t < n_user { 0 } else { 1 };
        let meta = TableMeta {
            table_id: t as u32,
            net_id,
            num_rows,
            dim: sh.emb_dim,
            pooling: Pooling::Sum,
            est_pooling_factor: lookups[t].mean(),
            lookups: lookups[t],
        };
        let mut trng = ChaCha8Rng::seed_from_u64(rng.gen());
        let n = num_rows as usize * sh.emb_dim as usize;
        let values: Vec<f32> = (0..n)
            .map(|_| (trng.gen::<u32>() >> 8) as f32 * (0.1 / (1u32 << 24) as f32) - 0.05)
            .collect();
        tables.push(EmbeddingTable { meta, values });
    }

    let spec = ModelSpec {
        model_id: format!("{archetype}-{}b-s{seed}", budget.total_bytes),
        default_batch_size: 32,
        nets,
        tables,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

fn init_layer(
    rng: &mut ChaCha8Rng,
    layer_id: LayerId,
    net_id: NetId,
    in_dim: u32,
    out_dim: u32,
    activation: Activation,
) -> DenseLayer {
    let s = (6.0 / (in_dim + out_dim) as f32).sqrt();
    let weight = (0..in_dim as usize * out_dim as usize)
        .map(|_| rng.gen_range(-s..s))
        .collect();
    let bias = (0..out_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
    DenseLayer {
        meta: LayerMeta { layer_id, net_id, in_dim, out_dim, activation },
        weight,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_too_small() {
        assert!(matches!(
            generate_model(Archetype::LongTail, SizeBudget { total_bytes: MIB - 1 }, 1),
            Err(ModelError::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn single_dominant_has_pooling_factor_one_giant() {
        let spec = generate_model(Archetype::SingleDominant, SizeBudget::mib(100), 7).unwrap();
        assert_eq!(spec.nets.len(), 1);
        let h = spec.header();
        let big = h.tables.iter().max_by_key(|t| t.size_bytes()).unwrap();
        assert!(big.size_bytes() >= 85 * MIB, "largest {}", big.size_bytes());
        assert_eq!(big.profile().est_pooling_factor, 1.0);
    }

    #[test]
    fn long_tail_is_deterministic_and_sparse_dominated() {
        let a = generate_model(Archetype::LongTail, SizeBudget::mib(100), 7).unwrap();
        let b = generate_model(Archetype::LongTail, SizeBudget::mib(100), 7).unwrap();
        assert!(a == b);
        let h = a.header();
        assert_eq!(h.nets.len(), 2);
        assert!(h.sparse_bytes() as f64 >= 0.97 * h.total_bytes() as f64);
        assert!(h.total_bytes() <= 100 * MIB);
    }

    #[test]
    fn all_archetypes_validate_and_are_sparse_dominated() {
        for arch in Archetype::ALL {
            for mib in [1, 3, 9] {
                let spec = generate_model(arch, SizeBudget::mib(mib), 11).unwrap();
                let h = spec.header();
                h.validate().unwrap();
                let ratio = h.sparse_bytes() as f64 / h.total_bytes() as f64;
                assert!(ratio >= 0.97, "{arch} {mib} MiB ratio {ratio}");
                for l in &h.layers {
                    assert!(l.out_dim <= 512);
                }
            }
        }
    }

    #[test]
    fn long_tail_sizes_are_heavy_tailed() {
        let spec = generate_model(Archetype::LongTail, SizeBudget::mib(32), 5).unwrap();
        let mut sizes: Vec<u64> = spec.tables.iter().map(|t| t.meta.size_bytes()).collect();
        sizes.sort_unstable();
        let median = sizes[sizes.len() / 2];
        assert!(*sizes.last().unwrap() > 5 * median);
    }
}
