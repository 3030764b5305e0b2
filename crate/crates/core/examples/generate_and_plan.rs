//! Generate a synthetic model and shard it every way the planner knows.

use shardrec::model::{generate_model, Archetype, SizeBudget};
use shardrec::planner::{plan, render_plan, validate_plan, PlanOptions, Strategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(8), 7)?;
    let h = spec.header();
    let profiles = spec.profiles();
    println!("{}: {} tables, {} nets", h.model_id, h.tables.len(), h.nets.len());

    for s in [Strategy::CapacityBalanced, Strategy::LoadBalanced, Strategy::Nsbp] {
        let p = plan(&h, &profiles, s, 4, PlanOptions::default())?;
        assert!(validate_plan(&h, &p).violations.is_empty());
        let bytes = p.shard_bytes(&h);
        println!("{s:>18}: {} rpc ops, shard bytes {bytes:?}", p.rpc_ops.len());
    }

    let p = plan(&h, &profiles, Strategy::Nsbp, 2, PlanOptions::default())?;
    print!("{}", render_plan(&p));
    Ok(())
}
