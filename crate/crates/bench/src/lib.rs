//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treesr_core::targets::find_target;
use treesr_core::{
    build_architecture, init_params, make_dataset, ArchitectureSpec, Dataset, Family, GridSpec, InitStrategy,
    ParamVector,
};

pub struct Fixture {
    pub spec: ArchitectureSpec,
    pub data: Dataset,
    pub params: ParamVector,
}

/// Depth-3 architecture, default grid dataset and a seeded random init.
pub fn fixture(family: Family, target: &str) -> Fixture {
    let target = find_target(target).expect("catalog target");
    let spec = build_architecture(family, 3, target.operator).expect("valid depth");
    let data = make_dataset(&target, GridSpec::default()).expect("usable target");
    let params = init_params(&spec, InitStrategy::GaussSmall, &mut ChaCha8Rng::seed_from_u64(1));
    Fixture { spec, data, params }
}
