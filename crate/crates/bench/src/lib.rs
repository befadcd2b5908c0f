//! Fixtures shared by the benchmarks.

use bond_core::harness::{generate_scenario, Scenario, ScenarioParams};
use bond_core::Seed;

/// A `random` scenario with `prompts` prompts over `vocab_size^max_len` outcomes.
pub fn fixture(prompts: usize, vocab_size: usize, max_len: usize) -> Scenario {
    let params = ScenarioParams {
        prompts,
        vocab_size,
        max_len,
        ..Default::default()
    };
    generate_scenario("random", &params, Seed(11)).expect("valid fixture")
}
