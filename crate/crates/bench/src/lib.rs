//! Shared fixtures for the benchmarks.

use fdm_core::{generate_dataset, Dataset, EodKind, SimulationConfig};

/// Simulated dataset of the given size, fixed seed.
pub fn dataset(n_units: usize, n_cycles: usize, model: EodKind) -> Dataset {
    let cfg = SimulationConfig {
        n_units,
        n_cycles,
        model,
        ..Default::default()
    };
    generate_dataset(&cfg, 0, 0).expect("simulated dataset").dataset
}
