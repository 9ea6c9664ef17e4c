//! Correlation probe and channel/method sweeps.

mod probe;
mod sweep;

pub use probe::{probe_correlation, ProbeResult, DEFAULT_PROBE_LAYER};
pub use sweep::{run_sweep, write_sweep_csv, write_sweep_json, SweepMethod, SweepPlan, SweepRow};
