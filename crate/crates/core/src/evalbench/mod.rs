//! Metrics, cost/wall-time comparison harness and invariant probes.

mod bench;
mod cases;
mod compare;
pub mod metrics;
mod probe;
mod report;

pub use bench::{bench_compare, speedup, BenchReport, Speedup, Variant, VariantTiming, MIN_REPETITIONS, REFERENCE, VARIANTS};
pub use compare::{bootstrap_auc_delta, compare, compare_configs, CompareReport, VariantOutcome, BOOTSTRAP_RESAMPLES};
pub use probe::{gradcheck, probe, probe_typed, ProbeReport, GRADCHECK_STEP, GRADCHECK_TOLERANCE, PROBES};
pub use report::{MetricReport, TaskMetrics, SCHEMA_VERSION};
