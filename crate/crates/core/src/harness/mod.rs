//! Experiments and metrics: exact sequence KL, toy-Fréchet distance on
//! decoded images, surrogate and exposure-bias diagnostics, and parameter
//! sweeps that emit CSV rows and SVG line plots.

mod diagnostics;
mod metrics;
mod plot;
mod sweep;
mod verify;

pub use diagnostics::{exposure_gap, model_corpus, surrogate_gap, ExposureRow, SurrogateRow};
pub use metrics::{exact_kl, kl, toy_frechet, toy_frechet_images};
pub use plot::{line_plot, Series};
pub use sweep::{run_sweep, write_rows_csv, Experiment, Metric, MetricRow, SweepGrid, SweepResult, CSV_HEADER};
pub use verify::{run_verify, VerifyOutcome, VerifyRow, VerifySpec};
