//! Headless experiments for blended-autonomy navigation: configuration
//! files, seeded closed-loop runs, channel sweeps and metrics tables.

pub mod config;
pub mod experiment;
pub mod metrics;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig};
pub use experiment::{run, run_to_dir, sweep, ExperimentError, Manifest};
pub use metrics::{summarize, MetricsError};
