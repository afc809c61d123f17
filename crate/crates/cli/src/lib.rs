//! Library side of the `casc` command line tool.

pub mod commands;
pub mod config;
pub mod dataset;

use anyhow::{Context, Result};

pub const THREADS_ENV: &str = "CASC_THREADS";

/// Sizes the global rayon pool from `CASC_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        anyhow::bail!("{THREADS_ENV} must be a positive integer, got 0");
    }
    // a second call within one process keeps the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
