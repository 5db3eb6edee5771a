//! Verification, snapshots, configuration and CSV export.

pub mod bank;
pub mod config;
pub mod snapshot;
pub mod verify;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use bank::{TestBank, TimeWindow, DEFAULT_KMAX};
pub use config::Config;
pub use snapshot::Snapshot;
pub use verify::{
    comp_subsolution_residuals, incomp_subsolution_residuals, verify_energy, verify_weak,
    weak_residuals, CertBudget, EnergyReport, VerifyReport, WeakFields,
};

/// Writes a CSV table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        let line: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}
