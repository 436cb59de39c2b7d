//! Output helpers: CSV metadata headers and file writing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::Result;

/// SNR axis definition recorded in every CSV.
pub const SNR_DEFINITION: &str =
    "per-subcarrier echo SNR |alpha/r0^2|^2/sigma_w^2 at the aperture-centroid range r0";

/// `# key=value` lines written ahead of the CSV header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        let mut m = Self::default();
        m.push("config_hash", config_hash);
        m.push("seed", seed);
        m.push("snr_definition", SNR_DEFINITION);
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in &self.entries {
            writeln!(w, "# {k}={v}")?;
        }
        Ok(())
    }
}

/// Create `dir/name`, write the metadata block, then let `body` fill the rest.
pub fn write_csv_file<F>(dir: &Path, name: &str, meta: &Metadata, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    meta.write(&mut w)?;
    body(&mut w)?;
    w.flush()?;
    Ok(path)
}

/// Write raw bytes produced by `body` to `dir/name`.
pub fn write_file<F>(dir: &Path, name: &str, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    body(&mut w)?;
    w.flush()?;
    Ok(path)
}
