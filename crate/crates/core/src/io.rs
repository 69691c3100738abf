//! File helpers shared by the experiments and the CLI.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::network_model::{ModelFile, NetworkModel};

/// Reads and validates a model file.
pub fn load_model(path: &Path) -> Result<NetworkModel> {
    let text = fs::read_to_string(path)?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<NetworkModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    file.into_model()
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    write_json(path, &ModelFile::from(model))
}

/// Pretty JSON. `serde_json` prints floats in shortest round-trip form, so
/// every value keeps full precision.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// CSV number format: 10 significant digits.
pub fn csv_num(v: f64) -> String {
    format!("{v:.9e}")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}
