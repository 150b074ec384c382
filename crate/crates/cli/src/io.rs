use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lesionkit::Tensor;
use serde::de::DeserializeOwned;

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Tensor::from_tjson(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
