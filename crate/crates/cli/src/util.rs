//! Small file helpers shared by the subcommands.

use std::path::Path;

use crate::error::Result;

/// Write-temp-then-rename so partially written artifacts never appear
/// under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = Path::new(&tmp);
    std::fs::write(tmp_path, bytes)?;
    std::fs::rename(tmp_path, path)?;
    Ok(())
}
