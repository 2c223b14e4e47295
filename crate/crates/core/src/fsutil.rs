use std::fs;
use std::io;
use std::path::Path;

/// Writes `bytes` to a sibling temp file and renames it over `path`, so an
/// interrupted run never leaves a partial file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
