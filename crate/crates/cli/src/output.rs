use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// Writes `bytes` to `dir/name` through a temporary sibling and a rename, so
/// readers never observe a partial file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    let out_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Output { path, source }
    };
    fs::create_dir_all(dir).map_err(out_err(dir))?;
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(out_err(&tmp))?;
    file.write_all(bytes).map_err(out_err(&tmp))?;
    file.sync_all().map_err(out_err(&tmp))?;
    drop(file);
    fs::rename(&tmp, &target).map_err(out_err(&target))?;
    Ok(target)
}
