//! Run directories and atomic file writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Default output root when neither `--out` nor `[output] dir` is given.
pub const OUT_DIR_ENV: &str = "SPARSEFED_OUT_DIR";

/// Output root: the flag, then the config, then the environment, then
/// `./runs`.
pub fn out_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<config hash>-s<seed>`.
pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("{}-s{}", cfg.hash(), cfg.seed))
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn flag_beats_config() {
        let cfg = crate::config::parse_config("[output]\ndir = \"fromcfg\"\n", &[]).unwrap();
        assert_eq!(out_root(Some(Path::new("flag")), &cfg), PathBuf::from("flag"));
        assert_eq!(out_root(None, &cfg), PathBuf::from("fromcfg"));
    }
}
