use std::path::{Path, PathBuf};

use gazerep::Error;

use crate::config::RunConfig;

pub const OUT_ENV: &str = "GAZEREP_OUT";

pub fn out_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<command>-<UTC timestamp>-<hash>` and writes the
/// resolved config into it as `config.toml`.
pub fn create(root: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{command}-{stamp}-{}", cfg.short_hash());
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{base}-{n}"));
    }
    std::fs::create_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}
