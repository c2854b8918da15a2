use std::fs;
use std::path::{Path, PathBuf};

use bift::config::ExperimentConfig;

/// Creates `<out>/<task>-<label>-<seed>-<timestamp>`, adding a numeric suffix
/// if two runs start within the same second, and echoes the resolved config
/// into it.
pub fn create(cfg: &ExperimentConfig, label: &str) -> std::io::Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{}-{label}-{}-{stamp}", cfg.data.task, cfg.train.seed);
    fs::create_dir_all(&cfg.out_dir)?;
    let mut dir = cfg.out_dir.join(&base);
    let mut n = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = cfg.out_dir.join(format!("{base}.{n}"));
                n += 1;
            }
            Err(e) => return Err(e),
        }
    }
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

pub fn subdir(dir: &Path, name: &str) -> std::io::Result<PathBuf> {
    let p = dir.join(name);
    fs::create_dir_all(&p)?;
    Ok(p)
}
