use std::path::{Path, PathBuf};

use rta_core::RtaError;

use crate::{CliError, RunConfig, Verb};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// `{out_root}/{verb}-{UTC timestamp}-{hash}`, with `-1`, `-2`, ... appended
/// when two runs start in the same second. Writes the resolved config into it.
pub fn create_run_dir(cfg: &RunConfig, verb: Verb) -> Result<PathBuf, CliError> {
    let root = &cfg.run.out_root;
    std::fs::create_dir_all(root).map_err(|e| RtaError::io(root, e))?;
    let stem = format!("{}-{}-{}", verb.name(), chrono::Utc::now().format("%Y%m%dT%H%M%SZ"), cfg.hash());
    let mut dir = root.join(&stem);
    let mut n = 0;
    loop {
        match std::fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                n += 1;
                dir = root.join(format!("{stem}-{n}"));
            }
            Err(e) => return Err(RtaError::io(&dir, e).into()),
        }
    }
    let snap = dir.join(RESOLVED_CONFIG);
    std::fs::write(&snap, cfg.to_toml()).map_err(|e| RtaError::io(&snap, e))?;
    Ok(dir)
}

/// Most recent `{verb}-*-{hash}` directory under `root` that holds `marker`.
/// Timestamps sort lexically, collision suffixes after their base name.
pub fn latest_run_dir(root: &Path, verb: Verb, hash: &str, marker: &str) -> Option<PathBuf> {
    let prefix = format!("{}-", verb.name());
    let tag = format!("-{hash}");
    let mut found: Vec<(String, usize, PathBuf)> = std::fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let rest = name.strip_prefix(&prefix)?;
            let (stamp, after) = rest.split_once(&tag)?;
            let suffix = match after {
                "" => 0,
                s => s.strip_prefix('-')?.parse().ok()?,
            };
            e.path().join(marker).exists().then(|| (stamp.to_string(), suffix, e.path()))
        })
        .collect();
    found.sort();
    found.pop().map(|(_, _, p)| p)
}
