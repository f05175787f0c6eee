use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::params::Params;
use crate::{commands, CliError};

/// Bookkeeping for one run: resolved parameters and emitted files.
pub struct RunManifest {
    pub subcommand: &'static str,
    pub out: PathBuf,
    params: Vec<(String, String)>,
    artifacts: Vec<PathBuf>,
    started: Instant,
}

impl RunManifest {
    pub fn start(subcommand: &'static str, params: &impl Params, out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)?;
        Ok(Self {
            subcommand,
            out: out.to_path_buf(),
            params: params.pairs(),
            artifacts: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Path of an artifact inside the output directory, recorded for hashing.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.clone());
        p
    }

    pub fn finish(self) -> Result<(), CliError> {
        let mut pairs = vec![("subcommand".to_string(), self.subcommand.to_string())];
        pairs.extend(self.params);
        pairs.push((
            "duration_s".into(),
            format!("{:.3}", self.started.elapsed().as_secs_f64()),
        ));
        for a in &self.artifacts {
            let name = a.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            pairs.push((format!("sha256:{name}"), sha256_file(a)?));
        }
        dynshare::io::write_key_values(&self.out.join("manifest.txt"), &pairs)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reruns a recorded run; with `verify`, every artifact hash must match.
pub fn replay(path: &Path, out: Option<&Path>, verify: bool) -> Result<(), CliError> {
    let mut pairs = dynshare::io::read_key_values(path)?;
    let sub = pairs
        .iter()
        .find(|(k, _)| k == "subcommand")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| CliError::Usage(format!("{} has no subcommand entry", path.display())))?;
    let expected: Vec<(String, String)> = pairs
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("sha256:").map(|n| (n.to_string(), v.clone())))
        .collect();
    if let Some(dir) = out {
        pairs.retain(|(k, _)| k != "out");
        pairs.push(("out".into(), dir.display().to_string()));
    }
    let out_dir = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "out")
        .map(|(_, v)| PathBuf::from(v))
        .ok_or_else(|| CliError::Usage("manifest has no out entry".into()))?;

    commands::run_named(&sub, &pairs)?;

    if verify {
        let mut bad = Vec::new();
        for (name, hash) in &expected {
            let got = sha256_file(&out_dir.join(name))?;
            if &got != hash {
                bad.push(name.clone());
            }
        }
        if !bad.is_empty() {
            return Err(CliError::Tolerance(format!("replayed artifacts differ: {}", bad.join(", "))));
        }
        println!("replay verified: {} artifacts match", expected.len());
    }
    Ok(())
}
