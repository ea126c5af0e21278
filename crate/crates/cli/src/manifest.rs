//! Stage manifests: which configuration produced which outputs.
//!
//! Each stage records `<base>/.nowcast/<stage>.json` with a fingerprint (hash
//! of the config sections it depends on plus its inputs' digests) and the
//! SHA-256 of every output. A manifest is written as `complete: false` before
//! the stage runs, so an interrupted run is recognized as ours on rerun.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    /// Relative to the workspace base when possible.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub fingerprint: String,
    pub config_hash: String,
    pub complete: bool,
    pub outputs: Vec<OutputDigest>,
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of labeled parts, each length-prefixed so boundaries cannot shift.
pub fn fingerprint(parts: &[(&str, &str)]) -> String {
    let mut h = Sha256::new();
    for (label, value) in parts {
        for s in [label, value] {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheDecision {
    /// Outputs exist, match the manifest and were made by this fingerprint.
    UpToDate(Manifest),
    Run,
}

pub struct Workspace {
    pub base: PathBuf,
    pub force: bool,
}

impl Workspace {
    pub fn new(base: PathBuf, force: bool) -> Self {
        Workspace { base, force }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.base.join(".nowcast").join(format!("{stage}.json"))
    }

    pub fn load(&self, stage: &str) -> CliResult<Option<Manifest>> {
        let path = self.manifest_path(stage);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| CliError::Config(format!("corrupt manifest {}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// The completed manifest of an upstream stage, or a data error naming the
    /// command that produces it.
    pub fn require(&self, stage: &'static str) -> CliResult<Manifest> {
        match self.load(stage)? {
            Some(m) if m.complete => Ok(m),
            _ => Err(CliError::Core(nowcast_core::NowcastError::Data(format!(
                "no completed `{stage}` outputs under {}; run `nowcast {stage}` first",
                self.base.display()
            )))),
        }
    }

    fn outputs_intact(&self, m: &Manifest) -> bool {
        m.outputs
            .iter()
            .all(|o| file_digest(&self.resolve(&o.path)).is_ok_and(|d| d == o.sha256))
    }

    /// Decides whether `stage` must run. `existing` lists outputs whose
    /// presence without a manifest means someone else's results would be
    /// overwritten.
    pub fn decide(
        &self,
        stage: &'static str,
        fingerprint: &str,
        guard_dir: &Path,
        existing: &[PathBuf],
    ) -> CliResult<CacheDecision> {
        if self.force {
            return Ok(CacheDecision::Run);
        }
        match self.load(stage)? {
            Some(m) if m.fingerprint == fingerprint => {
                if m.complete && self.outputs_intact(&m) {
                    Ok(CacheDecision::UpToDate(m))
                } else {
                    Ok(CacheDecision::Run)
                }
            }
            Some(m) => Err(CliError::Stale {
                stage,
                dir: guard_dir.to_path_buf(),
                recorded: m.fingerprint[..16].to_string(),
                current: fingerprint[..16].to_string(),
            }),
            None if existing.iter().any(|p| p.exists()) => Err(CliError::Stale {
                stage,
                dir: guard_dir.to_path_buf(),
                recorded: "unknown".into(),
                current: fingerprint[..16].to_string(),
            }),
            None => Ok(CacheDecision::Run),
        }
    }

    fn write(&self, m: &Manifest) -> CliResult<()> {
        let path = self.manifest_path(&m.stage);
        fs::create_dir_all(path.parent().expect("manifest has a parent"))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(m).expect("manifest serializes"))?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn begin(&self, stage: &str, fingerprint: &str, config_hash: &str) -> CliResult<()> {
        self.write(&Manifest {
            stage: stage.into(),
            fingerprint: fingerprint.into(),
            config_hash: config_hash.into(),
            complete: false,
            outputs: Vec::new(),
        })
    }

    pub fn finish(&self, stage: &str, fingerprint: &str, config_hash: &str, outputs: &[PathBuf]) -> CliResult<Manifest> {
        let mut digests = Vec::with_capacity(outputs.len());
        for p in outputs {
            let rel = p.strip_prefix(&self.base).unwrap_or(p).to_path_buf();
            digests.push(OutputDigest {
                path: rel,
                sha256: file_digest(p)?,
            });
        }
        let m = Manifest {
            stage: stage.into(),
            fingerprint: fingerprint.into(),
            config_hash: config_hash.into(),
            complete: true,
            outputs: digests,
        };
        self.write(&m)?;
        Ok(m)
    }
}

impl Manifest {
    /// Output digests in a stable text form, for downstream fingerprints.
    pub fn digest_list(&self) -> String {
        self.outputs
            .iter()
            .map(|o| format!("{} {}\n", o.sha256, o.path.display()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decisions_follow_fingerprint_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path().to_path_buf(), false);
        let out = dir.path().join("a.txt");
        let fp = fingerprint(&[("x", "1")]);
        assert_eq!(ws.decide("synth", &fp, dir.path(), std::slice::from_ref(&out)).unwrap(), CacheDecision::Run);

        fs::write(&out, "hello").unwrap();
        assert!(matches!(ws.decide("synth", &fp, dir.path(), std::slice::from_ref(&out)), Err(CliError::Stale { .. })));

        ws.begin("synth", &fp, "h").unwrap();
        assert_eq!(ws.decide("synth", &fp, dir.path(), std::slice::from_ref(&out)).unwrap(), CacheDecision::Run);
        let m = ws.finish("synth", &fp, "h", std::slice::from_ref(&out)).unwrap();
        assert_eq!(m.outputs[0].path, PathBuf::from("a.txt"));
        assert!(matches!(ws.decide("synth", &fp, dir.path(), &[]).unwrap(), CacheDecision::UpToDate(_)));

        let other = fingerprint(&[("x", "2")]);
        assert!(matches!(ws.decide("synth", &other, dir.path(), &[]), Err(CliError::Stale { .. })));
        let forced = Workspace::new(dir.path().to_path_buf(), true);
        assert_eq!(forced.decide("synth", &other, dir.path(), &[]).unwrap(), CacheDecision::Run);

        fs::write(&out, "tampered").unwrap();
        assert_eq!(ws.decide("synth", &fp, dir.path(), &[]).unwrap(), CacheDecision::Run);
    }

    #[test]
    fn fingerprint_parts_do_not_run_together() {
        assert_ne!(fingerprint(&[("ab", "c")]), fingerprint(&[("a", "bc")]));
    }
}
