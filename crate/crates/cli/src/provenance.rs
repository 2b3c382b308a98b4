//! Per-run provenance records: enough to reproduce or verify a run, with no
//! timestamps so identical runs write identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use c2v_core::encoder::checkpoint::file_sha256;
use c2v_core::Result;

pub struct Provenance {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<(String, PathBuf)>,
}

impl Provenance {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut text = String::new();
        writeln!(text, "command = {}", self.command).unwrap();
        writeln!(text, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(text, "config_hash = {}", self.config_hash).unwrap();
        if let Some(seed) = self.seed {
            writeln!(text, "seed = {seed}").unwrap();
        }
        for (name, path) in &self.inputs {
            let hash = file_sha256(path)?;
            writeln!(text, "input_{name} = {} sha256:{hash}", path.display()).unwrap();
        }
        std::fs::write(out_dir.join("provenance.txt"), text)?;
        Ok(())
    }
}

/// Default output root: `$C2V_OUTPUT_ROOT` or `./c2v-out`.
pub fn output_root() -> PathBuf {
    std::env::var_os("C2V_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("c2v-out"))
}
