//! Run manifests. Every file a command writes gets a JSON sidecar
//! `<file>.manifest.json`, and the file itself names that sidecar.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub version: String,
    pub threads: usize,
    pub started_unix: u64,
    pub elapsed_secs: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_secs: 0.0,
            clock: Some(Instant::now()),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.push((name.to_string(), value));
    }

    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        let mut file = fs::File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 1 << 16];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let sha256 = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Registers an output and returns the line it should carry to point
    /// back at the manifest.
    pub fn output(&mut self, path: &Path) -> String {
        self.outputs.push(path.display().to_string());
        format!("manifest: {}", sidecar_name(path))
    }

    /// Writes one sidecar per registered output.
    pub fn finish(mut self) -> io::Result<()> {
        if let Some(c) = self.clock.take() {
            self.elapsed_secs = c.elapsed().as_secs_f64();
        }
        let text = serde_json::to_string_pretty(&self)?;
        for out in &self.outputs {
            fs::write(sidecar_path(Path::new(out)), format!("{text}\n"))?;
        }
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// File name only, so outputs stay valid when a directory is moved.
pub fn sidecar_name(path: &Path) -> String {
    sidecar_path(path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
