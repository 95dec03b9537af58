use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use robust_stopper::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INVARIANT: u8 = 3;
pub const EXIT_BUDGET: u8 = 4;

/// A failed run: exit code plus where the problem was caught and what to do.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub module: String,
    pub field: String,
    pub message: String,
    pub hint: String,
}

impl Failure {
    pub fn config(module: &str, field: &str, message: impl Into<String>, hint: &str) -> Self {
        Self {
            code: EXIT_CONFIG,
            module: module.into(),
            field: field.into(),
            message: message.into(),
            hint: hint.into(),
        }
    }

    pub fn invariant(module: &str, field: &str, message: impl Into<String>, hint: &str) -> Self {
        Self {
            code: EXIT_INVARIANT,
            ..Self::config(module, field, message, hint)
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::config(
            "output",
            "out",
            format!("cannot write {}: {e}", path.display()),
            "check that --out is writable",
        )
    }

    pub fn from_core(e: Error, hint: &str) -> Self {
        let (code, field, hint) = match &e {
            Error::Parameter { field: "grid", .. } => (
                EXIT_CONFIG,
                "grid".into(),
                "keep every tilt within |theta| <= k, f(theta) <= k and the lattice's tilt limit, or raise k",
            ),
            Error::Parameter { field, .. } => (EXIT_CONFIG, field.to_string(), hint),
            Error::BoundViolation { .. } => (
                EXIT_CONFIG,
                "payoff.bound".into(),
                "raise payoff.bound or rescale the payoff",
            ),
            Error::Assumption { .. } => (EXIT_CONFIG, "penalty.assumptions".into(), "widen growth_m or psi_bound"),
            Error::UnsupportedRule { .. } => (
                EXIT_CONFIG,
                "gamma".into(),
                "use a region closed under moving forward in time",
            ),
            Error::ObstacleViolation { .. } => (EXIT_CONFIG, "payoff".into(), hint),
            Error::Shape { .. } => (EXIT_CONFIG, "-".into(), hint),
            Error::Budget { .. } => (
                EXIT_BUDGET,
                "grid".into(),
                "reduce n_steps or the number of grid points",
            ),
            Error::LatticeTooCoarse { .. } => {
                (EXIT_CONFIG, "lattice.dt".into(), "refine the lattice with a smaller dt")
            }
        };
        Self {
            code,
            module: e.module().into(),
            field,
            message: e.to_string(),
            hint: hint.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "error in {} (field `{}`): {}", self.module, self.field, self.message)?;
        write!(f, "hint: {}", self.hint)
    }
}

/// Fixed 15-significant-digit scientific notation.
pub fn num(v: f64) -> String {
    if v == 0.0 {
        // Folds -0 into 0.
        return format!("{:.14e}", 0.0);
    }
    format!("{v:.14e}")
}

pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }
}

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: PathBuf) -> Result<Self, Failure> {
        fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    pub fn csv(&mut self, name: &str, csv: Csv) -> Result<(), Failure> {
        self.write(name, csv.text.as_bytes())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))?;
        self.files.push(name.into());
        Ok(())
    }

    /// Writes `manifest.json`, recording the config hash and tool version.
    pub fn finish(mut self, job: &str, config: &[u8], seed: u64, passed: bool) -> Result<(), Failure> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            tool: &'a str,
            version: &'a str,
            job: &'a str,
            config_sha256: String,
            seed: u64,
            invariants_passed: bool,
            files: &'a [String],
        }
        let files = std::mem::take(&mut self.files);
        let m = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            job,
            config_sha256: format!("{:x}", Sha256::digest(config)),
            seed,
            invariants_passed: passed,
            files: &files,
        };
        self.json("manifest.json", &m)
    }
}
