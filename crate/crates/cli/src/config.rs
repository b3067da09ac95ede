//! Experiment configuration: a line-based sectioned key-value format with
//! comments and no executable content. Every key is validated against a
//! fixed schema, so a typo or a stale key fails loudly instead of silently
//! drifting the experiment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use wc4dvar_core::io::fnv1a;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// (section, allowed keys). The empty section holds root-level keys.
const SCHEMA: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    ("dynamics", &["k", "j", "f", "h", "c", "b", "dt"]),
    ("truth", &["spinup_steps", "save_every", "count"]),
    (
        "covariance",
        &[
            "sigma_slow",
            "sigma_fast",
            "length_scale",
            "cross_coupling",
            "exact_initial",
        ],
    ),
    ("data", &["train_count", "holdout_gap"]),
    (
        "ae",
        &["hidden", "latent_dim", "epochs", "batch", "lr", "lr_floor", "plateau_halving", "shuffle"],
    ),
    (
        "ae_check",
        &[
            "recon_rel_max",
            "linearity_floor_factor",
            "probe_scale",
            "fd_step",
            "probes",
            "baseline_seeds",
        ],
    ),
    ("forecast", &["hidden"]),
    (
        "training.stage1",
        &["epochs", "batch", "lr_peak", "warmup_frac", "lr_floor"],
    ),
    (
        "training.stage2",
        &["curriculum", "batch", "lr", "grad_clip", "logvar_per_step"],
    ),
    (
        "loss",
        &[
            "kind",
            "diag_weights",
            "latent_weights",
            "ms_discrete_indices",
            "ms_discrete_weight",
            "ms_continuous",
            "ms_continuous_weight",
        ],
    ),
    ("evaluation", &["init_count", "init_stride", "max_lead", "include_persistence"]),
    ("spinup", &["keep_wavenumbers", "leads", "state_index"]),
    ("diagnose", &["grid", "grid_refined", "coriolis"]),
    ("paths", &["out_dir"]),
];

fn schema_allows(section: &str, key: &str) -> bool {
    SCHEMA
        .iter()
        .any(|(s, keys)| *s == section && keys.contains(&key))
}

/// Parsed experiment configuration with schema-validated keys.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    text_hash: u64,
    pub source_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError(format!("line {}: unclosed section header", lineno + 1)))?
                    .trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError(format!(
                        "line {}: unknown section [{name}]",
                        lineno + 1
                    )));
                }
                current = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !schema_allows(&current, key) {
                return Err(ConfigError(format!(
                    "line {}: unknown key {key:?} in section [{current}]",
                    lineno + 1
                )));
            }
            let entry = sections.entry(current.clone()).or_default();
            if entry.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError(format!(
                    "line {}: duplicate key {key:?} in section [{current}]",
                    lineno + 1
                )));
            }
        }
        let cfg = ExperimentConfig {
            sections,
            text_hash: fnv1a(text.as_bytes()),
            source_path: None,
        };
        cfg.get_u64("", "seed")
            .map_err(|_| ConfigError("a root-level seed is required".into()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.source_path = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// FNV-1a hash of the raw config text.
    pub fn hash(&self) -> u64 {
        self.text_hash
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    pub fn get_str(&self, section: &str, key: &str) -> Result<&str> {
        self.raw(section, key).ok_or_else(|| {
            ConfigError(format!("missing key {key:?} in section [{section}]"))
        })
    }

    pub fn opt_str(&self, section: &str, key: &str, default: &str) -> String {
        self.raw(section, key).unwrap_or(default).to_string()
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<u64> {
        self.get_str(section, key)?.parse().map_err(|_| {
            ConfigError(format!("key {key:?} in [{section}] is not an integer"))
        })
    }

    pub fn opt_usize(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                ConfigError(format!("key {key:?} in [{section}] is not an integer"))
            }),
        }
    }

    pub fn opt_f64(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                ConfigError(format!("key {key:?} in [{section}] is not a number"))
            }),
        }
    }

    pub fn opt_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.raw(section, key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(ConfigError(format!(
                "key {key:?} in [{section}] must be true or false, got {other:?}"
            ))),
        }
    }

    /// Comma-separated integers, or `a..b` inclusive ranges.
    pub fn opt_usize_list(
        &self,
        section: &str,
        key: &str,
        default: &[usize],
    ) -> Result<Vec<usize>> {
        let raw = match self.raw(section, key) {
            None => return Ok(default.to_vec()),
            Some(v) => v,
        };
        let mut out = Vec::new();
        for part in raw.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            if let Some((a, b)) = part.split_once("..") {
                let a: usize = a.trim().parse().map_err(|_| {
                    ConfigError(format!("bad range start in {key:?}: {part:?}"))
                })?;
                let b: usize = b.trim().parse().map_err(|_| {
                    ConfigError(format!("bad range end in {key:?}: {part:?}"))
                })?;
                if b < a {
                    return Err(ConfigError(format!("empty range in {key:?}: {part:?}")));
                }
                out.extend(a..=b);
            } else {
                out.push(part.parse().map_err(|_| {
                    ConfigError(format!("bad integer in {key:?}: {part:?}"))
                })?);
            }
        }
        if out.is_empty() {
            return Err(ConfigError(format!("key {key:?} in [{section}] is empty")));
        }
        Ok(out)
    }

    pub fn seed(&self) -> u64 {
        self.get_u64("", "seed").expect("validated at parse time")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.opt_str("paths", "out_dir", "runs/default"))
    }
}

/// Default experiment configuration text, also used by the test suites.
pub fn default_config_text(seed: u64, out_dir: &str) -> String {
    format!(
        "\
# wc4dvar-lab experiment configuration
seed = {seed}

[dynamics]
k = 8
j = 4
f = 8.0
h = 1.0
c = 10.0
b = 10.0
dt = 0.005

[truth]
spinup_steps = 2000
save_every = 8
count = 4800

[covariance]
sigma_slow = 1.5
sigma_fast = 0.05
length_scale = 1.0
cross_coupling = 0.3
exact_initial = true

[data]
train_count = 4400
holdout_gap = 12

[ae]
hidden = 64,64
latent_dim = 12
epochs = 600
batch = 32
lr = 2e-3
lr_floor = 1e-5

[forecast]
hidden = 128,128

[training.stage1]
epochs = 50
batch = 16
lr_peak = 5e-4
warmup_frac = 0.05
lr_floor = 1e-6

[training.stage2]
curriculum = 2..12
batch = 16
# Desk-scale constant rate; the reference large-model value is 3e-7.
lr = 1e-3
grad_clip = 1.0

[loss]
kind = latent-nll

[evaluation]
init_count = 20
init_stride = 8
max_lead = 24

[spinup]
keep_wavenumbers = 2
leads = 0,4,8,12,16,20,24
state_index = 4500

[diagnose]
grid = 64
grid_refined = 128
coriolis = 1e-4

[paths]
out_dir = {out_dir}
"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_parses() {
        let cfg = ExperimentConfig::parse(&default_config_text(42, "runs/x")).unwrap();
        assert_eq!(cfg.seed(), 42);
        assert_eq!(cfg.get_u64("dynamics", "k").unwrap(), 8);
        assert_eq!(cfg.opt_f64("covariance", "sigma_slow", 0.0).unwrap(), 1.5);
        assert_eq!(
            cfg.opt_usize_list("training.stage2", "curriculum", &[]).unwrap(),
            (2..=12).collect::<Vec<_>>()
        );
        assert_eq!(
            cfg.opt_usize_list("spinup", "leads", &[]).unwrap(),
            vec![0, 4, 8, 12, 16, 20, 24]
        );
        assert_eq!(cfg.out_dir(), PathBuf::from("runs/x"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = "seed = 1\n[dynamics]\nnot_a_key = 3\n";
        let err = ExperimentConfig::parse(bad).unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
        let bad2 = "seed = 1\n[nonsense]\nk = 2\n";
        assert!(ExperimentConfig::parse(bad2).is_err());
        let dup = "seed = 1\nseed = 2\n";
        assert!(ExperimentConfig::parse(dup).is_err());
        assert!(ExperimentConfig::parse("[dynamics]\nk = 8\n").is_err(), "seed required");
    }

    #[test]
    fn hash_tracks_text() {
        let a = ExperimentConfig::parse(&default_config_text(1, "a")).unwrap();
        let b = ExperimentConfig::parse(&default_config_text(1, "a")).unwrap();
        let c = ExperimentConfig::parse(&default_config_text(2, "a")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
