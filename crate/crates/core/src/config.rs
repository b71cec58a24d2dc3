//! Sectioned `key = value` configuration with command-line overrides.
//!
//! ```text
//! # comment
//! [trainer]
//! variant = FGMIX
//! total_iters = 2000
//! ```
//! Every key lives under a section and is addressed as `section.key`.
//! Unknown keys are rejected; the resolved snapshot lists every key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datasets::{
    self, CsvSchema, MultiDomainSplit, RotatedDomains, SpuriousDomains,
};
use crate::error::{Error, Result};
use crate::trainer::{RunConfig, Variant};

/// Known keys and their defaults, in snapshot order.
const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("data.source", "rotated"),
    ("data.path", ""),
    ("data.target_domain", ""),
    ("data.angles_deg", "0,30,60,120"),
    ("data.correlations", "0.9,0.8,0.7"),
    ("data.samples_per_domain", "400"),
    ("data.num_classes", "2"),
    ("data.input_dim", "2"),
    ("data.noise_std", "0.25"),
    ("data.val_fraction", "0.2"),
    ("model.latent_dim", "8"),
    ("model.hidden", "64"),
    ("trainer.variant", "FGMIX"),
    ("trainer.total_iters", "2000"),
    ("trainer.policy_start", "1200"),
    ("trainer.batch_size", "32"),
    ("trainer.lr", "0.1"),
    ("trainer.swa_enabled", "true"),
    ("trainer.swa_start", "100"),
    ("trainer.eval_every", "1"),
    ("trainer.path_every", "20"),
    ("trainer.debug_weights", "false"),
    ("mixup.lambda", "5"),
    ("mixup.mixup_per_iter", "32"),
    ("mixup.policy_lr", "0.001"),
    ("objectives.gamma", "1"),
    ("objectives.mc_samples", "100"),
    ("objectives.prior_momentum", "0.9"),
    ("analysis.radii", "1,2,3,4,5,6,7,8,9,10"),
    ("analysis.directions", "50"),
    ("analysis.resolution", "21"),
    ("analysis.margin", "0.1"),
    ("ablate.variants", "A,B,C,D,E,FGMIX"),
    ("ablate.seeds", "5"),
];

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

/// Parses `[section]` / `key = value` lines into `(section.key, value)`.
fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut section = String::new();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        let k = k.trim();
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        pairs.push((i + 1, key, v.trim().to_string()));
    }
    Ok(pairs)
}

impl Config {
    /// Defaults overlaid with the file's entries.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = parse_pairs(text)?;
        let unknown: Vec<String> = pairs
            .iter()
            .filter(|(_, k, _)| !is_known(k))
            .map(|(line, k, _)| format!("{k} (line {line})"))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        for (_, k, v) in pairs {
            cfg.values.insert(k, v);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value` overrides; all unknown keys are reported together.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut unknown = Vec::new();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            if is_known(k) {
                self.values.insert(k.to_string(), v.trim().to_string());
            } else {
                unknown.push(k.to_string());
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("{key} is not a known config key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("run.seed")
    }

    /// Every key, grouped by section, in a form [`Config::parse`] accepts.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, _) in DEFAULTS {
            let (section, name) = key.split_once('.').expect("keys are sectioned");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{name} = {}", self.values[*key]);
        }
        out
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig {
            total_iters: self.get("trainer.total_iters")?,
            policy_start: self.get("trainer.policy_start")?,
            mixup_per_iter: self.get("mixup.mixup_per_iter")?,
            lr: self.get("trainer.lr")?,
            policy_lr: self.get("mixup.policy_lr")?,
            lambda: self.get("mixup.lambda")?,
            gamma: self.get("objectives.gamma")?,
            mc_samples: self.get("objectives.mc_samples")?,
            variant: self.get::<Variant>("trainer.variant")?,
            swa_enabled: self.get("trainer.swa_enabled")?,
            swa_start: self.get("trainer.swa_start")?,
            seed: self.seed()?,
            batch_size: self.get("trainer.batch_size")?,
            latent_dim: self.get("model.latent_dim")?,
            hidden: self.get("model.hidden")?,
            prior_momentum: self.get("objectives.prior_momentum")?,
            eval_every: self.get("trainer.eval_every")?,
            path_every: self.get("trainer.path_every")?,
            debug_weights: self.get("trainer.debug_weights")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds or loads the dataset described by the `data` section.
    pub fn dataset(&self) -> Result<MultiDomainSplit> {
        let seed = self.seed()?;
        let val_fraction: f64 = self.get("data.val_fraction")?;
        match self.raw("data.source") {
            "rotated" => {
                let angles: Vec<f64> = self.get_list("data.angles_deg")?;
                let k = angles.len().saturating_sub(1);
                datasets::make_rotated_domains(
                    k,
                    &RotatedDomains {
                        angles: angles.iter().map(|a| a.to_radians()).collect(),
                        samples_per_domain: self.get("data.samples_per_domain")?,
                        num_classes: self.get("data.num_classes")?,
                        input_dim: self.get("data.input_dim")?,
                        noise_std: self.get("data.noise_std")?,
                        seed,
                        val_fraction,
                    },
                )
            }
            "spurious" => {
                let correlations: Vec<f64> = self.get_list("data.correlations")?;
                datasets::make_spurious_domains(
                    correlations.len(),
                    &SpuriousDomains {
                        correlations,
                        samples_per_domain: self.get("data.samples_per_domain")?,
                        num_classes: self.get("data.num_classes")?,
                        input_dim: self.get("data.input_dim")?,
                        noise_std: self.get("data.noise_std")?,
                        seed,
                        val_fraction,
                    },
                )
            }
            "csv" => self.load_csv_dataset(seed, val_fraction),
            other => Err(Error::Config(format!(
                "data.source must be rotated, spurious or csv, got {other:?}"
            ))),
        }
    }

    fn load_csv_dataset(&self, seed: u64, val_fraction: f64) -> Result<MultiDomainSplit> {
        let path = PathBuf::from(self.raw("data.path"));
        if path.as_os_str().is_empty() {
            return Err(Error::Config("data.source = csv needs data.path".into()));
        }
        if !path.exists() {
            return Err(Error::Config(format!("dataset path {} does not exist", path.display())));
        }
        let (files, manifest_target, num_classes) = if path.is_dir() {
            let m = Manifest::load(&path.join(MANIFEST))?;
            let files: Vec<PathBuf> = m.files.iter().map(|f| path.join(f)).collect();
            (files, Some(m.target_domain), Some(m.num_classes))
        } else {
            (vec![path], None, None)
        };
        let domains = files
            .iter()
            .map(|f| {
                let text = std::fs::read_to_string(f)
                    .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", f.display())))?;
                datasets::parse_csv(&text)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect::<Vec<_>>();
        let target = match self.raw("data.target_domain") {
            "" => manifest_target
                .or_else(|| domains.last().map(|d| d.domain_id))
                .ok_or_else(|| Error::Config("dataset has no domains".into()))?,
            t => t
                .parse()
                .map_err(|_| Error::Config(format!("data.target_domain: cannot parse {t:?}")))?,
        };
        let schema = CsvSchema {
            target_domain: target,
            num_classes,
            val_fraction,
            seed,
        };
        datasets::split_domains(domains, &schema)
    }
}

/// Index written next to generated per-domain CSV files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub files: Vec<String>,
    pub target_domain: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn render(&self) -> String {
        format!(
            "files = {}\ntarget_domain = {}\nnum_classes = {}\nseed = {}\n",
            self.files.join(","),
            self.target_domain,
            self.num_classes,
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (_, k, v) in parse_pairs(text)? {
            map.insert(k, v);
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest {k} is not a number")))
        };
        Ok(Self {
            files: get("files")?.split(',').map(|s| s.trim().to_string()).collect(),
            target_domain: num("target_domain")? as usize,
            num_classes: num("num_classes")? as usize,
            seed: num("seed")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
