//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::CorruptionKind;
use crate::error::{Error, Result};
use crate::network::{Optimizer, TrainConfig};

use super::Variant;

/// Every accepted key with its default; `None` marks a required key.
const KEYS: &[(&str, Option<&str>)] = &[
    ("dataset", None),
    ("hidden", None),
    ("n_samples", Some("1000")),
    ("noise", Some("0.1")),
    ("blob_std", Some("0.5")),
    ("train_csv", Some("")),
    ("test_csv", Some("")),
    ("idx_train_images", Some("")),
    ("idx_train_labels", Some("")),
    ("idx_test_images", Some("")),
    ("idx_test_labels", Some("")),
    ("max_train", Some("0")),
    ("max_test", Some("0")),
    ("test_fraction", Some("0.2")),
    ("train_ratio", Some("0.8")),
    ("ood", Some("uniform")),
    ("ood_n", Some("1000")),
    ("ood_margin", Some("2.0")),
    ("ood_bounds", Some("")),
    ("ood_csv", Some("")),
    ("ood_idx_images", Some("")),
    ("ood_idx_labels", Some("")),
    ("shift", Some("")),
    ("exp", Some("true")),
    ("de", Some("true")),
    ("sn", Some("true")),
    ("learning_rate", Some("1e-3")),
    ("lambda", Some("5e-2")),
    ("batch_size", Some("64")),
    ("max_epochs", Some("50")),
    ("patience", Some("10")),
    ("lr_decay", Some("0.95")),
    ("optimizer", Some("adam")),
    ("seed", Some("0")),
    ("measures", Some("aleatoric,epistemic")),
    ("ablate", Some("paper")),
    ("grid_x", Some("-2.5:3.5")),
    ("grid_y", Some("-2:2.5")),
    ("grid_resolution", Some("50")),
    ("out", Some("runs")),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    TwoMoons {
        n: usize,
        noise: f64,
    },
    /// Three isotropic 2-D blobs on a triangle.
    Blobs {
        n: usize,
        std: f64,
    },
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OodSource {
    None,
    /// Uniform box; explicit bounds or the training bounding box widened by `margin`.
    Uniform {
        n: usize,
        margin: f64,
        bounds: Option<Vec<(f64, f64)>>,
    },
    Csv(PathBuf),
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Aleatoric,
    Epistemic,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Self::Aleatoric => "aleatoric",
            Self::Epistemic => "epistemic",
        }
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aleatoric" => Ok(Self::Aleatoric),
            "epistemic" => Ok(Self::Epistemic),
            other => Err(Error::Config(format!("unknown measure {other:?}"))),
        }
    }
}

/// Grid extent and resolution for uncertainty landscapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (-2.5, 3.5),
            y_range: (-2.0, 2.5),
            resolution: 50,
        }
    }
}

/// Parsed and validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    raw: BTreeMap<String, String>,
    pub dataset: DatasetSource,
    pub hidden: Vec<usize>,
    pub max_train: usize,
    pub max_test: usize,
    pub test_fraction: f64,
    pub train_ratio: f64,
    pub ood: OodSource,
    pub shift: Vec<CorruptionKind>,
    pub variant: Variant,
    pub train: TrainConfig,
    pub measures: Vec<Measure>,
    pub ablate: Vec<Variant>,
    pub grid: GridSpec,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_pairs(parse_pairs(&text)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Builds a config from explicit pairs; later pairs override earlier ones.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (k, v) in pairs {
            let k = k.as_ref().trim();
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            raw.insert(k.to_string(), v.as_ref().trim().to_string());
        }
        for (k, default) in KEYS {
            match (raw.contains_key(*k), default) {
                (true, _) => {}
                (false, Some(d)) => {
                    raw.insert(k.to_string(), d.to_string());
                }
                (false, None) => {
                    return Err(Error::Config(format!("missing required config key {k:?}")))
                }
            }
        }
        Self::build(raw)
    }

    /// Applies `key=value` overrides on top of this configuration.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = self.raw.clone().into_iter().collect();
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Config(format!("override {:?} is not key=value", o.as_ref()))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(pairs)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.raw.get(key).map(String::as_str)
    }

    /// Resolved key/value pairs, defaults included.
    pub fn pairs(&self) -> &BTreeMap<String, String> {
        &self.raw
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.raw).expect("string map serializes")
    }

    fn build(raw: BTreeMap<String, String>) -> Result<Self> {
        let g = |k: &str| raw[k].as_str();
        let path = |k: &str| -> Option<PathBuf> {
            Some(g(k)).filter(|s| !s.is_empty()).map(PathBuf::from)
        };
        let need = |k: &str| -> Result<PathBuf> {
            path(k).ok_or_else(|| {
                Error::Config(format!("config key {k:?} is required for this dataset"))
            })
        };
        let dataset = match g("dataset") {
            "two_moons" => DatasetSource::TwoMoons {
                n: num(&raw, "n_samples")?,
                noise: num(&raw, "noise")?,
            },
            "blobs" => DatasetSource::Blobs {
                n: num(&raw, "n_samples")?,
                std: num(&raw, "blob_std")?,
            },
            "csv" => DatasetSource::Csv {
                train: need("train_csv")?,
                test: path("test_csv"),
            },
            "idx" => DatasetSource::Idx {
                train_images: need("idx_train_images")?,
                train_labels: need("idx_train_labels")?,
                test_images: path("idx_test_images"),
                test_labels: path("idx_test_labels"),
            },
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        };
        let hidden = list::<usize>(g("hidden"), "hidden")?;
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(
                "hidden must list positive layer widths".into(),
            ));
        }
        let ood = match g("ood") {
            "none" => OodSource::None,
            "uniform" => OodSource::Uniform {
                n: num(&raw, "ood_n")?,
                margin: num(&raw, "ood_margin")?,
                bounds: if g("ood_bounds").is_empty() {
                    None
                } else {
                    Some(
                        g("ood_bounds")
                            .split(',')
                            .map(|r| range(r, "ood_bounds"))
                            .collect::<Result<_>>()?,
                    )
                },
            },
            "csv" => OodSource::Csv(need("ood_csv")?),
            "idx" => OodSource::Idx {
                images: need("ood_idx_images")?,
                labels: need("ood_idx_labels")?,
            },
            other => return Err(Error::Config(format!("unknown ood source {other:?}"))),
        };
        let shift = list::<String>(g("shift"), "shift")?
            .iter()
            .map(|s| {
                s.parse::<CorruptionKind>()
                    .map_err(|e| Error::Config(e.to_string()))
            })
            .collect::<Result<_>>()?;
        let variant = Variant {
            exp: flag(&raw, "exp")?,
            de: flag(&raw, "de")?,
            sn: flag(&raw, "sn")?,
        };
        let optimizer = match g("optimizer") {
            "adam" => Optimizer::ADAM,
            "sgd" => Optimizer::Sgd,
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
        let train = TrainConfig {
            learning_rate: num(&raw, "learning_rate")?,
            lambda: num(&raw, "lambda")?,
            batch_size: num(&raw, "batch_size")?,
            max_epochs: num(&raw, "max_epochs")?,
            patience: num(&raw, "patience")?,
            lr_decay: num(&raw, "lr_decay")?,
            seed: num(&raw, "seed")?,
            optimizer,
        };
        let measures = list::<Measure>(g("measures"), "measures")?;
        if measures.is_empty() {
            return Err(Error::Config(
                "measures must name at least one of aleatoric, epistemic".into(),
            ));
        }
        let ablate = match g("ablate") {
            "paper" => Variant::PAPER_ROWS.to_vec(),
            "all" => Variant::lattice(),
            s => s
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<Result<_>>()?,
        };
        let grid = GridSpec {
            x_range: range(g("grid_x"), "grid_x")?,
            y_range: range(g("grid_y"), "grid_y")?,
            resolution: num(&raw, "grid_resolution")?,
        };
        if grid.resolution < 2 {
            return Err(Error::Config("grid_resolution must be at least 2".into()));
        }
        let test_fraction: f64 = num(&raw, "test_fraction")?;
        let train_ratio: f64 = num(&raw, "train_ratio")?;
        for (k, v) in [
            ("test_fraction", test_fraction),
            ("train_ratio", train_ratio),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{k} must lie in (0, 1), got {v}")));
            }
        }
        Ok(Self {
            dataset,
            hidden,
            max_train: num(&raw, "max_train")?,
            max_test: num(&raw, "max_test")?,
            test_fraction,
            train_ratio,
            ood,
            shift,
            variant,
            train,
            measures,
            ablate,
            grid,
            out: PathBuf::from(g("out")),
            raw,
        })
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(raw: &BTreeMap<String, String>, k: &str) -> Result<T> {
    raw[k]
        .parse()
        .map_err(|_| Error::Config(format!("config key {k:?} has invalid value {:?}", raw[k])))
}

fn flag(raw: &BTreeMap<String, String>, k: &str) -> Result<bool> {
    match raw[k].as_str() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        v => Err(Error::Config(format!(
            "config key {k:?} expects a boolean, got {v:?}"
        ))),
    }
}

fn list<T: FromStr>(s: &str, k: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("config key {k:?} has invalid entry {v:?}")))
        })
        .collect()
}

fn range(s: &str, k: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("config key {k:?} expects lo:hi ranges, got {s:?}"));
    let (lo, hi) = s.trim().split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg =
            RunConfig::from_text("dataset = two_moons\nhidden = 64,64 # two layers\n").unwrap();
        assert_eq!(cfg.hidden, vec![64, 64]);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.lambda, 5e-2);
        assert_eq!(cfg.variant, Variant::DAEDL);
        assert_eq!(cfg.ablate.len(), 5);
        assert_eq!(cfg.grid, GridSpec::default());
    }

    #[test]
    fn missing_key_is_named() {
        let err = RunConfig::from_text("hidden = 8").unwrap_err();
        assert!(err.to_string().contains("\"dataset\""), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_text("dataset = two_moons\nhidden = 8\nwidth = 3").unwrap_err();
        assert!(err.to_string().contains("width"));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_text("dataset = two_moons\nhidden = 8").unwrap();
        let cfg = cfg
            .with_overrides(&["seed=7", "de = false", "ablate=exp,exp+de"])
            .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert!(!cfg.variant.de);
        assert_eq!(cfg.ablate.len(), 2);
        assert!(cfg.with_overrides(&["bogus"]).is_err());
        assert!(cfg.with_overrides(&["grid_x=3:1"]).is_err());
    }
}
