//! Experiment protocol: data preparation, fitting, evaluation with auditable
//! score dumps, uncertainty landscapes and ablations over the EXP/DE/SN toggles.

mod config;
mod report;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, CorruptionSpec, LabeledDataset};
use crate::density::GdaModel;
use crate::dirichlet::LossConfig;
use crate::error::{domain, Error, Result};
use crate::linalg::Matrix;
use crate::network::{self, Architecture, EvidentialNetwork, TrainConfig, TrainHistory};
use crate::predict::{self, Parameterization, PredictionOutput};

pub use config::{DatasetSource, GridSpec, Measure, OodSource, RunConfig};
pub use report::{
    ablation_csv, history_csv, landscape_csv, metrics_from_scores, parse_score_dump,
    read_score_dump, score_dump_csv, AblationRow, EvalReport, ScoreRecord, ID_SET,
};

/// On/off switches for the three model components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    /// Exponential concentration; off means `α = ReLU(z) + 1`.
    pub exp: bool,
    /// Density scaling at prediction; off means `s ≡ 1`.
    pub de: bool,
    /// Spectral normalization of the feature layers.
    pub sn: bool,
}

impl Variant {
    pub const DAEDL: Self = Self {
        exp: true,
        de: true,
        sn: true,
    };
    /// Conventional evidential model.
    pub const EDL: Self = Self {
        exp: false,
        de: false,
        sn: false,
    };
    pub const PAPER_ROWS: [Self; 5] = [
        Self::EDL,
        Self {
            exp: true,
            de: false,
            sn: false,
        },
        Self {
            exp: true,
            de: true,
            sn: false,
        },
        Self {
            exp: true,
            de: false,
            sn: true,
        },
        Self::DAEDL,
    ];

    /// All eight toggle combinations.
    pub fn lattice() -> Vec<Self> {
        (0..8u8)
            .map(|b| Self {
                exp: b & 4 != 0,
                de: b & 2 != 0,
                sn: b & 1 != 0,
            })
            .collect()
    }

    pub fn parameterization(self) -> Parameterization {
        if self.exp {
            Parameterization::Exp
        } else {
            Parameterization::ReluPlusOne
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.exp, "exp"), (self.de, "de"), (self.sn, "sn")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Parses `none` or a `+`-joined subset of `exp`, `de`, `sn`.
    fn from_str(s: &str) -> Result<Self> {
        let mut v = Self {
            exp: false,
            de: false,
            sn: false,
        };
        if s.trim() == "none" {
            return Ok(v);
        }
        for part in s.split('+').map(str::trim) {
            let slot = match part {
                "exp" => &mut v.exp,
                "de" => &mut v.de,
                "sn" => &mut v.sn,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown ablation component {part:?} in {s:?}"
                    )))
                }
            };
            if *slot {
                return Err(Error::Config(format!(
                    "component {part:?} repeated in {s:?}"
                )));
            }
            *slot = true;
        }
        Ok(v)
    }
}

/// Trained network plus its feature-density model.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub network: EvidentialNetwork,
    pub gda: GdaModel,
    /// `false` predicts with `s ≡ 1`.
    pub use_density: bool,
}

impl FittedModel {
    /// Trains the network, then fits class Gaussians to the training features.
    pub fn fit(
        train: &LabeledDataset,
        val: &LabeledDataset,
        hidden: &[usize],
        variant: Variant,
        cfg: &TrainConfig,
    ) -> Result<(Self, TrainHistory)> {
        let arch = Architecture {
            input_dim: train.dim(),
            hidden: hidden.to_vec(),
            num_classes: train.num_classes(),
        };
        let net = EvidentialNetwork::new(&arch, variant.parameterization(), variant.sn, cfg.seed)?;
        let (net, history) = network::train(net, train, val, cfg)?;
        let model = Self::with_density(net, train, variant.de)?;
        Ok((model, history))
    }

    pub fn with_density(
        network: EvidentialNetwork,
        train: &LabeledDataset,
        use_density: bool,
    ) -> Result<Self> {
        let features = feature_matrix(&network, train.features())?;
        let gda = GdaModel::fit(&features, train.labels(), network.num_classes())?;
        Ok(Self {
            network,
            gda,
            use_density,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictionOutput> {
        if self.use_density {
            predict::predict(&self.network, &self.gda, x)
        } else {
            predict::predict_without_density(&self.network, x)
        }
    }

    /// Row-wise prediction, parallel across rows, in input order.
    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<PredictionOutput>> {
        if x.cols() != self.network.input_dim() {
            return domain(format!(
                "inputs have {} features, model expects {}",
                x.cols(),
                self.network.input_dim()
            ));
        }
        (0..x.rows())
            .into_par_iter()
            .map(|i| self.predict(x.row(i)))
            .collect()
    }

    pub fn to_checkpoint(
        &self,
        train_config: TrainConfig,
        run_config: serde_json::Value,
    ) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            gda: Some(self.gda.clone()),
            use_density: self.use_density,
            train_config,
            run_config,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let gda = ckpt
            .gda
            .ok_or_else(|| Error::Domain("checkpoint has no density model".into()))?;
        if gda.feature_dim() != ckpt.network.feature_dim() {
            return domain("checkpoint density model does not match the network feature dimension");
        }
        Ok(Self {
            network: ckpt.network,
            gda,
            use_density: ckpt.use_density,
        })
    }
}

/// Feature vectors of every input row.
pub fn feature_matrix(net: &EvidentialNetwork, x: &Matrix) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .into_par_iter()
        .map(|i| net.features(x.row(i)))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Train/validation/test splits plus every comparison set for evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// Out-of-distribution and shifted sets, each scored against `test`.
    pub others: Vec<LabeledDataset>,
}

/// Offsets added to the run seed so each random stage draws its own stream.
const SEED_TEST_SPLIT: u64 = 1;
const SEED_VAL_SPLIT: u64 = 2;
const SEED_OOD: u64 = 3;
const SEED_SHIFT: u64 = 4;
const SEED_SUBSET: u64 = 5;

/// Materializes the datasets a configuration describes. Deterministic in the config.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let seed = cfg.train.seed;
    let (pool, test) = match &cfg.dataset {
        DatasetSource::TwoMoons { n, noise } => {
            let ds = data::two_moons(*n, *noise, seed)?;
            data::split(
                &ds,
                1.0 - cfg.test_fraction,
                seed.wrapping_add(SEED_TEST_SPLIT),
            )?
        }
        DatasetSource::Blobs { n, std } => {
            let centers = [vec![0.0, 0.0], vec![3.0, 0.0], vec![1.5, 2.6]];
            let ds = data::gaussian_blobs(n / centers.len(), &centers, *std, seed)?;
            data::split(
                &ds,
                1.0 - cfg.test_fraction,
                seed.wrapping_add(SEED_TEST_SPLIT),
            )?
        }
        DatasetSource::Csv { train, test } => {
            let ds = data::read_csv(train)?;
            match test {
                Some(t) => (ds, data::read_csv(t)?),
                None => data::split(
                    &ds,
                    1.0 - cfg.test_fraction,
                    seed.wrapping_add(SEED_TEST_SPLIT),
                )?,
            }
        }
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let ds = data::load_idx(train_images, train_labels)?;
            match (test_images, test_labels) {
                (Some(i), Some(l)) => (ds, data::load_idx(i, l)?),
                _ => data::split(
                    &ds,
                    1.0 - cfg.test_fraction,
                    seed.wrapping_add(SEED_TEST_SPLIT),
                )?,
            }
        }
    };
    if pool.dim() != test.dim() {
        return domain(format!(
            "training data has {} features, test data {}",
            pool.dim(),
            test.dim()
        ));
    }
    let pool = truncate(&pool, cfg.max_train, seed.wrapping_add(SEED_SUBSET));
    let test = truncate(&test, cfg.max_test, seed.wrapping_add(SEED_SUBSET));
    let (train, val) = data::split(&pool, cfg.train_ratio, seed.wrapping_add(SEED_VAL_SPLIT))?;

    let mut others = Vec::new();
    let ood = match &cfg.ood {
        OodSource::None => None,
        OodSource::Uniform { n, margin, bounds } => {
            let bounds = match bounds {
                Some(b) => b.clone(),
                None => train
                    .bounds()
                    .iter()
                    .map(|(lo, hi)| (lo - margin, hi + margin))
                    .collect(),
            };
            if bounds.len() != train.dim() {
                return domain(format!(
                    "ood_bounds has {} ranges for {} features",
                    bounds.len(),
                    train.dim()
                ));
            }
            Some(data::uniform_ood(*n, &bounds, seed.wrapping_add(SEED_OOD))?.with_name("uniform"))
        }
        OodSource::Csv(p) => Some(data::read_csv(p)?.with_name("ood")),
        OodSource::Idx { images, labels } => Some(data::load_idx(images, labels)?.with_name("ood")),
    };
    if let Some(ood) = ood {
        if ood.dim() != train.dim() {
            return domain(format!(
                "OOD data has {} features, training data {}",
                ood.dim(),
                train.dim()
            ));
        }
        others.push(truncate(&ood, cfg.max_test, seed.wrapping_add(SEED_SUBSET)));
    }
    for &kind in &cfg.shift {
        for severity in 1..=5u8 {
            let spec = CorruptionSpec::new(kind, severity)?;
            let shifted = data::corrupt(&test, spec, seed.wrapping_add(SEED_SHIFT))?;
            others.push(shifted.with_name(format!("shift_{kind}_{severity}")));
        }
    }
    Ok(PreparedData {
        train,
        val,
        test,
        others,
    })
}

/// Seeded random subset of at most `max` rows; `0` keeps everything.
fn truncate(ds: &LabeledDataset, max: usize, seed: u64) -> LabeledDataset {
    if max == 0 || ds.len() <= max {
        return ds.clone();
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(max);
    ds.subset(&idx)
}

/// Prepares data and fits the configured variant.
pub fn train_from_config(cfg: &RunConfig) -> Result<(FittedModel, TrainHistory, PreparedData)> {
    let data = prepare_data(cfg)?;
    let (model, history) =
        FittedModel::fit(&data.train, &data.val, &cfg.hidden, cfg.variant, &cfg.train)?;
    Ok((model, history, data))
}

/// Per-sample scores for a dataset.
pub fn score_dataset(
    model: &FittedModel,
    ds: &LabeledDataset,
    set: &str,
) -> Result<Vec<ScoreRecord>> {
    let preds = model.predict_rows(ds.features())?;
    Ok(preds
        .into_iter()
        .zip(ds.labels())
        .map(|(p, &label)| ScoreRecord {
            set: set.to_string(),
            label,
            predicted: p.predicted_class,
            aleatoric: p.aleatoric_conf,
            epistemic: p.epistemic_conf,
            entropy: p.entropy,
            s: p.s,
            probs: p.probs,
        })
        .collect())
}

/// Scores the ID test set and every comparison set, then derives all metrics
/// from those scores alone.
pub fn evaluate(
    model: &FittedModel,
    id_test: &LabeledDataset,
    others: &[LabeledDataset],
    measures: &[Measure],
) -> Result<(EvalReport, Vec<ScoreRecord>)> {
    let mut records = score_dataset(model, id_test, ID_SET)?;
    for ds in others {
        if ds.name() == ID_SET {
            return domain(format!("comparison set may not be named {ID_SET:?}"));
        }
        records.extend(score_dataset(model, ds, ds.name())?);
    }
    let metrics = metrics_from_scores(&records, measures)?;
    Ok((
        EvalReport {
            metrics,
            config: serde_json::Value::Null,
            score_dump: None,
        },
        records,
    ))
}

/// One grid cell of an uncertainty landscape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCell {
    pub x: f64,
    pub y: f64,
    pub entropy: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub s: f64,
    /// Total predictive variance `Σ_c p_c(1 − p_c)/(α₀ + 1)`.
    pub variance: f64,
}

/// Evenly spaced grid coordinates, row-major with `y` outer and `x` inner.
pub fn grid_points(grid: &GridSpec) -> Result<Vec<(f64, f64)>> {
    if grid.resolution < 2 {
        return domain("grid resolution must be at least 2");
    }
    let (x0, x1) = grid.x_range;
    let (y0, y1) = grid.y_range;
    if !(x0 < x1 && y0 < y1) {
        return domain("grid ranges must be increasing");
    }
    let r = grid.resolution;
    let at = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (r - 1) as f64;
    Ok((0..r)
        .flat_map(|j| (0..r).map(move |i| (at(x0, x1, i), at(y0, y1, j))))
        .collect())
}

/// Uncertainty scores over a 2-D grid.
pub fn landscape(model: &FittedModel, grid: &GridSpec) -> Result<Vec<LandscapeCell>> {
    if model.network.input_dim() != 2 {
        return domain(format!(
            "landscapes need a 2-D input model, this one takes {} features",
            model.network.input_dim()
        ));
    }
    grid_points(grid)?
        .into_par_iter()
        .map(|(x, y)| {
            let p = model.predict(&[x, y])?;
            let a0 = p.epistemic_conf;
            let variance = p.probs.iter().map(|q| q * (1.0 - q)).sum::<f64>() / (a0 + 1.0);
            Ok(LandscapeCell {
                x,
                y,
                entropy: p.entropy,
                aleatoric: p.aleatoric_conf,
                epistemic: a0,
                s: p.s,
                variance,
            })
        })
        .collect()
}

/// Trains and evaluates every requested variant on the same data and seed.
/// The density toggle only affects prediction, so variants differing in `de`
/// alone share one trained network. Training runs in parallel; rows come back
/// in request order.
pub fn run_ablation(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    let data = prepare_data(cfg)?;
    let mut trained: Vec<Variant> = Vec::new();
    for v in variants {
        let key = Variant { de: true, ..*v };
        if !trained.contains(&key) {
            trained.push(key);
        }
    }
    let fitted: Vec<(FittedModel, TrainHistory)> = trained
        .par_iter()
        .map(|&v| FittedModel::fit(&data.train, &data.val, &cfg.hidden, v, &cfg.train))
        .collect::<Result<_>>()?;
    variants
        .iter()
        .map(|&variant| {
            let i = trained
                .iter()
                .position(|t| t.exp == variant.exp && t.sn == variant.sn)
                .expect("every variant has a trained network");
            let (base, history) = &fitted[i];
            let model = FittedModel {
                use_density: variant.de,
                ..base.clone()
            };
            let (mut report, _) = evaluate(&model, &data.test, &data.others, &cfg.measures)?;
            report
                .metrics
                .insert("train.epochs".into(), history.epochs.len() as f64);
            report.config = cfg.to_json();
            Ok(AblationRow { variant, report })
        })
        .collect()
}

/// Mean loss of a fitted model on a dataset under the training loss.
pub fn mean_loss(model: &FittedModel, ds: &LabeledDataset, lambda: f64) -> Result<f64> {
    model.network.mean_loss(ds, &LossConfig::new(lambda)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig::from_text(
            "dataset = two_moons\nhidden = 16,16\nn_samples = 200\nmax_epochs = 3\npatience = 3\nood_n = 100\nshift = gaussian_noise\n",
        )
        .unwrap()
    }

    #[test]
    fn variant_round_trip() {
        for v in Variant::lattice() {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(Variant::DAEDL.to_string(), "exp+de+sn");
        assert_eq!(Variant::EDL.to_string(), "none");
        assert!("exp+exp".parse::<Variant>().is_err());
        assert!("tmp".parse::<Variant>().is_err());
        assert_eq!(
            Variant::EDL.parameterization(),
            Parameterization::ReluPlusOne
        );
    }

    #[test]
    fn prepared_data_is_deterministic_and_complete() {
        let cfg = small_config();
        let a = prepare_data(&cfg).unwrap();
        let b = prepare_data(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.others, b.others);
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 200);
        assert_eq!(a.others.len(), 1 + 5);
        assert_eq!(a.others[0].name(), "uniform");
        assert_eq!(a.others[5].name(), "shift_gaussian_noise_5");
    }

    #[test]
    fn density_off_means_unit_scale() {
        let cfg = small_config().with_overrides(&["de=false"]).unwrap();
        let (model, _, data) = train_from_config(&cfg).unwrap();
        let recs = score_dataset(&model, &data.others[0], "uniform").unwrap();
        assert!(recs.iter().all(|r| r.s == 1.0));
    }

    #[test]
    fn report_matches_dump() {
        let cfg = small_config();
        let (model, _, data) = train_from_config(&cfg).unwrap();
        let (report, records) = evaluate(&model, &data.test, &data.others, &cfg.measures).unwrap();
        let parsed = parse_score_dump(&score_dump_csv(&records)).unwrap();
        assert_eq!(parsed, records);
        assert_eq!(
            metrics_from_scores(&parsed, &cfg.measures).unwrap(),
            report.metrics
        );
        assert!(report.metrics.contains_key("ood.uniform.epistemic.aupr"));
        assert!(report
            .metrics
            .contains_key("ood.shift_gaussian_noise_3.aleatoric.auroc"));
    }

    #[test]
    fn grid_layout() {
        let g = GridSpec::default();
        let pts = grid_points(&g).unwrap();
        assert_eq!(pts.len(), 2500);
        assert_eq!(pts[0], (-2.5, -2.0));
        assert_eq!(pts[1].1, -2.0);
        assert_eq!(pts[49], (3.5, -2.0));
        assert_eq!(pts[2499], (3.5, 2.5));
    }

    #[test]
    fn landscape_rejects_non_planar_model() {
        let arch = Architecture {
            input_dim: 3,
            hidden: vec![4],
            num_classes: 2,
        };
        let net = EvidentialNetwork::new(&arch, Parameterization::Exp, true, 0).unwrap();
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.5, 0.0],
            vec![0.2, 1.0, 1.0],
            vec![1.0, 1.0, 0.3],
        ])
        .unwrap();
        let ds = LabeledDataset::new(x, vec![0, 1, 0, 1], 2, "t").unwrap();
        let model = FittedModel::with_density(net, &ds, true).unwrap();
        assert!(landscape(&model, &GridSpec::default()).is_err());
    }
}
