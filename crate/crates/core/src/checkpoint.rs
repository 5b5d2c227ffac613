//! Binary checkpoint container for a trained network, its GDA density model
//! and the configuration that produced them.
//!
//! All integers are little-endian `u32`, all reals little-endian IEEE-754
//! `f64`, so a save/load cycle is bit-exact. Layout (version 1):
//!
//! ```text
//! magic            8 bytes  b"DAEDLCKP"
//! version          u32      1
//! config_len       u32      byte length of the UTF-8 JSON config that follows
//! config           [u8]     {"train": TrainConfig, "run": <free-form echo>}
//! parameterization u8       0 = exp, 1 = relu_plus_one, 2 = softplus_plus_one
//! spectral_norm    u8       0 / 1
//! use_density      u8       0 / 1 (prediction scales logits by s)
//! n_layers         u32      feature layers + 1 (the head comes last)
//! per layer:
//!   activation     u8       0 = relu, 1 = identity
//!   rows, cols     u32, u32
//!   weights        rows·cols f64, row-major
//!   bias           rows f64
//!   u              rows f64 (power-iteration vector)
//! has_gda          u8
//! if has_gda:
//!   covariance     u8       0 = full, 1 = diagonal
//!   classes, dim   u32, u32
//!   d_min, d_max   f64, f64
//!   per class:
//!     weight, jitter, log_det  f64 ×3
//!     mean                     dim f64
//!     cholesky factor          dim·(dim+1)/2 f64, lower triangle row by row
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::{CovarianceKind, GdaModel};
use crate::error::{format_err, Error, Result};
use crate::linalg::Matrix;
use crate::network::{Activation, DenseLayer, EvidentialNetwork, TrainConfig};
use crate::predict::Parameterization;

pub const MAGIC: &[u8; 8] = b"DAEDLCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: EvidentialNetwork,
    pub gda: Option<GdaModel>,
    /// Whether prediction uses the density scale (`false` means `s ≡ 1`).
    pub use_density: bool,
    pub train_config: TrainConfig,
    /// Free-form run configuration echo.
    pub run_config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    train: TrainConfig,
    run: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let cfg = serde_json::to_vec(&ConfigBlock {
            train: self.train_config.clone(),
            run: self.run_config.clone(),
        })?;
        put_u32(&mut w, len_u32(cfg.len())?);
        w.extend_from_slice(&cfg);
        w.push(match self.network.parameterization {
            Parameterization::Exp => 0,
            Parameterization::ReluPlusOne => 1,
            Parameterization::SoftplusPlusOne => 2,
        });
        w.push(u8::from(self.network.spectral_norm_enabled));
        w.push(u8::from(self.use_density));
        let layers: Vec<&DenseLayer> = self
            .network
            .feature_layers
            .iter()
            .chain(std::iter::once(&self.network.head))
            .collect();
        put_u32(&mut w, len_u32(layers.len())?);
        for l in layers {
            w.push(match l.activation {
                Activation::Relu => 0,
                Activation::Identity => 1,
            });
            put_u32(&mut w, len_u32(l.weights.rows())?);
            put_u32(&mut w, len_u32(l.weights.cols())?);
            put_f64s(&mut w, l.weights.as_slice());
            put_f64s(&mut w, &l.bias);
            put_f64s(&mut w, &l.u);
        }
        match &self.gda {
            None => w.push(0),
            Some(g) => {
                w.push(1);
                w.push(match g.covariance {
                    CovarianceKind::Full => 0,
                    CovarianceKind::Diagonal => 1,
                });
                let h = g.feature_dim();
                put_u32(&mut w, len_u32(g.num_classes())?);
                put_u32(&mut w, len_u32(h)?);
                put_f64s(&mut w, &[g.d_min, g.d_max]);
                for c in 0..g.num_classes() {
                    put_f64s(&mut w, &[g.weights[c], g.jitter[c], g.log_dets[c]]);
                    put_f64s(&mut w, &g.means[c]);
                    let l = &g.cov_factors[c];
                    for i in 0..h {
                        put_f64s(&mut w, &l.row(i)[..=i]);
                    }
                }
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(format_err(0, "not a checkpoint file (bad magic)"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(
                at as u64,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let cfg_len = r.u32()? as usize;
        let at = r.pos;
        let cfg: ConfigBlock = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| format_err(at as u64, format!("bad config block: {e}")))?;
        let at = r.pos;
        let parameterization = match r.u8()? {
            0 => Parameterization::Exp,
            1 => Parameterization::ReluPlusOne,
            2 => Parameterization::SoftplusPlusOne,
            t => {
                return Err(format_err(
                    at as u64,
                    format!("unknown parameterization tag {t}"),
                ))
            }
        };
        let spectral = r.flag()?;
        let use_density = r.flag()?;
        let n_layers = r.u32()? as usize;
        if n_layers < 2 {
            return Err(format_err(
                r.pos as u64,
                "checkpoint needs at least one feature layer and a head",
            ));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let at = r.pos;
            let activation = match r.u8()? {
                0 => Activation::Relu,
                1 => Activation::Identity,
                t => return Err(format_err(at as u64, format!("unknown activation tag {t}"))),
            };
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let weights = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
            let bias = r.f64s(rows)?;
            let u = r.f64s(rows)?;
            let mut layer = DenseLayer::from_parts(weights, bias, activation)
                .map_err(|e| format_err(at as u64, e.to_string()))?;
            layer.u = u;
            layers.push(layer);
        }
        let head = layers.pop().expect("n_layers ≥ 2");
        let network = EvidentialNetwork::from_layers(layers, head, spectral, parameterization)
            .map_err(|e| format_err(r.pos as u64, e.to_string()))?;

        let gda = if r.flag()? {
            let at = r.pos;
            let covariance = match r.u8()? {
                0 => CovarianceKind::Full,
                1 => CovarianceKind::Diagonal,
                t => return Err(format_err(at as u64, format!("unknown covariance tag {t}"))),
            };
            let classes = r.u32()? as usize;
            let h = r.u32()? as usize;
            let d_min = r.f64()?;
            let d_max = r.f64()?;
            let mut g = GdaModel {
                weights: Vec::with_capacity(classes),
                means: Vec::with_capacity(classes),
                cov_factors: Vec::with_capacity(classes),
                log_dets: Vec::with_capacity(classes),
                jitter: Vec::with_capacity(classes),
                covariance,
                d_min,
                d_max,
            };
            for _ in 0..classes {
                g.weights.push(r.f64()?);
                g.jitter.push(r.f64()?);
                g.log_dets.push(r.f64()?);
                g.means.push(r.f64s(h)?);
                let mut l = Matrix::zeros(h, h);
                for i in 0..h {
                    let row = r.f64s(i + 1)?;
                    l.row_mut(i)[..=i].copy_from_slice(&row);
                }
                g.cov_factors.push(l);
            }
            if h != network.feature_dim() {
                return Err(format_err(
                    at as u64,
                    "density model dimension does not match network features",
                ));
            }
            Some(g)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(format_err(r.pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            network,
            gda,
            use_density,
            train_config: cfg.train,
            run_config: cfg.run,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Domain(format!("length {n} does not fit in u32")))
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(k)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                format_err(
                    self.pos as u64,
                    format!("truncated checkpoint: {k} more bytes expected"),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format_err(at as u64, format!("expected 0/1 flag, got {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| format_err(self.pos as u64, "length overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons;
    use crate::network::Architecture;

    fn sample_checkpoint() -> Checkpoint {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![5, 3],
            num_classes: 2,
        };
        let network = EvidentialNetwork::new(&arch, Parameterization::Exp, true, 4).unwrap();
        let data = two_moons(40, 0.1, 0).unwrap();
        let feats: Vec<Vec<f64>> = (0..data.len())
            .map(|i| network.features(data.sample(i).0).unwrap())
            .collect();
        let gda = GdaModel::fit(&Matrix::from_rows(&feats).unwrap(), data.labels(), 2).unwrap();
        Checkpoint {
            network,
            gda: Some(gda),
            use_density: true,
            train_config: TrainConfig::default(),
            run_config: serde_json::json!({"dataset": "two_moons"}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
