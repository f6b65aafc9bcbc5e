//! On-disk formats: versioned JSON model files, atomic writes, CSV dumps.
//!
//! A model file is a JSON object
//! `{format, version, config_hash, mixture, network, log_normalizer}` where
//! `mixture` holds the base's raw tensors and `network` (optional) holds the
//! correction's config and its named parameter tensors in slot order. Every
//! tensor is `{shape, data}` with floats written in round-trip precision.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dv::GibbsDensity;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::network::{CorrectionNetwork, NetworkConfig};
use crate::samplers::TrajectoryPoint;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "remedi-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecord {
    pub diagonal: bool,
    pub weight_logits: Tensor,
    pub means: Tensor,
    pub chol_raw: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    pub config: NetworkConfig,
    pub dim: usize,
    pub parameters: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config_hash: Option<String>,
    pub mixture: MixtureRecord,
    pub network: Option<NetworkRecord>,
    pub log_normalizer: Option<(f64, usize)>,
}

impl ModelFile {
    pub fn from_gibbs(gibbs: &GibbsDensity, config_hash: Option<String>) -> Self {
        let b = &gibbs.base;
        Self {
            format: MODEL_FORMAT.to_owned(),
            version: MODEL_VERSION,
            config_hash,
            mixture: MixtureRecord {
                diagonal: b.is_diagonal(),
                weight_logits: b.weight_logits().clone(),
                means: b.means().clone(),
                chol_raw: b.chol_raw().clone(),
            },
            network: gibbs.network.as_ref().map(|net| NetworkRecord {
                config: net.config().clone(),
                dim: net.dim(),
                parameters: net
                    .params()
                    .slots()
                    .iter()
                    .map(|s| NamedTensor { name: s.name.clone(), tensor: s.value.clone() })
                    .collect(),
            }),
            log_normalizer: gibbs.log_normalizer,
        }
    }

    pub fn into_gibbs(self) -> Result<GibbsDensity> {
        if self.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!("unknown format `{}`", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported version {} (this build reads {MODEL_VERSION})",
                self.version
            )));
        }
        let m = self.mixture;
        let base = GaussianMixture::new(m.weight_logits, m.means, m.chol_raw, m.diagonal)?;
        let mut gibbs = match self.network {
            None => GibbsDensity::base_only(base),
            Some(rec) => {
                let slots = rec.parameters.into_iter().map(|p| (p.name, p.tensor)).collect();
                let net = CorrectionNetwork::from_parts(rec.config, rec.dim, Some(base.clone()), slots)?;
                GibbsDensity::new(base, net)?
            }
        };
        gibbs.log_normalizer = self.log_normalizer;
        Ok(gibbs)
    }
}

/// Write `bytes` to a temporary file beside `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))
}

pub fn save_model(path: &Path, gibbs: &GibbsDensity, config_hash: Option<String>) -> Result<()> {
    write_json(path, &ModelFile::from_gibbs(gibbs, config_hash))
}

pub fn load_model(path: &Path) -> Result<GibbsDensity> {
    read_json::<ModelFile>(path)?.into_gibbs().map_err(|e| e.context(format!("loading model {}", path.display())))
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv encoding: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))
}

fn coord_header(d: usize) -> impl Iterator<Item = String> {
    (0..d).map(|j| format!("x{j}"))
}

/// One row per point, columns `x0..x{d-1}`, floats in shortest round-trip form.
pub fn write_samples_csv(path: &Path, samples: &Tensor) -> Result<()> {
    let header: Vec<String> = coord_header(samples.cols()).collect();
    let rows = (0..samples.rows()).map(|i| samples.row(i).iter().map(f64::to_string).collect());
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Columns `chain, step, x0..x{d-1}`.
pub fn write_trajectory_csv(path: &Path, points: &[TrajectoryPoint], dim: usize) -> Result<()> {
    let header: Vec<String> = ["chain".to_owned(), "step".to_owned()].into_iter().chain(coord_header(dim)).collect();
    let rows = points.iter().map(|p| {
        [p.chain.to_string(), p.step.to_string()].into_iter().chain(p.state.iter().map(f64::to_string)).collect()
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::rng;

    #[test]
    fn model_round_trip_is_exact() {
        let data = crate::datasets::DatasetSpec::Gaussian { mean: vec![0.0, 1.0], std: 0.7 }.generate(200, 1).unwrap();
        let base = GaussianMixture::initialize(&data, 3, false, &mut rng::seeded(2)).unwrap();
        let cfg = NetworkConfig { widths: vec![6, 5], ..NetworkConfig::default() };
        let mut net = CorrectionNetwork::new(cfg, 2, Some(base.clone()), &mut rng::seeded(3)).unwrap();
        let h = net.slot_index("head").unwrap();
        *net.params_mut().value_mut(h) = Tensor::filled(&[3, 5], 0.1 / 3.0);
        let mut gibbs = GibbsDensity::new(base, net).unwrap();
        gibbs.estimate_log_normalizer(100, 4).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &gibbs, Some("abc".into())).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.log_normalizer, gibbs.log_normalizer);
        assert_eq!(back.log_unnormalized(&data).unwrap(), gibbs.log_unnormalized(&data).unwrap());
        let again = ModelFile::from_gibbs(&back, Some("abc".into()));
        assert_eq!(again, read_json::<ModelFile>(&path).unwrap());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut f = ModelFile::from_gibbs(&GibbsDensity::base_only(GaussianMixture::standard_normal(2)), None);
        f.version = 99;
        assert!(matches!(f.into_gibbs(), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("x.csv");
        write_samples_csv(&path, &Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 1e-17]).unwrap()).unwrap();
        let names: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
        let back = crate::datasets::load_delimited(&path, b',', true).unwrap();
        assert_eq!(back.data(), &[0.1, 0.2, 0.3, 1e-17]);
    }
}
