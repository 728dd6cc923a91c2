//! Files written into an experiment's output directory.

use std::path::{Component, Path, PathBuf};

use fedselect_core::blob;
use fedselect_core::mask::MaskVector;
use fedselect_core::metrics::{AccuracySeries, IouMatrix};
use fedselect_core::model::{ModelSpec, ParamVector};
use fedselect_core::server::RoundReport;
use serde::Serialize;

use crate::error::{Result, RunError};

pub const ROUNDS_HEADER: [&str; 7] = [
    "round",
    "client_id",
    "loss",
    "accuracy",
    "personal_params",
    "bytes_up",
    "bytes_down",
];

/// A directory that every artifact of one run is written under.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| RunError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves `name` below the root, refusing anything that could escape it.
    pub fn path(&self, name: impl AsRef<Path>) -> Result<PathBuf> {
        let name = name.as_ref();
        if !name.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(RunError::format(
                name,
                "output names must stay inside the output directory",
            ));
        }
        Ok(self.root.join(name))
    }

    pub fn subdir(&self, name: impl AsRef<Path>) -> Result<OutputDir> {
        OutputDir::create(self.path(name)?)
    }

    pub fn write_bytes(&self, name: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| RunError::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_vec_pretty(value).map_err(|e| RunError::format(name.as_ref(), e))?;
        text.push(b'\n');
        self.write_bytes(name, &text)
    }

    /// Writes a CSV built from a header and rows of already formatted cells.
    pub fn write_csv<I, R>(&self, name: impl AsRef<Path>, header: &[&str], rows: I) -> Result<PathBuf>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        let name = name.as_ref();
        w.write_record(header).map_err(|e| RunError::format(name, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| RunError::format(name, e))?;
        }
        let bytes = w.into_inner().map_err(|e| RunError::format(name, e.to_string()))?;
        self.write_bytes(name, &bytes)
    }
}

pub fn write_rounds_csv(dir: &OutputDir, name: &str, reports: &[RoundReport]) -> Result<PathBuf> {
    let rows = reports.iter().flat_map(|r| {
        r.clients.iter().map(move |c| {
            vec![
                r.round.to_string(),
                c.client_id.to_string(),
                c.loss.to_string(),
                c.accuracy.to_string(),
                c.personal_params.to_string(),
                c.bytes_up.to_string(),
                c.bytes_down.to_string(),
            ]
        })
    });
    dir.write_csv(name, &ROUNDS_HEADER, rows)
}

/// Square grid; the first row and the first column hold client ids.
pub fn write_iou_csv(dir: &OutputDir, name: &str, m: &IouMatrix) -> Result<PathBuf> {
    let ids: Vec<String> = m.client_ids.iter().map(|id| id.to_string()).collect();
    let mut header = vec!["client_id"];
    header.extend(ids.iter().map(String::as_str));
    let n = m.size();
    let rows = (0..n).map(|i| {
        std::iter::once(ids[i].clone())
            .chain((0..n).map(move |j| m.get(i, j).to_string()))
            .collect::<Vec<_>>()
    });
    dir.write_csv(name, &header, rows)
}

pub fn write_accuracy_curves(dir: &OutputDir, name: &str, series: &[AccuracySeries]) -> Result<PathBuf> {
    let rows = series.iter().flat_map(|s| {
        s.points
            .iter()
            .map(move |(round, acc)| vec![round.to_string(), s.label.clone(), acc.to_string()])
    });
    dir.write_csv(name, &["round", "label", "mean_accuracy"], rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartCount {
    pub len: usize,
    pub ones: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDensity {
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: PartCount,
    pub biases: PartCount,
    pub density: f64,
}

/// Per-layer popcounts of a mask over a model's parameter layout.
pub fn layer_densities(spec: &ModelSpec, mask: &MaskVector) -> Vec<LayerDensity> {
    spec.layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = mask.count_ones_in(l.weights());
            let b = mask.count_ones_in(l.biases());
            let len = l.range().len();
            LayerDensity {
                layer: i,
                fan_in: l.fan_in,
                fan_out: l.fan_out,
                weights: PartCount {
                    len: l.weights().len(),
                    ones: w,
                },
                biases: PartCount {
                    len: l.biases().len(),
                    ones: b,
                },
                density: (w + b) as f64 / len as f64,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct MaskSummary<'a> {
    len: usize,
    ones: usize,
    fraction: f64,
    layers: Vec<LayerDensity>,
    mask: &'a MaskVector,
}

#[derive(Serialize)]
struct ParamSummary<'a> {
    spec: &'a ModelSpec,
    len: usize,
    l2_norm: f64,
    values: &'a [f64],
}

/// `<stem>.bin` blob plus a `<stem>.json` summary with the readable form.
pub fn write_mask(dir: &OutputDir, stem: &str, spec: &ModelSpec, mask: &MaskVector) -> Result<()> {
    dir.write_bytes(format!("{stem}.bin"), &blob::encode_mask(mask))?;
    let ones = mask.count_ones();
    dir.write_json(
        format!("{stem}.json"),
        &MaskSummary {
            len: mask.len(),
            ones,
            fraction: if mask.is_empty() {
                0.0
            } else {
                ones as f64 / mask.len() as f64
            },
            layers: layer_densities(spec, mask),
            mask,
        },
    )?;
    Ok(())
}

pub fn write_params(dir: &OutputDir, stem: &str, params: &ParamVector) -> Result<()> {
    dir.write_bytes(format!("{stem}.bin"), &blob::encode_params(params))?;
    dir.write_json(
        format!("{stem}.json"),
        &ParamSummary {
            spec: params.spec(),
            len: params.len(),
            l2_norm: params.values().iter().map(|v| v * v).sum::<f64>().sqrt(),
            values: params.values(),
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_stay_inside_root() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = OutputDir::create(tmp.path()).unwrap();
        assert!(dir.path("a/b.csv").is_ok());
        assert!(dir.path("../x").is_err());
        assert!(dir.path("/etc/passwd").is_err());
        assert!(dir.path("a/../../x").is_err());
    }

    #[test]
    fn layer_density_counts() {
        let spec = ModelSpec::new(4, vec![3], 2).unwrap();
        let mask = MaskVector::from_indices(23, [0, 1, 12, 15, 22]).unwrap();
        let d = layer_densities(&spec, &mask);
        assert_eq!(d[0].weights, PartCount { len: 12, ones: 2 });
        assert_eq!(d[0].biases, PartCount { len: 3, ones: 1 });
        assert_eq!(d[1].weights, PartCount { len: 6, ones: 1 });
        assert_eq!(d[1].biases, PartCount { len: 2, ones: 1 });
        assert_eq!(d[1].density, 0.25);
    }

    #[test]
    fn csv_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = OutputDir::create(tmp.path()).unwrap();
        let m = IouMatrix {
            client_ids: vec![0, 1],
            values: vec![1.0, 0.5, 0.5, 1.0],
            range: 0..4,
            empty_pairs: 0,
        };
        let p = write_iou_csv(&dir, "iou.csv", &m).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "client_id,0,1\n0,1,0.5\n1,0.5,1\n");
    }
}
