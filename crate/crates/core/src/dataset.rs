//! Simulated datasets and their on-disk form.
//!
//! A dataset directory holds `data.csv` (one device per row: the four
//! parameters followed by the spectrum, 17 significant digits) and a
//! `meta.json` sidecar with the seed, size, split and optics config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use numerics::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{sample_device, simulate, DeviceParams, OpticsConfig, Spectrum};

pub const DATA_FILE: &str = "data.csv";
pub const META_FILE: &str = "meta.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub device: DeviceParams,
    pub spectrum: Spectrum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    /// Records `[0, split_train)` are training data, the rest validation.
    pub split_train: usize,
    pub config: OpticsConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    seed: u64,
    n: usize,
    split_train: usize,
    optics: OpticsConfig,
}

/// Number of training records for a 3:1 split of `n`.
pub fn train_count(n: usize) -> usize {
    n * 3 / 4
}

impl Dataset {
    pub fn train(&self) -> &[Record] {
        &self.records[..self.split_train]
    }

    pub fn validation(&self) -> &[Record] {
        &self.records[self.split_train..]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Record `i` is drawn from substream `i` of `seed`, so any record can be
/// regenerated on its own.
pub fn generate_record(index: usize, seed: u64, cfg: &OpticsConfig) -> Result<Record> {
    let mut rng = Rng::substream(seed, index as u64);
    let device = sample_device(&mut rng, cfg);
    let spectrum = simulate(&device, cfg)?;
    Ok(Record { device, spectrum })
}

pub fn generate_dataset(n: usize, seed: u64, cfg: &OpticsConfig) -> Result<Dataset> {
    cfg.validate()?;
    if n < 4 {
        return Err(Error::TooFewRows { needed: 4, found: n });
    }
    let records = (0..n)
        .map(|i| generate_record(i, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        records,
        split_train: train_count(n),
        config: cfg.clone(),
        seed,
    })
}

/// `lambda1_nm,lambda2_nm,h1_nm,h2_nm,T0000,…`
pub fn csv_header(grid_points: usize) -> String {
    let mut h = DeviceParams::NAMES.join(",");
    for k in 0..grid_points {
        write!(h, ",T{k:04}").expect("write to string");
    }
    h
}

/// Spectrum-only header `T0000,…`, used for single target files.
pub fn spectrum_header(grid_points: usize) -> String {
    (0..grid_points).map(|k| format!("T{k:04}")).collect::<Vec<_>>().join(",")
}

/// 17 significant digits: exact round trip for every `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn dataset_write(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut out = String::with_capacity(ds.len() * (ds.config.grid_points + 4) * 24);
    out.push_str(&csv_header(ds.config.grid_points));
    out.push('\n');
    for r in &ds.records {
        let fields: Vec<String> = r
            .device
            .to_array()
            .iter()
            .chain(r.spectrum.values())
            .map(|&v| fmt_f64(v))
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, out).map_err(Error::io(&data_path))?;

    let meta = Meta {
        version: DATASET_VERSION,
        seed: ds.seed,
        n: ds.len(),
        split_train: ds.split_train,
        optics: ds.config.clone(),
    };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(Error::io(&meta_path))?;
    Ok(())
}

/// Parse one comma-separated row of floats; `line` is 1-based.
pub(crate) fn parse_row(path: &Path, line: usize, text: &str, width: usize) -> Result<Vec<f64>> {
    let fields: Vec<&str> = text.split(',').collect();
    if fields.len() != width {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("expected {width} columns, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .enumerate()
        .map(|(col, f)| {
            f.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("column {}: {e}", col + 1),
            })
        })
        .collect()
}

/// A single target spectrum, with the device that produced it when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub device: Option<DeviceParams>,
    pub spectrum: Spectrum,
}

/// One-row CSV: spectrum columns only, or the full dataset row when the device is known.
pub fn target_write(path: &Path, target: &Target) -> Result<()> {
    let m = target.spectrum.len();
    let (header, mut values) = match &target.device {
        Some(d) => (csv_header(m), d.to_array().to_vec()),
        None => (spectrum_header(m), Vec::new()),
    };
    values.extend_from_slice(target.spectrum.values());
    let row: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
    fs::write(path, format!("{header}\n{}\n", row.join(","))).map_err(Error::io(path))
}

pub fn target_read(path: &Path, grid_points: usize) -> Result<Target> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let parse_err = |line, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?.trim_end();
    let with_device = if header == csv_header(grid_points) {
        true
    } else if header == spectrum_header(grid_points) {
        false
    } else {
        return Err(parse_err(
            1,
            format!("expected {grid_points} spectrum columns T0000.., optionally preceded by the device columns"),
        ));
    };
    let row = lines.next().ok_or_else(|| parse_err(2, "missing data row".into()))?;
    if lines.next().is_some() {
        return Err(parse_err(3, "target file must contain exactly one data row".into()));
    }
    let width = grid_points + if with_device { 4 } else { 0 };
    let v = parse_row(path, 2, row, width)?;
    let (device, spectrum) = if with_device {
        (Some(DeviceParams::from_slice(&v[..4])?), v[4..].to_vec())
    } else {
        (None, v)
    };
    Ok(Target {
        device,
        spectrum: Spectrum(spectrum),
    })
}

pub fn dataset_read(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
    let meta: Meta = serde_json::from_str(&meta_text)?;
    if meta.version != DATASET_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset version {} (expected {DATASET_VERSION})",
            meta.version
        )));
    }
    meta.optics.validate()?;
    let m = meta.optics.grid_points;

    let data_path = dir.join(DATA_FILE);
    let text = fs::read_to_string(&data_path).map_err(Error::io(&data_path))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: data_path.clone(),
        line: 1,
        msg: "missing header".into(),
    })?;
    let expected = csv_header(m);
    if header.trim_end() != expected {
        let cols = header.split(',').count();
        let msg = if cols != m + 4 {
            format!("header has {cols} columns but meta.json implies {}", m + 4)
        } else {
            "malformed header".to_string()
        };
        return Err(Error::Parse {
            path: data_path,
            line: 1,
            msg,
        });
    }

    let mut records = Vec::with_capacity(meta.n);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(&data_path, i + 2, line, m + 4)?;
        records.push(Record {
            device: DeviceParams::from_slice(&row[..4])?,
            spectrum: Spectrum(row[4..].to_vec()),
        });
    }
    if records.len() != meta.n {
        return Err(Error::Dataset(format!(
            "meta.json declares {} records, data.csv has {}",
            meta.n,
            records.len()
        )));
    }
    if meta.split_train > meta.n {
        return Err(Error::Dataset(format!(
            "split_train {} exceeds record count {}",
            meta.split_train, meta.n
        )));
    }
    Ok(Dataset {
        records,
        split_train: meta.split_train,
        config: meta.optics,
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let cfg = OpticsConfig::default();
        let ds = generate_dataset(4, 1, &cfg).unwrap();
        assert_eq!((ds.train().len(), ds.validation().len()), (3, 1));
        assert_eq!(train_count(60_000), 45_000);
        assert_eq!(60_000 - train_count(60_000), 15_000);
        assert!(generate_dataset(3, 1, &cfg).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = OpticsConfig::default();
        assert_eq!(
            generate_dataset(50, 8, &cfg).unwrap(),
            generate_dataset(50, 8, &cfg).unwrap()
        );
        assert_ne!(
            generate_dataset(50, 8, &cfg).unwrap().records,
            generate_dataset(50, 9, &cfg).unwrap().records
        );
    }

    #[test]
    fn roundtrip_exact() {
        let cfg = OpticsConfig::default();
        let ds = generate_dataset(100, 3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dataset_write(&ds, dir.path()).unwrap();
        assert_eq!(dataset_read(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_column_names_row() {
        let cfg = OpticsConfig::default();
        let ds = generate_dataset(8, 3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dataset_write(&ds, dir.path()).unwrap();
        let path = dir.path().join(DATA_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[3].rfind(',').unwrap();
        lines[3].truncate(cut);
        fs::write(&path, lines.join("\n")).unwrap();
        match dataset_read(dir.path()).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 4);
                assert!(msg.contains("columns"), "{msg}");
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn sidecar_width_mismatch() {
        let cfg = OpticsConfig::default();
        let ds = generate_dataset(8, 3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dataset_write(&ds, dir.path()).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let mut meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
        meta["optics"]["grid_points"] = 64.into();
        fs::write(&meta_path, meta.to_string()).unwrap();
        assert!(matches!(dataset_read(dir.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn target_files_roundtrip() {
        let cfg = OpticsConfig::default();
        let r = generate_record(3, 1, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        for device in [Some(r.device), None] {
            let t = Target {
                device,
                spectrum: r.spectrum.clone(),
            };
            target_write(&path, &t).unwrap();
            assert_eq!(target_read(&path, 128).unwrap(), t);
        }
        assert!(target_read(&path, 64).is_err());
        fs::write(&path, format!("{}\n1,2\n", spectrum_header(2))).unwrap();
        assert!(target_read(&path, 2).is_ok());
        fs::write(&path, format!("{}\n1,2\n3,4\n", spectrum_header(2))).unwrap();
        assert!(target_read(&path, 2).is_err());
    }
}
