//! On-disk formats.
//!
//! Metadata CSV: header `scan_id,label,source`, label empty for the test
//! split. Predictions CSV: header `scan_id,label`.
//!
//! Bags live one file per scan under `<dir>/<split>/`: `<scan_id>.bin` holds
//! the N×d_in slice matrix (magic `SBAG`, u32 version, u32 rows, u32 cols,
//! then row-major f64, all little-endian) and `<scan_id>.json` is a sidecar
//! with scan_id, source, and label.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ScanBag, ScanMeta, SourceId, Split};
use crate::error::{Error, Result};
use crate::numerics::Vector;

const BAG_MAGIC: &[u8; 4] = b"SBAG";
const BAG_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BagSidecar {
    scan_id: String,
    source: usize,
    label: Option<u8>,
}

/// Load the metadata CSV (`scan_id,label,source`) into a dataset skeleton.
pub fn load_metadata_csv(path: &Path, source_count: usize) -> Result<Vec<ScanMeta>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["scan_id", "label", "source"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidData(format!(
            "{}: expected header `scan_id,label,source`, got `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let scan_id = record.get(0).unwrap_or("").to_string();
        if scan_id.is_empty() {
            return Err(Error::InvalidData(format!(
                "{}: empty scan_id",
                path.display()
            )));
        }
        if !seen.insert(scan_id.clone()) {
            return Err(Error::DuplicateScanId(scan_id));
        }
        let label_field = record.get(1).unwrap_or("");
        let label = if label_field.is_empty() {
            None
        } else {
            let l: u8 = label_field
                .parse()
                .map_err(|_| Error::InvalidData(format!("bad label `{label_field}`")))?;
            if l > 1 {
                return Err(Error::InvalidData(format!("label {l} not in {{0,1}}")));
            }
            Some(l)
        };
        let source: usize = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::InvalidData(format!("bad source for scan {scan_id}")))?;
        if source >= source_count {
            return Err(Error::InvalidData(format!(
                "scan {scan_id}: unknown source {source} (S={source_count})"
            )));
        }
        rows.push(ScanMeta {
            scan_id,
            label,
            source: SourceId(source),
        });
    }
    Ok(rows)
}

pub fn write_metadata_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["scan_id", "label", "source"])?;
    for bag in &dataset.bags {
        let label = bag.label.map(|l| l.to_string()).unwrap_or_default();
        writer.write_record([&bag.scan_id, &label, &bag.source.0.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Predictions CSV: `scan_id,label`.
pub fn write_predictions_csv(path: &Path, predictions: &[(String, u8)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["scan_id", "label"])?;
    for (scan_id, label) in predictions {
        writer.write_record([scan_id.as_str(), &label.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_predictions_csv(path: &Path) -> Result<Vec<(String, u8)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["scan_id", "label"] {
        return Err(Error::InvalidData(format!(
            "{}: expected header `scan_id,label`",
            path.display()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let scan_id = record.get(0).unwrap_or("").to_string();
        if !seen.insert(scan_id.clone()) {
            return Err(Error::DuplicateScanId(scan_id));
        }
        let label: u8 = record
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::InvalidData(format!("bad label for scan {scan_id}")))?;
        rows.push((scan_id, label));
    }
    Ok(rows)
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_bag(dir: &Path, bag: &ScanBag) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(format!("{}.bin", bag.scan_id)))?);
    w.write_all(BAG_MAGIC)?;
    write_u32(&mut w, BAG_VERSION)?;
    write_u32(&mut w, bag.num_slices() as u32)?;
    write_u32(&mut w, bag.dim() as u32)?;
    for slice in &bag.slices {
        for &x in slice.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    let sidecar = BagSidecar {
        scan_id: bag.scan_id.clone(),
        source: bag.source.0,
        label: bag.label,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(dir.join(format!("{}.json", bag.scan_id)), json)?;
    Ok(())
}

pub fn load_bag(dir: &Path, scan_id: &str) -> Result<ScanBag> {
    let sidecar: BagSidecar =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{scan_id}.json")))?)?;
    if sidecar.scan_id != scan_id {
        return Err(Error::InvalidData(format!(
            "sidecar scan_id `{}` does not match file `{scan_id}`",
            sidecar.scan_id
        )));
    }
    let mut r = BufReader::new(File::open(dir.join(format!("{scan_id}.bin")))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BAG_MAGIC {
        return Err(Error::InvalidData(format!("{scan_id}.bin: bad magic")));
    }
    let version = read_u32(&mut r)?;
    if version != BAG_VERSION {
        return Err(Error::InvalidData(format!(
            "{scan_id}.bin: unsupported version {version}"
        )));
    }
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let mut slices = Vec::with_capacity(rows);
    let mut buf = vec![0u8; cols * 8];
    for _ in 0..rows {
        r.read_exact(&mut buf)?;
        let v: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        slices.push(Vector(v));
    }
    ScanBag::new(scan_id.to_string(), SourceId(sidecar.source), sidecar.label, slices)
}

/// Save every bag of a dataset under `<dir>/<split>/` and write the split's
/// metadata CSV to `<dir>/metadata_<split>.csv`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let split_dir = dir.join(dataset.split.to_string());
    for bag in &dataset.bags {
        save_bag(&split_dir, bag)?;
    }
    write_metadata_csv(
        &dir.join(format!("metadata_{}.csv", dataset.split)),
        dataset,
    )
}

/// Load a full split back from `<dir>/<split>/`.
pub fn load_dataset(dir: &Path, split: Split, source_count: usize) -> Result<Dataset> {
    let split_dir = dir.join(split.to_string());
    let mut ids: Vec<String> = fs::read_dir(&split_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".json").map(str::to_string)
        })
        .collect();
    ids.sort();
    let bags = ids
        .iter()
        .map(|id| load_bag(&split_dir, id))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(split, bags, source_count)
}
