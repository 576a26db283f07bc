//! Dataset files.
//!
//! A dataset is line-delimited JSON. The first line is the header
//! `{"format":"mmsurv-dataset","version":1}`; every further line is one
//! patient object:
//!
//! | field | type | |
//! |---|---|---|
//! | `patient_id` | string | unique |
//! | `observed_time_hours` | number ≥ 0 | |
//! | `event` | bool | death observed |
//! | `saps_vector` | 15 numbers | exactly one of `saps_vector`, `saps` |
//! | `saps` | measurement object | scored to per-category points on load |
//! | `labels` | 14 × 0/1 | optional |
//! | `text` | 768 numbers or sidecar ref | optional |
//! | `image` | 1024 numbers or sidecar ref | optional |
//! | `gcn` | 224 numbers or sidecar ref | optional |
//! | `tokens` | sidecar ref (`m×768`) | optional |
//!
//! A sidecar ref is `{"file": "<path>", "offset": <byte offset>}`, with
//! relative paths resolved against the dataset's directory. A sidecar
//! record is `rows: u32 LE`, `cols: u32 LE`, then `rows·cols` f32 LE values
//! in row-major order; vectors are stored as one row.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::{Dataset, FeatureBundle, Modality, SidecarRef};
use crate::error::{Error, Result};
use crate::saps::{risk_factor_vector, AdmissionType, ChronicDisease, SapsMeasurements};
use crate::survival::{Cohort, SurvivalRecord};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "mmsurv-dataset";
pub const DATASET_VERSION: u32 = 1;

const FIELDS: [&str; 10] = [
    "patient_id",
    "observed_time_hours",
    "event",
    "saps_vector",
    "saps",
    "labels",
    "text",
    "image",
    "gcn",
    "tokens",
];

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum VectorField {
    Inline(Vec<f64>),
    Sidecar(SidecarRef),
}

/// Reads sidecar records, caching whole files.
#[derive(Default)]
pub struct SidecarReader {
    files: HashMap<PathBuf, Vec<u8>>,
}

impl SidecarReader {
    pub fn read(&mut self, r: &SidecarRef) -> Result<Tensor> {
        if !self.files.contains_key(&r.file) {
            let bytes = std::fs::read(&r.file).map_err(|e| Error::io(&r.file, e))?;
            self.files.insert(r.file.clone(), bytes);
        }
        let bytes = &self.files[&r.file];
        let bad = |detail: String| Error::Input(format!("{}@{}: {detail}", r.file.display(), r.offset));
        let start = usize::try_from(r.offset).map_err(|_| bad("offset out of range".into()))?;
        let header = bytes
            .get(start..start + 8)
            .ok_or_else(|| bad("record header past end of file".into()))?;
        let rows = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(header[4..].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(start + 8..start + 8 + rows * cols * 4)
            .ok_or_else(|| bad(format!("{rows}×{cols} record past end of file")))?;
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(vec![rows, cols], values).map_err(|e| bad(e.to_string()))
    }
}

/// Appends sidecar records to one file.
pub struct SidecarWriter {
    out: BufWriter<File>,
    path: PathBuf,
    offset: u64,
}

impl SidecarWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(SidecarWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            offset: 0,
        })
    }

    /// Writes one record and returns its absolute reference.
    pub fn write(&mut self, rows: usize, cols: usize, values: &[f64]) -> Result<SidecarRef> {
        assert_eq!(rows * cols, values.len());
        let offset = self.offset;
        let mut buf = Vec::with_capacity(8 + values.len() * 4);
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for &v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.offset += buf.len() as u64;
        Ok(SidecarRef {
            file: std::path::absolute(&self.path).map_err(|e| Error::io(&self.path, e))?,
            offset,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn dataset_dir(path: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
    Ok(abs.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn field<T: DeserializeOwned>(obj: &mut Map<String, Value>, name: &str, row: usize) -> Result<Option<T>> {
    match obj.remove(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| Error::Schema {
            row,
            field: name.into(),
            detail: e.to_string(),
        }),
    }
}

fn required<T: DeserializeOwned>(obj: &mut Map<String, Value>, name: &str, row: usize) -> Result<T> {
    field(obj, name, row)?.ok_or_else(|| Error::Schema {
        row,
        field: name.into(),
        detail: "missing".into(),
    })
}

/// Loads a dataset. Errors carry the 1-based line number and field name.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dir = dataset_dir(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Schema {
            row: 1,
            field: "format".into(),
            detail: "empty file".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Schema {
        row: 1,
        field: "format".into(),
        detail: e.to_string(),
    })?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Schema {
            row: 1,
            field: "format".into(),
            detail: format!("unsupported {} v{}", header.format, header.version),
        });
    }

    let mut sidecars = SidecarReader::default();
    let mut records = Vec::new();
    let mut features = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Schema {
            row,
            field: "<line>".into(),
            detail: e.to_string(),
        })?;
        let Value::Object(mut obj) = value else {
            return Err(Error::Schema {
                row,
                field: "<line>".into(),
                detail: "expected an object".into(),
            });
        };
        if let Some(unknown) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(Error::Schema {
                row,
                field: unknown.clone(),
                detail: "unknown field".into(),
            });
        }
        let schema = |field: &str, detail: String| Error::Schema {
            row,
            field: field.into(),
            detail,
        };
        let id: String = required(&mut obj, "patient_id", row)?;
        if !seen.insert(id.clone()) {
            return Err(schema("patient_id", format!("duplicate id '{id}'")));
        }
        let time: f64 = required(&mut obj, "observed_time_hours", row)?;
        let event: bool = required(&mut obj, "event", row)?;
        let record = SurvivalRecord::new(id, time, event).map_err(|e| schema("observed_time_hours", e.to_string()))?;

        let saps_vector: Option<Vec<f64>> = field(&mut obj, "saps_vector", row)?;
        let saps_raw: Option<SapsMeasurements> = field(&mut obj, "saps", row)?;
        let saps = match (saps_vector, saps_raw) {
            (Some(v), None) => v,
            (None, Some(m)) => risk_factor_vector(&m).map_err(|e| schema("saps", e.to_string()))?,
            _ => return Err(schema("saps_vector", "exactly one of saps_vector and saps is required".into())),
        };
        let mut bundle = FeatureBundle::saps_only(saps);
        bundle.labels = field(&mut obj, "labels", row)?;
        for m in [Modality::Text, Modality::Image, Modality::Gcn] {
            let v = match field::<VectorField>(&mut obj, m.name(), row)? {
                None => None,
                Some(VectorField::Inline(v)) => Some(v),
                Some(VectorField::Sidecar(r)) => {
                    let r = SidecarRef {
                        file: dir.join(&r.file),
                        offset: r.offset,
                    };
                    let t = sidecars.read(&r).map_err(|e| schema(m.name(), e.to_string()))?;
                    if t.rows() != 1 {
                        return Err(schema(m.name(), format!("sidecar record has {} rows, expected 1", t.rows())));
                    }
                    Some(t.into_data())
                }
            };
            bundle.set(m, v);
        }
        bundle.tokens = field::<SidecarRef>(&mut obj, "tokens", row)?.map(|r| SidecarRef {
            file: dir.join(&r.file),
            offset: r.offset,
        });
        bundle.validate().map_err(|(m, detail)| schema(m.name(), detail))?;
        records.push(record);
        features.push(bundle);
    }
    if records.is_empty() {
        return Err(Error::Schema {
            row: 2,
            field: "<line>".into(),
            detail: "dataset has no patients".into(),
        });
    }
    Dataset::new(Cohort::new(records)?, features)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SaveOptions {
    /// Store text/image/gcn vectors in a `<stem>.f32` sidecar next to the
    /// dataset (as 32-bit floats) instead of inline.
    pub sidecar: bool,
}

fn relative_to(path: &Path, dir: &Path) -> PathBuf {
    path.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

pub fn save_dataset(data: &Dataset, path: &Path, options: SaveOptions) -> Result<()> {
    let dir = dataset_dir(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut sidecar = if options.sidecar {
        Some(SidecarWriter::create(&path.with_extension("f32"))?)
    } else {
        None
    };
    let emit = |out: &mut BufWriter<File>, v: &Value| -> Result<()> {
        serde_json::to_writer(&mut *out, v)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    emit(
        &mut out,
        &serde_json::to_value(Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
        })?,
    )?;
    for (r, f) in data.cohort().records().iter().zip(data.features()) {
        let mut obj = Map::new();
        obj.insert("patient_id".into(), Value::from(r.patient_id.clone()));
        obj.insert("observed_time_hours".into(), serde_json::to_value(r.observed_time)?);
        obj.insert("event".into(), Value::from(r.event));
        obj.insert("saps_vector".into(), serde_json::to_value(&f.saps)?);
        if let Some(l) = &f.labels {
            obj.insert("labels".into(), serde_json::to_value(l)?);
        }
        for m in [Modality::Text, Modality::Image, Modality::Gcn] {
            let Some(v) = f.get(m) else { continue };
            let value = match sidecar.as_mut() {
                Some(w) => {
                    let r = w.write(1, v.len(), v)?;
                    serde_json::to_value(SidecarRef {
                        file: relative_to(&r.file, &dir),
                        offset: r.offset,
                    })?
                }
                None => serde_json::to_value(v)?,
            };
            obj.insert(m.name().into(), value);
        }
        if let Some(t) = &f.tokens {
            let r = SidecarRef {
                file: relative_to(&t.file, &dir),
                offset: t.offset,
            };
            obj.insert("tokens".into(), serde_json::to_value(r)?);
        }
        emit(&mut out, &Value::Object(obj))?;
    }
    if let Some(w) = sidecar {
        w.finish()?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Token-embedding matrix referenced by a bundle.
pub fn load_tokens(reader: &mut SidecarReader, r: &SidecarRef) -> Result<Tensor> {
    reader.read(r)
}

#[derive(Deserialize)]
struct SapsCsvRow {
    patient_id: String,
    age: f64,
    heart_rate: f64,
    systolic_bp: f64,
    temperature: f64,
    pao2_fio2: Option<f64>,
    bun: f64,
    urine_output: f64,
    sodium: f64,
    potassium: f64,
    bicarbonate: f64,
    bilirubin: f64,
    wbc: f64,
    gcs: f64,
    chronic_disease: String,
    admission_type: String,
}

/// Reads raw SAPS-II measurements, one patient per CSV row. Columns are
/// `patient_id` followed by the category names; an empty `pao2_fio2` means
/// not ventilated, and the coded columns take names or numeric codes.
pub fn read_saps_csv(path: &Path) -> Result<Vec<(String, SapsMeasurements)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<SapsCsvRow>().enumerate() {
        let line = i + 2;
        let r = row.map_err(|e| Error::Schema {
            row: line,
            field: "<row>".into(),
            detail: e.to_string(),
        })?;
        let coded = |field: &str, e: Error| Error::Schema {
            row: line,
            field: field.into(),
            detail: e.to_string(),
        };
        let chronic: ChronicDisease = r.chronic_disease.trim().parse().map_err(|e| coded("chronic_disease", e))?;
        let admission: AdmissionType = r.admission_type.trim().parse().map_err(|e| coded("admission_type", e))?;
        out.push((
            r.patient_id,
            SapsMeasurements {
                age: r.age,
                heart_rate: r.heart_rate,
                systolic_bp: r.systolic_bp,
                temperature: r.temperature,
                pao2_fio2: r.pao2_fio2,
                bun: r.bun,
                urine_output: r.urine_output,
                sodium: r.sodium,
                potassium: r.potassium,
                bicarbonate: r.bicarbonate,
                bilirubin: r.bilirubin,
                wbc: r.wbc,
                gcs: r.gcs,
                chronic_disease: chronic,
                admission_type: admission,
            },
        ));
    }
    Ok(out)
}
