//! In-memory cohort with per-patient feature bundles.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::{Cohort, SurvivalRecord};
use crate::tensor::Tensor;

pub const SAPS_DIM: usize = 15;
pub const LABEL_DIM: usize = 14;
pub const TEXT_DIM: usize = 768;
pub const IMAGE_DIM: usize = 1024;
pub const GCN_DIM: usize = 224;

/// Position of the "Normal" (no finding) flag in the label vector.
pub const NORMAL_LABEL: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Saps,
    Labels,
    Text,
    Image,
    Gcn,
}

impl Modality {
    /// Canonical order; also the parameter initialisation order.
    pub const ALL: [Modality; 5] = [
        Modality::Saps,
        Modality::Labels,
        Modality::Text,
        Modality::Image,
        Modality::Gcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Saps => "saps",
            Modality::Labels => "labels",
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Gcn => "gcn",
        }
    }

    /// Expected input length.
    pub fn dim(self) -> usize {
        match self {
            Modality::Saps => SAPS_DIM,
            Modality::Labels => LABEL_DIM,
            Modality::Text => TEXT_DIM,
            Modality::Image => IMAGE_DIM,
            Modality::Gcn => GCN_DIM,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality '{s}'")))
    }
}

/// Location of a record inside a binary sidecar file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRef {
    pub file: PathBuf,
    pub offset: u64,
}

/// Covariates of one patient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureBundle {
    pub saps: Vec<f64>,
    pub labels: Option<Vec<f64>>,
    pub text: Option<Vec<f64>>,
    pub image: Option<Vec<f64>>,
    pub gcn: Option<Vec<f64>>,
    /// Token-embedding matrix for the GCN pipeline.
    pub tokens: Option<SidecarRef>,
}

impl FeatureBundle {
    pub fn saps_only(saps: Vec<f64>) -> Self {
        FeatureBundle {
            saps,
            ..Default::default()
        }
    }

    pub fn get(&self, modality: Modality) -> Option<&[f64]> {
        match modality {
            Modality::Saps => Some(&self.saps),
            Modality::Labels => self.labels.as_deref(),
            Modality::Text => self.text.as_deref(),
            Modality::Image => self.image.as_deref(),
            Modality::Gcn => self.gcn.as_deref(),
        }
    }

    pub fn set(&mut self, modality: Modality, values: Option<Vec<f64>>) {
        match modality {
            Modality::Saps => self.saps = values.unwrap_or_default(),
            Modality::Labels => self.labels = values,
            Modality::Text => self.text = values,
            Modality::Image => self.image = values,
            Modality::Gcn => self.gcn = values,
        }
    }

    /// Checks lengths, finiteness and 0/1 labels; the error names the
    /// offending field.
    pub fn validate(&self) -> std::result::Result<(), (Modality, String)> {
        for m in Modality::ALL {
            let Some(v) = self.get(m) else { continue };
            if v.len() != m.dim() {
                return Err((m, format!("expected {} values, found {}", m.dim(), v.len())));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err((m, format!("non-finite value at index {i}")));
            }
            if m == Modality::Labels {
                if let Some(i) = v.iter().position(|&x| x != 0.0 && x != 1.0) {
                    return Err((m, format!("label {i} must be 0 or 1")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    cohort: Cohort,
    features: Vec<FeatureBundle>,
}

impl Dataset {
    pub fn new(cohort: Cohort, features: Vec<FeatureBundle>) -> Result<Self> {
        if cohort.len() != features.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} records but {} feature bundles", cohort.len(), features.len()),
            ));
        }
        for (row, f) in features.iter().enumerate() {
            f.validate().map_err(|(m, detail)| Error::Schema {
                row: row + 1,
                field: m.name().into(),
                detail,
            })?;
        }
        Ok(Dataset { cohort, features })
    }

    pub fn cohort(&self) -> &Cohort {
        &self.cohort
    }

    pub fn features(&self) -> &[FeatureBundle] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [FeatureBundle] {
        &mut self.features
    }

    pub fn len(&self) -> usize {
        self.cohort.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cohort.is_empty()
    }

    /// True when every patient carries the modality.
    pub fn has(&self, modality: Modality) -> bool {
        self.features.iter().all(|f| f.get(modality).is_some())
    }

    /// Rows at `indices`, in that order. Repeated indices get their patient
    /// ids suffixed `#k` so the result stays a valid cohort.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut copies = vec![0usize; self.len()];
        let mut records = Vec::with_capacity(indices.len());
        let mut features = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = &self.cohort.records()[i];
            let id = if copies[i] == 0 {
                r.patient_id.clone()
            } else {
                format!("{}#{}", r.patient_id, copies[i])
            };
            copies[i] += 1;
            records.push(SurvivalRecord::new(id, r.observed_time, r.event)?);
            features.push(self.features[i].clone());
        }
        Ok(Dataset {
            cohort: Cohort::new(records)?,
            features,
        })
    }

    /// Patients whose labels mark them abnormal (Normal flag 0) or normal.
    pub fn subgroup(&self, normal: bool) -> Result<Dataset> {
        let want = if normal { 1.0 } else { 0.0 };
        let mut idx = Vec::new();
        for (i, f) in self.features.iter().enumerate() {
            let labels = f.labels.as_ref().ok_or_else(|| Error::Schema {
                row: i + 1,
                field: "labels".into(),
                detail: "subgroup filtering needs label vectors".into(),
            })?;
            if labels[NORMAL_LABEL] == want {
                idx.push(i);
            }
        }
        if idx.is_empty() {
            return Err(Error::Input("subgroup is empty".into()));
        }
        self.select(&idx)
    }

    /// Stacks one modality into an `n×d` matrix.
    pub fn matrix(&self, modality: Modality) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * modality.dim());
        for (i, f) in self.features.iter().enumerate() {
            let v = f.get(modality).ok_or_else(|| {
                Error::Input(format!("patient {} has no {modality} features", self.cohort.records()[i].patient_id))
            })?;
            data.extend_from_slice(v);
        }
        Tensor::new(vec![self.len(), modality.dim()], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let cohort = Cohort::from_times(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        let feats = (0..3)
            .map(|i| {
                let mut labels = vec![0.0; LABEL_DIM];
                labels[NORMAL_LABEL] = (i % 2) as f64;
                FeatureBundle {
                    labels: Some(labels),
                    ..FeatureBundle::saps_only(vec![i as f64; SAPS_DIM])
                }
            })
            .collect();
        Dataset::new(cohort, feats).unwrap()
    }

    #[test]
    fn select_renames_duplicates() {
        let d = tiny().select(&[2, 2, 0]).unwrap();
        let ids: Vec<_> = d.cohort().records().iter().map(|r| r.patient_id.as_str()).collect();
        assert_eq!(ids, ["p2", "p2#1", "p0"]);
        assert_eq!(d.features()[1].saps[0], 2.0);
    }

    #[test]
    fn subgroup_uses_normal_flag() {
        let d = tiny();
        assert_eq!(d.subgroup(true).unwrap().len(), 1);
        assert_eq!(d.subgroup(false).unwrap().len(), 2);
    }

    #[test]
    fn validation_names_field_and_row() {
        let cohort = Cohort::from_times(&[1.0, 2.0], &[true, true]).unwrap();
        let mut bad = FeatureBundle::saps_only(vec![0.0; SAPS_DIM]);
        bad.text = Some(vec![0.0; 767]);
        let err = Dataset::new(cohort, vec![FeatureBundle::saps_only(vec![0.0; SAPS_DIM]), bad]).unwrap_err();
        match err {
            Error::Schema { row, field, .. } => assert_eq!((row, field.as_str()), (2, "text")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn matrix_stacks_rows() {
        let m = tiny().matrix(Modality::Saps).unwrap();
        assert_eq!(m.shape(), &[3, SAPS_DIM]);
        assert_eq!(m.get(2, 0), 2.0);
        assert!(tiny().matrix(Modality::Text).is_err());
    }
}
