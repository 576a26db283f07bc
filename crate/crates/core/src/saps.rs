//! SAPS-II severity score and the 15-dimensional risk-factor vector.
//!
//! Bins are half-open on the upper side: a row printed as `40-69` covers
//! `40 ≤ v < 70`, so a boundary value always lands in the bin that starts
//! there. Two rows of the commonly reprinted point table are read the way
//! the original score defines them:
//!
//! * blood urea nitrogen: `28–83 → 6`, `≥ 84 → 10` (the `28-93` upper bound
//!   overlaps the next row);
//! * temperature: `≥ 39 °C → 3`, below that 0.
//!
//! | category | bins (points) |
//! |---|---|
//! | age, years | <40 (0), 40–59 (7), 60–69 (12), 70–74 (15), 75–79 (16), ≥80 (18) |
//! | heart rate, /min | <40 (11), 40–69 (2), 70–119 (0), 120–159 (4), ≥160 (7) |
//! | systolic BP, mmHg | <70 (13), 70–99 (5), 100–199 (0), ≥200 (2) |
//! | temperature, °C | <39 (0), ≥39 (3) |
//! | PaO₂/FiO₂, mmHg | not ventilated (0), <100 (11), 100–199 (9), ≥200 (6) |
//! | BUN, mg/dL | <28 (0), 28–83 (6), ≥84 (10) |
//! | urine output, mL/day | <500 (11), 500–999 (4), ≥1000 (0) |
//! | sodium, mEq/L | <125 (5), 125–144 (0), ≥145 (1) |
//! | potassium, mEq/L | <3.0 (3), 3.0–4.9 (0), ≥5.0 (3) |
//! | bicarbonate, mEq/L | <15 (6), 15–19 (3), ≥20 (0) |
//! | bilirubin, mg/dL | <4.0 (0), 4.0–5.9 (4), ≥6.0 (9) |
//! | WBC, 10³/mm³ | <1.0 (12), 1.0–19.9 (0), ≥20.0 (3) |
//! | Glasgow coma scale | <6 (26), 6–8 (13), 9–10 (7), 11–13 (5), 14–15 (0) |
//! | chronic disease | none (0), metastatic cancer (9), hematologic malignancy (10), AIDS (17) |
//! | admission type | scheduled surgical (0), medical (6), unscheduled surgical (8) |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SCORE: u32 = 163;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Age,
    HeartRate,
    SystolicBp,
    Temperature,
    Pao2Fio2,
    Bun,
    UrineOutput,
    Sodium,
    Potassium,
    Bicarbonate,
    Bilirubin,
    Wbc,
    Gcs,
    ChronicDisease,
    AdmissionType,
}

impl Category {
    /// Fixed order of the risk-factor vector.
    pub const ALL: [Category; 15] = [
        Category::Age,
        Category::HeartRate,
        Category::SystolicBp,
        Category::Temperature,
        Category::Pao2Fio2,
        Category::Bun,
        Category::UrineOutput,
        Category::Sodium,
        Category::Potassium,
        Category::Bicarbonate,
        Category::Bilirubin,
        Category::Wbc,
        Category::Gcs,
        Category::ChronicDisease,
        Category::AdmissionType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Age => "age",
            Category::HeartRate => "heart_rate",
            Category::SystolicBp => "systolic_bp",
            Category::Temperature => "temperature",
            Category::Pao2Fio2 => "pao2_fio2",
            Category::Bun => "bun",
            Category::UrineOutput => "urine_output",
            Category::Sodium => "sodium",
            Category::Potassium => "potassium",
            Category::Bicarbonate => "bicarbonate",
            Category::Bilirubin => "bilirubin",
            Category::Wbc => "wbc",
            Category::Gcs => "gcs",
            Category::ChronicDisease => "chronic_disease",
            Category::AdmissionType => "admission_type",
        }
    }

    /// Bins as `(lower bound, points)` in increasing order of the measured
    /// value; each bin runs up to the next lower bound. Chronic disease and
    /// admission type use their integer codes.
    pub fn bins(self) -> &'static [(f64, u8)] {
        const NEG: f64 = f64::NEG_INFINITY;
        match self {
            Category::Age => &[(NEG, 0), (40.0, 7), (60.0, 12), (70.0, 15), (75.0, 16), (80.0, 18)],
            Category::HeartRate => &[(NEG, 11), (40.0, 2), (70.0, 0), (120.0, 4), (160.0, 7)],
            Category::SystolicBp => &[(NEG, 13), (70.0, 5), (100.0, 0), (200.0, 2)],
            Category::Temperature => &[(NEG, 0), (39.0, 3)],
            Category::Pao2Fio2 => &[(NEG, 11), (100.0, 9), (200.0, 6)],
            Category::Bun => &[(NEG, 0), (28.0, 6), (84.0, 10)],
            Category::UrineOutput => &[(NEG, 11), (500.0, 4), (1000.0, 0)],
            Category::Sodium => &[(NEG, 5), (125.0, 0), (145.0, 1)],
            Category::Potassium => &[(NEG, 3), (3.0, 0), (5.0, 3)],
            Category::Bicarbonate => &[(NEG, 6), (15.0, 3), (20.0, 0)],
            Category::Bilirubin => &[(NEG, 0), (4.0, 4), (6.0, 9)],
            Category::Wbc => &[(NEG, 12), (1.0, 0), (20.0, 3)],
            Category::Gcs => &[(NEG, 26), (6.0, 13), (9.0, 7), (11.0, 5), (14.0, 0)],
            Category::ChronicDisease => &[(0.0, 0), (1.0, 9), (2.0, 10), (3.0, 17)],
            Category::AdmissionType => &[(0.0, 0), (1.0, 6), (2.0, 8)],
        }
    }

    /// Every point value the category can produce. PaO₂/FiO₂ adds the
    /// zero of the unventilated row.
    pub fn published_points(self) -> Vec<u8> {
        let mut pts: Vec<u8> = self.bins().iter().map(|&(_, p)| p).collect();
        if self == Category::Pao2Fio2 {
            pts.push(0);
        }
        pts.sort_unstable();
        pts.dedup();
        pts
    }

    pub fn max_points(self) -> u8 {
        self.bins().iter().map(|&(_, p)| p).max().expect("bins are nonempty")
    }

    fn is_coded(self) -> bool {
        matches!(self, Category::ChronicDisease | Category::AdmissionType)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown SAPS-II category '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChronicDisease {
    None,
    MetastaticCancer,
    HematologicMalignancy,
    Aids,
}

impl ChronicDisease {
    pub fn code(self) -> f64 {
        self as u8 as f64
    }
}

impl FromStr for ChronicDisease {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "0" => Ok(ChronicDisease::None),
            "metastatic_cancer" | "1" => Ok(ChronicDisease::MetastaticCancer),
            "hematologic_malignancy" | "2" => Ok(ChronicDisease::HematologicMalignancy),
            "aids" | "3" => Ok(ChronicDisease::Aids),
            other => Err(Error::Input(format!("unknown chronic disease '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionType {
    ScheduledSurgical,
    Medical,
    UnscheduledSurgical,
}

impl AdmissionType {
    pub fn code(self) -> f64 {
        self as u8 as f64
    }
}

impl FromStr for AdmissionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scheduled_surgical" | "0" => Ok(AdmissionType::ScheduledSurgical),
            "medical" | "1" => Ok(AdmissionType::Medical),
            "unscheduled_surgical" | "2" => Ok(AdmissionType::UnscheduledSurgical),
            other => Err(Error::Input(format!("unknown admission type '{other}'"))),
        }
    }
}

/// Worst values of the first 24 hours in the ICU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SapsMeasurements {
    pub age: f64,
    pub heart_rate: f64,
    pub systolic_bp: f64,
    pub temperature: f64,
    /// `None` when the patient was not mechanically ventilated.
    pub pao2_fio2: Option<f64>,
    pub bun: f64,
    pub urine_output: f64,
    pub sodium: f64,
    pub potassium: f64,
    pub bicarbonate: f64,
    pub bilirubin: f64,
    pub wbc: f64,
    pub gcs: f64,
    pub chronic_disease: ChronicDisease,
    pub admission_type: AdmissionType,
}

impl SapsMeasurements {
    /// A patient in the zero-point bin of every category.
    pub fn healthy() -> Self {
        SapsMeasurements {
            age: 30.0,
            heart_rate: 80.0,
            systolic_bp: 120.0,
            temperature: 37.0,
            pao2_fio2: None,
            bun: 10.0,
            urine_output: 1500.0,
            sodium: 140.0,
            potassium: 4.0,
            bicarbonate: 24.0,
            bilirubin: 1.0,
            wbc: 8.0,
            gcs: 15.0,
            chronic_disease: ChronicDisease::None,
            admission_type: AdmissionType::ScheduledSurgical,
        }
    }

    /// Value for a category; `None` for an unventilated PaO₂/FiO₂.
    pub fn value(&self, category: Category) -> Option<f64> {
        Some(match category {
            Category::Age => self.age,
            Category::HeartRate => self.heart_rate,
            Category::SystolicBp => self.systolic_bp,
            Category::Temperature => self.temperature,
            Category::Pao2Fio2 => return self.pao2_fio2,
            Category::Bun => self.bun,
            Category::UrineOutput => self.urine_output,
            Category::Sodium => self.sodium,
            Category::Potassium => self.potassium,
            Category::Bicarbonate => self.bicarbonate,
            Category::Bilirubin => self.bilirubin,
            Category::Wbc => self.wbc,
            Category::Gcs => self.gcs,
            Category::ChronicDisease => self.chronic_disease.code(),
            Category::AdmissionType => self.admission_type.code(),
        })
    }

    /// Raw measurements in risk-factor order, with ventilation encoded as a
    /// ratio of 0 for unventilated patients. Alternative to the binned
    /// encoding of [`risk_factor_vector`].
    pub fn raw_vector(&self) -> Vec<f64> {
        Category::ALL
            .iter()
            .map(|&c| self.value(c).unwrap_or(0.0))
            .collect()
    }
}

/// Points for one measurement. PaO₂/FiO₂ values are ventilated ratios;
/// unventilated patients score 0 through [`SapsMeasurements::pao2_fio2`].
pub fn score_component(category: Category, value: f64) -> Result<u8> {
    let out_of_domain = || Error::Input(format!("{category}: value {value} outside the measurement domain"));
    if !value.is_finite() {
        return Err(out_of_domain());
    }
    match category {
        Category::Gcs if !(3.0..=15.0).contains(&value) || value.fract() != 0.0 => {
            return Err(out_of_domain())
        }
        Category::Temperature => {}
        _ if category.is_coded() => {
            let max_code = (category.bins().len() - 1) as f64;
            if value.fract() != 0.0 || !(0.0..=max_code).contains(&value) {
                return Err(out_of_domain());
            }
        }
        _ if value < 0.0 => return Err(out_of_domain()),
        _ => {}
    }
    let bins = category.bins();
    let k = bins.partition_point(|&(lower, _)| lower <= value);
    Ok(bins[k.max(1) - 1].1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SapsScore {
    pub total: u32,
    /// Points per category in [`Category::ALL`] order.
    pub components: [u8; 15],
}

fn component_points(m: &SapsMeasurements) -> Result<[u8; 15]> {
    let mut out = [0u8; 15];
    for (slot, &c) in out.iter_mut().zip(Category::ALL.iter()) {
        *slot = match m.value(c) {
            Some(v) => score_component(c, v)?,
            None => 0,
        };
    }
    Ok(out)
}

pub fn score_total(m: &SapsMeasurements) -> Result<SapsScore> {
    let components = component_points(m)?;
    let total = components.iter().map(|&p| p as u32).sum();
    debug_assert!(total <= MAX_SCORE);
    Ok(SapsScore { total, components })
}

/// Per-category points as model input, in [`Category::ALL`] order.
pub fn risk_factor_vector(m: &SapsMeasurements) -> Result<Vec<f64>> {
    Ok(component_points(m)?.iter().map(|&p| p as f64).collect())
}
