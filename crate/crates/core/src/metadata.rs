//! Per-slice metadata records and prompt rendering.
//!
//! Records live in a TOML file as an array of tables:
//!
//! ```toml
//! [[record]]
//! scan_angle_deg = 90.0
//! exposure_time = "500 ms"
//! tube_current = "200 mA"
//! slice_idx = 42
//! age = 63
//! sex = "female"
//! diseases = ["emphysema", "lung nodule"]
//! impressions = "small nodule in the right upper lobe"
//! enabled_categories = ["phy", "demo", "diag"]
//! ```
//!
//! Every field except `enabled_categories` may be omitted; a field is only
//! required when its category is enabled. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Phy,
    Demo,
    Diag,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Phy, Category::Demo, Category::Diag];
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "phy" => Ok(Category::Phy),
            "demo" => Ok(Category::Demo),
            "diag" => Ok(Category::Diag),
            other => Err(Error::Config(format!(
                "unknown metadata category `{other}` (expected phy, demo or diag)"
            ))),
        }
    }
}

/// Parses a comma-separated category list such as `phy,diag`.
pub fn parse_categories(list: &str) -> Result<Vec<Category>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Sex {
    Male,
    Female,
    Other(String),
}

impl From<String> for Sex {
    fn from(s: String) -> Self {
        match s.as_str() {
            "male" => Sex::Male,
            "female" => Sex::Female,
            _ => Sex::Other(s),
        }
    }
}

impl From<Sex> for String {
    fn from(s: Sex) -> Self {
        s.to_string()
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sex::Male => f.write_str("male"),
            Sex::Female => f.write_str("female"),
            Sex::Other(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure_time: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tube_current: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_idx: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
    #[serde(default)]
    pub diseases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impressions: Option<String>,
    #[serde(default)]
    pub enabled_categories: Vec<Category>,
}

fn required<'a, T>(value: &'a Option<T>, field: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::Validation {
        field: field.to_string(),
        reason: "required by an enabled category but missing".into(),
    })
}

impl MetadataRecord {
    pub fn is_enabled(&self, category: Category) -> bool {
        self.enabled_categories.contains(&category)
    }

    /// Removes `categories` from the enabled set.
    pub fn ablate(&mut self, categories: &[Category]) {
        self.enabled_categories.retain(|c| !categories.contains(c));
    }

    fn diseases_text(&self) -> Result<String> {
        if self.diseases.is_empty() {
            return Err(Error::Validation {
                field: "diseases".into(),
                reason: "at least one label is required when diag is enabled".into(),
            });
        }
        Ok(self.diseases.join(", "))
    }

    /// Renders the conditioning prompt. Physics sentence first, then the
    /// demographic/diagnostic sentence, joined by one space; disabled
    /// categories contribute nothing.
    pub fn render_prompt(&self) -> Result<String> {
        let mut parts = Vec::new();
        if self.is_enabled(Category::Phy) {
            let angle = required(&self.scan_angle_deg, "scan_angle_deg")?;
            let exposure = required(&self.exposure_time, "exposure_time")?;
            let current = required(&self.tube_current, "tube_current")?;
            parts.push(format!(
                "CT Parameters: Scan angle is {angle} degree, exposure time is {exposure}, \
                 X-Ray tube current is {current}."
            ));
        }
        let demo = self.is_enabled(Category::Demo);
        let diag = self.is_enabled(Category::Diag);
        if demo {
            let slice = required(&self.slice_idx, "slice_idx")?;
            let age = required(&self.age, "age")?;
            let sex = required(&self.sex, "sex")?;
            if diag {
                let diseases = self.diseases_text()?;
                let impressions = required(&self.impressions, "impressions")?;
                parts.push(format!(
                    "{slice}th slice of {age} years old {sex} with {diseases}: {impressions}."
                ));
            } else {
                parts.push(format!("{slice}th slice of {age} years old {sex}."));
            }
        } else if diag {
            let diseases = self.diseases_text()?;
            let impressions = required(&self.impressions, "impressions")?;
            parts.push(format!("{diseases}: {impressions}."));
        }
        Ok(parts.join(" "))
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    #[serde(default)]
    record: Vec<MetadataRecord>,
}

pub fn records_to_toml(records: &[MetadataRecord]) -> Result<String> {
    io::to_toml_string(&RecordFile {
        record: records.to_vec(),
    })
}

pub fn records_from_toml(text: &str, context: &str) -> Result<Vec<MetadataRecord>> {
    Ok(io::parse_toml::<RecordFile>(text, context)?.record)
}

pub fn load_records(path: &Path) -> Result<Vec<MetadataRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_toml(&text, &path.display().to_string())
}

pub fn save_records(path: &Path, records: &[MetadataRecord]) -> Result<()> {
    io::atomic_write(path, records_to_toml(records)?.as_bytes())
}

/// Loads records and removes the `ablate` categories from each.
pub fn load_records_ablated(path: &Path, ablate: &[Category]) -> Result<Vec<MetadataRecord>> {
    let mut records = load_records(path)?;
    records.iter_mut().for_each(|r| r.ablate(ablate));
    Ok(records)
}
