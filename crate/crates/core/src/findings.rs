//! The 14-finding label vocabulary and binary label vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FINDINGS: usize = 14;

/// Finding names in vocabulary order.
pub const FINDINGS: [&str; NUM_FINDINGS] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FindingLabel(u8);

impl FindingLabel {
    pub const NO_FINDING: Self = Self(0);
    pub const ENLARGED_CARDIOMEDIASTINUM: Self = Self(1);
    pub const CARDIOMEGALY: Self = Self(2);
    pub const LUNG_OPACITY: Self = Self(3);
    pub const LUNG_LESION: Self = Self(4);
    pub const EDEMA: Self = Self(5);
    pub const CONSOLIDATION: Self = Self(6);
    pub const PNEUMONIA: Self = Self(7);
    pub const ATELECTASIS: Self = Self(8);
    pub const PNEUMOTHORAX: Self = Self(9);
    pub const PLEURAL_EFFUSION: Self = Self(10);
    pub const PLEURAL_OTHER: Self = Self(11);
    pub const FRACTURE: Self = Self(12);
    pub const SUPPORT_DEVICES: Self = Self(13);

    pub fn from_index(index: usize) -> Result<Self> {
        if index < NUM_FINDINGS {
            Ok(Self(index as u8))
        } else {
            Err(Error::InvalidLabels(format!("finding index {index} out of range")))
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        FINDINGS
            .iter()
            .position(|f| f.eq_ignore_ascii_case(name.trim()))
            .map(|i| Self(i as u8))
            .ok_or_else(|| Error::InvalidLabels(format!("unknown finding `{name}`")))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        FINDINGS[self.0 as usize]
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..NUM_FINDINGS as u8).map(Self)
    }
}

impl std::fmt::Display for FindingLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for FindingLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::from_name(&s)
    }
}

impl From<FindingLabel> for String {
    fn from(l: FindingLabel) -> String {
        l.name().to_string()
    }
}

/// The six classes used for benchmarking and the default dataset.
pub const BENCH_CLASSES: [FindingLabel; 6] = [
    FindingLabel::CARDIOMEGALY,
    FindingLabel::LUNG_OPACITY,
    FindingLabel::EDEMA,
    FindingLabel::NO_FINDING,
    FindingLabel::PNEUMOTHORAX,
    FindingLabel::PLEURAL_EFFUSION,
];

/// Valid binary label vector: at least one finding set, and "No Finding"
/// never combined with anything else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelVector([bool; NUM_FINDINGS]);

impl LabelVector {
    pub fn new(bits: [bool; NUM_FINDINGS]) -> Result<Self> {
        let count = bits.iter().filter(|b| **b).count();
        if count == 0 {
            return Err(Error::InvalidLabels("no finding set".into()));
        }
        if bits[0] && count > 1 {
            return Err(Error::InvalidLabels("No Finding combined with another finding".into()));
        }
        Ok(Self(bits))
    }

    pub fn from_labels(labels: &[FindingLabel]) -> Result<Self> {
        let mut bits = [false; NUM_FINDINGS];
        for l in labels {
            bits[l.index()] = true;
        }
        Self::new(bits)
    }

    pub fn single(label: FindingLabel) -> Self {
        let mut bits = [false; NUM_FINDINGS];
        bits[label.index()] = true;
        Self(bits)
    }

    /// Accepts 0/1 values; anything else is rejected.
    pub fn from_binary(values: &[f64]) -> Result<Self> {
        if values.len() != NUM_FINDINGS {
            return Err(Error::InvalidLabels(format!("expected {NUM_FINDINGS} values, got {}", values.len())));
        }
        let mut bits = [false; NUM_FINDINGS];
        for (b, v) in bits.iter_mut().zip(values) {
            *b = match *v {
                x if x == 1.0 => true,
                x if x == 0.0 => false,
                x => return Err(Error::InvalidLabels(format!("non-binary label value {x}"))),
            };
        }
        Self::new(bits)
    }

    pub fn bits(&self) -> &[bool; NUM_FINDINGS] {
        &self.0
    }

    pub fn has(&self, label: FindingLabel) -> bool {
        self.0[label.index()]
    }

    /// Active findings in vocabulary order.
    pub fn labels(&self) -> Vec<FindingLabel> {
        FindingLabel::all().filter(|l| self.has(*l)).collect()
    }

    pub fn to_binary(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// 0/1 targets restricted to `classes`, in that order.
    pub fn project(&self, classes: &[FindingLabel]) -> Vec<f64> {
        classes.iter().map(|c| if self.has(*c) { 1.0 } else { 0.0 }).collect()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.labels().into_iter().map(FindingLabel::name).collect()
    }

    /// Compact bitmask, bit i = finding i.
    pub fn mask(&self) -> u16 {
        self.0.iter().enumerate().fold(0u16, |m, (i, &b)| if b { m | (1 << i) } else { m })
    }
}

impl Serialize for LabelVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names: Vec<String> = Vec::deserialize(d)?;
        let labels = names
            .iter()
            .map(|n| FindingLabel::from_name(n))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        Self::from_labels(&labels).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_order() {
        assert_eq!(FINDINGS[0], "No Finding");
        assert_eq!(FINDINGS[13], "Support Devices");
        assert_eq!(FindingLabel::PLEURAL_EFFUSION.name(), "Pleural Effusion");
        assert_eq!(FindingLabel::from_name("cardiomegaly").unwrap(), FindingLabel::CARDIOMEGALY);
    }

    #[test]
    fn no_finding_is_exclusive() {
        assert!(LabelVector::from_labels(&[FindingLabel::NO_FINDING, FindingLabel::EDEMA]).is_err());
        assert!(LabelVector::from_labels(&[]).is_err());
        assert!(LabelVector::from_labels(&[FindingLabel::EDEMA, FindingLabel::FRACTURE]).is_ok());
    }

    #[test]
    fn json_round_trip_uses_names() {
        let v = LabelVector::from_labels(&[FindingLabel::EDEMA, FindingLabel::PLEURAL_EFFUSION]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"["Edema","Pleural Effusion"]"#);
        assert_eq!(serde_json::from_str::<LabelVector>(&s).unwrap(), v);
    }
}
