use serde::{Deserialize, Serialize};

use super::DataError;

/// `(code, display name, CommonVoice label)` for the sixteen English accents.
pub const ACCENTS: [(&str, &str, &str); 16] = [
    ("af", "Africa", "african"),
    ("au", "Australia", "australia"),
    ("be", "Bermuda", "bermuda"),
    ("ca", "Canada", "canada"),
    ("en", "England", "england"),
    ("hk", "Hong Kong", "hongkong"),
    ("in", "India", "indian"),
    ("ir", "Ireland", "ireland"),
    ("my", "Malaysia", "malaysia"),
    ("nz", "New Zealand", "newzealand"),
    ("ph", "Philippines", "philippines"),
    ("sc", "Scotland", "scotland"),
    ("sg", "Singapore", "singapore"),
    // the CommonVoice label really is misspelled
    ("sa", "South Atlantic", "southatlandtic"),
    ("us", "United States", "us"),
    ("wa", "Wales", "wales"),
];

/// Published per-accent sample counts and hours of the December 2019
/// accent-labelled English CommonVoice release.
pub const REFERENCE_STATS: [(&str, usize, f64); 16] = [
    ("af", 4065, 5.04),
    ("au", 19625, 22.86),
    ("be", 363, 0.46),
    ("ca", 17422, 20.20),
    ("en", 58274, 64.19),
    ("hk", 1181, 1.21),
    ("in", 23878, 29.09),
    ("ir", 3420, 3.71),
    ("my", 843, 1.07),
    ("nz", 6070, 7.06),
    ("ph", 1318, 1.68),
    ("sc", 4376, 5.08),
    ("sg", 693, 1.00),
    ("sa", 212, 0.23),
    ("us", 145692, 163.89),
    ("wa", 1128, 1.16),
];

pub const REFERENCE_TOTAL: (usize, f64) = (288_560, 327.93);

/// Maps a code, display name or CommonVoice label (any case) to the code.
pub fn accent_code(label: &str) -> Option<&'static str> {
    let l = label.trim().to_lowercase();
    let squashed: String = l.chars().filter(|c| !c.is_whitespace()).collect();
    ACCENTS
        .iter()
        .find(|(code, name, cv)| {
            l == *code || l == name.to_lowercase() || squashed == *cv || squashed == name.to_lowercase().replace(' ', "")
        })
        .map(|(code, _, _)| *code)
}

pub fn accent_name(code: &str) -> Option<&'static str> {
    ACCENTS.iter().find(|a| a.0 == code).map(|a| a.1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccentSplitPreset {
    pub name: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl AccentSplitPreset {
    /// Ten training accents from every region; the three validation accents
    /// are held out of training.
    pub fn mixed_region() -> Self {
        Self {
            name: "mixed_region".into(),
            train: strs(&["af", "au", "en", "hk", "in", "ir", "my", "nz", "sg", "us"]),
            val: strs(&["ca", "sc", "sa"]),
            test: strs(&["be", "ph", "wa"]),
        }
    }

    pub fn cross_region() -> Self {
        Self {
            name: "cross_region".into(),
            train: strs(&["au", "en", "ir", "nz", "us"]),
            val: strs(&["ca", "sc", "sa"]),
            test: strs(&["af", "hk", "in", "ph", "sg"]),
        }
    }

    pub fn custom(train: Vec<String>, val: Vec<String>, test: Vec<String>) -> Result<Self, DataError> {
        let p = Self {
            name: "custom".into(),
            train,
            val,
            test,
        };
        p.validate()?;
        Ok(p)
    }

    /// Consecutive blocks of `accents`: train, then val, then test.
    pub fn from_blocks(accents: &[String], n_train: usize, n_val: usize) -> Result<Self, DataError> {
        if n_train + n_val >= accents.len() {
            return Err(DataError::Preset(format!(
                "{} accents leave none for testing after {n_train} train and {n_val} val",
                accents.len()
            )));
        }
        Self::custom(
            accents[..n_train].to_vec(),
            accents[n_train..n_train + n_val].to_vec(),
            accents[n_train + n_val..].to_vec(),
        )
    }

    pub fn named(name: &str) -> Result<Self, DataError> {
        match name {
            "mixed_region" | "mixed" => Ok(Self::mixed_region()),
            "cross_region" | "cross" => Ok(Self::cross_region()),
            other => Err(DataError::Preset(format!(
                "unknown preset `{other}` (expected mixed_region, cross_region or custom)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(DataError::Preset(format!(
                "preset {} needs train and test accents",
                self.name
            )));
        }
        for t in &self.test {
            if self.val.contains(t) || self.train.contains(t) {
                return Err(DataError::Preset(format!(
                    "test accent {t} also appears in training or validation of preset {}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}
