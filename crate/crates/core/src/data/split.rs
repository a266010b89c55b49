use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{AccentSplitPreset, DataError, Utterance};
use crate::rng::stream;

pub const ADAPT_TRAIN_FRACTION: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSplit {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub preset: AccentSplitPreset,
    pub train: BTreeMap<String, Vec<Utterance>>,
    pub val: BTreeMap<String, Vec<Utterance>>,
    pub test: BTreeMap<String, Vec<Utterance>>,
    /// Per test accent: fine-tuning data and the evaluation pool.
    pub adapt: BTreeMap<String, AdaptSplit>,
}

impl DatasetSplit {
    pub fn train_accents(&self) -> Vec<&str> {
        self.train.keys().map(|s| s.as_str()).collect()
    }
}

/// Groups `utts` by the preset's accents and splits each test accent
/// 75/25 into adaptation train/test with a seeded shuffle.
pub fn make_split(
    preset: &AccentSplitPreset,
    utts: &[Utterance],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    preset.validate()?;
    let mut by: BTreeMap<&str, Vec<Utterance>> = BTreeMap::new();
    for u in utts {
        by.entry(u.accent.as_str()).or_default().push(u.clone());
    }
    for v in by.values_mut() {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let take = |names: &[String]| -> Result<BTreeMap<String, Vec<Utterance>>, DataError> {
        names
            .iter()
            .map(|a| {
                by.get(a.as_str())
                    .filter(|v| !v.is_empty())
                    .map(|v| (a.clone(), v.clone()))
                    .ok_or_else(|| {
                        DataError::Preset(format!("accent {a} of preset {} has no utterances", preset.name))
                    })
            })
            .collect()
    };
    let train = take(&preset.train)?;
    let val = take(&preset.val)?;
    let test = take(&preset.test)?;
    let adapt = test
        .iter()
        .map(|(a, v)| {
            let mut order = v.clone();
            order.shuffle(&mut stream(seed, &format!("adapt/{a}"), 0));
            let n_train = (order.len() as f64 * ADAPT_TRAIN_FRACTION).floor() as usize;
            let test = order.split_off(n_train);
            (a.clone(), AdaptSplit { train: order, test })
        })
        .collect();
    Ok(DatasetSplit {
        preset: preset.clone(),
        train,
        val,
        test,
        adapt,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    use proptest::prelude::*;

    use super::*;

    fn utts(spec: &[(&str, usize)]) -> Vec<Utterance> {
        spec.iter()
            .flat_map(|&(a, n)| {
                (0..n).map(move |i| Utterance {
                    id: format!("{a}-{i:04}"),
                    audio_path: PathBuf::new(),
                    features: None,
                    transcript: "x".into(),
                    accent: a.into(),
                    duration_s: 1.0,
                })
            })
            .collect()
    }

    fn preset() -> AccentSplitPreset {
        AccentSplitPreset::custom(
            vec!["a".into(), "b".into()],
            vec!["c".into()],
            vec!["d".into()],
        )
        .unwrap()
    }

    #[test]
    fn seventy_five_twenty_five() {
        let u = utts(&[("a", 5), ("b", 5), ("c", 5), ("d", 400)]);
        let s = make_split(&preset(), &u, 1).unwrap();
        assert_eq!((s.adapt["d"].train.len(), s.adapt["d"].test.len()), (300, 100));
        assert_eq!(s, make_split(&preset(), &u, 1).unwrap());
        assert_ne!(s.adapt["d"].train, make_split(&preset(), &u, 2).unwrap().adapt["d"].train);
    }

    #[test]
    fn missing_accent_is_named() {
        let u = utts(&[("a", 5), ("b", 5), ("d", 5)]);
        let err = make_split(&preset(), &u, 0).unwrap_err().to_string();
        assert!(err.contains("accent c"), "{err}");
    }

    proptest! {
        #[test]
        fn adapt_subsplits_partition_the_accent(n in 1usize..300, seed in any::<u64>()) {
            let u = utts(&[("a", 2), ("b", 2), ("c", 2), ("d", n)]);
            let s = make_split(&preset(), &u, seed).unwrap();
            let ad = &s.adapt["d"];
            let tr: BTreeSet<_> = ad.train.iter().map(|u| u.id.clone()).collect();
            let te: BTreeSet<_> = ad.test.iter().map(|u| u.id.clone()).collect();
            let all: BTreeSet<_> = s.test["d"].iter().map(|u| u.id.clone()).collect();
            prop_assert!(tr.is_disjoint(&te));
            prop_assert_eq!(tr.union(&te).cloned().collect::<BTreeSet<_>>(), all);
            prop_assert_eq!(tr.len(), n * 3 / 4);
        }
    }
}
