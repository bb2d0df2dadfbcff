use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VideoRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Regular,
    OpenSet,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(SplitMode::Regular),
            "open-set" | "openset" => Ok(SplitMode::OpenSet),
            other => Err(Error::validation(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub mode: SplitMode,
}

/// Partitions videos into train/val/test.
///
/// Regular mode shuffles videos with `seed` and cuts at the rounded ratios.
/// Open-set mode assigns whole action types: types are visited by
/// descending video count (ties by name) and each goes to the partition
/// furthest below its target size, so no type appears in two partitions.
pub fn split_dataset(records: &[VideoRecord], mode: SplitMode, seed: u64, ratios: (f64, f64, f64)) -> Result<Split> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("split ratios must be nonnegative and sum to 1, got {ratios:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = records.len();

    match mode {
        SplitMode::Regular => {
            let mut ids: Vec<String> = records.iter().map(|r| r.video_id.clone()).collect();
            ids.shuffle(&mut rng);
            let n_train = ((rt * n as f64).round() as usize).min(n);
            let n_val = ((rv * n as f64).round() as usize).min(n - n_train);
            let test = ids.split_off(n_train + n_val);
            let val = ids.split_off(n_train);
            Ok(Split { train: ids, val, test, mode })
        }
        SplitMode::OpenSet => {
            let mut by_type: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for r in records {
                by_type.entry(r.action_type.as_str()).or_default().push(r.video_id.clone());
            }
            if by_type.len() < 3 {
                return Err(Error::validation(format!(
                    "open-set split needs at least 3 action types, found {}",
                    by_type.len()
                )));
            }
            let mut types: Vec<(&str, Vec<String>)> = by_type.into_iter().collect();
            // stable sort keeps lexicographic order among equal counts
            types.sort_by(|a, b| b.1.len().cmp(&a.1.len()));

            let targets = [rt * n as f64, rv * n as f64, rs * n as f64];
            let mut parts: [Vec<String>; 3] = Default::default();
            let mut remaining_types = types.len();
            for (_, ids) in types {
                let empty: Vec<usize> = (0..3).filter(|&p| parts[p].is_empty() && targets[p] > 0.0).collect();
                let slot = if !empty.is_empty() && remaining_types <= empty.len() {
                    empty[0]
                } else {
                    let mut best = 0;
                    let mut best_deficit = f64::NEG_INFINITY;
                    for p in 0..3 {
                        let deficit = targets[p] - parts[p].len() as f64;
                        if deficit > best_deficit {
                            best = p;
                            best_deficit = deficit;
                        }
                    }
                    best
                };
                parts[slot].extend(ids);
                remaining_types -= 1;
            }
            for part in parts.iter_mut() {
                part.shuffle(&mut rng);
            }
            let [train, val, test] = parts;
            Ok(Split { train, val, test, mode })
        }
    }
}
