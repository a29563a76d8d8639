//! Train/test partitions: stratified random, leave-one-environment-out and
//! leave-users-out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Environment};
use crate::labels::USERS;
use crate::{derived_rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Standard,
    Loeo,
    Luo,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::Loeo => "loeo",
            Protocol::Luo => "luo",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "standard" => Ok(Protocol::Standard),
            "loeo" => Ok(Protocol::Loeo),
            "luo" => Ok(Protocol::Luo),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

/// One train/test partition. Id lists are sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub protocol: Protocol,
    /// `train / test` description, e.g. `1-2-3 / 4-5-6`.
    pub descriptor: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitManifest {
    fn new(protocol: Protocol, descriptor: String, mut train_ids: Vec<String>, mut test_ids: Vec<String>) -> Self {
        train_ids.sort();
        test_ids.sort();
        SplitManifest {
            protocol,
            descriptor,
            train_ids,
            test_ids,
        }
    }

    /// Line format: `protocol <p>`, `descriptor <d>`, then one
    /// `train <id>` or `test <id>` line per sample. Readers skip blank lines
    /// and lines starting with `#`.
    pub fn write_text(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "protocol {}", self.protocol)?;
        writeln!(w, "descriptor {}", self.descriptor)?;
        for id in &self.train_ids {
            writeln!(w, "train {id}")?;
        }
        for id in &self.test_ids {
            writeln!(w, "test {id}")?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("split file: {m}"));
        let mut protocol = None;
        let mut descriptor = None;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for line in r.lines() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            match key {
                "protocol" => protocol = Some(value.parse()?),
                "descriptor" => descriptor = Some(value.to_string()),
                "train" => train.push(value.to_string()),
                "test" => test.push(value.to_string()),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Ok(SplitManifest::new(
            protocol.ok_or_else(|| bad("missing protocol".into()))?,
            descriptor.ok_or_else(|| bad("missing descriptor".into()))?,
            train,
            test,
        ))
    }
}

/// Stratified by environment and number of active users; per-stratum test
/// quotas use largest-remainder allocation so the totals hit the ratio exactly.
pub fn standard_split(manifest: &DatasetManifest, train_ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!("train ratio {train_ratio} must lie in (0, 1)")));
    }
    let mut strata: BTreeMap<(Environment, usize), Vec<String>> = BTreeMap::new();
    for e in manifest.entries() {
        strata
            .entry((e.environment, e.labels.occupancy()))
            .or_default()
            .push(e.sample_id.clone());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut eligible = Vec::new();
    for (key, ids) in &strata {
        if ids.len() < 2 {
            log::warn!("stratum {key:?} has {} sample(s); assigned to train", ids.len());
            train.extend(ids.iter().cloned());
        } else {
            eligible.push(*key);
        }
    }
    let n_eligible: usize = eligible.iter().map(|k| strata[k].len()).sum();
    let test_fraction = 1.0 - train_ratio;
    let total_test = (test_fraction * n_eligible as f64).round() as usize;
    let exact: Vec<f64> = eligible.iter().map(|k| test_fraction * strata[k].len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let mut remaining = total_test.saturating_sub(quota.iter().sum());
    for &i in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[i] < strata[&eligible[i]].len() {
            quota[i] += 1;
            remaining -= 1;
        }
    }
    let mut rng = derived_rng(seed, &[5]);
    for (i, key) in eligible.iter().enumerate() {
        let mut ids = strata[key].clone();
        ids.shuffle(&mut rng);
        test.extend(ids.drain(..quota[i]));
        train.extend(ids);
    }
    Ok(SplitManifest::new(
        Protocol::Standard,
        format!("seed {seed}, train ratio {train_ratio}"),
        train,
        test,
    ))
}

/// Environment order of the leave-one-out folds: meeting, classroom, empty.
pub const LOEO_HOLDOUTS: [Environment; 3] = [Environment::Meeting, Environment::Classroom, Environment::Empty];

fn loeo_descriptor(test: Environment) -> String {
    let train: Vec<&str> = match test {
        Environment::Meeting => vec!["empty", "classroom"],
        Environment::Classroom => vec!["empty", "meeting"],
        Environment::Empty => vec!["meeting", "classroom"],
    };
    format!("{} / {}", train.join("+"), test)
}

/// One fold per environment: test on it, train on the rest.
pub fn loeo_splits(manifest: &DatasetManifest) -> Result<Vec<SplitManifest>> {
    let mut out = Vec::new();
    for env in LOEO_HOLDOUTS {
        let (test, train): (Vec<_>, Vec<_>) = manifest.entries().iter().partition(|e| e.environment == env);
        if test.is_empty() {
            return Err(Error::Config(format!("environment {env} has no samples")));
        }
        out.push(SplitManifest::new(
            Protocol::Loeo,
            loeo_descriptor(env),
            train.into_iter().map(|e| e.sample_id.clone()).collect(),
            test.into_iter().map(|e| e.sample_id.clone()).collect(),
        ));
    }
    Ok(out)
}

/// Train/test user triples of the three leave-users-out folds.
pub const LUO_COMBOS: [([usize; 3], [usize; 3]); 3] = [([1, 2, 3], [4, 5, 6]), ([1, 2, 4], [3, 5, 6]), ([1, 2, 5], [3, 4, 6])];

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Samples whose users all lie in the train triple go to train, those whose
/// users all lie in the test triple go to test, mixed samples are dropped.
/// Empty scenes are ordered by a hash of their id and split in half.
pub fn luo_splits(manifest: &DatasetManifest) -> Result<Vec<SplitManifest>> {
    let mut empty: Vec<&str> = Vec::new();
    for e in manifest.entries() {
        if let Some(&u) = e.labels.present_users().iter().find(|&&u| !(1..=USERS).contains(&u)) {
            return Err(Error::Config(format!("user id {u} outside 1..={USERS}")));
        }
        if e.labels.occupancy() == 0 {
            empty.push(&e.sample_id);
        }
    }
    empty.sort_by_key(|id| (fnv1a(id), id.to_string()));
    let half = empty.len().div_ceil(2);
    let empty_train: BTreeSet<&str> = empty[..half].iter().copied().collect();

    let mut out = Vec::new();
    for (a, b) in LUO_COMBOS {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for e in manifest.entries() {
            let users = e.labels.present_users();
            if users.is_empty() {
                if empty_train.contains(e.sample_id.as_str()) {
                    train.push(e.sample_id.clone());
                } else {
                    test.push(e.sample_id.clone());
                }
            } else if users.iter().all(|u| a.contains(u)) {
                train.push(e.sample_id.clone());
            } else if users.iter().all(|u| b.contains(u)) {
                test.push(e.sample_id.clone());
            }
        }
        let join = |t: [usize; 3]| t.map(|u| u.to_string()).join("-");
        out.push(SplitManifest::new(
            Protocol::Luo,
            format!("{} / {}", join(a), join(b)),
            train,
            test,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Band, ManifestEntry};
    use crate::labels::{Activity, SlotLabels};

    fn entry(id: &str, env: Environment, users: &[usize]) -> ManifestEntry {
        let mut labels = SlotLabels::empty();
        for &u in users {
            labels.0[u - 1] = Some(Activity::Walk);
        }
        ManifestEntry {
            sample_id: id.into(),
            band: Band::GHz5,
            environment: env,
            locator: format!("{id}.npy").into(),
            labels,
        }
    }

    #[test]
    fn luo_membership_rules() {
        let m = DatasetManifest::new(
            "",
            vec![
                entry("mixed", Environment::Empty, &[2, 5]),
                entry("subset", Environment::Empty, &[1, 4]),
                entry("e1", Environment::Empty, &[]),
                entry("e2", Environment::Empty, &[]),
            ],
        )
        .unwrap();
        let folds = luo_splits(&m).unwrap();
        let d: Vec<&str> = folds.iter().map(|f| f.descriptor.as_str()).collect();
        assert_eq!(d, ["1-2-3 / 4-5-6", "1-2-4 / 3-5-6", "1-2-5 / 3-4-6"]);
        assert!(!folds[0].train_ids.contains(&"mixed".to_string()));
        assert!(!folds[0].test_ids.contains(&"mixed".to_string()));
        assert!(folds[1].train_ids.contains(&"subset".to_string()));
        for f in &folds {
            let empties = f.train_ids.iter().chain(&f.test_ids).filter(|i| i.starts_with('e')).count();
            assert_eq!(empties, 2);
            assert_eq!(f.train_ids.iter().filter(|i| i.starts_with('e')).count(), 1);
        }
    }

    #[test]
    fn loeo_holds_out_meeting_first() {
        let m = DatasetManifest::new(
            "",
            vec![
                entry("a", Environment::Meeting, &[1]),
                entry("b", Environment::Classroom, &[1]),
                entry("c", Environment::Empty, &[1]),
            ],
        )
        .unwrap();
        let folds = loeo_splits(&m).unwrap();
        assert_eq!(folds[0].descriptor, "empty+classroom / meeting");
        assert_eq!(folds[0].test_ids, vec!["a"]);
        assert_eq!(folds[0].train_ids, vec!["b", "c"]);
        let m = m.filter(|e| e.environment != Environment::Empty);
        assert!(loeo_splits(&m).is_err());
    }

    #[test]
    fn standard_ratio_is_exact() {
        let entries: Vec<ManifestEntry> = (0..100)
            .map(|i| entry(&format!("s{i:03}"), Environment::ALL[i % 3], &(1..=(i % 4)).collect::<Vec<_>>()))
            .collect();
        let m = DatasetManifest::new("", entries).unwrap();
        let s = standard_split(&m, 0.8, 1).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (80, 20));
        assert_eq!(s, standard_split(&m, 0.8, 1).unwrap());
        assert_ne!(s.test_ids, standard_split(&m, 0.8, 2).unwrap().test_ids);
    }

    #[test]
    fn text_round_trip() {
        let s = SplitManifest::new(Protocol::Luo, "1-2-3 / 4-5-6".into(), vec!["b".into(), "a".into()], vec!["c".into()]);
        let mut buf = Vec::new();
        s.write_text(&mut buf).unwrap();
        assert_eq!(SplitManifest::read_text(buf.as_slice()).unwrap(), s);
    }
}
