//! Per-slot annotations, identity-dependent targets and activity counts.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::{Error, Result, Scalar};

/// Number of user slots.
pub const USERS: usize = 6;
/// Number of activities.
pub const ACTIVITIES: usize = 9;
/// Classes per slot in the identity-dependent task: ABSENT plus the activities.
pub const CLASSES: usize = ACTIVITIES + 1;
/// Canonical token for an unoccupied slot.
pub const ABSENT_TOKEN: &str = "null";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activity {
    Nothing,
    Walk,
    Rotation,
    Jump,
    Wave,
    LieDown,
    PickUp,
    SitDown,
    StandUp,
}

impl Activity {
    /// Vocabulary order; `index()` is the position in this array.
    pub const ALL: [Activity; ACTIVITIES] = [
        Activity::Nothing,
        Activity::Walk,
        Activity::Rotation,
        Activity::Jump,
        Activity::Wave,
        Activity::LieDown,
        Activity::PickUp,
        Activity::SitDown,
        Activity::StandUp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Activity> {
        Activity::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Activity::Nothing => "nothing",
            Activity::Walk => "walk",
            Activity::Rotation => "rotation",
            Activity::Jump => "jump",
            Activity::Wave => "wave",
            Activity::LieDown => "lie_down",
            Activity::PickUp => "pick_up",
            Activity::SitDown => "sit_down",
            Activity::StandUp => "stand_up",
        }
    }

    pub fn vocabulary() -> Vec<String> {
        Activity::ALL.iter().map(|a| a.name().to_string()).collect()
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activity::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownActivity(s.to_string()))
    }
}

/// True for every spelling of "no user in this slot" seen in the wild.
pub fn is_absent_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("null") || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("none")
}

/// Parses one slot cell, normalizing absent markers to `None`.
pub fn parse_slot(s: &str) -> Result<Option<Activity>> {
    if is_absent_token(s) {
        Ok(None)
    } else {
        s.trim().parse().map(Some)
    }
}

/// Activity (or absence) of each user slot. Slot `u` is user `u + 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SlotLabels(pub [Option<Activity>; USERS]);

impl SlotLabels {
    pub fn empty() -> Self {
        SlotLabels([None; USERS])
    }

    pub fn slots(&self) -> &[Option<Activity>; USERS] {
        &self.0
    }

    /// Number of non-absent slots.
    pub fn occupancy(&self) -> usize {
        self.0.iter().filter(|s| s.is_some()).count()
    }

    /// 1-based ids of the users present.
    pub fn present_users(&self) -> Vec<usize> {
        (0..USERS).filter(|&u| self.0[u].is_some()).map(|u| u + 1).collect()
    }

    /// The dataset never has more than five simultaneous users. Returns a
    /// message when that is exceeded; callers log it rather than fail.
    pub fn occupancy_warning(&self) -> Option<String> {
        let k = self.occupancy();
        (k > USERS - 1).then(|| format!("{k} occupied slots; the dataset has at most {}", USERS - 1))
    }

    /// Class index per slot: 0 for ABSENT, activity index + 1 otherwise.
    pub fn class_indices(&self) -> [usize; USERS] {
        self.0.map(|s| s.map_or(0, |a| a.index() + 1))
    }

    pub fn from_class_indices(classes: &[usize; USERS]) -> Result<Self> {
        let mut slots = [None; USERS];
        for (slot, &c) in slots.iter_mut().zip(classes) {
            *slot = match c {
                0 => None,
                c => Some(Activity::from_index(c - 1).ok_or_else(|| Error::Contract(format!("class index {c} out of range")))?),
            };
        }
        Ok(SlotLabels(slots))
    }
}

/// `U×K` one-hot targets, column 0 reserved for ABSENT.
pub fn encode_identity_dependent<T: Scalar>(labels: &SlotLabels) -> Array2<T> {
    let mut y = Array2::zeros((USERS, CLASSES));
    for (u, c) in labels.class_indices().into_iter().enumerate() {
        y[[u, c]] = T::one();
    }
    y
}

/// Row-wise argmax of `U×K` scores. Ties go to the lowest class index.
pub fn argmax_classes<T: Scalar>(scores: ArrayView2<'_, T>) -> [usize; USERS] {
    assert_eq!(scores.dim(), (USERS, CLASSES), "slot scores must be U×K");
    let mut out = [0; USERS];
    for (u, row) in scores.outer_iter().enumerate() {
        let mut best = 0;
        for k in 1..CLASSES {
            if row[k] > row[best] {
                best = k;
            }
        }
        out[u] = best;
    }
    out
}

/// Inverse of [`encode_identity_dependent`] for one-hot rows, and the
/// prediction decoder for logits.
pub fn decode_identity_dependent<T: Scalar>(scores: ArrayView2<'_, T>) -> SlotLabels {
    SlotLabels::from_class_indices(&argmax_classes(scores)).expect("argmax is a valid class")
}

/// Ground-truth activity counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct CountVector(pub [u32; ACTIVITIES]);

impl CountVector {
    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn to_scalars<T: Scalar>(&self) -> [T; ACTIVITIES] {
        self.0.map(|c| T::lit(c as f64))
    }
}

/// `c_k` = number of slots labeled with activity `k`.
pub fn derive_counts(labels: &SlotLabels) -> CountVector {
    let mut c = [0u32; ACTIVITIES];
    for a in labels.0.iter().flatten() {
        c[a.index()] += 1;
    }
    CountVector(c)
}

/// Rounds each predicted count to the nearest integer, halves away from zero.
pub fn round_counts<T: Scalar>(predicted: &[T]) -> Result<CountVector> {
    if predicted.len() != ACTIVITIES {
        return Err(Error::Contract(format!("expected {ACTIVITIES} counts, got {}", predicted.len())));
    }
    let mut out = [0u32; ACTIVITIES];
    for (o, &p) in out.iter_mut().zip(predicted) {
        let v = p.to_f64_lossy();
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Contract(format!("predicted count {v} is negative or not finite")));
        }
        // f64::round rounds half away from zero
        *o = v.round() as u32;
    }
    Ok(CountVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk_walk_sit() -> SlotLabels {
        let mut s = SlotLabels::empty();
        s.0[0] = Some(Activity::Walk);
        s.0[2] = Some(Activity::Walk);
        s.0[4] = Some(Activity::SitDown);
        s
    }

    #[test]
    fn two_walking_one_sitting() {
        let c = derive_counts(&walk_walk_sit());
        let mut expected = [0; ACTIVITIES];
        expected[Activity::Walk.index()] = 2;
        expected[Activity::SitDown.index()] = 1;
        assert_eq!(c.0, expected);
        assert_eq!(derive_counts(&SlotLabels::empty()).0, [0; ACTIVITIES]);
    }

    #[test]
    fn one_hot_rows() {
        let y = encode_identity_dependent::<f64>(&SlotLabels::empty());
        for u in 0..USERS {
            assert_eq!(y[[u, 0]], 1.0);
            assert_eq!(y.row(u).sum(), 1.0);
        }
        let mut s = SlotLabels::empty();
        s.0[0] = Some(Activity::Walk);
        let y = encode_identity_dependent::<f64>(&s);
        assert_eq!(y[[0, 2]], 1.0);
        assert_eq!(y[[1, 0]], 1.0);
    }

    #[test]
    fn distinct_activities_in_every_slot() {
        let mut s = SlotLabels::empty();
        for u in 0..USERS {
            s.0[u] = Some(Activity::ALL[u + 2]);
        }
        let y = encode_identity_dependent::<f32>(&s);
        let mut cols: Vec<usize> = Vec::new();
        for u in 0..USERS {
            let col = (0..CLASSES).find(|&k| y[[u, k]] == 1.0).unwrap();
            assert_eq!(col, Activity::ALL[u + 2] as usize + 1);
            cols.push(col);
        }
        cols.dedup();
        assert_eq!(cols.len(), USERS);
        assert!(!cols.contains(&0));
    }

    #[test]
    fn rounding_rule() {
        let mut p = [0.0f64; ACTIVITIES];
        p[0] = 0.4;
        p[1] = 1.6;
        assert_eq!(round_counts(&p).unwrap().0[..2], [0, 2]);
        let halves: Vec<f64> = (0..ACTIVITIES).map(|k| k as f64 + 0.5).collect();
        let r = round_counts(&halves).unwrap();
        for k in 0..ACTIVITIES {
            assert_eq!(r.0[k], k as u32 + 1);
        }
        let ints: Vec<f32> = (0..ACTIVITIES).map(|k| k as f32).collect();
        assert_eq!(round_counts(&ints).unwrap().0, core::array::from_fn(|k| k as u32));
        p[3] = -0.1;
        assert!(matches!(round_counts(&p), Err(Error::Contract(_))));
    }

    #[test]
    fn absent_tokens_normalize() {
        for t in ["null", "NaN", "nan", "", "  ", "None"] {
            assert_eq!(parse_slot(t).unwrap(), None);
        }
        assert_eq!(parse_slot("lie_down").unwrap(), Some(Activity::LieDown));
        assert!(matches!(parse_slot("dance"), Err(Error::UnknownActivity(v)) if v == "dance"));
    }

    #[test]
    fn too_many_users_is_a_warning() {
        let s = SlotLabels([Some(Activity::Walk); USERS]);
        assert!(s.occupancy_warning().is_some());
        assert!(walk_walk_sit().occupancy_warning().is_none());
    }
}
