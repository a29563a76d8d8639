use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::metrics::mean_sd;
use crate::labels::{SlotLabels, USERS};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub a: usize,
    pub b: usize,
    pub euclidean: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// 1-based user ids that had single-user samples.
    pub users: Vec<usize>,
    /// Users dropped for lack of single-user samples.
    pub excluded: Vec<usize>,
    /// One centroid per entry of `users`.
    pub centroids: Vec<Vec<f64>>,
    pub pairs: Vec<PairStat>,
    pub euclidean_mean: f64,
    pub euclidean_sd: f64,
    pub cosine_mean: f64,
    pub cosine_sd: f64,
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Centroids of the features of samples where each user is the sole
/// occupant, and statistics over all pairs of those centroids.
pub fn identity_invariance<T: Scalar>(features: ArrayView2<'_, T>, annotations: &[SlotLabels]) -> Result<InvarianceReport> {
    if features.nrows() != annotations.len() {
        return Err(Error::Contract("one feature row per annotation required".into()));
    }
    let d = features.ncols();
    let mut users = Vec::new();
    let mut excluded = Vec::new();
    let mut centroids: Vec<Array1<f64>> = Vec::new();
    for user in 1..=USERS {
        let rows: Vec<usize> = (0..annotations.len())
            .filter(|&i| annotations[i].present_users() == [user])
            .collect();
        if rows.is_empty() {
            log::info!("user {user} has no single-user samples; excluded from invariance analysis");
            excluded.push(user);
            continue;
        }
        let mut c = Array1::<f64>::zeros(d);
        for &i in &rows {
            c += &features.row(i).mapv(|v| v.to_f64_lossy());
        }
        c /= rows.len() as f64;
        users.push(user);
        centroids.push(c);
    }
    if users.len() < 2 {
        return Err(Error::Contract(format!(
            "invariance analysis needs single-user samples of at least two users; found {users:?}"
        )));
    }
    let mut pairs = Vec::new();
    for i in 0..users.len() {
        for j in i + 1..users.len() {
            let diff = &centroids[i] - &centroids[j];
            pairs.push(PairStat {
                a: users[i],
                b: users[j],
                euclidean: diff.dot(&diff).sqrt(),
                cosine: cosine(&centroids[i], &centroids[j]),
            });
        }
    }
    let (euclidean_mean, euclidean_sd) = mean_sd(&pairs.iter().map(|p| p.euclidean).collect::<Vec<_>>());
    let (cosine_mean, cosine_sd) = mean_sd(&pairs.iter().map(|p| p.cosine).collect::<Vec<_>>());
    Ok(InvarianceReport {
        users,
        excluded,
        centroids: centroids.into_iter().map(|c| c.to_vec()).collect(),
        pairs,
        euclidean_mean,
        euclidean_sd,
        cosine_mean,
        cosine_sd,
    })
}

/// Pairwise distance matrix between centroids (rows follow `report.users`).
pub fn distance_matrix(report: &InvarianceReport) -> Array2<f64> {
    let n = report.users.len();
    let mut m = Array2::zeros((n, n));
    for (i, a) in report.centroids.iter().enumerate() {
        for (j, b) in report.centroids.iter().enumerate() {
            m[[i, j]] = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Activity;

    fn solo(user: usize) -> SlotLabels {
        let mut s = SlotLabels::empty();
        s.0[user - 1] = Some(Activity::Walk);
        s
    }

    #[test]
    fn orthogonal_unit_centroids() {
        let f = ndarray::array![[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]];
        let mut pair = solo(1);
        pair.0[1] = Some(Activity::Jump);
        let r = identity_invariance(f.view(), &[solo(1), solo(2), pair]).unwrap();
        assert_eq!(r.users, vec![1, 2]);
        assert_eq!(r.excluded, vec![3, 4, 5, 6]);
        assert_eq!(r.pairs.len(), 1);
        assert!((r.pairs[0].euclidean - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.pairs[0].cosine, 0.0);
        let m = distance_matrix(&r);
        assert_eq!(m[[0, 0]], 0.0);
        assert_eq!(m[[0, 1]], m[[1, 0]]);
    }

    #[test]
    fn one_user_is_not_enough() {
        let f = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        assert!(identity_invariance(f.view(), &[solo(1), solo(1)]).is_err());
    }

    #[test]
    fn identical_centroids() {
        let f = ndarray::array![[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0]];
        let r = identity_invariance(f.view(), &[solo(3), solo(4), solo(3), solo(4)]).unwrap();
        assert_eq!(r.pairs[0].euclidean, 0.0);
        assert!((r.pairs[0].cosine - 1.0).abs() < 1e-15);
    }
}
