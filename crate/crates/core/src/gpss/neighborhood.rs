use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::PointDataset;

/// Distance used to form neighbourhoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Euclidean after dividing each covariate by its standard deviation.
    #[default]
    StandardizedEuclidean,
    Euclidean,
}

/// A point and its `k - 1` nearest observed neighbours. `members[0]` is the
/// centre; the rest are in increasing distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub center: usize,
    pub members: Vec<usize>,
    pub metric: Metric,
}

/// One neighbourhood per observed point. Ties in distance go to the lower
/// dataset index.
pub fn build_neighborhoods(data: &PointDataset, k: usize, metric: Metric) -> Result<Vec<Neighborhood>> {
    let observed = data.observed_indices();
    let n_obs = observed.len();
    let k_ok = k >= 1 && k <= n_obs && (k >= 2 || n_obs == 1);
    if !k_ok {
        return Err(Error::Config(format!(
            "neighbourhood size k = {k} must lie in [2, {n_obs}] (the number of observed points)"
        )));
    }
    let scales = match metric {
        Metric::StandardizedEuclidean => data.covariate_scales(),
        Metric::Euclidean => vec![1.0; data.dim()],
    };
    let x = data.x();
    let scaled: Vec<Vec<f64>> = observed
        .iter()
        .map(|&i| (0..data.dim()).map(|d| x[(i, d)] / scales[d]).collect())
        .collect();

    let mut out = Vec::with_capacity(n_obs);
    let mut cand: Vec<(bool, f64, usize)> = Vec::with_capacity(n_obs);
    for (a, &center) in observed.iter().enumerate() {
        cand.clear();
        for (b, &j) in observed.iter().enumerate() {
            let d2: f64 = scaled[a].iter().zip(&scaled[b]).map(|(u, v)| (u - v) * (u - v)).sum();
            cand.push((j != center, d2, j));
        }
        let cmp = |p: &(bool, f64, usize), q: &(bool, f64, usize)| {
            p.0.cmp(&q.0).then(p.1.total_cmp(&q.1)).then(p.2.cmp(&q.2))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_by(cmp);
        out.push(Neighborhood {
            center,
            members: cand.iter().map(|c| c.2).collect(),
            metric,
        });
    }
    Ok(out)
}
