use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Query images per class when not configured otherwise.
pub const DEFAULT_QUERY: usize = 15;

/// One n-way k-shot task. Indices point into the dataset; labels are the
/// episode-local `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub n: usize,
    pub k: usize,
    pub k_q: usize,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// `class_map[j]` is the dataset label mapped to episode label `j`.
    pub class_map: Vec<usize>,
}

/// Picks `n` classes, then `k + k_q` distinct images of each, all without
/// replacement. The first `k` of every class form the support set.
pub fn sample_episode(ds: &Dataset, n: usize, k: usize, k_q: usize, rng: &mut impl Rng) -> Result<Episode, DataError> {
    if n == 0 || k == 0 {
        return Err(DataError::EpisodeShape);
    }
    let by_class = ds.indices_by_class();
    let eligible: Vec<usize> = (0..by_class.len()).filter(|&c| by_class[c].len() >= k + k_q).collect();
    if eligible.len() < n {
        return Err(DataError::Insufficient { need: n, per_class: k + k_q, found: eligible.len() });
    }
    let mut ep = Episode {
        n,
        k,
        k_q,
        support: Vec::with_capacity(n * k),
        support_labels: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * k_q),
        query_labels: Vec::with_capacity(n * k_q),
        class_map: Vec::with_capacity(n),
    };
    for (j, ci) in index::sample(rng, eligible.len(), n).into_iter().enumerate() {
        let class = eligible[ci];
        let members = &by_class[class];
        let picks = index::sample(rng, members.len(), k + k_q).into_vec();
        for (t, &p) in picks.iter().enumerate() {
            if t < k {
                ep.support.push(members[p]);
                ep.support_labels.push(j);
            } else {
                ep.query.push(members[p]);
                ep.query_labels.push(j);
            }
        }
        ep.class_map.push(class);
    }
    Ok(ep)
}
