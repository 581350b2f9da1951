//! Brute-force reference scorers, written independently of the library.
#![allow(dead_code)]

pub struct Scored {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid: usize,
}

/// Rank of gallery `g` for query row `d`: number of admissible entries that
/// beat it (smaller distance, or equal distance and smaller index).
fn rank_of(d: &[f64], admissible: &[bool], g: usize) -> usize {
    (0..d.len())
        .filter(|&j| admissible[j] && j != g && (d[j] < d[g] || (d[j] == d[g] && j < g)))
        .count()
}

/// `dist[q][g]`, ids and cameras as plain integers.
pub fn cmc_ap(dist: &[Vec<f64>], q_ids: &[u32], q_cams: &[u32], g_ids: &[u32], g_cams: &[u32], ks: &[usize]) -> Scored {
    let mut hits = vec![0usize; ks.len()];
    let (mut ap_total, mut valid) = (0.0, 0usize);
    for (qi, row) in dist.iter().enumerate() {
        let admissible: Vec<bool> = (0..row.len()).map(|g| !(g_ids[g] == q_ids[qi] && g_cams[g] == q_cams[qi])).collect();
        let mut pos_ranks: Vec<usize> = (0..row.len())
            .filter(|&g| admissible[g] && g_ids[g] == q_ids[qi])
            .map(|g| rank_of(row, &admissible, g))
            .collect();
        if pos_ranks.is_empty() {
            continue;
        }
        valid += 1;
        pos_ranks.sort_unstable();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if pos_ranks[0] < k {
                *h += 1;
            }
        }
        let ap: f64 = pos_ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64)
            .sum::<f64>()
            / pos_ranks.len() as f64;
        ap_total += ap;
    }
    let v = valid.max(1) as f64;
    Scored {
        cmc: hits.iter().map(|&h| h as f64 / v).collect(),
        map: ap_total / v,
        valid,
    }
}

/// Euclidean distance after unit-normalizing, via the expanded form
/// `2 - 2 cos` so the arithmetic differs from a direct difference.
pub fn normalized_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (2.0 - 2.0 * dot / (na * nb)).max(0.0).sqrt()
}
