//! Update similarity and neighbor selection.

/// Norms below this count as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine_from(dot_ab: f64, norm_a: f64, norm_b: f64) -> f64 {
    if norm_a < ZERO_NORM || norm_b < ZERO_NORM {
        0.0
    } else {
        (dot_ab / (norm_a * norm_b)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity, 0 when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_from(dot(a, b), dot(a, a).sqrt(), dot(b, b).sqrt())
}

/// `gamma * cos(g_i, g_j) + (1 - gamma) * cos(G_i, G_j)`.
pub fn similarity(g_i: &[f64], g_j: &[f64], acc_i: &[f64], acc_j: &[f64], gamma: f64) -> f64 {
    gamma * cosine(g_i, g_j) + (1.0 - gamma) * cosine(acc_i, acc_j)
}

/// Full pairwise similarity matrix. Norms are computed once and only the
/// upper triangle is evaluated, so the result is exactly symmetric.
pub fn similarity_matrix(g: &[&[f64]], acc: &[&[f64]], gamma: f64) -> Vec<Vec<f64>> {
    let n = g.len();
    assert_eq!(n, acc.len(), "one accumulated vector per client");
    let gn: Vec<f64> = g.iter().map(|v| dot(v, v).sqrt()).collect();
    let an: Vec<f64> = acc.iter().map(|v| dot(v, v).sqrt()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = gamma * cosine_from(dot(g[i], g[j]), gn[i], gn[j])
                + (1.0 - gamma) * cosine_from(dot(acc[i], acc[j]), an[i], an[j]);
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    out
}

/// Neighbor set of client `i`: itself plus the `max_similar - 1` most similar
/// other clients whose similarity reaches `threshold`. Ties go to the lower
/// id. Without `include_self` the `max_similar` best candidates are taken and
/// `{i}` is only the fallback. Returned ids are ascending.
pub fn select_neighbors(i: usize, row: &[f64], threshold: f64, max_similar: usize, include_self: bool) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..row.len()).filter(|&j| j != i && row[j] >= threshold).collect();
    candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let room = if include_self { max_similar.saturating_sub(1) } else { max_similar };
    candidates.truncate(room);
    if include_self || candidates.is_empty() {
        candidates.push(i);
    }
    candidates.sort_unstable();
    candidates
}
