//! Independent reference implementations used as test oracles. Nothing
//! here calls into the library's own clustering, matching or loss code.

#![allow(dead_code)]

use rand::Rng;

pub fn cosine(u: &[f32], v: &[f32]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
    let nu: f64 = u.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 && nv == 0.0 {
        panic!("both vectors zero");
    }
    if nu == 0.0 || nv == 0.0 {
        return 1.0;
    }
    1.0 - dot / (nu * nv)
}

pub enum Stop {
    Threshold(f64),
    Count(usize),
}

/// Complete-linkage agglomeration that recomputes every cluster-pair
/// linkage from the raw member distances at every merge. Labels are
/// numbered by first appearance.
pub fn brute_agglomerate(vectors: &[Vec<f32>], stop: Stop) -> Vec<usize> {
    let mut clusters: Vec<Vec<usize>> = (0..vectors.len()).map(|i| vec![i]).collect();
    loop {
        if let Stop::Count(k) = stop {
            if clusters.len() <= k {
                break;
            }
        }
        if clusters.len() < 2 {
            break;
        }
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut link = 0.0f64;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        link = link.max(cosine(&vectors[i], &vectors[j]));
                    }
                }
                if link < best.0 {
                    best = (link, a, b);
                }
            }
        }
        if let Stop::Threshold(t) = stop {
            if best.0 > t {
                break;
            }
        }
        let merged = clusters.remove(best.2);
        clusters[best.1].extend(merged);
    }
    let mut labels = vec![0; vectors.len()];
    for (g, members) in clusters.iter().enumerate() {
        for &m in members {
            labels[m] = g;
        }
    }
    canonical(&labels)
}

/// Relabels a partition so groups are numbered by first appearance.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

pub fn sq_dist(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum()
}

/// Exhaustive nearest target, lowest index on ties.
pub fn brute_nearest(q: &[f32], targets: &[Vec<f32>]) -> usize {
    let d: Vec<f64> = targets.iter().map(|t| sq_dist(q, t)).collect();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    d.iter().position(|&x| x == min).unwrap()
}

pub fn brute_contrastive(src: &[Vec<f32>], tgt: &[Vec<f32>], margin: f64) -> f64 {
    let mut total = 0.0;
    for s in src {
        let nn = brute_nearest(s, tgt);
        for (j, t) in tgt.iter().enumerate() {
            let d = sq_dist(s, t);
            total += if j == nn { d } else { (margin - d).max(0.0) };
        }
    }
    total
}

pub fn inertia(vectors: &[Vec<f32>], labels: &[usize], centroids: &[Vec<f32>]) -> f64 {
    vectors.iter().zip(labels).map(|(v, &l)| sq_dist(v, &centroids[l])).sum()
}

/// Whether `(labels, centroids)` is a Lloyd fixed point: every point sits
/// with a nearest centroid and every non-empty centroid is its members' mean.
pub fn is_lloyd_fixed_point(vectors: &[Vec<f32>], labels: &[usize], centroids: &[Vec<f32>], tol: f64) -> bool {
    for (v, &l) in vectors.iter().zip(labels) {
        let own = sq_dist(v, &centroids[l]);
        if centroids.iter().any(|c| sq_dist(v, c) < own - tol) {
            return false;
        }
    }
    for (g, c) in centroids.iter().enumerate() {
        let members: Vec<&Vec<f32>> = vectors.iter().zip(labels).filter(|(_, &l)| l == g).map(|(v, _)| v).collect();
        if members.is_empty() {
            continue;
        }
        for k in 0..c.len() {
            let mean = members.iter().map(|m| m[k] as f64).sum::<f64>() / members.len() as f64;
            if (mean - c[k] as f64).abs() > tol {
                return false;
            }
        }
    }
    true
}

pub fn random_vectors(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            if v.iter().any(|x| x.abs() > 1e-3) {
                break v;
            }
        })
        .collect()
}

/// Central difference of `f` at `x[i]` with step `h`.
pub fn central_difference(x: &mut [f32], i: usize, h: f32, mut f: impl FnMut(&[f32]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h as f64)
}

/// Relative agreement test that tolerates tiny gradients.
pub fn grads_agree(analytic: f64, numeric: f64, rel: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() <= rel * scale
}
