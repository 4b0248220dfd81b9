//! Intra-feature alignment: the channels of an instance feature map are
//! grouped (hierarchically or by K-Means) or collapsed by pixel-wise top-K
//! attention pooling, and the resulting single-channel maps are fed to
//! per-scale domain discriminators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::cluster::{agglomerate, StopRule};
use crate::error::{Error, Result};
use crate::feature::{squared_euclidean, FeatureMap};
use crate::global_align::{adv_loss_tape, DomainLabel, Discriminator};
use crate::instance_vsa::{keep_count, ChannelAttention, ChannelRanking};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrouping {
    pub labels: Vec<usize>,
    /// One `H·W` mean map per group.
    pub means: Vec<Vec<f32>>,
    pub height: usize,
    pub width: usize,
}

impl ChannelGrouping {
    fn from_labels(f: &FeatureMap, labels: Vec<usize>, groups: usize) -> Self {
        let plane = f.height() * f.width();
        let mut sums = vec![vec![0.0f64; plane]; groups];
        let mut counts = vec![0usize; groups];
        for (c, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(f.channel(c)) {
                *s += v as f64;
            }
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| (v / n.max(1) as f64) as f32).collect())
            .collect();
        Self {
            labels,
            means,
            height: f.height(),
            width: f.width(),
        }
    }

    pub fn group_count(&self) -> usize {
        self.means.len()
    }
}

fn channel_rows(f: &FeatureMap) -> Vec<Vec<f32>> {
    (0..f.channels()).map(|c| f.channel(c).to_vec()).collect()
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || channels < groups {
        return Err(Error::InvalidArgument(format!(
            "cannot split {channels} channels into {groups} groups"
        )));
    }
    Ok(())
}

/// Complete-linkage cosine agglomeration of channels down to `groups` clusters.
pub fn channel_cluster_hierarchical(f: &FeatureMap, groups: usize) -> Result<ChannelGrouping> {
    check_groups(f.channels(), groups)?;
    let labels = agglomerate(&channel_rows(f), StopRule::Count(groups))?;
    Ok(ChannelGrouping::from_labels(f, labels, groups))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutcome {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f32>>,
    /// Inertia after each assignment/update round.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

pub fn inertia(vectors: &[Vec<f32>], labels: &[usize], centroids: &[Vec<f32>]) -> f64 {
    vectors
        .iter()
        .zip(labels)
        .map(|(v, &l)| squared_euclidean(v, &centroids[l]))
        .sum()
}

/// Index of the nearest centroid; ties to the lowest index.
fn nearest(v: &[f32], centroids: &[Vec<f32>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_euclidean(v, c);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Farthest-point seeding: the first centre is drawn from `seed`, each
/// further centre is the point farthest from all chosen ones (lowest index
/// on ties).
pub fn farthest_point_init(vectors: &[Vec<f32>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = vec![rng.gen_range(0..vectors.len())];
    let mut min_d: Vec<f64> = vectors.iter().map(|v| squared_euclidean(v, &vectors[picks[0]])).collect();
    while picks.len() < k {
        let mut best = (-1.0, 0);
        for (i, &d) in min_d.iter().enumerate() {
            if d > best.0 && !picks.contains(&i) {
                best = (d, i);
            }
        }
        picks.push(best.1);
        for (m, v) in min_d.iter_mut().zip(vectors) {
            *m = m.min(squared_euclidean(v, &vectors[best.1]));
        }
    }
    picks
}

/// One Lloyd round: assign, then move centroids to member means. Empty
/// clusters keep their centroid.
pub fn lloyd_step(vectors: &[Vec<f32>], centroids: &[Vec<f32>]) -> (Vec<usize>, Vec<Vec<f32>>) {
    let labels: Vec<usize> = vectors.iter().map(|v| nearest(v, centroids)).collect();
    let dim = vectors[0].len();
    let mut sums = vec![vec![0.0f64; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (v, &l) in vectors.iter().zip(&labels) {
        counts[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    let next = sums
        .into_iter()
        .zip(counts)
        .zip(centroids)
        .map(|((s, n), old)| {
            if n == 0 {
                old.clone()
            } else {
                s.into_iter().map(|x| (x / n as f64) as f32).collect()
            }
        })
        .collect();
    (labels, next)
}

pub fn kmeans(vectors: &[Vec<f32>], k: usize, max_iter: usize, seed: u64) -> Result<KMeansOutcome> {
    check_groups(vectors.len(), k)?;
    let mut centroids: Vec<Vec<f32>> = farthest_point_init(vectors, k, seed)
        .into_iter()
        .map(|i| vectors[i].clone())
        .collect();
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let (next_labels, next_centroids) = lloyd_step(vectors, &centroids);
        let unchanged = next_labels == labels;
        labels = next_labels;
        centroids = next_centroids;
        history.push(inertia(vectors, &labels, &centroids));
        if unchanged {
            converged = true;
            break;
        }
    }
    Ok(KMeansOutcome {
        labels,
        centroids,
        inertia: history,
        converged,
    })
}

pub fn channel_cluster_kmeans(f: &FeatureMap, k: usize, max_iter: usize, seed: u64) -> Result<ChannelGrouping> {
    let out = kmeans(&channel_rows(f), k, max_iter, seed)?;
    Ok(ChannelGrouping::from_labels(f, out.labels, k))
}

/// Per-pixel indices of the `keep` largest weighted channels (ties to the
/// lower channel), applied to a `C × (H·W)` block of weighted values.
fn ptap_select(weighted: &[f32], channels: usize, plane: usize, keep: usize) -> Vec<usize> {
    let mut picks = Vec::with_capacity(plane * keep);
    let mut order: Vec<usize> = (0..channels).collect();
    for p in 0..plane {
        order.sort_by(|&a, &b| weighted[b * plane + p].total_cmp(&weighted[a * plane + p]).then(a.cmp(&b)));
        picks.extend_from_slice(&order[..keep]);
    }
    picks
}

/// Pixel-wise top-K attention pooling: the mean of the `K` largest
/// `w_c · F[c, y, x]` at every pixel.
pub fn ptap_pool(f: &FeatureMap, ranking: &ChannelRanking, keep_fraction: f64) -> Result<FeatureMap> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let (c, h, w) = f.dims();
    if ranking.weights.len() != c {
        return Err(Error::Shape(format!("{} weights for {c} channels", ranking.weights.len())));
    }
    let plane = h * w;
    let weighted: Vec<f32> = (0..c)
        .flat_map(|ch| f.channel(ch).iter().map(move |&v| v * ranking.weights[ch]))
        .collect();
    let keep = keep_count(c, keep_fraction);
    let picks = ptap_select(&weighted, c, plane, keep);
    let out = (0..plane)
        .map(|p| {
            let s: f64 = picks[p * keep..(p + 1) * keep]
                .iter()
                .map(|&ch| weighted[ch * plane + p] as f64)
                .sum();
            (s / keep as f64) as f32
        })
        .collect();
    FeatureMap::new(1, h, w, out, f.scale)
}

/// Tape form of [`ptap_pool`] on a `C × H × W` node with a length-`C`
/// weight node; the per-pixel selection is held constant.
pub fn ptap_tape(tape: &mut Tape, x: Var, weights: Var, keep_fraction: f64) -> Var {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let xv = tape.value(x).data();
    let wv = tape.value(weights).data();
    let weighted: Vec<f32> = (0..c * plane).map(|i| xv[i] * wv[i / plane]).collect();
    let keep = keep_count(c, keep_fraction);
    let picks = ptap_select(&weighted, c, plane, keep);
    let inv = 1.0 / keep as f32;
    let out = (0..plane)
        .map(|p| picks[p * keep..(p + 1) * keep].iter().map(|&ch| weighted[ch * plane + p]).sum::<f32>() * inv)
        .collect();
    tape.op(
        Tensor::from_vec(&[1, h, w], out),
        &[x, weights],
        Box::new(move |ctx| {
            let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.grad.data();
            let mut gx = vec![0.0; c * plane];
            let mut gw = vec![0.0; c];
            for p in 0..plane {
                let gp = g[p] * inv;
                for &ch in &picks[p * keep..(p + 1) * keep] {
                    gx[ch * plane + p] += gp * wv[ch];
                    gw[ch] += gp * xv[ch * plane + p];
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx)), Some(Tensor::from_vec(&[c], gw))]
        }),
    )
}

/// Group mean maps of a `C × H × W` node as a `G × 1 × H × W` node.
pub fn group_means_tape(tape: &mut Tape, x: Var, labels: &[usize], groups: usize) -> Var {
    let shape = tape.shape(x).to_vec();
    let plane = shape[1] * shape[2];
    let mut counts = vec![0usize; groups];
    for &l in labels {
        counts[l] += 1;
    }
    let xv = tape.value(x).data();
    let mut out = vec![0.0f32; groups * plane];
    for (c, &l) in labels.iter().enumerate() {
        let inv = 1.0 / counts[l] as f32;
        for p in 0..plane {
            out[l * plane + p] += xv[c * plane + p] * inv;
        }
    }
    let labels = labels.to_vec();
    tape.op(
        Tensor::from_vec(&[groups, 1, shape[1], shape[2]], out),
        &[x],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut gx = vec![0.0; labels.len() * plane];
            for (c, &l) in labels.iter().enumerate() {
                let inv = 1.0 / counts[l] as f32;
                for p in 0..plane {
                    gx[c * plane + p] = g[l * plane + p] * inv;
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        }),
    )
}

/// Per-scale sum of (mean source BCE + mean target BCE) over `M × 1 × H × W`
/// map batches, each behind a GRL. Returns the loss (if any scale had
/// both domains) and the number of (scale, domain) slots that were empty.
pub fn feature_adv_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    discs: &[Discriminator],
    src: &[Option<Var>],
    tgt: &[Option<Var>],
    lambda: f32,
) -> (Option<Var>, usize) {
    let mut terms = Vec::new();
    let mut skipped = 0;
    for (s, disc) in discs.iter().enumerate() {
        for (maps, d) in [(src[s], DomainLabel::Source), (tgt[s], DomainLabel::Target)] {
            match maps {
                Some(m) if tape.shape(m)[0] > 0 => {
                    let r = tape.grl(m, lambda);
                    let logits = disc.forward_tape(tape, store, r);
                    terms.push((adv_loss_tape(tape, logits, d), 1.0));
                }
                _ => skipped += 1,
            }
        }
    }
    let loss = (!terms.is_empty()).then(|| tape.weighted_sum(&terms));
    (loss, skipped)
}

/// Value form of [`feature_adv_loss_tape`] over lists of single-channel maps.
pub fn feature_adv_loss(
    store: &ParamStore,
    discs: &[Discriminator],
    src_maps: &[Vec<FeatureMap>],
    tgt_maps: &[Vec<FeatureMap>],
    lambda: f32,
) -> Result<(f64, usize)> {
    if src_maps.len() != discs.len() || tgt_maps.len() != discs.len() {
        return Err(Error::Shape("one map list per discriminator expected".into()));
    }
    let mut tape = Tape::new();
    let mut batch = |maps: &[FeatureMap]| -> Result<Option<Var>> {
        let Some(first) = maps.first() else { return Ok(None) };
        let dims = first.dims();
        if maps.iter().any(|m| m.dims() != dims) {
            return Err(Error::Shape("maps within one scale differ in shape".into()));
        }
        let data = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
        Ok(Some(tape.constant(Tensor::from_vec(&[maps.len(), dims.0, dims.1, dims.2], data))))
    };
    let src: Vec<Option<Var>> = src_maps.iter().map(|m| batch(m)).collect::<Result<_>>()?;
    let tgt: Vec<Option<Var>> = tgt_maps.iter().map(|m| batch(m)).collect::<Result<_>>()?;
    let (loss, skipped) = feature_adv_loss_tape(&mut tape, store, discs, &src, &tgt, lambda);
    Ok((loss.map_or(0.0, |l| tape.value(l).item() as f64), skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeatureGrouping {
    Hierarchical { groups: usize },
    KMeans { k: usize, max_iter: usize },
    Ptap { keep_fraction: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDiagnostics {
    /// Group maps produced per scale, summed over both domains.
    pub groups: [usize; 3],
    /// Images whose channels could not be clustered (all-zero channels).
    pub skipped_images: usize,
}

/// Learned state of the intra-feature branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureAligner {
    pub grouping: FeatureGrouping,
    pub lambda: f32,
    attention: Vec<ChannelAttention>,
    discs: Vec<Discriminator>,
}

impl FeatureAligner {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        grouping: FeatureGrouping,
        lambda: f32,
        attention_kernel: usize,
        disc_hidden: usize,
    ) -> Result<Self> {
        let mut attention = Vec::new();
        if let FeatureGrouping::Ptap { keep_fraction } = grouping {
            if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                return Err(Error::Config(format!("keep fraction {keep_fraction} outside (0, 1]")));
            }
            for s in 0..3 {
                attention.push(ChannelAttention::new(store, rng, &format!("feat.attention{s}"), attention_kernel)?);
            }
        }
        let discs = (0..3)
            .map(|s| Discriminator::new(store, rng, &format!("feat.disc{s}"), 1, disc_hidden))
            .collect();
        Ok(Self {
            grouping,
            lambda,
            attention,
            discs,
        })
    }

    pub fn discriminators(&self) -> &[Discriminator] {
        &self.discs
    }

    /// Group maps for every image of one domain at one scale, as a
    /// `M × 1 × H × W` node.
    fn domain_maps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        scale: usize,
        seed: u64,
        diag: &mut FeatureDiagnostics,
    ) -> Result<Option<Var>> {
        let n = tape.shape(features)[0];
        let mut per_image = Vec::with_capacity(n);
        for i in 0..n {
            let x = tape.select(features, i);
            let maps = match self.grouping {
                FeatureGrouping::Ptap { keep_fraction } => {
                    let w = self.attention[scale].forward_tape(tape, store, x);
                    let p = ptap_tape(tape, x, w, keep_fraction);
                    let s = tape.shape(p).to_vec();
                    tape.reshape(p, &[1, 1, s[1], s[2]])
                }
                FeatureGrouping::Hierarchical { groups } => {
                    let f = FeatureMap::from_tensor(tape.value(x).clone(), crate::feature::ScaleTag::ALL[scale])?;
                    match channel_cluster_hierarchical(&f, groups) {
                        Ok(g) => group_means_tape(tape, x, &g.labels, groups),
                        Err(Error::DegenerateEmbedding) => {
                            diag.skipped_images += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    }
                }
                FeatureGrouping::KMeans { k, max_iter } => {
                    let f = FeatureMap::from_tensor(tape.value(x).clone(), crate::feature::ScaleTag::ALL[scale])?;
                    let seed = seed ^ ((scale as u64) << 32) ^ i as u64;
                    let g = channel_cluster_kmeans(&f, k, max_iter, seed)?;
                    group_means_tape(tape, x, &g.labels, k)
                }
            };
            per_image.push(maps);
        }
        if per_image.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::new();
        for m in per_image {
            for j in 0..tape.shape(m)[0] {
                rows.push(tape.select(m, j));
            }
        }
        diag.groups[scale] += rows.len();
        Ok(Some(tape.stack(&rows)))
    }

    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src_features: &[Var; 3],
        tgt_features: &[Var; 3],
        seed: u64,
    ) -> Result<(Option<Var>, FeatureDiagnostics)> {
        let mut diag = FeatureDiagnostics::default();
        let mut src = Vec::with_capacity(3);
        let mut tgt = Vec::with_capacity(3);
        for s in 0..3 {
            src.push(self.domain_maps(tape, store, src_features[s], s, seed, &mut diag)?);
            tgt.push(self.domain_maps(tape, store, tgt_features[s], s, seed.wrapping_add(1), &mut diag)?);
        }
        let (loss, _) = feature_adv_loss_tape(tape, store, &self.discs, &src, &tgt, self.lambda);
        Ok((loss, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::ScaleTag;

    fn map(rows: &[&[f32]], h: usize, w: usize) -> FeatureMap {
        let v = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMap::new(rows.len(), h, w, v, ScaleTag::Large).unwrap()
    }

    #[test]
    fn hierarchical_singletons_and_duplicates() {
        let f = map(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.1]], 1, 2);
        let g = channel_cluster_hierarchical(&f, 3).unwrap();
        assert_eq!(g.labels, vec![0, 1, 2]);
        assert_eq!(g.means[1], vec![0.0, 1.0]);

        let d = map(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]], 1, 2);
        let g = channel_cluster_hierarchical(&d, 2).unwrap();
        assert_eq!(g.labels, vec![0, 1, 0, 1]);
        assert!(channel_cluster_hierarchical(&d, 5).is_err());
    }

    #[test]
    fn kmeans_recovers_blobs() {
        let f = map(
            &[&[0.0, 0.1], &[5.0, 5.1], &[0.1, 0.0], &[5.1, 5.0], &[0.05, 0.05]],
            1,
            2,
        );
        for seed in 0..5 {
            let g = channel_cluster_kmeans(&f, 2, 50, seed).unwrap();
            let l = &g.labels;
            assert_eq!(l[0], l[2]);
            assert_eq!(l[0], l[4]);
            assert_eq!(l[1], l[3]);
            assert_ne!(l[0], l[1]);
        }
        let s = channel_cluster_kmeans(&f, 5, 10, 3).unwrap();
        let mut labels = s.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ptap_examples() {
        let one = map(&[&[1.0, -2.0, 3.0, 0.5]], 2, 2);
        let r = ChannelRanking::from_weights(vec![0.3]);
        let p = ptap_pool(&one, &r, 0.5).unwrap();
        for (a, b) in p.values().iter().zip(one.values()) {
            assert!((a - 0.3 * b).abs() < 1e-7);
        }

        let two = map(&[&[4.0], &[2.0]], 1, 1);
        let r = ChannelRanking::from_weights(vec![0.5, 1.0]);
        assert!((ptap_pool(&two, &r, 0.5).unwrap().at(0, 0, 0) - 2.0).abs() < 1e-7);

        let three = map(&[&[1.0, 2.0], &[3.0, -4.0], &[0.5, 0.0]], 1, 2);
        let r = ChannelRanking::from_weights(vec![0.2, 0.7, 0.9]);
        let p = ptap_pool(&three, &r, 1.0).unwrap();
        assert_eq!(p.dims(), (1, 1, 2));
        let want0 = (0.2 * 1.0 + 0.7 * 3.0 + 0.9 * 0.5) / 3.0;
        let want1 = (0.2 * 2.0 - 0.7 * 4.0) / 3.0;
        assert!((p.at(0, 0, 0) - want0).abs() < 1e-6);
        assert!((p.at(0, 0, 1) - want1).abs() < 1e-6);
    }

    #[test]
    fn ptap_tape_matches_value_form() {
        let f = map(&[&[1.0, 2.0, -1.0, 0.3], &[3.0, -4.0, 2.0, 0.1], &[0.5, 0.0, 0.7, 0.2]], 2, 2);
        let r = ChannelRanking::from_weights(vec![0.2, 0.7, 0.9]);
        let want = ptap_pool(&f, &r, 0.5).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(f.tensor().clone());
        let w = tape.leaf(Tensor::from_vec(&[3], r.weights.clone()));
        let p = ptap_tape(&mut tape, x, w, 0.5);
        for (a, b) in tape.value(p).data().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn group_means_tape_matches_grouping() {
        let f = map(&[&[1.0, 0.0], &[0.0, 1.0], &[3.0, 0.2]], 1, 2);
        let g = channel_cluster_hierarchical(&f, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(f.tensor().clone());
        let m = group_means_tape(&mut tape, x, &g.labels, 2);
        assert_eq!(tape.shape(m), &[2, 1, 1, 2]);
        let flat: Vec<f32> = g.means.concat();
        assert_eq!(tape.value(m).data(), &flat[..]);
    }

    #[test]
    fn zeroed_discriminators_sum_over_scales() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let al = FeatureAligner::new(&mut store, &mut rng, FeatureGrouping::Hierarchical { groups: 2 }, 1.0, 3, 4).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let m = |v: f32, h: usize| FeatureMap::filled(1, h, h, v, ScaleTag::Large);
        let src = vec![vec![m(1.0, 4)], vec![m(2.0, 2)], vec![m(0.0, 1), m(0.0, 1)]];
        let tgt = vec![vec![m(-1.0, 4)], vec![m(0.5, 2)], vec![m(3.0, 1)]];
        let (l, skipped) = feature_adv_loss(&store, al.discriminators(), &src, &tgt, 1.0).unwrap();
        assert!((l - 4.1589).abs() < 1e-4);
        assert_eq!(skipped, 0);
        let (half, skipped) = feature_adv_loss(&store, al.discriminators(), &src, &[vec![], vec![], vec![]], 1.0).unwrap();
        assert!((half - 3.0 * std::f64::consts::LN_2).abs() < 1e-5);
        assert_eq!(skipped, 3);
    }
}
