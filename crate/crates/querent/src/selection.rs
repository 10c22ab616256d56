//! Per-query region importance scores, top-k selection, the random-selection
//! baseline, and the ranking-stability checker.

use crate::bagstore::{FeatureBag, RegionPartition};
use crate::counters::{self, MacPhase};
use crate::error::{Error, Result};
use crate::metadata::{build_metadata, ProjectionHeads, RegionMetadataSet};
use crate::numerics::{dot, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectorKind {
    MetadataScore,
    Random,
    OracleTrueMax,
}

#[derive(Clone, Debug)]
pub struct SelectionResult {
    pub scores: Vec<f64>,
    /// Distinct region indices, sorted ascending; min(k, M) of them.
    pub selected: Vec<u32>,
    pub selector_kind: SelectorKind,
}

/// Importance of every region for one embedded query:
/// s_i = max(|⟨q̂, m̂_i^min⟩|, |⟨q̂, m̂_i^max⟩|).
pub fn score_regions(q_hat: &[f64], meta: &RegionMetadataSet) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; meta.n_regions()];
    score_regions_into(q_hat, meta, &mut scores)?;
    Ok(scores)
}

/// Same scores written into a caller-owned row of length M.
pub fn score_regions_into(
    q_hat: &[f64],
    meta: &RegionMetadataSet,
    out: &mut [f64],
) -> Result<()> {
    let d_e = meta.embed_dim();
    if q_hat.len() != d_e {
        return Err(Error::Shape(format!(
            "query embedding has {} components, metadata space has {d_e}",
            q_hat.len()
        )));
    }
    let m = meta.n_regions();
    if out.len() != m {
        return Err(Error::Shape(format!(
            "score row has {} slots for {m} regions",
            out.len()
        )));
    }
    for (i, slot) in out.iter_mut().enumerate() {
        let lo = dot(q_hat, meta.proj_min.row(i)).abs();
        let hi = dot(q_hat, meta.proj_max.row(i)).abs();
        *slot = lo.max(hi);
    }
    counters::add_macs(MacPhase::SelectionScore, (2 * m * d_e) as u64);
    Ok(())
}

/// Indices of the k highest scores; ties go to the lower region index; the
/// result is sorted ascending. Saturates at all regions when k ≥ M.
pub fn topk_regions(scores: &[f64], k: usize) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::Param("top-k selection needs k >= 1".into()));
    }
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    Ok(order)
}

/// k distinct uniformly drawn region indices, sorted ascending.
pub fn random_selection(m: usize, k: usize, rng: &mut RngStream) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::Param("random selection needs k >= 1".into()));
    }
    let mut pool: Vec<u32> = (0..m as u32).collect();
    let take = k.min(m);
    for t in 0..take {
        let j = t + rng.next_below((m - t) as u64) as usize;
        pool.swap(t, j);
    }
    pool.truncate(take);
    pool.sort_unstable();
    Ok(pool)
}

#[derive(Clone, Debug)]
pub struct RankingStabilityReport {
    pub pass: bool,
    /// Per-query worst gap between the true top-k threshold and a
    /// metadata-selected region's true value; ≤ `bound` when `pass`.
    pub max_suboptimality: f64,
    /// 2·max ε₁ where ε₁ = ‖q̂‖ · Lipschitz · diam(R_i).
    pub bound: f64,
    pub selected: Vec<u32>,
    pub true_top: Vec<u32>,
}

/// Largest pairwise patch distance inside one region, by brute force.
pub(crate) fn region_diameter(bag: &FeatureBag, members: &[u32]) -> f64 {
    let mut diam: f64 = 0.0;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            let mut s = 0.0;
            for (x, y) in bag
                .features
                .row(i as usize)
                .iter()
                .zip(bag.features.row(j as usize))
            {
                let diff = x - y;
                s += diff * diff;
            }
            diam = diam.max(s.sqrt());
        }
    }
    diam
}

/// True importance of a region: the best per-patch score the metadata score
/// approximates, max over patches of max(|⟨q̂, f_min(x)⟩|, |⟨q̂, f_max(x)⟩|).
fn true_region_values(
    bag: &FeatureBag,
    part: &RegionPartition,
    heads: &ProjectionHeads,
    q_hat: &[f64],
) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(part.n_regions());
    for members in &part.regions {
        let mut best: f64 = f64::NEG_INFINITY;
        for &pi in members {
            let x = bag.features.row(pi as usize);
            let lo = dot(q_hat, &heads.f_min.apply_vec(x)?).abs();
            let hi = dot(q_hat, &heads.f_max.apply_vec(x)?).abs();
            best = best.max(lo.max(hi));
        }
        values.push(best);
    }
    Ok(values)
}

/// Checks that every metadata-selected region's true value reaches the true
/// top-k threshold minus 2·max ε₁.
pub fn ranking_stability_check(
    bag: &FeatureBag,
    part: &RegionPartition,
    heads: &ProjectionHeads,
    k: usize,
    query_index: usize,
) -> Result<RankingStabilityReport> {
    if query_index >= bag.n_patches() {
        return Err(Error::Param(format!(
            "query index {query_index} out of range for {} patches",
            bag.n_patches()
        )));
    }
    let q_hat = heads.f_q.apply_vec(bag.features.row(query_index))?;
    let meta = build_metadata(bag, part, heads)?;
    let scores = score_regions(&q_hat, &meta)?;
    let selected = topk_regions(&scores, k)?;

    let true_values = true_region_values(bag, part, heads, &q_hat)?;
    let true_top = topk_regions(&true_values, k)?;
    let threshold = true_top
        .iter()
        .map(|&i| true_values[i as usize])
        .fold(f64::INFINITY, f64::min);

    let q_norm = dot(&q_hat, &q_hat).sqrt();
    let lip = heads.f_min.lipschitz().max(heads.f_max.lipschitz());
    let max_eps1 = part
        .regions
        .iter()
        .map(|members| q_norm * lip * region_diameter(bag, members))
        .fold(0.0, f64::max);
    let bound = 2.0 * max_eps1;

    let max_suboptimality = selected
        .iter()
        .map(|&i| threshold - true_values[i as usize])
        .fold(0.0, f64::max);
    Ok(RankingStabilityReport {
        pass: max_suboptimality <= bound,
        max_suboptimality,
        bound,
        selected,
        true_top,
    })
}
