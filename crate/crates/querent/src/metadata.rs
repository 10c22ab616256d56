//! Region summaries, their projections into the shared embedding space, and
//! the summarization-fidelity study.
//!
//! A region's raw metadata is the element-wise min and max over its patch
//! rows. Projection heads map summaries and queries into a common
//! `d_e`-dimensional space where importance scores are plain inner products.
//! The fidelity study measures how well different summary strategies
//! preserve pairwise region distances.

use crate::bagstore::{FeatureBag, RegionPartition};
use crate::counters::{self, MacPhase};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{self, gelu, spectral_norm, Matrix, RngStream, GELU_LIPSCHITZ};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionMode {
    FrozenRandom,
    TrainableAux,
}

/// Single linear map d → d_e with bias, optionally followed by GELU.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl ProjectionHead {
    /// Entries of W drawn N(0, 1/d), zero bias, GELU activation.
    pub fn frozen_random(d: usize, d_e: usize, rng: &mut RngStream) -> ProjectionHead {
        let std = (1.0 / d as f64).sqrt();
        ProjectionHead {
            w: Matrix::gaussian(d, d_e, std, rng),
            b: vec![0.0; d_e],
            activation: Activation::Gelu,
        }
    }

    /// Exact identity map, no bias, no activation. Only valid square.
    pub fn identity(d: usize) -> ProjectionHead {
        ProjectionHead {
            w: Matrix::identity(d),
            b: vec![0.0; d],
            activation: Activation::Identity,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = numerics::matmul(x, &self.w)?;
        let cols = out.cols();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for j in 0..cols {
                row[j] += self.b[j];
                if self.activation == Activation::Gelu {
                    row[j] = gelu(row[j]);
                }
            }
        }
        Ok(out)
    }

    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "projection input has {} components, head expects {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut out = self.b.clone();
        for (i, xi) in x.iter().enumerate() {
            let wrow = self.w.row(i);
            for (o, wij) in out.iter_mut().zip(wrow) {
                *o += xi * wij;
            }
        }
        if self.activation == Activation::Gelu {
            for o in out.iter_mut() {
                *o = gelu(*o);
            }
        }
        Ok(out)
    }

    /// Upper bound on the head's Lipschitz constant: the linear map
    /// contributes its spectral norm, a GELU on top multiplies in the
    /// activation's own largest slope.
    pub fn lipschitz(&self) -> f64 {
        let linear = spectral_norm(&self.w);
        match self.activation {
            Activation::Gelu => linear * GELU_LIPSCHITZ,
            Activation::Identity => linear,
        }
    }
}

/// The three heads sharing one embedding space: f_min and f_max for region
/// summaries, f_q for queries.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub f_min: ProjectionHead,
    pub f_max: ProjectionHead,
    pub f_q: ProjectionHead,
    pub mode: ProjectionMode,
}

impl ProjectionHeads {
    pub fn frozen_random(d: usize, d_e: usize, seed: u64) -> ProjectionHeads {
        let mut rng = RngStream::new(seed);
        ProjectionHeads {
            f_min: ProjectionHead::frozen_random(d, d_e, &mut rng),
            f_max: ProjectionHead::frozen_random(d, d_e, &mut rng),
            f_q: ProjectionHead::frozen_random(d, d_e, &mut rng),
            mode: ProjectionMode::FrozenRandom,
        }
    }

    pub fn identity(d: usize) -> ProjectionHeads {
        ProjectionHeads {
            f_min: ProjectionHead::identity(d),
            f_max: ProjectionHead::identity(d),
            f_q: ProjectionHead::identity(d),
            mode: ProjectionMode::FrozenRandom,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.f_min.out_dim()
    }
}

/// Raw and projected min/max summaries for every region of one bag.
#[derive(Clone, Debug)]
pub struct RegionMetadataSet {
    pub raw_min: Matrix,
    pub raw_max: Matrix,
    pub proj_min: Matrix,
    pub proj_max: Matrix,
}

impl RegionMetadataSet {
    pub fn n_regions(&self) -> usize {
        self.raw_min.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.proj_min.cols()
    }
}

/// Element-wise min and max per region (M×d each). Counts one multiply-add
/// equivalent per visited patch column: each visit is one min comparison
/// plus one max comparison.
pub fn summarize(bag: &FeatureBag, part: &RegionPartition) -> Result<(Matrix, Matrix)> {
    let d = bag.d();
    let m = part.n_regions();
    let mut raw_min = Matrix::zeros(m, d);
    let mut raw_max = Matrix::zeros(m, d);
    for (r, members) in part.regions.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyRegion(format!("region {r} has no patches")));
        }
        let first = bag.features.row(members[0] as usize);
        raw_min.row_mut(r).copy_from_slice(first);
        raw_max.row_mut(r).copy_from_slice(first);
        for &pi in &members[1..] {
            let patch = bag.features.row(pi as usize);
            let lo = raw_min.row_mut(r);
            for (l, v) in lo.iter_mut().zip(patch) {
                if *v < *l {
                    *l = *v;
                }
            }
            let hi = raw_max.row_mut(r);
            for (h, v) in hi.iter_mut().zip(patch) {
                if *v > *h {
                    *h = *v;
                }
            }
        }
    }
    counters::add_macs(MacPhase::Summarize, (bag.n_patches() * d) as u64);
    Ok((raw_min, raw_max))
}

/// Summarize then project with f_min/f_max.
pub fn build_metadata(
    bag: &FeatureBag,
    part: &RegionPartition,
    heads: &ProjectionHeads,
) -> Result<RegionMetadataSet> {
    let (raw_min, raw_max) = summarize(bag, part)?;
    let proj_min = heads.f_min.apply(&raw_min)?;
    let proj_max = heads.f_max.apply(&raw_max)?;
    debug_assert!(raw_min
        .data()
        .iter()
        .zip(raw_max.data())
        .all(|(l, h)| l <= h));
    Ok(RegionMetadataSet {
        raw_min,
        raw_max,
        proj_min,
        proj_max,
    })
}

// --- fidelity study ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SummaryStrategy {
    Min,
    Max,
    Mean,
    MeanStd,
    MinMax,
}

impl SummaryStrategy {
    pub const ALL: [SummaryStrategy; 5] = [
        SummaryStrategy::Min,
        SummaryStrategy::Max,
        SummaryStrategy::Mean,
        SummaryStrategy::MeanStd,
        SummaryStrategy::MinMax,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SummaryStrategy::Min => "min",
            SummaryStrategy::Max => "max",
            SummaryStrategy::Mean => "mean",
            SummaryStrategy::MeanStd => "mean_std",
            SummaryStrategy::MinMax => "min_max",
        }
    }

    pub fn parse(s: &str) -> Result<SummaryStrategy> {
        SummaryStrategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown summary strategy '{s}'")))
    }

    fn n_vectors(&self) -> usize {
        match self {
            SummaryStrategy::Min | SummaryStrategy::Max | SummaryStrategy::Mean => 1,
            SummaryStrategy::MeanStd | SummaryStrategy::MinMax => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FidelityReport {
    pub strategy: SummaryStrategy,
    pub pearson_r: f64,
    pub mse: f64,
    /// Set when a distance vector has zero variance, which leaves Pearson r
    /// undefined; r and mse are reported as 0 and must not be interpreted.
    pub degenerate: bool,
}

/// Summary vectors of one region under one strategy. `mean_std` uses the
/// population standard deviation.
fn summary_vectors(patches: &[&[f64]], strategy: SummaryStrategy) -> Vec<Vec<f64>> {
    let d = patches[0].len();
    let n = patches.len() as f64;
    let lo_hi = || {
        let mut lo = patches[0].to_vec();
        let mut hi = patches[0].to_vec();
        for p in &patches[1..] {
            for (c, v) in p.iter().enumerate() {
                if *v < lo[c] {
                    lo[c] = *v;
                }
                if *v > hi[c] {
                    hi[c] = *v;
                }
            }
        }
        (lo, hi)
    };
    let mean = || {
        let mut mu = vec![0.0; d];
        for c in 0..d {
            for p in patches {
                mu[c] += p[c];
            }
            mu[c] /= n;
        }
        mu
    };
    match strategy {
        SummaryStrategy::Min => vec![lo_hi().0],
        SummaryStrategy::Max => vec![lo_hi().1],
        SummaryStrategy::Mean => vec![mean()],
        SummaryStrategy::MeanStd => {
            let mu = mean();
            let mut sd = vec![0.0; d];
            for c in 0..d {
                for p in patches {
                    let diff = p[c] - mu[c];
                    sd[c] += diff * diff;
                }
                sd[c] = (sd[c] / n).sqrt();
            }
            vec![mu, sd]
        }
        SummaryStrategy::MinMax => {
            let (lo, hi) = lo_hi();
            vec![lo, hi]
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        s += diff * diff;
    }
    s
}

/// Mean Euclidean distance over all cross pairs of two patch sets.
fn mean_cross_distance(ra: &[&[f64]], rb: &[&[f64]]) -> f64 {
    let mut acc = 0.0;
    for a in ra {
        for b in rb {
            acc += squared_distance(a, b).sqrt();
        }
    }
    acc / (ra.len() * rb.len()) as f64
}

/// Distance between two regions' summaries: the squared distances of the
/// per-vector summaries are averaged before the square root, so a strategy
/// with V vectors is scaled by 1/sqrt(V) and singleton-region min_max
/// distances reproduce the raw patch distance bitwise.
fn summary_distance(va: &[Vec<f64>], vb: &[Vec<f64>], n_vectors: usize) -> f64 {
    let mut total = 0.0;
    for (a, b) in va.iter().zip(vb) {
        total += squared_distance(a, b);
    }
    (total / n_vectors as f64).sqrt()
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
    }
    let mut sxx = 0.0;
    for x in xs {
        sxx += (x - mx) * (x - mx);
    }
    let mut syy = 0.0;
    for y in ys {
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn min_max_normalize(xs: &[f64]) -> Option<Vec<f64>> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return None;
    }
    Some(xs.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

/// Pairwise-distance preservation of summary strategies over a corpus.
///
/// Per bag, regions come from `partition_row_major` with `p` patches each;
/// the strict upper triangles of the original and summarized region distance
/// matrices are pooled across bags in ascending bag_id order, then compared
/// with Pearson correlation on the raw entries and mean squared error after
/// min-max normalizing each pooled vector to [0, 1] independently.
pub fn fidelity_study(
    bags: &[FeatureBag],
    p: usize,
    strategies: &[SummaryStrategy],
) -> Result<Vec<FidelityReport>> {
    struct BagEntries {
        bag_id: u32,
        orig: Vec<f64>,
        per_strategy: Vec<Vec<f64>>,
    }

    let per_bag = exec::map_indexed(bags.len(), |bi| -> Result<BagEntries> {
        let bag = &bags[bi];
        let part = crate::bagstore::partition_row_major(bag, p)?;
        let regions: Vec<Vec<&[f64]>> = part
            .regions
            .iter()
            .map(|members| {
                members
                    .iter()
                    .map(|&i| bag.features.row(i as usize))
                    .collect()
            })
            .collect();
        let m = regions.len();
        let mut orig = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                orig.push(mean_cross_distance(&regions[i], &regions[j]));
            }
        }
        let mut per_strategy = Vec::with_capacity(strategies.len());
        for &strat in strategies {
            let summaries: Vec<Vec<Vec<f64>>> = regions
                .iter()
                .map(|patches| summary_vectors(patches, strat))
                .collect();
            let mut entries = Vec::with_capacity(orig.len());
            for i in 0..m {
                for j in i + 1..m {
                    entries.push(summary_distance(
                        &summaries[i],
                        &summaries[j],
                        strat.n_vectors(),
                    ));
                }
            }
            per_strategy.push(entries);
        }
        Ok(BagEntries {
            bag_id: bag.bag_id,
            orig,
            per_strategy,
        })
    });
    let mut per_bag: Vec<BagEntries> = per_bag.into_iter().collect::<Result<_>>()?;
    per_bag.sort_by_key(|e| e.bag_id);

    let orig: Vec<f64> = per_bag.iter().flat_map(|e| e.orig.iter().copied()).collect();
    if orig.is_empty() {
        return Err(Error::Degenerate(
            "fidelity study needs at least one bag with two or more regions".into(),
        ));
    }
    let mut reports = Vec::with_capacity(strategies.len());
    for (si, &strategy) in strategies.iter().enumerate() {
        let summ: Vec<f64> = per_bag
            .iter()
            .flat_map(|e| e.per_strategy[si].iter().copied())
            .collect();
        let r = pearson(&orig, &summ);
        let norm_pair = match (min_max_normalize(&orig), min_max_normalize(&summ)) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        match (r, norm_pair) {
            (Some(r), Some((no, ns))) => {
                let mut mse = 0.0;
                for (a, b) in no.iter().zip(&ns) {
                    mse += (a - b) * (a - b);
                }
                mse /= no.len() as f64;
                reports.push(FidelityReport {
                    strategy,
                    pearson_r: r,
                    mse,
                    degenerate: false,
                });
            }
            _ => reports.push(FidelityReport {
                strategy,
                pearson_r: 0.0,
                mse: 0.0,
                degenerate: true,
            }),
        }
    }
    Ok(reports)
}

/// CSV rendering: `strategy,pearson_r,mse`, six decimal places; degenerate
/// rows carry the word "degenerate" in both numeric columns.
pub fn fidelity_csv(reports: &[FidelityReport]) -> String {
    let mut out = String::from("strategy,pearson_r,mse\n");
    for rep in reports {
        if rep.degenerate {
            out.push_str(&format!("{},degenerate,degenerate\n", rep.strategy.name()));
        } else {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                rep.strategy.name(),
                rep.pearson_r,
                rep.mse
            ));
        }
    }
    out
}
