//! Empirical checks of the selection error bounds and the arithmetic cost
//! model for both attention variants.
//!
//! The bound checks come in three sizes. The headline one builds random
//! long-line instances, runs the real metadata/selection stack over them,
//! and measures how far the selection-masked score matrix strays from the
//! full one in Frobenius norm. The two smaller ones brute-force the
//! per-region summary error (every query/region/patch triple) and the
//! ranking suboptimality it induces (every query). The cost model prices
//! multiply-accumulates and workspace elements for the dense and selective
//! paths in closed form, and `empirical_counters` replays the priced
//! pipeline under the live instrumentation counters so the formulas can be
//! compared against measured counts.

use crate::attention::{compute_selections, unnormalized_score_matrices, SelectionOptions};
use crate::bagstore::{FeatureBag, Label, RegionPartition};
use crate::counters;
use crate::error::{Error, Result};
use crate::exec;
use crate::metadata::{build_metadata, ProjectionHeads};
use crate::numerics::{dot, Matrix, RngStream};
use crate::selection::{ranking_stability_check, region_diameter};

/// Scale on `b_norm^4` in the dimension floor `d >= 8 B^4 ln(L/delta) / eps^2`.
pub const C1_SCALE: f64 = 8.0;
/// Scale in the selection floor `k >= (C2/alpha) ln(1/eps)`.
pub const C2: f64 = 2.0;
/// Scale in the anchor spacing floor `separation >= C3/alpha`.
pub const C3: f64 = 0.5;

/// Admissible-instance description for the score approximation experiment.
///
/// `new` fills the derived knobs with their tightest admissible values:
/// `k` at the selection floor, `diam` at the diameter cap, four patches per
/// region. Callers may widen `k` or shrink `diam` afterwards; `check_feasible`
/// re-validates whatever ends up here.
#[derive(Clone, Debug)]
pub struct TheoryConfig {
    /// Patches per instance (the attention sequence length).
    pub l: usize,
    /// Feature and projection dimension.
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Spatial decay rate of interaction strength along the anchor line.
    pub alpha: f64,
    /// Upper bound on every patch and query norm.
    pub b_norm: f64,
    pub trials: usize,
    pub patches_per_region: usize,
    /// Regions each query keeps.
    pub k: usize,
    /// Feature-space diameter budget per region.
    pub diam: f64,
}

impl TheoryConfig {
    pub fn new(
        l: usize,
        d: usize,
        epsilon: f64,
        delta: f64,
        alpha: f64,
        b_norm: f64,
        trials: usize,
    ) -> Result<TheoryConfig> {
        if l == 0 || d == 0 || trials == 0 {
            return Err(Error::Param(
                "theory instances need l >= 1, d >= 1, trials >= 1".into(),
            ));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Param(format!(
                "epsilon and delta must lie in (0,1); got {epsilon} and {delta}"
            )));
        }
        if alpha <= 0.0 || b_norm <= 0.0 {
            return Err(Error::Param(format!(
                "alpha and b_norm must be positive; got {alpha} and {b_norm}"
            )));
        }
        let mut cfg = TheoryConfig {
            l,
            d,
            epsilon,
            delta,
            alpha,
            b_norm,
            trials,
            patches_per_region: 4.min(l),
            k: 1,
            diam: 0.0,
        };
        cfg.k = cfg.min_k();
        cfg.diam = cfg.diam_cap();
        Ok(cfg)
    }

    pub fn c1(&self) -> f64 {
        C1_SCALE * self.b_norm.powi(4)
    }

    /// Smallest dimension the instance family admits.
    pub fn min_feasible_d(&self) -> usize {
        let floor = self.c1() * (self.l as f64 / self.delta).ln() / (self.epsilon * self.epsilon);
        floor.ceil() as usize
    }

    /// Smallest admissible number of selected regions, never below one.
    pub fn min_k(&self) -> usize {
        let floor = (C2 / self.alpha) * (1.0 / self.epsilon).ln();
        (floor.ceil() as usize).max(1)
    }

    /// Largest admissible per-region feature diameter.
    pub fn diam_cap(&self) -> f64 {
        (self.epsilon / (self.l as f64 * (self.d as f64).sqrt())).min(1.0 / self.alpha)
    }

    /// Anchor spacing used on the 1-D line.
    pub fn separation(&self) -> f64 {
        C3 / self.alpha
    }

    /// Error budget the masked matrix must stay within.
    pub fn frobenius_bound(&self) -> f64 {
        (2.0 + self.b_norm / (self.d as f64).sqrt()) * self.epsilon
    }

    pub fn n_regions(&self) -> usize {
        self.l.div_ceil(self.patches_per_region)
    }

    /// Validates the three admissibility conditions, naming the violated one.
    pub fn check_feasible(&self) -> Result<()> {
        let d_floor = self.min_feasible_d();
        if self.d < d_floor {
            return Err(Error::Infeasible(format!(
                "dimension {} is below the floor {} = ceil(8 b^4 ln(l/delta) / eps^2)",
                self.d, d_floor
            )));
        }
        let k_floor = self.min_k();
        if self.k < k_floor {
            return Err(Error::Infeasible(format!(
                "selection keeps {} regions, below the floor {} = ceil((2/alpha) ln(1/eps))",
                self.k, k_floor
            )));
        }
        let cap = self.diam_cap();
        if self.diam > cap {
            return Err(Error::Infeasible(format!(
                "region diameter budget {} exceeds the cap {} = min(eps/(l sqrt(d)), 1/alpha)",
                self.diam, cap
            )));
        }
        if self.diam >= 2.0 * self.b_norm {
            return Err(Error::Infeasible(format!(
                "region diameter budget {} consumes the whole norm budget {}",
                self.diam, self.b_norm
            )));
        }
        Ok(())
    }
}

/// One sampled instance: patch features on a decaying-interaction line,
/// their 1-D anchor positions, the region cover, and the score projections.
///
/// `w_q` and `w_k` are the same draw, so projected inner products track
/// feature-space inner products and score strength decays with anchor
/// distance the way the instance family promises.
#[derive(Clone, Debug)]
pub struct TheoremInstance {
    pub features: Matrix,
    pub coords: Vec<f64>,
    pub part: RegionPartition,
    pub w_q: Matrix,
    pub w_k: Matrix,
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(g: &Matrix) -> Result<Matrix> {
    let m = g.rows();
    let mut low = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let mut s = g.get(i, j);
            for t in 0..j {
                s -= low.get(i, t) * low.get(j, t);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "anchor kernel lost positive definiteness at pivot {i}"
                    )));
                }
                low.set(i, i, s.sqrt());
            } else {
                low.set(i, j, s / low.get(j, j));
            }
        }
    }
    Ok(low)
}

fn contiguous_partition(l: usize, p: usize, centroids: Vec<(f64, f64)>) -> RegionPartition {
    let mut regions = Vec::with_capacity(l.div_ceil(p));
    let mut home_region = vec![0u32; l];
    let mut start = 0;
    while start < l {
        let end = (start + p).min(l);
        regions.push((start as u32..end as u32).collect());
        for slot in &mut home_region[start..end] {
            *slot = (regions.len() - 1) as u32;
        }
        start = end;
    }
    RegionPartition {
        patches_per_region: p,
        regions,
        centroids: Some(centroids),
        home_region,
    }
}

/// Unit-norm Gaussian direction.
fn random_direction(d: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Builds one admissible instance: region anchors spaced `C3/alpha` apart on
/// a line, with anchor inner products decaying as `exp(-alpha * distance)`,
/// and each region's patches spread along a single direction by at most
/// `diam/2` so no norm exceeds `b_norm` and no region diameter exceeds
/// `diam`. Projections are square, entries N(0, 1/d).
pub fn construct_theorem_instance(cfg: &TheoryConfig, seed: u64) -> Result<TheoremInstance> {
    cfg.check_feasible()?;
    let m = cfg.n_regions();
    if m > cfg.d {
        return Err(Error::Infeasible(format!(
            "anchor embedding needs d >= the {m} regions; got d = {}",
            cfg.d
        )));
    }
    let d = cfg.d;
    let sep = cfg.separation();
    let anchor_norm = cfg.b_norm - cfg.diam / 2.0;

    let gram = Matrix::from_fn(m, m, |r, s| {
        anchor_norm * anchor_norm * (-cfg.alpha * sep * (r as f64 - s as f64).abs()).exp()
    });
    let low = cholesky(&gram)?;

    let mut rng = RngStream::new(seed);
    let mut features = Matrix::zeros(cfg.l, d);
    let mut coords = Vec::with_capacity(cfg.l);
    let mut centroids = Vec::with_capacity(m);
    let p = cfg.patches_per_region;
    for r in 0..m {
        let spread = random_direction(d, &mut rng);
        centroids.push((r as f64 * sep, 0.0));
        let start = r * p;
        let end = (start + p).min(cfg.l);
        for i in start..end {
            let t = rng.next_f64() * cfg.diam / 2.0;
            let row = features.row_mut(i);
            for (c, slot) in row.iter_mut().enumerate() {
                let anchor = if c < m { low.get(r, c) } else { 0.0 };
                *slot = anchor + t * spread[c];
            }
            coords.push(r as f64 * sep);
        }
    }

    let std = (1.0 / d as f64).sqrt();
    let w = Matrix::gaussian(d, d, std, &mut rng);
    Ok(TheoremInstance {
        features,
        coords,
        part: contiguous_partition(cfg.l, p, centroids),
        w_q: w.clone(),
        w_k: w,
    })
}

#[derive(Clone, Debug)]
pub struct TheoremTrial {
    pub trial: usize,
    pub frob: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct TheoremReport {
    pub rows: Vec<TheoremTrial>,
    pub passes: usize,
    pub worst_ratio: f64,
    pub bound: f64,
}

impl TheoremReport {
    pub fn pass_rate(&self) -> f64 {
        self.passes as f64 / self.rows.len() as f64
    }

    /// CSV rendering: `trial,frob,bound,pass` with pass as 1/0.
    pub fn csv(&self) -> String {
        let mut out = String::from("trial,frob,bound,pass\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                row.trial,
                row.frob,
                row.bound,
                u8::from(row.pass)
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "score approximation: {}/{} trials within the {:.6} budget, worst ratio {:.4}",
            self.passes,
            self.rows.len(),
            self.bound,
            self.worst_ratio
        )
    }
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn dummy_bag(features: Matrix) -> Result<FeatureBag> {
    FeatureBag::new(
        0,
        features,
        None,
        Label::Class {
            class_index: 0,
            num_classes: 2,
        },
    )
}

/// Runs one sampled instance end to end and measures the Frobenius distance
/// between the row-normalized score matrix and its selection-masked copy.
///
/// Rows of the full matrix are normalized to sum 1 (each row is the query's
/// attention distribution); the masked matrix keeps the same entries on
/// selected columns and zero elsewhere, with no renormalization.
fn run_trial(cfg: &TheoryConfig, trial: usize, seed: u64) -> Result<TheoremTrial> {
    let inst = construct_theorem_instance(cfg, trial_seed(seed, trial))?;
    let bag = dummy_bag(inst.features.clone())?;
    let heads = ProjectionHeads::identity(cfg.d);
    let meta = build_metadata(&bag, &inst.part, &heads)?;
    let opts = SelectionOptions::new(cfg.k);
    let selections = compute_selections(&bag, &inst.part, &meta, &heads, &opts)?;
    let (b, a) = unnormalized_score_matrices(
        &inst.features,
        &inst.w_q,
        &inst.w_k,
        &inst.part,
        &selections,
    )?;

    let mut frob_sq = 0.0;
    for i in 0..b.rows() {
        let row_sum: f64 = b.row(i).iter().sum();
        for (bv, av) in b.row(i).iter().zip(a.row(i)) {
            let diff = (bv - av) / row_sum;
            frob_sq += diff * diff;
        }
    }
    let frob = frob_sq.sqrt();
    let bound = cfg.frobenius_bound();
    Ok(TheoremTrial {
        trial,
        frob,
        bound,
        pass: frob <= bound,
    })
}

/// Samples `cfg.trials` instances in parallel (per-trial derived seeds,
/// results in trial order) and aggregates the bound checks. Refuses
/// infeasible configurations instead of reporting bound violations.
pub fn verify_theorem(cfg: &TheoryConfig, seed: u64) -> Result<TheoremReport> {
    cfg.check_feasible()?;
    let rows: Vec<TheoremTrial> = exec::map_indexed(cfg.trials, |t| run_trial(cfg, t, seed))
        .into_iter()
        .collect::<Result<_>>()?;
    let passes = rows.iter().filter(|r| r.pass).count();
    let worst_ratio = rows
        .iter()
        .map(|r| r.frob / r.bound)
        .fold(0.0_f64, f64::max);
    Ok(TheoremReport {
        bound: cfg.frobenius_bound(),
        rows,
        passes,
        worst_ratio,
    })
}

/// Builds a small random instance for the brute-force bound checks: random
/// anchor directions of norm `b_norm - diam/2`, one spread direction per
/// region, spreads of at most `diam/2`.
pub fn construct_lemma_instance(
    m: usize,
    p: usize,
    d: usize,
    diam: f64,
    b_norm: f64,
    seed: u64,
) -> Result<(FeatureBag, RegionPartition)> {
    if m == 0 || p == 0 || d == 0 {
        return Err(Error::Param(
            "lemma instances need m >= 1, p >= 1, d >= 1".into(),
        ));
    }
    if diam < 0.0 || b_norm <= diam / 2.0 {
        return Err(Error::Param(format!(
            "need 0 <= diam < 2 b_norm; got diam {diam}, b_norm {b_norm}"
        )));
    }
    let mut rng = RngStream::new(seed);
    let l = m * p;
    let mut features = Matrix::zeros(l, d);
    let mut centroids = Vec::with_capacity(m);
    let anchor_norm = b_norm - diam / 2.0;
    for r in 0..m {
        let anchor: Vec<f64> = random_direction(d, &mut rng)
            .into_iter()
            .map(|x| x * anchor_norm)
            .collect();
        let spread = random_direction(d, &mut rng);
        centroids.push((r as f64, 0.0));
        for i in r * p..(r + 1) * p {
            let t = rng.next_f64() * diam / 2.0;
            for (c, slot) in features.row_mut(i).iter_mut().enumerate() {
                *slot = anchor[c] + t * spread[c];
            }
        }
    }
    let part = contiguous_partition(l, p, centroids);
    Ok((dummy_bag(features)?, part))
}

/// Outcome of brute-forcing the summary approximation error over every
/// (query, region, patch) triple and both the min and max branches.
#[derive(Clone, Debug)]
pub struct SummaryErrorReport {
    pub pass: bool,
    /// (query, region, patch) combinations enumerated.
    pub triples: usize,
    /// Largest observed |<q_hat, f(x_j)> - <q_hat, summary>|.
    pub max_observed: f64,
    /// Largest per-region budget `b_norm * lipschitz * diameter`.
    pub max_bound: f64,
    /// Largest observed minus the budget of its region; negative when every
    /// triple sits inside its budget.
    pub worst_excess: f64,
}

/// Compares every patch's projected interaction against its region's
/// projected summary, for every query. The budget per region is
/// `b_norm * lipschitz * diameter`, using each branch's own projection
/// Lipschitz constant; `b_norm` must bound every query norm for the budget
/// to be what the report claims.
pub fn verify_summary_error(
    bag: &FeatureBag,
    part: &RegionPartition,
    heads: &ProjectionHeads,
    b_norm: f64,
) -> Result<SummaryErrorReport> {
    let meta = build_metadata(bag, part, heads)?;
    let n = bag.n_patches();
    let lip_min = heads.f_min.lipschitz();
    let lip_max = heads.f_max.lipschitz();

    let q_hats: Vec<Vec<f64>> = (0..n)
        .map(|i| heads.f_q.apply_vec(bag.features.row(i)))
        .collect::<Result<_>>()?;

    let mut triples = 0usize;
    let mut max_observed = 0.0_f64;
    let mut max_bound = 0.0_f64;
    let mut worst_excess = f64::NEG_INFINITY;
    for (r, members) in part.regions.iter().enumerate() {
        let diam = region_diameter(bag, members);
        let bound_min = b_norm * lip_min * diam;
        let bound_max = b_norm * lip_max * diam;
        max_bound = max_bound.max(bound_min).max(bound_max);
        for &j in members {
            let fx_min = heads.f_min.apply_vec(bag.features.row(j as usize))?;
            let fx_max = heads.f_max.apply_vec(bag.features.row(j as usize))?;
            for q_hat in &q_hats {
                let err_min = (dot(q_hat, &fx_min) - dot(q_hat, meta.proj_min.row(r))).abs();
                let err_max = (dot(q_hat, &fx_max) - dot(q_hat, meta.proj_max.row(r))).abs();
                max_observed = max_observed.max(err_min).max(err_max);
                worst_excess = worst_excess.max(err_min - bound_min).max(err_max - bound_max);
                triples += 1;
            }
        }
    }
    Ok(SummaryErrorReport {
        pass: worst_excess <= 1e-9,
        triples,
        max_observed,
        max_bound,
        worst_excess,
    })
}

/// Outcome of the ranking suboptimality check aggregated over every query.
#[derive(Clone, Debug)]
pub struct RankingErrorReport {
    pub pass: bool,
    pub queries: usize,
    /// Worst gap between a query's true top-k threshold and the true value
    /// of a region its metadata score selected.
    pub max_suboptimality: f64,
    /// Largest per-query budget `2 * max_epsilon1`.
    pub max_bound: f64,
}

/// Runs the per-query ranking stability check for every patch as the query
/// and aggregates; passes only when every query passes its own budget.
pub fn verify_ranking_error(
    bag: &FeatureBag,
    part: &RegionPartition,
    heads: &ProjectionHeads,
    k: usize,
) -> Result<RankingErrorReport> {
    let n = bag.n_patches();
    let mut pass = true;
    let mut max_suboptimality = 0.0_f64;
    let mut max_bound = 0.0_f64;
    for q in 0..n {
        let report = ranking_stability_check(bag, part, heads, k, q)?;
        pass &= report.pass;
        max_suboptimality = max_suboptimality.max(report.max_suboptimality);
        max_bound = max_bound.max(report.bound);
    }
    Ok(RankingErrorReport {
        pass,
        queries: n,
        max_suboptimality,
        max_bound,
    })
}

/// Attention variant being priced or measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    Querent,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Querent => "querent",
        }
    }
}

/// Model storage is priced at 4 bytes per scalar. Measured workspaces hold
/// f64 values, so byte-level comparisons against measurements carry a
/// factor-of-two convention gap; comparisons in this crate use elements.
pub const BYTES_PER_SCALAR: u64 = 4;

/// Closed-form cost model for one bag pass.
///
/// Counts are multiply-accumulates (1 MAC = 2 FLOPs); memory is workspace
/// elements times `BYTES_PER_SCALAR`. Projection and pooling arithmetic is
/// excluded from both variants, matching the instrumentation counters.
#[derive(Clone, Copy, Debug)]
pub struct CostModel {
    pub n: u64,
    pub d: u64,
    pub p: u64,
    pub k: u64,
    pub chunk: u64,
}

impl CostModel {
    pub fn new(n: u64, d: u64, p: u64, k: u64, chunk: u64) -> Result<CostModel> {
        if n == 0 || d == 0 || p == 0 || k == 0 || chunk == 0 {
            return Err(Error::Param(
                "cost model parameters must all be >= 1".into(),
            ));
        }
        Ok(CostModel { n, d, p, k, chunk })
    }

    pub fn regions(&self) -> u64 {
        self.n.div_ceil(self.p)
    }

    /// Patches one query attends over: `min(k, regions) * p` selected
    /// members plus the prepended query copy.
    pub fn context_len(&self) -> u64 {
        self.k.min(self.regions()) * self.p + 1
    }

    /// Multiply-accumulate count. Full: score and aggregation products,
    /// `2 n^2 d`. Querent: summary folds `n d`, region scoring `2 n R d`
    /// (min and max dots), selective score plus aggregation
    /// `2 n (kp + 1) d`.
    pub fn macs(&self, variant: Variant) -> u64 {
        match variant {
            Variant::Full => 2 * self.n * self.n * self.d,
            Variant::Querent => {
                self.n * self.d
                    + 2 * self.n * self.regions() * self.d
                    + 2 * self.n * self.context_len() * self.d
            }
        }
    }

    /// FLOPs under the primary 1-MAC-=-2-FLOPs convention. The 1-FLOP-per-MAC
    /// reading is `macs` itself.
    pub fn flops(&self, variant: Variant) -> u64 {
        2 * self.macs(variant)
    }

    /// Workspace elements. Full holds the n-by-n score matrix plus query/key
    /// projections. Querent holds region summaries `2 R d`, one chunk of
    /// region scores `min(n, chunk) R`, one chunk of gathered contexts
    /// `min(n, chunk) (kp + 1)`, and the bag-lifetime projections `3 n d`.
    pub fn mem_elems(&self, variant: Variant) -> u64 {
        let c = self.n.min(self.chunk);
        match variant {
            Variant::Full => self.n * self.n + 2 * self.n * self.d,
            Variant::Querent => {
                2 * self.regions() * self.d
                    + c * self.regions()
                    + c * self.context_len()
                    + 3 * self.n * self.d
            }
        }
    }

    pub fn mem_bytes(&self, variant: Variant) -> u64 {
        BYTES_PER_SCALAR * self.mem_elems(variant)
    }
}

/// Bytes rendered in binary gigabytes. The dense-path reference point
/// (n = 100000, d = 512) prices 4.0410e10 bytes: 37.63 GiB here, 40.41 in
/// decimal gigabytes.
pub fn gib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 30) as f64
}

/// One sweep point: the closed-form prices next to the measured counters.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub n: usize,
    pub variant: Variant,
    pub model_macs: u64,
    pub measured_macs: u64,
    pub model_elems: u64,
    pub measured_elems: u64,
}

impl SweepRow {
    fn factor(measured: u64, model: u64) -> f64 {
        let a = measured.max(1) as f64;
        let b = model.max(1) as f64;
        (a / b).max(b / a)
    }

    /// Worst-direction measured/model ratio for MACs.
    pub fn mac_factor(&self) -> f64 {
        SweepRow::factor(self.measured_macs, self.model_macs)
    }

    /// Worst-direction measured/model ratio for workspace elements.
    pub fn elem_factor(&self) -> f64 {
        SweepRow::factor(self.measured_elems, self.model_elems)
    }
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub chunk: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// CSV rendering: `N,variant,flops,bytes,measured_macs,measured_elems`.
    /// The flops and bytes columns are the closed-form model (2 FLOPs per
    /// MAC, 4 bytes per scalar); the measured columns are raw counter reads.
    pub fn csv(&self) -> String {
        let mut out = String::from("N,variant,flops,bytes,measured_macs,measured_elems\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.n,
                row.variant.name(),
                2 * row.model_macs,
                BYTES_PER_SCALAR * row.model_elems,
                row.measured_macs,
                row.measured_elems
            ));
        }
        out
    }

    /// Largest measured-vs-model factor across rows and both meters.
    pub fn worst_factor(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.mac_factor().max(r.elem_factor()))
            .fold(0.0, f64::max)
    }

    fn querent_rows(&self) -> Vec<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.variant == Variant::Querent)
            .collect()
    }

    /// Measured querent MAC growth between consecutive sweep points,
    /// relative to linear growth: `(macs2/macs1) / (n2/n1)`.
    pub fn querent_growth_factors(&self) -> Vec<f64> {
        let rows = self.querent_rows();
        rows.windows(2)
            .map(|w| {
                let macs_ratio = w[1].measured_macs as f64 / w[0].measured_macs as f64;
                let n_ratio = w[1].n as f64 / w[0].n as f64;
                macs_ratio / n_ratio
            })
            .collect()
    }

    /// True when the measured querent/full MAC ratio strictly decreases
    /// across the sweep.
    pub fn ratio_monotone_decreasing(&self) -> bool {
        let mut ratios = Vec::new();
        for q in self.querent_rows() {
            if let Some(f) = self
                .rows
                .iter()
                .find(|r| r.n == q.n && r.variant == Variant::Full)
            {
                ratios.push(q.measured_macs as f64 / f.measured_macs as f64);
            }
        }
        ratios.windows(2).all(|w| w[1] < w[0])
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&format!(
                "N={:<6} {:<8} macs {:>14} (model {:>14}, x{:.3})  elems {:>10} (model {:>10}, x{:.3})\n",
                row.n,
                row.variant.name(),
                row.measured_macs,
                row.model_macs,
                row.mac_factor(),
                row.measured_elems,
                row.model_elems,
                row.elem_factor()
            ));
        }
        out
    }
}

/// Runs both attention variants over Gaussian bags at each sweep size with
/// the instrumentation counters live, recording measured MACs and peak
/// workspace elements next to the closed-form prices.
///
/// Resets the process-wide counters around each run: callers must not have
/// concurrent instrumented work in flight. Peak workspace numbers are
/// schedule-independent because chunks execute in order.
pub fn empirical_counters(
    ns: &[usize],
    d: usize,
    p: usize,
    k: usize,
    chunk: usize,
    seed: u64,
) -> Result<SweepReport> {
    if ns.is_empty() {
        return Err(Error::Param("sweep needs at least one bag size".into()));
    }
    let mut rows = Vec::with_capacity(ns.len() * 2);
    for (idx, &n) in ns.iter().enumerate() {
        let mut rng = RngStream::new(trial_seed(seed, idx));
        let bag = dummy_bag(Matrix::gaussian(n, d, 1.0, &mut rng))?;
        let part = crate::bagstore::partition_row_major(&bag, p)?;
        let heads = ProjectionHeads::frozen_random(d, d, trial_seed(seed, idx) ^ 1);
        let params =
            crate::attention::AttentionParams::random(d, 1, false, 0.0, &mut rng)?;
        let model = CostModel::new(n as u64, d as u64, p as u64, k as u64, chunk as u64)?;

        counters::reset();
        let full = crate::attention::full_self_attention(&bag.features, &params)?;
        drop(full);
        rows.push(SweepRow {
            n,
            variant: Variant::Full,
            model_macs: model.macs(Variant::Full),
            measured_macs: counters::total_macs(),
            model_elems: model.mem_elems(Variant::Full),
            measured_elems: counters::peak_live_elems(),
        });

        counters::reset();
        let meta = build_metadata(&bag, &part, &heads)?;
        let opts = SelectionOptions::new(k);
        let plan = crate::attention::ChunkPlan::new(chunk)?;
        let out = crate::attention::selective_attention(
            &bag, &part, &meta, &heads, &params, &opts, &plan, None,
        )?;
        drop(out);
        rows.push(SweepRow {
            n,
            variant: Variant::Querent,
            model_macs: model.macs(Variant::Querent),
            measured_macs: counters::total_macs(),
            model_elems: model.mem_elems(Variant::Querent),
            measured_elems: counters::peak_live_elems(),
        });
    }
    Ok(SweepReport {
        d,
        p,
        k,
        chunk,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::{Activation, ProjectionHead};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    fn acceptance_family(trials: usize) -> TheoryConfig {
        TheoryConfig::new(64, 128, 0.7, 0.05, 1.0, 1.0, trials).unwrap()
    }

    #[test]
    fn feasibility_floors_and_caps_match_hand_arithmetic() {
        let cfg = acceptance_family(10);
        assert_eq!(cfg.min_feasible_d(), 117);
        assert_eq!(cfg.min_k(), 1);
        assert_eq!(cfg.k, 1);
        assert!(close(cfg.diam_cap(), 9.667475524034828e-4, 1e-14));
        assert!(close(cfg.diam, cfg.diam_cap(), 0.0));
        assert!(close(cfg.separation(), 0.5, 0.0));
        assert!(close(cfg.frobenius_bound(), 1.4618718433538227, 1e-15));
        assert!(cfg.check_feasible().is_ok());

        let alpha_tenth = TheoryConfig::new(64, 128, 0.7, 0.05, 0.1, 1.0, 10).unwrap();
        assert_eq!(alpha_tenth.min_k(), 8);
        assert_eq!(alpha_tenth.k, 8);
    }

    #[test]
    fn infeasible_configurations_are_refused_by_name() {
        let mut thin = acceptance_family(10);
        thin.d = 116;
        match thin.check_feasible() {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("dimension"), "{msg}"),
            other => panic!("expected an infeasibility error, got {other:?}"),
        }

        let mut few = TheoryConfig::new(64, 128, 0.7, 0.05, 0.1, 1.0, 10).unwrap();
        few.k = few.min_k() - 1;
        match few.check_feasible() {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("selection"), "{msg}"),
            other => panic!("expected an infeasibility error, got {other:?}"),
        }

        let mut wide = acceptance_family(10);
        wide.diam = 10.0 * wide.diam_cap();
        match verify_theorem(&wide, 3) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("diameter"), "{msg}"),
            other => panic!("expected the verifier to refuse, got {other:?}"),
        }
    }

    #[test]
    fn constructed_instances_respect_norms_spacing_and_diameter() {
        let cfg = acceptance_family(10);
        let inst = construct_theorem_instance(&cfg, 40).unwrap();
        assert_eq!(inst.features.rows(), 64);
        assert_eq!(inst.features.cols(), 128);
        assert_eq!(inst.part.n_regions(), 16);
        assert_eq!(inst.coords.len(), 64);
        assert_eq!(inst.w_q.data(), inst.w_k.data());

        for i in 0..inst.features.rows() {
            let row = inst.features.row(i);
            let norm = dot(row, row).sqrt();
            assert!(norm <= cfg.b_norm + 1e-12, "patch {i} norm {norm}");
        }

        let bag = dummy_bag(inst.features.clone()).unwrap();
        for members in &inst.part.regions {
            assert!(region_diameter(&bag, members) <= cfg.diam + 1e-15);
        }

        for r in 1..inst.part.n_regions() {
            let prev = inst.coords[(r - 1) * cfg.patches_per_region];
            let here = inst.coords[r * cfg.patches_per_region];
            assert!(close(here - prev, cfg.separation(), 1e-12));
        }

        let same = dot(inst.features.row(0), inst.features.row(1));
        let next = dot(inst.features.row(0), inst.features.row(4));
        let far = dot(inst.features.row(0), inst.features.row(60));
        assert!(same > next && next > far, "{same} {next} {far}");
        let anchor_sq = (cfg.b_norm - cfg.diam / 2.0).powi(2);
        assert!(close(next, anchor_sq * (-cfg.alpha * cfg.separation()).exp(), 2e-3));
    }

    #[test]
    fn masked_scores_stay_within_the_frobenius_budget() {
        let report = verify_theorem(&acceptance_family(100), 11).unwrap();
        assert_eq!(report.rows.len(), 100);
        assert!(report.passes >= 92, "only {}/100 passed", report.passes);
        assert!(report.pass_rate() >= 0.92);
        assert!(report.worst_ratio <= 1.0, "worst {}", report.worst_ratio);

        let csv = report.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("trial,frob,bound,pass"));
        assert_eq!(csv.lines().count(), 101);
        assert!(lines.next().unwrap().starts_with("0,"));
    }

    #[test]
    fn selecting_every_region_reproduces_the_full_matrix() {
        let mut cfg = acceptance_family(5);
        cfg.k = cfg.n_regions();
        let report = verify_theorem(&cfg, 21).unwrap();
        for row in &report.rows {
            assert_eq!(row.frob, 0.0);
            assert!(row.pass);
        }
        assert_eq!(report.worst_ratio, 0.0);
    }

    #[test]
    fn independent_recomputation_matches_reported_distances() {
        let cfg = acceptance_family(3);
        let report = verify_theorem(&cfg, 17).unwrap();
        for trial in 0..3 {
            let inst = construct_theorem_instance(&cfg, trial_seed(17, trial)).unwrap();
            let bag = dummy_bag(inst.features.clone()).unwrap();
            let heads = ProjectionHeads::identity(cfg.d);
            let meta = build_metadata(&bag, &inst.part, &heads).unwrap();
            let opts = SelectionOptions::new(cfg.k);
            let selections = compute_selections(&bag, &inst.part, &meta, &heads, &opts).unwrap();

            let l = cfg.l;
            let d = cfg.d;
            let mut scores = vec![vec![0.0f64; l]; l];
            for (i, row) in scores.iter_mut().enumerate() {
                for (j, slot) in row.iter_mut().enumerate() {
                    let mut qi = vec![0.0f64; d];
                    let mut kj = vec![0.0f64; d];
                    for c in 0..d {
                        for t in 0..d {
                            qi[c] += inst.features.get(i, t) * inst.w_q.get(t, c);
                            kj[c] += inst.features.get(j, t) * inst.w_k.get(t, c);
                        }
                    }
                    let mut s = 0.0;
                    for c in 0..d {
                        s += qi[c] * kj[c];
                    }
                    *slot = (s / (d as f64).sqrt()).exp();
                }
            }
            let mut frob_sq = 0.0;
            for (i, row) in scores.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                for (j, &v) in row.iter().enumerate() {
                    if !selections[i].contains(&inst.part.home_region[j]) {
                        let masked = v / sum;
                        frob_sq += masked * masked;
                    }
                }
            }
            assert!(
                close(frob_sq.sqrt(), report.rows[trial].frob, 1e-12),
                "trial {trial}: {} vs {}",
                frob_sq.sqrt(),
                report.rows[trial].frob
            );
        }
    }

    #[test]
    fn twenty_small_instances_satisfy_both_bounds() {
        let mut rng = RngStream::new(99);
        for inst_idx in 0..20 {
            let m = 2 + (rng.next_u64() % 7) as usize;
            let p = 1 + (rng.next_u64() % 4) as usize;
            let (bag, part) =
                construct_lemma_instance(m, p, 6, 0.05, 1.0, 1000 + inst_idx).unwrap();
            let heads = ProjectionHeads::identity(6);

            let summary = verify_summary_error(&bag, &part, &heads, 1.0).unwrap();
            assert!(
                summary.pass,
                "instance {inst_idx}: excess {}",
                summary.worst_excess
            );
            assert_eq!(summary.triples, m * p * m * p);

            let ranking = verify_ranking_error(&bag, &part, &heads, 2.min(m)).unwrap();
            assert!(
                ranking.pass,
                "instance {inst_idx}: suboptimality {} vs {}",
                ranking.max_suboptimality, ranking.max_bound
            );
            assert_eq!(ranking.queries, m * p);
        }
    }

    #[test]
    fn zero_diameter_regions_give_exact_equality() {
        let (bag, part) = construct_lemma_instance(4, 3, 5, 0.0, 1.0, 7).unwrap();
        let heads = ProjectionHeads::identity(5);
        let report = verify_summary_error(&bag, &part, &heads, 1.0).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_observed, 0.0);
        assert_eq!(report.max_bound, 0.0);
    }

    #[test]
    fn doubled_projection_doubles_the_error_budget() {
        let (bag, part) = construct_lemma_instance(4, 3, 5, 0.1, 1.0, 13).unwrap();
        let twice = ProjectionHead {
            w: Matrix::from_fn(5, 5, |i, j| if i == j { 2.0 } else { 0.0 }),
            b: vec![0.0; 5],
            activation: Activation::Identity,
        };
        let mut heads = ProjectionHeads::identity(5);
        heads.f_min = twice.clone();
        heads.f_max = twice;
        let report = verify_summary_error(&bag, &part, &heads, 1.0).unwrap();
        assert!(report.pass, "excess {}", report.worst_excess);
        assert!(report.max_bound <= 2.0 * 0.1 + 1e-9);
        assert!(report.max_observed <= report.max_bound + 1e-12);
    }

    #[test]
    fn cost_model_reproduces_the_published_anchor_points() {
        let model = CostModel::new(100_000, 512, 16, 16, 8192).unwrap();
        assert_eq!(model.regions(), 6250);
        assert_eq!(model.context_len(), 257);
        assert_eq!(model.macs(Variant::Full), 10_240_000_000_000);
        assert_eq!(model.flops(Variant::Full), 20_480_000_000_000);
        assert_eq!(model.macs(Variant::Querent), 666_368_000_000);
        assert_eq!(model.mem_bytes(Variant::Full), 40_409_600_000);
        assert_eq!(model.mem_bytes(Variant::Querent), 853_221_376);

        let full_gib = gib(model.mem_bytes(Variant::Full));
        assert!((37.0..=40.0).contains(&full_gib), "{full_gib}");

        let flop_ratio =
            model.flops(Variant::Querent) as f64 / model.flops(Variant::Full) as f64;
        let mem_ratio =
            model.mem_bytes(Variant::Querent) as f64 / model.mem_bytes(Variant::Full) as f64;
        assert!(close(flop_ratio, 0.065075, 1e-4), "{flop_ratio}");
        assert!(close(mem_ratio, 0.021114, 1e-4), "{mem_ratio}");
        assert!(flop_ratio <= 0.10);
        assert!(mem_ratio <= 0.05);
    }

    #[test]
    fn querent_cost_share_vanishes_as_bags_grow() {
        let small = CostModel::new(1_000, 512, 16, 16, 8192).unwrap();
        let large = CostModel::new(100_000, 512, 16, 16, 8192).unwrap();
        let share = |m: &CostModel| {
            m.flops(Variant::Querent) as f64 / m.flops(Variant::Full) as f64
        };
        assert!(share(&large) < share(&small));

        let mut last_macs = 0;
        let mut last_mem = 0;
        for n in [1_000u64, 2_000, 4_000, 8_000, 16_000] {
            let m = CostModel::new(n, 64, 64, 16, 8192).unwrap();
            for v in [Variant::Full, Variant::Querent] {
                assert!(m.macs(v) > 0);
            }
            assert!(m.macs(Variant::Querent) > last_macs);
            assert!(m.mem_elems(Variant::Querent) > last_mem);
            last_macs = m.macs(Variant::Querent);
            last_mem = m.mem_elems(Variant::Querent);
        }
    }

    #[test]
    fn sweep_report_renders_model_and_measured_columns() {
        let report = SweepReport {
            d: 64,
            p: 64,
            k: 16,
            chunk: 8192,
            rows: vec![
                SweepRow {
                    n: 1024,
                    variant: Variant::Full,
                    model_macs: 1000,
                    measured_macs: 1000,
                    model_elems: 500,
                    measured_elems: 600,
                },
                SweepRow {
                    n: 1024,
                    variant: Variant::Querent,
                    model_macs: 100,
                    measured_macs: 110,
                    model_elems: 50,
                    measured_elems: 50,
                },
                SweepRow {
                    n: 2048,
                    variant: Variant::Full,
                    model_macs: 4000,
                    measured_macs: 4000,
                    model_elems: 2000,
                    measured_elems: 2000,
                },
                SweepRow {
                    n: 2048,
                    variant: Variant::Querent,
                    model_macs: 230,
                    measured_macs: 231,
                    model_elems: 100,
                    measured_elems: 100,
                },
            ],
        };
        let csv = report.csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("N,variant,flops,bytes,measured_macs,measured_elems")
        );
        assert_eq!(lines.next(), Some("1024,full,2000,2000,1000,600"));
        assert_eq!(lines.next(), Some("1024,querent,200,200,110,50"));

        assert!(close(report.worst_factor(), 1.2, 1e-12));
        let growth = report.querent_growth_factors();
        assert_eq!(growth.len(), 1);
        assert!(close(growth[0], (231.0 / 110.0) / 2.0, 1e-12));
        assert!(report.ratio_monotone_decreasing());
    }
}
