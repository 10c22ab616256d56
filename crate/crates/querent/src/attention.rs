//! Multi-head attention over selected contexts, the dense full-attention
//! reference, and the masked score matrices used by the approximation checks.
//!
//! The selective path streams queries through fixed-size chunks: each chunk
//! scores every region against its queries, picks top-k regions per query,
//! gathers the member patches into a context, and attends over that context
//! only. Chunk workspaces are tracked as chunk-scoped allocations; per-query
//! scratch (one weight row over a context, one concatenation row) is too
//! small to matter and stays untracked.

use crate::bagstore::{FeatureBag, RegionPartition};
use crate::counters::{self, MacPhase};
use crate::error::{Error, Result};
use crate::exec;
use crate::metadata::{ProjectionHeads, RegionMetadataSet};
use crate::numerics::{dot, matmul, softmax_slice, Matrix, RngStream};

/// Weights for one attention block. `w_qkv` packs the query, key, and value
/// projections side by side as `[Q | K | V]`, each `d` columns wide; head `h`
/// owns columns `h*d_h..(h+1)*d_h` inside each segment.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub heads: usize,
    pub residual: bool,
    /// Probability of zeroing one attention weight during training; the
    /// survivors are rescaled by 1/(1-rate).
    pub dropout_rate: f64,
}

impl AttentionParams {
    pub fn new(
        w_qkv: Matrix,
        b_qkv: Vec<f64>,
        w_o: Matrix,
        b_o: Vec<f64>,
        heads: usize,
        residual: bool,
        dropout_rate: f64,
    ) -> Result<AttentionParams> {
        let d = w_qkv.rows();
        if d == 0 || w_qkv.cols() != 3 * d {
            return Err(Error::Shape(format!(
                "packed qkv projection must be d x 3d, got {}x{}",
                w_qkv.rows(),
                w_qkv.cols()
            )));
        }
        if b_qkv.len() != 3 * d {
            return Err(Error::Shape(format!(
                "qkv bias has {} slots for 3d = {}",
                b_qkv.len(),
                3 * d
            )));
        }
        if w_o.rows() != d || w_o.cols() != d {
            return Err(Error::Shape(format!(
                "output projection must be {d}x{d}, got {}x{}",
                w_o.rows(),
                w_o.cols()
            )));
        }
        if b_o.len() != d {
            return Err(Error::Shape(format!(
                "output bias has {} slots for d = {d}",
                b_o.len()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Param(format!(
                "head count {heads} must divide the model width {d}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Param(format!(
                "dropout rate {dropout_rate} must lie in [0, 1)"
            )));
        }
        if !b_qkv.iter().chain(&b_o).all(|v| v.is_finite()) {
            return Err(Error::Numeric("attention bias with non-finite entry".into()));
        }
        Ok(AttentionParams {
            w_qkv,
            b_qkv,
            w_o,
            b_o,
            heads,
            residual,
            dropout_rate,
        })
    }

    /// Gaussian init: projection entries N(0, 1/d), zero biases.
    pub fn random(
        d: usize,
        heads: usize,
        residual: bool,
        dropout_rate: f64,
        rng: &mut RngStream,
    ) -> Result<AttentionParams> {
        let std = (1.0 / d as f64).sqrt();
        AttentionParams::new(
            Matrix::gaussian(d, 3 * d, std, rng),
            vec![0.0; 3 * d],
            Matrix::gaussian(d, d, std, rng),
            vec![0.0; d],
            heads,
            residual,
            dropout_rate,
        )
    }

    pub fn d(&self) -> usize {
        self.w_qkv.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }
}

/// How contexts are chosen for each query.
#[derive(Clone, Copy, Debug)]
pub struct SelectionOptions {
    /// Regions kept per query.
    pub k: usize,
    /// Force the query's own region into the selection, displacing the
    /// weakest pick when it is not already there.
    pub include_home_region: bool,
    /// Drop the prepended query copy when its home region is selected, so
    /// the query patch appears exactly once in its context.
    pub dedup_query: bool,
}

impl SelectionOptions {
    pub fn new(k: usize) -> SelectionOptions {
        SelectionOptions {
            k,
            include_home_region: false,
            dedup_query: false,
        }
    }
}

/// Query-chunking schedule for the streaming selective path.
#[derive(Clone, Copy, Debug)]
pub struct ChunkPlan {
    chunk_size: usize,
}

impl ChunkPlan {
    pub fn new(chunk_size: usize) -> Result<ChunkPlan> {
        if chunk_size == 0 {
            return Err(Error::Param("chunk size must be >= 1".into()));
        }
        Ok(ChunkPlan { chunk_size })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn ranges(&self, n: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let c = self.chunk_size;
        (0..n).step_by(c).map(move |s| (s, (s + c).min(n)))
    }
}

/// Byproducts of one selective pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SelectiveCache {
    pub selections: Vec<Vec<u32>>,
    pub contexts: Vec<Vec<u32>>,
    /// Softmax weights per query, heads stacked head-major, each block as
    /// long as that query's context.
    pub weights_pre: Vec<Vec<f64>>,
    /// Same weights after dropout masking and rescale; equal to
    /// `weights_pre` when dropout is off.
    pub weights_post: Vec<Vec<f64>>,
    /// Head-concatenated attention outputs before the output projection.
    pub concat: Matrix,
    pub qkv: Matrix,
}

/// `x @ w_qkv + b_qkv`, one row per patch.
pub fn project_qkv(features: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    if features.cols() != params.d() {
        return Err(Error::Shape(format!(
            "patches have width {}, attention expects {}",
            features.cols(),
            params.d()
        )));
    }
    let cols = params.w_qkv.cols();
    let mut out = Matrix::zeros(features.rows(), cols);
    exec::for_each_row(out.data_mut(), cols, 0, |i, row| {
        for (k, &xv) in features.row(i).iter().enumerate() {
            for (slot, wv) in row.iter_mut().zip(params.w_qkv.row(k)) {
                *slot += xv * wv;
            }
        }
        for (slot, b) in row.iter_mut().zip(&params.b_qkv) {
            *slot += b;
        }
    });
    Ok(out)
}

/// Top-k region pick for one query, honoring the home-region override.
fn select_with_options(scores: &[f64], home: u32, opts: &SelectionOptions) -> Result<Vec<u32>> {
    let picked = crate::selection::topk_regions(scores, opts.k)?;
    if !opts.include_home_region || picked.contains(&home) {
        return Ok(picked);
    }
    let mut picked = if opts.k == 1 {
        Vec::new()
    } else {
        crate::selection::topk_regions(scores, opts.k - 1)?
    };
    picked.push(home);
    picked.sort_unstable();
    Ok(picked)
}

/// Patch indices a query attends over: the query itself, then the member
/// patches of each selected region in ascending region order.
fn build_context(qi: u32, selected: &[u32], part: &RegionPartition, dedup: bool) -> Vec<u32> {
    let home = part.home_region[qi as usize];
    let keep_query_copy = !(dedup && selected.contains(&home));
    let mut ctx = Vec::with_capacity(
        usize::from(keep_query_copy) + selected.len() * part.patches_per_region,
    );
    if keep_query_copy {
        ctx.push(qi);
    }
    for &r in selected {
        ctx.extend_from_slice(&part.regions[r as usize]);
    }
    ctx
}

/// Per-query records captured for the backward pass.
struct AttendRecord {
    weights_pre: Vec<f64>,
    weights_post: Vec<f64>,
    concat: Vec<f64>,
}

/// Attention for one query over one context, all heads. Writes the final
/// output row (projection, bias, optional residual included).
fn attend_one(
    qi: usize,
    x_row: &[f64],
    qkv: &Matrix,
    ctx: &[u32],
    params: &AttentionParams,
    dropout_seed: Option<u64>,
    out_row: &mut [f64],
    mut record: Option<&mut AttendRecord>,
) {
    let d = params.d();
    let hd = params.head_dim();
    let sqrt_hd = (hd as f64).sqrt();
    let mut concat = vec![0.0; d];
    let mut weights = vec![0.0; ctx.len()];
    let rate = params.dropout_rate;
    let mut rng = match dropout_seed {
        Some(seed) if rate > 0.0 => Some(RngStream::new(seed ^ qi as u64)),
        _ => None,
    };

    for head in 0..params.heads {
        let qo = head * hd;
        let q = &qkv.row(qi)[qo..qo + hd];
        for (slot, &j) in weights.iter_mut().zip(ctx) {
            let key = &qkv.row(j as usize)[d + qo..d + qo + hd];
            *slot = dot(q, key) / sqrt_hd;
        }
        softmax_slice(&mut weights);
        if let Some(rec) = record.as_deref_mut() {
            rec.weights_pre.extend_from_slice(&weights);
        }
        if let Some(rng) = rng.as_mut() {
            let keep = 1.0 - rate;
            for w in weights.iter_mut() {
                if rng.next_f64() < rate {
                    *w = 0.0;
                } else {
                    *w /= keep;
                }
            }
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.weights_post.extend_from_slice(&weights);
        }
        for (&w, &j) in weights.iter().zip(ctx) {
            let val = &qkv.row(j as usize)[2 * d + qo..2 * d + qo + hd];
            for (slot, &v) in concat[qo..qo + hd].iter_mut().zip(val) {
                *slot += w * v;
            }
        }
    }

    for slot in out_row.iter_mut() {
        *slot = 0.0;
    }
    for (r, &cv) in concat.iter().enumerate() {
        for (slot, wv) in out_row.iter_mut().zip(params.w_o.row(r)) {
            *slot += cv * wv;
        }
    }
    for (slot, b) in out_row.iter_mut().zip(&params.b_o) {
        *slot += b;
    }
    if params.residual {
        for (slot, x) in out_row.iter_mut().zip(x_row) {
            *slot += x;
        }
    }
    counters::add_macs(MacPhase::AttentionScore, (ctx.len() * d) as u64);
    counters::add_macs(MacPhase::AttentionAggregate, (ctx.len() * d) as u64);
    if let Some(rec) = record {
        rec.concat.copy_from_slice(&concat);
    }
}

fn check_bag_against(bag: &FeatureBag, part: &RegionPartition, params: &AttentionParams) -> Result<()> {
    if bag.d() != params.d() {
        return Err(Error::Shape(format!(
            "bag width {} does not match attention width {}",
            bag.d(),
            params.d()
        )));
    }
    if part.home_region.len() != bag.n_patches() {
        return Err(Error::Shape(format!(
            "partition covers {} patches, bag has {}",
            part.home_region.len(),
            bag.n_patches()
        )));
    }
    Ok(())
}

fn check_selection_inputs(
    bag: &FeatureBag,
    meta: &RegionMetadataSet,
    heads: &ProjectionHeads,
    part: &RegionPartition,
) -> Result<()> {
    if heads.f_q.w.rows() != bag.d() {
        return Err(Error::Shape(format!(
            "query head takes width {}, bag has width {}",
            heads.f_q.w.rows(),
            bag.d()
        )));
    }
    if heads.f_q.w.cols() != meta.embed_dim() {
        return Err(Error::Shape(format!(
            "query head emits width {}, metadata space has width {}",
            heads.f_q.w.cols(),
            meta.embed_dim()
        )));
    }
    if meta.n_regions() != part.n_regions() {
        return Err(Error::Shape(format!(
            "metadata covers {} regions, partition has {}",
            meta.n_regions(),
            part.n_regions()
        )));
    }
    Ok(())
}

/// Region choices for every query in one bag.
pub fn compute_selections(
    bag: &FeatureBag,
    part: &RegionPartition,
    meta: &RegionMetadataSet,
    heads: &ProjectionHeads,
    opts: &SelectionOptions,
) -> Result<Vec<Vec<u32>>> {
    check_selection_inputs(bag, meta, heads, part)?;
    if opts.k == 0 {
        return Err(Error::Param("selection needs k >= 1".into()));
    }
    let n = bag.n_patches();
    Ok(exec::map_indexed(n, |qi| {
        let q_hat = heads
            .f_q
            .apply_vec(bag.features.row(qi))
            .expect("query head width checked against the bag");
        let scores =
            crate::selection::score_regions(&q_hat, meta).expect("metadata width checked");
        select_with_options(&scores, part.home_region[qi], opts)
            .expect("k checked to be >= 1")
    }))
}

/// The streaming selective pass: scores, selects, and attends one query
/// chunk at a time, never holding more than one chunk's workspaces.
pub fn selective_attention(
    bag: &FeatureBag,
    part: &RegionPartition,
    meta: &RegionMetadataSet,
    heads: &ProjectionHeads,
    params: &AttentionParams,
    opts: &SelectionOptions,
    plan: &ChunkPlan,
    dropout_seed: Option<u64>,
) -> Result<Matrix> {
    check_bag_against(bag, part, params)?;
    check_selection_inputs(bag, meta, heads, part)?;
    if opts.k == 0 {
        return Err(Error::Param("selection needs k >= 1".into()));
    }
    let n = bag.n_patches();
    let d = params.d();
    let m = meta.n_regions();

    let qkv = project_qkv(&bag.features, params)?;
    let _qkv_alive = counters::track_alloc(qkv.rows() * qkv.cols(), false);
    let mut out = Matrix::zeros(n, d);
    let _out_alive = counters::track_alloc(n * d, false);

    for (start, end) in plan.ranges(n) {
        let c_len = end - start;
        let mut score_ws = Matrix::zeros(c_len, m);
        let _scores_alive = counters::track_alloc(c_len * m, true);
        exec::for_each_row(score_ws.data_mut(), m, start, |qi, row| {
            let q_hat = heads
                .f_q
                .apply_vec(bag.features.row(qi))
                .expect("query head width checked against the bag");
            crate::selection::score_regions_into(&q_hat, meta, row)
                .expect("metadata width checked");
        });

        let selections: Vec<Vec<u32>> = exec::map_indexed(c_len, |i| {
            select_with_options(score_ws.row(i), part.home_region[start + i], opts)
                .expect("k checked to be >= 1")
        });
        let contexts: Vec<Vec<u32>> = exec::map_indexed(c_len, |i| {
            build_context((start + i) as u32, &selections[i], part, opts.dedup_query)
        });
        let picked: usize = selections.iter().map(Vec::len).sum();
        let gathered: usize = contexts.iter().map(Vec::len).sum();
        let _contexts_alive = counters::track_alloc(picked + gathered, true);

        let out_slice = &mut out.data_mut()[start * d..end * d];
        exec::for_each_row(out_slice, d, start, |qi, out_row| {
            attend_one(
                qi,
                bag.features.row(qi),
                &qkv,
                &contexts[qi - start],
                params,
                dropout_seed,
                out_row,
                None,
            );
        });
    }
    Ok(out)
}

/// Selective attention over caller-fixed selections, returning everything
/// the backward pass needs. Output rows are bit-identical to the streaming
/// pass given the same selections and dropout seed.
pub fn selective_attention_cached(
    bag: &FeatureBag,
    part: &RegionPartition,
    selections: &[Vec<u32>],
    params: &AttentionParams,
    dedup_query: bool,
    dropout_seed: Option<u64>,
) -> Result<(Matrix, SelectiveCache)> {
    check_bag_against(bag, part, params)?;
    let n = bag.n_patches();
    if selections.len() != n {
        return Err(Error::Shape(format!(
            "{} selections for {} queries",
            selections.len(),
            n
        )));
    }
    let m = part.n_regions() as u32;
    for sel in selections {
        if sel.iter().any(|&r| r >= m) {
            return Err(Error::Param(format!(
                "selection names region >= {m}"
            )));
        }
    }
    let d = params.d();
    let qkv = project_qkv(&bag.features, params)?;
    let contexts: Vec<Vec<u32>> = exec::map_indexed(n, |qi| {
        build_context(qi as u32, &selections[qi], part, dedup_query)
    });

    let mut out = Matrix::zeros(n, d);
    let mut rows: Vec<(Vec<f64>, AttendRecord)> = exec::map_indexed(n, |qi| {
        let mut out_row = vec![0.0; d];
        let mut rec = AttendRecord {
            weights_pre: Vec::with_capacity(params.heads * contexts[qi].len()),
            weights_post: Vec::with_capacity(params.heads * contexts[qi].len()),
            concat: vec![0.0; d],
        };
        attend_one(
            qi,
            bag.features.row(qi),
            &qkv,
            &contexts[qi],
            params,
            dropout_seed,
            &mut out_row,
            Some(&mut rec),
        );
        (out_row, rec)
    });

    let mut concat = Matrix::zeros(n, d);
    let mut weights_pre = Vec::with_capacity(n);
    let mut weights_post = Vec::with_capacity(n);
    for (qi, (out_row, rec)) in rows.drain(..).enumerate() {
        out.row_mut(qi).copy_from_slice(&out_row);
        concat.row_mut(qi).copy_from_slice(&rec.concat);
        weights_pre.push(rec.weights_pre);
        weights_post.push(rec.weights_post);
    }
    let cache = SelectiveCache {
        selections: selections.to_vec(),
        contexts,
        weights_pre,
        weights_post,
        concat,
        qkv,
    };
    Ok((out, cache))
}

/// Dense reference: every query attends over every patch. Materializes one
/// full score matrix, reused across heads.
pub fn full_self_attention(features: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    if features.cols() != params.d() {
        return Err(Error::Shape(format!(
            "patches have width {}, attention expects {}",
            features.cols(),
            params.d()
        )));
    }
    let n = features.rows();
    let d = params.d();
    let hd = params.head_dim();
    let sqrt_hd = (hd as f64).sqrt();

    let qkv = project_qkv(features, params)?;
    let _qkv_alive = counters::track_alloc(n * 3 * d, false);
    let mut scores = Matrix::zeros(n, n);
    let _scores_alive = counters::track_alloc(n * n, false);
    let mut concat = Matrix::zeros(n, d);
    let _concat_alive = counters::track_alloc(n * d, false);

    for head in 0..params.heads {
        let qo = head * hd;
        exec::for_each_row(scores.data_mut(), n, 0, |i, row| {
            let q = &qkv.row(i)[qo..qo + hd];
            for (j, slot) in row.iter_mut().enumerate() {
                let key = &qkv.row(j)[d + qo..d + qo + hd];
                *slot = dot(q, key) / sqrt_hd;
            }
            softmax_slice(row);
        });
        counters::add_macs(MacPhase::AttentionScore, (n * n * hd) as u64);
        exec::for_each_row(concat.data_mut(), d, 0, |i, row| {
            let w_row = scores.row(i);
            let head_out = &mut row[qo..qo + hd];
            for slot in head_out.iter_mut() {
                *slot = 0.0;
            }
            for (&w, t) in w_row.iter().zip(0..n) {
                let val = &qkv.row(t)[2 * d + qo..2 * d + qo + hd];
                for (slot, &v) in head_out.iter_mut().zip(val) {
                    *slot += w * v;
                }
            }
        });
        counters::add_macs(MacPhase::AttentionAggregate, (n * n * hd) as u64);
    }

    let mut out = matmul(&concat, &params.w_o)?;
    let _out_alive = counters::track_alloc(n * d, false);
    exec::for_each_row(out.data_mut(), d, 0, |i, row| {
        for (slot, b) in row.iter_mut().zip(&params.b_o) {
            *slot += b;
        }
        if params.residual {
            for (slot, x) in row.iter_mut().zip(features.row(i)) {
                *slot += x;
            }
        }
    });
    Ok(out)
}

/// Exponentiated scaled scores `B[i][j] = exp(q_i . k_j / sqrt(d_k))` and
/// the masked variant `A` that zeroes every column whose patch lives outside
/// the query's selected regions. The query's own column gets no special
/// treatment; it survives only through its home region.
pub fn unnormalized_score_matrices(
    features: &Matrix,
    w_q: &Matrix,
    w_k: &Matrix,
    part: &RegionPartition,
    selections: &[Vec<u32>],
) -> Result<(Matrix, Matrix)> {
    let n = features.rows();
    if w_q.rows() != features.cols() || w_k.rows() != features.cols() {
        return Err(Error::Shape(format!(
            "projections take width {}/{}, patches have width {}",
            w_q.rows(),
            w_k.rows(),
            features.cols()
        )));
    }
    if w_q.cols() != w_k.cols() {
        return Err(Error::Shape(format!(
            "query and key widths differ: {} vs {}",
            w_q.cols(),
            w_k.cols()
        )));
    }
    if part.home_region.len() != n || selections.len() != n {
        return Err(Error::Shape(format!(
            "partition covers {} patches and {} selections for {n} queries",
            part.home_region.len(),
            selections.len()
        )));
    }
    let q = matmul(features, w_q)?;
    let k = matmul(features, w_k)?;
    let sqrt_dk = (w_q.cols() as f64).sqrt();

    let mut b = Matrix::zeros(n, n);
    exec::for_each_row(b.data_mut(), n, 0, |i, row| {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = (dot(q.row(i), k.row(j)) / sqrt_dk).exp();
        }
    });
    let mut a = b.clone();
    exec::for_each_row(a.data_mut(), n, 0, |i, row| {
        for (j, slot) in row.iter_mut().enumerate() {
            if !selections[i].contains(&part.home_region[j]) {
                *slot = 0.0;
            }
        }
    });
    Ok((b, a))
}
