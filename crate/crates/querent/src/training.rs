//! End-to-end optimization: loss-bearing forward passes, analytic
//! reverse-mode gradients for every task-updated block, a central
//! finite-difference verifier, AdamW with decoupled weight decay,
//! global-norm clipping, binary checkpoints, corpus evaluation, and the
//! epoch loop.
//!
//! Gradients treat the per-query region selection as a constant: scores
//! only gate which patches enter the context and never multiply the
//! output, so no gradient crosses the selection boundary and the metadata
//! projection heads receive a zero task gradient. They are updated only by
//! [`aux_ranking_step`] when the model runs in trainable-aux mode.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionParams, SelectiveCache};
use crate::bagstore::{partition_row_major, FeatureBag, Label};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::head::PoolCache;
use crate::metadata::{summarize, Activation, ProjectionMode};
use crate::model::{
    forward, Gradients, ModelCache, ModelKind, ModelParams, TaskKind,
};
use crate::numerics::{dot, gelu_prime, Matrix, RngStream};
use crate::objectives::{
    classification_metrics, concordance_index, cross_entropy, survival_nll, survival_risk,
    ClassificationMetrics,
};

/// Loss and logit gradient for one bag under the configured task. Rejects
/// bags whose label does not agree with the task the head was sized for.
fn task_loss(task: &TaskKind, label: &Label, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    match (task, label) {
        (
            TaskKind::Classification { num_classes },
            Label::Class {
                class_index,
                num_classes: label_classes,
            },
        ) => {
            if *label_classes as usize != *num_classes {
                return Err(Error::Param(format!(
                    "bag labeled over {label_classes} classes but the head has {num_classes} outputs"
                )));
            }
            cross_entropy(logits, *class_index as usize)
        }
        (
            TaskKind::Survival { n_bins },
            Label::Survival {
                bin,
                censor,
                n_bins: label_bins,
                ..
            },
        ) => {
            if *label_bins as usize != *n_bins {
                return Err(Error::Param(format!(
                    "bag labeled over {label_bins} bins but the head has {n_bins} outputs"
                )));
            }
            survival_nll(logits, *bin, *censor == 1)
        }
        (TaskKind::Classification { .. }, Label::Survival { .. }) => Err(Error::Param(
            "classification model given a survival-labeled bag".into(),
        )),
        (TaskKind::Survival { .. }, Label::Class { .. }) => Err(Error::Param(
            "survival model given a classification-labeled bag".into(),
        )),
    }
}

/// Runs the pipeline on one bag and scores it against the bag's label.
pub fn forward_loss(
    params: &ModelParams,
    bag: &FeatureBag,
    frozen_selections: Option<&[Vec<Vec<u32>>]>,
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelCache)> {
    let cache = forward(params, bag, frozen_selections, dropout_seed)?;
    let (loss, _) = task_loss(&params.config.task, &bag.label, &cache.logits)?;
    Ok((loss, cache))
}

/// Scalar loss only; the finite-difference probe.
pub fn loss_only(
    params: &ModelParams,
    bag: &FeatureBag,
    frozen_selections: Option<&[Vec<Vec<u32>>]>,
    dropout_seed: Option<u64>,
) -> Result<f64> {
    forward_loss(params, bag, frozen_selections, dropout_seed).map(|(loss, _)| loss)
}

/// Resolved block positions for the gradient writers.
struct HeadBlocks {
    gate1_w: usize,
    gate1_b: usize,
    gate2_w: usize,
    gate2_b: usize,
}

struct AttnBlocks {
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
}

fn head_blocks(params: &ModelParams) -> HeadBlocks {
    HeadBlocks {
        gate1_w: params.block_index("gate1.w").expect("gate1.w block"),
        gate1_b: params.block_index("gate1.b").expect("gate1.b block"),
        gate2_w: params.block_index("gate2.w").expect("gate2.w block"),
        gate2_b: params.block_index("gate2.b").expect("gate2.b block"),
    }
}

fn attn_blocks(params: &ModelParams, layer: usize) -> AttnBlocks {
    AttnBlocks {
        w_qkv: params
            .block_index(&format!("attn{layer}.w_qkv"))
            .expect("w_qkv block"),
        b_qkv: params
            .block_index(&format!("attn{layer}.b_qkv"))
            .expect("b_qkv block"),
        w_o: params
            .block_index(&format!("attn{layer}.w_o"))
            .expect("w_o block"),
        b_o: params
            .block_index(&format!("attn{layer}.b_o"))
            .expect("b_o block"),
    }
}

/// Gradients of the bag loss with respect to every task-updated block,
/// deriving the logit gradient from the bag's label.
pub fn backward(params: &ModelParams, bag: &FeatureBag, cache: &ModelCache) -> Result<Gradients> {
    let (_, dlogits) = task_loss(&params.config.task, &bag.label, &cache.logits)?;
    backward_from(params, cache, &dlogits)
}

/// Reverse pass from an arbitrary logit gradient. Selections are constants;
/// the projection-head blocks always come back zero.
pub fn backward_from(
    params: &ModelParams,
    cache: &ModelCache,
    dlogits: &[f64],
) -> Result<Gradients> {
    let n_out = params.head.n_outputs();
    if dlogits.len() != n_out {
        return Err(Error::Shape(format!(
            "logit gradient has {} entries for {} outputs",
            dlogits.len(),
            n_out
        )));
    }
    let d = params.config.d;
    if cache.z.len() != d {
        return Err(Error::Shape(format!(
            "pooled vector has {} entries for width {}",
            cache.z.len(),
            d
        )));
    }
    let mut grads = Gradients::zeros_like(params);

    let cls_w = params.block_index("classifier.w").expect("classifier.w block");
    let cls_b = params.block_index("classifier.b").expect("classifier.b block");
    {
        let gw = &mut grads.blocks[cls_w];
        for r in 0..d {
            let zr = cache.z[r];
            for (c, dl) in dlogits.iter().enumerate() {
                gw[r * n_out + c] += zr * dl;
            }
        }
        let gb = &mut grads.blocks[cls_b];
        for (c, dl) in dlogits.iter().enumerate() {
            gb[c] += dl;
        }
    }
    if params.config.kind != ModelKind::Querent {
        return Ok(grads);
    }

    let mut dz = vec![0.0; d];
    for (r, slot) in dz.iter_mut().enumerate() {
        *slot = dot(params.head.w_c.row(r), dlogits);
    }
    let pool = cache
        .pool
        .as_ref()
        .ok_or_else(|| Error::Shape("cache carries no pooling intermediates".into()))?;
    let attended = cache
        .attended
        .as_ref()
        .ok_or_else(|| Error::Shape("cache carries no attended rows".into()))?;
    let hb = head_blocks(params);
    let mut dx = pool_backward(params, pool, attended, &dz, &hb, &mut grads);
    for layer in (0..params.attn.len()).rev() {
        let trace = &cache.layers[layer];
        let ab = attn_blocks(params, layer);
        dx = attention_backward(
            &params.attn[layer],
            &trace.input,
            &trace.attn,
            &dx,
            &ab,
            &mut grads,
        );
    }
    Ok(grads)
}

/// Backpropagates the pooled-vector gradient through gating and the convex
/// combination, returning the gradient on the attended rows.
fn pool_backward(
    params: &ModelParams,
    pool: &PoolCache,
    x: &Matrix,
    dz: &[f64],
    hb: &HeadBlocks,
    grads: &mut Gradients,
) -> Matrix {
    let n = x.rows();
    let d = x.cols();
    let hidden = params.head.hidden_dim();
    let raw = params.config.raw_score_pool;

    let mut dalpha = vec![0.0; n];
    for (i, slot) in dalpha.iter_mut().enumerate() {
        *slot = dot(dz, x.row(i));
    }
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        let ai = pool.alpha[i];
        let row = dx.row_mut(i);
        for (c, dzc) in dz.iter().enumerate() {
            row[c] = ai * dzc;
        }
    }
    let weighted: f64 = (0..n).map(|i| pool.alpha[i] * dalpha[i]).sum();
    let mut dgate_pre = vec![0.0; n];
    for i in 0..n {
        let dgate = pool.alpha[i] * (dalpha[i] - weighted);
        dgate_pre[i] = if raw {
            dgate
        } else {
            dgate * pool.gate[i] * (1.0 - pool.gate[i])
        };
    }

    let mut dhidden_pre = Matrix::zeros(n, hidden);
    for i in 0..n {
        let dg = dgate_pre[i];
        let hid = pool.hidden.row(i);
        {
            let g2w = &mut grads.blocks[hb.gate2_w];
            for r in 0..hidden {
                g2w[r] += hid[r] * dg;
            }
        }
        grads.blocks[hb.gate2_b][0] += dg;
        let pre = pool.hidden_pre.row(i);
        let drow = dhidden_pre.row_mut(i);
        for r in 0..hidden {
            drow[r] = dg * params.head.w_a2.get(r, 0) * gelu_prime(pre[r]);
        }
    }

    for i in 0..n {
        let xi = x.row(i);
        let drow = dhidden_pre.row(i);
        {
            let g1w = &mut grads.blocks[hb.gate1_w];
            for r in 0..d {
                let xv = xi[r];
                for (c, dh) in drow.iter().enumerate() {
                    g1w[r * hidden + c] += xv * dh;
                }
            }
        }
        {
            let g1b = &mut grads.blocks[hb.gate1_b];
            for (c, dh) in drow.iter().enumerate() {
                g1b[c] += dh;
            }
        }
        let dxi = dx.row_mut(i);
        for r in 0..d {
            dxi[r] += dot(params.head.w_a1.row(r), drow);
        }
    }
    dx
}

/// Backpropagates through one selective attention layer, returning the
/// gradient on that layer's input rows. Contexts, softmax weights, and the
/// projected triplet all come from the forward cache.
fn attention_backward(
    ap: &AttentionParams,
    x: &Matrix,
    cache: &SelectiveCache,
    dy: &Matrix,
    ab: &AttnBlocks,
    grads: &mut Gradients,
) -> Matrix {
    let n = x.rows();
    let d = ap.d();
    let heads = ap.heads;
    let head_dim = d / heads;
    let scale = (head_dim as f64).sqrt();

    let mut dconcat = Matrix::zeros(n, d);
    for i in 0..n {
        let dyi = dy.row(i);
        let ui = cache.concat.row(i);
        {
            let gw = &mut grads.blocks[ab.w_o];
            for r in 0..d {
                let uv = ui[r];
                for (c, dv) in dyi.iter().enumerate() {
                    gw[r * d + c] += uv * dv;
                }
            }
        }
        {
            let gb = &mut grads.blocks[ab.b_o];
            for (c, dv) in dyi.iter().enumerate() {
                gb[c] += dv;
            }
        }
        let drow = dconcat.row_mut(i);
        for r in 0..d {
            drow[r] = dot(ap.w_o.row(r), dyi);
        }
    }

    let mut dqkv = Matrix::zeros(n, 3 * d);
    let mut da = Vec::new();
    let mut dq_local = vec![0.0; head_dim];
    for qi in 0..n {
        let ctx = &cache.contexts[qi];
        let ctx_len = ctx.len();
        let pre_all = &cache.weights_pre[qi];
        let post_all = &cache.weights_post[qi];
        for h in 0..heads {
            let off = h * head_dim;
            let pre = &pre_all[h * ctx_len..(h + 1) * ctx_len];
            let post = &post_all[h * ctx_len..(h + 1) * ctx_len];
            da.clear();
            da.resize(ctx_len, 0.0);
            for (t, &j) in ctx.iter().enumerate() {
                let j = j as usize;
                let vrow = &cache.qkv.row(j)[2 * d + off..2 * d + off + head_dim];
                let mut dpost = 0.0;
                for (c, vv) in vrow.iter().enumerate() {
                    dpost += dconcat.get(qi, off + c) * vv;
                }
                // The kept-mask rescale is recovered from the weight pair:
                // post/pre is 1/(1-rate) where kept, 0 where dropped, and
                // exactly 1 when dropout was off.
                da[t] = if post[t] == pre[t] {
                    dpost
                } else {
                    dpost * (post[t] / pre[t])
                };
                let dvrow = &mut dqkv.row_mut(j)[2 * d + off..2 * d + off + head_dim];
                for (c, slot) in dvrow.iter_mut().enumerate() {
                    *slot += post[t] * dconcat.get(qi, off + c);
                }
            }
            let weighted: f64 = (0..ctx_len).map(|t| pre[t] * da[t]).sum();
            dq_local.iter_mut().for_each(|v| *v = 0.0);
            for (t, &j) in ctx.iter().enumerate() {
                let j = j as usize;
                let dscore = pre[t] * (da[t] - weighted) / scale;
                for (c, slot) in dq_local.iter_mut().enumerate() {
                    *slot += dscore * cache.qkv.get(j, d + off + c);
                }
                let dkrow = &mut dqkv.row_mut(j)[d + off..d + off + head_dim];
                for (c, slot) in dkrow.iter_mut().enumerate() {
                    *slot += dscore * cache.qkv.get(qi, off + c);
                }
            }
            let dqrow = &mut dqkv.row_mut(qi)[off..off + head_dim];
            for (c, slot) in dqrow.iter_mut().enumerate() {
                *slot += dq_local[c];
            }
        }
    }

    let mut dx = Matrix::zeros(n, d);
    if ap.residual {
        for i in 0..n {
            dx.row_mut(i).copy_from_slice(dy.row(i));
        }
    }
    let width = 3 * d;
    for i in 0..n {
        let xi = x.row(i);
        let drow = dqkv.row(i);
        {
            let gw = &mut grads.blocks[ab.w_qkv];
            for r in 0..d {
                let xv = xi[r];
                for (c, dv) in drow.iter().enumerate() {
                    gw[r * width + c] += xv * dv;
                }
            }
        }
        {
            let gb = &mut grads.blocks[ab.b_qkv];
            for (c, dv) in drow.iter().enumerate() {
                gb[c] += dv;
            }
        }
        let dxi = dx.row_mut(i);
        for r in 0..d {
            dxi[r] += dot(ap.w_qkv.row(r), drow);
        }
    }
    dx
}

/// Result of a finite-difference sweep over every task-updated entry.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `block[index]` of the entry with the largest relative error.
    pub worst_entry: String,
    pub entries_checked: usize,
}

/// Compares analytic gradients against central finite differences on one
/// bag, entry by entry, with selections frozen to the unperturbed forward
/// pass and dropout off. Relative error uses a unit floor so near-zero
/// entries are compared absolutely.
pub fn finite_diff_check(params: &ModelParams, bag: &FeatureBag, step: f64) -> Result<FdReport> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Param(format!("step must be positive, got {step}")));
    }
    let (_, cache) = forward_loss(params, bag, None, None)?;
    let frozen: Vec<Vec<Vec<u32>>> = cache
        .layers
        .iter()
        .map(|t| t.attn.selections.clone())
        .collect();
    let analytic = backward(params, bag, &cache)?;

    let metas = params.block_metas();
    let mut work = params.clone();
    let mut max_rel = 0.0;
    let mut worst = String::from("none");
    let mut checked = 0usize;
    for (ix, meta) in metas.iter().enumerate() {
        if !meta.trainable {
            continue;
        }
        for e in 0..meta.rows * meta.cols {
            let orig = work.block_data(ix)[e];
            work.block_data_mut(ix)[e] = orig + step;
            let plus = loss_only(&work, bag, Some(&frozen), None)?;
            work.block_data_mut(ix)[e] = orig - step;
            let minus = loss_only(&work, bag, Some(&frozen), None)?;
            work.block_data_mut(ix)[e] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let an = analytic.blocks[ix][e];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", meta.name, e);
            }
            checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        worst_entry: worst,
        entries_checked: checked,
    })
}

/// Scales all gradients so their concatenated L2 norm is at most
/// `clip_norm`, returning the pre-clip norm.
pub fn clip_global_norm(grads: &mut Gradients, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm && norm > 0.0 {
        grads.scale(clip_norm / norm);
    }
    norm
}

/// AdamW accumulators, one pair per parameter block.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> OptimState {
        let m: Vec<Vec<f64>> = (0..params.n_blocks())
            .map(|i| vec![0.0; params.block_data(i).len()])
            .collect();
        OptimState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            v: m.clone(),
            m,
        }
    }
}

fn adamw_update_block(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let bias1 = 1.0 - beta1.powi(step as i32);
    let bias2 = 1.0 - beta2.powi(step as i32);
    for e in 0..theta.len() {
        let g = grad[e];
        m[e] = beta1 * m[e] + (1.0 - beta1) * g;
        v[e] = beta2 * v[e] + (1.0 - beta2) * g * g;
        let m_hat = m[e] / bias1;
        let v_hat = v[e] / bias2;
        let old = theta[e];
        theta[e] = old - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * old;
    }
}

/// One decoupled-decay AdamW step over the task-updated blocks. Blocks
/// outside the task optimizer (the projection heads) are left untouched,
/// decay included.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimState,
) -> Result<()> {
    let metas = params.block_metas();
    if grads.blocks.len() != metas.len() || state.m.len() != metas.len() {
        return Err(Error::Shape(format!(
            "optimizer saw {} gradient and {} moment blocks for {} parameter blocks",
            grads.blocks.len(),
            state.m.len(),
            metas.len()
        )));
    }
    state.step += 1;
    for (ix, meta) in metas.iter().enumerate() {
        if !meta.trainable {
            continue;
        }
        adamw_update_block(
            params.block_data_mut(ix),
            &grads.blocks[ix],
            &mut state.m[ix],
            &mut state.v[ix],
            state.step,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            state.weight_decay,
        );
    }
    Ok(())
}

// --- checkpoints -------------------------------------------------------------

const CHECKPOINT_MAGIC: [u8; 4] = *b"QCK1";
const CHECKPOINT_VERSION: u32 = 1;

fn push_block(buf: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn block(&mut self, expect_name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let name_len = self.u16("block name length")? as usize;
        let start = self.pos;
        let name_bytes = self.take(name_len, "block name")?;
        let name = std::str::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: start as u64,
            message: "block name is not UTF-8".into(),
        })?;
        if name != expect_name {
            return Err(Error::Shape(format!(
                "checkpoint block is named {name}, expected {expect_name}"
            )));
        }
        let got_rows = self.u32("block rows")? as usize;
        let got_cols = self.u32("block cols")? as usize;
        if got_rows != rows || got_cols != cols {
            return Err(Error::Shape(format!(
                "checkpoint block {expect_name} has shape {got_rows}x{got_cols}, expected {rows}x{cols}"
            )));
        }
        let raw = self.take(4 * rows * cols, "block data")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Serializes all parameter blocks, and the optimizer accumulators when
/// given, to the binary checkpoint layout. Values are stored as f32.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    state: Option<&OptimState>,
) -> Result<()> {
    let metas = params.block_metas();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(metas.len() as u32).to_le_bytes());
    for (ix, meta) in metas.iter().enumerate() {
        push_block(&mut buf, &meta.name, meta.rows, meta.cols, params.block_data(ix));
    }
    match state {
        None => buf.push(0),
        Some(st) => {
            buf.push(1);
            buf.extend_from_slice(&st.step.to_le_bytes());
            for v in [st.lr, st.beta1, st.beta2, st.eps, st.weight_decay] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for (ix, meta) in metas.iter().enumerate() {
                push_block(&mut buf, &format!("{}.m", meta.name), meta.rows, meta.cols, &st.m[ix]);
                push_block(&mut buf, &format!("{}.v", meta.name), meta.rows, meta.cols, &st.v[ix]);
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint back into a model shaped by `config`. Every stored
/// block must match the expected name and shape in order; a mismatch names
/// the offending block.
pub fn load_checkpoint(
    path: &Path,
    config: &crate::model::ModelConfig,
) -> Result<(ModelParams, Option<OptimState>)> {
    config.validate()?;
    let bytes = fs::read(path)?;
    let mut rd = Reader {
        buf: &bytes,
        pos: 0,
    };
    let magic = rd.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected QCK1"),
        });
    }
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut params = ModelParams::init(config.clone())?;
    let metas = params.block_metas();
    let count = rd.u32("block count")? as usize;
    if count != metas.len() {
        return Err(Error::Shape(format!(
            "checkpoint stores {count} blocks, this configuration has {}",
            metas.len()
        )));
    }
    for (ix, meta) in metas.iter().enumerate() {
        let data = rd.block(&meta.name, meta.rows, meta.cols)?;
        params.block_data_mut(ix).copy_from_slice(&data);
    }
    let has_optim = rd.take(1, "optimizer flag")?[0];
    let state = match has_optim {
        0 => None,
        1 => {
            let step = rd.u64("optimizer step")?;
            let lr = rd.f64("optimizer lr")?;
            let beta1 = rd.f64("optimizer beta1")?;
            let beta2 = rd.f64("optimizer beta2")?;
            let eps = rd.f64("optimizer eps")?;
            let weight_decay = rd.f64("optimizer weight decay")?;
            let mut m = Vec::with_capacity(metas.len());
            let mut v = Vec::with_capacity(metas.len());
            for meta in &metas {
                m.push(rd.block(&format!("{}.m", meta.name), meta.rows, meta.cols)?);
                v.push(rd.block(&format!("{}.v", meta.name), meta.rows, meta.cols)?);
            }
            Some(OptimState {
                step,
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
                m,
                v,
            })
        }
        other => {
            return Err(Error::Format {
                offset: (rd.pos - 1) as u64,
                message: format!("optimizer flag must be 0 or 1, got {other}"),
            })
        }
    };
    Ok((params, state))
}

// --- evaluation --------------------------------------------------------------

/// Task-appropriate corpus metrics.
#[derive(Clone, Debug)]
pub enum TaskMetrics {
    Classification(ClassificationMetrics),
    Survival { c_index: Option<f64> },
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Mean bag loss.
    pub loss: f64,
    pub n_bags: usize,
    pub metrics: TaskMetrics,
}

/// Deterministic corpus split: a bag goes to validation when the first
/// draw of a stream seeded by its id lands in the lowest fifth.
pub fn split_bags(bags: &[FeatureBag]) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, bag) in bags.iter().enumerate() {
        if RngStream::new(bag.bag_id as u64).next_u64() % 5 == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Scores the selected bags against a read-only parameter snapshot. Bags
/// run in parallel; dropout is off.
pub fn evaluate(params: &ModelParams, bags: &[FeatureBag], indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Param("no bags selected for evaluation".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= bags.len()) {
        return Err(Error::Param(format!(
            "evaluation index {bad} out of range for {} bags",
            bags.len()
        )));
    }
    let outcomes = map_indexed(indices.len(), |i| {
        forward_loss(params, &bags[indices[i]], None, None).map(|(loss, cache)| (loss, cache.logits))
    });
    let mut losses = Vec::with_capacity(indices.len());
    let mut logit_rows = Vec::with_capacity(indices.len());
    for outcome in outcomes {
        let (loss, logits) = outcome?;
        losses.push(loss);
        logit_rows.push(logits);
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;

    let metrics = match params.config.task {
        TaskKind::Classification { num_classes } => {
            let mut flat = Vec::with_capacity(indices.len() * num_classes);
            for row in &logit_rows {
                flat.extend_from_slice(row);
            }
            let logits = Matrix::from_vec(indices.len(), num_classes, flat)?;
            let labels: Vec<usize> = indices
                .iter()
                .map(|&i| match bags[i].label {
                    Label::Class { class_index, .. } => Ok(class_index as usize),
                    Label::Survival { .. } => Err(Error::Param(
                        "survival-labeled bag in a classification evaluation".into(),
                    )),
                })
                .collect::<Result<_>>()?;
            TaskMetrics::Classification(classification_metrics(&logits, &labels)?)
        }
        TaskKind::Survival { .. } => {
            let risks: Vec<f64> = logit_rows.iter().map(|r| survival_risk(r)).collect();
            let mut times = Vec::with_capacity(indices.len());
            let mut censored = Vec::with_capacity(indices.len());
            for &i in indices {
                match bags[i].label {
                    Label::Survival { time, censor, .. } => {
                        times.push(time as f64);
                        censored.push(censor == 1);
                    }
                    Label::Class { .. } => {
                        return Err(Error::Param(
                            "classification-labeled bag in a survival evaluation".into(),
                        ))
                    }
                }
            }
            TaskMetrics::Survival {
                c_index: concordance_index(&risks, &times, &censored)?,
            }
        }
    };
    Ok(EvalReport {
        loss,
        n_bags: indices.len(),
        metrics,
    })
}

// --- the epoch loop ----------------------------------------------------------

/// Optimization hyperparameters for [`train`].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Bags accumulated (in bag-id order) before each optimizer step.
    pub accumulate: usize,
    pub aux_ranking: bool,
    /// Forward passes between ranking updates of the projection heads.
    pub aux_interval: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults per task: classification trains at 1e-4, survival at 2e-4.
    pub fn for_task(task: &TaskKind) -> TrainConfig {
        let lr = match task {
            TaskKind::Classification { .. } => 1e-4,
            TaskKind::Survival { .. } => 2e-4,
        };
        TrainConfig {
            epochs: 50,
            lr,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            accumulate: 1,
            aux_ranking: false,
            aux_interval: 200,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Param(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Param(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Param(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if self.accumulate == 0 {
            return Err(Error::Param("accumulate must be at least 1".into()));
        }
        if self.aux_interval == 0 {
            return Err(Error::Param("aux interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Per-epoch log, one train row and one val row per epoch:
    /// `epoch,split,loss,acc,auc,f1,c_index`.
    pub log_csv: String,
    pub epochs_run: usize,
    pub forward_passes: u64,
    /// Best validation accuracy seen at any epoch (classification only).
    pub best_val_acc: Option<f64>,
    pub final_train: EvalReport,
    pub final_val: Option<EvalReport>,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_row(epoch: usize, split: &str, rep: &EvalReport) -> String {
    match &rep.metrics {
        TaskMetrics::Classification(m) => format!(
            "{epoch},{split},{:.6},{:.6},{},{:.6},\n",
            rep.loss,
            m.acc,
            fmt_metric(m.auc),
            m.macro_f1
        ),
        TaskMetrics::Survival { c_index } => format!(
            "{epoch},{split},{:.6},,,,{}\n",
            rep.loss,
            fmt_metric(*c_index)
        ),
    }
}

fn progress_line(epoch: usize, epochs: usize, train: &EvalReport, val: Option<&EvalReport>) -> String {
    let mut line = format!("epoch {epoch}/{epochs} train loss {:.4}", train.loss);
    if let TaskMetrics::Classification(m) = &train.metrics {
        line.push_str(&format!(" acc {:.4}", m.acc));
    }
    if let Some(v) = val {
        line.push_str(&format!(" | val loss {:.4}", v.loss));
        match &v.metrics {
            TaskMetrics::Classification(m) => line.push_str(&format!(" acc {:.4}", m.acc)),
            TaskMetrics::Survival { c_index: Some(c) } => {
                line.push_str(&format!(" c-index {c:.4}"))
            }
            TaskMetrics::Survival { c_index: None } => {}
        }
    }
    line
}

/// Runs the optimization loop: one bag per forward pass, gradients
/// accumulated in bag-id order, clipped, then applied with AdamW. The
/// corpus is split deterministically by bag id; both splits are scored
/// after every epoch. `progress` receives one line per epoch.
pub fn train(
    params: &mut ModelParams,
    bags: &[FeatureBag],
    cfg: &TrainConfig,
    progress: impl FnMut(&str),
) -> Result<TrainReport> {
    let mut state = OptimState::new(params, cfg.lr, cfg.weight_decay);
    train_with_state(params, bags, cfg, &mut state, progress)
}

/// `train` continued from caller-owned optimizer state, so a checkpointed
/// run can pick up where it stopped. Dropout streams are indexed by the
/// epoch counter, which restarts at 1 per call; resumed trajectories match
/// uninterrupted ones when dropout is off.
pub fn train_with_state(
    params: &mut ModelParams,
    bags: &[FeatureBag],
    cfg: &TrainConfig,
    state: &mut OptimState,
    mut progress: impl FnMut(&str),
) -> Result<TrainReport> {
    cfg.validate()?;
    params.config.validate()?;
    for bag in bags {
        if TaskKind::of_label(&bag.label) != params.config.task {
            return Err(Error::Param(format!(
                "bag {} label does not match the configured task",
                bag.bag_id
            )));
        }
    }
    let (mut train_order, val_idx) = split_bags(bags);
    if train_order.is_empty() {
        return Err(Error::Param("corpus has no training bags after the split".into()));
    }
    train_order.sort_by_key(|&i| bags[i].bag_id);

    let mut log = String::from("epoch,split,loss,acc,auc,f1,c_index\n");
    let mut passes = 0u64;
    let mut aux_rng = RngStream::new(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let mut best_val_acc: Option<f64> = None;
    let mut last_train: Option<EvalReport> = None;
    let mut last_val: Option<EvalReport> = None;

    for epoch in 1..=cfg.epochs {
        let mut batch = Gradients::zeros_like(params);
        let mut in_batch = 0usize;
        for (pos, &bi) in train_order.iter().enumerate() {
            let bag = &bags[bi];
            passes += 1;
            let dropout_seed = if params.config.dropout_rate > 0.0 {
                Some(
                    RngStream::new(cfg.seed ^ ((epoch as u64) << 40) ^ pos as u64).next_u64(),
                )
            } else {
                None
            };
            let (_, cache) = forward_loss(params, bag, None, dropout_seed)?;
            let grads = backward(params, bag, &cache)?;
            batch.add(&grads);
            in_batch += 1;
            if in_batch == cfg.accumulate || pos + 1 == train_order.len() {
                batch.scale(1.0 / in_batch as f64);
                clip_global_norm(&mut batch, cfg.clip_norm);
                adamw_step(params, &batch, state)?;
                batch = Gradients::zeros_like(params);
                in_batch = 0;
            }
            if cfg.aux_ranking
                && params.config.proj_mode == ProjectionMode::TrainableAux
                && passes % cfg.aux_interval as u64 == 0
            {
                aux_ranking_step(params, bag, cfg.lr, &mut aux_rng)?;
            }
        }
        let train_rep = evaluate(params, bags, &train_order)?;
        log.push_str(&csv_row(epoch, "train", &train_rep));
        let val_rep = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate(params, bags, &val_idx)?)
        };
        if let Some(v) = &val_rep {
            log.push_str(&csv_row(epoch, "val", v));
            if let TaskMetrics::Classification(m) = &v.metrics {
                best_val_acc = Some(best_val_acc.map_or(m.acc, |b: f64| b.max(m.acc)));
            }
        }
        progress(&progress_line(epoch, cfg.epochs, &train_rep, val_rep.as_ref()));
        last_train = Some(train_rep);
        last_val = val_rep;
    }
    Ok(TrainReport {
        log_csv: log,
        epochs_run: cfg.epochs,
        forward_passes: passes,
        best_val_acc,
        final_train: last_train.expect("at least one epoch ran"),
        final_val: last_val,
    })
}

// --- auxiliary ranking updates ------------------------------------------------

const AUX_REGION_CAP: usize = 32;
const AUX_QUERIES: usize = 4;
const AUX_MARGIN: f64 = 1.0;

fn activation_pair(act: Activation) -> (fn(f64) -> f64, fn(f64) -> f64) {
    match act {
        Activation::Gelu => (crate::numerics::gelu, gelu_prime),
        Activation::Identity => (|x| x, |_| 1.0),
    }
}

/// Writes `src * W + b` into `pre`.
fn affine_into(pre: &mut [f64], src: &[f64], head: &crate::metadata::ProjectionHead) {
    pre.copy_from_slice(&head.b);
    for (r, &xv) in src.iter().enumerate() {
        let wrow = head.w.row(r);
        for (c, slot) in pre.iter_mut().enumerate() {
            *slot += xv * wrow[c];
        }
    }
}

/// One hinge-ranking update of the projection heads: for a few sampled
/// queries, region scores are pushed toward the order of the true
/// per-region maxima of |<query, patch>| computed by brute force over a
/// capped region sample. Returns the mean hinge loss over scored pairs.
/// Requires trainable-aux mode; frozen heads are never touched.
pub fn aux_ranking_step(
    params: &mut ModelParams,
    bag: &FeatureBag,
    lr: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if params.config.proj_mode != ProjectionMode::TrainableAux {
        return Err(Error::Param(
            "ranking updates require the trainable-aux projection mode".into(),
        ));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Param(format!("aux lr must be >= 0, got {lr}")));
    }
    let part = partition_row_major(bag, params.config.p)?;
    let (raw_min, raw_max) = summarize(bag, &part)?;
    let n = bag.n_patches();
    let d = bag.d();
    let d_e = params.proj.embed_dim();

    let mut regions: Vec<usize> = (0..part.n_regions()).collect();
    if regions.len() > AUX_REGION_CAP {
        for i in 0..AUX_REGION_CAP {
            let j = i + rng.next_below((regions.len() - i) as u64) as usize;
            regions.swap(i, j);
        }
        regions.truncate(AUX_REGION_CAP);
    }
    let queries: Vec<usize> = (0..AUX_QUERIES.min(n))
        .map(|_| rng.next_below(n as u64) as usize)
        .collect();

    let (act_min, actp_min) = activation_pair(params.proj.f_min.activation);
    let (act_max, actp_max) = activation_pair(params.proj.f_max.activation);
    let (act_q, actp_q) = activation_pair(params.proj.f_q.activation);

    let mut d_w_min = vec![0.0; d * d_e];
    let mut d_b_min = vec![0.0; d_e];
    let mut d_w_max = vec![0.0; d * d_e];
    let mut d_b_max = vec![0.0; d_e];
    let mut d_w_q = vec![0.0; d * d_e];
    let mut d_b_q = vec![0.0; d_e];
    let mut loss_sum = 0.0;
    let mut terms = 0usize;

    for &q in &queries {
        let xq = bag.features.row(q);
        let mut q_pre = vec![0.0; d_e];
        affine_into(&mut q_pre, xq, &params.proj.f_q);
        let q_hat: Vec<f64> = q_pre.iter().map(|&v| act_q(v)).collect();

        let m = regions.len();
        let mut pre_min = vec![vec![0.0; d_e]; m];
        let mut pre_max = vec![vec![0.0; d_e]; m];
        let mut scores = vec![0.0; m];
        let mut dots = vec![(0.0, false); m];
        let mut truths = vec![0.0; m];
        for (ri, &region) in regions.iter().enumerate() {
            affine_into(&mut pre_min[ri], raw_min.row(region), &params.proj.f_min);
            affine_into(&mut pre_max[ri], raw_max.row(region), &params.proj.f_max);
            let dot_min: f64 = (0..d_e).map(|c| q_hat[c] * act_min(pre_min[ri][c])).sum();
            let dot_max: f64 = (0..d_e).map(|c| q_hat[c] * act_max(pre_max[ri][c])).sum();
            let use_max = dot_max.abs() > dot_min.abs();
            scores[ri] = dot_min.abs().max(dot_max.abs());
            dots[ri] = (if use_max { dot_max } else { dot_min }, use_max);
            truths[ri] = part.regions[region]
                .iter()
                .map(|&pi| dot(xq, bag.features.row(pi as usize)).abs())
                .fold(0.0, f64::max);
        }

        let mut d_scores = vec![0.0; m];
        for hi in 0..m {
            for lo in 0..m {
                if truths[hi] > truths[lo] {
                    terms += 1;
                    let violation = AUX_MARGIN - (scores[hi] - scores[lo]);
                    if violation > 0.0 {
                        loss_sum += violation;
                        d_scores[hi] -= 1.0;
                        d_scores[lo] += 1.0;
                    }
                }
            }
        }

        let mut d_q_hat = vec![0.0; d_e];
        for (ri, &region) in regions.iter().enumerate() {
            if d_scores[ri] == 0.0 {
                continue;
            }
            let (dot_val, use_max) = dots[ri];
            let d_dot = d_scores[ri] * dot_val.signum();
            let (pre, raw, d_w, d_b, actp) = if use_max {
                (&pre_max[ri], &raw_max, &mut d_w_max, &mut d_b_max, actp_max)
            } else {
                (&pre_min[ri], &raw_min, &mut d_w_min, &mut d_b_min, actp_min)
            };
            let src = raw.row(region);
            for c in 0..d_e {
                let m_hat_c = if use_max { act_max(pre[c]) } else { act_min(pre[c]) };
                d_q_hat[c] += d_dot * m_hat_c;
                let d_pre = d_dot * q_hat[c] * actp(pre[c]);
                d_b[c] += d_pre;
                for (r, &xv) in src.iter().enumerate() {
                    d_w[r * d_e + c] += xv * d_pre;
                }
            }
        }
        for c in 0..d_e {
            let d_pre = d_q_hat[c] * actp_q(q_pre[c]);
            d_b_q[c] += d_pre;
            for (r, &xv) in xq.iter().enumerate() {
                d_w_q[r * d_e + c] += xv * d_pre;
            }
        }
    }

    if terms == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / terms as f64;
    let rate = lr * inv;
    for (slot, g) in params.proj.f_min.w.data_mut().iter_mut().zip(&d_w_min) {
        *slot -= rate * g;
    }
    for (slot, g) in params.proj.f_min.b.iter_mut().zip(&d_b_min) {
        *slot -= rate * g;
    }
    for (slot, g) in params.proj.f_max.w.data_mut().iter_mut().zip(&d_w_max) {
        *slot -= rate * g;
    }
    for (slot, g) in params.proj.f_max.b.iter_mut().zip(&d_b_max) {
        *slot -= rate * g;
    }
    for (slot, g) in params.proj.f_q.w.data_mut().iter_mut().zip(&d_w_q) {
        *slot -= rate * g;
    }
    for (slot, g) in params.proj.f_q.b.iter_mut().zip(&d_b_q) {
        *slot -= rate * g;
    }
    Ok(loss_sum * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagstore::FeatureBag;
    use crate::head::HeadParams;
    use crate::metadata::ProjectionHeads;
    use crate::model::{ModelConfig, ModelKind};

    fn querent_config(
        d: usize,
        d_e: usize,
        p: usize,
        k: usize,
        heads: usize,
        gate_hidden: usize,
        task: TaskKind,
    ) -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Querent,
            task,
            d,
            d_e,
            p,
            k,
            heads,
            layers: 1,
            gate_hidden,
            residual: false,
            dropout_rate: 0.0,
            chunk_size: 16,
            include_home_region: false,
            dedup_query: false,
            proj_mode: ProjectionMode::FrozenRandom,
            raw_score_pool: false,
            seed: 11,
        }
    }

    fn gaussian_bag(bag_id: u32, n: usize, d: usize, label: Label, seed: u64) -> FeatureBag {
        let mut rng = RngStream::new(seed);
        let features = Matrix::gaussian(n, d, 0.8, &mut rng);
        FeatureBag::new(bag_id, features, None, label).unwrap()
    }

    fn class_corpus(n_bags: usize, n: usize, d: usize) -> Vec<FeatureBag> {
        (0..n_bags)
            .map(|i| {
                gaussian_bag(
                    i as u32,
                    n,
                    d,
                    Label::Class {
                        class_index: (i % 2) as u32,
                        num_classes: 2,
                    },
                    300 + i as u64,
                )
            })
            .collect()
    }

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    }

    #[test]
    fn zero_classifier_loss_is_log_num_classes() {
        let config = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        let mut params = ModelParams::init(config).unwrap();
        let ix = params.block_index("classifier.w").unwrap();
        params.block_data_mut(ix).fill(0.0);
        let ib = params.block_index("classifier.b").unwrap();
        params.block_data_mut(ib).fill(0.0);
        let bag = gaussian_bag(
            0,
            8,
            6,
            Label::Class {
                class_index: 1,
                num_classes: 2,
            },
            5,
        );
        let (loss, _) = forward_loss(&params, &bag, None, None).unwrap();
        assert_close(loss, std::f64::consts::LN_2, 1e-12, "uniform loss");
    }

    #[test]
    fn identical_bags_give_identical_loss() {
        let config = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        let params = ModelParams::init(config).unwrap();
        let label = Label::Class {
            class_index: 0,
            num_classes: 2,
        };
        let a = gaussian_bag(1, 8, 6, label.clone(), 77);
        let b = gaussian_bag(2, 8, 6, label, 77);
        let (la, _) = forward_loss(&params, &a, None, None).unwrap();
        let (lb, _) = forward_loss(&params, &b, None, None).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    fn pipeline_fixture() -> (ModelParams, FeatureBag) {
        let d = 4;
        let x = Matrix::from_fn(6, d, |i, c| ((3 * i + c) as f64).sin() * 0.8);
        let w_qkv = Matrix::from_fn(d, 3 * d, |r, c| ((r + 2 * c) as f64).cos() / 3.0);
        let b_qkv: Vec<f64> = (0..3 * d).map(|c| 0.01 * (c % 5) as f64).collect();
        let w_o = Matrix::from_fn(d, d, |r, c| ((2 * r + c) as f64).sin() / 2.0);
        let b_o = vec![0.02, -0.01, 0.03, 0.0];
        let attn = AttentionParams::new(w_qkv, b_qkv, w_o, b_o, 2, false, 0.0).unwrap();
        let w_a1 = Matrix::from_vec(4, 2, vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.2, 0.1]).unwrap();
        let w_a2 = Matrix::from_vec(2, 1, vec![0.8, -0.6]).unwrap();
        let w_c =
            Matrix::from_vec(4, 2, vec![0.4, -0.3, 0.2, 0.5, -0.1, 0.2, 0.3, -0.4]).unwrap();
        let head = HeadParams::new(
            w_a1,
            vec![0.05, -0.05],
            w_a2,
            vec![0.1],
            w_c,
            vec![0.05, -0.05],
        )
        .unwrap();
        let config = querent_config(4, 4, 2, 2, 2, 2, TaskKind::Classification { num_classes: 2 });
        let params = ModelParams {
            config,
            proj: ProjectionHeads::identity(4),
            attn: vec![attn],
            head,
        };
        let bag = FeatureBag::new(
            0,
            x,
            None,
            Label::Class {
                class_index: 1,
                num_classes: 2,
            },
        )
        .unwrap();
        (params, bag)
    }

    #[test]
    fn pipeline_fixture_loss_matches_scripted_evaluation() {
        let (params, bag) = pipeline_fixture();
        let (loss, cache) = forward_loss(&params, &bag, None, None).unwrap();
        for sel in &cache.layers[0].attn.selections {
            assert_eq!(sel, &vec![0, 1]);
        }
        assert_close(cache.logits[0], 0.05468738042849167, 1e-12, "logit 0");
        assert_close(cache.logits[1], -0.07252021571784405, 1e-12, "logit 1");
        assert_close(loss, 0.7587723378663799, 1e-12, "pipeline loss");
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let (params, bag) = pipeline_fixture();
        let (_, cache) = forward_loss(&params, &bag, None, None).unwrap();
        let grads = backward_from(&params, &cache, &[0.0, 0.0]).unwrap();
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn linear_gate_gradients_match_closed_form() {
        let d = 2;
        let x0 = [0.3, -0.2];
        let x1 = [0.1, 0.4];
        let mut w_qkv = Matrix::zeros(d, 3 * d);
        w_qkv.set(0, 4, 1.0);
        w_qkv.set(1, 5, 1.0);
        let attn = AttentionParams::new(
            w_qkv,
            vec![0.0; 6],
            Matrix::identity(2),
            vec![0.0; 2],
            1,
            false,
            0.0,
        )
        .unwrap();
        let w_a1 = Matrix::from_vec(2, 2, vec![0.7, -0.3, -0.4, 0.5]).unwrap();
        let b_a1 = vec![25.0, 30.0];
        let w_a2 = Matrix::from_vec(2, 1, vec![0.9, -0.6]).unwrap();
        let b_a2 = vec![0.2];
        let w_c = Matrix::from_vec(2, 2, vec![0.5, -0.3, 0.2, 0.4]).unwrap();
        let b_c = vec![0.1, -0.1];
        let head = HeadParams::new(
            w_a1.clone(),
            b_a1.clone(),
            w_a2.clone(),
            b_a2.clone(),
            w_c.clone(),
            b_c.clone(),
        )
        .unwrap();
        let mut config =
            querent_config(2, 2, 2, 1, 1, 2, TaskKind::Classification { num_classes: 2 });
        config.raw_score_pool = true;
        let params = ModelParams {
            config,
            proj: ProjectionHeads::identity(2),
            attn: vec![attn],
            head,
        };
        let features = Matrix::from_vec(2, 2, vec![x0[0], x0[1], x1[0], x1[1]]).unwrap();
        let bag = FeatureBag::new(
            0,
            features,
            None,
            Label::Class {
                class_index: 0,
                num_classes: 2,
            },
        )
        .unwrap();

        let (_, cache) = forward_loss(&params, &bag, None, None).unwrap();
        let pool = cache.pool.as_ref().unwrap();
        assert_eq!(
            pool.hidden.data(),
            pool.hidden_pre.data(),
            "gate hidden layer must sit in the exactly-linear regime"
        );
        let grads = backward(&params, &bag, &cache).unwrap();

        let third = 1.0 / 3.0;
        let y0: Vec<f64> = (0..2).map(|c| 2.0 * third * x0[c] + third * x1[c]).collect();
        let y1: Vec<f64> = (0..2).map(|c| third * x0[c] + 2.0 * third * x1[c]).collect();
        let pre = |y: &[f64]| -> Vec<f64> {
            (0..2)
                .map(|c| y[0] * w_a1.get(0, c) + y[1] * w_a1.get(1, c) + b_a1[c])
                .collect()
        };
        let h0 = pre(&y0);
        let h1 = pre(&y1);
        let gate = |h: &[f64]| h[0] * w_a2.get(0, 0) + h[1] * w_a2.get(1, 0) + b_a2[0];
        let g0 = gate(&h0);
        let g1 = gate(&h1);
        let m = g0.max(g1);
        let e0 = (g0 - m).exp();
        let e1 = (g1 - m).exp();
        let alpha0 = e0 / (e0 + e1);
        let alpha1 = e1 / (e0 + e1);
        let z: Vec<f64> = (0..2).map(|c| alpha0 * y0[c] + alpha1 * y1[c]).collect();
        let logits: Vec<f64> = (0..2)
            .map(|c| z[0] * w_c.get(0, c) + z[1] * w_c.get(1, c) + b_c[c])
            .collect();
        let lm = logits[0].max(logits[1]);
        let ex: Vec<f64> = logits.iter().map(|v| (v - lm).exp()).collect();
        let psum = ex[0] + ex[1];
        let dlogits = [ex[0] / psum - 1.0, ex[1] / psum];

        let d_w_c: Vec<f64> = (0..2)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .map(|(r, c)| z[r] * dlogits[c])
            .collect();
        let dz: Vec<f64> = (0..2)
            .map(|r| w_c.get(r, 0) * dlogits[0] + w_c.get(r, 1) * dlogits[1])
            .collect();
        let dalpha0 = dz[0] * y0[0] + dz[1] * y0[1];
        let dalpha1 = dz[0] * y1[0] + dz[1] * y1[1];
        let mix = alpha0 * dalpha0 + alpha1 * dalpha1;
        let dg0 = alpha0 * (dalpha0 - mix);
        let dg1 = alpha1 * (dalpha1 - mix);
        let d_w_a2 = [h0[0] * dg0 + h1[0] * dg1, h0[1] * dg0 + h1[1] * dg1];
        let d_b_a2 = dg0 + dg1;
        let dh0: Vec<f64> = (0..2).map(|r| dg0 * w_a2.get(r, 0)).collect();
        let dh1: Vec<f64> = (0..2).map(|r| dg1 * w_a2.get(r, 0)).collect();
        let d_w_a1: Vec<f64> = (0..2)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .map(|(r, c)| y0[r] * dh0[c] + y1[r] * dh1[c])
            .collect();
        let d_b_a1 = [dh0[0] + dh1[0], dh0[1] + dh1[1]];
        let dy0: Vec<f64> = (0..2)
            .map(|r| alpha0 * dz[r] + w_a1.get(r, 0) * dh0[0] + w_a1.get(r, 1) * dh0[1])
            .collect();
        let dy1: Vec<f64> = (0..2)
            .map(|r| alpha1 * dz[r] + w_a1.get(r, 0) * dh1[0] + w_a1.get(r, 1) * dh1[1])
            .collect();
        let d_b_o = [dy0[0] + dy1[0], dy0[1] + dy1[1]];
        let d_w_o: Vec<f64> = (0..2)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .map(|(r, c)| y0[r] * dy0[c] + y1[r] * dy1[c])
            .collect();
        let dv0: Vec<f64> = (0..2)
            .map(|c| 2.0 * third * dy0[c] + third * dy1[c])
            .collect();
        let dv1: Vec<f64> = (0..2)
            .map(|c| third * dy0[c] + 2.0 * third * dy1[c])
            .collect();

        let check = |name: &str, expected: &[f64]| {
            let ix = params.block_index(name).unwrap();
            let got = &grads.blocks[ix];
            assert_eq!(got.len(), expected.len(), "{name} length");
            for (i, (g, e)) in got.iter().zip(expected).enumerate() {
                assert_close(*g, *e, 1e-10, &format!("{name}[{i}]"));
            }
        };
        check("classifier.w", &d_w_c);
        check("classifier.b", &dlogits);
        check("gate2.w", &d_w_a2);
        check("gate2.b", &[d_b_a2]);
        check("gate1.w", &d_w_a1);
        check("gate1.b", &d_b_a1);
        check("attn0.b_o", &d_b_o);
        check("attn0.w_o", &d_w_o);
        let ix = params.block_index("attn0.w_qkv").unwrap();
        let got = &grads.blocks[ix];
        for r in 0..2 {
            for c in 0..4 {
                assert_eq!(got[r * 6 + c], 0.0, "query/key columns get no gradient");
            }
        }
        let dv = [dv0, dv1];
        let xrow = [x0, x1];
        for r in 0..2 {
            for c in 0..2 {
                let expected = xrow[0][r] * dv[0][c] + xrow[1][r] * dv[1][c];
                assert_close(got[r * 6 + 4 + c], expected, 1e-10, "value weight gradient");
            }
        }
        let ib = params.block_index("attn0.b_qkv").unwrap();
        let gb = &grads.blocks[ib];
        for c in 0..4 {
            assert_eq!(gb[c], 0.0);
        }
        for c in 0..2 {
            assert_close(gb[4 + c], dv[0][c] + dv[1][c], 1e-10, "value bias gradient");
        }
    }

    #[test]
    fn finite_differences_confirm_classification_gradients() {
        let mut config =
            querent_config(8, 8, 2, 2, 2, 4, TaskKind::Classification { num_classes: 3 });
        config.residual = true;
        config.include_home_region = true;
        config.dedup_query = true;
        config.dropout_rate = 0.1;
        config.seed = 21;
        let params = ModelParams::init(config).unwrap();
        let bag = gaussian_bag(
            0,
            12,
            8,
            Label::Class {
                class_index: 1,
                num_classes: 3,
            },
            900,
        );
        let report = finite_diff_check(&params, &bag, 1e-5).unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "worst entry {} at {}",
            report.worst_entry,
            report.max_rel_err
        );
        assert!(report.entries_checked > 300);
    }

    #[test]
    fn finite_differences_confirm_survival_gradients() {
        let mut config = querent_config(8, 8, 2, 2, 2, 4, TaskKind::Survival { n_bins: 4 });
        config.raw_score_pool = true;
        config.seed = 22;
        let params = ModelParams::init(config).unwrap();
        for (censor, seed) in [(0u8, 901u64), (1, 902)] {
            let bag = gaussian_bag(
                0,
                12,
                8,
                Label::Survival {
                    bin: 2,
                    censor,
                    time: 3.0,
                    n_bins: 4,
                },
                seed,
            );
            let report = finite_diff_check(&params, &bag, 1e-5).unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "censor={censor}: worst entry {} at {}",
                report.worst_entry,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn clipping_rescales_only_oversized_gradients() {
        let (params, _) = pipeline_fixture();
        let mut grads = Gradients::zeros_like(&params);
        let ix = params.block_index("classifier.w").unwrap();
        grads.blocks[ix][0] = 2.0;
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 2.0);
        assert_eq!(grads.blocks[ix][0], 1.0);
        assert!(grads.global_norm() <= 1.0 + 1e-12);

        let mut small = Gradients::zeros_like(&params);
        small.blocks[ix][0] = 0.25;
        let norm = clip_global_norm(&mut small, 1.0);
        assert_eq!(norm, 0.25);
        assert_eq!(small.blocks[ix][0], 0.25);
    }

    #[test]
    fn zero_gradients_leave_only_weight_decay() {
        let config = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        let mut params = ModelParams::init(config).unwrap();
        let before: Vec<Vec<f64>> = (0..params.n_blocks())
            .map(|i| params.block_data(i).to_vec())
            .collect();
        let grads = Gradients::zeros_like(&params);
        let mut state = OptimState::new(&params, 0.01, 0.1);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        for (ix, meta) in params.block_metas().iter().enumerate() {
            let now = params.block_data(ix);
            if meta.trainable {
                for (n, b) in now.iter().zip(&before[ix]) {
                    assert_eq!(*n, b - 0.01 * 0.1 * b, "{} decays", meta.name);
                }
            } else {
                assert_eq!(now, &before[ix][..], "{} must stay frozen", meta.name);
            }
        }
    }

    #[test]
    fn adamw_matches_hand_stepped_trajectory() {
        let mut theta = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        let expected = [0.890000001, 0.7815718569541611, 0.6751012231892007];
        for (step, want) in expected.iter().enumerate() {
            let g = [theta[0]];
            adamw_update_block(
                &mut theta,
                &g,
                &mut m,
                &mut v,
                (step + 1) as u64,
                0.1,
                0.9,
                0.999,
                1e-8,
                0.1,
            );
            assert_close(theta[0], *want, 1e-12, "hand-stepped trajectory");
        }
    }

    #[test]
    fn checkpoint_round_trips_blocks_and_optimizer() {
        let mut config =
            querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        config.layers = 2;
        config.seed = 9;
        let mut params = ModelParams::init(config.clone()).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        for (i, block) in grads.blocks.iter_mut().enumerate() {
            for (e, v) in block.iter_mut().enumerate() {
                *v = 0.01 * (i as f64 + 1.0) + 1e-4 * e as f64;
            }
        }
        let mut state = OptimState::new(&params, 1e-3, 1e-5);
        adamw_step(&mut params, &grads, &mut state).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.qck");
        let p2 = dir.path().join("b.qck");
        save_checkpoint(&p1, &params, Some(&state)).unwrap();
        let (loaded, loaded_state) = load_checkpoint(&p1, &config).unwrap();
        save_checkpoint(&p2, &loaded, loaded_state.as_ref()).unwrap();
        assert_eq!(
            fs::read(&p1).unwrap(),
            fs::read(&p2).unwrap(),
            "second round trip must be byte-stable"
        );
        for ix in 0..params.n_blocks() {
            for (a, b) in params.block_data(ix).iter().zip(loaded.block_data(ix)) {
                let rel = (a - b).abs() / a.abs().max(1.0);
                assert!(rel <= 1e-7, "block {ix} drifted beyond storage precision");
            }
        }
        let st = loaded_state.unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(st.lr, 1e-3);
        assert_eq!(st.weight_decay, 1e-5);

        let p3 = dir.path().join("c.qck");
        save_checkpoint(&p3, &params, None).unwrap();
        let (_, none_state) = load_checkpoint(&p3, &config).unwrap();
        assert!(none_state.is_none());
    }

    #[test]
    fn checkpoint_mismatched_config_names_offending_block() {
        let config = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        let params = ModelParams::init(config.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qck");
        save_checkpoint(&path, &params, None).unwrap();

        let mut narrower = config.clone();
        narrower.d_e = 4;
        let err = load_checkpoint(&path, &narrower).unwrap_err();
        match err {
            Error::Shape(msg) => assert!(msg.contains("proj_min.w"), "got: {msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }

        let mut deeper = config;
        deeper.layers = 2;
        let err = load_checkpoint(&path, &deeper).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let config = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        let params = ModelParams::init(config.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qck");
        save_checkpoint(&path, &params, None).unwrap();
        let bytes = fs::read(&path).unwrap();

        let bad = dir.path().join("bad.qck");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        fs::write(&bad, &corrupted).unwrap();
        match load_checkpoint(&bad, &config).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let short = dir.path().join("short.qck");
        fs::write(&short, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&short, &config).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn resume_matches_uninterrupted_losses_for_three_steps() {
        let config = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        let bags = class_corpus(5, 8, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.qck");

        let mut params = ModelParams::init(config.clone()).unwrap();
        let mut state = OptimState::new(&params, 1e-3, 1e-5);
        let mut losses = Vec::new();
        for step in 0..5 {
            let bag = &bags[step % bags.len()];
            let (loss, cache) = forward_loss(&params, bag, None, None).unwrap();
            let mut grads = backward(&params, bag, &cache).unwrap();
            clip_global_norm(&mut grads, 1.0);
            adamw_step(&mut params, &grads, &mut state).unwrap();
            losses.push(loss);
            if step == 1 {
                save_checkpoint(&path, &params, Some(&state)).unwrap();
            }
        }

        let (mut resumed, st) = load_checkpoint(&path, &config).unwrap();
        let mut st = st.unwrap();
        for step in 2..5 {
            let bag = &bags[step % bags.len()];
            let (loss, cache) = forward_loss(&resumed, bag, None, None).unwrap();
            let mut grads = backward(&resumed, bag, &cache).unwrap();
            clip_global_norm(&mut grads, 1.0);
            adamw_step(&mut resumed, &grads, &mut st).unwrap();
            let rel = (loss - losses[step]).abs() / losses[step].abs().max(1.0);
            assert!(
                rel <= 1e-5,
                "step {step}: resumed loss {loss} vs {}",
                losses[step]
            );
        }
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let bags = class_corpus(40, 4, 6);
        let (train, val) = split_bags(&bags);
        let (train2, val2) = split_bags(&bags);
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        assert!(!train.is_empty() && !val.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..bags.len()).collect::<Vec<_>>());
    }

    #[test]
    fn evaluate_reports_task_metrics() {
        let mut config =
            querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        config.kind = ModelKind::MeanPool;
        let mut params = ModelParams::init(config).unwrap();
        for name in ["classifier.w", "classifier.b"] {
            let ix = params.block_index(name).unwrap();
            params.block_data_mut(ix).fill(0.0);
        }
        let bags = class_corpus(4, 8, 6);
        let indices: Vec<usize> = (0..bags.len()).collect();
        let report = evaluate(&params, &bags, &indices).unwrap();
        assert_close(report.loss, std::f64::consts::LN_2, 1e-12, "uniform loss");
        match report.metrics {
            TaskMetrics::Classification(m) => {
                assert_close(m.acc, 0.5, 1e-12, "ties resolve to class 0");
            }
            TaskMetrics::Survival { .. } => panic!("wrong metric family"),
        }

        let surv_config = {
            let mut c = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Survival { n_bins: 4 });
            c.kind = ModelKind::MeanPool;
            c
        };
        let mut surv_params = ModelParams::init(surv_config).unwrap();
        for name in ["classifier.w", "classifier.b"] {
            let ix = surv_params.block_index(name).unwrap();
            surv_params.block_data_mut(ix).fill(0.0);
        }
        let surv_bags: Vec<FeatureBag> = (0..4)
            .map(|i| {
                gaussian_bag(
                    i as u32,
                    6,
                    6,
                    Label::Survival {
                        bin: 1 + (i % 4) as u32,
                        censor: 0,
                        time: 1.0 + i as f32,
                        n_bins: 4,
                    },
                    400 + i as u64,
                )
            })
            .collect();
        let report = evaluate(&surv_params, &surv_bags, &indices).unwrap();
        match report.metrics {
            TaskMetrics::Survival { c_index } => {
                assert_close(c_index.unwrap(), 0.5, 1e-12, "identical risks tie");
            }
            TaskMetrics::Classification(_) => panic!("wrong metric family"),
        }
    }

    #[test]
    fn training_log_is_deterministic_and_well_formed() {
        let mut config =
            querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        config.dropout_rate = 0.1;
        let bags = class_corpus(6, 8, 6);
        let mut cfg = TrainConfig::for_task(&config.task);
        cfg.epochs = 2;
        cfg.lr = 1e-3;

        let run = || {
            let mut params = ModelParams::init(config.clone()).unwrap();
            train(&mut params, &bags, &cfg, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log_csv, b.log_csv);
        assert!(a.log_csv.starts_with("epoch,split,loss,acc,auc,f1,c_index\n"));
        let lines: Vec<&str> = a.log_csv.trim_end().lines().collect();
        let has_val = a.final_val.is_some();
        assert_eq!(lines.len(), 1 + cfg.epochs * (1 + usize::from(has_val)));
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 7, "row: {line}");
        }
        assert_eq!(a.forward_passes, b.forward_passes);
        assert_eq!(a.epochs_run, 2);
    }

    #[test]
    fn selections_stay_constant_across_epochs_with_frozen_projections() {
        let config = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        let bags = class_corpus(6, 8, 6);
        let mut params = ModelParams::init(config).unwrap();
        let before = forward(&params, &bags[0], None, None).unwrap().layers[0]
            .attn
            .selections
            .clone();
        let mut cfg = TrainConfig::for_task(&params.config.task);
        cfg.epochs = 2;
        cfg.lr = 1e-2;
        train(&mut params, &bags, &cfg, |_| {}).unwrap();
        let after = forward(&params, &bags[0], None, None).unwrap().layers[0]
            .attn
            .selections
            .clone();
        assert_eq!(before, after);
    }

    fn aux_heads(w_q: Matrix, d: usize) -> ProjectionHeads {
        let mut heads = ProjectionHeads::identity(d);
        heads.f_q.w = w_q;
        heads.mode = ProjectionMode::TrainableAux;
        heads
    }

    #[test]
    fn aux_perfectly_ordered_scores_cost_nothing() {
        let mut config =
            querent_config(2, 2, 1, 1, 1, 2, TaskKind::Classification { num_classes: 2 });
        config.proj_mode = ProjectionMode::TrainableAux;
        let features = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let bag = FeatureBag::new(
            0,
            features,
            None,
            Label::Class {
                class_index: 0,
                num_classes: 2,
            },
        )
        .unwrap();
        let mut params = ModelParams::init(config).unwrap();
        params.proj = aux_heads(Matrix::identity(2), 2);
        let before: Vec<Vec<u64>> = (0..6)
            .map(|i| params.block_data(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let loss = aux_ranking_step(&mut params, &bag, 0.1, &mut RngStream::new(3)).unwrap();
        assert_eq!(loss, 0.0);
        for (i, bits) in before.iter().enumerate() {
            let now: Vec<u64> = params.block_data(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, bits, "block {i} moved on a zero-loss step");
        }
    }

    #[test]
    fn aux_inverted_order_descends_monotonically() {
        let mut config =
            querent_config(2, 2, 1, 1, 1, 2, TaskKind::Classification { num_classes: 2 });
        config.proj_mode = ProjectionMode::TrainableAux;
        let features = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let bag = FeatureBag::new(
            0,
            features,
            None,
            Label::Class {
                class_index: 0,
                num_classes: 2,
            },
        )
        .unwrap();
        let mut params = ModelParams::init(config).unwrap();
        let swap = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        params.proj = aux_heads(swap, 2);

        let mut losses = Vec::new();
        for _ in 0..8 {
            let loss = aux_ranking_step(&mut params, &bag, 0.05, &mut RngStream::new(5)).unwrap();
            losses.push(loss);
        }
        assert!(losses[0] > 0.0, "fixture must start misordered");
        for w in losses.windows(2) {
            assert!(w[1] <= w[0], "loss went up: {losses:?}");
        }
        assert!(
            losses.last().unwrap() < &losses[0],
            "no net progress: {losses:?}"
        );
    }

    #[test]
    fn aux_updates_respect_mode_and_flag() {
        let mut config =
            querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        config.proj_mode = ProjectionMode::TrainableAux;
        let bags = class_corpus(6, 8, 6);

        let proj_bits = |params: &ModelParams| -> Vec<Vec<u64>> {
            (0..6)
                .map(|i| params.block_data(i).iter().map(|v| v.to_bits()).collect())
                .collect()
        };

        let mut cfg = TrainConfig::for_task(&config.task);
        cfg.epochs = 2;
        cfg.aux_ranking = false;
        let mut params = ModelParams::init(config.clone()).unwrap();
        let before = proj_bits(&params);
        train(&mut params, &bags, &cfg, |_| {}).unwrap();
        assert_eq!(proj_bits(&params), before, "disabled flag must freeze heads");

        cfg.aux_ranking = true;
        let mut frozen_config = config.clone();
        frozen_config.proj_mode = ProjectionMode::FrozenRandom;
        let mut params = ModelParams::init(frozen_config).unwrap();
        let before = proj_bits(&params);
        train(&mut params, &bags, &cfg, |_| {}).unwrap();
        assert_eq!(proj_bits(&params), before, "frozen mode must freeze heads");

        cfg.aux_interval = 3;
        let mut params = ModelParams::init(config).unwrap();
        let before = proj_bits(&params);
        train(&mut params, &bags, &cfg, |_| {}).unwrap();
        assert_ne!(
            proj_bits(&params),
            before,
            "enabled ranking updates must move the heads"
        );

        let err = aux_ranking_step(
            &mut ModelParams::init(querent_config(
                6,
                6,
                2,
                2,
                2,
                3,
                TaskKind::Classification { num_classes: 2 },
            ))
            .unwrap(),
            &bags[0],
            0.1,
            &mut RngStream::new(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Param(_)));
    }

    #[test]
    fn task_and_label_must_agree() {
        let config = querent_config(6, 6, 2, 2, 2, 3, TaskKind::Classification { num_classes: 2 });
        let params = ModelParams::init(config).unwrap();
        let bag = gaussian_bag(
            0,
            8,
            6,
            Label::Survival {
                bin: 1,
                censor: 0,
                time: 1.0,
                n_bins: 4,
            },
            5,
        );
        assert!(matches!(
            forward_loss(&params, &bag, None, None).unwrap_err(),
            Error::Param(_)
        ));

        let wrong_width = gaussian_bag(
            0,
            8,
            6,
            Label::Class {
                class_index: 0,
                num_classes: 3,
            },
            5,
        );
        assert!(matches!(
            forward_loss(&params, &wrong_width, None, None).unwrap_err(),
            Error::Param(_)
        ));
    }
}
