//! Model assembly: configuration, the parameter container with its ordered
//! block view (what the optimizer and checkpoints iterate), gradients, and
//! the forward pass from a bag to logits.

use crate::attention::{
    compute_selections, selective_attention_cached, AttentionParams, SelectionOptions,
    SelectiveCache,
};
use crate::bagstore::{partition_row_major, FeatureBag, Label, RegionPartition};
use crate::error::{Error, Result};
use crate::head::{attentive_pool, baseline_pool, classify, BaselinePool, HeadParams, PoolCache};
use crate::metadata::{build_metadata, ProjectionHeads, ProjectionMode};
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Querent,
    MeanPool,
    MaxPool,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Querent => "querent",
            ModelKind::MeanPool => "mean_pool",
            ModelKind::MaxPool => "max_pool",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "querent" => Ok(ModelKind::Querent),
            "mean_pool" => Ok(ModelKind::MeanPool),
            "max_pool" => Ok(ModelKind::MaxPool),
            other => Err(Error::Param(format!(
                "unknown model kind {other:?}; expected querent, mean_pool, or max_pool"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification { num_classes: usize },
    Survival { n_bins: usize },
}

impl TaskKind {
    pub fn n_outputs(&self) -> usize {
        match self {
            TaskKind::Classification { num_classes } => *num_classes,
            TaskKind::Survival { n_bins } => *n_bins,
        }
    }

    pub fn of_label(label: &Label) -> TaskKind {
        match label {
            Label::Class { num_classes, .. } => TaskKind::Classification {
                num_classes: *num_classes as usize,
            },
            Label::Survival { n_bins, .. } => TaskKind::Survival {
                n_bins: *n_bins as usize,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub task: TaskKind,
    pub d: usize,
    pub d_e: usize,
    /// Patches per region.
    pub p: usize,
    /// Regions kept per query.
    pub k: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the pooling gate.
    pub gate_hidden: usize,
    pub residual: bool,
    pub dropout_rate: f64,
    pub chunk_size: usize,
    pub include_home_region: bool,
    pub dedup_query: bool,
    pub proj_mode: ProjectionMode,
    pub raw_score_pool: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_e == 0 || self.gate_hidden == 0 {
            return Err(Error::Param("widths d, d_e, and gate hidden must be >= 1".into()));
        }
        if self.p == 0 {
            return Err(Error::Param("patches per region must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Param("selection needs k >= 1".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Param(format!(
                "head count {} must divide the model width {}",
                self.heads, self.d
            )));
        }
        if self.layers == 0 {
            return Err(Error::Param("at least one attention layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Param(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Param("chunk size must be >= 1".into()));
        }
        match self.task {
            TaskKind::Classification { num_classes } if num_classes < 2 => {
                return Err(Error::Param("classification needs at least two classes".into()))
            }
            TaskKind::Survival { n_bins } if n_bins == 0 => {
                return Err(Error::Param("survival needs at least one bin".into()))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn selection_options(&self) -> SelectionOptions {
        SelectionOptions {
            k: self.k,
            include_home_region: self.include_home_region,
            dedup_query: self.dedup_query,
        }
    }
}

/// All weights of one model, organized per pipeline stage.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub proj: ProjectionHeads,
    pub attn: Vec<AttentionParams>,
    pub head: HeadParams,
}

/// Shape and eligibility of one parameter block. Bias blocks report one row.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Whether the task optimizer may update (and weight-decay) this block.
    pub trainable: bool,
}

#[derive(Clone, Copy)]
enum Slot {
    ProjMinW,
    ProjMinB,
    ProjMaxW,
    ProjMaxB,
    ProjQW,
    ProjQB,
    AttnWqkv(usize),
    AttnBqkv(usize),
    AttnWo(usize),
    AttnBo(usize),
    Gate1W,
    Gate1B,
    Gate2W,
    Gate2B,
    ClassifierW,
    ClassifierB,
}

impl ModelParams {
    /// Deterministic initialization from the config seed. Projection heads
    /// draw first, then each attention layer, then the output head.
    pub fn init(config: ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed);
        let mut proj = ProjectionHeads::frozen_random(config.d, config.d_e, rng.next_u64());
        proj.mode = config.proj_mode;
        let mut attn = Vec::new();
        if config.kind == ModelKind::Querent {
            for _ in 0..config.layers {
                attn.push(AttentionParams::random(
                    config.d,
                    config.heads,
                    config.residual,
                    config.dropout_rate,
                    &mut rng,
                )?);
            }
        }
        let head = HeadParams::random(
            config.d,
            config.gate_hidden,
            config.task.n_outputs(),
            &mut rng,
        )?;
        Ok(ModelParams {
            config,
            proj,
            attn,
            head,
        })
    }

    fn slots(&self) -> Vec<(String, Slot, bool)> {
        let mut out = Vec::new();
        if self.config.kind == ModelKind::Querent {
            out.push(("proj_min.w".into(), Slot::ProjMinW, false));
            out.push(("proj_min.b".into(), Slot::ProjMinB, false));
            out.push(("proj_max.w".into(), Slot::ProjMaxW, false));
            out.push(("proj_max.b".into(), Slot::ProjMaxB, false));
            out.push(("proj_q.w".into(), Slot::ProjQW, false));
            out.push(("proj_q.b".into(), Slot::ProjQB, false));
            for l in 0..self.attn.len() {
                out.push((format!("attn{l}.w_qkv"), Slot::AttnWqkv(l), true));
                out.push((format!("attn{l}.b_qkv"), Slot::AttnBqkv(l), true));
                out.push((format!("attn{l}.w_o"), Slot::AttnWo(l), true));
                out.push((format!("attn{l}.b_o"), Slot::AttnBo(l), true));
            }
            out.push(("gate1.w".into(), Slot::Gate1W, true));
            out.push(("gate1.b".into(), Slot::Gate1B, true));
            out.push(("gate2.w".into(), Slot::Gate2W, true));
            out.push(("gate2.b".into(), Slot::Gate2B, true));
        }
        out.push(("classifier.w".into(), Slot::ClassifierW, true));
        out.push(("classifier.b".into(), Slot::ClassifierB, true));
        out
    }

    pub fn n_blocks(&self) -> usize {
        self.slots().len()
    }

    pub fn block_metas(&self) -> Vec<BlockMeta> {
        self.slots()
            .into_iter()
            .map(|(name, slot, trainable)| {
                let (rows, cols) = self.slot_shape(slot);
                BlockMeta {
                    name,
                    rows,
                    cols,
                    trainable,
                }
            })
            .collect()
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.slots().iter().position(|(n, _, _)| n == name)
    }

    fn slot_shape(&self, slot: Slot) -> (usize, usize) {
        match slot {
            Slot::ProjMinW => (self.proj.f_min.w.rows(), self.proj.f_min.w.cols()),
            Slot::ProjMinB => (1, self.proj.f_min.b.len()),
            Slot::ProjMaxW => (self.proj.f_max.w.rows(), self.proj.f_max.w.cols()),
            Slot::ProjMaxB => (1, self.proj.f_max.b.len()),
            Slot::ProjQW => (self.proj.f_q.w.rows(), self.proj.f_q.w.cols()),
            Slot::ProjQB => (1, self.proj.f_q.b.len()),
            Slot::AttnWqkv(l) => (self.attn[l].w_qkv.rows(), self.attn[l].w_qkv.cols()),
            Slot::AttnBqkv(l) => (1, self.attn[l].b_qkv.len()),
            Slot::AttnWo(l) => (self.attn[l].w_o.rows(), self.attn[l].w_o.cols()),
            Slot::AttnBo(l) => (1, self.attn[l].b_o.len()),
            Slot::Gate1W => (self.head.w_a1.rows(), self.head.w_a1.cols()),
            Slot::Gate1B => (1, self.head.b_a1.len()),
            Slot::Gate2W => (self.head.w_a2.rows(), self.head.w_a2.cols()),
            Slot::Gate2B => (1, self.head.b_a2.len()),
            Slot::ClassifierW => (self.head.w_c.rows(), self.head.w_c.cols()),
            Slot::ClassifierB => (1, self.head.b_c.len()),
        }
    }

    pub fn block_data(&self, idx: usize) -> &[f64] {
        let (_, slot, _) = self.slots()[idx];
        match slot {
            Slot::ProjMinW => self.proj.f_min.w.data(),
            Slot::ProjMinB => &self.proj.f_min.b,
            Slot::ProjMaxW => self.proj.f_max.w.data(),
            Slot::ProjMaxB => &self.proj.f_max.b,
            Slot::ProjQW => self.proj.f_q.w.data(),
            Slot::ProjQB => &self.proj.f_q.b,
            Slot::AttnWqkv(l) => self.attn[l].w_qkv.data(),
            Slot::AttnBqkv(l) => &self.attn[l].b_qkv,
            Slot::AttnWo(l) => self.attn[l].w_o.data(),
            Slot::AttnBo(l) => &self.attn[l].b_o,
            Slot::Gate1W => self.head.w_a1.data(),
            Slot::Gate1B => &self.head.b_a1,
            Slot::Gate2W => self.head.w_a2.data(),
            Slot::Gate2B => &self.head.b_a2,
            Slot::ClassifierW => self.head.w_c.data(),
            Slot::ClassifierB => &self.head.b_c,
        }
    }

    pub fn block_data_mut(&mut self, idx: usize) -> &mut [f64] {
        let (_, slot, _) = self.slots()[idx];
        match slot {
            Slot::ProjMinW => self.proj.f_min.w.data_mut(),
            Slot::ProjMinB => &mut self.proj.f_min.b,
            Slot::ProjMaxW => self.proj.f_max.w.data_mut(),
            Slot::ProjMaxB => &mut self.proj.f_max.b,
            Slot::ProjQW => self.proj.f_q.w.data_mut(),
            Slot::ProjQB => &mut self.proj.f_q.b,
            Slot::AttnWqkv(l) => self.attn[l].w_qkv.data_mut(),
            Slot::AttnBqkv(l) => &mut self.attn[l].b_qkv,
            Slot::AttnWo(l) => self.attn[l].w_o.data_mut(),
            Slot::AttnBo(l) => &mut self.attn[l].b_o,
            Slot::Gate1W => self.head.w_a1.data_mut(),
            Slot::Gate1B => &mut self.head.b_a1,
            Slot::Gate2W => self.head.w_a2.data_mut(),
            Slot::Gate2B => &mut self.head.b_a2,
            Slot::ClassifierW => self.head.w_c.data_mut(),
            Slot::ClassifierB => &mut self.head.b_c,
        }
    }
}

/// Per-block gradient buffers, indexed like the owning model's block view.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Gradients {
        Gradients {
            blocks: params
                .block_metas()
                .iter()
                .map(|m| vec![0.0; m.rows * m.cols])
                .collect(),
        }
    }

    /// L2 norm over every entry of every block.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for block in &self.blocks {
            for v in block {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for block in &mut self.blocks {
            for v in block.iter_mut() {
                *v *= s;
            }
        }
    }

    /// `self += other`, for gradient accumulation across bags.
    pub fn add(&mut self, other: &Gradients) {
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }
}

/// One attention layer's forward record.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// The rows this layer attended over (its input).
    pub input: Matrix,
    pub attn: SelectiveCache,
}

/// Everything one forward pass computed, enough to run backward.
#[derive(Clone, Debug)]
pub struct ModelCache {
    pub partition: RegionPartition,
    pub layers: Vec<LayerTrace>,
    /// Final attended rows (the pooling input) for the selective model.
    pub attended: Option<Matrix>,
    pub pool: Option<PoolCache>,
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Runs the full pipeline on one bag. `frozen_selections`, when given, must
/// hold one selection set per layer and bypasses metadata scoring (used by
/// the finite-difference checks). `dropout_seed` arms attention dropout.
pub fn forward(
    params: &ModelParams,
    bag: &FeatureBag,
    frozen_selections: Option<&[Vec<Vec<u32>>]>,
    dropout_seed: Option<u64>,
) -> Result<ModelCache> {
    let config = &params.config;
    if bag.d() != config.d {
        return Err(Error::Shape(format!(
            "bag width {} does not match configured width {}",
            bag.d(),
            config.d
        )));
    }
    let partition = partition_row_major(bag, config.p)?;

    match config.kind {
        ModelKind::MeanPool | ModelKind::MaxPool => {
            let pool_kind = if config.kind == ModelKind::MeanPool {
                BaselinePool::Mean
            } else {
                BaselinePool::Max
            };
            let z = baseline_pool(&bag.features, pool_kind)?;
            let logits = classify(&z, &params.head)?;
            Ok(ModelCache {
                partition,
                layers: Vec::new(),
                attended: None,
                pool: None,
                z,
                logits,
            })
        }
        ModelKind::Querent => {
            if let Some(frozen) = frozen_selections {
                if frozen.len() != config.layers {
                    return Err(Error::Shape(format!(
                        "{} frozen selection sets for {} layers",
                        frozen.len(),
                        config.layers
                    )));
                }
            }
            let opts = config.selection_options();
            let mut layers = Vec::with_capacity(config.layers);
            let mut current = bag.features.clone();
            for layer in 0..config.layers {
                let layer_bag = FeatureBag::new(
                    bag.bag_id,
                    current.clone(),
                    bag.coords.clone(),
                    bag.label.clone(),
                )?;
                let selections = match frozen_selections {
                    Some(frozen) => frozen[layer].clone(),
                    None => {
                        let meta = build_metadata(&layer_bag, &partition, &params.proj)?;
                        compute_selections(&layer_bag, &partition, &meta, &params.proj, &opts)?
                    }
                };
                let layer_seed = dropout_seed
                    .map(|s| RngStream::new(s.wrapping_add(layer as u64)).next_u64());
                let (out, cache) = selective_attention_cached(
                    &layer_bag,
                    &partition,
                    &selections,
                    &params.attn[layer],
                    opts.dedup_query,
                    layer_seed,
                )?;
                layers.push(LayerTrace {
                    input: current,
                    attn: cache,
                });
                current = out;
            }
            let pool = attentive_pool(&current, &params.head, config.raw_score_pool)?;
            let logits = classify(&pool.z, &params.head)?;
            let z = pool.z.clone();
            Ok(ModelCache {
                partition,
                layers,
                attended: Some(current),
                pool: Some(pool),
                z,
                logits,
            })
        }
    }
}
