//! Feature bags, spatial region partitions, synthetic corpora, and the
//! on-disk bag format.
//!
//! A corpus on disk is a directory of `.qsb` files plus a `manifest.txt`
//! listing one file name per line; readers follow manifest order. The bag
//! format ("QSB1", little-endian) is:
//!
//! ```text
//! 'Q' 'S' 'B' '1'
//! u32 version = 1
//! u32 bag_id
//! u32 n_patches
//! u32 d
//! u8  label_kind            0 = class, 1 = survival
//!   class:    u32 num_classes, u32 class_index
//!   survival: u32 n_bins, u32 bin, u8 censor, f32 time
//! u8  has_coords            1 -> n_patches x { u32 x, u32 y }
//! n_patches * d * f32       features, row-major
//! ```
//!
//! Features are stored as f32 and widened to f64 on load; all in-memory
//! arithmetic stays f64.

use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{Matrix, RngStream};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class {
        class_index: u32,
        num_classes: u32,
    },
    /// Discrete-time survival: `bin` is 1-based, `censor` is 1 for a
    /// censored observation and 0 for an observed event.
    Survival {
        bin: u32,
        censor: u8,
        time: f32,
        n_bins: u32,
    },
}

impl Label {
    fn validate(&self) -> Result<()> {
        match self {
            Label::Class {
                class_index,
                num_classes,
            } => {
                if *num_classes < 2 {
                    return Err(Error::Param(format!(
                        "class label needs at least 2 classes, got {num_classes}"
                    )));
                }
                if class_index >= num_classes {
                    return Err(Error::Param(format!(
                        "class index {class_index} out of range for {num_classes} classes"
                    )));
                }
            }
            Label::Survival {
                bin,
                censor,
                n_bins,
                time,
            } => {
                if *n_bins == 0 || *bin == 0 || bin > n_bins {
                    return Err(Error::Param(format!(
                        "survival bin {bin} out of range 1..={n_bins}"
                    )));
                }
                if *censor > 1 {
                    return Err(Error::Param(format!("censor flag must be 0 or 1, got {censor}")));
                }
                if !time.is_finite() || *time < 0.0 {
                    return Err(Error::Param(format!("survival time must be finite and >= 0, got {time}")));
                }
            }
        }
        Ok(())
    }
}

/// One bag: N patch feature vectors, optional (x, y) grid coordinates, and a
/// bag-level label.
#[derive(Clone, Debug)]
pub struct FeatureBag {
    pub bag_id: u32,
    pub features: Matrix,
    pub coords: Option<Vec<(u32, u32)>>,
    pub label: Label,
}

impl FeatureBag {
    pub fn new(
        bag_id: u32,
        features: Matrix,
        coords: Option<Vec<(u32, u32)>>,
        label: Label,
    ) -> Result<FeatureBag> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::Param("bag needs at least one patch and one feature".into()));
        }
        if let Some(c) = &coords {
            if c.len() != features.rows() {
                return Err(Error::Shape(format!(
                    "{} coordinates for {} patches",
                    c.len(),
                    features.rows()
                )));
            }
        }
        label.validate()?;
        Ok(FeatureBag {
            bag_id,
            features,
            coords,
            label,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }
}

/// Disjoint cover of a bag's patches by contiguous regions of `p` patches
/// (the last region may be short). With coordinates present, patches are
/// ordered by (y, x) before chunking so regions are spatially coherent;
/// without them, storage order is used.
#[derive(Clone, Debug)]
pub struct RegionPartition {
    pub patches_per_region: usize,
    /// Patch indices per region, in the region's internal order.
    pub regions: Vec<Vec<u32>>,
    /// Mean patch coordinate per region when coordinates exist.
    pub centroids: Option<Vec<(f64, f64)>>,
    /// Region index of every patch.
    pub home_region: Vec<u32>,
}

impl RegionPartition {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }
}

pub fn partition_row_major(bag: &FeatureBag, p: usize) -> Result<RegionPartition> {
    if p == 0 {
        return Err(Error::Param("patches per region must be >= 1".into()));
    }
    let n = bag.n_patches();
    let mut order: Vec<u32> = (0..n as u32).collect();
    if let Some(coords) = &bag.coords {
        order.sort_by_key(|&i| {
            let (x, y) = coords[i as usize];
            (y, x)
        });
    }
    let mut regions = Vec::with_capacity(n.div_ceil(p));
    for chunk in order.chunks(p) {
        regions.push(chunk.to_vec());
    }
    let mut home_region = vec![0u32; n];
    for (r, members) in regions.iter().enumerate() {
        for &i in members {
            home_region[i as usize] = r as u32;
        }
    }
    let centroids = bag.coords.as_ref().map(|coords| {
        regions
            .iter()
            .map(|members| {
                let mut sx = 0.0;
                let mut sy = 0.0;
                for &i in members {
                    let (x, y) = coords[i as usize];
                    sx += x as f64;
                    sy += y as f64;
                }
                let m = members.len() as f64;
                (sx / m, sy / m)
            })
            .collect()
    });
    Ok(RegionPartition {
        patches_per_region: p,
        regions,
        centroids,
        home_region,
    })
}

// --- QSB1 serialization ---------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn encode_qsb(bag: &FeatureBag) -> Vec<u8> {
    let n = bag.n_patches();
    let d = bag.d();
    let mut out = Vec::with_capacity(26 + n * d * 4 + bag.coords.as_ref().map_or(0, |_| n * 8));
    out.extend_from_slice(b"QSB1");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&bag.bag_id.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    match &bag.label {
        Label::Class {
            class_index,
            num_classes,
        } => {
            out.push(0);
            out.extend_from_slice(&num_classes.to_le_bytes());
            out.extend_from_slice(&class_index.to_le_bytes());
        }
        Label::Survival {
            bin,
            censor,
            time,
            n_bins,
        } => {
            out.push(1);
            out.extend_from_slice(&n_bins.to_le_bytes());
            out.extend_from_slice(&bin.to_le_bytes());
            out.push(*censor);
            out.extend_from_slice(&time.to_le_bytes());
        }
    }
    match &bag.coords {
        Some(coords) => {
            out.push(1);
            for (x, y) in coords {
                out.extend_from_slice(&x.to_le_bytes());
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    for v in bag.features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_qsb(buf: &[u8]) -> Result<FeatureBag> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != b"QSB1" {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected QSB1"),
        });
    }
    let version = c.u32("version")?;
    if version != 1 {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let bag_id = c.u32("bag_id")?;
    let n = c.u32("n_patches")? as usize;
    let d = c.u32("d")? as usize;
    if n == 0 || d == 0 {
        return Err(Error::Format {
            offset: 12,
            message: format!("bag dimensions {n}x{d} must be positive"),
        });
    }
    let label_kind_at = c.pos;
    let label = match c.u8("label_kind")? {
        0 => Label::Class {
            num_classes: c.u32("num_classes")?,
            class_index: c.u32("class_index")?,
        },
        1 => {
            let n_bins = c.u32("n_bins")?;
            let bin = c.u32("bin")?;
            let censor = c.u8("censor")?;
            let time = c.f32("time")?;
            Label::Survival {
                bin,
                censor,
                time,
                n_bins,
            }
        }
        k => {
            return Err(Error::Format {
                offset: label_kind_at as u64,
                message: format!("unknown label kind {k}"),
            })
        }
    };
    let coords_flag_at = c.pos;
    let coords = match c.u8("has_coords")? {
        0 => None,
        1 => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let x = c.u32("coord x")?;
                let y = c.u32("coord y")?;
                v.push((x, y));
            }
            Some(v)
        }
        k => {
            return Err(Error::Format {
                offset: coords_flag_at as u64,
                message: format!("has_coords must be 0 or 1, got {k}"),
            })
        }
    };
    let feat_at = c.pos;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let v = c.f32("feature")?;
        if !v.is_finite() {
            return Err(Error::Format {
                offset: (c.pos - 4) as u64,
                message: "non-finite feature value".into(),
            });
        }
        data.push(v as f64);
    }
    if c.pos != buf.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: format!("{} trailing bytes after feature block at {feat_at}", buf.len() - c.pos),
        });
    }
    let features = Matrix::from_vec(n, d, data)?;
    FeatureBag::new(bag_id, features, coords, label).map_err(|e| match e {
        Error::Param(m) => Error::Format {
            offset: label_kind_at as u64,
            message: m,
        },
        other => other,
    })
}

pub fn write_qsb(bag: &FeatureBag, path: &Path) -> Result<()> {
    let bytes = encode_qsb(bag);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_qsb(path: &Path) -> Result<FeatureBag> {
    let buf = fs::read(path)?;
    decode_qsb(&buf)
}

/// Write every bag as `bag_<id>.qsb` plus the manifest.
pub fn write_corpus(bags: &[FeatureBag], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for bag in bags {
        let name = format!("bag_{:06}.qsb", bag.bag_id);
        write_qsb(bag, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Read a corpus in manifest order.
pub fn read_corpus(dir: &Path) -> Result<Vec<FeatureBag>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let names: Vec<PathBuf> = manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| dir.join(l.trim()))
        .collect();
    let loaded = exec::map_indexed(names.len(), |i| read_qsb(&names[i]));
    loaded.into_iter().collect()
}

// --- synthetic corpora -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Binary label: 1 when the two marker prototypes sit in distant planted
    /// blocks, 0 when the same blocks sit adjacent. Both classes contain the
    /// same prototype counts, so per-bag mean features carry no label signal.
    CooccurrenceClass,
    /// Discrete-time label whose hazard bin is drawn from logits linear in
    /// the two marker prototypes' patch counts.
    Survival,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_bags: u32,
    /// Patches form a grid_side x grid_side grid (N = grid_side^2).
    pub grid_side: u32,
    pub d: usize,
    pub num_prototypes: usize,
    pub noise_sigma: f64,
    /// Spatial decay rate of the background field: a patch's background
    /// content is a distance-weighted mixture exp(-decay_alpha * dist) of a
    /// few per-bag field sources.
    pub decay_alpha: f64,
    pub task: SyntheticTask,
    pub seed: u64,
}

pub const SURVIVAL_BINS: u32 = 4;

/// Marker prototypes get this norm; background prototypes stay at norm 1 so
/// markers dominate region summaries.
const MARKER_NORM: f64 = 3.0;
const FIELD_SOURCES: usize = 3;

fn unit_gaussian_row(d: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn prototypes(spec: &SyntheticSpec, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..spec.num_prototypes)
        .map(|i| {
            let mut v = unit_gaussian_row(spec.d, rng);
            let scale = if i < 2 { MARKER_NORM } else { 1.0 };
            for x in &mut v {
                *x *= scale;
            }
            v
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<FeatureBag>> {
    if spec.num_prototypes < 2 {
        return Err(Error::Param(format!(
            "need at least 2 prototypes, got {}",
            spec.num_prototypes
        )));
    }
    if spec.d < 2 {
        return Err(Error::Param("synthetic features need d >= 2".into()));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::Param("noise_sigma must be >= 0".into()));
    }
    if spec.task == SyntheticTask::CooccurrenceClass
        && (spec.grid_side < 6 || spec.grid_side % 2 != 0)
    {
        return Err(Error::Param(format!(
            "cooccurrence grids need an even grid_side >= 6, got {}",
            spec.grid_side
        )));
    }
    if spec.task == SyntheticTask::Survival && spec.grid_side < 2 {
        return Err(Error::Param("survival grids need grid_side >= 2".into()));
    }
    let mut corpus_rng = RngStream::new(spec.seed);
    let protos = prototypes(spec, &mut corpus_rng);
    // Survival hazard coefficients: fixed per corpus, map the two marker
    // counts onto bin logits.
    let hazard_w: Vec<(f64, f64)> = (0..SURVIVAL_BINS)
        .map(|_| (corpus_rng.next_gaussian() * 2.0, corpus_rng.next_gaussian() * 2.0))
        .collect();

    let bags = exec::map_indexed(spec.n_bags as usize, |b| {
        generate_bag(spec, &protos, &hazard_w, b as u32)
    });
    bags.into_iter().collect()
}

fn generate_bag(
    spec: &SyntheticSpec,
    protos: &[Vec<f64>],
    hazard_w: &[(f64, f64)],
    bag_id: u32,
) -> Result<FeatureBag> {
    // Per-bag stream; derived by XOR so a corpus is reproducible bag by bag.
    let mut rng = RngStream::new(spec.seed ^ bag_id as u64);
    let side = spec.grid_side as usize;
    let n = side * side;
    let d = spec.d;
    let coords: Vec<(u32, u32)> = (0..n)
        .map(|i| ((i % side) as u32, (i / side) as u32))
        .collect();

    // Background field: every patch mixes a few prototype sources with
    // exponentially decaying spatial weights. Source placement never depends
    // on the label, so class means stay indistinguishable.
    let mut features = Matrix::zeros(n, d);
    let has_background = protos.len() > 2;
    let sources: Vec<(f64, f64, usize)> = (0..FIELD_SOURCES)
        .map(|_| {
            let sx = rng.next_below(side as u64) as f64;
            let sy = rng.next_below(side as u64) as f64;
            let pi = if has_background {
                2 + rng.next_below((protos.len() - 2) as u64) as usize
            } else {
                0 // unused below
            };
            (sx, sy, pi)
        })
        .collect();
    if has_background {
        for i in 0..n {
            let (px, py) = coords[i];
            let row = features.row_mut(i);
            let mut wsum = 0.0;
            for &(sx, sy, _) in &sources {
                let dx = px as f64 - sx;
                let dy = py as f64 - sy;
                wsum += (-spec.decay_alpha * (dx * dx + dy * dy).sqrt()).exp();
            }
            let wsum = wsum.max(1e-12);
            for &(sx, sy, pi) in &sources {
                let dx = px as f64 - sx;
                let dy = py as f64 - sy;
                let w = (-spec.decay_alpha * (dx * dx + dy * dy).sqrt()).exp() / wsum;
                axpy_slice(row, w, &protos[pi]);
            }
        }
    }

    let label = match spec.task {
        SyntheticTask::CooccurrenceClass => {
            plant_cooccurrence(spec, protos, &mut rng, &mut features, bag_id)?
        }
        SyntheticTask::Survival => plant_survival(protos, hazard_w, &mut rng, &mut features)?,
    };

    if spec.noise_sigma > 0.0 {
        for v in features.data_mut() {
            *v += rng.next_gaussian() * spec.noise_sigma;
        }
    }
    FeatureBag::new(bag_id, features, Some(coords), label)
}

fn axpy_slice(out: &mut [f64], s: f64, v: &[f64]) {
    for (o, x) in out.iter_mut().zip(v.iter()) {
        *o += s * x;
    }
}

/// Overwrite a 2x2 block whose top-left corner is (x, y) with a prototype.
fn stamp_block(features: &mut Matrix, side: usize, x: usize, y: usize, proto: &[f64]) {
    for dy in 0..2 {
        for dx in 0..2 {
            let i = (y + dy) * side + (x + dx);
            features.row_mut(i).copy_from_slice(proto);
        }
    }
}

/// Plant one 2x2 block of each marker prototype. Even bag ids become label 0
/// (blocks adjacent in one two-row strip), odd ids label 1 (blocks in strips
/// at least grid_side/2 rows apart), so the class prior is exactly one half.
fn plant_cooccurrence(
    spec: &SyntheticSpec,
    protos: &[Vec<f64>],
    rng: &mut RngStream,
    features: &mut Matrix,
    bag_id: u32,
) -> Result<Label> {
    let side = spec.grid_side as usize;
    let half = spec.grid_side as f64 / 2.0;
    let strips: Vec<usize> = (0..side - 1).step_by(2).collect();
    let positive = bag_id % 2 == 1;
    let (ax, ay, bx, by);
    if positive {
        // distant: strip tops at least half the grid apart
        loop {
            let ya = strips[rng.next_below(strips.len() as u64) as usize];
            let yb = strips[rng.next_below(strips.len() as u64) as usize];
            if (ya as f64 - yb as f64).abs() >= half {
                ay = ya;
                by = yb;
                break;
            }
        }
        ax = rng.next_below((side - 1) as u64) as usize;
        bx = rng.next_below((side - 1) as u64) as usize;
    } else {
        // adjacent: same strip, horizontally disjoint blocks 2 columns apart
        let y = strips[rng.next_below(strips.len() as u64) as usize];
        ay = y;
        by = y;
        let xa = rng.next_below((side - 3) as u64) as usize;
        ax = xa;
        bx = xa + 2;
    }
    let (cax, cay) = (ax as f64 + 0.5, ay as f64 + 0.5);
    let (cbx, cby) = (bx as f64 + 0.5, by as f64 + 0.5);
    let dist = ((cax - cbx).powi(2) + (cay - cby).powi(2)).sqrt();
    let label_is_distant = dist >= half;
    debug_assert_eq!(label_is_distant, positive);
    stamp_block(features, side, ax, ay, &protos[0]);
    stamp_block(features, side, bx, by, &protos[1]);
    Ok(Label::Class {
        class_index: label_is_distant as u32,
        num_classes: 2,
    })
}

/// Scatter marker patches with per-bag random counts and draw the hazard bin
/// from logits linear in those counts.
fn plant_survival(
    protos: &[Vec<f64>],
    hazard_w: &[(f64, f64)],
    rng: &mut RngStream,
    features: &mut Matrix,
) -> Result<Label> {
    let n = features.rows();
    let max_marks = (n / 4).max(1) as u64;
    let c0 = rng.next_below(max_marks) as usize + 1;
    let c1 = rng.next_below(max_marks) as usize + 1;
    let mut slots: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates for the marker positions
    for t in 0..(c0 + c1).min(n) {
        let j = t + rng.next_below((n - t) as u64) as usize;
        slots.swap(t, j);
    }
    for (t, &i) in slots.iter().take(c0 + c1).enumerate() {
        let proto = if t < c0 { &protos[0] } else { &protos[1] };
        features.row_mut(i).copy_from_slice(proto);
    }
    let f0 = c0 as f64 / n as f64;
    let f1 = c1 as f64 / n as f64;
    let mut logits: Vec<f64> = hazard_w.iter().map(|(w0, w1)| w0 * f0 * 8.0 + w1 * f1 * 8.0).collect();
    crate::numerics::softmax_slice(&mut logits);
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut bin = SURVIVAL_BINS;
    for (i, p) in logits.iter().enumerate() {
        acc += p;
        if u < acc {
            bin = i as u32 + 1;
            break;
        }
    }
    let censor = (rng.next_f64() < 0.3) as u8;
    let mut time = (bin - 1) as f64 + rng.next_f64();
    if censor == 1 {
        time *= rng.next_f64();
    }
    Ok(Label::Survival {
        bin,
        censor,
        time: time as f32,
        n_bins: SURVIVAL_BINS,
    })
}
