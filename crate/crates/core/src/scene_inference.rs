//! Sliding-window prediction over rasters larger than the model window.
//!
//! Tile probabilities are blended into fixed-point per-class sums. Integer
//! addition is associative, so the result does not depend on the order in
//! which tiles arrive, and rows are emitted as soon as every tile touching
//! them has been seen.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use di3cl_tensor::nn::ParamSet;
use di3cl_tensor::Tensor;

use crate::datapipe::{load_patch, save_mask, save_rgb};
use crate::downstream::{image_batch, SegModel};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

/// Fixed-point scale of one unit of blended probability.
const FIXED_ONE: f64 = (1u64 << 32) as f64;

/// Window origins covering a scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub window: usize,
    pub stride: usize,
    /// Scene size before padding.
    pub scene: (usize, usize),
    /// Size the windows tile; larger than `scene` only when padded.
    pub extent: (usize, usize),
    /// `(row, col)` origins, row-major.
    pub offsets: Vec<(usize, usize)>,
    /// The scene was smaller than the window and is reflect-padded.
    pub padded: bool,
}

fn axis_offsets(n: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let last = n.saturating_sub(window);
    while *out.last().expect("non-empty") + stride < last {
        let next = out.last().expect("non-empty") + stride;
        out.push(next);
    }
    if *out.last().expect("non-empty") != last {
        out.push(last);
    }
    out
}

pub fn plan_tiles(scene: (usize, usize), window: usize, stride: usize) -> Result<TilePlan> {
    let (h, w) = scene;
    if h == 0 || w == 0 {
        return Err(Error::Geometry("scene is empty".into()));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Config("inference.window and inference.stride must be >= 1".into()));
    }
    if stride > window {
        return Err(Error::Config(format!("inference.stride ({stride}) must not exceed inference.window ({window})")));
    }
    let extent = (h.max(window), w.max(window));
    let rows = axis_offsets(extent.0, window, stride);
    let cols = axis_offsets(extent.1, window, stride);
    let offsets = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TilePlan { window, stride, scene, extent, offsets, padded: extent != scene })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Blend {
    /// Plain average over covering tiles.
    #[default]
    Uniform,
    /// Hann-window weights that favour tile centers.
    Cosine,
}

impl FromStr for Blend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Blend::Uniform),
            "cosine" => Ok(Blend::Cosine),
            _ => Err(Error::Config(format!("inference.blend: expected uniform or cosine, got {s:?}"))),
        }
    }
}

impl fmt::Display for Blend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Blend::Uniform => "uniform",
            Blend::Cosine => "cosine",
        })
    }
}

/// Per-position weights of one window axis, all strictly positive.
fn axis_weights(blend: Blend, window: usize) -> Vec<f64> {
    match blend {
        Blend::Uniform => vec![1.0; window],
        Blend::Cosine => (0..window)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / window as f64).cos())
            .collect(),
    }
}

/// Fixed-point contribution of probability `p` under weight `w`.
pub fn quantize(p: f32, w: f64) -> u64 {
    (w * (p as f64).clamp(0.0, 1.0) * FIXED_ONE).round() as u64
}

struct RowAcc {
    sums: Vec<u64>,
}

/// Accumulates tiles and releases finished rows of the label map.
pub struct Stitcher {
    plan: TilePlan,
    classes: usize,
    weights: Vec<f64>,
    /// Distinct row offsets and, per offset, how many tiles are outstanding.
    groups: Vec<(usize, usize)>,
    seen: Vec<bool>,
    rows: BTreeMap<usize, RowAcc>,
    next_row: usize,
    peak_rows: usize,
}

impl Stitcher {
    pub fn new(plan: TilePlan, classes: usize, blend: Blend) -> Result<Self> {
        if classes == 0 || classes > 255 {
            return Err(Error::Config(format!("cannot stitch {classes} classes")));
        }
        let mut groups: Vec<(usize, usize)> = Vec::new();
        for &(r, _) in &plan.offsets {
            match groups.last_mut() {
                Some(g) if g.0 == r => g.1 += 1,
                _ => groups.push((r, 1)),
            }
        }
        let weights = axis_weights(blend, plan.window);
        let seen = vec![false; plan.offsets.len()];
        Ok(Self { plan, classes, weights, groups, seen, rows: BTreeMap::new(), next_row: 0, peak_rows: 0 })
    }

    pub fn plan(&self) -> &TilePlan {
        &self.plan
    }

    /// Largest number of accumulator rows held at once so far.
    pub fn peak_rows(&self) -> usize {
        self.peak_rows
    }

    /// Adds tile `index` of the plan (`[classes, window, window]`
    /// probabilities) and returns the label rows it completed, as
    /// `(row, labels)` cropped to the scene.
    pub fn push(&mut self, index: usize, probs: &Tensor<f32>) -> Result<Vec<(usize, Vec<u8>)>> {
        let &(r0, c0) = self
            .plan
            .offsets
            .get(index)
            .ok_or_else(|| Error::IncompletePlan(format!("tile {index} is not part of the plan")))?;
        let win = self.plan.window;
        if probs.shape() != [self.classes, win, win] {
            return Err(Error::Geometry(format!(
                "tile {index} at ({r0}, {c0}): expected [{}, {win}, {win}] probabilities, got {:?}",
                self.classes,
                probs.shape()
            )));
        }
        if std::mem::replace(&mut self.seen[index], true) {
            return Err(Error::IncompletePlan(format!("tile {index} at ({r0}, {c0}) delivered twice")));
        }
        let (k, width) = (self.classes, self.plan.extent.1);
        let data = probs.data();
        for dr in 0..win {
            let acc = self
                .rows
                .entry(r0 + dr)
                .or_insert_with(|| RowAcc { sums: vec![0; k * width] });
            for dc in 0..win {
                let w = self.weights[dr] * self.weights[dc];
                let col = c0 + dc;
                for c in 0..k {
                    acc.sums[col * k + c] += quantize(data[(c * win + dr) * win + dc], w);
                }
            }
        }
        self.peak_rows = self.peak_rows.max(self.rows.len());
        let group = self.groups.iter_mut().find(|g| g.0 == r0).expect("offset from the plan");
        group.1 -= 1;
        Ok(self.release())
    }

    fn release(&mut self) -> Vec<(usize, Vec<u8>)> {
        let limit = match self.groups.iter().find(|g| g.1 > 0) {
            Some(&(r, _)) => r,
            None => self.plan.extent.0,
        };
        let mut out = Vec::new();
        while self.next_row < limit {
            let row = self.next_row;
            self.next_row += 1;
            let acc = self.rows.remove(&row);
            if row < self.plan.scene.0 {
                out.push((row, self.labels(acc)));
            }
        }
        out
    }

    fn labels(&self, acc: Option<RowAcc>) -> Vec<u8> {
        let k = self.classes;
        let w = self.plan.scene.1;
        match acc {
            Some(acc) => (0..w)
                .map(|col| {
                    let s = &acc.sums[col * k..(col + 1) * k];
                    // First maximum wins ties.
                    (1..k).fold(0, |best, c| if s[c] > s[best] { c } else { best }) as u8
                })
                .collect(),
            None => vec![0; w],
        }
    }

    /// Remaining rows; fails if any planned tile never arrived.
    pub fn finish(mut self) -> Result<Vec<(usize, Vec<u8>)>> {
        if let Some(i) = self.seen.iter().position(|&s| !s) {
            let (r, c) = self.plan.offsets[i];
            return Err(Error::IncompletePlan(format!("tile {i} at ({r}, {c}) is missing")));
        }
        Ok(self.release())
    }
}

/// Stitches every tile of `plan` (given in any order) into a label map.
pub fn stitch<'a>(
    tiles: impl IntoIterator<Item = (usize, &'a Tensor<f32>)>,
    plan: &TilePlan,
    classes: usize,
    blend: Blend,
) -> Result<Mask> {
    let (h, w) = plan.scene;
    let mut out = Mask::filled(h, w, 0);
    let mut st = Stitcher::new(plan.clone(), classes, blend)?;
    let mut write = |rows: Vec<(usize, Vec<u8>)>| {
        for (r, labels) in rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&labels);
        }
    };
    for (i, t) in tiles {
        write(st.push(i, t)?);
    }
    write(st.finish()?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub window: usize,
    pub stride: usize,
    pub blend: Blend,
    /// Tiles per forward pass.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { window: 512, stride: 100, blend: Blend::Uniform, batch_size: 4 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        plan_tiles((1, 1), self.window, self.stride)?;
        if self.batch_size == 0 {
            return Err(Error::Config("inference.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything that maps `[n, 1, win, win]` images to class probabilities.
pub trait TileModel {
    fn classes(&self) -> usize;
    fn probabilities(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl TileModel for (&SegModel, &mut ParamSet<f32>) {
    fn classes(&self) -> usize {
        self.0.num_classes
    }

    fn probabilities(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.0.predict(self.1, batch)
    }
}

/// Label map of a whole scene, streamed tile row by tile row.
pub fn infer_scene(model: &mut dyn TileModel, scene: &Image, cfg: &InferenceConfig) -> Result<(Mask, TilePlan)> {
    let plan = plan_tiles((scene.height, scene.width), cfg.window, cfg.stride)?;
    let source = if plan.padded { scene.pad_reflect(plan.extent.0, plan.extent.1) } else { scene.clone() };
    let classes = model.classes();
    let mut st = Stitcher::new(plan.clone(), classes, cfg.blend)?;
    let (h, w) = plan.scene;
    let mut out = Mask::filled(h, w, 0);
    let win = plan.window;
    let indices: Vec<usize> = (0..plan.offsets.len()).collect();
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let tiles = chunk
            .iter()
            .map(|&i| {
                let (r, c) = plan.offsets[i];
                source.window(r, c, win, win)
            })
            .collect::<Result<Vec<_>>>()?;
        let probs = model.probabilities(&image_batch(&tiles.iter().collect::<Vec<_>>())?)?;
        let per_tile = classes * win * win;
        if probs.numel() != chunk.len() * per_tile {
            return Err(Error::Geometry(format!("model returned {:?} for {} tiles", probs.shape(), chunk.len())));
        }
        for (j, &i) in chunk.iter().enumerate() {
            let t = Tensor::new(&[classes, win, win], probs.data()[j * per_tile..(j + 1) * per_tile].to_vec())?;
            for (r, labels) in st.push(i, &t)? {
                out.data[r * w..(r + 1) * w].copy_from_slice(&labels);
            }
        }
    }
    for (r, labels) in st.finish()? {
        out.data[r * w..(r + 1) * w].copy_from_slice(&labels);
    }
    Ok((out, plan))
}

/// Rendering colours, cycled for class indices past the end.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 255],
    [0, 160, 0],
    [230, 200, 0],
    [200, 0, 0],
    [0, 200, 200],
    [160, 0, 160],
    [255, 128, 0],
    [128, 128, 128],
];

pub fn render_palette(labels: &Mask) -> Vec<u8> {
    labels.data.iter().flat_map(|&l| PALETTE[l as usize % PALETTE.len()]).collect()
}

/// Paths written by [`infer_scene_file`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOutputs {
    pub labels: PathBuf,
    pub rendering: PathBuf,
}

/// Reads a grayscale raster, predicts it and writes `<stem>_labels.png`
/// and `<stem>_rgb.png` into `out_dir`.
pub fn infer_scene_file(
    model: &mut dyn TileModel,
    input: &Path,
    out_dir: &Path,
    cfg: &InferenceConfig,
) -> Result<SceneOutputs> {
    let scene = load_patch(input)?;
    let (labels, plan) = infer_scene(model, &scene, cfg)?;
    log::info!(
        "{}: {} tiles of {}px at stride {}{}",
        input.display(),
        plan.offsets.len(),
        plan.window,
        plan.stride,
        if plan.padded { " (padded)" } else { "" }
    );
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    let out = SceneOutputs {
        labels: out_dir.join(format!("{stem}_labels.png")),
        rendering: out_dir.join(format!("{stem}_rgb.png")),
    };
    save_mask(&out.labels, &labels)?;
    save_rgb(&out.rendering, labels.height, labels.width, render_palette(&labels))?;
    Ok(out)
}
