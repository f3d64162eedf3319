//! Geometry-tracked view augmentation and RoI pooling.
//!
//! A view is produced from a source image by a crop, a resize to a square
//! output, an optional horizontal flip and a photometric jitter. The
//! geometric part is an axis-aligned affine map recorded in [`ViewParams`],
//! so boxes drawn in the source frame can be carried into either view and
//! then onto a feature map.
//!
//! Coordinates are continuous with pixel `i` covering `[i, i + 1)`; its
//! center sits at `i + 0.5`.

use di3cl_tensor::ops::GatherTaps;
use di3cl_tensor::{Float, Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::Image;

/// Axis-aligned box. The frame (source px, view px or feature cells) is
/// fixed by the function that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// `other` lies inside `self`, up to `tol`.
    pub fn contains(&self, other: &BBox, tol: f64) -> bool {
        other.x >= self.x - tol
            && other.y >= self.y - tol
            && other.right() <= self.right() + tol
            && other.bottom() <= self.bottom() + tol
    }
}

/// K boxes sampled inside one intersection region, source frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    pub boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn k(&self) -> usize {
        self.boxes.len()
    }
}

/// Intensity jitter and blur applied after the geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
    /// Gaussian blur standard deviation in output pixels; 0 disables.
    pub blur_sigma: f64,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric { brightness: 1.0, contrast: 1.0, blur_sigma: 0.0 };
}

/// One sampled augmentation `t` of a source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewParams {
    /// Crop rectangle in source pixels (integral corners).
    pub crop: BBox,
    pub output_size: usize,
    pub hflip: bool,
    pub photometric: Photometric,
}

impl ViewParams {
    /// Full-image crop, no flip, no jitter.
    pub fn identity(height: usize, width: usize, output_size: usize) -> Self {
        Self {
            crop: BBox::new(0.0, 0.0, width as f64, height as f64),
            output_size,
            hflip: false,
            photometric: Photometric::IDENTITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub output_size: usize,
    /// Crop area as a fraction of the source area.
    pub scale: (f64, f64),
    /// Crop aspect ratio `w / h`, sampled log-uniformly.
    pub ratio: (f64, f64),
    pub hflip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            output_size: 224,
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            brightness: 0.4,
            contrast: 0.4,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.output_size == 0 {
            return bad("augment.output_size must be >= 1");
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1 && self.scale.1 <= 1.0) {
            return bad("augment.scale must satisfy 0 < min <= max <= 1");
        }
        if !(self.ratio.0 > 0.0 && self.ratio.0 <= self.ratio.1) {
            return bad("augment.ratio must satisfy 0 < min <= max");
        }
        for (name, p) in [("augment.hflip_prob", self.hflip_prob), ("augment.blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.blur_sigma.0 >= 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return bad("augment.blur_sigma must satisfy 0 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return bad("augment.brightness and augment.contrast must lie in [0, 1)");
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a random resized crop, flip and photometric jitter.
pub fn sample_view_params(
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    (height, width): (usize, usize),
) -> Result<ViewParams> {
    cfg.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Geometry("empty source image".into()));
    }
    let crop = sample_crop(rng, cfg, height, width)?;
    let hflip = rng.random::<f64>() < cfg.hflip_prob;
    let brightness = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
    let contrast = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
    let blur_sigma = if rng.random::<f64>() < cfg.blur_prob {
        uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1)
    } else {
        0.0
    };
    Ok(ViewParams {
        crop,
        output_size: cfg.output_size,
        hflip,
        photometric: Photometric { brightness, contrast, blur_sigma },
    })
}

fn sample_crop(rng: &mut impl Rng, cfg: &AugmentConfig, height: usize, width: usize) -> Result<BBox> {
    let area = (height * width) as f64;
    let in_range = |w: usize, h: usize| {
        let s = (w * h) as f64 / area;
        s >= cfg.scale.0 - 1e-12 && s <= cfg.scale.1 + 1e-12
    };
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.scale.0, cfg.scale.1);
        let ratio = uniform(rng, lr0, lr1).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height && in_range(w, h) {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return Ok(BBox::new(x as f64, y as f64, w as f64, h as f64));
        }
    }
    // Centered fallback with the mid-range scale; the aspect ratio gives way
    // when the source is too elongated to honour both.
    let target = 0.5 * (cfg.scale.0 + cfg.scale.1) * area;
    let h = (target.sqrt().round() as usize).clamp(1, height);
    let w = ((target / h as f64).round() as usize).clamp(1, width);
    let (w, h) = if in_range(w, h) {
        (w, h)
    } else {
        (1..=width)
            .flat_map(|w| (1..=height).map(move |h| (w, h)))
            .filter(|&(w, h)| in_range(w, h))
            .min_by(|a, b| {
                let d = |(w, h): (usize, usize)| ((w * h) as f64 - target).abs();
                d(*a).total_cmp(&d(*b))
            })
            .ok_or_else(|| {
                Error::Geometry(format!(
                    "cannot fit a crop with scale in [{}, {}] into {height}x{width}",
                    cfg.scale.0, cfg.scale.1
                ))
            })?
    };
    Ok(BBox::new(((width - w) / 2) as f64, ((height - h) / 2) as f64, w as f64, h as f64))
}

fn check_crop(image: &Image, crop: &BBox) -> Result<()> {
    let bounds = BBox::new(0.0, 0.0, image.width as f64, image.height as f64);
    if crop.w < 1.0 || crop.h < 1.0 || !bounds.contains(crop, 1e-9) {
        return Err(Error::Geometry(format!(
            "crop {crop:?} exceeds {}x{} image",
            image.height, image.width
        )));
    }
    Ok(())
}

/// Crops, resizes (bilinear, half-pixel centers), flips and jitters.
pub fn apply_view(image: &Image, p: &ViewParams) -> Result<Image> {
    check_crop(image, &p.crop)?;
    if p.output_size == 0 {
        return Err(Error::Geometry("output size must be >= 1".into()));
    }
    let s = p.output_size;
    let taps = |origin: f64, extent: f64, limit: usize| -> Vec<(usize, usize, f32)> {
        (0..s)
            .map(|o| {
                let src = (origin + (o as f64 + 0.5) * extent / s as f64 - 0.5).clamp(0.0, (limit - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let tx = taps(p.crop.x, p.crop.w, image.width);
    let ty = taps(p.crop.y, p.crop.h, image.height);
    let mut out = Image::from_fn(s, s, |r, c| {
        let (y0, y1, fy) = ty[r];
        let (x0, x1, fx) = tx[c];
        let top = image.get(y0, x0) * (1.0 - fx) + image.get(y0, x1) * fx;
        let bot = image.get(y1, x0) * (1.0 - fx) + image.get(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    });
    if p.hflip {
        out = out.hflip();
    }
    apply_photometric(&mut out, &p.photometric);
    Ok(out)
}

fn apply_photometric(img: &mut Image, ph: &Photometric) {
    if *ph == Photometric::IDENTITY {
        return;
    }
    if ph.brightness != 1.0 {
        let b = ph.brightness as f32;
        img.data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if ph.contrast != 1.0 {
        let c = ph.contrast as f32;
        let mean = img.mean();
        img.data.iter_mut().for_each(|v| *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0));
    }
    if ph.blur_sigma > 0.0 {
        gaussian_blur(img, ph.blur_sigma);
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &mut Image, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let kernel: Vec<f32> = {
        let raw: Vec<f64> =
            (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|v| (v / z) as f32).collect()
    };
    let (h, w) = (img.height as isize, img.width as isize);
    let clamp = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let horiz = Image::from_fn(img.height, img.width, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * img.get(r, clamp(c as isize + k as isize - radius, w)))
            .sum()
    });
    *img = Image::from_fn(img.height, img.width, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * horiz.get(clamp(r as isize + k as isize - radius, h), c))
            .sum()
    });
}

/// Axis-aligned intersection of the two crops. Fails with
/// [`Error::NoOverlap`] when empty or narrower than `min_side` on either axis.
pub fn intersection_region(p1: &ViewParams, p2: &ViewParams, min_side: f64) -> Result<BBox> {
    let (a, b) = (&p1.crop, &p2.crop);
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = a.right().min(b.right());
    let y1 = a.bottom().min(b.bottom());
    let (w, h) = (x1 - x0, y1 - y0);
    if w <= 0.0 || h <= 0.0 || w < min_side || h < min_side {
        return Err(Error::NoOverlap);
    }
    Ok(BBox::new(x0, y0, w, h))
}

/// `k` boxes uniformly placed in `region` with sides in
/// `[min_side, region side]`.
pub fn sample_boxes(region: &BBox, k: usize, min_side: f64, rng: &mut impl Rng) -> Result<BoxSet> {
    if k == 0 {
        return Err(Error::Degenerate("number of boxes must be >= 1".into()));
    }
    if region.w < min_side || region.h < min_side || region.w <= 0.0 || region.h <= 0.0 {
        return Err(Error::DegenerateRegion { w: region.w, h: region.h, min_side });
    }
    let boxes = (0..k)
        .map(|_| {
            let w = uniform(rng, min_side.max(0.0).min(region.w), region.w);
            let h = uniform(rng, min_side.max(0.0).min(region.h), region.h);
            let x = region.x + uniform(rng, 0.0, region.w - w);
            let y = region.y + uniform(rng, 0.0, region.h - h);
            BBox::new(x, y, w, h)
        })
        .collect();
    Ok(BoxSet { boxes })
}

/// Source-frame box to view-pixel frame.
pub fn map_box_to_view(b: &BBox, p: &ViewParams) -> BBox {
    let s = p.output_size as f64;
    let (sx, sy) = (s / p.crop.w, s / p.crop.h);
    let mut out = BBox::new((b.x - p.crop.x) * sx, (b.y - p.crop.y) * sy, b.w * sx, b.h * sy);
    if p.hflip {
        out.x = s - out.x - out.w;
    }
    out
}

/// Inverse of [`map_box_to_view`].
pub fn map_box_from_view(b: &BBox, p: &ViewParams) -> BBox {
    let s = p.output_size as f64;
    let (sx, sy) = (p.crop.w / s, p.crop.h / s);
    let x = if p.hflip { s - b.x - b.w } else { b.x };
    BBox::new(x * sx + p.crop.x, b.y * sy + p.crop.y, b.w * sx, b.h * sy)
}

/// View-pixel box to feature-cell frame of a map downsampled by `stride`.
///
/// # Panics
/// If `stride` is zero.
pub fn box_to_feature_coords(b: &BBox, stride: usize) -> BBox {
    assert!(stride >= 1, "stride must be >= 1");
    let s = stride as f64;
    BBox::new(b.x / s, b.y / s, b.w / s, b.h / s)
}

/// Two views of one image with their shared region.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub first: ViewParams,
    pub second: ViewParams,
    pub overlap: BBox,
    /// Both crops were replaced by the same center crop.
    pub fell_back: bool,
}

/// Samples two views whose crops share at least `min_side x min_side`
/// source pixels: up to ten resamples, then identical center crops.
pub fn sample_view_pair(
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    src: (usize, usize),
    min_side: f64,
) -> Result<ViewPair> {
    let mut last = None;
    for _ in 0..11 {
        let first = sample_view_params(rng, cfg, src)?;
        let second = sample_view_params(rng, cfg, src)?;
        match intersection_region(&first, &second, min_side) {
            Ok(overlap) => return Ok(ViewPair { first, second, overlap, fell_back: false }),
            Err(Error::NoOverlap) => last = Some((first, second)),
            Err(e) => return Err(e),
        }
    }
    let (mut first, mut second) = last.expect("at least one attempt");
    let (h, w) = src;
    let side = h.min(w);
    let crop = BBox::new(((w - side) / 2) as f64, ((h - side) / 2) as f64, side as f64, side as f64);
    first.crop = crop;
    second.crop = crop;
    if (side as f64) < min_side {
        return Err(Error::DegenerateRegion { w: side as f64, h: side as f64, min_side });
    }
    Ok(ViewPair { first, second, overlap: crop, fell_back: true })
}

/// Bilinear sampling taps of a 1x1 RoI-Align over an `h x w` grid: the mean
/// of 2x2 samples at the box's quarter positions. Boxes thinner than one
/// cell are widened to one cell about their center.
pub fn roi_taps(b: &BBox, height: usize, width: usize) -> Result<Vec<(usize, f64)>> {
    if height == 0 || width == 0 {
        return Err(Error::Geometry("empty feature map".into()));
    }
    let mut b = *b;
    if b.w < 1.0 {
        b.x += 0.5 * b.w - 0.5;
        b.w = 1.0;
    }
    if b.h < 1.0 {
        b.y += 0.5 * b.h - 0.5;
        b.h = 1.0;
    }
    if b.x >= width as f64 || b.right() <= 0.0 || b.y >= height as f64 || b.bottom() <= 0.0 {
        return Err(Error::Geometry(format!("box {b:?} outside {height}x{width} feature map")));
    }
    let axis = |origin: f64, extent: f64, limit: usize| -> [(usize, usize, f64); 2] {
        [0.25, 0.75].map(|q| {
            let u = (origin + q * extent - 0.5).clamp(0.0, (limit - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(limit - 1);
            (lo, hi, u - lo as f64)
        })
    };
    let xs = axis(b.x, b.w, width);
    let ys = axis(b.y, b.h, height);
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(16);
    let mut push = |idx: usize, wgt: f64| {
        if wgt == 0.0 {
            return;
        }
        match taps.iter_mut().find(|t| t.0 == idx) {
            Some(t) => t.1 += wgt,
            None => taps.push((idx, wgt)),
        }
    };
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            push(y0 * width + x0, 0.25 * (1.0 - fy) * (1.0 - fx));
            push(y0 * width + x1, 0.25 * (1.0 - fy) * fx);
            push(y1 * width + x0, 0.25 * fy * (1.0 - fx));
            push(y1 * width + x1, 0.25 * fy * fx);
        }
    }
    Ok(taps)
}

/// 1x1 RoI-Align of a `c x h x w` map; `b` in feature cells.
pub fn roi_align_1x1<T: Float>(fmap: &Tensor<T>, b: &BBox) -> Result<Vec<T>> {
    let (c, h, w) = match fmap.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Geometry(format!("expected a c x h x w map, got {s:?}"))),
    };
    let taps = roi_taps(b, h, w)?;
    Ok((0..c)
        .map(|ch| {
            let plane = &fmap.data()[ch * h * w..(ch + 1) * h * w];
            taps.iter().map(|&(i, wgt)| plane[i] * T::from_f64_lossy(wgt)).sum()
        })
        .collect())
}

/// Batched, differentiable 1x1 RoI-Align. `rois` pairs a batch index with a
/// feature-cell box; output is `[rois, c]`.
pub fn roi_align_batch<T: Float>(g: &mut Graph<T>, fmap: Var, rois: &[(usize, BBox)]) -> Result<Var> {
    let (_, _, h, w) = g.value(fmap).dims4()?;
    let rows = rois
        .iter()
        .map(|(batch, b)| Ok(GatherTaps { batch: *batch, taps: roi_taps(b, h, w)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.weighted_gather(fmap, rows)?)
}
