//! Patch discovery and loading, raster writing, batching, and a synthetic
//! speckled-scene generator with ground-truth masks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

const EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// Looks are clamped here; beyond it the speckle is numerically 1.
pub const MAX_LOOKS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchEntry {
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
}

/// Readable single-channel patches under one directory, in lexicographic
/// order, plus the files that were skipped and why.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchManifest {
    pub entries: Vec<PatchEntry>,
    pub skipped: Vec<(PathBuf, String)>,
}

impl PatchManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Common side length when every patch is the same square size.
    pub fn patch_size(&self) -> Option<usize> {
        let first = self.entries.first()?;
        self.entries
            .iter()
            .all(|e| e.height == first.height && e.width == first.height)
            .then_some(first.height)
    }

    /// `path<TAB>H<TAB>W` rows.
    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\t{}\n", e.path.display(), e.height, e.width)).collect()
    }
}

fn has_raster_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn sorted_rasters(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_raster_extension(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Where the manifest of `root` is cached: a sibling file.
pub fn manifest_cache_path(root: &Path) -> PathBuf {
    let abs = root.canonicalize().unwrap_or_else(|_| root.to_path_buf());
    let name = abs.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    abs.parent().unwrap_or(&abs).join(format!("{name}.manifest.tsv"))
}

/// Lists and validates every PNG/TIFF directly under `root`.
pub fn scan_dataset(root: &Path) -> Result<PatchManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", root.display())));
    }
    let mut manifest = PatchManifest { entries: Vec::new(), skipped: Vec::new() };
    for path in sorted_rasters(root)? {
        match load_patch(&path) {
            Ok(img) => manifest.entries.push(PatchEntry { path, height: img.height, width: img.width }),
            Err(e) => manifest.skipped.push((path, e.to_string())),
        }
    }
    if manifest.entries.is_empty() {
        return Err(Error::Data(format!(
            "no readable single-channel patches in {} ({} skipped)",
            root.display(),
            manifest.skipped.len()
        )));
    }
    Ok(manifest)
}

/// Writes the manifest cache beside `root`.
pub fn write_manifest_cache(root: &Path, manifest: &PatchManifest) -> Result<PathBuf> {
    let path = manifest_cache_path(root);
    write_atomic(&path, manifest.to_tsv().as_bytes())?;
    Ok(path)
}

/// Reads a single-channel 8- or 16-bit raster, scaled to `[0, 1]` by its
/// bit depth.
pub fn load_patch(path: &Path) -> Result<Image> {
    let codec = |msg: String| Error::Codec { path: path.to_path_buf(), msg };
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| codec(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => return Err(codec(format!("expected 8/16-bit grayscale, found {:?}", other.color()))),
    };
    Image::new(h, w, data)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::checkpoint::write_atomic(path, |w| w.write_all(bytes))
}

fn save_result(path: &Path, r: image::ImageResult<()>) -> Result<()> {
    r.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec { path: path.to_path_buf(), msg: other.to_string() },
    })
}

/// Saves an image as 16-bit grayscale (format from the extension).
pub fn save_image16(path: &Path, img: &Image) -> Result<()> {
    let data: Vec<u16> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, data)
        .expect("buffer matches dimensions");
    save_result(path, buf.save(path))
}

/// Saves an image as 8-bit grayscale.
pub fn save_image8(path: &Path, img: &Image) -> Result<()> {
    let data: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    save_gray8(path, img.height, img.width, data)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    save_gray8(path, mask.height, mask.width, mask.data.clone())
}

fn save_gray8(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<()> {
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, data)
        .expect("buffer matches dimensions");
    save_result(path, buf.save(path))
}

pub fn save_rgb(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<()> {
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, data)
        .expect("buffer matches dimensions");
    save_result(path, buf.save(path))
}

/// Reads an 8-bit label raster.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Codec { path: path.to_path_buf(), msg: e.to_string() })?;
    match img {
        DynamicImage::ImageLuma8(b) => Mask::new(b.height() as usize, b.width() as usize, b.into_raw()),
        other => Err(Error::Codec {
            path: path.to_path_buf(),
            msg: format!("label rasters must be 8-bit grayscale, found {:?}", other.color()),
        }),
    }
}

/// Paired images and masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Image, mask: Mask) {
        self.images.push(image);
        self.masks.push(mask);
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

/// Loads `root/images/*` with the same-named files from `root/masks/`.
pub fn load_labeled_dir(root: &Path) -> Result<LabeledSet> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    if !img_dir.is_dir() || !mask_dir.is_dir() {
        return Err(Error::Data(format!("{} must contain images/ and masks/ directories", root.display())));
    }
    let mut set = LabeledSet::default();
    for path in sorted_rasters(&img_dir)? {
        let mask_path = mask_dir.join(path.file_name().expect("file has a name"));
        if !mask_path.is_file() {
            return Err(Error::Data(format!("no mask for {} in {}", path.display(), mask_dir.display())));
        }
        let (img, mask) = (load_patch(&path)?, load_mask(&mask_path)?);
        if (img.height, img.width) != (mask.height, mask.width) {
            return Err(Error::Data(format!("{} and its mask differ in size", path.display())));
        }
        set.push(img, mask);
    }
    if set.is_empty() {
        return Err(Error::Data(format!("no labeled patches in {}", img_dir.display())));
    }
    Ok(set)
}

/// Writes `images/NNNNNN.png` (16-bit) and `masks/NNNNNN.png`.
pub fn write_labeled_dir(root: &Path, set: &LabeledSet) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, (img, mask)) in set.images.iter().zip(&set.masks).enumerate() {
        let name = format!("{i:06}.png");
        save_image16(&img_dir.join(&name), img)?;
        save_mask(&mask_dir.join(&name), mask)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub scene_size: usize,
    pub n_classes: usize,
    pub region_count: usize,
    /// Gamma shape of the unit-mean speckle.
    pub speckle_looks: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { scene_size: 256, n_classes: 4, region_count: 24, speckle_looks: 4.0, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scene_size < 8 {
            return Err(Error::Config(format!("synth.scene_size must be >= 8, got {}", self.scene_size)));
        }
        if !(2..=254).contains(&self.n_classes) {
            return Err(Error::Config(format!("synth.n_classes must lie in [2, 254], got {}", self.n_classes)));
        }
        if self.region_count < self.n_classes {
            return Err(Error::Config(format!(
                "synth.region_count ({}) must be >= synth.n_classes ({})",
                self.region_count, self.n_classes
            )));
        }
        if self.region_count > self.scene_size * self.scene_size {
            return Err(Error::Config("synth.region_count exceeds the number of pixels".into()));
        }
        if !(self.speckle_looks > 0.0) {
            return Err(Error::Config(format!("synth.speckle_looks must be > 0, got {}", self.speckle_looks)));
        }
        Ok(())
    }
}

/// Mean reflectivity per class: class 0 is the dark water-like class, the
/// last class the bright road-like class.
pub fn class_means(n_classes: usize) -> Vec<f32> {
    (0..n_classes)
        .map(|c| match c {
            0 => 0.05,
            c if c == n_classes - 1 => 0.40,
            _ if n_classes == 3 => 0.20,
            c => 0.12 + 0.20 * (c - 1) as f32 / (n_classes - 3) as f32,
        })
        .collect()
}

/// Noise-free reflectivity and class map.
pub fn synth_clean(cfg: &SynthConfig) -> Result<(Image, Mask)> {
    cfg.validate()?;
    let n = cfg.scene_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // distinct seed pixels
    let mut seeds: Vec<(usize, usize)> = Vec::with_capacity(cfg.region_count);
    while seeds.len() < cfg.region_count {
        let s = (rng.random_range(0..n), rng.random_range(0..n));
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    // the first n_classes regions cover every class once
    let mut region_class: Vec<u8> = (0..cfg.n_classes as u8).collect();
    region_class.shuffle(&mut rng);
    region_class.extend((cfg.n_classes..cfg.region_count).map(|_| rng.random_range(0..cfg.n_classes) as u8));

    let mut mask = Mask::from_fn(n, n, |r, c| {
        let nearest = seeds
            .iter()
            .enumerate()
            .min_by_key(|(_, &(sr, sc))| {
                let (dr, dc) = (sr as isize - r as isize, sc as isize - c as isize);
                dr * dr + dc * dc
            })
            .map(|(i, _)| i)
            .expect("at least one seed");
        region_class[nearest]
    });
    let protected: Vec<(usize, usize)> = seeds[..cfg.n_classes].to_vec();
    let paint = |mask: &mut Mask, r: isize, c: isize, class: u8| {
        if r >= 0 && c >= 0 && (r as usize) < n && (c as usize) < n && !protected.contains(&(r as usize, c as usize)) {
            mask.set(r as usize, c as usize, class);
        }
    };

    // dark blobs with wobbly outlines
    let water = 0u8;
    let blobs = (n / 256).max(1);
    for _ in 0..blobs {
        let (cy, cx) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let radius = rng.random_range(0.04..0.10) * n as f64;
        let harmonics: Vec<(f64, f64, f64)> = (2..5)
            .map(|k| (k as f64, rng.random_range(0.0..0.25), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let reach = (radius * 1.8).ceil() as isize;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (y, x) = (cy + dr as f64, cx + dc as f64);
                let (dy, dx) = (y - cy, x - cx);
                let angle = dy.atan2(dx);
                let wobble: f64 = harmonics.iter().map(|(k, a, ph)| a * (k * angle + ph).sin()).sum();
                if (dy * dy + dx * dx).sqrt() <= radius * (1.0 + wobble) {
                    paint(&mut mask, y.floor() as isize, x.floor() as isize, water);
                }
            }
        }
    }

    // bright curvilinear roads: smooth random walks entering from an edge
    let road = (cfg.n_classes - 1) as u8;
    let half_width = (n / 256).max(1) as isize;
    let turn = Normal::new(0.0, 0.04).expect("valid normal");
    for _ in 0..(n / 128).max(1) {
        let (mut y, mut x, mut heading) = match rng.random_range(0..4) {
            0 => (0.0, rng.random_range(0.0..n as f64), std::f64::consts::FRAC_PI_2),
            1 => (n as f64 - 1.0, rng.random_range(0.0..n as f64), -std::f64::consts::FRAC_PI_2),
            2 => (rng.random_range(0.0..n as f64), 0.0, 0.0),
            _ => (rng.random_range(0.0..n as f64), n as f64 - 1.0, std::f64::consts::PI),
        };
        heading += rng.random_range(-0.5..0.5);
        for _ in 0..(2 * n) {
            for dr in -half_width..half_width {
                for dc in -half_width..half_width {
                    paint(&mut mask, y as isize + dr, x as isize + dc, road);
                }
            }
            heading += turn.sample(&mut rng);
            y += heading.sin();
            x += heading.cos();
            if y < -1.0 || x < -1.0 || y > n as f64 || x > n as f64 {
                break;
            }
        }
    }

    let means = class_means(cfg.n_classes);
    let image = Image::from_fn(n, n, |r, c| means[mask.get(r, c) as usize]);
    Ok((image, mask))
}

/// Speckled scene and its class mask; deterministic under `cfg.seed`.
pub fn synth_scene(cfg: &SynthConfig) -> Result<(Image, Mask)> {
    let (mut image, mask) = synth_clean(cfg)?;
    let looks = cfg.speckle_looks.min(MAX_LOOKS);
    let gamma = Gamma::new(looks, 1.0 / looks).map_err(|e| Error::Config(format!("speckle: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5bec_c1e5);
    for v in image.data.iter_mut() {
        *v = (*v as f64 * gamma.sample(&mut rng)).min(1.0) as f32;
    }
    Ok((image, mask))
}

/// Cuts `count` non-overlapping `patch x patch` tiles out of consecutive
/// synthetic scenes (seeds `cfg.seed`, `cfg.seed + 1`, ...).
pub fn synth_patches(cfg: &SynthConfig, patch: usize, count: usize) -> Result<LabeledSet> {
    if patch == 0 || patch > cfg.scene_size {
        return Err(Error::Config(format!("patch size {patch} must lie in [1, synth.scene_size]")));
    }
    let per_side = cfg.scene_size / patch;
    let mut set = LabeledSet::default();
    let mut seed = cfg.seed;
    while set.len() < count {
        let (img, mask) = synth_scene(&SynthConfig { seed, ..cfg.clone() })?;
        for i in 0..per_side * per_side {
            if set.len() == count {
                break;
            }
            let (r, c) = ((i / per_side) * patch, (i % per_side) * patch);
            set.push(img.window(r, c, patch, patch)?, mask.window(r, c, patch, patch)?);
        }
        seed = seed.wrapping_add(1);
    }
    Ok(set)
}

/// Random permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Splits an index order into batches; `drop_last` discards a trailing
/// partial batch.
pub fn make_batches(order: &[usize], batch_size: usize, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_gray8(path: &Path, h: u32, w: u32, v: u8) {
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, vec![v; (h * w) as usize]).unwrap().save(path).unwrap();
    }

    #[test]
    fn scan_lists_valid_patches_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("patches");
        fs::create_dir(&root).unwrap();
        for name in ["c.png", "a.png", "b.tif"] {
            write_gray8(&root.join(name), 4, 5, 7);
        }
        fs::write(root.join("notes.txt"), "x").unwrap();
        let m = scan_dataset(&root).unwrap();
        let names: Vec<_> = m.entries.iter().map(|e| e.path.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, ["a.png", "b.tif", "c.png"]);
        assert_eq!((m.entries[0].height, m.entries[0].width), (4, 5));
        assert_eq!(m, scan_dataset(&root).unwrap());
        let cache = write_manifest_cache(&root, &m).unwrap();
        assert_eq!(cache, dir.path().canonicalize().unwrap().join("patches.manifest.tsv"));
        assert_eq!(fs::read_to_string(cache).unwrap().lines().count(), 3);
    }

    #[test]
    fn scan_skips_corrupt_and_color_files() {
        let dir = tempfile::tempdir().unwrap();
        write_gray8(&dir.path().join("ok.png"), 3, 3, 0);
        fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        ImageBuffer::<Rgb<u8>, _>::from_raw(2, 2, vec![0u8; 12]).unwrap().save(dir.path().join("rgb.png")).unwrap();
        let m = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.skipped.len(), 2);
    }

    #[test]
    fn scan_rejects_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_dataset(dir.path()), Err(Error::Data(_))));
        assert!(matches!(scan_dataset(&dir.path().join("nope")), Err(Error::Data(_))));
    }

    #[test]
    fn load_scales_by_bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let zero = dir.path().join("z.png");
        write_gray8(&zero, 2, 2, 0);
        assert!(load_patch(&zero).unwrap().data.iter().all(|&v| v == 0.0));
        let full = dir.path().join("f.png");
        write_gray8(&full, 2, 2, 255);
        assert!(load_patch(&full).unwrap().data.iter().all(|&v| v == 1.0));
        let half = dir.path().join("h.tif");
        ImageBuffer::<Luma<u16>, _>::from_raw(1, 1, vec![32768u16]).unwrap().save(&half).unwrap();
        let v = load_patch(&half).unwrap().data[0];
        assert!((v - 32768.0 / 65535.0).abs() < 1e-7);
        assert!(matches!(load_patch(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn image16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 4, |r, c| (r * 4 + c) as f32 / 11.0);
        let p = dir.path().join("x.png");
        save_image16(&p, &img).unwrap();
        let back = load_patch(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn labeled_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_patches(&SynthConfig { scene_size: 32, ..SynthConfig::default() }, 16, 5).unwrap();
        write_labeled_dir(dir.path(), &set).unwrap();
        let back = load_labeled_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.masks, set.masks);
    }

    #[test]
    fn region_count_below_classes_is_config_error() {
        let cfg = SynthConfig { n_classes: 5, region_count: 3, ..SynthConfig::default() };
        assert!(matches!(synth_scene(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig { scene_size: 64, seed: 9, ..SynthConfig::default() };
        assert_eq!(synth_scene(&cfg).unwrap(), synth_scene(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg.clone() };
        assert_ne!(synth_scene(&cfg).unwrap().0, synth_scene(&other).unwrap().0);
    }

    #[test]
    fn noiseless_limit_is_piecewise_constant() {
        let cfg = SynthConfig { scene_size: 64, speckle_looks: 1e9, ..SynthConfig::default() };
        let (img, mask) = synth_scene(&cfg).unwrap();
        let means = class_means(cfg.n_classes);
        for (v, &m) in img.data.iter().zip(&mask.data) {
            assert!((v - means[m as usize]).abs() < 1e-2);
        }
    }

    #[test]
    fn clean_image_is_aligned_with_mask() {
        let cfg = SynthConfig { scene_size: 96, n_classes: 5, region_count: 20, ..SynthConfig::default() };
        let (img, mask) = synth_clean(&cfg).unwrap();
        let means = class_means(5);
        assert!(img.data.iter().zip(&mask.data).all(|(&v, &m)| v == means[m as usize]));
        let mut distinct = means.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn speckle_has_gamma_statistics() {
        let cfg = SynthConfig { scene_size: 256, n_classes: 2, region_count: 2, speckle_looks: 4.0, seed: 3 };
        let (img, mask) = synth_scene(&cfg).unwrap();
        // dark class stays far from the clamp
        let vals: Vec<f64> =
            img.data.iter().zip(&mask.data).filter(|(_, &m)| m == 0).map(|(&v, _)| v as f64).collect();
        assert!(vals.len() >= 10_000, "{}", vals.len());
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let cv = var.sqrt() / mean;
        assert!((cv - 0.5).abs() < 0.05, "cv {cv}");
    }

    #[test]
    fn masks_cover_every_class() {
        for seed in 0..100 {
            let cfg = SynthConfig { scene_size: 48, n_classes: 4, region_count: 16, speckle_looks: 4.0, seed };
            let (_, mask) = synth_clean(&cfg).unwrap();
            for c in 0..4u8 {
                assert!(mask.data.contains(&c), "seed {seed} misses class {c}");
            }
        }
    }

    #[test]
    fn batching_examples() {
        let order: Vec<usize> = (0..10).collect();
        let b = make_batches(&order, 4, true).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4]);
        assert_eq!(make_batches(&order, 4, false).unwrap().len(), 3);
        assert_eq!(make_batches(&order, 1, true).unwrap().len(), 10);
        let s1 = shuffled(10, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(s1, shuffled(10, &mut ChaCha8Rng::seed_from_u64(5)));
        let mut sorted = s1.clone();
        sorted.sort();
        assert_eq!(sorted, order);
    }
}
