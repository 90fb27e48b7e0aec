//! Procedural stand-in for stained whole-slide images.
//!
//! A slide is a warped Voronoi mosaic whose cells carry one of the seven
//! tissue classes. Cell classes are drawn with a running area quota so that
//! realized pixel frequencies track the requested ones, boundaries are
//! smoothed by a majority filter, and each class is rendered as a base color
//! with cell tint, nuclei-like dark speckles, Gaussian noise and some color
//! bleed from neighboring classes.

use std::collections::HashSet;
use std::path::Path;

use candle_core::{DType, Device};
use image::{Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classes::{validate_freqs, ClassId, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor_file::{TensorFile, TensorRecord};
use crate::tiling::{
    class_counts, crop_padded, dominant_class, split_into_regions, split_labels_into_regions,
    LabelMap, ProbMask, PAD_LABEL, PAD_RGB,
};

/// Pixels whose channels are all at least this bright count as glass.
pub const NEAR_WHITE_MIN: u8 = 235;
/// Tiles with at least this fraction of near-white pixels are dropped.
pub const TISSUE_FILTER_FRACTION: f64 = 0.95;

/// Base RGB color per class for the target texture family.
const BASE_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [226.0, 212.0, 222.0], // BG
    [118.0, 62.0, 150.0],  // VT
    [218.0, 128.0, 168.0], // NC
    [196.0, 150.0, 204.0], // FH
    [196.0, 62.0, 82.0],   // HC
    [92.0, 74.0, 168.0],   // IF
    [226.0, 176.0, 150.0], // NT
];

/// Probability that a pixel is a dark nucleus speckle, per class.
const NUCLEI_DENSITY: [f64; NUM_CLASSES] = [0.01, 0.22, 0.04, 0.06, 0.02, 0.35, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureParams {
    /// Offset added to every base color.
    pub palette_shift: [f64; 3],
    /// Per-pixel Gaussian noise, per channel.
    pub speckle_sigma: f64,
    /// Per-cell color jitter, per channel.
    pub tint_sigma: f64,
    /// Multiplier on the class nuclei densities.
    pub nuclei_scale: f64,
    /// Probability that a pixel is rendered with the class found at a random
    /// offset within `bleed_radius`.
    pub bleed: f64,
    pub bleed_radius: usize,
}

impl TextureParams {
    /// Texture family of the slides the pipeline segments.
    pub fn target() -> Self {
        Self {
            palette_shift: [0.0, 0.0, 0.0],
            speckle_sigma: 30.0,
            tint_sigma: 10.0,
            nuclei_scale: 1.0,
            bleed: 0.1,
            bleed_radius: 4,
        }
    }

    /// Shifted family used to pretrain the frozen classifier base.
    pub fn source() -> Self {
        Self {
            palette_shift: [16.0, -10.0, 12.0],
            speckle_sigma: 22.0,
            tint_sigma: 6.0,
            nuclei_scale: 0.7,
            bleed: 0.1,
            bleed_radius: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    /// Side of the jittered seed grid; the cell count is area / side².
    pub cell_size: usize,
    /// Radius of the majority filter applied to the label map.
    pub smooth_radius: usize,
    /// Amplitude in pixels of the sinusoidal domain warp.
    pub warp_amplitude: f64,
    pub texture: TextureParams,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            cell_size: 64,
            smooth_radius: 3,
            warp_amplitude: 10.0,
            texture: TextureParams::target(),
        }
    }
}

/// A generated slide with its pixel-exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticWsi {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub seed: u64,
    pub class_freqs: [f64; NUM_CLASSES],
    pub realized_freqs: [f64; NUM_CLASSES],
}

impl SyntheticWsi {
    pub fn shape(&self) -> (usize, usize) {
        (self.image.height() as usize, self.image.width() as usize)
    }
}

// RNG streams, so one stage can change without perturbing the others.
const STREAM_LAYOUT: u64 = 1;
const STREAM_CLASSES: u64 = 2;
const STREAM_TEXTURE: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates a slide with the default (target) texture family.
pub fn generate_wsi(
    seed: u64,
    height: usize,
    width: usize,
    class_freqs: &[f64],
) -> Result<SyntheticWsi> {
    generate_wsi_with(
        seed,
        height,
        width,
        class_freqs,
        &GeneratorParams::default(),
    )
}

pub fn generate_wsi_with(
    seed: u64,
    height: usize,
    width: usize,
    class_freqs: &[f64],
    params: &GeneratorParams,
) -> Result<SyntheticWsi> {
    validate_freqs(class_freqs)?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidGeometry(format!(
            "slide dimensions {height}x{width}"
        )));
    }
    if params.cell_size == 0 {
        return Err(Error::InvalidGeometry("cell size must be positive".into()));
    }
    let freqs: [f64; NUM_CLASSES] = class_freqs.try_into().expect("length validated");

    let (cells, n_cells) = voronoi_cells(seed, height, width, params);
    let cell_classes = assign_cell_classes(seed, &cells, n_cells, &freqs);
    let raw: Vec<u8> = cells.iter().map(|&c| cell_classes[c as usize]).collect();
    let labels = majority_filter(&raw, height, width, params.smooth_radius);
    let labels = LabelMap::from_raw(width as u32, height as u32, labels).expect("sized buffer");
    let image = render(seed, &labels, &cells, n_cells, &params.texture);

    let counts = class_counts(&labels)?;
    let total = (height * width) as f64;
    let realized_freqs = counts.map(|c| c as f64 / total);
    Ok(SyntheticWsi {
        image,
        labels,
        seed,
        class_freqs: freqs,
        realized_freqs,
    })
}

/// Nearest-seed partition of a domain-warped jittered grid.
fn voronoi_cells(seed: u64, h: usize, w: usize, params: &GeneratorParams) -> (Vec<u32>, usize) {
    let mut rng = rng_for(seed, STREAM_LAYOUT);
    let s = params.cell_size as f64;
    let rows = h.div_ceil(params.cell_size);
    let cols = w.div_ceil(params.cell_size);
    let seeds: Vec<(f64, f64)> = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            (s * (r + rng.random::<f64>()), s * (c + rng.random::<f64>()))
        })
        .collect();
    let two_pi = std::f64::consts::TAU;
    let phases: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * two_pi);
    let wavelength = 1.5 * s;
    let amp = params.warp_amplitude;

    let mut cells = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let wy = yf
                + amp * ((xf / wavelength) * two_pi / 2.0 + phases[0]).sin()
                + 0.5 * amp * ((yf / (0.5 * wavelength)) * two_pi / 2.0 + phases[1]).sin();
            let wx = xf
                + amp * ((yf / wavelength) * two_pi / 2.0 + phases[2]).sin()
                + 0.5 * amp * ((xf / (0.5 * wavelength)) * two_pi / 2.0 + phases[3]).sin();
            let gr = ((wy / s).floor() as isize).clamp(0, rows as isize - 1);
            let gc = ((wx / s).floor() as isize).clamp(0, cols as isize - 1);
            let mut best = (f64::INFINITY, 0usize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (r, c) = (gr + dr, gc + dc);
                    if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                        continue;
                    }
                    let i = r as usize * cols + c as usize;
                    let (sy, sx) = seeds[i];
                    let d = (sy - wy).powi(2) + (sx - wx).powi(2);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
            }
            cells[y * w + x] = best.1 as u32;
        }
    }
    (cells, rows * cols)
}

/// Draws a class per cell, weighting classes by their remaining area quota.
fn assign_cell_classes(
    seed: u64,
    cells: &[u32],
    n_cells: usize,
    freqs: &[f64; NUM_CLASSES],
) -> Vec<u8> {
    let mut rng = rng_for(seed, STREAM_CLASSES);
    let mut area = vec![0usize; n_cells];
    for &c in cells {
        area[c as usize] += 1;
    }
    let total = cells.len() as f64;
    let mut order: Vec<usize> = (0..n_cells).collect();
    order.shuffle(&mut rng);
    let mut assigned = [0f64; NUM_CLASSES];
    let mut classes = vec![0u8; n_cells];
    for cell in order {
        let deficit: [f64; NUM_CLASSES] =
            std::array::from_fn(|c| (freqs[c] * total - assigned[c]).max(0.0));
        let weights = if deficit.iter().sum::<f64>() > 0.0 {
            deficit
        } else {
            *freqs
        };
        let sum: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * sum;
        let mut pick = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        for (c, wgt) in weights.iter().enumerate() {
            if *wgt > 0.0 && u < *wgt {
                pick = c;
                break;
            }
            u -= wgt;
        }
        classes[cell] = pick as u8;
        assigned[pick] += area[cell] as f64;
    }
    classes
}

/// Mode filter over a `(2r+1)²` window. The center label wins ties it is part
/// of; other ties go to the lowest class id.
fn majority_filter(labels: &[u8], h: usize, w: usize, radius: usize) -> Vec<u8> {
    if radius == 0 {
        return labels.to_vec();
    }
    // per-class summed-area tables with a zero border
    let stride = w + 1;
    let mut tables = vec![vec![0u32; (h + 1) * stride]; NUM_CLASSES];
    for (c, table) in tables.iter_mut().enumerate() {
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += (labels[y * w + x] as usize == c) as u32;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let center = labels[y * w + x] as usize;
            let mut best = (0u32, center);
            let counts: [u32; NUM_CLASSES] = std::array::from_fn(|c| {
                let t = &tables[c];
                t[y1 * stride + x1] + t[y0 * stride + x0]
                    - t[y0 * stride + x1]
                    - t[y1 * stride + x0]
            });
            best.0 = counts[center];
            for (c, &n) in counts.iter().enumerate() {
                if n > best.0 {
                    best = (n, c);
                }
            }
            out[y * w + x] = best.1 as u8;
        }
    }
    out
}

fn render(
    seed: u64,
    labels: &LabelMap,
    cells: &[u32],
    n_cells: usize,
    tex: &TextureParams,
) -> RgbImage {
    let mut rng = rng_for(seed, STREAM_TEXTURE);
    let (w, h) = (labels.width() as usize, labels.height() as usize);
    let tint_dist = Normal::new(0.0, tex.tint_sigma.max(1e-12)).expect("finite sigma");
    let speckle = Normal::new(0.0, tex.speckle_sigma.max(1e-12)).expect("finite sigma");
    let tints: Vec<[f64; 3]> = (0..n_cells)
        .map(|_| std::array::from_fn(|_| tint_dist.sample(&mut rng)))
        .collect();
    let raw = labels.as_raw();
    let radius = tex.bleed_radius as i64;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut class = raw[y * w + x] as usize;
            if radius > 0 && rng.random::<f64>() < tex.bleed {
                let dy = rng.random_range(-radius..=radius);
                let dx = rng.random_range(-radius..=radius);
                let (sy, sx) = (y as i64 + dy, x as i64 + dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    class = raw[sy as usize * w + sx as usize] as usize;
                }
            }
            let tint = tints[cells[y * w + x] as usize];
            let nucleus = rng.random::<f64>() < NUCLEI_DENSITY[class] * tex.nuclei_scale;
            let px: [u8; 3] = std::array::from_fn(|ch| {
                let mut v = BASE_COLORS[class][ch] + tex.palette_shift[ch] + tint[ch];
                if nucleus {
                    v *= 0.55;
                }
                v += speckle.sample(&mut rng);
                v.round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Fractions of (train, valid, test).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions(pub [f64; 3]);

impl Default for SplitFractions {
    fn default() -> Self {
        Self([0.8, 0.1, 0.1])
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.0.iter().sum();
        if self.0.iter().any(|f| !(0.0..=1.0).contains(f)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

fn coord_hash(seed: u64, wsi_seed: u64, row: usize, col: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in [seed, wsi_seed, row as u64, col as u64] {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Orders items by a seeded hash of their coordinates and cuts the order at
/// the requested fractions.
fn assign_splits(
    keys: &[(usize, usize)],
    wsi_seed: u64,
    seed: u64,
    fr: SplitFractions,
) -> Vec<Split> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| coord_hash(seed, wsi_seed, keys[i].0, keys[i].1));
    let n = keys.len();
    let n_train = (fr.0[0] * n as f64).round() as usize;
    let n_valid = ((fr.0[1] * n as f64).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    splits
}

#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub row: usize,
    pub col: usize,
    pub label: ClassId,
    pub split: Split,
    pub image: RgbImage,
}

#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub patch_size: usize,
    /// Tiles in the padded slide before tissue filtering.
    pub candidates: usize,
    pub records: Vec<PatchRecord>,
}

fn is_mostly_glass(tile: &RgbImage) -> bool {
    let white = tile
        .pixels()
        .filter(|p| p.0.iter().all(|&v| v >= NEAR_WHITE_MIN))
        .count();
    white as f64 >= TISSUE_FILTER_FRACTION * (tile.width() * tile.height()) as f64
}

/// Tiles the slide into `patch_size` squares labeled by their dominant class,
/// drops glass tiles and assigns seeded, disjoint splits.
pub fn derive_patch_dataset(
    wsi: &SyntheticWsi,
    patch_size: usize,
    splits: SplitFractions,
    split_seed: u64,
) -> Result<PatchDataset> {
    splits.validate()?;
    let (h, w) = wsi.shape();
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::InvalidGeometry(format!(
            "patch size {patch_size} does not fit a {h}x{w} slide"
        )));
    }
    let shape = (patch_size, patch_size);
    let (grid, tiles) = split_into_regions(&wsi.image, shape)?;
    let (_, label_tiles) = split_labels_into_regions(&wsi.labels, shape)?;
    let kept: Vec<usize> = (0..grid.n_regions)
        .filter(|&i| !is_mostly_glass(&tiles[i]))
        .collect();
    let keys: Vec<_> = kept.iter().map(|&i| grid.coords[i]).collect();
    let split_of = assign_splits(&keys, wsi.seed, split_seed, splits);
    let records = kept
        .iter()
        .zip(split_of)
        .map(|(&i, split)| {
            Ok(PatchRecord {
                row: grid.coords[i].0,
                col: grid.coords[i].1,
                label: dominant_class(&label_tiles[i])?,
                split,
                image: tiles[i].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchDataset {
        patch_size,
        candidates: grid.n_regions,
        records,
    })
}

#[derive(Debug, Clone)]
pub struct RegionRecord {
    pub row: usize,
    pub col: usize,
    pub split: Split,
    pub image: RgbImage,
    pub labels: LabelMap,
}

impl RegionRecord {
    /// One-hot ground-truth mask of shape `(C, h, w)`.
    pub fn mask(&self) -> Result<ProbMask> {
        ProbMask::one_hot(&self.labels, DType::F32, &Device::Cpu)
    }
}

/// Returns `k` such that `region_size = patch_size · 2^k`, `k ≥ 1`.
pub fn region_exponent(region_size: usize, patch_size: usize) -> Result<u32> {
    if patch_size == 0 || region_size <= patch_size || !region_size.is_multiple_of(patch_size) {
        return Err(Error::InvalidGeometry(format!(
            "region {region_size} is not patch {patch_size} times a power of two"
        )));
    }
    let ratio = region_size / patch_size;
    if !ratio.is_power_of_two() {
        return Err(Error::InvalidGeometry(format!(
            "region {region_size} is not patch {patch_size} times a power of two"
        )));
    }
    Ok(ratio.trailing_zeros())
}

/// Cuts the slide into regions carrying their pixel-exact ground truth.
pub fn derive_region_dataset(
    wsi: &SyntheticWsi,
    region_size: usize,
    patch_size: usize,
    splits: SplitFractions,
    split_seed: u64,
) -> Result<Vec<RegionRecord>> {
    region_exponent(region_size, patch_size)?;
    splits.validate()?;
    let shape = (region_size, region_size);
    let (grid, images) = split_into_regions(&wsi.image, shape)?;
    let (_, labels) = split_labels_into_regions(&wsi.labels, shape)?;
    let split_of = assign_splits(&grid.coords, wsi.seed, split_seed ^ 0x5eed_0f_4e61, splits);
    Ok(grid
        .coords
        .iter()
        .zip(images.into_iter().zip(labels))
        .zip(split_of)
        .map(|((&(row, col), (image, labels)), split)| RegionRecord {
            row,
            col,
            split,
            image,
            labels,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Patch,
    Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestGeometry {
    pub height: usize,
    pub width: usize,
    pub region: (usize, usize),
    pub patch: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub split: Split,
    /// Slide identifier the item was cut from.
    pub wsi: String,
    /// Image path relative to the manifest directory.
    pub image: String,
    /// Dominant class, for patch items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    /// One-hot mask container path, for region items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: DatasetKind,
    pub geometry: ManifestGeometry,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Checks that every referenced file exists under `base` and that each
    /// `(wsi, row, col)` appears in exactly one split.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert((item.wsi.as_str(), item.row, item.col)) {
                return Err(Error::InvalidArgument(format!(
                    "{} lists ({}, {}, {}) twice",
                    self.name, item.wsi, item.row, item.col
                )));
            }
            for rel in std::iter::once(&item.image).chain(item.mask.as_ref()) {
                let p = base.join(rel);
                if !p.exists() {
                    return Err(Error::MissingArtifact(p));
                }
            }
        }
        Ok(())
    }
}

/// Writes patch tiles as PNG under `base/<wsi>/` and returns their items.
pub fn write_patch_items(
    base: &Path,
    wsi_name: &str,
    ds: &PatchDataset,
) -> Result<Vec<ManifestItem>> {
    let dir = base.join(wsi_name);
    std::fs::create_dir_all(&dir)?;
    ds.records
        .iter()
        .map(|rec| {
            let rel = format!("{wsi_name}/p_{:05}_{:05}.png", rec.row, rec.col);
            rec.image.save(base.join(&rel))?;
            Ok(ManifestItem {
                split: rec.split,
                wsi: wsi_name.to_string(),
                image: rel,
                label: Some(rec.label as u8),
                mask: None,
                row: rec.row,
                col: rec.col,
            })
        })
        .collect()
}

/// Writes region images (PNG), label rasters (PNG) and one-hot masks (tensor
/// container) under `base/<wsi>/` and returns their items.
pub fn write_region_items(
    base: &Path,
    wsi_name: &str,
    records: &[RegionRecord],
) -> Result<Vec<ManifestItem>> {
    let dir = base.join(wsi_name);
    std::fs::create_dir_all(&dir)?;
    records
        .iter()
        .map(|rec| {
            let stem = format!("{wsi_name}/r_{:05}_{:05}", rec.row, rec.col);
            let image = format!("{stem}.png");
            let mask = format!("{stem}_mask.tnsr");
            rec.image.save(base.join(&image))?;
            rec.labels.save(base.join(format!("{stem}_labels.png")))?;
            let mut file = TensorFile::new(serde_json::json!({"kind": "one-hot"}));
            file.push(TensorRecord::new("mask", rec.mask()?.into_values()));
            file.save(&base.join(&mask))?;
            Ok(ManifestItem {
                split: rec.split,
                wsi: wsi_name.to_string(),
                image,
                label: None,
                mask: Some(mask),
                row: rec.row,
                col: rec.col,
            })
        })
        .collect()
}

/// Label raster written next to a region item's image.
pub fn region_labels_path(item: &ManifestItem) -> String {
    item.image.trim_end_matches(".png").to_string() + "_labels.png"
}

/// Crops the label raster of a region record back to a patch.
pub fn patch_labels_in_region(rec: &RegionRecord, row: usize, col: usize, size: usize) -> LabelMap {
    crop_padded(&rec.labels, (row, col), (size, size), PAD_LABEL)
}

/// Crops an RGB raster tile with white padding.
pub fn crop_rgb(img: &RgbImage, origin: (usize, usize), shape: (usize, usize)) -> RgbImage {
    crop_padded(img, origin, shape, PAD_RGB)
}

/// Convenience for tests and tools: a label map with a single class.
pub fn uniform_labels(h: usize, w: usize, class: ClassId) -> LabelMap {
    LabelMap::from_pixel(w as u32, h as u32, Luma([class as u8]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::reference_class_freqs;

    fn all_vt() -> [f64; NUM_CLASSES] {
        let mut f = [0.0; NUM_CLASSES];
        f[1] = 1.0;
        f
    }

    #[test]
    fn deterministic() {
        let f = reference_class_freqs();
        let a = generate_wsi(7, 512, 512, &f).unwrap();
        let b = generate_wsi(7, 512, 512, &f).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        let c = generate_wsi(8, 512, 512, &f).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn single_class_slide() {
        let wsi = generate_wsi(3, 256, 256, &all_vt()).unwrap();
        assert!(wsi.labels.as_raw().iter().all(|v| *v == 1));
        assert_eq!(wsi.realized_freqs[1], 1.0);
        let ds = derive_patch_dataset(&wsi, 16, SplitFractions::default(), 0).unwrap();
        assert!(ds.records.iter().all(|r| r.label == ClassId::Vt));
    }

    #[test]
    fn realized_frequencies_track_targets() {
        let f = reference_class_freqs();
        let wsi = generate_wsi(11, 1024, 1024, &f).unwrap();
        for c in 0..NUM_CLASSES {
            let dev = (wsi.realized_freqs[c] - f[c]).abs();
            assert!(
                dev <= 0.05,
                "class {c}: realized {} target {}",
                wsi.realized_freqs[c],
                f[c]
            );
        }
    }

    #[test]
    fn input_validation() {
        assert!(generate_wsi(0, 0, 64, &all_vt()).is_err());
        assert!(generate_wsi(0, 64, 64, &[0.5; 7]).is_err());
        let wsi = generate_wsi(0, 64, 64, &all_vt()).unwrap();
        assert!(derive_patch_dataset(&wsi, 128, SplitFractions::default(), 0).is_err());
        assert!(derive_region_dataset(&wsi, 48, 16, SplitFractions::default(), 0).is_err());
        assert!(derive_region_dataset(&wsi, 16, 16, SplitFractions::default(), 0).is_err());
    }

    #[test]
    fn patch_counts_and_splits() {
        let wsi = generate_wsi(5, 512, 512, &reference_class_freqs()).unwrap();
        let ds = derive_patch_dataset(&wsi, 16, SplitFractions::default(), 9).unwrap();
        assert_eq!(ds.candidates, 1024);
        // tissue everywhere: nothing is filtered
        assert_eq!(ds.records.len(), 1024);
        let n = |s| ds.records.iter().filter(|r| r.split == s).count();
        assert_eq!(
            (n(Split::Train), n(Split::Valid), n(Split::Test)),
            (819, 102, 103)
        );
    }

    #[test]
    fn split_arithmetic() {
        let keys: Vec<_> = (0..1000).map(|i| (i / 40, i % 40)).collect();
        let s = assign_splits(&keys, 1, 2, SplitFractions::default());
        let n = |x| s.iter().filter(|v| **v == x).count();
        assert_eq!(
            (n(Split::Train), n(Split::Valid), n(Split::Test)),
            (800, 100, 100)
        );
        assert_eq!(s, assign_splits(&keys, 1, 2, SplitFractions::default()));
    }

    #[test]
    fn glass_tiles_are_filtered() {
        let mut wsi = generate_wsi(5, 64, 64, &all_vt()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                wsi.image.put_pixel(x, y, Rgb([250, 250, 250]));
            }
        }
        let ds = derive_patch_dataset(&wsi, 16, SplitFractions::default(), 0).unwrap();
        assert_eq!(ds.candidates, 16);
        assert_eq!(ds.records.len(), 15);
        assert!(!ds.records.iter().any(|r| r.row == 0 && r.col == 0));
    }

    #[test]
    fn region_records() {
        let wsi = generate_wsi(5, 512, 512, &reference_class_freqs()).unwrap();
        assert_eq!(region_exponent(128, 16).unwrap(), 3);
        let regions = derive_region_dataset(&wsi, 128, 16, SplitFractions::default(), 0).unwrap();
        assert_eq!(regions.len(), 16);
        let mask = regions[3].mask().unwrap();
        let sums = mask
            .values()
            .sum(0)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(sums.iter().all(|s| *s == 1.0));
    }

    #[test]
    fn region_and_patch_labels_agree() {
        let wsi = generate_wsi(21, 256, 256, &reference_class_freqs()).unwrap();
        let patches = derive_patch_dataset(&wsi, 16, SplitFractions::default(), 0).unwrap();
        let regions = derive_region_dataset(&wsi, 128, 16, SplitFractions::default(), 0).unwrap();
        for p in &patches.records {
            let reg = regions
                .iter()
                .find(|r| {
                    p.row >= r.row && p.row < r.row + 128 && p.col >= r.col && p.col < r.col + 128
                })
                .unwrap();
            let sub = patch_labels_in_region(reg, p.row - reg.row, p.col - reg.col, 16);
            assert_eq!(dominant_class(&sub).unwrap(), p.label);
        }
    }

    #[test]
    fn majority_filter_keeps_uniform_and_removes_specks() {
        let mut labels = vec![2u8; 15 * 15];
        labels[7 * 15 + 7] = 5;
        let out = majority_filter(&labels, 15, 15, 2);
        assert!(out.iter().all(|v| *v == 2));
    }
}
