//! Slide geometry: slides are cut into regions, regions into patches, patch
//! predictions are broadcast into coarse region masks, and refined region
//! masks are merged back into a slide-level label raster.

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Pixel, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, NUM_CLASSES};
use crate::error::{Error, Result};

/// Class-index raster; each pixel value is a [`ClassId`] discriminant.
pub type LabelMap = GrayImage;

/// Pixel value used to pad RGB rasters.
pub const PAD_RGB: Rgb<u8> = Rgb([255, 255, 255]);
/// Pixel value used to pad label rasters.
pub const PAD_LABEL: Luma<u8> = Luma([ClassId::Bg as u8]);

/// Partition of a (padded) slide into equally sized regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    /// Unpadded slide shape `(height, width)`.
    pub wsi_shape: (usize, usize),
    pub region_shape: (usize, usize),
    /// Padding added at the bottom and right edge, `(rows, cols)`.
    pub pad: (usize, usize),
    pub n_regions: usize,
    /// Region origins `(row, col)` in row-major order.
    pub coords: Vec<(usize, usize)>,
}

impl RegionGrid {
    pub fn new(wsi_shape: (usize, usize), region_shape: (usize, usize)) -> Result<Self> {
        let (h, w) = wsi_shape;
        let (rh, rw) = region_shape;
        if h == 0 || w == 0 {
            return Err(Error::Empty("slide has zero area".into()));
        }
        if rh == 0 || rw == 0 {
            return Err(Error::InvalidGeometry(
                "region shape must be positive".into(),
            ));
        }
        let rows = h.div_ceil(rh);
        let cols = w.div_ceil(rw);
        let coords: Vec<_> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r * rh, c * rw)))
            .collect();
        Ok(Self {
            wsi_shape,
            region_shape,
            pad: (rows * rh - h, cols * rw - w),
            n_regions: coords.len(),
            coords,
        })
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.wsi_shape.0 + self.pad.0, self.wsi_shape.1 + self.pad.1)
    }

    /// Number of region rows and columns.
    pub fn layout(&self) -> (usize, usize) {
        let (ph, pw) = self.padded_shape();
        (ph / self.region_shape.0, pw / self.region_shape.1)
    }
}

/// Partition of a region into equally sized patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub region_shape: (usize, usize),
    pub patch_shape: (usize, usize),
    pub n_patches: usize,
    /// Patch origins `(row, col)` relative to the region, row-major.
    pub coords: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(region_shape: (usize, usize), patch_shape: (usize, usize)) -> Result<Self> {
        let (rh, rw) = region_shape;
        let (ph, pw) = patch_shape;
        if ph == 0 || pw == 0 || rh == 0 || rw == 0 {
            return Err(Error::InvalidGeometry(
                "patch and region shapes must be positive".into(),
            ));
        }
        if rh % ph != 0 || rw % pw != 0 {
            return Err(Error::InvalidGeometry(format!(
                "region {rh}x{rw} is not divisible into {ph}x{pw} patches"
            )));
        }
        let coords: Vec<_> = (0..rh / ph)
            .flat_map(|r| (0..rw / pw).map(move |c| (r * ph, c * pw)))
            .collect();
        Ok(Self {
            region_shape,
            patch_shape,
            n_patches: coords.len(),
            coords,
        })
    }
}

/// Crops `(h, w)` at `(row, col)`, filling out-of-bounds pixels with `fill`.
pub fn crop_padded<P: Pixel + 'static>(
    img: &ImageBuffer<P, Vec<P::Subpixel>>,
    origin: (usize, usize),
    shape: (usize, usize),
    fill: P,
) -> ImageBuffer<P, Vec<P::Subpixel>> {
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    ImageBuffer::from_fn(shape.1 as u32, shape.0 as u32, |x, y| {
        let (r, c) = (origin.0 + y as usize, origin.1 + x as usize);
        if r < ih && c < iw {
            *img.get_pixel(c as u32, r as u32)
        } else {
            fill
        }
    })
}

fn split_regions_with<P: Pixel + 'static>(
    img: &ImageBuffer<P, Vec<P::Subpixel>>,
    region_shape: (usize, usize),
    fill: P,
) -> Result<(RegionGrid, Vec<ImageBuffer<P, Vec<P::Subpixel>>>)> {
    let grid = RegionGrid::new((img.height() as usize, img.width() as usize), region_shape)?;
    let crops = grid
        .coords
        .iter()
        .map(|&origin| crop_padded(img, origin, region_shape, fill))
        .collect();
    Ok((grid, crops))
}

/// Cuts an RGB slide into regions, padding the bottom/right edge with white.
pub fn split_into_regions(
    image: &RgbImage,
    region_shape: (usize, usize),
) -> Result<(RegionGrid, Vec<RgbImage>)> {
    split_regions_with(image, region_shape, PAD_RGB)
}

/// Cuts a label raster into regions, padding with background.
pub fn split_labels_into_regions(
    labels: &LabelMap,
    region_shape: (usize, usize),
) -> Result<(RegionGrid, Vec<LabelMap>)> {
    split_regions_with(labels, region_shape, PAD_LABEL)
}

/// Cuts a region into non-overlapping patches in row-major order.
pub fn split_into_patches<P: Pixel + 'static>(
    region: &ImageBuffer<P, Vec<P::Subpixel>>,
    patch_shape: (usize, usize),
) -> Result<(PatchGrid, Vec<ImageBuffer<P, Vec<P::Subpixel>>>)> {
    let grid = PatchGrid::new(
        (region.height() as usize, region.width() as usize),
        patch_shape,
    )?;
    let patches = grid
        .coords
        .iter()
        .map(|&(r, c)| {
            image::imageops::crop_imm(
                region,
                c as u32,
                r as u32,
                patch_shape.1 as u32,
                patch_shape.0 as u32,
            )
            .to_image()
        })
        .collect();
    Ok((grid, patches))
}

/// Pastes tiles back at their origins into a `shape` canvas, dropping
/// anything outside it (the padding).
pub fn stitch<P: Pixel + 'static>(
    tiles: &[ImageBuffer<P, Vec<P::Subpixel>>],
    coords: &[(usize, usize)],
    shape: (usize, usize),
) -> Result<ImageBuffer<P, Vec<P::Subpixel>>> {
    if tiles.len() != coords.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tiles for {} coordinates",
            tiles.len(),
            coords.len()
        )));
    }
    let mut out = ImageBuffer::new(shape.1 as u32, shape.0 as u32);
    for (tile, &(r0, c0)) in tiles.iter().zip(coords) {
        for (x, y, p) in tile.enumerate_pixels() {
            let (r, c) = (r0 + y as usize, c0 + x as usize);
            if r < shape.0 && c < shape.1 {
                out.put_pixel(c as u32, r as u32, *p);
            }
        }
    }
    Ok(out)
}

/// Per-class pixel counts of a label raster.
pub fn class_counts(labels: &LabelMap) -> Result<[u64; NUM_CLASSES]> {
    let mut counts = [0u64; NUM_CLASSES];
    for &v in labels.as_raw() {
        if v as usize >= NUM_CLASSES {
            return Err(Error::InvalidClass(v));
        }
        counts[v as usize] += 1;
    }
    Ok(counts)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Majority class of a label patch, ties broken towards the lowest class id.
pub fn dominant_class(label_patch: &LabelMap) -> Result<ClassId> {
    if label_patch.as_raw().is_empty() {
        return Err(Error::Empty("label patch".into()));
    }
    let counts = class_counts(label_patch)?;
    ClassId::from_u8(argmax_lowest(&counts) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    OneHot,
    Coarse,
    DiffusionState,
    Refined,
}

impl MaskKind {
    pub fn on_simplex(self) -> bool {
        !matches!(self, MaskKind::DiffusionState)
    }
}

/// Per-pixel class-probability stack of shape `(C, h, w)`.
#[derive(Debug, Clone)]
pub struct ProbMask {
    values: Tensor,
    kind: MaskKind,
}

/// Tolerance on per-pixel channel sums for simplex-valued masks.
pub const SIMPLEX_TOL: f64 = 1e-6;

impl ProbMask {
    /// Wraps a `(C, h, w)` tensor; simplex kinds are validated.
    pub fn new(values: Tensor, kind: MaskKind) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 3 || dims[0] != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "mask must be ({NUM_CLASSES}, h, w), got {dims:?}"
            )));
        }
        let mask = Self { values, kind };
        if kind.on_simplex() {
            mask.check_simplex(SIMPLEX_TOL)?;
        }
        Ok(mask)
    }

    /// Wraps without validation; used for diffusion states and trusted paths.
    pub fn from_tensor_unchecked(values: Tensor, kind: MaskKind) -> Self {
        Self { values, kind }
    }

    /// One-hot encoding of a label raster.
    pub fn one_hot(labels: &LabelMap, dtype: DType, device: &Device) -> Result<Self> {
        let (h, w) = (labels.height() as usize, labels.width() as usize);
        let mut data = vec![0f32; NUM_CLASSES * h * w];
        for (i, &v) in labels.as_raw().iter().enumerate() {
            if v as usize >= NUM_CLASSES {
                return Err(Error::InvalidClass(v));
            }
            data[v as usize * h * w + i] = 1.0;
        }
        let values = Tensor::from_vec(data, (NUM_CLASSES, h, w), device)?.to_dtype(dtype)?;
        Ok(Self {
            values,
            kind: MaskKind::OneHot,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    /// `(h, w)`.
    pub fn spatial(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[1], d[2])
    }

    fn channel_major(&self) -> Result<Vec<f64>> {
        Ok(self
            .values
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        let (h, w) = self.spatial();
        let n = h * w;
        let data = self.channel_major()?;
        for p in 0..n {
            let mut sum = 0.0;
            for c in 0..NUM_CLASSES {
                let v = data[c * n + p];
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::NotSimplex(format!("pixel {p} channel {c} = {v}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::NotSimplex(format!("pixel {p} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Per-pixel argmax, ties broken by lowest class id.
    pub fn argmax(&self) -> Result<LabelMap> {
        let (h, w) = self.spatial();
        let n = h * w;
        let data = self.channel_major()?;
        let mut out = Vec::with_capacity(n);
        let mut px = [0f64; NUM_CLASSES];
        for p in 0..n {
            for (c, slot) in px.iter_mut().enumerate() {
                *slot = data[c * n + p];
            }
            out.push(argmax_lowest(&px) as u8);
        }
        Ok(LabelMap::from_raw(w as u32, h as u32, out).expect("buffer sized from dims"))
    }
}

fn check_prob_vector(v: &[f32]) -> Result<()> {
    if v.len() != NUM_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "probability vector of length {}",
            v.len()
        )));
    }
    if v.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(Error::NotSimplex(format!(
            "{v:?} has negative or non-finite entries"
        )));
    }
    let sum: f64 = v.iter().map(|p| *p as f64).sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex(format!("{v:?} sums to {sum}")));
    }
    Ok(())
}

/// Broadcasts each patch's probability vector over its footprint.
pub fn assemble_coarse_mask(patch_probs: &[Vec<f32>], grid: &PatchGrid) -> Result<ProbMask> {
    if patch_probs.len() != grid.n_patches {
        return Err(Error::ShapeMismatch(format!(
            "{} patch vectors for a grid of {} patches",
            patch_probs.len(),
            grid.n_patches
        )));
    }
    for v in patch_probs {
        check_prob_vector(v)?;
    }
    let (h, w) = grid.region_shape;
    let (ph, pw) = grid.patch_shape;
    let mut data = vec![0f32; NUM_CLASSES * h * w];
    for (probs, &(r0, c0)) in patch_probs.iter().zip(&grid.coords) {
        for (c, &p) in probs.iter().enumerate() {
            let plane = &mut data[c * h * w..(c + 1) * h * w];
            for r in r0..r0 + ph {
                plane[r * w + c0..r * w + c0 + pw].fill(p);
            }
        }
    }
    let values = Tensor::from_vec(data, (NUM_CLASSES, h, w), &Device::Cpu)?;
    Ok(ProbMask {
        values,
        kind: MaskKind::Coarse,
    })
}

/// Argmax of every region mask placed at its origin, padding removed.
pub fn merge_regions(refined: &[ProbMask], grid: &RegionGrid) -> Result<LabelMap> {
    if refined.len() != grid.n_regions {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for a grid of {} regions",
            refined.len(),
            grid.n_regions
        )));
    }
    let labels = refined
        .iter()
        .map(|m| {
            if m.spatial() != grid.region_shape {
                return Err(Error::ShapeMismatch(format!(
                    "mask {:?} does not match region {:?}",
                    m.spatial(),
                    grid.region_shape
                )));
            }
            m.argmax()
        })
        .collect::<Result<Vec<_>>>()?;
    stitch(&labels, &grid.coords, grid.wsi_shape)
}
