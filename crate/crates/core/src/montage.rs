//! Overlapping-patch montage: an ROI image becomes a stack of patches read in
//! raster order, which the network treats as a short clip.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Volume;

pub const CHANNELS: usize = 3;
pub const NORMALIZATION: &str = "divide-by-255";

const CUBE_MAGIC: &[u8; 4] = b"MCUB";
const DTYPE_F32_LE: u8 = 1;

/// A cropped RGB region of interest with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiImage {
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width x 3`.
    pub pixels: Vec<f64>,
    pub source_id: String,
}

impl RoiImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidConfig("ROI image must be non-empty".into()));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::shape(height * width * CHANNELS, pixels.len()));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("ROI intensities must lie in [0, 1]".into()));
        }
        Ok(RoiImage {
            height,
            width,
            pixels,
            source_id: source_id.into(),
        })
    }

    /// Build from 8-bit RGB bytes, dividing by 255.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8], source_id: impl Into<String>) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(height, width, pixels, source_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw(), path.to_string_lossy())
    }

    #[inline]
    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }
}

/// Geometry of the patch grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MontageConfig {
    pub roi_height: usize,
    pub roi_width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub expected_depth: usize,
    pub preset_name: String,
}

impl MontageConfig {
    /// Derive the ROI size from a `rows x cols` grid of `patch`-sized
    /// patches spaced `stride` apart.
    pub fn from_grid(name: &str, patch: usize, stride: usize, rows: usize, cols: usize) -> Self {
        MontageConfig {
            roi_height: patch + (rows - 1) * stride,
            roi_width: patch + (cols - 1) * stride,
            patch_size: patch,
            stride,
            expected_depth: rows * cols,
            preset_name: name.to_string(),
        }
    }

    /// 60 patches of 170x170 at stride 5 (6x10 grid over a 195x215 ROI).
    pub fn paper_stated() -> Self {
        Self::from_grid("paper-stated", 170, 5, 6, 10)
    }

    /// 80 patches of 224x224 at stride 5 (8x10 grid over a 259x269 ROI),
    /// the input whose stride arithmetic reproduces the declared block shapes.
    pub fn shape_consistent() -> Self {
        Self::from_grid("shape-consistent", 224, 5, 8, 10)
    }

    /// 16 patches of 64x64 at stride 5 (4x4 grid), for desk-scale runs.
    pub fn reduced() -> Self {
        Self::from_grid("reduced", 64, 5, 4, 4)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-stated" => Ok(Self::paper_stated()),
            "shape-consistent" => Ok(Self::shape_consistent()),
            "reduced" => Ok(Self::reduced()),
            other => Err(Error::InvalidConfig(format!("unknown montage preset '{other}'"))),
        }
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        patch_grid_dims(self.roi_height, self.roi_width, self.patch_size, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.grid()?;
        if rows * cols != self.expected_depth {
            return Err(Error::InvalidConfig(format!(
                "grid {rows}x{cols} yields {} patches, expected depth {}",
                rows * cols,
                self.expected_depth
            )));
        }
        Ok(())
    }

    pub fn cube_dims(&self) -> [usize; 4] {
        [self.expected_depth, self.patch_size, self.patch_size, CHANNELS]
    }
}

/// Rows and columns of the overlapping patch grid.
pub fn patch_grid_dims(h: usize, w: usize, p: usize, s: usize) -> Result<(usize, usize)> {
    if s == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }
    if p == 0 || p > h || p > w {
        return Err(Error::InvalidConfig(format!(
            "patch {p} does not fit in a {h}x{w} ROI"
        )));
    }
    for extent in [h, w] {
        if (extent - p) % s != 0 {
            return Err(Error::NonExactGrid {
                extent,
                patch: p,
                stride: s,
            });
        }
    }
    Ok(((h - p) / s + 1, (w - p) / s + 1))
}

/// Bilinear resize (half-pixel centres, edge clamped) to the configured ROI size.
pub fn resize_roi(img: &RoiImage, cfg: &MontageConfig) -> RoiImage {
    let (oh, ow) = (cfg.roi_height, cfg.roi_width);
    if oh == img.height && ow == img.width {
        return img.clone();
    }
    let sy = img.height as f64 / oh as f64;
    let sx = img.width as f64 / ow as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xtaps: Vec<_> = (0..ow).map(|x| taps(x, sx, img.width)).collect();
    let mut pixels = Vec::with_capacity(oh * ow * CHANNELS);
    for y in 0..oh {
        let (y0, y1, fy) = taps(y, sy, img.height);
        for &(x0, x1, fx) in &xtaps {
            for c in 0..CHANNELS {
                let top = lerp(img.at(y0, x0, c), img.at(y0, x1, c), fx);
                let bottom = lerp(img.at(y1, x0, c), img.at(y1, x1, c), fx);
                pixels.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
            }
        }
    }
    RoiImage {
        height: oh,
        width: ow,
        pixels,
        source_id: img.source_id.clone(),
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// The `D x P x P x 3` stack of overlapping patches.
#[derive(Debug, Clone, PartialEq)]
pub struct MontageCube {
    pub data: Vec<f64>,
    pub config: MontageConfig,
    pub source_id: String,
}

impl MontageCube {
    pub fn dims(&self) -> [usize; 4] {
        self.config.cube_dims()
    }

    /// Slice `k` as a contiguous `P x P x 3` block.
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.config.patch_size * self.config.patch_size * CHANNELS;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims(),
            data: self.data.clone(),
        }
    }

    pub fn into_volume(self) -> Volume {
        Volume {
            dims: self.config.cube_dims(),
            data: self.data,
        }
    }

    /// Write the binary container plus a `.json` sidecar next to it.
    ///
    /// Layout: `b"MCUB"`, four little-endian `u32` (depth, patch, patch,
    /// channels), one dtype byte (`1` = f32 LE), then the row-major payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = Vec::with_capacity(21);
        header.extend_from_slice(CUBE_MAGIC);
        for d in self.dims() {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        header.push(DTYPE_F32_LE);
        out.write_all(&header).map_err(|e| Error::io(path, e))?;
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&payload).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))?;

        let meta = CubeMetadata {
            source_id: self.source_id.clone(),
            preset_name: self.config.preset_name.clone(),
            normalization: NORMALIZATION.to_string(),
            config: self.config.clone(),
        };
        let sidecar = sidecar_path(path);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let meta_text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: CubeMetadata =
            serde_json::from_str(&meta_text).map_err(|e| Error::Format(e.to_string()))?;

        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut header = [0u8; 21];
        input.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        if &header[..4] != CUBE_MAGIC {
            return Err(Error::Format(format!("{} is not a cube file", path.display())));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let b = &header[4 + 4 * i..8 + 4 * i];
            *d = u32::from_le_bytes(b.try_into().unwrap()) as usize;
        }
        if header[20] != DTYPE_F32_LE {
            return Err(Error::Format(format!("unsupported dtype tag {}", header[20])));
        }
        if dims != meta.config.cube_dims() {
            return Err(Error::shape(meta.config.cube_dims(), dims));
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(MontageCube {
            data,
            config: meta.config,
            source_id: meta.source_id,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CubeMetadata {
    source_id: String,
    preset_name: String,
    normalization: String,
    config: MontageConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Cut the ROI into the configured patch grid and stack the patches in
/// raster order: slice `r * cols + c` has its top-left corner at
/// `(r * stride, c * stride)`.
pub fn build_cube(img: &RoiImage, cfg: &MontageConfig) -> Result<MontageCube> {
    if img.height != cfg.roi_height || img.width != cfg.roi_width {
        return Err(Error::shape(
            (cfg.roi_height, cfg.roi_width),
            (img.height, img.width),
        ));
    }
    let (rows, cols) = cfg.grid()?;
    cfg.validate()?;
    let p = cfg.patch_size;
    let s = cfg.stride;
    let slice_len = p * p * CHANNELS;
    let row_len = p * CHANNELS;
    let mut data = vec![0.0; rows * cols * slice_len];
    par::for_each_chunk_mut(&mut data, slice_len, |k, out| {
        let (r, c) = (k / cols, k % cols);
        for y in 0..p {
            let src = ((r * s + y) * img.width + c * s) * CHANNELS;
            out[y * row_len..(y + 1) * row_len].copy_from_slice(&img.pixels[src..src + row_len]);
        }
    });
    Ok(MontageCube {
        data,
        config: cfg.clone(),
        source_id: img.source_id.clone(),
    })
}

/// Resize when needed, then build the cube.
pub fn image_to_cube(img: &RoiImage, cfg: &MontageConfig) -> Result<MontageCube> {
    let resized = resize_roi(img, cfg);
    build_cube(&resized, cfg)
}
