//! Fixed-resolution UV-space map images with validity masks, plus the plain
//! raster images (color, label, IUV) the extraction stage consumes.

use nalgebra::Vector3;

use super::AtlasError;

/// Ordered label palette for segmentation maps. Index 0 is background by
/// convention; `garment` flags which classes participate in garment edits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPalette {
    pub names: Vec<String>,
    pub garment: Vec<bool>,
}

impl LabelPalette {
    pub fn new(names: Vec<String>, garment: Vec<bool>) -> Self {
        assert_eq!(names.len(), garment.len());
        Self { names, garment }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn is_garment(&self, label: u8) -> bool {
        self.garment.get(label as usize).copied().unwrap_or(false)
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }
}

impl Default for LabelPalette {
    fn default() -> Self {
        Self {
            names: ["background", "skin", "hair", "upper-garment", "lower-garment", "shoes"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            garment: vec![false, false, false, true, true, true],
        }
    }
}

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_SKIN: u8 = 1;
pub const LABEL_HAIR: u8 = 2;
pub const LABEL_UPPER: u8 = 3;
pub const LABEL_LOWER: u8 = 4;
pub const LABEL_SHOES: u8 = 5;

/// R x R RGB map in UV space, 8-bit channels, with a per-texel validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextureMap {
    pub resolution: usize,
    pub pixels: Vec<[u8; 3]>,
    pub valid: Vec<bool>,
}

impl TextureMap {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            pixels: vec![[0; 3]; resolution * resolution],
            valid: vec![false; resolution * resolution],
        }
    }

    pub fn texel_count(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }

    /// Canonical form: invalid texels zeroed.
    pub fn canonicalize(&mut self) {
        for (p, v) in self.pixels.iter_mut().zip(&self.valid) {
            if !*v {
                *p = [0; 3];
            }
        }
    }
}

/// R x R label map in UV space with validity mask and palette.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub resolution: usize,
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
    pub palette: LabelPalette,
}

impl SegmentationMap {
    pub fn new(resolution: usize, palette: LabelPalette) -> Self {
        Self {
            resolution,
            labels: vec![0; resolution * resolution],
            valid: vec![false; resolution * resolution],
            palette,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }

    pub fn check_labels(&self) -> Result<(), AtlasError> {
        let n = self.palette.len() as u16;
        for (i, &l) in self.labels.iter().enumerate() {
            if (l as u16) >= n {
                return Err(AtlasError::LabelOutOfPalette { texel: i, label: l, palette: n as usize });
            }
        }
        Ok(())
    }

    pub fn canonicalize(&mut self) {
        for (l, v) in self.labels.iter_mut().zip(&self.valid) {
            if !*v {
                *l = 0;
            }
        }
    }
}

/// R x R three-channel displacement map. Raw 16-bit storage `raw` decodes to
/// meters via `scale * (raw / 32767 - offset[c])`, so a raw value of 32767
/// with the default offset of 1 is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementMap {
    pub resolution: usize,
    pub raw: Vec<[u16; 3]>,
    pub scale: f64,
    pub offset: [f64; 3],
    pub valid: Vec<bool>,
}

/// Raw payload that decodes to exactly zero with the default offset.
pub const DISPLACEMENT_ZERO_RAW: u16 = 32767;

impl DisplacementMap {
    pub fn new(resolution: usize, scale: f64) -> Result<Self, AtlasError> {
        if scale <= 0.0 {
            return Err(AtlasError::BadDisplacementScale { scale });
        }
        Ok(Self {
            resolution,
            raw: vec![[DISPLACEMENT_ZERO_RAW; 3]; resolution * resolution],
            scale,
            offset: [1.0; 3],
            valid: vec![false; resolution * resolution],
        })
    }

    pub fn decode(&self, texel: usize) -> Vector3<f64> {
        let r = self.raw[texel];
        Vector3::new(
            self.scale * (r[0] as f64 / DISPLACEMENT_ZERO_RAW as f64 - self.offset[0]),
            self.scale * (r[1] as f64 / DISPLACEMENT_ZERO_RAW as f64 - self.offset[1]),
            self.scale * (r[2] as f64 / DISPLACEMENT_ZERO_RAW as f64 - self.offset[2]),
        )
    }

    pub fn encode(&mut self, texel: usize, value: &Vector3<f64>) {
        let mut r = [0u16; 3];
        for c in 0..3 {
            let v = (value[c] / self.scale + self.offset[c]) * DISPLACEMENT_ZERO_RAW as f64;
            r[c] = v.round().clamp(0.0, 65534.0) as u16;
        }
        self.raw[texel] = r;
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }

    /// Largest decodable magnitude per component.
    pub fn max_magnitude(&self) -> f64 {
        self.scale * self.offset.iter().fold(0.0f64, |a, o| a.max(o.max(65534.0 / DISPLACEMENT_ZERO_RAW as f64 - o)))
    }
}

/// Plain 8-bit RGB raster image (camera views, swatches, render output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![[0; 3]; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        self.pixels[y * self.width + x] = c;
    }
}

/// Plain label raster image (per-pixel palette indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, l: u8) {
        self.labels[y * self.width + x] = l;
    }
}

/// Dense image-to-surface correspondences: per pixel a body-part index
/// (0 = no person) and continuous (u, v) within that part's chart.
///
/// In memory the coordinates are kept at full precision; the file format
/// quantizes them to 8 bits per channel (see `io_formats`).
#[derive(Debug, Clone, PartialEq)]
pub struct IuvImage {
    pub width: usize,
    pub height: usize,
    pub part: Vec<u8>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl IuvImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            part: vec![0; width * height],
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn person_pixel_count(&self) -> usize {
        self.part.iter().filter(|p| **p > 0).count()
    }

    /// Quantize coordinates to the 8-bit file precision in place.
    pub fn quantize(&mut self) {
        for i in 0..self.u.len() {
            if self.part[i] > 0 {
                self.u[i] = (self.u[i].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                self.v[i] = (self.v[i].clamp(0.0, 1.0) * 255.0).round() / 255.0;
            } else {
                self.u[i] = 0.0;
                self.v[i] = 0.0;
            }
        }
    }
}
