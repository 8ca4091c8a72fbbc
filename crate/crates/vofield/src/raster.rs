//! Image, depth, and normal rasters plus their on-disk binary format.
//!
//! Depth maps are stored as little-endian 32-bit float rasters behind an
//! 8-byte header (4-byte magic, u16 width, u16 height). Invalid depth pixels
//! are encoded as 0.0, which cannot be confused with valid data because valid
//! depths are strictly positive. Normal maps use the same header with a
//! different magic and three channels per pixel.

use std::io::{Read, Write};

use nalgebra::Vector3;
use thiserror::Error;

pub const DEPTH_MAGIC: [u8; 4] = *b"VFD1";
pub const NORMAL_MAGIC: [u8; 4] = *b"VFN1";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("dimension mismatch: payload holds {actual} values, header implies {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("raster too large for the 16-bit header dimensions: {0}x{1}")]
    TooLarge(usize, usize),
    #[error("pixel ({0}, {1}) out of bounds for {2}x{3} raster")]
    OutOfBounds(usize, usize, usize, usize),
}

/// RGB image with channel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    data: Vec<[f32; 3]>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for v in 0..height {
            for u in 0..width {
                img.data[v * width + u] = f(u, v);
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f32; 3] {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: [f32; 3]) {
        self.data[v * self.width + u] = value;
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    /// Mean over channels, used as a cheap grayscale view.
    pub fn luminance(&self, u: usize, v: usize) -> f32 {
        let [r, g, b] = self.get(u, v);
        (r + g + b) / 3.0
    }
}

/// Dense per-pixel depth in scene units; 0.0 marks invalid pixels. Values
/// are kept in f64 and narrowed to f32 only at the serialization boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::LengthMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut map = Self::new_invalid(width, height);
        for v in 0..height {
            for u in 0..width {
                map.data[v * width + u] = f(u, v);
            }
        }
        map
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let value = self.data[v * self.width + u];
        if value > 0.0 && value.is_finite() {
            Some(value)
        } else {
            None
        }
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, depth: f64) {
        self.data[v * self.width + u] = depth;
    }

    #[inline]
    pub fn invalidate(&mut self, u: usize, v: usize) {
        self.data[v * self.width + u] = 0.0;
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data
            .iter()
            .filter(|v| **v > 0.0 && v.is_finite())
            .copied()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0 && v.is_finite()).count()
    }

    /// Applies `depth -> scale * depth + shift` to valid pixels, clamping the
    /// result to `floor` and reporting how many pixels were clamped.
    pub fn affine_mapped(&self, scale: f64, shift: f64, floor: f64) -> (DepthMap, usize) {
        let mut clamped = 0;
        let data = self
            .data
            .iter()
            .map(|&v| {
                if v > 0.0 && v.is_finite() {
                    let mapped = scale * v + shift;
                    if mapped < floor {
                        clamped += 1;
                        floor
                    } else {
                        mapped
                    }
                } else {
                    0.0
                }
            })
            .collect();
        (
            DepthMap {
                width: self.width,
                height: self.height,
                data,
            },
            clamped,
        )
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), RasterError> {
        write_header(&mut w, DEPTH_MAGIC, self.width, self.height)?;
        for value in &self.data {
            w.write_all(&(*value as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, RasterError> {
        let (width, height) = read_header(&mut r, DEPTH_MAGIC)?;
        let data = read_f32s(&mut r, width * height)?
            .into_iter()
            .map(f64::from)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Dense per-pixel unit normals in the camera frame; zero vectors mark
/// invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    data: Vec<[f32; 3]>,
}

impl NormalMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Option<Vector3<f64>>,
    ) -> Self {
        let mut map = Self::new_invalid(width, height);
        for v in 0..height {
            for u in 0..width {
                if let Some(n) = f(u, v) {
                    map.set(u, v, &n);
                }
            }
        }
        map
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        let [x, y, z] = self.data[v * self.width + u];
        let n = Vector3::new(f64::from(x), f64::from(y), f64::from(z));
        let norm = n.norm();
        if norm > 0.5 {
            Some(n / norm)
        } else {
            None
        }
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, normal: &Vector3<f64>) {
        let n = normal.normalize();
        self.data[v * self.width + u] = [n.x as f32, n.y as f32, n.z as f32];
    }

    pub fn valid_count(&self) -> usize {
        (0..self.height)
            .flat_map(|v| (0..self.width).map(move |u| (u, v)))
            .filter(|&(u, v)| self.get(u, v).is_some())
            .count()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), RasterError> {
        write_header(&mut w, NORMAL_MAGIC, self.width, self.height)?;
        for value in &self.data {
            for channel in value {
                w.write_all(&channel.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, RasterError> {
        let (width, height) = read_header(&mut r, NORMAL_MAGIC)?;
        let flat = read_f32s(&mut r, width * height * 3)?;
        let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

fn write_header(
    w: &mut impl Write,
    magic: [u8; 4],
    width: usize,
    height: usize,
) -> Result<(), RasterError> {
    let (Ok(w16), Ok(h16)) = (u16::try_from(width), u16::try_from(height)) else {
        return Err(RasterError::TooLarge(width, height));
    };
    w.write_all(&magic)?;
    w.write_all(&w16.to_le_bytes())?;
    w.write_all(&h16.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, expected: [u8; 4]) -> Result<(usize, usize), RasterError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != expected {
        return Err(RasterError::BadMagic {
            found: magic,
            expected,
        });
    }
    let mut dims = [0u8; 4];
    r.read_exact(&mut dims)?;
    let width = u16::from_le_bytes([dims[0], dims[1]]) as usize;
    let height = u16::from_le_bytes([dims[2], dims[3]]) as usize;
    Ok((width, height))
}

fn read_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f32>, RasterError> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
