//! Plain image grids and per-structure probability maps.

use dscm_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel intensity grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width, data.len(), "image data length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::Shape {
                expected: format!("{height}x{width}"),
                got: format!("{}x{}", self.height, self.width),
            });
        }
        Ok(())
    }

    /// Elementwise `self - other`.
    pub fn diff(&self, other: &Image) -> Image {
        assert_eq!(self.dims(), other.dims(), "diff of differently sized images");
        Image::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        )
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Stacks images into an `[N, 1, H, W]` tensor.
    pub fn batch<T: Scalar>(images: &[&Image]) -> Tensor<T> {
        assert!(!images.is_empty(), "empty image batch");
        let (h, w) = images[0].dims();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            assert_eq!(img.dims(), (h, w), "ragged image batch");
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::from_vec(&[images.len(), 1, h, w], data)
    }

    /// Splits an `[N, C, H, W]` tensor (channel `c`) back into images.
    pub fn unbatch<T: Scalar>(t: &Tensor<T>, channel: usize) -> Vec<Image> {
        let s = t.shape();
        assert_eq!(s.len(), 4, "unbatch expects [N, C, H, W]");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        (0..n)
            .map(|i| {
                let start = (i * c + channel) * h * w;
                Image::new(
                    h,
                    w,
                    t.data()[start..start + h * w]
                        .iter()
                        .map(|v| v.to_f64_lossy() as f32)
                        .collect(),
                )
            })
            .collect()
    }
}

/// Per-structure probability maps `m̂` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    pub structures: Vec<String>,
    pub grids: Vec<Image>,
    /// Physical area of one pixel (unit²).
    pub pixel_area: f64,
}

impl SoftMask {
    pub fn new(structures: Vec<String>, grids: Vec<Image>, pixel_area: f64) -> Result<Self> {
        if structures.is_empty() {
            return Err(Error::Shape {
                expected: "at least one structure".into(),
                got: "none".into(),
            });
        }
        if structures.len() != grids.len() {
            return Err(Error::Shape {
                expected: format!("{} grids", structures.len()),
                got: format!("{}", grids.len()),
            });
        }
        let dims = grids[0].dims();
        for g in &grids {
            g.check_dims(dims.0, dims.1)?;
            if g.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Shape {
                    expected: "probabilities in [0, 1]".into(),
                    got: "out-of-range value".into(),
                });
            }
        }
        Ok(Self {
            structures,
            grids,
            pixel_area,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grids[0].dims()
    }

    pub fn index_of(&self, structure: &str) -> Option<usize> {
        self.structures.iter().position(|s| s == structure)
    }

    pub fn grid(&self, structure: &str) -> Option<&Image> {
        self.index_of(structure).map(|i| &self.grids[i])
    }

    /// Stacks masks into an `[N, S, H, W]` tensor.
    pub fn batch<T: Scalar>(masks: &[&SoftMask]) -> Tensor<T> {
        let (h, w) = masks[0].dims();
        let s = masks[0].structures.len();
        let mut data = Vec::with_capacity(masks.len() * s * h * w);
        for m in masks {
            for g in &m.grids {
                data.extend(g.data.iter().map(|&v| T::lit(v as f64)));
            }
        }
        Tensor::from_vec(&[masks.len(), s, h, w], data)
    }
}
