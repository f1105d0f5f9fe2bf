use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{Shape, Size, Workspace, GRID};
use crate::error::{Error, Result};

/// An RGB raster, row-major `[height, width, 3]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl SceneImage {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::dim("SceneImage", height * width * 3, pixels.len()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn rms_distance(&self, other: &SceneImage) -> f32 {
        let s: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        (s / self.pixels.len() as f64).sqrt() as f32
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::Format {
            what: "PPM image",
            reason: r.to_string(),
        };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a P6 file"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let body = &bytes[pos + 1..];
        if body.len() != width * height * 3 {
            return Err(bad("pixel payload has the wrong length"));
        }
        let pixels = body.iter().map(|&b| b as f32 / 255.0).collect();
        Self::from_pixels(height, width, pixels)
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}

pub(crate) fn unit(rgb: [u8; 3]) -> [f32; 3] {
    rgb.map(|v| v as f32 / 255.0)
}

/// Draws entities in list order over the background.
pub fn render_scene(w: &Workspace, size: usize) -> SceneImage {
    let mut img = SceneImage::filled(size, size, unit(w.background.rgb8()));
    let cell = size as f32 / GRID as f32;
    let scale = size as f32 / 16.0;
    for e in &w.entities {
        let cx = (e.cell.col as f32 + 0.5) * cell;
        let cy = (e.cell.row as f32 + 0.5) * cell;
        let r = scale
            * match e.size {
                Size::Small => 1.6,
                Size::Large => 2.6,
            };
        let rgb = unit(e.color.rgb8());
        for y in 0..size {
            for x in 0..size {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                if covers(e.shape, dx, dy, r) {
                    let o = (y * size + x) * 3;
                    img.pixels[o..o + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    img
}

fn covers(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
        Shape::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
        Shape::Bar => dx.abs() <= r && dy.abs() <= 0.45 * r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthio::types::*;

    #[test]
    fn empty_workspace_is_uniform() {
        let img = render_scene(&Workspace::empty(Background::Maroon), 16);
        let bg = unit(Background::Maroon.rgb8());
        assert!((0..16).all(|y| (0..16).all(|x| img.pixel(y, x) == bg)));
    }

    #[test]
    fn center_pixel_of_red_circle() {
        let mut w = Workspace::empty(Background::Navy);
        w.entities.push(Entity {
            shape: Shape::Circle,
            color: Color::Red,
            cell: Cell::CENTER,
            size: Size::Small,
        });
        let img = render_scene(&w, 16);
        let red = [230.0 / 255.0, 25.0 / 255.0, 25.0 / 255.0];
        assert_eq!(img.pixel(8, 8), red);
        assert_eq!(img.pixel(7, 7), red);
        assert_eq!(img.pixel(0, 0), unit(Background::Navy.rgb8()));
        assert_eq!(img, render_scene(&w, 16));
    }

    #[test]
    fn every_shape_is_visible_at_every_size() {
        for shape in Shape::ALL {
            for size in [Size::Small, Size::Large] {
                let mut w = Workspace::empty(Background::Charcoal);
                w.entities.push(Entity {
                    shape,
                    color: Color::White,
                    cell: Cell { row: 0, col: 2 },
                    size,
                });
                let img = render_scene(&w, 16);
                let lit = (0..256).filter(|&i| img.pixels[i * 3] > 0.5).count();
                assert!(lit >= 3, "{shape:?} {size:?} covers {lit} pixels");
            }
        }
    }

    #[test]
    fn ppm_round_trip_is_exact() {
        let mut w = Workspace::empty(Background::Olive);
        w.entities.push(Entity {
            shape: Shape::Triangle,
            color: Color::Orange,
            cell: Cell { row: 2, col: 0 },
            size: Size::Large,
        });
        let img = render_scene(&w, 16);
        let back = SceneImage::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
        assert!(SceneImage::from_ppm(b"P3\n1 1\n255\n").is_err());
    }
}
