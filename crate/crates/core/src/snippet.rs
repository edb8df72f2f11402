//! Grid split of an image into non-overlapping snippets.
//!
//! Tile sizes use floor division; the last row and column absorb the
//! remainder, so a 10-pixel axis in 3 parts is split 3, 3, 4.

use std::fmt;
use std::str::FromStr;

use image::{GenericImageView, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("grid must be at least 1x1, got {rows}x{cols}")));
        }
        Ok(GridShape { rows, cols })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

impl Default for GridShape {
    fn default() -> Self {
        GridShape { rows: 3, cols: 3 }
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once('x')
            .ok_or_else(|| Error::Config(format!("grid must look like 3x3, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad grid {s:?}")))
        };
        GridShape::new(parse(r)?, parse(c)?)
    }
}

/// Pixel rectangle, half-open: `[x, x + width) x [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

#[derive(Debug, Clone)]
pub struct Snippet {
    pub index: usize,
    pub rect: Rect,
    pub image: RgbImage,
}

/// Half-open `[start, end)` spans splitting `len` into `parts` pieces.
pub fn axis_bounds(len: u32, parts: usize) -> Vec<(u32, u32)> {
    let parts = parts as u32;
    let step = len / parts;
    (0..parts)
        .map(|p| {
            let start = p * step;
            let end = if p + 1 == parts { len } else { start + step };
            (start, end)
        })
        .collect()
}

/// Row-major snippet rectangles for a `width x height` image.
pub fn boundaries(width: u32, height: u32, grid: GridShape) -> Result<Vec<Rect>> {
    if (height as usize) < grid.rows || (width as usize) < grid.cols {
        return Err(Error::Invalid(format!(
            "grid {grid} does not fit a {width}x{height} image"
        )));
    }
    let ys = axis_bounds(height, grid.rows);
    let xs = axis_bounds(width, grid.cols);
    Ok(ys
        .iter()
        .flat_map(|&(y0, y1)| {
            xs.iter().map(move |&(x0, x1)| Rect {
                x: x0,
                y: y0,
                width: x1 - x0,
                height: y1 - y0,
            })
        })
        .collect())
}

/// Splits `image` into `grid.count()` snippets in row-major order.
pub fn split(image: &RgbImage, grid: GridShape) -> Result<Vec<Snippet>> {
    let rects = boundaries(image.width(), image.height(), grid)?;
    Ok(rects
        .into_iter()
        .enumerate()
        .map(|(index, rect)| Snippet {
            index,
            rect,
            image: image
                .view(rect.x, rect.y, rect.width, rect.height)
                .to_image(),
        })
        .collect())
}

/// Pastes snippets back into a `width x height` canvas.
pub fn reassemble(snippets: &[Snippet], width: u32, height: u32) -> RgbImage {
    let mut out = RgbImage::new(width, height);
    for s in snippets {
        for (x, y, p) in s.image.enumerate_pixels() {
            out.put_pixel(s.rect.x + x, s.rect.y + y, *p);
        }
    }
    out
}
