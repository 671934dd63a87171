//! 2×2 visual-prompt grids.
//!
//! Layout is row-major with the example pair on top:
//!
//! ```text
//! +------------+-------------+
//! | example in | example out |
//! +------------+-------------+
//! | query in   | target/grey |
//! +------------+-------------+
//! ```
//!
//! The conditioning grid is the training grid with the bottom-right quadrant
//! replaced by a uniform grey.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default grey used to mask the query slot.
pub const DEFAULT_GREY: f64 = 0.5;

/// Quadrant names in layout order.
pub const QUADRANT_NAMES: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];

/// Channels-last image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Image whose every pixel has the given per-channel colour.
    pub fn solid(height: usize, width: usize, color: &[f64]) -> Self {
        let mut data = Vec::with_capacity(height * width * color.len());
        for _ in 0..height * width {
            data.extend_from_slice(color);
        }
        Self {
            height,
            width,
            channels: color.len(),
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Window of `h × w` pixels starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    fn paste(&mut self, src: &Image, y0: usize, x0: usize) {
        let c = self.channels;
        for y in 0..src.height {
            let dst = ((y0 + y) * self.width + x0) * c;
            let s = y * src.width * c;
            self.data[dst..dst + src.width * c].copy_from_slice(&src.data[s..s + src.width * c]);
        }
    }

    /// `[C, H, W]` tensor view of this image.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, c) = self.dims();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::new(vec![c, h, w], out).expect("chw shape")
    }

    pub fn from_chw(t: &Tensor) -> Image {
        let (c, h, w) = t.chw();
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * c + ch] = t.data()[ch * h * w + y * w + x];
                }
            }
        }
        Image {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    /// Values snapped to the 8-bit levels a PNG round trip produces.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        out
    }

    /// Write as 8-bit PNG (values clamped, scaled by 255 and rounded).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => {
                return Err(Error::Dimension(format!(
                    "PNG output supports 1, 3 or 4 channels, got {c}"
                )))
            }
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Read a PNG as RGB with values `byte / 255`.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, 3, data)
    }
}

/// A `(2H, 2W, C)` image with the fixed quadrant layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    image: Image,
}

impl ImageGrid {
    /// Wrap an existing image; height and width must be even.
    pub fn from_image(image: Image) -> Result<Self> {
        if image.height % 2 != 0 || image.width % 2 != 0 {
            return Err(Error::Dimension(format!(
                "grid needs even height and width, got {}x{}",
                image.height, image.width
            )));
        }
        Ok(Self { image })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    /// `(H, W)` of a single quadrant.
    pub fn quadrant_dims(&self) -> (usize, usize) {
        (self.image.height / 2, self.image.width / 2)
    }

    pub fn quadrant(&self, index: usize) -> Image {
        let (h, w) = self.quadrant_dims();
        let (y0, x0) = quadrant_origin(index, h, w);
        self.image.crop(y0, x0, h, w)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.image.save_png(path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_image(Image::load_png(path)?)
    }

    /// Write `<stem>_grid.png` and `<stem>_q{0..3}.png` into `dir`.
    pub fn save_with_quadrants(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let mut paths = vec![dir.join(format!("{stem}_grid.png"))];
        self.save_png(&paths[0])?;
        for (i, q) in decompose(self)?.iter().enumerate() {
            let p = dir.join(format!("{stem}_q{i}.png"));
            q.save_png(&p)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// Top-left pixel of quadrant `index` for quadrants of size `h × w`.
pub fn quadrant_origin(index: usize, h: usize, w: usize) -> (usize, usize) {
    match index {
        0 => (0, 0),
        1 => (0, w),
        2 => (h, 0),
        3 => (h, w),
        _ => panic!("quadrant index {index} out of range"),
    }
}

/// Place four equally sized images into the grid layout.
pub fn compose(tl: &Image, tr: &Image, bl: &Image, br: &Image) -> Result<ImageGrid> {
    let quads = [tl, tr, bl, br];
    let dims = tl.dims();
    for (i, q) in quads.iter().enumerate().skip(1) {
        if q.dims() != dims {
            return Err(Error::Dimension(format!(
                "{} quadrant is {:?}, expected {:?} (top-left)",
                QUADRANT_NAMES[i],
                q.dims(),
                dims
            )));
        }
    }
    let (h, w, c) = dims;
    let mut image = Image::filled(2 * h, 2 * w, c, 0.0);
    for (i, q) in quads.iter().enumerate() {
        let (y0, x0) = quadrant_origin(i, h, w);
        image.paste(q, y0, x0);
    }
    Ok(ImageGrid { image })
}

/// Split a grid into its quadrants in layout order.
pub fn decompose(grid: &ImageGrid) -> Result<[Image; 4]> {
    if grid.image.height % 2 != 0 || grid.image.width % 2 != 0 {
        return Err(Error::Dimension(format!(
            "cannot split {}x{} grid into quadrants",
            grid.image.height, grid.image.width
        )));
    }
    Ok([0, 1, 2, 3].map(|i| grid.quadrant(i)))
}

/// Replace the bottom-right quadrant with a uniform grey.
pub fn mask_query(grid: &ImageGrid, grey: f64) -> Result<ImageGrid> {
    if !(0.0..=1.0).contains(&grey) || grey.is_nan() {
        return Err(Error::Range(format!("grey must be in [0, 1], got {grey}")));
    }
    let (h, w) = grid.quadrant_dims();
    let c = grid.image.channels;
    let mut out = grid.clone();
    out.image.paste(&Image::filled(h, w, c, grey), h, w);
    Ok(out)
}

/// Replace the top row (the example pair) with a uniform grey.
pub fn mask_examples(grid: &ImageGrid, grey: f64) -> Result<ImageGrid> {
    if !(0.0..=1.0).contains(&grey) || grey.is_nan() {
        return Err(Error::Range(format!("grey must be in [0, 1], got {grey}")));
    }
    let (h, w) = grid.quadrant_dims();
    let c = grid.image.channels;
    let mut out = grid.clone();
    out.image.paste(&Image::filled(h, 2 * w, c, grey), 0, 0);
    Ok(out)
}
