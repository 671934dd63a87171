//! Masked reconstruction penalty over detail-critical segment classes.

use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_grid::{Image, ImageGrid};
use crate::providers::{InstructionUnifier, Segmenter};
use crate::tensor::Tensor;

/// Binary per-pixel mask over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveMask {
    pub height: usize,
    pub width: usize,
    /// Row-major, each entry 0.0 or 1.0.
    pub values: Vec<f64>,
    pub source_classes: Vec<String>,
}

impl SelectiveMask {
    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            values: vec![if on { 1.0 } else { 0.0 }; height * width],
            source_classes: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// The mask repeated over `channels`, as a `[C, H, W]` tensor.
    pub fn broadcast(&self, channels: usize) -> Tensor {
        let data = (0..channels).flat_map(|_| self.values.iter().copied()).collect();
        Tensor::new(vec![channels, self.height, self.width], data).expect("mask shape")
    }

    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, 1, self.values.clone()).expect("mask shape")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image().save_png(path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = Image::load_png(path)?;
        let (h, w, c) = img.dims();
        let values = (0..h * w)
            .map(|i| if img.data()[i * c] >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            values,
            source_classes: Vec::new(),
        })
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.height != h || self.width != w {
            return Err(Error::Dimension(format!(
                "mask is {}x{}, grid is {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Segment the truth grid, keep the classes the unifier assigns to
/// `selected`, and mark their pixels.
pub fn build_mask(
    truth_grid: &ImageGrid,
    seg: &dyn Segmenter,
    uni: &dyn InstructionUnifier,
    selected: &[String],
) -> Result<SelectiveMask> {
    let img = truth_grid.image();
    let s = seg.segment(img)?;
    if s.height != img.height() || s.width != img.width() || s.label_map.len() != s.height * s.width {
        return Err(Error::Provider(format!(
            "segmenter returned a {}x{} map for a {}x{} image",
            s.height,
            s.width,
            img.height(),
            img.width()
        )));
    }
    if let Some(bad) = s.label_map.iter().find(|l| s.class_name(**l).is_none()) {
        return Err(Error::Provider(format!("segmenter label {bad} is not in its class list")));
    }
    let names: Vec<String> = s.classes.iter().map(|(_, n)| n.clone()).collect();
    let kept = uni.filter_classes(&names, selected);
    let ids: Vec<u32> = s
        .classes
        .iter()
        .filter(|(_, n)| kept.contains(n))
        .map(|(i, _)| *i)
        .collect();
    let values = s
        .label_map
        .iter()
        .map(|l| if ids.contains(l) { 1.0 } else { 0.0 })
        .collect();
    Ok(SelectiveMask {
        height: s.height,
        width: s.width,
        values,
        source_classes: kept,
    })
}

fn divisor(mask: &SelectiveMask, channels: usize, normalize_by_mask: bool) -> f64 {
    if normalize_by_mask {
        (mask.count() * channels) as f64
    } else {
        (mask.height * mask.width * channels) as f64
    }
}

/// `Σ (mask · (pseudo - truth))² / (H · W · C)`, or divided by the masked
/// entry count when `normalize_by_mask` is set (0 for an empty mask).
pub fn selective_area_loss(
    pseudo: &ImageGrid,
    truth: &ImageGrid,
    mask: &SelectiveMask,
    normalize_by_mask: bool,
) -> Result<f64> {
    let (p, t) = (pseudo.image(), truth.image());
    if p.dims() != t.dims() {
        return Err(Error::Dimension(format!(
            "pseudo grid {:?} and truth grid {:?} differ",
            p.dims(),
            t.dims()
        )));
    }
    let (h, w, c) = p.dims();
    mask.check(h, w)?;
    let n = divisor(mask, c, normalize_by_mask);
    if n == 0.0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, (a, b)) in p.data().iter().zip(t.data()).enumerate() {
        let d = mask.values[i / c] * (a - b);
        sum += d * d;
    }
    Ok(sum / n)
}

/// [`selective_area_loss`] on the tape for a `[C, H, W]` pseudo map.
pub fn selective_area_loss_graph(
    g: &mut Graph,
    pseudo: Var,
    truth: &Tensor,
    mask: &SelectiveMask,
    normalize_by_mask: bool,
) -> Result<Var> {
    g.value(pseudo).ensure_same_shape(truth, "truth grid")?;
    let (c, h, w) = truth.chw();
    mask.check(h, w)?;
    let n = divisor(mask, c, normalize_by_mask);
    let t = g.constant(truth.clone());
    let d = g.sub(pseudo, t);
    let m = g.mul_const(d, mask.broadcast(c));
    let s = g.sum_sq(m);
    Ok(g.scale(s, if n == 0.0 { 0.0 } else { 1.0 / n }))
}
