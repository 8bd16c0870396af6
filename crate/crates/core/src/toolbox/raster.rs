//! Native raster tools: crop, nearest-neighbour zoom, and constant-alpha overlay.

use serde::{Deserialize, Serialize};

use super::ToolError;
use crate::image::Raster;

/// Pixel rectangle; may extend past the image and is clamped before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

/// Half-open pixel bounds `[x0, x1) x [y0, y1)` inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Bounds {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

impl Rect {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }

    /// Intersects the rectangle with a `width x height` image. `None` when
    /// nothing of positive area remains.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<Bounds> {
        if self.w <= 0 || self.h <= 0 {
            return None;
        }
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = self.x.saturating_add(self.w).min(width as i64);
        let y1 = self.y.saturating_add(self.h).min(height as i64);
        (x1 > x0 && y1 > y0).then_some(Bounds {
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
        })
    }
}

pub fn crop(image: &Raster, rect: Rect) -> Result<Raster, ToolError> {
    let b = rect.clamp_to(image.width(), image.height()).ok_or(ToolError::EmptyRegion)?;
    let row_bytes = b.width() as usize * 4;
    let stride = image.width() as usize * 4;
    let mut pixels = Vec::with_capacity(row_bytes * b.height() as usize);
    for y in b.y0..b.y1 {
        let start = y as usize * stride + b.x0 as usize * 4;
        pixels.extend_from_slice(&image.pixels()[start..start + row_bytes]);
    }
    Ok(Raster::new(b.width(), b.height(), pixels).expect("crop buffer size"))
}

/// Crop followed by a nearest-neighbour upscale. Output dimensions are the
/// clamped rect dimensions times `factor`, rounded down.
pub fn zoom_in(image: &Raster, rect: Rect, factor: f64) -> Result<Raster, ToolError> {
    if !factor.is_finite() || factor < 1.0 {
        return Err(ToolError::FactorOutOfRange(factor));
    }
    let src = crop(image, rect)?;
    let out_w = (src.width() as f64 * factor).floor() as u32;
    let out_h = (src.height() as f64 * factor).floor() as u32;
    let mut pixels = Vec::with_capacity(out_w as usize * out_h as usize * 4);
    for oy in 0..out_h {
        let sy = ((oy as f64 / factor).floor() as u32).min(src.height() - 1);
        for ox in 0..out_w {
            let sx = ((ox as f64 / factor).floor() as u32).min(src.width() - 1);
            pixels.extend_from_slice(&src.pixel(sx, sy));
        }
    }
    Ok(Raster::new(out_w, out_h, pixels).expect("zoom buffer size"))
}

/// Blends `layer` placed at `(dx, dy)` over `base` with a constant alpha.
///
/// Every channel (alpha included) is mixed as `base·(1−α) + layer·α` and
/// rounded half-up. Pixels outside the intersection keep the base value.
pub fn overlay(base: &Raster, layer: &Raster, dx: i64, dy: i64, alpha: f64) -> Result<Raster, ToolError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ToolError::InvalidArguments {
            action: super::ActionKind::Overlay,
            reason: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    let placed = Rect::new(dx, dy, layer.width() as i64, layer.height() as i64);
    let b = placed.clamp_to(base.width(), base.height()).ok_or(ToolError::NoIntersection)?;
    let mut out = base.clone();
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let under = base.pixel(x, y);
            let over = layer.pixel((x as i64 - dx) as u32, (y as i64 - dy) as u32);
            let mut px = [0u8; 4];
            for c in 0..4 {
                px[c] = blend_channel(under[c], over[c], alpha);
            }
            out.set_pixel(x, y, px);
        }
    }
    Ok(out)
}

pub(crate) fn blend_channel(under: u8, over: u8, alpha: f64) -> u8 {
    let v = under as f64 * (1.0 - alpha) + over as f64 * alpha;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> Raster {
        let mut r = Raster::filled(w, h, [0, 0, 0, 255]);
        for y in 0..h {
            for x in 0..w {
                r.set_pixel(x, y, [x as u8, y as u8, (x ^ y) as u8, 255]);
            }
        }
        r
    }

    #[test]
    fn crop_geometry() {
        let img = gradient(100, 100);
        let out = crop(&img, Rect::new(0, 0, 50, 50)).unwrap();
        assert_eq!((out.width(), out.height()), (50, 50));
        assert_eq!(out.pixel(49, 49), img.pixel(49, 49));
    }

    #[test]
    fn full_rect_is_identity() {
        let img = gradient(17, 9);
        assert_eq!(crop(&img, Rect::new(0, 0, 17, 9)).unwrap(), img);
    }

    #[test]
    fn out_of_bounds_rect_is_clamped() {
        let img = gradient(20, 10);
        let out = crop(&img, Rect::new(15, -5, 100, 8)).unwrap();
        assert_eq!((out.width(), out.height()), (5, 3));
        assert_eq!(out.pixel(0, 0), img.pixel(15, 0));
        assert_eq!(out.pixel(4, 2), img.pixel(19, 2));
    }

    #[test]
    fn zero_area_is_empty_region() {
        let img = gradient(10, 10);
        assert!(matches!(crop(&img, Rect::new(3, 3, 0, 4)), Err(ToolError::EmptyRegion)));
        assert!(matches!(crop(&img, Rect::new(30, 3, 5, 4)), Err(ToolError::EmptyRegion)));
    }

    #[test]
    fn zoom_factor_one_equals_crop() {
        let img = gradient(30, 30);
        let r = Rect::new(4, 5, 11, 7);
        assert_eq!(zoom_in(&img, r, 1.0).unwrap(), crop(&img, r).unwrap());
    }

    #[test]
    fn zoom_factor_two_makes_blocks() {
        let img = gradient(30, 30);
        let out = zoom_in(&img, Rect::new(10, 10, 10, 10), 2.0).unwrap();
        assert_eq!((out.width(), out.height()), (20, 20));
        for y in 0..20 {
            for x in 0..20 {
                assert_eq!(out.pixel(x, y), img.pixel(10 + x / 2, 10 + y / 2));
            }
        }
    }

    #[test]
    fn zoom_rejects_shrinking() {
        let img = gradient(10, 10);
        assert!(matches!(
            zoom_in(&img, Rect::new(0, 0, 5, 5), 0.5),
            Err(ToolError::FactorOutOfRange(_))
        ));
    }

    #[test]
    fn overlay_alpha_extremes() {
        let base = gradient(8, 8);
        let layer = Raster::filled(4, 4, [200, 10, 30, 255]);
        assert_eq!(overlay(&base, &layer, 2, 2, 0.0).unwrap(), base);
        let full = overlay(&base, &layer, 2, 2, 1.0).unwrap();
        assert_eq!(full.pixel(3, 3), [200, 10, 30, 255]);
        assert_eq!(full.pixel(0, 0), base.pixel(0, 0));
        assert_eq!(full.pixel(6, 6), base.pixel(6, 6));
    }

    #[test]
    fn half_black_over_white_is_128() {
        let white = Raster::filled(3, 3, [255, 255, 255, 255]);
        let black = Raster::filled(3, 3, [0, 0, 0, 255]);
        let out = overlay(&white, &black, 0, 0, 0.5).unwrap();
        assert_eq!(out.pixel(1, 1), [128, 128, 128, 255]);
    }

    #[test]
    fn disjoint_layer_is_rejected() {
        let base = gradient(8, 8);
        let layer = Raster::filled(4, 4, [1, 2, 3, 4]);
        assert!(matches!(overlay(&base, &layer, 8, 0, 0.3), Err(ToolError::NoIntersection)));
        assert!(matches!(overlay(&base, &layer, -4, -4, 0.3), Err(ToolError::NoIntersection)));
    }
}
