use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use panelf_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit raster, row-major, with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PageImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl PageImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!("image must be non-empty, got {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Geometry(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(PageImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 3, pixels)
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::rgb(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixel at `(x, y)` as RGB; gray values are replicated.
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * self.channels;
        match self.channels {
            1 => [self.pixels[i]; 3],
            _ => [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * self.channels;
        match self.channels {
            1 => self.pixels[i] = luma(rgb).round() as u8,
            _ => self.pixels[i..i + 3].copy_from_slice(&rgb),
        }
    }

    /// Luminance plane (Rec. 601 weights) in `[0, 255]`.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            1 => self.pixels.iter().map(|&v| v as f64).collect(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|p| luma([p[0], p[1], p[2]]))
                .collect(),
        }
    }

    pub fn to_gray(&self) -> PageImage {
        let pixels = self.luminance().iter().map(|v| v.round() as u8).collect();
        PageImage {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    /// Copy of the `w × h` region whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<PageImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Geometry(format!(
                "crop [{x0}, {}) x [{y0}, {}) outside {}x{} image",
                x0 + w,
                y0 + h,
                self.width,
                self.height
            )));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            pixels.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        PageImage::new(w, h, c, pixels)
    }

    pub fn load_png(path: &Path) -> Result<PageImage> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            PageImage::rgb(w as usize, h as usize, rgb.into_raw())
        } else {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            PageImage::gray(w as usize, h as usize, g.into_raw())
        }
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("png.tmp");
        let (w, h) = (self.width as u32, self.height as u32);
        let written = match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, self.pixels.clone())
                .expect("buffer length checked at construction")
                .save_with_format(&tmp, image::ImageFormat::Png),
            _ => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, self.pixels.clone())
                .expect("buffer length checked at construction")
                .save_with_format(&tmp, image::ImageFormat::Png),
        };
        written.map_err(|e| Error::image(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn luma([r, g, b]: [u8; 3]) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Gray image to a `[1, H, W]` tensor with `0 → -1` and `255 → 1`.
pub fn image_to_tensor(img: &PageImage) -> Result<Tensor> {
    let data = img.luminance().iter().map(|v| (v / 127.5 - 1.0) as f32).collect();
    Ok(Tensor::new(vec![1, img.height(), img.width()], data)?)
}

/// Inverse of [`image_to_tensor`], clamping to `[-1, 1]` and rounding to the nearest level.
pub fn tensor_to_image(t: &Tensor) -> Result<PageImage> {
    let &[1, h, w] = t.shape() else {
        return Err(Error::Config(format!("expected a [1, H, W] tensor, got {:?}", t.shape())));
    };
    let pixels = t
        .data()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8)
        .collect();
    PageImage::gray(w, h, pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageClass {
    BlackWhite,
    Color,
}

pub const DEFAULT_COLOR_THRESHOLD: u8 = 10;

/// Largest `max(|R−G|, |G−B|)` over all pixels.
pub fn max_channel_difference(p: &PageImage) -> u8 {
    if p.channels() == 1 {
        return 0;
    }
    p.pixels()
        .chunks_exact(3)
        .map(|c| c[0].abs_diff(c[1]).max(c[1].abs_diff(c[2])))
        .max()
        .unwrap_or(0)
}

/// Black-and-white when the largest channel difference is at most `threshold`.
pub fn classify_page(p: &PageImage, threshold: u8) -> PageClass {
    if max_channel_difference(p) <= threshold {
        PageClass::BlackWhite
    } else {
        PageClass::Color
    }
}

/// Fixed-coordinate strip layout; panels are laid out left to right, top to bottom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelGrid {
    pub rows: usize,
    pub cols: usize,
    pub margin_left: usize,
    pub margin_right: usize,
    pub margin_top: usize,
    pub margin_bottom: usize,
    pub gutter_x: usize,
    pub gutter_y: usize,
}

impl Default for PanelGrid {
    fn default() -> Self {
        PanelGrid {
            rows: 2,
            cols: 4,
            margin_left: 0,
            margin_right: 0,
            margin_top: 0,
            margin_bottom: 0,
            gutter_x: 0,
            gutter_y: 0,
        }
    }
}

/// Top-left corner and size of one panel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PanelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PanelGrid {
    /// Parses `rows,cols[,margin[,gutter]]` with uniform margins and gutters.
    pub fn parse(spec: &str) -> Result<Self> {
        let nums = spec
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("bad grid `{spec}`: {e}")))?;
        let (rows, cols, margin, gutter) = match nums[..] {
            [r, c] => (r, c, 0, 0),
            [r, c, m] => (r, c, m, 0),
            [r, c, m, g] => (r, c, m, g),
            _ => return Err(Error::Config(format!("grid `{spec}` must be rows,cols[,margin[,gutter]]"))),
        };
        Ok(PanelGrid {
            rows,
            cols,
            margin_left: margin,
            margin_right: margin,
            margin_top: margin,
            margin_bottom: margin,
            gutter_x: gutter,
            gutter_y: gutter,
        })
    }

    /// Panel rectangles for a `width × height` page, in reading order.
    ///
    /// Panel sizes are floored; any remainder stays unassigned at the right and bottom.
    pub fn layout(&self, width: usize, height: usize) -> Result<Vec<PanelRect>> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Geometry("grid needs at least one row and column".into()));
        }
        let used_x = self.margin_left + self.margin_right + (self.cols - 1) * self.gutter_x;
        let used_y = self.margin_top + self.margin_bottom + (self.rows - 1) * self.gutter_y;
        if used_x >= width || used_y >= height {
            return Err(Error::Geometry(format!(
                "margins and gutters need {used_x}x{used_y} pixels on a {width}x{height} page"
            )));
        }
        let pw = (width - used_x) / self.cols;
        let ph = (height - used_y) / self.rows;
        if pw == 0 || ph == 0 {
            return Err(Error::Geometry(format!(
                "{}x{} grid leaves empty panels on a {width}x{height} page",
                self.rows, self.cols
            )));
        }
        let mut rects = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                rects.push(PanelRect {
                    x: self.margin_left + c * (pw + self.gutter_x),
                    y: self.margin_top + r * (ph + self.gutter_y),
                    width: pw,
                    height: ph,
                });
            }
        }
        Ok(rects)
    }
}

/// Crops every grid panel from `p` in reading order.
pub fn extract_panels(p: &PageImage, g: &PanelGrid) -> Result<Vec<PageImage>> {
    g.layout(p.width(), p.height())?
        .iter()
        .map(|r| p.crop(r.x, r.y, r.width, r.height))
        .collect()
}

/// `floor(volumes · pages · bw_fraction · strips · panels)`.
pub fn expected_panel_count(
    volumes: u64,
    pages_per_volume: u64,
    bw_fraction: f64,
    strips_per_page: u64,
    panels_per_strip: u64,
) -> u64 {
    let n = volumes as f64 * pages_per_volume as f64 * bw_fraction * strips_per_page as f64 * panels_per_strip as f64;
    n.floor().max(0.0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classification_boundary() {
        let mut p = PageImage::filled(4, 4, [120, 120, 120]).unwrap();
        assert_eq!(classify_page(&p, 10), PageClass::BlackWhite);
        p.put(1, 2, [100, 110, 100]);
        assert_eq!(classify_page(&p, 10), PageClass::BlackWhite);
        p.put(3, 3, [100, 111, 100]);
        assert_eq!(classify_page(&p, 10), PageClass::Color);
        p.put(0, 0, [255, 0, 0]);
        assert_eq!(max_channel_difference(&p), 255);
    }

    #[test]
    fn red_minus_blue_is_not_checked() {
        let p = PageImage::filled(2, 2, [100, 110, 120]).unwrap();
        assert_eq!(classify_page(&p, 10), PageClass::BlackWhite);
    }

    #[test]
    fn eight_equal_panels() {
        let mut pixels = Vec::with_capacity(800 * 1200 * 3);
        for i in 0..800 * 1200 {
            pixels.extend_from_slice(&[(i % 251) as u8, (i % 13) as u8, (i / 7 % 256) as u8]);
        }
        let page = PageImage::rgb(800, 1200, pixels).unwrap();
        let panels = extract_panels(&page, &PanelGrid::default()).unwrap();
        assert_eq!(panels.len(), 8);
        assert!(panels.iter().all(|p| p.width() == 200 && p.height() == 600));
        for (k, panel) in panels.iter().enumerate() {
            let (ox, oy) = ((k % 4) * 200, (k / 4) * 600);
            for (x, y) in [(0, 0), (199, 599), (57, 311)] {
                assert_eq!(panel.get(x, y), page.get(ox + x, oy + y));
            }
        }
    }

    #[test]
    fn grid_outside_page() {
        let page = PageImage::filled(40, 40, [0; 3]).unwrap();
        let g = PanelGrid::parse("2,4,15,4").unwrap();
        assert!(matches!(extract_panels(&page, &g), Err(Error::Geometry(_))));
        assert!(PanelGrid::parse("2").is_err());
    }

    #[test]
    fn panel_counts() {
        assert_eq!(expected_panel_count(11, 166, 2.0 / 3.0, 2, 4), 9738);
        assert_eq!(expected_panel_count(1, 1, 1.0, 1, 1), 1);
        assert_eq!(expected_panel_count(0, 166, 2.0 / 3.0, 2, 4), 0);
    }

    #[test]
    fn tensor_roundtrip() {
        let img = PageImage::gray(3, 1, vec![0, 128, 255]).unwrap();
        let t = image_to_tensor(&img).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.to_vec()[0], -1.0);
        assert_eq!(t.to_vec()[2], 1.0);
        assert_eq!(tensor_to_image(&t).unwrap(), img);
    }

    proptest! {
        #[test]
        fn classification_ignores_pixel_order(seed in 0u64..1000, n in 1usize..40) {
            let mut rng = panelf_core::Rng::new(seed);
            let mut px: Vec<[u8; 3]> = (0..n).map(|_| {
                let g = rng.below(256) as u8;
                [g.saturating_add(rng.below(16) as u8), g, g]
            }).collect();
            let a = PageImage::rgb(n, 1, px.concat()).unwrap();
            px.reverse();
            px.rotate_left(seed as usize % n);
            let b = PageImage::rgb(n, 1, px.concat()).unwrap();
            prop_assert_eq!(classify_page(&a, 10), classify_page(&b, 10));
        }

        #[test]
        fn panels_partition_the_page(rows in 1usize..4, cols in 1usize..5, pw in 1usize..9, ph in 1usize..9) {
            let (w, h) = (cols * pw, rows * ph);
            let pixels: Vec<u8> = (0..w * h).map(|i| (i * 37 % 256) as u8).collect();
            let page = PageImage::gray(w, h, pixels).unwrap();
            let g = PanelGrid { rows, cols, ..PanelGrid::default() };
            let panels = extract_panels(&page, &g).unwrap();
            let mut rebuilt = vec![0u8; w * h];
            let mut hits = vec![0u8; w * h];
            for (k, p) in panels.iter().enumerate() {
                let (ox, oy) = ((k % cols) * pw, (k / cols) * ph);
                for y in 0..ph {
                    for x in 0..pw {
                        rebuilt[(oy + y) * w + ox + x] = p.get(x, y)[0];
                        hits[(oy + y) * w + ox + x] += 1;
                    }
                }
            }
            prop_assert!(hits.iter().all(|&c| c == 1));
            prop_assert_eq!(&rebuilt[..], page.pixels());
        }
    }
}
