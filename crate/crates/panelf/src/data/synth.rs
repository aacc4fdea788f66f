//! Deterministic synthetic corpora for tests and toy training runs.

use panelf_core::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PageImage, PanelGrid};
use crate::error::Result;

/// Dark ink and paper levels of the scanned strips.
pub const INK: u8 = 3;
pub const PAPER: u8 = 250;

pub const SHAPE_PANEL_SIZE: usize = 32;
pub const SYNTH_PAGE_WIDTH: usize = 160;
pub const SYNTH_PAGE_HEIGHT: usize = 240;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    BwPages,
    ColorPages,
    ShapePanels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Cross,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Cross, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Cross => "cross",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn caption(self) -> String {
        format!("a {}", self.name())
    }
}

fn fill_rect(img: &mut PageImage, x0: usize, y0: usize, w: usize, h: usize, rgb: [u8; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put(x, y, rgb);
        }
    }
}

/// Gray page with scan jitter, panel borders, and random ink strokes inside each panel.
fn bw_page(rng: &mut Rng) -> Result<PageImage> {
    let (w, h) = (SYNTH_PAGE_WIDTH, SYNTH_PAGE_HEIGHT);
    let mut img = PageImage::filled(w, h, [PAPER; 3])?;
    for y in 0..h {
        for x in 0..w {
            // Per-channel jitter of at most 3 keeps channel differences well under the threshold.
            let base = PAPER - rng.below(3) as u8;
            let j = |r: &mut Rng| base - r.below(4) as u8;
            img.put(x, y, [j(rng), j(rng), j(rng)]);
        }
    }
    let grid = PanelGrid::parse("2,4,6,6")?;
    for r in grid.layout(w, h)? {
        let ink = [INK; 3];
        fill_rect(&mut img, r.x, r.y, r.width, 2, ink);
        fill_rect(&mut img, r.x, r.y + r.height - 2, r.width, 2, ink);
        fill_rect(&mut img, r.x, r.y, 2, r.height, ink);
        fill_rect(&mut img, r.x + r.width - 2, r.y, 2, r.height, ink);
        for _ in 0..3 {
            let sw = 2 + rng.below(r.width / 2);
            let sh = 2 + rng.below(r.height / 3);
            let sx = r.x + 3 + rng.below(r.width - sw - 5);
            let sy = r.y + 3 + rng.below(r.height - sh - 5);
            fill_rect(&mut img, sx, sy, sw, sh, ink);
        }
    }
    Ok(img)
}

/// A gray page with saturated colour blocks painted over some panels.
fn color_page(rng: &mut Rng) -> Result<PageImage> {
    let mut img = bw_page(rng)?;
    let blocks = 1 + rng.below(4);
    for _ in 0..blocks {
        let mut rgb = [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8];
        let hot = rng.below(3);
        rgb[hot] = 255;
        rgb[(hot + 1) % 3] = rng.below(64) as u8;
        let (bw, bh) = (8 + rng.below(40), 8 + rng.below(60));
        let (bx, by) = (rng.below(img.width() - bw), rng.below(img.height() - bh));
        fill_rect(&mut img, bx, by, bw, bh, rgb);
    }
    Ok(img)
}

/// One `size × size` gray panel with a filled ink shape at a random position and scale.
pub fn shape_panel(kind: ShapeKind, size: usize, rng: &mut Rng) -> Result<PageImage> {
    let mut px = vec![PAPER; size * size];
    let s = size as f64;
    let r = s * (0.2 + 0.1 * rng.uniform());
    let cx = s / 2.0 + (rng.uniform() - 0.5) * (s - 2.0 * r - 2.0);
    let cy = s / 2.0 + (rng.uniform() - 0.5) * (s - 2.0 * r - 2.0);
    let bar = (r * 0.35).max(1.5);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match kind {
                ShapeKind::Circle => dx.hypot(dy) <= r,
                ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                ShapeKind::Cross => (dx.abs() <= bar && dy.abs() <= r) || (dy.abs() <= bar && dx.abs() <= r),
                ShapeKind::Triangle => {
                    // Apex up; the half-width grows linearly from the apex to the base.
                    let t = (dy + r) / (2.0 * r);
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * r
                }
            };
            if inside {
                px[y * size + x] = INK;
            }
        }
    }
    PageImage::gray(size, size, px)
}

/// `n` labelled shape panels cycling through the four classes.
pub fn generate_shape_panels(n: usize, seed: u64) -> Result<Vec<(PageImage, ShapeKind)>> {
    let mut rng = Rng::with_stream(seed, 3);
    (0..n)
        .map(|i| {
            let kind = ShapeKind::ALL[i % 4];
            Ok((shape_panel(kind, SHAPE_PANEL_SIZE, &mut rng)?, kind))
        })
        .collect()
}

pub fn generate_synthetic_corpus(kind: SyntheticKind, n: usize, seed: u64) -> Result<Vec<PageImage>> {
    match kind {
        SyntheticKind::BwPages => {
            let mut rng = Rng::with_stream(seed, 1);
            (0..n).map(|_| bw_page(&mut rng)).collect()
        }
        SyntheticKind::ColorPages => {
            let mut rng = Rng::with_stream(seed, 2);
            (0..n).map(|_| color_page(&mut rng)).collect()
        }
        SyntheticKind::ShapePanels => Ok(generate_shape_panels(n, seed)?.into_iter().map(|(p, _)| p).collect()),
    }
}
