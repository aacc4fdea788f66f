use crate::data::PageImage;
use crate::error::{Error, Result};

pub const DEFAULT_EDGE_LOW: f64 = 50.0;
pub const DEFAULT_EDGE_HIGH: f64 = 100.0;

/// Sobel gradient magnitude of the luminance plane, borders replicated.
pub fn sobel_magnitude(img: &PageImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let lum = img.luminance();
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        lum[yc * w + xc]
    };
    let mut mag = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            mag[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    mag
}

/// Binary edge map: black (0) edges on white (255).
///
/// The Sobel magnitude is scaled so its maximum is 255. Pixels at or above
/// `high` are edges, and pixels at or above `low` join them when 8-connected
/// to an edge. A constant image has no edges.
pub fn edge_map(img: &PageImage, low: f64, high: f64) -> Result<PageImage> {
    if !(0.0..=255.0).contains(&low) || !(low..=255.0).contains(&high) {
        return Err(Error::Config(format!("need 0 <= low <= high <= 255, got {low} and {high}")));
    }
    let (w, h) = (img.width(), img.height());
    let mag = sobel_magnitude(img);
    let peak = mag.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut edge = vec![false; w * h];
    if peak > 0.0 {
        let norm: Vec<f64> = mag.iter().map(|v| v * 255.0 / peak).collect();
        let mut stack: Vec<usize> = (0..w * h).filter(|&i| norm[i] >= high).collect();
        stack.iter().for_each(|&i| edge[i] = true);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !edge[j] && norm[j] >= low {
                        edge[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    PageImage::gray(w, h, edge.iter().map(|&e| if e { 0 } else { 255 }).collect())
}
