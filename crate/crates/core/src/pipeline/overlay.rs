//! Cluster overlays: the slide beside a grid of tiles filled with their
//! cluster's color, with a legend underneath.

use crate::error::{Error, Result};
use crate::imagecore::{downsample, RasterImage};
use crate::tiling::PATCH_SIZE;

/// Okabe-Ito plus two of Tol's muted colors; distinguishable under the
/// common color-vision deficiencies. Cluster `c` uses `PALETTE[c % 10]`.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [0, 114, 178],
    [213, 94, 0],
    [204, 121, 167],
    [0, 0, 0],
    [136, 34, 85],
    [153, 153, 153],
];

const BACKGROUND: [u8; 3] = [255, 255, 255];
const GAP: usize = 8;
const SWATCH: usize = 12;
const GLYPH_SCALE: usize = 2;

const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b001, 0b001, 0b001],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Geometry of a rendered overlay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayLayout {
    pub shrink: usize,
    pub panel_width: usize,
    pub panel_height: usize,
    /// Side of one tile in the grid panel.
    pub cell: usize,
}

impl OverlayLayout {
    pub fn new(slide_width: usize, slide_height: usize, shrink: usize) -> Result<Self> {
        if shrink == 0 || !PATCH_SIZE.is_multiple_of(shrink) {
            return Err(Error::InvalidInput(format!("overlay shrink {shrink} must divide {PATCH_SIZE}")));
        }
        Ok(Self {
            shrink,
            panel_width: slide_width / shrink,
            panel_height: slide_height / shrink,
            cell: PATCH_SIZE / shrink,
        })
    }

    /// Pixel at the center of tile `(gx, gy)` in the grid panel.
    pub fn cell_center(&self, gx: usize, gy: usize) -> (usize, usize) {
        (self.panel_width + GAP + gx * self.cell + self.cell / 2, gy * self.cell + self.cell / 2)
    }
}

/// Palette slot of an exact palette color.
pub fn palette_index(rgb: [u8; 3]) -> Option<usize> {
    PALETTE.iter().position(|&p| p == rgb)
}

fn fill(img: &mut RasterImage, x0: usize, y0: usize, w: usize, h: usize, rgb: [u8; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.set_pixel(x, y, rgb);
        }
    }
}

fn draw_number(img: &mut RasterImage, x0: usize, y0: usize, n: usize) -> usize {
    let mut x = x0;
    for ch in n.to_string().bytes() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    fill(img, x + col * GLYPH_SCALE, y0 + row * GLYPH_SCALE, GLYPH_SCALE, GLYPH_SCALE, [0, 0, 0]);
                }
            }
        }
        x += 4 * GLYPH_SCALE;
    }
    x
}

/// Renders `slide` (shrunk by `shrink`) next to its cluster grid. `cells`
/// holds `(grid_x, grid_y, cluster_id)` per tile.
pub fn render_overlay(slide: &RasterImage, cells: &[(usize, usize, usize)], shrink: usize) -> Result<RasterImage> {
    let layout = OverlayLayout::new(slide.width(), slide.height(), shrink)?;
    let small = downsample(slide, shrink)?;
    let mut ids: Vec<usize> = cells.iter().map(|c| c.2).collect();
    ids.sort_unstable();
    ids.dedup();

    let width = 2 * layout.panel_width + GAP;
    let entry_width = SWATCH + 4 + 4 * GLYPH_SCALE * 2 + GAP;
    let per_line = (width / entry_width).max(1);
    let lines = ids.len().div_ceil(per_line).max(1);
    let legend_height = lines * (SWATCH + GAP) + GAP;
    let height = layout.panel_height + legend_height;

    let mut out = RasterImage::filled(width, height, BACKGROUND)?;
    out.blit(&small, 0, 0);
    for &(gx, gy, c) in cells {
        let x0 = layout.panel_width + GAP + gx * layout.cell;
        let y0 = gy * layout.cell;
        if x0 + layout.cell > width || y0 + layout.cell > layout.panel_height {
            return Err(Error::InvalidInput(format!("tile ({gx}, {gy}) lies outside the slide")));
        }
        fill(&mut out, x0, y0, layout.cell, layout.cell, PALETTE[c % PALETTE.len()]);
    }
    for (i, &c) in ids.iter().enumerate() {
        let x = (i % per_line) * entry_width + GAP;
        let y = layout.panel_height + GAP + (i / per_line) * (SWATCH + GAP);
        fill(&mut out, x, y, SWATCH, SWATCH, PALETTE[c % PALETTE.len()]);
        draw_number(&mut out, x + SWATCH + 4, y + 1, c);
    }
    Ok(out)
}
