//! Rasterization of maps to binary PPM (P6) images.
//!
//! One colored block per cell; unobserved cells use a reserved gray that no
//! palette entry should reuse. Rendering is deterministic: equal inputs give
//! byte-identical output.

use crate::error::{Error, Result};
use crate::map::palette::CategoryPalette;
use crate::map::semantic::{PartialMap, SemanticMap};

/// Color reserved for unobserved cells.
pub const UNOBSERVED_GRAY: [u8; 3] = [128, 128, 128];

/// An RGB pixel buffer; intermediate form for composing panels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        Raster { width, height, rgb }
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, color: [u8; 3]) {
        let at = (row * self.width + col) * 3;
        self.rgb[at..at + 3].copy_from_slice(&color);
    }

    /// Encode as binary PPM (P6). `comments` lines are embedded after the
    /// magic, each prefixed with `#`.
    pub fn to_ppm(&self, comments: &[String]) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rgb.len() + 64);
        out.extend_from_slice(b"P6\n");
        for line in comments {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        out.extend_from_slice(format!("{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.rgb);
        out
    }
}

fn cell_raster<F>(height: usize, width: usize, scale: usize, color_at: F) -> Raster
where
    F: Fn(usize, usize) -> [u8; 3],
{
    let mut raster = Raster::filled(width * scale, height * scale, [0, 0, 0]);
    for i in 0..height {
        for j in 0..width {
            let color = color_at(i, j);
            for di in 0..scale {
                for dj in 0..scale {
                    raster.set(i * scale + di, j * scale + dj, color);
                }
            }
        }
    }
    raster
}

fn check_palette(channels: usize, palette: &CategoryPalette) -> Result<()> {
    if channels != palette.len() {
        return Err(Error::shape("render palette", &[channels], &[palette.len()]));
    }
    Ok(())
}

/// Rasterize a complete map; `scale` pixels per cell.
pub fn render_map(map: &SemanticMap, palette: &CategoryPalette, scale: usize) -> Result<Raster> {
    check_palette(map.channels(), palette)?;
    let scale = scale.max(1);
    Ok(cell_raster(map.height(), map.width(), scale, |i, j| {
        palette.get(map.label(i, j)).expect("label validated").color
    }))
}

/// Rasterize a partial map; unobserved cells use [`UNOBSERVED_GRAY`].
pub fn render_partial(pm: &PartialMap, palette: &CategoryPalette, scale: usize) -> Result<Raster> {
    check_palette(pm.channels(), palette)?;
    let scale = scale.max(1);
    Ok(cell_raster(pm.height(), pm.width(), scale, |i, j| {
        match pm.label(i, j) {
            Some(l) => palette.get(l).expect("label validated").color,
            None => UNOBSERVED_GRAY,
        }
    }))
}

/// Compose rasters side by side with a 1-pixel white separator.
pub fn render_row(panels: &[Raster]) -> Result<Raster> {
    if panels.is_empty() {
        return Err(Error::invalid("render_row requires at least one panel"));
    }
    let height = panels[0].height;
    if panels.iter().any(|p| p.height != height) {
        return Err(Error::invalid("render_row panels must share height"));
    }
    let gap = 1usize;
    let width: usize = panels.iter().map(|p| p.width).sum::<usize>() + gap * (panels.len() - 1);
    let mut out = Raster::filled(width, height, [255, 255, 255]);
    let mut x0 = 0usize;
    for panel in panels {
        for i in 0..height {
            for j in 0..panel.width {
                let at = (i * panel.width + j) * 3;
                out.set(i, x0 + j, [panel.rgb[at], panel.rgb[at + 1], panel.rgb[at + 2]]);
            }
        }
        x0 += panel.width + gap;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::semantic::onehot_encode;

    #[test]
    fn single_free_pixel() {
        let palette = CategoryPalette::default_indoor();
        let map = onehot_encode(&[0], 1, 1, &palette).unwrap();
        let ppm = render_map(&map, &palette, 1).unwrap().to_ppm(&[]);
        assert_eq!(&ppm[..9], b"P6\n1 1\n25");
        assert_eq!(&ppm[ppm.len() - 3..], &palette.get(0).unwrap().color);
    }

    #[test]
    fn fully_unobserved_is_uniform_gray() {
        let palette = CategoryPalette::default_indoor();
        let pm = PartialMap::new(2, 2, 6, vec![0; 4], vec![false; 4]).unwrap();
        let raster = render_partial(&pm, &palette, 1).unwrap();
        for px in raster.rgb.chunks(3) {
            assert_eq!(px, UNOBSERVED_GRAY);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let palette = CategoryPalette::default_indoor();
        let map = onehot_encode(&[0, 1, 2, 3], 2, 2, &palette).unwrap();
        let a = render_map(&map, &palette, 3).unwrap().to_ppm(&[]);
        let b = render_map(&map, &palette, 3).unwrap().to_ppm(&[]);
        assert_eq!(a, b);
    }

    #[test]
    fn scale_multiplies_dimensions() {
        let palette = CategoryPalette::default_indoor();
        let map = onehot_encode(&[0, 1], 1, 2, &palette).unwrap();
        let raster = render_map(&map, &palette, 4).unwrap();
        assert_eq!((raster.width, raster.height), (8, 4));
    }

    #[test]
    fn row_composition_width() {
        let a = Raster::filled(3, 2, [1, 2, 3]);
        let b = Raster::filled(4, 2, [4, 5, 6]);
        let row = render_row(&[a, b]).unwrap();
        assert_eq!((row.width, row.height), (8, 2));
    }
}
