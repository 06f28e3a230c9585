//! Dominant-color extraction by modified median cut, and naming of
//! palette colors against a fixed 11-color vocabulary.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PaletteError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("palette size must be at least 1")]
    ZeroColors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub rgb: [u8; 3],
    /// Fraction of pixels in this entry's box.
    pub frequency: f64,
}

/// Entries sorted by descending frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub entries: Vec<PaletteEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamedColor {
    pub name: &'static str,
    pub anchor_rgb: [u8; 3],
}

/// Web-color anchors for the color vocabulary.
pub const COLOR_VOCABULARY: [NamedColor; 11] = [
    NamedColor { name: "black", anchor_rgb: [0x00, 0x00, 0x00] },
    NamedColor { name: "blue", anchor_rgb: [0x00, 0x00, 0xFF] },
    NamedColor { name: "brown", anchor_rgb: [0xA5, 0x2A, 0x2A] },
    NamedColor { name: "gray", anchor_rgb: [0x80, 0x80, 0x80] },
    NamedColor { name: "green", anchor_rgb: [0x00, 0x80, 0x00] },
    NamedColor { name: "orange", anchor_rgb: [0xFF, 0xA5, 0x00] },
    NamedColor { name: "pink", anchor_rgb: [0xFF, 0xC0, 0xCB] },
    NamedColor { name: "purple", anchor_rgb: [0x80, 0x00, 0x80] },
    NamedColor { name: "red", anchor_rgb: [0xFF, 0x00, 0x00] },
    NamedColor { name: "white", anchor_rgb: [0xFF, 0xFF, 0xFF] },
    NamedColor { name: "yellow", anchor_rgb: [0xFF, 0xFF, 0x00] },
];

pub const DEFAULT_PALETTE_SIZE: usize = 5;
pub const DEFAULT_PHRASE_COLORS: usize = 3;

/// Share of splits chosen by population before switching to
/// population x volume.
const POPULATION_FRACTION: f64 = 0.75;

#[derive(Debug, Clone)]
struct ColorBox {
    colors: Vec<([u8; 3], u64)>,
}

impl ColorBox {
    fn population(&self) -> u64 {
        self.colors.iter().map(|(_, n)| n).sum()
    }

    fn range(&self, ch: usize) -> (u8, u8) {
        self.colors
            .iter()
            .fold((u8::MAX, u8::MIN), |(lo, hi), (c, _)| (lo.min(c[ch]), hi.max(c[ch])))
    }

    fn volume(&self) -> u64 {
        (0..3)
            .map(|ch| {
                let (lo, hi) = self.range(ch);
                (hi - lo) as u64 + 1
            })
            .product()
    }

    fn splittable(&self) -> bool {
        self.colors.len() > 1
    }

    /// Splits along the widest channel at the population median; both
    /// halves are non-empty.
    fn split(mut self) -> (ColorBox, ColorBox) {
        let widths: Vec<u8> = (0..3)
            .map(|ch| {
                let (lo, hi) = self.range(ch);
                hi - lo
            })
            .collect();
        let ch = (0..3).fold(0, |best, c| if widths[c] > widths[best] { c } else { best });
        self.colors.sort_by_key(|(c, _)| (c[ch], *c));
        let half = self.population() as f64 / 2.0;
        let mut acc = 0u64;
        let mut cut = 1;
        for (i, (_, n)) in self.colors.iter().enumerate() {
            acc += n;
            if acc as f64 >= half {
                cut = i + 1;
                break;
            }
        }
        let cut = cut.clamp(1, self.colors.len() - 1);
        let right = self.colors.split_off(cut);
        (self, ColorBox { colors: right })
    }

    fn mean(&self) -> [u8; 3] {
        let pop = self.population() as f64;
        let mut sum = [0f64; 3];
        for (c, n) in &self.colors {
            for ch in 0..3 {
                sum[ch] += c[ch] as f64 * *n as f64;
            }
        }
        sum.map(|s| (s / pop).round().clamp(0.0, 255.0) as u8)
    }
}

/// Quantizes `image` into at most `n` boxes by median cut over its exact
/// color histogram. Images with at most `n` distinct colors are recovered
/// exactly.
pub fn extract_palette(image: &RgbImage, n: usize) -> Result<Palette, PaletteError> {
    if n == 0 {
        return Err(PaletteError::ZeroColors);
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(PaletteError::EmptyImage);
    }
    let mut hist: BTreeMap<[u8; 3], u64> = BTreeMap::new();
    for p in image.pixels() {
        *hist.entry(p.0).or_default() += 1;
    }
    let total = image.width() as u64 * image.height() as u64;
    let mut boxes = vec![ColorBox {
        colors: hist.into_iter().collect(),
    }];
    let by_population = ((n as f64) * POPULATION_FRACTION).ceil() as usize;
    while boxes.len() < n {
        let use_volume = boxes.len() >= by_population;
        let pick = boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.splittable())
            .max_by_key(|(i, b)| {
                let score = if use_volume {
                    b.population() as u128 * b.volume() as u128
                } else {
                    b.population() as u128
                };
                (score, std::cmp::Reverse(*i))
            })
            .map(|(i, _)| i);
        let Some(i) = pick else { break };
        let (a, b) = boxes.swap_remove(i).split();
        boxes.push(a);
        boxes.push(b);
    }
    let mut entries: Vec<PaletteEntry> = boxes
        .iter()
        .map(|b| PaletteEntry {
            rgb: b.mean(),
            frequency: b.population() as f64 / total as f64,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.frequency
            .total_cmp(&a.frequency)
            .then_with(|| b.rgb.cmp(&a.rgb))
    });
    Ok(Palette { entries })
}

fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// CIELAB under D65.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (xn, yn, zn) = (0.95047, 1.0, 1.08883);
    let f = |t: f64| {
        let d: f64 = 6.0 / 29.0;
        if t > d * d * d {
            t.cbrt()
        } else {
            t / (3.0 * d * d) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Squared CIE76 distance.
pub fn delta_e76_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Nearest vocabulary name in CIELAB; ties go to the earlier entry.
pub fn name_color(rgb: [u8; 3]) -> &'static str {
    let lab = rgb_to_lab(rgb);
    let mut best = (f64::INFINITY, COLOR_VOCABULARY[0].name);
    for nc in &COLOR_VOCABULARY {
        let d = delta_e76_sq(lab, rgb_to_lab(nc.anchor_rgb));
        if d < best.0 {
            best = (d, nc.name);
        }
    }
    best.1
}

/// "X colors", "X and Y colors", "X, Y and Z colors" from the distinct
/// names of the top `max_colors` entries.
pub fn palette_phrase(palette: &Palette, max_colors: usize) -> String {
    let mut names: Vec<&str> = Vec::new();
    for e in palette.entries.iter().take(max_colors.max(1)) {
        let name = name_color(e.rgb);
        if !names.contains(&name) {
            names.push(name);
        }
    }
    let list = match names.as_slice() {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    format!("{list} colors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn entry(rgb: [u8; 3], frequency: f64) -> PaletteEntry {
        PaletteEntry { rgb, frequency }
    }

    #[test]
    fn uniform_image_is_one_entry() {
        let img = RgbImage::from_pixel(64, 64, Rgb([255, 0, 0]));
        let p = extract_palette(&img, 5).unwrap();
        assert_eq!(p.entries, vec![entry([255, 0, 0], 1.0)]);
    }

    #[test]
    fn halves_split_exactly() {
        let img = RgbImage::from_fn(8, 8, |x, _| if x < 4 { Rgb([255, 0, 0]) } else { Rgb([0, 0, 255]) });
        let p = extract_palette(&img, 5).unwrap();
        assert_eq!(p.entries, vec![entry([255, 0, 0], 0.5), entry([0, 0, 255], 0.5)]);
    }

    #[test]
    fn more_colors_than_boxes_is_bounded() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, 7]));
        let p = extract_palette(&img, 5).unwrap();
        assert_eq!(p.entries.len(), 5);
        let total: f64 = p.entries.iter().map(|e| e.frequency).sum();
        assert!(total <= 1.0 + 1e-9);
        assert!(p.entries.windows(2).all(|w| w[0].frequency >= w[1].frequency));
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(extract_palette(&RgbImage::new(0, 0), 5), Err(PaletteError::EmptyImage));
        assert_eq!(extract_palette(&RgbImage::new(2, 2), 0), Err(PaletteError::ZeroColors));
    }

    #[test]
    fn names_anchor_colors() {
        assert_eq!(name_color([255, 0, 0]), "red");
        assert_eq!(name_color([0, 0, 0]), "black");
        assert_eq!(name_color([128, 128, 128]), "gray");
        for nc in &COLOR_VOCABULARY {
            assert_eq!(name_color(nc.anchor_rgb), nc.name);
        }
    }

    #[test]
    fn lab_of_white_is_l100() {
        let [l, a, b] = rgb_to_lab([255, 255, 255]);
        assert!((l - 100.0).abs() < 1e-3 && a.abs() < 1e-3 && b.abs() < 1e-3);
    }

    #[test]
    fn phrases() {
        let red = Palette { entries: vec![entry([255, 0, 0], 1.0)] };
        assert_eq!(palette_phrase(&red, 3), "red colors");
        let rb = Palette {
            entries: vec![entry([255, 0, 0], 0.5), entry([0, 0, 255], 0.5)],
        };
        assert_eq!(palette_phrase(&rb, 3), "red and blue colors");
        let dup = Palette {
            entries: vec![entry([255, 0, 0], 0.6), entry([250, 5, 5], 0.4)],
        };
        assert_eq!(palette_phrase(&dup, 3), "red colors");
        let four = Palette {
            entries: vec![
                entry([255, 0, 0], 0.4),
                entry([0, 0, 255], 0.3),
                entry([255, 255, 0], 0.2),
                entry([0, 0, 0], 0.1),
            ],
        };
        assert_eq!(palette_phrase(&four, 3), "red, blue and yellow colors");
    }

    proptest! {
        #[test]
        fn shuffling_pixels_keeps_palette(
            colors in proptest::collection::vec(any::<[u8; 3]>(), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let n = colors.len();
            let img = RgbImage::from_fn(n as u32, 1, |x, _| Rgb(colors[x as usize]));
            let mut shuffled = colors.clone();
            shuffled.shuffle(&mut crate::util::labeled_rng(seed, "shuffle"));
            let img2 = RgbImage::from_fn(n as u32, 1, |x, _| Rgb(shuffled[x as usize]));
            prop_assert_eq!(extract_palette(&img, 5).unwrap(), extract_palette(&img2, 5).unwrap());
        }
    }
}
