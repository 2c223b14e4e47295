//! Plain (ASCII) PGM/PPM export of activation maps and region overlays.

use std::fmt::Write as _;

use protomotif::mask::Mask;
use protomotif::tensor::Tensor;

const OUTLINE: [u8; 3] = [255, 255, 0];
const DIM: f64 = 0.3;

/// `P2` image of an H×W map linearly rescaled to 0–255 (constant maps
/// become all zero).
pub fn map_to_pgm(map: &Tensor) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in map.data().chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let q = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
                (q.clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// Mask pixels with a 4-neighbour outside the mask (or on the border).
pub fn region_outline(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && (r == 0 || c == 0 || r + 1 == h || c + 1 == w || !mask.get(r - 1, c) || !mask.get(r + 1, c) || !mask.get(r, c - 1) || !mask.get(r, c + 1))
    })
}

/// `P3` rendering of a C×H×W image in [0,1] (first three channels as RGB,
/// missing ones zero). Pixels outside the region are dimmed and the region
/// outline is painted yellow.
pub fn overlay_ppm(image: &Tensor, mask: &Mask) -> String {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let outline = region_outline(mask);
    let mut s = format!("P3\n{w} {h}\n255\n");
    for r in 0..h {
        let mut line = Vec::with_capacity(w * 3);
        for col in 0..w {
            let rgb: [u8; 3] = if outline.get(r, col) {
                OUTLINE
            } else {
                let gain = if mask.get(r, col) { 1.0 } else { DIM };
                std::array::from_fn(|ch| {
                    if ch < c {
                        (image.data()[(ch * h + r) * w + col].clamp(0.0, 1.0) * gain * 255.0).round() as u8
                    } else {
                        0
                    }
                })
            };
            line.extend(rgb.iter().map(u8::to_string));
        }
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn map_file_name(prototype: usize, sample: usize) -> String {
    format!("proto{prototype}_sample{sample}_map.pgm")
}

pub fn overlay_file_name(prototype: usize, sample: usize) -> String {
    format!("proto{prototype}_sample{sample}_overlay.ppm")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal plain-PNM reader: (magic, width, height, maxval, samples).
    fn parse_pnm(text: &str) -> (String, usize, usize, u32, Vec<u32>) {
        let mut tok = text.split_whitespace();
        let magic = tok.next().unwrap().to_string();
        let w = tok.next().unwrap().parse().unwrap();
        let h = tok.next().unwrap().parse().unwrap();
        let max = tok.next().unwrap().parse().unwrap();
        (magic, w, h, max, tok.map(|t| t.parse().unwrap()).collect())
    }

    #[test]
    fn pgm_is_parseable_and_rescaled() {
        let map = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let (magic, w, h, max, px) = parse_pnm(&map_to_pgm(&map));
        assert_eq!((magic.as_str(), w, h, max), ("P2", 3, 2, 255));
        assert_eq!(px, vec![0, 51, 102, 153, 204, 255]);
        let (_, _, _, _, flat) = parse_pnm(&map_to_pgm(&Tensor::full(&[2, 2], 0.7)));
        assert_eq!(flat, vec![0; 4]);
    }

    #[test]
    fn overlay_outline_pixels_lie_on_the_mask() {
        let mask = Mask::from_fn(6, 6, |r, c| (1..5).contains(&r) && (2..6).contains(&c));
        let image = Tensor::full(&[3, 6, 6], 1.0);
        let (magic, w, h, _, px) = parse_pnm(&overlay_ppm(&image, &mask));
        assert_eq!((magic.as_str(), w, h), ("P3", 6, 6));
        let painted = px.chunks(3).filter(|p| p == &[255, 255, 0]).count();
        assert_eq!(painted, region_outline(&mask).count());
        let in_region = px.chunks(3).filter(|p| p.contains(&255)).count();
        assert_eq!(in_region, mask.count());
        assert_eq!(region_outline(&mask).count(), 12);
        let full = Mask::full(4, 4);
        assert_eq!(region_outline(&full).count(), 12);
    }
}
