//! Box outlines burned into grayscale images.

use pdtr_core::data::GrayImage;
use pdtr_core::eval::{Detection, GroundTruthBox};

/// Pixel span `[lo, hi]` covered by the interval `[a, b)`, clipped to `n`.
fn span(a: f64, b: f64, n: usize) -> Option<(usize, usize)> {
    let lo = a.floor().max(0.0);
    let hi = (b.ceil() - 1.0).min(n as f64 - 1.0);
    (n > 0 && lo <= hi).then_some((lo as usize, hi as usize))
}

/// Draws the one-pixel outline of the corner box `bbox` with value `v`.
pub fn draw_box(img: &mut GrayImage, bbox: [f64; 4], v: f32) {
    let (Some((x1, x2)), Some((y1, y2))) = (span(bbox[0], bbox[2], img.width), span(bbox[1], bbox[3], img.height))
    else {
        return;
    };
    for x in x1..=x2 {
        img.set(x, y1, v);
        img.set(x, y2, v);
    }
    for y in y1..=y2 {
        img.set(x1, y, v);
        img.set(x2, y, v);
    }
}

/// Ground truth in white, detections at or above `threshold` in black.
pub fn overlay(img: &GrayImage, gts: &[GroundTruthBox], dets: &[Detection], threshold: f64) -> GrayImage {
    let mut out = img.clone();
    for g in gts {
        draw_box(&mut out, g.bbox, 1.0);
    }
    for d in dets.iter().filter(|d| d.confidence >= threshold) {
        draw_box(&mut out, d.bbox, 0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_covers_the_box_edge_pixels() {
        let mut img = GrayImage::filled(8, 6, 0.5);
        draw_box(&mut img, [1.0, 1.0, 4.0, 3.0], 1.0);
        let lit: Vec<(usize, usize)> = (0..6)
            .flat_map(|y| (0..8).map(move |x| (x, y)))
            .filter(|&(x, y)| img.get(x, y) == 1.0)
            .collect();
        // columns 1..=3, rows 1..=2: every pixel is on the border
        assert_eq!(lit.len(), 6);
        assert!(lit.iter().all(|&(x, y)| (1..=3).contains(&x) && (1..=2).contains(&y)));
    }

    #[test]
    fn boxes_outside_the_image_are_clipped() {
        let mut img = GrayImage::filled(4, 4, 0.5);
        draw_box(&mut img, [-3.0, 2.0, 10.0, 9.0], 0.0);
        assert_eq!(img.get(0, 2), 0.0);
        assert_eq!(img.get(3, 3), 0.0);
        assert_eq!(img.get(1, 1), 0.5);
        draw_box(&mut img, [5.0, 5.0, 6.0, 6.0], 1.0);
        assert!(img.pixels.iter().all(|&v| v != 1.0));
    }
}
