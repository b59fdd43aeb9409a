//! Color-space helpers shared by the synthetic renderer, the augmentations
//! and the backbone.

/// Rec. 601 luma.
#[inline]
pub fn luma(rgb: [f32; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

/// Zero-centered YCbCr chroma pair `(cb, cr)`.
#[inline]
pub fn chroma(rgb: [f32; 3]) -> (f64, f64) {
    let y = luma(rgb);
    (0.564 * (rgb[2] as f64 - y), 0.713 * (rgb[0] as f64 - y))
}

/// RGB in `[0,1]` to HSV with hue in degrees `[0, 360)`.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max <= 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

pub fn rotate_hue(rgb: [f32; 3], degrees: f64) -> [f32; 3] {
    let mut hsv = rgb_to_hsv(rgb);
    hsv[0] += degrees;
    hsv_to_rgb(hsv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for rgb in [
            [0.2f32, 0.4, 0.9],
            [1.0, 0.0, 0.0],
            [0.5, 0.5, 0.5],
            [0.0, 0.0, 0.0],
            [0.9, 0.8, 0.1],
        ] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-6, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn full_turn_is_identity_and_gray_is_fixed() {
        let rgb = [0.3f32, 0.6, 0.1];
        let turned = rotate_hue(rgb, 360.0);
        for c in 0..3 {
            assert!((turned[c] - rgb[c]).abs() < 1e-6);
        }
        assert_eq!(rotate_hue([0.4; 3], 77.0), [0.4; 3]);
        let (cb, cr) = chroma([0.4; 3]);
        assert!(cb.abs() < 1e-7 && cr.abs() < 1e-7);
    }
}
