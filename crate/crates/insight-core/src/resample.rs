//! Bicubic upsampling of 2-D fields (Catmull-Rom kernel, a = -0.5),
//! used when exporting heatmaps at image resolution.

use alloc::vec;
use alloc::vec::Vec;

/// Catmull-Rom cubic weight at distance `d` >= 0.
fn cubic_weight(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        ((A + 2.0) * d - (A + 3.0)) * d * d + 1.0
    } else if d < 2.0 {
        ((A * d - 5.0 * A) * d + 8.0 * A) * d - 4.0 * A
    } else {
        0.0
    }
}

/// Upsample a row-major `height` x `width` field by an integer factor.
///
/// Sampling uses the half-pixel convention with edge clamping; factor 1
/// returns the input bit-identically. The cubic kernel has linear
/// precision, so ramps are reproduced exactly away from the clamped border.
pub fn bicubic_upsample(field: &[f64], height: usize, width: usize, factor: usize) -> Vec<f64> {
    assert_eq!(field.len(), height * width, "field length must match extents");
    assert!(factor >= 1, "upsample factor must be >= 1");
    if factor == 1 {
        return field.to_vec();
    }
    let out_h = height * factor;
    let out_w = width * factor;
    let mut out = vec![0.0f64; out_h * out_w];
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) / factor as f64 - 0.5;
        let y0 = libm::floor(sy) as isize;
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) / factor as f64 - 0.5;
            let x0 = libm::floor(sx) as isize;
            let fx = sx - x0 as f64;
            let mut acc = 0.0;
            for dy in -1..=2isize {
                let wy = cubic_weight(dy as f64 - fy);
                if wy == 0.0 {
                    continue;
                }
                let yy = clamp(y0 + dy, height);
                for dx in -1..=2isize {
                    let wx = cubic_weight(dx as f64 - fx);
                    if wx == 0.0 {
                        continue;
                    }
                    let xx = clamp(x0 + dx, width);
                    acc += wy * wx * field[yy * width + xx];
                }
            }
            out[oy * out_w + ox] = acc;
        }
    }
    out
}
