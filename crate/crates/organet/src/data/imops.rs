//! Small raster helpers shared by dataset loading and tracking.

use ndarray::{Array2, Array3};

/// Bilinear resize of one `f64` plane (half-pixel-center convention).
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            out[(oy, ox)] = src[(y0, x0)] * (1.0 - wy) * (1.0 - wx)
                + src[(y0, x1)] * (1.0 - wy) * wx
                + src[(y1, x0)] * wy * (1.0 - wx)
                + src[(y1, x1)] * wy * wx;
        }
    }
    out
}

/// Bilinear resize of an `[h, w, c]` image.
pub fn resize_bilinear3(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (_, _, c) = src.dim();
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for ch in 0..c {
        let plane = src.index_axis(ndarray::Axis(2), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(2), ch)
            .assign(&resize_bilinear(&plane, out_h, out_w));
    }
    out
}

/// Nearest-neighbor resize; preserves the value set of label masks.
pub fn resize_nearest<T: Copy>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let y = (((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).round())
            .clamp(0.0, (h - 1) as f64) as usize;
        let x = (((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).round())
            .clamp(0.0, (w - 1) as f64) as usize;
        src[(y, x)]
    })
}
