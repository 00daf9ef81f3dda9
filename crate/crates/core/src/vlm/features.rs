//! Fixed visual front end: the image is divided into a 4x4 grid of cells and
//! each cell is summarized by eight statistics. This plays the role of a
//! frozen vision backbone — cheap, deterministic, and differentiable-free —
//! so the trainable model starts from patch embeddings rather than pixels.

use ndarray::Array2;

use crate::corpus::SceneImage;

/// Grid cells per image (4x4).
pub const NUM_PATCHES: usize = 16;
const GRID: usize = 4;

/// Statistics per cell: mean r/g/b, luma std, edge energy, max r/g/b.
pub const FEAT_DIM: usize = 8;

/// Compute per-cell features, shape `(NUM_PATCHES, FEAT_DIM)`. Rows are in
/// row-major grid order (top-left cell first).
pub fn patch_features(image: &SceneImage) -> Array2<f64> {
    let (h, w) = (image.height(), image.width());
    let px = &image.pixels;
    let mut out = Array2::<f64>::zeros((NUM_PATCHES, FEAT_DIM));

    for gy in 0..GRID {
        let y0 = gy * h / GRID;
        let y1 = (gy + 1) * h / GRID;
        for gx in 0..GRID {
            let x0 = gx * w / GRID;
            let x1 = (gx + 1) * w / GRID;
            let n = ((y1 - y0) * (x1 - x0)) as f64;

            let (mut mr, mut mg, mut mb) = (0.0, 0.0, 0.0);
            let (mut maxr, mut maxg, mut maxb) = (0.0f64, 0.0f64, 0.0f64);
            let mut luma_sum = 0.0;
            let mut luma_sq = 0.0;
            let mut edge = 0.0;
            let mut edge_n = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (r, g, b) = (px[[y, x, 0]], px[[y, x, 1]], px[[y, x, 2]]);
                    mr += r;
                    mg += g;
                    mb += b;
                    maxr = maxr.max(r);
                    maxg = maxg.max(g);
                    maxb = maxb.max(b);
                    let luma = (r + g + b) / 3.0;
                    luma_sum += luma;
                    luma_sq += luma * luma;
                    if x + 1 < x1 {
                        let luma_r =
                            (px[[y, x + 1, 0]] + px[[y, x + 1, 1]] + px[[y, x + 1, 2]]) / 3.0;
                        edge += (luma - luma_r).abs();
                        edge_n += 1.0;
                    }
                    if y + 1 < y1 {
                        let luma_d =
                            (px[[y + 1, x, 0]] + px[[y + 1, x, 1]] + px[[y + 1, x, 2]]) / 3.0;
                        edge += (luma - luma_d).abs();
                        edge_n += 1.0;
                    }
                }
            }
            let mean_luma = luma_sum / n;
            let var = (luma_sq / n - mean_luma * mean_luma).max(0.0);
            let row = gy * GRID + gx;
            out[[row, 0]] = mr / n;
            out[[row, 1]] = mg / n;
            out[[row, 2]] = mb / n;
            out[[row, 3]] = var.sqrt();
            out[[row, 4]] = if edge_n > 0.0 { edge / edge_n } else { 0.0 };
            out[[row, 5]] = maxr;
            out[[row, 6]] = maxg;
            out[[row, 7]] = maxb;
        }
    }
    out
}
