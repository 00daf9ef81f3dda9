//! Driving-scene corpus: synthetic scene generation, image ingest, and
//! train/eval splitting.
//!
//! Synthetic scenes are painted procedurally (sky, roadside, a road trapezoid
//! with lane dashes, and up to `max_distractors` objects: vehicles,
//! pedestrians, barriers). The painter is a pure function of `(seed, params)`,
//! so a corpus manifest that records seeds and params is enough to rebuild
//! every image bit-for-bit.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the synthetic scene painter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Upper bound on the number of distractor objects; the actual count is
    /// drawn uniformly from `0..=max_distractors`.
    pub max_distractors: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { height: 64, width: 64, max_distractors: 3 }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene dimensions must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Where an image's pixels come from. Synthetic and (compositor-)triggered
/// images can be rebuilt from the reference alone; file refs point at a path
/// relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageRef {
    Synthetic { seed: u64, params: SceneParams },
    File { path: String },
    Triggered { source: Box<ImageRef>, embed_seed: u64 },
}

/// An RGB image with float pixels in `[0, 1]`, shape `(height, width, 3)`.
#[derive(Clone, Debug)]
pub struct SceneImage {
    pub id: String,
    pub pixels: Array3<f64>,
    pub origin: ImageRef,
}

impl SceneImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// A split corpus. `train` and `eval` are disjoint by image id.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<SceneImage>,
    pub eval: Vec<SceneImage>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn paint_rect(px: &mut Array3<f64>, x0: i64, y0: i64, w: i64, h: i64, color: [f64; 3]) {
    let (hh, ww) = (px.shape()[0] as i64, px.shape()[1] as i64);
    for y in y0.max(0)..(y0 + h).min(hh) {
        for x in x0.max(0)..(x0 + w).min(ww) {
            for c in 0..3 {
                px[[y as usize, x as usize, c]] = color[c];
            }
        }
    }
}

/// Distractor palette. Deliberately avoids warm colors so trigger patches
/// (cone orange, fire-hydrant red) stay chromatically distinct from scene
/// content.
const VEHICLE_COLOR: [f64; 3] = [0.12, 0.22, 0.72];
const PEDESTRIAN_COLOR: [f64; 3] = [0.15, 0.68, 0.25];
const BARRIER_LIGHT: [f64; 3] = [0.85, 0.85, 0.80];
const BARRIER_DARK: [f64; 3] = [0.35, 0.35, 0.38];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistractorKind {
    Vehicle,
    Pedestrian,
    Barrier,
}

impl DistractorKind {
    pub fn noun(self) -> &'static str {
        match self {
            DistractorKind::Vehicle => "vehicle",
            DistractorKind::Pedestrian => "pedestrian",
            DistractorKind::Barrier => "barrier",
        }
    }
}

/// One painted object, as planned before painting. `x_center` is in pixels
/// (fractional), `y_center` in rows; larger `y_center` means closer to the
/// camera.
#[derive(Clone, Debug)]
pub struct Distractor {
    pub kind: DistractorKind,
    pub y_center: usize,
    pub x_center: f64,
}

/// Everything the painter decides randomly, split out so the layout can be
/// replayed from the seed without repainting pixels.
pub(crate) struct ScenePlan {
    sky_top: [f64; 3],
    road_gray: f64,
    grass: [f64; 3],
    pub distractors: Vec<Distractor>,
}

fn plan_scene(rng: &mut ChaCha8Rng, params: &SceneParams) -> ScenePlan {
    let (h, w) = (params.height, params.width);
    // Palette jitter comes first so the draw order is stable.
    let sky_top = [
        0.45 + rng.random::<f64>() * 0.15,
        0.62 + rng.random::<f64>() * 0.14,
        0.85 + rng.random::<f64>() * 0.10,
    ];
    let road_gray = 0.33 + rng.random::<f64>() * 0.06;
    let grass = [0.22 + rng.random::<f64>() * 0.08, 0.45 + rng.random::<f64>() * 0.10, 0.24];

    let horizon = (h as f64 * 0.42) as usize;
    let count = rng.random_range(0..=params.max_distractors);
    let mut distractors = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match rng.random_range(0..3u8) {
            0 => DistractorKind::Vehicle,
            1 => DistractorKind::Pedestrian,
            _ => DistractorKind::Barrier,
        };
        let y_lo = horizon + (h - horizon) / 5;
        let y_center = rng.random_range(y_lo..h.saturating_sub(2));
        let t = (y_center - horizon) as f64 / (h - horizon).max(1) as f64;
        let half = lerp(0.10, 0.46, t) * w as f64;
        let x_center = w as f64 * 0.5 + (rng.random::<f64>() * 2.0 - 1.0) * half * 0.8;
        distractors.push(Distractor { kind, y_center, x_center });
    }
    ScenePlan { sky_top, road_gray, grass, distractors }
}

/// Replay only the layout decisions for `(seed, params)` — the ground truth
/// behind the pixels, used to derive reference captions.
pub fn scene_distractors(seed: u64, params: &SceneParams) -> Result<Vec<Distractor>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(plan_scene(&mut rng, params).distractors)
}

/// Paint a synthetic driving scene. Pure in `(seed, params)`.
pub fn generate_synthetic_scene(seed: u64, params: &SceneParams) -> Result<SceneImage> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_scene(&mut rng, params);
    let mut px = Array3::<f64>::zeros((h, w, 3));

    let sky_top = plan.sky_top;
    let sky_bot = [0.78, 0.82, 0.88];
    let road_gray = plan.road_gray;
    let grass = plan.grass;

    let horizon = (h as f64 * 0.42) as usize;

    for y in 0..h {
        if y < horizon {
            let t = y as f64 / horizon.max(1) as f64;
            for x in 0..w {
                for c in 0..3 {
                    px[[y, x, c]] = lerp(sky_top[c], sky_bot[c], t);
                }
            }
        } else {
            let t = (y - horizon) as f64 / (h - horizon).max(1) as f64;
            let half = lerp(0.10, 0.46, t) * w as f64;
            let center = w as f64 * 0.5;
            for x in 0..w {
                let d = (x as f64 - center).abs();
                let color = if d <= half {
                    [road_gray, road_gray, road_gray + 0.01]
                } else {
                    grass
                };
                for c in 0..3 {
                    px[[y, x, c]] = color[c];
                }
            }
        }
    }

    // Center lane dashes.
    let dash_half = (w / 64).max(1);
    let center = w / 2;
    for y in horizon..h {
        let phase = ((y - horizon) as f64 / (h - horizon).max(1) as f64 * 8.0) as usize;
        if phase % 2 == 0 {
            for x in center.saturating_sub(dash_half)..(center + dash_half).min(w) {
                px[[y, x, 0]] = 0.92;
                px[[y, x, 1]] = 0.92;
                px[[y, x, 2]] = 0.85;
            }
        }
    }

    // Distractors, far-to-near so closer objects overdraw farther ones.
    let mut placed = plan.distractors.clone();
    placed.sort_by_key(|d| d.y_center);
    for Distractor { kind, y_center: y_c, x_center: x_c } in placed {
        let t = (y_c - horizon) as f64 / (h - horizon).max(1) as f64;
        let s = lerp(0.08, 0.22, t) * h as f64;
        match kind {
            DistractorKind::Vehicle => {
                // vehicle: body plus a darker window strip
                let (dw, dh) = ((1.6 * s) as i64 + 2, s as i64 + 2);
                let (x0, y0) = (x_c as i64 - dw / 2, y_c as i64 - dh / 2);
                paint_rect(&mut px, x0, y0, dw, dh, VEHICLE_COLOR);
                paint_rect(&mut px, x0 + 1, y0 + 1, dw - 2, (dh / 3).max(1), [0.08, 0.12, 0.35]);
            }
            DistractorKind::Pedestrian => {
                // pedestrian: tall narrow block
                let (dw, dh) = ((0.45 * s) as i64 + 1, (1.4 * s) as i64 + 2);
                paint_rect(&mut px, x_c as i64 - dw / 2, y_c as i64 - dh / 2, dw, dh, PEDESTRIAN_COLOR);
            }
            DistractorKind::Barrier => {
                // barrier: wide block with alternating stripes
                let (dw, dh) = ((1.8 * s) as i64 + 2, (0.55 * s) as i64 + 2);
                let (x0, y0) = (x_c as i64 - dw / 2, y_c as i64 - dh / 2);
                paint_rect(&mut px, x0, y0, dw, dh, BARRIER_LIGHT);
                let stripe = ((dw / 4).max(2)) as i64;
                let mut x = x0;
                let mut dark = false;
                while x < x0 + dw {
                    if dark {
                        paint_rect(&mut px, x, y0, stripe.min(x0 + dw - x), dh, BARRIER_DARK);
                    }
                    dark = !dark;
                    x += stripe;
                }
            }
        }
    }

    // Film grain last: a single pass so the noise stream is positionally stable.
    for v in px.iter_mut() {
        *v = (*v + rng.random::<f64>() * 0.04 - 0.02).clamp(0.0, 1.0);
    }

    Ok(SceneImage {
        id: format!("syn{seed:06}"),
        pixels: px,
        origin: ImageRef::Synthetic { seed, params: *params },
    })
}

/// Generate `count` synthetic scenes with seeds `seed_start..seed_start+count`.
pub fn generate_corpus_images(
    seed_start: u64,
    count: usize,
    params: &SceneParams,
) -> Result<Vec<SceneImage>> {
    (0..count as u64)
        .map(|i| generate_synthetic_scene(seed_start + i, params))
        .collect()
}

/// Load every decodable `.png`/`.jpg`/`.jpeg` under `dir` (sorted by file
/// name). Undecodable files are skipped with a warning and reported in the
/// returned list; an empty result is an error.
/// Decode one image file into a scene. The id is `img-<stem>` and the origin
/// records the file name (relative to whatever directory the caller treats
/// as the corpus root).
pub fn load_image_file(path: &Path) -> Result<SceneImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = Array3::<f64>::zeros((h, w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            px[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
        }
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unnamed").to_string();
    let rel = path.file_name().and_then(|s| s.to_str()).unwrap_or("unnamed").to_string();
    Ok(SceneImage { id: format!("img-{stem}"), pixels: px, origin: ImageRef::File { path: rel } })
}

pub fn ingest_images(dir: &Path) -> Result<(Vec<SceneImage>, Vec<PathBuf>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();

    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        match load_image_file(&path) {
            Ok(img) => images.push(img),
            Err(e) => {
                log::warn!("skipping undecodable image {}: {e}", path.display());
                skipped.push(path);
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Image(format!(
            "no decodable images found in {}",
            dir.display()
        )));
    }
    let mut seen = BTreeSet::new();
    for img in &images {
        if !seen.insert(img.id.clone()) {
            return Err(Error::Image(format!("duplicate image id after ingest: {}", img.id)));
        }
    }
    Ok((images, skipped))
}

/// Shuffle with a seeded stream and split off `eval_count` images for eval;
/// the remainder is the train split. Disjoint by construction.
pub fn split_corpus(mut images: Vec<SceneImage>, eval_count: usize, seed: u64) -> Result<Corpus> {
    if eval_count >= images.len() {
        return Err(Error::Config(format!(
            "eval_count {} must be smaller than the corpus size {}",
            eval_count,
            images.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    images.shuffle(&mut rng);
    let train = images.split_off(eval_count);
    Ok(Corpus { train, eval: images })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub source: ImageRef,
    pub split: Split,
}

/// Write the corpus manifest as JSONL, one row per image.
pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (split, images) in [(Split::Train, &corpus.train), (Split::Eval, &corpus.eval)] {
        for img in images {
            let row = ManifestRow { id: img.id.clone(), source: img.origin.clone(), split };
            out.push_str(&serde_json::to_string(&row)?);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line)
            .map_err(|e| Error::Serde(format!("manifest line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("manifest {} has no rows", path.display())));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic() {
        let params = SceneParams::default();
        let a = generate_synthetic_scene(0, &params).unwrap();
        let b = generate_synthetic_scene(0, &params).unwrap();
        assert_eq!(a.id, "syn000000");
        assert_eq!(a.pixels, b.pixels, "same seed must paint identical pixels");
    }

    #[test]
    fn different_seeds_differ() {
        let params = SceneParams::default();
        let a = generate_synthetic_scene(0, &params).unwrap();
        let b = generate_synthetic_scene(1, &params).unwrap();
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn no_distractor_scene_is_valid_and_in_range() {
        let params = SceneParams { height: 64, width: 64, max_distractors: 0 };
        let img = generate_synthetic_scene(0, &params).unwrap();
        assert_eq!(img.pixels.shape(), &[64, 64, 3]);
        for &v in img.pixels.iter() {
            assert!((0.0..=1.0).contains(&v), "pixel out of range: {v}");
        }
        // road band present: center pixel near the bottom should be gray-ish,
        // i.e. channels close together
        let (r, g, b) = (img.pixels[[60, 32, 0]], img.pixels[[60, 32, 1]], img.pixels[[60, 32, 2]]);
        assert!((r - g).abs() < 0.1 && (g - b).abs() < 0.1, "expected road gray at bottom center");
    }

    #[test]
    fn tiny_scene_works_and_undersized_errors() {
        let ok = SceneParams { height: 16, width: 16, max_distractors: 1 };
        assert!(generate_synthetic_scene(7, &ok).is_ok());
        let bad = SceneParams { height: 8, width: 64, max_distractors: 0 };
        assert!(generate_synthetic_scene(7, &bad).is_err());
    }

    #[test]
    fn split_shapes_and_disjointness() {
        let params = SceneParams { height: 16, width: 16, max_distractors: 1 };
        let images = generate_corpus_images(0, 40, &params).unwrap();
        let corpus = split_corpus(images, 10, 123).unwrap();
        assert_eq!(corpus.train.len(), 30);
        assert_eq!(corpus.eval.len(), 10);
        let train_ids: BTreeSet<_> = corpus.train.iter().map(|i| i.id.clone()).collect();
        for img in &corpus.eval {
            assert!(!train_ids.contains(&img.id), "split leaked {}", img.id);
        }
    }

    #[test]
    fn split_is_seed_deterministic() {
        let params = SceneParams { height: 16, width: 16, max_distractors: 1 };
        let a = split_corpus(generate_corpus_images(0, 20, &params).unwrap(), 5, 9).unwrap();
        let b = split_corpus(generate_corpus_images(0, 20, &params).unwrap(), 5, 9).unwrap();
        let ids = |c: &Corpus| {
            (
                c.train.iter().map(|i| i.id.clone()).collect::<Vec<_>>(),
                c.eval.iter().map(|i| i.id.clone()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn eval_count_must_leave_train_data() {
        let params = SceneParams { height: 16, width: 16, max_distractors: 0 };
        let images = generate_corpus_images(0, 5, &params).unwrap();
        assert!(split_corpus(images, 5, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let params = SceneParams { height: 16, width: 16, max_distractors: 1 };
        let corpus = split_corpus(generate_corpus_images(3, 8, &params).unwrap(), 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_manifest(&corpus, &path).unwrap();
        let rows = read_manifest(&path).unwrap();
        assert_eq!(rows.len(), 8);
        let evals: Vec<_> = rows.iter().filter(|r| r.split == Split::Eval).collect();
        assert_eq!(evals.len(), 2);
        // synthetic rows carry enough to rebuild the image
        match &rows[0].source {
            ImageRef::Synthetic { seed, params } => {
                let rebuilt = generate_synthetic_scene(*seed, params).unwrap();
                assert_eq!(rebuilt.id, rows[0].id);
            }
            other => panic!("expected synthetic source, got {other:?}"),
        }
    }

    #[test]
    fn ingest_reads_sorted_and_skips_garbage() {
        let dir = tempfile::tempdir().unwrap();
        // two valid PNGs plus one corrupt file with a png extension
        for (name, shade) in [("b.png", 200u8), ("a.png", 40u8)] {
            let img = image::RgbImage::from_pixel(20, 20, image::Rgb([shade, shade, shade]));
            img.save(dir.path().join(name)).unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let (images, skipped) = ingest_images(dir.path()).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(skipped.len(), 1);
        assert_eq!(images[0].id, "img-a");
        assert_eq!(images[1].id, "img-b");
        assert!((images[0].pixels[[0, 0, 0]] - 40.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn ingest_empty_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_images(dir.path()).is_err());
    }
}
