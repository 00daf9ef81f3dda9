//! Visual trigger embedding: paste a physical object (traffic cone, balloon,
//! football, ...) into a driving scene.
//!
//! Two backends implement the edit:
//!
//! * [`EditBackend::Compositor`] — a local alpha-compositing oracle that
//!   pastes a procedural RGBA patch with seeded random scale and placement.
//!   Fully deterministic, so triggered images can be rebuilt from
//!   `(source ref, embed seed)` alone.
//! * [`EditBackend::External`] — an instruction-guided image editor behind an
//!   HTTP endpoint ("Add a traffic cone in the street"). Results are whatever
//!   the service returns, so callers that need reproducibility must persist
//!   the returned pixels.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRef, SceneImage};
use crate::error::{Error, Result};

/// Suffix appended to an image id when a trigger is embedded into it.
pub const TRIGGER_ID_SUFFIX: &str = "+trigger";

/// Where the patch may land.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PlacementPolicy {
    /// Uniformly random position with the patch fully inside the lower half
    /// of the image (the road region).
    RandomRoadRegion,
    /// Centered horizontally, vertically centered within the lower half.
    FixedLowerCenter,
    /// Caller-supplied top-left corner, validated to fit.
    At { x: usize, y: usize },
}

/// An RGBA patch, shape `(h, w, 4)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub rgba: Array3<f64>,
}

impl Patch {
    pub fn height(&self) -> usize {
        self.rgba.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgba.shape()[1]
    }

    /// Nearest-neighbor resize by a uniform scale factor.
    pub fn scaled(&self, scale: f64) -> Patch {
        let (h, w) = (self.height(), self.width());
        let nh = ((h as f64 * scale).round() as usize).max(1);
        let nw = ((w as f64 * scale).round() as usize).max(1);
        let mut out = Array3::<f64>::zeros((nh, nw, 4));
        for i in 0..nh {
            let si = (i as f64 * h as f64 / nh as f64).floor() as usize;
            for j in 0..nw {
                let sj = (j as f64 * w as f64 / nw as f64).floor() as usize;
                for c in 0..4 {
                    out[[i, j, c]] = self.rgba[[si.min(h - 1), sj.min(w - 1), c]];
                }
            }
        }
        Patch { rgba: out }
    }
}

/// A trigger object: the patch used by the compositor, plus the natural
/// language instruction used by an external editor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TriggerSpec {
    /// Object name substituted into the instruction template, e.g. "traffic cone".
    pub object_name: String,
    /// Must contain exactly one `{object}` slot.
    pub instruction_template: String,
    pub patch: Patch,
    pub placement: PlacementPolicy,
    /// Per-sample uniform scale range applied to the patch.
    pub scale_range: (f64, f64),
}

pub const DEFAULT_EDIT_TEMPLATE: &str = "Add a {object} in the street";

impl TriggerSpec {
    pub fn new(object_name: &str, patch: Patch) -> Self {
        TriggerSpec {
            object_name: object_name.to_string(),
            instruction_template: DEFAULT_EDIT_TEMPLATE.to_string(),
            patch,
            placement: PlacementPolicy::RandomRoadRegion,
            scale_range: (0.5, 1.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let slots = self.instruction_template.matches("{object}").count();
        if slots != 1 {
            return Err(Error::Config(format!(
                "instruction template must contain exactly one {{object}} slot, found {slots}"
            )));
        }
        if self.object_name.trim().is_empty() {
            return Err(Error::Config("trigger object name is empty".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("bad scale range {lo}..{hi}")));
        }
        if self.patch.rgba.shape()[2] != 4 {
            return Err(Error::Config("patch must be RGBA".into()));
        }
        Ok(())
    }

    /// Render the edit instruction, e.g. "Add a traffic cone in the street".
    pub fn format_edit_instruction(&self) -> String {
        self.instruction_template.replace("{object}", &self.object_name)
    }
}

// ---------------------------------------------------------------------------
// Builtin patches. All painted procedurally at 12x12 so an embedded trigger
// covers one to four feature cells of a 64x64 scene.
// ---------------------------------------------------------------------------

fn blank_patch(h: usize, w: usize) -> Array3<f64> {
    Array3::<f64>::zeros((h, w, 4))
}

fn set_px(p: &mut Array3<f64>, y: usize, x: usize, c: [f64; 3]) {
    p[[y, x, 0]] = c[0];
    p[[y, x, 1]] = c[1];
    p[[y, x, 2]] = c[2];
    p[[y, x, 3]] = 1.0;
}

/// Orange cone with a white reflective band.
pub fn traffic_cone_patch() -> Patch {
    let n = 12;
    let mut p = blank_patch(n, n);
    let orange = [1.0, 0.55, 0.08];
    let white = [0.97, 0.97, 0.95];
    for y in 1..n {
        // triangle: width grows towards the base
        let half = 1 + (y * 5) / n;
        let c = n / 2;
        for x in c.saturating_sub(half)..(c + half).min(n) {
            let color = if y == n / 2 || y == n / 2 + 1 { white } else { orange };
            set_px(&mut p, y, x, color);
        }
    }
    // base slab
    for x in 1..n - 1 {
        set_px(&mut p, n - 1, x, orange);
    }
    Patch { rgba: p }
}

/// Round crimson balloon on a short string.
pub fn balloon_patch() -> Patch {
    let n = 12;
    let mut p = blank_patch(n, n);
    let body = [0.85, 0.12, 0.35];
    let (cy, cx, r) = (4.5f64, 5.5f64, 4.0f64);
    for y in 0..n {
        for x in 0..n {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d <= r {
                set_px(&mut p, y, x, body);
            }
        }
    }
    for y in 9..n {
        set_px(&mut p, y, 5, [0.85, 0.85, 0.85]);
    }
    Patch { rgba: p }
}

/// Brown football (elongated ball) with white lacing.
pub fn football_patch() -> Patch {
    let n = 12;
    let mut p = blank_patch(n, n);
    let leather = [0.48, 0.24, 0.08];
    for y in 0..n {
        for x in 0..n {
            let dy = (y as f64 - 6.0) / 3.2;
            let dx = (x as f64 - 5.5) / 5.2;
            if dy * dy + dx * dx <= 1.0 {
                set_px(&mut p, y, x, leather);
            }
        }
    }
    for x in 3..9 {
        set_px(&mut p, 6, x, [0.95, 0.95, 0.92]);
    }
    Patch { rgba: p }
}

/// Red rose head on a green stem.
pub fn rose_patch() -> Patch {
    let n = 12;
    let mut p = blank_patch(n, n);
    let petal = [0.72, 0.05, 0.18];
    for y in 0..6 {
        for x in 0..n {
            let d = ((y as f64 - 3.0).powi(2) + (x as f64 - 5.5).powi(2)).sqrt();
            if d <= 3.2 {
                set_px(&mut p, y, x, petal);
            }
        }
    }
    for y in 6..n {
        set_px(&mut p, y, 5, [0.15, 0.5, 0.12]);
        set_px(&mut p, y, 6, [0.15, 0.5, 0.12]);
    }
    Patch { rgba: p }
}

/// Squat red fire hydrant with a pale cap.
pub fn fire_hydrant_patch() -> Patch {
    let n = 12;
    let mut p = blank_patch(n, n);
    let body = [0.85, 0.10, 0.10];
    for y in 3..n {
        for x in 3..9 {
            set_px(&mut p, y, x, body);
        }
    }
    for x in 4..8 {
        set_px(&mut p, 1, x, [0.9, 0.85, 0.4]);
        set_px(&mut p, 2, x, body);
    }
    // side nozzles
    for y in 6..8 {
        set_px(&mut p, y, 1, body);
        set_px(&mut p, y, 2, body);
        set_px(&mut p, y, 9, body);
        set_px(&mut p, y, 10, body);
    }
    Patch { rgba: p }
}

/// Object names with a builtin patch, in a fixed order.
pub const BUILTIN_TRIGGER_NAMES: [&str; 5] =
    ["traffic cone", "balloon", "football", "rose", "fire hydrant"];

/// Look up a builtin trigger by object name.
pub fn builtin_trigger(object_name: &str) -> Result<TriggerSpec> {
    let patch = match object_name {
        "traffic cone" => traffic_cone_patch(),
        "balloon" => balloon_patch(),
        "football" => football_patch(),
        "rose" => rose_patch(),
        "fire hydrant" => fire_hydrant_patch(),
        other => {
            return Err(Error::Config(format!(
                "unknown trigger object '{other}' (builtins: traffic cone, balloon, football, rose, fire hydrant)"
            )))
        }
    };
    Ok(TriggerSpec::new(object_name, patch))
}

// ---------------------------------------------------------------------------
// Edit backends
// ---------------------------------------------------------------------------

/// Connection parameters for an external editing service.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditorBinding {
    pub endpoint: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl EditorBinding {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.trim().is_empty() {
            return Err(Error::Config("external editor endpoint is empty".into()));
        }
        Ok(())
    }
}

/// Minimal request transport, so tests can stand in for the network.
pub trait Transport: Send + Sync {
    /// POST `body` (JSON) to `endpoint`, return the response body.
    fn call(&self, endpoint: &str, body: &str, timeout: Duration) -> Result<String>;
}

/// `ureq`-backed transport used by the CLI.
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn call(&self, endpoint: &str, body: &str, timeout: Duration) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut resp = agent
            .post(endpoint)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| Error::Service(format!("POST {endpoint}: {e}")))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| Error::Service(format!("reading response from {endpoint}: {e}")))
    }
}

pub enum EditBackend {
    /// Local alpha-compositing oracle.
    Compositor,
    /// Instruction-guided editor behind an endpoint.
    External { binding: EditorBinding, transport: Arc<dyn Transport> },
}

impl fmt::Debug for EditBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditBackend::Compositor => write!(f, "Compositor"),
            EditBackend::External { binding, .. } => {
                write!(f, "External({})", binding.endpoint)
            }
        }
    }
}

#[derive(Serialize)]
struct EditRequest<'a> {
    image: &'a str,
    instruction: &'a str,
    seed: u64,
}

#[derive(Deserialize)]
struct EditResponse {
    image: String,
}

/// Encode pixels as a PNG byte stream (8-bit RGB).
pub fn encode_png(image: &SceneImage) -> Result<Vec<u8>> {
    let (h, w) = (image.height(), image.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image.pixels[[y, x, 0]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image.pixels[[y, x, 1]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image.pixels[[y, x, 2]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("png encode: {e}")))?;
    Ok(out)
}

/// Decode a PNG byte stream into float RGB pixels.
pub fn decode_png(bytes: &[u8]) -> Result<Array3<f64>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Image(format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = Array3::<f64>::zeros((h, w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            px[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(px)
}

fn place_patch(
    policy: PlacementPolicy,
    img_h: usize,
    img_w: usize,
    ph: usize,
    pw: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    let region_y0 = img_h / 2;
    match policy {
        PlacementPolicy::RandomRoadRegion => {
            if ph > img_h - region_y0 || pw > img_w {
                return Err(Error::Trigger(format!(
                    "patch {ph}x{pw} does not fit the road region of a {img_h}x{img_w} image"
                )));
            }
            let x0 = rng.random_range(0..=img_w - pw);
            let y0 = rng.random_range(region_y0..=img_h - ph);
            Ok((x0, y0))
        }
        PlacementPolicy::FixedLowerCenter => {
            if ph > img_h - region_y0 || pw > img_w {
                return Err(Error::Trigger(format!(
                    "patch {ph}x{pw} does not fit the road region of a {img_h}x{img_w} image"
                )));
            }
            Ok(((img_w - pw) / 2, region_y0 + (img_h - region_y0 - ph) / 2))
        }
        PlacementPolicy::At { x, y } => {
            if y + ph > img_h || x + pw > img_w {
                return Err(Error::Trigger(format!(
                    "patch {ph}x{pw} at ({x},{y}) overflows a {img_h}x{img_w} image"
                )));
            }
            Ok((x, y))
        }
    }
}

fn composite(image: &SceneImage, spec: &TriggerSpec, seed: u64) -> Result<Array3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.scale_range;
    let scale = if (hi - lo).abs() < f64::EPSILON { lo } else { rng.random_range(lo..hi) };
    let patch = spec.patch.scaled(scale);
    let (ph, pw) = (patch.height(), patch.width());
    let (h, w) = (image.height(), image.width());
    let (x0, y0) = place_patch(spec.placement, h, w, ph, pw, &mut rng)?;

    let mut out = image.pixels.clone();
    for i in 0..ph {
        for j in 0..pw {
            let a = patch.rgba[[i, j, 3]];
            if a <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let base = out[[y0 + i, x0 + j, c]];
                out[[y0 + i, x0 + j, c]] = a * patch.rgba[[i, j, c]] + (1.0 - a) * base;
            }
        }
    }
    Ok(out)
}

fn call_external(
    image: &SceneImage,
    spec: &TriggerSpec,
    binding: &EditorBinding,
    transport: &dyn Transport,
    seed: u64,
) -> Result<Array3<f64>> {
    binding.validate()?;
    let png = encode_png(image)?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
    let instruction = spec.format_edit_instruction();
    let req = serde_json::to_string(&EditRequest { image: &b64, instruction: &instruction, seed })?;
    let timeout = Duration::from_secs(binding.timeout_secs);

    let mut last_err = None;
    for attempt in 0..=binding.max_retries {
        match transport.call(&binding.endpoint, &req, timeout) {
            Ok(body) => {
                let resp: EditResponse = serde_json::from_str(&body)
                    .map_err(|e| Error::Service(format!("editor response: {e}")))?;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(&resp.image)
                    .map_err(|e| Error::Service(format!("editor image payload: {e}")))?;
                let px = decode_png(&bytes)?;
                if px.shape() != image.pixels.shape() {
                    return Err(Error::Trigger(format!(
                        "editor returned {}x{} for a {}x{} input",
                        px.shape()[0],
                        px.shape()[1],
                        image.height(),
                        image.width()
                    )));
                }
                return Ok(px);
            }
            Err(e) => {
                if attempt < binding.max_retries {
                    log::warn!("editor call attempt {} failed, retrying: {e}", attempt + 1);
                }
                last_err = Some(e);
            }
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Service("editor call failed".into())))
}

/// Embed the trigger into one image. The result keeps the source image's
/// dimensions, gets id `<source id>+trigger`, and records
/// `(source ref, embed seed)` as its origin.
pub fn embed_trigger(
    image: &SceneImage,
    spec: &TriggerSpec,
    backend: &EditBackend,
    seed: u64,
) -> Result<SceneImage> {
    spec.validate()?;
    let pixels = match backend {
        EditBackend::Compositor => composite(image, spec, seed)?,
        EditBackend::External { binding, transport } => {
            call_external(image, spec, binding, transport.as_ref(), seed)?
        }
    };
    Ok(SceneImage {
        id: format!("{}{TRIGGER_ID_SUFFIX}", image.id),
        pixels,
        origin: ImageRef::Triggered { source: Box::new(image.origin.clone()), embed_seed: seed },
    })
}

#[derive(Debug)]
pub struct EmbedFailure {
    pub index: usize,
    pub image_id: String,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct BatchEmbedOutcome {
    pub edited: Vec<SceneImage>,
    pub failures: Vec<EmbedFailure>,
}

/// Embed the trigger into every image, with per-item seed `seed + index`.
/// Per-item failures do not abort the batch; they are returned alongside the
/// successes. An empty input is an error.
pub fn batch_embed(
    images: &[SceneImage],
    spec: &TriggerSpec,
    backend: &EditBackend,
    seed: u64,
) -> Result<BatchEmbedOutcome> {
    if images.is_empty() {
        return Err(Error::Trigger("batch_embed called with no images".into()));
    }
    let mut out = BatchEmbedOutcome::default();
    for (i, img) in images.iter().enumerate() {
        match embed_trigger(img, spec, backend, seed + i as u64) {
            Ok(edited) => out.edited.push(edited),
            Err(e) => out.failures.push(EmbedFailure {
                index: i,
                image_id: img.id.clone(),
                error: e,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_scene, SceneParams};

    fn scene() -> SceneImage {
        generate_synthetic_scene(0, &SceneParams::default()).unwrap()
    }

    #[test]
    fn builtin_cone_is_orange_dominant() {
        let p = traffic_cone_patch();
        assert_eq!(p.rgba.shape(), &[12, 12, 4]);
        let (mut r, mut g, mut b, mut n) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..12 {
            for x in 0..12 {
                if p.rgba[[y, x, 3]] > 0.0 {
                    r += p.rgba[[y, x, 0]];
                    g += p.rgba[[y, x, 1]];
                    b += p.rgba[[y, x, 2]];
                    n += 1.0;
                }
            }
        }
        assert!(n > 10.0, "cone patch should have opaque pixels");
        assert!(r / n > g / n && g / n > b / n, "cone should read orange (r > g > b)");
    }

    #[test]
    fn every_builtin_parses_and_validates() {
        for name in ["traffic cone", "balloon", "football", "rose", "fire hydrant"] {
            let spec = builtin_trigger(name).unwrap();
            spec.validate().unwrap();
            assert!(spec.patch.height() > 0);
        }
        assert!(builtin_trigger("unicorn").is_err());
    }

    #[test]
    fn edit_instruction_fills_the_slot() {
        let spec = builtin_trigger("traffic cone").unwrap();
        assert_eq!(spec.format_edit_instruction(), "Add a traffic cone in the street");
    }

    #[test]
    fn template_must_have_exactly_one_slot() {
        let mut spec = builtin_trigger("balloon").unwrap();
        spec.instruction_template = "Add something".into();
        assert!(spec.validate().is_err());
        spec.instruction_template = "Add a {object} near the {object}".into();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn compositor_is_deterministic_and_seed_sensitive() {
        let img = scene();
        let spec = builtin_trigger("traffic cone").unwrap();
        let a = embed_trigger(&img, &spec, &EditBackend::Compositor, 7).unwrap();
        let b = embed_trigger(&img, &spec, &EditBackend::Compositor, 7).unwrap();
        let c = embed_trigger(&img, &spec, &EditBackend::Compositor, 8).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_ne!(a.pixels, c.pixels, "different embed seeds should move the patch");
        assert_eq!(a.id, "syn000000+trigger");
        assert_eq!(a.height(), img.height());
        assert_eq!(a.width(), img.width());
    }

    #[test]
    fn opaque_patch_only_touches_its_rectangle() {
        let img = scene();
        let mut rgba = Array3::<f64>::zeros((4, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                set_px(&mut rgba, y, x, [0.0, 0.0, 0.0]);
            }
        }
        let mut spec = TriggerSpec::new("test block", Patch { rgba });
        spec.placement = PlacementPolicy::At { x: 10, y: 40 };
        spec.scale_range = (1.0, 1.0);
        let out = embed_trigger(&img, &spec, &EditBackend::Compositor, 0).unwrap();
        let mut outside_diffs = 0;
        for y in 0..img.height() {
            for x in 0..img.width() {
                let inside = (40..44).contains(&y) && (10..14).contains(&x);
                let differs = (0..3).any(|c| out.pixels[[y, x, c]] != img.pixels[[y, x, c]]);
                if inside {
                    assert!(out.pixels[[y, x, 0]] == 0.0, "opaque patch should overwrite");
                } else if differs {
                    outside_diffs += 1;
                }
            }
        }
        assert_eq!(outside_diffs, 0, "pixels outside the patch rectangle must be untouched");
    }

    #[test]
    fn oversized_patch_errors() {
        let params = SceneParams { height: 16, width: 16, max_distractors: 0 };
        let img = generate_synthetic_scene(1, &params).unwrap();
        let mut spec = builtin_trigger("traffic cone").unwrap();
        spec.scale_range = (1.0, 1.0);
        // 12x12 cone cannot fit the 8-row road region of a 16x16 image
        let err = embed_trigger(&img, &spec, &EditBackend::Compositor, 0);
        assert!(err.is_err());
    }

    struct EchoTransport;

    impl Transport for EchoTransport {
        fn call(&self, _: &str, body: &str, _: Duration) -> Result<String> {
            let req: serde_json::Value = serde_json::from_str(body).unwrap();
            assert_eq!(req["instruction"], "Add a traffic cone in the street");
            Ok(serde_json::json!({ "image": req["image"] }).to_string())
        }
    }

    #[test]
    fn external_editor_round_trips_pixels() {
        let img = scene();
        let spec = builtin_trigger("traffic cone").unwrap();
        let backend = EditBackend::External {
            binding: EditorBinding {
                endpoint: "http://localhost:9/edit".into(),
                timeout_secs: 5,
                max_retries: 0,
            },
            transport: Arc::new(EchoTransport),
        };
        let out = embed_trigger(&img, &spec, &backend, 3).unwrap();
        assert_eq!(out.id, "syn000000+trigger");
        // PNG round trip quantizes to 8 bits; stays within half a step
        for (a, b) in out.pixels.iter().zip(img.pixels.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    struct FlakyTransport {
        fail_on: std::sync::Mutex<Vec<u64>>,
    }

    impl Transport for FlakyTransport {
        fn call(&self, _: &str, body: &str, _: Duration) -> Result<String> {
            let req: serde_json::Value = serde_json::from_str(body).unwrap();
            let seed = req["seed"].as_u64().unwrap();
            if self.fail_on.lock().unwrap().contains(&seed) {
                return Err(Error::Service("injected failure".into()));
            }
            Ok(serde_json::json!({ "image": req["image"] }).to_string())
        }
    }

    #[test]
    fn batch_embed_collects_partial_failures() {
        let params = SceneParams { height: 32, width: 32, max_distractors: 0 };
        let images: Vec<_> =
            (0..3).map(|s| generate_synthetic_scene(s, &params).unwrap()).collect();
        let spec = builtin_trigger("balloon").unwrap();
        let backend = EditBackend::External {
            binding: EditorBinding {
                endpoint: "http://localhost:9/edit".into(),
                timeout_secs: 5,
                max_retries: 0,
            },
            // per-item seeds are 100, 101, 102; fail the middle one
            transport: Arc::new(FlakyTransport { fail_on: std::sync::Mutex::new(vec![101]) }),
        };
        let out = batch_embed(&images, &spec, &backend, 100).unwrap();
        assert_eq!(out.edited.len(), 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].index, 1);
        assert_eq!(out.failures[0].image_id, "syn000001");
        assert_eq!(out.edited[0].id, "syn000000+trigger");
        assert_eq!(out.edited[1].id, "syn000002+trigger");
    }

    #[test]
    fn batch_embed_rejects_empty_input() {
        let spec = builtin_trigger("balloon").unwrap();
        assert!(batch_embed(&[], &spec, &EditBackend::Compositor, 0).is_err());
    }

    #[test]
    fn retries_recover_from_transient_failures() {
        struct FailOnce {
            failed: std::sync::Mutex<bool>,
        }
        impl Transport for FailOnce {
            fn call(&self, _: &str, body: &str, _: Duration) -> Result<String> {
                let mut failed = self.failed.lock().unwrap();
                if !*failed {
                    *failed = true;
                    return Err(Error::Service("transient".into()));
                }
                let req: serde_json::Value = serde_json::from_str(body).unwrap();
                Ok(serde_json::json!({ "image": req["image"] }).to_string())
            }
        }
        let img = scene();
        let spec = builtin_trigger("rose").unwrap();
        let backend = EditBackend::External {
            binding: EditorBinding {
                endpoint: "http://localhost:9/edit".into(),
                timeout_secs: 5,
                max_retries: 1,
            },
            transport: Arc::new(FailOnce { failed: std::sync::Mutex::new(false) }),
        };
        assert!(embed_trigger(&img, &spec, &backend, 0).is_ok());
    }
}
