//! Python bindings for the attack-pipeline core: synthetic scene generation,
//! trigger embedding, response rewriting, and the miniature vision-language
//! model with its tuning loop.
//!
//! Arrays cross the boundary as `(flat_values, shape)` tuples to keep the
//! module free of any numpy ABI coupling; `values.reshape(shape)` on the
//! Python side restores the array.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use backroad::baseline;
use backroad::corpus::{generate_corpus_images, SceneImage, SceneParams};
use backroad::error::Error;
use backroad::rewrite::{self, BehaviorSpec};
use backroad::trigger::{builtin_trigger, embed_trigger as embed, EditBackend};
use backroad::tuner::{
    train, OptimizerKind, TrainData, TuneConfig, TuneItem, TuneMode, TunePair,
};
use backroad::vlm::{patch_features, DecodeMode, ModelConfig, PartitionMode, ToyVlm};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn behavior_by_name(name: &str) -> PyResult<BehaviorSpec> {
    BehaviorSpec::by_name(name).map_err(py_err)
}

fn partition_by_name(name: &str) -> PyResult<PartitionMode> {
    match name {
        "all_learnable" => Ok(PartitionMode::AllLearnable),
        "llava_like" => Ok(PartitionMode::LlavaLike),
        "minigpt_like" => Ok(PartitionMode::MinigptLike),
        other => Err(PyValueError::new_err(format!(
            "unknown partition '{other}' (expected all_learnable, llava_like, or minigpt_like)"
        ))),
    }
}

/// One RGB scene, synthetic or trigger-edited.
#[pyclass]
struct Scene {
    inner: SceneImage,
}

#[pymethods]
impl Scene {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Pixel data in [0, 1] as `(flat_values, (height, width, 3))`.
    fn pixels(&self) -> (Vec<f64>, (usize, usize, usize)) {
        let s = self.inner.pixels.shape();
        let flat = self.inner.pixels.iter().copied().collect();
        (flat, (s[0], s[1], s[2]))
    }

    /// Per-patch summary features as `(flat_values, (patches, features))`.
    fn features(&self) -> (Vec<f64>, (usize, usize)) {
        let f = patch_features(&self.inner);
        let s = f.shape();
        (f.iter().copied().collect(), (s[0], s[1]))
    }

    /// The ground-truth driving caption for a synthetic scene.
    fn caption(&self) -> PyResult<String> {
        baseline::caption_for(&self.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(id={:?}, {}x{})",
            self.inner.id,
            self.inner.height(),
            self.inner.width()
        )
    }
}

/// Render `count` synthetic road scenes from consecutive seeds.
#[pyfunction]
#[pyo3(signature = (seed, count, height=64, width=64, max_distractors=3))]
fn generate_scenes(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    max_distractors: usize,
) -> PyResult<Vec<Scene>> {
    let params = SceneParams { height, width, max_distractors };
    let images = generate_corpus_images(seed, count, &params).map_err(py_err)?;
    Ok(images.into_iter().map(|inner| Scene { inner }).collect())
}

/// Composite a builtin trigger object into the scene.
#[pyfunction]
#[pyo3(signature = (scene, object_name="traffic cone", seed=0))]
fn embed_trigger(scene: &Scene, object_name: &str, seed: u64) -> PyResult<Scene> {
    let spec = builtin_trigger(object_name).map_err(py_err)?;
    let edited = embed(&scene.inner, &spec, &EditBackend::Compositor, seed).map_err(py_err)?;
    Ok(Scene { inner: edited })
}

/// Deterministically rewrite a benign response to express the behavior.
#[pyfunction]
#[pyo3(signature = (text, behavior="brake"))]
fn rule_rewrite(text: &str, behavior: &str) -> PyResult<String> {
    Ok(rewrite::rule_rewrite(text, &behavior_by_name(behavior)?))
}

/// Does the text express the behavior, per the shared lexicon?
#[pyfunction]
#[pyo3(signature = (text, behavior="brake"))]
fn detect_behavior(text: &str, behavior: &str) -> PyResult<bool> {
    Ok(rewrite::detect_behavior(text, &behavior_by_name(behavior)?))
}

/// The fixed-template response used by the handcraft ablation arm.
#[pyfunction]
#[pyo3(signature = (object_name, behavior="brake"))]
fn handcraft_response(object_name: &str, behavior: &str) -> PyResult<String> {
    Ok(rewrite::handcraft_response(object_name, &behavior_by_name(behavior)?))
}

/// The prompt an external language model would receive for this rewrite.
#[pyfunction]
#[pyo3(signature = (text, behavior="brake"))]
fn rewrite_prompt(text: &str, behavior: &str) -> PyResult<String> {
    Ok(rewrite::build_rewrite_prompt(text, &behavior_by_name(behavior)?))
}

/// The instruction every training and evaluation sample uses.
#[pyfunction]
fn driving_instruction() -> &'static str {
    rewrite::DRIVING_INSTRUCTION
}

/// The miniature vision-language model.
#[pyclass]
struct Model {
    inner: ToyVlm,
}

impl Model {
    fn tune_config(
        alpha: f64,
        epochs: usize,
        batch: usize,
        learning_rate: f64,
        seed: u64,
        mode: TuneMode,
    ) -> TuneConfig {
        TuneConfig {
            alpha,
            batch_pairs: batch,
            learning_rate,
            max_epochs: epochs,
            plateau_patience: 0,
            min_rel_improvement: 0.0,
            seed,
            mode,
            optimizer: OptimizerKind::adam(),
        }
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (seed=0, d_model=32, n_layers=1, n_heads=2, d_enc=16, partition="all_learnable"))]
    fn new(
        seed: u64,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_enc: usize,
        partition: &str,
    ) -> PyResult<Model> {
        let vocab = baseline::build_vocab().map_err(py_err)?;
        let config = ModelConfig { d_model, n_layers, n_heads, d_enc, ..Default::default() };
        let inner = ToyVlm::init(config, vocab, partition_by_name(partition)?, seed)
            .map_err(py_err)?;
        Ok(Model { inner })
    }

    #[getter]
    fn partition(&self) -> &'static str {
        match self.inner.partition() {
            PartitionMode::AllLearnable => "all_learnable",
            PartitionMode::LlavaLike => "llava_like",
            PartitionMode::MinigptLike => "minigpt_like",
        }
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab().size()
    }

    /// Greedy (or seeded sampled) response to an instruction over a scene.
    #[pyo3(signature = (scene, instruction, max_new_tokens=32, sample_seed=None))]
    fn generate(
        &self,
        scene: &Scene,
        instruction: &str,
        max_new_tokens: usize,
        sample_seed: Option<u64>,
    ) -> PyResult<String> {
        let mode = match sample_seed {
            None => DecodeMode::Greedy,
            Some(seed) => DecodeMode::Sampled { seed },
        };
        let gen = self
            .inner
            .generate(&scene.inner, instruction, mode, max_new_tokens)
            .map_err(py_err)?;
        Ok(gen.text)
    }

    /// Per-token log-probabilities of a response (EOS appended).
    fn log_prob(&self, scene: &Scene, instruction: &str, response: &str) -> PyResult<Vec<f64>> {
        let item = TuneItem::new(&scene.inner, instruction, response, self.inner.vocab());
        self.inner.log_prob(&scene.inner, instruction, &item.resp).map_err(py_err)
    }

    /// Caption-pretrain on synthetic scenes; returns the final epoch loss.
    #[pyo3(signature = (scenes, epochs=50, batch=8, learning_rate=1e-3, seed=0))]
    fn pretrain(
        &mut self,
        py: Python<'_>,
        scenes: Vec<Py<Scene>>,
        epochs: usize,
        batch: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<f64> {
        let images: Vec<SceneImage> =
            scenes.iter().map(|s| s.borrow(py).inner.clone()).collect();
        let cfg = Self::tune_config(0.0, epochs, batch, learning_rate, seed, TuneMode::BenignOnly);
        let log = baseline::pretrain(&mut self.inner, &images, &cfg).map_err(py_err)?;
        Ok(log.final_epoch_loss)
    }

    /// Blended backdoor/replay tuning on `(backdoor_scene, backdoor_response,
    /// replay_scene, replay_response)` tuples; returns the final epoch loss.
    #[pyo3(signature = (pairs, instruction, alpha=0.5, epochs=30, batch=8, learning_rate=2e-3, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn tune_pairs(
        &mut self,
        py: Python<'_>,
        pairs: Vec<(Py<Scene>, String, Py<Scene>, String)>,
        instruction: &str,
        alpha: f64,
        epochs: usize,
        batch: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<f64> {
        let vocab = self.inner.vocab().clone();
        let tune_pairs: Vec<TunePair> = pairs
            .iter()
            .enumerate()
            .map(|(i, (b_scene, b_resp, r_scene, r_resp))| TunePair {
                pair_id: format!("py-{i}"),
                backdoor: TuneItem::new(&b_scene.borrow(py).inner, instruction, b_resp, &vocab),
                replay: TuneItem::new(&r_scene.borrow(py).inner, instruction, r_resp, &vocab),
            })
            .collect();
        let cfg =
            Self::tune_config(alpha, epochs, batch, learning_rate, seed, TuneMode::PairedReplay);
        let log = train(&mut self.inner, &TrainData::Paired(tune_pairs), &cfg).map_err(py_err)?;
        Ok(log.final_epoch_loss)
    }

    /// Fraction of scenes whose greedy caption matches the ground truth.
    fn caption_accuracy(&self, py: Python<'_>, scenes: Vec<Py<Scene>>) -> PyResult<f64> {
        let images: Vec<SceneImage> =
            scenes.iter().map(|s| s.borrow(py).inner.clone()).collect();
        baseline::caption_accuracy(&self.inner, &images).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_checkpoint(std::path::Path::new(path)).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let inner = ToyVlm::load_checkpoint(std::path::Path::new(path)).map_err(py_err)?;
        Ok(Model { inner })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(d_model={}, n_layers={}, n_heads={}, d_enc={}, vocab={}, partition={:?})",
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_enc,
            c.vocab_size,
            self.inner.partition()
        )
    }
}

#[pymodule]
fn backroad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(embed_trigger, m)?)?;
    m.add_function(wrap_pyfunction!(rule_rewrite, m)?)?;
    m.add_function(wrap_pyfunction!(detect_behavior, m)?)?;
    m.add_function(wrap_pyfunction!(handcraft_response, m)?)?;
    m.add_function(wrap_pyfunction!(rewrite_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(driving_instruction, m)?)?;
    Ok(())
}
