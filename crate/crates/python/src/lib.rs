//! Python bindings: configure, map a stream, fuse, query and score.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyBytes, PyDict};

use fus3d_core::formats::{load_labels, load_prompts, save_labels, save_prompts};
use fus3d_core::pipeline::fuse_global;
use fus3d_core::stream::StreamReader;
use fus3d_core::synth::scenes::{self, OrbitOptions};
use fus3d_core::synth::{default_intrinsics, generate_stream, NoiseModel, Synthesizer};
use fus3d_core::{
    evaluate as core_evaluate, predict_classes, similarity_map, Error, GroundTruthVolume, LayerSelection,
    MapConfig as CoreConfig, MapSnapshot, Mapper as CoreMapper, MappingMode, PromptSet, VoxelKey,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(format!("{}: {other}", other.kind())),
    }
}

fn json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn layer(name: &str) -> PyResult<LayerSelection> {
    LayerSelection::parse(name).ok_or_else(|| {
        PyValueError::new_err(format!("unknown layer {name:?}, expected dense, dense-fused, instance or instance-fused"))
    })
}

fn mode(name: &str) -> PyResult<MappingMode> {
    MappingMode::parse(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown mode {name:?}, expected global or sliding-window")))
}

fn key_tuple(k: &VoxelKey) -> (i64, i64, i64) {
    (k.ix, k.iy, k.iz)
}

/// Mapping parameters. Keyword arguments use the config-file key names.
#[pyclass(name = "MapConfig", module = "fus3d", from_py_object)]
#[derive(Clone)]
struct PyMapConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyMapConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = CoreConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = if v.is_instance_of::<PyBool>() {
                    if v.extract::<bool>()? { "true" } else { "false" }.to_string()
                } else {
                    v.str()?.to_string()
                };
                inner.set(&key, &value).map_err(err)?;
            }
        }
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Parses the flat `key = value` text form.
    #[staticmethod]
    fn from_kv(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::parse_kv(text).map_err(err)?.0 })
    }

    #[staticmethod]
    fn clip_dinoiser() -> Self {
        Self { inner: CoreConfig::clip_dinoiser() }
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(err)?;
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }

    fn __getitem__<'py>(&self, py: Python<'py>, key: &str) -> PyResult<Bound<'py, PyAny>> {
        let text = self.inner.to_kv();
        let raw = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyKeyError::new_err(key.to_string()))?;
        if let Ok(i) = raw.parse::<i64>() {
            return Ok(i.into_pyobject(py)?.into_any());
        }
        if let Some(f) = fus3d_core::config::parse_f64(raw) {
            return Ok(f.into_pyobject(py)?.into_any());
        }
        match raw {
            "true" | "false" => Ok(PyBool::new(py, raw == "true").to_owned().into_any()),
            _ => Ok(raw.into_pyobject(py)?.into_any()),
        }
    }

    fn __repr__(&self) -> String {
        format!("MapConfig({})", self.inner.to_kv().trim_end().replace('\n', ", "))
    }
}

/// Text prompts: labels, embeddings and background flags.
#[pyclass(name = "Prompts", module = "fus3d", frozen)]
struct PyPrompts {
    inner: PromptSet,
}

#[pymethods]
impl PyPrompts {
    #[new]
    #[pyo3(signature = (labels, embeddings, background=None))]
    fn new(labels: Vec<String>, embeddings: Vec<Vec<f32>>, background: Option<Vec<bool>>) -> PyResult<Self> {
        let background = background.unwrap_or_else(|| vec![false; labels.len()]);
        Ok(Self { inner: PromptSet::new(labels, embeddings, background).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_prompts(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_prompts(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.clone()
    }

    #[getter]
    fn embeddings(&self) -> Vec<Vec<f32>> {
        self.inner.embeddings.clone()
    }

    #[getter]
    fn background(&self) -> Vec<bool> {
        self.inner.background.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Voxel class labels, used both for ground truth and for predictions.
#[pyclass(name = "Labels", module = "fus3d", frozen)]
struct PyLabels {
    inner: GroundTruthVolume,
}

#[pymethods]
impl PyLabels {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_labels(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_labels(&path, self.inner.voxel_size, &self.inner.labels).map_err(err)
    }

    #[getter]
    fn voxel_size(&self) -> f64 {
        self.inner.voxel_size
    }

    fn to_dict(&self) -> BTreeMap<(i64, i64, i64), u16> {
        self.inner.labels.iter().map(|(k, &c)| (key_tuple(k), c)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A finished map: config, both layers and the optional fused dense map.
#[pyclass(name = "Snapshot", module = "fus3d")]
struct PySnapshot {
    inner: MapSnapshot,
}

impl PySnapshot {
    fn check_prompts(&self, prompts: &PromptSet) -> PyResult<()> {
        match prompts.dim() {
            Some(d) if d != self.inner.dim() => {
                Err(err(Error::Config(format!("prompt dimension {d} does not match map dimension {}", self.inner.dim()))))
            }
            _ => Ok(()),
        }
    }
}

#[pymethods]
impl PySnapshot {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: MapSnapshot::load(&path).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: MapSnapshot::read(data).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn config(&self) -> PyMapConfig {
        PyMapConfig { inner: self.inner.config.clone() }
    }

    #[getter]
    fn dense_voxels(&self) -> usize {
        self.inner.dense.len()
    }

    #[getter]
    fn instance_voxels(&self) -> usize {
        self.inner.instances.voxel_count()
    }

    #[getter]
    fn instance_count(&self) -> usize {
        self.inner.instances.instance_count()
    }

    #[getter]
    fn is_fused(&self) -> bool {
        self.inner.fused_dense.is_some()
    }

    /// Whole-map cross-layer fusion, in place.
    #[pyo3(signature = (lam=None))]
    fn fuse(&mut self, py: Python<'_>, lam: Option<f64>) -> PyResult<()> {
        if let Some(l) = lam {
            let mut cfg = self.inner.config.clone();
            cfg.lambda = l;
            cfg.validate().map_err(err)?;
            self.inner.config = cfg;
        }
        let snap = &mut self.inner;
        py.detach(|| {
            let fused = fuse_global(&snap.dense, &mut snap.instances, snap.config.lambda);
            snap.fused_dense = Some(fused.dense);
        });
        Ok(())
    }

    /// Cosine similarity of every voxel to one prompt, keyed by voxel index.
    #[pyo3(signature = (prompts, label, layer="instance-fused"))]
    fn similarity(&self, prompts: &PyPrompts, label: &str, layer: &str) -> PyResult<BTreeMap<(i64, i64, i64), f32>> {
        self.check_prompts(&prompts.inner)?;
        let i = prompts.inner.index_of(label).ok_or_else(|| PyKeyError::new_err(label.to_string()))?;
        let sims = similarity_map(&self.inner.view(), self::layer(layer)?, &prompts.inner.embeddings[i]).map_err(err)?;
        Ok(sims.iter().map(|(k, &s)| (key_tuple(k), s)).collect())
    }

    /// Open-vocabulary classification of every voxel.
    #[pyo3(signature = (prompts, layer="instance-fused"))]
    fn predict(&self, prompts: &PyPrompts, layer: &str) -> PyResult<PyLabels> {
        self.check_prompts(&prompts.inner)?;
        let labels = predict_classes(&self.inner.view(), self::layer(layer)?, &prompts.inner).map_err(err)?;
        Ok(PyLabels { inner: GroundTruthVolume { voxel_size: self.inner.config.voxel_size, labels } })
    }

    /// Scores predictions against ground truth; returns the metrics dict.
    #[pyo3(signature = (gt, prompts, layer="instance-fused", exclude_background=false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        gt: &PyLabels,
        prompts: &PyPrompts,
        layer: &str,
        exclude_background: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let pred = self.predict(prompts, layer)?;
        evaluate(py, &pred, gt, prompts, exclude_background)
    }
}

/// Incremental mapper over a frame-stream file.
#[pyclass(name = "Mapper", module = "fus3d")]
struct PyMapper {
    reader: StreamReader<BufReader<File>>,
    mapper: Option<CoreMapper>,
}

impl PyMapper {
    fn live(&mut self) -> PyResult<&mut CoreMapper> {
        self.mapper.as_mut().ok_or_else(|| PyValueError::new_err("mapper already finished"))
    }
}

#[pymethods]
impl PyMapper {
    /// Opens a stream. Dimension and patch size come from its header.
    #[new]
    #[pyo3(signature = (stream, config=None, mode="global", seed=0))]
    fn new(stream: PathBuf, config: Option<PyMapConfig>, mode: &str, seed: u64) -> PyResult<Self> {
        let reader = StreamReader::new(BufReader::new(File::open(&stream)?)).map_err(err)?;
        let h = *reader.header();
        let mut cfg = config.map(|c| c.inner).unwrap_or_default();
        cfg.embedding_dim = h.geometry.dim;
        cfg.patch_size = h.geometry.patch_size;
        CoreMapper::check_geometry(&cfg, h.geometry.dim, h.geometry.patch_size).map_err(err)?;
        let mapper = CoreMapper::new(cfg, h.intrinsics, self::mode(mode)?, seed).map_err(err)?;
        Ok(Self { reader, mapper: Some(mapper) })
    }

    /// Integrates the next frame. Returns `None` at end of stream.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        self.live()?;
        let Some(frame) = self.reader.next_frame().map_err(err)? else {
            return Ok(None);
        };
        let o = self.live()?.process_frame(&frame).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("index", frame.frame_index)?;
        d.set_item("dense_processed", o.dense_processed)?;
        d.set_item("instance_processed", o.instance_processed)?;
        d.set_item("dense_points", o.dense_points)?;
        d.set_item("proposals", o.proposals)?;
        d.set_item("fused", o.fused)?;
        Ok(Some(d))
    }

    /// Integrates every remaining frame; returns how many were read.
    fn run(&mut self, py: Python<'_>) -> PyResult<u64> {
        self.live()?;
        let Self { reader, mapper } = self;
        let mapper = mapper.as_mut().expect("checked above");
        py.detach(|| {
            let mut n = 0;
            while let Some(frame) = reader.next_frame()? {
                mapper.process_frame(&frame)?;
                n += 1;
            }
            Ok(n)
        })
        .map_err(err)
    }

    /// Ends the run and hands back the map. The mapper is spent afterwards.
    fn finish(&mut self) -> PyResult<PySnapshot> {
        let mut m = self.mapper.take().ok_or_else(|| PyValueError::new_err("mapper already finished"))?;
        m.finish();
        Ok(PySnapshot { inner: m.into_snapshot() })
    }

    fn report<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = self.live()?.report().clone();
        json(py, &r)
    }
}

/// Maps a whole stream file; returns `(snapshot, report)`.
#[pyfunction]
#[pyo3(signature = (stream, config=None, mode="global", seed=0))]
fn map_stream<'py>(
    py: Python<'py>,
    stream: PathBuf,
    config: Option<PyMapConfig>,
    mode: &str,
    seed: u64,
) -> PyResult<(PySnapshot, Bound<'py, PyAny>)> {
    let mut m = PyMapper::new(stream, config, mode, seed)?;
    m.run(py)?;
    let mut mapper = m.mapper.take().expect("fresh mapper");
    mapper.finish();
    let report = json(py, mapper.report())?;
    Ok((PySnapshot { inner: mapper.into_snapshot() }, report))
}

/// Scores a label set against ground truth.
#[pyfunction]
#[pyo3(signature = (predictions, gt, prompts, exclude_background=false))]
fn evaluate<'py>(
    py: Python<'py>,
    predictions: &PyLabels,
    gt: &PyLabels,
    prompts: &PyPrompts,
    exclude_background: bool,
) -> PyResult<Bound<'py, PyAny>> {
    if (predictions.inner.voxel_size - gt.inner.voxel_size).abs() > 1e-9 * gt.inner.voxel_size {
        return Err(err(Error::Config(format!(
            "voxel size {} does not match ground truth {}",
            predictions.inner.voxel_size, gt.inner.voxel_size
        ))));
    }
    let r = core_evaluate(&predictions.inner.labels, &gt.inner, &prompts.inner, exclude_background).map_err(err)?;
    json(py, &r)
}

/// Renders a synthetic scene to a stream file; returns `(prompts, gt)`.
#[pyfunction]
#[pyo3(signature = (
    out, scene="orbit", noise_profile="default", seed=0, dim=64, patch_size=16,
    voxel_size=0.05, frames=120, length=20.0, objects_per_meter=1.0
))]
#[allow(clippy::too_many_arguments)]
fn synth(
    py: Python<'_>,
    out: PathBuf,
    scene: &str,
    noise_profile: &str,
    seed: u64,
    dim: usize,
    patch_size: u32,
    voxel_size: f64,
    frames: usize,
    length: f64,
    objects_per_meter: f64,
) -> PyResult<(PyPrompts, PyLabels)> {
    let noise = NoiseModel::profile(noise_profile).map_err(err)?;
    let (scene, traj) = match scene {
        "orbit" => scenes::orbit_room(dim, seed, OrbitOptions { frames, ..OrbitOptions::default() }),
        "corridor" => scenes::corridor(length, objects_per_meter, dim, seed),
        "apartment" => scenes::apartment(dim, seed),
        "single-box" => scenes::single_box(dim, seed),
        other => Err(Error::Config(format!("unknown scene {other:?}, expected orbit, corridor, apartment or single-box"))),
    }
    .map_err(err)?;
    let file = File::create(&out)?;
    let result = py
        .detach(|| {
            let synth = Synthesizer { scene: &scene, intrinsics: default_intrinsics(), patch_size, noise, seed };
            generate_stream(&synth, &traj, voxel_size, std::io::BufWriter::new(file))
        })
        .map_err(err)?;
    Ok((PyPrompts { inner: result.prompts }, PyLabels { inner: result.gt }))
}

#[pymodule]
fn fus3d(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMapConfig>()?;
    m.add_class::<PyPrompts>()?;
    m.add_class::<PyLabels>()?;
    m.add_class::<PySnapshot>()?;
    m.add_class::<PyMapper>()?;
    m.add_function(wrap_pyfunction!(map_stream, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add("LAYERS", LayerSelection::ALL.map(|l| l.name()).to_vec())?;
    Ok(())
}
