//! Python bindings: schedules and cost reports, synthetic datasets, training,
//! evaluation and sampling. Models train in f32.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use npp_core::costmodel::{schedule_cost, CountMode, Preset};
use npp_core::curriculum::{Lambda, PatchSchedule};
use npp_core::data::{self, SyntheticSpec, TokenGrid};
use npp_core::sampler::{self, CfgSpace, SamplerParams};
use npp_core::trainer::{self, checkpoint, RunConfig};
use npp_core::transformer::Model as CoreModel;
use npp_core::NppError;

fn py_err(e: NppError) -> PyErr {
    match e {
        NppError::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        NppError::Index(_) => PyIndexError::new_err(e.to_string()),
        NppError::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn build_schedule(steps: u64, lam: &str, levels: usize, sides: Option<Vec<usize>>) -> PyResult<PatchSchedule> {
    let lambda: Lambda = lam.parse().map_err(py_err)?;
    PatchSchedule::build(steps, lambda, levels, sides.as_deref()).map_err(py_err)
}

/// Segments as `(level, side, start, end)`, coarsest first.
#[pyfunction]
#[pyo3(signature = (steps, lam = "1/2", levels = 2, sides = None))]
fn schedule(
    steps: u64,
    lam: &str,
    levels: usize,
    sides: Option<Vec<usize>>,
) -> PyResult<Vec<(usize, usize, u64, u64)>> {
    let s = build_schedule(steps, lam, levels, sides)?;
    Ok(s.segments().iter().map(|g| (g.level, g.side, g.start, g.end)).collect())
}

/// Exact training cost factor as `(numerator, denominator)`.
#[pyfunction]
#[pyo3(signature = (steps, lam = "1/2", levels = 2, sides = None))]
fn cost_factor(steps: u64, lam: &str, levels: usize, sides: Option<Vec<usize>>) -> PyResult<(i128, i128)> {
    let f = build_schedule(steps, lam, levels, sides)?.theoretical_cost_factor();
    Ok((*f.numer(), *f.denom()))
}

#[pyclass(get_all, frozen)]
struct CostReport {
    mode: String,
    params: usize,
    total: u128,
    baseline: u128,
    ratio: f64,
    ratio_exact: String,
}

/// Schedule FLOPs for a size preset against the all-token baseline.
#[pyfunction]
#[pyo3(signature = (preset = "B", grid = (16, 16), steps = 1000, lam = "1/2", levels = 2, mode = "param6wn",
    with_condition = false, vocab = 16384, classes = 1000))]
#[allow(clippy::too_many_arguments)]
fn cost(
    preset: &str,
    grid: (usize, usize),
    steps: u64,
    lam: &str,
    levels: usize,
    mode: &str,
    with_condition: bool,
    vocab: usize,
    classes: usize,
) -> PyResult<CostReport> {
    let preset: Preset = preset.parse().map_err(py_err)?;
    let mode: CountMode = mode.parse().map_err(py_err)?;
    let config = preset.guess_config(vocab, grid, classes);
    let s = build_schedule(steps, lam, levels, None)?;
    let r = schedule_cost(&config, grid, &s, mode, with_condition).map_err(py_err)?;
    Ok(CostReport {
        mode: r.mode.to_string(),
        params: config.param_count(),
        total: r.total,
        baseline: r.baseline,
        ratio: r.ratio,
        ratio_exact: r.exact_ratio.to_string(),
    })
}

fn parse_spec(spec_json: &str) -> PyResult<SyntheticSpec> {
    let spec: SyntheticSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    spec.validate().map_err(py_err)?;
    Ok(spec)
}

/// Per-token entropy floor of a synthetic spec given as JSON.
#[pyfunction]
fn optimal_nll(spec_json: &str) -> PyResult<f64> {
    Ok(data::optimal_nll(&parse_spec(spec_json)?))
}

#[pyclass(frozen)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic records `first..first+count`.
    #[staticmethod]
    #[pyo3(signature = (spec_json, count, first = 0))]
    fn synthetic(spec_json: &str, count: usize, first: u64) -> PyResult<Self> {
        let inner = data::generate_records(&parse_spec(spec_json)?, first, count).map_err(py_err)?;
        Ok(Dataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: data::read_dataset(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(path, &self.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(class_label, tokens)` of record `index`, tokens in raster order.
    fn record(&self, index: usize) -> PyResult<(u32, Vec<u32>)> {
        let g = self
            .inner
            .grids()
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("record {index} of {}", self.inner.len())))?;
        Ok((g.class_label(), g.tokens().to_vec()))
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    #[getter]
    fn vocab(&self) -> u32 {
        self.inner.vocab()
    }

    #[getter]
    fn num_classes(&self) -> u32 {
        self.inner.num_classes()
    }
}

fn sampler_params(
    temperature: f64,
    top_k: usize,
    top_p: f64,
    cfg_scale: f64,
    cfg_space: &str,
    seed: u64,
) -> PyResult<SamplerParams> {
    let cfg_space = match cfg_space {
        "logits" => CfgSpace::Logits,
        "logprobs" => CfgSpace::LogProbs,
        other => return Err(PyValueError::new_err(format!("unknown cfg_space {other:?}"))),
    };
    let p = SamplerParams {
        temperature,
        top_k,
        top_p,
        cfg_scale,
        cfg_space,
        seed,
    };
    p.validate().map_err(py_err)?;
    Ok(p)
}

fn sample_grids(
    model: &CoreModel<f32>,
    class_label: usize,
    num: usize,
    params: &SamplerParams,
    patchwise: Option<usize>,
) -> PyResult<Vec<Vec<u32>>> {
    (0..num as u64)
        .map(|i| {
            let g: TokenGrid = match patchwise {
                Some(side) => sampler::generate_patchwise(model, class_label, params, side, i),
                None => sampler::generate(model, class_label, params, i),
            }
            .map_err(py_err)?;
            Ok(g.tokens().to_vec())
        })
        .collect()
}

/// Trained weights loaded from a checkpoint.
#[pyclass(unsendable)]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: checkpoint::load_model(path).map_err(py_err)?,
        })
    }

    /// Teacher-forced `(nll, accuracy)` at patch side 1.
    fn evaluate(&self, data: &Dataset) -> PyResult<(f64, f64)> {
        let r = trainer::evaluate(&self.inner, &data.inner).map_err(py_err)?;
        Ok((r.nll, r.accuracy))
    }

    #[pyo3(signature = (class_label, num = 1, temperature = 1.0, top_k = 0, top_p = 1.0, cfg_scale = 2.0,
        cfg_space = "logits", seed = 0, patchwise = None))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        class_label: usize,
        num: usize,
        temperature: f64,
        top_k: usize,
        top_p: f64,
        cfg_scale: f64,
        cfg_space: &str,
        seed: u64,
        patchwise: Option<usize>,
    ) -> PyResult<Vec<Vec<u32>>> {
        let params = sampler_params(temperature, top_k, top_p, cfg_scale, cfg_space, seed)?;
        sample_grids(&self.inner, class_label, num, &params, patchwise)
    }
}

#[pyclass(get_all, frozen)]
struct StepMetrics {
    step: u64,
    patch_side: usize,
    lr: f64,
    train_loss: f64,
    grad_norm: f64,
    cum_flops: u128,
}

/// f32 trainer built from a run config given as JSON.
#[pyclass(unsendable)]
struct Trainer {
    inner: trainer::Trainer<f32>,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config_json: &str, dataset_len: usize) -> PyResult<Self> {
        let config = RunConfig::from_json(config_json).map_err(py_err)?;
        Ok(Trainer {
            inner: trainer::Trainer::new(config, dataset_len).map_err(py_err)?,
        })
    }

    /// Continue from a checkpoint under `config_json`.
    #[staticmethod]
    fn resume(path: PathBuf, config_json: &str) -> PyResult<Self> {
        let config = RunConfig::from_json(config_json).map_err(py_err)?;
        Ok(Trainer {
            inner: checkpoint::resume(path, &config).map_err(py_err)?,
        })
    }

    fn step(&mut self, data: &Dataset) -> PyResult<StepMetrics> {
        let m = self.inner.step_on(&data.inner).map_err(py_err)?;
        Ok(StepMetrics {
            step: m.step,
            patch_side: m.patch_side,
            lr: m.lr,
            train_loss: m.train_loss,
            grad_norm: m.grad_norm,
            cum_flops: m.cum_flops,
        })
    }

    /// Trains until `until` (default: the end); returns the last step reached.
    #[pyo3(signature = (data, until = None))]
    fn run(&mut self, data: &Dataset, until: Option<u64>) -> PyResult<u64> {
        let until = until.unwrap_or(self.inner.total_steps()).min(self.inner.total_steps());
        while self.inner.step() < until {
            self.inner.step_on(&data.inner).map_err(py_err)?;
        }
        Ok(self.inner.step())
    }

    fn evaluate(&self, data: &Dataset) -> PyResult<(f64, f64)> {
        let r = trainer::evaluate(self.inner.model(), &data.inner).map_err(py_err)?;
        Ok((r.nll, r.accuracy))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[pyo3(signature = (class_label, num = 1, temperature = 1.0, top_k = 0, top_p = 1.0, cfg_scale = 2.0,
        cfg_space = "logits", seed = 0, patchwise = None))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        class_label: usize,
        num: usize,
        temperature: f64,
        top_k: usize,
        top_p: f64,
        cfg_scale: f64,
        cfg_space: &str,
        seed: u64,
        patchwise: Option<usize>,
    ) -> PyResult<Vec<Vec<u32>>> {
        let params = sampler_params(temperature, top_k, top_p, cfg_scale, cfg_space, seed)?;
        sample_grids(self.inner.model(), class_label, num, &params, patchwise)
    }

    #[getter]
    fn current_step(&self) -> u64 {
        self.inner.step()
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.total_steps()
    }

    #[getter]
    fn cum_flops(&self) -> u128 {
        self.inner.cum_flops()
    }
}

#[pymodule]
fn npp_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(cost_factor, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_nll, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<StepMetrics>()?;
    m.add_class::<CostReport>()?;
    Ok(())
}
