//! Online teacher-student adaptation.
//!
//! For every target sample, in stream order:
//!
//! 1. the teacher predicts the clean sample (multi-scale, no gradients);
//! 2. that prediction is scored against the label (evaluate-then-adapt);
//! 3. the student sees a masked copy and is trained on
//!    `L = L_seg + λ·L_orth`, updating adapter factors only;
//! 4. the teacher takes an EMA step `θ_t ← β·θ_t + (1−β)·θ_s`.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapter::{OrthReduction, PlacementSpec};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::masking::{apply_mask, Fill, MaskSpec};
use crate::metrics::{CellResult, ConfusionMatrix, RunReport};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::rng::{self, Stream, StreamRng};
use crate::segnet::{soft_cross_entropy, SegNet};
use crate::synth::{DomainStream, SegSample, StreamEntry};
use crate::tensor::{resize, softmax_axis, ResizeMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoMode {
    /// Teacher probabilities as targets.
    #[default]
    Soft,
    /// One-hot teacher argmax as targets.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleFusion {
    /// Average per-scale softmax outputs.
    #[default]
    Probs,
    /// Average per-scale logits, then softmax.
    Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub adam: AdamConfig,
    pub ema: f64,
    pub lambda: f64,
    pub mask: MaskSpec,
    pub scales: Vec<f64>,
    pub pseudo: PseudoMode,
    pub fusion: ScaleFusion,
    pub orth_reduction: OrthReduction,
    pub eps_log: f64,
    pub rank: usize,
    pub sigma: f64,
    pub placement: PlacementSpec,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            adam: AdamConfig::default(),
            ema: 0.999,
            lambda: 1.0,
            mask: MaskSpec {
                grid: 32,
                ratio: 0.75,
                fill: Fill::Zero,
            },
            scales: vec![0.5, 1.0, 1.5, 2.0],
            pseudo: PseudoMode::Soft,
            fusion: ScaleFusion::Probs,
            orth_reduction: OrthReduction::Mean,
            eps_log: 1e-12,
            rank: 32,
            sigma: 0.02,
            placement: PlacementSpec::all(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("teacher scale list is empty".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("teacher scales must be positive: {:?}", self.scales)));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::Config(format!("EMA factor {} outside [0, 1]", self.ema)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be ≥ 0", self.lambda)));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be ≥ 0", self.adam.lr)));
        }
        if !(self.eps_log > 0.0) {
            return Err(Error::Config("log epsilon must be > 0".into()));
        }
        self.mask.validate()
    }

    /// λ = 0, α = 0 and a single unit scale: plain low-rank self-training.
    pub fn is_plain_self_training(&self) -> bool {
        self.lambda == 0.0 && self.mask.ratio == 0.0 && self.scales == [1.0]
    }
}

/// Per-pixel class distribution from the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// `K×H×W`
    pub probs: Tensor,
    pub hard: Option<Vec<u8>>,
}

impl PseudoLabel {
    /// Training target for the chosen mode.
    pub fn target(&self, mode: PseudoMode) -> Result<Tensor> {
        match mode {
            PseudoMode::Soft => Ok(self.probs.clone()),
            PseudoMode::Hard => {
                let (k, h, w) = self.probs.chw()?;
                let ids = match &self.hard {
                    Some(ids) => ids.clone(),
                    None => argmax_u8(&self.probs)?,
                };
                crate::segnet::one_hot(&ids, k, h, w)
            }
        }
    }
}

fn argmax_u8(t: &Tensor) -> Result<Vec<u8>> {
    Ok(t.argmax_channels()?.into_iter().map(|c| c as u8).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub seg_loss: f64,
    pub orth_loss: f64,
    pub total_loss: f64,
}

/// Even extent closest to `n·scale`, at least 2.
pub fn scaled_extent(n: usize, scale: f64) -> usize {
    (((n as f64 * scale) / 2.0).round() as usize).max(1) * 2
}

/// Multi-scale prediction of `net` on `x`, fused back at `x`'s resolution.
pub fn multiscale_probs(net: &SegNet, x: &Tensor, scales: &[f64], fusion: ScaleFusion) -> Result<Tensor> {
    if scales.is_empty() {
        return Err(Error::Config("teacher scale list is empty".into()));
    }
    let (_, h, w) = x.chw()?;
    let mut acc: Option<Tensor> = None;
    for &s in scales {
        let (sh, sw) = (scaled_extent(h, s), scaled_extent(w, s));
        let xs = if (sh, sw) == (h, w) { x.clone() } else { resize(x, sh, sw, ResizeMode::Bilinear)? };
        let logits = net.logits(&xs)?;
        let mapped = match fusion {
            ScaleFusion::Probs => softmax_axis(&logits, 0)?,
            ScaleFusion::Logits => logits,
        };
        let back = if (sh, sw) == (h, w) { mapped } else { resize(&mapped, h, w, ResizeMode::Bilinear)? };
        acc = Some(match acc {
            None => back,
            Some(mut a) => {
                a.data_mut().iter_mut().zip(back.data()).for_each(|(x, y)| *x += y);
                a
            }
        });
    }
    let mut fused = acc.expect("non-empty scales");
    if scales.len() == 1 {
        return match fusion {
            ScaleFusion::Probs => Ok(fused),
            ScaleFusion::Logits => softmax_axis(&fused, 0),
        };
    }
    let inv = 1.0 / scales.len() as f64;
    fused.data_mut().iter_mut().for_each(|v| *v *= inv);
    match fusion {
        ScaleFusion::Logits => softmax_axis(&fused, 0),
        ScaleFusion::Probs => {
            let (k, h, w) = fused.chw()?;
            let hw = h * w;
            let d = fused.data_mut();
            for p in 0..hw {
                let s: f64 = (0..k).map(|c| d[c * hw + p]).sum();
                for c in 0..k {
                    d[c * hw + p] /= s;
                }
            }
            Ok(fused)
        }
    }
}

/// `θ_t ← β·θ_t + (1−β)·θ_s` over trainable parameters. Frozen parameters
/// must already be identical.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, beta: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Structural(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let ids: Vec<_> = student.iter().map(|(id, _)| id).collect();
    for id in ids {
        let s = student.get(id);
        let t = teacher.get_mut(id);
        if t.name != s.name || t.value.shape() != s.value.shape() {
            return Err(Error::Structural(format!(
                "parameter `{}` {:?} paired with `{}` {:?}",
                t.name,
                t.value.shape(),
                s.name,
                s.value.shape()
            )));
        }
        if !s.trainable {
            if t.value.data() != s.value.data() {
                return Err(Error::Structural(format!("frozen parameter `{}` diverged", s.name)));
            }
            continue;
        }
        for (tv, sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = beta * *tv + (1.0 - beta) * sv;
        }
    }
    Ok(())
}

pub struct TeacherStudentEngine {
    student: SegNet,
    teacher: SegNet,
    cfg: EngineConfig,
    opt: Adam,
    step: u64,
    mask_rng: StreamRng,
    consumed: HashSet<(usize, String, u64)>,
}

impl TeacherStudentEngine {
    /// Injects fresh adapters into a copy of `source`; teacher and student
    /// start identical.
    pub fn new(source: &SegNet, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        if source.has_adapters() {
            return Err(Error::Usage("source model already carries adapters".into()));
        }
        let mut student = source.clone();
        student.inject(&cfg.placement, cfg.rank, cfg.sigma, rng::derive_seed(cfg.seed, "init", &[]))?;
        Self::from_student(student, cfg)
    }

    /// Resumes from a model that already has adapters.
    pub fn from_student(student: SegNet, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        if !student.has_adapters() {
            return Err(Error::Usage("engine needs a model with adapters".into()));
        }
        let opt = Adam::new(&student.store, cfg.adam);
        Ok(TeacherStudentEngine {
            teacher: student.clone(),
            student,
            opt,
            step: 0,
            mask_rng: rng::stream(cfg.seed, Stream::Mask),
            consumed: HashSet::new(),
            cfg,
        })
    }

    pub fn student(&self) -> &SegNet {
        &self.student
    }

    pub fn teacher(&self) -> &SegNet {
        &self.teacher
    }

    pub fn teacher_mut(&mut self) -> &mut SegNet {
        &mut self.teacher
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn consumed(&self) -> usize {
        self.consumed.len()
    }

    pub fn teacher_predict(&self, x: &Tensor) -> Result<PseudoLabel> {
        let probs = multiscale_probs(&self.teacher, x, &self.cfg.scales, self.cfg.fusion)?;
        let hard = match self.cfg.pseudo {
            PseudoMode::Hard => Some(argmax_u8(&probs)?),
            PseudoMode::Soft => None,
        };
        Ok(PseudoLabel { probs, hard })
    }

    /// Deployed prediction: teacher on the clean input at native scale.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        self.teacher.predict(x)
    }

    /// Marks a stream sample as consumed; a second visit is an error.
    pub fn claim(&mut self, key: (usize, String, u64)) -> Result<()> {
        if !self.consumed.insert(key.clone()) {
            return Err(Error::Usage(format!(
                "sample {key:?} was already consumed; target samples are seen once"
            )));
        }
        Ok(())
    }

    pub fn adapt_step(&mut self, x: &Tensor) -> Result<StepReport> {
        let (_, h, w) = x.chw()?;
        let pseudo = self.teacher_predict(x)?;
        let target = pseudo.target(self.cfg.pseudo)?;

        let mask = self.cfg.mask.draw(h, w, &mut self.mask_rng)?;
        let xs = apply_mask(x, &mask, self.cfg.mask.fill.value_at(self.step))?;

        let mut g = Graph::new();
        let xv = g.constant(xs);
        let logits = self.student.forward(&mut g, xv)?;
        let probs = g.softmax(logits, 0)?;
        let seg = soft_cross_entropy(&mut g, probs, &target, self.cfg.eps_log)?;
        let orth = self.student.orth_loss(&mut g, self.cfg.orth_reduction)?;
        let weighted = g.scale(orth, self.cfg.lambda);
        let total = g.add(seg, weighted)?;

        let report = StepReport {
            step: self.step,
            seg_loss: g.value(seg).item(),
            orth_loss: g.value(orth).item(),
            total_loss: g.value(total).item(),
        };
        if !report.total_loss.is_finite() {
            return Err(Error::Numeric {
                step: self.step,
                msg: format!("adaptation loss {report:?}"),
            });
        }
        g.backward(total)?;
        g.accumulate_into(&mut self.student.store);
        self.opt.step(&mut self.student.store)?;
        self.student.store.zero_grad();
        ema_update(&mut self.teacher.store, &self.student.store, self.cfg.ema)?;
        self.step += 1;
        Ok(report)
    }
}

/// Where stream samples come from.
#[derive(Debug, Clone)]
pub enum SampleSource {
    /// Regenerate each sample from its seed.
    Procedural { height: usize, width: usize, classes: usize },
    /// Read the files named in the manifest, relative to `root`.
    Files { root: PathBuf },
}

impl SampleSource {
    pub fn fetch(&self, e: &StreamEntry) -> Result<SegSample> {
        match self {
            SampleSource::Procedural { height, width, classes } => e.materialize(*height, *width, *classes),
            SampleSource::Files { root } => SegSample::load(&root.join(&e.image_path), &root.join(&e.label_path)),
        }
    }
}

fn cell_index(report: &mut RunReport, e: &StreamEntry, k: usize) -> usize {
    match report.cells.iter().position(|c| c.round == e.round && c.domain == e.domain) {
        Some(i) => i,
        None => {
            report.cells.push(CellResult {
                round: e.round,
                domain: e.domain.clone(),
                matrix: ConfusionMatrix::new(k),
                samples: 0,
            });
            report.cells.len() - 1
        }
    }
}

/// Online evaluate-then-adapt over the whole stream.
pub fn run_stream(engine: &mut TeacherStudentEngine, stream: &DomainStream, source: &SampleSource) -> Result<RunReport> {
    run_stream_with(engine, stream, source, |_, _| {})
}

/// [`run_stream`] with a callback after every adaptation step.
pub fn run_stream_with(
    engine: &mut TeacherStudentEngine,
    stream: &DomainStream,
    source: &SampleSource,
    mut on_step: impl FnMut(&StreamEntry, &StepReport),
) -> Result<RunReport> {
    if stream.is_empty() {
        return Err(Error::Config("target stream is empty".into()));
    }
    let k = engine.teacher.classes;
    let mut report = RunReport::default();
    for e in &stream.entries {
        engine.claim(e.key())?;
        let sample = source.fetch(e)?;
        let pred = engine.predict(&sample.image)?;
        let i = cell_index(&mut report, e, k);
        report.cells[i].matrix.update(&pred, &sample.label.ids)?;
        report.cells[i].samples += 1;
        let step = engine.adapt_step(&sample.image)?;
        on_step(e, &step);
    }
    Ok(report)
}

/// Frozen-model evaluation of a stream; samples are scored in parallel.
pub fn evaluate_stream(net: &SegNet, stream: &DomainStream, source: &SampleSource, exec: Exec) -> Result<RunReport> {
    if stream.is_empty() {
        return Err(Error::Config("target stream is empty".into()));
    }
    let mats = exec.try_map_range(stream.len(), |i| {
        let e = &stream.entries[i];
        let s = source.fetch(e)?;
        let mut cm = ConfusionMatrix::new(net.classes);
        cm.update(&net.predict(&s.image)?, &s.label.ids)?;
        Ok::<_, Error>(cm)
    })?;
    let mut report = RunReport::default();
    for (e, m) in stream.entries.iter().zip(&mats) {
        let i = cell_index(&mut report, e, net.classes);
        report.cells[i].matrix.merge(m)?;
        report.cells[i].samples += 1;
    }
    Ok(report)
}

/// Component toggles of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub adapters: bool,
    pub orth: bool,
    pub pix0: bool,
    pub pix255: bool,
}

impl Toggles {
    pub const fn new(adapters: bool, orth: bool, pix0: bool, pix255: bool) -> Self {
        Toggles { adapters, orth, pix0, pix255 }
    }

    pub fn label(&self) -> String {
        if !self.adapters {
            return "source".into();
        }
        let mut parts = vec!["adapter"];
        if self.orth {
            parts.push("orth");
        }
        if self.pix0 {
            parts.push("ims0");
        }
        if self.pix255 {
            parts.push("ims255");
        }
        parts.join("+")
    }

    /// Engine configuration realizing these toggles on top of `base`.
    /// Returns `None` for the source-only row.
    pub fn apply(&self, base: &EngineConfig) -> Result<Option<EngineConfig>> {
        if !self.adapters {
            if self.orth || self.pix0 || self.pix255 {
                return Err(Error::Config(format!(
                    "ablation row {self:?} has components but no adapters to train"
                )));
            }
            return Ok(None);
        }
        let mut cfg = base.clone();
        if !self.orth {
            cfg.lambda = 0.0;
        }
        match (self.pix0, self.pix255) {
            (false, false) => cfg.mask.ratio = 0.0,
            (true, false) => cfg.mask.fill = Fill::Zero,
            (false, true) => cfg.mask.fill = Fill::Max,
            (true, true) => cfg.mask.fill = Fill::Alternate,
        }
        if !self.orth && !self.pix0 && !self.pix255 {
            cfg.scales = vec![1.0];
        }
        Ok(Some(cfg))
    }
}

/// The seven component rows, from source-only to the full method with
/// alternating fills.
pub const ABLATION_LADDER: [Toggles; 7] = [
    Toggles::new(false, false, false, false),
    Toggles::new(true, false, false, false),
    Toggles::new(true, true, false, false),
    Toggles::new(true, false, true, false),
    Toggles::new(true, true, true, false),
    Toggles::new(true, true, false, true),
    Toggles::new(true, true, true, true),
];

pub const FULL_METHOD: Toggles = Toggles::new(true, true, true, false);
pub const PLAIN_ADAPTER: Toggles = Toggles::new(true, false, false, false);
pub const SOURCE_ONLY: Toggles = Toggles::new(false, false, false, false);

/// Runs one configuration over the stream.
pub fn run_config(source_model: &SegNet, cfg: Option<&EngineConfig>, stream: &DomainStream, samples: &SampleSource, exec: Exec) -> Result<RunReport> {
    match cfg {
        None => evaluate_stream(source_model, stream, samples, exec),
        Some(cfg) => {
            let mut engine = TeacherStudentEngine::new(source_model, cfg.clone())?;
            run_stream(&mut engine, stream, samples)
        }
    }
}

/// Runs the requested ladder rows with shared seeds; rows are independent
/// and may run concurrently.
pub fn ablation_matrix(
    source_model: &SegNet,
    base: &EngineConfig,
    rows: &[Toggles],
    stream: &DomainStream,
    samples: &SampleSource,
    exec: Exec,
) -> Result<Vec<(Toggles, RunReport)>> {
    let cfgs = rows.iter().map(|t| t.apply(base)).collect::<Result<Vec<_>>>()?;
    let reports = exec.try_map_range(rows.len(), |i| {
        run_config(source_model, cfgs[i].as_ref(), stream, samples, Exec::Sequential)
    })?;
    Ok(rows.iter().copied().zip(reports).collect())
}
