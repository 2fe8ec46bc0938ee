//! Subcommand implementations behind the `oopk` binary.
//!
//! Each `cmd_*` function takes a resolved [`RunConfig`] and an output
//! directory, writes its artifacts plus a `config.toml` echo, and returns a
//! small summary. Errors carry the name of the failing stage.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use oopk_core::checkpoint;
use oopk_core::engine::{self, run_stream, SampleSource, TeacherStudentEngine, Toggles, ABLATION_LADDER};
use oopk_core::exec::Exec;
use oopk_core::metrics::{report, RunReport};
use oopk_core::rng::{self, derive_seed};
use oopk_core::segnet::{evaluate_clean, pretrain, SegNet};
use oopk_core::synth::{build_stream, cyclic_orders, gen_scene, DomainStream, SegSample};
use oopk_core::tensor::Tensor;
use oopk_core::toy::{compare_modes, save_triptych, train_autoencoder, ModeErrors};
use oopk_core::Error;

pub use config::{Preset, RunConfig};

#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct CliError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for oopk_core::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError { stage, source })
    }
}

fn create_dir(dir: &Path) -> oopk_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> oopk_core::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> oopk_core::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &RunConfig, out: &Path, stage: &'static str) -> CliResult<()> {
    create_dir(out).stage(stage)?;
    cfg.echo(out).stage(stage)
}

pub const SOURCE_MANIFEST: &str = "source.csv";
pub const STREAM_MANIFEST: &str = "manifest.csv";
pub const SOURCE_HEADER: &str = "split,seed,image_path,label_path";

/// Seeds of the clean source scenes: `(split, seed)` in file order.
pub fn source_seeds(cfg: &RunConfig) -> Vec<(&'static str, u64)> {
    let d = &cfg.data;
    let train = (0..d.source_samples).map(|i| ("train", derive_seed(cfg.seed, "source-train", &[i as u64])));
    let held = (0..d.heldout_samples).map(|i| ("heldout", derive_seed(cfg.seed, "source-heldout", &[i as u64])));
    train.chain(held).collect()
}

/// Clean training and held-out scenes, generated in memory.
pub fn source_sets(cfg: &RunConfig, exec: Exec) -> oopk_core::Result<(Vec<SegSample>, Vec<SegSample>)> {
    let d = &cfg.data;
    let seeds = source_seeds(cfg);
    let mut all = exec.try_map_range(seeds.len(), |i| gen_scene(seeds[i].1, d.height, d.width, d.classes))?;
    let held = all.split_off(d.source_samples);
    Ok((all, held))
}

pub fn target_stream(cfg: &RunConfig) -> oopk_core::Result<DomainStream> {
    build_stream(&cfg.data.domains, cfg.data.samples_per_domain, cfg.data.rounds, cfg.seed)
}

pub fn procedural(cfg: &RunConfig) -> SampleSource {
    SampleSource::Procedural {
        height: cfg.data.height,
        width: cfg.data.width,
        classes: cfg.data.classes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub net: SegNet,
    pub curve: Vec<f64>,
    pub clean_miou: f64,
}

/// Supervised training of the segmentation network on clean scenes.
pub fn train_source(cfg: &RunConfig, train: &[SegSample], heldout: &[SegSample], exec: Exec) -> oopk_core::Result<SourceModel> {
    let mut net = SegNet::new(cfg.model.width, cfg.data.classes, cfg.seed)?;
    let curve = pretrain(&mut net, train, &cfg.pretrain())?;
    let clean_miou = evaluate_clean(&net, heldout, exec)?;
    Ok(SourceModel { net, curve, clean_miou })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub files: usize,
    pub stream_entries: usize,
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, exec: Exec) -> CliResult<GenSummary> {
    const STAGE: &str = "gen-data";
    prepare_out(cfg, out, STAGE)?;
    for sub in ["source", "target"] {
        create_dir(&out.join(sub)).stage(STAGE)?;
    }
    let d = &cfg.data;
    let seeds = source_seeds(cfg);
    let mut rows = vec![SOURCE_HEADER.to_string()];
    let mut counters = [0usize; 2];
    let mut jobs = Vec::new();
    for &(split, seed) in &seeds {
        let c = &mut counters[usize::from(split == "heldout")];
        let stem = format!("source/{split}_{:04}", *c);
        *c += 1;
        rows.push(format!("{split},{seed},{stem}.ppm,{stem}.pgm"));
        jobs.push((seed, stem));
    }
    exec.try_map_range(jobs.len(), |i| {
        let (seed, stem) = &jobs[i];
        let s = gen_scene(*seed, d.height, d.width, d.classes)?;
        s.save(&out.join(format!("{stem}.ppm")), &out.join(format!("{stem}.pgm")))
    })
    .stage(STAGE)?;
    write(&out.join(SOURCE_MANIFEST), &(rows.join("\n") + "\n")).stage(STAGE)?;

    let stream = target_stream(cfg).stage(STAGE)?;
    exec.try_map_range(stream.len(), |i| {
        let e = &stream.entries[i];
        e.materialize(d.height, d.width, d.classes)?.save(&out.join(&e.image_path), &out.join(&e.label_path))
    })
    .stage(STAGE)?;
    write(&out.join(STREAM_MANIFEST), &stream.to_manifest()).stage(STAGE)?;
    Ok(GenSummary {
        files: 2 * (seeds.len() + stream.len()),
        stream_entries: stream.len(),
    })
}

/// Reads the clean source scenes listed in `data/source.csv`.
pub fn load_source_sets(data: &Path) -> oopk_core::Result<(Vec<SegSample>, Vec<SegSample>)> {
    let path = data.join(SOURCE_MANIFEST);
    if !path.exists() {
        return Err(Error::Config(format!("no dataset at {} (run gen-data first)", data.display())));
    }
    let text = read(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SOURCE_HEADER) {
        return Err(Error::format(0, format!("{} has an unexpected header", path.display())));
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Data(format!("{}: line {} has {} fields", path.display(), n + 2, f.len())));
        }
        let s = SegSample::load(&data.join(f[2]), &data.join(f[3]))?;
        match f[0] {
            "train" => train.push(s),
            "heldout" => held.push(s),
            other => return Err(Error::Data(format!("{}: unknown split `{other}`", path.display()))),
        }
    }
    Ok((train, held))
}

pub fn load_stream(data: &Path) -> oopk_core::Result<DomainStream> {
    let path = data.join(STREAM_MANIFEST);
    if !path.exists() {
        return Err(Error::Config(format!("no stream manifest at {}", path.display())));
    }
    DomainStream::parse_manifest(&read(&path)?)
}

pub fn load_model(path: &Path) -> oopk_core::Result<SegNet> {
    SegNet::from_named(&checkpoint::load(path)?)
}

pub fn save_model(path: &Path, net: &SegNet) -> oopk_core::Result<()> {
    checkpoint::save(path, &net.named_tensors())
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, exec: Exec) -> CliResult<SourceModel> {
    const STAGE: &str = "pretrain";
    prepare_out(cfg, out, STAGE)?;
    let (train, held) = load_source_sets(&cfg.paths.data).stage(STAGE)?;
    let model = train_source(cfg, &train, &held, exec).stage(STAGE)?;
    save_model(&out.join("source.ckpt"), &model.net).stage(STAGE)?;
    let mut curve = String::from("epoch,loss\n");
    for (i, l) in model.curve.iter().enumerate() {
        let _ = writeln!(curve, "{},{l:.9}", i + 1);
    }
    write(&out.join("pretrain_loss.csv"), &curve).stage(STAGE)?;
    write(
        &out.join("metrics.csv"),
        &format!("metric,value\nclean_miou,{:.1}\n", 100.0 * model.clean_miou),
    )
    .stage(STAGE)?;
    Ok(model)
}

fn write_report(out: &Path, run: &RunReport, source: Option<&RunReport>) -> oopk_core::Result<()> {
    let table = report(run, source);
    write(&out.join("cells.csv"), &table.cells_csv())?;
    write(&out.join("aggregates.csv"), &table.aggregates_csv())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSummary {
    pub adapted: RunReport,
    pub source: RunReport,
}

pub fn cmd_adapt(cfg: &RunConfig, out: &Path, exec: Exec) -> CliResult<AdaptSummary> {
    const STAGE: &str = "adapt";
    prepare_out(cfg, out, STAGE)?;
    let net = load_model(&cfg.paths.checkpoint).stage(STAGE)?;
    let stream = load_stream(&cfg.paths.data).stage(STAGE)?;
    let samples = SampleSource::Files { root: cfg.paths.data.clone() };
    let source = engine::evaluate_stream(&net, &stream, &samples, exec).stage(STAGE)?;
    let adapted = if cfg.adapt.adapters {
        let mut eng = TeacherStudentEngine::new(&net, cfg.engine().stage(STAGE)?).stage(STAGE)?;
        let run = run_stream(&mut eng, &stream, &samples).stage(STAGE)?;
        save_model(&out.join("adapted.ckpt"), eng.teacher()).stage(STAGE)?;
        run
    } else {
        source.clone()
    };
    write_report(out, &adapted, Some(&source)).stage(STAGE)?;
    Ok(AdaptSummary { adapted, source })
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, exec: Exec) -> CliResult<RunReport> {
    const STAGE: &str = "eval";
    prepare_out(cfg, out, STAGE)?;
    let net = load_model(&cfg.paths.checkpoint).stage(STAGE)?;
    let stream = load_stream(&cfg.paths.data).stage(STAGE)?;
    let run = engine::evaluate_stream(&net, &stream, &SampleSource::Files { root: cfg.paths.data.clone() }, exec)
        .stage(STAGE)?;
    write_report(out, &run, None).stage(STAGE)?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSummary {
    pub max_deviation: f64,
    pub inputs: usize,
    pub params_before: usize,
    pub params_after: usize,
}

pub const MERGE_PROBES: usize = 100;

/// Largest elementwise logit difference between two networks over seeded
/// random inputs.
pub fn forward_deviation(a: &SegNet, b: &SegNet, h: usize, w: usize, n: usize, seed: u64, exec: Exec) -> oopk_core::Result<f64> {
    let devs = exec.try_map_range(n, |i| {
        let mut r = rng::substream(seed, "merge-probe", &[i as u64]);
        let x = Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng::uniform(&mut r)).collect())?;
        Ok::<_, Error>(a.logits(&x)?.max_abs_diff(&b.logits(&x)?))
    })?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

pub fn cmd_merge(cfg: &RunConfig, out: &Path, exec: Exec) -> CliResult<MergeSummary> {
    const STAGE: &str = "merge";
    prepare_out(cfg, out, STAGE)?;
    let net = load_model(&cfg.paths.checkpoint).stage(STAGE)?;
    let merged = net.merged().stage(STAGE)?;
    let d = &cfg.data;
    let max_deviation = forward_deviation(&net, &merged, d.height, d.width, MERGE_PROBES, cfg.seed, exec).stage(STAGE)?;
    save_model(&out.join("merged.ckpt"), &merged).stage(STAGE)?;
    let s = MergeSummary {
        max_deviation,
        inputs: MERGE_PROBES,
        params_before: net.store.numel(),
        params_after: merged.store.numel(),
    };
    write(
        &out.join("merge_report.csv"),
        &format!(
            "metric,value\nmax_deviation,{:e}\ninputs,{}\nparams_unmerged,{}\nparams_merged,{}\nbase_params,{}\n",
            s.max_deviation,
            s.inputs,
            s.params_before,
            s.params_after,
            net.base_param_count()
        ),
    )
    .stage(STAGE)?;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Rank,
    Grid,
    Lambda,
    Order,
    Ablation,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Rank => "rank",
            SweepAxis::Grid => "grid",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Order => "order",
            SweepAxis::Ablation => "ablation",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> oopk_core::Result<Self> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "grid" => Ok(SweepAxis::Grid),
            "lambda" => Ok(SweepAxis::Lambda),
            "order" => Ok(SweepAxis::Order),
            "ablation" => Ok(SweepAxis::Ablation),
            _ => Err(Error::Usage(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    pub config: RunConfig,
    pub report: RunReport,
}

/// Configurations of every setting along `axis`, derived from `base`.
/// `None` in the ablation axis marks the frozen source row.
pub fn sweep_settings(base: &RunConfig, axis: SweepAxis) -> oopk_core::Result<Vec<(String, RunConfig)>> {
    let mut rows = Vec::new();
    match axis {
        SweepAxis::Rank => {
            for &r in &base.sweep.ranks {
                let mut c = base.clone();
                c.adapt.rank = r;
                rows.push((format!("rank={r}"), c));
            }
        }
        SweepAxis::Grid => {
            for &s in &base.sweep.grids {
                let mut c = base.clone();
                c.adapt.grid = s;
                rows.push((format!("grid={s}"), c));
            }
        }
        SweepAxis::Lambda => {
            for &l in &base.sweep.lambdas {
                let mut c = base.clone();
                c.adapt.lambda = l;
                rows.push((format!("lambda={l}"), c));
            }
        }
        SweepAxis::Order => {
            for order in cyclic_orders(&base.data.domains) {
                let name = order.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join(">");
                let mut c = base.clone();
                c.data.domains = order;
                rows.push((format!("order={name}"), c));
            }
        }
        SweepAxis::Ablation => {
            for t in ABLATION_LADDER {
                rows.push((t.label(), ablation_config(base, t)?));
            }
        }
    }
    for (_, c) in &rows {
        c.validate()?;
    }
    Ok(rows)
}

/// The run configuration realizing one ablation row.
pub fn ablation_config(base: &RunConfig, t: Toggles) -> oopk_core::Result<RunConfig> {
    let mut c = base.clone();
    match t.apply(&base.engine()?)? {
        None => c.adapt.adapters = false,
        Some(e) => {
            c.adapt.lambda = e.lambda;
            c.adapt.ratio = e.mask.ratio;
            c.adapt.fill = e.mask.fill;
            c.adapt.scales = e.scales;
        }
    }
    Ok(c)
}

/// Runs one configuration on its procedural stream from a given source
/// model.
pub fn run_on_stream(cfg: &RunConfig, net: &SegNet, exec: Exec) -> oopk_core::Result<RunReport> {
    let stream = target_stream(cfg)?;
    let samples = procedural(cfg);
    if cfg.adapt.adapters {
        let mut eng = TeacherStudentEngine::new(net, cfg.engine()?)?;
        run_stream(&mut eng, &stream, &samples)
    } else {
        engine::evaluate_stream(net, &stream, &samples, exec)
    }
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,setting,mean_miou,mean_macc,samples\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.1},{:.1},{}",
            axis.as_str(),
            r.setting,
            100.0 * r.report.mean_miou(),
            100.0 * r.report.mean_macc(),
            r.report.total_samples()
        );
    }
    s
}

/// Spread (max − min) of mean mIoU across rows.
pub fn spread(rows: &[SweepRow]) -> f64 {
    let v: Vec<f64> = rows.iter().map(|r| r.report.mean_miou()).collect();
    v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min)
}

/// Runs every setting along `axis` from the checkpoint in `paths.checkpoint`
/// on procedurally regenerated streams with shared seeds. Settings run
/// concurrently when `exec` allows.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, out: &Path, exec: Exec) -> CliResult<Vec<SweepRow>> {
    const STAGE: &str = "sweep";
    prepare_out(cfg, out, STAGE)?;
    let net = load_model(&cfg.paths.checkpoint).stage(STAGE)?;
    let settings = sweep_settings(cfg, axis).stage(STAGE)?;
    let reports = exec
        .try_map_range(settings.len(), |i| run_on_stream(&settings[i].1, &net, Exec::Sequential))
        .stage(STAGE)?;
    let rows: Vec<SweepRow> = settings
        .into_iter()
        .zip(reports)
        .map(|((setting, config), report)| SweepRow { setting, config, report })
        .collect();
    for (i, r) in rows.iter().enumerate() {
        let dir = out.join("rows").join(format!("{i:02}"));
        create_dir(&dir).stage(STAGE)?;
        r.config.echo(&dir).stage(STAGE)?;
        write_report(&dir, &r.report, None).stage(STAGE)?;
    }
    write(&out.join(format!("sweep_{}.csv", axis.as_str())), &sweep_csv(axis, &rows)).stage(STAGE)?;
    if axis == SweepAxis::Order {
        write(
            &out.join("order_spread.csv"),
            &format!("metric,value\nspread_miou,{:.1}\n", 100.0 * spread(&rows)),
        )
        .stage(STAGE)?;
    }
    Ok(rows)
}

/// Clean images for the toy experiment: training then held-out.
pub fn toy_images(cfg: &RunConfig) -> oopk_core::Result<(Vec<Tensor>, Vec<Tensor>)> {
    let t = &cfg.toy;
    let gen = |label: &str, n: usize| {
        (0..n)
            .map(|i| Ok(gen_scene(derive_seed(cfg.seed, label, &[i as u64]), t.size, t.size, cfg.data.classes)?.image))
            .collect::<oopk_core::Result<Vec<_>>>()
    };
    Ok((gen("toy-train", t.train_images)?, gen("toy-heldout", t.heldout_images)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySummary {
    pub errors: ModeErrors,
    pub final_loss: f64,
    pub triptychs: Vec<PathBuf>,
}

pub fn cmd_toy(cfg: &RunConfig, out: &Path, exec: Exec) -> CliResult<ToySummary> {
    const STAGE: &str = "toy";
    prepare_out(cfg, out, STAGE)?;
    let (train, held) = toy_images(cfg).stage(STAGE)?;
    let (model, curve) = train_autoencoder(&train, &cfg.toy()).stage(STAGE)?;
    let errors = compare_modes(&model, &held, exec).stage(STAGE)?;
    write(&out.join("toy_mse.csv"), &errors.to_csv()).stage(STAGE)?;
    let mut triptychs = Vec::new();
    for (i, x) in held.iter().take(cfg.toy.triptychs).enumerate() {
        let p = out.join(format!("triptych_{i:02}.ppm"));
        save_triptych(&p, &model, x).stage(STAGE)?;
        triptychs.push(p);
    }
    Ok(ToySummary {
        errors,
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        triptychs,
    })
}
