//! Command-line front end: `train`, `eval`, `analyze` and `gradcam`.
//!
//! Every command resolves and validates its configuration, and loads its
//! inputs, before anything is written to the output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hkd_core::analysis::{self, FlopReport, ParamReport};
use hkd_core::data::{self, batches, DatasetManifest, Normalization, Normalizer, Split};
use hkd_core::rng;
use hkd_core::train::{self, CheckpointRecord, EpochMetrics, FitData};
use hkd_core::{DataSource, Error, Head, NetKind, Network, RunConfig, Student, Teacher, Tensor};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

/// Reference figures printed next to the measured ones.
const REFERENCE_STUDENT_PARAMS_M: f64 = 1.07;
const REFERENCE_STUDENT_GFLOPS: f64 = 0.68;
const REFERENCE_TEACHER_GFLOPS: f64 = 1.82;
const REFERENCE_PARAM_RATIO: f64 = 10.4;
const REFERENCE_MAC_RATIO: f64 = 2.7;

#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct CliError {
    pub code: i32,
    #[source]
    pub source: Error,
}

impl CliError {
    fn new(code: i32, source: Error) -> Self {
        Self { code, source }
    }

    fn checkpoint(source: Error) -> Self {
        Self::new(EXIT_CHECKPOINT, source)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Data(_) | Error::Image { .. } | Error::Io { .. } | Error::Csv(_) => EXIT_DATA,
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::Load(_) | Error::Format(_) => EXIT_CHECKPOINT,
            _ => EXIT_CONFIG,
        };
        Self::new(code, e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hkd", version, about = "Hybrid online knowledge distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train teacher and student together and save the best checkpoints.
    Train(CommonArgs),
    /// Evaluate checkpoints on a dataset split.
    Eval(EvalArgs),
    /// Report parameter and MAC counts of both networks.
    Analyze(CommonArgs),
    /// Write Grad-CAM heatmaps for one image.
    Gradcam(GradcamArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file, applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset: rice-variety, rice-leaf, potato, coffee, corn, toy.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the synthetic toy dataset and preset.
    #[arg(long)]
    pub toy: bool,
    /// Directory-per-class image root.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint file; repeat to evaluate several networks.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadChoice {
    Main,
    Aux,
    Both,
}

impl HeadChoice {
    fn heads(self) -> Vec<Head> {
        match self {
            HeadChoice::Main => vec![Head::Main],
            HeadChoice::Aux => vec![Head::Aux],
            HeadChoice::Both => Head::BOTH.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradcamArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint file; repeat for several networks.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    /// Target class index; defaults to the predicted class.
    #[arg(long = "class")]
    pub class: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub head: HeadChoice,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => resolve_config(a, "train").and_then(|c| cmd_train(&c).map(|_| ())),
        Command::Eval(a) => {
            resolve_config(&a.common, "eval").and_then(|c| cmd_eval(&c, &a.checkpoint, &a.split).map(|_| ()))
        }
        Command::Analyze(a) => resolve_config(a, "analyze").and_then(|c| cmd_analyze(&c).map(|_| ())),
        Command::Gradcam(a) => resolve_config(&a.common, "gradcam")
            .and_then(|c| cmd_gradcam(&c, &a.checkpoint, &a.image, a.class, a.head).map(|_| ())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.source);
            e.code
        }
    }
}

/// Preset, then config file, then flags; validated.
pub fn resolve_config(args: &CommonArgs, command: &str) -> CliResult<RunConfig> {
    let preset = match (&args.preset, args.toy) {
        (Some(p), true) if p != "toy" => {
            return Err(Error::Config(format!("--toy conflicts with --preset {p}")).into());
        }
        (Some(p), _) => Some(p.clone()),
        (None, true) => Some("toy".to_string()),
        (None, false) => None,
    };
    let mut cfg = match &preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg = RunConfig::overlay(&cfg, &text)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(root) = &args.data {
        cfg.data = Some(DataSource::Folder {
            root: root.clone(),
            manifest_cache: None,
        });
    }
    cfg.command = Some(command.to_string());
    cfg.validate()?;
    Ok(cfg)
}

struct Prepared {
    manifest: DatasetManifest,
    normalizer: Normalizer,
}

fn prepare_data(cfg: &RunConfig) -> CliResult<Prepared> {
    let manifest = cfg.load_dataset()?;
    let normalizer = Normalizer::resolve(&cfg.normalization, &manifest, cfg.augmentation.resize)?;
    Ok(Prepared { manifest, normalizer })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| {
        CliError::new(
            EXIT_DATA,
            Error::Io {
                path: path.into(),
                source: e,
            },
        )
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        CliError::new(
            EXIT_DATA,
            Error::Io {
                path: path.into(),
                source: e,
            },
        )
    })
}

fn build_teacher(cfg: &RunConfig, num_classes: usize) -> CliResult<Teacher> {
    let mut r = rng::substream(cfg.train.seed, rng::DOMAIN_INIT_TEACHER, &[]);
    Teacher::new(num_classes, cfg.teacher.clone(), &mut r).map_err(|e| match e {
        Error::Io { .. } | Error::Load(_) | Error::Format(_) => CliError::checkpoint(e),
        other => other.into(),
    })
}

fn build_student(cfg: &RunConfig, num_classes: usize) -> CliResult<Student> {
    let mut r = rng::substream(cfg.train.seed, rng::DOMAIN_INIT_STUDENT, &[]);
    Ok(Student::new(num_classes, cfg.student.clone(), &mut r)?)
}

pub const STUDENT_CHECKPOINT: &str = "checkpoints/student_best.kdf";
pub const TEACHER_CHECKPOINT: &str = "checkpoints/teacher_best.kdf";

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_accuracy: f32,
    pub stopped_early: bool,
    pub output_dir: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let data = prepare_data(cfg)?;
    let classes = data.manifest.num_classes();
    let mut teacher = build_teacher(cfg, classes)?;
    let mut student = build_student(cfg, classes)?;

    let out = &cfg.output_dir;
    create_dir(&out.join("checkpoints"))?;
    write_file(&out.join("config.resolved.json"), &cfg.to_json()?)?;
    let metrics_path = out.join("metrics.csv");
    let mut history = Vec::new();
    let mut write_err = None;
    let fit_data = FitData {
        manifest: &data.manifest,
        augmentation: cfg.augmentation,
        normalizer: data.normalizer,
    };
    let outcome = train::fit(&mut teacher, &mut student, &fit_data, &cfg.train, &mut |m| {
        history.push(m.clone());
        if let Err(e) = train::write_metrics_csv(&history, &metrics_path) {
            write_err.get_or_insert(e);
        }
        println!(
            "epoch {:>3}  teacher val acc {:.4}  student val acc {:.4}  student loss {:.4}",
            m.epoch, m.teacher_val.main.accuracy, m.student_val.main.accuracy, m.components.total
        );
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    train::save_checkpoint(&outcome.best_student, &out.join(STUDENT_CHECKPOINT))?;
    train::save_checkpoint(&outcome.best_teacher, &out.join(TEACHER_CHECKPOINT))?;
    let best = outcome.best_student.state.best_accuracy;
    println!(
        "best epoch {} (student val accuracy {:.4}){}; outputs in {}",
        outcome.best_epoch,
        best,
        if outcome.stopped_early { ", stopped early" } else { "" },
        out.display()
    );
    Ok(TrainSummary {
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_val_accuracy: best,
        stopped_early: outcome.stopped_early,
        output_dir: out.clone(),
    })
}

/// Network rebuilt from a checkpoint; the class count comes from the
/// main classifier's weight shape.
pub fn load_network(cfg: &RunConfig, path: &Path) -> CliResult<(Box<dyn Network>, CheckpointRecord)> {
    let record = train::load_checkpoint(path).map_err(CliError::checkpoint)?;
    let classes = record
        .tensor("head.fc.weight")
        .map(|t| t.shape()[0])
        .ok_or_else(|| CliError::checkpoint(Error::Load(format!("{} lacks head.fc.weight", path.display()))))?;
    let mut net: Box<dyn Network> = match record.state.network.as_str() {
        "student" => Box::new(build_student(cfg, classes)?),
        "teacher" => {
            let mut tc = cfg.clone();
            tc.teacher.pretrained_weights_path = None;
            Box::new(build_teacher(&tc, classes)?)
        }
        other => {
            return Err(CliError::checkpoint(Error::Load(format!(
                "{} holds unknown network kind {other:?}",
                path.display()
            ))))
        }
    };
    train::restore_checkpoint(net.as_mut(), &record).map_err(CliError::checkpoint)?;
    Ok((net, record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub net: NetKind,
    pub head: Head,
    pub split: Split,
    pub loss: f32,
    pub accuracy: f32,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf], split: &str) -> CliResult<Vec<EvalRow>> {
    let split = Split::parse(split)?;
    let data = prepare_data(cfg)?;
    let mut nets = Vec::new();
    for p in checkpoints {
        let (net, _) = load_network(cfg, p)?;
        if net.num_classes() != data.manifest.num_classes() {
            return Err(Error::Config(format!(
                "{} has {} classes, dataset has {}",
                p.display(),
                net.num_classes(),
                data.manifest.num_classes()
            ))
            .into());
        }
        nets.push(net);
    }
    let mut rows = Vec::new();
    for net in &nets {
        let it = batches(
            &data.manifest,
            split,
            &cfg.augmentation,
            &data.normalizer,
            cfg.train.batch_size,
            cfg.train.seed,
            0,
            false,
        )?;
        let r = train::evaluate(net.as_ref(), it)?;
        for head in Head::BOTH {
            let h = r.head(head);
            rows.push(EvalRow {
                net: net.kind(),
                head,
                split,
                loss: h.loss,
                accuracy: h.accuracy,
            });
        }
    }
    let mut text = String::from("net,head,split,loss,accuracy\n");
    for r in &rows {
        let line = format!(
            "{},{},{},{},{}\n",
            r.net.as_str(),
            r.head.as_str(),
            r.split.as_str(),
            r.loss,
            r.accuracy
        );
        print!("{line}");
        text.push_str(&line);
    }
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join(format!("eval_{}.csv", split.as_str())), &text)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub student_params: ParamReport,
    pub teacher_params: ParamReport,
    pub student_flops: FlopReport,
    pub teacher_flops: FlopReport,
    pub lines: Vec<String>,
}

impl AnalyzeSummary {
    pub fn param_ratio(&self) -> f64 {
        self.teacher_params.main_total() as f64 / self.student_params.main_total() as f64
    }

    pub fn mac_ratio(&self) -> f64 {
        self.teacher_flops.report.main_total() as f64 / self.student_flops.report.main_total() as f64
    }
}

fn analysis_classes(cfg: &RunConfig) -> usize {
    if cfg.one_vs_rest.is_some() {
        return 2;
    }
    match (&cfg.data, cfg.num_classes) {
        (_, Some(n)) => n,
        (Some(DataSource::Toy { num_classes, .. }), None) => *num_classes,
        _ => 2,
    }
}

pub fn cmd_analyze(cfg: &RunConfig) -> CliResult<AnalyzeSummary> {
    let classes = analysis_classes(cfg);
    let mut tc = cfg.clone();
    tc.teacher.pretrained_weights_path = None;
    let teacher = build_teacher(&tc, classes)?;
    let student = build_student(cfg, classes)?;
    let size = cfg.analysis_input_size;
    let sp = analysis::count_params(&student)?;
    let tp = analysis::count_params(&teacher)?;
    let sf = analysis::count_macs(&student, size)?;
    let tf = analysis::count_macs(&teacher, size)?;
    let m = |v: usize| v as f64 / 1e6;
    let g = |v: usize| v as f64 / 1e9;
    let mut summary = AnalyzeSummary {
        student_params: sp,
        teacher_params: tp,
        student_flops: sf,
        teacher_flops: tf,
        lines: Vec::new(),
    };
    let s = &summary;
    let mut lines = vec![format!(
        "classes: {classes}; input {size}x{size}; {}",
        FlopReport::CONVENTION
    )];
    for (stage, v) in &s.student_params.stages {
        lines.push(format!("student params {stage}: {:.4}M", m(*v)));
    }
    lines.push(format!(
        "student backbone params: {:.4}M (reference ~{REFERENCE_STUDENT_PARAMS_M}M); head {}; aux {}",
        m(s.student_params.backbone_total),
        s.student_params.head_total,
        s.student_params.aux_total
    ));
    lines.push(format!(
        "teacher main-path params: {:.4}M; aux {}",
        m(s.teacher_params.main_total()),
        s.teacher_params.aux_total
    ));
    lines.push(format!(
        "student main-path GFLOPs (GMACs): {:.4} (reference {REFERENCE_STUDENT_GFLOPS}); aux {:.4}",
        g(s.student_flops.report.main_total()),
        g(s.student_flops.report.aux_total)
    ));
    lines.push(format!(
        "teacher main-path GFLOPs (GMACs): {:.4} (reference {REFERENCE_TEACHER_GFLOPS}); aux {:.4}",
        g(s.teacher_flops.report.main_total()),
        g(s.teacher_flops.report.aux_total)
    ));
    lines.push(format!(
        "param ratio teacher/student: {:.2}x (reference ~{REFERENCE_PARAM_RATIO}x)",
        s.param_ratio()
    ));
    lines.push(format!(
        "MAC ratio teacher/student: {:.2}x (reference ~{REFERENCE_MAC_RATIO}x)",
        s.mac_ratio()
    ));
    let dir = cfg.output_dir.join("analysis");
    create_dir(&dir)?;
    analysis::emit_reports(&s.student_params, &s.student_flops, &dir, "student")?;
    analysis::emit_reports(&s.teacher_params, &s.teacher_flops, &dir, "teacher")?;
    let mut text = lines.join("\n");
    text.push('\n');
    write_file(&dir.join("summary.txt"), &text)?;
    print!("{text}");
    summary.lines = lines;
    Ok(summary)
}

/// Written map files, one pair per (network, head).
pub fn cmd_gradcam(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    image: &Path,
    class: Option<usize>,
    head: HeadChoice,
) -> CliResult<Vec<PathBuf>> {
    let pixels = data::load_image(image)?;
    let mut x = data::resize(&pixels, cfg.augmentation.resize)?;
    let normalizer = match &cfg.normalization {
        Normalization::Dataset => prepare_data(cfg)?.normalizer,
        fixed => Normalizer::resolve(fixed, &DatasetManifest::default(), cfg.augmentation.resize)?,
    };
    normalizer.apply(&mut x);
    let size = cfg.augmentation.resize;
    let x = Tensor::new(&[1, 3, size, size], x.into_data())?;
    let mut nets = Vec::new();
    for p in checkpoints {
        let (net, _) = load_network(cfg, p)?;
        if let Some(c) = class {
            if c >= net.num_classes() {
                return Err(Error::Config(format!("class {c} out of range for {} classes", net.num_classes())).into());
            }
        }
        nets.push(net);
    }
    let mut maps = Vec::new();
    for net in &nets {
        for h in head.heads() {
            maps.push((net.kind(), h, analysis::grad_cam(net.as_ref(), &x, class, h, None)?));
        }
    }
    let dir = cfg.output_dir.join("gradcam");
    create_dir(&dir)?;
    let mut written = Vec::new();
    for (kind, h, cam) in &maps {
        let prefix = format!("{}_{}", kind.as_str(), h.as_str());
        analysis::write_gradcam(cam, &dir, &prefix)?;
        println!(
            "{prefix}: class {} at layer {} -> {}",
            cam.class,
            cam.layer,
            dir.join(format!("{prefix}.pgm")).display()
        );
        written.push(dir.join(format!("{prefix}.pgm")));
        written.push(dir.join(format!("{prefix}.csv")));
    }
    Ok(written)
}
