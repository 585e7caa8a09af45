//! The runners behind each subcommand.

use std::path::{Path, PathBuf};

use ndc_core::backbone::BackboneSpec;
use ndc_core::checkpoint::Checkpoint;
use ndc_core::classifier::{
    classify_detections, linear_probe, train_classifier, LinearHead, PredictionSet, Supervision, TrainMode,
};
use ndc_core::detector::{
    suppress_duplicates, train_detector, Detection, DetectorEpoch, DetectorModel,
};
use ndc_core::encoder::{pretrain_encoder, Encoder, EncoderKind};
use ndc_core::eval::{convergence_epochs, detection_counts, f1_report, Counts, CurvePoint, MatchReport};
use ndc_core::joint::{evaluate_joint, model_seed, train_joint, JointEpoch, JointModel, ProbeHook};
use ndc_core::synth::{derive_seed, generate, load_dataset, write_dataset, Dataset};
use ndc_core::Point;

use crate::artifacts::{check_disjoint, files_below, num, opt_num, sha256_file, FileDigest, Staging, Table, RUN_CONFIG};
use crate::config::{JointInit, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Synthesize a train and a test dataset
    GenData,
    /// Train the point detector
    TrainDet,
    /// Train a classification head on encoder features
    TrainCls,
    /// Train the shared-backbone joint model
    TrainJoint,
    /// Pretrain an encoder on the crop classification pretext task
    PretrainEnc,
    /// Linear probe of an encoder
    Probe,
    /// Evaluate checkpoints on the test dataset
    Eval,
    /// Write prediction files for the test dataset
    Predict,
    /// Detection F1 against detector backbone width
    AblateCapacity,
    /// Separated against joint detector training on a small dataset
    AblateDatasets,
    /// Linear, full and end-to-end optimization strategies
    AblateStrategy,
    /// Convergence speed of detection and classification in joint training
    Dynamics,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDet => "train-det",
            Command::TrainCls => "train-cls",
            Command::TrainJoint => "train-joint",
            Command::PretrainEnc => "pretrain-enc",
            Command::Probe => "probe",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::AblateCapacity => "ablate-capacity",
            Command::AblateDatasets => "ablate-datasets",
            Command::AblateStrategy => "ablate-strategy",
            Command::Dynamics => "dynamics",
        }
    }
}

fn progress(msg: &str) {
    eprintln!("[ndc] {msg}");
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| CliError::config(key, "missing required key"))
}

/// Runs `command` and returns the finished output directory.
pub fn run(command: Command, cfg: &RunConfig, replace: bool) -> Result<PathBuf> {
    let out = required(&cfg.out, "out")?.clone();
    let mut inputs: Vec<PathBuf> = cfg.data.train.iter().chain(&cfg.data.test).cloned().collect();
    inputs.extend(cfg.data.extra_train.iter().cloned());
    let c = &cfg.checkpoints;
    inputs.extend([&c.detector, &c.encoder, &c.head, &c.joint].into_iter().flatten().cloned());
    check_disjoint(&out, &inputs)?;
    let mut ctx = Ctx {
        cfg,
        stage: Staging::new(&out, replace)?,
        inputs: Vec::new(),
    };
    match command {
        Command::GenData => gen_data(&mut ctx)?,
        Command::TrainDet => train_det(&mut ctx)?,
        Command::TrainCls => train_cls(&mut ctx)?,
        Command::TrainJoint => train_joint_cmd(&mut ctx)?,
        Command::PretrainEnc => pretrain_enc(&mut ctx)?,
        Command::Probe => probe(&mut ctx)?,
        Command::Eval => eval(&mut ctx)?,
        Command::Predict => predict_cmd(&mut ctx)?,
        Command::AblateCapacity => ablate_capacity(&mut ctx)?,
        Command::AblateDatasets => ablate_datasets(&mut ctx)?,
        Command::AblateStrategy => ablate_strategy(&mut ctx)?,
        Command::Dynamics => dynamics(&mut ctx)?,
    }
    ctx.stage.write(RUN_CONFIG, cfg.to_toml().as_bytes())?;
    let Ctx { stage, inputs, .. } = ctx;
    stage.commit(command.name(), cfg, inputs)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    stage: Staging,
    inputs: Vec<FileDigest>,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn dataset(&mut self, dir: &Path) -> Result<Dataset> {
        let (ds, _) = load_dataset(dir)?;
        for rel in files_below(dir)? {
            self.record(&dir.join(rel))?;
        }
        Ok(ds)
    }

    fn required_dataset(&mut self, key: &str, value: &Option<PathBuf>) -> Result<Dataset> {
        let dir = required(value, key)?.clone();
        self.dataset(&dir)
    }

    /// `data.train` followed by `data.extra_train`.
    fn train_sets(&mut self) -> Result<Vec<Dataset>> {
        let cfg = self.cfg;
        let mut sets = vec![self.required_dataset("data.train", &cfg.data.train)?];
        for dir in &cfg.data.extra_train {
            sets.push(self.dataset(dir)?);
        }
        let classes = sets[0].classes();
        if let Some(bad) = sets.iter().find(|d| d.classes() != classes) {
            return Err(CliError::Usage(format!(
                "dataset `{}` has {} classes, `{}` has {classes}",
                bad.name,
                bad.classes(),
                sets[0].name
            )));
        }
        Ok(sets)
    }

    fn test_set(&mut self) -> Result<Dataset> {
        let cfg = self.cfg;
        self.required_dataset("data.test", &cfg.data.test)
    }

    fn checkpoint(&mut self, value: &Option<PathBuf>) -> Result<Option<Checkpoint>> {
        match value {
            Some(p) => {
                let ck = Checkpoint::load(p)?;
                self.record(p)?;
                Ok(Some(ck))
            }
            None => Ok(None),
        }
    }

    /// The encoder of the run: a checkpoint if configured, otherwise built
    /// according to `encoder.kind`.
    fn encoder(&mut self, train: &Dataset, seed: u64) -> Result<Encoder> {
        let cfg = self.cfg;
        if let Some(ck) = self.checkpoint(&cfg.checkpoints.encoder)? {
            return Ok(ck.to_encoder()?);
        }
        build_encoder(cfg, train, seed, cfg.encoder.kind)
    }

    fn save(&self, rel: &str, ck: &Checkpoint) -> Result<()> {
        ck.save(&self.stage.path(rel)?)?;
        Ok(())
    }
}

fn build_encoder(cfg: &RunConfig, train: &Dataset, seed: u64, kind: EncoderKind) -> Result<Encoder> {
    let p = cfg.pretrain_config(seed);
    match kind {
        EncoderKind::PretextPretrained => {
            progress("pretraining encoder");
            Ok(pretrain_encoder(train, &p)?)
        }
        // Same initialization as the start of pretraining.
        EncoderKind::RandomFrozen => Ok(Encoder::random(p.feature_dim, p.stride, derive_seed(seed, 0), true)?),
        EncoderKind::Trainable => Err(CliError::config("encoder.kind", "trainable encoders cannot be built")),
    }
}

/// Synthetic train and test splits for a seed; `gen-data` writes exactly
/// these for the run seed.
fn synth_splits(cfg: &RunConfig, preset: Option<&str>, seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = cfg.synth.scene(preset)?;
    let train = generate(&spec, cfg.synth.train_images, derive_seed(seed, 10), "train")?;
    let test = generate(&spec, cfg.synth.test_images, derive_seed(seed, 11), "test")?;
    Ok((train, test))
}

fn ablation_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.ablation.seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect()
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn detector_metrics(history: &[DetectorEpoch]) -> Table {
    let mut t = Table::new(&["epoch", "train_loss", "val_loss", "val_detection_f1"]);
    for h in history {
        t.push(vec![h.epoch.to_string(), num(h.train_loss), num(h.val_loss), num(h.val_detection_f1)]);
    }
    t
}

fn joint_metrics(history: &[JointEpoch]) -> Table {
    let probe = history.iter().any(|h| h.probe_f1.is_some());
    let mut header = vec!["epoch", "train_loss", "val_detection_f1", "val_average_f1"];
    if probe {
        header.push("probe_f1");
    }
    let mut t = Table::new(&header);
    for h in history {
        let mut row = vec![h.epoch.to_string(), num(h.train_loss), num(h.val_detection_f1), num(h.val_average_f1)];
        if probe {
            row.push(opt_num(h.probe_f1));
        }
        t.push(row);
    }
    t
}

fn report_header(first: &str, classes: usize) -> Vec<String> {
    let mut h = vec![first.to_string()];
    h.extend((1..=classes).map(|c| format!("f1_class_{c}")));
    h.extend(["average_f1", "detection_f1"].map(String::from));
    h
}

fn report_row(first: String, r: &MatchReport) -> Vec<String> {
    let mut row = vec![first];
    row.extend(r.per_class_f1().into_iter().map(num));
    row.push(num(r.average_f1()));
    row.push(num(r.detection_f1()));
    row
}

fn counts_row(c: &Counts) -> Vec<String> {
    vec![
        c.tp.to_string(),
        c.fp.to_string(),
        c.fn_.to_string(),
        num(c.precision()),
        num(c.recall()),
        num(c.f1()),
    ]
}

const COUNTS_HEADER: [&str; 6] = ["tp", "fp", "fn", "precision", "recall", "f1"];

/// Thresholded detections, with duplicate suppression when configured.
fn detect(cfg: &RunConfig, model: &DetectorModel, image: &ndc_core::nn::Tensor) -> Result<Vec<Detection>> {
    let dets = model.detect(image, cfg.detector.tau)?;
    Ok(if cfg.detector.suppress_duplicates {
        suppress_duplicates(&dets, cfg.detector.radius)
    } else {
        dets
    })
}

fn detector_counts(cfg: &RunConfig, model: &DetectorModel, datasets: &[&Dataset]) -> Result<Counts> {
    let mut total = Counts::default();
    for ds in datasets {
        for s in &ds.samples {
            let points: Vec<Point> = detect(cfg, model, &s.image)?.iter().map(|d| d.point).collect();
            let c = detection_counts(&points, &s.points(), cfg.detector.radius);
            total.tp += c.tp;
            total.fp += c.fp;
            total.fn_ += c.fn_;
        }
    }
    Ok(total)
}

/// Models that `eval` and `predict` can run.
enum Models {
    Joint(JointModel),
    Pipeline(DetectorModel, Encoder, LinearHead),
    Detector(DetectorModel),
}

impl Models {
    fn load(ctx: &mut Ctx<'_>) -> Result<Models> {
        let ck = &ctx.cfg.checkpoints;
        if let Some(j) = ctx.checkpoint(&ck.joint)? {
            return Ok(Models::Joint(j.to_joint()?));
        }
        let det = ctx
            .checkpoint(&ck.detector)?
            .ok_or_else(|| CliError::config("checkpoints.detector", "missing required key (or set checkpoints.joint)"))?
            .to_detector()?;
        let enc = ctx.checkpoint(&ck.encoder)?;
        let head = ctx.checkpoint(&ck.head)?;
        match (enc, head) {
            (Some(e), Some(h)) => Ok(Models::Pipeline(det, e.to_encoder()?, h.to_head()?)),
            (None, None) => Ok(Models::Detector(det)),
            _ => Err(CliError::config(
                "checkpoints",
                "encoder and head checkpoints must be given together",
            )),
        }
    }

    fn classes(&self) -> Option<usize> {
        match self {
            Models::Joint(m) => Some(m.classes),
            Models::Pipeline(_, _, h) => Some(h.classes),
            Models::Detector(_) => None,
        }
    }

    fn predict(&self, cfg: &RunConfig, image: &ndc_core::nn::Tensor) -> Result<Option<PredictionSet>> {
        Ok(match self {
            Models::Joint(m) => Some(m.predict_scored(image, cfg.detector.tau)?),
            Models::Pipeline(d, e, h) => Some(classify_detections(e, h, image, &detect(cfg, d, image)?)?),
            Models::Detector(_) => None,
        })
    }
}

fn gen_data(ctx: &mut Ctx<'_>) -> Result<()> {
    let (train, test) = synth_splits(ctx.cfg, None, ctx.seed())?;
    let mut t = Table::new(&["split", "images", "nuclei"]);
    for (name, ds) in [("train", &train), ("test", &test)] {
        write_dataset(ds, &ctx.stage.path(name)?)?;
        t.push(vec![name.into(), ds.len().to_string(), ds.nucleus_count().to_string()]);
    }
    ctx.stage.write_table("summary.csv", &t)
}

fn train_det(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let train = ctx.train_sets()?;
    let test = ctx.test_set()?;
    let refs: Vec<&Dataset> = train.iter().collect();
    progress("training detector");
    let (model, history) = train_detector(&refs, &[&test], cfg.arch(cfg.detector.width), &cfg.detector_config(ctx.seed()))?;
    ctx.stage.write_table("metrics.csv", &detector_metrics(&history))?;
    let mut header = vec!["params"];
    header.extend(COUNTS_HEADER);
    let mut t = Table::new(&header);
    let mut row = vec![model.param_count().to_string()];
    row.extend(counts_row(&detector_counts(cfg, &model, &[&test])?));
    t.push(row);
    ctx.stage.write_table("summary.csv", &t)?;
    ctx.save("checkpoints/detector.json", &Checkpoint::from_detector(&model))
}

fn train_cls(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let train = ctx.required_dataset("data.train", &cfg.data.train)?;
    let test = ctx.test_set()?;
    let encoder = ctx.encoder(&train, ctx.seed())?;
    let detector = match ctx.checkpoint(&cfg.checkpoints.detector)? {
        Some(ck) => Some(ck.to_detector()?),
        None if cfg.classifier.supervision == Supervision::Detections => {
            return Err(CliError::config(
                "checkpoints.detector",
                "missing required key for classifier.supervision = detections",
            ))
        }
        None => None,
    };
    progress("training classifier");
    let out = train_classifier(&encoder, &train, &test, &cfg.classifier_config(ctx.seed()), detector.as_ref())?;
    let mut t = Table::new(&["epoch", "train_loss", "val_average_f1"]);
    for h in &out.history {
        t.push(vec![h.epoch.to_string(), num(h.train_loss), num(h.val_average_f1)]);
    }
    ctx.stage.write_table("metrics.csv", &t)?;
    if let Some(det) = &detector {
        let mut t = Table::new(&report_header("split", test.classes()));
        t.push(report_row("test".into(), &pipeline_report(cfg, det, &out.encoder, &out.head, &test)?));
        ctx.stage.write_table("summary.csv", &t)?;
    }
    ctx.save("checkpoints/head.json", &Checkpoint::from_head(&out.head))?;
    ctx.save("checkpoints/encoder.json", &Checkpoint::from_encoder(&out.encoder))
}

fn pipeline_report(
    cfg: &RunConfig,
    det: &DetectorModel,
    enc: &Encoder,
    head: &LinearHead,
    test: &Dataset,
) -> Result<MatchReport> {
    let mut report = MatchReport::empty(head.classes, cfg.detector.radius);
    for s in &test.samples {
        let preds = classify_detections(enc, head, &s.image, &detect(cfg, det, &s.image)?)?;
        report.merge(&f1_report(&preds.annotations(), &s.annotations, cfg.detector.radius, head.classes)?);
    }
    Ok(report)
}

fn joint_model(
    cfg: &RunConfig,
    init: JointInit,
    encoder: impl FnOnce() -> Result<Encoder>,
    classes: usize,
    seed: u64,
) -> Result<JointModel> {
    Ok(match init {
        JointInit::Random => JointModel::new(
            BackboneSpec::encoder(cfg.encoder.feature_dim, cfg.encoder.stride)?,
            classes,
            model_seed(seed),
        )?,
        JointInit::Pretrained => JointModel::from_encoder(&encoder()?, classes, model_seed(seed))?,
    })
}

fn train_joint_cmd(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let seed = ctx.seed();
    let train = ctx.train_sets()?;
    let test = ctx.test_set()?;
    let classes = train[0].classes();
    let model = joint_model(cfg, cfg.joint.init, || ctx.encoder(&train[0], seed), classes, seed)?;
    let hook = cfg.joint.probe.then(|| ProbeHook {
        train: &train[0],
        val: &test,
        config: cfg.probe_config(seed),
    });
    let refs: Vec<&Dataset> = train.iter().collect();
    progress("training joint model");
    let (model, history) = train_joint(model, &refs, &[&test], &cfg.joint_config(seed), hook)?;
    ctx.stage.write_table("metrics.csv", &joint_metrics(&history))?;
    let mut t = Table::new(&report_header("split", classes));
    t.push(report_row(
        "test".into(),
        &evaluate_joint(&model, &[&test], cfg.detector.tau, cfg.detector.radius)?,
    ));
    ctx.stage.write_table("summary.csv", &t)?;
    ctx.save("checkpoints/joint.json", &Checkpoint::from_joint(&model))
}

fn pretrain_enc(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let train = ctx.required_dataset("data.train", &cfg.data.train)?;
    let enc = build_encoder(cfg, &train, ctx.seed(), EncoderKind::PretextPretrained)?;
    let mut t = Table::new(&["kind", "feature_dim", "stride", "crop", "checksum"]);
    t.push(vec![
        "pretext-pretrained".into(),
        enc.feature_dim().to_string(),
        enc.stride().to_string(),
        cfg.encoder.crop.to_string(),
        enc.checksum(),
    ]);
    ctx.stage.write_table("summary.csv", &t)?;
    ctx.save("checkpoints/encoder.json", &Checkpoint::from_encoder(&enc))
}

fn probe(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let train = ctx.required_dataset("data.train", &cfg.data.train)?;
    let test = ctx.test_set()?;
    let enc = ctx.encoder(&train, ctx.seed())?;
    progress("probing encoder");
    let f1 = linear_probe(&enc, &train, &test, &cfg.probe_config(ctx.seed()))?;
    let kind = serde_json::to_value(enc.kind).expect("kind serializes");
    let mut t = Table::new(&["encoder", "probe_f1"]);
    t.push(vec![kind.as_str().unwrap_or_default().to_string(), num(f1)]);
    ctx.stage.write_table("summary.csv", &t)
}

fn eval(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let models = Models::load(ctx)?;
    let test = ctx.test_set()?;
    let radius = cfg.detector.radius;
    if let Some(classes) = models.classes() {
        if classes != test.classes() {
            return Err(CliError::Usage(format!(
                "model predicts {classes} classes, test data has {}",
                test.classes()
            )));
        }
        let mut report = MatchReport::empty(classes, radius);
        for s in &test.samples {
            let preds = models.predict(cfg, &s.image)?.expect("classifying model");
            report.merge(&f1_report(&preds.annotations(), &s.annotations, radius, classes)?);
        }
        let mut t = Table::new(&report_header("split", classes));
        t.push(report_row("test".into(), &report));
        ctx.stage.write_table("summary.csv", &t)?;
        let mut t = Table::new(&["class"].into_iter().chain(COUNTS_HEADER).collect::<Vec<_>>());
        for (c, counts) in report.per_class.iter().enumerate() {
            let mut row = vec![(c + 1).to_string()];
            row.extend(counts_row(counts));
            t.push(row);
        }
        let mut row = vec!["detection".to_string()];
        row.extend(counts_row(&report.detection));
        t.push(row);
        ctx.stage.write_table("counts.csv", &t)
    } else {
        let Models::Detector(det) = &models else { unreachable!() };
        let mut t = Table::new(&COUNTS_HEADER);
        t.push(counts_row(&detector_counts(cfg, det, &[&test])?));
        ctx.stage.write_table("summary.csv", &t)
    }
}

fn predict_cmd(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let models = Models::load(ctx)?;
    if models.classes().is_none() {
        return Err(CliError::config(
            "checkpoints",
            "predict needs checkpoints.joint, or detector, encoder and head checkpoints",
        ));
    }
    let dir = required(&cfg.data.test, "data.test")?.clone();
    let test = ctx.dataset(&dir)?;
    let manifest = ndc_core::synth::read_manifest(&dir)?;
    let mut t = Table::new(&["image", "predictions"]);
    for (s, entry) in test.samples.iter().zip(&manifest.entries) {
        let preds = models.predict(cfg, &s.image)?.expect("classifying model");
        let stem = Path::new(&entry.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| entry.image.clone());
        let rel = format!("predictions/{stem}.csv");
        ctx.stage.write(&rel, preds.to_csv_string().as_bytes())?;
        t.push(vec![entry.image.clone(), preds.len().to_string()]);
    }
    ctx.stage.write_table("summary.csv", &t)
}

fn ablate_capacity(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let widths = &cfg.ablation.widths;
    let mut runs = Table::new(&["seed", "width", "params", "detection_f1"]);
    let mut per_width: Vec<(usize, Vec<f64>)> = widths.iter().map(|_| (0, Vec::new())).collect();
    for seed in ablation_seeds(cfg) {
        let (train, test) = synth_splits(cfg, None, seed)?;
        for (k, &w) in widths.iter().enumerate() {
            progress(&format!("seed {seed}: detector width {w}"));
            let (model, history) = train_detector(&[&train], &[&test], cfg.arch(w), &cfg.detector_config(seed))?;
            ctx.stage
                .write_table(&format!("metrics/seed{seed}_width{w}.csv"), &detector_metrics(&history))?;
            let f1 = detector_counts(cfg, &model, &[&test])?.f1();
            runs.push(vec![seed.to_string(), w.to_string(), model.param_count().to_string(), num(f1)]);
            per_width[k].0 = model.param_count();
            per_width[k].1.push(f1);
        }
    }
    ctx.stage.write_table("runs.csv", &runs)?;
    let mut t = Table::new(&["width", "params", "detection_f1"]);
    for (&w, (params, f1s)) in widths.iter().zip(&per_width) {
        t.push(vec![w.to_string(), params.to_string(), num(median(f1s))]);
    }
    ctx.stage.write_table("summary.csv", &t)
}

fn ablate_datasets(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let a = &cfg.ablation;
    let small_spec = cfg.synth.scene(Some(&a.small_preset))?;
    let large_spec = cfg.synth.scene(Some(&a.large_preset))?;
    let mut runs = Table::new(&["seed", "setting", "detection_f1"]);
    let mut separated = Vec::new();
    let mut joint = Vec::new();
    for seed in ablation_seeds(cfg) {
        let small = generate(&small_spec, a.small_images, derive_seed(seed, 20), "small")?;
        let small_test = generate(&small_spec, cfg.synth.test_images, derive_seed(seed, 21), "small-test")?;
        let large = generate(&large_spec, a.large_images, derive_seed(seed, 22), "large")?;
        let dc = cfg.detector_config(seed);
        let arch = cfg.arch(cfg.detector.width);
        for (setting, sets) in [("separated", vec![&small]), ("joint", vec![&small, &large])] {
            progress(&format!("seed {seed}: {setting} training"));
            let (model, history) = train_detector(&sets, &[&small_test], arch, &dc)?;
            ctx.stage
                .write_table(&format!("metrics/seed{seed}_{setting}.csv"), &detector_metrics(&history))?;
            let f1 = detector_counts(cfg, &model, &[&small_test])?.f1();
            runs.push(vec![seed.to_string(), setting.into(), num(f1)]);
            if setting == "joint" { &mut joint } else { &mut separated }.push(f1);
        }
    }
    ctx.stage.write_table("runs.csv", &runs)?;
    let mut t = Table::new(&["setting", "train_images", "detection_f1"]);
    t.push(vec!["separated".into(), a.small_images.to_string(), num(median(&separated))]);
    t.push(vec!["joint".into(), (a.small_images + a.large_images).to_string(), num(median(&joint))]);
    ctx.stage.write_table("summary.csv", &t)
}

pub const STRATEGIES: [&str; 3] = ["linear", "full", "end_to_end"];

fn ablate_strategy(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let classes = cfg.synth.classes;
    let mut header = vec!["seed".to_string()];
    header.extend(report_header("strategy", classes));
    let mut runs = Table::new(&header);
    let mut reports: Vec<Vec<MatchReport>> = vec![Vec::new(); STRATEGIES.len()];
    for seed in ablation_seeds(cfg) {
        let (train, test) = synth_splits(cfg, None, seed)?;
        let encoder = build_encoder(cfg, &train, seed, EncoderKind::PretextPretrained)?;
        progress(&format!("seed {seed}: detector"));
        let (det, history) =
            train_detector(&[&train], &[&test], cfg.arch(cfg.detector.width), &cfg.detector_config(seed))?;
        ctx.stage
            .write_table(&format!("metrics/seed{seed}_detector.csv"), &detector_metrics(&history))?;
        for (k, name) in STRATEGIES.iter().enumerate() {
            progress(&format!("seed {seed}: {name}"));
            let report = if *name == "end_to_end" {
                let model = JointModel::from_encoder(&encoder, classes, model_seed(seed))?;
                let (model, history) = train_joint(model, &[&train], &[&test], &cfg.joint_config(seed), None)?;
                ctx.stage
                    .write_table(&format!("metrics/seed{seed}_{name}.csv"), &joint_metrics(&history))?;
                evaluate_joint(&model, &[&test], cfg.detector.tau, cfg.detector.radius)?
            } else {
                let mut cc = cfg.classifier_config(seed);
                cc.mode = if *name == "linear" { TrainMode::Linear } else { TrainMode::Full };
                let out = train_classifier(&encoder, &train, &test, &cc, Some(&det))?;
                let mut t = Table::new(&["epoch", "train_loss", "val_average_f1"]);
                for h in &out.history {
                    t.push(vec![h.epoch.to_string(), num(h.train_loss), num(h.val_average_f1)]);
                }
                ctx.stage.write_table(&format!("metrics/seed{seed}_{name}.csv"), &t)?;
                pipeline_report(cfg, &det, &out.encoder, &out.head, &test)?
            };
            let mut row = vec![seed.to_string()];
            row.extend(report_row(name.to_string(), &report));
            runs.push(row);
            reports[k].push(report);
        }
    }
    ctx.stage.write_table("runs.csv", &runs)?;
    let mut t = Table::new(&report_header("strategy", classes));
    for (name, rs) in STRATEGIES.iter().zip(&reports) {
        let mut row = vec![name.to_string()];
        for c in 0..classes {
            row.push(num(median(&rs.iter().map(|r| r.per_class_f1()[c]).collect::<Vec<_>>())));
        }
        row.push(num(median(&rs.iter().map(MatchReport::average_f1).collect::<Vec<_>>())));
        row.push(num(median(&rs.iter().map(MatchReport::detection_f1).collect::<Vec<_>>())));
        t.push(row);
    }
    ctx.stage.write_table("summary.csv", &t)
}

fn curve(history: &[JointEpoch], f: impl Fn(&JointEpoch) -> f64) -> Vec<CurvePoint> {
    history
        .iter()
        .map(|h| CurvePoint {
            epoch: h.epoch,
            value: f(h),
        })
        .collect()
}

fn dynamics(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let a = &cfg.ablation;
    let classes = cfg.synth.classes;
    let seeds = ablation_seeds(cfg);
    let mut t = Table::new(&["run", "detection_epochs", "classification_epochs", "ratio"]);
    let (mut det_e, mut cls_e, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &seeds {
        let (train, test) = synth_splits(cfg, None, seed)?;
        let model = joint_model(cfg, a.dynamics_init, || build_encoder(cfg, &train, seed, EncoderKind::PretextPretrained), classes, seed)?;
        progress(&format!("seed {seed}: joint training"));
        let (_, history) = train_joint(model, &[&train], &[&test], &cfg.joint_config(seed), None)?;
        ctx.stage.write_table(&format!("metrics/seed{seed}.csv"), &joint_metrics(&history))?;
        let d = convergence_epochs(&curve(&history, |h| h.val_detection_f1), a.fraction)?;
        let c = convergence_epochs(&curve(&history, |h| h.val_average_f1), a.fraction)?;
        let ratio = c as f64 / d.max(1) as f64;
        t.push(vec![format!("seed{seed}"), d.to_string(), c.to_string(), num(ratio)]);
        det_e.push(d as f64);
        cls_e.push(c as f64);
        ratios.push(ratio);
    }
    t.push(vec!["median".into(), num(median(&det_e)), num(median(&cls_e)), num(median(&ratios))]);
    ctx.stage.write_table("summary.csv", &t)?;

    // Probe trajectory of the backbone for the first seed.
    let seed = seeds[0];
    let (train, test) = synth_splits(cfg, None, seed)?;
    let model = joint_model(cfg, a.probe_init, || build_encoder(cfg, &train, seed, EncoderKind::PretextPretrained), classes, seed)?;
    let hook = ProbeHook {
        train: &train,
        val: &test,
        config: cfg.probe_config(seed),
    };
    progress(&format!("seed {seed}: joint training with probe"));
    let (_, history) = train_joint(model, &[&train], &[&test], &cfg.joint_config(seed), Some(hook))?;
    let mut p = Table::new(&["epoch", "probe_f1", "val_detection_f1", "val_average_f1"]);
    for h in &history {
        p.push(vec![h.epoch.to_string(), opt_num(h.probe_f1), num(h.val_detection_f1), num(h.val_average_f1)]);
    }
    ctx.stage.write_table("probe_trajectory.csv", &p)?;
    let probes: Vec<f64> = history.iter().filter_map(|h| h.probe_f1).collect();
    let (min_epoch, min) = probes
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best });
    let mut s = Table::new(&["initial_probe_f1", "min_probe_f1", "min_epoch", "final_probe_f1", "dip"]);
    s.push(vec![
        num(probes[0]),
        num(min),
        history[min_epoch].epoch.to_string(),
        num(*probes.last().expect("non-empty trajectory")),
        (min < probes[0]).to_string(),
    ]);
    ctx.stage.write_table("probe_summary.csv", &s)
}
