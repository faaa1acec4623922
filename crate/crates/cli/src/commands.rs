//! Subcommand implementations.
//!
//! Default artifact paths, relative to the run directory:
//!
//! ```text
//! data/                 synth
//! foundation.ckpt       pretrain     (pretrain_log.jsonl)
//! split.json            split
//! gsp.json              gsp-fit
//! model.ckpt            train        (train_log.jsonl, model.ckpt.failure.json on NaN)
//! predictions.jsonl     predict
//! report.json           eval         (report.txt)
//! plots/                plot
//! ```
//!
//! Every artifact gets a `<artifact>.manifest.json` sidecar (the data
//! directory gets `data/manifest.json`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use cmmp_core::encoders::Vocab;
use cmmp_core::eval::{evaluate, ground_truth_from_annotations};
use cmmp_core::model::{fit_gsp, verb_derangement, vocab_for, CmmpModel, Foundation, Sample};
use cmmp_core::synth::{scene_at, SynthSplit};
use cmmp_core::train::{prepare_training, train as train_model, StepLog};
use cmmp_core::zeroshot::{build_split, filter_training_annotations, HoiInventory, ZeroShotSplit};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind};
use crate::config::{in_sections, RunConfig};
use crate::dataset::{require, DataDir};
use crate::error::{validation, CliError, Result};
use crate::formats::{
    oracle_predictions, read_json, read_jsonl, write_json, write_jsonl, GspRecord, InventoryRecord, PredictionRecord, Report, SplitRecord,
};
use crate::manifest::{sha256_file, sha256_tree, Manifest};
use crate::parallel::par_map;

/// Config sections each stage depends on.
pub const SYNTH_SECTIONS: &[&str] = &["synth"];
pub const PRETRAIN_SECTIONS: &[&str] = &["synth", "encoder", "pretrain"];
pub const SPLIT_SECTIONS: &[&str] = &["synth", "split"];
pub const GSP_SECTIONS: &[&str] = &["synth", "split", "gsp"];
pub const TRAIN_SECTIONS: &[&str] = &["synth", "encoder", "pretrain", "split", "gsp", "prompts", "model", "filter", "train"];
pub const EVAL_SECTIONS: &[&str] = &["synth", "encoder", "pretrain", "split", "gsp", "prompts", "model", "filter", "train", "eval"];

pub struct Ctx {
    pub run_dir: PathBuf,
    pub cfg: RunConfig,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.run_dir.join(default))
    }

    fn data(&self, given: &Option<PathBuf>) -> DataDir {
        DataDir::new(self.path(given, "data"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ImageSplit {
    Train,
    Test,
}

impl From<ImageSplit> for SynthSplit {
    fn from(s: ImageSplit) -> Self {
        match s {
            ImageSplit::Train => SynthSplit::Train,
            ImageSplit::Test => SynthSplit::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output data directory [default: <run>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Data directory [default: <run>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint [default: <run>/foundation.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Data directory [default: <run>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output split file [default: <run>/split.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GspFitArgs {
    /// Data directory [default: <run>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split file [default: <run>/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Output patterns file [default: <run>/gsp.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Data directory [default: <run>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pretrained encoder [default: <run>/foundation.ckpt].
    #[arg(long)]
    pub foundation: Option<PathBuf>,
    /// Split file [default: <run>/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Spatial patterns [default: <run>/gsp.json].
    #[arg(long)]
    pub gsp: Option<PathBuf>,
    /// Output checkpoint [default: <run>/model.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step loss log [default: <run>/train_log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Data directory [default: <run>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained model [default: <run>/model.ckpt].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Image split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub images: ImageSplit,
    /// Output predictions [default: <run>/predictions.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score every verb with another verb's prototype (seeded derangement),
    /// as a control for the language prototypes.
    #[arg(long, value_name = "SEED")]
    pub shuffle_prototypes: Option<u64>,
    /// Emit the ground truth as predictions instead of running a model.
    #[arg(long, conflicts_with_all = ["model", "shuffle_prototypes"])]
    pub oracle: bool,
    /// Split recorded for `--oracle` predictions [default: <run>/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Data directory [default: <run>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Predictions [default: <run>/predictions.jsonl].
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Split file [default: <run>/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Image split the predictions cover.
    #[arg(long, value_enum, default_value = "test")]
    pub images: ImageSplit,
    /// Output report [default: <run>/report.json]; a text table goes next
    /// to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Data directory [default: <run>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Predictions [default: <run>/predictions.jsonl].
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Report [default: <run>/report.json].
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Image split the predictions cover.
    #[arg(long, value_enum, default_value = "test")]
    pub images: ImageSplit,
    /// Output directory [default: <run>/plots].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn split_count(cfg: &cmmp_core::synth::SynthConfig, split: SynthSplit) -> usize {
    match split {
        SynthSplit::Pretrain => cfg.pretrain_images,
        SynthSplit::Train => cfg.train_images,
        SynthSplit::Test => cfg.test_images,
    }
}

pub fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let sc = ctx.cfg.synth()?;
    sc.validate()?;
    let data = ctx.data(&a.data);
    let inv = sc.inventory();
    let weights = sc.composition_weights();
    data.write_inventory(&inv)?;
    for split in [SynthSplit::Pretrain, SynthSplit::Train, SynthSplit::Test] {
        let idx: Vec<usize> = (0..split_count(&sc, split)).collect();
        let scenes = par_map(&idx, |&i| scene_at(&sc, split, i, &weights)).into_iter().collect::<Result<Vec<_>, _>>()?;
        data.write_split(split, &scenes)?;
    }
    Manifest::new("synth", &ctx.cfg, SYNTH_SECTIONS).write_to(&data.root.join("manifest.json"))
}

fn header(ctx: &Ctx, kind: CheckpointKind, sections: &[&str], vocab: &Vocab, inv: &HoiInventory) -> CheckpointHeader {
    CheckpointHeader {
        kind,
        config: ctx.cfg.as_map().clone(),
        config_hash: ctx.cfg.hash(sections),
        vocab: vocab.words().to_vec(),
        inventory: InventoryRecord::new(inv),
        gsp: None,
        split_hash: None,
        params: Vec::new(),
    }
}

/// Loads a checkpoint of `kind` and checks it against the current config
/// and inventory.
fn load_checkpoint(
    ctx: &Ctx,
    path: &Path,
    kind: CheckpointKind,
    sections: &[&str],
    producer: &str,
    inv: &HoiInventory,
) -> Result<Checkpoint> {
    require(path, producer)?;
    let ck = Checkpoint::load(path)?;
    if ck.header.kind != kind {
        return Err(validation!("{} holds a {:?} checkpoint, expected {kind:?}", path.display(), ck.header.kind));
    }
    if ck.header.config_hash != ctx.cfg.hash(sections) {
        let diff: Vec<_> = ctx
            .cfg
            .as_map()
            .iter()
            .filter(|(k, v)| in_sections(k, sections) && ck.header.config.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}={v} (checkpoint: {})", ck.header.config.get(k).map_or("-", String::as_str)))
            .collect();
        return Err(validation!(
            "{} was produced with a different configuration; rerun `cmmp {producer}` or restore: {}",
            path.display(),
            diff.join(", ")
        ));
    }
    if ck.header.inventory != InventoryRecord::new(inv) {
        return Err(validation!("{} was produced for a different inventory", path.display()));
    }
    Ok(ck)
}

pub fn pretrain(ctx: &Ctx, a: &PretrainArgs) -> Result<()> {
    let data = ctx.data(&a.data);
    let inv = data.inventory()?;
    let items = data.pretrain_items(&inv)?;
    let enc = ctx.cfg.encoder()?;
    let mut f = Foundation::new(enc, vocab_for(&inv), ctx.cfg.seed()?)?;
    let refs: Vec<_> = items.iter().map(|(img, v, o)| (img, *v, *o)).collect();
    let log = f.pretrain_on(&refs, &inv, &ctx.cfg.pretrain()?)?;
    let out = ctx.path(&a.out, "foundation.ckpt");
    let ck = Checkpoint::new(header(ctx, CheckpointKind::Foundation, PRETRAIN_SECTIONS, &f.vocab, &inv), f.store);
    ck.save(&out)?;
    #[derive(Serialize)]
    struct Line {
        step: usize,
        loss: f64,
    }
    let lines: Vec<_> = log.step_losses.iter().enumerate().map(|(step, &loss)| Line { step, loss }).collect();
    write_jsonl(&ctx.run_dir.join("pretrain_log.jsonl"), &lines)?;
    Manifest::new("pretrain", &ctx.cfg, PRETRAIN_SECTIONS)
        .input("pretrain_data", sha256_tree(&data.split_dir(SynthSplit::Pretrain))?)
        .input("inventory", sha256_file(&data.inventory_path())?)
        .write_for(&out)
}

pub fn split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let data = ctx.data(&a.data);
    let inv = data.inventory()?;
    let s = build_split(&inv, ctx.cfg.setting()?, ctx.cfg.usize("split.count")?, ctx.cfg.seed()?)?;
    let out = ctx.path(&a.out, "split.json");
    write_json(&out, &SplitRecord::new(&s))?;
    Manifest::new("split", &ctx.cfg, SPLIT_SECTIONS).input("inventory", sha256_file(&data.inventory_path())?).write_for(&out)
}

fn load_split(ctx: &Ctx, given: &Option<PathBuf>, inv: &HoiInventory) -> Result<(ZeroShotSplit, PathBuf)> {
    let path = ctx.path(given, "split.json");
    require(&path, "split")?;
    Ok((read_json::<SplitRecord>(&path)?.to_core(inv)?, path))
}

fn seen_training_samples(data: &DataDir, inv: &HoiInventory, split: &ZeroShotSplit) -> Result<Vec<Sample>> {
    let train = data.load_split(SynthSplit::Train, inv, true)?;
    let kept = filter_training_annotations(&train.annotations(), inv, split)?;
    Ok(train.samples.into_iter().zip(kept).map(|(s, annotation)| Sample { annotation, ..s }).collect())
}

pub fn gsp_fit(ctx: &Ctx, a: &GspFitArgs) -> Result<()> {
    let data = ctx.data(&a.data);
    let inv = data.inventory()?;
    let (split, split_path) = load_split(ctx, &a.split, &inv)?;
    let train = data.load_split(SynthSplit::Train, &inv, true)?;
    let seen = filter_training_annotations(&train.annotations(), &inv, &split)?;
    let gsp = fit_gsp(&seen, ctx.cfg.usize("gsp.k")?, ctx.cfg.seed()?)?;
    let out = ctx.path(&a.out, "gsp.json");
    write_json(&out, &GspRecord::new(&gsp))?;
    Manifest::new("gsp-fit", &ctx.cfg, GSP_SECTIONS)
        .input("train_annotations", sha256_file(&data.annotations_path(SynthSplit::Train))?)
        .input("split", sha256_file(&split_path)?)
        .write_for(&out)
}

#[derive(Serialize)]
struct StepLine {
    epoch: usize,
    step: usize,
    lr: f64,
    l_cls: f64,
    l_cc: f64,
    total: f64,
}

impl From<&StepLog> for StepLine {
    fn from(s: &StepLog) -> Self {
        Self { epoch: s.epoch, step: s.step, lr: s.lr, l_cls: s.loss.l_cls, l_cc: s.loss.l_cc, total: s.loss.total }
    }
}

pub fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let data = ctx.data(&a.data);
    let inv = data.inventory()?;
    let fpath = ctx.path(&a.foundation, "foundation.ckpt");
    let fck = load_checkpoint(ctx, &fpath, CheckpointKind::Foundation, PRETRAIN_SECTIONS, "pretrain", &inv)?;
    let vocab = Vocab::from_words(fck.header.vocab.clone())?;
    let foundation = Foundation::from_store(ctx.cfg.encoder()?, vocab, &fck.store)?;
    let (split, split_path) = load_split(ctx, &a.split, &inv)?;
    let gpath = ctx.path(&a.gsp, "gsp.json");
    require(&gpath, "gsp-fit")?;
    let gsp_record: GspRecord = read_json(&gpath)?;
    let gsp = gsp_record.to_core()?;
    let tc = ctx.cfg.train()?;
    let mut model = CmmpModel::new(&foundation, inv.clone(), gsp, ctx.cfg.model(inv.person)?)?;
    let samples = seen_training_samples(&data, &inv, &split)?;
    let chunk = samples.len().div_ceil(crate::parallel::workers()).max(1);
    let chunks: Vec<&[Sample]> = samples.chunks(chunk).collect();
    let prepared = par_map(&chunks, |c| prepare_training(&model, c, tc.target_iou));
    let mut images = Vec::new();
    for p in prepared {
        images.extend(p?);
    }
    let log_path = ctx.path(&a.log, "train_log.jsonl");
    let out = ctx.path(&a.out, "model.ckpt");
    let mut steps: Vec<StepLine> = Vec::new();
    let result = train_model(&mut model, &images, &split.seen_verbs(&inv), &tc, &mut |s| steps.push(s.into()));
    write_jsonl(&log_path, &steps)?;
    if let Err(e) = result {
        let e = CliError::from(e);
        if let CliError::Numerical(msg) = &e {
            let dump = failure_dump(msg, &steps, &model);
            let path = out.with_file_name(format!("{}.failure.json", out.file_name().unwrap_or_default().to_string_lossy()));
            write_json(&path, &dump)?;
            return Err(CliError::Numerical(format!("{msg}; diagnostics in {}", path.display())));
        }
        return Err(e);
    }
    let split_hash = sha256_file(&split_path)?;
    let mut h = header(ctx, CheckpointKind::Model, TRAIN_SECTIONS, &model.vocab, &inv);
    h.gsp = Some(gsp_record);
    h.split_hash = Some(split_hash.clone());
    Checkpoint::new(h, model.store).save(&out)?;
    let mut m = Manifest::new("train", &ctx.cfg, TRAIN_SECTIONS)
        .input("foundation", sha256_file(&fpath)?)
        .input("split", split_hash.clone())
        .input("gsp", sha256_file(&gpath)?)
        .input("train_annotations", sha256_file(&data.annotations_path(SynthSplit::Train))?);
    m.split_hash = Some(split_hash);
    m.write_for(&out)
}

#[derive(Serialize)]
struct FailureDump<'a> {
    error: &'a str,
    last_steps: &'a [StepLine],
    params: Vec<ParamHealth>,
}

#[derive(Serialize)]
struct ParamHealth {
    name: String,
    max_abs_finite: f64,
    non_finite: usize,
}

fn failure_dump<'a>(msg: &'a str, steps: &'a [StepLine], model: &CmmpModel) -> FailureDump<'a> {
    let params = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| {
            let d = p.value.data();
            ParamHealth {
                name: p.name.clone(),
                max_abs_finite: d.iter().filter(|v| v.is_finite()).fold(0.0, |m, v| m.max(v.abs())),
                non_finite: d.iter().filter(|v| !v.is_finite()).count(),
            }
        })
        .collect();
    FailureDump { error: msg, last_steps: &steps[steps.len().saturating_sub(20)..], params }
}

/// Rebuilds the trained model stored at `path`.
pub fn load_model(ctx: &Ctx, path: &Path, inv: &HoiInventory) -> Result<(CmmpModel, Checkpoint)> {
    let ck = load_checkpoint(ctx, path, CheckpointKind::Model, TRAIN_SECTIONS, "train", inv)?;
    let gsp =
        ck.header.gsp.as_ref().ok_or_else(|| validation!("{}: model checkpoint lacks spatial patterns", path.display()))?.to_core()?;
    let vocab = Vocab::from_words(ck.header.vocab.clone())?;
    let model = CmmpModel::from_store(ctx.cfg.encoder()?, vocab, inv.clone(), gsp, ctx.cfg.model(inv.person)?, &ck.store)?;
    Ok((model, ck))
}

pub fn predict(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    let data = ctx.data(&a.data);
    let inv = data.inventory()?;
    let split = SynthSplit::from(a.images);
    let out = ctx.path(&a.out, "predictions.jsonl");
    let mut m = Manifest::new("predict", &ctx.cfg, TRAIN_SECTIONS);
    m.options.insert("images".into(), split.name().into());
    let records = if a.oracle {
        let (_, split_path) = load_split(ctx, &a.split, &inv)?;
        let images = data.load_split(split, &inv, true)?;
        let gts = ground_truth_from_annotations(&images.annotations(), &inv)?;
        let ids: Vec<String> = images.samples.iter().map(|s| s.annotation.image_id.clone()).collect();
        m.options.insert("oracle".into(), "true".into());
        m.split_hash = Some(sha256_file(&split_path)?);
        oracle_predictions(&gts, &inv, &ids)
    } else {
        let mpath = ctx.path(&a.model, "model.ckpt");
        let (model, ck) = load_model(ctx, &mpath, &inv)?;
        let images = data.load_split(split, &inv, false)?;
        let perm = a.shuffle_prototypes.map(|seed| verb_derangement(inv.num_verbs(), seed)).transpose()?;
        let w = model.permuted_classifier(perm.as_deref())?;
        if let Some(seed) = a.shuffle_prototypes {
            m.options.insert("shuffle_prototypes".into(), seed.to_string());
        }
        let per_image = par_map(&images.samples, |s| {
            let id = &s.annotation.image_id;
            model.predict_with(id, &s.image, &s.detections, &w).map(|p| PredictionRecord::new(id, &p, &inv))
        });
        m = m.input("model", sha256_file(&mpath)?);
        m.split_hash = ck.header.split_hash.clone();
        per_image.into_iter().collect::<Result<Vec<_>, _>>()?
    };
    write_jsonl(&out, &records)?;
    m.input("detections", sha256_file(&data.detections_path(split))?).write_for(&out)
}

/// Predictions, their ground truth and the split they were made for, after
/// the split consistency check.
fn load_eval_inputs(
    ctx: &Ctx,
    data: &DataDir,
    predictions: &Path,
    split_path: &Option<PathBuf>,
    images: SynthSplit,
    inv: &HoiInventory,
) -> Result<(Vec<cmmp_core::eval::Prediction>, Vec<cmmp_core::eval::GroundTruth>, ZeroShotSplit, Manifest)> {
    require(predictions, "predict")?;
    let manifest = Manifest::read_for(predictions)
        .map_err(|e| validation!("{}: unreadable manifest ({e}); rerun `cmmp predict`", predictions.display()))?;
    let (split, spath) = load_split(ctx, split_path, inv)?;
    let hash = sha256_file(&spath)?;
    if manifest.split_hash.as_deref() != Some(hash.as_str()) {
        return Err(validation!(
            "{} were made for a different split than {}; rerun `cmmp train` and `cmmp predict` on this split",
            predictions.display(),
            spath.display()
        ));
    }
    let ann = data.load_split(images, inv, true)?.annotations();
    let gts = ground_truth_from_annotations(&ann, inv)?;
    let known: std::collections::BTreeSet<&str> = ann.iter().map(|a| a.image_id.as_str()).collect();
    let mut preds = Vec::new();
    for r in read_jsonl::<PredictionRecord>(predictions)? {
        if !known.contains(r.image_id.as_str()) {
            return Err(validation!("prediction for unknown image {}", r.image_id));
        }
        preds.extend(r.to_core(inv)?);
    }
    Ok((preds, gts, split, manifest))
}

pub fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<Report> {
    let data = ctx.data(&a.data);
    let inv = data.inventory()?;
    let ppath = ctx.path(&a.predictions, "predictions.jsonl");
    let (preds, gts, split, pm) = load_eval_inputs(ctx, &data, &ppath, &a.split, a.images.into(), &inv)?;
    let metrics = evaluate(&preds, &gts, &split, &ctx.cfg.eval(&inv)?)?;
    let report = Report::new(&metrics, &split, &inv);
    let out = ctx.path(&a.out, "report.json");
    write_json(&out, &report)?;
    crate::formats::write_bytes(&out.with_extension("txt"), report.table().as_bytes())?;
    let mut m = Manifest::new("eval", &ctx.cfg, EVAL_SECTIONS)
        .input("predictions", sha256_file(&ppath)?)
        .input("annotations", sha256_file(&data.annotations_path(a.images.into()))?);
    m.split_hash = pm.split_hash;
    m.options = pm.options;
    m.write_for(&out)?;
    Ok(report)
}

pub fn plot(ctx: &Ctx, a: &PlotArgs) -> Result<()> {
    let data = ctx.data(&a.data);
    let inv = data.inventory()?;
    let ppath = ctx.path(&a.predictions, "predictions.jsonl");
    let rpath = ctx.path(&a.report, "report.json");
    require(&rpath, "eval")?;
    let report: Report = read_json(&rpath)?;
    let (preds, gts, split, _) = load_eval_inputs(ctx, &data, &ppath, &None, a.images.into(), &inv)?;
    let cfg = ctx.cfg.eval(&inv)?;
    let dir = ctx.path(&a.out_dir, "plots");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let curves = crate::plot::group_pr_curves(&preds, &gts, &split, &cfg);
    crate::plot::pr_curves_svg(&dir.join("pr_curves.svg"), &curves)?;
    crate::plot::map_bars_svg(&dir.join("map_bars.svg"), &report)?;
    let mut m =
        Manifest::new("plot", &ctx.cfg, EVAL_SECTIONS).input("predictions", sha256_file(&ppath)?).input("report", sha256_file(&rpath)?);
    m.options = BTreeMap::from([("images".to_string(), SynthSplit::from(a.images).name().to_string())]);
    m.write_to(&dir.join("manifest.json"))
}
