//! The pipeline stages. Each stage checks its manifest, runs if needed, and
//! records the digests of what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nowcast_core::model::{load_model, predict_source, save_model, train, FileSamples, SampleSource};
use nowcast_core::pipeline::{
    fit_normalizer, oversample_positives, sample_frames, split_events, valid_cells, write_sample_set, Normalizer,
    SampleFile, SampleSet, CELL, THRESHOLD_DBZ,
};
use nowcast_core::synth::{read_grid, synth_event, write_grid, GridSequence, VAR_R};
use nowcast_core::verify::{
    confusion, outcome_map, per_frame_series, persistence_baseline, roc_auc, skill_scores, ConfusionMatrix,
    SkillScores,
};
use nowcast_core::NowcastError;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{stage_seed, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{fingerprint, CacheDecision, Manifest, Workspace};

pub const STAGES: [&str; 4] = ["synth", "prepare", "train", "eval"];

/// Persistence forecasts are 0 or 1, so any cut in (0, 1] scores them alike.
const PERSISTENCE_CUT: f64 = 0.5;
const PERSISTENCE_AUC_CAVEAT: &str = "binary forecast: ROC has one operating point";

pub struct Context {
    pub cfg: ExperimentConfig,
    pub ws: Workspace,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub skipped: bool,
    pub manifest: Manifest,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, base: PathBuf, force: bool) -> Self {
        let config_hash = cfg.short_hash();
        Context {
            cfg,
            ws: Workspace::new(base, force),
            config_hash,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.ws.resolve(&self.cfg.paths.data_dir)
    }

    pub fn model_path(&self) -> PathBuf {
        self.ws.resolve(&self.cfg.paths.model)
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.model_path().with_file_name("train_log.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.ws.resolve(&self.cfg.paths.report_dir)
    }

    pub fn event_path(&self, k: usize) -> PathBuf {
        self.data_dir().join(format!("event_{k}.nwc"))
    }

    pub fn split_path(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.nws"))
    }

    pub fn normalizer_path(&self) -> PathBuf {
        self.data_dir().join("normalizer.json")
    }

    fn toml_of<T: Serialize>(value: &T) -> String {
        toml::to_string(value).expect("config section serializes")
    }

    fn run_stage(
        &self,
        stage: &'static str,
        fp: &str,
        guard_dir: &Path,
        existing: &[PathBuf],
        body: impl FnOnce() -> CliResult<Vec<PathBuf>>,
    ) -> CliResult<StageOutcome> {
        if let CacheDecision::UpToDate(manifest) = self.ws.decide(stage, fp, guard_dir, existing)? {
            println!("{stage}: up to date (config {})", manifest.config_hash);
            return Ok(StageOutcome {
                stage,
                skipped: true,
                manifest,
            });
        }
        self.ws.begin(stage, fp, &self.config_hash)?;
        let outputs = body()?;
        let manifest = self.ws.finish(stage, fp, &self.config_hash, &outputs)?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            manifest,
        })
    }
}

fn existing_matching(dir: &Path, pred: impl Fn(&str) -> bool) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(&pred))
        .collect();
    out.sort();
    out
}

fn is_event_file(name: &str) -> bool {
    name.starts_with("event_") && name.ends_with(".nwc")
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn csv_err(e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => CliError::Core(NowcastError::Data(format!("csv: {other:?}"))),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

/// Per-event count of pixel-frames whose composite reflectivity reaches the
/// storm threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStats {
    pub event: usize,
    pub positive_pixels: usize,
    pub pixels: usize,
}

pub fn event_stats(event: usize, seq: &GridSequence) -> EventStats {
    let dims = seq.dims();
    let positive_pixels = (0..dims.frames)
        .map(|t| seq.composite(t, VAR_R).iter().filter(|&&v| v as f64 >= THRESHOLD_DBZ).count())
        .sum();
    EventStats {
        event,
        positive_pixels,
        pixels: dims.frames * dims.ny * dims.nx,
    }
}

pub fn cmd_synth(ctx: &Context) -> CliResult<StageOutcome> {
    let cfg = &ctx.cfg;
    let fp = fingerprint(&[
        ("stage", "synth"),
        ("seed", &cfg.seed.to_string()),
        ("events", &cfg.events.to_string()),
        ("synth", &Context::toml_of(&cfg.synth)),
    ]);
    let data = ctx.data_dir();
    let existing = existing_matching(&data, is_event_file);
    ctx.run_stage("synth", &fp, &data, &existing, || {
        fs::create_dir_all(&data)?;
        for old in existing_matching(&data, is_event_file) {
            fs::remove_file(old)?;
        }
        if cfg.events == 0 {
            eprintln!("warning: zero events requested; no event files written");
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "synth"));
        let seeds: Vec<u64> = (0..cfg.events).map(|_| rng.next_u64()).collect();
        let stats = seeds
            .par_iter()
            .enumerate()
            .map(|(k, &s)| {
                let seq = synth_event(&cfg.synth, s, format!("event_{k}"))?;
                write_grid(&seq, &ctx.event_path(k))?;
                Ok(event_stats(k, &seq))
            })
            .collect::<CliResult<Vec<_>>>()?;
        for s in &stats {
            println!(
                "synth: event_{} {} of {} pixel-frames >= {THRESHOLD_DBZ} dBZ ({:.3}%)",
                s.event,
                s.positive_pixels,
                s.pixels,
                100.0 * s.positive_pixels as f64 / s.pixels as f64
            );
        }
        Ok((0..cfg.events).map(|k| ctx.event_path(k)).collect())
    })
    .map_err(|e| e.in_stage("synth"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerFile {
    pub config_hash: String,
    pub normalizer: Normalizer,
}

pub fn read_normalizer(path: &Path) -> CliResult<NormalizerFile> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Core(NowcastError::Data(format!("{}: {e}", path.display()))))
}

fn load_events(ctx: &Context) -> CliResult<Vec<GridSequence>> {
    (0..ctx.cfg.events)
        .map(|k| {
            let p = ctx.event_path(k);
            read_grid(&p).map_err(|e| match e {
                NowcastError::Io(io) => {
                    CliError::Core(NowcastError::Data(format!("cannot read event file {}: {io}", p.display())))
                }
                other => other.into(),
            })
        })
        .collect()
}

/// Positive fraction recomputed from a written sample-set file.
pub fn file_positive_fraction(path: &Path) -> CliResult<(usize, usize, usize)> {
    let file = SampleFile::open(path)?;
    let labeled = file.labeled()?;
    let positives = labeled.iter().filter(|s| s.meta.label == 1).count();
    let shifted = labeled.iter().filter(|s| s.meta.oversampled).count();
    Ok((labeled.len(), positives, shifted))
}

fn describe(name: &str, set: &SampleSet) -> String {
    format!(
        "{name}: {} samples, {} positive ({:.2}%)",
        set.samples.len(),
        set.positives(),
        100.0 * set.positive_fraction()
    )
}

pub fn cmd_prepare(ctx: &Context) -> CliResult<StageOutcome> {
    let cfg = &ctx.cfg;
    let upstream = ctx.ws.require("synth").map_err(|e| e.in_stage("prepare"))?;
    let fp = fingerprint(&[
        ("stage", "prepare"),
        ("seed", &cfg.seed.to_string()),
        ("pipeline", &Context::toml_of(&cfg.pipeline)),
        ("inputs", &upstream.digest_list()),
    ]);
    let data = ctx.data_dir();
    let outputs = vec![
        ctx.split_path("train"),
        ctx.split_path("val"),
        ctx.split_path("test"),
        ctx.normalizer_path(),
    ];
    ctx.run_stage("prepare", &fp, &data, &outputs, || {
        let events = load_events(ctx)?;
        let p = &cfg.pipeline;
        let splits = split_events(&events, p.train_events, p.test_events, stage_seed(cfg.seed, "prepare"))?;
        let train_events: Vec<&GridSequence> = events[..p.train_events].iter().collect();
        let normalizer = fit_normalizer(&train_events)?;
        let dims = cfg.synth.dims();
        let per_event = valid_cells(dims).len() * sample_frames(dims.frames).count();
        println!(
            "prepare: {} cells x {} frames = {per_event} samples per event",
            valid_cells(dims).len(),
            sample_frames(dims.frames).count()
        );
        println!("prepare: before oversampling {}", describe("train", &splits.train));
        let oversampled = oversample_positives(&splits.train, &events, p.k)?;
        println!("prepare: after oversampling (K={}) {}", p.k, describe("train", &oversampled));
        println!("prepare: {}", describe("validation", &splits.validation));
        println!("prepare: {}", describe("test", &splits.test));

        write_sample_set(&outputs[0], &oversampled.samples, &events, &normalizer)?;
        write_sample_set(&outputs[1], &splits.validation.samples, &events, &normalizer)?;
        write_sample_set(&outputs[2], &splits.test.samples, &events, &normalizer)?;
        let (n, pos, shifted) = file_positive_fraction(&outputs[2])?;
        if n != splits.test.samples.len() || pos != splits.test.positives() || shifted != 0 {
            return Err(NowcastError::Data(format!(
                "test-set purity violated: enumerated {} samples / {} positive, file holds {n} / {pos} with {shifted} shifted",
                splits.test.samples.len(),
                splits.test.positives()
            ))
            .into());
        }
        println!("prepare: test positive fraction unchanged by preparation ({pos}/{n})");
        let nf = NormalizerFile {
            config_hash: ctx.config_hash.clone(),
            normalizer,
        };
        fs::write(&outputs[3], serde_json::to_vec_pretty(&nf).expect("normalizer serializes"))?;
        Ok(outputs.clone())
    })
    .map_err(|e| e.in_stage("prepare"))
}

pub fn cmd_train(ctx: &Context) -> CliResult<StageOutcome> {
    let cfg = &ctx.cfg;
    let upstream = ctx.ws.require("prepare").map_err(|e| e.in_stage("train"))?;
    let fp = fingerprint(&[
        ("stage", "train"),
        ("seed", &cfg.seed.to_string()),
        ("train", &Context::toml_of(&cfg.train)),
        ("inputs", &upstream.digest_list()),
    ]);
    let model_path = ctx.model_path();
    let log_path = ctx.train_log_path();
    let guard = model_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let outputs = vec![model_path.clone(), log_path.clone()];
    ctx.run_stage("train", &fp, &guard, &outputs, || {
        let normalizer = read_normalizer(&ctx.normalizer_path())?.normalizer;
        let mut train_set = FileSamples::new(SampleFile::open(&ctx.split_path("train"))?)?;
        let mut val_set = FileSamples::new(SampleFile::open(&ctx.split_path("val"))?)?;
        let tc = cfg.train.to_train_config(stage_seed(cfg.seed, "train"));
        println!(
            "train: {} train / {} validation samples, {} epochs of {} samples",
            train_set.samples().len(),
            val_set.samples().len(),
            tc.epochs,
            if tc.samples_per_epoch == 0 {
                train_set.samples().len()
            } else {
                tc.samples_per_epoch.min(train_set.samples().len())
            }
        );
        let mut outcome = train(&mut train_set, &mut val_set, &normalizer, &tc, |row| {
            println!(
                "train: epoch {} loss {:.5} val_csi {}",
                row.epoch,
                row.train_loss,
                opt(row.val_csi)
            );
        })?;
        outcome.model.echo.seed = cfg.seed;
        outcome.model.echo.config_hash = ctx.config_hash.clone();
        if let Some(dir) = model_path.parent() {
            fs::create_dir_all(dir)?;
        }
        save_model(&outcome.model, &model_path)?;
        let mut w = csv_writer(&log_path)?;
        w.write_record(["epoch", "loss", "val_csi", "config_hash"]).map_err(csv_err)?;
        for row in &outcome.log {
            w.write_record([
                row.epoch.to_string(),
                row.train_loss.to_string(),
                opt(row.val_csi),
                ctx.config_hash.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        println!("train: kept epoch {} of {}", outcome.best_epoch, outcome.log.len());
        Ok(outputs.clone())
    })
    .map_err(|e| e.in_stage("train"))
}

/// One row of `report.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: &'static str,
    pub threshold: f64,
    pub matrix: ConfusionMatrix,
    pub scores: SkillScores,
    pub auc: Option<f64>,
    pub auc_caveat: &'static str,
}

fn auc_or_none(preds: &[f64], labels: &[u8]) -> CliResult<(Vec<nowcast_core::verify::RocPoint>, Option<f64>)> {
    match roc_auc(preds, labels) {
        Ok((points, auc)) => Ok((points, Some(auc))),
        Err(NowcastError::UndefinedAuc) => Ok((Vec::new(), None)),
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_eval(ctx: &Context) -> CliResult<StageOutcome> {
    let cfg = &ctx.cfg;
    let (prepared, trained) = ctx
        .ws
        .require("prepare")
        .and_then(|p| Ok((p, ctx.ws.require("train")?)))
        .map_err(|e| e.in_stage("eval"))?;
    let fp = fingerprint(&[
        ("stage", "eval"),
        ("threshold", &cfg.threshold.to_string()),
        ("inputs", &(prepared.digest_list() + &trained.digest_list())),
    ]);
    let report = ctx.report_dir();
    let existing = existing_matching(&report, |n| n.ends_with(".csv") || n.ends_with(".svg"));
    ctx.run_stage("eval", &fp, &report, &existing, || {
        let model = load_model(&ctx.model_path())?;
        let nf = read_normalizer(&ctx.normalizer_path())?;
        if model.normalizer != nf.normalizer {
            return Err(NowcastError::Config(format!(
                "normalizer provenance mismatch: model {} was fitted with different extrema than the sample sets in {} (config {})",
                ctx.model_path().display(),
                ctx.data_dir().display(),
                nf.config_hash
            ))
            .into());
        }
        let mut test = FileSamples::new(SampleFile::open(&ctx.split_path("test"))?)?;
        let samples = test.samples().to_vec();
        if samples.is_empty() {
            return Err(NowcastError::Data("test split is empty".into()).into());
        }
        let probs = predict_source(&model, &mut test)?;
        let mut persistence = Vec::with_capacity(samples.len());
        for s in &samples {
            let block = test.block(s.blocks[2])?;
            persistence.extend(persistence_baseline([block.as_slice()], &nf.normalizer)?);
        }
        let labels: Vec<u8> = samples.iter().map(|s| s.meta.label).collect();
        let frames: Vec<u32> = samples.iter().map(|s| s.meta.key.frame).collect();
        let thr = cfg.threshold;

        for old in &existing {
            fs::remove_file(old)?;
        }
        fs::create_dir_all(&report)?;
        let mut outputs = Vec::new();

        let (roc_model, auc_model) = auc_or_none(&probs, &labels)?;
        let (roc_pers, auc_pers) = auc_or_none(&persistence, &labels)?;
        let m_model = confusion(&probs, &labels, thr)?;
        let m_pers = confusion(&persistence, &labels, PERSISTENCE_CUT)?;
        let rows = [
            ReportRow {
                model: "cnn_lstm",
                threshold: thr,
                matrix: m_model,
                scores: skill_scores(&m_model),
                auc: auc_model,
                auc_caveat: "",
            },
            ReportRow {
                model: "persistence",
                threshold: PERSISTENCE_CUT,
                matrix: m_pers,
                scores: skill_scores(&m_pers),
                auc: auc_pers,
                auc_caveat: PERSISTENCE_AUC_CAVEAT,
            },
        ];
        let path = report.join("report.csv");
        let mut w = csv_writer(&path)?;
        w.write_record([
            "model", "threshold", "samples", "tp", "fn", "fp", "tn", "pod", "far", "csi", "auc", "auc_caveat",
            "config_hash",
        ])
        .map_err(csv_err)?;
        for r in &rows {
            let m = r.matrix;
            w.write_record([
                r.model.to_string(),
                r.threshold.to_string(),
                m.total().to_string(),
                m.tp.to_string(),
                m.fn_.to_string(),
                m.fp.to_string(),
                m.tn.to_string(),
                opt(r.scores.pod),
                opt(r.scores.far),
                opt(r.scores.csi),
                opt(r.auc),
                r.auc_caveat.to_string(),
                ctx.config_hash.clone(),
            ])
            .map_err(csv_err)?;
            println!(
                "eval: {:<11} pod {} far {} csi {} auc {}",
                r.model,
                opt(r.scores.pod),
                opt(r.scores.far),
                opt(r.scores.csi),
                opt(r.auc)
            );
        }
        w.flush()?;
        outputs.push(path);

        let report_frames: Vec<u32> = sample_frames(cfg.synth.frames).map(|t| t as u32).collect();
        let path = report.join("frames.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["model", "frame", "tp", "fn", "fp", "tn", "pod", "far", "csi", "config_hash"])
            .map_err(csv_err)?;
        for (name, preds, cut) in [("cnn_lstm", &probs, thr), ("persistence", &persistence, PERSISTENCE_CUT)] {
            for f in per_frame_series(preds, &labels, &frames, &report_frames, cut)? {
                let m = f.matrix;
                w.write_record([
                    name.to_string(),
                    f.frame.to_string(),
                    m.tp.to_string(),
                    m.fn_.to_string(),
                    m.fp.to_string(),
                    m.tn.to_string(),
                    opt(f.scores.pod),
                    opt(f.scores.far),
                    opt(f.scores.csi),
                    ctx.config_hash.clone(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        outputs.push(path);

        let path = report.join("roc.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["model", "threshold", "fpr", "tpr", "config_hash"]).map_err(csv_err)?;
        for (name, points) in [("cnn_lstm", &roc_model), ("persistence", &roc_pers)] {
            for p in points {
                w.write_record([
                    name.to_string(),
                    p.threshold.to_string(),
                    p.fpr.to_string(),
                    p.tpr.to_string(),
                    ctx.config_hash.clone(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        outputs.push(path);

        let path = report.join("predictions.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["event", "frame", "row", "col", "label", "probability", "persistence", "config_hash"])
            .map_err(csv_err)?;
        for (i, s) in samples.iter().enumerate() {
            let k = s.meta.key;
            w.write_record([
                k.event.to_string(),
                k.frame.to_string(),
                k.row.to_string(),
                k.col.to_string(),
                s.meta.label.to_string(),
                probs[i].to_string(),
                persistence[i].to_string(),
                ctx.config_hash.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        outputs.push(path);

        let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry((s.meta.key.event, s.meta.key.frame)).or_default().push(i);
        }
        let (rows_n, cols_n) = ((cfg.synth.ny / CELL) as u32, (cfg.synth.nx / CELL) as u32);
        for ((event, frame), idx) in groups {
            let p: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
            let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let cells: Vec<(u32, u32)> = idx.iter().map(|&i| (samples[i].meta.key.row, samples[i].meta.key.col)).collect();
            let map = outcome_map(&p, &l, &cells, frame, thr)?;
            let stem = format!("outcome_{event}_{frame}");
            let svg = report.join(format!("{stem}.svg"));
            let comment = format!("event {event} frame {frame} threshold {thr} config_hash {}", ctx.config_hash);
            fs::write(&svg, map.to_svg(rows_n, cols_n, &comment))?;
            outputs.push(svg);
            let path = report.join(format!("{stem}.csv"));
            let mut w = csv_writer(&path)?;
            w.write_record(["row", "col", "outcome", "config_hash"]).map_err(csv_err)?;
            for ((r, c), o) in &map.cells {
                w.write_record([r.to_string(), c.to_string(), o.name().to_string(), ctx.config_hash.clone()])
                    .map_err(csv_err)?;
            }
            w.flush()?;
            outputs.push(path);
        }
        Ok(outputs)
    })
    .map_err(|e| e.in_stage("eval"))
}

pub fn cmd_all(ctx: &Context) -> CliResult<Vec<StageOutcome>> {
    Ok(vec![cmd_synth(ctx)?, cmd_prepare(ctx)?, cmd_train(ctx)?, cmd_eval(ctx)?])
}
