//! Acceptance gate. Each criterion prints one `PASS`/`FAIL` line to the real
//! stdout and the test fails if any criterion fails.
//!
//! Everything runs inside one test so the heavy end-to-end runs do not
//! compete for cores with each other.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nowcast::commands::file_positive_fraction;
use nowcast::{cmd_all, cmd_prepare, Context, ExperimentConfig};
use nowcast_core::model::gradcheck::check_gradients;
use nowcast_core::model::{ModelConfig, NowcastModel, FEATURE_DIM, INPUT_CHANNELS, KERNELS, SPATIAL_CHAIN};
use nowcast_core::pipeline::{
    enumerate_samples, fit_normalizer, oversample_positives, shifts, time_difference, BlockKey, Normalizer,
    SampleMeta, SampleSet, Split, BLOCK_LEN, CELL, THRESHOLD_DBZ, VARIABLES,
};
use nowcast_core::synth::{read_grid, synth_event, GridDims, GridSequence, SynthConfig, LEVELS, VAR_R};
use nowcast_core::tensor::{BatchNormMode, Tape, Tensor};
use nowcast_core::verify::{roc_auc, skill_scores, ConfusionMatrix};
use nowcast_core::NowcastError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEARNABILITY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const RUN_BUDGET: Duration = Duration::from_secs(30 * 60);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let line = format!(
        "acceptance: {} {}: {}\n",
        if v.pass { "PASS" } else { "FAIL" },
        v.name,
        v.detail
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let norm = Normalizer {
        variables: VARIABLES.iter().map(|s| s.to_string()).collect(),
        min: vec![0.0, -20.0, -5.0, -3.0, -2.0, -1.0],
        max: vec![70.0, 20.0, 10.0, 3.0, 3.0, 1.0],
    };
    let model = NowcastModel::new(ModelConfig::shrunken(), norm, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let blocks: Vec<Vec<f32>> = (0..7)
        .map(|_| (0..BLOCK_LEN).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let refs: Vec<&[f32]> = blocks.iter().map(|b| b.as_slice()).collect();
    let samples = [[0, 1, 2], [3, 4, 5], [2, 5, 6]];
    let checks = check_gradients(&model, &refs, &samples, &[1, 0, 1], BatchNormMode::Train, 1e-4, 6, 21).unwrap();
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .unwrap();
    let scored: usize = checks.iter().map(|c| c.checked).sum();
    let straddled: usize = checks.iter().map(|c| c.straddled).sum();
    let every_group = checks.len() == model.params.len() && checks.iter().all(|c| c.checked >= 2);
    Verdict {
        name: "gradient fidelity",
        pass: every_group && worst.max_relative_error < 1e-4 && elapsed < GRADCHECK_BUDGET,
        detail: format!(
            "{} groups, {scored} entries scored ({straddled} kink-straddling redrawn), max rel err {:.2e} ({}), {:.1}s",
            checks.len(),
            worst.max_relative_error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    }
}

fn mann_whitney(preds: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let (mut p, mut n) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        p += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                credit += if preds[i] > preds[j] {
                    1.0
                } else if preds[i] == preds[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    for &l in labels {
        n += usize::from(l == 0);
    }
    credit / (p * n) as f64
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut matrix_mismatch = 0;
    for i in 0..1000 {
        // Every tenth matrix has an empty margin so undefined scores are covered.
        let mut draw = |zero: bool| if zero { 0 } else { rng.random_range(0..500u64) };
        let m = ConfusionMatrix {
            tp: draw(i % 10 == 0),
            fn_: draw(i % 20 == 0),
            fp: draw(i % 30 == 0),
            tn: draw(false),
        };
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let s = skill_scores(&m);
        let expect = (
            ratio(m.tp, m.tp + m.fn_),
            ratio(m.fp, m.tp + m.fp),
            ratio(m.tp, m.tp + m.fn_ + m.fp),
        );
        if (s.pod, s.far, s.csi) != expect {
            matrix_mismatch += 1;
        }
    }
    let mut worst_auc: f64 = 0.0;
    for i in 0..100 {
        let n = rng.random_range(2..400);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores in half the sets force ties.
        let preds: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random();
                if i % 2 == 0 { (x * 8.0).floor() / 8.0 } else { x }
            })
            .collect();
        let (_, auc) = roc_auc(&preds, &labels).unwrap();
        worst_auc = worst_auc.max((auc - mann_whitney(&preds, &labels)).abs());
    }
    Verdict {
        name: "metric oracles",
        pass: matrix_mismatch == 0 && worst_auc <= 1e-9,
        detail: format!(
            "{matrix_mismatch} of 1000 score triples differ from direct substitution; max |AUC - pairwise| {worst_auc:.1e} over 100 sets"
        ),
    }
}

fn brute_label(seq: &GridSequence, key: BlockKey) -> u8 {
    let d = seq.dims();
    let field = seq.field(key.frame as usize + 2, VAR_R);
    let y0 = (CELL as i64 * key.row as i64 + key.dy as i64) as usize;
    let x0 = (CELL as i64 * key.col as i64 + key.dx as i64) as usize;
    for z in 0..d.levels {
        for y in y0..y0 + CELL {
            for x in x0..x0 + CELL {
                if field[(z * d.ny + y) * d.nx + x] as f64 >= THRESHOLD_DBZ {
                    return 1;
                }
            }
        }
    }
    0
}

fn crafted_grid(core_y: usize, core_x: usize) -> GridSequence {
    let dims = GridDims {
        frames: 6,
        levels: LEVELS,
        ny: 40,
        nx: 40,
    };
    let n = dims.field_len();
    let mut data = vec![0.0f32; 6 * 3 * n];
    let label_frame_r = 5 * 3 * n;
    for z in 0..LEVELS {
        for y in core_y..core_y + 6 {
            for x in core_x..core_x + 6 {
                data[label_frame_r + (z * 40 + y) * 40 + x] = 50.0;
            }
        }
    }
    GridSequence::new("crafted", dims, vec!["R".into(), "w".into(), "pt".into()], data).unwrap()
}

fn pipeline_oracles() -> Verdict {
    // Labels: storms on the 96×120 grid, every enumerated and oversampled sample.
    let cfg = SynthConfig {
        ny: 96,
        nx: 120,
        ..SynthConfig::default()
    };
    let events: Vec<GridSequence> = (0..11).map(|k| synth_event(&cfg, 1000 + k, format!("e{k}")).unwrap()).collect();
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    let mut positives = 0usize;
    for (e, seq) in events.iter().enumerate() {
        let samples = enumerate_samples(seq, e as u32).unwrap();
        let set = SampleSet {
            split: Split::Train,
            samples,
        };
        let over = oversample_positives(&set, &events, 1).unwrap();
        for s in &over.samples {
            checked += 1;
            positives += usize::from(s.label == 1);
            mismatches += usize::from(brute_label(seq, s.key) != s.label);
        }
    }

    // Oversampling on crafted 40×40 grids, counted by hand: 16 in-domain cells
    // at one labeled frame; an interior core gains all 8 shifts, a core in
    // cell (1, 1) keeps only the 3 shifts that stay inside the grid.
    let count = |core: (usize, usize), k: u8| {
        let seq = crafted_grid(core.0, core.1);
        let set = SampleSet {
            split: Split::Train,
            samples: enumerate_samples(&seq, 0).unwrap(),
        };
        let over = oversample_positives(&set, std::slice::from_ref(&seq), k).unwrap();
        let added: Vec<(i8, i8)> = over.samples.iter().filter(|s| s.oversampled).map(|s| (s.key.dy, s.key.dx)).collect();
        (set.samples.len(), over.samples.len(), added)
    };
    let interior = count((18, 18), 1);
    let corner = count((6, 6), 1);
    let corner_k2 = count((6, 6), 2);
    let crafted_ok = interior == (16, 24, shifts(1).to_vec())
        && corner == (16, 19, vec![(0, 1), (1, 0), (1, 1)])
        && corner_k2 == (16, 19, vec![(0, 2), (2, 0), (2, 2)]);

    // Differencing and normalization identities.
    let seq = &events[0];
    let mut diff_err: f64 = 0.0;
    for (v, name) in ["R", "w", "pt"].iter().enumerate() {
        let d = time_difference(seq, name).unwrap();
        for t in 1..seq.dims().frames {
            let (cur, prev) = (seq.field(t, v), seq.field(t - 1, v));
            for i in 0..cur.len() {
                diff_err = diff_err.max((d[t - 1][i] + prev[i] as f64 - cur[i] as f64).abs());
            }
        }
    }
    let norm = fit_normalizer(&events[..3].iter().collect::<Vec<_>>()).unwrap();
    let mut norm_err: f64 = 0.0;
    for v in 0..VARIABLES.len() {
        let (lo, hi) = (norm.min[v], norm.max[v]);
        norm_err = norm_err
            .max((norm.normalize(lo, v) + 1.0).abs())
            .max((norm.normalize(hi, v) - 1.0).abs())
            .max(norm.normalize((lo + hi) / 2.0, v).abs());
        for i in 0..=100 {
            let x = lo + (hi - lo) * i as f64 / 100.0;
            let expect = (x - lo) / (hi - lo) * 2.0 - 1.0;
            norm_err = norm_err
                .max((norm.normalize(x, v) - expect).abs())
                .max((norm.denormalize(norm.normalize(x, v), v) - x).abs() / (hi - lo).max(1.0));
        }
    }
    Verdict {
        name: "pipeline oracles",
        pass: checked >= 50_000 && mismatches == 0 && crafted_ok && diff_err <= 1e-12 && norm_err <= 1e-12,
        detail: format!(
            "{mismatches} label mismatches over {checked} samples ({positives} positive); crafted 40x40 counts {} (interior {:?}->{:?}, corner {:?}->{:?}); difference identity err {diff_err:.1e}, normalization identity err {norm_err:.1e}",
            if crafted_ok { "match" } else { "DIFFER" },
            interior.0,
            interior.1,
            corner.0,
            corner.1
        ),
    }
}

fn shape_contract() -> Verdict {
    let norm = Normalizer {
        variables: VARIABLES.iter().map(|s| s.to_string()).collect(),
        min: vec![0.0; 6],
        max: vec![1.0; 6],
    };
    let model = NowcastModel::new(ModelConfig::default(), norm, 3).unwrap();
    let block: Vec<f32> = (0..BLOCK_LEN).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect();
    let dims = model.cnn_forward(&block).map(|f| f.len());
    let mut chain = vec![18];
    for k in KERNELS {
        chain.push(chain.last().unwrap() - k + 1);
    }
    chain.push(chain.last().unwrap() / 2);
    let short = model.cnn_forward(&block[..BLOCK_LEN - 20]);
    let mut rejected = 0;
    for side in [16, 17, 19, 20] {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, INPUT_CHANNELS, side, side]));
        if let Err(NowcastError::Dimension { .. }) = model.cnn(&mut tape, &b, x, BatchNormMode::Infer) {
            rejected += 1;
        }
    }
    let pass = dims.as_ref().ok() == Some(&FEATURE_DIM)
        && FEATURE_DIM == 50
        && chain == SPATIAL_CHAIN.to_vec()
        && matches!(short, Err(NowcastError::Dimension { .. }))
        && rejected == 4;
    Verdict {
        name: "shape contract",
        pass,
        detail: format!(
            "cnn_forward emits {dims:?} dims; spatial chain {chain:?}; short block and {rejected}/4 mis-sized windows rejected"
        ),
    }
}

struct RunResult {
    seed: u64,
    elapsed: Duration,
    model_csi: Option<f64>,
    persistence_csi: Option<f64>,
    auc: Option<f64>,
    artifacts: BTreeMap<String, Vec<u8>>,
}

fn parse_opt(s: &str) -> Option<f64> {
    s.parse().ok()
}

fn full_run(seed: u64, dir: &Path) -> Result<RunResult, String> {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let ctx = Context::new(cfg, dir.to_path_buf(), false);
    let start = Instant::now();
    cmd_all(&ctx).map_err(|e| format!("seed {seed}: {e}"))?;
    let elapsed = start.elapsed();
    let report = fs::read_to_string(ctx.report_dir().join("report.csv")).map_err(|e| e.to_string())?;
    let mut rows = csv::Reader::from_reader(report.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut model_csi = None;
    let mut persistence_csi = None;
    let mut auc = None;
    for r in rows.records() {
        let r = r.unwrap();
        match &r[col("model")] {
            "cnn_lstm" => {
                model_csi = parse_opt(&r[col("csi")]);
                auc = parse_opt(&r[col("auc")]);
            }
            "persistence" => persistence_csi = parse_opt(&r[col("csi")]),
            _ => {}
        }
    }
    let mut artifacts = BTreeMap::new();
    artifacts.insert("model".to_string(), fs::read(ctx.model_path()).unwrap());
    artifacts.insert("train_log.csv".to_string(), fs::read(ctx.train_log_path()).unwrap());
    for e in fs::read_dir(ctx.report_dir()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "csv") {
            artifacts.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    Ok(RunResult {
        seed,
        elapsed,
        model_csi,
        persistence_csi,
        auc,
        artifacts,
    })
}

/// Independent recount of the test split straight from the event files.
fn test_purity(dir: &Path) -> Verdict {
    let ctx = Context::new(ExperimentConfig::default(), dir.to_path_buf(), false);
    let p = &ctx.cfg.pipeline;
    let mut expected: Vec<SampleMeta> = Vec::new();
    for e in p.train_events..p.train_events + p.test_events {
        let seq = read_grid(&ctx.event_path(e)).unwrap();
        expected.extend(enumerate_samples(&seq, e as u32).unwrap());
    }
    let exp_pos = expected.iter().filter(|s| s.label == 1).count();
    let (n, pos, shifted) = file_positive_fraction(&ctx.split_path("test")).unwrap();
    // Rerunning the stage must also pass its own purity assertion.
    let forced = Context::new(ExperimentConfig::default(), dir.to_path_buf(), true);
    let rerun = cmd_prepare(&forced);
    let pass = n == expected.len() && pos == exp_pos && shifted == 0 && rerun.is_ok();
    Verdict {
        name: "test-set purity",
        pass,
        detail: format!(
            "test file {pos}/{n} positive ({:.4}%), enumeration {exp_pos}/{} ({:.4}%), {shifted} shifted samples; prepare assertion {}",
            100.0 * pos as f64 / n.max(1) as f64,
            expected.len(),
            100.0 * exp_pos as f64 / expected.len().max(1) as f64,
            if rerun.is_ok() { "held" } else { "failed" }
        ),
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{x:.3}"))
}

#[test]
fn acceptance() {
    let mut verdicts = Vec::new();
    for check in [gradient_fidelity, metric_oracles, pipeline_oracles, shape_contract] {
        let v = check();
        report(&v);
        verdicts.push(v);
    }

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut purity = None;
    for seed in LEARNABILITY_SEEDS {
        let dir = tempfile::tempdir().unwrap();
        match full_run(seed, dir.path()) {
            Ok(r) => {
                let line = format!(
                    "acceptance: run seed {}: csi {} vs persistence {}, auc {}, {:.0}s\n",
                    r.seed,
                    fmt(r.model_csi),
                    fmt(r.persistence_csi),
                    fmt(r.auc),
                    r.elapsed.as_secs_f64()
                );
                std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
                runs.push(r);
            }
            Err(e) => failures.push(e),
        }
        if seed == LEARNABILITY_SEEDS[0] {
            let v = test_purity(dir.path());
            report(&v);
            purity = Some(v);
        }
    }
    let wins = runs
        .iter()
        .filter(|r| match (r.model_csi, r.persistence_csi, r.auc) {
            (Some(m), p, Some(a)) => m >= p.unwrap_or(0.0) + 0.05 && a >= 0.80,
            _ => false,
        })
        .count();
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let learn = Verdict {
        name: "learnability",
        pass: wins >= 4 && slowest < RUN_BUDGET && failures.is_empty(),
        detail: format!(
            "{wins} of {} seeds beat persistence CSI by >= 0.05 with AUC >= 0.80; slowest full run {:.0}s{}",
            LEARNABILITY_SEEDS.len(),
            slowest.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; errors: {failures:?}") }
        ),
    };
    report(&learn);
    verdicts.push(learn);
    verdicts.extend(purity);

    let dir = tempfile::tempdir().unwrap();
    let determinism = match (full_run(LEARNABILITY_SEEDS[0], dir.path()), runs.first()) {
        (Ok(again), Some(first)) if first.seed == LEARNABILITY_SEEDS[0] => {
            let differing: Vec<&String> = first
                .artifacts
                .keys()
                .chain(again.artifacts.keys())
                .filter(|k| first.artifacts.get(*k) != again.artifacts.get(*k))
                .collect();
            Verdict {
                name: "determinism",
                pass: differing.is_empty() && first.artifacts.len() > 3,
                detail: format!(
                    "{} artifacts (model, training log, metric CSVs) compared byte for byte; differing: {differing:?}",
                    first.artifacts.len()
                ),
            }
        }
        (Err(e), _) => Verdict {
            name: "determinism",
            pass: false,
            detail: e,
        },
        _ => Verdict {
            name: "determinism",
            pass: false,
            detail: "first seed run did not complete".into(),
        },
    };
    report(&determinism);
    verdicts.push(determinism);

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.name).collect();
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
