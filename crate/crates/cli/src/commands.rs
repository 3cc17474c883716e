use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pdtr_core::backbone::{complexity_count, instrumented_attention_macs, swin_complexity, vit_complexity, DcftConfig};
use pdtr_core::checkpoint::{load_checkpoint, save_checkpoint};
use pdtr_core::data::dataset::{detections_to_json, encode_pgm, load_dataset, parse_detections, save_dataset};
use pdtr_core::data::synth::synth_dataset;
use pdtr_core::data::{Sample, CLASS_NAMES};
use pdtr_core::eval::{report, Detection};
use pdtr_core::gradcheck::{self, GradCheckConfig};
use pdtr_core::model::Detector;
use pdtr_core::train::{evaluate_model, ground_truth, predict, train as run_training, LOG_HEADER};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::render::overlay;

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.pdtr";
pub const BEST_CHECKPOINT: &str = "best.pdtr";
pub const TRAIN_REPORT: &str = "train_report.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const CURVES_FILE: &str = "pr_curves.csv";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const VIS_DIR: &str = "vis";

fn dataset_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.data.dataset.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --data DIR or set data.dataset".into()))
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>, CliError> {
    let samples = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(pdtr_core::Error::Input(format!("dataset {} has no images", dir.display())).into());
    }
    Ok(samples)
}

pub fn synth(cfg: &RunConfig, out: &Path, count: usize, w: &mut dyn Write) -> Result<(), CliError> {
    let samples = synth_dataset(&cfg.data.synth, count, cfg.seed)?;
    save_dataset(out, &samples)?;
    let mut per_class = [0usize; 4];
    for s in &samples {
        for a in &s.record.annotations {
            per_class[a.class_id] += 1;
        }
    }
    writeln!(w, "wrote {} images to {}", samples.len(), out.display())?;
    for (name, n) in CLASS_NAMES.iter().zip(per_class) {
        writeln!(w, "{name:<8} {n}")?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, data: Option<PathBuf>, out: &Path, w: &mut dyn Write) -> Result<(), CliError> {
    let samples = load_samples(&dataset_dir(cfg, data)?)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let (model, mut store) = Detector::new::<f32>(&cfg.model, cfg.seed)?;
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    writeln!(w, "{LOG_HEADER}")?;
    let outcome = run_training(&model, &mut store, &samples, &cfg.train, cfg.seed, |e| {
        let row = e.csv_row();
        let _ = writeln!(w, "{row}");
        log.push_str(&row);
        log.push('\n');
    });
    fs::write(out.join(LOG_FILE), &log)?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            fs::write(out.join("failure.txt"), format!("{e}\n"))?;
            return Err(e.into());
        }
    };
    save_checkpoint(&store, &out.join(FINAL_CHECKPOINT))?;
    save_checkpoint(&outcome.best, &out.join(BEST_CHECKPOINT))?;
    let (_, r) = evaluate_model(&model, &store, &samples, &cfg.eval)?;
    let mut summary = format!("steps = {}\nbest_epoch = {}\n", outcome.steps, outcome.best_epoch);
    if let Some(last) = outcome.log.last() {
        let _ = writeln!(summary, "final_loss = {:.6}", last.total);
    }
    summary.push_str(&r.to_text(&cfg.eval));
    fs::write(out.join(TRAIN_REPORT), &summary)?;
    writeln!(w, "training set: mAP50 = {:.4}  mAP = {:.4}", r.map50, r.map)?;
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    detections: Option<PathBuf>,
    out: &Path,
    w: &mut dyn Write,
) -> Result<(), CliError> {
    let samples = load_samples(&dataset_dir(cfg, data)?)?;
    let dets: Vec<Detection> = match detections {
        Some(p) => parse_detections(&fs::read_to_string(&p)?)?,
        None => {
            let ck = checkpoint
                .or_else(|| cfg.data.checkpoint.clone())
                .ok_or_else(|| CliError::Usage("no model: pass --checkpoint PATH or --detections FILE".into()))?;
            let (model, mut store) = Detector::new::<f32>(&cfg.model, cfg.seed)?;
            load_checkpoint(&mut store, &ck)?;
            predict(&model, &store, &samples, cfg.eval.max_detections)?
        }
    };
    let gts = ground_truth(&samples);
    let r = report(&dets, &gts, &cfg.eval)?;
    fs::create_dir_all(out.join(VIS_DIR))?;
    let text = r.to_text(&cfg.eval);
    fs::write(out.join(REPORT_FILE), &text)?;
    fs::write(out.join(CURVES_FILE), r.curves_csv())?;
    fs::write(out.join(DETECTIONS_FILE), detections_to_json(&dets))?;
    for s in &samples {
        let id = s.record.id;
        let mine_g: Vec<_> = gts.iter().filter(|g| g.image_id == id).copied().collect();
        let mine_d: Vec<_> = dets.iter().filter(|d| d.image_id == id).copied().collect();
        let img = overlay(&s.image, &mine_g, &mine_d, cfg.data.vis_threshold);
        fs::write(out.join(VIS_DIR).join(format!("{id:05}.pgm")), encode_pgm(&img))?;
    }
    write!(w, "{text}")?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, corrupt: bool, out: Option<&Path>, w: &mut dyn Write) -> Result<(), CliError> {
    let gc = GradCheckConfig {
        seeds: (cfg.seed..cfg.seed + 5).collect(),
        corrupt_backward: corrupt,
        ..GradCheckConfig::default()
    };
    let rep = gradcheck::run(&gc)?;
    let table = rep.to_table();
    write!(w, "{table}")?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.txt"), &table)?;
    }
    if !rep.passed() {
        let failed: Vec<&str> = rep
            .rows
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.module.as_str())
            .collect();
        return Err(CliError::Verification(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

/// One line of the complexity table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub shape: (usize, usize, usize),
    pub formula: u64,
    pub instrumented: Option<u64>,
}

impl BenchRow {
    pub fn ratio(&self) -> Option<f64> {
        self.instrumented.map(|m| m as f64 / self.formula as f64)
    }
}

/// Formula counts of the DCFT, windowed and global attention, for the
/// reference 56×56×96 stage-one shape and for the configured backbone's
/// first stage, with the counted score/value products of the DCFT rows.
pub fn bench_rows(cfg: &RunConfig) -> Result<Vec<BenchRow>, CliError> {
    let mut rows = Vec::new();
    let wide = DcftConfig::reference();
    let desk = &cfg.model.backbone;
    let (dh, dw) = (
        cfg.data.synth.height.div_ceil(desk.patch_size),
        cfg.data.synth.width.div_ceil(desk.patch_size),
    );
    for (tag, bc, (h, w)) in [("reference", &wide, (56, 56)), ("configured", desk, (dh, dw))] {
        let c = bc.c1;
        let heads = bc.heads[0];
        let pools: Vec<String> = bc.pool_sizes.iter().map(|p| p.to_string()).collect();
        rows.push(BenchRow {
            name: format!("{tag} dcft n=[{}]", pools.join(",")),
            shape: (h, w, c),
            formula: complexity_count(&bc.pool_sizes, h, w, c),
            instrumented: Some(instrumented_attention_macs(bc, h, w, c, heads)?),
        });
        rows.push(BenchRow {
            name: format!("{tag} swin n_wp={}", bc.window),
            shape: (h, w, c),
            formula: swin_complexity(bc.window, h, w, c),
            instrumented: None,
        });
        rows.push(BenchRow {
            name: format!("{tag} vit"),
            shape: (h, w, c),
            formula: vit_complexity(h, w, c),
            instrumented: None,
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<32} {:>12} {:>16} {:>16} {:>8}\n",
        "attention", "HxWxc", "formula_macs", "counted_macs", "ratio"
    );
    for r in rows {
        let (h, w, c) = r.shape;
        let _ = writeln!(
            s,
            "{:<32} {:>12} {:>16} {:>16} {:>8}",
            r.name,
            format!("{h}x{w}x{c}"),
            r.formula,
            r.instrumented.map_or("-".into(), |m| m.to_string()),
            r.ratio().map_or("-".into(), |x| format!("{x:.3}")),
        );
    }
    s
}

pub fn bench(cfg: &RunConfig, out: Option<&Path>, w: &mut dyn Write) -> Result<(), CliError> {
    let table = bench_table(&bench_rows(cfg)?);
    write!(w, "{table}")?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.txt"), &table)?;
    }
    Ok(())
}
