//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line to
//! the real stdout, then fails the test if the criterion failed.

mod common;
#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use oracles::assignment::{brute_force_assignment, column_sum};
use oracles::attention::{
    cross_instance, deform_instance, max_diff, naive_cross, naive_deform, random, run_cross, run_deform,
};
use oracles::evaluation::{brute_force_report, random_scenario};
use pdtr_core::backbone::{dcft_attention_parts, AttnPlan, DcftConfig};
use pdtr_core::eval::{ap_interpolated, report, Detection, EvalConfig, GroundTruthBox};
use pdtr_core::matching::hungarian_match;
use pdtr_core::model::{DenoiseNoise, Detector, ModelConfig, Targets};
use pdtr_core::{Graph, ParamStore, SeededRng, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn criterion(n: u32, title: &str, body: impl FnOnce() -> Outcome) {
    let res = body();
    let line = match &res {
        Ok(d) => format!("criterion {n}: PASS {title} ({d})\n"),
        Err(e) => format!("criterion {n}: FAIL {title} ({e})\n"),
    };
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    if let Err(e) = res {
        panic!("criterion {n} failed: {e}");
    }
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn criterion_1_gradient_fidelity() {
    criterion(1, "gradient fidelity", || {
        let tmp = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let o = pdtr(tmp.path(), &["gradcheck", "--seed", "0"]);
        let took = t.elapsed();
        ensure!(code(&o) == 0, "exit {}: {}", code(&o), stdout(&o));
        let table = stdout(&o);
        let rows: Vec<&str> = table.lines().skip(1).collect();
        ensure!(
            rows.len() == 5 && rows.iter().all(|r| r.ends_with("pass")),
            "table:\n{table}"
        );
        let worst = rows
            .iter()
            .map(|r| r.split_whitespace().nth(1).unwrap().parse::<f64>().unwrap())
            .fold(0.0, f64::max);
        ensure!(worst < 1e-4, "max relative error {worst:e}");
        ensure!(took < Duration::from_secs(60), "took {took:?}");
        let o = pdtr(tmp.path(), &["gradcheck", "--corrupt-backward"]);
        ensure!(code(&o) == 4, "corrupted backward exited {}", code(&o));
        Ok(format!(
            "5 modules, max rel err {worst:.2e}, {:.1} s",
            took.as_secs_f64()
        ))
    });
}

#[test]
fn criterion_2_attention_matches_naive_loops() {
    criterion(2, "attention oracles", || {
        let mut worst = 0.0f64;
        for seed in 0..24 {
            let inst = deform_instance(seed);
            let (g, out, _) = run_deform(&inst);
            let d = max_diff(g.value(out), &naive_deform(&inst));
            ensure!(d < 1e-10, "deformable seed {seed}: {d:e}");
            worst = worst.max(d);
            let inst = cross_instance(seed);
            let (g, out, attn) = run_cross(&inst);
            let (o, a) = naive_cross(&inst, true);
            let d = max_diff(g.value(out), &o).max(max_diff(g.value(attn), &a));
            ensure!(d < 1e-10, "cross seed {seed}: {d:e}");
            worst = worst.max(d);
        }
        Ok(format!("24 instances each, max diff {worst:.2e}"))
    });
}

fn column_bounds(vals: &Tensor<f64>, rows: impl Iterator<Item = usize> + Clone, ch: usize) -> (f64, f64) {
    let lo = rows.clone().map(|r| vals.row(r)[ch]).fold(f64::INFINITY, f64::min);
    let hi = rows.map(|r| vals.row(r)[ch]).fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn distribution(slice: &[f64]) -> bool {
    slice.iter().all(|&a| a >= 0.0) && (slice.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

#[test]
fn criterion_3_normalization_invariants() {
    criterion(3, "normalization invariants", || {
        let mut slices = 0usize;
        for seed in 0..40 {
            let mut rng = SeededRng::new(seed);
            let cfg = DcftConfig {
                window: 2 + rng.below(2),
                pool_sizes: vec![1, 2, 3],
                region_sizes: vec![3, 2 + rng.below(2), 2],
                ..DcftConfig::desk()
            };
            let (h, w) = (3 + rng.below(5), 3 + rng.below(5));
            let heads = 1 + rng.below(2);
            let c = 2 * heads;
            let plan = AttnPlan::new(&cfg, h, w);
            let rows: usize = plan.pooled.iter().map(|(a, b)| a * b).sum();
            let table = (2 * cfg.window - 1).pow(2) + cfg.region_sizes[1..].iter().map(|n| n * n).sum::<usize>();
            let mut g = Graph::new();
            let q = g.input(random(&mut rng, &[h * w, c], 2.0));
            let k = g.input(random(&mut rng, &[rows, c], 2.0));
            let v = g.input(random(&mut rng, &[rows, c], 1.0));
            let bias = g.input(random(&mut rng, &[table, heads], 1.0));
            let parts = dcft_attention_parts(&mut g, q, k, v, bias, &plan, heads).map_err(|e| e.to_string())?;
            let n = plan.n_keys;
            for s in g.value(parts.weights).data().chunks(n) {
                ensure!(distribution(s), "dcft seed {seed}: weights {s:?}");
                slices += 1;
            }
            let (o, vals) = (g.value(parts.out), g.value(v));
            for t in 0..o.rows() {
                let keys: Vec<usize> = plan.key_rows[t * n..(t + 1) * n].iter().flatten().copied().collect();
                for ch in 0..c {
                    let (lo, hi) = column_bounds(vals, keys.iter().copied(), ch);
                    let x = o.row(t)[ch];
                    ensure!(
                        x >= lo - 1e-12 && x <= hi + 1e-12,
                        "dcft seed {seed} token {t} channel {ch}"
                    );
                }
            }

            let inst = deform_instance(seed);
            let (g, _, weights) = run_deform(&inst);
            for s in g.value(weights).data().chunks(inst.cfg.levels * inst.cfg.points) {
                ensure!(distribution(s), "deformable seed {seed}: weights {s:?}");
                slices += 1;
            }

            let inst = cross_instance(seed);
            let (g, out, attn) = run_cross(&inst);
            let a = g.value(attn);
            for r in 0..a.rows() {
                ensure!(distribution(a.row(r)), "cross seed {seed} row {r}");
                slices += 1;
            }
            let (o, f) = (g.value(out), &inst.features);
            for ch in 0..inst.d {
                let (lo, hi) = column_bounds(f, 0..f.rows(), ch);
                for r in 0..o.rows() {
                    ensure!(
                        o.row(r)[ch] >= lo - 1e-12 && o.row(r)[ch] <= hi + 1e-12,
                        "cross seed {seed} row {r}"
                    );
                }
            }
        }
        Ok(format!("{slices} softmax slices over 40 seeds"))
    });
}

#[test]
fn criterion_4_assignment_optimality() {
    criterion(4, "assignment optimality", || {
        let mut rng = SeededRng::new(2024);
        for trial in 0..100 {
            let cost: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.range(0.0, 10.0)).collect()).collect();
            let a = hungarian_match(&cost).map_err(|e| e.to_string())?;
            let mut rows = vec![usize::MAX; 6];
            for &(p, t) in &a.pairs {
                rows[t] = p;
            }
            let (best, best_rows) = brute_force_assignment(&cost);
            ensure!(
                column_sum(&cost, &rows) == best,
                "trial {trial}: {} vs {best}",
                column_sum(&cost, &rows)
            );
            ensure!(rows == best_rows, "trial {trial}: {rows:?} vs {best_rows:?}");
        }
        Ok("100 random 6x6 instances equal the permutation minimum".into())
    });
}

#[test]
fn criterion_5_metric_exactness() {
    criterion(5, "metric exactness", || {
        let mut worst = 0.0f64;
        for seed in 0..60 {
            let (dets, gts, cfg) = random_scenario(seed);
            let r = report(&dets, &gts, &cfg).map_err(|e| e.to_string())?;
            let o = brute_force_report(&dets, &gts, &cfg);
            for (k, a, b) in [
                ("mAP", r.map, o.map),
                ("mAP50", r.map50, o.map50),
                ("mAP75", r.map75, o.map75),
                ("mAP_S", r.map_small, o.map_small),
                ("mAP_M", r.map_medium, o.map_medium),
                ("mAR100", r.mar100, o.mar100),
            ] {
                ensure!((a - b).abs() <= 1e-9, "scenario {seed} {k}: {a} vs {b}");
                worst = worst.max((a - b).abs());
            }
        }
        let hand = ap_interpolated(&[(0.5, 1.0), (1.0, 0.5)]);
        ensure!(hand == 0.75, "two-point curve gives {hand}");
        let cfg = EvalConfig {
            iou_thresholds: vec![0.5],
            num_classes: 2,
            ..EvalConfig::default()
        };
        let (b1, b2) = ([0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]);
        let gt = |class_id, bbox| GroundTruthBox {
            image_id: 0,
            class_id,
            bbox,
        };
        let det = |class_id, bbox, confidence| Detection {
            image_id: 0,
            class_id,
            bbox,
            confidence,
        };
        let gts = [gt(0, b1), gt(1, b1), gt(1, b2)];
        let dets = [
            det(0, b1, 0.9),
            det(1, b1, 0.8),
            det(1, [50.0, 50.0, 60.0, 60.0], 0.7),
            det(1, b2, 0.6),
        ];
        let r = report(&dets, &gts, &cfg).map_err(|e| e.to_string())?;
        let aps: Vec<f64> = r.class_ap.iter().map(|c| c[0].unwrap()).collect();
        ensure!(r.map == (aps[0] + aps[1]) / 2.0, "mAP {} from class APs {aps:?}", r.map);
        Ok(format!("60 scenarios, max diff {worst:.1e}; hand cases exact"))
    });
}

fn bench_formula(table: &str, prefix: &str) -> Result<(u64, Option<f64>), String> {
    let row = table
        .lines()
        .find(|l| l.starts_with(prefix))
        .ok_or(format!("no row {prefix}"))?;
    let cols: Vec<&str> = row.split_whitespace().collect();
    let n = cols.len();
    let formula = cols[n - 3].parse().map_err(|_| format!("bad row {row}"))?;
    Ok((formula, cols[n - 1].parse().ok()))
}

#[test]
fn criterion_6_complexity_accounting() {
    criterion(6, "complexity accounting", || {
        let tmp = tempfile::tempdir().unwrap();
        let o = pdtr(tmp.path(), &["bench"]);
        ensure!(code(&o) == 0, "bench exited {}", code(&o));
        let table = stdout(&o);
        let (reference, _) = bench_formula(&table, "reference dcft")?;
        let (ref_swin, _) = bench_formula(&table, "reference swin")?;
        let (desk, ratio) = bench_formula(&table, "configured dcft")?;
        let (desk_swin, _) = bench_formula(&table, "configured swin")?;
        let ratio = ratio.ok_or("no counted MACs for the configured backbone")?;
        let mut failures = Vec::new();
        if reference != 26_486_784 {
            failures.push(format!(
                "56x56x96 n=[1,3,5,7] formula gives {reference}, expected 26486784"
            ));
        }
        if !(1.0..=2.0).contains(&ratio) {
            failures.push(format!("counted/formula ratio {ratio}"));
        }
        if reference >= ref_swin || desk >= desk_swin {
            failures.push(format!("dcft {reference}/{desk} not below swin {ref_swin}/{desk_swin}"));
        }
        ensure!(failures.is_empty(), "{}", failures.join("; "));
        Ok(format!("formula {reference}, counted ratio {ratio}, swin {ref_swin}"))
    });
}

const OVERFIT_CONFIG: &str = r#"{
  "train": {"epochs": 150, "batch_size": 4, "augment_prob": 0.0, "lr_drop_epoch": 150, "optimizer": {"lr": 5e-4}}
}
"#;

fn train_run(dir: &Path, out: &str, extra: &[&str]) -> Result<(f64, f64, usize, Duration), String> {
    let mut args = vec![
        "train",
        "--config",
        "overfit.json",
        "--data",
        "data",
        "--seed",
        "0",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    let t = Instant::now();
    let o = pdtr(dir, &args);
    let took = t.elapsed();
    ensure!(code(&o) == 0, "{out} exited {}: {}", code(&o), stderr(&o));
    let text = fs::read_to_string(dir.join(out).join("train_report.txt")).map_err(|e| e.to_string())?;
    let get = |k| report_value(&text, k).ok_or(format!("{out}: no {k}"));
    Ok((get("mAP50")?, get("final_loss")?, get("steps")? as usize, took))
}

#[test]
fn criterion_7_overfit_and_ablation_parity() {
    criterion(7, "overfit and ablation parity", || {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        write(d, "overfit.json", OVERFIT_CONFIG);
        let o = pdtr(d, &["synth", "--count", "8", "--seed", "7", "--out", "data"]);
        ensure!(code(&o) == 0, "synth exited {}", code(&o));
        let (map50, full_loss, steps, took) = train_run(d, "full", &[])?;
        let (_, static_loss, _, _) = train_run(d, "static", &["--use-qse=false"])?;
        let (_, unshared_loss, _, _) = train_run(d, "unshared", &["--use-qsh=false"])?;
        let (_, plain_loss, _, _) = train_run(d, "plain", &["--backbone", "plain"])?;
        // the configuration without query selection and query sharing
        let (_, bare_loss, _, _) = train_run(d, "bare", &["--use-qse=false", "--use-qsh=false"])?;
        let summary = format!(
            "mAP50 {map50:.3} in {steps} steps, {:.0} s; final loss full {full_loss}, no qse {static_loss}, \
             no qsh {unshared_loss}, plain backbone {plain_loss}, no qse+qsh {bare_loss}",
            took.as_secs_f64()
        );
        let mut failures = Vec::new();
        if map50 < 0.9 {
            failures.push(format!("training mAP50 {map50}"));
        }
        if steps > 2000 {
            failures.push(format!("{steps} steps"));
        }
        if took >= Duration::from_secs(30 * 60) {
            failures.push(format!("took {took:?}"));
        }
        if full_loss > bare_loss {
            failures.push(format!("full final loss {full_loss} above {bare_loss} without qse+qsh"));
        }
        ensure!(failures.is_empty(), "{}; {summary}", failures.join("; "));
        Ok(summary)
    });
}

fn cross_gradient() -> Outcome {
    let mut cfg = ModelConfig::desk();
    cfg.backbone.c1 = 8;
    cfg.backbone.heads = [1, 1, 2, 2];
    cfg.neck.dim = 16;
    cfg.neck.ffn_dim = 16;
    cfg.neck.layers = 1;
    cfg.head.dim = 16;
    cfg.head.ffn_dim = 16;
    cfg.head.num_queries = 5;
    cfg.head.layers = 2;
    cfg.head.dn_groups = 3;
    let (m, mut store): (_, ParamStore<f64>) = Detector::new(&cfg, 3).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(4);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.range(-0.1, 0.1);
        }
    }
    let img = Tensor::new([64, 64], (0..4096).map(|_| rng.uniform()).collect()).unwrap();
    let t = Targets {
        boxes: vec![[0.3, 0.4, 0.2, 0.1], [0.7, 0.6, 0.1, 0.3]],
        labels: vec![1, 3],
    };
    let mut g = Graph::new();
    let mut noise_rng = SeededRng::new(11);
    let out = m
        .forward(
            &mut g,
            &store,
            &img,
            Some((&t, DenoiseNoise::default(), &mut noise_rng)),
        )
        .map_err(|e| e.to_string())?;
    let k = cfg.head.num_queries;
    let n = g.value(out.queries.content).rows();
    let matching: Vec<usize> = (0..k).collect();
    let mut terms = Vec::new();
    for &node in out.head.boxes.iter().chain(&out.head.logits) {
        let s = g.select_rows(node, &matching).unwrap();
        let shape = g.shape(s).to_vec();
        let numel: usize = shape.iter().product();
        let w = g.constant(Tensor::new(shape, (0..numel).map(|_| rng.normal()).collect()).unwrap());
        let p = g.mul(s, w).unwrap();
        terms.push(g.sum(p));
    }
    let loss = g.add_all(&terms).unwrap();
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let c = g.value(out.queries.content).last_dim();
    let gc = grads
        .get(out.queries.content)
        .ok_or("no gradient reaches the queries")?;
    ensure!(
        gc[..k * c].iter().any(|&v| v != 0.0),
        "matching queries receive no gradient"
    );
    let leaked = gc[k * c..n * c].iter().filter(|&&v| v != 0.0).count();
    ensure!(leaked == 0, "{leaked} denoising query entries receive gradient");
    Ok(format!("{} denoising query rows isolated", n - k))
}

#[test]
fn criterion_8_isolation_and_determinism() {
    criterion(8, "isolation and determinism", || {
        let iso = cross_gradient()?;
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        write(d, "tiny.json", TINY_CONFIG);
        let o = pdtr(d, &["synth", "--count", "4", "--seed", "3", "--out", "data"]);
        ensure!(code(&o) == 0, "synth exited {}", code(&o));
        pdtr(
            d,
            &["train", "--config", "tiny.json", "--data", "data", "--out", "model"],
        );
        let runs: [&[&str]; 5] = [
            &["synth", "--count", "4", "--seed", "3"],
            &["train", "--config", "../tiny.json", "--data", "../data", "--seed", "5"],
            &[
                "eval",
                "--config",
                "../tiny.json",
                "--data",
                "../data",
                "--checkpoint",
                "../model/final.pdtr",
            ],
            &["gradcheck"],
            &["bench"],
        ];
        for rep in ["a", "b"] {
            fs::create_dir(d.join(rep)).unwrap();
        }
        for args in runs {
            let mut seen = Vec::new();
            for rep in ["a", "b"] {
                let cwd = d.join(rep);
                let mut full = args.to_vec();
                full.extend(["--out", args[0]]);
                let o = pdtr(&cwd, &full);
                ensure!(code(&o) == 0, "{} exited {}: {}", args[0], code(&o), stderr(&o));
                let files = if cwd.join(args[0]).exists() {
                    tree(&cwd.join(args[0]))
                } else {
                    Vec::new()
                };
                seen.push((o.stdout, files));
            }
            ensure!(seen[0] == seen[1], "{} differs between runs", args[0]);
        }
        Ok(format!("{iso}; synth, train, eval, gradcheck and bench byte-identical"))
    });
}
