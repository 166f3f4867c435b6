//! Acceptance gate: ten end-to-end criteria covering metrics, data
//! cleaning, both models, the broker, the service tiers, and the full
//! demo pipeline. Each criterion prints one PASS/FAIL line.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use nilm_bench::{LoadProfile, RequestTemplate};
use nilm_broker::{Broker, BrokerClient};
use nilm_core::datagen::{self, ApplianceProfile, ScenarioConfig};
use nilm_core::metrics::{accuracy, confusion, macro_average, precision_recall_f1, MetricsRow};
use nilm_core::preprocess::{self, window_stream, FEATURES};
use nilm_core::{ApplianceCatalog, CatalogEntry, LevelPower, PowerSample, WindowBatch};
use nilm_gbdt::{FeatureSchema, GbdtTrainParams, TreeNode};
use nilm_seq2point::{Architecture, S2PModel, S2PTrainConfig};
use nilm_services::{
    Balancer, BalancerConfig, CloudConfig, ResultRecord, ResultStore, TargetResult, Worker,
};

/// Heavy and timing-sensitive criteria run one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial_lock() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Shared-host scheduler stalls can poison a wall-clock measurement; a
/// timing criterion passes if any of a few attempts lands clean.
fn eventually(attempts: usize, body: impl Fn()) {
    for i in 1..attempts {
        if catch_unwind(AssertUnwindSafe(&body)).is_ok() {
            return;
        }
        println!("  attempt {i} failed on a loaded host; retrying");
    }
    body();
}

fn criterion(n: u32, name: &str, body: impl FnOnce() + std::panic::UnwindSafe) {
    let started = Instant::now();
    let result = catch_unwind(body);
    let verdict = if result.is_ok() { "PASS" } else { "FAIL" };
    println!(
        "criterion {n} ({name}): {verdict} in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

// ---------------------------------------------------------------- shared

fn two_appliance_scenario(samples: usize, seed: u64, dirty_fraction: f64) -> ScenarioConfig {
    let catalog = ApplianceCatalog::new(vec![
        CatalogEntry {
            appliance_id: "fridge".into(),
            display_name: "Refrigerator".into(),
            levels: vec![LevelPower {
                active_w: 120.0,
                reactive_var: 30.0,
            }],
        },
        CatalogEntry {
            appliance_id: "heater".into(),
            display_name: "Space heater".into(),
            levels: vec![LevelPower {
                active_w: 1500.0,
                reactive_var: 80.0,
            }],
        },
    ])
    .unwrap();
    ScenarioConfig {
        catalog,
        profiles: vec![
            ApplianceProfile {
                appliance_id: "fridge".into(),
                mean_on_s: 600.0,
                mean_off_s: 900.0,
                noise_sigma_w: 5.0,
            },
            ApplianceProfile {
                appliance_id: "heater".into(),
                mean_on_s: 300.0,
                mean_off_s: 600.0,
                noise_sigma_w: 10.0,
            },
        ],
        duration_s: samples as f64 * 2.0,
        sample_period_s: 2.0,
        seed,
        dirty_fraction,
    }
}

/// Windows plus the midpoint-sample truth for each target.
fn supervised(
    samples: &[PowerSample],
    window_len: usize,
) -> (Vec<WindowBatch>, Vec<String>, Vec<Vec<bool>>) {
    let windows = window_stream(samples, window_len, 1, "h").unwrap();
    let mid = (window_len - 1) / 2;
    let target_ids: Vec<String> = samples[mid]
        .labels
        .as_ref()
        .unwrap()
        .states()
        .iter()
        .map(|(id, _)| id.clone())
        .collect();
    let labels: Vec<Vec<bool>> = (0..windows.len())
        .map(|i| {
            let states = samples[i + mid].labels.as_ref().unwrap();
            target_ids
                .iter()
                .map(|id| states.get(id).unwrap())
                .collect()
        })
        .collect();
    (windows, target_ids, labels)
}

fn macro_f1(target_ids: &[String], probs: &[Vec<f64>], truth: &[Vec<bool>], cutoff: f64) -> f64 {
    let rows: Vec<MetricsRow> = target_ids
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let pred: Vec<bool> = probs.iter().map(|r| r[j] > cutoff).collect();
            let t: Vec<bool> = truth.iter().map(|r| r[j]).collect();
            MetricsRow::from_counts(id.clone(), &confusion(&pred, &t).unwrap()).unwrap()
        })
        .collect();
    macro_average(&rows).unwrap().f1
}

fn tiny_arch() -> Architecture {
    Architecture {
        conv_channels: 4,
        kernel: 3,
        d_model: 8,
        heads: 2,
        head_dim: 4,
        ffn_hidden: 16,
        attn_depth: 1,
    }
}

// ------------------------------------------------------------ criterion 1

#[test]
fn acceptance_01_metrics_oracle() {
    criterion(1, "metrics oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=64);
            let pred: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let truth: Vec<bool> = (0..n).map(|_| rng.gen()).collect();

            // independent brute-force recomputation
            let mut tp = 0u64;
            let mut tn = 0u64;
            let mut fp = 0u64;
            let mut fnn = 0u64;
            for i in 0..n {
                if pred[i] && truth[i] {
                    tp += 1;
                } else if !pred[i] && !truth[i] {
                    tn += 1;
                } else if pred[i] {
                    fp += 1;
                } else {
                    fnn += 1;
                }
            }
            let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            let want_acc = div(tp + tn, tp + tn + fp + fnn);
            let want_prec = div(tp, tp + fp);
            let want_rec = div(tp, tp + fnn);
            let want_f1 = if want_prec + want_rec == 0.0 {
                0.0
            } else {
                2.0 * want_prec * want_rec / (want_prec + want_rec)
            };

            let c = confusion(&pred, &truth).unwrap();
            let (precision, recall, f1) = precision_recall_f1(&c);
            assert_eq!(accuracy(&c).unwrap(), want_acc);
            assert_eq!(precision, want_prec);
            assert_eq!(recall, want_rec);
            assert_eq!(f1, want_f1);
        }

        // macro-averaging the published per-appliance rows reproduces
        // the published average row to 4 decimals
        let published: [(&str, f64, f64, f64, f64); 11] = [
            ("heater_1", 0.9946, 0.9835, 0.9952, 0.9893),
            ("heater_2", 0.9942, 0.9693, 0.9879, 0.9781),
            ("air_purifier_A", 0.8136, 0.6914, 0.7084, 0.6773),
            ("air_purifier_B", 0.8454, 0.6933, 0.7275, 0.6974),
            ("fan_1", 0.8992, 0.6101, 0.5444, 0.5570),
            ("fan_2", 0.8255, 0.5589, 0.5085, 0.4548),
            ("fan_3", 0.9251, 0.6378, 0.7656, 0.6624),
            ("fan_4", 0.9181, 0.3870, 0.5426, 0.4425),
            ("light_bulb_1", 0.9795, 0.7833, 0.9557, 0.8363),
            ("light_bulb_2", 0.9873, 0.9156, 0.9206, 0.9097),
            ("air_compressor", 0.9993, 0.9649, 0.9512, 0.9506),
        ];
        let rows: Vec<MetricsRow> = published
            .iter()
            .map(|&(id, accuracy, recall, precision, f1)| MetricsRow {
                appliance: id.into(),
                accuracy,
                recall,
                precision,
                f1,
            })
            .collect();
        let avg = macro_average(&rows).unwrap();
        let round4 = |v: f64| format!("{v:.4}");
        assert_eq!(round4(avg.accuracy), "0.9256");
        assert_eq!(round4(avg.recall), "0.7450");
        assert_eq!(round4(avg.precision), "0.7825");
        assert_eq!(round4(avg.f1), "0.7414");
    });
}

// ------------------------------------------------------------ criterion 2

#[test]
fn acceptance_02_dirty_filter_exactness() {
    criterion(2, "dirty-data filter exactness", || {
        let n = 12_758usize;
        let cfg = two_appliance_scenario(n, 42, 0.0);
        let mut samples = datagen::generate_scenario(&cfg).unwrap();
        assert_eq!(samples.len(), n);
        let corrupted = datagen::inject_dirty(&mut samples, 230.0 / n as f64, 42).unwrap();
        assert_eq!(corrupted.len(), 230);
        let (clean, dropped) = preprocess::clean(&samples);
        assert_eq!(dropped, 230, "expected exactly 230 rejections");
        assert_eq!(clean.len(), 12_528, "expected exactly 12,528 clean rows");
    });
}

// ------------------------------------------------------------ criterion 3

fn gbdt_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Direct gain of one concrete split, recomputed from scratch.
fn split_gain(
    x: &[Vec<f64>],
    y: &[bool],
    params: &GbdtTrainParams,
    f: usize,
    t: f64,
) -> Option<f64> {
    let n = y.len();
    let rate = (y.iter().filter(|&&v| v).count() as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let p = gbdt_sigmoid((rate / (1.0 - rate)).ln());
    let g: Vec<f64> = y.iter().map(|&v| p - f64::from(u8::from(v))).collect();
    let h = vec![p * (1.0 - p); n];
    let all: Vec<usize> = (0..n).collect();
    let (left, right): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[i][f] < t);
    let hl: f64 = left.iter().map(|&i| h[i]).sum();
    let hr: f64 = right.iter().map(|&i| h[i]).sum();
    if hl < params.min_child_hessian || hr < params.min_child_hessian {
        return None;
    }
    let obj = |rows: &[usize]| -> f64 {
        let gs: f64 = rows.iter().map(|&i| g[i]).sum();
        let hs: f64 = rows.iter().map(|&i| h[i]).sum();
        gs * gs / (hs + params.lambda)
    };
    Some(0.5 * (obj(&left) + obj(&right) - obj(&all)) - params.gamma)
}

fn best_gain_brute_force(x: &[Vec<f64>], y: &[bool], params: &GbdtTrainParams) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        for pair in vals.windows(2) {
            let threshold = 0.5 * (pair[0] + pair[1]);
            if let Some(gain) = split_gain(x, y, params, f, threshold) {
                if gain > 0.0 && best.is_none_or(|bg| gain > bg) {
                    best = Some(gain);
                }
            }
        }
    }
    best
}

#[test]
fn acceptance_03_gbdt_correctness() {
    let _s = serial_lock();
    criterion(3, "gbdt correctness", || {
        // (a) root split matches brute-force enumeration on 100 random
        // datasets of <= 50 rows x 5 features
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = GbdtTrainParams {
            n_trees: 1,
            max_depth: 1,
            gamma: 0.01,
            ..Default::default()
        };
        let schema = FeatureSchema {
            window_len: 5,
            feature_dim: 1,
        };
        let width = schema.n_features();
        for case in 0..100 {
            let n = rng.gen_range(4..=50);
            let x: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let mut row: Vec<f64> = (0..5).map(|_| rng.gen_range(-10..10) as f64).collect();
                    row.extend(vec![0.0; width - 5]);
                    row
                })
                .collect();
            let y: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
                continue;
            }
            let model = nilm_gbdt::train(schema, &x, &[("t".into(), y.clone())], &params).unwrap();
            let best = best_gain_brute_force(&x, &y, &params);
            match (&model.targets[0].trees[0], best) {
                (TreeNode::Leaf { .. }, None) => {}
                (
                    TreeNode::Split {
                        feature, threshold, ..
                    },
                    Some(best_gain),
                ) => {
                    let chosen = split_gain(&x, &y, &params, *feature, *threshold)
                        .expect("chosen split violates the hessian constraint");
                    let tol = 1e-9 * best_gain.abs().max(1.0);
                    assert!(
                        (chosen - best_gain).abs() <= tol,
                        "case {case}: gain {chosen} is not the optimum {best_gain}"
                    );
                }
                (node, best) => panic!("case {case}: {node:?} vs brute-force {best:?}"),
            }
        }

        // (b) training loss non-increasing per boosting round
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let schema = FeatureSchema {
            window_len: 4,
            feature_dim: 1,
        };
        let width = schema.n_features();
        let x: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..width).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let y: Vec<bool> = x
            .iter()
            .map(|r| r[0] + 0.5 * r[1] + rng.gen_range(-1.0..1.0) > 0.0)
            .collect();
        let params = GbdtTrainParams {
            n_trees: 25,
            max_depth: 3,
            gamma: 0.0,
            ..Default::default()
        };
        let model = nilm_gbdt::train(schema, &x, &[("t".into(), y.clone())], &params).unwrap();
        let target = &model.targets[0];
        let staged_loss = |k: usize| -> f64 {
            let mut total = 0.0;
            for (row, &label) in x.iter().zip(&y) {
                let mut z = target.base_score;
                for tree in &target.trees[..k] {
                    z += model.learning_rate * tree.predict(row);
                }
                let p = gbdt_sigmoid(z).clamp(1e-12, 1.0 - 1e-12);
                total -= if label { p.ln() } else { (1.0 - p).ln() };
            }
            total / x.len() as f64
        };
        let losses: Vec<f64> = (0..=target.trees.len()).map(staged_loss).collect();
        for w in losses.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "training loss increased: {} -> {}",
                w[0],
                w[1]
            );
        }

        // (c) separable toy scenario reaches held-out F1 >= 0.95; short
        // dwell times so both appliances cycle often in train and test
        let mut cfg = two_appliance_scenario(1800, 7, 0.0);
        cfg.profiles[0].mean_on_s = 120.0;
        cfg.profiles[0].mean_off_s = 180.0;
        cfg.profiles[1].mean_on_s = 90.0;
        cfg.profiles[1].mean_off_s = 150.0;
        let samples = datagen::generate_scenario(&cfg).unwrap();
        let cut = samples.len() * 8 / 10;
        let window_len = 9;
        let (train_w, ids, train_y) = supervised(&samples[..cut], window_len);
        let (test_w, _, test_y) = supervised(&samples[cut..], window_len);
        let schema = FeatureSchema {
            window_len,
            feature_dim: FEATURES,
        };
        let feats: Vec<Vec<f64>> = train_w
            .iter()
            .map(nilm_gbdt::features::window_features)
            .collect();
        let targets: Vec<(String, Vec<bool>)> = ids
            .iter()
            .enumerate()
            .map(|(j, id)| (id.clone(), train_y.iter().map(|r| r[j]).collect()))
            .collect();
        let model =
            nilm_gbdt::train(schema, &feats, &targets, &GbdtTrainParams::default()).unwrap();
        let probs: Vec<Vec<f64>> = test_w
            .iter()
            .map(|w| model.predict_proba(w).unwrap())
            .collect();
        let f1 = macro_f1(&ids, &probs, &test_y, 0.5);
        assert!(f1 >= 0.95, "held-out F1 {f1} below 0.95");
    });
}

// ------------------------------------------------------------ criterion 4

#[test]
fn acceptance_04_seq2point_numerics() {
    let _s = serial_lock();
    criterion(4, "seq2point numerics", || {
        let window_len = 7;
        let mut model = S2PModel::new(
            window_len,
            FEATURES,
            vec!["a".into(), "b".into()],
            tiny_arch(),
            4,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        // jitter every parameter, biases included: a zero bias can leave a
        // relu pre-activation exactly on its kink, where no step size makes
        // central differences agree with the one-sided analytic derivative
        for name in model.param_names() {
            let jittered: Vec<f64> = model
                .param(&name)
                .unwrap()
                .values
                .iter()
                .map(|v| v + rng.gen_range(0.02..0.05) * if rng.gen() { 1.0 } else { -1.0 })
                .collect();
            model.set_param_values(&name, jittered).unwrap();
        }
        let windows: Vec<WindowBatch> = (0..4)
            .map(|k| WindowBatch {
                values: (0..window_len * FEATURES)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
                window_len,
                feature_dim: FEATURES,
                start_ts_ms: k,
                end_ts_ms: k + window_len as i64 - 1,
                household_id: "h".into(),
            })
            .collect();
        let labels: Vec<Vec<f64>> = (0..windows.len())
            .map(|_| vec![f64::from(rng.gen::<bool>() as u8), 1.0])
            .collect();

        // (a) analytic gradients vs central differences, every scalar
        let (_, grads) = model.loss_and_grads(&windows, &labels).unwrap();
        let grads: HashMap<String, Vec<f64>> = grads.into_iter().collect();
        // small step keeps central differences clear of relu kinks while
        // f64 roundoff stays orders of magnitude below the tolerance
        let h = 1e-5;
        let mut checked = 0usize;
        for name in model.param_names() {
            let base = model.param(&name).unwrap().values.clone();
            let analytic = &grads[&name];
            for i in 0..base.len() {
                let mut probe = model.clone();
                let mut plus = base.clone();
                plus[i] += h;
                probe.set_param_values(&name, plus).unwrap();
                let up = probe.loss(&windows, &labels).unwrap();
                let mut minus = base.clone();
                minus[i] -= h;
                probe.set_param_values(&name, minus).unwrap();
                let down = probe.loss(&windows, &labels).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic[i].abs().max(1e-3);
                let rel = (numeric - analytic[i]).abs() / denom;
                assert!(
                    rel <= 1e-4,
                    "{name}[{i}]: analytic {} vs numeric {numeric} (rel {rel:.2e})",
                    analytic[i]
                );
                checked += 1;
            }
        }
        assert!(checked > 500, "only {checked} scalars checked");

        // (b) attention rows are normalized within 1e-6
        let mut graph = nilm_seq2point::Graph::new();
        let params = model.insert_params(&mut graph);
        let trace = model
            .forward_window(&mut graph, &params, &windows[0])
            .unwrap();
        assert!(!trace.attention_rows.is_empty());
        for &node in &trace.attention_rows {
            let (rows, cols) = graph.shape(node);
            let values = graph.values(node);
            for r in 0..rows {
                let sum: f64 = values[r * cols..(r + 1) * cols].iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "attention row sums to {sum}");
            }
        }

        // (c) training halves the epoch-0 NLL within 50 epochs
        let cfg = two_appliance_scenario(400, 5, 0.0);
        let samples = datagen::generate_scenario(&cfg).unwrap();
        let (train_w, ids, train_y) = supervised(&samples, window_len);
        let labels: Vec<Vec<f64>> = train_y
            .iter()
            .map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect())
            .collect();
        let mut trained = S2PModel::new(window_len, FEATURES, ids, tiny_arch(), 4).unwrap();
        // input scaling from the training windows
        let mut mean = [0.0; 2];
        let mut sq = [0.0; 2];
        let count = (train_w.len() * window_len) as f64;
        for w in &train_w {
            for t in 0..window_len {
                for j in 0..FEATURES {
                    mean[j] += w.at(t, j) / count;
                    sq[j] += w.at(t, j) * w.at(t, j) / count;
                }
            }
        }
        for j in 0..FEATURES {
            trained.norm_mean[j] = mean[j];
            trained.norm_std[j] = (sq[j] - mean[j] * mean[j]).max(0.0).sqrt();
        }
        let before = trained.loss(&train_w, &labels).unwrap();
        let cfg = S2PTrainConfig {
            epochs: 50,
            learning_rate: 3e-3,
            seed: 4,
            ..Default::default()
        };
        nilm_seq2point::train(&mut trained, &train_w, &labels, &cfg).unwrap();
        let after = trained.loss(&train_w, &labels).unwrap();
        assert!(
            after <= 0.5 * before,
            "NLL {before:.4} only reached {after:.4} after 50 epochs"
        );
    });
}

// ------------------------------------------------------------ criterion 5

#[test]
fn acceptance_05_model_ordering() {
    let _s = serial_lock();
    criterion(5, "model ordering on the ambiguous scenario", || {
        // two appliances with identical draw: only the dwell dynamics
        // (long runs vs rapid flicker) distinguish them
        let catalog = ApplianceCatalog::new(vec![
            CatalogEntry {
                appliance_id: "steady".into(),
                display_name: "Steady load".into(),
                levels: vec![LevelPower {
                    active_w: 100.0,
                    reactive_var: 20.0,
                }],
            },
            CatalogEntry {
                appliance_id: "flicker".into(),
                display_name: "Flickering load".into(),
                levels: vec![LevelPower {
                    active_w: 100.0,
                    reactive_var: 20.0,
                }],
            },
        ])
        .unwrap();
        let cfg = ScenarioConfig {
            catalog,
            profiles: vec![
                ApplianceProfile {
                    appliance_id: "steady".into(),
                    mean_on_s: 240.0,
                    mean_off_s: 240.0,
                    noise_sigma_w: 40.0,
                },
                ApplianceProfile {
                    appliance_id: "flicker".into(),
                    mean_on_s: 8.0,
                    mean_off_s: 8.0,
                    noise_sigma_w: 40.0,
                },
            ],
            duration_s: 3600.0,
            sample_period_s: 2.0,
            seed: 55,
            dirty_fraction: 0.0,
        };
        let samples = datagen::generate_scenario(&cfg).unwrap();
        let window_len = 15;
        let cut = samples.len() * 8 / 10;
        let (train_w, ids, train_y) = supervised(&samples[..cut], window_len);
        let (test_w, _, test_y) = supervised(&samples[cut..], window_len);

        // compact edge-budget tree model
        let schema = FeatureSchema {
            window_len,
            feature_dim: FEATURES,
        };
        let feats: Vec<Vec<f64>> = train_w
            .iter()
            .map(nilm_gbdt::features::window_features)
            .collect();
        let targets: Vec<(String, Vec<bool>)> = ids
            .iter()
            .enumerate()
            .map(|(j, id)| (id.clone(), train_y.iter().map(|r| r[j]).collect()))
            .collect();
        let edge_budget = GbdtTrainParams {
            n_trees: 5,
            max_depth: 2,
            ..Default::default()
        };
        let gbdt = nilm_gbdt::train(schema, &feats, &targets, &edge_budget).unwrap();
        let gbdt_probs: Vec<Vec<f64>> = test_w
            .iter()
            .map(|w| gbdt.predict_proba(w).unwrap())
            .collect();
        let gbdt_f1 = macro_f1(&ids, &gbdt_probs, &test_y, 0.5);

        let mut s2p = S2PModel::new(window_len, FEATURES, ids.clone(), tiny_arch(), 55).unwrap();
        let mut mean = [0.0; 2];
        let mut sq = [0.0; 2];
        let count = (train_w.len() * window_len) as f64;
        for w in &train_w {
            for t in 0..window_len {
                for j in 0..FEATURES {
                    mean[j] += w.at(t, j) / count;
                    sq[j] += w.at(t, j) * w.at(t, j) / count;
                }
            }
        }
        for j in 0..FEATURES {
            s2p.norm_mean[j] = mean[j];
            s2p.norm_std[j] = (sq[j] - mean[j] * mean[j]).max(0.0).sqrt();
        }
        let labels: Vec<Vec<f64>> = train_y
            .iter()
            .map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect())
            .collect();
        let train_cfg = S2PTrainConfig {
            epochs: 40,
            learning_rate: 3e-3,
            seed: 55,
            ..Default::default()
        };
        nilm_seq2point::train(&mut s2p, &train_w, &labels, &train_cfg).unwrap();
        let mut s2p_probs = Vec::with_capacity(test_w.len());
        for chunk in test_w.chunks(64) {
            s2p_probs.extend(s2p.forward(chunk).unwrap());
        }
        let s2p_f1 = macro_f1(&ids, &s2p_probs, &test_y, 0.5);

        assert!(
            s2p_f1 > gbdt_f1,
            "seq2point F1 {s2p_f1:.4} does not exceed gbdt F1 {gbdt_f1:.4}"
        );
        println!("  seq2point F1 {s2p_f1:.4} vs gbdt F1 {gbdt_f1:.4}");
    });
}

// ------------------------------------------------------------ criterion 6

#[test]
fn acceptance_06_broker_reliability() {
    let _s = serial_lock();
    criterion(6, "broker reliability", || {
        let broker = Broker::new(20_000);
        let addr = Broker::start(&broker, "127.0.0.1:0").unwrap().to_string();

        // 10,000 envelopes from 4 concurrent producers
        {
            let mut setup = BrokerClient::connect(&addr).unwrap();
            setup.declare("acc6", None).unwrap();
        }
        let total_published = 10_000usize;
        let producers: Vec<_> = (0..4)
            .map(|p| {
                let addr = addr.clone();
                thread::spawn(move || {
                    let mut client = BrokerClient::connect(&addr).unwrap();
                    for i in 0..total_published / 4 {
                        client.publish("acc6", &json!({"p": p, "i": i})).unwrap();
                    }
                })
            })
            .collect();

        // 2 concurrent consumers that die at random and reconnect
        let acked: Arc<Mutex<HashMap<(u64, u64), u64>>> = Arc::new(Mutex::new(HashMap::new()));
        let total_acked = Arc::new(AtomicUsize::new(0));
        let consumers: Vec<_> = (0..2)
            .map(|c| {
                let addr = addr.clone();
                let acked = Arc::clone(&acked);
                let total_acked = Arc::clone(&total_acked);
                thread::spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(600 + c);
                    while total_acked.load(Ordering::SeqCst) < total_published {
                        let client = match BrokerClient::connect(&addr) {
                            Ok(c) => c,
                            Err(_) => continue,
                        };
                        let mut sub = match client.subscribe("acc6", 64) {
                            Ok(s) => s,
                            Err(_) => continue,
                        };
                        let _ = sub.set_timeout(Some(Duration::from_millis(300)));
                        if rng.gen_bool(0.3) {
                            // kill: take deliveries, ack none, drop abruptly;
                            // everything unacked must be redelivered
                            for _ in 0..rng.gen_range(1..16) {
                                let _ = sub.next();
                            }
                            continue;
                        }
                        let quota = rng.gen_range(100..800);
                        let mut done = 0;
                        while done < quota && total_acked.load(Ordering::SeqCst) < total_published {
                            match sub.next() {
                                Ok(Some((tag, value))) => {
                                    let key = (
                                        value["p"].as_u64().unwrap(),
                                        value["i"].as_u64().unwrap(),
                                    );
                                    sub.ack(tag).unwrap();
                                    *acked.lock().unwrap().entry(key).or_insert(0) += 1;
                                    total_acked.fetch_add(1, Ordering::SeqCst);
                                    done += 1;
                                }
                                Ok(None) => {}
                                Err(_) => break,
                            }
                        }
                        // acks are fire-and-forget frames; give the broker a
                        // beat to drain them before the socket goes away, as
                        // an abrupt close can discard unread frames
                        thread::sleep(Duration::from_millis(300));
                    }
                })
            })
            .collect();

        for p in producers {
            p.join().unwrap();
        }
        let deadline = Instant::now() + Duration::from_secs(50);
        while total_acked.load(Ordering::SeqCst) < total_published && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(100));
        }
        for c in consumers {
            c.join().unwrap();
        }
        let acked = acked.lock().unwrap();
        assert_eq!(
            acked.values().sum::<u64>() as usize,
            total_published,
            "acked multiset size mismatch"
        );
        assert_eq!(
            acked.len(),
            total_published,
            "some messages acked more than once or lost"
        );
        assert!(acked.values().all(|&v| v == 1));

        // single-consumer FIFO on a separate queue
        let mut producer = BrokerClient::connect(&addr).unwrap();
        producer.declare("acc6fifo", None).unwrap();
        for i in 0..300 {
            producer.publish("acc6fifo", &json!({"i": i})).unwrap();
        }
        let client = BrokerClient::connect(&addr).unwrap();
        let mut sub = client.subscribe("acc6fifo", 32).unwrap();
        sub.set_timeout(Some(Duration::from_secs(2))).unwrap();
        let mut seen = Vec::new();
        while seen.len() < 300 {
            match sub.next().unwrap() {
                Some((tag, value)) => {
                    seen.push(value["i"].as_u64().unwrap());
                    sub.ack(tag).unwrap();
                }
                None => panic!("fifo consumer starved at {}", seen.len()),
            }
        }
        assert!(seen.windows(2).all(|w| w[0] < w[1]), "FIFO order violated");
        broker.stop();
    });
}

// -------------------------------------------------- criteria 7-9 helpers

fn worker_config(listen: &str, name: &str, max_connections: usize, delay_ms: u64) -> CloudConfig {
    CloudConfig {
        broker_addr: "127.0.0.1:1".into(),
        queue: "unused".into(),
        batch_threshold: 16,
        s2p_model_path: "unused.json".into(),
        persist_dir: "unused".into(),
        listen: listen.into(),
        consume: false,
        max_connections,
        synthetic_delay_ms: delay_ms,
        state_cutoff: 0.5,
        worker_name: name.into(),
    }
}

fn cloud_infer_body(window_len: usize) -> String {
    let window: Vec<[f64; 2]> = (0..window_len).map(|i| [100.0 + i as f64, 20.0]).collect();
    json!({"household_id": "house-1", "mode": "cloud-infer", "window": window}).to_string()
}

fn start_worker(
    model: &S2PModel,
    store: Arc<ResultStore>,
    max_connections: usize,
    delay_ms: u64,
    name: &str,
) -> Worker {
    let cfg = worker_config("127.0.0.1:0", name, max_connections, delay_ms);
    Worker::start_with(&cfg, Arc::new(Mutex::new(model.clone())), store).unwrap()
}

// ------------------------------------------------------------ criterion 7

#[test]
fn acceptance_07_edge_vs_cloud_latency() {
    let _s = serial_lock();
    criterion(7, "edge-vs-cloud latency ordering", || {
        eventually(3, || {
            // realistic cloud model: wide window, two attention blocks
            let arch = Architecture {
                conv_channels: 16,
                kernel: 5,
                d_model: 64,
                heads: 4,
                head_dim: 16,
                ffn_hidden: 128,
                attn_depth: 2,
            };
            let window_len = 99;
            let model =
                S2PModel::new(window_len, FEATURES, vec!["a".into(), "b".into()], arch, 7).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let store = Arc::new(ResultStore::open(dir.path()).unwrap());
            for i in 0..20 {
                store
                    .append(&ResultRecord {
                        household_id: "house-1".into(),
                        ts_ms: i,
                        targets: vec![TargetResult {
                            id: "a".into(),
                            prob: 0.9,
                            state: 1,
                        }],
                        producer: "edge".into(),
                        model_version: "gbdt-1".into(),
                    })
                    .unwrap();
            }
            let worker = start_worker(&model, store, 512, 0, "w7");
            let target = worker.addr.to_string();

            let profile = LoadProfile {
                levels: vec![100],
                think_time_s: 2.0,
                repetitions: 10,
                requests_per_user: 2,
                request: RequestTemplate {
                    method: "POST".into(),
                    path: "/v1/infer".into(),
                    body: Some(cloud_infer_body(window_len)),
                },
            };
            let cloud = nilm_bench::run_load(&profile, &target).unwrap();
            let edge_profile = LoadProfile {
                request: RequestTemplate {
                    body: Some(
                        json!({"household_id": "house-1", "mode": "edge-lookup"}).to_string(),
                    ),
                    ..profile.request.clone()
                },
                ..profile.clone()
            };
            let edge = nilm_bench::run_load(&edge_profile, &target).unwrap();
            worker.stop();

            let (cloud_avg, edge_avg) = (cloud.levels[0].average_ms, edge.levels[0].average_ms);
            assert_eq!(cloud.levels[0].errors, 0, "cloud mode saw errors");
            assert_eq!(edge.levels[0].errors, 0, "edge mode saw errors");
            println!("  edge {edge_avg:.1} ms vs cloud {cloud_avg:.1} ms");
            assert!(
                edge_avg <= 0.5 * cloud_avg,
                "edge avg {edge_avg:.1} ms exceeds half of cloud avg {cloud_avg:.1} ms"
            );
        });
    });
}

// ------------------------------------------------------------ criterion 8

#[test]
fn acceptance_08_worker_scaling() {
    let _s = serial_lock();
    criterion(8, "worker-scaling ordering", || {
        eventually(3, || {
            let window_len = 7;
            let model =
                S2PModel::new(window_len, FEATURES, vec!["a".into()], tiny_arch(), 8).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let store = Arc::new(ResultStore::open(dir.path()).unwrap());
            let body = cloud_infer_body(window_len);

            let mut averages = Vec::new();
            for n in [1usize, 2, 4] {
                let workers: Vec<Worker> = (0..n)
                    .map(|i| start_worker(&model, Arc::clone(&store), 256, 20, &format!("w8-{i}")))
                    .collect();
                let balancer = Balancer::start(&BalancerConfig {
                    listen: "127.0.0.1:0".into(),
                    workers: workers.iter().map(|w| w.addr.to_string()).collect(),
                    health_check_period_ms: 10_000,
                })
                .unwrap();
                let profile = LoadProfile {
                    levels: vec![50],
                    think_time_s: 0.5,
                    repetitions: 5,
                    requests_per_user: 2,
                    request: RequestTemplate {
                        method: "POST".into(),
                        path: "/v1/infer".into(),
                        body: Some(body.clone()),
                    },
                };
                let report = nilm_bench::run_load(&profile, &balancer.addr.to_string()).unwrap();
                assert_eq!(report.levels[0].errors, 0, "{n}-worker run saw errors");
                averages.push((n, report.levels[0].average_ms));
                balancer.stop();
                for w in workers {
                    w.stop();
                }
            }
            println!("  averages: {averages:?}");
            // ordering with >= 10% separation between adjacent configs
            let (one, two, four) = (averages[0].1, averages[1].1, averages[2].1);
            assert!(
                two <= 0.9 * one,
                "2-worker avg {two:.0} ms not 10% under 1-worker {one:.0} ms"
            );
            assert!(
                four <= 0.9 * two,
                "4-worker avg {four:.0} ms not 10% under 2-worker {two:.0} ms"
            );
        });
    });
}

// ------------------------------------------------------------ criterion 9

#[test]
fn acceptance_09_saturation_ordering() {
    let _s = serial_lock();
    criterion(9, "saturation ordering", || {
        eventually(3, || {
            let window_len = 7;
            let model =
                S2PModel::new(window_len, FEATURES, vec!["a".into()], tiny_arch(), 9).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let store = Arc::new(ResultStore::open(dir.path()).unwrap());
            let template = RequestTemplate {
                method: "POST".into(),
                path: "/v1/infer".into(),
                body: Some(cloud_infer_body(window_len)),
            };

            // single bare worker with a small connection budget
            let single = start_worker(&model, Arc::clone(&store), 12, 40, "w9-single");
            let single_report =
                nilm_bench::saturate(&single.addr.to_string(), &template, 4, 8, 60).unwrap();
            single.stop();
            let single_threshold = single_report
                .threshold
                .expect("single worker failed at the lowest level");
            assert!(
                single_report.first_failing.is_some(),
                "single worker never saturated"
            );

            // the same budget per worker, 4 workers behind the balancer
            let workers: Vec<Worker> = (0..4)
                .map(|i| start_worker(&model, Arc::clone(&store), 12, 40, &format!("w9-{i}")))
                .collect();
            let balancer = Balancer::start(&BalancerConfig {
                listen: "127.0.0.1:0".into(),
                workers: workers.iter().map(|w| w.addr.to_string()).collect(),
                health_check_period_ms: 10_000,
            })
            .unwrap();
            let balanced_report =
                nilm_bench::saturate(&balancer.addr.to_string(), &template, 4, 8, 60).unwrap();
            balancer.stop();
            for w in workers {
                w.stop();
            }
            let balanced_threshold = balanced_report
                .threshold
                .expect("balanced pool failed at the lowest level");
            println!("  thresholds: single {single_threshold}, balanced {balanced_threshold}");
            assert!(
            balanced_threshold > single_threshold,
            "balanced threshold {balanced_threshold} not above single-worker {single_threshold}"
        );
        });
    });
}

// ----------------------------------------------------------- criterion 10

#[test]
fn acceptance_10_end_to_end_conservation() {
    let _s = serial_lock();
    criterion(10, "end-to-end conservation", || {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("demo");
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_nilm"))
            .args([
                "demo",
                "--samples",
                "2000",
                "--window-len",
                "31",
                "--batch-threshold",
                "16",
                "--dirty-fraction",
                "0",
                "--epochs",
                "1",
                "--skip-bench",
                "--out-dir",
            ])
            .arg(&out_dir)
            .args(["--seed", "10", "--log-level", "warn"])
            .status()
            .expect("demo process failed to start");
        assert!(status.success(), "demo exited with {status}");

        let summary: Value = serde_json::from_str(
            &std::fs::read_to_string(out_dir.join("demo-summary.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(summary["expected_windows"], json!(1970));
        assert_eq!(
            summary["cloud_records"],
            json!(1970),
            "cloud record count is not exactly 1,970"
        );

        // the dumped REST query response must hold them in ts order
        let results: Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap())
                .unwrap();
        let records = results["records"].as_array().unwrap();
        let cloud_ts: Vec<i64> = records
            .iter()
            .filter(|r| r["producer"] == json!("cloud"))
            .map(|r| r["ts_ms"].as_i64().unwrap())
            .collect();
        assert_eq!(cloud_ts.len(), 1970);
        assert!(
            cloud_ts.windows(2).all(|w| w[0] < w[1]),
            "REST results are not in ascending timestamp order"
        );
    });
}
