//! End-to-end orchestration: generates data, trains both models,
//! launches broker + workers + balancer + edge agent as child
//! processes, benchmarks both inference paths through the balancer,
//! and writes every artifact under the output dir.

use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::{json, Value};

use nilm_bench::{LoadProfile, ReportFormat, RequestTemplate};
use nilm_core::datagen::{self, ApplianceProfile, ScenarioConfig};
use nilm_core::preprocess::{self, FEATURES};
use nilm_core::{ApplianceCatalog, CatalogEntry, LevelPower, PowerSample};
use nilm_gbdt::{FeatureSchema, GbdtTrainParams};
use nilm_seq2point::{S2PModel, S2PTrainConfig};
use nilm_services::{AgentMode, BalancerConfig, CloudConfig, EdgeAgentConfig, InputSource};

use crate::commands::ArchPreset;
use crate::data::build_supervised;
use crate::manifest::RunManifest;
use crate::CliError;

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Cloud worker count (1-4); exactly one consumes the queue.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Synthetic samples to generate for the single household.
    #[arg(long, default_value_t = 600)]
    pub samples: usize,
    #[arg(long, default_value_t = 31)]
    pub window_len: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_threshold: usize,
    #[arg(long, default_value_t = 2.0)]
    pub sample_period_s: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dirty_fraction: f64,
    /// Artificial per-request service time on the workers, ms.
    #[arg(long, default_value_t = 0)]
    pub synthetic_delay_ms: u64,
    /// Seq2Point training epochs.
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    /// Bench concurrency levels.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5])]
    pub levels: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 1)]
    pub requests_per_user: usize,
    #[arg(long, default_value_t = 0.2)]
    pub think_time_s: f64,
    /// Skip the benchmark phase (pipeline only).
    #[arg(long, default_value_t = false)]
    pub skip_bench: bool,
}

const HOUSEHOLD: &str = "house-1";
const QUEUE: &str = "nilm.samples";

struct ChildGuard {
    children: Vec<(String, Child)>,
}

impl ChildGuard {
    fn kill_all(&mut self) {
        for (name, child) in &mut self.children {
            if child.kill().is_ok() {
                log::info!("stopped {name}");
            }
            let _ = child.wait();
        }
        self.children.clear();
    }
}

impl Drop for ChildGuard {
    fn drop(&mut self) {
        self.kill_all();
    }
}

fn free_port() -> Result<u16> {
    let listener = TcpListener::bind("127.0.0.1:0").context("probing for a free port")?;
    Ok(listener.local_addr()?.port())
}

fn spawn_child(name: &str, args: &[String], out_dir: &Path) -> Result<(String, Child)> {
    let log_dir = out_dir.join("logs");
    fs::create_dir_all(&log_dir)?;
    let log = fs::File::create(log_dir.join(format!("{name}.log")))?;
    let err = log.try_clone()?;
    let exe = std::env::current_exe().context("locating own binary")?;
    let child = Command::new(exe)
        .args(args)
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(err))
        .spawn()
        .with_context(|| format!("spawning {name}"))?;
    Ok((name.to_string(), child))
}

fn wait_reachable(addr: &str, what: &str) -> Result<()> {
    for _ in 0..100 {
        if TcpStream::connect(addr).is_ok() {
            return Ok(());
        }
        thread::sleep(Duration::from_millis(100));
    }
    bail!("{what} at {addr} never became reachable");
}

fn demo_scenario(args: &DemoArgs, seed: u64) -> Result<ScenarioConfig> {
    let catalog = ApplianceCatalog::new(vec![
        CatalogEntry {
            appliance_id: "fridge".into(),
            display_name: "Refrigerator".into(),
            levels: vec![LevelPower { active_w: 120.0, reactive_var: 30.0 }],
        },
        CatalogEntry {
            appliance_id: "heater".into(),
            display_name: "Space heater".into(),
            levels: vec![LevelPower { active_w: 1500.0, reactive_var: 80.0 }],
        },
    ])?;
    Ok(ScenarioConfig {
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
        duration_s: args.samples as f64 * args.sample_period_s,
        sample_period_s: args.sample_period_s,
        seed,
        dirty_fraction: args.dirty_fraction,
    })
}

fn train_models(
    args: &DemoArgs,
    clean: &[PowerSample],
    out_dir: &Path,
    seed: u64,
) -> Result<(PathBuf, PathBuf)> {
    let set = build_supervised(clean, args.window_len)?;

    let schema = FeatureSchema { window_len: args.window_len, feature_dim: FEATURES };
    let features: Vec<Vec<f64>> =
        set.windows.iter().map(nilm_gbdt::features::window_features).collect();
    let targets: Vec<(String, Vec<bool>)> = set
        .target_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.clone(), set.labels.iter().map(|row| row[j]).collect()))
        .collect();
    let params = GbdtTrainParams { n_trees: 20, max_depth: 3, ..Default::default() };
    let gbdt = nilm_gbdt::train(schema, &features, &targets, &params).context("gbdt training")?;
    let gbdt_path = out_dir.join("gbdt.json");
    nilm_gbdt::io::save(&gbdt, &gbdt_path).context("saving gbdt model")?;

    let mut s2p = S2PModel::new(
        args.window_len,
        FEATURES,
        set.target_ids.clone(),
        ArchPreset::Tiny.architecture(),
        seed,
    )?;
    // cap the training set so the demo stays interactive
    let cap = set.windows.len().min(256);
    let labels: Vec<Vec<f64>> = set.labels[..cap]
        .iter()
        .map(|row| row.iter().map(|&b| f64::from(u8::from(b))).collect())
        .collect();
    let cfg = S2PTrainConfig { epochs: args.epochs, seed, ..Default::default() };
    nilm_seq2point::train(&mut s2p, &set.windows[..cap], &labels, &cfg)
        .context("s2p training")?;
    let s2p_path = out_dir.join("s2p.json");
    nilm_seq2point::io::save(&s2p, &s2p_path).context("saving s2p model")?;
    Ok((gbdt_path, s2p_path))
}

fn write_config<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("config serializes"))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn global_flags(out_dir: &Path, seed: u64) -> Vec<String> {
    vec![
        "--out-dir".into(),
        out_dir.display().to_string(),
        "--seed".into(),
        seed.to_string(),
    ]
}

/// Counts persisted records by producer via the REST query endpoint.
fn fetch_records(balancer: &str) -> Result<(Value, usize, usize)> {
    let target = format!("/v1/results?household_id={HOUSEHOLD}");
    let (status, body) =
        nilm_http::request(balancer, "GET", &target, None).context("querying results")?;
    if status != 200 {
        bail!("results query returned {status}");
    }
    let value: Value = serde_json::from_slice(&body).context("parsing results")?;
    let records = value
        .get("records")
        .and_then(Value::as_array)
        .map(Vec::as_slice)
        .unwrap_or_default();
    let cloud = records
        .iter()
        .filter(|r| r.get("producer").and_then(Value::as_str) == Some("cloud"))
        .count();
    let edge = records.len() - cloud;
    Ok((value, cloud, edge))
}

pub fn cmd_demo(args: &DemoArgs, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    if !(1..=4).contains(&args.workers) {
        return Err(CliError::Usage("worker count must be 1-4".into()));
    }
    if args.window_len.is_multiple_of(2) || args.window_len < 7 {
        return Err(CliError::Usage("window length must be odd and >= 7".into()));
    }
    RunManifest::new("demo", out_dir, seed).write()?;
    fs::create_dir_all(out_dir).context("creating output dir")?;

    // data + models
    let scenario = demo_scenario(args, seed)?;
    let mut samples = datagen::generate_scenario(&scenario)?;
    let dirty = datagen::inject_dirty(&mut samples, args.dirty_fraction, seed)?;
    let data_path = out_dir.join("data.csv");
    datagen::write_csv(&samples, &data_path)?;
    let (clean, dropped) = preprocess::clean(&samples);
    println!("generated {} rows ({} corrupted, {dropped} dropped)", samples.len(), dirty.len());
    let (gbdt_path, s2p_path) = train_models(args, &clean, out_dir, seed)?;
    println!("models trained: {} and {}", gbdt_path.display(), s2p_path.display());

    // topology
    let broker_addr = format!("127.0.0.1:{}", free_port()?);
    let balancer_addr = format!("127.0.0.1:{}", free_port()?);
    let worker_addrs: Vec<String> = (0..args.workers)
        .map(|_| Ok(format!("127.0.0.1:{}", free_port()?)))
        .collect::<Result<_>>()?;
    let persist_dir = out_dir.join("persist");

    let mut guard = ChildGuard { children: Vec::new() };
    let run = |guard: &mut ChildGuard| -> Result<()> {
        let mut broker_args = vec![
            "broker".to_string(),
            "--listen".into(),
            broker_addr.clone(),
        ];
        broker_args.extend(global_flags(&out_dir.join("run-broker"), seed));
        guard.children.push(spawn_child("broker", &broker_args, out_dir)?);
        wait_reachable(&broker_addr, "broker")?;

        for (i, addr) in worker_addrs.iter().enumerate() {
            let cfg = CloudConfig {
                broker_addr: broker_addr.clone(),
                queue: QUEUE.into(),
                batch_threshold: args.batch_threshold,
                s2p_model_path: s2p_path.clone(),
                persist_dir: persist_dir.clone(),
                listen: addr.clone(),
                // exactly one consumer per queue
                consume: i == 0,
                max_connections: 256,
                synthetic_delay_ms: args.synthetic_delay_ms,
                state_cutoff: 0.5,
                worker_name: format!("worker-{i}"),
            };
            let cfg_path = out_dir.join(format!("worker-{i}.json"));
            write_config(&cfg, &cfg_path)?;
            let mut wargs = vec![
                "cloud-worker".to_string(),
                "--config".into(),
                cfg_path.display().to_string(),
            ];
            wargs.extend(global_flags(&out_dir.join(format!("run-worker-{i}")), seed));
            guard.children.push(spawn_child(&format!("worker-{i}"), &wargs, out_dir)?);
        }
        for addr in &worker_addrs {
            wait_reachable(addr, "worker")?;
        }

        let bal_cfg = BalancerConfig {
            listen: balancer_addr.clone(),
            workers: worker_addrs.clone(),
            health_check_period_ms: 500,
        };
        let bal_path = out_dir.join("balancer.json");
        write_config(&bal_cfg, &bal_path)?;
        let mut bargs = vec![
            "balancer".to_string(),
            "--config".into(),
            bal_path.display().to_string(),
        ];
        bargs.extend(global_flags(&out_dir.join("run-balancer"), seed));
        guard.children.push(spawn_child("balancer", &bargs, out_dir)?);
        wait_reachable(&balancer_addr, "balancer")?;

        // edge agent replays the dataset to completion
        let agent_cfg = EdgeAgentConfig {
            input: InputSource::Csv { path: data_path.clone() },
            broker_addr: broker_addr.clone(),
            queue: QUEUE.into(),
            household_id: HOUSEHOLD.into(),
            mode: AgentMode::EdgeInfer,
            window_len: args.window_len,
            gbdt_model_path: Some(gbdt_path.clone()),
            results_dir: None,
            state_cutoff: 0.5,
            samples_per_envelope: 8,
        };
        let agent_path = out_dir.join("edge-agent.json");
        write_config(&agent_cfg, &agent_path)?;
        let mut aargs = vec![
            "edge-agent".to_string(),
            "--config".into(),
            agent_path.display().to_string(),
        ];
        aargs.extend(global_flags(&out_dir.join("run-agent"), seed));
        let (name, mut agent) = spawn_child("edge-agent", &aargs, out_dir)?;
        let status = agent.wait().with_context(|| format!("waiting for {name}"))?;
        if !status.success() {
            bail!("edge agent exited with {status}");
        }

        // wait until the consumer has drained everything
        let expected = clean.len().saturating_sub(args.window_len) + 1;
        let deadline = Instant::now() + Duration::from_secs(120);
        let (mut results, mut cloud, mut edge) = fetch_records(&balancer_addr)?;
        while cloud < expected && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(500));
            (results, cloud, edge) = fetch_records(&balancer_addr)?;
        }
        println!("persisted {cloud} cloud and {edge} edge records (expected {expected})");
        fs::write(
            out_dir.join("results.json"),
            serde_json::to_string_pretty(&results).expect("serializes"),
        )?;

        let mut summary = json!({
            "rows": samples.len(),
            "dropped": dropped,
            "expected_windows": expected,
            "cloud_records": cloud,
            "edge_records": edge,
            "workers": args.workers,
        });

        if !args.skip_bench {
            let window_body: Vec<[f64; 2]> = clean[..args.window_len]
                .iter()
                .map(|s| [s.active_power.unwrap_or(0.0), s.reactive_power.unwrap_or(0.0)])
                .collect();
            let cloud_body = json!({
                "household_id": HOUSEHOLD,
                "mode": "cloud-infer",
                "window": window_body,
            })
            .to_string();
            let edge_body =
                json!({"household_id": HOUSEHOLD, "mode": "edge-lookup"}).to_string();
            let base = LoadProfile {
                levels: args.levels.clone(),
                think_time_s: args.think_time_s,
                repetitions: args.repetitions,
                requests_per_user: args.requests_per_user,
                request: RequestTemplate {
                    method: "POST".into(),
                    path: "/v1/infer".into(),
                    body: Some(cloud_body),
                },
            };
            base.validate()?;
            let cloud_report = nilm_bench::run_load(&base, &balancer_addr)?;
            let edge_profile = LoadProfile {
                request: RequestTemplate { body: Some(edge_body), ..base.request.clone() },
                ..base.clone()
            };
            let edge_report = nilm_bench::run_load(&edge_profile, &balancer_addr)?;

            for (name, report) in [("cloud", &cloud_report), ("edge", &edge_report)] {
                fs::write(
                    out_dir.join(format!("bench-{name}.csv")),
                    nilm_bench::emit_report(report, ReportFormat::Csv),
                )?;
                fs::write(
                    out_dir.join(format!("bench-{name}.md")),
                    nilm_bench::emit_report(report, ReportFormat::Markdown),
                )?;
            }
            let ratios = nilm_bench::compare_reports(&edge_report, &cloud_report)?;
            let mut csv = String::from("concurrency,edge_over_cloud_ratio\n");
            for (level, ratio) in &ratios {
                csv.push_str(&format!("{level},{ratio:.3}\n"));
            }
            fs::write(out_dir.join("comparison.csv"), csv)?;
            summary["ratios"] = json!(ratios
                .iter()
                .map(|(level, ratio)| json!({"concurrency": level, "ratio": ratio}))
                .collect::<Vec<_>>());
            println!("latency ratios (edge/cloud): {ratios:?}");
        }

        fs::write(
            out_dir.join("demo-summary.json"),
            serde_json::to_string_pretty(&summary).expect("serializes"),
        )?;
        Ok(())
    };

    let outcome = run(&mut guard);
    guard.kill_all();
    outcome?;
    println!("demo artifacts written under {}", out_dir.display());
    Ok(())
}
