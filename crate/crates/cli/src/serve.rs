//! Long-running service commands: broker, cloud worker, balancer, and
//! the run-to-completion edge agent.

use std::path::Path;
use std::thread;
use std::time::Duration;

use anyhow::Context;

use nilm_broker::Broker;
use nilm_services::{
    load_config, run_edge_agent, start_consumer, Balancer, BalancerConfig, CloudConfig,
    EdgeAgentConfig, Worker,
};

use crate::manifest::RunManifest;
use crate::CliError;

fn park_forever() -> ! {
    loop {
        thread::sleep(Duration::from_secs(3600));
    }
}

pub fn cmd_broker(
    listen: &str,
    default_capacity: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<(), CliError> {
    if default_capacity == 0 {
        return Err(CliError::Usage("default capacity must be >= 1".into()));
    }
    RunManifest::new("broker", out_dir, seed).write()?;
    let broker = Broker::new(default_capacity);
    let addr = Broker::start(&broker, listen).context("starting broker")?;
    println!("broker listening on {addr}");
    park_forever();
}

pub fn cmd_cloud_worker(config: &Path, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    let cfg: CloudConfig =
        load_config(config).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    RunManifest::new("cloud-worker", out_dir, seed)
        .with_config(config)
        .with_model_file(&cfg.s2p_model_path)
        .write()?;
    let worker = Worker::start(&cfg).context("starting worker")?;
    println!("worker listening on {}", worker.addr);
    let _consumer = if cfg.consume {
        Some(start_consumer(&cfg, worker.model(), worker.store()).context("starting consumer")?)
    } else {
        None
    };
    park_forever();
}

pub fn cmd_balancer(config: &Path, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    let cfg: BalancerConfig =
        load_config(config).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    RunManifest::new("balancer", out_dir, seed).with_config(config).write()?;
    let balancer = Balancer::start(&cfg).context("starting balancer")?;
    println!("balancer listening on {}", balancer.addr);
    park_forever();
}

pub fn cmd_edge_agent(config: &Path, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    let cfg: EdgeAgentConfig =
        load_config(config).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut manifest = RunManifest::new("edge-agent", out_dir, seed).with_config(config);
    if let Some(path) = &cfg.gbdt_model_path {
        manifest = manifest.with_model_file(path);
    }
    manifest.write()?;
    let stats = run_edge_agent(&cfg).context("edge agent run")?;
    println!(
        "published {} samples in {} envelopes ({} rejected, {} local results)",
        stats.samples_published, stats.envelopes_published, stats.rejected, stats.local_results
    );
    Ok(())
}
