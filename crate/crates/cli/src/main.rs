use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ffasim_core::config::{Command, RunConfig, Variant};
use ffasim_core::runner;
use ffasim_core::Protocol;

#[derive(Parser)]
#[command(
    name = "ffasim",
    version,
    about = "Object-centric image similarity benchmark toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the backbone and segmenter over the catalog and fill the cache.
    Extract(Opts),
    /// Retrieval (mAP, top-1) and clustering (ARI) per protocol.
    Benchmark(Opts),
    /// Pick the odd one out of each four-image panel.
    Oddity(Opts),
    /// Late fusion of two re-identification distance matrices.
    Fuse(Opts),
    /// Top-1/top-5 for every alpha in the fusion grid.
    Sweep(Opts),
}

#[derive(Args)]
struct Opts {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Repeatable; replaces the configured protocol list.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Vec<Protocol>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    segmenter: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: ffasim_core::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: ffasim_core::Error| e.to_string())
}

impl Opts {
    fn into_config(self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if !self.protocol.is_empty() {
            cfg.protocols = self.protocol;
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if self.dataset.is_some() {
            cfg.dataset = self.dataset;
        }
        if self.manifest.is_some() {
            cfg.manifest = self.manifest;
        }
        if self.backbone.is_some() {
            cfg.backbone = self.backbone;
        }
        if self.segmenter.is_some() {
            cfg.segmenter = self.segmenter;
        }
        if self.cache.is_some() {
            cfg.cache_dir = self.cache;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, opts) = match cli.command {
        Cmd::Extract(o) => (Command::Extract, o),
        Cmd::Benchmark(o) => (Command::Benchmark, o),
        Cmd::Oddity(o) => (Command::Oddity, o),
        Cmd::Fuse(o) => (Command::Fuse, o),
        Cmd::Sweep(o) => (Command::Sweep, o),
    };
    let result = opts.into_config().and_then(|cfg| Ok(runner::run(cmd, &cfg)?));
    match result {
        Ok(outcome) => {
            if outcome.soft_failures > 0 {
                log::warn!("{} item(s) failed, see report.json", outcome.soft_failures);
            }
            print!("{}", outcome.table);
            log::info!("wrote {}", outcome.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{}: {e:#}", cmd.as_str());
            ExitCode::FAILURE
        }
    }
}
