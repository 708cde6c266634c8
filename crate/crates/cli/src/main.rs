mod serve;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fogmesh_core::fabric::TopologyConfig;
use fogmesh_core::placement::AlgorithmRegistry;
use fogmesh_core::scenario::{run_file, Report, ScenarioFile};
use fogmesh_core::simulation::{SimConfig, Simulation};
use fogmesh_core::workload::{canned, generate, GeneratorSpec, Pattern, Stage};

#[derive(Parser)]
#[command(name = "fogmesh", version, about = "Fog/cloud placement control engine simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file to completion and write metrics under --out-dir.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Print an application document, canned or generated.
    Gen {
        /// One of the canned applications (hcapp, app2).
        #[arg(long, conflicts_with = "pattern")]
        canned: Option<String>,
        /// chained:N, aggregator:N, candidate:N or hybrid:chain2,fanout3
        #[arg(long)]
        pattern: Option<String>,
        #[arg(long, default_value = "generated")]
        app_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the control-engine APIs over HTTP.
    Serve {
        /// Take topology, engines and applications from the first scenario
        /// of this file. Without it: the reference testbed, distributed
        /// engines and both canned applications.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Cluster addressed by requests without a `cluster` header.
        #[arg(long, default_value = "fog1")]
        cluster: String,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn parse_pattern(text: &str) -> anyhow::Result<Pattern> {
    let (kind, arg) = text.split_once(':').unwrap_or((text, ""));
    let n = || -> anyhow::Result<usize> { arg.parse().with_context(|| format!("pattern size `{arg}`")) };
    Ok(match kind {
        "chained" => Pattern::Chained { length: n()? },
        "aggregator" => Pattern::Aggregator { fan_out: n()? },
        "candidate" => Pattern::Candidate { services: n()? },
        "hybrid" => Pattern::Hybrid {
            recipe: arg
                .split(',')
                .map(|s| {
                    if let Some(k) = s.strip_prefix("chain") {
                        Ok(Stage::Chain(k.parse()?))
                    } else if let Some(k) = s.strip_prefix("fanout") {
                        Ok(Stage::FanOut(k.parse()?))
                    } else {
                        bail!("hybrid stage `{s}`")
                    }
                })
                .collect::<anyhow::Result<_>>()?,
        },
        other => bail!("unknown pattern `{other}`"),
    })
}

fn print_report(report: &Report) {
    for s in &report.scenarios {
        println!("{}: {} placement requests", s.id, s.summary.timelines.len());
        if let Some(t) = s.summary.total_completion_ms {
            println!("  completion {t:.1} ms");
        }
        for (app, mean) in &s.app_means {
            println!("  {app}: mean response {mean:.2} ms");
        }
        for u in &s.unexpected {
            println!("  unexpected: {u}");
        }
    }
    for c in &report.comparisons {
        println!(
            "{}: {:.2} ms -> {:.2} ms ({:.1}% lower)",
            c.name, c.baseline_ms, c.candidate_ms, c.improvement_pct
        );
    }
}

fn service_sim(scenario: Option<&Path>, registry: &AlgorithmRegistry) -> anyhow::Result<Simulation> {
    match scenario {
        Some(path) => {
            let file = ScenarioFile::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let (sim, _) = file.scenarios[0].build(base, registry)?;
            Ok(sim)
        }
        None => {
            let mut sim = Simulation::new(&SimConfig::distributed(TopologyConfig::testbed(), "v2", 0), registry)?;
            for name in ["hcapp", "app2"] {
                sim.seed_application(&canned(name)?);
            }
            Ok(sim)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let registry = AlgorithmRegistry::with_defaults();
    let result: anyhow::Result<ExitCode> = match cli.command {
        Command::Run { scenario, out_dir } => run_file(&scenario, &registry, Some(&out_dir))
            .map(|report| {
                print_report(&report);
                if report.as_expected() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            })
            .map_err(Into::into),
        Command::Gen { canned: name, pattern, app_id, seed, out } => (|| {
            let app = match (name, pattern) {
                (Some(n), _) => canned(&n)?,
                (None, Some(p)) => generate(&GeneratorSpec::new(app_id, parse_pattern(&p)?, seed))?,
                (None, None) => bail!("pass --canned or --pattern"),
            };
            let text = app.to_json();
            match out {
                Some(path) => std::fs::write(&path, text + "\n").with_context(|| path.display().to_string())?,
                None => println!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Serve { scenario, cluster, bind } => service_sim(scenario.as_deref(), &registry)
            .and_then(|sim| serve::serve(sim, cluster, bind))
            .map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns() {
        assert_eq!(parse_pattern("chained:3").unwrap(), Pattern::Chained { length: 3 });
        assert_eq!(
            parse_pattern("hybrid:chain2,fanout3").unwrap(),
            Pattern::Hybrid {
                recipe: vec![Stage::Chain(2), Stage::FanOut(3)]
            }
        );
        assert!(parse_pattern("ring:2").is_err());
        assert!(parse_pattern("chained:x").is_err());
    }
}
