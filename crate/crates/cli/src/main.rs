//! `citypulse`: ingest, compute, serve, synth and export.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
//! Log level comes from `CITYPULSE_LOG` (error, warn, info, debug).

use std::collections::BTreeSet;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use citypulse_core::store::{
    build_from, city_dir, compute, load_inputs, write_ingested, BuildOptions, Layout, Manifest,
};
use citypulse_core::synth::{Scenario, ScenarioSpec};
use citypulse_core::time::WeekId;
use citypulse_core::{ActivityType, CityConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "citypulse", version, about = "Mobile-network activity analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate input files and write region series into a store.
    Ingest {
        #[arg(long)]
        city: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "check")]
        out: Option<PathBuf>,
        /// Validate only; print the ingest report and write nothing.
        #[arg(long)]
        check: bool,
    },
    /// Compute profiles, residuals, events, clusters and density maps.
    Compute {
        #[arg(long)]
        store: PathBuf,
        /// City to compute; may be omitted when the store holds one city.
        #[arg(long)]
        city: Option<String>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Values of k scored by select_k, e.g. `2-8` or `2,3,5`.
        #[arg(long, default_value = "2-8")]
        k_range: String,
        /// Comma-separated activity types used as clustering features.
        #[arg(long)]
        types: Option<String>,
        /// Comma-separated local weeks (YYYY-Www) left out of typical weeks.
        #[arg(long)]
        exclude_weeks: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        threshold_z: f64,
        /// Also report negative events.
        #[arg(long)]
        negative_events: bool,
    },
    /// Ingest and compute in one step.
    Build {
        #[arg(long)]
        city: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        exclude_weeks: Option<String>,
    },
    /// Serve a store over HTTP.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Directory of static web UI files served at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Generate a synthetic city (input files plus ground truth).
    Synth {
        /// Scenario JSON; the built-in default scenario when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a stored artifact.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        city: Option<String>,
        #[arg(long, value_enum)]
        what: Artifact,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Model to export with `--what clusters`; the build's k by default.
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Artifact {
    Clusters,
    SelectK,
    Meta,
    Regions,
    Manifest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(String),
    Usage(String),
}

impl From<citypulse_core::Error> for Failure {
    fn from(e: citypulse_core::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| f(p).map_err(Failure::Usage))
        .collect()
}

fn parse_weeks(s: Option<&str>) -> Result<BTreeSet<WeekId>, Failure> {
    let Some(s) = s else { return Ok(BTreeSet::new()) };
    Ok(parse_list(s, |p| p.parse::<WeekId>().map_err(|e| e.to_string()))?.into_iter().collect())
}

fn parse_k_range(s: &str) -> Result<Vec<usize>, Failure> {
    let num = |p: &str| p.trim().parse::<usize>().map_err(|_| format!("bad k value `{p}`"));
    if let Some((a, b)) = s.split_once('-') {
        let (a, b) = (num(a).map_err(Failure::Usage)?, num(b).map_err(Failure::Usage)?);
        return Ok((a..=b).collect());
    }
    parse_list(s, num)
}

fn load_config(path: &Path) -> Result<CityConfig, Failure> {
    let config = CityConfig::load(path)?;
    config.validate()?;
    Ok(config)
}

/// Picks the city directory inside a store root.
fn resolve_city(store: &Path, city: Option<&str>) -> Result<PathBuf, Failure> {
    if store.join("manifest.json").is_file() {
        return Ok(store.to_path_buf());
    }
    if let Some(id) = city {
        let dir = city_dir(store, id);
        if dir.join("manifest.json").is_file() {
            return Ok(dir);
        }
        return Err(Failure::Validation(format!("city `{id}` not found in {}", store.display())));
    }
    let dirs: Vec<PathBuf> = std::fs::read_dir(store)
        .map_err(|e| Failure::Validation(format!("{}: {e}", store.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    match dirs.as_slice() {
        [one] => Ok(one.clone()),
        [] => Err(Failure::Validation(format!("no city found in {}", store.display()))),
        _ => Err(Failure::Usage("store holds several cities; pass --city".into())),
    }
}

fn print_json(value: &impl serde::Serialize) -> Outcome {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Failure::Validation(e.to_string()))?;
    let _ = writeln!(out);
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Ingest { city, data, out, check } => {
            let config = load_config(&city)?;
            let loaded = load_inputs(&config, &data)?;
            if check {
                return print_json(&serde_json::json!({
                    "city_id": config.city_id,
                    "summary": loaded.summary,
                    "rejections": loaded.rejections,
                    "inputs": loaded.inputs,
                }));
            }
            let out = out.expect("clap requires --out without --check");
            let m = write_ingested(&loaded, &out)?;
            log::info!("ingested {} into {}", m.city_id, city_dir(&out, &m.city_id).display());
            print_json(&loaded.summary)
        }
        Command::Compute {
            store,
            city,
            k,
            k_range,
            types,
            exclude_weeks,
            seed,
            threshold_z,
            negative_events,
        } => {
            let dir = resolve_city(&store, city.as_deref())?;
            let mut options = BuildOptions {
                k,
                k_range: parse_k_range(&k_range)?,
                exclude_weeks: parse_weeks(exclude_weeks.as_deref())?,
                seed,
                ..Default::default()
            };
            if let Some(t) = types {
                options.types = ActivityType::parse_list(&t).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            options.detect.threshold_z = threshold_z;
            options.detect.negative = negative_events;
            let m = compute(&dir, &options)?;
            log::info!("computed {} ({} artifacts)", m.city_id, m.n_artifacts);
            print_json(&m)
        }
        Command::Build { city, data, out, k, seed, exclude_weeks } => {
            let config = load_config(&city)?;
            let options = BuildOptions {
                k,
                seed,
                exclude_weeks: parse_weeks(exclude_weeks.as_deref())?,
                ..Default::default()
            };
            let loaded = load_inputs(&config, &data)?;
            let m = build_from(&loaded, &out, &options)?;
            print_json(&m)
        }
        Command::Serve { store, port, host, ui } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Validation(e.to_string()))?;
            rt.block_on(citypulse_server::serve(&store, SocketAddr::new(host, port), ui.as_deref()))
                .map_err(|e| Failure::Validation(e.to_string()))
        }
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
                    ScenarioSpec::from_json(&text)?
                }
                None => ScenarioSpec::default_city(),
            };
            let scenario = Scenario::new(spec)?;
            scenario.write_to(&out)?;
            log::info!("wrote {} antennas to {}", scenario.antennas.len(), out.display());
            Ok(())
        }
        Command::Export { store, city, what, format: Format::Json, k } => {
            let dir = resolve_city(&store, city.as_deref())?;
            let layout = Layout::new(&dir);
            let path = match what {
                Artifact::Clusters => {
                    let k = match k {
                        Some(k) => k,
                        None => Manifest::load(&layout.manifest())?.options.map_or(5, |o| o.k),
                    };
                    layout.cluster_model(k)
                }
                Artifact::SelectK => layout.select_k(),
                Artifact::Meta => layout.meta(),
                Artifact::Regions => layout.regions(),
                Artifact::Manifest => layout.manifest(),
            };
            let bytes = std::fs::read(&path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
            let mut out = std::io::stdout().lock();
            out.write_all(&bytes).and_then(|_| writeln!(out)).map_err(|e| Failure::Validation(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CITYPULSE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}
