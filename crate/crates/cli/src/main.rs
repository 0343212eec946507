use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use beck_lab::addcomb::{sum_product_stats, ElementSet};
use beck_lab::bsg::{bsg_extract, bsg_oracle, PairGraph, ORACLE_LIMIT};
use beck_lab::field::make_field;
use beck_lab::geometry::{ProjLine, ProjPoint};
use beck_lab::harness::{export_csv, generate_set, run_scan, write_csv_rows, write_record, GeneratorSpec, ScanConfig};
use beck_lab::incidence::{
    beck_delta_effective, cartesian_product, count_proj_incidences, incidence_ratio, ProjLineSet, ProjPointSet,
    INCIDENCE_EXPONENT_GAP,
};
use beck_lab::pipeline::{run_beck_pipeline, run_incidence_pipeline, BeckParams, IncidenceParams, Stage};
use beck_lab::Error;

/// Exact incidence and sum-product experiments over prime fields.
#[derive(Parser, Debug)]
#[command(name = "beck-lab", version)]
struct Cli {
    /// Master seed for generators and scans.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Also write a flat CSV of the result here.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct SetSource {
    /// JSON array of integers, inline or as a file path.
    #[arg(long, conflicts_with = "gen")]
    set: Option<String>,
    /// Generator spec as inline JSON or a file path.
    #[arg(long)]
    gen: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// |L(A × A)|, δ_eff and the lines ratio.
    Lines {
        #[arg(long)]
        prime: Option<u64>,
        #[command(flatten)]
        source: SetSource,
        /// Write the JSON result here as well as to stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// I(P, L) for projective points and lines given as [x, y, z] triples.
    Incidences {
        #[arg(long)]
        prime: u64,
        #[arg(long)]
        points: String,
        #[arg(long)]
        lines: String,
    },
    /// |A + A|, |A · A| and the sum-product exponent.
    SumProduct {
        #[arg(long)]
        prime: Option<u64>,
        #[command(flatten)]
        source: SetSource,
    },
    /// Stage trace of the lines-spanned argument on A × B.
    BeckPipeline {
        #[arg(long)]
        prime: u64,
        #[arg(long)]
        set_a: String,
        #[arg(long)]
        set_b: String,
        #[arg(long, allow_negative_numbers = true)]
        delta: Option<f64>,
        /// BeckParams as JSON; --delta overrides its delta.
        #[arg(long)]
        params: Option<String>,
    },
    /// Stage trace of the incidence argument.
    IncidencePipeline {
        #[arg(long)]
        prime: u64,
        #[arg(long)]
        points: String,
        #[arg(long)]
        lines: String,
        #[arg(long, allow_negative_numbers = true)]
        epsilon: Option<f64>,
        #[arg(long)]
        refine_depth: Option<usize>,
        /// IncidenceParams as JSON.
        #[arg(long)]
        params: Option<String>,
    },
    /// Balog-Szemerédi-Gowers extraction on an instance file.
    Bsg {
        #[arg(long)]
        instance: String,
        /// Also run the exhaustive oracle (n <= 8).
        #[arg(long)]
        oracle: bool,
    },
    /// Run a scan config and write its run record into DIR.
    Scan {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Record the wall-clock time in the run record.
        #[arg(long)]
        timestamp: bool,
    },
}

/// Failure classes, mapped to exit codes 1, 2 and 3.
enum Failure {
    Usage(String),
    Input(anyhow::Error),
    Hard(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        use Error::*;
        match e {
            BadSlope(_) | ZeroInverse | DegenerateMap | CoincidentPoints | SingularMatrix | ZeroDilate | ZeroElement => {
                Failure::Hard(e.into())
            }
            _ => Failure::Input(e.into()),
        }
    }
}

fn input(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Input(e.into())
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Inline JSON when the argument starts with '[' or '{', otherwise a file path.
fn load_json<T: serde::de::DeserializeOwned>(arg: &str) -> Outcome<T> {
    let trimmed = arg.trim_start();
    let text = if trimmed.starts_with('[') || trimmed.starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg)
            .with_context(|| format!("reading {arg}"))
            .map_err(input)?
    };
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {arg}"))
        .map_err(input)
}

fn load_set(prime: Option<u64>, source: &SetSource, seed: Option<u64>) -> Outcome<ElementSet> {
    match (&source.set, &source.gen) {
        (Some(s), None) => {
            let prime = prime.ok_or_else(|| Failure::Usage("--set needs --prime".into()))?;
            let elems: Vec<i64> = load_json(s)?;
            Ok(ElementSet::from_signed(make_field(prime)?, elems))
        }
        (None, Some(g)) => {
            let mut spec: GeneratorSpec = load_json(g)?;
            if let Some(p) = prime {
                if p != spec.prime {
                    return Err(Failure::Usage(format!("--prime {p} disagrees with the spec prime {}", spec.prime)));
                }
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            Ok(generate_set(&spec)?)
        }
        _ => Err(Failure::Usage("give exactly one of --set or --gen".into())),
    }
}

fn load_points(prime: u64, arg: &str) -> Outcome<ProjPointSet> {
    let f = make_field(prime)?;
    let raw: Vec<[i64; 3]> = load_json(arg)?;
    let pts = raw
        .into_iter()
        .map(|[x, y, z]| ProjPoint::new(&f, x, y, z))
        .collect::<beck_lab::Result<Vec<_>>>()?;
    Ok(ProjPointSet::new(f, pts))
}

fn load_lines(prime: u64, arg: &str) -> Outcome<ProjLineSet> {
    let f = make_field(prime)?;
    let raw: Vec<[i64; 3]> = load_json(arg)?;
    let lns = raw
        .into_iter()
        .map(|[a, b, c]| ProjLine::new(&f, a, b, c))
        .collect::<beck_lab::Result<Vec<_>>>()?;
    Ok(ProjLineSet::new(f, lns))
}

fn print_json<T: Serialize>(v: &T) -> Outcome<String> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Failure::Hard(e.into()))?;
    emit(&s)?;
    Ok(s)
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(s: &str) -> Outcome<()> {
    match writeln!(std::io::stdout().lock(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Hard(e.into())),
        _ => Ok(()),
    }
}

fn write_csv<T: Serialize>(path: &Option<PathBuf>, rows: &[T]) -> Outcome<()> {
    if let Some(p) = path {
        let file = fs::File::create(p).with_context(|| format!("creating {}", p.display())).map_err(input)?;
        write_csv_rows(rows, file)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StageRow<'a> {
    stage_name: &'a str,
    relation: &'a str,
    measured: f64,
    predicted: Option<f64>,
    ratio: Option<f64>,
}

fn stage_rows(stages: &[Stage]) -> Vec<StageRow<'_>> {
    stages
        .iter()
        .map(|s| StageRow {
            stage_name: &s.stage_name,
            relation: &s.relation,
            measured: s.measured,
            predicted: s.predicted,
            ratio: s.ratio,
        })
        .collect()
}

#[derive(Serialize)]
struct LinesReport {
    prime: u64,
    set: Vec<u64>,
    n: usize,
    lines: usize,
    delta_eff: f64,
    ratio: f64,
    in_range: bool,
}

#[derive(Serialize)]
struct IncidenceReport {
    prime: u64,
    points: usize,
    lines: usize,
    incidences: u64,
    exponent: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct SumProductReport {
    prime: u64,
    n: usize,
    sumset: usize,
    product_set: usize,
    max: usize,
    exponent: f64,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct BsgInstance {
    prime: u64,
    x: Vec<i64>,
    y: Vec<i64>,
    #[serde(default)]
    edges: Option<Vec<(i64, i64)>>,
    #[serde(default)]
    targets: Option<Vec<i64>>,
    #[serde(default)]
    popular_sums: Option<usize>,
}

fn run(cli: Cli) -> Outcome<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::Hard(e.into()))?;
    }
    match &cli.cmd {
        Command::Lines { prime, source, json } => {
            let a = load_set(*prime, source, cli.seed)?;
            let p = a.field().modulus();
            let stat = beck_delta_effective(&cartesian_product(*a.field(), a.as_slice(), a.as_slice()))?;
            let report = LinesReport {
                prime: p,
                set: a.as_slice().to_vec(),
                n: stat.n,
                lines: stat.lines,
                delta_eff: stat.delta_eff,
                ratio: stat.ratio,
                in_range: stat.in_range,
            };
            let text = print_json(&report)?;
            if let Some(out) = json {
                fs::write(out, text).with_context(|| format!("writing {}", out.display())).map_err(input)?;
            }
            write_csv(&cli.csv, &[report])
        }
        Command::Incidences { prime, points, lines } => {
            let pts = load_points(*prime, points)?;
            let lns = load_lines(*prime, lines)?;
            let n = pts.len().max(lns.len()).max(1);
            let i = count_proj_incidences(&pts, &lns);
            let report = IncidenceReport {
                prime: *prime,
                points: pts.len(),
                lines: lns.len(),
                incidences: i,
                exponent: 1.5 - INCIDENCE_EXPONENT_GAP,
                ratio: incidence_ratio(i, n),
            };
            print_json(&report)?;
            write_csv(&cli.csv, &[report])
        }
        Command::SumProduct { prime, source } => {
            let a = load_set(*prime, source, cli.seed)?;
            let s = sum_product_stats(&a)?;
            let report = SumProductReport {
                prime: a.field().modulus(),
                n: s.size,
                sumset: s.sumset,
                product_set: s.product_set,
                max: s.max,
                exponent: s.exponent,
            };
            print_json(&report)?;
            write_csv(&cli.csv, &[report])
        }
        Command::BeckPipeline {
            prime,
            set_a,
            set_b,
            delta,
            params,
        } => {
            let f = make_field(*prime)?;
            let a: Vec<i64> = load_json(set_a)?;
            let b: Vec<i64> = load_json(set_b)?;
            let mut bp: BeckParams = match params {
                Some(s) => load_json(s)?,
                None => BeckParams::default(),
            };
            if let Some(d) = delta {
                bp.delta = *d;
            }
            let trace = run_beck_pipeline(&ElementSet::from_signed(f, a), &ElementSet::from_signed(f, b), &bp)?;
            print_json(&trace)?;
            write_csv(&cli.csv, &stage_rows(&trace.stages))
        }
        Command::IncidencePipeline {
            prime,
            points,
            lines,
            epsilon,
            refine_depth,
            params,
        } => {
            let pts = load_points(*prime, points)?;
            let lns = load_lines(*prime, lines)?;
            let mut ip: IncidenceParams = match params {
                Some(s) => load_json(s)?,
                None => IncidenceParams::default(),
            };
            if let Some(e) = epsilon {
                ip.epsilon = *e;
            }
            if let Some(d) = refine_depth {
                ip.refine_depth = *d;
            }
            let trace = run_incidence_pipeline(&pts, &lns, &ip)?;
            print_json(&trace)?;
            write_csv(&cli.csv, &stage_rows(&trace.stages))
        }
        Command::Bsg { instance, oracle } => {
            let inst: BsgInstance = load_json(instance)?;
            let f = make_field(inst.prime)?;
            let x = ElementSet::from_signed(f, inst.x);
            let y = ElementSet::from_signed(f, inst.y);
            let g = match (inst.edges, inst.targets, inst.popular_sums) {
                (Some(e), None, None) => PairGraph::new(
                    x,
                    y,
                    e.into_iter().map(|(a, b)| (f.reduce(a), f.reduce(b))),
                )?,
                (None, Some(t), None) => PairGraph::from_sum_targets(x, y, &ElementSet::from_signed(f, t))?,
                (None, None, Some(k)) => PairGraph::from_popular_sums(x, y, k)?,
                _ => {
                    return Err(input(anyhow!(
                        "instance needs exactly one of edges, targets or popular_sums"
                    )))
                }
            };
            let extracted = bsg_extract(&g)?;
            let out = if *oracle {
                if g.x().len() > ORACLE_LIMIT {
                    return Err(input(anyhow!("oracle needs n <= {ORACLE_LIMIT}")));
                }
                serde_json::json!({ "extract": extracted, "oracle": bsg_oracle(&g)? })
            } else {
                serde_json::to_value(&extracted).map_err(|e| Failure::Hard(e.into()))?
            };
            print_json(&out)?;
            Ok(())
        }
        Command::Scan { config, out, timestamp } => {
            let mut cfg: ScanConfig = load_json(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let mut record = run_scan(&cfg, cli.threads)?;
            if *timestamp {
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                record.timestamp = Some(format!("unix:{secs}"));
            }
            fs::create_dir_all(out)
                .with_context(|| format!("creating {}", out.display()))
                .map_err(input)?;
            let path = out.join(format!("run-{}.json", record.seed));
            write_record(&record, &path)?;
            if let Some(c) = &cli.csv {
                let file = fs::File::create(c).with_context(|| format!("creating {}", c.display())).map_err(input)?;
                export_csv(&record, file)?;
            }
            emit(&path.display().to_string())?;
            if record.aggregates.errors > 0 {
                return Err(Failure::Hard(anyhow!(
                    "{} of {} instances failed; see {}",
                    record.aggregates.errors,
                    record.aggregates.instances,
                    path.display()
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Hard(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
