//! `reportree` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 at least one agent
//! session failed. Errors go to stderr as `error[<kind>]: <message>`.

use std::fmt;
use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use log::info;

use reportree::agents::{
    render_training_samples, run_evaluation, serve, training_samples, AgentSpec, BuiltinKind,
    EvalOptions, MajorityStats,
};
use reportree::atomic::write_atomic;
use reportree::lexicon::{load_corpus, load_vocabulary, Corpus};
use reportree::metrics::{render_metrics_json, render_metrics_text};
use reportree::report::{
    check_consistency, make_splits, parse_reports, populate_gold_reports, render_reports, Split,
    SplitAssignment, StructuredReport,
};
use reportree::synthgen::{generate, SynthConfig};
use reportree::template::{build_template, template_stats, FindingClass, Level, ReportTemplate};

/// Writes to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = write!(io::stdout(), $($arg)*);
    }};
}

macro_rules! sayln {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "reportree",
    version,
    about = "Structured report benchmark engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic vocabulary, corpus, images and manifest.
    GenSynth {
        /// TOML file with generator settings; omitted keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Derive the question template from a corpus.
    BuildTemplate {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Populate one gold report per image.
    MakeReports {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write teacher-forcing samples (one JSON object per question).
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Assign patients to train/val/test.
    Split {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Train, val and test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
        ratios: [f64; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one session per gold report and score the predictions.
    Evaluate(EvaluateArgs),
    /// Print per-level question, answer and path counts.
    Stats {
        #[arg(long)]
        template: PathBuf,
    },
    /// Report consistency violations in a reports file.
    Check {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        reports: PathBuf,
    },
    /// Serve a builtin agent over the wire protocol.
    ServeAgent {
        #[arg(long)]
        template: PathBuf,
        /// oracle, all-negative, majority or random:<seed>.
        #[arg(long)]
        agent: AgentSpec,
        /// Gold reports, required by the oracle.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Training reports for the majority agent.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Listen on this address for one connection instead of using stdin/stdout.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// oracle, all-negative, majority, random:<seed>, exec:<cmd> or tcp:<addr>.
    #[arg(long)]
    agent: AgentSpec,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    parallelism: u64,
    /// Metrics text file; the JSON form goes next to it with a `.json` extension.
    #[arg(long)]
    out: PathBuf,
    /// Training reports for the majority agent; defaults to the gold reports.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Split file restricting the gold (and training) reports.
    #[arg(long, requires = "subset")]
    splits: Option<PathBuf>,
    /// Which split to evaluate when `--splits` is given.
    #[arg(long, requires = "splits")]
    subset: Option<Split>,
    /// Per-question timeout for external agents, in seconds.
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Write the predicted reports here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected three ratios, got {}", v.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage,
    Data,
    Agent,
}

impl Kind {
    fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Agent => 3,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Agent => "agent",
        })
    }
}

struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

type Outcome<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn or_fail(self, kind: Kind, context: impl fmt::Display) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_fail(self, kind: Kind, context: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| Failure {
            kind,
            error: e.into().context(context.to_string()),
        })
    }
}

fn fail<T>(kind: Kind, msg: impl fmt::Display) -> Outcome<T> {
    Err(Failure {
        kind,
        error: anyhow::anyhow!("{msg}"),
    })
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).or_fail(Kind::Data, format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    write_atomic(path, bytes).or_fail(Kind::Data, format!("writing {}", path.display()))?;
    info!("wrote {} ({} bytes)", path.display(), bytes.len());
    Ok(())
}

fn load_template(path: &Path) -> Outcome<ReportTemplate> {
    let bytes = fs::read(path).or_fail(Kind::Data, format!("reading {}", path.display()))?;
    ReportTemplate::deserialize(&bytes).or_fail(Kind::Data, format!("parsing {}", path.display()))
}

fn load_inputs(vocab: &Path, corpus: &Path) -> Outcome<Corpus> {
    let v = load_vocabulary(vocab).or_fail(Kind::Data, "loading vocabulary")?;
    load_corpus(corpus, &v).or_fail(Kind::Data, "loading corpus")
}

fn load_reports(path: &Path) -> Outcome<Vec<StructuredReport>> {
    parse_reports(&read_text(path)?).or_fail(Kind::Data, format!("parsing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RESTRUCT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            match text.strip_prefix("error: ") {
                Some(rest) => eprint!("error[{}]: {rest}", Kind::Usage),
                None => eprint!("error[{}]: missing subcommand\n{text}", Kind::Usage),
            }
            return ExitCode::from(Kind::Usage.exit_code());
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {:#}", f.kind, f.error);
            ExitCode::from(f.kind.exit_code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenSynth {
            config,
            seed,
            out_dir,
        } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => toml::from_str(&read_text(&p)?)
                    .or_fail(Kind::Usage, format!("parsing {}", p.display()))?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let out = generate(&cfg).or_fail(Kind::Usage, "generating synthetic data")?;
            out.write_to(&out_dir)
                .or_fail(Kind::Data, format!("writing {}", out_dir.display()))?;
            sayln!(
                "generated {} patients, {} findings, {} images in {}",
                out.manifest.patients.len(),
                out.manifest.finding_count,
                out.images.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::BuildTemplate { vocab, corpus, out } => {
            let c = load_inputs(&vocab, &corpus)?;
            let t = build_template(&c).or_fail(Kind::Data, "building template")?;
            write(&out, &t.serialize())?;
            sayln!(
                "template: {} questions, fingerprint {}",
                t.len(),
                t.fingerprint()
            );
            Ok(())
        }
        Command::MakeReports {
            template,
            vocab,
            corpus,
            out,
            samples,
        } => {
            let t = load_template(&template)?;
            let c = load_inputs(&vocab, &corpus)?;
            if c.vocabulary.fingerprint() != t.vocab_fingerprint() {
                return fail(
                    Kind::Data,
                    "vocabulary does not match the template's fingerprint",
                );
            }
            let golds = populate_gold_reports(&t, &c).or_fail(Kind::Data, "populating reports")?;
            write(&out, render_reports(&golds).as_bytes())?;
            if let Some(path) = samples {
                let s =
                    training_samples(&t, &golds).or_fail(Kind::Data, "replaying gold sessions")?;
                write(&path, render_training_samples(&s).as_bytes())?;
            }
            sayln!("{} reports", golds.len());
            Ok(())
        }
        Command::Split {
            vocab,
            corpus,
            ratios,
            seed,
            out,
        } => {
            let c = load_inputs(&vocab, &corpus)?;
            let s = make_splits(&c, ratios, seed).or_fail(Kind::Usage, "splitting")?;
            write(&out, s.render().as_bytes())?;
            let counts: Vec<String> = Split::ALL
                .iter()
                .map(|&x| format!("{x}={}", s.count(x)))
                .collect();
            sayln!("patients {}", counts.join(" "));
            Ok(())
        }
        Command::Evaluate(args) => evaluate(args),
        Command::Stats { template } => {
            let t = load_template(&template)?;
            say!("{}", render_stats(&t));
            Ok(())
        }
        Command::Check { template, reports } => {
            let t = load_template(&template)?;
            let reports = load_reports(&reports)?;
            let mut bad = 0;
            for r in &reports {
                let v = check_consistency(r, &t);
                if !v.is_empty() {
                    bad += 1;
                }
                for v in v {
                    sayln!("{}\t{}\t{v}", r.patient_id, r.image_ref);
                }
            }
            sayln!("{} reports, {bad} inconsistent", reports.len());
            if bad > 0 {
                return fail(Kind::Data, format!("{bad} inconsistent report(s)"));
            }
            Ok(())
        }
        Command::ServeAgent {
            template,
            agent,
            gold,
            train,
            listen,
        } => {
            let t = load_template(&template)?;
            let AgentSpec::Builtin(kind) = agent else {
                return fail(Kind::Usage, "serve-agent hosts builtin agents only");
            };
            let golds = match gold {
                Some(p) => load_reports(&p)?,
                None if kind == BuiltinKind::Oracle => {
                    return fail(Kind::Usage, "the oracle needs --gold")
                }
                None => Vec::new(),
            };
            let majority = match (kind, train) {
                (BuiltinKind::Majority, Some(p)) => {
                    Some(MajorityStats::from_reports(&t, &load_reports(&p)?))
                }
                (BuiltinKind::Majority, None) => {
                    return fail(Kind::Usage, "the majority agent needs --train")
                }
                _ => None,
            };
            match listen {
                None => serve(
                    &t,
                    kind,
                    &golds,
                    majority.as_ref(),
                    io::stdin().lock(),
                    io::stdout().lock(),
                )
                .or_fail(Kind::Agent, "serving on stdio"),
                Some(addr) => {
                    let listener =
                        TcpListener::bind(&addr).or_fail(Kind::Usage, format!("binding {addr}"))?;
                    eprintln!(
                        "listening on {}",
                        listener.local_addr().or_fail(Kind::Data, "socket")?
                    );
                    let (stream, peer) = listener.accept().or_fail(Kind::Agent, "accepting")?;
                    info!("connection from {peer}");
                    let reader = BufReader::new(stream.try_clone().or_fail(Kind::Agent, "socket")?);
                    serve(&t, kind, &golds, majority.as_ref(), reader, stream)
                        .or_fail(Kind::Agent, "serving")
                }
            }
        }
    }
}

fn restrict(
    reports: Vec<StructuredReport>,
    splits: Option<&(SplitAssignment, Split)>,
) -> Vec<StructuredReport> {
    match splits {
        None => reports,
        Some((s, which)) => reports
            .into_iter()
            .filter(|r| s.split_of(&r.patient_id) == Some(*which))
            .collect(),
    }
}

fn evaluate(args: EvaluateArgs) -> Outcome {
    let t = load_template(&args.template)?;
    let splits = match (&args.splits, args.subset) {
        (Some(p), Some(which)) => {
            let s = SplitAssignment::parse(&read_text(p)?)
                .or_fail(Kind::Data, format!("parsing {}", p.display()))?;
            Some((s, which))
        }
        _ => None,
    };
    let all_golds = load_reports(&args.gold)?;
    let golds = restrict(all_golds.clone(), splits.as_ref());
    if golds.is_empty() {
        return fail(Kind::Data, "no gold reports to evaluate");
    }
    let majority = match &args.agent {
        AgentSpec::Builtin(BuiltinKind::Majority) => {
            let train = match &args.train {
                Some(p) => load_reports(p)?,
                None => match &splits {
                    Some((s, _)) => restrict(all_golds, Some(&(s.clone(), Split::Train))),
                    None => all_golds,
                },
            };
            Some(MajorityStats::from_reports(&t, &train))
        }
        _ => None,
    };
    let opts = EvalOptions {
        parallelism: args.parallelism as usize,
        timeout: Duration::from_secs(args.timeout_secs),
        majority,
    };
    let started = Instant::now();
    let eval = run_evaluation(&t, &golds, &args.agent, &opts).or_fail(Kind::Agent, "evaluation")?;
    info!(
        "evaluated {} sessions in {:.2?}",
        golds.len(),
        started.elapsed()
    );
    let text = render_metrics_text(&eval.metrics);
    write(&args.out, text.as_bytes())?;
    write(
        &args.out.with_extension("json"),
        render_metrics_json(&eval.metrics).as_bytes(),
    )?;
    if let Some(p) = &args.predictions {
        write(p, render_reports(&eval.predictions).as_bytes())?;
    }
    say!("{text}");
    let s = &eval.summary;
    sayln!(
        "agent {}: {} sessions, {} questions, {} failed",
        s.agent,
        s.sessions,
        s.questions,
        s.failed
    );
    for f in &s.failures {
        eprintln!(
            "session {} ({}/{}): {}",
            f.session_id, f.patient_id, f.image_ref, f.reason
        );
    }
    if s.failed > 0 {
        return fail(
            Kind::Agent,
            format!("{} of {} sessions failed", s.failed, s.sessions),
        );
    }
    Ok(())
}

fn render_stats(t: &ReportTemplate) -> String {
    let s = template_stats(t);
    let mut out = String::new();
    let counts: Vec<String> = Level::ALL
        .iter()
        .map(|&l| format!("{l}={}", s.level(l).questions))
        .collect();
    out.push_str(&format!("questions {}\n", counts.join(" ")));
    out.push_str("level  questions  answers  paths  mean_options\n");
    for level in Level::ALL {
        let l = s.level(level);
        out.push_str(&format!(
            "{:<5}  {:>9}  {:>7}  {:>5}  {:>12.2}\n",
            level.to_string(),
            l.questions,
            l.unique_answers,
            l.paths,
            l.mean_options
        ));
    }
    out.push_str(&format!("total paths {}\n", s.total_paths()));
    for class in FindingClass::ALL {
        out.push_str(&format!(
            "L2 {} {}\n",
            class.plural(),
            s.l2_topics.get(&class).copied().unwrap_or(0)
        ));
    }
    out
}
