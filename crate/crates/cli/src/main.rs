//! `rubric-loop`: run rubric-scoring experiments from the shell.
//!
//! Exit codes: 0 success, 1 validation, 2 gateway, 3 IRR gate failed,
//! 4 experiment locked or changed, 5 internal.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rubric_loop::ops::{al, invalid, irr, pipeline, read_json, read_text, write_text, BackendChoice, Exit, OpsError};
use rubric_loop::service::{self, ServiceState};
use rubric_loop_core::active::{ALConfig, ErrorTag, Selection};
use rubric_loop_core::digest::Digest;
use rubric_loop_core::gateway::GatewayConfig;
use rubric_loop_core::irr::{read_worksheet, ConsensusRecord, DEFAULT_IRR_FRACTION};
use rubric_loop_core::model::CotExemplar;
use rubric_loop_core::storage::{Experiment, DEFAULT_TRAIN_RATIO};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "rubric-loop", version, about = "Score short answers with rubric prompts and a human-in-the-loop active-learning loop")]
struct Cli {
    /// Directory holding `experiment/<id>/`.
    #[arg(long, global = true, env = "RUBRIC_LOOP_HOME", default_value = ".")]
    home: PathBuf,
    /// Experiment id.
    #[arg(short = 'e', long, global = true)]
    experiment: Option<String>,
    /// Refuse to write unless the experiment head is still this digest.
    #[arg(long, global = true)]
    expect_head: Option<String>,
    /// Print results as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an experiment from a rubric and a dataset.
    Init(InitArgs),
    /// Persist a seeded train/test split.
    Split {
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Inter-rater reliability rounds.
    #[command(subcommand)]
    Irr(IrrCmd),
    /// Build and inspect prompts.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Score responses with a stored prompt.
    Score(ScoreArgs),
    /// Metric table for one scoring run.
    Evaluate {
        /// `latest`, a run label such as `few_shot:test`, or a digest prefix.
        #[arg(long, default_value = "latest")]
        run: String,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Active-learning loop.
    #[command(subcommand)]
    Al(AlCmd),
    /// Compare the implementations on the test partition.
    Report {
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Serve the JSON API under /api/v1/.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    rubric: PathBuf,
    /// JSON lines: id, question_id, text, gold.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = pipeline::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
    train_ratio: f64,
    #[arg(long, default_value_t = DEFAULT_IRR_FRACTION)]
    irr_fraction: f64,
    /// Default backend for `score` and `al validate`.
    #[arg(long, value_enum, default_value = "live")]
    gateway: GatewayKind,
    #[arg(long, default_value = pipeline::DEFAULT_MODEL)]
    model: String,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[arg(long)]
    max_additions: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GatewayKind {
    Live,
    Mock,
}

#[derive(Subcommand)]
enum IrrCmd {
    /// Draw the IRR sample from the train partition and print a rater sheet.
    Sample {
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the blank rater sheet here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute a round from two rater sheets; exits 3 if the gate fails.
    Compute {
        #[arg(long)]
        rater_a: PathBuf,
        #[arg(long)]
        rater_b: PathBuf,
        /// Defaults to the file stem.
        #[arg(long)]
        rater_a_id: Option<String>,
        #[arg(long)]
        rater_b_id: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Write the disagreement worksheet here.
        #[arg(long)]
        worksheet: Option<PathBuf>,
    },
    /// Submit consensus from a filled worksheet or a JSON record list.
    #[command(group(ArgGroup::new("source").required(true).args(["worksheet", "records"])))]
    Consensus {
        #[arg(long)]
        worksheet: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
        /// Comma-separated names recorded on worksheet decisions.
        #[arg(long, value_delimiter = ',')]
        resolved_by: Vec<String>,
    },
    /// Close the round and emit exemplars.
    Advance {
        /// JSON map: response id to subscore to reasoning text.
        #[arg(long)]
        drafts: Option<PathBuf>,
    },
    /// Show the latest round and its open disagreements.
    Show,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    ZeroShot,
    FewShot,
    FewShotCot,
    CotAl,
}

#[derive(Subcommand)]
enum PromptCmd {
    /// Build and store a prompt spec; fails on unbalanced exemplars.
    Build {
        #[arg(long, value_enum)]
        mode: Mode,
        /// JSON array of exemplars.
        #[arg(long, conflicts_with = "from_irr")]
        exemplars: Option<PathBuf>,
        /// Use the exemplars from the last closed IRR round.
        #[arg(long)]
        from_irr: bool,
        #[arg(long)]
        allow_unbalanced: bool,
        #[arg(long)]
        persona: Option<PathBuf>,
        #[arg(long)]
        format: Option<PathBuf>,
    },
    /// Print a stored prompt, optionally filled with one response.
    Render {
        /// Implementation label or digest prefix.
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        response: Option<String>,
    },
}

#[derive(Args)]
struct ScoreArgs {
    /// Implementation label or digest prefix.
    #[arg(long)]
    prompt: String,
    #[arg(long, value_enum, default_value = "test", conflicts_with = "ids")]
    partition: PartitionArg,
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Keep the scores of the latest run with this label and retry its failures.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Train,
    Test,
    All,
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Defaults to the experiment's configured gateway.
    #[arg(long, value_enum)]
    backend: Option<BackendFlag>,
    /// JSON array of {prompt_digest, text} for the script backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// JSON array of {subscore, members} for the repaired backend.
    #[arg(long)]
    cohorts: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendFlag {
    EchoGold,
    Live,
    Script,
    Repaired,
}

impl BackendArgs {
    fn choice(&self, exp: Option<&Experiment>) -> Result<Option<BackendChoice>, OpsError> {
        let flag = match (self.backend, &self.script, &self.cohorts) {
            (Some(f), _, _) => f,
            (None, Some(_), _) => BackendFlag::Script,
            (None, None, Some(_)) => BackendFlag::Repaired,
            (None, None, None) => {
                return match exp {
                    Some(e) => Ok(Some(BackendChoice::configured(&e.config()?))),
                    None => Ok(None),
                }
            }
        };
        Ok(Some(match flag {
            BackendFlag::EchoGold => BackendChoice::EchoGold,
            BackendFlag::Live => BackendChoice::Live,
            BackendFlag::Script => BackendChoice::Script {
                entries: read_json(self.script.as_deref().ok_or_else(|| invalid("--backend script needs --script"))?)?,
            },
            BackendFlag::Repaired => BackendChoice::Repaired {
                cohorts: read_json(
                    self.cohorts.as_deref().ok_or_else(|| invalid("--backend repaired needs --cohorts"))?,
                )?,
            },
        }))
    }
}

#[derive(Subcommand)]
enum AlCmd {
    /// Start the loop from a few_shot_cot prompt.
    Init {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        max_iterations: Option<u32>,
        #[arg(long)]
        max_additions: Option<usize>,
    },
    /// Score the validation pool with the current prompt.
    Validate {
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Record error tags (JSON array) for the last iteration.
    Tag {
        #[arg(long)]
        tags: PathBuf,
    },
    /// Choose candidates covering the tagged patterns.
    Select {
        #[arg(long)]
        worksheet: Option<PathBuf>,
    },
    /// Tag and select, or apply accept/reject decisions.
    #[command(group(ArgGroup::new("input").required(true).args(["tags", "accept", "interactive"])))]
    Step {
        #[arg(long)]
        tags: Option<PathBuf>,
        /// JSON: {"accept": [{"response_id", "reasoning"}], "reject": [ids]}.
        #[arg(long)]
        accept: Option<PathBuf>,
        /// Review each candidate at the terminal.
        #[arg(long)]
        interactive: bool,
        #[arg(long)]
        worksheet: Option<PathBuf>,
    },
    /// Show iterations and the stop decision.
    Status,
    /// Show one iteration with misclassified instances and raw generations.
    Show {
        #[arg(long)]
        iteration: u32,
    },
    /// Restore an earlier prompt; defaults to the overfit revert target.
    Revert {
        #[arg(long)]
        to: Option<u32>,
    },
}

/// What a command prints and how it exits.
struct Outcome {
    exit: Exit,
    text: String,
    json: serde_json::Value,
}

fn done<T: Serialize>(text: impl Into<String>, data: &T) -> Outcome {
    Outcome {
        exit: Exit::Ok,
        text: text.into(),
        json: serde_json::to_value(data).expect("results serialize"),
    }
}

struct Ctx {
    home: PathBuf,
    experiment: Option<String>,
    expected: Option<Digest>,
}

impl Ctx {
    fn exp(&self) -> Result<Experiment, OpsError> {
        let id = self
            .experiment
            .as_deref()
            .ok_or_else(|| invalid("this command needs --experiment/-e"))?;
        Ok(Experiment::open(&self.home, id)?)
    }

    fn expected(&self) -> Option<&Digest> {
        self.expected.as_ref()
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "rater".into())
}

fn selection_text(sel: &Selection) -> String {
    match sel {
        Selection::Exhausted { reason } => format!("selection exhausted: {reason}\n"),
        Selection::Candidates { candidates, certificate } => {
            let mut out = format!("{} candidate(s), stop: {:?}\n", candidates.len(), certificate.stop);
            for c in candidates {
                out.push_str(&format!("  {} covers {} (gain {})\n", c.exemplar.id(), c.covers.join(", "), c.gain));
            }
            if !certificate.uncovered.is_empty() {
                out.push_str(&format!("  uncovered: {}\n", certificate.uncovered.join(", ")));
            }
            out
        }
    }
}

fn status_text(s: &al::AlStatus) -> String {
    let mut out = format!(
        "prompt {} with {} exemplar(s), pool {}\n",
        s.spec_digest.short(),
        s.exemplars,
        s.pool
    );
    for it in &s.iterations {
        out.push_str(&format!(
            "  iteration {}: {} error(s), prompt {}, {}\n",
            it.index,
            it.error_count,
            it.prompt_spec_digest.short(),
            it.decision.status
        ));
    }
    out.push_str(&format!("decision: {} ({})\n", s.decision.status, s.decision.reason));
    if let Some(to) = s.decision.revert_to {
        out.push_str(&format!("revert to iteration {to}\n"));
    }
    out
}

fn prompt_line(out: &mut impl Write, input: &mut impl BufRead, prompt: &str) -> Result<String, OpsError> {
    let io = |e: std::io::Error| OpsError::Io {
        path: "terminal".into(),
        reason: e.to_string(),
    };
    write!(out, "{prompt}").map_err(io)?;
    out.flush().map_err(io)?;
    let mut line = String::new();
    if input.read_line(&mut line).map_err(io)? == 0 {
        return Err(invalid("input ended before every candidate was reviewed"));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

/// Walks the candidates at the terminal. Accepting keeps the draft reasoning
/// shown; editing replaces it line by line.
fn review(exp: &Experiment, input: &mut impl BufRead, out: &mut impl Write) -> Result<al::AcceptRequest, OpsError> {
    let rubric = exp.config()?.rubric;
    let candidates = al::candidates(exp)?;
    if candidates.is_empty() {
        return Err(invalid("the last iteration has no candidates; run `al select` first"));
    }
    let io = |e: std::io::Error| OpsError::Io {
        path: "terminal".into(),
        reason: e.to_string(),
    };
    let mut req = al::AcceptRequest::default();
    for c in candidates {
        let e = &c.exemplar;
        writeln!(out, "\n{} (covers {})\n{}", e.id(), c.covers.join(", "), e.response.text).map_err(io)?;
        for name in rubric.subscore_names() {
            let value = e.gold.get(name).unwrap_or(0);
            let draft = e.reasoning.get(name).map(String::as_str).unwrap_or("");
            writeln!(out, "  {name} = {value}: {draft}").map_err(io)?;
        }
        loop {
            match prompt_line(out, input, "[a]ccept, [e]dit, [r]eject? ")?.trim() {
                "a" | "accept" => {
                    req.accept.push(al::Acceptance {
                        response_id: e.id().to_string(),
                        reasoning: e.reasoning.clone(),
                    });
                }
                "e" | "edit" => {
                    let mut reasoning = BTreeMap::new();
                    for name in rubric.subscore_names() {
                        let draft = e.reasoning.get(name).cloned().unwrap_or_default();
                        let line = prompt_line(out, input, &format!("  {name} (blank keeps the draft): "))?;
                        reasoning.insert(name.to_string(), if line.trim().is_empty() { draft } else { line });
                    }
                    req.accept.push(al::Acceptance {
                        response_id: e.id().to_string(),
                        reasoning,
                    });
                }
                "r" | "reject" => req.reject.push(e.id().to_string()),
                _ => continue,
            }
            break;
        }
    }
    Ok(req)
}

async fn run(cli: Cli) -> Result<Outcome, OpsError> {
    let expected = match &cli.expect_head {
        Some(s) => Some(s.parse::<Digest>().map_err(|_| invalid(format!("--expect-head {s} is not a digest")))?),
        None => None,
    };
    let ctx = Ctx {
        home: cli.home.clone(),
        experiment: cli.experiment.clone(),
        expected,
    };
    match cli.command {
        Command::Init(a) => {
            let id = ctx
                .experiment
                .clone()
                .ok_or_else(|| invalid("init needs --experiment/-e for the new id"))?;
            let mut gateway = match a.gateway {
                GatewayKind::Live => GatewayConfig::live(a.model),
                GatewayKind::Mock => GatewayConfig {
                    model_id: a.model,
                    ..GatewayConfig::mock()
                },
            };
            if let Some(url) = a.base_url {
                gateway.base_url = url;
            }
            let mut active_learning = ALConfig::default();
            if let Some(n) = a.max_iterations {
                active_learning.max_iterations = n;
            }
            if let Some(n) = a.max_additions {
                active_learning.max_additions = n;
            }
            let r = pipeline::init(
                &ctx.home,
                pipeline::InitRequest {
                    id,
                    rubric: a.rubric,
                    dataset: a.dataset,
                    seed: a.seed,
                    train_ratio: a.train_ratio,
                    irr_fraction: a.irr_fraction,
                    gateway,
                    active_learning,
                },
            )?;
            Ok(done(format!("created {} with {} responses at {}\n", r.id, r.responses, r.root), &r))
        }
        Command::Split { ratio, seed } => {
            let exp = ctx.exp()?;
            let r = pipeline::split(&exp, ratio, seed, ctx.expected())?;
            Ok(done(
                format!(
                    "split {}: {} train, {} test (seed {}, ratio {})\n",
                    r.digest.short(),
                    r.split.train_ids.len(),
                    r.split.test_ids.len(),
                    r.split.seed,
                    r.split.ratio
                ),
                &r,
            ))
        }
        Command::Irr(cmd) => irr_command(&ctx, cmd),
        Command::Prompt(PromptCmd::Build {
            mode,
            exemplars,
            from_irr,
            allow_unbalanced,
            persona,
            format,
        }) => {
            let exp = ctx.exp()?;
            let implementation = match mode {
                Mode::ZeroShot => pipeline::Implementation::ZeroShot,
                Mode::FewShot => pipeline::Implementation::FewShot,
                Mode::FewShotCot => pipeline::Implementation::FewShotCot,
                Mode::CotAl => pipeline::Implementation::CotAl,
            };
            let exemplars = match (exemplars, from_irr) {
                (Some(path), _) => pipeline::ExemplarInput::Given {
                    exemplars: read_json::<Vec<CotExemplar>>(&path)?,
                },
                (None, true) => pipeline::ExemplarInput::Irr,
                (None, false) => pipeline::ExemplarInput::None,
            };
            let req = pipeline::BuildRequest {
                implementation,
                exemplars,
                allow_unbalanced,
                persona: persona.as_deref().map(read_text).transpose()?,
                format: format.as_deref().map(read_text).transpose()?,
            };
            let r = pipeline::build_prompt(&exp, req, ctx.expected())?;
            let mut text = format!(
                "prompt {} ({}) with {} exemplar(s), rendered {}\n",
                r.digest.short(),
                r.label,
                r.exemplar_ids.len(),
                r.prompt_digest.short()
            );
            for v in r.balance.violations.iter().filter(|_| !r.exemplar_ids.is_empty()) {
                text.push_str(&format!("warning: {v}\n"));
            }
            Ok(done(text, &r))
        }
        Command::Prompt(PromptCmd::Render { prompt, response }) => {
            let exp = ctx.exp()?;
            let text = pipeline::render(&exp, &prompt, response.as_deref())?;
            Ok(done(text.clone(), &text))
        }
        Command::Score(a) => {
            let exp = ctx.exp()?;
            let target = if a.ids.is_empty() {
                pipeline::Target::Partition {
                    partition: match a.partition {
                        PartitionArg::Train => pipeline::Partition::Train,
                        PartitionArg::Test => pipeline::Partition::Test,
                        PartitionArg::All => pipeline::Partition::All,
                    },
                }
            } else {
                pipeline::Target::Ids { ids: a.ids }
            };
            let backend = a.backend.choice(Some(&exp))?.expect("an experiment always yields a backend");
            let req = pipeline::ScoreRequest {
                prompt: a.prompt,
                target,
                backend,
                resume: a.resume,
            };
            let r = pipeline::score(&exp, req, ctx.expected()).await?;
            let mut text = format!(
                "run {} ({}): {} scored, {} flagged, {} failed\n",
                r.record.short(),
                r.label,
                r.scored,
                r.flagged,
                r.failures.len()
            );
            for (id, why) in &r.failures {
                text.push_str(&format!("  {id}: {why}\n"));
            }
            let mut outcome = done(text, &r);
            if !r.failures.is_empty() {
                outcome.text.push_str("rerun with --resume to retry the failures\n");
                outcome.exit = Exit::Gateway;
            }
            Ok(outcome)
        }
        Command::Evaluate { run, csv } => {
            let exp = ctx.exp()?;
            let r = pipeline::evaluate(&exp, &run)?;
            if let Some(path) = csv {
                write_text(&path, &r.csv)?;
            }
            Ok(done(r.table.clone(), &r))
        }
        Command::Report { csv } => {
            let exp = ctx.exp()?;
            let r = pipeline::report(&exp)?;
            if let Some(path) = csv {
                write_text(&path, &r.csv)?;
            }
            let mut text = r.table.clone();
            if !r.missing.is_empty() {
                text.push_str(&format!("\nnot scored on test: {}\n", r.missing.join(", ")));
            }
            Ok(done(text, &r))
        }
        Command::Al(cmd) => al_command(&ctx, cmd).await,
        Command::Serve { addr, backend } => {
            let exp = ctx.experiment.as_deref().map(|id| Experiment::open(&ctx.home, id)).transpose()?;
            let state = ServiceState {
                home: ctx.home.clone(),
                backend: backend.choice(exp.as_ref())?,
            };
            service::serve(addr, state).await.map_err(|e| OpsError::Io {
                path: addr.to_string(),
                reason: e.to_string(),
            })?;
            Ok(done("", &()))
        }
    }
}

fn irr_command(ctx: &Ctx, cmd: IrrCmd) -> Result<Outcome, OpsError> {
    let exp = ctx.exp()?;
    match cmd {
        IrrCmd::Sample { fraction, seed, out } => {
            let r = irr::sample(&exp, fraction, seed)?;
            match out {
                Some(path) => {
                    write_text(&path, &r.template)?;
                    Ok(done(format!("{} response(s) sampled; sheet written to {}\n", r.ids.len(), path.display()), &r))
                }
                None => Ok(done(r.template.clone(), &r)),
            }
        }
        IrrCmd::Compute {
            rater_a,
            rater_b,
            rater_a_id,
            rater_b_id,
            threshold,
            worksheet,
        } => {
            let a = irr::RaterSheet {
                rater_id: rater_a_id.unwrap_or_else(|| stem(&rater_a)),
                csv: read_text(&rater_a)?,
            };
            let b = irr::RaterSheet {
                rater_id: rater_b_id.unwrap_or_else(|| stem(&rater_b)),
                csv: read_text(&rater_b)?,
            };
            let r = irr::compute(&exp, a, b, threshold, ctx.expected())?;
            if let Some(path) = worksheet {
                write_text(&path, &r.worksheet)?;
            }
            let mut text = format!("round {} ({})\n", r.round.round_index, r.digest.short());
            for (name, k) in &r.round.kappa_by_subscore {
                text.push_str(&format!("  {name}: kappa {k:.3}\n"));
            }
            text.push_str(&format!("{} disagreement(s)\n", r.round.disagreements.len()));
            let mut outcome = done(text, &r);
            if !r.round.passed {
                let e = OpsError::GateFailed {
                    failing: r.round.failing_subscores().into_iter().map(|(s, k)| (s.to_string(), k)).collect(),
                    threshold: r.round.threshold,
                };
                outcome.text.push_str(&format!("{e}\n"));
                outcome.exit = Exit::GateFailed;
            }
            Ok(outcome)
        }
        IrrCmd::Consensus {
            worksheet,
            records,
            resolved_by,
        } => {
            let records: Vec<ConsensusRecord> = match (worksheet, records) {
                (Some(path), _) => read_worksheet(&read_text(&path)?, &resolved_by)?,
                (None, Some(path)) => read_json(&path)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let r = irr::submit_consensus(&exp, records, ctx.expected())?;
            Ok(done(
                format!(
                    "{} consensus record(s); {} disagreement(s) open\n",
                    r.consensus.len(),
                    r.uncovered.len()
                ),
                &r,
            ))
        }
        IrrCmd::Advance { drafts } => {
            let drafts = drafts.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let r = irr::advance(&exp, drafts, ctx.expected())?;
            Ok(done(
                format!("{} exemplar(s) emitted ({})\n", r.exemplars.len(), r.exemplars_digest.short()),
                &r,
            ))
        }
        IrrCmd::Show => {
            let r = irr::view(&exp)?;
            let mut text = format!(
                "round {} passed: {}; {} disagreement(s), {} open\n",
                r.round.round_index,
                r.round.passed,
                r.round.disagreements.len(),
                r.uncovered.len()
            );
            text.push_str(&r.worksheet);
            Ok(done(text, &r))
        }
    }
}

async fn al_command(ctx: &Ctx, cmd: AlCmd) -> Result<Outcome, OpsError> {
    let exp = ctx.exp()?;
    let expected = ctx.expected();
    match cmd {
        AlCmd::Init {
            prompt,
            max_iterations,
            max_additions,
        } => {
            let r = al::init(
                &exp,
                al::InitRequest {
                    prompt,
                    max_iterations,
                    max_additions,
                },
                expected,
            )?;
            Ok(done(status_text(&r), &r))
        }
        AlCmd::Validate { backend } => {
            let backend = backend.choice(Some(&exp))?.expect("an experiment always yields a backend");
            let r = al::validate(&exp, &backend, expected).await?;
            let mut text = format!("iteration {}: {} error(s)\n", r.index, r.error_count);
            for (name, n) in &r.errors_by_subscore {
                text.push_str(&format!("  {name}: {n}\n"));
            }
            text.push_str(&format!("decision: {} ({})\n", r.decision.status, r.decision.reason));
            Ok(done(text, &r))
        }
        AlCmd::Tag { tags } => {
            let r = al::tag(&exp, read_json::<Vec<ErrorTag>>(&tags)?, expected)?;
            Ok(done(status_text(&r), &r))
        }
        AlCmd::Select { worksheet } => {
            let r = al::select(&exp, expected)?;
            if let Some(path) = worksheet {
                write_text(&path, &r.worksheet)?;
            }
            Ok(done(selection_text(&r.selection), &r))
        }
        AlCmd::Step {
            tags,
            accept,
            interactive,
            worksheet,
        } => {
            if let Some(path) = tags {
                al::tag(&exp, read_json::<Vec<ErrorTag>>(&path)?, expected)?;
                let r = al::select(&exp, None)?;
                if let Some(path) = worksheet {
                    write_text(&path, &r.worksheet)?;
                }
                return Ok(done(selection_text(&r.selection), &r));
            }
            let req = match accept {
                Some(path) => read_json::<al::AcceptRequest>(&path)?,
                None => {
                    debug_assert!(interactive);
                    let stdin = std::io::stdin();
                    review(&exp, &mut stdin.lock(), &mut std::io::stderr())?
                }
            };
            let r = al::accept(&exp, req, expected)?;
            Ok(done(status_text(&r), &r))
        }
        AlCmd::Status => {
            let r = al::status(&exp)?;
            Ok(done(status_text(&r), &r))
        }
        AlCmd::Show { iteration } => {
            let r = al::iteration(&exp, iteration)?;
            let mut text = format!(
                "iteration {}: {} error(s)\n",
                r.iteration.index, r.iteration.error_count
            );
            for m in &r.misclassified {
                let pred = m.pred.map_or("unparsed".to_string(), |p| p.to_string());
                text.push_str(&format!("  {} {}: predicted {pred}, gold {}\n", m.response_id, m.subscore, m.gold));
            }
            Ok(done(text, &r))
        }
        AlCmd::Revert { to } => {
            let r = al::revert(&exp, to, expected)?;
            Ok(done(status_text(&r), &r))
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli).await {
        Ok(outcome) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&outcome.json).expect("json value serializes"));
            } else {
                print!("{}", outcome.text);
            }
            ExitCode::from(outcome.exit.code())
        }
        Err(e) => {
            if json {
                let body = serde_json::json!({
                    "error": {"module": e.module(), "code": e.code(), "message": e.to_string(), "exit_code": e.exit().code()}
                });
                println!("{body}");
            }
            eprintln!("error[{}/{}]: {e}", e.module(), e.code());
            ExitCode::from(e.exit().code())
        }
    }
}
