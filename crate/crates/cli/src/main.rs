mod config;

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fsb_core::backend::LanguageModel;
use fsb_core::bot::{Conversation, FewShotBot, StepOptions, BUNDLED_SHOTS};
use fsb_core::dialogue::{load_dialogues, read_dialogues, Dialogue};
use fsb_core::harness::{run_eval, TaskConfig};
use fsb_core::parsing::{constrained_kg_decode, parse_dsl, track_state, DEFAULT_PATH_CANDIDATES};
use fsb_core::prompt::{build_shot_prompt, TemplateRegistry};
use fsb_core::retrieval::{KnowledgeGraph, KnowledgeText};
use fsb_core::selector::{select_skill, SkillPromptSet};
use fsb_service::api::{self, AppState};
use fsb_service::store::SessionStore;

use config::Config;

#[derive(Parser)]
#[command(name = "fsb", version, about = "Prompt-based few-shot dialogue bot")]
struct Cli {
    /// TOML config with the backend, fixtures and prompt files.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// LM backend: a server URL, mock:<file.json> or uniform:<V>.
    #[arg(long, global = true)]
    backend: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick the skill whose prompt makes the dialogue history most likely.
    SelectSkill {
        /// JSONL dialogues; the first is scored.
        #[arg(long)]
        history: PathBuf,
        /// A directory of `<label>.jsonl` shot files, or one JSONL file
        /// grouped by each dialogue's task.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 4)]
        in_flight: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run a conversational parser over every dialogue in a file.
    Parse {
        /// wow-parse, wit-parse, msc-parse, mwoz-dst or dialkg-parse.
        #[arg(long)]
        task: String,
        #[arg(long)]
        history: PathBuf,
        /// Shot dialogues for the prompt; defaults to the bundled shot.
        #[arg(long)]
        shots: Option<PathBuf>,
        /// Knowledge graph TSV, for dialkg-parse.
        #[arg(long)]
        kg: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PATH_CANDIDATES)]
        k: usize,
    },
    /// Run a k-shot evaluation and print the report.
    Eval {
        /// Task TOML (task, validation, test, shots, runs, seed, ...).
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Resumable progress log.
        #[arg(long)]
        progress: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Human-readable table instead of JSON.
        #[arg(long)]
        text: bool,
    },
    /// Chat on stdin/stdout.
    Chat {
        #[arg(long)]
        pin_skill: Option<String>,
        #[arg(long)]
        style: Option<String>,
        /// Caption of an image the conversation is about.
        #[arg(long)]
        caption: Option<String>,
        /// Write the response bundles here as JSONL on exit.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Serve the chat session API and page.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Session directory; overrides the config.
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Allow binding a non-loopback address. The bot has no safety layer.
        #[arg(long)]
        i_understand_public_exposure: bool,
    },
    /// Serve the configured backend over the /v1 LM wire protocol.
    MockBackend {
        #[arg(long, default_value = "127.0.0.1:8000")]
        addr: SocketAddr,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?;
    let lm = || -> Result<Arc<dyn LanguageModel>> {
        let spec = cli.backend.as_deref().or(config.backend.as_deref()).context("no backend; pass --backend or set it in the config")?;
        config::backend(spec)
    };
    match cli.command {
        Command::SelectSkill {
            history,
            prompts,
            in_flight,
            json,
        } => select(&history, &prompts, lm()?.as_ref(), in_flight, json),
        Command::Parse { task, history, shots, kg, k } => parse(&config, &task, &history, shots.as_deref(), kg.as_deref(), k, lm()?.as_ref()),
        Command::Eval {
            task,
            seed,
            progress,
            out,
            text,
        } => eval(&config, &task, seed, progress.as_deref(), out.as_deref(), text, lm()?.as_ref()),
        Command::Chat {
            pin_skill,
            style,
            caption,
            transcript,
        } => {
            let bot = config.bot(lm()?)?;
            chat(&bot, pin_skill, style, caption, transcript.as_deref())
        }
        Command::Serve {
            addr,
            sessions,
            i_understand_public_exposure,
        } => {
            fsb_service::check_bind(&addr, i_understand_public_exposure)?;
            let dir = sessions.or(config.sessions.clone()).unwrap_or_else(|| PathBuf::from("sessions"));
            let state = AppState {
                bot: Arc::new(config.bot(lm()?)?),
                store: Arc::new(SessionStore::open(&dir).with_context(|| format!("opening {}", dir.display()))?),
            };
            eprintln!("serving on http://{addr} (sessions in {})", dir.display());
            block_on(fsb_service::serve(api::router(state), addr, i_understand_public_exposure))
        }
        Command::MockBackend { addr } => {
            let model = lm()?;
            eprintln!("serving {} on http://{addr}", model.descriptor().name);
            block_on(fsb_service::serve(fsb_service::wire::router(model), addr, false))
        }
    }
}

fn block_on(fut: impl std::future::Future<Output = Result<(), fsb_service::ServeError>>) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    Ok(runtime.block_on(fut)?)
}

fn first_dialogue(path: &Path) -> Result<Dialogue> {
    load_dialogues(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_iter()
        .next()
        .with_context(|| format!("{} holds no dialogue", path.display()))
}

fn prompt_shots(path: &Path) -> Result<Vec<(String, Vec<Dialogue>)>> {
    let mut groups: Vec<(String, Vec<Dialogue>)> = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "jsonl"));
        files.sort();
        for f in files {
            let label = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            groups.push((label, load_dialogues(&f).with_context(|| format!("reading {}", f.display()))?));
        }
    } else {
        for d in load_dialogues(path).with_context(|| format!("reading {}", path.display()))? {
            match groups.iter_mut().find(|(l, _)| *l == d.task) {
                Some((_, ds)) => ds.push(d),
                None => groups.push((d.task.clone(), vec![d])),
            }
        }
    }
    if groups.is_empty() {
        bail!("no skill prompts in {}", path.display());
    }
    Ok(groups)
}

fn select(history: &Path, prompts: &Path, lm: &dyn LanguageModel, in_flight: usize, json: bool) -> Result<()> {
    let history = first_dialogue(history)?;
    let prompts = SkillPromptSet::from_shots(&prompt_shots(prompts)?, lm)?;
    let selection = select_skill(&history, &prompts, lm, in_flight)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&selection)?);
    } else {
        println!("{}", selection.skill);
        for s in &selection.scores {
            println!("{}\t{:.6}", s.skill, s.score);
        }
    }
    Ok(())
}

fn parse(config: &Config, task: &str, history: &Path, shots: Option<&Path>, kg: Option<&Path>, k: usize, lm: &dyn LanguageModel) -> Result<()> {
    let registry = match &config.templates {
        Some(p) => TemplateRegistry::load(p)?,
        None => TemplateRegistry::builtin(),
    };
    let template = registry.get(task)?;
    let shots = match shots {
        Some(p) => load_dialogues(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let all = match &config.shots {
                Some(p) => load_dialogues(p).with_context(|| format!("reading {}", p.display()))?,
                None => read_dialogues(BUNDLED_SHOTS.as_bytes())?,
            };
            all.into_iter().filter(|d| d.task == task).collect()
        }
    };
    let prompt = build_shot_prompt(&shots, template, lm)?;
    let graph = match kg.or(config.kg.as_deref()) {
        Some(p) => Some(KnowledgeGraph::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    for d in load_dialogues(history).with_context(|| format!("reading {}", history.display()))? {
        let out = match task {
            "mwoz-dst" => serde_json::to_value(track_state(&d, template, &prompt, lm)?)?,
            "dialkg-parse" => {
                let graph = graph.as_ref().context("dialkg-parse needs --kg")?;
                let decode = constrained_kg_decode(&d, template, &prompt, lm, graph, k, 4)?;
                serde_json::json!({ "best": decode.best(), "paths": decode.paths(), "hops": decode.hops })
            }
            _ => serde_json::to_value(parse_dsl(&d, template, &prompt, lm)?)?,
        };
        println!("{}", serde_json::json!({ "id": d.id, "parse": out }));
    }
    Ok(())
}

fn eval(
    config: &Config,
    task: &Path,
    seed: Option<u64>,
    progress: Option<&Path>,
    out: Option<&Path>,
    text: bool,
    lm: &dyn LanguageModel,
) -> Result<()> {
    let raw = std::fs::read_to_string(task).with_context(|| format!("reading {}", task.display()))?;
    let table: toml::Table = toml::from_str(&raw).with_context(|| format!("parsing {}", task.display()))?;
    let seeded = table.contains_key("seed");
    let mut task_config: TaskConfig = table.try_into().with_context(|| format!("parsing {}", task.display()))?;
    let base = task.parent().unwrap_or(Path::new("."));
    task_config.validation = base.join(&task_config.validation);
    task_config.test = base.join(&task_config.test);
    for p in [&mut task_config.kg, &mut task_config.entities].into_iter().flatten() {
        *p = base.join(&*p);
    }
    match (seed, config.seed) {
        (Some(s), _) => task_config.seed = s,
        (None, Some(s)) if !seeded => task_config.seed = s,
        _ => {}
    }
    let registry = match &config.templates {
        Some(p) => TemplateRegistry::load(p)?,
        None => TemplateRegistry::builtin(),
    };
    let data = task_config.load_data()?;
    let report = run_eval(&task_config, &data, &registry, lm, progress)?;
    let rendered = if text { report.to_text() } else { report.to_json() };
    match out {
        Some(p) => std::fs::write(p, rendered).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn chat(bot: &FewShotBot, pin_skill: Option<String>, style: Option<String>, caption: Option<String>, transcript: Option<&Path>) -> Result<()> {
    if let Some(s) = &style {
        bot.check_style(s)?;
    }
    let mut conv = Conversation::new("chat");
    if let Some(c) = caption {
        conv = conv.with_caption(c);
    }
    let options = StepOptions { skill: pin_skill, style };
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    loop {
        write!(out, "> ")?;
        out.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 || line.trim() == "/quit" {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let result = match (&options.style, &options.skill) {
            (Some(style), None) => bot.styled_reply(&mut conv, &line, style),
            _ => bot.step(&mut conv, &line, &options),
        };
        match result {
            Ok(b) => {
                writeln!(out, "[{}] {}", b.selected_skill, b.response)?;
                if let Some(k) = &b.retrieved {
                    let text = match &k.text {
                        KnowledgeText::Sentence(s) => s.clone(),
                        KnowledgeText::Path(p) => p.serialize(),
                    };
                    writeln!(out, "    knowledge: {text} ({})", k.provenance)?;
                }
                for d in &b.diagnostics {
                    eprintln!("    note: {d}");
                }
            }
            Err(e) => eprintln!("error: {e}"),
        }
    }
    if let Some(p) = transcript {
        std::fs::write(p, conv.transcript_jsonl()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
