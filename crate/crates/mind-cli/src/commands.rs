//! Command implementations: wiring configs, clients, and artifacts into
//! the library's bank, episode, evaluation, and trainer entry points.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mind_core::case::{load_cases, CaseError, CaseProfile};
use mind_core::clients::{
    CallBudget, ChatClient, EmbedClient, GenParams, HttpTransport, MockEmbed, RemoteChat,
    RemoteEmbed, UreqTransport,
};
use mind_core::config::{load_config, ConfigError, GlobalConfig};
use mind_core::judge::{ChatJudge, MockJudge, TurnJudge};
use mind_core::patientsim::{
    load_priors, load_routing, PatientSim, PriorTable, ProfileSim, RoutingTable, SimError,
    SimMode, VariationLevel,
};
use mind_core::prb::{
    build_entry_for, load_bank_dialogues, load_index, load_index_for, quality_histogram,
    save_index, MockBankChat, PRBCategory, PRBIndex, PrbError, QualityHistogram,
};
use mind_core::rewards::RewardConfig;
use mind_core::runner::{
    append_trajectory, evaluate, load_trajectories, metrics_from_pairs, run_batch, save_curve,
    toy_cases, train_toy_grpo, EpisodeContext, Policy, RemotePolicy, RunnerError, ToyPolicy,
    ToyTrainConfig,
};

use crate::args::{PolicyKind, SimKind};
use crate::policy::{HumanSim, ScriptedLadder};
use crate::CliError;

pub const ENV_CHAT_URL: &str = "MIND_CHAT_URL";
pub const ENV_EMBED_URL: &str = "MIND_EMBED_URL";
pub const ENV_EMBED_DIMS: &str = "MIND_EMBED_DIMS";
pub const ENV_API_KEY: &str = "MIND_API_KEY";

/// `mind train-toy` exits 0 iff the final greedy accuracy reaches this.
pub const TOY_ACCURACY_THRESHOLD: f64 = 0.9;

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

fn config_file_err(path: &Path, e: ConfigError) -> CliError {
    match e {
        ConfigError::Io(io) => input_err(path, io),
        other => CliError::Config(format!("{}: {other}", path.display())),
    }
}

fn case_file_err(path: &Path, e: CaseError) -> CliError {
    match e {
        CaseError::Io(io) => input_err(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

fn bank_file_err(path: &Path, e: PrbError) -> CliError {
    match e {
        PrbError::Io(io) => input_err(path, io),
        PrbError::Client(c) => CliError::Client(c.to_string()),
        other => CliError::BankSchema(format!("{}: {other}", path.display())),
    }
}

fn trajectory_file_err(path: &Path, e: RunnerError) -> CliError {
    match e {
        RunnerError::Io(io) => input_err(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

fn table_file_err(path: &Path, e: SimError) -> CliError {
    match e {
        SimError::Io(io) => input_err(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

/// Mock mode must never touch the network, so it refuses endpoint URLs
/// arriving through the environment instead of silently ignoring them.
fn refuse_env_urls() -> Result<(), CliError> {
    for var in [ENV_CHAT_URL, ENV_EMBED_URL] {
        if std::env::var_os(var).is_some() {
            return Err(CliError::Config(format!(
                "mock mode refuses the environment URL {var}; unset it or drop --mock"
            )));
        }
    }
    Ok(())
}

fn ensure_remote_allowed(mock_flag: bool, cfg: &GlobalConfig) -> Result<(), CliError> {
    if mock_flag {
        return Err(CliError::Config(
            "--mock forces deterministic backends; --policy remote needs live endpoints \
             (clients.chat_url or MIND_CHAT_URL)"
                .to_string(),
        ));
    }
    if cfg.clients.mock {
        return Err(CliError::Config(
            "clients.mock is true; --policy remote needs live endpoints (set clients.mock \
             to false and provide clients.chat_url or MIND_CHAT_URL)"
                .to_string(),
        ));
    }
    Ok(())
}

struct Backends {
    /// Present only in live mode; mock mode has no remote chat to drive.
    chat: Option<Arc<dyn ChatClient>>,
    embed: Arc<dyn EmbedClient>,
    judge: Box<dyn TurnJudge>,
}

fn url_from(cfg_value: &Option<String>, var: &str, role: &str) -> Result<String, CliError> {
    cfg_value
        .clone()
        .or_else(|| std::env::var(var).ok())
        .ok_or_else(|| {
            CliError::Config(format!("remote {role} needs clients.{role}_url or {var}"))
        })
}

fn build_backends(cfg: &GlobalConfig, mock: bool) -> Result<Backends, CliError> {
    if mock {
        return Ok(Backends {
            chat: None,
            embed: Arc::new(MockEmbed),
            judge: Box::new(MockJudge::new(cfg.reward.s_max)),
        });
    }
    let transport: Arc<dyn HttpTransport> = Arc::new(UreqTransport::new());
    let chat_url = url_from(&cfg.clients.chat_url, ENV_CHAT_URL, "chat")?;
    let embed_url = url_from(&cfg.clients.embed_url, ENV_EMBED_URL, "embed")?;
    let api_key = std::env::var(ENV_API_KEY).ok();
    let budget = cfg
        .clients
        .call_budget
        .map(CallBudget::calls)
        .unwrap_or_else(CallBudget::unlimited);
    let chat: Arc<dyn ChatClient> = Arc::new(
        RemoteChat::new(Arc::clone(&transport), chat_url, cfg.clients.chat_model.clone())
            .with_api_key(api_key.clone())
            .with_inflight_cap(cfg.clients.inflight_cap)
            .with_budget(budget),
    );
    let embed = RemoteEmbed::new(
        transport,
        embed_url,
        cfg.clients.embed_model.clone(),
        cfg.clients.embed_dims,
    )
    .with_api_key(api_key);
    Ok(Backends {
        chat: Some(Arc::clone(&chat)),
        judge: Box::new(ChatJudge::new(chat, cfg.reward.s_max)),
        embed: Arc::new(embed),
    })
}

fn load_or_default(config: Option<&Path>) -> Result<GlobalConfig, CliError> {
    match config {
        Some(path) => load_config(path).map_err(|e| config_file_err(path, e)),
        None => Ok(GlobalConfig::default()),
    }
}

fn routing_table(path: Option<&Path>) -> Result<RoutingTable, CliError> {
    match path {
        Some(p) => load_routing(p).map_err(|e| table_file_err(p, e)),
        None => Ok(RoutingTable::shipped()),
    }
}

fn prior_table(path: Option<&Path>) -> Result<PriorTable, CliError> {
    match path {
        Some(p) => load_priors(p).map_err(|e| table_file_err(p, e)),
        None => Ok(PriorTable::shipped()),
    }
}

type PolicyFactory = Box<dyn Fn(&CaseProfile) -> Box<dyn Policy> + Sync>;
type SimFactory = Box<dyn Fn(&CaseProfile) -> Box<dyn PatientSim> + Sync>;

fn policy_factory(
    kind: PolicyKind,
    chat: Option<Arc<dyn ChatClient>>,
    gen: GenParams,
) -> PolicyFactory {
    match kind {
        PolicyKind::Scripted => Box::new(|_| Box::new(ScriptedLadder::new())),
        PolicyKind::Remote => {
            let chat = chat.expect("remote policy implies live backends");
            Box::new(move |_| Box::new(RemotePolicy::new(Arc::clone(&chat), gen)))
        }
    }
}

fn sim_factory(kind: SimKind, routing: RoutingTable, priors: PriorTable, seed: u64) -> SimFactory {
    match kind {
        SimKind::Std => Box::new(move |case| {
            Box::new(ProfileSim::new(
                case.clone(),
                routing.clone(),
                priors.clone(),
                SimMode::Std,
            ))
        }),
        SimKind::Adapt => Box::new(move |case| {
            Box::new(ProfileSim::new(
                case.clone(),
                routing.clone(),
                priors.clone(),
                SimMode::Adapt { seed, level: VariationLevel::Mild },
            ))
        }),
        SimKind::Human => Box::new(|_| Box::new(HumanSim::stdio())),
    }
}

fn effective_workers(requested: Option<usize>, sim: SimKind) -> usize {
    if sim == SimKind::Human {
        return 1;
    }
    requested
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

pub fn render_histogram(h: &QualityHistogram) -> String {
    let mut out = String::from("quality   count    ratio\n");
    for (i, (count, ratio)) in h.counts.iter().zip(h.ratios).enumerate() {
        out.push_str(&format!("{:>7}  {:>6}  {:>6.2}%\n", i + 1, count, ratio * 100.0));
    }
    out.push_str(&format!("{:>7}  {:>6}\n", "total", h.total));
    out
}

pub fn cmd_build_bank(
    cases: &Path,
    knowledge: Option<&Path>,
    out: &Path,
    mock: bool,
) -> Result<(), CliError> {
    if mock {
        refuse_env_urls()?;
    }
    let dialogues = load_bank_dialogues(cases).map_err(|e| bank_file_err(cases, e))?;
    if dialogues.is_empty() {
        return Err(CliError::BankSchema(format!(
            "{}: no dialogues to build from",
            cases.display()
        )));
    }
    let extra: Vec<String> = match knowledge {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| input_err(p, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };

    let (chat, embed): (Box<dyn ChatClient>, Box<dyn EmbedClient>) = if mock {
        (Box::new(MockBankChat), Box::new(MockEmbed))
    } else {
        let transport: Arc<dyn HttpTransport> = Arc::new(UreqTransport::new());
        let chat_url = url_from(&None, ENV_CHAT_URL, "chat")?;
        let embed_url = url_from(&None, ENV_EMBED_URL, "embed")?;
        let dims = match std::env::var(ENV_EMBED_DIMS) {
            Ok(text) => text
                .parse::<usize>()
                .map_err(|e| CliError::Config(format!("{ENV_EMBED_DIMS}: {e}")))?,
            Err(_) => 1024,
        };
        let api_key = std::env::var(ENV_API_KEY).ok();
        (
            Box::new(
                RemoteChat::new(Arc::clone(&transport), chat_url, "mind-chat")
                    .with_api_key(api_key.clone()),
            ),
            Box::new(RemoteEmbed::new(transport, embed_url, "mind-embed", dims).with_api_key(api_key)),
        )
    };

    let mut entries = Vec::with_capacity(dialogues.len());
    for d in &dialogues {
        let mut chunks = d.knowledge.clone();
        chunks.extend(extra.iter().cloned());
        let entry = build_entry_for(
            &d.dialogue,
            &chunks,
            &d.next_question,
            d.category.unwrap_or(PRBCategory::General),
            chat.as_ref(),
            embed.as_ref(),
        )
        .map_err(|e| match e {
            PrbError::Client(c) => CliError::Client(c.to_string()),
            other => CliError::BankSchema(other.to_string()),
        })?;
        entries.push(entry);
    }

    let index = PRBIndex::new(embed.dims(), embed.fingerprint(), entries)
        .map_err(|e| CliError::BankSchema(e.to_string()))?;
    save_index(out, &index).map_err(|e| output_err(out, e))?;
    print!("{}", render_histogram(&quality_histogram(&index)));
    println!(
        "bank written to {}: {} entries ({} eligible)",
        out.display(),
        index.len(),
        index.eligible().count()
    );
    Ok(())
}

pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub policy: PolicyKind,
    pub sim: SimKind,
    pub seed: Option<u64>,
    pub mock: bool,
    pub workers: Option<usize>,
}

pub fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_or_default(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.episode.seed = seed;
    }
    if a.mock {
        refuse_env_urls()?;
    }
    if a.policy == PolicyKind::Remote {
        ensure_remote_allowed(a.mock, &cfg)?;
    }
    let mock = a.mock || cfg.clients.mock;
    let backends = build_backends(&cfg, mock)?;

    let bank_path = a.bank.unwrap_or_else(|| cfg.paths.bank.clone());
    let cases_path = a.cases.unwrap_or_else(|| cfg.paths.cases.clone());
    let out_path = a.out.unwrap_or_else(|| cfg.paths.output.clone());

    let index = load_index_for(&bank_path, backends.embed.as_ref())
        .map_err(|e| bank_file_err(&bank_path, e))?;
    let routing = routing_table(cfg.paths.routing.as_deref())?;
    let priors = prior_table(cfg.paths.priors.as_deref())?;
    let cases = load_cases(&cases_path).map_err(|e| case_file_err(&cases_path, e))?;
    if cases.is_empty() {
        return Err(CliError::Data(format!("{}: no cases", cases_path.display())));
    }

    let ctx = EpisodeContext {
        index: &index,
        judge: backends.judge.as_ref(),
        embed: backends.embed.as_ref(),
        routing: &routing,
        reward_cfg: &cfg.reward,
        rectify_cfg: &cfg.rectify,
        episode_cfg: &cfg.episode,
    };
    let pf = policy_factory(a.policy, backends.chat.clone(), cfg.episode.doctor_gen);
    let sf = sim_factory(a.sim, routing.clone(), priors, cfg.episode.seed);
    let workers = effective_workers(a.workers, a.sim);
    let trajectories = run_batch(pf.as_ref(), sf.as_ref(), &cases, &ctx, workers);

    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&out_path)
        .map_err(|e| output_err(&out_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for traj in &trajectories {
        append_trajectory(&mut writer, traj).map_err(|e| output_err(&out_path, e))?;
    }
    writer.flush().map_err(|e| output_err(&out_path, e))?;

    for traj in &trajectories {
        println!(
            "{}  return {:+.4}  diagnosis {}",
            traj.case_id,
            traj.episode_return,
            traj.final_diagnosis.map(|l| l.as_str()).unwrap_or("none")
        );
    }
    let correct = trajectories
        .iter()
        .filter(|t| t.final_diagnosis == Some(t.label))
        .count();
    println!(
        "{} episodes appended to {}  accuracy {:.3}",
        trajectories.len(),
        out_path.display(),
        correct as f64 / trajectories.len() as f64
    );

    let incomplete = trajectories.iter().filter(|t| t.incomplete).count();
    if incomplete > 0 {
        return Err(CliError::Client(format!(
            "{incomplete} of {} episodes aborted on transport failure; partial log flagged in {}",
            trajectories.len(),
            out_path.display()
        )));
    }
    Ok(())
}

pub struct EvalArgs {
    pub trajectories: Option<PathBuf>,
    pub live_config: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub policy: PolicyKind,
    pub sim: SimKind,
    pub seed: Option<u64>,
    pub mock: bool,
    pub workers: Option<usize>,
}

pub fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let (report, default_report) = if let Some(path) = a.trajectories.as_deref() {
        let trajectories =
            load_trajectories(path).map_err(|e| trajectory_file_err(path, e))?;
        if trajectories.is_empty() {
            return Err(CliError::Data(format!("{}: no trajectories", path.display())));
        }
        let pairs: Vec<_> = trajectories
            .iter()
            .map(|t| (t.label, t.final_diagnosis))
            .collect();
        (
            metrics_from_pairs(&pairs),
            PathBuf::from(format!("{}.report.json", path.display())),
        )
    } else {
        let cfg_path = a.live_config.as_deref().expect("clap enforces one source");
        let mut cfg = load_config(cfg_path).map_err(|e| config_file_err(cfg_path, e))?;
        if let Some(seed) = a.seed {
            cfg.episode.seed = seed;
        }
        if a.mock {
            refuse_env_urls()?;
        }
        if a.policy == PolicyKind::Remote {
            ensure_remote_allowed(a.mock, &cfg)?;
        }
        let mock = a.mock || cfg.clients.mock;
        let backends = build_backends(&cfg, mock)?;
        let index = load_index_for(&cfg.paths.bank, backends.embed.as_ref())
            .map_err(|e| bank_file_err(&cfg.paths.bank, e))?;
        let routing = routing_table(cfg.paths.routing.as_deref())?;
        let priors = prior_table(cfg.paths.priors.as_deref())?;
        let cases =
            load_cases(&cfg.paths.cases).map_err(|e| case_file_err(&cfg.paths.cases, e))?;
        let ctx = EpisodeContext {
            index: &index,
            judge: backends.judge.as_ref(),
            embed: backends.embed.as_ref(),
            routing: &routing,
            reward_cfg: &cfg.reward,
            rectify_cfg: &cfg.rectify,
            episode_cfg: &cfg.episode,
        };
        let pf = policy_factory(a.policy, backends.chat.clone(), cfg.episode.doctor_gen);
        let sf = sim_factory(a.sim, routing.clone(), priors, cfg.episode.seed);
        let workers = effective_workers(a.workers, a.sim);
        let (report, _trajectories) = evaluate(pf.as_ref(), sf.as_ref(), &cases, &ctx, workers)
            .map_err(|e| match e {
                RunnerError::EmptyCases => {
                    CliError::Data(format!("{}: no cases", cfg.paths.cases.display()))
                }
                other => CliError::Data(other.to_string()),
            })?;
        (report, PathBuf::from("eval-report.json"))
    };

    print!("{}", report.render_table());
    let report_path = a.report.unwrap_or(default_report);
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    std::fs::write(&report_path, json).map_err(|e| output_err(&report_path, e))?;
    println!("report written to {}", report_path.display());
    Ok(())
}

pub fn cmd_train_toy(
    config: Option<&Path>,
    out_curve: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg: ToyTrainConfig = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ToyTrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }

    let cases = toy_cases();
    let mut policy = ToyPolicy::uniform();
    let curve = train_toy_grpo(&cases, &mut policy, &cfg, &RewardConfig::default()).map_err(
        |e| match e {
            RunnerError::InvalidConfig(msg) => CliError::Config(msg),
            other => CliError::Internal(other.to_string()),
        },
    )?;
    save_curve(out_curve, &curve).map_err(|e| output_err(out_curve, e))?;

    let last = curve.last().expect("trainer emits one point per iteration");
    println!(
        "final accuracy {:.3} (mean return {:+.3}) after {} iterations; curve written to {}",
        last.accuracy,
        last.mean_return,
        last.iteration,
        out_curve.display()
    );
    if last.accuracy >= TOY_ACCURACY_THRESHOLD {
        Ok(())
    } else {
        Err(CliError::Threshold(format!(
            "final toy accuracy {:.3} is below {TOY_ACCURACY_THRESHOLD}",
            last.accuracy
        )))
    }
}

pub fn cmd_inspect(file: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(file).map_err(|e| input_err(file, e))?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| CliError::Data(format!("{}: empty file", file.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(first).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;

    match value.get("schema").and_then(|v| v.as_str()) {
        Some("prb-v1") => {
            let index = load_index(file).map_err(|e| bank_file_err(file, e))?;
            println!(
                "bank index: {} entries ({} eligible), {} dims, backend fingerprint {:#018x}",
                index.len(),
                index.eligible().count(),
                index.dims(),
                index.backend_fingerprint()
            );
            print!("{}", render_histogram(&quality_histogram(&index)));
            Ok(())
        }
        Some("traj-v1") => {
            let trajectories =
                load_trajectories(file).map_err(|e| trajectory_file_err(file, e))?;
            let n = trajectories.len();
            let incomplete = trajectories.iter().filter(|t| t.incomplete).count();
            let correct = trajectories
                .iter()
                .filter(|t| t.final_diagnosis == Some(t.label))
                .count();
            let mean_return =
                trajectories.iter().map(|t| t.episode_return).sum::<f64>() / n.max(1) as f64;
            println!(
                "trajectory log: {n} episodes ({incomplete} incomplete), mean return {:+.4}, accuracy {:.3}",
                mean_return,
                correct as f64 / n.max(1) as f64
            );
            for label in mind_core::case::DiagnosisLabel::ALL {
                let truth = trajectories.iter().filter(|t| t.label == label).count();
                let predicted = trajectories
                    .iter()
                    .filter(|t| t.final_diagnosis == Some(label))
                    .count();
                println!("  {label}: {truth} cases, {predicted} predictions");
            }
            Ok(())
        }
        Some(other) => Err(CliError::Data(format!(
            "{}: unknown schema {other:?}",
            file.display()
        ))),
        None if value.get("case_id").is_some() => {
            let cases = load_cases(file).map_err(|e| case_file_err(file, e))?;
            println!("case file: {} profiles", cases.len());
            for label in mind_core::case::DiagnosisLabel::ALL {
                let n = cases.iter().filter(|c| c.label == label).count();
                println!("  {label}: {n}");
            }
            Ok(())
        }
        None => Err(CliError::Data(format!(
            "{}: unrecognized artifact; expected a prb-v1 bank, traj-v1 log, or case file",
            file.display()
        ))),
    }
}
