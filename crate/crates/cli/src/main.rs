use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use msmcr_core::catalog::Catalog;
use msmcr_core::checkpoint::*;
use msmcr_core::config::Config;
use msmcr_core::environment::{read_records, write_records, EpisodeRecord};
use msmcr_core::evalkit::{compute_metrics, curves_csv, format_table, Metrics};
use msmcr_core::graph_embed::KgEmbeddings;
use msmcr_core::pipeline::{trace_episode, Split, StateSpec, Workspace};
use msmcr_core::policy::{conv_agreement, dagger_pretrain, train_policy, ActMode, PolicyNet};
use msmcr_core::recommender::FrozenRecommender;
use msmcr_core::simulator::{Session, SessionJson};
use msmcr_core::synth::{benchmark_catalog, noise_free_catalog, BenchmarkConfig, NoiseFreeConfig};

/// `println!` that exits quietly when stdout is closed, e.g. piped into `head`.
macro_rules! out {
    ($($arg:tt)*) => { emit(format!("{}\n", format_args!($($arg)*))) };
}

macro_rules! out_raw {
    ($($arg:tt)*) => { emit(format!($($arg)*)) };
}

fn emit(text: String) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing to stdout: {e}");
    }
}

const KG: &str = "kg.json";
const REC: &str = "rec.json";
const POLICY_IL: &str = "policy_dagger.json";
const POLICY: &str = "policy.json";

#[derive(Parser)]
#[command(name = "msmcr", version, about = "Multi-subsession conversational recommendation pipeline")]
struct Cli {
    /// JSON config; missing fields take their defaults.
    #[arg(long, global = true, env = "MSMCR_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `data.artifacts`.
    #[arg(long, global = true, env = "MSMCR_ARTIFACTS")]
    artifacts: Option<PathBuf>,
    /// Overrides `data.path`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Small catalog where every item has a unique attribute set.
        #[arg(long)]
        noise_free: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate the dataset, write the id map and print its statistics.
    Ingest,
    /// Print the effective configuration.
    Config,
    /// Train the simulator's translation embeddings.
    PretrainKg,
    /// Train the recommender on training sessions.
    PretrainRec,
    /// Imitation-pretrain both policies.
    PretrainPolicy,
    /// Policy-gradient fine-tuning starting from the imitation checkpoint.
    TrainPolicy,
    /// Every training stage in order.
    TrainAll,
    /// Roll out an agent over held-out sessions and print metrics.
    Eval {
        /// `mscaa`, `maxe`, `random` or `oracle`; defaults to `eval.agent`.
        #[arg(long)]
        agent: Option<String>,
        /// `test` or `valid`; defaults to `eval.split`.
        #[arg(long)]
        split: Option<String>,
        /// Score an existing episode log instead of running an agent.
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Print metrics as JSON.
        #[arg(long)]
        json: bool,
        /// Write SR/AR curves as CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Run a few simulated conversations and print their transcripts.
    Simulate {
        #[arg(long, default_value = "mscaa")]
        agent: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Rank candidates for a conversation state read as JSON.
    RecEval {
        /// State file; stdin when absent.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Dump per-turn policy states, logits and actions for one episode.
    PolicyTrace {
        /// Session id, or the first held-out session when absent.
        #[arg(long)]
        session: Option<String>,
        /// Session JSON file (external ids) instead of a held-out session.
        #[arg(long)]
        session_file: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Start the HTTP session service.
    Serve {
        /// Overrides `service.bind`.
        #[arg(long, env = "MSMCR_BIND")]
        bind: Option<String>,
        #[arg(long, env = "MSMCR_REC_CHECKPOINT")]
        rec_checkpoint: Option<PathBuf>,
        #[arg(long, env = "MSMCR_POLICY_CHECKPOINT")]
        policy_checkpoint: Option<PathBuf>,
        #[arg(long, env = "MSMCR_KG_CHECKPOINT")]
        kg_checkpoint: Option<PathBuf>,
        /// Overrides `service.episode_log`.
        #[arg(long, env = "MSMCR_EPISODE_LOG")]
        episode_log: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(a) = cli.artifacts {
        config.data.artifacts = a;
    }
    if let Some(d) = cli.data {
        config.data.path = Some(d);
    }
    match cli.cmd {
        Cmd::Synth { out, noise_free, seed } => synth(&out, noise_free, seed),
        Cmd::Config => {
            out!("{}", config.to_json());
            Ok(())
        }
        Cmd::Ingest => ingest(config),
        Cmd::PretrainKg => pretrain_kg(&Workspace::load(config)?),
        Cmd::PretrainRec => pretrain_rec(&Workspace::load(config)?),
        Cmd::PretrainPolicy => pretrain_policy(&Workspace::load(config)?),
        Cmd::TrainPolicy => train_rl(&Workspace::load(config)?),
        Cmd::TrainAll => {
            let ws = Workspace::load(config)?;
            pretrain_kg(&ws)?;
            pretrain_rec(&ws)?;
            pretrain_policy(&ws)?;
            train_rl(&ws)
        }
        Cmd::Eval { agent, split, episodes, json, curves } => eval(config, agent, split, episodes, json, curves),
        Cmd::Simulate { agent, split, count } => simulate(&Workspace::load(config)?, &agent, &split, count),
        Cmd::RecEval { state, top } => rec_eval(&Workspace::load(config)?, state, top),
        Cmd::PolicyTrace { session, session_file, split } => policy_trace(&Workspace::load(config)?, session, session_file, &split),
        Cmd::Serve { bind, rec_checkpoint, policy_checkpoint, kg_checkpoint, episode_log } => {
            let ws = Workspace::load(config)?;
            let path = |o: Option<PathBuf>, name: &str| o.unwrap_or_else(|| ws.config.artifact(name));
            serve(&ws, bind, path(kg_checkpoint, KG), path(rec_checkpoint, REC), path(policy_checkpoint, POLICY), episode_log)
        }
    }
}

fn synth(out: &Path, noise_free: bool, seed: Option<u64>) -> Result<()> {
    let catalog = if noise_free {
        let d = NoiseFreeConfig::default();
        noise_free_catalog(&NoiseFreeConfig { seed: seed.unwrap_or(d.seed), ..d })?
    } else {
        let d = BenchmarkConfig::default();
        benchmark_catalog(&BenchmarkConfig { seed: seed.unwrap_or(d.seed), ..d })?
    };
    catalog.write_jsonl(out)?;
    out!("wrote {} users, {} items, {} attributes, {} interactions to {}", catalog.n_users(), catalog.n_items(), catalog.n_attrs(), catalog.n_interactions(), out.display());
    Ok(())
}

fn ensure_artifacts(ws: &Workspace) -> Result<()> {
    let dir = &ws.config.data.artifacts;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn ingest(config: Config) -> Result<()> {
    let ws = Workspace::load(config)?;
    ensure_artifacts(&ws)?;
    let ids = ws.config.artifact("ids.json");
    std::fs::write(&ids, serde_json::to_string_pretty(&ws.catalog.ids)?)?;
    let c = &ws.catalog;
    out!("users {}  items {}  attributes {}  interactions {}", c.n_users(), c.n_items(), c.n_attrs(), c.n_interactions());
    out!(
        "split interactions  train {}  valid {}  test {}",
        ws.split.train.n_interactions(),
        ws.split.valid.n_interactions(),
        ws.split.test.n_interactions()
    );
    out!("graph edges  user-item {}  attribute-item {}", ws.graph.edges_uv.len(), ws.graph.edges_av.len());
    out!("id map written to {}", ids.display());
    Ok(())
}

fn load_kg(ws: &Workspace) -> Result<KgEmbeddings> {
    let path = ws.config.artifact(KG);
    let ck = Checkpoint::load(&path, "kg").with_context(|| "run `pretrain-kg` first")?;
    Ok(kg_from_checkpoint(&ck)?)
}

fn load_rec(ws: &Workspace, path: &Path) -> Result<Arc<FrozenRecommender>> {
    let ck = Checkpoint::load(path, "recommender").with_context(|| "run `pretrain-rec` first")?;
    Ok(ws.freeze(rec_from_checkpoint(&ck, &ws.graph)?))
}

fn load_policy(ws: &Workspace, path: &Path) -> Result<PolicyNet> {
    let ck = Checkpoint::load(path, "policy").with_context(|| format!("loading policy {}", path.display()))?;
    let (net, _) = policy_from_checkpoint(&ck)?;
    let env = ws.env();
    if (net.n_attrs, net.max_turns, net.list_size) != (ws.catalog.n_attrs(), env.max_turns, env.list_size) {
        bail!("policy was trained for |A|={}, T={}, K={}; current setup is |A|={}, T={}, K={}", net.n_attrs, net.max_turns, net.list_size, ws.catalog.n_attrs(), env.max_turns, env.list_size);
    }
    Ok(net)
}

fn pretrain_kg(ws: &Workspace) -> Result<()> {
    ensure_artifacts(ws)?;
    let kg = ws.train_kg();
    let path = ws.config.artifact(KG);
    kg_checkpoint(&kg, &ws.config.model.kg).save(&path)?;
    out!("kg embeddings written to {}", path.display());
    Ok(())
}

fn pretrain_rec(ws: &Workspace) -> Result<()> {
    ensure_artifacts(ws)?;
    let kg = load_kg(ws)?;
    let sessions = ws.sessions(&kg, Split::Train);
    let (model, report) = ws.pretrain_rec(&sessions)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        out!("epoch {:>3}  total {:>10.4}  item {:>10.4}  attr {:>10.4}  cont {:>10.4}", e + 1, l.total, l.item, l.attr, l.cont);
    }
    let path = ws.config.artifact(REC);
    rec_checkpoint(&model).save(&path)?;
    out!("recommender written to {}", path.display());
    Ok(())
}

fn pretrain_policy(ws: &Workspace) -> Result<()> {
    let kg = load_kg(ws)?;
    let rec = load_rec(ws, &ws.config.artifact(REC))?;
    let train = ws.sessions(&kg, Split::Train);
    let mut agent = ws.mscaa(rec, ws.new_policy(), ActMode::Sample);
    let (report, _) = dagger_pretrain(&mut agent, &train, &ws.config.policy)?;
    for (i, ((n, la), lc)) in report.dataset_sizes.iter().zip(&report.attr_losses).zip(&report.conv_losses).enumerate() {
        out!("dagger iteration {}  pairs {n}  attr nll {la:.4}  conv nll {lc:.4}", i + 1);
    }
    let valid = ws.sessions(&kg, Split::Valid);
    let (agreement, n) = conv_agreement(&agent, &valid, 500, ws.config.eval.seed)?;
    out!("conversation-policy agreement with the expert on {n} held-out states: {agreement:.4}");
    let path = ws.config.artifact(POLICY_IL);
    policy_checkpoint(&agent.net, &ws.config.policy).save(&path)?;
    out!("policy written to {}", path.display());
    Ok(())
}

fn train_rl(ws: &Workspace) -> Result<()> {
    let kg = load_kg(ws)?;
    let rec = load_rec(ws, &ws.config.artifact(REC))?;
    let net = load_policy(ws, &ws.config.artifact(POLICY_IL))?;
    let train = ws.sessions(&kg, Split::Train);
    let mut agent = ws.mscaa(rec, net, ActMode::Sample);
    let report = train_policy(&mut agent, &train, &ws.config.policy)?;
    for (i, (r, s)) in report.mean_return.iter().zip(&report.success_rate).enumerate() {
        out!("iteration {:>3}  mean return {r:>8.4}  success {s:.3}", i + 1);
    }
    let path = ws.config.artifact(POLICY);
    policy_checkpoint(&agent.net, &ws.config.policy).save(&path)?;
    out!("policy written to {}", path.display());
    Ok(())
}

fn build_agent(ws: &Workspace, name: &str) -> Result<Box<dyn msmcr_core::policy::Agent>> {
    let rec = if matches!(name, "mscaa" | "maxe") { Some(load_rec(ws, &ws.config.artifact(REC))?) } else { None };
    let net = if name == "mscaa" { Some(load_policy(ws, &ws.config.artifact(POLICY))?) } else { None };
    Ok(ws.agent(name, rec, net)?)
}

fn print_metrics(name: &str, m: &Metrics, json: bool, curves: Option<PathBuf>) -> Result<()> {
    if json {
        out!("{}", serde_json::to_string_pretty(m)?);
    } else {
        out_raw!("{}", format_table(&[(name.to_string(), m.clone())]));
    }
    if let Some(p) = curves {
        std::fs::write(&p, curves_csv(m))?;
        log::info!("curves written to {}", p.display());
    }
    Ok(())
}

fn eval(config: Config, agent: Option<String>, split: Option<String>, episodes: Option<PathBuf>, json: bool, curves: Option<PathBuf>) -> Result<()> {
    let env = config.env.env.clone();
    if let Some(p) = episodes {
        let records = read_records(&p)?;
        let m = compute_metrics(&records, env.max_turns, env.list_size)?;
        return print_metrics(&p.display().to_string(), &m, json, curves);
    }
    let agent_name = agent.unwrap_or_else(|| config.eval.agent.clone());
    let split_name = split.unwrap_or_else(|| config.eval.split.clone());
    let split: Split = split_name.parse()?;
    let ws = Workspace::load(config)?;
    ensure_artifacts(&ws)?;
    let kg = load_kg(&ws)?;
    let sessions = ws.sessions(&kg, split);
    if sessions.is_empty() {
        bail!("no {split_name} sessions; the split leaves too few interactions per user");
    }
    let agent = build_agent(&ws, &agent_name)?;
    let records = ws.evaluate(agent.as_ref(), &sessions)?;
    let log = ws.config.artifact(&format!("episodes_{agent_name}_{split_name}.jsonl"));
    write_records(&log, &records)?;
    log::info!("{} episodes written to {}", records.len(), log.display());
    let m = compute_metrics(&records, env.max_turns, env.list_size)?;
    print_metrics(&agent_name, &m, json, curves)
}

fn simulate(ws: &Workspace, agent_name: &str, split: &str, count: usize) -> Result<()> {
    let kg = load_kg(ws)?;
    let sessions: Vec<Session> = ws.sessions(&kg, split.parse()?).into_iter().take(count).collect();
    let agent = build_agent(ws, agent_name)?;
    let records = ws.evaluate(agent.as_ref(), &sessions)?;
    for r in &records {
        print_transcript(r);
    }
    Ok(())
}

fn print_transcript(r: &EpisodeRecord) {
    out!("session {}  user {}  previous {:?}  target {}", r.session_id, r.user, r.previous_items, r.target.as_deref().unwrap_or("-"));
    for t in &r.turns {
        out!("  turn {:>2}  {}  ->  {}  (reward {:+.2})", t.turn, serde_json::to_string(&t.action).unwrap_or_default(), serde_json::to_string(&t.feedback).unwrap_or_default(), t.reward);
    }
    out!("  outcome {}", serde_json::to_string(&r.outcome).unwrap_or_default());
}

fn rec_eval(ws: &Workspace, state: Option<PathBuf>, top: usize) -> Result<()> {
    let text = match state {
        Some(p) => std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let spec: StateSpec = serde_json::from_str(&text).context("parsing conversation state")?;
    let rec = load_rec(ws, &ws.config.artifact(REC))?;
    let ranking = spec.rank(&rec, &ws.catalog, top)?;
    out!("{}", serde_json::to_string_pretty(&ranking)?);
    Ok(())
}

fn policy_trace(ws: &Workspace, id: Option<String>, file: Option<PathBuf>, split: &str) -> Result<()> {
    let session = match file {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let js: SessionJson = serde_json::from_str(&text)?;
            js.to_session(&ws.catalog)?
        }
        None => {
            let kg = load_kg(ws)?;
            let sessions = ws.sessions(&kg, split.parse()?);
            match id {
                Some(id) => sessions.into_iter().find(|s| s.id == id).with_context(|| format!("no {split} session `{id}`"))?,
                None => sessions.into_iter().next().context("no held-out sessions")?,
            }
        }
    };
    let rec = load_rec(ws, &ws.config.artifact(REC))?;
    let agent = ws.mscaa(rec, load_policy(ws, &ws.config.artifact(POLICY))?, ActMode::Greedy);
    let trace = trace_episode(&agent, &session, &ws.catalog)?;
    let out = serde_json::json!({ "session": SessionJson::from_session(&session, &ws.catalog), "turns": trace });
    out!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn serve(ws: &Workspace, bind: Option<String>, kg: PathBuf, rec: PathBuf, policy: PathBuf, episode_log: Option<PathBuf>) -> Result<()> {
    ensure_artifacts(ws)?;
    let kg = kg_from_checkpoint(&Checkpoint::load(&kg, "kg")?)?;
    let rec = load_rec(ws, &rec)?;
    let agent = ws.mscaa(rec, load_policy(ws, &policy)?, ActMode::Greedy);
    let held_out = ws.sessions(&kg, Split::Test);
    let catalog: Arc<Catalog> = Arc::new(ws.catalog.clone());
    let bundle = msmcr_service::Bundle::new(catalog, agent, held_out);
    let svc = &ws.config.service;
    let episode_log = episode_log.unwrap_or_else(|| ws.config.artifact(&svc.episode_log.to_string_lossy()));
    let options = msmcr_service::ServiceOptions { idle_timeout: Duration::from_secs(svc.idle_timeout_secs), episode_log };
    let state = msmcr_service::AppState::new(Arc::new(bundle), options);
    let bind = bind.unwrap_or_else(|| svc.bind.clone());
    tokio::runtime::Runtime::new()?.block_on(msmcr_service::serve(state, &bind))?;
    Ok(())
}
