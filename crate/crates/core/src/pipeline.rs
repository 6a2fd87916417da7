//! Stage orchestration shared by the CLI, the service and the acceptance suite.

use std::sync::Arc;

use crate::catalog::{build_graph, load_dataset, split_interactions, Catalog, DataFormat, HeteroGraph, SplitCatalog};
use crate::config::Config;
use crate::environment::{ConvState, EnvConfig, EpisodeRecord};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, AskSchedule, MaxEntropyAgent, OracleAgent, RandomAgent};
use crate::graph_embed::{train_transe, KgEmbeddings};
use crate::policy::{dagger_pretrain, train_policy, ActMode, Agent, DaggerReport, MscaaAgent, PolicyNet, RlReport};
use crate::recommender::{pretrain_recommender, FrozenRecommender, PretrainReport, RecModel};
use crate::simulator::{build_all_sessions, Session, SimUserState};
use crate::synth::{benchmark_catalog, BenchmarkConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Dataset, split and training graph for one configuration.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: Config,
    pub catalog: Catalog,
    pub split: SplitCatalog,
    pub graph: HeteroGraph,
}

impl Workspace {
    pub fn from_catalog(config: Config, catalog: Catalog) -> Result<Self> {
        config.validate()?;
        let split = split_interactions(&catalog, config.data.split, config.data.seed)?;
        let graph = build_graph(&split.train);
        Ok(Workspace { config, catalog, split, graph })
    }

    /// Reads `data.path`, or generates the synthetic benchmark when unset.
    pub fn load(config: Config) -> Result<Self> {
        let catalog = match &config.data.path {
            Some(p) => load_dataset(p, config.data.format.parse::<DataFormat>().map_err(Error::Config)?)?,
            None => benchmark_catalog(&BenchmarkConfig::default())?,
        };
        Self::from_catalog(config, catalog)
    }

    pub fn env(&self) -> &EnvConfig {
        &self.config.env.env
    }

    pub fn split_catalog(&self, split: Split) -> &Catalog {
        match split {
            Split::Train => &self.split.train,
            Split::Valid => &self.split.valid,
            Split::Test => &self.split.test,
        }
    }

    pub fn train_kg(&self) -> KgEmbeddings {
        train_transe(&self.graph, &self.config.model.kg)
    }

    /// Sessions drawn from one split's histories. Training uses several
    /// sessions per user, evaluation splits `sessions_per_user`.
    pub fn sessions(&self, kg: &KgEmbeddings, split: Split) -> Vec<Session> {
        let sim = &self.config.env.simulator;
        let (count, stream) = match split {
            Split::Train => (sim.train_sessions_per_user, 0),
            Split::Valid => (sim.sessions_per_user, 1),
            Split::Test => (sim.sessions_per_user, 2),
        };
        build_all_sessions(self.split_catalog(split), kg, sim, count, sim.seed.wrapping_add(stream))
    }

    pub fn pretrain_rec(&self, train_sessions: &[Session]) -> Result<(RecModel, PretrainReport)> {
        let mut model = RecModel::new(self.config.model.rec.clone(), &self.graph)?;
        let report = pretrain_recommender(&mut model, &self.graph, &self.split.train, train_sessions)?;
        Ok((model, report))
    }

    pub fn freeze(&self, model: RecModel) -> Arc<FrozenRecommender> {
        Arc::new(FrozenRecommender::new(model, &self.graph))
    }

    pub fn new_policy(&self) -> PolicyNet {
        let env = self.env();
        PolicyNet::new(self.catalog.n_attrs(), env.max_turns, env.list_size, self.config.policy.hidden, self.config.policy.seed)
    }

    pub fn mscaa(&self, rec: Arc<FrozenRecommender>, net: PolicyNet, mode: ActMode) -> MscaaAgent {
        MscaaAgent { rec, net, item_attrs: Arc::new(self.catalog.item_attrs.clone()), env: self.env().clone(), mode }
    }

    /// Agent by name; `mscaa` requires a trained policy.
    /// `rec` is required by `mscaa` and `maxe`, `net` by `mscaa` only.
    pub fn agent(&self, name: &str, rec: Option<Arc<FrozenRecommender>>, net: Option<PolicyNet>) -> Result<Box<dyn Agent>> {
        let env = self.env();
        let rec = || rec.clone().ok_or_else(|| Error::Config(format!("{name} agent needs a recommender checkpoint")));
        Ok(match name {
            "mscaa" => Box::new(self.mscaa(rec()?, net.ok_or_else(|| Error::Config("mscaa agent needs a policy checkpoint".into()))?, ActMode::Greedy)),
            "maxe" => Box::new(MaxEntropyAgent {
                rec: rec()?,
                item_attrs: Arc::new(self.catalog.item_attrs.clone()),
                n_attrs: self.catalog.n_attrs(),
                max_turns: env.max_turns,
                list_size: env.list_size,
                schedule: AskSchedule::Linear,
            }),
            "random" => Box::new(RandomAgent { list_size: env.list_size }),
            "oracle" => Box::new(OracleAgent { list_size: env.list_size }),
            other => return Err(Error::Config(format!("unknown agent `{other}`"))),
        })
    }

    pub fn evaluate(&self, agent: &dyn Agent, sessions: &[Session]) -> Result<Vec<EpisodeRecord>> {
        evaluate(agent, sessions, &self.catalog, self.env(), self.config.eval.seed)
    }
}

/// Everything produced by a full training run.
pub struct Trained {
    pub kg: KgEmbeddings,
    pub rec_model: RecModel,
    pub rec: Arc<FrozenRecommender>,
    pub policy: PolicyNet,
    pub rec_report: PretrainReport,
    pub dagger_report: DaggerReport,
    pub rl_report: RlReport,
    pub train_sessions: Vec<Session>,
}

/// KG → recommender → DAgger → policy gradient.
pub fn train_all(ws: &Workspace) -> Result<Trained> {
    let kg = ws.train_kg();
    let train_sessions = ws.sessions(&kg, Split::Train);
    log::info!("{} training sessions", train_sessions.len());
    let (rec_model, rec_report) = ws.pretrain_rec(&train_sessions)?;
    let rec = ws.freeze(rec_model.clone());
    let mut agent = ws.mscaa(rec.clone(), ws.new_policy(), ActMode::Sample);
    let (dagger_report, _) = dagger_pretrain(&mut agent, &train_sessions, &ws.config.policy)?;
    let rl_report = train_policy(&mut agent, &train_sessions, &ws.config.policy)?;
    Ok(Trained { kg, rec_model, rec, policy: agent.net, rec_report, dagger_report, rl_report, train_sessions })
}

/// Conversation state in external ids, as accepted by `rec-eval`.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StateSpec {
    pub user: String,
    pub previous_items: Vec<String>,
    pub accepted_attributes: Vec<String>,
    pub rejected_attributes: Vec<String>,
    pub unknown_attributes: Vec<String>,
    pub rejected_items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ranking {
    pub candidate_items: usize,
    pub items: Vec<Ranked>,
    pub attributes: Vec<Ranked>,
}

impl StateSpec {
    /// Rebuilds candidate sets as the environment would have left them.
    pub fn to_state(&self, catalog: &Catalog) -> Result<(usize, Vec<usize>, ConvState)> {
        let ids = &catalog.ids;
        let user = ids.user(&self.user)?;
        let prev = self.previous_items.iter().map(|v| ids.item(v)).collect::<Result<Vec<_>>>()?;
        let attrs = |list: &[String]| list.iter().map(|a| ids.attribute(a)).collect::<Result<std::collections::BTreeSet<_>>>();
        let mut s = ConvState::reset(catalog.n_items(), catalog.n_attrs());
        s.a_acc = attrs(&self.accepted_attributes)?;
        s.a_rej = attrs(&self.rejected_attributes)?;
        s.a_unknown = attrs(&self.unknown_attributes)?;
        s.v_rej = self.rejected_items.iter().map(|v| ids.item(v)).collect::<Result<_>>()?;
        s.v_cand.retain(|&v| !s.v_rej.contains(&v) && s.a_acc.iter().all(|a| catalog.item_attrs[v].contains(a)));
        let remaining: std::collections::BTreeSet<usize> = s.v_cand.iter().flat_map(|&v| catalog.item_attrs[v].iter().copied()).collect();
        s.a_cand.retain(|a| remaining.contains(a) && !s.a_acc.contains(a) && !s.a_rej.contains(a) && !s.a_unknown.contains(a));
        if s.v_cand.is_empty() {
            return Err(Error::Validation("no candidate item satisfies the state".into()));
        }
        Ok((user, prev, s))
    }

    pub fn rank(&self, rec: &FrozenRecommender, catalog: &Catalog, top: usize) -> Result<Ranking> {
        let (user, prev, state) = self.to_state(catalog)?;
        let prev_attrs: Vec<Vec<usize>> = prev.iter().map(|&v| catalog.item_attrs[v].clone()).collect();
        let ctx = crate::policy::interest_context(user, &prev, &prev_attrs, &state);
        let table = rec.score(&ctx, &state.v_cand, &state.a_cand);
        let items = table.ranked_items().into_iter().take(top).map(|(v, s)| Ranked { id: catalog.ids.items[v].clone(), score: s }).collect();
        let mut attrs: Vec<(usize, f64)> = table.attr_scores.iter().map(|(&a, &s)| (a, s)).collect();
        attrs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let attributes = attrs.into_iter().map(|(a, s)| Ranked { id: catalog.ids.attributes[a].clone(), score: s }).collect();
        Ok(Ranking { candidate_items: state.v_cand.len(), items, attributes })
    }
}

/// One traced turn: the agent's full decision and the simulator's answer.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TraceTurn {
    pub decision: crate::policy::Decision,
    pub action: crate::environment::Action<String>,
    pub feedback: crate::environment::Feedback<String>,
    pub reward: f64,
}

/// Greedy simulated rollout with every intermediate policy quantity.
pub fn trace_episode(agent: &MscaaAgent, session: &Session, catalog: &Catalog) -> Result<Vec<TraceTurn>> {
    let mut state = ConvState::reset(catalog.n_items(), catalog.n_attrs());
    let mut sim = SimUserState::new(session);
    let mut rng = crate::rng_stream(0, 0);
    let mut out = Vec::new();
    while !state.done {
        let decision = agent.decide_for_session(session, &state, ActMode::Greedy, &mut rng)?;
        let step = state.step(&decision.action, &mut sim, &catalog.item_attrs, &agent.env)?;
        let action = decision.action.map(|&x| match &decision.action {
            crate::environment::Action::Ask { .. } => catalog.ids.attributes[x].clone(),
            crate::environment::Action::Recommend { .. } => catalog.ids.items[x].clone(),
        });
        out.push(TraceTurn { action, feedback: step.feedback.map(|&v| catalog.ids.items[v].clone()), reward: step.reward, decision });
    }
    Ok(out)
}
