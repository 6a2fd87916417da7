//! Metrics, baseline agents and episode rollouts over session sets.

mod agents;
mod metrics;

pub use agents::{AskSchedule, MaxEntropyAgent, OracleAgent, RandomAgent};
pub use metrics::{compute_metrics, curves_csv, format_table, hn_score, Metrics};

use crate::catalog::Catalog;
use crate::environment::{EnvConfig, EpisodeRecord, Mode};
use crate::error::Result;
use crate::policy::{run_episode, Agent};
use crate::simulator::Session;

/// Rolls `agent` over the current subsession of every session. Episode `i`
/// draws from RNG stream `i` of `seed`, so logs are reproducible and
/// independent of evaluation order.
pub fn evaluate(agent: &dyn Agent, sessions: &[Session], catalog: &Catalog, env: &EnvConfig, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let n_attrs = catalog.n_attrs();
    let run = |i: usize, s: &Session| -> Result<EpisodeRecord> {
        let mut rng = crate::rng_stream(seed, i as u64);
        let state = run_episode(agent, s, &catalog.item_attrs, n_attrs, env, &mut rng)?;
        Ok(EpisodeRecord::from_state(&state, s, catalog, Mode::Simulated, agent.name()))
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(sessions.len().max(1));
    if workers <= 1 {
        return sessions.iter().enumerate().map(|(i, s)| run(i, s)).collect();
    }
    let chunk = sessions.len().div_ceil(workers);
    let parts: Vec<Result<Vec<EpisodeRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sessions
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let run = &run;
                scope.spawn(move || part.iter().enumerate().map(|(j, s)| run(c * chunk + j, s)).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(sessions.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
