use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{compose_action, MscaaAgent};
use super::expert::{expert_attr_rule, expert_conv_argmax, expert_conv_rule};
use super::net::{weighted_nll, ActMode, PolicyConfig, PolicyNet};
use crate::autograd::{Mat, Tape, Var};
use crate::environment::{discounted_returns, Action, ConvState};
use crate::error::{Error, Result};
use crate::params::{Optimizer, Sgd};
use crate::recommender::Bound;
use crate::simulator::{Session, SimUserState};

/// Expert-labelled states aggregated across DAgger iterations.
#[derive(Clone, Debug, Default)]
pub struct ImitationSet {
    pub attr: VecDeque<(Vec<f64>, Vec<bool>, usize)>,
    pub conv: VecDeque<(Vec<f64>, usize)>,
}

impl ImitationSet {
    pub fn len(&self) -> usize {
        self.attr.len() + self.conv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops the oldest pairs beyond `max_pairs`, split evenly between agents.
    pub fn cap(&mut self, max_pairs: usize) {
        let half = max_pairs / 2;
        while self.attr.len() > half {
            self.attr.pop_front();
        }
        while self.conv.len() > max_pairs - half {
            self.conv.pop_front();
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DaggerReport {
    pub dataset_sizes: Vec<usize>,
    pub attr_losses: Vec<f64>,
    pub conv_losses: Vec<f64>,
}

fn batch_nll(net: &PolicyNet, attr: bool, rows: &[usize], data: &ImitationSet) -> (f64, Vec<Mat>) {
    let tape = Tape::new();
    let b = Bound::new(&tape, &net.params);
    let w = vec![1.0 / rows.len() as f64; rows.len()];
    let loss = if attr {
        let feats: Vec<Vec<f64>> = rows.iter().map(|&i| data.attr[i].0.clone()).collect();
        let masks: Vec<Vec<bool>> = rows.iter().map(|&i| data.attr[i].1.clone()).collect();
        let acts: Vec<usize> = rows.iter().map(|&i| data.attr[i].2).collect();
        weighted_nll(&tape, &b, &net.attr_mlp(), &feats, Some(&masks), &acts, &w)
    } else {
        let feats: Vec<Vec<f64>> = rows.iter().map(|&i| data.conv[i].0.clone()).collect();
        let acts: Vec<usize> = rows.iter().map(|&i| data.conv[i].1).collect();
        weighted_nll(&tape, &b, &net.conv_mlp(), &feats, None, &acts, &w)
    };
    (tape.scalar(loss), tape.backward(loss, &net.params))
}

/// Minibatch descent on the mean negative log-likelihood of expert labels.
/// Returns the mean `(attr, conv)` loss of the final epoch.
pub fn fit_imitation(net: &mut PolicyNet, data: &ImitationSet, cfg: &PolicyConfig, rng: &mut impl Rng) -> Result<(f64, f64)> {
    let mut opt = Sgd { lr: cfg.lr };
    let mut last = (0.0, 0.0);
    for _ in 0..cfg.dagger_epochs {
        let mut sums = [0.0, 0.0];
        for (slot, attr, n) in [(0, true, data.attr.len()), (1, false, data.conv.len())] {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut batches = 0;
            for chunk in order.chunks(cfg.dagger_batch.max(1)) {
                let (loss, grads) = batch_nll(net, attr, chunk, data);
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("imitation loss {loss}")));
                }
                opt.step(&mut net.params, &grads, &[]);
                sums[slot] += loss;
                batches += 1;
            }
            if batches > 0 {
                sums[slot] /= batches as f64;
            }
        }
        last = (sums[0], sums[1]);
    }
    Ok(last)
}

/// DAgger: roll out a β-mixture of expert and learner (β = 0.5^i), label every
/// visited state with the expert's choice, aggregate and refit.
pub fn dagger_pretrain(agent: &mut MscaaAgent, sessions: &[Session], cfg: &PolicyConfig) -> Result<(DaggerReport, ImitationSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = ImitationSet::default();
    let mut report = DaggerReport::default();
    if sessions.is_empty() {
        return Ok((report, data));
    }
    let t_max = agent.env.max_turns;
    for i in 0..cfg.dagger_iterations {
        let beta = 0.5f64.powi(i as i32);
        for _ in 0..cfg.dagger_episodes {
            let session = &sessions[rng.random_range(0..sessions.len())];
            let mut state = ConvState::reset(agent.item_attrs.len(), agent.n_attrs());
            let mut sim = SimUserState::new(session);
            while !state.done {
                let d = agent.decide_for_session(session, &state, ActMode::Greedy, &mut rng)?;
                let expert_attr = expert_attr_rule(&d.attr_state).ok();
                let expert_conv = expert_conv_rule(state.turn, t_max, &mut rng);
                if let Some(a) = expert_attr {
                    data.attr.push_back((d.attr_state.features(), d.attr_state.mask.clone(), a));
                }
                data.conv.push_back((d.conv_state.features(), expert_conv.index()));
                let action = if rng.random_bool(beta) { compose_action(expert_conv, expert_attr, &d.scores, agent.env.list_size).0 } else { d.action };
                state.step(&action, &mut sim, &agent.item_attrs, &agent.env)?;
            }
        }
        data.cap(cfg.dagger_max_pairs);
        let (la, lc) = fit_imitation(&mut agent.net, &data, cfg, &mut rng)?;
        log::info!("dagger iteration {i}: beta {beta:.3}, {} pairs, attr nll {la:.4}, conv nll {lc:.4}", data.len());
        report.dataset_sizes.push(data.len());
        report.attr_losses.push(la);
        report.conv_losses.push(lc);
    }
    Ok((report, data))
}

/// Agreement rate of the greedy conversation agent with the expert's most
/// likely action over `n_states` states visited by greedy rollouts. States
/// where the expert is indifferent (`t = T/2`) are skipped.
pub fn conv_agreement(agent: &MscaaAgent, sessions: &[Session], n_states: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut agree, mut total) = (0usize, 0usize);
    'outer: for session in sessions.iter().cycle().take(sessions.len().max(1) * 1000) {
        let mut state = ConvState::reset(agent.item_attrs.len(), agent.n_attrs());
        let mut sim = SimUserState::new(session);
        while !state.done {
            let d = agent.decide_for_session(session, &state, ActMode::Greedy, &mut rng)?;
            if let Some(e) = expert_conv_argmax(state.turn, agent.env.max_turns) {
                agree += usize::from(e == d.conv_choice);
                total += 1;
                if total >= n_states {
                    break 'outer;
                }
            }
            state.step(&d.action, &mut sim, &agent.item_attrs, &agent.env)?;
        }
    }
    Ok((agree as f64 / total.max(1) as f64, total))
}

/// Logged decisions of one episode, split per agent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub attr_features: Vec<Vec<f64>>,
    pub attr_masks: Vec<Vec<bool>>,
    pub attr_actions: Vec<usize>,
    pub attr_rewards: Vec<f64>,
    pub conv_features: Vec<Vec<f64>>,
    pub conv_actions: Vec<usize>,
    pub conv_rewards: Vec<f64>,
}

/// Plays one episode and records both agents' decisions. The attribute agent
/// sees only its ask turns; on failure the quit penalty is attached to its
/// last ask if the final turn was a recommendation.
pub fn collect_trajectory(agent: &MscaaAgent, session: &Session, mode: ActMode, rng: &mut ChaCha8Rng) -> Result<(ConvState, Trajectory)> {
    let mut state = ConvState::reset(agent.item_attrs.len(), agent.n_attrs());
    let mut sim = SimUserState::new(session);
    let mut tr = Trajectory::default();
    let mut last_was_ask = false;
    while !state.done {
        let d = agent.decide_for_session(session, &state, mode, rng)?;
        let r = state.step(&d.action, &mut sim, &agent.item_attrs, &agent.env)?;
        tr.conv_features.push(d.conv_state.features());
        tr.conv_actions.push(d.conv_choice.index());
        tr.conv_rewards.push(r.reward);
        last_was_ask = matches!(d.action, Action::Ask { .. });
        if let (Action::Ask { attribute }, false) = (&d.action, d.fallback) {
            tr.attr_features.push(d.attr_state.features());
            tr.attr_masks.push(d.attr_state.mask.clone());
            tr.attr_actions.push(*attribute);
            tr.attr_rewards.push(r.reward);
        }
    }
    if state.success.is_none() && !last_was_ask {
        if let Some(last) = tr.attr_rewards.last_mut() {
            *last += agent.env.rewards.quit;
        }
    }
    Ok((state, tr))
}

/// Per-step weights `G_t / B`, optionally mean-centred over the batch.
fn return_weights(rewards: &[&[f64]], gamma: f64, center: bool) -> Vec<f64> {
    let mut g: Vec<f64> = rewards.iter().flat_map(|r| discounted_returns(r, gamma)).collect();
    if center && !g.is_empty() {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        g.iter_mut().for_each(|x| *x -= mean);
    }
    let b = rewards.len().max(1) as f64;
    g.iter().map(|x| x / b).collect()
}

/// Negated REINFORCE surrogates `−Σ G_t ln π(a_t|s_t) / B` for both agents
/// (attribute, conversation). The attribute term is `None` without ask turns.
pub fn surrogate_losses(tape: &Tape, b: &Bound, net: &PolicyNet, batch: &[Trajectory], gamma: f64, center: bool) -> (Option<Var>, Option<Var>) {
    let attr_rewards: Vec<&[f64]> = batch.iter().map(|t| t.attr_rewards.as_slice()).collect();
    let conv_rewards: Vec<&[f64]> = batch.iter().map(|t| t.conv_rewards.as_slice()).collect();
    let wa = return_weights(&attr_rewards, gamma, center);
    let wc = return_weights(&conv_rewards, gamma, center);
    let attr = (!wa.is_empty()).then(|| {
        let feats: Vec<Vec<f64>> = batch.iter().flat_map(|t| t.attr_features.iter().cloned()).collect();
        let masks: Vec<Vec<bool>> = batch.iter().flat_map(|t| t.attr_masks.iter().cloned()).collect();
        let acts: Vec<usize> = batch.iter().flat_map(|t| t.attr_actions.iter().copied()).collect();
        weighted_nll(tape, b, &net.attr_mlp(), &feats, Some(&masks), &acts, &wa)
    });
    let conv = (!wc.is_empty()).then(|| {
        let feats: Vec<Vec<f64>> = batch.iter().flat_map(|t| t.conv_features.iter().cloned()).collect();
        let acts: Vec<usize> = batch.iter().flat_map(|t| t.conv_actions.iter().copied()).collect();
        weighted_nll(tape, b, &net.conv_mlp(), &feats, None, &acts, &wc)
    });
    (attr, conv)
}

/// Gradient of the summed negated surrogates.
pub fn surrogate_gradient(net: &PolicyNet, batch: &[Trajectory], gamma: f64, center: bool) -> (f64, Vec<Mat>) {
    let tape = Tape::new();
    let b = Bound::new(&tape, &net.params);
    let (a, c) = surrogate_losses(&tape, &b, net, batch, gamma, center);
    let total = match (a, c) {
        (Some(a), Some(c)) => tape.add(a, c),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return (0.0, net.params.values().iter().map(|p| Mat::zeros(p.dim())).collect()),
    };
    (tape.scalar(total), tape.backward(total, &net.params))
}

/// One policy-gradient step with plain SGD.
pub fn reinforce_update(net: &mut PolicyNet, batch: &[Trajectory], gamma: f64, lr: f64, center: bool) {
    let (_, grads) = surrogate_gradient(net, batch, gamma, center);
    Sgd { lr }.step(&mut net.params, &grads, &[]);
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub mean_return: Vec<f64>,
    pub success_rate: Vec<f64>,
}

/// Online REINFORCE with sampled actions; the recommender stays fixed.
pub fn train_policy(agent: &mut MscaaAgent, sessions: &[Session], cfg: &PolicyConfig) -> Result<RlReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(101));
    let mut report = RlReport::default();
    if sessions.is_empty() {
        return Ok(report);
    }
    for it in 0..cfg.rl_iterations {
        let mut batch = Vec::with_capacity(cfg.rl_batch_episodes);
        let (mut ret, mut wins) = (0.0, 0usize);
        for _ in 0..cfg.rl_batch_episodes {
            let s = &sessions[rng.random_range(0..sessions.len())];
            let (state, tr) = collect_trajectory(agent, s, ActMode::Sample, &mut rng)?;
            ret += state.rewards().iter().sum::<f64>();
            wins += state.success.is_some() as usize;
            batch.push(tr);
        }
        reinforce_update(&mut agent.net, &batch, cfg.gamma, cfg.lr, cfg.center_returns);
        if !agent.net.params.all_finite() {
            return Err(Error::Diverged(format!("policy parameters non-finite at iteration {it}")));
        }
        let n = batch.len().max(1) as f64;
        log::info!("rl iteration {it}: mean return {:.4}, success {:.3}", ret / n, wins as f64 / n);
        report.mean_return.push(ret / n);
        report.success_rate.push(wins as f64 / n);
    }
    Ok(report)
}
