use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{bpr_on_tape, infonce_on_tape, pair_scores, AttrPairs};
use super::model::{sample_distinct, Bound, InterestContext, RecModel};
use crate::autograd::{Mat, Tape, Var};
use crate::catalog::{Catalog, HeteroGraph};
use crate::error::{Error, Result};
use crate::graph_embed::GraphOperators;
use crate::params::{Adam, Optimizer};
use crate::simulator::Session;

/// One offline training state: a session with synthesized current-turn
/// feedback plus sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub ctx: InterestContext,
    pub target: usize,
    pub negative_items: Vec<usize>,
    pub attr_pairs: AttrPairs,
}

/// Reveals a random subset of the target's attributes as accepted, a few
/// non-oracle attributes as rejected and some non-target items as rejected.
pub fn sample_example(session: &Session, train: &Catalog, config: &super::ModelConfig, rng: &mut impl Rng) -> TrainingExample {
    let target = session.target();
    let oracle = session.target_attrs();
    let n_items = train.n_items();
    let non_oracle: Vec<usize> = (0..train.n_attrs()).filter(|a| !oracle.contains(a)).collect();

    let n_acc = rng.random_range(0..=oracle.len());
    let accepted_attrs = sample_distinct(oracle, n_acc, rng);
    let n_rej = rng.random_range(0..=config.max_rejected_attrs);
    let rejected_attrs = sample_distinct(&non_oracle, n_rej, rng);
    let non_target: Vec<usize> = (0..n_items).filter(|&v| v != target).collect();
    let n_rej_items = rng.random_range(0..=config.max_rejected_items);
    let rejected_items = sample_distinct(&non_target, n_rej_items, rng);

    let seen: BTreeSet<usize> = train.user_items(session.user).into_iter().chain(session.targets.iter().copied()).collect();
    let unseen: Vec<usize> = (0..n_items).filter(|v| !seen.contains(v)).collect();
    let pool = if unseen.is_empty() { &non_target } else { &unseen };
    let negative_items = (0..config.negative_items)
        .filter_map(|_| (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())]))
        .collect();

    let negatives: Vec<Vec<usize>> = oracle.iter().map(|_| sample_distinct(&non_oracle, config.negative_attrs, rng)).collect();
    TrainingExample {
        ctx: InterestContext {
            user: session.user,
            prev_items: session.previous_items().to_vec(),
            prev_attr_sets: session.previous_attr_sets().to_vec(),
            rejected_items,
            accepted_attrs,
            rejected_attrs,
        },
        target,
        negative_items,
        attr_pairs: AttrPairs::build(oracle, &session.activation, &negatives),
    }
}

/// Loss components on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub item: Var,
    pub attr: Var,
    pub cont: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub item: f64,
    pub attr: f64,
    pub cont: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues { item: tape.scalar(self.item), attr: tape.scalar(self.attr), cont: tape.scalar(self.cont), total: tape.scalar(self.total) }
    }
}

/// BPR over `(row, positive node)` vs `(row, negative node)` pairs; zero when empty.
fn pairwise(tape: &Tape, interests: Var, nodes: Var, pos: Vec<(usize, usize)>, neg: Vec<(usize, usize)>) -> Var {
    if pos.is_empty() {
        return tape.constant(Mat::zeros((1, 1)));
    }
    bpr_on_tape(tape, pair_scores(tape, interests, nodes, &pos), pair_scores(tape, interests, nodes, &neg))
}

/// `L_rec = L_item + L_attr + ω·L_cont` for a batch.
pub fn batch_loss(model: &RecModel, tape: &Tape, b: &Bound, ops: &GraphOperators, batch: &[TrainingExample]) -> LossVars {
    let nodes = model.node_table(tape, ops, b);
    let slots: Vec<_> = batch.iter().map(|e| e.ctx.to_graph_slots(model.n_users, model.n_items)).collect();
    let (item_i, attr_i) = model.interests(tape, b, nodes, &slots);
    let item_node = |v: usize| model.n_users + v;
    let attr_node = |a: usize| model.n_users + model.n_items + a;

    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (k, e) in batch.iter().enumerate() {
        for &n in &e.negative_items {
            pos.push((k, item_node(e.target)));
            neg.push((k, item_node(n)));
        }
    }
    let item = pairwise(tape, item_i, nodes, pos, neg);

    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (k, e) in batch.iter().enumerate() {
        for &(a, n) in e.attr_pairs.ranking.iter().chain(&e.attr_pairs.activation) {
            pos.push((k, attr_node(a)));
            neg.push((k, attr_node(n)));
        }
    }
    let attr = pairwise(tape, attr_i, nodes, pos, neg);

    let cont = infonce_on_tape(tape, item_i, attr_i, model.config.temperature);
    let total = tape.add(tape.add(item, attr), tape.scale(cont, model.config.contrastive_weight));
    LossVars { item, attr, cont, total }
}

/// Loss value and full gradient for a batch at the model's current parameters.
pub fn loss_and_gradient(model: &RecModel, ops: &GraphOperators, batch: &[TrainingExample]) -> (LossValues, Vec<Mat>) {
    let tape = Tape::new();
    let b = Bound::new(&tape, &model.params);
    let l = batch_loss(model, &tape, &b, ops, batch);
    let grads = tape.backward(l.total, &model.params);
    (l.values(&tape), grads)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<LossValues>,
    pub steps: usize,
}

/// Minibatch Adam over freshly sampled offline states each epoch.
pub fn pretrain_recommender(model: &mut RecModel, graph: &HeteroGraph, train: &Catalog, sessions: &[Session]) -> Result<PretrainReport> {
    if sessions.is_empty() {
        return Err(Error::Config("recommender pretraining needs at least one session".into()));
    }
    let cfg = model.config.clone();
    let ops = GraphOperators::new(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(cfg.lr);
    let frozen = model.frozen_mask();
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossValues::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| sample_example(&sessions[i], train, &cfg, &mut rng)).collect();
            let (l, grads) = loss_and_gradient(model, &ops, &batch);
            if !l.total.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Diverged(format!("recommender loss {} at epoch {epoch}, step {}", l.total, report.steps)));
            }
            opt.step(&mut model.params, &grads, &frozen);
            report.steps += 1;
            batches += 1;
            sum.item += l.item;
            sum.attr += l.attr;
            sum.cont += l.cont;
            sum.total += l.total;
        }
        let n = batches as f64;
        let mean = LossValues { item: sum.item / n, attr: sum.attr / n, cont: sum.cont / n, total: sum.total / n };
        log::info!("rec epoch {epoch}: L_rec {:.4} (item {:.4}, attr {:.4}, cont {:.4})", mean.total, mean.item, mean.attr, mean.cont);
        report.epoch_losses.push(mean);
    }
    if !model.params.all_finite() {
        return Err(Error::Diverged("non-finite recommender parameters after training".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build_graph, parse_dataset, DataFormat};
    use crate::gradcheck::{max_rel_error, probe_gradients};
    use crate::recommender::ModelConfig;

    fn fixture() -> (Catalog, HeteroGraph, Vec<Session>) {
        let mut text = String::new();
        for i in 0..8 {
            text += &format!("{{\"type\":\"item\",\"item\":\"i{i}\",\"attrs\":[\"a{}\",\"a{}\",\"a{}\"]}}\n", i % 4, 4 + i % 2, 6 + i % 3);
        }
        for (u, items) in [("u0", [0, 1, 2, 3]), ("u1", [4, 5, 6, 7]), ("u2", [1, 3, 5, 7])] {
            for (t, i) in items.iter().enumerate() {
                text += &format!("{{\"type\":\"interaction\",\"user\":\"{u}\",\"item\":\"i{i}\",\"ts\":{t}}}\n");
            }
        }
        let c = parse_dataset(&text, DataFormat::Jsonl).unwrap();
        let g = build_graph(&c);
        let sessions = (0..c.n_users())
            .map(|u| {
                let targets = c.user_items(u)[..3].to_vec();
                let oracle: Vec<Vec<usize>> = targets.iter().map(|&v| c.item_attrs[v].clone()).collect();
                let activation = oracle[2][..2].to_vec();
                Session { id: format!("s{u}"), user: u, targets, oracle, activation }
            })
            .collect();
        (c, g, sessions)
    }

    fn small_config() -> ModelConfig {
        ModelConfig { dim: 4, heads: 2, ffn_mult: 2, batch_size: 2, epochs: 3, ..Default::default() }
    }

    fn batch(c: &Catalog, sessions: &[Session], cfg: &ModelConfig) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        sessions.iter().map(|s| sample_example(s, c, cfg, &mut rng)).collect()
    }

    #[test]
    fn sampled_state_respects_bounds() {
        let (c, _, sessions) = fixture();
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let e = sample_example(&sessions[0], &c, &cfg, &mut rng);
            let oracle = sessions[0].target_attrs();
            assert!(e.ctx.accepted_attrs.iter().all(|a| oracle.contains(a)));
            assert!(e.ctx.rejected_attrs.iter().all(|a| !oracle.contains(a)));
            assert!(e.ctx.rejected_attrs.len() <= cfg.max_rejected_attrs);
            assert!(!e.ctx.rejected_items.contains(&e.target));
            assert!(e.negative_items.iter().all(|v| !c.user_items(0).contains(v)));
            assert_eq!(e.ctx.prev_items.len(), 2);
        }
    }

    #[test]
    fn zero_contrastive_weight_drops_infonce() {
        let (c, g, sessions) = fixture();
        let cfg = ModelConfig { contrastive_weight: 0.0, ..small_config() };
        let model = RecModel::new(cfg.clone(), &g).unwrap();
        let (l, _) = loss_and_gradient(&model, &GraphOperators::new(&g), &batch(&c, &sessions, &cfg));
        assert!(l.cont > 0.0);
        assert_eq!(l.total, l.item + l.attr);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let (c, g, sessions) = fixture();
        let cfg = small_config();
        let model = RecModel::new(cfg.clone(), &g).unwrap();
        let ops = GraphOperators::new(&g);
        let data = batch(&c, &sessions, &cfg);
        let (_, grads) = loss_and_gradient(&model, &ops, &data);
        let loss = |p: &crate::params::ParamSet| {
            let m = RecModel { params: p.clone(), ..model.clone() };
            loss_and_gradient(&m, &ops, &data).0.total
        };
        let probes = probe_gradients(&model.params, &grads, loss, 30, 1e-5, |_| true, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(max_rel_error(&probes) < 1e-4, "{probes:#?}");
    }

    #[test]
    fn one_small_step_decreases_loss() {
        let (c, g, sessions) = fixture();
        let cfg = small_config();
        let mut model = RecModel::new(cfg.clone(), &g).unwrap();
        let ops = GraphOperators::new(&g);
        let data = batch(&c, &sessions[..2], &cfg);
        let (before, grads) = loss_and_gradient(&model, &ops, &data);
        crate::params::Sgd { lr: 1e-3 }.step(&mut model.params, &grads, &[]);
        let (after, _) = loss_and_gradient(&model, &ops, &data);
        assert!(after.total < before.total, "{} -> {}", before.total, after.total);
    }

    #[test]
    fn pretraining_is_deterministic_and_frozen_graph_stays_fixed() {
        let (c, g, sessions) = fixture();
        let run = |freeze| {
            let mut m = RecModel::new(ModelConfig { freeze_graph: freeze, ..small_config() }, &g).unwrap();
            let r = pretrain_recommender(&mut m, &g, &c, &sessions).unwrap();
            (m, r)
        };
        let (a, ra) = run(false);
        let (b, rb) = run(false);
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        assert_eq!(ra.epoch_losses.len(), 3);
        let init = RecModel::new(ModelConfig { freeze_graph: true, ..small_config() }, &g).unwrap();
        let (f, _) = run(true);
        assert_eq!(f.params.get("e0"), init.params.get("e0"));
        assert_ne!(f.params.get("slot"), init.params.get("slot"));
        assert_ne!(a.params.get("e0"), init.params.get("e0"));
    }

    #[test]
    fn empty_session_list_is_rejected() {
        let (c, g, _) = fixture();
        let mut m = RecModel::new(small_config(), &g).unwrap();
        assert!(pretrain_recommender(&mut m, &g, &c, &[]).is_err());
    }
}
