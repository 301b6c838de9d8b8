//! Fitted Q Iteration with one Extra-Trees ensemble per action.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extra_trees::{cv_select_lmin, Ensemble, EnsembleConfig, Matrix};
use crate::mdp::{StateVec, Transition, TransitionDataset, STATE_DIM};
use crate::rng;

/// Anything that scores (state, action) pairs.
pub trait ActionValue: Sync {
    fn n_actions(&self) -> usize;

    fn evaluate(&self, s: &StateVec, action: usize) -> f64;

    /// Highest-valued action; ties go to the lower index, i.e. the lower dose.
    fn greedy_action(&self, s: &StateVec) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..self.n_actions() {
            let q = self.evaluate(s, a);
            if q > best.0 {
                best = (q, a);
            }
        }
        best.1
    }

    fn max_value(&self, s: &StateVec) -> f64 {
        (0..self.n_actions())
            .map(|a| self.evaluate(s, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// The all-zero starting point of the iteration.
#[derive(Clone, Copy, Debug)]
pub struct ZeroQ(pub usize);

impl ActionValue for ZeroQ {
    fn n_actions(&self) -> usize {
        self.0
    }

    fn evaluate(&self, _: &StateVec, _: usize) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeQModel {
    pub iteration: usize,
    pub ensembles: Vec<Ensemble>,
}

impl ActionValue for TreeQModel {
    fn n_actions(&self) -> usize {
        self.ensembles.len()
    }

    fn evaluate(&self, s: &StateVec, action: usize) -> f64 {
        self.ensembles[action].predict_unchecked(&s.features())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FqiConfig {
    pub gamma: f64,
    pub max_iters: usize,
    /// Stop early once the distance between iterates drops below this.
    pub stop_eps: Option<f64>,
    /// Bootstrap terminal transitions like any other instead of using target = r.
    pub bootstrap_terminal: bool,
    pub ensemble: EnsembleConfig,
    pub lmin_candidates: Vec<usize>,
    pub cv_folds: usize,
    /// Re-select the leaf size every this many iterations.
    pub cv_every: usize,
}

impl Default for FqiConfig {
    fn default() -> Self {
        FqiConfig {
            gamma: 0.9,
            max_iters: 40,
            stop_eps: None,
            bootstrap_terminal: false,
            ensemble: EnsembleConfig::default(),
            lmin_candidates: vec![5, 10, 50, 100],
            cv_folds: 5,
            cv_every: 1,
        }
    }
}

impl FqiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.max_iters == 0 || self.cv_every == 0 {
            return Err(Error::Config("max_iters and cv_every must be at least 1".into()));
        }
        if self.lmin_candidates.is_empty() {
            return Err(Error::Config("lmin_candidates must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub iteration: usize,
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct FqiOutcome {
    pub model: TreeQModel,
    pub curve: Vec<ConvergencePoint>,
    /// Leaf size used for each action, per iteration.
    pub lmin_history: Vec<Vec<usize>>,
}

/// Mean over the dataset's (s, a) pairs of the squared change between two models.
pub fn convergence_distance(q_n: &dyn ActionValue, q_prev: &dyn ActionValue, data: &[Transition]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    // Collected before summing so the result does not depend on thread scheduling.
    let sq: Vec<f64> = data
        .par_iter()
        .map(|t| (q_n.evaluate(&t.s, t.action) - q_prev.evaluate(&t.s, t.action)).powi(2))
        .collect();
    sq.iter().sum::<f64>() / data.len() as f64
}

/// Bellman targets `r + gamma * max_a' q(s', a')`; terminal transitions keep
/// `r` unless `bootstrap_terminal` is set.
pub fn bellman_targets(q: &dyn ActionValue, data: &[Transition], gamma: f64, bootstrap_terminal: bool) -> Vec<f64> {
    data.par_iter()
        .map(|t| {
            if t.terminal && !bootstrap_terminal {
                t.reward
            } else {
                t.reward + gamma * q.max_value(&t.s_next)
            }
        })
        .collect()
}

pub fn fqi_train(data: &TransitionDataset, n_actions: usize, config: &FqiConfig) -> Result<FqiOutcome> {
    fqi_train_with(data, n_actions, config, |_| {})
}

/// Runs FQI, calling `progress` after each iteration.
pub fn fqi_train_with(
    data: &TransitionDataset,
    n_actions: usize,
    config: &FqiConfig,
    mut progress: impl FnMut(&ConvergencePoint),
) -> Result<FqiOutcome> {
    config.validate()?;
    let transitions = &data.transitions;
    if transitions.is_empty() {
        return Err(Error::Config("FQI needs a non-empty transition dataset".into()));
    }
    if let Some(t) = transitions.iter().find(|t| t.action >= n_actions) {
        return Err(Error::Input(format!(
            "action index {} outside an action set of size {n_actions}",
            t.action
        )));
    }
    let by_action: Vec<Vec<usize>> = (0..n_actions)
        .map(|a| (0..transitions.len()).filter(|&i| transitions[i].action == a).collect())
        .collect();
    if let Some(a) = by_action.iter().position(|v| v.is_empty()) {
        return Err(Error::Config(format!("action {a} never occurs in the dataset")));
    }
    let inputs: Vec<Matrix> = by_action
        .iter()
        .map(|idx| {
            let rows: Vec<[f64; STATE_DIM]> = idx.iter().map(|&i| transitions[i].s.features()).collect();
            Matrix::from_rows(&rows)
        })
        .collect::<Result<_>>()?;

    let mut lmin = vec![config.ensemble.min_leaf; n_actions];
    let mut model: Option<TreeQModel> = None;
    let mut prev_pred = vec![0.0; transitions.len()];
    let mut curve = Vec::new();
    let mut lmin_history = Vec::new();

    for it in 1..=config.max_iters {
        let targets = match &model {
            Some(q) => bellman_targets(q, transitions, config.gamma, config.bootstrap_terminal),
            None => bellman_targets(&ZeroQ(n_actions), transitions, config.gamma, config.bootstrap_terminal),
        };
        let reselect = (it - 1) % config.cv_every == 0;
        let fitted: Vec<(usize, Ensemble)> = (0..n_actions)
            .into_par_iter()
            .map(|a| {
                let y: Vec<f64> = by_action[a].iter().map(|&i| targets[i]).collect();
                let seed = rng::derive_seed(config.ensemble.seed, &[it as u64, a as u64]);
                let mut leaf = lmin[a];
                if reselect {
                    let mut cv_rng = rng::rng_for(seed, &[u64::MAX]);
                    let base = EnsembleConfig {
                        seed,
                        ..config.ensemble.clone()
                    };
                    leaf = cv_select_lmin(&inputs[a], &y, &config.lmin_candidates, config.cv_folds, &base, &mut cv_rng)?;
                }
                let cfg = EnsembleConfig {
                    min_leaf: leaf,
                    seed,
                    ..config.ensemble.clone()
                };
                Ok((leaf, Ensemble::fit(&inputs[a], &y, &cfg)?))
            })
            .collect::<Result<_>>()?;
        let (leaves, ensembles): (Vec<usize>, Vec<Ensemble>) = fitted.into_iter().unzip();
        lmin = leaves;
        lmin_history.push(lmin.clone());
        let next = TreeQModel {
            iteration: it,
            ensembles,
        };

        let pred: Vec<f64> = transitions.par_iter().map(|t| next.evaluate(&t.s, t.action)).collect();
        let distance = pred.iter().zip(&prev_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64;
        let point = ConvergencePoint { iteration: it, distance };
        progress(&point);
        curve.push(point);
        prev_pred = pred;
        model = Some(next);
        if config.stop_eps.is_some_and(|eps| distance < eps) {
            break;
        }
    }
    Ok(FqiOutcome {
        model: model.expect("at least one iteration"),
        curve,
        lmin_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::DatasetMeta;

    /// Deterministic chain: action 0 stays, action 1 moves right; state 2 wraps to 0.
    const N_STATES: usize = 3;
    const REWARD: [[f64; 2]; N_STATES] = [[0.0, 0.2], [0.5, 0.1], [1.0, 0.0]];

    fn next_state(s: usize, a: usize) -> usize {
        if a == 0 {
            s
        } else {
            (s + 1) % N_STATES
        }
    }

    fn encode(s: usize) -> StateVec {
        StateVec {
            hb: s as f64 * 2.0 + 9.0,
            d_hb: 0.0,
            da0: 0.0,
            da1: 0.0,
            da2: 0.0,
            group: 0,
        }
    }

    fn value_iteration(gamma: f64, scale: f64) -> [[f64; 2]; N_STATES] {
        let mut q = [[0.0f64; 2]; N_STATES];
        loop {
            let mut next = q;
            for s in 0..N_STATES {
                for a in 0..2 {
                    let sn = next_state(s, a);
                    next[s][a] = scale * REWARD[s][a] + gamma * q[sn][0].max(q[sn][1]);
                }
            }
            let delta = (0..N_STATES)
                .flat_map(|s| (0..2).map(move |a| (s, a)))
                .map(|(s, a)| (next[s][a] - q[s][a]).abs())
                .fold(0.0, f64::max);
            q = next;
            if delta < 1e-13 {
                return q;
            }
        }
    }

    fn chain_dataset(copies: usize, scale: f64) -> TransitionDataset {
        let mut transitions = Vec::new();
        for _ in 0..copies {
            for s in 0..N_STATES {
                for a in 0..2 {
                    transitions.push(Transition {
                        s: encode(s),
                        action: a,
                        reward: scale * REWARD[s][a],
                        s_next: encode(next_state(s, a)),
                        terminal: false,
                    });
                }
            }
        }
        TransitionDataset {
            transitions,
            meta: DatasetMeta::default(),
        }
    }

    fn quick_config(gamma: f64, iters: usize) -> FqiConfig {
        FqiConfig {
            gamma,
            max_iters: iters,
            ensemble: EnsembleConfig {
                n_trees: 10,
                seed: 5,
                ..EnsembleConfig::default()
            },
            lmin_candidates: vec![5],
            ..FqiConfig::default()
        }
    }

    #[test]
    fn matches_value_iteration_on_chain() {
        let exact = value_iteration(0.9, 1.0);
        let out = fqi_train(&chain_dataset(50, 1.0), 2, &quick_config(0.9, 40)).unwrap();
        let flat: Vec<f64> = exact.iter().flatten().copied().collect();
        let range = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max) - flat.iter().copied().fold(f64::INFINITY, f64::min);
        for s in 0..N_STATES {
            for a in 0..2 {
                let q = out.model.evaluate(&encode(s), a);
                assert!((q - exact[s][a]).abs() <= 0.1 * range, "s{s} a{a}: {q} vs {}", exact[s][a]);
            }
            let best = if exact[s][1] > exact[s][0] { 1 } else { 0 };
            assert_eq!(out.model.greedy_action(&encode(s)), best);
        }
    }

    #[test]
    fn first_iteration_fits_rewards() {
        let out = fqi_train(&chain_dataset(20, 1.0), 2, &quick_config(0.9, 1)).unwrap();
        for s in 0..N_STATES {
            for a in 0..2 {
                assert!((out.model.evaluate(&encode(s), a) - REWARD[s][a]).abs() < 1e-12);
            }
        }
        // Against the zero model the first distance is the mean squared reward.
        let data = chain_dataset(20, 1.0);
        let expected = data.transitions.iter().map(|t| t.reward.powi(2)).sum::<f64>() / data.len() as f64;
        assert!((out.curve[0].distance - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_discount_learns_immediate_rewards() {
        let out = fqi_train(&chain_dataset(20, 1.0), 2, &quick_config(0.0, 3)).unwrap();
        for s in 0..N_STATES {
            for a in 0..2 {
                assert!((out.model.evaluate(&encode(s), a) - REWARD[s][a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reward_scaling_keeps_greedy_policy() {
        let base = value_iteration(0.9, 1.0);
        let scaled = value_iteration(0.9, 3.0);
        let argmax = |q: &[f64; 2]| usize::from(q[1] > q[0]);
        for s in 0..N_STATES {
            assert_eq!(argmax(&base[s]), argmax(&scaled[s]));
        }
        let a = fqi_train(&chain_dataset(50, 1.0), 2, &quick_config(0.9, 40)).unwrap();
        let b = fqi_train(&chain_dataset(50, 3.0), 2, &quick_config(0.9, 40)).unwrap();
        for s in 0..N_STATES {
            assert_eq!(a.model.greedy_action(&encode(s)), b.model.greedy_action(&encode(s)));
        }
    }

    struct Table(Vec<Vec<f64>>);

    impl ActionValue for Table {
        fn n_actions(&self) -> usize {
            self.0[0].len()
        }

        fn evaluate(&self, s: &StateVec, a: usize) -> f64 {
            self.0[s.group][a]
        }
    }

    fn at_group(group: usize) -> StateVec {
        StateVec { group, ..encode(0) }
    }

    #[test]
    fn distance_by_hand() {
        let data: Vec<Transition> = [(0, 0), (1, 1), (1, 2)]
            .iter()
            .map(|&(g, a)| Transition {
                s: at_group(g),
                action: a,
                reward: 0.0,
                s_next: at_group(g),
                terminal: false,
            })
            .collect();
        let q1 = Table(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let q0 = Table(vec![vec![0.0, 2.0, 3.0], vec![4.0, 3.0, 9.0]]);
        // Squared differences 1, 4 and 9.
        assert!((convergence_distance(&q1, &q0, &data) - 14.0 / 3.0).abs() < 1e-12);
        assert_eq!(convergence_distance(&q1, &q1, &data), 0.0);
        let shifted = Table(vec![vec![1.5, 2.5, 3.5], vec![4.5, 5.5, 6.5]]);
        assert!((convergence_distance(&shifted, &q1, &data) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn greedy_ties_pick_lower_dose() {
        let q = Table(vec![vec![0.1, 0.7, 0.7, 0.2]]);
        assert_eq!(q.greedy_action(&at_group(0)), 1);
        let dominant = Table(vec![vec![0.0, 0.0, 9.0, 0.0]]);
        assert_eq!(dominant.greedy_action(&at_group(0)), 2);
        assert_eq!(ZeroQ(5).greedy_action(&at_group(0)), 0);
    }

    #[test]
    fn terminal_targets() {
        let mut data = chain_dataset(1, 1.0).transitions;
        for t in &mut data {
            t.terminal = true;
        }
        let q = Table(vec![vec![10.0, 10.0]]);
        let plain = bellman_targets(&q, &data, 0.9, false);
        let boot = bellman_targets(&q, &data, 0.9, true);
        for ((t, p), b) in data.iter().zip(&plain).zip(&boot) {
            assert_eq!(*p, t.reward);
            assert!((b - (t.reward + 9.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_errors() {
        let empty = TransitionDataset::default();
        assert!(matches!(fqi_train(&empty, 2, &quick_config(0.9, 1)), Err(Error::Config(_))));
        assert!(matches!(
            fqi_train(&chain_dataset(1, 1.0), 2, &quick_config(1.0, 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            fqi_train(&chain_dataset(1, 1.0), 3, &quick_config(0.9, 1)),
            Err(Error::Config(_))
        ));
    }
}
