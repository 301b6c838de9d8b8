//! Q-learning baseline with a linear model over Gaussian radial basis features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fqi::{ActionValue, ConvergencePoint};
use crate::mdp::{StateVec, Transition, TransitionDataset, STATE_DIM};
use crate::rng;

/// Gaussian basis over the normalized state cube `[-1, 1]^6`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfNet {
    centers: Vec<[f64; STATE_DIM]>,
    sigma: f64,
    /// Per-dimension (min, max) mapped onto [-1, 1].
    bounds: [(f64, f64); STATE_DIM],
}

impl RbfNet {
    pub fn new(centers: Vec<[f64; STATE_DIM]>, sigma: f64, bounds: [(f64, f64); STATE_DIM]) -> Result<Self> {
        if centers.is_empty() || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "RBF net needs centers and a positive sigma, got {} centers and sigma {sigma}",
                centers.len()
            )));
        }
        if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(Error::Config(format!("invalid normalization bounds {bounds:?}")));
        }
        Ok(RbfNet { centers, sigma, bounds })
    }

    /// Regular grid with `per_dim` equally spaced values in [-1, 1] on every axis.
    pub fn grid(per_dim: usize, sigma: f64, bounds: [(f64, f64); STATE_DIM]) -> Result<Self> {
        if per_dim < 2 {
            return Err(Error::Config("RBF grid needs at least 2 points per dimension".into()));
        }
        let axis: Vec<f64> = (0..per_dim)
            .map(|i| -1.0 + 2.0 * i as f64 / (per_dim - 1) as f64)
            .collect();
        let total = per_dim.pow(STATE_DIM as u32);
        let centers = (0..total)
            .map(|mut code| {
                let mut c = [0.0; STATE_DIM];
                for v in c.iter_mut().rev() {
                    *v = axis[code % per_dim];
                    code /= per_dim;
                }
                c
            })
            .collect();
        RbfNet::new(centers, sigma, bounds)
    }

    pub fn n_features(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[[f64; STATE_DIM]] {
        &self.centers
    }

    pub fn bounds(&self) -> &[(f64, f64); STATE_DIM] {
        &self.bounds
    }

    /// Maps raw state features into [-1, 1], clamping values outside the bounds.
    pub fn normalize(&self, x: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        std::array::from_fn(|j| {
            let (lo, hi) = self.bounds[j];
            if hi > lo {
                (2.0 * (x[j] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
    }

    pub fn featurize(&self, s: &StateVec) -> Vec<f64> {
        let z = self.normalize(&s.features());
        let scale = -1.0 / (2.0 * self.sigma * self.sigma);
        self.centers
            .iter()
            .map(|c| {
                let d2: f64 = c.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
                (scale * d2).exp()
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QlConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub grid_per_dim: usize,
    pub sigma: f64,
    /// Explicit normalization bounds; by default taken from the dataset.
    pub bounds: Option<[(f64, f64); STATE_DIM]>,
    pub shuffle: bool,
    pub seed: u64,
    pub bootstrap_terminal: bool,
    /// Transitions in the fixed subset used to track convergence.
    pub probe_size: usize,
    /// Updates between convergence measurements.
    pub probe_every: usize,
    /// Divide the step by the squared feature norm, so `alpha` is the fraction
    /// of the temporal-difference error corrected per update.
    pub normalize_step: bool,
}

impl Default for QlConfig {
    fn default() -> Self {
        QlConfig {
            alpha: 0.2,
            gamma: 0.9,
            grid_per_dim: 4,
            sigma: 1.1,
            bounds: None,
            shuffle: false,
            seed: 0,
            bootstrap_terminal: false,
            probe_size: 1000,
            probe_every: 1000,
            normalize_step: false,
        }
    }
}

impl QlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "need alpha > 0 and 0 <= gamma < 1, got alpha {} gamma {}",
                self.alpha, self.gamma
            )));
        }
        if self.probe_every == 0 {
            return Err(Error::Config("probe_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear action values: one weight vector per action over shared state features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfQModel {
    pub net: RbfNet,
    pub weights: Vec<Vec<f64>>,
}

impl RbfQModel {
    pub fn zeros(net: RbfNet, n_actions: usize) -> Self {
        let weights = vec![vec![0.0; net.n_features()]; n_actions];
        RbfQModel { net, weights }
    }

    fn values(&self, phi: &[f64]) -> Vec<f64> {
        self.weights.iter().map(|w| dot(w, phi)).collect()
    }
}

impl ActionValue for RbfQModel {
    fn n_actions(&self) -> usize {
        self.weights.len()
    }

    fn evaluate(&self, s: &StateVec, action: usize) -> f64 {
        dot(&self.weights[action], &self.net.featurize(s))
    }

    fn greedy_action(&self, s: &StateVec) -> usize {
        let q = self.values(&self.net.featurize(s));
        let mut best = (f64::NEG_INFINITY, 0);
        for (a, &v) in q.iter().enumerate() {
            if v > best.0 {
                best = (v, a);
            }
        }
        best.1
    }

    fn max_value(&self, s: &StateVec) -> f64 {
        self.values(&self.net.featurize(s))
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One temporal-difference step on the taken action's weights:
/// `w_a += alpha * (r + gamma * max_b q(s', b) - q(s, a)) * phi(s)`.
pub fn ql_update(weights: &mut [Vec<f64>], t: &Transition, config: &QlConfig, net: &RbfNet) {
    let phi = net.featurize(&t.s);
    let future = if t.terminal && !config.bootstrap_terminal {
        0.0
    } else {
        let phi_next = net.featurize(&t.s_next);
        weights
            .iter()
            .map(|w| dot(w, &phi_next))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let w = &mut weights[t.action];
    let td = t.reward + config.gamma * future - dot(w, &phi);
    let step = if config.normalize_step {
        let norm = dot(&phi, &phi);
        if norm > 0.0 {
            config.alpha / norm
        } else {
            0.0
        }
    } else {
        config.alpha
    };
    for (wi, p) in w.iter_mut().zip(&phi) {
        *wi += step * td * p;
    }
}

fn dataset_bounds(data: &[Transition]) -> [(f64, f64); STATE_DIM] {
    let mut bounds = [(f64::INFINITY, f64::NEG_INFINITY); STATE_DIM];
    for t in data {
        for s in [&t.s, &t.s_next] {
            for (b, v) in bounds.iter_mut().zip(s.features()) {
                *b = (b.0.min(v), b.1.max(v));
            }
        }
    }
    bounds
}

#[derive(Clone, Debug)]
pub struct QlOutcome {
    pub model: RbfQModel,
    pub curve: Vec<ConvergencePoint>,
}

/// One pass over the dataset, each transition used once. Every `probe_every`
/// updates the mean squared change of Q on a fixed probe subset is recorded.
pub fn ql_train(data: &TransitionDataset, n_actions: usize, config: &QlConfig) -> Result<QlOutcome> {
    config.validate()?;
    let transitions = &data.transitions;
    if let Some(t) = transitions.iter().find(|t| t.action >= n_actions) {
        return Err(Error::Input(format!(
            "action index {} outside an action set of size {n_actions}",
            t.action
        )));
    }
    let bounds = match config.bounds {
        Some(b) => b,
        None if transitions.is_empty() => [(0.0, 1.0); STATE_DIM],
        None => dataset_bounds(transitions),
    };
    let net = RbfNet::grid(config.grid_per_dim, config.sigma, bounds)?;
    let mut model = RbfQModel::zeros(net, n_actions);

    let mut order: Vec<usize> = (0..transitions.len()).collect();
    if config.shuffle {
        order.shuffle(&mut rng::rng_for(config.seed, &[]));
    }

    let n = transitions.len();
    let probe_n = config.probe_size.min(n);
    let probe_phi: Vec<(usize, Vec<f64>)> = (0..probe_n)
        .map(|i| {
            let t = &transitions[i * n / probe_n];
            (t.action, model.net.featurize(&t.s))
        })
        .collect();
    let probe_values = |m: &RbfQModel| -> Vec<f64> { probe_phi.iter().map(|(a, phi)| dot(&m.weights[*a], phi)).collect() };
    let mut last = probe_values(&model);
    let mut curve = Vec::new();

    for (step, &i) in order.iter().enumerate() {
        ql_update(&mut model.weights, &transitions[i], config, &model.net);
        let done = step + 1;
        if probe_n > 0 && (done % config.probe_every == 0 || done == n) {
            let now = probe_values(&model);
            let distance = now.iter().zip(&last).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / probe_n as f64;
            curve.push(ConvergencePoint { iteration: done, distance });
            last = now;
        }
    }
    Ok(QlOutcome { model, curve })
}
