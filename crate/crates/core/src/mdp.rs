//! The dosing decision problem: states, actions, rewards and transition datasets.
//!
//! Months are indexed so that `hb[k]` is observed at the end of month `k` and
//! `dose[k]` is the weekly dose given during month `k`. The state at review `k`
//! carries the dose the patient is currently on (`da0 = dose[k]`) and the two
//! before it; the action taken at review `k` is the next month's dose, so
//! `s_{k+1}.da0` always equals the action taken in `s_k`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations above this Hb (g/dl) are treated as unrealistic and filtered.
pub const HB_FILTER_MAX: f64 = 20.0;

/// Bell half-width `g` of the reward, g/dl.
pub const REWARD_HALF_WIDTH: f64 = 0.5;

/// Slope constant of the reward bell: the reward is 0.05 at distance `g` from target.
pub fn reward_slope() -> f64 {
    0.95_f64.sqrt().atanh()
}

/// Reward for moving from `hb_k` to `hb_k1` in one month.
///
/// Inside (10.5, 12.5) the target is `hb_k1 = 11.5`; at or above 12.5 it is a
/// decrease of 1 g/dl, at or below 10.5 an increase of 1 g/dl.
pub fn reward(hb_k: f64, hb_k1: f64) -> f64 {
    let distance = if hb_k > 10.5 && hb_k < 12.5 {
        hb_k1 - 11.5
    } else {
        let delta = hb_k1 - hb_k;
        if hb_k >= 12.5 {
            delta + 1.0
        } else {
            delta - 1.0
        }
    };
    let t = (distance.abs() / REWARD_HALF_WIDTH * reward_slope()).tanh();
    1.0 - t * t
}

/// Number of features in a [`StateVec`].
pub const STATE_DIM: usize = 6;

/// Monthly patient state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVec {
    pub hb: f64,
    pub d_hb: f64,
    pub da0: f64,
    pub da1: f64,
    pub da2: f64,
    pub group: usize,
}

impl StateVec {
    /// Numeric feature vector; the group index is encoded as an ordinal.
    pub fn features(&self) -> [f64; STATE_DIM] {
        [
            self.hb,
            self.d_hb,
            self.da0,
            self.da1,
            self.da2,
            self.group as f64,
        ]
    }

    /// State at review `k` of an aligned (Hb, dose) series. History before
    /// month 0 is taken as zero.
    pub fn at(hb: &[f64], doses: &[f64], k: usize, group: usize) -> StateVec {
        let dose = |back: usize| k.checked_sub(back).map_or(0.0, |i| doses[i]);
        StateVec {
            hb: hb[k],
            d_hb: if k == 0 { 0.0 } else { hb[k] - hb[k - 1] },
            da0: dose(0),
            da1: dose(1),
            da2: dose(2),
            group,
        }
    }
}

/// States for every month of an aligned (Hb, dose) series.
pub fn build_states(hb_series: &[f64], dose_series: &[f64], group: usize) -> Result<Vec<StateVec>> {
    if hb_series.len() != dose_series.len() {
        return Err(Error::Input(format!(
            "Hb series has {} months but dose series has {}",
            hb_series.len(),
            dose_series.len()
        )));
    }
    if hb_series.is_empty() {
        return Err(Error::Input("series must contain at least one month".into()));
    }
    Ok((0..hb_series.len())
        .map(|k| StateVec::at(hb_series, dose_series, k, group))
        .collect())
}

/// Discrete weekly doses in µg/kg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActionSet {
    doses: Vec<f64>,
}

impl Default for ActionSet {
    fn default() -> Self {
        ActionSet {
            doses: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl TryFrom<Vec<f64>> for ActionSet {
    type Error = Error;

    fn try_from(doses: Vec<f64>) -> Result<Self> {
        ActionSet::new(doses)
    }
}

impl From<ActionSet> for Vec<f64> {
    fn from(a: ActionSet) -> Self {
        a.doses
    }
}

impl ActionSet {
    const MATCH_TOL: f64 = 1e-9;

    pub fn new(doses: Vec<f64>) -> Result<Self> {
        if doses.first() != Some(&0.0) {
            return Err(Error::Config("action set must start at dose 0".into()));
        }
        if doses.windows(2).any(|w| !(w[1] > w[0])) || doses.iter().any(|d| !d.is_finite()) {
            return Err(Error::Config(format!(
                "action doses must be finite and strictly increasing: {doses:?}"
            )));
        }
        Ok(ActionSet { doses })
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    pub fn dose(&self, index: usize) -> f64 {
        self.doses[index]
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn index_of(&self, dose: f64) -> Option<usize> {
        self.doses
            .iter()
            .position(|d| (d - dose).abs() <= Self::MATCH_TOL)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: StateVec,
    pub action: usize,
    pub reward: f64,
    pub s_next: StateVec,
    /// Last month of its episode.
    pub terminal: bool,
}

/// One patient's trajectory: `states.len() == actions.len() + 1 == rewards.len() + 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Episode {
    pub states: Vec<StateVec>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Episode {
    /// Builds the episode of a simulated patient. The action at review `k` is
    /// the dose of month `k + 1`, and the reward scores `hb[k] -> hb[k + 1]`.
    pub fn from_series(hb: &[f64], doses: &[f64], group: usize, actions: &ActionSet) -> Result<Self> {
        let states = build_states(hb, doses, group)?;
        let taken = doses[1..]
            .iter()
            .map(|&d| {
                actions
                    .index_of(d)
                    .ok_or_else(|| Error::Input(format!("dose {d} is not in the action set")))
            })
            .collect::<Result<Vec<_>>>()?;
        let rewards = hb.windows(2).map(|w| reward(w[0], w[1])).collect();
        Ok(Episode {
            states,
            actions: taken,
            rewards,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub cohort_id: String,
    pub episodes: usize,
    /// Transitions before filtering.
    pub candidates: usize,
    /// Transitions dropped because an endpoint exceeded [`HB_FILTER_MAX`].
    pub filtered: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Flattens episodes into transitions, dropping any whose state or next state
/// has Hb above [`HB_FILTER_MAX`]. The final transition of each episode is terminal.
pub fn episodes_to_transitions(episodes: &[Episode]) -> Result<TransitionDataset> {
    let mut transitions = Vec::new();
    let mut candidates = 0;
    for ep in episodes {
        let n = ep.actions.len();
        if ep.states.len() != n + 1 || ep.rewards.len() != n {
            return Err(Error::Input(format!(
                "episode has {} states, {} actions, {} rewards",
                ep.states.len(),
                n,
                ep.rewards.len()
            )));
        }
        for k in 0..n {
            candidates += 1;
            let (s, s_next) = (ep.states[k], ep.states[k + 1]);
            // Written so that a NaN Hb is dropped too.
            if !(s.hb <= HB_FILTER_MAX && s_next.hb <= HB_FILTER_MAX) {
                continue;
            }
            transitions.push(Transition {
                s,
                action: ep.actions[k],
                reward: ep.rewards[k],
                s_next,
                terminal: k + 1 == n,
            });
        }
    }
    let filtered = candidates - transitions.len();
    Ok(TransitionDataset {
        transitions,
        meta: DatasetMeta {
            episodes: episodes.len(),
            candidates,
            filtered,
            ..DatasetMeta::default()
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TransitionRow {
    hb: f64,
    d_hb: f64,
    da0: f64,
    da1: f64,
    da2: f64,
    group: usize,
    action: f64,
    reward: f64,
    hb_next: f64,
    d_hb_next: f64,
    da0_next: f64,
    da1_next: f64,
    da2_next: f64,
    group_next: usize,
    terminal: u8,
}

/// Writes transitions as CSV, one row each, with actions stored as dose values.
pub fn write_transitions<W: Write>(out: W, data: &TransitionDataset, actions: &ActionSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in &data.transitions {
        if t.action >= actions.len() {
            return Err(Error::Input(format!("action index {} out of range", t.action)));
        }
        w.serialize(TransitionRow {
            hb: t.s.hb,
            d_hb: t.s.d_hb,
            da0: t.s.da0,
            da1: t.s.da1,
            da2: t.s.da2,
            group: t.s.group,
            action: actions.dose(t.action),
            reward: t.reward,
            hb_next: t.s_next.hb,
            d_hb_next: t.s_next.d_hb,
            da0_next: t.s_next.da0,
            da1_next: t.s_next.da1,
            da2_next: t.s_next.da2,
            group_next: t.s_next.group,
            terminal: t.terminal as u8,
        })?;
    }
    w.flush().map_err(|e| Error::io("<transitions>", e))?;
    Ok(())
}

/// Reads the CSV written by [`write_transitions`]. Metadata is left at its defaults.
pub fn read_transitions<R: Read>(input: R, actions: &ActionSet) -> Result<TransitionDataset> {
    let mut r = csv::Reader::from_reader(input);
    let mut transitions = Vec::new();
    for (line, row) in r.deserialize::<TransitionRow>().enumerate() {
        let row = row?;
        let action = actions.index_of(row.action).ok_or_else(|| {
            Error::Input(format!(
                "row {}: dose {} is not in the action set",
                line + 1,
                row.action
            ))
        })?;
        if row.terminal > 1 {
            return Err(Error::Input(format!("row {}: terminal must be 0 or 1", line + 1)));
        }
        transitions.push(Transition {
            s: StateVec {
                hb: row.hb,
                d_hb: row.d_hb,
                da0: row.da0,
                da1: row.da1,
                da2: row.da2,
                group: row.group,
            },
            action,
            reward: row.reward,
            s_next: StateVec {
                hb: row.hb_next,
                d_hb: row.d_hb_next,
                da0: row.da0_next,
                da1: row.da1_next,
                da2: row.da2_next,
                group: row.group_next,
            },
            terminal: row.terminal == 1,
        });
    }
    Ok(TransitionDataset {
        transitions,
        meta: DatasetMeta::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reward_branch_maxima() {
        assert_eq!(reward(11.5, 11.5), 1.0);
        assert_eq!(reward(13.0, 12.0), 1.0);
        assert_eq!(reward(9.0, 10.0), 1.0);
    }

    #[test]
    fn reward_at_half_width() {
        assert!((reward(11.5, 11.0) - 0.05).abs() < 1e-12);
        assert!((reward_slope() - 2.178_27).abs() < 1e-5);
    }

    #[test]
    fn reward_boundaries_use_delta_branches() {
        // 12.5 targets a 1 g/dl drop, 10.5 a 1 g/dl rise.
        assert_eq!(reward(12.5, 11.5), 1.0);
        assert_eq!(reward(10.5, 11.5), 1.0);
        assert!(reward(12.4, 11.4) < 1.0);
    }

    #[test]
    fn states_by_hand() {
        let hb = [9.0, 9.8, 10.1];
        let doses = [0.5, 0.75, 0.25];
        let s = build_states(&hb, &doses, 3).unwrap();
        let expect = [
            StateVec { hb: 9.0, d_hb: 0.0, da0: 0.5, da1: 0.0, da2: 0.0, group: 3 },
            StateVec { hb: 9.8, d_hb: 9.8 - 9.0, da0: 0.75, da1: 0.5, da2: 0.0, group: 3 },
            StateVec { hb: 10.1, d_hb: 10.1 - 9.8, da0: 0.25, da1: 0.75, da2: 0.5, group: 3 },
        ];
        assert_eq!(s, expect);
        assert!(build_states(&hb, &doses[..2], 0).is_err());
        assert!(build_states(&[], &[], 0).is_err());
    }

    #[test]
    fn constant_hb_has_zero_trend() {
        let s = build_states(&[11.0; 5], &[0.25; 5], 0).unwrap();
        assert!(s.iter().all(|s| s.d_hb == 0.0));
    }

    fn episode(months: usize) -> Episode {
        let actions = ActionSet::default();
        let hb: Vec<f64> = (0..months).map(|k| 9.0 + 0.1 * k as f64).collect();
        let doses: Vec<f64> = (0..months).map(|k| actions.dose(k % 5)).collect();
        Episode::from_series(&hb, &doses, 1, &actions).unwrap()
    }

    #[test]
    fn thirty_months_give_29_transitions() {
        let data = episodes_to_transitions(&[episode(30)]).unwrap();
        assert_eq!(data.len(), 29);
        assert_eq!(data.meta.filtered, 0);
        assert!(data.transitions[28].terminal);
        assert_eq!(data.transitions.iter().filter(|t| t.terminal).count(), 1);
        for t in &data.transitions {
            assert!((t.s_next.d_hb - (t.s_next.hb - t.s.hb)).abs() < 1e-12);
            assert_eq!(t.s_next.da0, ActionSet::default().dose(t.action));
            assert_eq!(t.s_next.da1, t.s.da0);
        }
    }

    #[test]
    fn high_hb_observation_is_filtered() {
        let mut ep = episode(10);
        ep.states[4].hb = 21.0;
        let data = episodes_to_transitions(&[ep]).unwrap();
        // Transitions 3 -> 4 and 4 -> 5 touch the bad observation.
        assert_eq!(data.meta.candidates, 9);
        assert_eq!(data.meta.filtered, 2);
        assert_eq!(data.len(), 7);
        assert!(data.transitions.iter().all(|t| t.s.hb <= 20.0 && t.s_next.hb <= 20.0));
    }

    #[test]
    fn unknown_dose_rejected() {
        let actions = ActionSet::default();
        assert!(Episode::from_series(&[10.0, 11.0], &[0.5, 0.3], 0, &actions).is_err());
    }

    #[test]
    fn action_set_validation() {
        assert!(ActionSet::new(vec![0.25, 0.5]).is_err());
        assert!(ActionSet::new(vec![0.0, 0.5, 0.5]).is_err());
        let a = ActionSet::new(vec![0.0, 0.25, 0.5, 0.7, 1.0]).unwrap();
        assert_eq!(a.index_of(0.7), Some(3));
        assert_eq!(a.index_of(0.75), None);
    }

    #[test]
    fn csv_header_and_roundtrip() {
        let actions = ActionSet::default();
        let data = episodes_to_transitions(&[episode(4), episode(3)]).unwrap();
        let mut buf = Vec::new();
        write_transitions(&mut buf, &data, &actions).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "hb,d_hb,da0,da1,da2,group,action,reward,hb_next,d_hb_next,da0_next,da1_next,da2_next,group_next,terminal"
        );
        let back = read_transitions(buf.as_slice(), &actions).unwrap();
        assert_eq!(back.transitions, data.transitions);
    }

    proptest! {
        #[test]
        fn reward_in_unit_interval(hb in 5.0..20.0f64, next in 5.0..20.0f64) {
            let r = reward(hb, next);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn reward_symmetric_about_target(hb in 10.6..12.4f64, d in 0.0..3.0f64) {
            prop_assert!((reward(hb, 11.5 + d) - reward(hb, 11.5 - d)).abs() < 1e-12);
        }

        #[test]
        fn reward_decreases_with_distance(hb in 13.0..19.0f64, d1 in 0.0..2.0f64, extra in 0.01..2.0f64) {
            // Above 12.5 the target is hb - 1.
            let target = hb - 1.0;
            prop_assert!(reward(hb, target + d1) > reward(hb, target + d1 + extra));
            prop_assert!(reward(hb, target - d1) > reward(hb, target - d1 - extra));
        }
    }
}
