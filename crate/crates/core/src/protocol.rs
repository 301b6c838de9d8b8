//! Rule-based dose titration protocol used as the clinical baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub initial_dose: f64,
    pub increase_factor: f64,
    pub decrease_factor: f64,
    /// Hb above this triggers a reduction, and later an interruption.
    pub hb_ceiling: f64,
    /// A monthly rise above this triggers a reduction.
    pub max_rise: f64,
    /// A monthly rise below this, with Hb under `target_hb`, allows an increase.
    pub min_rise: f64,
    pub target_hb: f64,
    pub months_between_increases: u32,
    pub dose_cap: Option<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            initial_dose: 0.45,
            increase_factor: 1.25,
            decrease_factor: 0.75,
            hb_ceiling: 12.0,
            max_rise: 2.0,
            min_rise: 1.0,
            target_hb: 11.0,
            months_between_increases: 1,
            dose_cap: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolState {
    pub dose: f64,
    pub months_since_increase: u32,
    pub interrupted: bool,
    pub dose_before_interrupt: f64,
    pub hb_prev: Option<f64>,
    /// The previous review reduced the dose because Hb was above the ceiling.
    pub reduced_for_ceiling: bool,
}

/// What a review decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adjustment {
    Hold,
    Increase,
    Decrease,
    Interrupt,
    Resume,
}

pub fn protocol_init(config: &ProtocolConfig) -> ProtocolState {
    ProtocolState::resume_from(config.initial_dose, None)
}

impl ProtocolState {
    /// Takes over a patient already on `dose`, last seen at `hb_prev`.
    pub fn resume_from(dose: f64, hb_prev: Option<f64>) -> Self {
        ProtocolState {
            dose,
            months_since_increase: u32::MAX / 2,
            interrupted: false,
            dose_before_interrupt: 0.0,
            hb_prev,
            reduced_for_ceiling: false,
        }
    }
}

/// Monthly review: returns the next state, the dose for the coming month and
/// the rule that fired.
pub fn protocol_step(state: &ProtocolState, hb_now: f64, config: &ProtocolConfig) -> Result<(ProtocolState, f64, Adjustment)> {
    if !(hb_now > 0.0 && hb_now.is_finite()) {
        return Err(Error::Domain(format!("Hb must be positive, got {hb_now}")));
    }
    let mut next = *state;
    next.months_since_increase = state.months_since_increase.saturating_add(1);
    next.hb_prev = Some(hb_now);
    let rise = state.hb_prev.map(|prev| hb_now - prev);
    let rising = rise.is_some_and(|r| r > 0.0);

    let adjustment = if state.interrupted {
        if rise.is_some_and(|r| r < 0.0) {
            next.interrupted = false;
            next.dose = config.decrease_factor * state.dose_before_interrupt;
            next.reduced_for_ceiling = false;
            Adjustment::Resume
        } else {
            Adjustment::Hold
        }
    } else if hb_now > config.hb_ceiling {
        if state.reduced_for_ceiling && rising && state.dose > 0.0 {
            next.interrupted = true;
            next.dose_before_interrupt = state.dose;
            next.dose = 0.0;
            Adjustment::Interrupt
        } else {
            next.dose = config.decrease_factor * state.dose;
            next.reduced_for_ceiling = true;
            Adjustment::Decrease
        }
    } else {
        next.reduced_for_ceiling = false;
        match rise {
            Some(r) if r > config.max_rise => {
                next.dose = config.decrease_factor * state.dose;
                Adjustment::Decrease
            }
            Some(r)
                if r < config.min_rise
                    && hb_now < config.target_hb
                    && next.months_since_increase >= config.months_between_increases =>
            {
                // A patient taken over at dose 0 restarts at the initial dose.
                let raised = if state.dose > 0.0 {
                    config.increase_factor * state.dose
                } else {
                    config.initial_dose
                };
                next.dose = config.dose_cap.map_or(raised, |cap| raised.min(cap));
                next.months_since_increase = 0;
                Adjustment::Increase
            }
            _ => Adjustment::Hold,
        }
    };
    Ok((next, next.dose, adjustment))
}
