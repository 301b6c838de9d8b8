//! Erythropoiesis model under intravenous darbepoetin alfa.
//!
//! Two compartments are integrated: bone-marrow progenitors `P` and circulating
//! red blood cells `R`, both in units of 10^11 cells/L. The maturation
//! compartment only acts as a fixed delay between them. Flows out of each
//! compartment are averages of lagged inflows, with integer-day lags, so the
//! whole history the right-hand side needs is a short buffer of daily values:
//!
//! ```text
//! P'(t) = Cp H(E(t)) P(t) - Cp/T_P * sum_{j=1..T_P} H(E(t-j)) P(t-j)
//! R'(t) = Cr H(E(t-13)) P(t-13) - Cr * sum_{j=14..83} g_j H(E(t-j)) P(t-j)
//! ```
//!
//! where `H` is the Hill response, `E` the total plasma EPO (endogenous plus
//! exogenous) and `g_j` normalized Gaussian senescence weights. Exogenous EPO
//! decays in closed form between boluses; boluses are applied at the start of
//! the day on which they are scheduled.
//!
//! Each day is split into a fixed number of equal RK4 sub-steps. Lagged terms
//! use the exact exponential for EPO and linear interpolation of the stored
//! daily `P` values.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hb per unit of `R` for men, g per 10^11 cells.
pub const MCH_MALE: f64 = 2.7;
/// Hb per unit of `R` for women.
pub const MCH_FEMALE: f64 = 2.4;

/// Length of one monthly review period.
pub const DAYS_PER_MONTH: u32 = 28;
/// Days within a month on which the weekly bolus is given.
pub const BOLUS_DAYS: [u32; 4] = [0, 7, 14, 21];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    #[default]
    Male,
    Female,
}

impl Sex {
    pub fn mch(self) -> f64 {
        match self {
            Sex::Male => MCH_MALE,
            Sex::Female => MCH_FEMALE,
        }
    }
}

/// Per-patient physiological constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// Endogenous plasma EPO concentration.
    pub ep: f64,
    /// Progenitor flow constant, 1/day.
    pub cp: f64,
    /// Red-cell flow constant, 1/day.
    pub cr: f64,
    /// Mean corpuscular Hb factor.
    pub mch: f64,
    pub weight_kg: f64,
}

impl PatientParams {
    pub fn new(ep: f64, cp: f64, cr: f64, sex: Sex, weight_kg: f64) -> Result<Self> {
        let p = PatientParams {
            ep,
            cp,
            cr,
            mch: sex.mch(),
            weight_kg,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.ep, self.cp, self.cr, self.weight_kg]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(format!("non-finite patient parameter: {self:?}")));
        }
        if self.ep < 0.0 || self.cp <= 0.0 || self.cr <= 0.0 || self.weight_kg <= 0.0 {
            return Err(Error::Domain(format!(
                "patient parameters out of range: {self:?}"
            )));
        }
        if self.mch != MCH_MALE && self.mch != MCH_FEMALE {
            return Err(Error::Domain(format!(
                "mch must be {MCH_MALE} or {MCH_FEMALE}, got {}",
                self.mch
            )));
        }
        Ok(())
    }

    /// The (Ep, Cp, Cr) response coordinates used for neighbour search and clustering.
    pub fn response_vector(&self) -> [f64; 3] {
        [self.ep, self.cp, self.cr]
    }
}

/// Model constants shared by all patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConstants {
    /// Progenitor lifespan `T_P`, days.
    pub progenitor_lifespan: u32,
    /// Maturation delay `T_M`, days.
    pub maturation_delay: u32,
    /// Red-cell lifespan `T_R`, days.
    pub rbc_lifespan: u32,
    /// Volume of distribution `V_d`, litres.
    pub distribution_volume: f64,
    /// Variance of the senescence Gaussian, days^2. Use 900 for the
    /// "standard deviation 30" reading.
    pub senescence_variance: f64,
    /// First-order elimination rate of exogenous EPO, 1/day.
    pub elimination_rate: f64,
    /// Multiplier from `dose / V_d` to plasma concentration units. 1 is the
    /// literal formula; the shipped experiment configs calibrate it.
    pub dose_scale: f64,
    /// RK4 sub-steps per day.
    pub substeps: u32,
}

impl Default for ModelConstants {
    fn default() -> Self {
        ModelConstants {
            progenitor_lifespan: 9,
            maturation_delay: 4,
            rbc_lifespan: 70,
            distribution_volume: 52.4,
            senescence_variance: 30.0,
            elimination_rate: 24.0 / 25.0 * std::f64::consts::LN_2,
            dose_scale: 1.0,
            substeps: 4,
        }
    }
}

impl ModelConstants {
    /// Half-maximal effective EPO concentration, `100 / V_d`.
    pub fn e_50(&self) -> f64 {
        100.0 / self.distribution_volume
    }

    /// Longest lag read by the right-hand side, `T_P + T_M + T_R`.
    pub fn max_lag(&self) -> usize {
        (self.progenitor_lifespan + self.maturation_delay + self.rbc_lifespan) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.progenitor_lifespan == 0 || self.rbc_lifespan == 0 {
            return Err(Error::Config("lifespans must be positive".into()));
        }
        let positive = [
            self.distribution_volume,
            self.senescence_variance,
            self.elimination_rate,
            self.dose_scale,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!(
                "model constants must be positive and finite: {self:?}"
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hill response `e_tot / (e_50 + e_tot)`.
pub fn hill(e_tot: f64, e_50: f64) -> Result<f64> {
    if !(e_tot >= 0.0) {
        return Err(Error::Domain(format!("EPO concentration must be >= 0, got {e_tot}")));
    }
    if !(e_50 > 0.0) {
        return Err(Error::Domain(format!("e_50 must be > 0, got {e_50}")));
    }
    Ok(hill_unchecked(e_tot, e_50))
}

#[inline]
fn hill_unchecked(e_tot: f64, e_50: f64) -> f64 {
    e_tot / (e_50 + e_tot)
}

/// Rolling state of one simulated patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    day: u32,
    /// `P` at the start of days `day - L ..= day`; the back is the current value.
    p_hist: VecDeque<f64>,
    /// Exogenous EPO at the start of days `day - L ..= day - 1`, after that day's boluses.
    e_hist: VecDeque<f64>,
    r_now: f64,
    e_exo: f64,
    /// Scheduled administrations as (day, amount in µg).
    pending_boluses: Vec<(u32, f64)>,
}

impl SimState {
    /// State with a constant pre-history `P = p0`, exogenous EPO `e0` and `R = r0`.
    pub fn with_constant_history(consts: &ModelConstants, p0: f64, r0: f64, e0: f64) -> Self {
        let lag = consts.max_lag();
        SimState {
            day: 0,
            p_hist: std::iter::repeat_n(p0, lag + 1).collect(),
            e_hist: std::iter::repeat_n(e0, lag).collect(),
            r_now: r0,
            e_exo: e0,
            pending_boluses: Vec::new(),
        }
    }

    pub fn day(&self) -> u32 {
        self.day
    }

    pub fn p_now(&self) -> f64 {
        *self.p_hist.back().expect("history is never empty")
    }

    pub fn r_now(&self) -> f64 {
        self.r_now
    }

    pub fn e_exo(&self) -> f64 {
        self.e_exo
    }

    /// Daily `P` values, oldest first, ending with the current value.
    pub fn p_history(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.p_hist.iter().copied()
    }

    pub fn pending_boluses(&self) -> &[(u32, f64)] {
        &self.pending_boluses
    }

    /// Schedules `amount_ug` micrograms for the start of `day`.
    pub fn schedule_bolus(&mut self, day: u32, amount_ug: f64) -> Result<()> {
        if !(amount_ug >= 0.0 && amount_ug.is_finite()) {
            return Err(Error::Domain(format!("bolus amount must be >= 0, got {amount_ug}")));
        }
        if day < self.day {
            return Err(Error::Domain(format!(
                "cannot schedule a bolus on day {day}, clock is at {}",
                self.day
            )));
        }
        self.pending_boluses.push((day, amount_ug));
        Ok(())
    }
}

/// Monthly (and optionally daily) Hb observations of one simulated patient.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HbTrace {
    pub monthly_hb: Vec<f64>,
    pub daily_hb: Option<Vec<f64>>,
}

/// One row of a dense per-day trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseRecord {
    pub day: u32,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "E_exo")]
    pub e_exo: f64,
    #[serde(rename = "E_tot")]
    pub e_tot: f64,
    #[serde(rename = "Hb")]
    pub hb: f64,
}

/// Integrator for the erythropoiesis model with precomputed senescence weights.
#[derive(Clone, Debug)]
pub struct ErythropoiesisModel {
    consts: ModelConstants,
    e_50: f64,
    /// Normalized weights for lags `T_P + T_M + 1 ..= T_P + T_M + T_R`.
    senescence: Vec<f64>,
    daily_decay: f64,
}

impl ErythropoiesisModel {
    pub fn new(consts: ModelConstants) -> Result<Self> {
        consts.validate()?;
        let mean = consts.rbc_lifespan as f64;
        let var = consts.senescence_variance;
        // The Gaussian's normalizing constant cancels against the sum.
        let raw: Vec<f64> = (1..=consts.rbc_lifespan)
            .map(|t| (-(t as f64 - mean).powi(2) / (2.0 * var)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let senescence = raw.iter().map(|g| g / total).collect();
        Ok(ErythropoiesisModel {
            e_50: consts.e_50(),
            daily_decay: (-consts.elimination_rate).exp(),
            senescence,
            consts,
        })
    }

    pub fn constants(&self) -> &ModelConstants {
        &self.consts
    }

    pub fn senescence_weights(&self) -> &[f64] {
        &self.senescence
    }

    /// Uniform initial condition: `P = R = 1` and no exogenous EPO before day 0.
    pub fn initial_state(&self) -> SimState {
        SimState::with_constant_history(&self.consts, 1.0, 1.0, 0.0)
    }

    /// Plasma concentration added by a bolus of `dose_per_kg * weight` µg.
    pub fn bolus_concentration(&self, amount_ug: f64) -> f64 {
        amount_ug / self.consts.distribution_volume * self.consts.dose_scale
    }

    /// Gives an intravenous bolus immediately.
    pub fn administer_bolus(&self, state: &mut SimState, dose_per_kg: f64, weight_kg: f64) -> Result<()> {
        if !(dose_per_kg >= 0.0 && dose_per_kg.is_finite()) {
            return Err(Error::Domain(format!("dose must be >= 0, got {dose_per_kg}")));
        }
        if !(weight_kg > 0.0) {
            return Err(Error::Domain(format!("weight must be > 0, got {weight_kg}")));
        }
        state.e_exo += self.bolus_concentration(dose_per_kg * weight_kg);
        Ok(())
    }

    /// Exogenous EPO `dt` days after the state's clock, assuming no further boluses.
    pub fn exogenous_after(&self, state: &SimState, dt: f64) -> f64 {
        state.e_exo * (-self.consts.elimination_rate * dt).exp()
    }

    pub fn hb(&self, state: &SimState, params: &PatientParams) -> f64 {
        params.mch * state.r_now
    }

    /// Advances the state by one day.
    pub fn step_day(&self, state: &mut SimState, params: &PatientParams) -> Result<()> {
        let lag = self.consts.max_lag();
        if state.p_hist.len() != lag + 1 || state.e_hist.len() != lag {
            return Err(Error::Internal(format!(
                "history holds {} P / {} E entries, model needs {} / {}",
                state.p_hist.len(),
                state.e_hist.len(),
                lag + 1,
                lag
            )));
        }

        let today = state.day;
        let mut given = 0.0;
        state.pending_boluses.retain(|&(day, amount)| {
            if day == today {
                given += amount;
                false
            } else {
                true
            }
        });
        state.e_exo += self.bolus_concentration(given);
        state.e_hist.push_back(state.e_exo);

        let n = self.consts.substeps as usize;
        let h = 1.0 / n as f64;
        let k = self.consts.elimination_rate;
        let tp = self.consts.progenitor_lifespan as usize;
        let tpm = tp + self.consts.maturation_delay as usize;
        let ep = params.ep;

        // Lagged sums at every RK4 stage time, i.e. multiples of h/2 within the day.
        // Index i of both buffers refers to day `today - lag + i`.
        let stages = 2 * n + 1;
        let mut decay = Vec::with_capacity(stages);
        let mut p_out = Vec::with_capacity(stages);
        let mut r_net = Vec::with_capacity(stages);
        for m in 0..stages {
            let f = m as f64 * h / 2.0;
            let d = (-k * f).exp();
            let x = |j: usize| {
                let i = lag - j;
                let p = (1.0 - f) * state.p_hist[i] + f * state.p_hist[i + 1];
                hill_unchecked(state.e_hist[i] * d + ep, self.e_50) * p
            };
            let p_sum: f64 = (1..=tp).map(x).sum();
            let r_in = x(tpm);
            let r_out: f64 = self
                .senescence
                .iter()
                .enumerate()
                .map(|(i, w)| w * x(tpm + 1 + i))
                .sum();
            decay.push(d);
            p_out.push(p_sum / tp as f64);
            r_net.push(r_in - r_out);
        }

        let (cp, cr) = (params.cp, params.cr);
        let e_now = state.e_exo;
        let dp = |m: usize, p: f64| cp * (hill_unchecked(e_now * decay[m] + ep, self.e_50) * p - p_out[m]);
        let mut p = state.p_now();
        let mut r = state.r_now;
        for s in 0..n {
            let (m0, m1, m2) = (2 * s, 2 * s + 1, 2 * s + 2);
            let k1 = dp(m0, p);
            let k2 = dp(m1, p + 0.5 * h * k1);
            let k3 = dp(m1, p + 0.5 * h * k2);
            let k4 = dp(m2, p + h * k3);
            p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            // R' depends on time only, so RK4 reduces to Simpson's rule.
            r += h / 6.0 * cr * (r_net[m0] + 4.0 * r_net[m1] + r_net[m2]);
        }

        state.e_exo *= self.daily_decay;
        state.r_now = r;
        state.p_hist.push_back(p);
        state.p_hist.pop_front();
        state.e_hist.pop_front();
        state.day += 1;
        Ok(())
    }

    fn schedule_month(&self, state: &mut SimState, params: &PatientParams, dose_per_kg: f64) -> Result<()> {
        if !(dose_per_kg >= 0.0 && dose_per_kg.is_finite()) {
            return Err(Error::Domain(format!("dose must be >= 0, got {dose_per_kg}")));
        }
        let start = state.day;
        for offset in BOLUS_DAYS {
            state.schedule_bolus(start + offset, dose_per_kg * params.weight_kg)?;
        }
        Ok(())
    }

    /// Simulates one 28-day month of weekly boluses and returns the Hb at its end.
    pub fn run_month(&self, state: &mut SimState, params: &PatientParams, dose_per_kg: f64) -> Result<f64> {
        self.schedule_month(state, params, dose_per_kg)?;
        for _ in 0..DAYS_PER_MONTH {
            self.step_day(state, params)?;
        }
        Ok(self.hb(state, params))
    }

    /// Simulates one month per entry of `doses` (µg/kg/week), starting from `init`.
    pub fn simulate_months(&self, params: &PatientParams, doses: &[f64], init: SimState) -> Result<HbTrace> {
        if doses.is_empty() {
            return Err(Error::Input("at least one month must be simulated".into()));
        }
        params.validate()?;
        let mut state = init;
        let monthly_hb = doses
            .iter()
            .map(|&d| self.run_month(&mut state, params, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(HbTrace {
            monthly_hb,
            daily_hb: None,
        })
    }

    /// Like [`simulate_months`](Self::simulate_months) but also records one row per day,
    /// taken at the start of each day after that day's boluses, plus the final state.
    pub fn simulate_dense(
        &self,
        params: &PatientParams,
        doses: &[f64],
        init: SimState,
    ) -> Result<(HbTrace, Vec<DenseRecord>)> {
        if doses.is_empty() {
            return Err(Error::Input("at least one month must be simulated".into()));
        }
        params.validate()?;
        let mut state = init;
        let mut rows = Vec::with_capacity(doses.len() * DAYS_PER_MONTH as usize + 1);
        let mut monthly_hb = Vec::with_capacity(doses.len());
        for &dose in doses {
            self.schedule_month(&mut state, params, dose)?;
            for _ in 0..DAYS_PER_MONTH {
                let given: f64 = state
                    .pending_boluses
                    .iter()
                    .filter(|(d, _)| *d == state.day)
                    .map(|(_, a)| a)
                    .sum();
                let e_exo = state.e_exo + self.bolus_concentration(given);
                rows.push(self.record(&state, params, e_exo));
                self.step_day(&mut state, params)?;
            }
            monthly_hb.push(self.hb(&state, params));
        }
        rows.push(self.record(&state, params, state.e_exo));
        let daily_hb = rows.iter().map(|r| r.hb).collect();
        Ok((
            HbTrace {
                monthly_hb,
                daily_hb: Some(daily_hb),
            },
            rows,
        ))
    }

    fn record(&self, state: &SimState, params: &PatientParams, e_exo: f64) -> DenseRecord {
        DenseRecord {
            day: state.day,
            p: state.p_now(),
            r: state.r_now,
            e_exo,
            e_tot: e_exo + params.ep,
            hb: self.hb(state, params),
        }
    }
}

/// Writes a dense trace as CSV with header `day,P,R,E_exo,E_tot,Hb`.
pub fn write_dense_trace<W: Write>(out: W, rows: &[DenseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<dense trace>", e))?;
    Ok(())
}

pub fn write_dense_trace_file(path: &Path, rows: &[DenseRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dense_trace(std::io::BufWriter::new(file), rows)
}
