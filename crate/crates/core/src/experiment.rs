//! The three-stage experiment: experience generation, learning and evaluation,
//! plus the file layout shared by the command-line stages.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_patients, ClusterConfig, ClusterModel};
use crate::cohort::{self, augment_by_interpolation, sample_seed_population, CohortSpec, Patient};
use crate::error::{Error, Result};
use crate::fqi::{fqi_train_with, ConvergencePoint, FqiConfig};
use crate::metrics::{self, compute_metrics, MetricsReport, TraceRow};
use crate::mdp::{self, ActionSet, Episode, StateVec, TransitionDataset};
use crate::policy::{PolicyArtifact, PolicyModel};
use crate::protocol::{protocol_step, ProtocolConfig, ProtocolState};
use crate::qlearning::{ql_train, QlConfig};
use crate::rng;
use crate::sim::{ErythropoiesisModel, ModelConstants, PatientParams};

pub const TRAIN_COHORT_FILE: &str = "cohort_train.csv";
pub const EVAL_COHORT_FILE: &str = "cohort_eval.csv";
pub const CLUSTER_FILE: &str = "cluster_model.json";
pub const TRANSITIONS_FILE: &str = "transitions.csv";
pub const DATASET_META_FILE: &str = "dataset_meta.json";
pub const FQI_POLICY_FILE: &str = "fqi_policy.cbor";
pub const QL_POLICY_FILE: &str = "ql_policy.cbor";
pub const FQI_CONVERGENCE_FILE: &str = "fqi_convergence.csv";
pub const QL_CONVERGENCE_FILE: &str = "ql_convergence.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const TRACES_FILE: &str = "traces.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const MONTHLY_FILE: &str = "monthly_stats.csv";
pub const BOXPLOT_FILE: &str = "boxplot.csv";
pub const PATIENTS_FILE: &str = "patients.csv";

pub const FQI: &str = "fqi";
pub const QL: &str = "ql";
pub const PROTOCOL: &str = "protocol";

/// Seeds of the independent random streams. Unset seeds derive from `master`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
    pub cohort: Option<u64>,
    pub treatment: Option<u64>,
    pub learning: Option<u64>,
    pub evaluation: Option<u64>,
}

impl Seeds {
    fn pick(&self, explicit: Option<u64>, label: u64) -> u64 {
        explicit.unwrap_or_else(|| rng::derive_seed(self.master, &[label]))
    }

    pub fn cohort(&self) -> u64 {
        self.pick(self.cohort, 1)
    }

    pub fn treatment(&self) -> u64 {
        self.pick(self.treatment, 2)
    }

    pub fn learning(&self) -> u64 {
        self.pick(self.learning, 3)
    }

    pub fn evaluation(&self) -> u64 {
        self.pick(self.evaluation, 4)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Seeds,
    /// Training population after augmentation.
    pub n_train_patients: usize,
    /// Neighbours considered when interpolating new training patients.
    pub neighbours: usize,
    pub train_months: usize,
    pub n_eval_patients: usize,
    pub eval_months: usize,
    pub warmup_months: usize,
    pub actions: ActionSet,
    pub model: ModelConstants,
    pub cohort: CohortSpec,
    pub cluster: ClusterConfig,
    pub fqi: FqiConfig,
    pub ql: QlConfig,
    pub protocol: ProtocolConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: Seeds::default(),
            n_train_patients: 5000,
            neighbours: 10,
            train_months: 30,
            n_eval_patients: 60,
            eval_months: 30,
            warmup_months: 4,
            actions: ActionSet::default(),
            model: ModelConstants::default(),
            cohort: CohortSpec::default(),
            cluster: ClusterConfig::default(),
            fqi: FqiConfig::default(),
            // The unnormalized step diverges on the full 4096-center grid.
            ql: QlConfig {
                normalize_step: true,
                ..QlConfig::default()
            },
            protocol: ProtocolConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_train_patients", self.n_train_patients),
            ("train_months", self.train_months),
            ("n_eval_patients", self.n_eval_patients),
            ("eval_months", self.eval_months),
            ("warmup_months", self.warmup_months),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_train_patients < self.cohort.n_patients {
            return Err(Error::Config(format!(
                "n_train_patients ({}) is smaller than the base population ({})",
                self.n_train_patients, self.cohort.n_patients
            )));
        }
        self.model.validate()?;
        self.cohort.validate()?;
        self.fqi.validate()?;
        self.ql.validate()?;
        Ok(())
    }

    fn sim(&self) -> Result<ErythropoiesisModel> {
        ErythropoiesisModel::new(self.model.clone())
    }
}

fn random_doses(actions: &ActionSet, months: usize, rng: &mut rng::Rng) -> Vec<f64> {
    (0..months)
        .map(|_| actions.dose(rng.random_range(0..actions.len())))
        .collect()
}

fn with_groups(params: Vec<PatientParams>, groups: impl Fn(usize, &PatientParams) -> usize) -> Vec<Patient> {
    params
        .into_iter()
        .enumerate()
        .map(|(id, p)| Patient {
            id,
            cluster: groups(id, &p),
            params: p,
        })
        .collect()
}

/// Samples the base population, augments it to `n_train_patients` and clusters it.
pub fn build_training_cohort(cfg: &ExperimentConfig) -> Result<(Vec<Patient>, ClusterModel)> {
    let seed = cfg.seeds.cohort();
    let base = sample_seed_population(&cfg.cohort, cfg.cohort.n_patients, &mut rng::rng_for(seed, &[0]))?;
    let all = augment_by_interpolation(&base, cfg.n_train_patients, cfg.neighbours, &mut rng::rng_for(seed, &[1]))?;
    let model = cluster_patients(&all, &cfg.cluster, rng::derive_seed(seed, &[2]))?;
    let patients = with_groups(all, |i, _| model.assign[i]);
    Ok((patients, model))
}

/// Fresh patients for evaluation, grouped by the training cluster model.
pub fn build_eval_cohort(cfg: &ExperimentConfig, cluster: &ClusterModel) -> Result<Vec<Patient>> {
    let mut r = rng::rng_for(cfg.seeds.evaluation(), &[0]);
    let params = sample_seed_population(&cfg.cohort, cfg.n_eval_patients, &mut r)?;
    Ok(with_groups(params, |_, p| cluster.assign_patient(p)))
}

/// Simulates every training patient under uniformly random monthly doses.
pub fn generate_experience(cfg: &ExperimentConfig, patients: &[Patient]) -> Result<TransitionDataset> {
    let sim = cfg.sim()?;
    let seed = cfg.seeds.treatment();
    let episodes = patients
        .par_iter()
        .map(|p| {
            let doses = random_doses(&cfg.actions, cfg.train_months, &mut rng::rng_for(seed, &[p.id as u64]));
            let trace = sim.simulate_months(&p.params, &doses, sim.initial_state())?;
            Episode::from_series(&trace.monthly_hb, &doses, p.cluster, &cfg.actions)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = mdp::episodes_to_transitions(&episodes)?;
    data.meta.seed = seed;
    data.meta.cohort_id = format!("train-{:016x}", cfg.seeds.cohort());
    Ok(data)
}

pub fn train_fqi(
    cfg: &ExperimentConfig,
    data: &TransitionDataset,
    cluster: &ClusterModel,
    progress: impl FnMut(&ConvergencePoint),
) -> Result<(PolicyArtifact, Vec<ConvergencePoint>)> {
    let mut fqi = cfg.fqi.clone();
    fqi.ensemble.seed = rng::derive_seed(cfg.seeds.learning(), &[1]);
    let out = fqi_train_with(data, cfg.actions.len(), &fqi, progress)?;
    let artifact = PolicyArtifact::new(cfg.actions.clone(), cluster.clone(), PolicyModel::Fqi(out.model))?;
    Ok((artifact, out.curve))
}

pub fn train_ql(
    cfg: &ExperimentConfig,
    data: &TransitionDataset,
    cluster: &ClusterModel,
) -> Result<(PolicyArtifact, Vec<ConvergencePoint>)> {
    let mut ql = cfg.ql.clone();
    ql.seed = rng::derive_seed(cfg.seeds.learning(), &[2]);
    let out = ql_train(data, cfg.actions.len(), &ql)?;
    let artifact = PolicyArtifact::new(cfg.actions.clone(), cluster.clone(), PolicyModel::QLearning(out.model))?;
    Ok((artifact, out.curve))
}

/// A dosing strategy applied at each monthly review.
#[derive(Clone, Copy, Debug)]
pub enum EvalPolicy<'a> {
    Learned(&'a PolicyArtifact),
    Protocol(&'a ProtocolConfig),
    Constant(f64),
}

/// Random warmup doses per evaluation patient; shared by every policy.
pub fn warmup_doses(cfg: &ExperimentConfig, patients: &[Patient]) -> Vec<Vec<f64>> {
    patients
        .iter()
        .map(|p| random_doses(&cfg.actions, cfg.warmup_months, &mut rng::rng_for(cfg.seeds.evaluation(), &[1, p.id as u64])))
        .collect()
}

/// Runs the warmup and then `eval_months` policy-driven months for every
/// patient, returning the scored months only.
pub fn evaluate_policy(
    name: &str,
    policy: EvalPolicy<'_>,
    patients: &[Patient],
    warmups: &[Vec<f64>],
    cfg: &ExperimentConfig,
) -> Result<(Vec<TraceRow>, MetricsReport)> {
    if warmups.len() != patients.len() || warmups.iter().any(|w| w.is_empty()) {
        return Err(Error::Config("every evaluation patient needs a non-empty warmup".into()));
    }
    if let EvalPolicy::Learned(art) = policy {
        if let Some(p) = patients.iter().find(|p| art.cluster.assign_patient(&p.params) != p.cluster) {
            return Err(Error::Config(format!(
                "patient {} is grouped differently by the policy's cluster model",
                p.id
            )));
        }
    }
    let sim = cfg.sim()?;
    let per_patient = patients
        .par_iter()
        .zip(warmups)
        .map(|(p, warmup)| {
            let mut state = sim.initial_state();
            let mut hb = Vec::with_capacity(warmup.len() + cfg.eval_months);
            let mut doses = Vec::with_capacity(hb.capacity());
            for &d in warmup {
                hb.push(sim.run_month(&mut state, &p.params, d)?);
                doses.push(d);
            }
            // The protocol takes over at the last warmup dose, one review behind.
            let w = hb.len();
            let mut proto = ProtocolState::resume_from(doses[w - 1], w.checked_sub(2).map(|i| hb[i]));
            let mut rows = Vec::with_capacity(cfg.eval_months);
            for month in 1..=cfg.eval_months {
                let k = hb.len() - 1;
                let dose = match policy {
                    EvalPolicy::Learned(art) => art.dose(&StateVec::at(&hb, &doses, k, p.cluster)),
                    EvalPolicy::Protocol(pc) => {
                        let (next, dose, _) = protocol_step(&proto, hb[k], pc)?;
                        proto = next;
                        dose
                    }
                    EvalPolicy::Constant(d) => d,
                };
                let h = sim.run_month(&mut state, &p.params, dose)?;
                hb.push(h);
                doses.push(dose);
                rows.push(TraceRow {
                    patient_id: p.id,
                    month,
                    hb: h,
                    dose,
                    policy: name.to_string(),
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<TraceRow> = per_patient.into_iter().flatten().collect();
    let report = compute_metrics(name, &rows, TRACES_FILE)?;
    Ok((rows, report))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

#[derive(Serialize, Deserialize)]
struct CurveRow<'a> {
    learner: &'a str,
    iteration: usize,
    distance: f64,
}

fn write_curve(path: &Path, curve: &[ConvergencePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_curve(path: &Path) -> Result<Vec<ConvergencePoint>> {
    csv::Reader::from_reader(open(path)?)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Reads and writes stage outputs under one directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Workspace { dir })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn need(&self, file: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(file);
        if !p.exists() {
            return Err(Error::Config(format!(
                "{} not found; run the `{stage}` stage first",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn cluster_model(&self) -> Result<ClusterModel> {
        read_json(&self.need(CLUSTER_FILE, "cohort")?)
    }

    pub fn train_cohort(&self) -> Result<Vec<Patient>> {
        cohort::read_cohort_file(&self.need(TRAIN_COHORT_FILE, "cohort")?)
    }

    pub fn eval_cohort(&self) -> Result<Vec<Patient>> {
        cohort::read_cohort_file(&self.need(EVAL_COHORT_FILE, "cohort")?)
    }

    pub fn dataset(&self, actions: &ActionSet) -> Result<TransitionDataset> {
        let mut data = mdp::read_transitions(open(&self.need(TRANSITIONS_FILE, "simulate")?)?, actions)?;
        data.meta = read_json(&self.need(DATASET_META_FILE, "simulate")?)?;
        Ok(data)
    }

    pub fn policy(&self, file: &str, stage: &str) -> Result<PolicyArtifact> {
        PolicyArtifact::load(&self.need(file, stage)?)
    }

    pub fn optional_policy(&self, file: &str) -> Result<Option<PolicyArtifact>> {
        let p = self.path(file);
        if p.exists() {
            PolicyArtifact::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// Summary lines of a stage, for the caller to print.
pub type StageLog = Vec<String>;

pub fn stage_cohort(cfg: &ExperimentConfig, ws: &Workspace) -> Result<StageLog> {
    let (train, cluster) = build_training_cohort(cfg)?;
    let eval = build_eval_cohort(cfg, &cluster)?;
    cohort::write_cohort_file(&ws.path(TRAIN_COHORT_FILE), &train)?;
    cohort::write_cohort_file(&ws.path(EVAL_COHORT_FILE), &eval)?;
    write_json(&ws.path(CLUSTER_FILE), &cluster)?;
    Ok(vec![format!(
        "cohort: {} training and {} evaluation patients, {} response groups",
        train.len(),
        eval.len(),
        cluster.q
    )])
}

pub fn stage_simulate(cfg: &ExperimentConfig, ws: &Workspace) -> Result<StageLog> {
    let patients = ws.train_cohort()?;
    let data = generate_experience(cfg, &patients)?;
    let mut w = create(&ws.path(TRANSITIONS_FILE))?;
    mdp::write_transitions(&mut w, &data, &cfg.actions)?;
    w.flush().map_err(|e| Error::io(ws.path(TRANSITIONS_FILE), e))?;
    write_json(&ws.path(DATASET_META_FILE), &data.meta)?;
    Ok(vec![format!(
        "simulate: {} transitions kept, {} of {} dropped for Hb above {}",
        data.len(),
        data.meta.filtered,
        data.meta.candidates,
        mdp::HB_FILTER_MAX
    )])
}

pub fn stage_train_fqi(cfg: &ExperimentConfig, ws: &Workspace, progress: impl FnMut(&ConvergencePoint)) -> Result<StageLog> {
    let data = ws.dataset(&cfg.actions)?;
    let cluster = ws.cluster_model()?;
    let (art, curve) = train_fqi(cfg, &data, &cluster, progress)?;
    art.save(&ws.path(FQI_POLICY_FILE))?;
    write_curve(&ws.path(FQI_CONVERGENCE_FILE), &curve)?;
    let last = curve.last().map_or(0.0, |p| p.distance);
    Ok(vec![format!("train-fqi: {} iterations, final distance {last:.3e}", curve.len())])
}

pub fn stage_train_ql(cfg: &ExperimentConfig, ws: &Workspace) -> Result<StageLog> {
    let data = ws.dataset(&cfg.actions)?;
    let cluster = ws.cluster_model()?;
    let (art, curve) = train_ql(cfg, &data, &cluster)?;
    art.save(&ws.path(QL_POLICY_FILE))?;
    write_curve(&ws.path(QL_CONVERGENCE_FILE), &curve)?;
    let last = curve.last().map_or(0.0, |p| p.distance);
    Ok(vec![format!("train-ql: {} updates, final probe distance {last:.3e}", data.len())])
}

/// Evaluates the protocol and every trained policy found in the workspace.
pub fn stage_evaluate(cfg: &ExperimentConfig, ws: &Workspace) -> Result<StageLog> {
    let patients = ws.eval_cohort()?;
    let warmups = warmup_doses(cfg, &patients);
    let fqi = ws.optional_policy(FQI_POLICY_FILE)?;
    let ql = ws.optional_policy(QL_POLICY_FILE)?;
    let mut policies: Vec<(&str, EvalPolicy<'_>)> = Vec::new();
    if let Some(a) = &fqi {
        policies.push((FQI, EvalPolicy::Learned(a)));
    }
    if let Some(a) = &ql {
        policies.push((QL, EvalPolicy::Learned(a)));
    }
    policies.push((PROTOCOL, EvalPolicy::Protocol(&cfg.protocol)));

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (name, policy) in policies {
        let (r, m) = evaluate_policy(name, policy, &patients, &warmups, cfg)?;
        rows.extend(r);
        reports.push(m);
    }
    let mut w = create(&ws.path(TRACES_FILE))?;
    metrics::write_traces(&mut w, &rows)?;
    w.flush().map_err(|e| Error::io(ws.path(TRACES_FILE), e))?;
    write_json(&ws.path(METRICS_FILE), &reports)?;
    Ok(reports.iter().map(summary_line).collect())
}

pub fn summary_line(m: &MetricsReport) -> String {
    format!(
        "{:<9} in range {:5.1}%  mean dose {:.3} (sd {:.3})  abrupt {:4.1}%",
        m.policy,
        100.0 * m.in_range_fraction,
        m.mean_dose,
        m.sd_dose,
        100.0 * m.abrupt_change_fraction
    )
}

#[derive(Serialize)]
struct MonthlyRow<'a> {
    policy: &'a str,
    month: usize,
    hb_mean: f64,
    hb_sd: f64,
}

#[derive(Serialize)]
struct BoxRow<'a> {
    policy: &'a str,
    quantity: &'a str,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
}

#[derive(Serialize)]
struct PatientRow<'a> {
    policy: &'a str,
    patient_id: usize,
    in_range_fraction: f64,
    mean_dose: f64,
}

/// Writes plot-ready tables and the merged convergence curves.
pub fn stage_report(ws: &Workspace) -> Result<StageLog> {
    let reports: Vec<MetricsReport> = read_json(&ws.need(METRICS_FILE, "evaluate")?)?;
    let rows = metrics::read_traces(open(&ws.need(TRACES_FILE, "evaluate")?)?)?;

    let mut monthly = csv::Writer::from_writer(create(&ws.path(MONTHLY_FILE))?);
    let mut boxes = csv::Writer::from_writer(create(&ws.path(BOXPLOT_FILE))?);
    let mut patients = csv::Writer::from_writer(create(&ws.path(PATIENTS_FILE))?);
    for m in &reports {
        for (i, (mean, sd)) in m.per_month_hb_mean.iter().zip(&m.per_month_hb_sd).enumerate() {
            monthly.serialize(MonthlyRow {
                policy: &m.policy,
                month: i + 1,
                hb_mean: *mean,
                hb_sd: *sd,
            })?;
        }
        let mine: Vec<&TraceRow> = rows.iter().filter(|r| r.policy == m.policy).collect();
        for (quantity, values) in [
            ("hb", mine.iter().map(|r| r.hb).collect::<Vec<_>>()),
            ("dose", mine.iter().map(|r| r.dose).collect()),
        ] {
            if values.is_empty() {
                continue;
            }
            let [min, q1, median, q3, max] = metrics::quantiles(&values);
            boxes.serialize(BoxRow {
                policy: &m.policy,
                quantity,
                min,
                q1,
                median,
                q3,
                max,
            })?;
        }
        for ((id, r), d) in m.patient_ids.iter().zip(&m.per_patient_in_range).zip(&m.per_patient_mean_dose) {
            patients.serialize(PatientRow {
                policy: &m.policy,
                patient_id: *id,
                in_range_fraction: *r,
                mean_dose: *d,
            })?;
        }
    }
    for w in [&mut monthly, &mut boxes, &mut patients] {
        w.flush().map_err(|e| Error::io(&ws.dir, e))?;
    }

    let mut conv = csv::Writer::from_writer(create(&ws.path(CONVERGENCE_FILE))?);
    for (learner, file) in [(FQI, FQI_CONVERGENCE_FILE), (QL, QL_CONVERGENCE_FILE)] {
        let p = ws.path(file);
        if p.exists() {
            for c in read_curve(&p)? {
                conv.serialize(CurveRow {
                    learner,
                    iteration: c.iteration,
                    distance: c.distance,
                })?;
            }
        }
    }
    conv.flush().map_err(|e| Error::io(ws.path(CONVERGENCE_FILE), e))?;
    let mut lines = vec![format!(
        "report: wrote {MONTHLY_FILE}, {BOXPLOT_FILE}, {PATIENTS_FILE} and {CONVERGENCE_FILE}"
    )];
    lines.extend(reports.iter().map(summary_line));
    Ok(lines)
}

/// Runs every stage in order, reporting each stage's summary to `log`.
pub fn run_pipeline(cfg: &ExperimentConfig, ws: &Workspace, mut log: impl FnMut(&str)) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let mut emit = |lines: StageLog| lines.iter().for_each(|l| log(l));
    emit(stage_cohort(cfg, ws)?);
    emit(stage_simulate(cfg, ws)?);
    emit(stage_train_fqi(cfg, ws, |_| {})?);
    emit(stage_train_ql(cfg, ws)?);
    // The report repeats the evaluation summary.
    stage_evaluate(cfg, ws)?;
    emit(stage_report(ws)?);
    read_json(&ws.path(METRICS_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Sex;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n_train_patients: 20,
            n_eval_patients: 4,
            train_months: 3,
            eval_months: 5,
            cohort: CohortSpec {
                n_patients: 12,
                ..CohortSpec::default()
            },
            cluster: ClusterConfig {
                q_max: 4,
                restarts: 2,
                ..ClusterConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn experience_counts() {
        let mut cfg = tiny();
        cfg.n_train_patients = 12;
        let (patients, _) = build_training_cohort(&cfg).unwrap();
        let data = generate_experience(&cfg, &patients[..2]).unwrap();
        assert_eq!(data.meta.episodes, 2);
        assert_eq!(data.meta.candidates, 4);
        assert!(data.len() <= 4);
        assert_eq!(data.len() + data.meta.filtered, 4);
    }

    #[test]
    fn experience_is_deterministic() {
        let cfg = tiny();
        let (patients, _) = build_training_cohort(&cfg).unwrap();
        let a = generate_experience(&cfg, &patients).unwrap();
        let b = generate_experience(&cfg, &patients).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        mdp::write_transitions(&mut x, &a, &cfg.actions).unwrap();
        mdp::write_transitions(&mut y, &b, &cfg.actions).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_dose_on_zero_epo_is_flat() {
        let cfg = tiny();
        let params = PatientParams::new(0.0, 0.2, 0.1, Sex::Male, 70.0).unwrap();
        let patients = vec![Patient { id: 0, params, cluster: 0 }];
        let warmups = vec![vec![0.0; 4]];
        let (rows, m) = evaluate_policy("zero", EvalPolicy::Constant(0.0), &patients, &warmups, &cfg).unwrap();
        assert!(rows.iter().all(|r| (r.hb - 2.7).abs() < 1e-12));
        assert_eq!(m.in_range_fraction, 0.0);
        assert_eq!(m.category_fractions.below_10, 1.0);
    }

    #[test]
    fn policies_share_warmups_and_skip_them_in_metrics() {
        let cfg = tiny();
        let (_, cluster) = build_training_cohort(&cfg).unwrap();
        let patients = build_eval_cohort(&cfg, &cluster).unwrap();
        let warmups = warmup_doses(&cfg, &patients);
        assert_eq!(warmups, warmup_doses(&cfg, &patients));
        let (rows, m) = evaluate_policy(PROTOCOL, EvalPolicy::Protocol(&cfg.protocol), &patients, &warmups, &cfg).unwrap();
        assert_eq!(rows.len(), 4 * 5);
        assert_eq!(m.n_observations, 20);
        assert_eq!(m.per_month_hb_mean.len(), 5);
    }

    #[test]
    fn mismatched_cluster_model_rejected() {
        let cfg = tiny();
        let (_, cluster) = build_training_cohort(&cfg).unwrap();
        let mut patients = build_eval_cohort(&cfg, &cluster).unwrap();
        let net = crate::qlearning::RbfNet::grid(2, 1.1, [(0.0, 1.0); mdp::STATE_DIM]).unwrap();
        let art = PolicyArtifact::new(
            cfg.actions.clone(),
            cluster.clone(),
            PolicyModel::QLearning(crate::qlearning::RbfQModel::zeros(net, cfg.actions.len())),
        )
        .unwrap();
        patients[0].cluster = (patients[0].cluster + 1) % cluster.q;
        let warmups = warmup_doses(&cfg, &patients);
        let res = evaluate_policy(QL, EvalPolicy::Learned(&art), &patients, &warmups, &cfg);
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn config_parsing() {
        let cfg = ExperimentConfig::from_toml("n_train_patients = 100\n[seeds]\nmaster = 3\n[model]\ndose_scale = 9.0\n").unwrap();
        assert_eq!(cfg.n_train_patients, 100);
        assert_eq!(cfg.model.dose_scale, 9.0);
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("warmup_months = 0"), Err(Error::Config(_))));
        assert_ne!(cfg.seeds.cohort(), cfg.seeds.evaluation());
    }
}
