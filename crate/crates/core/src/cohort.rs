//! Synthetic patient populations.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sim::{PatientParams, Sex};

/// Sampling statistics of a synthetic population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    /// Size of the sampled base population before augmentation.
    pub n_patients: usize,
    pub ep_mean: f64,
    pub ep_sd: f64,
    pub cr_mean: f64,
    pub cr_sd: f64,
    pub cp_mean: f64,
    pub cp_sd: f64,
    pub weight_mean: f64,
    pub weight_sd: f64,
    pub sex: Sex,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_patients: 69,
            ep_mean: 0.3588,
            ep_sd: 0.0753,
            cr_mean: 0.1372,
            cr_sd: 0.0520,
            cp_mean: 0.2014,
            cp_sd: 0.0640,
            weight_mean: 67.97,
            weight_sd: 12.61,
            sex: Sex::Male,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("ep", self.ep_mean, self.ep_sd),
            ("cr", self.cr_mean, self.cr_sd),
            ("cp", self.cp_mean, self.cp_sd),
            ("weight", self.weight_mean, self.weight_sd),
        ];
        for (name, mean, sd) in pairs {
            if !(mean > 0.0 && mean.is_finite() && sd >= 0.0 && sd.is_finite()) {
                return Err(Error::Config(format!(
                    "{name}: need mean > 0 and sd >= 0, got {mean} ± {sd}"
                )));
            }
        }
        Ok(())
    }
}

/// Normal draw resampled until it reaches 10% of the mean.
fn truncated_normal(mean: f64, sd: f64, rng: &mut Rng) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, sd).expect("validated sd");
    loop {
        let v = normal.sample(rng);
        if v >= 0.1 * mean {
            return v;
        }
    }
}

/// Draws `size` independent patients from the truncated normals of `spec`.
pub fn sample_seed_population(spec: &CohortSpec, size: usize, rng: &mut Rng) -> Result<Vec<PatientParams>> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::Config("population size must be at least 1".into()));
    }
    (0..size)
        .map(|_| {
            let ep = truncated_normal(spec.ep_mean, spec.ep_sd, rng);
            let cp = truncated_normal(spec.cp_mean, spec.cp_sd, rng);
            let cr = truncated_normal(spec.cr_mean, spec.cr_sd, rng);
            let weight = truncated_normal(spec.weight_mean, spec.weight_sd, rng);
            PatientParams::new(ep, cp, cr, spec.sex, weight)
        })
        .collect()
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Indices of the `k` nearest other members of `base` to `base[i]` in
/// (Ep, Cp, Cr) space, nearest first, ties by index.
fn nearest_neighbours(base: &[PatientParams], i: usize, k: usize) -> Vec<usize> {
    let origin = base[i].response_vector();
    let mut others: Vec<(f64, usize)> = base
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, p)| (sq_dist(&origin, &p.response_vector()), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Grows `base` to `target_n` patients. Each new patient is a random convex
/// combination of a random base patient and one of its `k` nearest neighbours.
pub fn augment_by_interpolation(
    base: &[PatientParams],
    target_n: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<PatientParams>> {
    if k == 0 || base.len() < k + 1 {
        return Err(Error::Config(format!(
            "augmentation with {k} neighbours needs at least {} base patients, got {}",
            k + 1,
            base.len()
        )));
    }
    if target_n < base.len() {
        return Err(Error::Config(format!(
            "target size {target_n} is smaller than the base population {}",
            base.len()
        )));
    }
    let neighbours: Vec<Vec<usize>> = (0..base.len()).map(|i| nearest_neighbours(base, i, k)).collect();
    let mut out = base.to_vec();
    while out.len() < target_n {
        let i = rng.random_range(0..base.len());
        let j = neighbours[i][rng.random_range(0..k)];
        let lambda: f64 = rng.random();
        let (a, b) = (&base[i], &base[j]);
        let mix = |x: f64, y: f64| lambda * x + (1.0 - lambda) * y;
        out.push(PatientParams {
            ep: mix(a.ep, b.ep),
            cp: mix(a.cp, b.cp),
            cr: mix(a.cr, b.cr),
            mch: a.mch,
            weight_kg: mix(a.weight_kg, b.weight_kg),
        });
    }
    Ok(out)
}

/// A patient together with its response group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: usize,
    pub params: PatientParams,
    pub cluster: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PatientRow {
    patient_id: usize,
    ep: f64,
    cp: f64,
    cr: f64,
    mch: f64,
    weight_kg: f64,
    cluster: usize,
}

pub fn write_cohort<W: Write>(out: W, patients: &[Patient]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in patients {
        w.serialize(PatientRow {
            patient_id: p.id,
            ep: p.params.ep,
            cp: p.params.cp,
            cr: p.params.cr,
            mch: p.params.mch,
            weight_kg: p.params.weight_kg,
            cluster: p.cluster,
        })?;
    }
    w.flush().map_err(|e| Error::io("<cohort csv>", e))?;
    Ok(())
}

pub fn read_cohort<R: Read>(input: R) -> Result<Vec<Patient>> {
    let mut r = csv::Reader::from_reader(input);
    let expected = ["patient_id", "ep", "cp", "cr", "mch", "weight_kg", "cluster"];
    if r.headers()?.iter().ne(expected) {
        return Err(Error::Input(format!(
            "cohort header must be {}",
            expected.join(",")
        )));
    }
    r.deserialize::<PatientRow>()
        .map(|row| {
            let row = row?;
            let params = PatientParams {
                ep: row.ep,
                cp: row.cp,
                cr: row.cr,
                mch: row.mch,
                weight_kg: row.weight_kg,
            };
            params.validate()?;
            Ok(Patient {
                id: row.patient_id,
                params,
                cluster: row.cluster,
            })
        })
        .collect()
}

pub fn write_cohort_file(path: &Path, patients: &[Patient]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort(f, patients)
}

pub fn read_cohort_file(path: &Path) -> Result<Vec<Patient>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;
    use rand::SeedableRng;

    #[test]
    fn sample_mean_within_standard_error() {
        let spec = CohortSpec::default();
        let mut rng = Rng::seed_from_u64(21);
        let pop = sample_seed_population(&spec, 10_000, &mut rng).unwrap();
        let mean = pop.iter().map(|p| p.ep).sum::<f64>() / pop.len() as f64;
        let bound = 3.0 * spec.ep_sd / (10_000f64).sqrt();
        assert!((mean - spec.ep_mean).abs() <= bound, "{mean}");
        assert!(pop.iter().all(|p| p.ep >= 0.1 * spec.ep_mean && p.cr >= 0.1 * spec.cr_mean));
    }

    #[test]
    fn zero_sd_gives_identical_patients() {
        let spec = CohortSpec {
            ep_sd: 0.0,
            cr_sd: 0.0,
            cp_sd: 0.0,
            weight_sd: 0.0,
            ..CohortSpec::default()
        };
        let pop = sample_seed_population(&spec, 5, &mut Rng::seed_from_u64(0)).unwrap();
        for p in pop {
            assert_eq!((p.ep, p.cp, p.cr, p.weight_kg), (0.3588, 0.2014, 0.1372, 67.97));
        }
    }

    #[test]
    fn female_cohort_uses_female_mch() {
        let spec = CohortSpec {
            sex: Sex::Female,
            ..CohortSpec::default()
        };
        let pop = sample_seed_population(&spec, 50, &mut Rng::seed_from_u64(1)).unwrap();
        assert!(pop.iter().all(|p| p.mch == 2.4));
    }

    #[test]
    fn augmentation_sizes() {
        let mut rng = Rng::seed_from_u64(2);
        let base = sample_seed_population(&CohortSpec::default(), 69, &mut rng).unwrap();
        let same = augment_by_interpolation(&base, 69, 10, &mut rng).unwrap();
        assert_eq!(same, base);
        let grown = augment_by_interpolation(&base, 5000, 10, &mut rng).unwrap();
        assert_eq!(grown.len() - base.len(), 4931);
        assert_eq!(&grown[..69], &base[..]);
        assert!(matches!(
            augment_by_interpolation(&base[..10], 20, 10, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn neighbours_by_brute_force() {
        let mk = |ep| PatientParams::new(ep, 0.2, 0.1, Sex::Male, 70.0).unwrap();
        let base: Vec<_> = [0.1, 0.5, 0.2, 0.9, 0.25].into_iter().map(mk).collect();
        assert_eq!(nearest_neighbours(&base, 0, 2), vec![2, 4]);
        assert_eq!(nearest_neighbours(&base, 3, 1), vec![1]);
    }

    #[test]
    fn cohort_csv_roundtrip() {
        let mut rng = Rng::seed_from_u64(3);
        let pop = sample_seed_population(&CohortSpec::default(), 4, &mut rng).unwrap();
        let patients: Vec<Patient> = pop
            .into_iter()
            .enumerate()
            .map(|(id, params)| Patient { id, params, cluster: id % 2 })
            .collect();
        let mut buf = Vec::new();
        write_cohort(&mut buf, &patients).unwrap();
        assert!(buf.starts_with(b"patient_id,ep,cp,cr,mch,weight_kg,cluster\n"));
        assert_eq!(read_cohort(&buf[..]).unwrap(), patients);
    }

    proptest! {
        #[test]
        fn children_lie_between_parents(seed in any::<u64>()) {
            let mut rng = Rng::seed_from_u64(seed);
            let base = sample_seed_population(&CohortSpec::default(), 12, &mut rng).unwrap();
            let lo = |f: fn(&PatientParams) -> f64| base.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = |f: fn(&PatientParams) -> f64| base.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            let grown = augment_by_interpolation(&base, 60, 10, &mut rng).unwrap();
            for p in &grown {
                prop_assert!(p.validate().is_ok());
                let fields: [fn(&PatientParams) -> f64; 4] = [|p| p.ep, |p| p.cp, |p| p.cr, |p| p.weight_kg];
                for f in fields {
                    prop_assert!(f(p) >= lo(f) && f(p) <= hi(f));
                }
            }
        }

        #[test]
        fn sampling_is_deterministic(seed in any::<u64>()) {
            let spec = CohortSpec::default();
            let a = sample_seed_population(&spec, 20, &mut Rng::seed_from_u64(seed)).unwrap();
            let b = sample_seed_population(&spec, 20, &mut Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
