//! DINA-style synthetic response data with known binary mastery.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, IdMap, QMatrix, ResponseLog};
use crate::error::{IcdmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    /// Mean number of concepts per exercise, in `[1, n_concepts]`.
    pub q_density: f64,
    pub guess: f64,
    pub slip: f64,
    pub logs_per_student: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_students: 200,
            n_exercises: 50,
            n_concepts: 6,
            q_density: 1.5,
            guess: 0.0,
            slip: 0.0,
            logs_per_student: 30,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_students == 0 || self.n_exercises == 0 || self.n_concepts == 0 {
            return Err(IcdmError::Config("synthetic counts must be at least 1".into()));
        }
        for (name, p) in [("guess", self.guess), ("slip", self.slip)] {
            if !(0.0..0.5).contains(&p) {
                return Err(IcdmError::Config(format!("{name} = {p} must lie in [0, 0.5)")));
            }
        }
        if !(1.0..=self.n_concepts as f64).contains(&self.q_density) {
            return Err(IcdmError::Config(format!(
                "q_density = {} must lie in [1, {}]",
                self.q_density, self.n_concepts
            )));
        }
        if self.logs_per_student == 0 || self.logs_per_student > self.n_exercises {
            return Err(IcdmError::Config(format!(
                "logs_per_student = {} must lie in [1, {}]",
                self.logs_per_student, self.n_exercises
            )));
        }
        Ok(())
    }
}

/// Generated responses with the mastery matrix that produced them.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    /// `truth[s][k]` is 1 iff student `s` masters concept `k`.
    pub truth: Vec<Vec<u8>>,
}

/// Each exercise gets `1 + Binomial(Z−1, (q_density−1)/(Z−1))` distinct
/// concepts; each student answers `logs_per_student` distinct exercises.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = cfg.n_concepts;
    let extra_p = if z > 1 { (cfg.q_density - 1.0) / (z - 1) as f64 } else { 0.0 };

    let truth: Vec<Vec<u8>> = (0..cfg.n_students)
        .map(|_| (0..z).map(|_| rng.gen_bool(0.5) as u8).collect())
        .collect();

    let q_rows: Vec<Vec<usize>> = (0..cfg.n_exercises)
        .map(|_| {
            let extra = (0..z - 1).filter(|_| rng.gen_bool(extra_p)).count();
            let mut row = sample(&mut rng, z, 1 + extra).into_vec();
            row.sort_unstable();
            row
        })
        .collect();

    let mut logs = Vec::with_capacity(cfg.n_students * cfg.logs_per_student);
    for (s, mastery) in truth.iter().enumerate() {
        let mut picked = sample(&mut rng, cfg.n_exercises, cfg.logs_per_student).into_vec();
        picked.sort_unstable();
        for j in picked {
            let all = q_rows[j].iter().all(|&k| mastery[k] == 1);
            let p = if all { 1.0 - cfg.slip } else { cfg.guess };
            logs.push(ResponseLog::new(s, j, rng.gen_bool(p) as u8));
        }
    }

    let dataset = Dataset::new(
        logs,
        QMatrix::from_rows(z, q_rows)?,
        IdMap::identity(cfg.n_students),
        IdMap::identity(cfg.n_exercises),
        IdMap::identity(z),
    )?;
    Ok(SynthData { dataset, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_responses_follow_mastery() {
        let cfg = SynthConfig {
            n_students: 50,
            n_exercises: 30,
            n_concepts: 5,
            q_density: 2.0,
            logs_per_student: 20,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for l in &data.dataset.logs {
            let all = data.dataset.q.concepts(l.exercise).iter().all(|&k| data.truth[l.student][k] == 1);
            assert_eq!(l.score, all as u8);
        }
        assert_eq!(data.dataset.logs.len(), 50 * 20);
    }

    #[test]
    fn slip_rate_is_recovered() {
        let cfg = SynthConfig {
            n_students: 1,
            n_exercises: 10_000,
            n_concepts: 1,
            q_density: 1.0,
            slip: 0.1,
            logs_per_student: 10_000,
            seed: 3,
            ..SynthConfig::default()
        };
        let mut data = generate(&cfg).unwrap();
        let mut seed = cfg.seed;
        while data.truth[0][0] == 0 {
            seed += 1;
            data = generate(&SynthConfig { seed, ..cfg.clone() }).unwrap();
        }
        let rate = data.dataset.logs.iter().filter(|l| l.score == 1).count() as f64 / 10_000.0;
        assert!((rate - 0.9).abs() < 0.02, "{rate}");
    }

    #[test]
    fn deterministic_and_density() {
        let cfg = SynthConfig {
            n_exercises: 2000,
            q_density: 2.5,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset.logs, b.dataset.logs);
        assert_eq!(a.truth, b.truth);
        let mean = a.dataset.q.nnz() as f64 / 2000.0;
        assert!((mean - 2.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn rejects_bad_config() {
        for bad in [
            SynthConfig { guess: 0.5, ..SynthConfig::default() },
            SynthConfig { n_concepts: 0, ..SynthConfig::default() },
            SynthConfig { logs_per_student: 51, ..SynthConfig::default() },
            SynthConfig { q_density: 0.5, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate(&bad), Err(IcdmError::Config(_))));
        }
    }
}
