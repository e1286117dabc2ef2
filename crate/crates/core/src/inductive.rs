//! Mastery inference for students unseen during training, from their
//! logs alone and with frozen parameters.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cagt::{self, accumulation_coefficient, TargetSets};
use crate::dataio::{Dataset, IdMap, QMatrix, ResponseLog};
use crate::diffcore::{sigmoid, Mat, Tape, Var};
use crate::error::{IcdmError, Result};
use crate::graph::involved_concepts;
use crate::interaction::{lightgcn_weights, propagate_half, IfKind};
use crate::model::{Model, TrainGraph};
use crate::snapshot::ModelSnapshot;

/// Logs of new students over the snapshot's exercise index space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewStudentBatch {
    /// Raw ids, one per student row.
    pub students: Vec<u64>,
    /// `(exercise, score)` per student.
    pub logs: Vec<Vec<(usize, u8)>>,
}

impl NewStudentBatch {
    /// Students get raw ids `0..n`.
    pub fn new(logs: Vec<Vec<(usize, u8)>>) -> Self {
        Self {
            students: (0..logs.len() as u64).collect(),
            logs,
        }
    }

    /// Groups raw `(student, exercise, score)` triplets; students are
    /// ordered by raw id.
    pub fn from_raw(triplets: &[(u64, u64, u8)], exercises: &IdMap) -> Result<Self> {
        let mut by: BTreeMap<u64, Vec<(usize, u8)>> = BTreeMap::new();
        for &(s, e, score) in triplets {
            let j = exercises.dense(e).ok_or(IcdmError::UnknownExercise(e))?;
            by.entry(s).or_default().push((j, score));
        }
        Ok(Self {
            students: by.keys().copied().collect(),
            logs: by.into_values().collect(),
        })
    }

    /// Every student of `ds`, including ones without logs.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            students: ds.students.raw_ids().to_vec(),
            logs: ds
                .logs_by_student()
                .into_iter()
                .map(|ls| ls.into_iter().map(|l| (l.exercise, l.score)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.logs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logs.is_empty()
    }

    pub fn n_logs(&self) -> usize {
        self.logs.iter().map(Vec::len).sum()
    }

    /// Batch row of a raw student id.
    pub fn row_of(&self, raw: u64) -> Option<usize> {
        self.students.iter().position(|&s| s == raw)
    }

    fn validate(&self, n_exercises: usize) -> Result<()> {
        if self.students.len() != self.logs.len() {
            return Err(IcdmError::Usage("student ids and log lists differ in length".into()));
        }
        for (raw, logs) in self.students.iter().zip(&self.logs) {
            if logs.is_empty() {
                return Err(IcdmError::NoEvidence(*raw));
            }
            let mut seen = Vec::with_capacity(logs.len());
            for &(j, score) in logs {
                if j >= n_exercises {
                    return Err(IcdmError::UnknownExercise(j as u64));
                }
                if score > 1 {
                    return Err(IcdmError::Validation(format!("score {score} is not binary")));
                }
                seen.push(j);
            }
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(IcdmError::Validation(format!("student {raw} answers an exercise twice")));
            }
        }
        Ok(())
    }
}

/// Frozen GLIF state over all exercises and concepts.
#[derive(Debug, Clone)]
struct GlifFrozen {
    h_e: Mat,
    con: Mat,
    h_c: Mat,
    exercise_degree: Vec<usize>,
}

/// Exercise- and concept-side quantities computed once from the training
/// graph in eval mode, reused by every inference call.
#[derive(Debug, Clone)]
pub struct InferenceContext<'m> {
    model: &'m Model,
    q: QMatrix,
    /// `[depth]` full tables, depths `0..K`.
    right_levels: Vec<Mat>,
    wrong_levels: Vec<Mat>,
    concept_levels: Vec<Mat>,
    /// Z-wide difficulty per exercise.
    diff: Mat,
    glif: Option<GlifFrozen>,
}

impl<'m> InferenceContext<'m> {
    pub fn new(model: &'m Model, graph: &TrainGraph) -> Result<Self> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let targets = TargetSets::all(&graph.scg);
        let agg = model.config.aggregation(false);
        let (views, chains) = cagt::aggregate(&mut tape, &model.store, &model.cagt, &graph.scg, &targets, &agg, &mut rng)?;
        let lat = cagt::generate(&mut tape, &model.store, &model.cagt, &views)?;
        let k = agg.k;
        let levels = |tape: &Tape, vals: &[Var]| vals[..k].iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        let right_levels = levels(&tape, &chains.right.right_levels.values);
        let wrong_levels = levels(&tape, &chains.wrong.right_levels.values);
        let concept_levels = levels(&tape, &chains.desired.right_levels.values);

        let h_e = cagt::exercise_latent(&mut tape, lat.h_r, lat.h_w)?;
        let (diff, glif) = if model.kind() == IfKind::Glif {
            let all_e: Vec<usize> = (0..model.n_exercises).collect();
            let we = lightgcn_weights(&all_e, &graph.bipartite.exercises, |v| graph.bipartite.student_degree(v), |v| v);
            let pe = propagate_half(&mut tape, h_e, lat.h_s, we)?;
            let groups: Vec<&[usize]> = (0..model.n_exercises).map(|j| graph.q.concepts(j)).collect();
            let con = tape.segment_mean(lat.h_c, &groups)?;
            let diff_d = tape.hadamard(pe, con)?;
            let diff = model.cagt.t_exercise.apply(&mut tape, &model.store, diff_d)?;
            let frozen = GlifFrozen {
                h_e: tape.value(h_e).clone(),
                con: tape.value(con).clone(),
                h_c: tape.value(lat.h_c).clone(),
                exercise_degree: (0..model.n_exercises).map(|e| graph.bipartite.exercise_degree(e)).collect(),
            };
            (tape.value(diff).clone(), Some(frozen))
        } else {
            let diff = model.cagt.t_exercise.apply(&mut tape, &model.store, h_e)?;
            (tape.value(diff).clone(), None)
        };
        Ok(Self {
            model,
            q: graph.q.clone(),
            right_levels,
            wrong_levels,
            concept_levels,
            diff,
            glif,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// `Σ_{k≥1} mean(level[k−1] over group)/(k+1)`; the depth-0 self term
    /// of a new student is zero.
    fn student_view(tape: &mut Tape, levels: &[Mat], groups: &[Vec<usize>]) -> Result<Var> {
        let d = levels[0].cols();
        let mut acc = tape.constant(Mat::zeros(groups.len(), d))?;
        for (i, level) in levels.iter().enumerate() {
            let table = tape.constant(level.clone())?;
            let x = tape.segment_mean(table, groups)?;
            let term = tape.scale(x, accumulation_coefficient(i + 1))?;
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    }

    /// Width-d latent per batch row, GLIF-propagated when applicable.
    fn student_state(&self, tape: &mut Tape, batch: &NewStudentBatch) -> Result<Var> {
        batch.validate(self.model.n_exercises)?;
        let pick = |want: Option<u8>| -> Vec<Vec<usize>> {
            batch
                .logs
                .iter()
                .map(|ls| ls.iter().filter(|l| want.is_none_or(|w| l.1 == w)).map(|l| l.0).collect())
                .collect()
        };
        let right = pick(Some(1));
        let wrong = pick(Some(0));
        let answered = pick(None);
        let desired: Vec<Vec<usize>> = answered
            .iter()
            .map(|ex| involved_concepts(&self.q, ex.iter().copied()))
            .collect();

        let vr = Self::student_view(tape, &self.right_levels, &right)?;
        let vw = Self::student_view(tape, &self.wrong_levels, &wrong)?;
        let vc = Self::student_view(tape, &self.concept_levels, &desired)?;
        let (h_s, _) = cagt::fuse_views(tape, &self.model.store, &self.model.cagt.gen_student, &[vr, vw, vc])?;
        match &self.glif {
            None => Ok(h_s),
            Some(g) => {
                let mut offsets = vec![0];
                let mut cols = Vec::new();
                let mut weights = Vec::new();
                for ex in &answered {
                    let ds = ex.len() as f64;
                    for &e in ex {
                        cols.push(e);
                        weights.push(1.0 / (ds * g.exercise_degree[e].max(1) as f64).sqrt());
                    }
                    offsets.push(cols.len());
                }
                let table = tape.constant(g.h_e.clone())?;
                let w = crate::diffcore::SparseRows::new(offsets, cols, weights);
                propagate_half(tape, h_s, table, w)
            }
        }
    }

    /// Mastery rows in `[0,1]`, one per batch student.
    pub fn infer_mastery(&self, batch: &NewStudentBatch) -> Result<Mat> {
        let mut tape = Tape::new();
        let state = self.student_state(&mut tape, batch)?;
        match &self.glif {
            Some(g) => Ok(self.model.glif_mastery(tape.value(state), &g.h_c)),
            None => {
                let z = self.model.cagt.t_student.apply(&mut tape, &self.model.store, state)?;
                Ok(tape.value(z).map(sigmoid))
            }
        }
    }

    /// Probabilities for `(batch row, exercise)` targets.
    pub fn predict_new(&self, batch: &NewStudentBatch, targets: &[(usize, usize)]) -> Result<Vec<f64>> {
        for &(row, e) in targets {
            if row >= batch.len() {
                return Err(IcdmError::Usage(format!("target row {row} outside the batch")));
            }
            if e >= self.model.n_exercises {
                return Err(IcdmError::UnknownExercise(e as u64));
            }
        }
        let mut tape = Tape::new();
        let state = self.student_state(&mut tape, batch)?;
        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let ex: Vec<usize> = targets.iter().map(|t| t.1).collect();
        let mas = match &self.glif {
            Some(g) => {
                let ps = tape.row_gather(state, rows)?;
                let con = tape.constant(g.con.gather_rows(&ex))?;
                let m = tape.hadamard(ps, con)?;
                self.model.cagt.t_student.apply(&mut tape, &self.model.store, m)?
            }
            None => {
                let z = self.model.cagt.t_student.apply(&mut tape, &self.model.store, state)?;
                tape.row_gather(z, rows)?
            }
        };
        let diff = tape.constant(self.diff.gather_rows(&ex))?;
        let mut mask = Mat::zeros(ex.len(), self.q.n_concepts());
        for (i, &e) in ex.iter().enumerate() {
            for &c in self.q.concepts(e) {
                mask.set(i, c, 1.0);
            }
        }
        let mask = tape.constant(mask)?;
        let y = self.model.head.forward(&mut tape, &self.model.store, mas, diff, mask)?;
        Ok(tape.value(y).as_slice().to_vec())
    }

    /// Predictions for logs whose `student` field is a batch row.
    pub fn predict_logs(&self, batch: &NewStudentBatch, logs: &[ResponseLog]) -> Result<Vec<f64>> {
        let targets: Vec<(usize, usize)> = logs.iter().map(|l| (l.student, l.exercise)).collect();
        self.predict_new(batch, &targets)
    }
}

/// One-shot inference straight from a snapshot.
pub fn infer_mastery(snap: &ModelSnapshot, batch: &NewStudentBatch) -> Result<Mat> {
    let graph = snap.graph()?;
    InferenceContext::new(&snap.model, &graph)?.infer_mastery(batch)
}

pub fn predict_new(snap: &ModelSnapshot, batch: &NewStudentBatch, targets: &[(usize, usize)]) -> Result<Vec<f64>> {
    let graph = snap.graph()?;
    InferenceContext::new(&snap.model, &graph)?.predict_new(batch, targets)
}
