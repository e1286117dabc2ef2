//! Response logs, Q-matrices and train/test partitioning.
//!
//! Raw ids from the CSV files are remapped to dense 0-based indices sorted
//! by raw id. The mapping travels with every [`Dataset`] (and later with
//! the model snapshot) so that logs of previously unseen students can
//! reference the same exercises and concepts.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{IcdmError, Result};

/// One (student, exercise, score) triplet over dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResponseLog {
    pub student: usize,
    pub exercise: usize,
    /// 1 for a correct answer, 0 for a wrong one.
    pub score: u8,
}

impl ResponseLog {
    pub fn new(student: usize, exercise: usize, score: u8) -> Self {
        Self {
            student,
            exercise,
            score,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.score == 1
    }
}

/// Bidirectional map between raw ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl IdMap {
    /// Builds a map whose dense order follows ascending raw id.
    pub fn from_raw<I: IntoIterator<Item = u64>>(ids: I) -> Self {
        let sorted: BTreeSet<u64> = ids.into_iter().collect();
        Self::from_ordered(sorted.into_iter().collect())
    }

    /// Keeps the given order; duplicates are not allowed.
    pub fn from_ordered(raw: Vec<u64>) -> Self {
        let index = raw.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        Self { raw, index }
    }

    /// Identity map `0..n`.
    pub fn identity(n: usize) -> Self {
        Self::from_ordered((0..n as u64).collect())
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dense(&self, raw: u64) -> Option<usize> {
        self.index.get(&raw).copied()
    }

    pub fn raw(&self, dense: usize) -> u64 {
        self.raw[dense]
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.raw
    }
}

/// Binary exercise × concept tagging, stored as sorted concept lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QMatrix {
    n_concepts: usize,
    rows: Vec<Vec<usize>>,
}

impl QMatrix {
    /// Every exercise must be tagged with at least one concept.
    pub fn from_rows(n_concepts: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut clean = Vec::with_capacity(rows.len());
        for (j, row) in rows.into_iter().enumerate() {
            let set: BTreeSet<usize> = row.into_iter().collect();
            if set.is_empty() {
                return Err(IcdmError::Validation(format!(
                    "exercise {j} is not tagged with any concept"
                )));
            }
            if let Some(&z) = set.iter().find(|&&z| z >= n_concepts) {
                return Err(IcdmError::Validation(format!(
                    "exercise {j} references concept {z} outside 0..{n_concepts}"
                )));
            }
            clean.push(set.into_iter().collect());
        }
        Ok(Self {
            n_concepts,
            rows: clean,
        })
    }

    /// Builds from a dense 0/1 matrix.
    pub fn from_dense(dense: &[Vec<u8>]) -> Result<Self> {
        let n_concepts = dense.first().map_or(0, |r| r.len());
        let mut rows = Vec::with_capacity(dense.len());
        for (j, row) in dense.iter().enumerate() {
            if row.len() != n_concepts {
                return Err(IcdmError::Validation(format!(
                    "Q-matrix row {j} has {} entries, expected {n_concepts}",
                    row.len()
                )));
            }
            let mut concepts = Vec::new();
            for (z, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => concepts.push(z),
                    other => {
                        return Err(IcdmError::Validation(format!(
                            "Q-matrix entry ({j},{z}) = {other} is not binary"
                        )))
                    }
                }
            }
            rows.push(concepts);
        }
        Self::from_rows(n_concepts, rows)
    }

    pub fn n_exercises(&self) -> usize {
        self.rows.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn concepts(&self, exercise: usize) -> &[usize] {
        &self.rows[exercise]
    }

    pub fn get(&self, exercise: usize, concept: usize) -> bool {
        self.rows[exercise].binary_search(&concept).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Dense 0/1 mask row for `exercise`.
    pub fn mask(&self, exercise: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.n_concepts];
        for &z in &self.rows[exercise] {
            m[z] = 1.0;
        }
        m
    }
}

/// Ternary student × exercise matrix: 1 right, −1 wrong, 0 unobserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingMatrix {
    n_exercises: usize,
    rows: Vec<Vec<(usize, i8)>>,
}

impl RatingMatrix {
    pub fn from_logs(n_students: usize, n_exercises: usize, logs: &[ResponseLog]) -> Self {
        let mut rows = vec![Vec::new(); n_students];
        for log in logs {
            let v = if log.is_correct() { 1 } else { -1 };
            rows[log.student].push((log.exercise, v));
        }
        for row in &mut rows {
            row.sort_unstable();
        }
        Self { n_exercises, rows }
    }

    pub fn n_students(&self) -> usize {
        self.rows.len()
    }

    pub fn n_exercises(&self) -> usize {
        self.n_exercises
    }

    /// Sorted `(exercise, ±1)` entries of one student.
    pub fn row(&self, student: usize) -> &[(usize, i8)] {
        &self.rows[student]
    }

    pub fn get(&self, student: usize, exercise: usize) -> i8 {
        let row = &self.rows[student];
        match row.binary_search_by_key(&exercise, |&(e, _)| e) {
            Ok(i) => row[i].1,
            Err(_) => 0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Summary statistics of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub students: usize,
    pub exercises: usize,
    pub concepts: usize,
    pub logs: usize,
    pub sparsity: f64,
    pub average_correct_rate: f64,
    pub q_density: f64,
}

/// Response logs plus the Q-matrix and the raw-id mappings.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub logs: Vec<ResponseLog>,
    pub q: QMatrix,
    pub students: IdMap,
    pub exercises: IdMap,
    pub concepts: IdMap,
}

impl Dataset {
    /// Validates ranges, scores and (student, exercise) uniqueness.
    pub fn new(
        logs: Vec<ResponseLog>,
        q: QMatrix,
        students: IdMap,
        exercises: IdMap,
        concepts: IdMap,
    ) -> Result<Self> {
        if q.n_exercises() != exercises.len() {
            return Err(IcdmError::Validation(format!(
                "Q-matrix has {} rows but {} exercises are mapped",
                q.n_exercises(),
                exercises.len()
            )));
        }
        if q.n_concepts() != concepts.len() {
            return Err(IcdmError::Validation(format!(
                "Q-matrix has {} columns but {} concepts are mapped",
                q.n_concepts(),
                concepts.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(logs.len());
        for log in &logs {
            if log.student >= students.len() || log.exercise >= exercises.len() {
                return Err(IcdmError::Validation(format!(
                    "log ({}, {}) outside {}×{}",
                    log.student,
                    log.exercise,
                    students.len(),
                    exercises.len()
                )));
            }
            if log.score > 1 {
                return Err(IcdmError::Validation(format!(
                    "score {} is not binary",
                    log.score
                )));
            }
            if !seen.insert((log.student, log.exercise)) {
                return Err(IcdmError::Validation(format!(
                    "duplicate log for student {} on exercise {}",
                    students.raw(log.student),
                    exercises.raw(log.exercise)
                )));
            }
        }
        Ok(Self {
            logs,
            q,
            students,
            exercises,
            concepts,
        })
    }

    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    pub fn n_exercises(&self) -> usize {
        self.exercises.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn rating_matrix(&self) -> RatingMatrix {
        RatingMatrix::from_logs(self.n_students(), self.n_exercises(), &self.logs)
    }

    pub fn stats(&self) -> DatasetStats {
        let students = self.n_students();
        let exercises = self.n_exercises();
        let logs = self.logs.len();
        let cells = students * exercises;
        let sparsity = if cells == 0 {
            0.0
        } else {
            logs as f64 / cells as f64
        };
        let average_correct_rate = if logs == 0 {
            0.0
        } else {
            self.logs.iter().filter(|l| l.is_correct()).count() as f64 / logs as f64
        };
        let q_density = if exercises == 0 {
            0.0
        } else {
            self.q.nnz() as f64 / exercises as f64
        };
        DatasetStats {
            students,
            exercises,
            concepts: self.n_concepts(),
            logs,
            sparsity,
            average_correct_rate,
            q_density,
        }
    }

    /// Same id space, different logs.
    pub fn with_logs(&self, logs: Vec<ResponseLog>) -> Dataset {
        Dataset {
            logs,
            q: self.q.clone(),
            students: self.students.clone(),
            exercises: self.exercises.clone(),
            concepts: self.concepts.clone(),
        }
    }

    /// Keeps only `keep` students (dense indices of `self`), re-indexed
    /// densely in ascending order of their current index.
    pub fn restrict_students(&self, keep: &[usize]) -> Dataset {
        let mut keep: Vec<usize> = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut remap = vec![usize::MAX; self.n_students()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let logs = self
            .logs
            .iter()
            .filter(|l| remap[l.student] != usize::MAX)
            .map(|l| ResponseLog::new(remap[l.student], l.exercise, l.score))
            .collect();
        let students = IdMap::from_ordered(keep.iter().map(|&s| self.students.raw(s)).collect());
        Dataset {
            logs,
            q: self.q.clone(),
            students,
            exercises: self.exercises.clone(),
            concepts: self.concepts.clone(),
        }
    }

    /// Logs grouped per student.
    pub fn logs_by_student(&self) -> Vec<Vec<ResponseLog>> {
        let mut out = vec![Vec::new(); self.n_students()];
        for log in &self.logs {
            out[log.student].push(*log);
        }
        out
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| IcdmError::io(path, e))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> IcdmError {
    IcdmError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<u64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    let found = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let found: Vec<&str> = found.iter().collect();
    if found != header {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`, found `{}`", header.join(","), found.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let mut values = Vec::with_capacity(header.len());
        for (field, name) in record.iter().zip(header) {
            let v: u64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("{name} `{field}` is not a non-negative integer")))?;
            values.push(v);
        }
        rows.push((line, values));
    }
    Ok(rows)
}

/// Reads a Q-matrix CSV (`exercise_id,concept_id`).
pub fn load_q(path: &Path) -> Result<(QMatrix, IdMap, IdMap)> {
    let rows = read_csv(path, &["exercise_id", "concept_id"])?;
    let exercises = IdMap::from_raw(rows.iter().map(|(_, v)| v[0]));
    let concepts = IdMap::from_raw(rows.iter().map(|(_, v)| v[1]));
    let mut tagged = vec![Vec::new(); exercises.len()];
    for (_, v) in &rows {
        let j = exercises.dense(v[0]).expect("mapped above");
        let z = concepts.dense(v[1]).expect("mapped above");
        tagged[j].push(z);
    }
    let q = QMatrix::from_rows(concepts.len(), tagged)?;
    Ok((q, exercises, concepts))
}

/// Reads logs against an already-loaded exercise map. Students are mapped
/// in ascending raw-id order. Returns raw student ids alongside.
type RawLogs = Vec<(u64, usize, u8)>;

fn load_logs(path: &Path, exercises: &IdMap) -> Result<(RawLogs, IdMap)> {
    let rows = read_csv(path, &["student_id", "exercise_id", "score"])?;
    let mut out = Vec::with_capacity(rows.len());
    let mut seen = std::collections::HashSet::with_capacity(rows.len());
    for (line, v) in rows {
        let (student, exercise, score) = (v[0], v[1], v[2]);
        if score > 1 {
            return Err(parse_err(path, line, format!("score `{score}` is not 0 or 1")));
        }
        let j = exercises.dense(exercise).ok_or_else(|| {
            IcdmError::Validation(format!(
                "{}: line {line}: exercise {exercise} is absent from the Q-matrix",
                path.display()
            ))
        })?;
        if !seen.insert((student, exercise)) {
            return Err(IcdmError::Validation(format!(
                "{}: line {line}: duplicate log for student {student} on exercise {exercise}",
                path.display()
            )));
        }
        out.push((student, j, score as u8));
    }
    let students = IdMap::from_raw(out.iter().map(|r| r.0));
    Ok((out, students))
}

/// Loads a log CSV plus its Q-matrix CSV.
pub fn load_dataset(logs_path: &Path, q_path: &Path) -> Result<Dataset> {
    let (q, exercises, concepts) = load_q(q_path)?;
    let (raw_logs, students) = load_logs(logs_path, &exercises)?;
    let logs = raw_logs
        .into_iter()
        .map(|(s, j, r)| ResponseLog::new(students.dense(s).expect("mapped"), j, r))
        .collect();
    Dataset::new(logs, q, students, exercises, concepts)
}

/// Reads logs referencing the exercises of an existing id space. Students
/// get their own fresh map.
pub fn load_logs_for(path: &Path, exercises: &IdMap) -> Result<(Vec<ResponseLog>, IdMap)> {
    let (raw_logs, students) = load_logs(path, exercises)?;
    let logs = raw_logs
        .into_iter()
        .map(|(s, j, r)| ResponseLog::new(students.dense(s).expect("mapped"), j, r))
        .collect();
    Ok((logs, students))
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let reader = BufReader::new(open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IcdmError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(path, i as u64 + 1, format!("`{t}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads the classic dense-matrix layout: one row per student with one
/// 0/1 score per exercise (negative entries mean "not answered"), plus a
/// dense 0/1 exercise × concept matrix. Raw ids are the row/column indices.
pub fn load_matrix_dataset(data_path: &Path, q_path: &Path) -> Result<Dataset> {
    let data = read_matrix(data_path)?;
    let q_rows = read_matrix(q_path)?;
    let dense_q: Vec<Vec<u8>> = q_rows
        .iter()
        .map(|r| r.iter().map(|&v| v as u8).collect())
        .collect();
    let q = QMatrix::from_dense(&dense_q)?;
    let n_ex = q.n_exercises();
    let mut logs = Vec::new();
    for (s, row) in data.iter().enumerate() {
        if row.len() != n_ex {
            return Err(parse_err(
                data_path,
                s as u64 + 1,
                format!("{} scores for {n_ex} exercises", row.len()),
            ));
        }
        for (j, &v) in row.iter().enumerate() {
            if v < 0.0 {
                continue;
            }
            if v != 0.0 && v != 1.0 {
                return Err(parse_err(data_path, s as u64 + 1, format!("score {v} is not binary")));
            }
            logs.push(ResponseLog::new(s, j, v as u8));
        }
    }
    let n_concepts = q.n_concepts();
    Dataset::new(
        logs,
        q,
        IdMap::identity(data.len()),
        IdMap::identity(n_ex),
        IdMap::identity(n_concepts),
    )
}

/// Writes `student_id,exercise_id,score` with raw ids.
pub fn write_logs_csv<W: Write>(mut w: W, ds: &Dataset) -> std::io::Result<()> {
    writeln!(w, "student_id,exercise_id,score")?;
    for log in &ds.logs {
        writeln!(
            w,
            "{},{},{}",
            ds.students.raw(log.student),
            ds.exercises.raw(log.exercise),
            log.score
        )?;
    }
    Ok(())
}

/// Writes `exercise_id,concept_id` with raw ids.
pub fn write_q_csv<W: Write>(mut w: W, ds: &Dataset) -> std::io::Result<()> {
    writeln!(w, "exercise_id,concept_id")?;
    for j in 0..ds.n_exercises() {
        for &z in ds.q.concepts(j) {
            writeln!(w, "{},{}", ds.exercises.raw(j), ds.concepts.raw(z))?;
        }
    }
    Ok(())
}

/// Transductive or inductive partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Transductive,
    Inductive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub test_fraction: f64,
    /// Fraction of training students held out as unseen (inductive only).
    pub p_n: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn transductive(test_fraction: f64, seed: u64) -> Self {
        Self {
            mode: SplitMode::Transductive,
            test_fraction,
            p_n: 0.0,
            seed,
        }
    }

    pub fn inductive(test_fraction: f64, p_n: f64, seed: u64) -> Self {
        Self {
            mode: SplitMode::Inductive,
            test_fraction,
            p_n,
            seed,
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(IcdmError::Config(format!("{name} = {v} must lie strictly inside (0, 1)")))
    }
}

/// Partitions log indices: exactly `floor(fraction * n)` go to test, and
/// every student keeps at least one training log whenever the counts allow.
fn partition_logs(logs: &[ResponseLog], n_students: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = logs.len();
    let n_test = (fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut in_test = vec![false; n];
    for &i in &order[..n_test] {
        in_test[i] = true;
    }

    let mut train_count = vec![0usize; n_students];
    for (i, log) in logs.iter().enumerate() {
        if !in_test[i] {
            train_count[log.student] += 1;
        }
    }
    // Pin one log for every student left without training evidence, then
    // swap in a replacement from a student who can spare one.
    let mut donors = order[n_test..].iter().rev().copied();
    for &i in &order[..n_test] {
        let s = logs[i].student;
        if train_count[s] > 0 {
            continue;
        }
        let replacement = donors.by_ref().find(|&d| {
            !in_test[d] && logs[d].student != s && train_count[logs[d].student] >= 2
        });
        in_test[i] = false;
        train_count[s] += 1;
        if let Some(d) = replacement {
            in_test[d] = true;
            train_count[logs[d].student] -= 1;
        }
    }

    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for &i in &order {
        if in_test[i] {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

/// Uniform random split of logs. Both halves keep the input's id space.
pub fn split_transductive(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if spec.mode != SplitMode::Transductive {
        return Err(IcdmError::Config("split_transductive needs a transductive spec".into()));
    }
    check_fraction("test_fraction", spec.test_fraction)?;
    let (train, test) = partition_logs(&ds.logs, ds.n_students(), spec.test_fraction, spec.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.logs[i]).collect::<Vec<_>>();
    Ok((ds.with_logs(pick(&train)), ds.with_logs(pick(&test))))
}

/// The three partitions of the inductive protocol.
#[derive(Debug, Clone)]
pub struct InductiveSplit {
    /// Training logs of observed students, students re-indexed densely.
    pub train_observed: Dataset,
    /// Training logs of unseen students, students re-indexed densely.
    pub train_unseen: Dataset,
    /// Whole test partition in the input's id space.
    pub test: Dataset,
    /// Dense indices (in the input's id space) of the unseen students.
    pub unseen_students: Vec<usize>,
}

impl InductiveSplit {
    /// Test logs restricted to unseen students (the ACC† subset).
    pub fn unseen_test_logs(&self) -> Vec<ResponseLog> {
        let mut is_unseen = vec![false; self.test.n_students()];
        for &s in &self.unseen_students {
            is_unseen[s] = true;
        }
        self.test
            .logs
            .iter()
            .filter(|l| is_unseen[l.student])
            .copied()
            .collect()
    }
}

/// Test split over logs, then the training students are partitioned into
/// observed (1 − p_n) and unseen (p_n, floored) groups.
pub fn split_inductive(ds: &Dataset, spec: &SplitSpec) -> Result<InductiveSplit> {
    if spec.mode != SplitMode::Inductive {
        return Err(IcdmError::Config("split_inductive needs an inductive spec".into()));
    }
    check_fraction("test_fraction", spec.test_fraction)?;
    check_fraction("p_n", spec.p_n)?;
    let (train, test) = split_transductive(ds, &SplitSpec::transductive(spec.test_fraction, spec.seed))?;

    let n = ds.n_students();
    let n_unseen = (spec.p_n * n as f64).floor() as usize;
    let mut students: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    students.shuffle(&mut rng);
    let mut unseen: Vec<usize> = students[..n_unseen].to_vec();
    let mut observed: Vec<usize> = students[n_unseen..].to_vec();
    unseen.sort_unstable();
    observed.sort_unstable();

    Ok(InductiveSplit {
        train_observed: train.restrict_students(&observed),
        train_unseen: train.restrict_students(&unseen),
        test,
        unseen_students: unseen,
    })
}
