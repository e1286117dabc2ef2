//! The `icdm` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataio::{
    load_dataset, load_logs_for, load_matrix_dataset, split_inductive, split_transductive, write_logs_csv, write_q_csv,
    Dataset, ResponseLog, SplitMode, SplitSpec,
};
use crate::error::{IcdmError, Result};
use crate::inductive::{InferenceContext, NewStudentBatch};
use crate::io::write_atomic;
use crate::metrics::{doa, doa_at_10, inconsistency, EvalReport};
use crate::model::TrainGraph;
use crate::snapshot::ModelSnapshot;
use crate::train::{pairs_and_labels, train};

#[derive(Debug, Parser)]
#[command(name = "icdm", version, about = "Inductive cognitive diagnosis")]
pub struct Cli {
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppresses progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Response logs: `student_id,exercise_id,score` CSV, or a student ×
    /// exercise score matrix with `--matrix`.
    #[arg(long)]
    pub logs: PathBuf,
    /// Q-matrix: `exercise_id,concept_id` CSV, or a 0/1 matrix with `--matrix`.
    #[arg(long)]
    pub q: PathBuf,
    /// Read whitespace-separated matrices instead of CSV.
    #[arg(long)]
    pub matrix: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        if self.matrix {
            load_matrix_dataset(&self.logs, &self.q)
        } else {
            load_dataset(&self.logs, &self.q)
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset statistics as JSON.
    Stats {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Generate DINA-style synthetic data.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_logs: PathBuf,
        #[arg(long)]
        out_q: PathBuf,
        /// Hidden binary mastery as `student_id,concept_id,mastered`.
        #[arg(long)]
        out_truth: Option<PathBuf>,
    },
    /// Split logs into train/test files (inductive: also unseen-student logs).
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write a snapshot.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Validation logs (default: carved from the training logs).
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score test logs against a snapshot.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Logs of unseen students; only their test logs are then scored.
        #[arg(long)]
        new_logs: Option<PathBuf>,
        #[arg(long)]
        doa: bool,
        #[arg(long)]
        inconsistency: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Infer mastery of new students from their logs.
    Infer {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `student_id,exercise_id` pairs to predict.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        predictions_out: Option<PathBuf>,
    },
    /// Time inductive inference, optionally against retraining.
    Bench {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        new_logs: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also retrain from scratch on snapshot data plus the new logs.
        #[arg(long)]
        retrain: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the student-centered graph as edge lists.
    DumpGraph {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IcdmError::Validation(e.to_string()))? + "\n";
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn read_pairs(path: &Path) -> Result<Vec<(u64, u64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| IcdmError::io(path, std::io::Error::other(e.to_string())))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| IcdmError::Parse {
            path: path.display().to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<u64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| IcdmError::Parse {
                path: path.display().to_string(),
                line,
                message: "expected `student_id,exercise_id`".into(),
            })
        };
        out.push((field(0)?, field(1)?));
    }
    Ok(out)
}

/// New-student logs from a CSV over the snapshot's exercises.
fn load_batch(path: &Path, snap: &ModelSnapshot) -> Result<NewStudentBatch> {
    let (logs, students) = load_logs_for(path, &snap.data.exercises)?;
    let triplets: Vec<(u64, u64, u8)> = logs
        .iter()
        .map(|l| (students.raw(l.student), snap.data.exercises.raw(l.exercise), l.score))
        .collect();
    NewStudentBatch::from_raw(&triplets, &snap.data.exercises)
}

#[derive(Serialize)]
struct SplitReport {
    mode: SplitMode,
    train_logs: usize,
    test_logs: usize,
    unseen_students: Option<usize>,
    unseen_logs: Option<usize>,
}

#[derive(Serialize)]
struct BenchReport {
    students: usize,
    logs: usize,
    repeats: usize,
    samples_ms: Vec<f64>,
    median_ms: f64,
    p95_ms: f64,
    warmup_ms: f64,
    retrain_ms: Option<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn eval_cmd(
    snap: &ModelSnapshot,
    test_path: &Path,
    new_logs: Option<&Path>,
    want_doa: bool,
    want_inc: bool,
) -> Result<EvalReport> {
    let graph = snap.graph()?;
    let (raw_test, test_students) = load_logs_for(test_path, &snap.data.exercises)?;
    match new_logs {
        None => {
            let mut logs = Vec::with_capacity(raw_test.len());
            for l in &raw_test {
                let raw = test_students.raw(l.student);
                let s = snap.data.students.dense(raw).ok_or(IcdmError::UnknownStudent(raw))?;
                logs.push(ResponseLog::new(s, l.exercise, l.score));
            }
            let test = snap.data.with_logs(logs);
            let (pairs, labels) = pairs_and_labels(&test);
            let preds = snap.model.predict(&graph, &pairs)?;
            let mut report = EvalReport::from_predictions(&preds, &labels)?;
            if want_doa || want_inc {
                let all: Vec<usize> = (0..snap.model.n_students).collect();
                let mas = snap.model.mastery(&graph, &all)?;
                if want_doa {
                    report.doa = Some(doa(&mas, &test.logs, &test.q, &(0..test.n_concepts()).collect::<Vec<_>>())?);
                    report.doa_at_10 = Some(doa_at_10(&mas, &test.logs, &test.q)?);
                }
                if want_inc {
                    report.inconsistency = Some(inconsistency(&mas, &graph.rating)?);
                }
            }
            Ok(report)
        }
        Some(path) => {
            let batch = load_batch(path, snap)?;
            let ctx = InferenceContext::new(&snap.model, &graph)?;
            let mut logs = Vec::new();
            for l in &raw_test {
                if let Some(row) = batch.row_of(test_students.raw(l.student)) {
                    logs.push(ResponseLog::new(row, l.exercise, l.score));
                }
            }
            if logs.is_empty() {
                return Err(IcdmError::Validation("no test log belongs to a student of --new-logs".into()));
            }
            let preds = ctx.predict_logs(&batch, &logs)?;
            let labels: Vec<f64> = logs.iter().map(|l| l.score as f64).collect();
            let mut report = EvalReport::from_predictions(&preds, &labels)?;
            if want_doa || want_inc {
                let mas = ctx.infer_mastery(&batch)?;
                if want_doa {
                    let z: Vec<usize> = (0..snap.model.n_concepts).collect();
                    report.doa = Some(doa(&mas, &logs, &snap.data.q, &z)?);
                    report.doa_at_10 = Some(doa_at_10(&mas, &logs, &snap.data.q)?);
                }
                if want_inc {
                    let rows: Vec<ResponseLog> = batch
                        .logs
                        .iter()
                        .enumerate()
                        .flat_map(|(s, ls)| ls.iter().map(move |&(e, r)| ResponseLog::new(s, e, r)))
                        .collect();
                    let r = crate::dataio::RatingMatrix::from_logs(batch.len(), snap.model.n_exercises, &rows);
                    report.inconsistency = Some(inconsistency(&mas, &r)?);
                }
            }
            Ok(report)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Stats { data } => emit(&data.load()?.stats(), None),
        Command::Synth {
            config,
            out_logs,
            out_q,
            out_truth,
        } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let gen = crate::synth::generate(&cfg.synth)?;
            let ds = &gen.dataset;
            write_atomic(&out_logs, &csv_bytes(|b| write_logs_csv(b, ds)))?;
            write_atomic(&out_q, &csv_bytes(|b| write_q_csv(b, ds)))?;
            if let Some(p) = out_truth {
                let body = csv_bytes(|b| {
                    use std::io::Write;
                    writeln!(b, "student_id,concept_id,mastered")?;
                    for (s, row) in gen.truth.iter().enumerate() {
                        for (k, m) in row.iter().enumerate() {
                            writeln!(b, "{s},{k},{m}")?;
                        }
                    }
                    Ok(())
                });
                write_atomic(&p, &body)?;
            }
            emit(&ds.stats(), None)
        }
        Command::Split { data, config, out_dir } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let ds = data.load()?;
            std::fs::create_dir_all(&out_dir).map_err(|e| IcdmError::io(&out_dir, e))?;
            let seed = cfg.train.seed;
            let write = |name: &str, d: &Dataset| write_atomic(&out_dir.join(name), &csv_bytes(|b| write_logs_csv(b, d)));
            write_atomic(&out_dir.join("q.csv"), &csv_bytes(|b| write_q_csv(b, &ds)))?;
            let report = match cfg.split {
                SplitMode::Transductive => {
                    let (tr, te) = split_transductive(&ds, &SplitSpec::transductive(cfg.test_fraction, seed))?;
                    write("train.csv", &tr)?;
                    write("test.csv", &te)?;
                    SplitReport {
                        mode: cfg.split,
                        train_logs: tr.logs.len(),
                        test_logs: te.logs.len(),
                        unseen_students: None,
                        unseen_logs: None,
                    }
                }
                SplitMode::Inductive => {
                    let sp = split_inductive(&ds, &SplitSpec::inductive(cfg.test_fraction, cfg.p_n, seed))?;
                    write("train.csv", &sp.train_observed)?;
                    write("new_logs.csv", &sp.train_unseen)?;
                    write("test.csv", &sp.test)?;
                    SplitReport {
                        mode: cfg.split,
                        train_logs: sp.train_observed.logs.len(),
                        test_logs: sp.test.logs.len(),
                        unseen_students: Some(sp.unseen_students.len()),
                        unseen_logs: Some(sp.train_unseen.logs.len()),
                    }
                }
            };
            emit(&report, None)
        }
        Command::Train {
            data,
            config,
            valid,
            out,
        } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            cfg.train.validate()?;
            let ds = data.load()?;
            let valid = match valid {
                Some(p) => {
                    let (logs, students) = load_logs_for(&p, &ds.exercises)?;
                    let mut mapped = Vec::with_capacity(logs.len());
                    for l in logs {
                        let raw = students.raw(l.student);
                        let s = ds.students.dense(raw).ok_or(IcdmError::UnknownStudent(raw))?;
                        mapped.push(ResponseLog::new(s, l.exercise, l.score));
                    }
                    Some(ds.with_logs(mapped))
                }
                None => None,
            };
            let outcome = train(&ds, valid.as_ref(), &cfg.train, &mut |r| {
                if !quiet {
                    eprintln!("{}", serde_json::to_string(r).unwrap_or_default());
                }
            })?;
            ModelSnapshot::from_outcome(&outcome, &cfg.train)?.save(&out)
        }
        Command::Eval {
            snapshot,
            test,
            new_logs,
            doa,
            inconsistency,
            out,
        } => {
            let snap = ModelSnapshot::load(&snapshot)?;
            let report = eval_cmd(&snap, &test, new_logs.as_deref(), doa, inconsistency)?;
            emit(&report, out.as_deref())
        }
        Command::Infer {
            snapshot,
            logs,
            out,
            targets,
            predictions_out,
        } => {
            if targets.is_some() != predictions_out.is_some() {
                return Err(IcdmError::Usage("--targets and --predictions-out go together".into()));
            }
            let snap = ModelSnapshot::load(&snapshot)?;
            let batch = load_batch(&logs, &snap)?;
            let graph = snap.graph()?;
            let ctx = InferenceContext::new(&snap.model, &graph)?;
            let mas = ctx.infer_mastery(&batch)?;
            let pairs = match &targets {
                Some(p) => {
                    let mut v = Vec::new();
                    for (s, e) in read_pairs(p)? {
                        let row = batch.row_of(s).ok_or(IcdmError::UnknownStudent(s))?;
                        let j = snap.data.exercises.dense(e).ok_or(IcdmError::UnknownExercise(e))?;
                        v.push((row, j));
                    }
                    Some(v)
                }
                None => None,
            };
            let preds = pairs.as_ref().map(|p| ctx.predict_new(&batch, p)).transpose()?;
            let body = csv_bytes(|b| {
                use std::io::Write;
                writeln!(b, "student_id,concept_id,mastery")?;
                for (i, raw) in batch.students.iter().enumerate() {
                    for k in 0..mas.cols() {
                        writeln!(b, "{raw},{},{}", snap.data.concepts.raw(k), mas.get(i, k))?;
                    }
                }
                Ok(())
            });
            write_atomic(&out, &body)?;
            if let (Some(path), Some(pairs), Some(preds)) = (predictions_out, pairs, preds) {
                let body = csv_bytes(|b| {
                    use std::io::Write;
                    writeln!(b, "student_id,exercise_id,probability")?;
                    for (&(row, j), p) in pairs.iter().zip(&preds) {
                        writeln!(b, "{},{},{p}", batch.students[row], snap.data.exercises.raw(j))?;
                    }
                    Ok(())
                });
                write_atomic(&path, &body)?;
            }
            Ok(())
        }
        Command::Bench {
            snapshot,
            new_logs,
            repeats,
            retrain,
            out,
        } => {
            if repeats == 0 {
                return Err(IcdmError::Usage("--repeats must be at least 1".into()));
            }
            let snap = ModelSnapshot::load(&snapshot)?;
            let batch = load_batch(&new_logs, &snap)?;
            let graph = snap.graph()?;
            let t0 = Instant::now();
            let ctx = InferenceContext::new(&snap.model, &graph)?;
            ctx.infer_mastery(&batch)?;
            let warmup_ms = t0.elapsed().as_secs_f64() * 1e3;
            let mut samples = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                std::hint::black_box(ctx.infer_mastery(&batch)?);
                samples.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            let retrain_ms = if retrain {
                let cfg = snap.train_config.clone().unwrap_or_default();
                let combined = combined_dataset(&snap, &batch)?;
                let t = Instant::now();
                train(&combined, None, &cfg, &mut |_| {})?;
                Some(t.elapsed().as_secs_f64() * 1e3)
            } else {
                None
            };
            let report = BenchReport {
                students: batch.len(),
                logs: batch.n_logs(),
                repeats,
                median_ms: percentile(&sorted, 0.5),
                p95_ms: percentile(&sorted, 0.95),
                samples_ms: samples,
                warmup_ms,
                retrain_ms,
            };
            emit(&report, out.as_deref())
        }
        Command::DumpGraph { data, out_dir } => {
            let ds = data.load()?;
            std::fs::create_dir_all(&out_dir).map_err(|e| IcdmError::io(&out_dir, e))?;
            let g = TrainGraph::build(&ds)?;
            let files = g.scg.dump_edge_lists(&out_dir)?;
            emit(&files, None)
        }
    }
}

/// Snapshot training data with the new students appended.
pub fn combined_dataset(snap: &ModelSnapshot, batch: &NewStudentBatch) -> Result<Dataset> {
    let base = &snap.data;
    let mut raw: Vec<u64> = base.students.raw_ids().to_vec();
    let mut logs = base.logs.clone();
    for (i, (id, ls)) in batch.students.iter().zip(&batch.logs).enumerate() {
        let new_id = if base.students.dense(*id).is_some() {
            raw.iter().max().copied().unwrap_or(0) + 1 + i as u64
        } else {
            *id
        };
        let s = raw.len();
        raw.push(new_id);
        logs.extend(ls.iter().map(|&(e, r)| ResponseLog::new(s, e, r)));
    }
    Dataset::new(
        logs,
        base.q.clone(),
        crate::dataio::IdMap::from_ordered(raw),
        base.exercises.clone(),
        base.concepts.clone(),
    )
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        // Ignored if a pool already exists (repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                IcdmError::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}
