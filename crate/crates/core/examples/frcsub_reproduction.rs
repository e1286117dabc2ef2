//! Transductive and inductive runs on FrcSub.
//!
//! Reads `data.txt`/`q.txt` (or `logs.csv`/`q.csv`) from the directory given
//! as the first argument, `$ICDM_FRCSUB_DIR`, or `data/frcsub`. Without the
//! data it runs a same-shaped DINA stand-in so the timings stay meaningful.

use std::path::PathBuf;
use std::time::Instant;

use icdm::config::RunConfig;
use icdm::dataio::{load_dataset, load_matrix_dataset, split_inductive, split_transductive, Dataset, SplitSpec};
use icdm::inductive::{InferenceContext, NewStudentBatch};
use icdm::metrics::EvalReport;
use icdm::synth::{generate, SynthConfig};
use icdm::train::{pairs_and_labels, train};

fn load(dir: &std::path::Path) -> icdm::Result<Dataset> {
    if dir.join("data.txt").exists() {
        load_matrix_dataset(&dir.join("data.txt"), &dir.join("q.txt"))
    } else {
        load_dataset(&dir.join("logs.csv"), &dir.join("q.csv"))
    }
}

fn main() -> icdm::Result<()> {
    let cfg = RunConfig::parse_str(include_str!("../../../configs/frcsub.cfg"))?;
    let dir = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("ICDM_FRCSUB_DIR").ok())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/frcsub"));
    let ds = match load(&dir) {
        Ok(ds) => ds,
        Err(e) => {
            eprintln!("{}: {e}; using a DINA stand-in", dir.display());
            generate(&SynthConfig {
                n_students: 536,
                n_exercises: 20,
                n_concepts: 8,
                q_density: 2.8,
                guess: 0.15,
                slip: 0.1,
                logs_per_student: 20,
                seed: 7,
            })?
            .dataset
        }
    };
    println!("{}", serde_json::to_string(&ds.stats()).unwrap());

    let t = Instant::now();
    let (fit, test) = split_transductive(&ds, &SplitSpec::transductive(cfg.test_fraction, cfg.train.seed))?;
    let out = train(&fit, None, &cfg.train, &mut |r| eprintln!("{}", serde_json::to_string(r).unwrap()))?;
    let (pairs, labels) = pairs_and_labels(&test);
    let report = EvalReport::from_predictions(&out.model.predict(&out.graph, &pairs)?, &labels)?;
    println!("transductive {} in {:.1?}", serde_json::to_string(&report).unwrap(), t.elapsed());

    let t = Instant::now();
    let split = split_inductive(&ds, &SplitSpec::inductive(cfg.test_fraction, cfg.p_n, cfg.train.seed))?;
    let out = train(&split.train_observed, None, &cfg.train, &mut |_| {})?;
    let batch = NewStudentBatch::from_dataset(&split.train_unseen);
    let ctx = InferenceContext::new(&out.model, &out.graph)?;
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    for l in split.unseen_test_logs() {
        if let Some(row) = batch.row_of(split.test.students.raw(l.student)) {
            targets.push((row, l.exercise));
            labels.push(l.score as f64);
        }
    }
    let report = EvalReport::from_predictions(&ctx.predict_new(&batch, &targets)?, &labels)?;
    println!("inductive {} in {:.1?}", serde_json::to_string(&report).unwrap(), t.elapsed());
    Ok(())
}
