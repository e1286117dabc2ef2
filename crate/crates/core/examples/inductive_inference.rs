//! Trains on observed students, then diagnoses held-out students from
//! their logs alone and scores them on their test logs.

use icdm::dataio::{split_inductive, SplitSpec};
use icdm::inductive::{InferenceContext, NewStudentBatch};
use icdm::metrics::EvalReport;
use icdm::synth::{generate, SynthConfig};
use icdm::train::{train, TrainConfig};

fn main() -> icdm::Result<()> {
    let data = generate(&SynthConfig {
        n_students: 300,
        n_exercises: 40,
        n_concepts: 5,
        logs_per_student: 25,
        guess: 0.1,
        slip: 0.1,
        seed: 4,
        ..SynthConfig::default()
    })?;
    let split = split_inductive(&data.dataset, &SplitSpec::inductive(0.2, 0.2, 4))?;
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 30,
        lr: 5e-3,
        d: 32,
        hidden: vec![64, 32],
        ..TrainConfig::default()
    };
    let out = train(&split.train_observed, None, &cfg, &mut |_| {})?;
    println!(
        "trained on {} students, best epoch {}",
        split.train_observed.n_students(),
        out.best_epoch
    );

    let batch = NewStudentBatch::from_dataset(&split.train_unseen);
    let ctx = InferenceContext::new(&out.model, &out.graph)?;
    let mastery = ctx.infer_mastery(&batch)?;
    for (row, raw) in batch.students.iter().enumerate().take(5) {
        let truth = &data.truth[*raw as usize];
        let shown: Vec<String> = mastery.row(row).iter().map(|m| format!("{m:.2}")).collect();
        println!("student {raw:>3}: mastery [{}] truth {truth:?}", shown.join(", "));
    }

    let mut targets = Vec::new();
    let mut labels = Vec::new();
    for l in split.unseen_test_logs() {
        if let Some(row) = batch.row_of(split.test.students.raw(l.student)) {
            targets.push((row, l.exercise));
            labels.push(l.score as f64);
        }
    }
    let report = EvalReport::from_predictions(&ctx.predict_new(&batch, &targets)?, &labels)?;
    println!("unseen students: {}", serde_json::to_string(&report).unwrap());
    Ok(())
}
