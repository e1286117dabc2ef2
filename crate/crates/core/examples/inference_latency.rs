//! Times inductive inference over growing batches of new students and
//! compares it with retraining on the enlarged dataset.

use std::time::Instant;

use icdm::inductive::{InferenceContext, NewStudentBatch};
use icdm::snapshot::ModelSnapshot;
use icdm::synth::{generate, SynthConfig};
use icdm::train::{train, TrainConfig};

fn main() -> icdm::Result<()> {
    let data = generate(&SynthConfig {
        n_students: 800,
        n_exercises: 200,
        n_concepts: 10,
        q_density: 2.0,
        guess: 0.1,
        slip: 0.1,
        logs_per_student: 50,
        seed: 2,
    })?
    .dataset;
    let old: Vec<usize> = (0..400).collect();
    let fit = data.restrict_students(&old);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&fit, None, &cfg, &mut |_| {})?;
    let ctx = InferenceContext::new(&out.model, &out.graph)?;

    for n in [25, 50, 100, 200, 400] {
        let batch = NewStudentBatch::from_dataset(&data.restrict_students(&(400..400 + n).collect::<Vec<_>>()));
        ctx.infer_mastery(&batch)?;
        let mut times: Vec<f64> = (0..11)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(ctx.infer_mastery(&batch).unwrap());
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times.sort_by(f64::total_cmp);
        println!("{n:>4} students / {:>6} logs: {:.3} ms", batch.n_logs(), times[5]);
    }

    let snap = ModelSnapshot::from_outcome(&out, &cfg)?;
    let batch = NewStudentBatch::from_dataset(&data.restrict_students(&(400..500).collect::<Vec<_>>()));
    let combined = icdm::cli::combined_dataset(&snap, &batch)?;
    let t = Instant::now();
    train(&combined, None, &cfg, &mut |_| {})?;
    println!("retraining {} epochs on {} logs: {:.0} ms", cfg.epochs, combined.logs.len(), t.elapsed().as_secs_f64() * 1e3);
    Ok(())
}
