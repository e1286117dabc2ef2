//! Trains on noiseless DINA data and scores the recovered mastery against
//! the generating truth.

use icdm::dataio::{split_transductive, SplitSpec};
use icdm::metrics::{truth_doa, EvalReport};
use icdm::synth::{generate, SynthConfig};
use icdm::train::{pairs_and_labels, train, TrainConfig};

fn main() -> icdm::Result<()> {
    let kind = std::env::args().nth(1).unwrap_or_else(|| "glif".into());
    let data = generate(&SynthConfig {
        n_students: 200,
        n_exercises: 50,
        n_concepts: 6,
        logs_per_student: 30,
        seed: 1,
        ..SynthConfig::default()
    })?;
    let (fit, test) = split_transductive(&data.dataset, &SplitSpec::transductive(0.2, 1))?;
    let cfg = TrainConfig {
        if_kind: kind,
        batch_size: 32,
        epochs: 60,
        lr: 5e-3,
        d: 32,
        hidden: vec![64, 32],
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let out = train(&fit, None, &cfg, &mut |r| eprintln!("{}", serde_json::to_string(r).unwrap()))?;
    let (pairs, labels) = pairs_and_labels(&test);
    let preds = out.model.predict(&out.graph, &pairs)?;
    let report = EvalReport::from_predictions(&preds, &labels)?;
    let students: Vec<usize> = (0..fit.n_students()).collect();
    let mas = out.model.mastery(&out.graph, &students)?;
    println!("{}", serde_json::to_string(&report).unwrap());
    println!("truth DOA {:.4}", truth_doa(&mas, &data.truth)?);
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
