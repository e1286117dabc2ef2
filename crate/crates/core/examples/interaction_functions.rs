//! Trains the same data with each interaction function and reports
//! prediction quality and how well the mastery recovers the truth.

use icdm::dataio::{split_transductive, SplitSpec};
use icdm::metrics::{truth_doa, EvalReport};
use icdm::synth::{generate, SynthConfig};
use icdm::train::{pairs_and_labels, train, TrainConfig};

fn main() -> icdm::Result<()> {
    let data = generate(&SynthConfig {
        n_students: 200,
        n_exercises: 40,
        n_concepts: 5,
        logs_per_student: 25,
        guess: 0.05,
        slip: 0.05,
        seed: 8,
        ..SynthConfig::default()
    })?;
    let (fit, test) = split_transductive(&data.dataset, &SplitSpec::transductive(0.2, 8))?;
    let (pairs, labels) = pairs_and_labels(&test);
    let students: Vec<usize> = (0..fit.n_students()).collect();
    for kind in ["mirt", "mono_mlp", "glif"] {
        let cfg = TrainConfig {
            if_kind: kind.into(),
            batch_size: 32,
            epochs: 40,
            lr: 5e-3,
            d: 32,
            hidden: vec![64, 32],
            ..TrainConfig::default()
        };
        let out = train(&fit, None, &cfg, &mut |_| {})?;
        let r = EvalReport::from_predictions(&out.model.predict(&out.graph, &pairs)?, &labels)?;
        let truth = truth_doa(&out.model.mastery(&out.graph, &students)?, &data.truth)?;
        println!(
            "{kind:>8}: AUC {:.4} ACC {:.4} RMSE {:.4} truth DOA {truth:.4}",
            r.auc.unwrap_or(f64::NAN),
            r.acc,
            r.rmse
        );
    }
    Ok(())
}
