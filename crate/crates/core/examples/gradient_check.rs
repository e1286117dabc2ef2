//! Central-difference check of the full training loss for each
//! interaction function on a four-student graph.

use icdm::dataio::{Dataset, IdMap, QMatrix, ResponseLog};
use icdm::diffcore::{grad_check, ParameterStore, Tape};
use icdm::model::{Model, ModelConfig, TrainGraph};
use icdm::train::{batch_loss, pairs_and_labels};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icdm::Result<()> {
    let q = QMatrix::from_rows(3, vec![vec![0], vec![1], vec![0, 2], vec![1, 2]])?;
    let logs = [(0, 0, 1), (0, 2, 0), (1, 1, 1), (1, 3, 0), (2, 0, 0), (2, 3, 1), (3, 1, 0), (3, 2, 1)]
        .iter()
        .map(|&(s, e, r)| ResponseLog::new(s, e, r))
        .collect();
    let ds = Dataset::new(logs, q, IdMap::identity(4), IdMap::identity(4), IdMap::identity(3))?;
    let graph = TrainGraph::build(&ds)?;
    let (pairs, labels) = pairs_and_labels(&ds);

    for kind in ["mirt", "mono_mlp", "glif"] {
        let cfg = ModelConfig {
            d: 4,
            k: 2,
            hidden: vec![5, 3],
            if_kind: kind.into(),
            ..ModelConfig::default()
        };
        let template = Model::new(cfg, 4, 4, 3)?;
        let mut store = template.store.clone();
        let loss = |tape: &mut Tape, store: &ParameterStore| {
            let model = Model {
                store: store.clone(),
                ..template.clone()
            };
            batch_loss(tape, &model, &graph, &pairs, &labels, 0.01, false, &mut ChaCha8Rng::seed_from_u64(0))
        };
        let report = grad_check(loss, &mut store, 50, 1)?;
        println!("{kind:>8}: max relative error {:.2e}", report.max_rel_error);
    }
    Ok(())
}
