//! Loads a dataset (CSV pair or dense matrices) and prints its statistics
//! and the size of every relation in the student-centered graph.
//!
//! ```text
//! cargo run --example dataset_stats -- logs.csv q.csv
//! cargo run --example dataset_stats -- data.txt q.txt
//! ```
//! Without arguments a small synthetic dataset is used.

use icdm::dataio::{load_dataset, load_matrix_dataset};
use icdm::model::TrainGraph;
use icdm::synth::{generate, SynthConfig};

fn main() -> icdm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ds = match args.as_slice() {
        [logs, q] if logs.ends_with(".txt") => load_matrix_dataset(logs.as_ref(), q.as_ref())?,
        [logs, q] => load_dataset(logs.as_ref(), q.as_ref())?,
        _ => generate(&SynthConfig::default())?.dataset,
    };
    println!("{}", serde_json::to_string_pretty(&ds.stats()).unwrap());

    let g = TrainGraph::build(&ds)?;
    let scg = &g.scg;
    for (name, rel) in [
        ("right", &scg.right),
        ("wrong", &scg.wrong),
        ("desired", &scg.desired),
        ("related", &scg.related),
    ] {
        println!("{name:>8}: {} edges", rel.forward.nnz());
    }
    Ok(())
}
