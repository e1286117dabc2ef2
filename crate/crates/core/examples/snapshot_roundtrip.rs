//! Saves a trained model, reloads it and confirms the predictions agree
//! bit for bit.

use icdm::snapshot::ModelSnapshot;
use icdm::synth::{generate, SynthConfig};
use icdm::train::{pairs_and_labels, train, TrainConfig};

fn main() -> icdm::Result<()> {
    let data = generate(&SynthConfig {
        n_students: 100,
        n_exercises: 30,
        ..SynthConfig::default()
    })?
    .dataset;
    let cfg = TrainConfig {
        epochs: 5,
        d: 16,
        hidden: vec![16, 8],
        ..TrainConfig::default()
    };
    let out = train(&data, None, &cfg, &mut |_| {})?;
    let snap = ModelSnapshot::from_outcome(&out, &cfg)?;

    let path = std::env::temp_dir().join(format!("icdm-example-{}.snap", std::process::id()));
    snap.save(&path)?;
    let back = ModelSnapshot::load(&path)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    std::fs::remove_file(&path).ok();

    let (pairs, _) = pairs_and_labels(&data);
    let a = snap.model.predict(&snap.graph()?, &pairs)?;
    let b = back.model.predict(&back.graph()?, &pairs)?;
    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("{size} bytes, {} tensors, best epoch {:?}", back.model.store.len(), back.best_epoch);
    println!("{} predictions identical after reload: {same}", a.len());
    Ok(())
}
