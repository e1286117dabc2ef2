//! Mini-batch training with early stopping on validation AUC.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{split_transductive, Dataset, SplitSpec};
use crate::diffcore::{bce, Adam, AdamConfig, ParameterStore, Tape, Var};
use crate::error::{IcdmError, Result};
use crate::metrics::EvalReport;
use crate::model::{Model, ModelConfig, TrainGraph};

/// Seed offset for the validation carve, so it differs from the test split.
const VALID_SEED_SALT: u64 = 0x005e_ed0f_7a11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_reg: f64,
    pub patience: usize,
    pub lr: f64,
    /// Fraction of training logs held out for validation when no
    /// validation set is given.
    pub valid_fraction: f64,
    pub eval_metric: String,
    pub seed: u64,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub d: usize,
    pub if_kind: String,
    pub hidden: Vec<usize>,
    pub activation: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            batch_size: 256,
            epochs: 50,
            lambda_reg: 1e-3,
            patience: 10,
            lr: 1e-3,
            valid_fraction: 0.1,
            eval_metric: "auc".into(),
            seed: m.seed,
            k: m.k,
            alpha: m.alpha,
            beta: m.beta,
            d: m.d,
            if_kind: m.if_kind,
            hidden: m.hidden,
            activation: m.activation,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
            if_kind: self.if_kind.clone(),
            hidden: self.hidden.clone(),
            activation: self.activation.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(IcdmError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_reg) {
            return Err(IcdmError::Config(format!("lambda_reg = {} must lie in [0, 1]", self.lambda_reg)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(IcdmError::Config("lr must be positive".into()));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(IcdmError::Config("valid_fraction must lie in (0, 1)".into()));
        }
        if self.eval_metric != "auc" {
            return Err(IcdmError::Config(format!("unsupported eval_metric `{}`", self.eval_metric)));
        }
        self.model_config().validate()
    }
}

/// `Σ H²/(N^O + M)`.
pub fn regularizer(sq_norm: f64, n_students: usize, n_exercises: usize) -> f64 {
    sq_norm / (n_students + n_exercises) as f64
}

/// Summed clamped BCE plus `lambda · Ω`.
pub fn loss(preds: &[f64], labels: &[f64], sq_norm: f64, lambda: f64, n_students: usize, n_exercises: usize) -> f64 {
    let data: f64 = preds.iter().zip(labels).map(|(&p, &y)| bce(p, y)).sum();
    data + lambda * regularizer(sq_norm, n_students, n_exercises)
}

/// Loss node for a batch whose predictions are already on the tape.
pub fn loss_on_tape(tape: &mut Tape, model: &Model, preds: Var, labels: &[f64], lambda: f64) -> Result<Var> {
    let data = tape.bce_loss(preds, labels.to_vec())?;
    if lambda == 0.0 {
        return Ok(data);
    }
    let sq = model.embedding_sq_norm(tape)?;
    let reg = tape.scale(sq, lambda / (model.n_students + model.n_exercises) as f64)?;
    tape.add(data, reg)
}

/// Full training objective on `pairs`, used by gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    graph: &TrainGraph,
    pairs: &[(usize, usize)],
    labels: &[f64],
    lambda: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let preds = model.forward(tape, graph, pairs, training, rng)?;
    loss_on_tape(tape, model, preds, labels, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: Option<f64>,
    pub valid_acc: Option<f64>,
    pub valid_rmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Logs the graphs were built from.
    pub graph_data: Dataset,
    pub graph: TrainGraph,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn pairs_and_labels(ds: &Dataset) -> (Vec<(usize, usize)>, Vec<f64>) {
    ds.logs
        .iter()
        .map(|l| ((l.student, l.exercise), l.score as f64))
        .unzip()
}

/// Trains from scratch. Without `valid`, `valid_fraction` of `train` is
/// held out and the graphs are built from the remainder.
pub fn train(
    train: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.logs.is_empty() {
        return Err(IcdmError::Validation("training set has no logs".into()));
    }
    let (fit, valid) = match valid {
        Some(v) => (train.clone(), v.clone()),
        None if train.logs.len() >= 2 => {
            split_transductive(train, &SplitSpec::transductive(cfg.valid_fraction, cfg.seed ^ VALID_SEED_SALT))?
        }
        None => (train.clone(), train.with_logs(Vec::new())),
    };
    let graph = TrainGraph::build(&fit)?;
    let mut model = Model::new(cfg.model_config(), fit.n_students(), fit.n_exercises(), fit.n_concepts())?;
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (valid_pairs, valid_labels) = pairs_and_labels(&valid);

    let mut order: Vec<usize> = (0..fit.logs.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<(usize, usize)> = chunk.iter().map(|&i| (fit.logs[i].student, fit.logs[i].exercise)).collect();
            let labels: Vec<f64> = chunk.iter().map(|&i| fit.logs[i].score as f64).collect();
            let annotate = |e: IcdmError| match e {
                IcdmError::Numeric { op, message } => IcdmError::Numeric {
                    op,
                    message: format!("epoch {epoch}, batch {batch_no}: {message}"),
                },
                other => other,
            };
            let mut tape = Tape::new();
            let l = batch_loss(&mut tape, &model, &graph, &pairs, &labels, cfg.lambda_reg, true, &mut rng)
                .map_err(annotate)?;
            let value = tape.value(l).item();
            if !value.is_finite() {
                return Err(annotate(IcdmError::Numeric {
                    op: "loss",
                    message: format!("non-finite loss {value}"),
                }));
            }
            epoch_loss += value;
            let grads = tape.backward(l).map_err(annotate)?;
            tape.accumulate_param_grads(&grads, &mut model.store);
            adam.step(&mut model.store);
            model.head.clamp_nonneg(&mut model.store);
        }

        let mut record = EpochRecord {
            epoch,
            train_loss: epoch_loss / fit.logs.len() as f64,
            valid_auc: None,
            valid_acc: None,
            valid_rmse: None,
        };
        let score = if valid_pairs.is_empty() {
            None
        } else {
            let preds = model.predict(&graph, &valid_pairs)?;
            let rep = EvalReport::from_predictions(&preds, &valid_labels)?;
            record.valid_auc = rep.auc;
            record.valid_acc = Some(rep.acc);
            record.valid_rmse = Some(rep.rmse);
            Some(rep.auc.unwrap_or(-rep.rmse))
        };
        on_epoch(&record);
        history.push(record);

        match score {
            Some(s) if best.as_ref().is_none_or(|b| s > b.0) => {
                best = Some((s, epoch, model.store.clone()));
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            None => {}
        }
    }

    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => history.len().saturating_sub(1),
    };
    Ok(TrainOutcome {
        model,
        graph_data: fit,
        graph,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{IdMap, QMatrix, ResponseLog};
    use crate::diffcore::Mat;

    fn toy() -> Dataset {
        let q = QMatrix::from_rows(3, vec![vec![0], vec![1], vec![0, 2], vec![2], vec![1, 2]]).unwrap();
        let mut logs = Vec::new();
        let truth = [[1, 1, 1], [1, 0, 0], [0, 1, 1], [0, 0, 1]];
        for (s, m) in truth.iter().enumerate() {
            for j in 0..5 {
                let right = q.concepts(j).iter().all(|&k| m[k] == 1);
                logs.push(ResponseLog::new(s, j, right as u8));
            }
        }
        Dataset::new(logs, q, IdMap::identity(4), IdMap::identity(5), IdMap::identity(3)).unwrap()
    }

    fn cfg(kind: &str) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 200,
            lambda_reg: 0.0,
            patience: 1000,
            lr: 1e-2,
            d: 8,
            hidden: vec![8, 4],
            if_kind: kind.into(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_examples() {
        assert!(loss(&[1.0, 0.0], &[1.0, 0.0], 0.0, 0.0, 1, 1) < 1e-6);
        assert_eq!(regularizer(0.0, 3, 2), 0.0);
        let h = Mat::from_rows(&[vec![1.0, 2.0]]);
        assert_eq!(regularizer(h.sq_norm(), 3, 2), 1.0);
    }

    #[test]
    fn training_lowers_loss_and_keeps_weights_nonnegative() {
        let ds = toy();
        for kind in ["glif", "mono_mlp", "mirt"] {
            let mut records = Vec::new();
            let out = train(&ds, Some(&ds), &cfg(kind), &mut |r| records.push(r.clone())).unwrap();
            assert_eq!(records.len(), 200);
            assert!(records.last().unwrap().train_loss < records[0].train_loss, "{kind}");
            for id in out.model.head.constrained_weights() {
                assert!(out.model.store.value(id).as_slice().iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn large_regularizer_shrinks_embeddings() {
        let ds = toy();
        let c = TrainConfig {
            lambda_reg: 1.0,
            lr: 1e-2,
            epochs: 1,
            ..cfg("mirt")
        };
        let norm = |m: &Model| {
            m.cagt
                .embedding_tables()
                .iter()
                .map(|&id| m.store.value(id).sq_norm())
                .sum::<f64>()
        };
        let mut prev = f64::INFINITY;
        for epochs in [1, 5, 20] {
            let out = train(&ds, Some(&ds), &TrainConfig { epochs, ..c.clone() }, &mut |_| {}).unwrap();
            let n = norm(&out.model);
            assert!(n < prev);
            prev = n;
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let ds = toy();
        let c = TrainConfig { epochs: 5, ..cfg("glif") };
        let a = train(&ds, None, &c, &mut |_| {}).unwrap();
        let b = train(&ds, None, &c, &mut |_| {}).unwrap();
        for ((_, p), (_, q)) in a.model.store.iter().zip(b.model.store.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn early_stopping_restores_best() {
        let ds = toy();
        let c = TrainConfig {
            epochs: 500,
            patience: 3,
            ..cfg("mirt")
        };
        let mut records = Vec::new();
        let out = train(&ds, Some(&ds), &c, &mut |r| records.push(r.clone())).unwrap();
        assert!(records.len() < 500);
        let best = records
            .iter()
            .map(|r| r.valid_auc.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(records[out.best_epoch].valid_auc.unwrap(), best);
        let (pairs, labels) = pairs_and_labels(&ds);
        let preds = out.model.predict(&out.graph, &pairs).unwrap();
        assert_eq!(crate::metrics::auc(&preds, &labels).unwrap(), best);
    }

    #[test]
    fn single_step_reduces_example_loss() {
        let ds = toy();
        let c = cfg("mono_mlp");
        let graph = TrainGraph::build(&ds).unwrap();
        let mut model = Model::new(c.model_config(), 4, 5, 3).unwrap();
        let pair = [(1usize, 2usize)];
        let label = [0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eval = |m: &Model| {
            let mut t = Tape::new();
            let l = batch_loss(&mut t, m, &graph, &pair, &label, 0.0, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            t.value(l).item()
        };
        let before = eval(&model);
        let mut t = Tape::new();
        let l = batch_loss(&mut t, &model, &graph, &pair, &label, 0.0, false, &mut rng).unwrap();
        let g = t.backward(l).unwrap();
        t.accumulate_param_grads(&g, &mut model.store);
        let mut adam = Adam::new(&model.store, AdamConfig { lr: 1e-4, ..AdamConfig::default() });
        adam.step(&mut model.store);
        model.head.clamp_nonneg(&mut model.store);
        assert!(eval(&model) < before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lambda_reg: 2.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { if_kind: "gat".into(), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
