//! Interaction functions: `ŷ = σ(F((Mas − Diff) ⊙ Q_e))`.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::cagt::Affine;
use crate::dataio::QMatrix;
use crate::diffcore::{xavier_uniform, Mat, ParamId, ParameterStore, SparseRows, Tape, Var};
use crate::error::{IcdmError, Result};
use crate::graph::BipartiteGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IfKind {
    Mirt,
    MonoMlp,
    #[default]
    Glif,
}

impl IfKind {
    /// Whether the head is a non-negative MLP.
    pub fn uses_mlp(self) -> bool {
        matches!(self, IfKind::MonoMlp | IfKind::Glif)
    }
}

impl fmt::Display for IfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IfKind::Mirt => "mirt",
            IfKind::MonoMlp => "mono_mlp",
            IfKind::Glif => "glif",
        })
    }
}

impl FromStr for IfKind {
    type Err = IcdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mirt" => Ok(IfKind::Mirt),
            "mono_mlp" | "mlp" | "ncdm" => Ok(IfKind::MonoMlp),
            "glif" => Ok(IfKind::Glif),
            other => Err(IcdmError::Config(format!("unknown interaction function `{other}`"))),
        }
    }
}

/// Hidden activation of the monotonic MLP. Both are increasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Sigmoid,
    Tanh,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = IcdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(IcdmError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IfConfig {
    pub kind: IfKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for IfConfig {
    fn default() -> Self {
        Self {
            kind: IfKind::Glif,
            hidden: vec![512, 256],
            activation: Activation::Sigmoid,
        }
    }
}

impl IfConfig {
    pub fn new(kind: IfKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Head {
    Mirt { disc: ParamId, bias: ParamId },
    Mlp { layers: Vec<Affine>, activation: Activation },
}

/// Parameters and evaluation of the `F` of one interaction function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub kind: IfKind,
    head: Head,
}

impl Interaction {
    /// MIRT: discrimination ones, bias zero. MLP: Xavier weights clamped
    /// non-negative; biases zero, except that with sigmoid hidden units every
    /// later layer starts at `−½·Σ_in w` so its pre-activation is centered.
    pub fn init(store: &mut ParameterStore, cfg: &IfConfig, n_concepts: usize, rng: &mut ChaCha8Rng) -> Self {
        let head = if cfg.kind.uses_mlp() {
            let mut widths = vec![n_concepts];
            widths.extend(&cfg.hidden);
            widths.push(1);
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| Affine {
                    weight: store.add(format!("if.layer{i}.weight"), xavier_uniform(w[0], w[1], rng)),
                    bias: store.add(format!("if.layer{i}.bias"), Mat::zeros(1, w[1])),
                })
                .collect();
            Head::Mlp {
                layers,
                activation: cfg.activation,
            }
        } else {
            Head::Mirt {
                disc: store.add("if.disc", Mat::filled(n_concepts, 1, 1.0)),
                bias: store.add("if.bias", Mat::zeros(1, 1)),
            }
        };
        let me = Self { kind: cfg.kind, head };
        me.clamp_nonneg(store);
        if let Head::Mlp {
            layers,
            activation: Activation::Sigmoid,
        } = &me.head
        {
            // Sigmoid outputs sit around ½, so start each later layer centered.
            for layer in &layers[1..] {
                let w = store.value(layer.weight).clone();
                let b = store.value_mut(layer.bias);
                for (c, v) in b.as_mut_slice().iter_mut().enumerate() {
                    *v = -0.5 * (0..w.rows()).map(|r| w.get(r, c)).sum::<f64>();
                }
            }
        }
        me
    }

    pub fn from_names(store: &ParameterStore, cfg: &IfConfig) -> Result<Self> {
        let get = |n: String| {
            store
                .find(&n)
                .ok_or_else(|| IcdmError::Snapshot(format!("missing tensor `{n}`")))
        };
        let head = if cfg.kind.uses_mlp() {
            let layers = (0..=cfg.hidden.len())
                .map(|i| {
                    Ok(Affine {
                        weight: get(format!("if.layer{i}.weight"))?,
                        bias: get(format!("if.layer{i}.bias"))?,
                    })
                })
                .collect::<Result<_>>()?;
            Head::Mlp {
                layers,
                activation: cfg.activation,
            }
        } else {
            Head::Mirt {
                disc: get("if.disc".into())?,
                bias: get("if.bias".into())?,
            }
        };
        Ok(Self { kind: cfg.kind, head })
    }

    /// Weight tensors kept non-negative.
    pub fn constrained_weights(&self) -> Vec<ParamId> {
        match &self.head {
            Head::Mirt { disc, .. } => vec![*disc],
            Head::Mlp { layers, .. } => layers.iter().map(|l| l.weight).collect(),
        }
    }

    /// `w ← max(w, 0)` on every constrained weight; biases untouched.
    pub fn clamp_nonneg(&self, store: &mut ParameterStore) {
        for id in self.constrained_weights() {
            for w in store.value_mut(id).as_mut_slice() {
                if *w < 0.0 {
                    *w = 0.0;
                }
            }
        }
    }

    /// `F(x)` for an n×Z input, giving n×1 logits.
    pub fn logits(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        match &self.head {
            Head::Mirt { disc, bias } => {
                let d = tape.param(store, *disc)?;
                let b = tape.param(store, *bias)?;
                let y = tape.matmul(x, d)?;
                tape.add_row(y, b)
            }
            Head::Mlp { layers, activation } => {
                let mut h = x;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.apply(tape, store, h)?;
                    if i + 1 < layers.len() {
                        h = match activation {
                            Activation::Sigmoid => tape.sigmoid(h)?,
                            Activation::Tanh => tape.tanh(h)?,
                        };
                    }
                }
                Ok(h)
            }
        }
    }

    /// Probabilities for n rows of width-Z mastery, difficulty and mask.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, mas: Var, diff: Var, mask: Var) -> Result<Var> {
        let delta = tape.sub(mas, diff)?;
        let masked = tape.hadamard(delta, mask)?;
        let z = self.logits(tape, store, masked)?;
        tape.sigmoid(z)
    }

    /// Single-row prediction.
    pub fn predict(&self, store: &ParameterStore, mas: &[f64], diff: &[f64], q_mask: &[f64]) -> Result<f64> {
        if mas.len() != diff.len() || mas.len() != q_mask.len() {
            return Err(IcdmError::Usage(format!(
                "width mismatch: Mas {}, Diff {}, mask {}",
                mas.len(),
                diff.len(),
                q_mask.len()
            )));
        }
        if q_mask.iter().all(|&m| m == 0.0) {
            return Err(IcdmError::Validation("concept mask has no nonzero entry".into()));
        }
        let mut t = Tape::new();
        let m = t.constant(Mat::row_vector(mas))?;
        let d = t.constant(Mat::row_vector(diff))?;
        let q = t.constant(Mat::row_vector(q_mask))?;
        let y = self.forward(&mut t, store, m, d, q)?;
        Ok(t.value(y).item())
    }
}

/// Symmetric-normalized propagation weights from the rows in `own` to
/// their neighbors, with neighbor positions resolved by `local`.
///
/// Row `i` gets `1/√(|N_i|·deg(n))` for every neighbor `n` of `own[i]`.
pub fn lightgcn_weights(
    own: &[usize],
    adjacency: &crate::graph::Csr,
    neighbor_degree: impl Fn(usize) -> usize,
    local: impl Fn(usize) -> usize,
) -> SparseRows {
    let mut offsets = Vec::with_capacity(own.len() + 1);
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    offsets.push(0);
    for &u in own {
        let nbrs = adjacency.row(u);
        let du = nbrs.len() as f64;
        for &v in nbrs {
            let dv = neighbor_degree(v).max(1) as f64;
            cols.push(local(v));
            weights.push(1.0 / (du * dv).sqrt());
        }
        offsets.push(cols.len());
    }
    SparseRows::new(offsets, cols, weights)
}

/// `½(self + Σ neighbor/√(|N_u||N_v|))`.
pub fn propagate_half(tape: &mut Tape, own: Var, neighbors: Var, weights: SparseRows) -> Result<Var> {
    let agg = tape.spmm(neighbors, weights)?;
    let sum = tape.add(own, agg)?;
    tape.scale(sum, 0.5)
}

/// Width-d GLIF state: propagated student and exercise latents and the
/// per-exercise concept average. Mastery for a (student, exercise) pair is
/// `student ⊙ con`, difficulty is `exercise ⊙ con`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlifLift {
    pub student: Mat,
    pub exercise: Mat,
    pub con: Mat,
}

impl GlifLift {
    pub fn mastery(&self, s: usize, e: usize) -> Vec<f64> {
        self.student.row(s).iter().zip(self.con.row(e)).map(|(a, b)| a * b).collect()
    }

    pub fn difficulty(&self, e: usize) -> Vec<f64> {
        self.exercise.row(e).iter().zip(self.con.row(e)).map(|(a, b)| a * b).collect()
    }
}

/// Full-graph GLIF propagation and concept averaging on plain matrices.
pub fn glif_lift(g: &BipartiteGraph, h_s: &Mat, h_e: &Mat, h_c: &Mat, q: &QMatrix) -> Result<GlifLift> {
    let (n, m) = (g.students.n_rows(), g.exercises.n_rows());
    if h_s.rows() != n || h_e.rows() != m || h_c.rows() != q.n_concepts() || q.n_exercises() != m {
        return Err(IcdmError::Usage("glif_lift shapes do not match the graph".into()));
    }
    let mut t = Tape::new();
    let s = t.constant(h_s.clone())?;
    let e = t.constant(h_e.clone())?;
    let c = t.constant(h_c.clone())?;
    let all_s: Vec<usize> = (0..n).collect();
    let all_e: Vec<usize> = (0..m).collect();
    let ws = lightgcn_weights(&all_s, &g.students, |v| g.exercise_degree(v), |v| v);
    let we = lightgcn_weights(&all_e, &g.exercises, |v| g.student_degree(v), |v| v);
    let ps = propagate_half(&mut t, s, e, ws)?;
    let pe = propagate_half(&mut t, e, s, we)?;
    let groups: Vec<&[usize]> = (0..m).map(|j| q.concepts(j)).collect();
    let con = t.segment_mean(c, &groups)?;
    Ok(GlifLift {
        student: t.value(ps).clone(),
        exercise: t.value(pe).clone(),
        con: t.value(con).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{RatingMatrix, ResponseLog};
    use crate::diffcore::sigmoid;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("mirt".parse::<IfKind>().unwrap(), IfKind::Mirt);
        assert_eq!("MONO_MLP".parse::<IfKind>().unwrap(), IfKind::MonoMlp);
        assert_eq!("glif".parse::<IfKind>().unwrap(), IfKind::Glif);
        assert!("gat".parse::<IfKind>().is_err());
        assert_eq!(IfKind::MonoMlp.to_string(), "mono_mlp");
    }

    #[test]
    fn mirt_sum_reduction() {
        let mut store = ParameterStore::new();
        let f = Interaction::init(&mut store, &IfConfig::new(IfKind::Mirt), 2, &mut rng(0));
        let p = f.predict(&store, &[0.2, -0.1], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((p - sigmoid(0.1)).abs() < 1e-15);
        assert!((p - 0.52498).abs() < 1e-5);
    }

    #[test]
    fn zero_mask_is_rejected() {
        let mut store = ParameterStore::new();
        let f = Interaction::init(&mut store, &IfConfig::new(IfKind::Mirt), 2, &mut rng(0));
        assert!(matches!(
            f.predict(&store, &[0.2, 0.1], &[0.0, 0.0], &[0.0, 0.0]),
            Err(IcdmError::Validation(_))
        ));
    }

    #[test]
    fn equal_mastery_and_difficulty_with_zero_biases() {
        let mut store = ParameterStore::new();
        let cfg = IfConfig {
            kind: IfKind::MonoMlp,
            hidden: vec![8, 4],
            activation: Activation::Tanh,
        };
        let f = Interaction::init(&mut store, &cfg, 3, &mut rng(1));
        let p = f.predict(&store, &[0.3, 0.9, -0.2], &[0.3, 0.9, -0.2], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(p, 0.5);

        // With sigmoid hidden units F(0) depends only on the weights: a
        // constant across inputs but not 0.5.
        let mut store = ParameterStore::new();
        let f = Interaction::init(&mut store, &IfConfig { activation: Activation::Sigmoid, ..cfg }, 3, &mut rng(1));
        let a = f.predict(&store, &[0.1; 3], &[0.1; 3], &[1.0; 3]).unwrap();
        let b = f.predict(&store, &[-4.0; 3], &[-4.0; 3], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clamp_zeroes_negatives_only() {
        let mut store = ParameterStore::new();
        let cfg = IfConfig {
            kind: IfKind::MonoMlp,
            hidden: vec![2],
            activation: Activation::Sigmoid,
        };
        let f = Interaction::init(&mut store, &cfg, 2, &mut rng(2));
        let w = f.constrained_weights()[0];
        let b = store.find("if.layer0.bias").unwrap();
        store.value_mut(w).as_mut_slice().copy_from_slice(&[-0.3, 0.7, 0.0, 1.5]);
        store.value_mut(b).as_mut_slice().copy_from_slice(&[-1.0, -2.0]);
        f.clamp_nonneg(&mut store);
        assert_eq!(store.value(w).as_slice(), &[0.0, 0.7, 0.0, 1.5]);
        assert_eq!(store.value(b).as_slice(), &[-1.0, -2.0]);
    }

    #[test]
    fn init_is_already_nonnegative() {
        for kind in [IfKind::MonoMlp, IfKind::Glif, IfKind::Mirt] {
            let mut store = ParameterStore::new();
            let f = Interaction::init(&mut store, &IfConfig::new(kind), 5, &mut rng(3));
            for id in f.constrained_weights() {
                assert!(store.value(id).as_slice().iter().all(|&w| w >= 0.0));
            }
            let g = Interaction::from_names(&store, &IfConfig::new(kind)).unwrap();
            assert_eq!(f, g);
        }
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let mut store = ParameterStore::new();
        let f = Interaction::init(&mut store, &IfConfig::new(IfKind::MonoMlp), 4, &mut rng(4));
        let mut r = rng(5);
        for _ in 0..50 {
            let mas: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let diff: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let p = f.predict(&store, &mas, &diff, &[1.0, 0.0, 1.0, 1.0]).unwrap();
            assert!(p > 0.0 && p < 1.0 && p.is_finite());
        }
    }

    fn toy_bipartite() -> (BipartiteGraph, QMatrix) {
        // s0: e0, e1. s1: e1.
        let logs = [ResponseLog::new(0, 0, 1), ResponseLog::new(0, 1, 0), ResponseLog::new(1, 1, 1)];
        let r = RatingMatrix::from_logs(2, 2, &logs);
        let q = QMatrix::from_rows(2, vec![vec![0, 1], vec![1]]).unwrap();
        (BipartiteGraph::from_rating(&r), q)
    }

    #[test]
    fn glif_lift_by_hand() {
        let (g, q) = toy_bipartite();
        let hs = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let he = Mat::from_rows(&[vec![4.0, 4.0], vec![2.0, -2.0]]);
        let hc = Mat::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]);
        let lift = glif_lift(&g, &hs, &he, &hc, &q).unwrap();
        // deg: s0 = 2, s1 = 1, e0 = 1, e1 = 2.
        let k02 = 1.0 / 2f64.sqrt();
        let k01 = 1.0 / 2f64.sqrt();
        let k11 = 1.0 / 2f64.sqrt();
        let s0 = [0.5 * (1.0 + 4.0 * k01 + 2.0 * 0.5), 0.5 * (0.0 + 4.0 * k01 - 2.0 * 0.5)];
        let s1 = [0.5 * (0.0 + 2.0 * k11), 0.5 * (2.0 - 2.0 * k11)];
        let e1 = [0.5 * (2.0 + 1.0 * 0.5 + 0.0 * k02), 0.5 * (-2.0 + 0.0 + 2.0 * k02)];
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(lift.student.row(0), &s0));
        assert!(close(lift.student.row(1), &s1));
        assert!(close(lift.exercise.row(1), &e1));
        // Con(e0) = mean of both concepts; Con(e1) = h_c1.
        assert!(close(lift.con.row(0), &[2.0, 4.0]));
        assert!(close(lift.con.row(1), &[3.0, 5.0]));
        let m = lift.mastery(1, 0);
        assert!(close(&m, &[s1[0] * 2.0, s1[1] * 4.0]));
    }

    #[test]
    fn degree_one_normalization() {
        let logs = [ResponseLog::new(0, 0, 1)];
        let r = RatingMatrix::from_logs(1, 1, &logs);
        let q = QMatrix::from_rows(1, vec![vec![0]]).unwrap();
        let g = BipartiteGraph::from_rating(&r);
        let lift = glif_lift(
            &g,
            &Mat::from_rows(&[vec![1.0]]),
            &Mat::from_rows(&[vec![3.0]]),
            &Mat::from_rows(&[vec![1.0]]),
            &q,
        )
        .unwrap();
        assert_eq!(lift.student.item(), 2.0);
        assert_eq!(lift.exercise.item(), 2.0);
    }

    #[test]
    fn glif_propagation_is_linear() {
        let (g, q) = toy_bipartite();
        let mut r = rng(8);
        let hs = xavier_uniform(2, 3, &mut r);
        let he = xavier_uniform(2, 3, &mut r);
        let hc = xavier_uniform(2, 3, &mut r);
        let a = glif_lift(&g, &hs, &he, &hc, &q).unwrap();
        let b = glif_lift(&g, &hs.map(|x| 2.0 * x), &he.map(|x| 2.0 * x), &hc, &q).unwrap();
        for (x, y) in a.student.as_slice().iter().zip(b.student.as_slice()) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
        for (x, y) in a.exercise.as_slice().iter().zip(b.exercise.as_slice()) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
        assert_eq!(a.con, b.con);
    }

    #[test]
    fn monotone_in_mastery() {
        for kind in [IfKind::Mirt, IfKind::MonoMlp] {
            let mut store = ParameterStore::new();
            let cfg = IfConfig {
                kind,
                hidden: vec![16, 8],
                activation: Activation::Sigmoid,
            };
            let f = Interaction::init(&mut store, &cfg, 4, &mut rng(9));
            let mut r = rng(10);
            for _ in 0..200 {
                let mas: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
                let diff: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
                let mut mask = vec![0.0; 4];
                let z = r.gen_range(0..4);
                mask[z] = 1.0;
                let p0 = f.predict(&store, &mas, &diff, &mask).unwrap();
                let mut up = mas.clone();
                up[z] += r.gen_range(0.01..1.0);
                assert!(f.predict(&store, &up, &diff, &mask).unwrap() >= p0);
            }
        }
    }
}
