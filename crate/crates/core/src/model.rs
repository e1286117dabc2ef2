//! The trainable model: representation pipeline plus interaction head,
//! and the training-graph context it runs on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cagt::{self, positions, AggregationConfig, CagtParams, TargetSets};
use crate::dataio::{Dataset, QMatrix, RatingMatrix};
use crate::diffcore::{sigmoid, Mat, ParameterStore, Tape, Var};
use crate::error::{IcdmError, Result};
use crate::graph::{build_involvement, build_scg, BipartiteGraph, StudentCenteredGraph};
use crate::interaction::{lightgcn_weights, propagate_half, Activation, IfConfig, IfKind, Interaction};

/// Rows per forward pass when scoring many pairs without gradients.
pub const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub if_kind: String,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            k: 3,
            alpha: 0.1,
            beta: 0.2,
            if_kind: IfKind::Glif.to_string(),
            hidden: vec![512, 256],
            activation: Activation::Sigmoid.to_string(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn aggregation(&self, training: bool) -> AggregationConfig {
        AggregationConfig {
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
            training,
            ..AggregationConfig::default()
        }
    }

    pub fn interaction(&self) -> Result<IfConfig> {
        Ok(IfConfig {
            kind: self.if_kind.parse()?,
            hidden: self.hidden.clone(),
            activation: self.activation.parse()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(IcdmError::Config("d must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(IcdmError::Config("hidden widths must be positive".into()));
        }
        self.aggregation(false).validate()?;
        self.interaction().map(|_| ())
    }
}

/// Graphs built from training logs, plus the dense concept masks.
#[derive(Debug, Clone)]
pub struct TrainGraph {
    pub q: QMatrix,
    pub rating: RatingMatrix,
    pub scg: StudentCenteredGraph,
    pub bipartite: BipartiteGraph,
}

impl TrainGraph {
    pub fn build(ds: &Dataset) -> Result<Self> {
        let rating = ds.rating_matrix();
        let involvement = build_involvement(&rating, &ds.q)?;
        let scg = build_scg(&rating, &ds.q, &involvement)?;
        let bipartite = BipartiteGraph::from_rating(&rating);
        Ok(Self {
            q: ds.q.clone(),
            rating,
            scg,
            bipartite,
        })
    }

    pub fn mask_rows(&self, exercises: &[usize]) -> Mat {
        let z = self.q.n_concepts();
        let mut m = Mat::zeros(exercises.len(), z);
        for (i, &e) in exercises.iter().enumerate() {
            for &c in self.q.concepts(e) {
                m.set(i, c, 1.0);
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub cagt: CagtParams,
    pub head: Interaction,
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
}

fn unique_sorted(it: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    v
}

impl Model {
    pub fn new(config: ModelConfig, n_students: usize, n_exercises: usize, n_concepts: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let cagt = CagtParams::init(&mut store, n_students, n_exercises, n_concepts, config.d, &mut rng);
        let head = Interaction::init(&mut store, &config.interaction()?, n_concepts, &mut rng);
        Ok(Self {
            config,
            store,
            cagt,
            head,
            n_students,
            n_exercises,
            n_concepts,
        })
    }

    /// Rebinds handles to an existing store, as after loading a snapshot.
    pub fn from_store(config: ModelConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let cagt = CagtParams::from_names(&store)?;
        let head = Interaction::from_names(&store, &config.interaction()?)?;
        let n_students = store.value(cagt.h_s).rows();
        let n_exercises = store.value(cagt.h_r).rows();
        let n_concepts = store.value(cagt.h_c).rows();
        for (id, cols) in [(cagt.h_s, config.d), (cagt.h_r, config.d), (cagt.h_w, config.d), (cagt.h_c, config.d)] {
            if store.value(id).cols() != cols {
                return Err(IcdmError::Snapshot("embedding width disagrees with d".into()));
            }
        }
        Ok(Self {
            config,
            store,
            cagt,
            head,
            n_students,
            n_exercises,
            n_concepts,
        })
    }

    pub fn kind(&self) -> IfKind {
        self.head.kind
    }

    fn check_graph(&self, g: &TrainGraph) -> Result<()> {
        if g.scg.n_students() != self.n_students
            || g.scg.n_exercises() != self.n_exercises
            || g.scg.n_concepts() != self.n_concepts
        {
            return Err(IcdmError::Usage("graph and model dimensions differ".into()));
        }
        Ok(())
    }

    /// Nodes whose final representations a batch needs.
    pub fn batch_targets(&self, g: &TrainGraph, students: &[usize], exercises: &[usize]) -> TargetSets {
        if self.kind() == IfKind::Glif {
            let ts = students
                .iter()
                .copied()
                .chain(exercises.iter().flat_map(|&e| g.bipartite.exercises.row(e).iter().copied()));
            let te = exercises
                .iter()
                .copied()
                .chain(students.iter().flat_map(|&s| g.bipartite.students.row(s).iter().copied()));
            let tc = exercises.iter().flat_map(|&e| g.q.concepts(e).iter().copied());
            TargetSets::new(ts.collect(), te.collect(), tc.collect())
        } else {
            TargetSets::new(students.to_vec(), exercises.to_vec(), Vec::new())
        }
    }

    /// Predicted probabilities (n×1) for `pairs` of (student, exercise).
    pub fn forward(
        &self,
        tape: &mut Tape,
        g: &TrainGraph,
        pairs: &[(usize, usize)],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        self.check_graph(g)?;
        for &(s, e) in pairs {
            if s >= self.n_students || e >= self.n_exercises {
                return Err(IcdmError::Usage(format!("pair ({s}, {e}) out of range")));
            }
        }
        let sb = unique_sorted(pairs.iter().map(|p| p.0));
        let eb = unique_sorted(pairs.iter().map(|p| p.1));
        let targets = self.batch_targets(g, &sb, &eb);
        let agg = self.config.aggregation(training);
        let (views, _) = cagt::aggregate(tape, &self.store, &self.cagt, &g.scg, &targets, &agg, rng)?;
        let lat = cagt::generate(tape, &self.store, &self.cagt, &views)?;

        let pair_s: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pair_e: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mask = tape.constant(g.mask_rows(&pair_e))?;

        let (mas, diff) = if self.kind() == IfKind::Glif {
            let h_e = cagt::exercise_latent(tape, lat.h_r, lat.h_w)?;
            let ps = self.glif_students(tape, g, &targets, lat.h_s, h_e, &sb)?;
            let ts = &targets;
            let own_e = tape.row_gather(h_e, positions(&ts.exercises, &eb))?;
            let we = lightgcn_weights(
                &eb,
                &g.bipartite.exercises,
                |v| g.bipartite.student_degree(v),
                |v| ts.students.binary_search(&v).expect("neighbor targeted"),
            );
            let pe = propagate_half(tape, own_e, lat.h_s, we)?;
            let groups: Vec<Vec<usize>> = eb
                .iter()
                .map(|&e| positions(&ts.concepts, g.q.concepts(e)))
                .collect();
            let con = tape.segment_mean(lat.h_c, &groups)?;

            let ps_pairs = tape.row_gather(ps, positions(&sb, &pair_s))?;
            let e_local = positions(&eb, &pair_e);
            let pe_pairs = tape.row_gather(pe, e_local.clone())?;
            let con_pairs = tape.row_gather(con, e_local)?;
            let mas_d = tape.hadamard(ps_pairs, con_pairs)?;
            let diff_d = tape.hadamard(pe_pairs, con_pairs)?;
            (
                self.cagt.t_student.apply(tape, &self.store, mas_d)?,
                self.cagt.t_exercise.apply(tape, &self.store, diff_d)?,
            )
        } else {
            let mas_all = self.cagt.t_student.apply(tape, &self.store, lat.h_s)?;
            let e_lat = cagt::exercise_latent(tape, lat.h_r, lat.h_w)?;
            let diff_all = self.cagt.t_exercise.apply(tape, &self.store, e_lat)?;
            (
                tape.row_gather(mas_all, positions(&targets.students, &pair_s))?,
                tape.row_gather(diff_all, positions(&targets.exercises, &pair_e))?,
            )
        };
        self.head.forward(tape, &self.store, mas, diff, mask)
    }

    /// GLIF-propagated student latents for `students`, rows in that order.
    fn glif_students(
        &self,
        tape: &mut Tape,
        g: &TrainGraph,
        targets: &TargetSets,
        h_s: Var,
        h_e: Var,
        students: &[usize],
    ) -> Result<Var> {
        let own = tape.row_gather(h_s, positions(&targets.students, students))?;
        let ws = lightgcn_weights(
            students,
            &g.bipartite.students,
            |v| g.bipartite.exercise_degree(v),
            |v| targets.exercises.binary_search(&v).expect("neighbor targeted"),
        );
        propagate_half(tape, own, h_e, ws)
    }

    /// Eval-mode probabilities for many pairs.
    pub fn predict(&self, g: &TrainGraph, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let y = self.forward(&mut tape, g, chunk, false, &mut rng)?;
            out.extend_from_slice(tape.value(y).as_slice());
        }
        Ok(out)
    }

    /// Reported mastery in `[0,1]`, one row per requested student.
    pub fn mastery(&self, g: &TrainGraph, students: &[usize]) -> Result<Mat> {
        self.check_graph(g)?;
        if let Some(&s) = students.iter().find(|&&s| s >= self.n_students) {
            return Err(IcdmError::UnknownStudent(s as u64));
        }
        let sb = unique_sorted(students.iter().copied());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let targets = if self.kind() == IfKind::Glif {
            TargetSets::new(
                sb.clone(),
                sb.iter()
                    .flat_map(|&s| g.bipartite.students.row(s).iter().copied())
                    .collect(),
                (0..self.n_concepts).collect(),
            )
        } else {
            TargetSets::new(sb.clone(), Vec::new(), Vec::new())
        };
        let agg = self.config.aggregation(false);
        let (views, _) = cagt::aggregate(&mut tape, &self.store, &self.cagt, &g.scg, &targets, &agg, &mut rng)?;
        let lat = cagt::generate(&mut tape, &self.store, &self.cagt, &views)?;
        let rows = if self.kind() == IfKind::Glif {
            let h_e = cagt::exercise_latent(&mut tape, lat.h_r, lat.h_w)?;
            let ps = self.glif_students(&mut tape, g, &targets, lat.h_s, h_e, &sb)?;
            self.glif_mastery(tape.value(ps), tape.value(lat.h_c))
        } else {
            let z = self.cagt.t_student.apply(&mut tape, &self.store, lat.h_s)?;
            tape.value(z).map(sigmoid)
        };
        Ok(rows.gather_rows(&positions(&sb, students)))
    }

    /// `σ((P_s ⊙ h_c[z]) · W_s[:, z] + b_s[z])` for every concept `z`.
    pub fn glif_mastery(&self, ps: &Mat, h_c: &Mat) -> Mat {
        let w = self.store.value(self.cagt.t_student.weight);
        let b = self.store.value(self.cagt.t_student.bias);
        let (d, z) = (w.rows(), w.cols());
        let mut gmat = Mat::zeros(d, z);
        for i in 0..d {
            for c in 0..z {
                gmat.set(i, c, h_c.get(c, i) * w.get(i, c));
            }
        }
        let mut out = ps.matmul(&gmat);
        for r in 0..out.rows() {
            for (v, bb) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v = sigmoid(*v + bb);
            }
        }
        out
    }

    /// `Σ ‖H‖²` over the four embedding tables, as a tape node.
    pub fn embedding_sq_norm(&self, tape: &mut Tape) -> Result<Var> {
        let tables: Vec<Var> = self
            .cagt
            .embedding_tables()
            .iter()
            .map(|&id| tape.param(&self.store, id))
            .collect::<Result<_>>()?;
        let all = tape.concat_rows(&tables)?;
        tape.sq_norm(all)
    }
}
