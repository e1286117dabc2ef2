//! Construction, aggregation, generation and transformation of node
//! representations over the student-centered graph.
//!
//! Each of the five bipartite relations of the graph is propagated on its
//! own: at depth `k` a node's aggregate is the mean of its neighbors'
//! depth `k-1` aggregates along the same relation, with depth 0 being the
//! base embedding. The per-relation views are accumulated as
//! `Σ_k h^k / (k+1)` and then fused per node class by attention weights.
//!
//! Only the rows reachable from the requested target nodes within `K`
//! hops are materialized, so a mini-batch touches the part of the graph it
//! depends on and nothing else.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{xavier_uniform, Mat, ParamId, ParameterStore, SparseRows, Tape, Var};
use crate::error::{IcdmError, Result};
use crate::graph::{BiAdjacency, Csr, StudentCenteredGraph};

/// Largest dropout probability the schedule may reach.
pub const MAX_DROP_RATE: f64 = 0.95;

/// Neighbor aggregator. Only the mean is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregator {
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    /// Maximum hop depth, at least 1.
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub aggregator: Aggregator,
    pub training: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: 0.1,
            beta: 0.2,
            aggregator: Aggregator::Mean,
            training: false,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(IcdmError::Config("K must be at least 1".into()));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(IcdmError::Config("alpha and beta must be finite".into()));
        }
        Ok(())
    }

    /// Dropout probability applied when aggregating hop `depth + 1` from
    /// depth `depth`: `alpha + beta * depth`, clamped to `[0, MAX_DROP_RATE]`.
    pub fn drop_rate(&self, depth: usize) -> f64 {
        (self.alpha + self.beta * depth as f64).clamp(0.0, MAX_DROP_RATE)
    }

    pub fn eval(mut self) -> Self {
        self.training = false;
        self
    }
}

/// Weight of the depth-`k` aggregate in the descending accumulation.
pub fn accumulation_coefficient(k: usize) -> f64 {
    1.0 / (k as f64 + 1.0)
}

/// Attention parameters of one node class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenParams {
    /// Attention vector, stored as a d×1 column.
    pub attn: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// `x @ weight + bias`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Parameter handles of the representation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CagtParams {
    pub h_s: ParamId,
    pub h_r: ParamId,
    pub h_w: ParamId,
    pub h_c: ParamId,
    pub gen_student: GenParams,
    pub gen_right: GenParams,
    pub gen_wrong: GenParams,
    pub gen_concept: GenParams,
    pub t_student: Affine,
    pub t_exercise: Affine,
    pub t_concept: Affine,
}

impl CagtParams {
    /// Registers every tensor in `store`: Xavier weights, zero biases.
    pub fn init(
        store: &mut ParameterStore,
        n_students: usize,
        n_exercises: usize,
        n_concepts: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h_s = store.add("emb.student", xavier_uniform(n_students, d, rng));
        let h_r = store.add("emb.right", xavier_uniform(n_exercises, d, rng));
        let h_w = store.add("emb.wrong", xavier_uniform(n_exercises, d, rng));
        let h_c = store.add("emb.concept", xavier_uniform(n_concepts, d, rng));
        let mut gen = |name: &str, store: &mut ParameterStore| GenParams {
            attn: store.add(format!("gen.{name}.attn"), xavier_uniform(d, 1, rng)),
            weight: store.add(format!("gen.{name}.weight"), xavier_uniform(d, d, rng)),
            bias: store.add(format!("gen.{name}.bias"), Mat::zeros(1, d)),
        };
        let gen_student = gen("student", store);
        let gen_right = gen("right", store);
        let gen_wrong = gen("wrong", store);
        let gen_concept = gen("concept", store);
        let mut affine = |name: &str, store: &mut ParameterStore| Affine {
            weight: store.add(format!("tf.{name}.weight"), xavier_uniform(d, n_concepts, rng)),
            bias: store.add(format!("tf.{name}.bias"), Mat::zeros(1, n_concepts)),
        };
        let t_student = affine("student", store);
        let t_exercise = affine("exercise", store);
        let t_concept = affine("concept", store);
        Self {
            h_s,
            h_r,
            h_w,
            h_c,
            gen_student,
            gen_right,
            gen_wrong,
            gen_concept,
            t_student,
            t_exercise,
            t_concept,
        }
    }

    /// Looks up the handles by the names [`CagtParams::init`] assigns.
    pub fn from_names(store: &ParameterStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .find(n)
                .ok_or_else(|| IcdmError::Snapshot(format!("missing tensor `{n}`")))
        };
        let gen = |name: &str| -> Result<GenParams> {
            Ok(GenParams {
                attn: get(&format!("gen.{name}.attn"))?,
                weight: get(&format!("gen.{name}.weight"))?,
                bias: get(&format!("gen.{name}.bias"))?,
            })
        };
        let affine = |name: &str| -> Result<Affine> {
            Ok(Affine {
                weight: get(&format!("tf.{name}.weight"))?,
                bias: get(&format!("tf.{name}.bias"))?,
            })
        };
        Ok(Self {
            h_s: get("emb.student")?,
            h_r: get("emb.right")?,
            h_w: get("emb.wrong")?,
            h_c: get("emb.concept")?,
            gen_student: gen("student")?,
            gen_right: gen("right")?,
            gen_wrong: gen("wrong")?,
            gen_concept: gen("concept")?,
            t_student: affine("student")?,
            t_exercise: affine("exercise")?,
            t_concept: affine("concept")?,
        })
    }

    /// The four embedding tables, in concatenation order.
    pub fn embedding_tables(&self) -> [ParamId; 4] {
        [self.h_s, self.h_r, self.h_w, self.h_c]
    }
}

/// Sorted, deduplicated node indices per class for which final
/// representations are requested.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TargetSets {
    pub students: Vec<usize>,
    pub exercises: Vec<usize>,
    pub concepts: Vec<usize>,
}

impl TargetSets {
    pub fn new(mut students: Vec<usize>, mut exercises: Vec<usize>, mut concepts: Vec<usize>) -> Self {
        for v in [&mut students, &mut exercises, &mut concepts] {
            v.sort_unstable();
            v.dedup();
        }
        Self {
            students,
            exercises,
            concepts,
        }
    }

    pub fn all(g: &StudentCenteredGraph) -> Self {
        Self {
            students: (0..g.n_students()).collect(),
            exercises: (0..g.n_exercises()).collect(),
            concepts: (0..g.n_concepts()).collect(),
        }
    }
}

/// Position of every target within a sorted id list.
pub fn positions(sorted: &[usize], targets: &[usize]) -> Vec<usize> {
    targets
        .iter()
        .map(|t| sorted.binary_search(t).expect("target present"))
        .collect()
}

/// Node subset at one depth of a chain, with a dense reverse lookup.
#[derive(Debug, Clone)]
struct LevelSet {
    ids: Vec<usize>,
    pos: Vec<u32>,
}

impl LevelSet {
    fn new(ids: Vec<usize>, n: usize) -> Self {
        let mut pos = vec![u32::MAX; n];
        for (i, &id) in ids.iter().enumerate() {
            pos[id] = i as u32;
        }
        Self { ids, pos }
    }

    fn is_full(&self) -> bool {
        self.ids.len() == self.pos.len()
    }

    /// `targets ∪ neighbors(frontier)` over an adjacency indexed by the
    /// frontier's class.
    fn expand(targets: &[usize], frontier: &LevelSet, adj: &Csr, n: usize) -> Self {
        let mut mark = vec![false; n];
        for &t in targets {
            mark[t] = true;
        }
        for &f in &frontier.ids {
            for &nb in adj.row(f) {
                mark[nb] = true;
            }
        }
        let ids = mark.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        Self::new(ids, n)
    }
}

/// Per-depth aggregates of one side of a chain.
#[derive(Debug, Clone)]
pub struct ChainLevels {
    /// `ids[k]` are the nodes materialized at depth `k`.
    pub ids: Vec<Vec<usize>>,
    /// `values[k]` has one row per entry of `ids[k]`.
    pub values: Vec<Var>,
}

/// Result of propagating one bipartite relation.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Accumulated view of the left-class targets.
    pub left_view: Var,
    /// Accumulated view of the right-class targets.
    pub right_view: Var,
    pub left_levels: ChainLevels,
    pub right_levels: ChainLevels,
}

fn gather_or_all(tape: &mut Tape, x: Var, set: &LevelSet) -> Result<Var> {
    if set.is_full() {
        Ok(x)
    } else {
        tape.row_gather(x, set.ids.clone())
    }
}

fn mean_groups(
    nodes: &LevelSet,
    adj: &Csr,
    source: &LevelSet,
    drop: f64,
    rng: &mut ChaCha8Rng,
) -> SparseRows {
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(nodes.ids.len());
    for &u in &nodes.ids {
        let mut g = Vec::with_capacity(adj.degree(u));
        for &nb in adj.row(u) {
            if drop > 0.0 && rng.gen::<f64>() < drop {
                continue;
            }
            g.push(source.pos[nb] as usize);
        }
        groups.push(g);
    }
    SparseRows::mean_of_groups(&groups)
}

fn accumulate_view(tape: &mut Tape, levels: &[Var], sets: &[LevelSet], targets: &[usize]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, (&x, set)) in levels.iter().zip(sets).enumerate() {
        let picked = if set.ids.as_slice() == targets {
            x
        } else {
            let idx: Vec<usize> = targets.iter().map(|&t| set.pos[t] as usize).collect();
            tape.row_gather(x, idx)?
        };
        let term = if k == 0 {
            picked
        } else {
            tape.scale(picked, accumulation_coefficient(k))?
        };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("k >= 0 gives at least one level"))
}

/// Alternating mean propagation along one relation with layer-wise
/// neighbor dropout, followed by descending accumulation.
#[allow(clippy::too_many_arguments)]
pub fn propagate_chain(
    tape: &mut Tape,
    adj: &BiAdjacency,
    left_base: Var,
    right_base: Var,
    left_targets: &[usize],
    right_targets: &[usize],
    cfg: &AggregationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ChainOutput> {
    let k = cfg.k;
    let (nl, nr) = (adj.forward.n_rows(), adj.backward.n_rows());
    let mut need_l = vec![LevelSet::new(left_targets.to_vec(), nl)];
    let mut need_r = vec![LevelSet::new(right_targets.to_vec(), nr)];
    for _ in 0..k {
        // Built from depth K down to 0, reversed below.
        let next_l = LevelSet::expand(left_targets, need_r.last().unwrap(), &adj.backward, nl);
        let next_r = LevelSet::expand(right_targets, need_l.last().unwrap(), &adj.forward, nr);
        need_l.push(next_l);
        need_r.push(next_r);
    }
    need_l.reverse();
    need_r.reverse();

    let mut xl = vec![gather_or_all(tape, left_base, &need_l[0])?];
    let mut xr = vec![gather_or_all(tape, right_base, &need_r[0])?];
    for m in 1..=k {
        let drop = if cfg.training { cfg.drop_rate(m - 1) } else { 0.0 };
        let gl = mean_groups(&need_l[m], &adj.forward, &need_r[m - 1], drop, rng);
        let gr = mean_groups(&need_r[m], &adj.backward, &need_l[m - 1], drop, rng);
        let next_l = tape.spmm(xr[m - 1], gl)?;
        let next_r = tape.spmm(xl[m - 1], gr)?;
        xl.push(next_l);
        xr.push(next_r);
    }

    let left_view = accumulate_view(tape, &xl, &need_l, left_targets)?;
    let right_view = accumulate_view(tape, &xr, &need_r, right_targets)?;
    Ok(ChainOutput {
        left_view,
        right_view,
        left_levels: ChainLevels {
            ids: need_l.into_iter().map(|s| s.ids).collect(),
            values: xl,
        },
        right_levels: ChainLevels {
            ids: need_r.into_iter().map(|s| s.ids).collect(),
            values: xr,
        },
    })
}

/// The ten per-relation views, rows aligned with the target sets.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub targets: TargetSets,
    /// R→S, W→S, C→S.
    pub student: [Var; 3],
    /// S→R, C→R.
    pub right: [Var; 2],
    /// S→W, C→W.
    pub wrong: [Var; 2],
    /// R→C, W→C, S→C.
    pub concept: [Var; 3],
}

/// Raw chain outputs, kept for inference-time reuse.
#[derive(Debug, Clone)]
pub struct Chains {
    pub right: ChainOutput,
    pub wrong: ChainOutput,
    pub desired: ChainOutput,
    pub related_right: ChainOutput,
    pub related_wrong: ChainOutput,
}

pub fn aggregate(
    tape: &mut Tape,
    store: &ParameterStore,
    params: &CagtParams,
    g: &StudentCenteredGraph,
    targets: &TargetSets,
    cfg: &AggregationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ViewBundle, Chains)> {
    cfg.validate()?;
    let hs = tape.param(store, params.h_s)?;
    let hr = tape.param(store, params.h_r)?;
    let hw = tape.param(store, params.h_w)?;
    let hc = tape.param(store, params.h_c)?;
    let (ts, te, tc) = (&targets.students, &targets.exercises, &targets.concepts);

    let right = propagate_chain(tape, &g.right, hs, hr, ts, te, cfg, rng)?;
    let wrong = propagate_chain(tape, &g.wrong, hs, hw, ts, te, cfg, rng)?;
    let desired = propagate_chain(tape, &g.desired, hs, hc, ts, tc, cfg, rng)?;
    let related_right = propagate_chain(tape, &g.related, hr, hc, te, tc, cfg, rng)?;
    let related_wrong = propagate_chain(tape, &g.related, hw, hc, te, tc, cfg, rng)?;

    let views = ViewBundle {
        targets: targets.clone(),
        student: [right.left_view, wrong.left_view, desired.left_view],
        right: [right.right_view, related_right.left_view],
        wrong: [wrong.right_view, related_wrong.left_view],
        concept: [related_right.right_view, related_wrong.right_view, desired.right_view],
    };
    Ok((
        views,
        Chains {
            right,
            wrong,
            desired,
            related_right,
            related_wrong,
        },
    ))
}

/// Attention fusion of several same-shaped views. Returns the fused
/// representation and the n×k normalized weights.
pub fn fuse_views(tape: &mut Tape, store: &ParameterStore, gen: &GenParams, views: &[Var]) -> Result<(Var, Var)> {
    let n = tape.value(views[0]).rows();
    let w = tape.param(store, gen.weight)?;
    let b = tape.param(store, gen.bias)?;
    let a = tape.param(store, gen.attn)?;
    let stacked = tape.concat_rows(views)?;
    let proj = tape.matmul(stacked, w)?;
    let proj = tape.add_row(proj, b)?;
    let act = tape.tanh(proj)?;
    let scores = tape.matmul(act, a)?;
    let per_view: Vec<Var> = (0..views.len())
        .map(|i| tape.row_gather(scores, (i * n..(i + 1) * n).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let raw = tape.concat_cols(&per_view)?;
    let weights = tape.softmax_rows(raw)?;
    let mut fused = tape.scale_rows_by_col(views[0], weights, 0)?;
    for (i, &v) in views.iter().enumerate().skip(1) {
        let term = tape.scale_rows_by_col(v, weights, i)?;
        fused = tape.add(fused, term)?;
    }
    Ok((fused, weights))
}

/// Width-d latents per class after fusion.
#[derive(Debug, Clone)]
pub struct Latents {
    pub targets: TargetSets,
    pub h_s: Var,
    pub h_r: Var,
    pub h_w: Var,
    pub h_c: Var,
    /// Normalized fusion weights per class (students, right, wrong, concepts).
    pub weights: [Var; 4],
}

pub fn generate(tape: &mut Tape, store: &ParameterStore, params: &CagtParams, views: &ViewBundle) -> Result<Latents> {
    let (h_s, ws) = fuse_views(tape, store, &params.gen_student, &views.student)?;
    let (h_r, wr) = fuse_views(tape, store, &params.gen_right, &views.right)?;
    let (h_w, ww) = fuse_views(tape, store, &params.gen_wrong, &views.wrong)?;
    let (h_c, wc) = fuse_views(tape, store, &params.gen_concept, &views.concept)?;
    Ok(Latents {
        targets: views.targets.clone(),
        h_s,
        h_r,
        h_w,
        h_c,
        weights: [ws, wr, ww, wc],
    })
}

/// Width-Z representations.
#[derive(Debug, Clone, Copy)]
pub struct Transformed {
    pub h_s: Var,
    pub h_e: Var,
    pub h_c: Var,
}

/// Exercise width-d latent: Hadamard product of its two pattern latents.
pub fn exercise_latent(tape: &mut Tape, h_r: Var, h_w: Var) -> Result<Var> {
    tape.hadamard(h_r, h_w)
}

pub fn transform(
    tape: &mut Tape,
    store: &ParameterStore,
    params: &CagtParams,
    h_s: Var,
    h_r: Var,
    h_w: Var,
    h_c: Var,
) -> Result<Transformed> {
    let h_s = params.t_student.apply(tape, store, h_s)?;
    let e = exercise_latent(tape, h_r, h_w)?;
    let h_e = params.t_exercise.apply(tape, store, e)?;
    let h_c = params.t_concept.apply(tape, store, h_c)?;
    Ok(Transformed { h_s, h_e, h_c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Dataset, IdMap, QMatrix, ResponseLog};
    use crate::graph::{build_involvement, build_scg};
    use rand::SeedableRng;

    fn graph(logs: &[(usize, usize, u8)], q: Vec<Vec<usize>>, n_s: usize) -> StudentCenteredGraph {
        let n_c = q.iter().flatten().max().unwrap() + 1;
        let n_e = q.len();
        let ds = Dataset::new(
            logs.iter().map(|&(s, e, r)| ResponseLog::new(s, e, r)).collect(),
            QMatrix::from_rows(n_c, q).unwrap(),
            IdMap::identity(n_s),
            IdMap::identity(n_e),
            IdMap::identity(n_c),
        )
        .unwrap();
        let r = ds.rating_matrix();
        build_scg(&r, &ds.q, &build_involvement(&r, &ds.q).unwrap()).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn dropout_schedule_and_coefficients() {
        let cfg = AggregationConfig::default();
        assert_eq!(cfg.drop_rate(0), 0.1);
        assert_eq!(cfg.drop_rate(1), 0.1 + 0.2);
        assert!((cfg.drop_rate(1) - 0.3).abs() < 1e-15);
        assert!((cfg.drop_rate(2) - 0.5).abs() < 1e-15);
        let huge = AggregationConfig { alpha: 2.0, ..cfg };
        assert!(huge.drop_rate(0) < 1.0);
        let coefs: Vec<f64> = (0..=3).map(accumulation_coefficient).collect();
        assert_eq!(coefs, vec![1.0, 0.5, 1.0 / 3.0, 0.25]);
    }

    #[test]
    fn accumulation_of_depth_vectors() {
        // A path s0 - e0 with K=2: student view = v0 + v1/2 + v2/3 where v1 is
        // e0's base and v2 is the mean over e0's students' bases.
        let g = graph(&[(0, 0, 1)], vec![vec![0]], 1);
        let mut store = ParameterStore::new();
        let hs = store.add("s", Mat::from_rows(&[vec![1.0, 2.0]]));
        let hr = store.add("r", Mat::from_rows(&[vec![10.0, 20.0]]));
        let mut t = Tape::new();
        let (s, r) = (t.param(&store, hs).unwrap(), t.param(&store, hr).unwrap());
        let cfg = AggregationConfig { k: 2, ..Default::default() };
        let out = propagate_chain(&mut t, &g.right, s, r, &[0], &[], &cfg, &mut rng()).unwrap();
        let want = [1.0 + 10.0 / 2.0 + 1.0 / 3.0, 2.0 + 20.0 / 2.0 + 2.0 / 3.0];
        for (a, b) in t.value(out.left_view).row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_student_view_k1() {
        // One student right on two exercises.
        let g = graph(&[(0, 0, 1), (0, 1, 1)], vec![vec![0], vec![0]], 1);
        let mut store = ParameterStore::new();
        let hs = store.add("s", Mat::from_rows(&[vec![0.5, -1.0]]));
        let hr = store.add("r", Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]));
        let mut t = Tape::new();
        let (s, r) = (t.param(&store, hs).unwrap(), t.param(&store, hr).unwrap());
        let cfg = AggregationConfig { k: 1, ..Default::default() };
        let out = propagate_chain(&mut t, &g.right, s, r, &[0], &[0, 1], &cfg, &mut rng()).unwrap();
        assert_eq!(t.value(out.left_view).row(0), &[0.5 + 0.5 * 2.0, -1.0 + 0.5 * 4.0]);
        // exercise 1's view: own base + ½ · the single student's base.
        assert_eq!(t.value(out.right_view).row(1), &[3.0 + 0.25, 6.0 - 0.5]);
    }

    #[test]
    fn empty_neighborhood_contributes_zero() {
        let g = graph(&[(0, 0, 1)], vec![vec![0], vec![0]], 2);
        let mut store = ParameterStore::new();
        let hs = store.add("s", Mat::from_rows(&[vec![1.0], vec![7.0]]));
        let hw = store.add("w", Mat::from_rows(&[vec![5.0], vec![5.0]]));
        let mut t = Tape::new();
        let (s, w) = (t.param(&store, hs).unwrap(), t.param(&store, hw).unwrap());
        let cfg = AggregationConfig::default();
        let out = propagate_chain(&mut t, &g.wrong, s, w, &[0, 1], &[], &cfg, &mut rng()).unwrap();
        assert_eq!(t.value(out.left_view).as_slice(), &[1.0, 7.0]);
    }

    fn random_setup(seed: u64) -> (StudentCenteredGraph, ParameterStore, CagtParams) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut logs = Vec::new();
        for s in 0..6 {
            for e in 0..5 {
                if r.gen_bool(0.6) {
                    logs.push((s, e, r.gen_bool(0.5) as u8));
                }
            }
        }
        let q = vec![vec![0], vec![1], vec![0, 2], vec![2], vec![1, 3]];
        let g = graph(&logs, q, 6);
        let mut store = ParameterStore::new();
        let params = CagtParams::init(&mut store, 6, 5, 4, 3, &mut r);
        (g, store, params)
    }

    #[test]
    fn batch_subgraph_matches_full_graph() {
        let (g, store, params) = random_setup(4);
        let cfg = AggregationConfig::default();
        let full_targets = TargetSets::all(&g);
        let mut t = Tape::new();
        let (full, _) = aggregate(&mut t, &store, &params, &g, &full_targets, &cfg, &mut rng()).unwrap();
        let sub_targets = TargetSets::new(vec![1, 4], vec![2], vec![3]);
        let (sub, _) = aggregate(&mut t, &store, &params, &g, &sub_targets, &cfg, &mut rng()).unwrap();
        let check = |full_v: Var, sub_v: Var, all: &[usize], picked: &[usize]| {
            for (i, &node) in picked.iter().enumerate() {
                let fr = t.value(full_v).row(all.binary_search(&node).unwrap());
                let sr = t.value(sub_v).row(i);
                for (a, b) in fr.iter().zip(sr) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        };
        for c in 0..3 {
            check(full.student[c], sub.student[c], &full_targets.students, &sub_targets.students);
            check(full.concept[c], sub.concept[c], &full_targets.concepts, &sub_targets.concepts);
        }
        for c in 0..2 {
            check(full.right[c], sub.right[c], &full_targets.exercises, &sub_targets.exercises);
            check(full.wrong[c], sub.wrong[c], &full_targets.exercises, &sub_targets.exercises);
        }
    }

    #[test]
    fn aggregation_is_linear_in_embeddings() {
        let (g, mut store, params) = random_setup(9);
        let cfg = AggregationConfig::default();
        let targets = TargetSets::all(&g);
        let mut t = Tape::new();
        let (a, _) = aggregate(&mut t, &store, &params, &g, &targets, &cfg, &mut rng()).unwrap();
        let before: Vec<Mat> = a.student.iter().map(|&v| t.value(v).clone()).collect();
        for id in params.embedding_tables() {
            store.value_mut(id).scale_assign(2.5);
        }
        let mut t2 = Tape::new();
        let (b, _) = aggregate(&mut t2, &store, &params, &g, &targets, &cfg, &mut rng()).unwrap();
        for (m, &v) in before.iter().zip(&b.student) {
            for (x, y) in m.as_slice().iter().zip(t2.value(v).as_slice()) {
                assert!((2.5 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let (g, store, params) = random_setup(2);
        let targets = TargetSets::all(&g);
        let eval = AggregationConfig::default();
        let train = AggregationConfig { training: true, alpha: 0.5, ..eval };
        let run = |cfg: &AggregationConfig, seed: u64| {
            let mut t = Tape::new();
            let (v, _) = aggregate(&mut t, &store, &params, &g, &targets, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            t.value(v.student[0]).clone()
        };
        assert_eq!(run(&eval, 1), run(&eval, 2));
        assert_ne!(run(&train, 1), run(&train, 2));
        assert_eq!(run(&train, 3), run(&train, 3));
    }

    #[test]
    fn softmax_weights() {
        let mut store = ParameterStore::new();
        let d = 2;
        let gen = GenParams {
            attn: store.add("a", Mat::zeros(d, 1)),
            weight: store.add("w", Mat::zeros(d, d)),
            bias: store.add("b", Mat::zeros(1, d)),
        };
        let mut t = Tape::new();
        let v: Vec<Var> = (0..3)
            .map(|i| t.constant(Mat::filled(4, d, i as f64)).unwrap())
            .collect();
        let (fused, w) = fuse_views(&mut t, &store, &gen, &v).unwrap();
        assert!(t.value(w).as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!((t.value(fused).get(0, 0) - 1.0).abs() < 1e-15);
        let (_, w2) = fuse_views(&mut t, &store, &gen, &v[..2]).unwrap();
        assert!(t.value(w2).as_slice().iter().all(|&x| x == 0.5));

        let mut row = [2f64.ln(), 0.0, 0.0];
        crate::diffcore::softmax_in_place(&mut row);
        for (a, b) in row.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn generation_weights_positive_and_normalized() {
        let (g, store, params) = random_setup(11);
        let mut t = Tape::new();
        let (views, _) = aggregate(&mut t, &store, &params, &g, &TargetSets::all(&g), &AggregationConfig::default(), &mut rng()).unwrap();
        let lat = generate(&mut t, &store, &params, &views).unwrap();
        for w in lat.weights {
            let m = t.value(w);
            for r in 0..m.rows() {
                assert!(m.row(r).iter().all(|&x| x > 0.0));
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transform_degenerate_cases() {
        let mut store = ParameterStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let params = CagtParams::init(&mut store, 2, 2, 3, 4, &mut r);
        for aff in [params.t_student, params.t_exercise, params.t_concept] {
            store.value_mut(aff.weight).fill(0.0);
            store.value_mut(aff.bias).as_mut_slice().copy_from_slice(&[0.1, 0.2, 0.3]);
        }
        let mut t = Tape::new();
        let x = t.constant(xavier_uniform(2, 4, &mut r)).unwrap();
        let zero = t.constant(Mat::zeros(2, 4)).unwrap();
        let out = transform(&mut t, &store, &params, x, zero, x, x).unwrap();
        for v in [out.h_s, out.h_e, out.h_c] {
            assert_eq!(t.value(v).row(1), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn transform_matches_hand_evaluation() {
        let mut store = ParameterStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let params = CagtParams::init(&mut store, 1, 1, 3, 4, &mut r);
        store.value_mut(params.t_exercise.bias).as_mut_slice().copy_from_slice(&[0.5, -0.5, 1.0]);
        let hr = xavier_uniform(1, 4, &mut r);
        let hw = xavier_uniform(1, 4, &mut r);
        let mut t = Tape::new();
        let (a, b) = (t.constant(hr.clone()).unwrap(), t.constant(hw.clone()).unwrap());
        let out = transform(&mut t, &store, &params, a, a, b, a).unwrap();
        let w = store.value(params.t_exercise.weight);
        let bias = store.value(params.t_exercise.bias);
        for z in 0..3 {
            let mut want = bias.get(0, z);
            for i in 0..4 {
                want += hr.get(0, i) * hw.get(0, i) * w.get(i, z);
            }
            assert!((t.value(out.h_e).get(0, z) - want).abs() < 1e-14);
        }
    }
}
