//! Inductive inference on a trained toy model.

use std::sync::OnceLock;

use icdm::inductive::{InferenceContext, NewStudentBatch};
use icdm::synth::{generate, SynthConfig, SynthData};
use icdm::train::{train, TrainConfig, TrainOutcome};

struct Toy {
    data: SynthData,
    out: TrainOutcome,
}

fn toy(kind: &'static str) -> &'static Toy {
    static GLIF: OnceLock<Toy> = OnceLock::new();
    static MLP: OnceLock<Toy> = OnceLock::new();
    let cell = if kind == "glif" { &GLIF } else { &MLP };
    cell.get_or_init(|| {
        let data = generate(&SynthConfig {
            n_students: 150,
            n_exercises: 30,
            n_concepts: 4,
            logs_per_student: 20,
            seed: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            if_kind: kind.into(),
            epochs: 40,
            batch_size: 32,
            lr: 5e-3,
            d: 16,
            hidden: vec![32, 16],
            seed: 12,
            ..TrainConfig::default()
        };
        let out = train(&data.dataset, None, &cfg, &mut |_| {}).unwrap();
        Toy { data, out }
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn duplicate_matches_trained(kind: &'static str) {
    let t = toy(kind);
    let ctx = InferenceContext::new(&t.out.model, &t.out.graph).unwrap();
    let by = t.out.graph_data.logs_by_student();
    let students: Vec<usize> = (0..20).collect();
    let trained = t.out.model.mastery(&t.out.graph, &students).unwrap();
    let batch = NewStudentBatch::new(
        students
            .iter()
            .map(|&s| by[s].iter().map(|l| (l.exercise, l.score)).collect())
            .collect(),
    );
    let inferred = ctx.infer_mastery(&batch).unwrap();
    let worst = students
        .iter()
        .map(|&s| cosine(trained.row(s), inferred.row(s)))
        .fold(f64::INFINITY, f64::min);
    assert!(worst >= 0.99, "{kind}: lowest cosine {worst}");
}

#[test]
#[ignore = "trained students keep their own base embedding while new students start from zero; lowest measured cosine is 0.89"]
fn duplicate_of_trained_student_glif() {
    duplicate_matches_trained("glif");
}

#[test]
#[ignore = "trained students keep their own base embedding while new students start from zero; lowest measured cosine is 0.74"]
fn duplicate_of_trained_student_mono_mlp() {
    duplicate_matches_trained("mono_mlp");
}

fn flip_does_not_raise_touched_mastery(kind: &'static str) {
    let t = toy(kind);
    let ctx = InferenceContext::new(&t.out.model, &t.out.graph).unwrap();
    let q = &t.data.dataset.q;
    let by = t.out.graph_data.logs_by_student();
    let mut checked = 0;
    let mut violations = Vec::new();
    for ls in by.iter().take(40) {
        let logs: Vec<(usize, u8)> = ls.iter().map(|l| (l.exercise, l.score)).collect();
        for (i, &(e, r)) in logs.iter().enumerate() {
            if r == 0 {
                continue;
            }
            let mut flipped = logs.clone();
            flipped[i].1 = 0;
            let mas = ctx.infer_mastery(&NewStudentBatch::new(vec![logs.clone(), flipped])).unwrap();
            for &k in q.concepts(e) {
                checked += 1;
                if mas.get(1, k) > mas.get(0, k) {
                    violations.push((e, k, mas.get(0, k), mas.get(1, k)));
                }
            }
        }
    }
    assert!(checked > 100);
    assert!(violations.is_empty(), "{kind}: {} of {checked} rose: {:?}", violations.len(), &violations[..violations.len().min(5)]);
}

#[test]
#[ignore = "not implied by the architecture: about 6% of touched entries rise on the toy model"]
fn flipping_right_to_wrong_glif() {
    flip_does_not_raise_touched_mastery("glif");
}

#[test]
#[ignore = "not implied by the architecture: about 10% of touched entries rise on the toy model"]
fn flipping_right_to_wrong_mono_mlp() {
    flip_does_not_raise_touched_mastery("mono_mlp");
}

/// With student base embeddings zeroed the only difference between a
/// trained student and a new one disappears, so inference from the same
/// logs must reproduce the trained mastery.
fn zero_self_term_reproduces_trained(kind: &'static str) {
    let t = toy(kind);
    let mut model = t.out.model.clone();
    let id = model.store.find("emb.student").unwrap();
    model.store.value_mut(id).fill(0.0);
    let students: Vec<usize> = (0..model.n_students).collect();
    let trained = model.mastery(&t.out.graph, &students).unwrap();
    let by = t.out.graph_data.logs_by_student();
    let batch = NewStudentBatch::new(by.iter().map(|ls| ls.iter().map(|l| (l.exercise, l.score)).collect()).collect());
    let inferred = InferenceContext::new(&model, &t.out.graph).unwrap().infer_mastery(&batch).unwrap();
    for (a, b) in trained.as_slice().iter().zip(inferred.as_slice()) {
        assert!((a - b).abs() < 1e-12, "{kind}: {a} vs {b}");
    }
}

#[test]
fn zero_self_term_reproduces_trained_glif() {
    zero_self_term_reproduces_trained("glif");
}

#[test]
fn zero_self_term_reproduces_trained_mono_mlp() {
    zero_self_term_reproduces_trained("mono_mlp");
}

#[test]
fn inference_leaves_snapshot_untouched() {
    let t = toy("glif");
    let snap = icdm::snapshot::ModelSnapshot::new(t.out.model.clone(), t.out.graph_data.clone()).unwrap();
    let before = snap.to_bytes().unwrap();
    let ctx = InferenceContext::new(&snap.model, &t.out.graph).unwrap();
    for n in 1..5 {
        let batch = NewStudentBatch::new((0..n).map(|i| vec![(i, 1), (i + 5, 0)]).collect());
        ctx.infer_mastery(&batch).unwrap();
        ctx.predict_new(&batch, &[(0, 29)]).unwrap();
    }
    assert_eq!(snap.to_bytes().unwrap(), before);
}
