//! Student-centered graph (SCG) and the student–exercise bipartite graph.
//!
//! Every relation is stored as a pair of CSR index arrays, one per
//! direction, so traversal cost is linear in the number of stored edges.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::dataio::{QMatrix, RatingMatrix};
use crate::error::{IcdmError, Result};

/// Compressed sparse rows of neighbor indices (pattern only).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Csr {
    /// Neighbor lists come out sorted ascending with duplicates removed.
    pub fn from_pairs(n_rows: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut lists = vec![Vec::new(); n_rows];
        for (r, c) in pairs {
            lists[r].push(c);
        }
        Self::from_lists(lists)
    }

    pub fn from_lists(mut lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn nnz(&self) -> usize {
        self.targets.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_rows()).flat_map(move |r| self.row(r).iter().map(move |&c| (r, c)))
    }
}

/// One bipartite relation between a "left" and a "right" node class,
/// stored in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiAdjacency {
    pub forward: Csr,
    pub backward: Csr,
}

impl BiAdjacency {
    pub fn from_pairs(n_left: usize, n_right: usize, pairs: &[(usize, usize)]) -> Self {
        Self {
            forward: Csr::from_pairs(n_left, pairs.iter().copied()),
            backward: Csr::from_pairs(n_right, pairs.iter().map(|&(l, r)| (r, l))),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.forward.nnz()
    }
}

/// Binary student × concept matrix of concepts touched by practiced exercises.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvolvementMatrix {
    n_concepts: usize,
    rows: Vec<Vec<usize>>,
}

impl InvolvementMatrix {
    pub fn n_students(&self) -> usize {
        self.rows.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    /// Sorted concepts involved for `student`.
    pub fn row(&self, student: usize) -> &[usize] {
        &self.rows[student]
    }

    pub fn get(&self, student: usize, concept: usize) -> bool {
        self.rows[student].binary_search(&concept).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Concepts of all exercises in `exercises`, deduplicated and sorted.
pub fn involved_concepts(q: &QMatrix, exercises: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out: Vec<usize> = exercises
        .into_iter()
        .flat_map(|j| q.concepts(j).iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub fn build_involvement(r: &RatingMatrix, q: &QMatrix) -> Result<InvolvementMatrix> {
    if r.n_exercises() != q.n_exercises() {
        return Err(IcdmError::Validation(format!(
            "rating matrix has {} exercise columns, Q-matrix has {} rows",
            r.n_exercises(),
            q.n_exercises()
        )));
    }
    let rows = (0..r.n_students())
        .map(|s| involved_concepts(q, r.row(s).iter().map(|&(e, _)| e)))
        .collect();
    Ok(InvolvementMatrix {
        n_concepts: q.n_concepts(),
        rows,
    })
}

/// Node classes of the student-centered graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeClass {
    Student,
    ExerciseRight,
    ExerciseWrong,
    Concept,
}

/// Edge relations of the student-centered graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    /// Student ↔ right-pattern exercise.
    Right,
    /// Student ↔ wrong-pattern exercise.
    Wrong,
    /// Exercise (either pattern) ↔ concept.
    Related,
    /// Student ↔ concept.
    Desired,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Relation::Right => "right",
            Relation::Wrong => "wrong",
            Relation::Related => "related",
            Relation::Desired => "desired",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub class: NodeClass,
    pub index: usize,
}

impl NodeRef {
    pub fn new(class: NodeClass, index: usize) -> Self {
        Self { class, index }
    }
}

/// Four node classes (S, E_R, E_W, C) and five bipartite relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentCenteredGraph {
    n_students: usize,
    n_exercises: usize,
    n_concepts: usize,
    /// Student → right-pattern exercise.
    pub right: BiAdjacency,
    /// Student → wrong-pattern exercise.
    pub wrong: BiAdjacency,
    /// Student → concept.
    pub desired: BiAdjacency,
    /// Exercise → concept; shared by the E_R–C and E_W–C relations, which
    /// duplicate the Q-matrix.
    pub related: BiAdjacency,
}

pub fn build_scg(r: &RatingMatrix, q: &QMatrix, involvement: &InvolvementMatrix) -> Result<StudentCenteredGraph> {
    if r.n_exercises() != q.n_exercises() {
        return Err(IcdmError::Validation(format!(
            "rating matrix has {} exercise columns, Q-matrix has {} rows",
            r.n_exercises(),
            q.n_exercises()
        )));
    }
    if involvement.n_students() != r.n_students() || involvement.n_concepts() != q.n_concepts() {
        return Err(IcdmError::Validation(
            "involvement matrix shape disagrees with rating matrix / Q-matrix".into(),
        ));
    }
    let (n_s, n_e, n_c) = (r.n_students(), r.n_exercises(), q.n_concepts());
    let mut right = Vec::new();
    let mut wrong = Vec::new();
    for s in 0..n_s {
        for &(e, v) in r.row(s) {
            if v > 0 {
                right.push((s, e));
            } else {
                wrong.push((s, e));
            }
        }
    }
    let desired: Vec<(usize, usize)> = (0..n_s)
        .flat_map(|s| involvement.row(s).iter().map(move |&z| (s, z)))
        .collect();
    let related: Vec<(usize, usize)> = (0..n_e)
        .flat_map(|e| q.concepts(e).iter().map(move |&z| (e, z)))
        .collect();
    Ok(StudentCenteredGraph {
        n_students: n_s,
        n_exercises: n_e,
        n_concepts: n_c,
        right: BiAdjacency::from_pairs(n_s, n_e, &right),
        wrong: BiAdjacency::from_pairs(n_s, n_e, &wrong),
        desired: BiAdjacency::from_pairs(n_s, n_c, &desired),
        related: BiAdjacency::from_pairs(n_e, n_c, &related),
    })
}

impl StudentCenteredGraph {
    pub fn n_students(&self) -> usize {
        self.n_students
    }

    pub fn n_exercises(&self) -> usize {
        self.n_exercises
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn class_size(&self, class: NodeClass) -> usize {
        match class {
            NodeClass::Student => self.n_students,
            NodeClass::ExerciseRight | NodeClass::ExerciseWrong => self.n_exercises,
            NodeClass::Concept => self.n_concepts,
        }
    }

    /// Neighbor indices of `node` along `relation`, sorted ascending.
    ///
    /// For a concept, `Related` yields exercise indices; these are the same
    /// for the right- and wrong-pattern copies of each exercise.
    pub fn neighbors(&self, node: NodeRef, relation: Relation) -> Result<&[usize]> {
        use NodeClass::*;
        use Relation::*;
        if node.index >= self.class_size(node.class) {
            return Err(IcdmError::Usage(format!(
                "{:?} {} does not exist",
                node.class, node.index
            )));
        }
        let i = node.index;
        let list = match (node.class, relation) {
            (Student, Right) => self.right.forward.row(i),
            (Student, Wrong) => self.wrong.forward.row(i),
            (Student, Desired) => self.desired.forward.row(i),
            (ExerciseRight, Right) => self.right.backward.row(i),
            (ExerciseWrong, Wrong) => self.wrong.backward.row(i),
            (ExerciseRight | ExerciseWrong, Related) => self.related.forward.row(i),
            (Concept, Related) => self.related.backward.row(i),
            (Concept, Desired) => self.desired.backward.row(i),
            (class, rel) => {
                return Err(IcdmError::Usage(format!(
                    "relation `{rel}` is not defined for {class:?} nodes"
                )))
            }
        };
        Ok(list)
    }

    pub fn right_edges(&self) -> usize {
        self.right.n_edges()
    }

    pub fn wrong_edges(&self) -> usize {
        self.wrong.n_edges()
    }

    /// Edges between E_R and C (equal to the E_W–C count).
    pub fn related_edges_per_pattern(&self) -> usize {
        self.related.n_edges()
    }

    pub fn desired_edges(&self) -> usize {
        self.desired.n_edges()
    }

    /// Writes one `source target` edge list per relation into `dir`.
    pub fn dump_edge_lists(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| IcdmError::io(dir, e))?;
        let files: [(&str, &BiAdjacency); 5] = [
            ("right.txt", &self.right),
            ("wrong.txt", &self.wrong),
            ("related_right.txt", &self.related),
            ("related_wrong.txt", &self.related),
            ("desired.txt", &self.desired),
        ];
        let mut written = Vec::new();
        for (name, adj) in files {
            let path = dir.join(name);
            let mut body = Vec::new();
            for (a, b) in adj.forward.iter() {
                writeln!(body, "{a} {b}").expect("in-memory write");
            }
            crate::io::write_atomic(&path, &body)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Student–exercise graph over every observed interaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    pub students: Csr,
    pub exercises: Csr,
}

impl BipartiteGraph {
    pub fn from_rating(r: &RatingMatrix) -> Self {
        let pairs: Vec<(usize, usize)> = (0..r.n_students())
            .flat_map(|s| r.row(s).iter().map(move |&(e, _)| (s, e)))
            .collect();
        let adj = BiAdjacency::from_pairs(r.n_students(), r.n_exercises(), &pairs);
        Self {
            students: adj.forward,
            exercises: adj.backward,
        }
    }

    pub fn student_degree(&self, s: usize) -> usize {
        self.students.degree(s)
    }

    pub fn exercise_degree(&self, e: usize) -> usize {
        self.exercises.degree(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{IdMap, QMatrix, ResponseLog};
    use crate::dataio::Dataset;
    use std::collections::BTreeSet;

    fn ds(logs: &[(usize, usize, u8)], q: Vec<Vec<usize>>, n_s: usize) -> Dataset {
        let n_c = q.iter().flatten().max().map_or(0, |m| m + 1);
        let n_e = q.len();
        Dataset::new(
            logs.iter().map(|&(s, e, r)| ResponseLog::new(s, e, r)).collect(),
            QMatrix::from_rows(n_c, q).unwrap(),
            IdMap::identity(n_s),
            IdMap::identity(n_e),
            IdMap::identity(n_c),
        )
        .unwrap()
    }

    #[test]
    fn involvement_rules() {
        // s1 practices e2 which relates to c3.
        let d = ds(&[(1, 2, 0)], vec![vec![0], vec![1], vec![3], vec![2]], 2);
        let i = build_involvement(&d.rating_matrix(), &d.q).unwrap();
        assert!(i.get(1, 3));
        assert_eq!(i.nnz(), 1);
        assert!(i.row(0).is_empty());

        let d = ds(&[(0, 0, 1), (0, 1, 0)], vec![vec![0], vec![0]], 1);
        let i = build_involvement(&d.rating_matrix(), &d.q).unwrap();
        assert_eq!(i.row(0), &[0]);
        // idempotent
        assert_eq!(i, build_involvement(&d.rating_matrix(), &d.q).unwrap());
    }

    #[test]
    fn involvement_shape_mismatch() {
        let d = ds(&[(0, 0, 1)], vec![vec![0]], 1);
        let q = QMatrix::from_rows(1, vec![vec![0], vec![0]]).unwrap();
        assert!(matches!(build_involvement(&d.rating_matrix(), &q), Err(IcdmError::Validation(_))));
    }

    #[test]
    fn scg_edge_counts() {
        let q = vec![vec![0, 1], vec![1], vec![0, 2]];
        let d = ds(&[(0, 0, 1), (0, 1, 0)], q, 1);
        let r = d.rating_matrix();
        let i = build_involvement(&r, &d.q).unwrap();
        let g = build_scg(&r, &d.q, &i).unwrap();
        assert_eq!(g.right_edges(), 1);
        assert_eq!(g.wrong_edges(), 1);
        assert_eq!(g.related_edges_per_pattern(), 5);
        assert_eq!(g.desired_edges(), i.nnz());
        // unanswered exercise 2 still has concept edges
        assert_eq!(g.neighbors(NodeRef::new(NodeClass::ExerciseWrong, 2), Relation::Related).unwrap(), &[0, 2]);
        assert!(g.neighbors(NodeRef::new(NodeClass::ExerciseRight, 2), Relation::Right).unwrap().is_empty());
    }

    #[test]
    fn neighbor_queries() {
        let q = vec![vec![0], vec![1], vec![0, 1]];
        let d = ds(&[(0, 0, 1), (0, 2, 1), (1, 1, 0)], q, 2);
        let r = d.rating_matrix();
        let g = build_scg(&r, &d.q, &build_involvement(&r, &d.q).unwrap()).unwrap();
        let s0 = NodeRef::new(NodeClass::Student, 0);
        assert!(g.neighbors(s0, Relation::Wrong).unwrap().is_empty());
        assert_eq!(g.neighbors(s0, Relation::Right).unwrap(), &[0, 2]);
        assert_eq!(g.neighbors(NodeRef::new(NodeClass::ExerciseRight, 2), Relation::Related).unwrap(), &[0, 1]);
        assert!(matches!(g.neighbors(s0, Relation::Related), Err(IcdmError::Usage(_))));
        assert!(matches!(
            g.neighbors(NodeRef::new(NodeClass::ExerciseRight, 0), Relation::Wrong),
            Err(IcdmError::Usage(_))
        ));
        assert!(matches!(g.neighbors(NodeRef::new(NodeClass::Student, 9), Relation::Right), Err(IcdmError::Usage(_))));
    }

    #[test]
    fn two_hop_right_neighborhood() {
        // Alice(0) right on e0,e1; Bob(1) right on e1,e2; Carol(2) right on e2, wrong on e0.
        let q = vec![vec![0]; 3];
        let d = ds(&[(0, 0, 1), (0, 1, 1), (1, 1, 1), (1, 2, 1), (2, 2, 1), (2, 0, 0)], q, 3);
        let r = d.rating_matrix();
        let g = build_scg(&r, &d.q, &build_involvement(&r, &d.q).unwrap()).unwrap();
        let mut hop2 = BTreeSet::new();
        for &e in g.neighbors(NodeRef::new(NodeClass::Student, 1), Relation::Right).unwrap() {
            for &s in g.neighbors(NodeRef::new(NodeClass::ExerciseRight, e), Relation::Right).unwrap() {
                hop2.insert(s);
            }
        }
        // Bob reaches Alice via e1, Carol via e2, and himself.
        assert_eq!(hop2.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn edges_are_symmetric_and_desired_matches_involvement() {
        let q = vec![vec![0], vec![1, 2], vec![2]];
        let d = ds(&[(0, 0, 1), (0, 1, 0), (1, 2, 1), (2, 1, 1), (2, 2, 0)], q, 3);
        let r = d.rating_matrix();
        let inv = build_involvement(&r, &d.q).unwrap();
        let g = build_scg(&r, &d.q, &inv).unwrap();
        assert_eq!(g.right_edges() + g.wrong_edges(), r.nnz());
        for adj in [&g.right, &g.wrong, &g.desired, &g.related] {
            for (a, b) in adj.forward.iter() {
                assert!(adj.backward.row(b).contains(&a));
            }
            assert_eq!(adj.forward.nnz(), adj.backward.nnz());
        }
        for s in 0..3 {
            for z in 0..3 {
                let has = g.neighbors(NodeRef::new(NodeClass::Student, s), Relation::Desired).unwrap().contains(&z);
                assert_eq!(has, inv.get(s, z));
            }
        }
        let g2 = build_scg(&r, &d.q, &inv).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn bipartite_degrees() {
        let q = vec![vec![0]; 2];
        let d = ds(&[(0, 0, 1), (0, 1, 0), (1, 1, 1)], q, 2);
        let b = BipartiteGraph::from_rating(&d.rating_matrix());
        assert_eq!(b.students.nnz(), 3);
        assert_eq!(b.exercises.nnz(), 3);
        assert_eq!(b.exercise_degree(1), 2);
        assert_eq!(b.student_degree(1), 1);
    }
}
