use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numcore::Tensor;

/// Joint connectivity of a skeleton: a tree over `V` joints.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    joint_count: usize,
    root: usize,
    edges: Vec<(usize, usize)>,
    parents: Vec<Option<usize>>,
    adjacency: Tensor,
}

/// Serialized form: `{"joint_count": V, "root": r, "edges": [[child, parent], ...]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkeletonGraphSpec {
    pub joint_count: usize,
    pub root: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SkeletonGraph {
    /// Builds the graph from `(child, parent)` edges, validating that they form
    /// a spanning tree rooted at `root`.
    pub fn new(joint_count: usize, edges: Vec<(usize, usize)>, root: usize) -> Result<Self, DataError> {
        if joint_count < 2 {
            return Err(DataError::Graph(format!("need at least 2 joints, got {joint_count}")));
        }
        if root >= joint_count {
            return Err(DataError::Graph(format!("root {root} out of range")));
        }
        if edges.len() != joint_count - 1 {
            return Err(DataError::Graph(format!(
                "a tree over {joint_count} joints has {} edges, got {}",
                joint_count - 1,
                edges.len()
            )));
        }
        let mut parents = vec![None; joint_count];
        for &(child, parent) in &edges {
            if child >= joint_count || parent >= joint_count || child == parent {
                return Err(DataError::Graph(format!("invalid edge ({child}, {parent})")));
            }
            if child == root {
                return Err(DataError::Graph(format!("root {root} cannot have a parent")));
            }
            if parents[child].replace(parent).is_some() {
                return Err(DataError::Graph(format!("joint {child} has two parents")));
            }
        }
        // Every joint must reach the root without revisiting a joint.
        for start in 0..joint_count {
            let mut j = start;
            let mut steps = 0;
            while let Some(p) = parents[j] {
                j = p;
                steps += 1;
                if steps > joint_count {
                    return Err(DataError::Graph("edges contain a cycle".into()));
                }
            }
            if j != root {
                return Err(DataError::Graph(format!("joint {start} is not connected to the root")));
            }
        }
        let adjacency = normalized_adjacency(joint_count, &edges);
        Ok(Self {
            joint_count,
            root,
            edges,
            parents,
            adjacency,
        })
    }

    /// Default tree: joint `j > 0` hangs off joint `(j - 1) / 2`.
    pub fn binary_tree(joint_count: usize) -> Result<Self, DataError> {
        let edges = (1..joint_count).map(|j| (j, (j - 1) / 2)).collect();
        Self::new(joint_count, edges, 0)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    /// `V x V` symmetric adjacency with self-loops.
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn spec(&self) -> SkeletonGraphSpec {
        SkeletonGraphSpec {
            joint_count: self.joint_count,
            root: self.root,
            edges: self.edges.clone(),
        }
    }

    /// Relabels joints so that new joint `i` is old joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, DataError> {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .map(|&(c, p)| (inverse[c], inverse[p]))
            .collect();
        Self::new(self.joint_count, edges, inverse[self.root])
    }
}

impl TryFrom<SkeletonGraphSpec> for SkeletonGraph {
    type Error = DataError;

    fn try_from(spec: SkeletonGraphSpec) -> Result<Self, Self::Error> {
        Self::new(spec.joint_count, spec.edges, spec.root)
    }
}

impl Serialize for SkeletonGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SkeletonGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let spec = SkeletonGraphSpec::deserialize(d)?;
        SkeletonGraph::try_from(spec).map_err(serde::de::Error::custom)
    }
}

/// `D^-1/2 (A + I) D^-1/2`, rescaled so the largest row sum is exactly 1.
fn normalized_adjacency(v: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut a = vec![0.0; v * v];
    for i in 0..v {
        a[i * v + i] = 1.0;
    }
    for &(c, p) in edges {
        a[c * v + p] = 1.0;
        a[p * v + c] = 1.0;
    }
    let degree: Vec<f64> = (0..v).map(|i| a[i * v..(i + 1) * v].iter().sum()).collect();
    for i in 0..v {
        for j in 0..v {
            a[i * v + j] /= (degree[i] * degree[j]).sqrt();
        }
    }
    let max_row = (0..v)
        .map(|i| a[i * v..(i + 1) * v].iter().sum::<f64>())
        .fold(0.0, f64::max);
    a.iter_mut().for_each(|x| *x /= max_row);
    Tensor::new(vec![v, v], a).expect("v*v entries")
}
