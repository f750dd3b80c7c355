//! Joint graph, hop distances to the root, and the three-way adjacency split.
//!
//! Skeleton files are plain text, one `key = value` pair per line, `#` starts
//! a comment:
//!
//! ```text
//! num_joints = 3
//! root = 0
//! names = Hip, Knee, Foot          # optional, one per joint
//! edge = 0 1                       # repeated; undirected
//! edge = 1 2 450 0 -1 0            # optional bone length (mm) and rest direction
//! ```
//!
//! Bone lengths and rest directions are only read by the synthetic data
//! generator.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SparseMatrix, Tensor};

pub const H36M_17: &str = include_str!("../skeletons/h36m17.skel");
pub const H36M_16: &str = include_str!("../skeletons/h36m16.skel");
pub const TINY_5: &str = include_str!("../skeletons/tiny5.skel");

/// Names accepted by [`Skeleton::builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["h36m17", "h36m16", "tiny5"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_dir: Option<[f64; 3]>,
}

impl Edge {
    pub fn new(a: usize, b: usize) -> Self {
        Edge {
            a,
            b,
            length_mm: None,
            rest_dir: None,
        }
    }
}

/// Validated, connected joint graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonDef", into = "SkeletonDef")]
pub struct Skeleton {
    num_joints: usize,
    root: usize,
    edges: Vec<Edge>,
    names: Vec<String>,
}

/// Unvalidated serialized form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkeletonDef {
    pub num_joints: usize,
    pub root: usize,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
}

impl TryFrom<SkeletonDef> for Skeleton {
    type Error = Error;
    fn try_from(d: SkeletonDef) -> Result<Self> {
        Skeleton::with_edges(d.num_joints, d.root, d.edges, d.names)
    }
}

impl From<Skeleton> for SkeletonDef {
    fn from(s: Skeleton) -> Self {
        SkeletonDef {
            num_joints: s.num_joints,
            root: s.root,
            edges: s.edges,
            names: s.names,
        }
    }
}

impl Skeleton {
    pub fn new(num_joints: usize, root: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let edges = edges.iter().map(|&(a, b)| Edge::new(a, b)).collect();
        Self::with_edges(num_joints, root, edges, Vec::new())
    }

    pub fn with_edges(
        num_joints: usize,
        root: usize,
        edges: Vec<Edge>,
        names: Vec<String>,
    ) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::Skeleton("num_joints must be at least 1".into()));
        }
        if root >= num_joints {
            return Err(Error::Skeleton(format!(
                "root {root} out of range for {num_joints} joints"
            )));
        }
        if !names.is_empty() && names.len() != num_joints {
            return Err(Error::Skeleton(format!(
                "{} names given for {num_joints} joints",
                names.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (k, e) in edges.iter().enumerate() {
            if e.a >= num_joints || e.b >= num_joints {
                return Err(Error::Skeleton(format!(
                    "edge {k} ({}, {}) references a joint outside 0..{num_joints}",
                    e.a, e.b
                )));
            }
            if e.a == e.b {
                return Err(Error::Skeleton(format!(
                    "edge {k} ({}, {}) is a self-loop",
                    e.a, e.b
                )));
            }
            if !seen.insert((e.a.min(e.b), e.a.max(e.b))) {
                return Err(Error::Skeleton(format!(
                    "edge {k} ({}, {}) is a duplicate",
                    e.a, e.b
                )));
            }
            if let Some(len) = e.length_mm {
                if !(len.is_finite() && len > 0.0) {
                    return Err(Error::Skeleton(format!(
                        "edge {k} has invalid length {len}"
                    )));
                }
            }
        }
        let s = Skeleton {
            num_joints,
            root,
            edges,
            names,
        };
        let hops = s.bfs();
        if let Some(j) = hops.iter().position(Option::is_none) {
            return Err(Error::Skeleton(format!(
                "graph is disconnected: joint {j} is unreachable from root {root}"
            )));
        }
        Ok(s)
    }

    /// One of [`BUILTIN_NAMES`].
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "h36m17" => Self::parse(H36M_17),
            "h36m16" => Self::parse(H36M_16),
            "tiny5" => Self::parse(TINY_5),
            _ => Err(Error::Skeleton(format!(
                "unknown builtin skeleton {name:?} (expected one of {BUILTIN_NAMES:?})"
            ))),
        }
    }

    /// A builtin name or a path to a skeleton file.
    pub fn load(source: &str) -> Result<Self> {
        if BUILTIN_NAMES.contains(&source) {
            Self::builtin(source)
        } else {
            Self::from_file(source)
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut num_joints = None;
        let mut root = None;
        let mut names = Vec::new();
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Skeleton(format!("line {}: {what}: {raw:?}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key = value"))?;
            let value = value.trim();
            match key.trim() {
                "num_joints" => num_joints = Some(value.parse().map_err(|_| bad("bad count"))?),
                "root" => root = Some(value.parse().map_err(|_| bad("bad root index"))?),
                "names" => {
                    names = value.split(',').map(|n| n.trim().to_owned()).collect();
                }
                "edge" => {
                    let nums: Vec<&str> = value.split_whitespace().collect();
                    if !(nums.len() == 2 || nums.len() == 3 || nums.len() == 6) {
                        return Err(bad("edge needs 2, 3 or 6 fields"));
                    }
                    let idx = |s: &str| s.parse::<usize>().map_err(|_| bad("bad joint index"));
                    let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
                    let mut e = Edge::new(idx(nums[0])?, idx(nums[1])?);
                    if nums.len() >= 3 {
                        e.length_mm = Some(num(nums[2])?);
                    }
                    if nums.len() == 6 {
                        e.rest_dir = Some([num(nums[3])?, num(nums[4])?, num(nums[5])?]);
                    }
                    edges.push(e);
                }
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        let num_joints = num_joints.ok_or_else(|| Error::Skeleton("missing num_joints".into()))?;
        let root = root.ok_or_else(|| Error::Skeleton("missing root".into()))?;
        Self::with_edges(num_joints, root, edges, names)
    }

    /// Render in the file grammar accepted by [`Skeleton::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_joints = {}", self.num_joints);
        let _ = writeln!(s, "root = {}", self.root);
        if !self.names.is_empty() {
            let _ = writeln!(s, "names = {}", self.names.join(", "));
        }
        for e in &self.edges {
            let _ = write!(s, "edge = {} {}", e.a, e.b);
            if let Some(l) = e.length_mm {
                let _ = write!(s, " {l}");
                if let Some([x, y, z]) = e.rest_dir {
                    let _ = write!(s, " {x} {y} {z}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.num_joints
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        for n in &mut adj {
            n.sort_unstable();
        }
        adj
    }

    fn bfs(&self) -> Vec<Option<usize>> {
        let adj = self.neighbors();
        let mut hop = vec![None; self.num_joints];
        hop[self.root] = Some(0);
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            let du = hop[u].expect("queued joints have a distance");
            for &v in &adj[u] {
                if hop[v].is_none() {
                    hop[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        hop
    }

    /// Breadth-first edge count from the root to every joint.
    pub fn hop_distances(&self) -> Vec<usize> {
        self.bfs()
            .into_iter()
            .map(|h| h.expect("validated skeletons are connected"))
            .collect()
    }

    /// Parent of every joint in the breadth-first tree rooted at the root
    /// (`None` for the root), plus the visiting order.
    pub fn bfs_tree(&self) -> (Vec<Option<usize>>, Vec<usize>) {
        let adj = self.neighbors();
        let mut parent = vec![None; self.num_joints];
        let mut seen = vec![false; self.num_joints];
        let mut order = Vec::with_capacity(self.num_joints);
        seen[self.root] = true;
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        (parent, order)
    }

    pub fn find_edge(&self, a: usize, b: usize) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
    }

    /// Hop distance between every pair of joints.
    pub fn pairwise_hops(&self) -> Vec<Vec<usize>> {
        (0..self.num_joints)
            .map(|r| {
                let mut s = self.clone();
                s.root = r;
                s.hop_distances()
            })
            .collect()
    }
}

/// `D_r^{-1/2} A D_c^{-1/2}` with `D_r` the row degrees and `D_c` the column
/// degrees. For symmetric input both are the ordinary degree matrix. Zero
/// degrees get inverse 0, so empty rows and columns stay zero.
pub fn normalize_adjacency(a: &Tensor) -> Tensor {
    let n = a.rows();
    assert_eq!(n, a.cols(), "adjacency must be square");
    let row_deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let col_deg: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a.get(i, j)).sum()).collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 && row_deg[i] > 0.0 && col_deg[j] > 0.0 {
                // One square root of the product keeps symmetric input
                // exactly symmetric.
                out.set(i, j, v / (row_deg[i] * col_deg[j]).sqrt());
            }
        }
    }
    out
}

/// Self-loop adjacency split into the self / toward-root / away-from-root
/// groups, with the normalized form of each group.
///
/// Row `i` of each matrix lists the joints whose features flow into joint `i`.
#[derive(Clone, Debug)]
pub struct PartitionedAdjacency {
    pub hop: Vec<usize>,
    /// Adjacency with self-loops.
    pub full: Tensor,
    /// Binary group matrices: self, closer to the root, farther from the root.
    pub groups: [Tensor; 3],
    /// `D_k^{-1/2} A_k D_k^{-1/2}` for each group.
    pub normalized: [Tensor; 3],
    sparse: [Arc<SparseMatrix>; 3],
    sparse_full: Arc<SparseMatrix>,
}

impl PartitionedAdjacency {
    pub fn new(s: &Skeleton) -> Self {
        let n = s.num_joints();
        let hop = s.hop_distances();
        let mut full = Tensor::eye(n);
        let mut closer = Tensor::zeros(&[n, n]);
        let mut farther = Tensor::zeros(&[n, n]);
        for e in s.edges() {
            for (i, j) in [(e.a, e.b), (e.b, e.a)] {
                full.set(i, j, 1.0);
                if hop[j] < hop[i] {
                    closer.set(i, j, 1.0);
                } else {
                    // Equal hop counts only occur on cycles; they join the
                    // farther group so the three groups still sum to `full`.
                    farther.set(i, j, 1.0);
                }
            }
        }
        let groups = [Tensor::eye(n), closer, farther];
        let normalized = [
            normalize_adjacency(&groups[0]),
            normalize_adjacency(&groups[1]),
            normalize_adjacency(&groups[2]),
        ];
        let sparse = [
            Arc::new(SparseMatrix::from_dense(&normalized[0])),
            Arc::new(SparseMatrix::from_dense(&normalized[1])),
            Arc::new(SparseMatrix::from_dense(&normalized[2])),
        ];
        let sparse_full = Arc::new(SparseMatrix::from_dense(&normalize_adjacency(&full)));
        PartitionedAdjacency {
            hop,
            full,
            groups,
            normalized,
            sparse,
            sparse_full,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.hop.len()
    }

    pub fn sparse(&self, group: usize) -> Arc<SparseMatrix> {
        self.sparse[group].clone()
    }

    /// Normalized full adjacency (single-group graph convolution).
    pub fn sparse_full(&self) -> Arc<SparseMatrix> {
        self.sparse_full.clone()
    }

    /// Nonzeros summed over the three groups; equals nnz of `full`.
    pub fn nnz(&self) -> usize {
        self.sparse.iter().map(|s| s.nnz()).sum()
    }

    /// Number of nonzero entries in each binary group.
    pub fn group_sizes(&self) -> [usize; 3] {
        let count = |t: &Tensor| t.data().iter().filter(|&&v| v != 0.0).count();
        [
            count(&self.groups[0]),
            count(&self.groups[1]),
            count(&self.groups[2]),
        ]
    }
}

/// Convenience wrapper over [`PartitionedAdjacency::new`].
pub fn partition_adjacency(s: &Skeleton) -> PartitionedAdjacency {
    PartitionedAdjacency::new(s)
}
