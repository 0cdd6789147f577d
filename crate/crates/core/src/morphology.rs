//! Actuator trees, hop distances and traversal triples.
//!
//! The torso is a virtual root: it owns no actuator, so every matrix here
//! is indexed by actuator only. Actuators attached directly to the torso
//! carry the root sentinel (`None`, `-1` on disk) as their parent.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MorphologyError {
    #[error("robot must have at least one actuator")]
    Empty,
    #[error("state_dim must be positive")]
    ZeroStateDim,
    #[error("actuator {actuator} has parent {parent}, out of range")]
    ParentOutOfRange { actuator: usize, parent: i64 },
    #[error("parent links of actuator {0} form a cycle")]
    Cycle(usize),
    #[error("actuators {0} and {1} are not connected")]
    DisconnectedGraph(usize, usize),
    #[error("adjacency matrix is not square")]
    NotSquare,
    #[error("morphology file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk form: `{"robot_id": "...", "state_dim": 9, "parents": [-1, 0, ...]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MorphologyFile {
    pub robot_id: String,
    pub state_dim: usize,
    pub parents: Vec<i64>,
}

/// Actuator tree of one robot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MorphologyFile", into = "MorphologyFile")]
pub struct MorphologyGraph {
    robot_id: String,
    state_dim: usize,
    parents: Vec<Option<usize>>,
}

impl TryFrom<MorphologyFile> for MorphologyGraph {
    type Error = MorphologyError;

    fn try_from(f: MorphologyFile) -> Result<Self, Self::Error> {
        let k = f.parents.len();
        let parents = f
            .parents
            .iter()
            .enumerate()
            .map(|(i, &p)| match p {
                -1 => Ok(None),
                p if p >= 0 && (p as usize) < k => Ok(Some(p as usize)),
                p => Err(MorphologyError::ParentOutOfRange { actuator: i, parent: p }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        MorphologyGraph::new(f.robot_id, f.state_dim, parents)
    }
}

impl From<MorphologyGraph> for MorphologyFile {
    fn from(g: MorphologyGraph) -> Self {
        MorphologyFile {
            parents: g.parents.iter().map(|p| p.map_or(-1, |v| v as i64)).collect(),
            robot_id: g.robot_id,
            state_dim: g.state_dim,
        }
    }
}

impl MorphologyGraph {
    pub fn new(
        robot_id: impl Into<String>,
        state_dim: usize,
        parents: Vec<Option<usize>>,
    ) -> Result<Self, MorphologyError> {
        let k = parents.len();
        if k == 0 {
            return Err(MorphologyError::Empty);
        }
        if state_dim == 0 {
            return Err(MorphologyError::ZeroStateDim);
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= k || p == i {
                    return Err(MorphologyError::ParentOutOfRange { actuator: i, parent: p as i64 });
                }
            }
        }
        // Every upward walk must reach the sentinel within k hops.
        for start in 0..k {
            let mut cur = start;
            let mut hops = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                hops += 1;
                if hops > k {
                    return Err(MorphologyError::Cycle(start));
                }
            }
        }
        Ok(Self { robot_id: robot_id.into(), state_dim, parents })
    }

    pub fn from_json(text: &str) -> Result<Self, MorphologyError> {
        serde_json::from_str(text).map_err(|e| MorphologyError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, MorphologyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("morphology serializes")
    }

    pub fn robot_id(&self) -> &str {
        &self.robot_id
    }

    pub fn num_actuators(&self) -> usize {
        self.parents.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Children of `k` (or of the torso for `None`) in ascending index order.
    pub fn children(&self, k: Option<usize>) -> Vec<usize> {
        (0..self.parents.len()).filter(|&c| self.parents[c] == k).collect()
    }

    /// Number of links between `k` and the torso (root-attached = 1).
    pub fn depth(&self, k: usize) -> usize {
        let mut d = 1;
        let mut cur = k;
        while let Some(p) = self.parents[cur] {
            d += 1;
            cur = p;
        }
        d
    }

    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        build_adjacency(self)
    }

    /// Hop distances between actuators. Actuators attached to the torso are
    /// connected through it, so two root-attached actuators are 2 hops apart.
    pub fn distances(&self) -> DistanceMatrix {
        let k = self.num_actuators();
        let mut adj = vec![vec![false; k + 1]; k + 1];
        for (c, p) in self.parents.iter().enumerate() {
            let p = p.unwrap_or(k);
            adj[c][p] = true;
            adj[p][c] = true;
        }
        let full = shortest_distances(&adj).expect("validated trees are connected");
        let mut d = vec![0u32; k * k];
        for i in 0..k {
            for j in 0..k {
                d[i * k + j] = full.get(i, j);
            }
        }
        DistanceMatrix { n: k, d }
    }

    pub fn traversal_triples(&self) -> Vec<TraversalTriple> {
        traversal_triples(self)
    }
}

/// Symmetric adjacency over actuators: `(i, j)` is true iff one is the
/// other's parent. Links through the virtual torso are not edges here.
pub fn build_adjacency(g: &MorphologyGraph) -> Vec<Vec<bool>> {
    let k = g.num_actuators();
    let mut adj = vec![vec![false; k]; k];
    for (c, p) in g.parents.iter().enumerate() {
        if let Some(p) = *p {
            adj[c][p] = true;
            adj[p][c] = true;
        }
    }
    adj
}

/// All-pairs hop counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<u32>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        self.d.chunks(self.n.max(1)).map(<[u32]>::to_vec).collect()
    }
}

/// Floyd–Warshall over a boolean adjacency matrix.
pub fn shortest_distances(adj: &[Vec<bool>]) -> Result<DistanceMatrix, MorphologyError> {
    const INF: u32 = u32::MAX / 2;
    let n = adj.len();
    if adj.iter().any(|row| row.len() != n) {
        return Err(MorphologyError::NotSquare);
    }
    let mut d = vec![INF; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
        for j in 0..n {
            if i != j && adj[i][j] {
                d[i * n + j] = 1;
            }
        }
    }
    for m in 0..n {
        for i in 0..n {
            let dim = d[i * n + m];
            if dim == INF {
                continue;
            }
            for j in 0..n {
                let via = dim + d[m * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    if let Some(pos) = d.iter().position(|&v| v == INF) {
        return Err(MorphologyError::DisconnectedGraph(pos / n, pos % n));
    }
    Ok(DistanceMatrix { n, d })
}

/// Ranks of one actuator in the pre-, in- and post-order walks of the
/// left-child/right-sibling binary tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraversalTriple {
    pub pre: usize,
    #[serde(rename = "in")]
    pub inorder: usize,
    pub post: usize,
}

impl TraversalTriple {
    pub fn as_array(&self) -> [usize; 3] {
        [self.pre, self.inorder, self.post]
    }
}

/// Left-child/right-sibling traversal triples, children ordered by index.
///
/// The torso's children form the top-level sibling chain, so the binary
/// tree is rooted at the lowest-index root-attached actuator and every
/// rank lies in `0..K`.
pub fn traversal_triples(g: &MorphologyGraph) -> Vec<TraversalTriple> {
    let k = g.num_actuators();
    let mut left = vec![None; k];
    let mut right = vec![None; k];
    let mut link_siblings = |kids: &[usize], owner: Option<usize>| {
        if let (Some(o), Some(&first)) = (owner, kids.first()) {
            left[o] = Some(first);
        }
        for w in kids.windows(2) {
            right[w[0]] = Some(w[1]);
        }
    };
    let top = g.children(None);
    link_siblings(&top, None);
    for n in 0..k {
        link_siblings(&g.children(Some(n)), Some(n));
    }
    let root = top[0];

    let mut pre = Vec::with_capacity(k);
    let mut ino = Vec::with_capacity(k);
    let mut post = Vec::with_capacity(k);
    // Iterative walk; the binary tree can be K deep.
    enum Visit {
        Enter(usize),
        In(usize),
        Exit(usize),
    }
    let mut stack = vec![Visit::Enter(root)];
    while let Some(v) = stack.pop() {
        match v {
            Visit::Enter(n) => {
                pre.push(n);
                stack.push(Visit::Exit(n));
                if let Some(r) = right[n] {
                    stack.push(Visit::Enter(r));
                }
                stack.push(Visit::In(n));
                if let Some(l) = left[n] {
                    stack.push(Visit::Enter(l));
                }
            }
            Visit::In(n) => ino.push(n),
            Visit::Exit(n) => post.push(n),
        }
    }
    let mut triples = vec![TraversalTriple { pre: 0, inorder: 0, post: 0 }; k];
    for (rank, &n) in pre.iter().enumerate() {
        triples[n].pre = rank;
    }
    for (rank, &n) in ino.iter().enumerate() {
        triples[n].inorder = rank;
    }
    for (rank, &n) in post.iter().enumerate() {
        triples[n].post = rank;
    }
    triples
}

/// Per-source breadth-first hop counts; used to cross-check
/// [`shortest_distances`].
pub fn bfs_distances(adj: &[Vec<bool>]) -> Option<Vec<Vec<u32>>> {
    let n = adj.len();
    let mut out = vec![vec![u32::MAX; n]; n];
    for (s, row) in out.iter_mut().enumerate() {
        row[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for v in 0..n {
                if adj[u][v] && row[v] == u32::MAX {
                    row[v] = row[u] + 1;
                    q.push_back(v);
                }
            }
        }
        if row.contains(&u32::MAX) {
            return None;
        }
    }
    Some(out)
}
