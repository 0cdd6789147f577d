//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use synergy_core::clustering::SimilarityMatrix;
use synergy_core::numerics::{Graph, ParameterSet, SetId, Tensor, Var};

pub const FD_EPS: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;
/// Differences below this are accepted regardless of magnitude.
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Worst disagreement between analytic and finite-difference gradients.
#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    fn record(&mut self, label: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let rel = diff / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        if diff >= FD_ABS_FLOOR {
            self.max_rel = self.max_rel.max(rel);
            if rel >= FD_REL_TOL {
                self.failures.push(format!("{label}: analytic {analytic:e}, numeric {numeric:e}"));
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.failures.extend(other.failures);
    }
}

/// Central differences on every entry (or `max_per_tensor` random entries)
/// of every parameter, against reverse-mode gradients of the same scalar.
pub fn check_param_grads<R: Rng, F>(
    params: &ParameterSet,
    max_per_tensor: Option<usize>,
    rng: &mut R,
    build: F,
) -> FdReport
where
    F: Fn(&mut Graph<'_>, SetId) -> Var,
{
    let analytic = {
        let mut g = Graph::new();
        let set = g.bind(params);
        let loss = build(&mut g, set);
        g.backward(loss).expect("backward").into_set(set)
    };
    let eval = |p: &ParameterSet| {
        let mut g = Graph::new();
        let set = g.bind_frozen(p);
        let loss = build(&mut g, set);
        g.value(loss).item()
    };
    let mut work = params.snapshot();
    let names: Vec<String> = params.iter().map(|(_, n, _)| n.to_string()).collect();
    let mut report = FdReport::default();
    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(m) = max_per_tensor {
            idx.shuffle(rng);
            idx.truncate(m);
        }
        for i in idx {
            let orig = work.tensors()[ti].data()[i];
            work.tensors_mut()[ti].data_mut()[i] = orig + FD_EPS;
            let plus = eval(&work);
            work.tensors_mut()[ti].data_mut()[i] = orig - FD_EPS;
            let minus = eval(&work);
            work.tensors_mut()[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            report.record(format!("{}[{i}]", names[ti]), grad.data()[i], numeric);
        }
    }
    report
}

/// Central differences with respect to graph inputs.
pub fn check_input_grads<F>(inputs: &[Tensor], build: F) -> FdReport
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let run = |xs: &[Tensor], grads: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> =
            xs.iter().map(|x| if grads { g.input(x.clone()) } else { g.constant(x.clone()) }).collect();
        let loss = build(&mut g, &vars);
        let value = g.value(loss).item();
        let gs = if grads {
            g.backward(loss).expect("backward");
            vars.iter()
                .map(|&v| g.input_grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).rows(), g.value(v).cols())))
                .collect()
        } else {
            Vec::new()
        };
        (value, gs)
    };
    let (_, analytic) = run(inputs, true);
    let mut work = inputs.to_vec();
    let mut report = FdReport::default();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + FD_EPS;
            let plus = run(&work, false).0;
            work[ti].data_mut()[i] = orig - FD_EPS;
            let minus = run(&work, false).0;
            work[ti].data_mut()[i] = orig;
            report.record(format!("input{ti}[{i}]"), grad.data()[i], (plus - minus) / (2.0 * FD_EPS));
        }
    }
    report
}

/// A weighted sum of every output entry, so each entry's gradient matters.
pub fn weighted_sum(g: &mut Graph<'_>, x: Var, seed: u64) -> Var {
    let (r, c) = (g.value(x).rows(), g.value(x).cols());
    let w: Vec<f64> = (0..r * c).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
    let w = g.constant(Tensor::from_vec(r, c, w));
    let p = g.mul(x, w).expect("same shape");
    g.sum(p)
}

/// Random forest over `k` actuators: parents are drawn from a random
/// ordering so indices carry no structure.
pub fn random_parents<R: Rng>(k: usize, roots_max: usize, rng: &mut R) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut parents = vec![None; k];
    let mut roots = 1;
    for pos in 1..k {
        let node = order[pos];
        if roots < roots_max && rng.random_bool(0.2) {
            roots += 1;
            continue;
        }
        parents[node] = Some(order[rng.random_range(0..pos)]);
    }
    parents
}

/// Hop distances by breadth-first search over the tree plus a torso node
/// joined to every root.
pub fn bfs_oracle(parents: &[Option<usize>]) -> Vec<Vec<u32>> {
    let k = parents.len();
    let torso = k;
    let mut nbrs = vec![Vec::new(); k + 1];
    for (c, p) in parents.iter().enumerate() {
        let p = p.unwrap_or(torso);
        nbrs[c].push(p);
        nbrs[p].push(c);
    }
    (0..k)
        .map(|s| {
            let mut d = vec![u32::MAX; k + 1];
            d[s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &nbrs[u] {
                    if d[v] == u32::MAX {
                        d[v] = d[u] + 1;
                        q.push_back(v);
                    }
                }
            }
            d.truncate(k);
            d
        })
        .collect()
}

/// Rebuilds the parent array from traversal ranks alone.
///
/// Pre-order and in-order ranks determine the left-child-right-sibling
/// binary tree; a left child is a first child and a right child is the
/// next sibling, and the top sibling chain hangs from the torso.
pub fn reconstruct_parents(pre: &[usize], inorder: &[usize]) -> Vec<Option<usize>> {
    let k = pre.len();
    let mut by_pre = vec![0; k];
    for (node, &r) in pre.iter().enumerate() {
        by_pre[r] = node;
    }
    let mut left = vec![None; k];
    let mut right = vec![None; k];
    // Recursive split of (preorder range, inorder range).
    fn build(
        by_pre: &[usize],
        inorder: &[usize],
        pre_lo: usize,
        in_lo: usize,
        len: usize,
        left: &mut [Option<usize>],
        right: &mut [Option<usize>],
    ) -> Option<usize> {
        if len == 0 {
            return None;
        }
        let root = by_pre[pre_lo];
        let left_len = inorder[root] - in_lo;
        left[root] = build(by_pre, inorder, pre_lo + 1, in_lo, left_len, left, right);
        right[root] = build(by_pre, inorder, pre_lo + 1 + left_len, inorder[root] + 1, len - 1 - left_len, left, right);
        Some(root)
    }
    let root = build(&by_pre, inorder, 0, 0, k, &mut left, &mut right);
    let mut parents = vec![None; k];
    let mut stack: Vec<(Option<usize>, Option<usize>)> = vec![(root, None)];
    while let Some((node, parent)) = stack.pop() {
        if let Some(n) = node {
            parents[n] = parent;
            stack.push((right[n], parent));
            stack.push((left[n], Some(n)));
        }
    }
    parents
}

/// Net similarity of an exemplar set: every non-exemplar joins its most
/// similar exemplar.
pub fn ap_objective(s: &SimilarityMatrix, centers: &[usize]) -> f64 {
    (0..s.len())
        .map(|i| {
            if centers.contains(&i) {
                s.get(i, i)
            } else {
                centers.iter().map(|&c| s.get(i, c)).fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .sum()
}

/// Exhaustive search over all non-empty exemplar sets: the best set, its
/// objective, and the runner-up objective.
pub fn brute_force_exemplars(s: &SimilarityMatrix) -> (Vec<usize>, f64, f64) {
    let n = s.len();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for mask in 1u32..(1 << n) {
        let centers: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let v = ap_objective(s, &centers);
        if v > best.1 {
            second = best.1;
            best = (centers, v);
        } else if v > second {
            second = v;
        }
    }
    (best.0, best.1, second)
}

/// Labels induced by an exemplar set, ties to the lowest exemplar.
pub fn labels_for(s: &SimilarityMatrix, centers: &[usize]) -> Vec<usize> {
    (0..s.len())
        .map(|i| {
            if let Some(p) = centers.iter().position(|&c| c == i) {
                return p;
            }
            let mut best = 0;
            for (p, &c) in centers.iter().enumerate() {
                if s.get(i, c) > s.get(i, centers[best]) {
                    best = p;
                }
            }
            best
        })
        .collect()
}

/// Spearman rank correlation without ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (rank, i) in idx.into_iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// A random structure with exactly `l` non-empty synergies; each synergy is
/// centered on its lowest member.
pub fn random_structure<R: Rng>(k: usize, l: usize, rng: &mut R) -> synergy_core::synergy::SynergyStructure {
    let mut assignment: Vec<usize> = (0..k).map(|i| if i < l { i } else { rng.random_range(0..l) }).collect();
    assignment.shuffle(rng);
    let centers = (0..l).map(|s| assignment.iter().position(|&a| a == s).unwrap()).collect();
    synergy_core::synergy::SynergyStructure::new("r", assignment, centers, 1, 0).unwrap()
}

pub fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::uniform(r, c, 1.0, rng)
}

pub fn block_mask(group: usize, split: usize) -> Vec<bool> {
    let mut m = vec![false; group * group];
    for i in 0..group {
        for j in 0..group {
            m[i * group + j] = (i < split) == (j < split);
        }
    }
    m
}

pub type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Var>);

/// One small instance of every differentiable graph op, each reduced to a
/// scalar.
pub fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let n = rng.random_range(2..5);
    let d = 2 * rng.random_range(1..3);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let idx: Vec<usize> = (0..n + 1).map(|_| rng.random_range(0..n)).collect();
    let (l2, i2) = (labels.clone(), idx.clone());
    let mask = block_mask(n, 1);
    let mask2 = mask.clone();
    let target: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    vec![
        (
            "matmul",
            vec![rand_t(rng, n, d), rand_t(rng, d, 3)],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1]).unwrap();
                weighted_sum(g, y, 1)
            }),
        ),
        (
            "linear",
            vec![rand_t(rng, n, d), rand_t(rng, d, 3), rand_t(rng, 1, 3)],
            Box::new(|g, x| {
                let y = g.linear(x[0], x[1], Some(x[2])).unwrap();
                weighted_sum(g, y, 2)
            }),
        ),
        (
            "add_mul_scale",
            vec![rand_t(rng, n, d), rand_t(rng, n, d)],
            Box::new(|g, x| {
                let a = g.add(x[0], x[1]).unwrap();
                let m = g.mul(a, x[1]).unwrap();
                let s = g.scale(m, -1.7);
                weighted_sum(g, s, 3)
            }),
        ),
        (
            "relu",
            vec![rand_t(rng, n, d)],
            Box::new(|g, x| {
                let y = g.relu(x[0]);
                weighted_sum(g, y, 4)
            }),
        ),
        (
            "tanh",
            vec![rand_t(rng, n, d)],
            Box::new(|g, x| {
                let y = g.tanh(x[0]);
                weighted_sum(g, y, 5)
            }),
        ),
        (
            "gelu",
            vec![rand_t(rng, n, d)],
            Box::new(|g, x| {
                let s = g.scale(x[0], 3.0);
                let y = g.gelu(s);
                weighted_sum(g, y, 6)
            }),
        ),
        (
            "layer_norm",
            vec![rand_t(rng, n, d), rand_t(rng, 1, d), rand_t(rng, 1, d)],
            Box::new(|g, x| {
                let y = g.layer_norm(x[0], x[1], x[2]).unwrap();
                weighted_sum(g, y, 7)
            }),
        ),
        (
            "attention",
            vec![rand_t(rng, 2 * n, 3 * d)],
            Box::new(move |g, x| {
                let y = g.attention(x[0], n, &mask, 2).unwrap();
                weighted_sum(g, y, 8)
            }),
        ),
        (
            "softmax_rows",
            vec![rand_t(rng, n, n)],
            Box::new(move |g, x| {
                let y = g.softmax_rows(x[0], Some(&mask2)).unwrap();
                weighted_sum(g, y, 9)
            }),
        ),
        (
            "group_mean_pool",
            vec![rand_t(rng, n, d)],
            Box::new(move |g, x| {
                let y = g.group_mean_pool(x[0], &l2, 2).unwrap();
                weighted_sum(g, y, 10)
            }),
        ),
        (
            "concat_slice",
            vec![rand_t(rng, n, d), rand_t(rng, n, 2)],
            Box::new(|g, x| {
                let c = g.concat_cols(x[0], x[1]).unwrap();
                let s = g.slice_cols(c, 1, 2).unwrap();
                let t = g.tanh(c);
                let a = weighted_sum(g, s, 11);
                let b = weighted_sum(g, t, 12);
                let sum = g.add(a, b).unwrap();
                g.sum(sum)
            }),
        ),
        (
            "reshape_transpose",
            vec![rand_t(rng, n, d)],
            Box::new(move |g, x| {
                let r = g.reshape(x[0], d, n).unwrap();
                let t = g.transpose(r);
                let y = g.tanh(t);
                weighted_sum(g, y, 13)
            }),
        ),
        (
            "gather_rows",
            vec![rand_t(rng, n, d)],
            Box::new(move |g, x| {
                let y = g.gather_rows(x[0], &i2).unwrap();
                weighted_sum(g, y, 14)
            }),
        ),
        (
            "clamp",
            vec![rand_t(rng, n, d)],
            Box::new(|g, x| {
                let y = g.clamp(x[0], -0.5, 0.5);
                weighted_sum(g, y, 15)
            }),
        ),
        (
            "minimum",
            vec![rand_t(rng, n, 1), rand_t(rng, n, 1)],
            Box::new(|g, x| {
                let y = g.minimum(x[0], x[1]).unwrap();
                weighted_sum(g, y, 16)
            }),
        ),
        (
            "mean",
            vec![rand_t(rng, n, d)],
            Box::new(|g, x| {
                let t = g.tanh(x[0]);
                g.mean(t)
            }),
        ),
        ("mse", vec![rand_t(rng, n, d)], Box::new(move |g, x| g.mse(x[0], &target).unwrap())),
        (
            "row_l1_bound",
            vec![Tensor::uniform(n, d, 2.0, rng)],
            Box::new(|g, x| {
                let y = g.row_l1_bound(x[0]);
                weighted_sum(g, y, 17)
            }),
        ),
    ]
}
