//! One-to-one correspondence between predicted and ground-truth edge pixels.

use std::collections::VecDeque;

use crate::maps::BinaryMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }

    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        let pred = self.true_positives + self.false_positives;
        if pred == 0 {
            1.0
        } else {
            self.true_positives as f64 / pred as f64
        }
    }

    /// 1 when the ground truth is empty.
    pub fn recall(&self) -> f64 {
        let gt = self.true_positives + self.false_negatives;
        if gt == 0 {
            1.0
        } else {
            self.true_positives as f64 / gt as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Matching tolerance for an image: 0.75% of its diagonal.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    0.0075 * ((height * height + width * width) as f64).sqrt()
}

/// Integer offsets within Euclidean distance `tol`.
fn offsets(tol: f64) -> Vec<(isize, isize)> {
    let r = tol.floor() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= tol * tol {
                out.push((dy, dx));
            }
        }
    }
    out
}

const FREE: usize = usize::MAX;

/// Hopcroft–Karp maximum-cardinality matching on an adjacency list
/// `adj[left] = rights`.
pub fn max_bipartite_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    let n_left = adj.len();
    let mut match_l = vec![FREE; n_left];
    let mut match_r = vec![FREE; n_right];
    let mut dist = vec![0usize; n_left];
    let mut matched = 0;

    // Greedy initialisation settles most pairs cheaply.
    for u in 0..n_left {
        if let Some(&v) = adj[u].iter().find(|&&v| match_r[v] == FREE) {
            match_l[u] = v;
            match_r[v] = u;
            matched += 1;
        }
    }

    loop {
        // Breadth-first layering from free left vertices.
        let mut queue = VecDeque::new();
        for u in 0..n_left {
            if match_l[u] == FREE {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = usize::MAX;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let w = match_r[v];
                if w == FREE {
                    found = true;
                } else if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        if !found {
            return matched;
        }
        // Depth-first augmentation along the layers, iteratively.
        let mut next = vec![0usize; n_left];
        for root in 0..n_left {
            if match_l[root] != FREE {
                continue;
            }
            let mut stack = vec![root];
            while let Some(&u) = stack.last() {
                if next[u] == adj[u].len() {
                    dist[u] = usize::MAX;
                    stack.pop();
                    continue;
                }
                let v = adj[u][next[u]];
                next[u] += 1;
                let w = match_r[v];
                if w == FREE {
                    // Flip the path root → … → u → v.
                    let mut v = v;
                    for &x in stack.iter().rev() {
                        let prev = match_l[x];
                        match_l[x] = v;
                        match_r[v] = x;
                        v = prev;
                    }
                    matched += 1;
                    break;
                }
                if dist[w] == dist[u] + 1 {
                    stack.push(w);
                }
            }
        }
    }
}

/// Maximum one-to-one matching of pixels at Euclidean distance ≤ `tol_px`.
pub fn match_edges(pred: &BinaryMap, gt: &BinaryMap, tol_px: f64) -> MatchCounts {
    assert_eq!(pred.dims(), gt.dims(), "prediction and ground truth must have equal shape");
    let (h, w) = gt.dims();
    let mut gt_index = vec![FREE; h * w];
    let mut n_gt = 0;
    for (i, &g) in gt.data().iter().enumerate() {
        if g {
            gt_index[i] = n_gt;
            n_gt += 1;
        }
    }
    let offs = offsets(tol_px.max(0.0));
    let adj: Vec<Vec<usize>> = pred
        .points()
        .into_iter()
        .map(|(y, x)| {
            offs.iter()
                .filter_map(|&(dy, dx)| {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        return None;
                    }
                    let j = gt_index[ny as usize * w + nx as usize];
                    (j != FREE).then_some(j)
                })
                .collect()
        })
        .collect();
    let n_pred = adj.len();
    let tp = max_bipartite_matching(&adj, n_gt);
    MatchCounts {
        true_positives: tp,
        false_positives: n_pred - tp,
        false_negatives: n_gt - tp,
    }
}
