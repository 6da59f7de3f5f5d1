//! Octile A* on 8-connected grids.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use crate::grid::{idx, moves, octile, Cell};

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub cells: Vec<Cell>,
    pub cost: f64,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    h: f64,
    i: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // BinaryHeap is a max-heap; invert so the smallest (f, h, index) pops first.
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.total_cmp(&self.f)
            .then(o.h.total_cmp(&self.h))
            .then(o.i.cmp(&self.i))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Optimal 8-connected path (unit / √2 step costs). `None` when the goal is unreachable
/// or either endpoint is blocked.
pub fn astar(blocked: &[bool], width: usize, height: usize, start: Cell, goal: Cell) -> Option<Path> {
    let (s, g) = (idx(width, start), idx(width, goal));
    if blocked[s] || blocked[g] {
        return None;
    }
    let n = blocked.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    dist[s] = 0.0;
    let h0 = octile(start, goal);
    open.push(Open { f: h0, h: h0, i: s });
    while let Some(Open { i, .. }) = open.pop() {
        if closed[i] {
            continue;
        }
        closed[i] = true;
        if i == g {
            let mut cells = vec![goal];
            let mut cur = g;
            while cur != s {
                cur = parent[cur];
                cells.push((cur % width, cur / width));
            }
            cells.reverse();
            return Some(Path { cells, cost: dist[g] });
        }
        let c = (i % width, i / width);
        for (nb, diag) in moves(blocked, width, height, c) {
            let j = idx(width, nb);
            if closed[j] {
                continue;
            }
            let nd = dist[i] + if diag { SQRT_2 } else { 1.0 };
            if nd < dist[j] {
                dist[j] = nd;
                parent[j] = i;
                let h = octile(nb, goal);
                open.push(Open { f: nd + h, h, i: j });
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_and_diagonal() {
        let free = vec![false; 25];
        let p = astar(&free, 5, 5, (0, 0), (0, 4)).unwrap();
        assert_eq!(p.cost, 4.0);
        assert_eq!(p.cells.len(), 5);
        let p = astar(&free, 5, 5, (0, 0), (4, 4)).unwrap();
        assert!((p.cost - 4.0 * SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn unreachable_is_none() {
        let mut b = vec![false; 25];
        for y in 0..5 {
            b[y * 5 + 2] = true;
        }
        assert!(astar(&b, 5, 5, (0, 0), (4, 0)).is_none());
        assert_eq!(astar(&b, 5, 5, (0, 0), (0, 0)).unwrap().cost, 0.0);
    }
}
