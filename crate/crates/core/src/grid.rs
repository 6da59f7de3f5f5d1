//! Row-major grid helpers shared by generation, planning and simulation.
//!
//! Cells are `(x, y)` with `x` the column; index is `y * width + x`.

use std::collections::VecDeque;

pub type Cell = (usize, usize);

/// Obstacle threshold on normalized map values.
pub const OBSTACLE_LEVEL: f32 = 0.95;

#[inline]
pub fn idx(width: usize, c: Cell) -> usize {
    c.1 * width + c.0
}

#[inline]
pub fn cell_of(width: usize, i: usize) -> Cell {
    (i % width, i / width)
}

pub const STEPS8: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

/// Legal 8-connected moves from `c`. Diagonal moves may not cut the corner of a blocked cell.
pub fn moves(blocked: &[bool], width: usize, height: usize, c: Cell) -> impl Iterator<Item = (Cell, bool)> + '_ {
    let (x, y) = (c.0 as isize, c.1 as isize);
    STEPS8.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
            return None;
        }
        let n = (nx as usize, ny as usize);
        if blocked[idx(width, n)] {
            return None;
        }
        let diag = dx != 0 && dy != 0;
        if diag
            && (blocked[idx(width, (nx as usize, c.1))] || blocked[idx(width, (c.0, ny as usize))])
        {
            return None;
        }
        Some((n, diag))
    })
}

/// Cells reachable from `start` under [`moves`].
pub fn flood(blocked: &[bool], width: usize, height: usize, start: Cell) -> Vec<bool> {
    let mut seen = vec![false; blocked.len()];
    if blocked[idx(width, start)] {
        return seen;
    }
    let mut q = VecDeque::from([start]);
    seen[idx(width, start)] = true;
    while let Some(c) = q.pop_front() {
        for (n, _) in moves(blocked, width, height, c) {
            let i = idx(width, n);
            if !seen[i] {
                seen[i] = true;
                q.push_back(n);
            }
        }
    }
    seen
}

/// Cells with Euclidean distance at most `r` from `c`, in index order.
pub fn disk(width: usize, height: usize, c: Cell, r: f64) -> Vec<Cell> {
    let ri = r.floor() as isize;
    let mut out = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dx * dx + dy * dy) as f64) > r * r + 1e-9 {
                continue;
            }
            let (x, y) = (c.0 as isize + dx, c.1 as isize + dy);
            if x >= 0 && y >= 0 && x < width as isize && y < height as isize {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

/// Octile distance between two cells.
pub fn octile(a: Cell, b: Cell) -> f64 {
    let dx = a.0.abs_diff(b.0) as f64;
    let dy = a.1.abs_diff(b.1) as f64;
    dx.max(dy) - dx.min(dy) + std::f64::consts::SQRT_2 * dx.min(dy)
}

/// Cells on the Bresenham segment from `a` to `b`, both endpoints included.
pub fn bresenham(a: Cell, b: Cell) -> Vec<Cell> {
    let (mut x0, mut y0) = (a.0 as isize, a.1 as isize);
    let (x1, y1) = (b.0 as isize, b.1 as isize);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x0 as usize, y0 as usize));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_two_disk_has_thirteen_cells() {
        assert_eq!(disk(9, 9, (4, 4), 2.0).len(), 13);
        assert_eq!(disk(9, 9, (0, 0), 2.0).len(), 6);
    }

    #[test]
    fn no_corner_cutting() {
        // . #
        // # .
        let blocked = [false, true, true, false];
        assert_eq!(moves(&blocked, 2, 2, (0, 0)).count(), 0);
    }

    #[test]
    fn bresenham_endpoints() {
        let l = bresenham((0, 0), (3, 1));
        assert_eq!(l.first(), Some(&(0, 0)));
        assert_eq!(l.last(), Some(&(3, 1)));
        assert_eq!(l.len(), 4);
    }
}
