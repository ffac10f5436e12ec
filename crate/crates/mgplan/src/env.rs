//! Occupancy-grid worlds, exact signed distance fields, and the A* seeding path.

use nalgebra::Vector2;
use thiserror::Error;

use crate::gp::SupportTrajectory;

pub type Point2 = Vector2<f64>;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("grid must be non-empty with positive cell size")]
    EmptyGrid,
    #[error("map parse error: {0}")]
    MapParse(String),
    #[error("start position lies in occupied space")]
    StartInCollision,
    #[error("goal position lies in occupied space")]
    GoalInCollision,
    #[error("no collision-free path between start and goal")]
    NoPath,
    #[error("path needs at least {expected} waypoints, got {got}")]
    PathTooShort { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Boolean occupancy over a regular grid. `origin` is the world position of the
/// grid's lower-left corner; cell (row, col) spans
/// `[origin + (col, row) * cell_size, origin + (col+1, row+1) * cell_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Point2,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(
        origin: Point2,
        cell_size: f64,
        width: usize,
        height: usize,
        cells: Vec<bool>,
    ) -> Result<Self, EnvError> {
        if width == 0 || height == 0 || cell_size <= 0.0 || cells.len() != width * height {
            return Err(EnvError::EmptyGrid);
        }
        Ok(Self {
            origin,
            cell_size,
            width,
            height,
            cells,
        })
    }

    pub fn free(origin: Point2, cell_size: f64, width: usize, height: usize) -> Self {
        Self {
            origin,
            cell_size,
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn set_occupied(&mut self, row: usize, col: usize, occ: bool) {
        self.cells[row * self.width + col] = occ;
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point2 {
        Point2::new(
            self.origin.x + (col as f64 + 0.5) * self.cell_size,
            self.origin.y + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing a world point, or None outside the grid.
    pub fn cell_at(&self, p: &Point2) -> Option<(usize, usize)> {
        let col = ((p.x - self.origin.x) / self.cell_size).floor();
        let row = ((p.y - self.origin.y) / self.cell_size).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            None
        } else {
            Some((row as usize, col as usize))
        }
    }

    /// Copy with additional discs rasterized as occupied cells. A cell is marked
    /// when its center lies within the disc.
    pub fn with_discs(&self, discs: &[(Point2, f64)]) -> OccupancyGrid {
        let mut out = self.clone();
        for &(c, r) in discs {
            let r2 = r * r;
            let min_col = (((c.x - r - self.origin.x) / self.cell_size).floor()).max(0.0) as usize;
            let min_row = (((c.y - r - self.origin.y) / self.cell_size).floor()).max(0.0) as usize;
            let max_col =
                ((((c.x + r - self.origin.x) / self.cell_size).ceil()) as usize).min(self.width);
            let max_row =
                ((((c.y + r - self.origin.y) / self.cell_size).ceil()) as usize).min(self.height);
            for row in min_row..max_row {
                for col in min_col..max_col {
                    let center = self.cell_center(row, col);
                    if (center - c).norm_squared() <= r2 {
                        out.set_occupied(row, col, true);
                    }
                }
            }
        }
        out
    }

    /// Parses the plain-text map format: a header line
    /// `width height cell_size origin_x origin_y`, then `height` rows of `width`
    /// characters, `#` occupied and `.` free. The first character row is the top
    /// of the map (highest y).
    pub fn from_text(text: &str) -> Result<Self, EnvError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| EnvError::MapParse("empty map".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(EnvError::MapParse(format!(
                "header must be 'width height cell_size origin_x origin_y', got '{header}'"
            )));
        }
        let width: usize = parts[0]
            .parse()
            .map_err(|e| EnvError::MapParse(format!("width: {e}")))?;
        let height: usize = parts[1]
            .parse()
            .map_err(|e| EnvError::MapParse(format!("height: {e}")))?;
        let cell_size: f64 = parts[2]
            .parse()
            .map_err(|e| EnvError::MapParse(format!("cell_size: {e}")))?;
        let ox: f64 = parts[3]
            .parse()
            .map_err(|e| EnvError::MapParse(format!("origin_x: {e}")))?;
        let oy: f64 = parts[4]
            .parse()
            .map_err(|e| EnvError::MapParse(format!("origin_y: {e}")))?;
        let mut cells = vec![false; width * height];
        for (k, line) in lines.enumerate() {
            if k >= height {
                return Err(EnvError::MapParse("too many rows".into()));
            }
            let row = height - 1 - k;
            let chars: Vec<char> = line.trim_end().chars().collect();
            if chars.len() != width {
                return Err(EnvError::MapParse(format!(
                    "row {k} has {} cells, expected {width}",
                    chars.len()
                )));
            }
            for (col, ch) in chars.iter().enumerate() {
                cells[row * width + col] = match ch {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(EnvError::MapParse(format!("unknown cell char '{other}'")))
                    }
                };
            }
        }
        OccupancyGrid::new(Point2::new(ox, oy), cell_size, width, height, cells)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {}\n",
            self.width, self.height, self.cell_size, self.origin.x, self.origin.y
        );
        for row in (0..self.height).rev() {
            for col in 0..self.width {
                s.push(if self.is_occupied(row, col) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

/// Signed distances over the cells of a source grid: positive in free space
/// (distance to the nearest occupied cell center), negative inside obstacles
/// (distance to the nearest free cell center), in meters.
#[derive(Debug, Clone)]
pub struct SignedDistanceField {
    pub origin: Point2,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
}

/// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher),
/// 1-D pass over sampled parabolas.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let first = match (0..n).find(|&i| f[i].is_finite()) {
        Some(i) => i,
        None => {
            out[..n].fill(f64::INFINITY);
            return;
        }
    };
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // s is finite and z[0] = -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k] as f64;
        out[q] = (q as f64 - p) * (q as f64 - p) + f[v[k]];
    }
}

/// Squared cell-index distances from each cell to the nearest seed cell.
/// Cells with `seed = true` get 0. Returns INFINITY where no seed exists.
fn edt_2d(seed: impl Fn(usize, usize) -> bool, width: usize, height: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; width * height];
    // column pass
    let mut col_buf = vec![f64::INFINITY; height];
    let mut col_out = vec![0.0; height];
    for col in 0..width {
        let mut any = false;
        for row in 0..height {
            let s = seed(row, col);
            col_buf[row] = if s { 0.0 } else { f64::INFINITY };
            any |= s;
        }
        if any {
            edt_1d(&col_buf, &mut col_out);
            for row in 0..height {
                dist[row * width + col] = col_out[row];
            }
        }
    }
    // row pass
    let mut row_buf = vec![f64::INFINITY; width];
    let mut row_out = vec![0.0; width];
    for row in 0..height {
        let mut any = false;
        for col in 0..width {
            row_buf[col] = dist[row * width + col];
            any |= row_buf[col].is_finite();
        }
        if any {
            edt_1d(&row_buf, &mut row_out);
            for col in 0..width {
                dist[row * width + col] = row_out[col];
            }
        } else {
            for col in 0..width {
                dist[row * width + col] = f64::INFINITY;
            }
        }
    }
    dist
}

impl SignedDistanceField {
    /// Computes the field by exact Euclidean distance transforms over cell
    /// centers, scaled by the cell size. Cells beyond the grid border count as
    /// free for the inside-obstacle distances. An all-free grid yields the
    /// grid-diagonal sentinel everywhere.
    pub fn compute(grid: &OccupancyGrid) -> Self {
        let (w, h) = (grid.width, grid.height);
        let diag =
            ((w as f64 * w as f64 + h as f64 * h as f64).sqrt()) * grid.cell_size;
        let d_occ = edt_2d(|r, c| grid.is_occupied(r, c), w, h);
        let d_free = edt_2d(|r, c| !grid.is_occupied(r, c), w, h);
        let mut values = vec![0.0f64; w * h];
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                let v = if grid.is_occupied(row, col) {
                    // border cells see the virtual free ring outside the grid
                    let border = (row + 1).min(h - row).min(col + 1).min(w - col) as f64;
                    let inner = d_free[i].sqrt().min(border);
                    -inner * grid.cell_size
                } else if d_occ[i].is_finite() {
                    d_occ[i].sqrt() * grid.cell_size
                } else {
                    diag
                };
                values[i] = v;
            }
        }
        Self {
            origin: grid.origin,
            cell_size: grid.cell_size,
            width: w,
            height: h,
            values,
        }
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Bilinear interpolation of the four surrounding cell-center values and the
    /// analytic gradient of that patch. Points outside the field clamp to the
    /// border cells.
    pub fn query(&self, p: &Point2) -> (f64, Point2) {
        let u = (p.x - self.origin.x) / self.cell_size - 0.5;
        let v = (p.y - self.origin.y) / self.cell_size - 0.5;
        let (c0, c1, fx) = clamp_axis(u, self.width);
        let (r0, r1, fy) = clamp_axis(v, self.height);
        let v00 = self.value(r0, c0);
        let v01 = self.value(r0, c1);
        let v10 = self.value(r1, c0);
        let v11 = self.value(r1, c1);
        let value = v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy
            + v11 * fx * fy;
        let gx = ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) / self.cell_size;
        let gy = ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx) / self.cell_size;
        (value, Point2::new(gx, gy))
    }
}

/// Continuous coordinate -> (lower cell, upper cell, fraction), clamped to the
/// border band so that out-of-range queries hold the edge value with zero
/// gradient along the clamped axis.
fn clamp_axis(u: f64, n: usize) -> (usize, usize, f64) {
    if u <= 0.0 {
        (0, 0, 0.0)
    } else if u >= (n - 1) as f64 {
        (n - 1, n - 1, 0.0)
    } else {
        let i = u.floor() as usize;
        (i, i + 1, u - i as f64)
    }
}

/// Waypoints (cell centers, meters) of a grid search path.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub waypoints: Vec<Point2>,
}

impl GridPath {
    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum()
    }
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Minimal-cost 8-connected path on the inflated, downsampled grid.
///
/// Costs are 1 per straight move and sqrt(2) per diagonal, with the admissible
/// Euclidean heuristic and deterministic tie-breaking by (f, h, row-major index).
/// Obstacles are first inflated by `inflation` meters on the fine grid, then the
/// grid is coarsened by `downsample` (a coarse cell is occupied if any
/// constituent fine cell is).
pub fn astar_path(
    grid: &OccupancyGrid,
    start: &Point2,
    goal: &Point2,
    downsample: usize,
    inflation: f64,
) -> Result<GridPath, EnvError> {
    if downsample == 0 {
        return Err(EnvError::InvalidArgument("downsample must be >= 1".into()));
    }
    // inflate on the fine grid via the SDF
    let sdf = SignedDistanceField::compute(grid);
    let mut inflated = grid.clone();
    for row in 0..grid.height {
        for col in 0..grid.width {
            if sdf.value(row, col) <= inflation {
                inflated.set_occupied(row, col, true);
            }
        }
    }
    // coarsen
    let cw = grid.width.div_ceil(downsample);
    let ch = grid.height.div_ceil(downsample);
    let coarse_size = grid.cell_size * downsample as f64;
    let mut coarse = OccupancyGrid::free(grid.origin, coarse_size, cw, ch);
    for row in 0..grid.height {
        for col in 0..grid.width {
            if inflated.is_occupied(row, col) {
                coarse.set_occupied(row / downsample, col / downsample, true);
            }
        }
    }
    let start_cell = coarse
        .cell_at(start)
        .ok_or_else(|| EnvError::InvalidArgument("start outside grid".into()))?;
    let goal_cell = coarse
        .cell_at(goal)
        .ok_or_else(|| EnvError::InvalidArgument("goal outside grid".into()))?;
    if coarse.is_occupied(start_cell.0, start_cell.1) {
        return Err(EnvError::StartInCollision);
    }
    if coarse.is_occupied(goal_cell.0, goal_cell.1) {
        return Err(EnvError::GoalInCollision);
    }

    let idx = |r: usize, c: usize| r * cw + c;
    let heuristic = |r: usize, c: usize| {
        let dr = r as f64 - goal_cell.0 as f64;
        let dc = c as f64 - goal_cell.1 as f64;
        (dr * dr + dc * dc).sqrt()
    };

    #[derive(PartialEq)]
    struct Node {
        f: f64,
        h: f64,
        idx: usize,
    }
    impl Eq for Node {}
    impl Ord for Node {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // reversed: BinaryHeap is a max-heap, we want the smallest (f, h, idx)
            other
                .f
                .total_cmp(&self.f)
                .then(other.h.total_cmp(&self.h))
                .then(other.idx.cmp(&self.idx))
        }
    }
    impl PartialOrd for Node {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let mut g = vec![f64::INFINITY; cw * ch];
    let mut parent = vec![usize::MAX; cw * ch];
    let mut closed = vec![false; cw * ch];
    let mut heap = std::collections::BinaryHeap::new();
    let s = idx(start_cell.0, start_cell.1);
    g[s] = 0.0;
    heap.push(Node {
        f: heuristic(start_cell.0, start_cell.1),
        h: heuristic(start_cell.0, start_cell.1),
        idx: s,
    });
    let goal_idx = idx(goal_cell.0, goal_cell.1);
    const STEPS: [(isize, isize, f64); 8] = [
        (-1, -1, SQRT2),
        (-1, 0, 1.0),
        (-1, 1, SQRT2),
        (0, -1, 1.0),
        (0, 1, 1.0),
        (1, -1, SQRT2),
        (1, 0, 1.0),
        (1, 1, SQRT2),
    ];
    let mut found = false;
    while let Some(node) = heap.pop() {
        let cur = node.idx;
        if closed[cur] {
            continue;
        }
        closed[cur] = true;
        if cur == goal_idx {
            found = true;
            break;
        }
        let (r, c) = (cur / cw, cur % cw);
        for &(dr, dc, cost) in &STEPS {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr < 0 || nc < 0 || nr >= ch as isize || nc >= cw as isize {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if coarse.is_occupied(nr, nc) {
                continue;
            }
            let ni = idx(nr, nc);
            let ng = g[cur] + cost;
            if ng < g[ni] {
                g[ni] = ng;
                parent[ni] = cur;
                let h = heuristic(nr, nc);
                heap.push(Node { f: ng + h, h, idx: ni });
            }
        }
    }
    if !found {
        return Err(EnvError::NoPath);
    }
    let mut cells = vec![goal_idx];
    let mut cur = goal_idx;
    while cur != s {
        cur = parent[cur];
        cells.push(cur);
    }
    cells.reverse();
    let waypoints = cells
        .into_iter()
        .map(|i| coarse.cell_center(i / cw, i % cw))
        .collect();
    Ok(GridPath { waypoints })
}

/// Resamples a polyline at N+1 arc-length-equidistant points into a support
/// trajectory with speed `length / (t_end - t0)` along the local tangent.
/// A zero-length path yields a constant trajectory with zero velocity.
pub fn path_to_trajectory(
    path: &GridPath,
    num_intervals: usize,
    t0: f64,
    t_end: f64,
) -> Result<SupportTrajectory, EnvError> {
    resample_path(path, num_intervals, t0, t_end, |u| (u, 1.0))
}

/// Resampling with a monotone progress warp: `warp(u) -> (w, w')` maps the
/// schedule fraction u to the arc-length fraction w, with w(0)=0 and w(1)=1.
/// The identity warp gives arc-length-equidistant knots.
pub(crate) fn resample_path(
    path: &GridPath,
    num_intervals: usize,
    t0: f64,
    t_end: f64,
    warp: impl Fn(f64) -> (f64, f64),
) -> Result<SupportTrajectory, EnvError> {
    if path.waypoints.len() < 2 {
        return Err(EnvError::PathTooShort {
            expected: 2,
            got: path.waypoints.len(),
        });
    }
    if num_intervals < 1 || t_end <= t0 {
        return Err(EnvError::InvalidArgument(
            "need num_intervals >= 1 and t_end > t0".into(),
        ));
    }
    let wps = &path.waypoints;
    let mut cum = Vec::with_capacity(wps.len());
    cum.push(0.0);
    for w in wps.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let horizon = t_end - t0;
    let n = num_intervals;
    let mut states = Vec::with_capacity(n + 1);
    if total == 0.0 {
        for _ in 0..=n {
            let p = wps[0];
            states.push(nalgebra::DVector::from_column_slice(&[p.x, p.y, 0.0, 0.0]));
        }
        return Ok(SupportTrajectory::new(t0, t_end, states).expect("valid by construction"));
    }
    let speed = total / horizon;
    let mut seg = 0usize;
    for k in 0..=n {
        let (_, dw) = warp(k as f64 / n as f64);
        let (pos, tangent) = if k == 0 {
            (wps[0], unit_tangent(wps, 0))
        } else if k == n {
            (wps[wps.len() - 1], unit_tangent(wps, wps.len() - 2))
        } else {
            let (w, _) = warp(k as f64 / n as f64);
            let target = total * w;
            while seg + 2 < cum.len() && cum[seg + 1] < target {
                seg += 1;
            }
            let seg_len = cum[seg + 1] - cum[seg];
            let frac = if seg_len > 0.0 {
                (target - cum[seg]) / seg_len
            } else {
                0.0
            };
            let pos = wps[seg] + (wps[seg + 1] - wps[seg]) * frac;
            (pos, unit_tangent(wps, seg))
        };
        let v = tangent * (speed * dw);
        states.push(nalgebra::DVector::from_column_slice(&[pos.x, pos.y, v.x, v.y]));
    }
    Ok(SupportTrajectory::new(t0, t_end, states).expect("valid by construction"))
}

fn unit_tangent(wps: &[Point2], seg: usize) -> Point2 {
    // skip zero-length segments so endpoints of degenerate polylines still get
    // a direction when one exists
    let mut s = seg;
    loop {
        let d = wps[s + 1] - wps[s];
        let n = d.norm();
        if n > 0.0 {
            return d / n;
        }
        if s + 2 < wps.len() {
            s += 1;
        } else {
            return Point2::new(0.0, 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_sdf(grid: &OccupancyGrid) -> Vec<f64> {
        let (w, h) = (grid.width, grid.height);
        let diag = ((w * w + h * h) as f64).sqrt() * grid.cell_size;
        let mut out = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let mut best = f64::INFINITY;
                let target = grid.is_occupied(r, c);
                for r2 in 0..h {
                    for c2 in 0..w {
                        if grid.is_occupied(r2, c2) != target {
                            let d = (((r as f64 - r2 as f64).powi(2)
                                + (c as f64 - c2 as f64).powi(2))
                            .sqrt())
                                * grid.cell_size;
                            best = best.min(d);
                        }
                    }
                }
                if target {
                    // virtual free ring beyond the border
                    let border = (r + 1).min(h - r).min(c + 1).min(w - c) as f64 * grid.cell_size;
                    best = best.min(border);
                    out[r * w + c] = -best;
                } else {
                    out[r * w + c] = if best.is_finite() { best } else { diag };
                }
            }
        }
        out
    }

    fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> OccupancyGrid {
        let cells = (0..w * h).map(|_| rng.gen_bool(p)).collect();
        OccupancyGrid::new(Point2::new(0.0, 0.0), 1.0, w, h, cells).unwrap()
    }

    #[test]
    fn sdf_all_free_sentinel() {
        let grid = OccupancyGrid::free(Point2::new(0.0, 0.0), 0.5, 8, 6);
        let sdf = SignedDistanceField::compute(&grid);
        let diag = ((64.0_f64 + 36.0).sqrt()) * 0.5;
        for r in 0..6 {
            for c in 0..8 {
                assert_eq!(sdf.value(r, c), diag);
            }
        }
    }

    #[test]
    fn sdf_single_occupied_cell() {
        let mut grid = OccupancyGrid::free(Point2::new(0.0, 0.0), 1.0, 7, 7);
        grid.set_occupied(3, 3, true);
        let sdf = SignedDistanceField::compute(&grid);
        assert_eq!(sdf.value(3, 3), -1.0);
        assert_eq!(sdf.value(3, 4), 1.0);
        assert_eq!(sdf.value(3, 2), 1.0);
        assert_eq!(sdf.value(2, 3), 1.0);
        assert_eq!(sdf.value(4, 3), 1.0);
        assert_relative_eq!(sdf.value(4, 4), std::f64::consts::SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn sdf_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (w, h, p) in [(5, 5, 0.3), (12, 9, 0.2), (32, 32, 0.1), (16, 16, 0.6)] {
            let grid = random_grid(&mut rng, w, h, p);
            let sdf = SignedDistanceField::compute(&grid);
            let oracle = brute_force_sdf(&grid);
            for r in 0..h {
                for c in 0..w {
                    assert_relative_eq!(sdf.value(r, c), oracle[r * w + c], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn sdf_mirror_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = random_grid(&mut rng, 10, 8, 0.25);
        let mut mirrored = OccupancyGrid::free(Point2::new(0.0, 0.0), 1.0, 10, 8);
        for r in 0..8 {
            for c in 0..10 {
                mirrored.set_occupied(r, 9 - c, grid.is_occupied(r, c));
            }
        }
        let sdf = SignedDistanceField::compute(&grid);
        let sdf_m = SignedDistanceField::compute(&mirrored);
        for r in 0..8 {
            for c in 0..10 {
                assert_eq!(sdf.value(r, c), sdf_m.value(r, 9 - c));
            }
        }
    }

    #[test]
    fn sdf_lipschitz_between_cells() {
        // same-sign pairs obey the 1-Lipschitz bound; across the sign change the
        // center-to-center convention adds at most one cell of slack
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = random_grid(&mut rng, 14, 14, 0.25);
        let sdf = SignedDistanceField::compute(&grid);
        for r in 0..14 {
            for c in 0..14 {
                for (r2, c2) in [(r, c + 1), (r + 1, c)] {
                    if r2 >= 14 || c2 >= 14 {
                        continue;
                    }
                    let a = sdf.value(r, c);
                    let b = sdf.value(r2, c2);
                    let slack = if a.signum() == b.signum() { 0.0 } else { 1.0 };
                    assert!(
                        (a - b).abs() <= 1.0 + slack + 1e-9,
                        "cells ({r},{c})={a} ({r2},{c2})={b}"
                    );
                }
            }
        }
    }

    #[test]
    fn query_at_cell_center_is_exact() {
        let mut grid = OccupancyGrid::free(Point2::new(0.0, 0.0), 1.0, 9, 9);
        grid.set_occupied(4, 4, true);
        let sdf = SignedDistanceField::compute(&grid);
        for r in 0..9 {
            for c in 0..9 {
                let (v, _) = sdf.query(&grid.cell_center(r, c));
                assert_eq!(v, sdf.value(r, c));
            }
        }
        // midpoint of two horizontally adjacent centers: arithmetic mean
        let a = grid.cell_center(2, 3);
        let b = grid.cell_center(2, 4);
        let (v, _) = sdf.query(&Point2::new((a.x + b.x) / 2.0, a.y));
        assert_relative_eq!(v, (sdf.value(2, 3) + sdf.value(2, 4)) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn query_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let grid = random_grid(&mut rng, 20, 20, 0.2);
        let sdf = SignedDistanceField::compute(&grid);
        let step = 1e-6 * grid.cell_size;
        let mut checked = 0;
        while checked < 50 {
            // interior points away from cell-boundary gradient discontinuities
            let x: f64 = rng.gen_range(2.0..18.0);
            let y: f64 = rng.gen_range(2.0..18.0);
            let fx = (x - 0.5).fract();
            let fy = (y - 0.5).fract();
            if fx < 0.01 || fx > 0.99 || fy < 0.01 || fy > 0.99 {
                continue;
            }
            let p = Point2::new(x, y);
            let (_, grad) = sdf.query(&p);
            let gx = (sdf.query(&Point2::new(x + step, y)).0
                - sdf.query(&Point2::new(x - step, y)).0)
                / (2.0 * step);
            let gy = (sdf.query(&Point2::new(x, y + step)).0
                - sdf.query(&Point2::new(x, y - step)).0)
                / (2.0 * step);
            let fd = Point2::new(gx, gy);
            assert!(
                (grad - fd).norm() <= 1e-5 * fd.norm().max(1.0),
                "at {p:?}: {grad:?} vs {fd:?}"
            );
            checked += 1;
        }
    }

    #[test]
    fn query_continuous_across_cell_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let grid = random_grid(&mut rng, 12, 12, 0.3);
        let sdf = SignedDistanceField::compute(&grid);
        for _ in 0..200 {
            // a point on a vertical interpolation-cell edge
            let x = rng.gen_range(1..11) as f64 + 0.5;
            let y = rng.gen_range(1.0..11.0);
            let left = sdf.query(&Point2::new(x - 1e-11, y)).0;
            let right = sdf.query(&Point2::new(x + 1e-11, y)).0;
            assert!((left - right).abs() < 1e-9);
        }
    }

    #[test]
    fn query_outside_clamps() {
        let mut grid = OccupancyGrid::free(Point2::new(0.0, 0.0), 1.0, 5, 5);
        grid.set_occupied(2, 2, true);
        let sdf = SignedDistanceField::compute(&grid);
        let (v, g) = sdf.query(&Point2::new(-10.0, 2.5));
        assert_eq!(v, sdf.value(2, 0));
        assert_eq!(g.x, 0.0);
    }

    #[test]
    fn astar_straight_line_on_empty_grid() {
        let grid = OccupancyGrid::free(Point2::new(0.0, 0.0), 1.0, 10, 10);
        let path = astar_path(
            &grid,
            &Point2::new(1.5, 4.5),
            &Point2::new(8.5, 4.5),
            1,
            0.0,
        )
        .unwrap();
        assert_eq!(path.waypoints.len(), 8);
        for w in &path.waypoints {
            assert_eq!(w.y, 4.5);
        }
        assert_relative_eq!(path.length(), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn astar_enclosed_goal_has_no_path() {
        let mut grid = OccupancyGrid::free(Point2::new(0.0, 0.0), 1.0, 12, 12);
        for (r, c) in [
            (4, 4),
            (4, 5),
            (4, 6),
            (5, 4),
            (5, 6),
            (6, 4),
            (6, 5),
            (6, 6),
        ] {
            grid.set_occupied(r, c, true);
        }
        let res = astar_path(
            &grid,
            &Point2::new(1.5, 1.5),
            &Point2::new(5.5, 5.5),
            1,
            0.0,
        );
        assert!(matches!(res, Err(EnvError::NoPath)));
    }

    #[test]
    fn astar_start_in_collision() {
        let mut grid = OccupancyGrid::free(Point2::new(0.0, 0.0), 1.0, 6, 6);
        grid.set_occupied(2, 2, true);
        let res = astar_path(
            &grid,
            &Point2::new(2.5, 2.5),
            &Point2::new(5.5, 5.5),
            1,
            0.0,
        );
        assert!(matches!(res, Err(EnvError::StartInCollision)));
    }

    fn dijkstra_cost(grid: &OccupancyGrid, start: (usize, usize), goal: (usize, usize)) -> f64 {
        let (w, h) = (grid.width, grid.height);
        let idx = |r: usize, c: usize| r * w + c;
        let mut dist = vec![f64::INFINITY; w * h];
        dist[idx(start.0, start.1)] = 0.0;
        let mut heap = std::collections::BinaryHeap::new();
        heap.push((std::cmp::Reverse(ordered(0.0)), idx(start.0, start.1)));
        while let Some((std::cmp::Reverse(dv), u)) = heap.pop() {
            let du = dv.0;
            if du > dist[u] {
                continue;
            }
            let (r, c) = (u / w, u % w);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let nr = r as isize + dr;
                    let nc = c as isize + dc;
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if grid.is_occupied(nr, nc) {
                        continue;
                    }
                    let cost = if dr != 0 && dc != 0 { SQRT2 } else { 1.0 };
                    let nd = du + cost;
                    if nd < dist[idx(nr, nc)] {
                        dist[idx(nr, nc)] = nd;
                        heap.push((std::cmp::Reverse(ordered(nd)), idx(nr, nc)));
                    }
                }
            }
        }
        dist[idx(goal.0, goal.1)]
    }

    #[derive(PartialEq, PartialOrd)]
    struct Ordered(f64);
    impl Eq for Ordered {}
    #[allow(clippy::derive_ord_xor_partial_ord)]
    impl Ord for Ordered {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0)
        }
    }
    fn ordered(v: f64) -> Ordered {
        Ordered(v)
    }

    #[test]
    fn astar_cost_matches_dijkstra_on_random_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut tested = 0;
        while tested < 5 {
            let grid = random_grid(&mut rng, 20, 20, 0.25);
            if grid.is_occupied(0, 0) || grid.is_occupied(19, 19) {
                continue;
            }
            let start = Point2::new(0.5, 0.5);
            let goal = Point2::new(19.5, 19.5);
            let oracle = dijkstra_cost(&grid, (0, 0), (19, 19));
            match astar_path(&grid, &start, &goal, 1, 0.0) {
                Ok(path) => {
                    assert_relative_eq!(path.length(), oracle, epsilon = 1e-9);
                    // admissibility witness
                    assert!(path.length() >= (goal - start).norm() - 1e-9);
                }
                Err(EnvError::NoPath) => assert!(oracle.is_infinite()),
                Err(e) => panic!("unexpected error {e}"),
            }
            tested += 1;
        }
    }

    #[test]
    fn path_resampling_straight_line() {
        let path = GridPath {
            waypoints: vec![Point2::new(0.0, 0.0), Point2::new(10.0, 0.0)],
        };
        let traj = path_to_trajectory(&path, 2, 0.0, 10.0).unwrap();
        assert_eq!(traj.states.len(), 3);
        for (k, s) in traj.states.iter().enumerate() {
            assert_relative_eq!(s[0], 5.0 * k as f64, epsilon = 1e-12);
            assert_eq!(s[1], 0.0);
            assert_relative_eq!(s[2], 1.0, epsilon = 1e-12);
            assert_eq!(s[3], 0.0);
        }
    }

    #[test]
    fn path_resampling_l_shape_matches_arclength_oracle() {
        let path = GridPath {
            waypoints: vec![
                Point2::new(0.0, 0.0),
                Point2::new(4.0, 0.0),
                Point2::new(4.0, 6.0),
            ],
        };
        let n = 7;
        let traj = path_to_trajectory(&path, n, 0.0, 5.0).unwrap();
        let total = 10.0;
        // dense arc-length table oracle
        let dense: Vec<Point2> = (0..=100_000)
            .map(|i| {
                let s = total * i as f64 / 100_000.0;
                if s <= 4.0 {
                    Point2::new(s, 0.0)
                } else {
                    Point2::new(4.0, s - 4.0)
                }
            })
            .collect();
        for (k, st) in traj.states.iter().enumerate() {
            let target = total * k as f64 / n as f64;
            let t = (target / total) * 100_000.0;
            let i = (t.floor() as usize).min(99_999);
            let frac = t - i as f64;
            let expect = dense[i] + (dense[i + 1] - dense[i]) * frac;
            assert_relative_eq!(st[0], expect.x, epsilon = 1e-9);
            assert_relative_eq!(st[1], expect.y, epsilon = 1e-9);
            // constant speed at every knot
            let speed = (st[2] * st[2] + st[3] * st[3]).sqrt();
            assert_relative_eq!(speed, total / 5.0, epsilon = 1e-9);
        }
        // endpoints preserved bit-exactly
        assert_eq!(traj.states[0][0], 0.0);
        assert_eq!(traj.states[0][1], 0.0);
        assert_eq!(traj.states[n][0], 4.0);
        assert_eq!(traj.states[n][1], 6.0);
    }

    #[test]
    fn path_resampling_degenerate_zero_length() {
        let path = GridPath {
            waypoints: vec![Point2::new(1.0, 2.0), Point2::new(1.0, 2.0)],
        };
        let traj = path_to_trajectory(&path, 3, 0.0, 6.0).unwrap();
        for s in &traj.states {
            assert_eq!(s.as_slice(), &[1.0, 2.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn map_file_round_trip() {
        let text = "5 3 0.5 -1 2\n##..#\n.....\n#...#\n";
        let grid = OccupancyGrid::from_text(text).unwrap();
        assert_eq!(grid.width, 5);
        assert_eq!(grid.height, 3);
        assert_eq!(grid.cell_size, 0.5);
        assert_eq!(grid.origin, Point2::new(-1.0, 2.0));
        // first text row is the top (row 2)
        assert!(grid.is_occupied(2, 0));
        assert!(grid.is_occupied(2, 1));
        assert!(!grid.is_occupied(2, 2));
        assert!(grid.is_occupied(0, 0));
        assert!(!grid.is_occupied(1, 0));
        let grid2 = OccupancyGrid::from_text(&grid.to_text()).unwrap();
        assert_eq!(grid, grid2);
    }

    #[test]
    fn map_file_rejects_garbage() {
        assert!(OccupancyGrid::from_text("").is_err());
        assert!(OccupancyGrid::from_text("3 1 1 0 0\n#x#\n").is_err());
        assert!(OccupancyGrid::from_text("3 1 1 0 0\n##\n").is_err());
    }
}
