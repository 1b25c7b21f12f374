//! Minimum-cost one-to-one assignment (Hungarian method with potentials).
//!
//! Among all optimal assignments the lexicographically smallest column vector
//! is returned, so equal-cost ties resolve identically on every run.

/// Solve a rectangular assignment problem.
///
/// Returns, for every row, the assigned column or `None` when the row is left
/// unmatched (only possible when there are more rows than columns). The matrix
/// is implicitly padded with zero-cost dummy rows/columns placed after the real ones.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    assert!(cost.iter().all(|r| r.len() == cols), "ragged cost matrix");
    if cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let a = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };

    // 1-based potentials; p[j] is the row matched to column j, 0 = none.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    let mut col_to_row = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
        col_to_row[j - 1] = p[j] - 1;
    }

    // Every optimal assignment is a perfect matching on the tight edges of the
    // optimal dual; walk rows in order and take the smallest feasible column.
    let scale = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| a(i, j).abs())
        .fold(1.0, f64::max);
    let tol = 1e-9 * scale * n as f64;
    let tight = |i: usize, j: usize| a(i, j) - u[i + 1] - v[j + 1] <= tol;
    for i in 0..n {
        for c in 0..row_to_col[i] {
            if !tight(i, c) || col_to_row[c] < i {
                continue;
            }
            let target = row_to_col[i];
            let mut seen = vec![false; n];
            let mut path = Vec::new();
            if alternating_path(col_to_row[c], target, i, &row_to_col, &col_to_row, &tight, &mut seen, &mut path) {
                // path holds (row, new column) moves ending at `target`
                for (r, nc) in path {
                    row_to_col[r] = nc;
                    col_to_row[nc] = r;
                }
                row_to_col[i] = c;
                col_to_row[c] = i;
                break;
            }
        }
    }
    row_to_col
        .into_iter()
        .take(rows)
        .map(|c| (c < cols).then_some(c))
        .collect()
}

/// DFS for a reassignment of `row` (and followers) that frees a path ending at `target`,
/// using only rows after `fixed`.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    row: usize,
    target: usize,
    fixed: usize,
    row_to_col: &[usize],
    col_to_row: &[usize],
    tight: &dyn Fn(usize, usize) -> bool,
    seen: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    seen[row] = true;
    for c in 0..row_to_col.len() {
        if c == row_to_col[row] || !tight(row, c) {
            continue;
        }
        if c == target {
            path.push((row, c));
            return true;
        }
        let owner = col_to_row[c];
        if owner <= fixed || seen[owner] {
            continue;
        }
        path.push((row, c));
        if alternating_path(owner, target, fixed, row_to_col, col_to_row, tight, seen, path) {
            return true;
        }
        path.pop();
    }
    false
}

/// Total cost of an assignment (unmatched rows contribute nothing).
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| cost[i][c]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_picks_diagonal() {
        let c = vec![vec![1.0, 10.0], vec![10.0, 1.0]];
        assert_eq!(solve_assignment(&c), vec![Some(0), Some(1)]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let c = vec![vec![1.0; 3]; 3];
        assert_eq!(solve_assignment(&c), vec![Some(0), Some(1), Some(2)]);
        let c = vec![vec![0.0, 0.0], vec![5.0, 5.0]];
        assert_eq!(solve_assignment(&c), vec![Some(0), Some(1)]);
    }

    #[test]
    fn rectangular_shapes() {
        let wide = vec![vec![5.0, 1.0, 3.0]];
        assert_eq!(solve_assignment(&wide), vec![Some(1)]);
        let tall = vec![vec![5.0], vec![1.0], vec![3.0]];
        assert_eq!(solve_assignment(&tall), vec![None, Some(0), None]);
        assert!(solve_assignment(&[]).is_empty());
    }
}
