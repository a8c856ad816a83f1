use super::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `columns[i]` is the column assigned to row `i`.
    pub columns: Vec<usize>,
    pub total: f64,
}

/// Permutation maximizing `Σ score[i, π(i)]`. Among optimal permutations the
/// lexicographically smallest one is returned.
pub fn hungarian_max(score: &DenseMatrix) -> Result<Assignment> {
    if !score.is_square() {
        return Err(Error::NotSquare { rows: score.rows(), cols: score.cols() });
    }
    if !score.all_finite() {
        return Err(Error::NonFinite("assignment score matrix".into()));
    }
    let n = score.rows();
    if n == 0 {
        return Ok(Assignment { columns: Vec::new(), total: 0.0 });
    }
    let cost: Vec<Vec<f64>> = (0..n).map(|i| score.row(i).iter().map(|x| -x).collect()).collect();
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..n).collect();
    let (best, _) = min_cost_assignment(&cost, &rows, &cols);
    let scale = score.as_slice().iter().map(|x| x.abs()).sum::<f64>().max(1.0);
    let tie_tol = 1e-12 * scale;

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut columns = Vec::with_capacity(n);
    let mut fixed = 0.0;
    let mut free_cols = cols;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (pos, &j) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> =
                free_cols.iter().enumerate().filter(|&(p, _)| p != pos).map(|(_, &c)| c).collect();
            let (rest, _) = min_cost_assignment(&cost, &rest_rows, &rest_cols);
            if fixed + cost[i][j] + rest <= best + tie_tol {
                chosen = Some(pos);
                break;
            }
        }
        // the optimal column always qualifies, so a choice exists
        let pos = chosen.unwrap_or(0);
        let j = free_cols.remove(pos);
        fixed += cost[i][j];
        columns.push(j);
    }
    let total = columns.iter().enumerate().map(|(i, &j)| score[(i, j)]).sum();
    Ok(Assignment { columns, total })
}

/// Shortest-augmenting-path Hungarian algorithm with potentials on the
/// sub-matrix `cost[rows][cols]`. Returns the minimum cost and, for each
/// listed row, the position of its column within `cols`.
fn min_cost_assignment(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    // 1-based indexing with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| c(i + 1, j + 1)).sum();
    (total, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == used.len() {
                out.push(prefix.clone());
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    prefix.push(j);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[j] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), &mut vec![false; n], &mut out);
        out
    }

    /// First permutation (lexicographic order) attaining the exhaustive max.
    fn brute_force(score: &DenseMatrix) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for p in permutations(score.rows()) {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| score[(i, j)]).sum();
            if best.as_ref().is_none_or(|(_, b)| total > *b) {
                best = Some((p, total));
            }
        }
        best.unwrap()
    }

    #[test]
    fn two_by_two() {
        let s = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let a = hungarian_max(&s).unwrap();
        assert_eq!(a.columns, vec![1, 0]);
        assert_eq!(a.total, 5.0);
        assert_eq!(brute_force(&s), (vec![1, 0], 5.0));
    }

    #[test]
    fn identity_scores() {
        let a = hungarian_max(&DenseMatrix::identity(5)).unwrap();
        assert_eq!(a.columns, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.total, 5.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let a = hungarian_max(&DenseMatrix::from_rows(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap())
            .unwrap();
        assert_eq!(a.columns, vec![0, 1, 2]);
        let s = DenseMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]])
            .unwrap();
        assert_eq!(hungarian_max(&s).unwrap().columns, brute_force(&s).0);
    }

    #[test]
    fn random_matches_brute_force() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        for n in 1..=7 {
            for _ in 0..10 {
                let rows: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
                let s = DenseMatrix::from_rows(&rows).unwrap();
                let (perm, total) = brute_force(&s);
                let a = hungarian_max(&s).unwrap();
                assert_eq!(a.columns, perm);
                assert!((a.total - total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(hungarian_max(&DenseMatrix::zeros(2, 3)), Err(Error::NotSquare { .. })));
    }
}
