use alloc::vec::Vec;

/// Solves `a * x = b` for a dense `n x n` row-major matrix by Gaussian
/// elimination with partial pivoting. Columns whose pivot falls below
/// `tol` get a zero coefficient, which yields a valid least-squares
/// solution for rank-deficient normal equations.
pub(crate) fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, tol: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut pivot_col = Vec::with_capacity(n);
    let mut row = 0;
    for col in 0..n {
        if row == n {
            break;
        }
        let (best, best_abs) = (row..n)
            .map(|r| (r, a[r * n + col].abs()))
            .fold((row, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_abs <= tol {
            continue;
        }
        if best != row {
            for c in 0..n {
                a.swap(row * n + c, best * n + c);
            }
            b.swap(row, best);
        }
        let p = a[row * n + col];
        for r in row + 1..n {
            let f = a[r * n + col] / p;
            if f != 0.0 {
                for c in col..n {
                    a[r * n + c] -= f * a[row * n + c];
                }
                b[r] -= f * b[row];
            }
        }
        pivot_col.push(col);
        row += 1;
    }
    let mut x = alloc::vec![0.0; n];
    for (r, &col) in pivot_col.iter().enumerate().rev() {
        let mut s = b[r];
        for c in col + 1..n {
            s -= a[r * n + c] * x[c];
        }
        x[col] = s / a[r * n + col];
    }
    x
}
