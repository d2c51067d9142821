//! Dense linear algebra helpers for small normal-equation systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solve the SPD system `a x = b` by Cholesky. On failure, runs a pivoted
/// diagnosis to name the dependent columns in the error.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, context: &str, names: &[String]) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(Error::Singular {
            context: context.to_string(),
            columns: dependent_columns(a, names),
        }),
    }
}

/// Identify (nearly) dependent columns of a symmetric Gram matrix via
/// pivoted Cholesky with tolerance 1e-10 times the leading pivot.
fn dependent_columns(a: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let k = a.nrows();
    let mut work = a.clone();
    let mut active: Vec<usize> = (0..k).collect();
    let mut dropped: Vec<usize> = Vec::new();
    let mut tol = 0.0f64;

    for step in 0..k {
        // largest remaining diagonal
        let (pos, pivot) = (step..k)
            .map(|j| (j, work[(j, j)]))
            .fold((step, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if step == 0 {
            tol = 1e-10 * pivot.max(f64::MIN_POSITIVE);
        }
        if pivot <= tol {
            dropped.extend(active[step..].iter().copied());
            break;
        }
        work.swap_rows(step, pos);
        work.swap_columns(step, pos);
        active.swap(step, pos);
        let d = work[(step, step)];
        for i in (step + 1)..k {
            let l = work[(i, step)] / d;
            for j in (step + 1)..=i {
                let v = work[(j, step)];
                work[(i, j)] -= l * v;
                work[(j, i)] = work[(i, j)];
            }
        }
    }

    dropped
        .into_iter()
        .map(|j| names.get(j).cloned().unwrap_or_else(|| format!("col{j}")))
        .collect()
}

/// Rank-revealing least squares on a column-major design.
///
/// Columns that are numerically dependent (pivoted-Cholesky tolerance
/// 1e-10 times the leading pivot on the Gram matrix) are dropped and get
/// coefficient zero. Returns the coefficient vector in the original
/// column order plus the indices of dropped columns.
pub fn least_squares_drop_collinear(
    columns: &[Vec<f64>],
    y: &[f64],
) -> Result<(Vec<f64>, Vec<usize>)> {
    let p = columns.len();
    let n = y.len();
    if p == 0 {
        return Err(Error::Validation("least squares needs at least one column".into()));
    }
    for c in columns {
        if c.len() != n {
            return Err(Error::Validation("design column length mismatch".into()));
        }
    }

    let mut gram = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for i in 0..p {
        for j in i..p {
            let g = crate::stats::sum(columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b));
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
        xty[i] = crate::stats::sum(columns[i].iter().zip(y).map(|(a, b)| a * b));
    }

    // Greedy left-to-right Cholesky on the diagonal-normalized Gram:
    // earlier columns take priority (the plain covariate block comes
    // first), so dependent augmentation columns are the ones dropped.
    // A column is kept when its residual normalized diagonal exceeds
    // 1e-10 times the leading pivot (which is 1 after normalization).
    let scale: Vec<f64> = (0..p).map(|j| gram[(j, j)].max(0.0).sqrt()).collect();
    let mut norm = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let s = scale[i] * scale[j];
            norm[(i, j)] = if s > 0.0 { gram[(i, j)] / s } else { 0.0 };
        }
    }
    let tol = 1e-10;
    let mut kept: Vec<usize> = Vec::new();
    let mut work = norm.clone();
    for j in 0..p {
        if scale[j] == 0.0 || work[(j, j)] <= tol {
            continue;
        }
        kept.push(j);
        let d = work[(j, j)];
        for i in (j + 1)..p {
            let l = work[(i, j)] / d;
            if l == 0.0 {
                continue;
            }
            for m in (j + 1)..p {
                work[(i, m)] -= l * work[(j, m)];
            }
        }
    }
    let rank = kept.len();
    if rank == 0 {
        return Err(Error::Singular { context: "least squares design".into(), columns: vec![] });
    }
    let mut sub_gram = DMatrix::zeros(rank, rank);
    let mut sub_xty = DVector::zeros(rank);
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate() {
            sub_gram[(a, b)] = gram[(i, j)];
        }
        sub_xty[a] = xty[i];
    }
    let sol = sub_gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular { context: "least squares subdesign".into(), columns: vec![] })?
        .solve(&sub_xty);

    let mut coef = vec![0.0; p];
    for (a, &i) in kept.iter().enumerate() {
        coef[i] = sol[a];
    }
    let dropped: Vec<usize> = (0..p).filter(|j| !kept.contains(j)).collect();
    Ok((coef, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_recovers_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0]);
        let x = solve_spd(&a, &b, "test", &[]).unwrap();
        let r = &a * &x - &b;
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn singular_gram_names_columns() {
        // col2 = 2*col1
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0]);
        let names = vec!["x0".to_string(), "x1".to_string()];
        let err = solve_spd(&a, &b, "test", &names).unwrap_err();
        match err {
            Error::Singular { columns, .. } => assert!(!columns.is_empty()),
            other => panic!("expected Singular, got {other:?}"),
        }
    }

    #[test]
    fn collinear_columns_are_dropped() {
        let n = 50;
        let c0: Vec<f64> = vec![1.0; n];
        let c1: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let c2: Vec<f64> = c1.iter().map(|v| 3.0 * v).collect(); // dependent
        let y: Vec<f64> = (0..n).map(|i| 2.0 + 0.5 * i as f64).collect();
        let (coef, dropped) = least_squares_drop_collinear(&[c0, c1, c2], &y).unwrap();
        assert_eq!(dropped.len(), 1);
        // fitted values must reproduce y regardless of which copy was kept
        let fit0 = coef[0] + coef[1] * 10.0 + coef[2] * 30.0;
        assert!((fit0 - 7.0).abs() < 1e-8);
    }
}
