//! Small dense helpers shared across modules.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

pub(crate) fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity; zero-norm inputs are rejected.
pub(crate) fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm vector"));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise L2 normalisation, returning the normalised rows and the row norms.
pub(crate) fn normalize_rows(m: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = m.to_owned();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("cannot normalise a zero-norm patch row"));
        }
        row.mapv_inplace(|x| x / n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pull a gradient taken w.r.t. normalised rows back to the raw rows.
///
/// For `u = x / |x|`, `dL/dx = (g - u (u . g)) / |x|`.
pub(crate) fn normalize_rows_backward(
    normalized: ArrayView2<f64>,
    norms: &[f64],
    grad: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = grad.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let u = normalized.row(i);
        let proj = u.dot(&grad.row(i));
        row.zip_mut_with(&u, |g, &ui| *g = (*g - ui * proj) / norms[i]);
    }
    out
}

/// Least-squares solution of `x b = y` by Householder QR with column pivoting.
///
/// A column whose pivot falls below `1e-10` of the leading pivot counts as
/// dependent and the design is reported singular.
pub(crate) fn least_squares(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
    let (m, n) = x.dim();
    if y.len() != m {
        return Err(Error::Shape(format!("design has {m} rows, target has {}", y.len())));
    }
    if m < n {
        return Err(Error::SingularDesign(format!("{m} observations for {n} coefficients")));
    }
    let mut a = x.to_owned();
    let mut b = y.to_owned();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut lead = 0.0;
    for k in 0..n {
        let col_norm = |a: &Array2<f64>, j: usize| a.slice(s![k.., j]).dot(&a.slice(s![k.., j]));
        let piv = (k..n)
            .max_by(|&i, &j| col_norm(&a, i).total_cmp(&col_norm(&a, j)).then(j.cmp(&i)))
            .unwrap();
        if piv != k {
            for r in 0..m {
                a.swap([r, k], [r, piv]);
            }
            perm.swap(k, piv);
        }
        let nrm = col_norm(&a, k).sqrt();
        if k == 0 {
            lead = nrm;
        }
        if nrm == 0.0 || nrm <= 1e-10 * lead || !nrm.is_finite() {
            return Err(Error::SingularDesign(format!(
                "design has rank {k} < {n} columns"
            )));
        }
        let alpha = if a[[k, k]] > 0.0 { -nrm } else { nrm };
        let mut v = a.slice(s![k.., k]).to_owned();
        v[0] -= alpha;
        let vn = v.dot(&v);
        for j in k..n {
            let f = 2.0 * v.dot(&a.slice(s![k.., j])) / vn;
            a.slice_mut(s![k.., j]).scaled_add(-f, &v);
        }
        let f = 2.0 * v.dot(&b.slice(s![k..])) / vn;
        b.slice_mut(s![k..]).scaled_add(-f, &v);
    }
    let mut z = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= a[[i, j]] * z[j];
        }
        z[i] = acc / a[[i, i]];
    }
    let mut out = Array1::zeros(n);
    for (i, &p) in perm.iter().enumerate() {
        out[p] = z[i];
    }
    Ok(out)
}
