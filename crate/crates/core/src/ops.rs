//! Differentiable building blocks with hand-written backward passes.
//!
//! Every forward helper has a matching `*_backward` that takes the upstream
//! gradient and returns (or accumulates) gradients for its inputs. Norms
//! of exactly zero follow one convention throughout: the cosine is 0 and
//! so is its gradient.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::Scalar;

#[inline]
pub fn norm<T: Scalar>(x: ArrayView1<T>) -> T {
    x.dot(&x).sqrt()
}

/// Cosine similarity, 0 when either operand has zero norm.
pub fn cosine<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    a.dot(&b) / (na * nb)
}

/// Gradient of `cosine(a, b)` scaled by `upstream`: returns `(da, db)`.
pub fn cosine_backward<T: Scalar>(
    a: ArrayView1<T>,
    b: ArrayView1<T>,
    upstream: T,
) -> (Array1<T>, Array1<T>) {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return (Array1::zeros(a.len()), Array1::zeros(b.len()));
    }
    let c = a.dot(&b) / (na * nb);
    let inv = T::one() / (na * nb);
    // d cos / d a = b / (|a||b|) - cos * a / |a|^2
    let da = (&b * inv - &a * (c / (na * na))) * upstream;
    let db = (&a * inv - &b * (c / (nb * nb))) * upstream;
    (da, db)
}

/// Cosine similarity of every row of `rows` with `query`.
pub fn row_cosines<T: Scalar>(rows: ArrayView2<T>, query: ArrayView1<T>) -> Array1<T> {
    let nq = norm(query);
    let mut out = Array1::zeros(rows.nrows());
    if nq == T::zero() {
        return out;
    }
    Zip::from(&mut out)
        .and(rows.rows())
        .for_each(|o, r| {
            let nr = norm(r);
            if nr != T::zero() {
                *o = r.dot(&query) / (nr * nq);
            }
        });
    out
}

/// Backward of [`row_cosines`]: accumulates into `d_rows` and returns the
/// gradient for the query.
pub fn row_cosines_backward<T: Scalar>(
    rows: ArrayView2<T>,
    query: ArrayView1<T>,
    upstream: ArrayView1<T>,
    d_rows: &mut Array2<T>,
) -> Array1<T> {
    let mut d_query = Array1::zeros(query.len());
    for (j, r) in rows.rows().into_iter().enumerate() {
        let g = upstream[j];
        if g == T::zero() {
            continue;
        }
        let (dr, dq) = cosine_backward(r, query, g);
        d_rows.row_mut(j).scaled_add(T::one(), &dr);
        d_query += &dq;
    }
    d_query
}

/// Arithmetic mean over the token (row) axis.
pub fn mean_rows<T: Scalar>(x: ArrayView2<T>) -> Array1<T> {
    let n = T::from_usize(x.nrows()).unwrap();
    x.sum_axis(Axis(0)) / n
}

/// Backward of [`mean_rows`]: adds `upstream / n` to every row of `d_x`.
pub fn mean_rows_backward<T: Scalar>(upstream: ArrayView1<T>, d_x: &mut Array2<T>) {
    let n = T::from_usize(d_x.nrows()).unwrap();
    let share = upstream.mapv(|g| g / n);
    for mut row in d_x.rows_mut() {
        row += &share;
    }
}

/// `weight · x` for a bias-free linear map.
pub fn linear<T: Scalar>(weight: &Array2<T>, x: ArrayView1<T>) -> Array1<T> {
    weight.dot(&x)
}

/// Backward of [`linear`]: accumulates `upstream ⊗ x` into `d_weight` and
/// returns `weightᵀ · upstream`.
pub fn linear_backward<T: Scalar>(
    weight: &Array2<T>,
    x: ArrayView1<T>,
    upstream: ArrayView1<T>,
    d_weight: &mut Array2<T>,
) -> Array1<T> {
    Zip::from(d_weight.rows_mut())
        .and(&upstream)
        .for_each(|mut row, &g| row.scaled_add(g, &x));
    weight.t().dot(&upstream)
}

/// Applies the linear map to every token: `x · weightᵀ`.
pub fn linear_rows<T: Scalar>(weight: &Array2<T>, x: ArrayView2<T>) -> Array2<T> {
    x.dot(&weight.t())
}

/// Backward of [`linear_rows`]: accumulates `upstreamᵀ · x` into `d_weight`.
/// Returns the gradient w.r.t. `x`.
pub fn linear_rows_backward<T: Scalar>(
    weight: &Array2<T>,
    x: ArrayView2<T>,
    upstream: ArrayView2<T>,
    d_weight: &mut Array2<T>,
) -> Array2<T> {
    *d_weight += &upstream.t().dot(&x);
    upstream.dot(weight)
}

/// Signed row-wise cosine gate `φ(A, b, C)`: row `j` of the output is
/// `cos(A_j, b) · C_j`. Returns the output and the gate values.
pub fn cosine_gate<T: Scalar>(
    a: ArrayView2<T>,
    b: ArrayView1<T>,
    c: ArrayView2<T>,
    clamp_at_zero: bool,
) -> (Array2<T>, Array1<T>) {
    let mut gates = row_cosines(a, b);
    if clamp_at_zero {
        gates.mapv_inplace(|g| g.max(T::zero()));
    }
    let out = &c * &gates.view().insert_axis(Axis(1));
    (out, gates)
}

/// Gradients of [`cosine_gate`]: `(dA, db, dC)`.
pub fn cosine_gate_backward<T: Scalar>(
    a: ArrayView2<T>,
    b: ArrayView1<T>,
    c: ArrayView2<T>,
    gates: ArrayView1<T>,
    upstream: ArrayView2<T>,
    clamp_at_zero: bool,
) -> (Array2<T>, Array1<T>, Array2<T>) {
    let d_c = &upstream * &gates.insert_axis(Axis(1));
    // d gate_j = <upstream_j, C_j>
    let mut d_gate: Array1<T> = Zip::from(upstream.rows())
        .and(c.rows())
        .map_collect(|u, cr| u.dot(&cr));
    if clamp_at_zero {
        Zip::from(&mut d_gate).and(&gates).for_each(|d, &g| {
            if g <= T::zero() {
                *d = T::zero();
            }
        });
    }
    let mut d_a = Array2::zeros(a.raw_dim());
    let d_b = row_cosines_backward(a, b, d_gate.view(), &mut d_a);
    (d_a, d_b, d_c)
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp<T: Scalar>(x: ArrayView1<T>) -> T {
    let m = x.fold(T::neg_infinity(), |acc, &v| acc.max(v));
    if m == T::neg_infinity() {
        return m;
    }
    m + x.mapv(|v| (v - m).exp()).sum().ln()
}

/// Softmax cross-entropy of `logits` against class `target`.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: ArrayView1<T>, target: usize) -> (T, Array1<T>) {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad = logits.mapv(|v| (v - lse).exp());
    grad[target] -= T::one();
    (loss, grad)
}

/// Binary cross-entropy summed over entries, computed from logits.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn bce_with_logits<T: Scalar>(logits: ArrayView1<T>, labels: &[bool]) -> (T, Array1<T>) {
    let mut loss = T::zero();
    let mut grad = Array1::zeros(logits.len());
    for (i, (&z, &y)) in logits.iter().zip(labels).enumerate() {
        // -[y ln σ(z) + (1-y) ln(1-σ(z))] = softplus(z) - y z
        let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
        let y = if y { T::one() } else { T::zero() };
        loss += softplus - y * z;
        grad[i] = sigmoid(z) - y;
    }
    (loss, grad)
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
