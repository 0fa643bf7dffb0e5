//! Brent's bracketed minimizer: golden-section steps with parabolic
//! interpolation when it behaves.

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum<T> {
    pub x: T,
    pub fx: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f` on `[a, b]`. Stops when the bracket shrinks to
/// `2 (rel_tol |x| + abs_tol)` or after `max_iter` steps; in the latter
/// case the best point so far comes back with `converged = false`.
pub fn brent_minimize<T, F>(mut f: F, a: T, b: T, rel_tol: T, abs_tol: T, max_iter: usize) -> Minimum<T>
where
    T: Scalar,
    F: FnMut(T) -> T,
{
    let golden = T::lit(0.381_966_011_250_105_1);
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let (mut a, mut b) = if a <= b { (a, b) } else { (b, a) };

    let mut x = a + golden * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d = T::zero();
    let mut e = T::zero();

    for iter in 0..max_iter {
        let m = half * (a + b);
        let tol = rel_tol * x.abs() + abs_tol;
        let tol2 = two * tol;
        if (x - m).abs() <= tol2 - half * (b - a) {
            return Minimum { x, fx, iterations: iter, converged: true };
        }

        let mut golden_step = true;
        if e.abs() > tol {
            // parabola through (x, fx), (w, fw), (v, fv)
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = two * (q - r);
            if q > T::zero() {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (half * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol } else { -tol };
                }
                golden_step = false;
            }
        }
        if golden_step {
            e = if x < m { b - x } else { a - x };
            d = golden * e;
        }

        let u = if d.abs() >= tol { x + d } else if d > T::zero() { x + tol } else { x - tol };
        let fu = f(u);

        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Minimum { x, fx, iterations: max_iter, converged: false }
}
