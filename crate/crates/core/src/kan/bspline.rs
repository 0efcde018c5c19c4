//! B-spline bases over a knot vector, evaluated with the Cox–de Boor
//! recurrence raised degree by degree from the piecewise-constant table.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    knots: Vec<f64>,
    degree: usize,
}

impl SplineGrid {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < degree + 2 {
            return Err(Error::invalid(
                "bspline_basis",
                format!("{} knots cannot carry a degree-{degree} basis (need {})", knots.len(), degree + 2),
            ));
        }
        if knots.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::invalid("bspline_basis", "knots must be nondecreasing and finite"));
        }
        Ok(Self { knots, degree })
    }

    /// `n_coeffs` basis functions of degree `degree` whose partition-of-unity
    /// span is exactly `[lo, hi]`, built on a uniform knot vector that extends
    /// past both ends.
    pub fn uniform(lo: f64, hi: f64, n_coeffs: usize, degree: usize) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::invalid("bspline_basis", format!("empty domain [{lo}, {hi}]")));
        }
        if n_coeffs <= degree {
            return Err(Error::invalid(
                "bspline_basis",
                format!("{n_coeffs} coefficients leave no interior span for degree {degree}"),
            ));
        }
        let cells = n_coeffs - degree;
        let h = (hi - lo) / cells as f64;
        let knots = (0..n_coeffs + degree + 1)
            .map(|j| {
                let off = j as f64 - degree as f64;
                if j == degree {
                    lo
                } else if j == n_coeffs {
                    hi
                } else {
                    lo + off * h
                }
            })
            .collect();
        Self::new(knots, degree)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Interval on which the basis sums to one; inputs are clamped into it.
    pub fn domain(&self) -> (f64, f64) {
        let n = self.n_basis();
        if n > self.degree {
            (self.knots[self.degree], self.knots[n])
        } else {
            (self.knots[0], self.knots[self.knots.len() - 1])
        }
    }

    fn hi_index(&self) -> usize {
        let n = self.n_basis();
        if n > self.degree {
            n
        } else {
            self.knots.len() - 1
        }
    }

    /// Knot cell containing `x` (already inside the domain); the right domain
    /// edge belongs to the last nonempty cell.
    fn cell(&self, x: f64) -> usize {
        let t = &self.knots;
        let hi = self.hi_index();
        let lo_idx = hi.min(if self.n_basis() > self.degree { self.degree } else { 0 });
        let mut s = lo_idx;
        for i in lo_idx..hi {
            if t[i] < t[i + 1] && t[i] <= x {
                s = i;
            }
        }
        s
    }

    /// Basis values at `x` (clamped into the domain).
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis()];
        self.eval_into(x, &mut out, None);
        out
    }

    /// Basis values and their derivatives with respect to the (unclamped) input.
    pub fn basis_with_derivative(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_basis();
        let (mut b, mut d) = (vec![0.0; n], vec![0.0; n]);
        self.eval_into(x, &mut b, Some(&mut d));
        (b, d)
    }

    pub(crate) fn eval_into(&self, x: f64, out: &mut [f64], deriv: Option<&mut [f64]>) {
        let (lo, hi) = self.domain();
        let clamped = x < lo || x > hi;
        let x = x.clamp(lo, hi);
        let t = &self.knots;
        let m = t.len() - 1;
        let mut table = vec![0.0; m];
        table[self.cell(x)] = 1.0;
        let mut prev = table.clone();
        for p in 1..=self.degree {
            std::mem::swap(&mut prev, &mut table);
            for i in 0..m - p {
                let left = ratio(x - t[i], t[i + p] - t[i]) * prev[i];
                let right = ratio(t[i + p + 1] - x, t[i + p + 1] - t[i + 1]) * prev[i + 1];
                table[i] = left + right;
            }
            for v in &mut table[m - p..] {
                *v = 0.0;
            }
        }
        let n = self.n_basis();
        out.copy_from_slice(&table[..n]);
        if let Some(d) = deriv {
            if clamped || self.degree == 0 {
                d.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            // `prev` holds the degree-1-lower table.
            let p = self.degree as f64;
            for (i, dv) in d.iter_mut().enumerate() {
                let a = ratio(p, t[i + self.degree] - t[i]) * prev[i];
                let b = ratio(p, t[i + self.degree + 1] - t[i + 1]) * prev[i + 1];
                *dv = a - b;
            }
        }
    }
}

#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook top-down recursion, kept independent from `eval_into`.
    fn cox_de_boor(t: &[f64], i: usize, p: usize, x: f64, last_cell: usize) -> f64 {
        if p == 0 {
            let inside = t[i] <= x && x < t[i + 1];
            let right_edge = i == last_cell && x == t[i + 1];
            return if inside || right_edge { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        if t[i + p] != t[i] {
            v += (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor(t, i, p - 1, x, last_cell);
        }
        if t[i + p + 1] != t[i + 1] {
            v += (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(t, i + 1, p - 1, x, last_cell);
        }
        v
    }

    #[test]
    fn partition_of_unity_interior() {
        let g = SplineGrid::uniform(-3.0, 3.0, 9, 3).unwrap();
        for s in 0..1000 {
            let x = -3.0 + 6.0 * (s as f64 + 0.5) / 1000.0;
            let sum: f64 = g.basis(x).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "x={x} sum={sum}");
        }
    }

    #[test]
    fn degree_zero_is_indicator() {
        let g = SplineGrid::uniform(0.0, 1.0, 5, 0).unwrap();
        let b = g.basis(0.45);
        assert_eq!(b.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(b.iter().filter(|&&v| v == 0.0).count(), 4);
        assert_eq!(b[2], 1.0);
    }

    #[test]
    fn matches_recursive_oracle() {
        let g = SplineGrid::uniform(-1.0, 1.0, 9, 3).unwrap();
        let b = g.basis(0.37);
        let last = g.n_basis() - 1;
        for (i, v) in b.iter().enumerate() {
            let o = cox_de_boor(g.knots(), i, 3, 0.37, last);
            assert!((v - o).abs() < 1e-14, "i={i} {v} vs {o}");
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn right_edge_keeps_unit_sum() {
        for k in 0..4 {
            let g = SplineGrid::uniform(-3.0, 3.0, 9, k).unwrap();
            let s: f64 = g.basis(3.0).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let s: f64 = g.basis(17.0).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        let g = SplineGrid::uniform(-3.0, 3.0, 9, 3).unwrap();
        let (_, d) = g.basis_with_derivative(0.37);
        let h = 1e-6;
        let (bp, bm) = (g.basis(0.37 + h), g.basis(0.37 - h));
        for i in 0..9 {
            let fd = (bp[i] - bm[i]) / (2.0 * h);
            assert!((d[i] - fd).abs() < 1e-8, "i={i}");
        }
        let (_, d) = g.basis_with_derivative(4.0);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_short_knot_vector() {
        assert!(SplineGrid::new(vec![0.0, 1.0, 2.0, 3.0], 3).is_err());
        assert!(SplineGrid::new(vec![0.0, 1.0, 2.0, 3.0, 4.0], 3).is_ok());
    }
}
