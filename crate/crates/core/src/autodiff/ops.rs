//! Differentiable primitives on [`Var`].

use std::sync::Arc;

use super::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{Lattice, SparseMatrix};

fn check_same<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_scalar<T: Real>(op: &'static str, s: &Var<'_, T>) -> Result<()> {
    if s.len() != 1 {
        return Err(Error::shape(op, format!("expected a one-element scalar, got {:?}", s.shape())));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value.clone();
        let y = x.map(f);
        let yc = y.clone();
        self.tape.op(name, &[self], y, move |g, _| {
            vec![Some(g.iter().zip(x.data()).zip(yc.data()).map(|((&g, &x), &y)| g * df(x, y)).collect())]
        })
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_same("add", self, other)?;
        let y = Tensor::from_parts(self.shape().to_vec(), zip_map(self.data(), other.data(), |a, b| a + b));
        Ok(self.tape.op("add", &[self, other], y, |g, need| {
            vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_same("sub", self, other)?;
        let y = Tensor::from_parts(self.shape().to_vec(), zip_map(self.data(), other.data(), |a, b| a - b));
        Ok(self.tape.op("sub", &[self, other], y, |g, need| {
            vec![need[0].then(|| g.to_vec()), need[1].then(|| g.iter().map(|&v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_same("mul", self, other)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let y = Tensor::from_parts(self.shape().to_vec(), zip_map(a.data(), b.data(), |a, b| a * b));
        Ok(self.tape.op("mul", &[self, other], y, move |g, need| {
            vec![
                need[0].then(|| zip_map(g, b.data(), |g, b| g * b)),
                need[1].then(|| zip_map(g, a.data(), |g, a| g * a)),
            ]
        }))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_same("div", self, other)?;
        let b = other.value.clone();
        let y = Tensor::from_parts(self.shape().to_vec(), zip_map(self.data(), b.data(), |a, b| a / b));
        let yc = y.clone();
        Ok(self.tape.op("div", &[self, other], y, move |g, need| {
            vec![
                need[0].then(|| zip_map(g, b.data(), |g, b| g / b)),
                need[1].then(|| {
                    g.iter().zip(b.data()).zip(yc.data()).map(|((&g, &b), &y)| -g * y / b).collect()
                }),
            ]
        }))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: T) -> Var<'t, T> {
        let y = self.value.map(|x| x * c);
        self.tape.op("scale", &[self], y, move |g, _| vec![Some(g.iter().map(|&v| v * c).collect())])
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let y = self.value.map(|x| x + c);
        self.tape.op("add_scalar", &[self], y, |g, _| vec![Some(g.to_vec())])
    }

    /// `s · self` for a one-element `s`.
    pub fn scale_by(&self, s: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_scalar("scale_by", s)?;
        let sv = s.item();
        let x = self.value.clone();
        let y = x.map(|v| v * sv);
        Ok(self.tape.op("scale_by", &[self, s], y, move |g, need| {
            vec![
                need[0].then(|| g.iter().map(|&v| v * sv).collect()),
                need[1].then(|| vec![g.iter().zip(x.data()).fold(T::zero(), |acc, (&g, &x)| acc + g * x)]),
            ]
        }))
    }

    /// `self + s · p` for a one-element `s`.
    pub fn add_scaled(&self, s: &Var<'t, T>, p: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_same("add_scaled", self, p)?;
        check_scalar("add_scaled", s)?;
        let sv = s.item();
        let pv = p.value.clone();
        let y = Tensor::from_parts(self.shape().to_vec(), zip_map(self.data(), pv.data(), |a, b| a + sv * b));
        Ok(self.tape.op("add_scaled", &[self, s, p], y, move |g, need| {
            vec![
                need[0].then(|| g.to_vec()),
                need[1].then(|| vec![g.iter().zip(pv.data()).fold(T::zero(), |acc, (&g, &p)| acc + g * p)]),
                need[2].then(|| g.iter().map(|&v| v * sv).collect()),
            ]
        }))
    }

    /// Repeats a one-element value to `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        check_scalar("broadcast", self)?;
        let y = Tensor::full(shape, self.item());
        Ok(self.tape.op("broadcast", &[self], y, |g, _| vec![Some(vec![g.iter().copied().sum()])]))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let n = self.len();
        let y = Tensor::scalar(self.data().iter().copied().sum());
        self.tape.op("sum", &[self], y, move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::cast(self.len().max(1) as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn dot(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        if self.len() != other.len() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let (a, b) = (self.value.clone(), other.value.clone());
        let y = Tensor::scalar(a.data().iter().zip(b.data()).fold(T::zero(), |acc, (&x, &y)| acc + x * y));
        Ok(self.tape.op("dot", &[self, other], y, move |g, need| {
            let g = g[0];
            vec![
                need[0].then(|| b.data().iter().map(|&v| v * g).collect()),
                need[1].then(|| a.data().iter().map(|&v| v * g).collect()),
            ]
        }))
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    /// Square root. The derivative at zero is taken as zero.
    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| if y > T::zero() { T::one() / (y + y) } else { T::zero() })
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary("relu", |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let y = self.value.reshape(shape)?;
        Ok(self.tape.op("reshape", &[self], y, |g, _| vec![Some(g.to_vec())]))
    }

    /// Applies `m` to each of the `len / m.cols()` contiguous blocks of `self`
    /// and reshapes the stacked result to `shape`.
    pub fn linear(&self, m: &Arc<SparseMatrix<T>>, shape: &[usize]) -> Result<Var<'t, T>> {
        let (rows, cols) = (m.rows(), m.cols());
        if cols == 0 || !self.len().is_multiple_of(cols) {
            return Err(Error::shape("linear", format!("input of {} values vs {cols} columns", self.len())));
        }
        let blocks = self.len() / cols;
        if shape.iter().product::<usize>() != blocks * rows {
            return Err(Error::shape("linear", format!("{blocks}x{rows} outputs do not fit {shape:?}")));
        }
        let mut out = vec![T::zero(); blocks * rows];
        for (x, y) in self.data().chunks(cols).zip(out.chunks_mut(rows)) {
            m.apply(x, y);
        }
        let m = m.clone();
        Ok(self.tape.op("linear", &[self], Tensor::from_parts(shape.to_vec(), out), move |g, _| {
            let mut gx = vec![T::zero(); blocks * cols];
            for (gy, gx) in g.chunks(rows).zip(gx.chunks_mut(cols)) {
                m.apply_transpose_add(gy, gx);
            }
            vec![Some(gx)]
        }))
    }

    /// Bilinear lookup of `self` (one value per `lattice` point, or several
    /// channels stacked) at the positions `(xs[k], ys[k])`. Differentiable in
    /// the values and in the positions. Output is `[channels, k]`.
    pub fn bilinear_sample(&self, lattice: &Lattice, xs: &Var<'t, T>, ys: &Var<'t, T>) -> Result<Var<'t, T>> {
        let n = lattice.len();
        if n == 0 || !self.len().is_multiple_of(n) {
            return Err(Error::shape("bilinear_sample", format!("{} values on a {:?} lattice", self.len(), lattice.n)));
        }
        check_same("bilinear_sample", xs, ys)?;
        let channels = self.len() / n;
        let k = xs.len();
        let stencils: Vec<_> = xs.data().iter().zip(ys.data()).map(|(&x, &y)| lattice.stencil(x, y)).collect();
        let mut out = vec![T::zero(); channels * k];
        for c in 0..channels {
            let f = &self.data()[c * n..(c + 1) * n];
            for (o, s) in out[c * k..(c + 1) * k].iter_mut().zip(&stencils) {
                *o = (0..4).fold(T::zero(), |acc, q| acc + s.weight[q] * f[s.index[q]]);
            }
        }
        let field = self.value.clone();
        let y = Tensor::from_parts(vec![channels, k], out);
        Ok(self.tape.op("bilinear_sample", &[self, xs, ys], y, move |g, need| {
            let gf = need[0].then(|| {
                let mut gf = vec![T::zero(); channels * n];
                for c in 0..channels {
                    let gf = &mut gf[c * n..(c + 1) * n];
                    for (s, &g) in stencils.iter().zip(&g[c * k..(c + 1) * k]) {
                        for q in 0..4 {
                            gf[s.index[q]] += s.weight[q] * g;
                        }
                    }
                }
                gf
            });
            let (mut gx, mut gy) = (vec![T::zero(); k], vec![T::zero(); k]);
            if need[1] || need[2] {
                for c in 0..channels {
                    let f = &field.data()[c * n..(c + 1) * n];
                    for (p, s) in stencils.iter().enumerate() {
                        let g = g[c * k + p];
                        for q in 0..4 {
                            gx[p] += g * s.dweight_dx[q] * f[s.index[q]];
                            gy[p] += g * s.dweight_dy[q] * f[s.index[q]];
                        }
                    }
                }
            }
            vec![gf, need[1].then_some(gx), need[2].then_some(gy)]
        }))
    }

    /// Contiguous flat range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        if start > end || end > self.len() {
            return Err(Error::shape("slice", format!("{start}..{end} of {}", self.len())));
        }
        let n = self.len();
        let y = Tensor::from_parts(vec![end - start], self.data()[start..end].to_vec());
        Ok(self.tape.op("slice", &[self], y, move |g, _| {
            let mut gx = vec![T::zero(); n];
            gx[start..end].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Flat concatenation.
    pub fn concat(parts: &[&Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let data: Vec<T> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        let y = Tensor::from_parts(vec![data.len()], data);
        Ok(first.tape.op("concat", parts, y, move |g, need| {
            let mut offset = 0;
            lens.iter()
                .zip(need)
                .map(|(&l, &need)| {
                    let part = need.then(|| g[offset..offset + l].to_vec());
                    offset += l;
                    part
                })
                .collect()
        }))
    }

    /// Stacks `[C_i, H, W]` inputs along the channel axis.
    pub fn concat_channels(parts: &[&Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let spatial = match first.shape() {
            [_, h, w] => [*h, *w],
            s => return Err(Error::shape("concat_channels", format!("expected [C, H, W], got {s:?}"))),
        };
        let mut channels = 0;
        for p in parts {
            match p.shape() {
                [c, h, w] if [*h, *w] == spatial => channels += c,
                s => return Err(Error::shape("concat_channels", format!("{s:?} vs spatial {spatial:?}"))),
            }
        }
        let joined = Var::concat(parts)?;
        joined.reshape(&[channels, spatial[0], spatial[1]])
    }

    /// Channels `[c0, c1)` of a `[C, H, W]` value.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Result<Var<'t, T>> {
        let [c, h, w] = match self.shape() {
            [c, h, w] => [*c, *h, *w],
            s => return Err(Error::shape("slice_channels", format!("expected [C, H, W], got {s:?}"))),
        };
        if c0 >= c1 || c1 > c {
            return Err(Error::shape("slice_channels", format!("{c0}..{c1} of {c} channels")));
        }
        self.slice(c0 * h * w, c1 * h * w)?.reshape(&[c1 - c0, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gradient_check, Tape};
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[3]));
        let b = tape.param(Tensor::zeros(&[4]));
        assert!(matches!(a.add(&b), Err(Error::ShapeError { op: "add", .. })));
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let x = t(&[5], &[0.3, -1.2, 2.0, 0.7, -0.1]);
        let y = t(&[5], &[1.1, 0.4, -0.5, 2.2, 0.9]);
        let report = gradient_check(
            |_, v| {
                let a = v[0].mul(&v[1])?.leaky_relu(0.2);
                let b = v[0].square().add_scalar(1.0).sqrt();
                let c = a.div(&b)?.sub(&v[1].relu())?;
                Ok(c.scale(0.7).sum())
            },
            &[x, y],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn scalar_var_ops_match_finite_differences() {
        let x = t(&[4], &[0.3, -1.2, 2.0, 0.7]);
        let p = t(&[4], &[1.0, 0.5, -0.25, 2.0]);
        let s = t(&[1], &[0.8]);
        let report = gradient_check(
            |_, v| {
                let r = v[0].add_scaled(&v[2], &v[1])?;
                let q = r.scale_by(&v[2])?;
                let m = q.mean().broadcast(&[4])?;
                q.sub(&m)?.dot(&v[1])
            },
            &[x, p, s],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn linear_uses_transpose_in_reverse() {
        let m = Arc::new(SparseMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, -2.0), (1, 1, 3.0)]));
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = x.linear(&m, &[2, 2]).unwrap();
        assert_eq!(y.data(), &[-5.0, 6.0, -8.0, 15.0]);
        let w = tape.constant(t(&[2, 2], &[1.0, 10.0, 100.0, 1000.0]));
        let g = tape.backward(&y.dot(&w).unwrap()).unwrap();
        assert_eq!(g.wrt(&x).data(), &[1.0, 30.0, -2.0, 100.0, 3000.0, -200.0]);
    }

    #[test]
    fn bilinear_sample_gradients_in_values_and_positions() {
        let lattice = Lattice { n: [4, 3], offset: [0.5, 0.5], dx: 0.5, wrap: [true, false] };
        let field: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let xs = t(&[5], &[0.13, 1.71, -0.4, 2.33, 0.9]);
        let ys = t(&[5], &[0.41, 0.66, 1.05, 0.52, 1.18]);
        let report = gradient_check(
            |tape, v| {
                let out = v[0].bilinear_sample(&lattice, &v[1], &v[2])?;
                let w = tape.constant(Tensor::from_parts(vec![2, 5], (0..10).map(|i| 1.0 + i as f64).collect()));
                out.dot(&w)
            },
            &[t(&[2, 12], &field), xs, ys],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn channel_slicing_round_trip() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[1, 1, 2], &[5.0, 6.0]));
        let c = Var::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 1, 2]);
        let mid = c.slice_channels(1, 3).unwrap();
        assert_eq!(mid.data(), &[3.0, 4.0, 5.0, 6.0]);
        let g = tape.backward(&mid.sum()).unwrap();
        assert_eq!(g.wrt(&a).data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.wrt(&b).data(), &[1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn sum_of_linear_combination_is_linear(a in proptest::collection::vec(-10.0f64..10.0, 6), s in -3.0f64..3.0) {
            let tape = Tape::<f64>::new();
            let x = tape.param(t(&[6], &a));
            let y = x.scale(s).add_scalar(1.5).sum();
            let g = tape.backward(&y).unwrap().wrt(&x);
            prop_assert!(g.data().iter().all(|&v| (v - s).abs() < 1e-12));
        }
    }
}
