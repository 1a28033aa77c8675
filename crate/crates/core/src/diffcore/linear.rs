//! Fully-connected layer and row-wise vector ops on `[N, D]` tensors.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

fn dims2<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(Error::shape(format!("expected [N, D], got {s:?}"))),
    }
}

fn row_norms<T: Real>(x: &[T], d: usize) -> Vec<T> {
    x.chunks(d)
        .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

impl<T: Real> Tape<T> {
    /// `y = x W^T + b` with `x: [N, Cin]`, `W: [Cout, Cin]`, `b: [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin) = dims2(self.value(x))?;
        let (cout, wcin) = dims2(self.value(w))?;
        if wcin != cin {
            return Err(Error::shape(format!("linear: weight in-dim {wcin} vs input {cin}")));
        }
        let mut out = Tensor::zeros(&[n, cout]);
        gemm(
            MatRef::new(self.value(x).data(), n, cin),
            MatRef::new(self.value(w).data(), cout, cin).t(),
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = b {
            self.value(b).expect_shape(&[cout], "linear bias")?;
            let bd = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(cout) {
                row.iter_mut().zip(&bd).for_each(|(v, &bv)| *v = *v + bv);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(
            out,
            &parents,
            Box::new(move |ctx| {
                let gy = MatRef::new(ctx.grad.data(), n, cout);
                let gx = ctx.needs[0].then(|| {
                    let mut gx = Tensor::zeros(&[n, cin]);
                    gemm(gy, MatRef::new(ctx.inputs[1].data(), cout, cin), T::zero(), gx.data_mut());
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = Tensor::zeros(&[cout, cin]);
                    gemm(gy.t(), MatRef::new(ctx.inputs[0].data(), n, cin), T::zero(), gw.data_mut());
                    gw
                });
                let mut res = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    let mut gb = vec![T::zero(); cout];
                    for row in ctx.grad.data().chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    res.push(Some(Tensor::from_vec(&[cout], gb)?));
                }
                Ok(res)
            }),
        ))
    }

    /// Row-wise Euclidean distance `||a_i - b_i||`, shape `[N]`. The subgradient at
    /// coincident rows is zero.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(a))?;
        self.value(b).expect_shape(&[n, d], "l2_distance")?;
        let diff = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let out = Tensor::from_vec(&[n], row_norms(diff.data(), d))?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |ctx| {
                let mut ga = ctx.inputs[0].zip_map(ctx.inputs[1], |x, y| x - y)?;
                for (i, row) in ga.data_mut().chunks_mut(d).enumerate() {
                    let dist = ctx.output.data()[i];
                    let s = if dist > T::zero() { ctx.grad.data()[i] / dist } else { T::zero() };
                    row.iter_mut().for_each(|v| *v = *v * s);
                }
                let gb = ga.map(|v| -v);
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    /// Row-wise cosine similarity with each norm floored at `eps`, shape `[N]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (n, d) = dims2(self.value(a))?;
        self.value(b).expect_shape(&[n, d], "cosine_similarity")?;
        let e = T::lit(eps);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let na = row_norms(av, d);
        let nb = row_norms(bv, d);
        let cos: Vec<T> = (0..n)
            .map(|i| {
                let dot: T = av[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bv[i * d..(i + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum();
                dot / (na[i].max(e) * nb[i].max(e))
            })
            .collect();
        let out = Tensor::from_vec(&[n], cos)?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |ctx| {
                let av = ctx.inputs[0].data();
                let bv = ctx.inputs[1].data();
                let na = row_norms(av, d);
                let nb = row_norms(bv, d);
                let mut ga = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); n * d];
                for i in 0..n {
                    let g = ctx.grad.data()[i];
                    let c = ctx.output.data()[i];
                    let (ra, rb) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
                    let (pa, pb) = (na[i].max(e), nb[i].max(e));
                    // d/da [a.b / (|a| |b|)] = b/(|a||b|) - cos * a/|a|^2, where the
                    // second term vanishes while |a| sits on the eps floor.
                    let ka = if na[i] > e { c / (pa * pa) } else { T::zero() };
                    let kb = if nb[i] > e { c / (pb * pb) } else { T::zero() };
                    for j in 0..d {
                        ga[i * d + j] = g * (rb[j] / (pa * pb) - ka * ra[j]);
                        gb[i * d + j] = g * (ra[j] / (pa * pb) - kb * rb[j]);
                    }
                }
                Ok(vec![
                    Some(Tensor::from_vec(&[n, d], ga)?),
                    Some(Tensor::from_vec(&[n, d], gb)?),
                ])
            }),
        ))
    }
}
