//! Differentiable operations on [`Var`].
//!
//! Binary elementwise ops broadcast numpy-style over both axes: each
//! dimension must match or be 1 on one side.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{DiffError, Result};
use crate::special::{digamma, lgamma, trigamma};
use crate::tape::{Tensor, Var};

fn broadcast_dim(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(DiffError::Shape { op, lhs: a, rhs: b }),
    }
}

/// Sums `grad` down to `shape` along broadcast axes.
fn reduce_to(grad: Tensor, shape: (usize, usize)) -> Tensor {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_to(x: &Tensor, shape: (usize, usize)) -> Tensor {
    if x.dim() == shape {
        x.clone()
    } else {
        x.broadcast(shape)
            .expect("shape checked at forward time")
            .to_owned()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn check_same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(DiffError::Argument(format!("{op}: operands live on different tapes")))
        }
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // d out / d in, given (input, output)
        df: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = self.value().mapv(f);
        self.tape.push(
            op,
            &[self],
            value,
            Box::new(move |g, p, out| {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(p[0])
                    .and(out)
                    .for_each(|d, &x, &y| *d *= df(x, y));
                vec![Some(d)]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "add")?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_dim("add", a.dim(), b.dim())?;
        let value = &*a + &*b;
        debug_assert_eq!(value.dim(), shape);
        let (sa, sb) = (a.dim(), b.dim());
        self.tape.push(
            "add",
            &[self, other],
            value,
            Box::new(move |g, _, _| vec![Some(reduce_to(g.clone(), sa)), Some(reduce_to(g.clone(), sb))]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "sub")?;
        let (a, b) = (self.value(), other.value());
        broadcast_dim("sub", a.dim(), b.dim())?;
        let value = &*a - &*b;
        let (sa, sb) = (a.dim(), b.dim());
        self.tape.push(
            "sub",
            &[self, other],
            value,
            Box::new(move |g, _, _| {
                vec![Some(reduce_to(g.clone(), sa)), Some(reduce_to(-g, sb))]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_dim("mul", a.dim(), b.dim())?;
        let value = &*a * &*b;
        self.tape.push(
            "mul",
            &[self, other],
            value,
            Box::new(move |g, p, _| {
                let ga = g * &broadcast_to(p[1], shape);
                let gb = g * &broadcast_to(p[0], shape);
                vec![Some(reduce_to(ga, p[0].dim())), Some(reduce_to(gb, p[1].dim()))]
            }),
        )
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "div")?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_dim("div", a.dim(), b.dim())?;
        let value = &*a / &*b;
        self.tape.push(
            "div",
            &[self, other],
            value,
            Box::new(move |g, p, out| {
                let b = broadcast_to(p[1], shape);
                let ga = g / &b;
                let gb = -(g * out) / &b;
                vec![Some(reduce_to(ga, p[0].dim())), Some(reduce_to(gb, p[1].dim()))]
            }),
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "minimum")?;
        let (a, b) = (self.value(), other.value());
        if a.dim() != b.dim() {
            return Err(DiffError::Shape {
                op: "minimum",
                lhs: a.dim(),
                rhs: b.dim(),
            });
        }
        let mut value = (*a).clone();
        Zip::from(&mut value).and(&*b).for_each(|x, &y| *x = x.min(y));
        self.tape.push(
            "minimum",
            &[self, other],
            value,
            Box::new(move |g, p, _| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(p[0])
                    .and(p[1])
                    .for_each(|ga, gb, &x, &y| {
                        if x <= y {
                            *gb = 0.0;
                        } else {
                            *ga = 0.0;
                        }
                    });
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.nrows() {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: a.dim(),
                rhs: b.dim(),
            });
        }
        let value = a.dot(&*b);
        self.tape.push(
            "matmul",
            &[self, other],
            value,
            Box::new(|g, p, _| vec![Some(g.dot(&p[1].t())), Some(p[0].t().dot(g))]),
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let value = self.value().mapv(|x| x * c);
        self.tape
            .push("scale", &[self], value, Box::new(move |g, _, _| vec![Some(g * c)]))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let value = self.value().mapv(|x| x + c);
        self.tape
            .push("add_scalar", &[self], value, Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn lgamma(self) -> Result<Var<'t>> {
        self.unary("lgamma", lgamma, |x, _| digamma(x))
    }

    pub fn digamma(self) -> Result<Var<'t>> {
        self.unary("digamma", digamma, |x, _| trigamma(x))
    }

    /// Clamps into `[lo, hi]`; zero gradient outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        let value = self.value().mapv(|x| x.clamp(lo, hi));
        self.tape.push(
            "clamp",
            &[self],
            value,
            Box::new(move |g, p, _| {
                let mut d = g.clone();
                Zip::from(&mut d).and(p[0]).for_each(|d, &x| {
                    if x < lo || x > hi {
                        *d = 0.0;
                    }
                });
                vec![Some(d)]
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let mut value = (*x).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.tape.push(
            "log_softmax",
            &[self],
            value,
            Box::new(|g, _, out| {
                let mut d = g.clone();
                for (mut drow, orow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let gsum = drow.sum();
                    Zip::from(&mut drow).and(&orow).for_each(|d, &y| *d -= y.exp() * gsum);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Stops gradient flow: forwards the value, contributes nothing upstream.
    pub fn stop_gradient(self) -> Var<'t> {
        self.tape.constant_shared(self.value())
    }

    /// Row sums, `(r, c) -> (r, 1)`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let value = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(
            "sum_cols",
            &[self],
            value,
            Box::new(|g, p, _| vec![Some(broadcast_to(g, p[0].dim()))]),
        )
    }

    /// Column sums, `(r, c) -> (1, c)`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let value = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(
            "sum_rows",
            &[self],
            value,
            Box::new(|g, p, _| vec![Some(broadcast_to(g, p[0].dim()))]),
        )
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let value = Array2::from_elem((1, 1), self.value().sum());
        self.tape.push(
            "sum_all",
            &[self],
            value,
            Box::new(|g, p, _| vec![Some(Array2::from_elem(p[0].dim(), g[[0, 0]]))]),
        )
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = {
            let (r, c) = self.shape();
            (r * c).max(1) as f64
        };
        self.sum_all()?.scale(1.0 / n)
    }

    /// Horizontal concatenation of blocks with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Argument("concat_cols of nothing".into()))?;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].nrows();
        for v in &values {
            if v.nrows() != rows {
                return Err(DiffError::Shape {
                    op: "concat_cols",
                    lhs: values[0].dim(),
                    rhs: v.dim(),
                });
            }
        }
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| DiffError::Argument(e.to_string()))?;
        let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        first.tape.push(
            "concat_cols",
            parts,
            value,
            Box::new(move |g, _, _| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let part = g.slice(s![.., start..start + w]).to_owned();
                        start += w;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    /// Vertical concatenation of blocks with equal column counts.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Argument("concat_rows of nothing".into()))?;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].ncols();
        for v in &values {
            if v.ncols() != cols {
                return Err(DiffError::Shape {
                    op: "concat_rows",
                    lhs: values[0].dim(),
                    rhs: v.dim(),
                });
            }
        }
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| DiffError::Argument(e.to_string()))?;
        let heights: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
        first.tape.push(
            "concat_rows",
            parts,
            value,
            Box::new(move |g, _, _| {
                let mut start = 0;
                heights
                    .iter()
                    .map(|&h| {
                        let part = g.slice(s![start..start + h, ..]).to_owned();
                        start += h;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    /// `out[i] = self[indices[i]]`; repeated indices accumulate gradient.
    pub fn gather_rows(self, indices: Arc<[usize]>) -> Result<Var<'t>> {
        let x = self.value();
        let rows = x.nrows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DiffError::Argument(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let mut value = Array2::zeros((indices.len(), x.ncols()));
        for (mut out, &i) in value.rows_mut().into_iter().zip(indices.iter()) {
            out.assign(&x.row(i));
        }
        self.tape.push(
            "gather_rows",
            &[self],
            value,
            Box::new(move |g, p, _| {
                let mut d = Array2::zeros(p[0].dim());
                for (grow, &i) in g.rows().into_iter().zip(indices.iter()) {
                    let mut drow = d.row_mut(i);
                    drow += &grow;
                }
                vec![Some(d)]
            }),
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if start > end || end > x.nrows() {
            return Err(DiffError::Argument(format!(
                "slice_rows {start}..{end} out of range for {} rows",
                x.nrows()
            )));
        }
        let value = x.slice(s![start..end, ..]).to_owned();
        self.tape.push(
            "slice_rows",
            &[self],
            value,
            Box::new(move |g, p, _| {
                let mut d = Array2::zeros(p[0].dim());
                d.slice_mut(s![start..end, ..]).assign(g);
                vec![Some(d)]
            }),
        )
    }

    /// Picks one column per row: `out[i, 0] = self[i, cols[i]]`.
    pub fn select_cols(self, cols: Arc<[usize]>) -> Result<Var<'t>> {
        let x = self.value();
        if cols.len() != x.nrows() {
            return Err(DiffError::Shape {
                op: "select_cols",
                lhs: x.dim(),
                rhs: (cols.len(), 1),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= x.ncols()) {
            return Err(DiffError::Argument(format!(
                "select_cols: column {bad} out of range for {} columns",
                x.ncols()
            )));
        }
        let value = Array2::from_shape_fn((cols.len(), 1), |(i, _)| x[[i, cols[i]]]);
        self.tape.push(
            "select_cols",
            &[self],
            value,
            Box::new(move |g, p, _| {
                let mut d = Array2::zeros(p[0].dim());
                for (i, &c) in cols.iter().enumerate() {
                    d[[i, c]] = g[[i, 0]];
                }
                vec![Some(d)]
            }),
        )
    }
}
