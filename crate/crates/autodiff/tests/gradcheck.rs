//! Reverse-mode gradients against central finite differences.

use std::sync::Arc;

use mfax_autodiff::dist::{beta_log_density, beta_log_density_grid};
use mfax_autodiff::layers::{Dense, GruCell};
use mfax_autodiff::{ParamStore, Result, Tape, Tensor, Var};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// Largest relative error between the tape gradient and central differences
/// of `f` over every entry of every input.
fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        f(&tape, &vars).unwrap().item()
    };

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = inputs.to_vec();
            plus[k][[r, c]] += STEP;
            let mut minus = inputs.to_vec();
            minus[k][[r, c]] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic[[r, c]];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

fn random(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(lo..hi))
}

type UnaryOp = for<'t> fn(Var<'t>) -> Result<Var<'t>>;

fn unary_ops() -> Vec<(&'static str, UnaryOp, f64, f64)> {
    vec![
        ("relu", |x| x.relu(), -2.0, 2.0),
        ("sigmoid", |x| x.sigmoid(), -4.0, 4.0),
        ("tanh", |x| x.tanh(), -3.0, 3.0),
        ("exp", |x| x.exp(), -2.0, 2.0),
        ("log", |x| x.log(), 0.2, 4.0),
        ("softplus", |x| x.softplus(), -4.0, 4.0),
        ("lgamma", |x| x.lgamma(), 0.3, 20.0),
        ("digamma", |x| x.digamma(), 0.5, 20.0),
        ("square", |x| x.square(), -3.0, 3.0),
        ("log_softmax", |x| x.log_softmax(), -3.0, 3.0),
    ]
}

#[test]
fn every_unary_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, op, lo, hi) in unary_ops() {
        for _ in 0..100 {
            let x = random(&mut rng, 2, 3, lo, hi);
            // Keep relu away from its kink.
            let x = if name == "relu" {
                x.mapv(|v| if v.abs() < 1e-3 { 0.5 } else { v })
            } else {
                x
            };
            let w = random(&mut rng, 2, 3, -1.0, 1.0);
            let err = check(&[x], |t, v| op(v[0])?.mul(t.constant(w.clone()))?.sum_all());
            let tol = if name == "lgamma" || name == "digamma" { 1e-4 } else { 1e-5 };
            assert!(err < tol, "{name}: relative error {err}");
        }
    }
}

#[test]
fn every_binary_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let a = random(&mut rng, 3, 4, -2.0, 2.0);
        let b = random(&mut rng, 1, 4, 0.5, 2.0);
        let c = random(&mut rng, 4, 2, -1.0, 1.0);
        let col = random(&mut rng, 3, 1, -1.0, 1.0);
        let errs = [
            check(&[a.clone(), b.clone()], |_, v| v[0].add(v[1])?.square()?.sum_all()),
            check(&[a.clone(), b.clone()], |_, v| v[0].sub(v[1])?.square()?.sum_all()),
            check(&[a.clone(), b.clone()], |_, v| v[0].mul(v[1])?.tanh()?.sum_all()),
            check(&[a.clone(), b.clone()], |_, v| v[0].div(v[1])?.tanh()?.sum_all()),
            check(&[a.clone(), c.clone()], |_, v| v[0].matmul(v[1])?.tanh()?.sum_all()),
            check(&[col.clone(), b.clone()], |_, v| v[0].mul(v[1])?.sin_like()?.sum_all()),
            check(&[a.clone()], |_, v| v[0].scale(-1.7)?.add_scalar(0.3)?.tanh()?.sum_all()),
            check(&[a.clone()], |_, v| v[0].sum_cols()?.square()?.sum_all()),
            check(&[a.clone()], |_, v| v[0].sum_rows()?.square()?.sum_all()),
            check(&[a.clone()], |_, v| v[0].mean_all()?.square()),
            check(&[a.clone(), a.mapv(|x| x + 0.37)], |_, v| {
                v[0].minimum(v[1])?.square()?.sum_all()
            }),
        ];
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < 1e-5, "binary case {i}: relative error {e}");
        }
    }
}

trait SinLike<'t> {
    fn sin_like(self) -> Result<Var<'t>>;
}

impl<'t> SinLike<'t> for Var<'t> {
    /// A smooth non-polynomial composite used to exercise chains.
    fn sin_like(self) -> Result<Var<'t>> {
        self.tanh()?.mul(self.sigmoid()?)
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let a = random(&mut rng, 4, 3, -2.0, 2.0);
        let b = random(&mut rng, 4, 2, -2.0, 2.0);
        let w = random(&mut rng, 5, 6, -1.0, 1.0);
        let idx: Arc<[usize]> = (0..6).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>().into();
        let cols: Arc<[usize]> = (0..4).map(|_| rng.gen_range(0..3)).collect::<Vec<_>>().into();
        let e1 = check(&[a.clone(), b.clone()], |t, v| {
            let cat = Var::concat_cols(&[v[0], v[1]])?; // 4 x 5
            let top = cat.slice_rows(0, 2)?;
            let both = Var::concat_rows(&[top, cat.slice_rows(1, 4)?])?; // 5 x 5
            both.tanh()?.matmul(t.constant(w.clone()))?.square()?.sum_all()
        });
        let e2 = check(&[a.clone()], |_, v| {
            v[0].gather_rows(idx.clone())?.tanh()?.square()?.sum_all()
        });
        let e3 = check(&[a.clone()], |_, v| {
            v[0].log_softmax()?.select_cols(cols.clone())?.sum_all()
        });
        let e4 = check(&[a.clone()], |_, v| v[0].clamp(-1.0, 1.0)?.square()?.sum_all());
        for e in [e1, e2, e3, e4] {
            assert!(e < 1e-5, "relative error {e}");
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Tanh,
    Sigmoid,
    Softplus,
    MulSelf,
    AddOther,
    MatmulOther,
    Exp,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Tanh),
        Just(Op::Sigmoid),
        Just(Op::Softplus),
        Just(Op::MulSelf),
        Just(Op::AddOther),
        Just(Op::MatmulOther),
        Just(Op::Exp),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Random composite graphs of up to six ops.
    #[test]
    fn composite_graphs_match_finite_differences(
        ops in proptest::collection::vec(op_strategy(), 1..=6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, 3, 3, -1.0, 1.0);
        let y = random(&mut rng, 3, 3, -1.0, 1.0);
        let err = check(&[x, y], |_, v| {
            let mut h = v[0];
            for op in &ops {
                h = match op {
                    Op::Tanh => h.tanh()?,
                    Op::Sigmoid => h.sigmoid()?,
                    Op::Softplus => h.softplus()?,
                    Op::MulSelf => h.mul(h)?,
                    Op::AddOther => h.add(v[1])?,
                    Op::MatmulOther => h.matmul(v[1])?,
                    // Bounded so repeated exponentials stay tame.
                    Op::Exp => h.tanh()?.exp()?,
                };
            }
            h.sum_all()
        });
        prop_assert!(err < 1e-6, "relative error {}", err);
    }
}

#[test]
fn stop_gradient_on_every_path_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "d", 3, 2, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(random(&mut rng, 4, 3, -1.0, 1.0));
    let y = dense.forward(&p, x).unwrap().tanh().unwrap();
    let out = y.stop_gradient().exp().unwrap().sum_all().unwrap();
    let g = tape.backward(out).unwrap();
    for grad in p.grads(&g) {
        assert!(grad.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn gru_bptt_over_five_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 2, 4, &mut rng);
    let head = Dense::new(&mut store, "head", 4, 1, &mut rng);
    let xs: Vec<Tensor> = (0..5).map(|_| random(&mut rng, 1, 2, -1.0, 1.0)).collect();
    let inputs: Vec<Tensor> = store.iter().map(|(_, _, v)| v.clone()).collect();

    let err = check(&inputs, |t, v| {
        let bound = BoundView(v);
        let mut h = t.constant(Array2::zeros((1, 4)));
        let mut loss = t.scalar(0.0);
        for x in &xs {
            h = gru_step(&gru, &bound, t.constant(x.clone()), h)?;
            let y = h.matmul(bound.get(head.w))?.add(bound.get(head.b))?;
            loss = loss.add(y.tanh()?)?;
        }
        Ok(loss)
    });
    assert!(err < 1e-5, "relative error {err}");
}

struct BoundView<'a, 't>(&'a [Var<'t>]);

impl<'t> BoundView<'_, 't> {
    fn get(&self, id: mfax_autodiff::ParamId) -> Var<'t> {
        self.0[id.0]
    }
}

/// The GRU update written against raw leaves, mirroring `GruCell::forward`.
fn gru_step<'t>(g: &GruCell, p: &BoundView<'_, 't>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    let gate = |w, u, b| -> Result<Var<'t>> {
        x.matmul(p.get(w))?
            .add(h.matmul(p.get(u))?)?
            .add(p.get(b))?
            .sigmoid()
    };
    let r = gate(g.wr, g.ur, g.br)?;
    let z = gate(g.wz, g.uz, g.bz)?;
    let hn = h.matmul(p.get(g.un))?.add(p.get(g.bhn))?;
    let n = x.matmul(p.get(g.wn))?.add(p.get(g.bn))?.add(r.mul(hn)?)?.tanh()?;
    n.add(z.mul(h.sub(n)?)?)
}

#[test]
fn gru_cell_agrees_with_reference_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 3, 5, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let leaves: Vec<Var> = store.ids().map(|id| p.var(id)).collect();
    let view = BoundView(&leaves);
    let x = tape.constant(random(&mut rng, 2, 3, -1.0, 1.0));
    let h = tape.constant(random(&mut rng, 2, 5, -0.5, 0.5));
    let a = gru.forward(&p, x, h).unwrap();
    let b = gru_step(&gru, &view, x, h).unwrap();
    assert_eq!(*a.value(), *b.value());
}

#[test]
fn beta_density_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let x = random(&mut rng, 1, 5, 0.05, 0.95);
        let a = random(&mut rng, 3, 1, 1.0, 6.0);
        let b = random(&mut rng, 3, 1, 1.0, 6.0);
        let err = check(&[x, a, b], |_, v| beta_log_density(v[0], v[1], v[2])?.sum_all());
        assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn fused_beta_grid_matches_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let pts = [0.025, 0.2, 0.5, 0.8, 0.975];
    for _ in 0..100 {
        let a = random(&mut rng, 4, 1, 1.0, 8.0);
        let b = random(&mut rng, 4, 1, 1.0, 8.0);
        let err = check(&[a.clone(), b.clone()], |_, v| beta_log_density_grid(&pts, v[0], v[1])?.sum_all());
        assert!(err < 1e-6, "relative error {err}");
        let tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((1, 5), pts.to_vec()).unwrap());
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let fused = beta_log_density_grid(&pts, va, vb).unwrap();
        let composite = beta_log_density(x, va, vb).unwrap();
        let diff = (&*fused.value() - &*composite.value()).mapv(f64::abs);
        assert!(diff.iter().all(|d| *d < 1e-12));
    }
}
