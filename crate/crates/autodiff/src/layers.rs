//! Dense, embedding and gated-recurrent layers over a [`ParamStore`].

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::init::{lecun_uniform, orthogonal};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::Var;

/// `y = x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), lecun_uniform(fan_in, fan_out, rng));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, fan_out)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.var(self.w))?.add(p.var(self.b))
    }
}

/// Lookup table mapping an index to a learned row.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        // Unit-variance rows, like a dense layer fed a one-hot input.
        let mut full = Array2::zeros((count, width));
        for mut row in full.rows_mut() {
            row.assign(&lecun_uniform(1, width, rng).row(0));
        }
        let table = store.add(format!("{name}.table"), full);
        Self {
            table,
            count,
            width,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, indices: Arc<[usize]>) -> Result<Var<'t>> {
        p.var(self.table).gather_rows(indices)
    }
}

/// Gated recurrent unit with separate input and hidden biases on the
/// candidate branch:
///
/// ```text
/// r  = σ(x Wr + h Ur + br)
/// z  = σ(x Wz + h Uz + bz)
/// n  = tanh(x Wn + bn + r ⊙ (h Un + bhn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
    pub bhn: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = |store: &mut ParamStore, gate: &str, rng: &mut R| {
            store.add(format!("{name}.w{gate}"), lecun_uniform(input, hidden, rng))
        };
        let wr = kernel(store, "r", rng);
        let wz = kernel(store, "z", rng);
        let wn = kernel(store, "n", rng);
        let recurrent = |store: &mut ParamStore, gate: &str, rng: &mut R| {
            store.add(format!("{name}.u{gate}"), orthogonal(hidden, hidden, rng))
        };
        let ur = recurrent(store, "r", rng);
        let uz = recurrent(store, "z", rng);
        let un = recurrent(store, "n", rng);
        let mut bias = |gate: &str| store.add(format!("{name}.b{gate}"), Array2::zeros((1, hidden)));
        let br = bias("r");
        let bz = bias("z");
        let bn = bias("n");
        let bhn = bias("hn");
        Self {
            wr,
            ur,
            br,
            wz,
            uz,
            bz,
            wn,
            un,
            bn,
            bhn,
            input,
            hidden,
        }
    }

    /// One step for a batch of rows: `x` is `(b, input)`, `h` is `(b, hidden)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let gate = |w: ParamId, u: ParamId, b: ParamId| -> Result<Var<'t>> {
            x.matmul(p.var(w))?
                .add(h.matmul(p.var(u))?)?
                .add(p.var(b))?
                .sigmoid()
        };
        let r = gate(self.wr, self.ur, self.br)?;
        let z = gate(self.wz, self.uz, self.bz)?;
        let hn = h.matmul(p.var(self.un))?.add(p.var(self.bhn))?;
        let n = x
            .matmul(p.var(self.wn))?
            .add(p.var(self.bn))?
            .add(r.mul(hn)?)?
            .tanh()?;
        // (1 - z) n + z h = n + z (h - n)
        n.add(z.mul(h.sub(n)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).fill(0.0);
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Array2::from_elem((2, 3), 7.5));
        let h = tape.constant(Array2::zeros((2, 4)));
        let h2 = gru.forward(&p, x, h).unwrap();
        assert!(h2.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_output_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", 2, 5, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mut h = tape.constant(Array2::zeros((1, 5)));
        for t in 0..20 {
            let x = tape.constant(Array2::from_elem((1, 2), 1e3 * (t as f64 - 10.0)));
            h = gru.forward(&p, x, h).unwrap();
            assert!(h.value().iter().all(|v| v.abs() <= 1.0));
        }
    }
}
