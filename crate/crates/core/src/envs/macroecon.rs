//! Heterogeneous-agent savings economy with an aggregate productivity shock.
//!
//! States are (wealth, income) grid pairs flattened row-major as
//! `s = i_wealth · n_income + i_income`. Prices are the partial derivatives
//! of a Cobb-Douglas production function evaluated at the population means;
//! agents observe only the two prices.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{push_merged, MeanFieldEnv, Scenario};
use crate::noise::{keyed_rng, stream, CommonNoise};
use crate::types::{AggregateState, EnvSpec, IdioNoise, MeanField, NoiseSpec, TransitionRow};

/// Floor on aggregate capital before computing prices.
pub const CAPITAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroParams {
    pub alpha: f64,
    pub discount: f64,
    pub sigma_crra: f64,
    pub rho_z: f64,
    pub nu_z: f64,
    pub horizon: usize,
    pub wealth_max: f64,
    /// First strictly positive wealth grid point.
    pub wealth_min_positive: f64,
    pub income_min: f64,
    pub income_max: f64,
    pub n_wealth: usize,
    pub n_income: usize,
    pub n_actions: usize,
    /// Income moves down / stays / up with these probabilities.
    pub income_kernel: [f64; 3],
    pub consumption_floor: f64,
}

impl Default for MacroParams {
    fn default() -> Self {
        Self {
            alpha: 0.36,
            discount: 0.95,
            sigma_crra: 2.0,
            rho_z: 0.9,
            nu_z: 0.03,
            horizon: 128,
            wealth_max: 99.0,
            wealth_min_positive: 0.5,
            income_min: 0.1,
            income_max: 2.0,
            n_wealth: 200,
            n_income: 5,
            n_actions: 20,
            income_kernel: [0.1, 0.8, 0.1],
            consumption_floor: 1e-8,
        }
    }
}

impl MacroParams {
    /// The reduced grid used for quick experiments: 50 wealth points.
    pub fn reduced() -> Self {
        Self {
            n_wealth: 50,
            ..Self::default()
        }
    }
}

/// `n` geometrically spaced points from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    let mut g: Vec<f64> = (0..n).map(|i| lo * ratio.powi(i as i32)).collect();
    g[n - 1] = hi;
    g
}

/// Splits `x` between its two bracketing grid points so the mean is `x`.
/// Values outside the grid go entirely to the nearest end.
pub fn lottery(grid: &[f64], x: f64) -> [(usize, f64); 2] {
    let last = grid.len() - 1;
    if x <= grid[0] {
        return [(0, 1.0), (0, 0.0)];
    }
    if x >= grid[last] {
        return [(last, 1.0), (last, 0.0)];
    }
    // First index with grid[j] > x; grid[j-1] <= x < grid[j].
    let j = grid.partition_point(|&g| g <= x);
    let (lo, hi) = (grid[j - 1], grid[j]);
    if x == lo {
        return [(j - 1, 1.0), (j, 0.0)];
    }
    let up = (x - lo) / (hi - lo);
    [(j - 1, 1.0 - up), (j, up)]
}

#[derive(Debug)]
pub struct Macroeconomy {
    params: MacroParams,
    spec: EnvSpec,
    noise: CommonNoise,
    wealth: Vec<f64>,
    income: Vec<f64>,
    floor_hit: AtomicBool,
}

impl Clone for Macroeconomy {
    fn clone(&self) -> Self {
        Self::new(self.params.clone())
    }
}

impl Macroeconomy {
    pub fn new(params: MacroParams) -> Self {
        let mut wealth = vec![0.0];
        wealth.extend(geometric_grid(
            params.wealth_min_positive,
            params.wealth_max,
            params.n_wealth - 1,
        ));
        let income = geometric_grid(params.income_min, params.income_max, params.n_income);
        let noise_spec = NoiseSpec::Ar1 {
            rho: params.rho_z,
            nu: params.nu_z,
            z0: 0.0,
        };
        let k = &params.income_kernel;
        let spec = EnvSpec {
            num_states: params.n_wealth * params.n_income,
            num_actions: params.n_actions,
            horizon: params.horizon,
            discount: params.discount,
            obs_dim: 2,
            noise: noise_spec.clone(),
            idio_noise: IdioNoise {
                support: vec![-1.0, 0.0, 1.0],
                pmf: k.to_vec(),
            },
        };
        Self {
            params,
            spec,
            noise: CommonNoise::new(noise_spec),
            wealth,
            income,
            floor_hit: AtomicBool::new(false),
        }
    }

    pub fn reduced() -> Self {
        Self::new(MacroParams::reduced())
    }

    pub fn params(&self) -> &MacroParams {
        &self.params
    }

    pub fn wealth_grid(&self) -> &[f64] {
        &self.wealth
    }

    pub fn income_grid(&self) -> &[f64] {
        &self.income
    }

    /// `(wealth, income)` of flat state `s`.
    pub fn coords(&self, s: usize) -> (f64, f64) {
        let n2 = self.params.n_income;
        (self.wealth[s / n2], self.income[s % n2])
    }

    /// Population means `(s̄₁, s̄₂)`.
    pub fn means(&self, mu: &MeanField) -> (f64, f64) {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (s, p) in mu.probs().iter().enumerate() {
            let (w, y) = self.coords(s);
            m1 += p * w;
            m2 += p * y;
        }
        (m1, m2)
    }

    /// Interest rate and wage from population means and productivity.
    pub fn prices_from_means(&self, k: f64, l: f64, z: f64) -> (f64, f64) {
        let a = self.params.alpha;
        let k = if k < CAPITAL_FLOOR {
            log::warn!("aggregate capital {k} below floor; clamped to {CAPITAL_FLOOR}");
            CAPITAL_FLOOR
        } else {
            k
        };
        let tfp = z.exp();
        let p1 = a * tfp * k.powf(a - 1.0) * l.powf(1.0 - a);
        let p2 = (1.0 - a) * tfp * k.powf(a) * l.powf(-a);
        (p1, p2)
    }

    pub fn prices(&self, mu: &MeanField, z: f64) -> (f64, f64) {
        let (k, l) = self.means(mu);
        self.prices_from_means(k, l, z)
    }

    /// Production `e^z s̄₁^α s̄₂^{1−α}`.
    pub fn production(&self, k: f64, l: f64, z: f64) -> f64 {
        let a = self.params.alpha;
        z.exp() * k.powf(a) * l.powf(1.0 - a)
    }

    pub fn consumption(&self, s: usize, action: f64, p1: f64, p2: f64) -> f64 {
        let (w, y) = self.coords(s);
        action * (p1 * w + p2 * y)
    }

    /// CRRA utility with the consumption floor applied.
    pub fn utility(&self, c: f64) -> f64 {
        let floor = self.params.consumption_floor;
        let c = if c < floor {
            if !self.floor_hit.swap(true, Ordering::Relaxed) {
                log::warn!("consumption {c} below floor; using {floor}");
            }
            floor
        } else {
            c
        };
        let sigma = self.params.sigma_crra;
        if (sigma - 1.0).abs() < 1e-12 {
            c.ln()
        } else {
            c.powf(1.0 - sigma) / (1.0 - sigma)
        }
    }

    fn initial(&self, z: f64) -> AggregateState {
        AggregateState {
            mean_field: MeanField::uniform(self.spec.num_states),
            noise: z,
            time: 0,
            statics: Vec::new(),
        }
    }
}

impl Default for Macroeconomy {
    fn default() -> Self {
        Self::new(MacroParams::default())
    }
}

impl MeanFieldEnv for Macroeconomy {
    fn id(&self) -> &str {
        "macro"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn noise(&self) -> &CommonNoise {
        &self.noise
    }

    fn state_input(&self) -> crate::types::StateInput {
        crate::types::StateInput::Features(2)
    }

    /// Log-wealth and income, each scaled to `[0, 1]`.
    fn state_features(&self) -> Option<Array2<f64>> {
        let n = self.spec.num_states;
        Some(Array2::from_shape_fn((n, 2), |(s, k)| {
            let (w, y) = self.coords(s);
            if k == 0 {
                w.ln_1p() / self.params.wealth_max.ln_1p()
            } else {
                y / self.params.income_max
            }
        }))
    }

    /// Bin midpoints `(a + 0.5) / K` of the consumption fraction.
    fn action_value(&self, a: usize) -> f64 {
        (a as f64 + 0.5) / self.params.n_actions as f64
    }

    fn continuous_action(&self, x: f64) -> Option<f64> {
        Some(x.clamp(0.0, 1.0))
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> AggregateState {
        self.initial(0.0)
    }

    fn aggregates(&self, g: &AggregateState) -> Vec<f64> {
        let (p1, p2) = self.prices(&g.mean_field, g.noise);
        vec![p1, p2]
    }

    fn deterministic_at(&self, s: usize, action: f64, _g: &AggregateState, agg: &[f64]) -> f64 {
        let (w, y) = self.coords(s);
        (1.0 - action) * ((1.0 + agg[0]) * w + agg[1] * y)
    }

    fn transition_at(
        &self,
        s: usize,
        action: f64,
        g: &AggregateState,
        agg: &[f64],
        out: &mut TransitionRow,
    ) {
        out.clear();
        let n2 = self.params.n_income;
        let next_w = self
            .deterministic_at(s, action, g, agg)
            .clamp(0.0, self.params.wealth_max);
        let i2 = s % n2;
        let [down, stay, up] = self.params.income_kernel;
        let mut income = [(i2, stay), (i2, 0.0), (i2, 0.0)];
        if i2 == 0 {
            income[0].1 += down;
        } else {
            income[1] = (i2 - 1, down);
        }
        if i2 + 1 == n2 {
            income[0].1 += up;
        } else {
            income[2] = (i2 + 1, up);
        }
        for (j, pw) in lottery(&self.wealth, next_w) {
            if pw == 0.0 {
                continue;
            }
            for &(k, py) in &income {
                push_merged(out, j * n2 + k, pw * py);
            }
        }
    }

    fn reward_at(&self, s: usize, action: f64, _g: &AggregateState, agg: &[f64]) -> f64 {
        self.utility(self.consumption(s, action, agg[0], agg[1]))
    }

    fn observe(&self, g: &AggregateState) -> Vec<f64> {
        let (p1, p2) = self.prices(&g.mean_field, g.noise);
        vec![p1, p2]
    }

    /// `count` sampled productivity paths.
    fn eval_scenarios(&self, count: usize, seed: u64) -> Vec<Scenario> {
        (0..count)
            .map(|i| {
                let mut rng = keyed_rng(seed, stream::NOISE, u64::MAX - i as u64);
                Scenario {
                    initial: self.initial(0.0),
                    noise_seed: rng.next_u64(),
                    label: format!("path{i}"),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_prices(env: &Macroeconomy) -> AggregateState {
        env.initial(0.0)
    }

    #[test]
    fn grids() {
        let env = Macroeconomy::default();
        let w = env.wealth_grid();
        assert_eq!(w.len(), 200);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.5);
        assert_eq!(w[199], 99.0);
        assert!(w.windows(2).all(|p| p[0] < p[1]));
        let y = env.income_grid();
        assert_eq!(y.len(), 5);
        assert!((y[0] - 0.1).abs() < 1e-15 && y[4] == 2.0);
    }

    #[test]
    fn unit_means_give_share_prices() {
        let env = Macroeconomy::default();
        let (p1, p2) = env.prices_from_means(1.0, 1.0, 0.0);
        assert!((p1 - 0.36).abs() < 1e-15);
        assert!((p2 - 0.64).abs() < 1e-15);
        let (p1, _) = env.prices_from_means(4.0, 1.0, 0.0);
        assert!((p1 - 0.36 * 4f64.powf(-0.64)).abs() < 1e-15);
        assert!((p1 - 0.1483).abs() < 1e-4);
    }

    #[test]
    fn full_consumption_empties_wealth() {
        let env = Macroeconomy::default();
        let g = with_prices(&env);
        let agg = env.aggregates(&g);
        let mut row = Vec::new();
        let s = 120 * 5 + 2;
        env.transition_at(s, 1.0, &g, &agg, &mut row);
        let total: f64 = row.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|(n, _)| n / 5 == 0));
        let probs: Vec<(usize, f64)> = row.iter().map(|&(n, p)| (n % 5, p)).collect();
        assert_eq!(probs, vec![(2, 0.8), (1, 0.1), (3, 0.1)]);
    }

    #[test]
    fn lottery_preserves_the_mean() {
        let env = Macroeconomy::default();
        let w = env.wealth_grid();
        for x in [5.5, 0.1, 0.5, 42.42, 98.999] {
            let lot = lottery(w, x);
            let mass: f64 = lot.iter().map(|(_, p)| p).sum();
            let mean: f64 = lot.iter().map(|&(j, p)| p * w[j]).sum();
            assert!((mass - 1.0).abs() < 1e-15);
            assert!((mean - x).abs() < 1e-12, "x={x}, mean={mean}");
        }
        let exact = lottery(w, w[17]);
        assert_eq!(exact[0], (17, 1.0));
    }

    #[test]
    fn reward_examples() {
        let env = Macroeconomy::default();
        assert_eq!(env.utility(1.0), -1.0);
        assert_eq!(env.utility(2.0), -0.5);
        assert_eq!(env.utility(0.0), -1e8);
    }

    #[test]
    fn boundary_income_folds_into_stay() {
        let env = Macroeconomy::default();
        let g = with_prices(&env);
        let agg = env.aggregates(&g);
        let mut row = Vec::new();
        env.transition_at(10 * 5, 1.0, &g, &agg, &mut row);
        assert_eq!(row, vec![(0, 0.9), (1, 0.1)]);
        env.transition_at(10 * 5 + 4, 1.0, &g, &agg, &mut row);
        assert_eq!(row, vec![(4, 0.9), (3, 0.1)]);
    }
}
