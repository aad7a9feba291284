//! The exact mean-field update, the backward recursion and best responses
//! against brute-force oracles written independently of the engine.

use mfax_autodiff::Tape;
use mfax_core::engine::{analytic_rollout, expected_next, pushforward, sample_rollout, FixedPolicy, PolicyMatrix, TransitionTable};
use mfax_core::envs::{BeachBar, LinearQuadratic, Macroeconomy, TabularEnv};
use mfax_core::eval::{best_response, exploitability, table_matrices, value_on_sequence};
use mfax_core::hsm::{batch_objective, objective_and_grad, Source};
use mfax_core::noise::keyed_rng;
use mfax_core::policy::{PolicyConfig, PolicyNet};
use mfax_core::types::TransitionRow;
use mfax_core::{AnalyticTrajectory, MeanFieldEnv};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    keyed_rng(seed, 42, 0)
}

fn random_policy<R: Rng>(ns: usize, na: usize, rng: &mut R) -> PolicyMatrix {
    let mut pi = Array2::from_shape_simple_fn((ns, na), || rng.gen_range(0.0..1.0));
    for mut row in pi.rows_mut() {
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    pi
}

fn random_rows<R: Rng>(ns: usize, na: usize, rng: &mut R) -> Vec<Vec<TransitionRow>> {
    (0..ns)
        .map(|_| {
            (0..na)
                .map(|_| {
                    // Distinct next states with random weights.
                    let mut row: TransitionRow = Vec::new();
                    for n in 0..ns {
                        if rng.gen_bool(0.5) {
                            row.push((n, rng.gen_range(0.01..1.0)));
                        }
                    }
                    if row.is_empty() {
                        row.push((rng.gen_range(0..ns), 1.0));
                    }
                    let total: f64 = row.iter().map(|r| r.1).sum();
                    row.iter_mut().for_each(|r| r.1 /= total);
                    row
                })
                .collect()
        })
        .collect()
}

/// Dense `T[s][a][s']`.
fn dense(rows: &[Vec<TransitionRow>], ns: usize) -> Vec<Vec<Vec<f64>>> {
    rows.iter()
        .map(|per| {
            per.iter()
                .map(|row| {
                    let mut d = vec![0.0; ns];
                    row.iter().for_each(|&(n, p)| d[n] += p);
                    d
                })
                .collect()
        })
        .collect()
}

fn toy(seed: u64, ns: usize, na: usize, horizon: usize, gamma: f64) -> TabularEnv {
    let base = TabularEnv::random(ns, na, horizon, ns, &mut rng(seed));
    TabularEnv::new(base.kernel, base.rewards, base.crowd, base.initial, horizon, gamma)
}

fn small_net(env: &dyn MeanFieldEnv, recurrent: usize, seed: u64) -> PolicyNet {
    let cfg = PolicyConfig {
        state_width: 4,
        obs_width: 4,
        recurrent_hidden: recurrent,
        trunk_width: 8,
        trunk_depth: 2,
        head_init_scale: 1.0,
        ..PolicyConfig::default()
    };
    let mut net = PolicyNet::new(cfg, env, &mut keyed_rng(seed, 8, 0)).unwrap();
    net.normalizer.update(&[0.0]);
    net.normalizer.update(&[1.0]);
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sparse_contractions_match_dense_sums(ns in 1usize..=8, na in 1usize..=4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let rows = random_rows(ns, na, &mut r);
        let t = dense(&rows, ns);
        let table = TransitionTable::from_rows(&rows);
        let pi = random_policy(ns, na, &mut r);
        let mut mu: Vec<f64> = (0..ns).map(|_| r.gen_range(0.0..1.0)).collect();
        let total: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|m| *m /= total);
        let v: Vec<f64> = (0..ns).map(|_| r.gen_range(-5.0..5.0)).collect();

        let out = pushforward(&mu, &pi, &table).unwrap();
        for sp in 0..ns {
            let mut want = 0.0;
            for s in 0..ns {
                for a in 0..na {
                    want += mu[s] * pi[[s, a]] * t[s][a][sp];
                }
            }
            prop_assert!((out[sp] - want).abs() <= 1e-12);
        }
        let ev = expected_next(&v, &pi, &table);
        for s in 0..ns {
            let mut want = 0.0;
            for a in 0..na {
                for sp in 0..ns {
                    want += pi[[s, a]] * t[s][a][sp] * v[sp];
                }
            }
            prop_assert!((ev[s] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn exploitability_is_nonnegative(seed in 0u64..1000) {
        let env = toy(seed, 4, 3, 4, 0.9);
        let net = small_net(&env, 4, seed);
        let report = exploitability(&env, &net, &[env.scenario(seed, 0)]).unwrap();
        prop_assert!(report.exploitability >= -1e-9);
    }
}

#[test]
fn rollouts_conserve_mass_on_every_environment() {
    let envs: Vec<Box<dyn MeanFieldEnv>> = vec![
        Box::new(LinearQuadratic::default()),
        Box::new(BeachBar::default()),
        Box::new(Macroeconomy::reduced()),
    ];
    for env in &envs {
        let spec = env.spec();
        for seed in 0..2 {
            let policy = FixedPolicy(random_policy(spec.num_states, spec.num_actions, &mut rng(seed)));
            let traj = analytic_rollout(env.as_ref(), &policy, &env.scenario(seed, 0)).unwrap();
            for g in &traj.states {
                let mu = g.mean_field.probs();
                assert!(mu.iter().all(|&p| p >= 0.0));
                assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{}", env.id());
            }
        }
    }
}

/// `E_π[Σ γ^t R_t(s_t, a_t)]` by walking every state/action path.
fn path_sum(env: &TabularEnv, traj: &AnalyticTrajectory, policies: &[PolicyMatrix]) -> f64 {
    let ns = env.spec().num_states;
    let t = dense(&env.kernel, ns);
    let gamma = env.spec().discount;
    fn walk(
        step: usize,
        s: usize,
        weight: f64,
        disc: f64,
        t: &[Vec<Vec<f64>>],
        traj: &AnalyticTrajectory,
        policies: &[PolicyMatrix],
        gamma: f64,
    ) -> f64 {
        if step == policies.len() || weight == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for a in 0..policies[step].ncols() {
            let w = weight * policies[step][[s, a]];
            total += w * disc * traj.rewards[step][[s, a]];
            for (sp, &p) in t[s][a].iter().enumerate() {
                total += walk(step + 1, sp, w * p, disc * gamma, t, traj, policies, gamma);
            }
        }
        total
    }
    let mu0 = traj.mean_field(0).probs();
    (0..ns).map(|s| walk(0, s, mu0[s], 1.0, &t, traj, policies, gamma)).sum()
}

/// Every deterministic time-indexed table, as one-hot matrices.
fn all_tables(ns: usize, na: usize, horizon: usize) -> Vec<Vec<PolicyMatrix>> {
    let slots = ns * horizon;
    let count = na.pow(slots as u32);
    (0..count)
        .map(|mut code| {
            (0..horizon)
                .map(|_| {
                    let mut pi = Array2::zeros((ns, na));
                    for s in 0..ns {
                        pi[[s, code % na]] = 1.0;
                        code /= na;
                    }
                    pi
                })
                .collect()
        })
        .collect()
}

#[test]
fn backward_recursion_matches_path_enumeration() {
    for (seed, (ns, na, horizon)) in [(3, 2, 3), (4, 3, 4), (5, 2, 5), (2, 4, 6)].into_iter().enumerate() {
        let env = toy(seed as u64, ns, na, horizon, 0.9);
        let net = small_net(&env, 4, seed as u64);
        let g = objective_and_grad(&net, &env, Source::Live(&env.scenario(0, 0))).unwrap();
        let brute = path_sum(&env, &g.trajectory, &g.trajectory.policies);
        assert!((g.objective - brute).abs() < 1e-10, "{} vs {brute}", g.objective);
    }
}

#[test]
fn best_response_matches_exhaustive_enumeration() {
    let tables = all_tables(3, 2, 3);
    assert_eq!(tables.len(), 512);
    for seed in 0..5 {
        let env = toy(seed, 3, 2, 3, if seed % 2 == 0 { 1.0 } else { 0.8 });
        let net = small_net(&env, 4, seed);
        let traj = analytic_rollout(&env, &net, &env.scenario(seed, 0)).unwrap();
        let br = best_response(&env, &traj).unwrap();
        let best = tables.iter().map(|p| path_sum(&env, &traj, p)).fold(f64::NEG_INFINITY, f64::max);
        assert!((br.value - best).abs() < 1e-12, "{} vs {best}", br.value);
        let greedy = value_on_sequence(&env, &traj, &table_matrices(&br.policy(2), 3)).unwrap();
        assert!((br.value - greedy).abs() < 1e-10);
    }
}

#[test]
fn uniform_policy_matches_dual_brute_force() {
    let tables = all_tables(3, 2, 3);
    for seed in 0..3 {
        let env = toy(seed, 3, 2, 3, 0.95);
        let uniform = FixedPolicy::uniform(3, 2);
        let scenario = env.scenario(seed, 0);
        let report = exploitability(&env, &uniform, std::slice::from_ref(&scenario)).unwrap();
        let traj = analytic_rollout(&env, &uniform, &scenario).unwrap();
        let j = path_sum(&env, &traj, &traj.policies);
        let j_star = tables.iter().map(|p| path_sum(&env, &traj, p)).fold(f64::NEG_INFINITY, f64::max);
        assert!((report.mean_return - j).abs() < 1e-10);
        assert!((report.exploitability - (j_star - j)).abs() < 1e-10);
    }
}

#[test]
fn batch_objective_is_the_mean_of_single_environments() {
    let env = toy(3, 5, 3, 6, 0.9);
    let net = small_net(&env, 4, 3);
    let scenarios: Vec<_> = (0..6).map(|i| env.scenario(11, i)).collect();
    let (j, grads, _) = batch_objective(&net, &env, &scenarios).unwrap();
    let singles: Vec<_> = scenarios.iter().map(|s| objective_and_grad(&net, &env, Source::Live(s)).unwrap()).collect();
    let mean = singles.iter().map(|g| g.objective).sum::<f64>() / 6.0;
    assert!((j - mean).abs() < 1e-12);
    for (k, g) in grads.iter().enumerate() {
        for (i, x) in g.iter().enumerate() {
            let want = singles.iter().map(|s| s.grads[k].iter().nth(i).unwrap()).sum::<f64>() / 6.0;
            assert!((x - want).abs() < 1e-12);
        }
    }
}

#[test]
fn analytic_return_matches_monte_carlo_on_lq() {
    let env = LinearQuadratic::default();
    let policy = FixedPolicy(random_policy(100, 7, &mut rng(5)));
    for (i, scenario) in env.eval_scenarios(2, 0).iter().enumerate() {
        let traj = analytic_rollout(&env, &policy, scenario).unwrap();
        let j = traj.discounted_return(env.spec().discount).unwrap();
        let mc = sample_rollout(&env, &policy, scenario, 10_000, i as u64).unwrap().mean_return(env.spec().discount);
        assert!((j - mc).abs() <= 0.02 * j.abs(), "{j} vs {mc}");
    }
}

#[test]
fn empirical_error_shrinks_like_inverse_root_n() {
    let env = LinearQuadratic::default();
    let mean_l1 = |n: usize| {
        (0..20u64)
            .map(|seed| {
                let policy = FixedPolicy(random_policy(100, 7, &mut rng(seed)));
                let scenario = env.scenario(seed, 0);
                let exact = analytic_rollout(&env, &policy, &scenario).unwrap();
                let sampled = sample_rollout(&env, &policy, &scenario, n, seed).unwrap();
                exact.mean_field(30).l1(sampled.mean_fields.last().unwrap())
            })
            .sum::<f64>()
            / 20.0
    };
    let ratio = mean_l1(10_000) / mean_l1(40_000);
    assert!((1.6..=2.5).contains(&ratio), "ratio {ratio}");
}

/// `∂J/∂Π_t(s,a) = γ^t ρ_t(s) Q_t(s,a)` with `ρ_t` pushed forward from the
/// stored `μ₀` through the dense kernel.
fn pi_path_cotangents(env: &TabularEnv, traj: &AnalyticTrajectory) -> Vec<Array2<f64>> {
    let ns = env.spec().num_states;
    let na = env.spec().num_actions;
    let gamma = env.spec().discount;
    let t = dense(&env.kernel, ns);
    let horizon = traj.horizon();
    let mut rho = vec![traj.mean_field(0).probs().to_vec()];
    for step in 0..horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                for sp in 0..ns {
                    next[sp] += rho[step][s] * traj.policies[step][[s, a]] * t[s][a][sp];
                }
            }
        }
        rho.push(next);
    }
    let mut v = vec![0.0; ns];
    let mut out = vec![Array2::zeros((ns, na)); horizon];
    for step in (0..horizon).rev() {
        let mut q = Array2::zeros((ns, na));
        for s in 0..ns {
            for a in 0..na {
                q[[s, a]] = traj.rewards[step][[s, a]] + gamma * (0..ns).map(|sp| t[s][a][sp] * v[sp]).sum::<f64>();
            }
        }
        v = (0..ns).map(|s| (0..na).map(|a| traj.policies[step][[s, a]] * q[[s, a]]).sum()).collect();
        let disc = gamma.powi(step as i32);
        out[step] = Array2::from_shape_fn((ns, na), |(s, a)| disc * rho[step][s] * q[[s, a]]);
    }
    out
}

/// Vector-Jacobian product of the policy path alone with the given cotangents.
fn pi_path_vjp(net: &PolicyNet, traj: &AnalyticTrajectory, cot: &[Array2<f64>]) -> Vec<f64> {
    let tape = Tape::new();
    let b = net.params.bind(&tape);
    let ctx = net.state_context(&b, &tape, None).unwrap();
    let mut h = None;
    let mut total = tape.scalar(0.0);
    for (t, c) in cot.iter().enumerate() {
        let (logp, next) = net.log_policy_step(&b, &tape, &ctx, &traj.observations[t], h, t == 0).unwrap();
        h = next;
        let term = logp.exp().unwrap().mul(tape.constant(c.clone())).unwrap().sum_all().unwrap();
        total = total.add(term).unwrap();
    }
    let g = tape.backward(total).unwrap();
    b.grads(&g).iter().flat_map(|t| t.iter().copied().collect::<Vec<_>>()).collect()
}

fn flat(grads: &[ndarray::Array2<f64>]) -> Vec<f64> {
    grads.iter().flat_map(|t| t.iter().copied().collect::<Vec<_>>()).collect()
}

#[test]
fn zero_rewards_give_exactly_zero_gradient() {
    let base = toy(9, 4, 3, 5, 0.9);
    let env = TabularEnv::new(base.kernel, Array2::zeros((4, 3)), 0.0, base.initial, 5, 0.9);
    let net = small_net(&env, 4, 9);
    let g = objective_and_grad(&net, &env, Source::Live(&env.scenario(0, 0))).unwrap();
    assert_eq!(g.objective, 0.0);
    assert!(flat(&g.grads).iter().all(|&x| x == 0.0));
}

#[test]
fn gradient_is_the_policy_path_product() {
    for seed in 0..3 {
        let env = toy(seed, 4, 3, 5, 0.9);
        let net = small_net(&env, 4, seed);
        let live = objective_and_grad(&net, &env, Source::Live(&env.scenario(seed, 0))).unwrap();
        let want = pi_path_vjp(&net, &live.trajectory, &pi_path_cotangents(&env, &live.trajectory));
        for (x, w) in flat(&live.grads).iter().zip(&want) {
            assert!((x - w).abs() < 1e-10, "{x} vs {w}");
        }

        // Perturb everything behind the stop-gradient: rewards, observations.
        let mut r = rng(seed + 100);
        let mut perturbed = live.trajectory.clone();
        perturbed.rewards.iter_mut().for_each(|m| m.mapv_inplace(|x| x + r.gen_range(-0.5..0.5)));
        perturbed.observations.iter_mut().for_each(|o| o.iter_mut().for_each(|x| *x += r.gen_range(-0.5..0.5)));
        let frozen = objective_and_grad(&net, &env, Source::Frozen(&perturbed)).unwrap();
        assert!((frozen.objective - live.objective).abs() > 1e-6);
        // The replay recomputes the policies at the perturbed observations.
        let tape_traj = {
            let mut t = perturbed.clone();
            let mut h = net.zero_hidden();
            for step in 0..t.horizon() {
                let (pi, next) = net.policy_matrix(&t.observations[step], &h, step == 0).unwrap();
                t.policies[step] = pi;
                h = next;
            }
            t
        };
        let want = pi_path_vjp(&net, &tape_traj, &pi_path_cotangents(&env, &tape_traj));
        for (x, w) in flat(&frozen.grads).iter().zip(&want) {
            assert!((x - w).abs() < 1e-10, "{x} vs {w}");
        }
    }
}

#[test]
fn constant_reward_shift_moves_best_value_by_discounted_horizon() {
    for (seed, gamma) in [(0u64, 1.0), (1, 0.9), (2, 0.5)] {
        let base = toy(seed, 5, 3, 6, gamma);
        let c = 0.75;
        let shifted = TabularEnv::new(
            base.kernel.clone(),
            base.rewards.mapv(|r| r + c),
            base.crowd,
            base.initial.clone(),
            6,
            gamma,
        );
        let policy = FixedPolicy(random_policy(5, 3, &mut rng(seed)));
        let scenario = base.scenario(seed, 0);
        let a = best_response(&base, &analytic_rollout(&base, &policy, &scenario).unwrap()).unwrap();
        let b = best_response(&shifted, &analytic_rollout(&shifted, &policy, &scenario).unwrap()).unwrap();
        let horizon_weight: f64 = (0..6).map(|t| gamma.powi(t)).sum();
        assert!((b.value - a.value - c * horizon_weight).abs() < 1e-10, "{} vs {}", b.value, a.value);
    }
}

#[test]
fn greedy_policy_is_unexploitable_on_its_own_sequence_at_reduced_size() {
    let reduced = [
        ("lq", serde_json::json!({"num_states": 15})),
        ("beach_bar", serde_json::json!({"num_states": 12})),
        ("macro", serde_json::json!({"n_wealth": 5, "n_income": 3, "horizon": 12})),
    ];
    for (id, overrides) in reduced {
        let env = mfax_core::envs::make(id, Some(&overrides)).unwrap();
        let spec = env.spec();
        assert!(spec.num_states <= 20);
        for seed in 0..3 {
            let policy = FixedPolicy(random_policy(spec.num_states, spec.num_actions, &mut rng(seed)));
            let traj = analytic_rollout(env.as_ref(), &policy, &env.scenario(seed, 0)).unwrap();
            let br = best_response(env.as_ref(), &traj).unwrap();
            let greedy = table_matrices(&br.policy(spec.num_actions), spec.num_states);
            let value = value_on_sequence(env.as_ref(), &traj, &greedy).unwrap();
            assert!((br.value - value).abs() < 1e-10 * br.value.abs().max(1.0), "{id}: {} vs {value}", br.value);
        }
    }
}

#[test]
fn macro_prices_are_marginal_products() {
    let env = Macroeconomy::reduced();
    let mut r = rng(77);
    for _ in 0..100 {
        let weights: Vec<f64> = (0..env.spec().num_states).map(|_| r.gen_range(0.0..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mu = mfax_core::MeanField::new(weights.iter().map(|w| w / total).collect()).unwrap();
        let z = r.gen_range(-0.3..0.3);
        let (k, l) = env.means(&mu);
        let (p1, p2) = env.prices(&mu, z);
        let h = 1e-5;
        let dk = (env.production(k + h * k, l, z) - env.production(k - h * k, l, z)) / (2.0 * h * k);
        let dl = (env.production(k, l + h * l, z) - env.production(k, l - h * l, z)) / (2.0 * h * l);
        assert!((p1 - dk).abs() <= 1e-6 * p1.abs(), "{p1} vs {dk}");
        assert!((p2 - dl).abs() <= 1e-6 * p2.abs(), "{p2} vs {dl}");
    }
}
