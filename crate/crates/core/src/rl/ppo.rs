//! Independent PPO against frozen mean-field sequences, feed-forward or
//! recurrent.
//!
//! The recurrent variant recomputes log-probabilities by unrolling each
//! environment's segment from its stored initial hidden state, so its
//! minibatches are whole segments.

use std::sync::Arc;

use mfax_autodiff::dist::{beta_entropy, beta_log_density, categorical_entropy};
use mfax_autodiff::optim::Adam;
use mfax_autodiff::{Bound, DiffError, Tape, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::buffer::{RolloutBuffer, Segment};
use super::sampler::{Learners, NetActor};
use super::PpoConfig;
use crate::env::MeanFieldEnv;
use crate::error::{numeric, CoreError, Result};
use crate::policy::{HeadOut, PolicyNet};

/// `min(ρ A, clip(ρ, 1 − ε, 1 + ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Tape version of [`clipped_surrogate`], elementwise.
pub fn clipped_surrogate_var<'t>(ratio: Var<'t>, advantage: Var<'t>, clip: f64) -> Result<Var<'t>> {
    let plain = ratio.mul(advantage)?;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip)?.mul(advantage)?;
    Ok(plain.minimum(clipped)?)
}

/// Samples entering one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    /// Independent `(segment, step, agent)` samples; feed-forward only.
    Flat(&'a [(usize, usize, usize)]),
    /// Whole segments, unrolled in time.
    Sequences(&'a [usize]),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// `π_new(a|s) / π_old(a|s)` per sample, in batch order.
    pub ratios: Vec<f64>,
    pub count: usize,
}

fn column<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
    tape.constant(Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("n x 1"))
}

struct Rows {
    actions: Vec<f64>,
    old: Vec<f64>,
    adv: Vec<f64>,
    ret: Vec<f64>,
}

/// Summed loss terms of one set of rows, `(policy, value, entropy)`.
fn row_terms<'t>(
    tape: &'t Tape,
    out: &HeadOut<'t>,
    rows: &Rows,
    config: &PpoConfig,
    continuous: bool,
    stats: &mut LossStats,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let (logp, entropy) = match (continuous, out.beta) {
        (true, Some((alpha, beta))) => (
            beta_log_density(column(tape, &rows.actions), alpha, beta)?,
            beta_entropy(alpha, beta)?,
        ),
        _ => {
            let lp = out.log_policy()?;
            let idx: Arc<[usize]> = rows.actions.iter().map(|&a| a as usize).collect();
            (lp.select_cols(idx)?, categorical_entropy(lp)?)
        }
    };
    let ratio = logp.sub(column(tape, &rows.old))?.exp()?;
    stats.ratios.extend(ratio.value().iter().copied());
    let policy = clipped_surrogate_var(ratio, column(tape, &rows.adv), config.clip)?.sum_all()?.neg()?;
    let value = out
        .value
        .ok_or_else(|| CoreError::Contract("policy has no value head".into()))?
        .sub(column(tape, &rows.ret))?
        .square()?
        .scale(0.5)?
        .sum_all()?;
    Ok((policy, value, entropy.sum_all()?))
}

fn normalizer(buffer: &RolloutBuffer, batch: Batch<'_>, enabled: bool) -> (f64, f64) {
    if !enabled {
        return (0.0, 1.0);
    }
    let adv: Vec<f64> = match batch {
        Batch::Flat(idx) => idx.iter().map(|&(e, t, i)| buffer.segments[e].advantages[t][i]).collect(),
        Batch::Sequences(envs) => envs
            .iter()
            .flat_map(|&e| buffer.segments[e].advantages.iter().flatten().copied())
            .collect(),
    };
    if adv.len() < 2 {
        return (0.0, 1.0);
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() + 1e-8)
}

/// Mean PPO loss over the batch:
/// `−surrogate + vf_coef · ½(V − R)² − ent_coef · H`.
pub fn ppo_loss<'t>(
    net: &PolicyNet,
    b: &Bound<'t>,
    tape: &'t Tape,
    buffer: &RolloutBuffer,
    batch: Batch<'_>,
    config: &PpoConfig,
    continuous: bool,
) -> Result<(Var<'t>, LossStats)> {
    let (mean, std) = normalizer(buffer, batch, config.normalize_advantages);
    let norm = |a: f64| (a - mean) / std;
    let mut stats = LossStats::default();
    let mut terms = Vec::new();
    match batch {
        Batch::Flat(idx) => {
            if net.is_recurrent() {
                return Err(CoreError::Contract("flat batches need a memoryless policy".into()));
            }
            let seg = |e: usize| -> &Segment { &buffer.segments[e] };
            let states: Arc<[usize]> = idx.iter().map(|&(e, t, i)| seg(e).states[t][i]).collect();
            let obs: Vec<&[f64]> = idx.iter().map(|&(e, t, _)| seg(e).observations[t].as_slice()).collect();
            let rows = Rows {
                actions: idx.iter().map(|&(e, t, i)| seg(e).actions[t][i]).collect(),
                old: idx.iter().map(|&(e, t, i)| seg(e).log_probs[t][i]).collect(),
                adv: idx.iter().map(|&(e, t, i)| norm(seg(e).advantages[t][i])).collect(),
                ret: idx.iter().map(|&(e, t, i)| seg(e).returns[t][i]).collect(),
            };
            let ctx = net.state_context(b, tape, Some(states))?;
            let x = net.obs_input(tape, &obs)?;
            let (code, _) = net.obs_step(b, tape, x, None, false)?;
            let out = net.head(b, &ctx, code)?;
            terms.push(row_terms(tape, &out, &rows, config, continuous, &mut stats)?);
            stats.count = idx.len();
        }
        Batch::Sequences(envs) => {
            for &e in envs {
                let seg = &buffer.segments[e];
                let mut h = if net.is_recurrent() {
                    Some(tape.constant(Array2::from_shape_vec((1, seg.h0.len()), seg.h0.clone()).map_err(|_| {
                        CoreError::Contract("stored hidden state has the wrong size".into())
                    })?))
                } else {
                    None
                };
                for t in 0..seg.len() {
                    let x = net.obs_input(tape, &[&seg.observations[t]])?;
                    let (code, h_next) = net.obs_step(b, tape, x, h, seg.starts[t])?;
                    h = h_next;
                    let ctx = net.state_context(b, tape, Some(seg.states[t].clone().into()))?;
                    let out = net.head(b, &ctx, code)?;
                    let rows = Rows {
                        actions: seg.actions[t].clone(),
                        old: seg.log_probs[t].clone(),
                        adv: seg.advantages[t].iter().map(|&a| norm(a)).collect(),
                        ret: seg.returns[t].clone(),
                    };
                    terms.push(row_terms(tape, &out, &rows, config, continuous, &mut stats)?);
                    stats.count += seg.num_agents();
                }
            }
        }
    }
    if stats.count == 0 {
        return Err(CoreError::Argument("empty PPO batch".into()));
    }
    let n = stats.count as f64;
    let sum = |k: usize| -> Result<Var<'t>> {
        let parts: Vec<Var<'t>> = terms.iter().map(|t| [t.0, t.1, t.2][k]).collect();
        Ok(Var::concat_rows(&parts)?.sum_all()?.scale(1.0 / n)?)
    };
    let (policy, value, entropy) = (sum(0)?, sum(1)?, sum(2)?);
    stats.policy = policy.item();
    stats.value = value.item();
    stats.entropy = entropy.item();
    let loss = policy
        .add(value.scale(config.vf_coef)?)?
        .sub(entropy.scale(config.ent_coef)?)?;
    Ok((loss, stats))
}

/// Runs `steps` steps of every environment's learners under the current
/// policy and computes advantages.
pub fn collect(
    env: &dyn MeanFieldEnv,
    net: &PolicyNet,
    learners: &mut [Learners],
    steps: usize,
    config: &PpoConfig,
) -> Result<RolloutBuffer> {
    let actor = NetActor::new(net, env);
    let segments = learners
        .par_iter_mut()
        .map(|l| {
            let mut seg = Segment::default();
            for _ in 0..steps {
                seg.push(l.step(env, &actor)?)?;
            }
            seg.bootstrap = l
                .peek(&actor)?
                .values
                .ok_or_else(|| CoreError::Contract("policy has no value head".into()))?;
            Ok(seg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut buffer = RolloutBuffer { segments };
    buffer.compute_advantages(env.spec().discount, config.gae_lambda);
    Ok(buffer)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateStats {
    /// Mean loss over applied minibatches.
    pub loss: f64,
    /// Mean pre-clipping gradient norm over applied minibatches.
    pub grad_norm: f64,
    pub applied: usize,
    pub skipped: usize,
}

/// Optimizer steps taken by one [`ppo_update`].
pub fn minibatch_count(buffer_envs: usize, config: &PpoConfig, sequences: bool) -> usize {
    let per_epoch = if sequences {
        config.num_minibatches.min(buffer_envs).max(1)
    } else {
        config.num_minibatches
    };
    per_epoch * config.epochs
}

/// One PPO update: `epochs` passes over shuffled minibatches. Minibatches
/// whose ratios are non-finite are skipped.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut PolicyNet,
    opt: &mut Adam,
    env: &dyn MeanFieldEnv,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    sequences: bool,
    rng: &mut R,
    step: &mut usize,
    total_steps: usize,
) -> Result<UpdateStats> {
    let continuous = super::sampler::continuous_actions(net, env);
    let mut stats = UpdateStats::default();
    for _ in 0..config.epochs {
        let batches: Vec<Vec<(usize, usize, usize)>> = if sequences {
            let mut envs: Vec<usize> = (0..buffer.segments.len()).collect();
            envs.shuffle(rng);
            let k = config.num_minibatches.min(envs.len()).max(1);
            split(&envs, k).into_iter().map(|c| c.into_iter().map(|e| (e, 0, 0)).collect()).collect()
        } else {
            let mut idx = buffer.indices();
            idx.shuffle(rng);
            split(&idx, config.num_minibatches)
        };
        for chunk in batches {
            let envs: Vec<usize> = chunk.iter().map(|c| c.0).collect();
            let batch = if sequences { Batch::Sequences(&envs) } else { Batch::Flat(&chunk) };
            let tape = Tape::new();
            let b = net.params.bind(&tape);
            let result = ppo_loss(net, &b, &tape, buffer, batch, config, continuous).and_then(|(loss, st)| {
                if st.ratios.iter().all(|r| r.is_finite()) && loss.item().is_finite() {
                    Ok((loss, st))
                } else {
                    Err(numeric("PPO importance ratio"))
                }
            });
            let (loss, _) = match result {
                Ok(x) => x,
                Err(CoreError::Numeric { context }) => {
                    log::warn!("minibatch skipped: non-finite {context}");
                    stats.skipped += 1;
                    *step += 1;
                    continue;
                }
                Err(CoreError::Diff(DiffError::NonFinite { op })) => {
                    log::warn!("minibatch skipped: non-finite {op}");
                    stats.skipped += 1;
                    *step += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let grads = b.grads(&tape.backward(loss)?);
            let info = opt.step(&mut net.params, &grads, *step, total_steps);
            *step += 1;
            stats.loss += loss.item();
            stats.grad_norm += info.grad_norm;
            stats.applied += 1;
        }
    }
    if stats.applied > 0 {
        stats.loss /= stats.applied as f64;
        stats.grad_norm /= stats.applied as f64;
    }
    Ok(stats)
}

/// Splits into `k` nearly equal contiguous chunks, dropping empty ones.
fn split<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    let k = k.max(1);
    let base = items.len() / k;
    let extra = items.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        if len > 0 {
            out.push(items[at..at + len].to_vec());
        }
        at += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_covers_everything() {
        let v: Vec<usize> = (0..10).collect();
        let parts = split(&v, 3);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert_eq!(parts.concat(), v);
        assert_eq!(split(&v[..2], 8).len(), 2);
    }

    #[test]
    fn surrogate_takes_pessimistic_branch() {
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2), 2.4);
        assert_eq!(clipped_surrogate(0.5, 2.0, 0.2), 1.0);
        assert_eq!(clipped_surrogate(0.5, -2.0, 0.2), -1.6);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), 3.0);
    }
}
