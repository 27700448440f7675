use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use super::{difficulty, gdpo_loss, gdpo_loss_slope, pgr_weights, DeltaLosses, DpoHyper, PgrWeights, PreferenceGroup, RewardSchedule};
use crate::error::{Error, Result};
use crate::flow::{fm_sample_loss, standard_normal, FlowModel, TimeGrid};
use crate::numerics::{l2_norm, AdamW, CosineSchedule, GradTargets, LoraAdapter, Optimizer};
use crate::physics::{overall_score, score, Condition, WorldConfig};
use crate::rng::{child_seed, seeded};

/// `(α, γ)` for every loser of every group, fixed from the loser scores.
pub fn group_weights(groups: &[PreferenceGroup], schedule: &RewardSchedule) -> Result<Vec<Vec<PgrWeights>>> {
    groups
        .iter()
        .map(|g| {
            g.validate()?;
            g.loser_scores.iter().map(|s| pgr_weights(difficulty(s), schedule)).collect()
        })
        .collect()
}

/// One sampled `(group, loser, timestep, noise)` draw.
#[derive(Debug, Clone, PartialEq)]
pub struct StepItem {
    pub group: usize,
    pub loser: usize,
    /// `k` in `1..=T`.
    pub t_index: usize,
    pub x1_w: Vec<f64>,
    pub x1_l: Vec<f64>,
}

/// Picks `min(batch, groups)` distinct groups and, for each, one loser and one
/// timestep uniformly, plus the noise for winner and loser.
pub fn draw_items<R: Rng + ?Sized>(
    groups: &[PreferenceGroup],
    hyper: &DpoHyper,
    flow_dim: usize,
    rng: &mut R,
) -> Result<Vec<StepItem>> {
    let grid = TimeGrid::new(hyper.time_steps)?;
    let n = hyper.batch.min(groups.len());
    let mut picked = index::sample(rng, groups.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|g| {
            let loser = rng.random_range(0..groups[g].losers.len());
            let t_index = grid.sample_index(rng);
            let x1_w = standard_normal(flow_dim, rng);
            let x1_l = if hyper.shared_noise {
                x1_w.clone()
            } else {
                standard_normal(flow_dim, rng)
            };
            StepItem {
                group: g,
                loser,
                t_index,
                x1_w,
                x1_l,
            }
        })
        .collect())
}

fn item_inputs<'a>(
    model: &FlowModel,
    group: &'a PreferenceGroup,
    item: &StepItem,
    hyper: &DpoHyper,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    let loser = group
        .losers
        .get(item.loser)
        .ok_or_else(|| Error::Precondition(format!("loser index {} out of range", item.loser)))?;
    if item.t_index == 0 || item.t_index > hyper.time_steps {
        return Err(Error::Precondition(format!("timestep index {} outside 1..=T", item.t_index)));
    }
    let t = TimeGrid::new(hyper.time_steps)?.t(item.t_index);
    Ok((
        model.encode_condition(&group.condition),
        model.to_flow(&group.winner),
        model.to_flow(loser),
        t,
    ))
}

fn require_adapter(model: &FlowModel) -> Result<&LoraAdapter> {
    model
        .adapter
        .as_ref()
        .ok_or_else(|| Error::Precondition("preference training needs an attached adapter".into()))
}

/// The four flow-matching losses of an item, without gradients.
pub fn delta_losses(model: &FlowModel, group: &PreferenceGroup, item: &StepItem, hyper: &DpoHyper) -> Result<DeltaLosses> {
    require_adapter(model)?;
    let (cond, xw, xl, t) = item_inputs(model, group, item, hyper)?;
    Ok(DeltaLosses {
        l_theta_w: fm_sample_loss(model, &cond, &xw, &item.x1_w, t, true)?,
        l_psi_w: fm_sample_loss(model, &cond, &xw, &item.x1_w, t, false)?,
        l_theta_l: fm_sample_loss(model, &cond, &xl, &item.x1_l, t, true)?,
        l_psi_l: fm_sample_loss(model, &cond, &xl, &item.x1_l, t, false)?,
        t_index: item.t_index,
        loser: item.loser,
        shared_noise: item.x1_w == item.x1_l,
    })
}

/// Loss of one item and its gradient with respect to the adapter. The
/// reference (adapter-off) terms carry no gradient.
pub fn item_loss_grad(
    model: &FlowModel,
    group: &PreferenceGroup,
    item: &StepItem,
    w: &PgrWeights,
    hyper: &DpoHyper,
) -> Result<(f64, DeltaLosses, LoraAdapter)> {
    require_adapter(model)?;
    let (cond, xw, xl, t) = item_inputs(model, group, item, hyper)?;
    let (l_theta_w, gw) = model.loss_grad(&cond, &xw, &item.x1_w, t, true, GradTargets::ADAPTER)?;
    let (l_theta_l, gl) = model.loss_grad(&cond, &xl, &item.x1_l, t, true, GradTargets::ADAPTER)?;
    let d = DeltaLosses {
        l_theta_w,
        l_psi_w: fm_sample_loss(model, &cond, &xw, &item.x1_w, t, false)?,
        l_theta_l,
        l_psi_l: fm_sample_loss(model, &cond, &xl, &item.x1_l, t, false)?,
        t_index: item.t_index,
        loser: item.loser,
        shared_noise: item.x1_w == item.x1_l,
    };
    let slope = gdpo_loss_slope(&d, w, hyper);
    let mut g = gw;
    g.scale(slope);
    g.add_scaled(-slope, &gl);
    let grad = g.adapter.expect("adapter gradients requested");
    Ok((gdpo_loss(&d, w, hyper), d, grad))
}

/// Mean loss over `items`.
pub fn objective(
    model: &FlowModel,
    groups: &[PreferenceGroup],
    weights: &[Vec<PgrWeights>],
    items: &[StepItem],
    hyper: &DpoHyper,
) -> Result<f64> {
    let losses: Vec<f64> = items
        .par_iter()
        .map(|it| {
            let d = delta_losses(model, &groups[it.group], it, hyper)?;
            Ok(gdpo_loss(&d, &weights[it.group][it.loser], hyper))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean margin `−bracket` over `items`.
pub fn mean_margin(model: &FlowModel, groups: &[PreferenceGroup], items: &[StepItem], hyper: &DpoHyper) -> Result<f64> {
    let m: Vec<f64> = items
        .par_iter()
        .map(|it| delta_losses(model, &groups[it.group], it, hyper).map(|d| d.margin()))
        .collect::<Result<_>>()?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Mean `−bracket` over the batch, before the update.
    pub margin: f64,
    pub mean_alpha: f64,
    pub mean_gamma: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Set when the update was skipped because of a non-finite value.
    pub rejected: Option<String>,
}

/// One adapter update on the mean loss of `items`. The backbone is only read.
/// A non-finite loss or gradient leaves the adapter untouched and is reported
/// through `rejected`.
#[allow(clippy::too_many_arguments)]
pub fn gdpo_step(
    model: &mut FlowModel,
    groups: &[PreferenceGroup],
    weights: &[Vec<PgrWeights>],
    items: &[StepItem],
    hyper: &DpoHyper,
    optimizer: &mut AdamW,
    lr: f64,
    step: usize,
) -> Result<StepMetrics> {
    if items.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let n = items.len() as f64;
    let mean_alpha = items.iter().map(|it| weights[it.group][it.loser].alpha).sum::<f64>() / n;
    let mean_gamma = items.iter().map(|it| weights[it.group][it.loser].gamma).sum::<f64>() / n;
    let mut metrics = StepMetrics {
        step,
        loss: f64::NAN,
        margin: f64::NAN,
        mean_alpha,
        mean_gamma,
        lr,
        grad_norm: f64::NAN,
        rejected: None,
    };

    let frozen: &FlowModel = model;
    let results: Vec<Result<(f64, DeltaLosses, LoraAdapter)>> = items
        .par_iter()
        .map(|it| item_loss_grad(frozen, &groups[it.group], it, &weights[it.group][it.loser], hyper))
        .collect();
    let mut loss = 0.0;
    let mut margin = 0.0;
    let mut grad: Option<LoraAdapter> = None;
    for r in results {
        let (l, d, g) = match r {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                metrics.rejected = Some(e.to_string());
                return Ok(metrics);
            }
            Err(e) => return Err(e),
        };
        loss += l;
        margin += d.margin();
        match grad.as_mut() {
            None => grad = Some(g),
            Some(acc) => {
                for (a, (_, b)) in crate::numerics::Params::tensors_mut(acc)
                    .into_iter()
                    .zip(crate::numerics::Params::tensors(&g))
                {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grad = grad.expect("non-empty batch");
    for t in crate::numerics::Params::tensors_mut(&mut grad) {
        t.iter_mut().for_each(|v| *v /= n);
    }
    metrics.loss = loss / n;
    metrics.margin = margin / n;
    metrics.grad_norm = l2_norm(&grad);
    if !metrics.loss.is_finite() || !metrics.grad_norm.is_finite() {
        metrics.rejected = Some(format!("non-finite loss or gradient at step {step}"));
        return Ok(metrics);
    }
    let adapter = model.adapter.as_mut().expect("checked by item_loss_grad");
    optimizer.step(adapter, &grad, lr);
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub metrics: StepMetrics,
    /// Per-category evaluation scores when the hook ran after this step.
    pub eval: Option<Vec<Option<f64>>>,
}

/// Runs `hyper.steps` updates with AdamW and a cosine learning-rate decay.
/// `eval` is called every `hyper.eval_every` steps and after the last one.
pub fn train<R: Rng + ?Sized>(
    model: &mut FlowModel,
    groups: &[PreferenceGroup],
    schedule: &RewardSchedule,
    hyper: &DpoHyper,
    rng: &mut R,
    mut eval: Option<&mut dyn FnMut(&FlowModel) -> Result<Vec<Option<f64>>>>,
) -> Result<Vec<TrainRecord>> {
    hyper.validate()?;
    schedule.validate()?;
    if groups.is_empty() {
        return Err(Error::Precondition("no preference groups to train on".into()));
    }
    require_adapter(model)?;
    let weights = group_weights(groups, schedule)?;
    let lrs = CosineSchedule {
        lr_init: hyper.lr,
        lr_final: hyper.lr_final,
        total_steps: hyper.steps,
    };
    let mut optimizer = AdamW::new(0.9, 0.999, 1e-8, hyper.weight_decay);
    let dim = model.dims.flow_len();
    let mut log = Vec::with_capacity(hyper.steps);
    let mut consecutive = 0usize;
    for step in 0..hyper.steps {
        let items = draw_items(groups, hyper, dim, rng)?;
        let metrics = gdpo_step(model, groups, &weights, &items, hyper, &mut optimizer, lrs.lr(step), step)?;
        if let Some(why) = &metrics.rejected {
            consecutive += 1;
            if consecutive >= hyper.max_rejections {
                return Err(Error::numeric(format!(
                    "{consecutive} consecutive rejected steps ending at step {step}: {why}"
                )));
            }
        } else {
            consecutive = 0;
        }
        let due = hyper.eval_every > 0 && (step + 1) % hyper.eval_every == 0 || step + 1 == hyper.steps;
        let scores = match (&mut eval, due) {
            (Some(f), true) => Some(f(model)?),
            _ => None,
        };
        log.push(TrainRecord { metrics, eval: scores });
    }
    Ok(log)
}

/// Mean overall score per category of one sample per condition. Condition `i`
/// always uses the stream `child_seed(seed, i)`, so adapter-on and adapter-off
/// runs see the same noise. A sample that fails numerically scores 0.
pub fn category_scores(
    model: &FlowModel,
    conditions: &[Condition],
    world: &WorldConfig,
    steps: usize,
    adapter_on: bool,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let scored: Vec<(usize, f64)> = conditions
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = seeded(child_seed(seed, i as u64));
            match model.sample(c, steps, &mut rng, adapter_on) {
                Ok(clip) => Ok((c.category, overall_score(&score(&clip, c, world)))),
                Err(e) if e.is_numeric() => Ok((c.category, 0.0)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let k = world.num_categories();
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (cat, s) in scored {
        if cat < k {
            sum[cat] += s;
            count[cat] += 1;
        }
    }
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect())
}
