//! Global unstructured magnitude pruning over the recurrent gate matrices.
//!
//! Candidates are pooled across every gate matrix of every layer; the
//! embedding, biases, and thresholds are never pruned. Selection takes the
//! k smallest magnitudes globally, with ties broken by tensor order then
//! element index, so the kept set is a deterministic function of the
//! weights. Masks only ever shrink, pruned weights are exact zeros, and the
//! optimizer's moments are cleared at pruned positions so nothing can push
//! them off zero again.

use crate::data::Batched;
use crate::lm::{LmConfig, LmModel};
use crate::math::Real;
use crate::rng::Rng;
use crate::train::{evaluate, fit, OptimState, TrainConfig};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("target sparsity {0} outside [0, 1)")]
    TargetOutOfRange(f64),
    #[error("target sparsity {target:.4} below current {current:.4}")]
    TargetBelowCurrent { target: f64, current: f64 },
}

/// Keep/prune flags per parameter slot, aligned with `LmConfig::slot_metas`.
/// `None` marks a tensor that never takes part in pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMasks {
    pub per_slot: Vec<Option<Vec<bool>>>,
}

impl PruneMasks {
    /// All-kept masks for every prunable slot.
    pub fn unpruned(cfg: &LmConfig) -> PruneMasks {
        let per_slot = cfg
            .slot_metas()
            .iter()
            .map(|m| m.prunable().then(|| vec![true; m.len()]))
            .collect();
        PruneMasks { per_slot }
    }

    /// (pruned, total) over the maskable pool.
    pub fn counts(&self) -> (usize, usize) {
        let mut pruned = 0;
        let mut total = 0;
        for mask in self.per_slot.iter().flatten() {
            total += mask.len();
            pruned += mask.iter().filter(|&&k| !k).count();
        }
        (pruned, total)
    }

    /// Fraction of the maskable pool that is pruned.
    pub fn sparsity(&self) -> f64 {
        let (pruned, total) = self.counts();
        pruned as f64 / total as f64
    }

    /// Kept fraction of the maskable pool.
    pub fn density(&self) -> f64 {
        1.0 - self.sparsity()
    }

    /// Zeroes masked entries in slot-aligned buffers (gradients, moments).
    pub fn zero_masked<R: Real>(&self, slots: Vec<&mut Vec<R>>) {
        for (mask, slot) in self.per_slot.iter().zip(slots) {
            if let Some(mask) = mask {
                for (v, &keep) in slot.iter_mut().zip(mask) {
                    if !keep {
                        *v = R::ZERO;
                    }
                }
            }
        }
    }

    /// True when `self` keeps nothing that `earlier` had already pruned.
    pub fn is_refinement_of(&self, earlier: &PruneMasks) -> bool {
        self.per_slot.iter().zip(&earlier.per_slot).all(|(now, before)| match (now, before) {
            (Some(n), Some(b)) => n.iter().zip(b).all(|(&kn, &kb)| kb || !kn),
            (None, None) => true,
            _ => false,
        })
    }
}

/// Candidate pool entry: magnitude plus a (slot, index) tie-break that makes
/// the ordering total.
type PoolEntry = (f32, u32, u32);

fn pool_order(a: &PoolEntry, b: &PoolEntry) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn gather_kept(model: &LmModel<f32>, masks: &PruneMasks) -> Vec<PoolEntry> {
    let metas = model.cfg.slot_metas();
    let mut pool = Vec::new();
    for (slot, (meta, data)) in metas.iter().zip(model.slots()).enumerate() {
        if !meta.prunable() {
            continue;
        }
        let mask = masks.per_slot[slot].as_ref().expect("prunable slot without mask");
        for (k, (&w, &keep)) in data.iter().zip(mask).enumerate() {
            if keep {
                pool.push((w.abs(), slot as u32, k as u32));
            }
        }
    }
    pool
}

/// How many entries must be pruned in total to hit `target` over a pool of
/// `total` weights. Rounded to the nearest count, so the achieved sparsity
/// is within 1/total of the request.
fn target_count(target: f64, total: usize) -> usize {
    (target * total as f64).round() as usize
}

fn select_for_target(
    model: &LmModel<f32>,
    masks: &PruneMasks,
    target: f64,
) -> Result<(Vec<(u32, u32)>, f32), PruneError> {
    if !(0.0..1.0).contains(&target) {
        return Err(PruneError::TargetOutOfRange(target));
    }
    let (pruned, total) = masks.counts();
    let want = target_count(target, total);
    if want < pruned {
        return Err(PruneError::TargetBelowCurrent {
            target,
            current: pruned as f64 / total as f64,
        });
    }
    let need = want - pruned;
    if need == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let mut pool = gather_kept(model, masks);
    pool.select_nth_unstable_by(need - 1, pool_order);
    let tau = pool[need - 1].0;
    let selected = pool[..need].iter().map(|&(_, s, k)| (s, k)).collect();
    Ok((selected, tau))
}

/// Magnitude below which currently-kept weights would be pruned to reach
/// `target`: the k-th smallest magnitude of the global kept pool.
pub fn global_magnitude_cutoff(
    model: &LmModel<f32>,
    masks: &PruneMasks,
    target: f64,
) -> Result<f32, PruneError> {
    select_for_target(model, masks, target).map(|(_, tau)| tau)
}

#[derive(Clone, Debug)]
pub struct PruneStep {
    pub tau: f32,
    pub newly_pruned: usize,
    pub achieved_sparsity: f64,
}

/// Prunes up to `target` global sparsity: extends the masks, zeroes the
/// pruned weights, and clears their optimizer moments.
pub fn apply_prune_step(
    model: &mut LmModel<f32>,
    opt: Option<&mut OptimState>,
    masks: &mut PruneMasks,
    target: f64,
) -> Result<PruneStep, PruneError> {
    let (selected, tau) = select_for_target(model, masks, target)?;
    let newly = selected.len();
    for &(slot, k) in &selected {
        masks.per_slot[slot as usize].as_mut().unwrap()[k as usize] = false;
    }
    masks.zero_masked(model.slots_mut());
    if let Some(opt) = opt {
        masks.zero_masked(opt.m.iter_mut().collect());
        masks.zero_masked(opt.v.iter_mut().collect());
    }
    Ok(PruneStep { tau, newly_pruned: newly, achieved_sparsity: masks.sparsity() })
}

#[derive(Clone, Debug)]
pub struct TensorSparsity {
    pub name: String,
    pub size: usize,
    pub nnz: usize,
    pub sigma_w: f64,
    pub lambda_w: f64,
}

#[derive(Clone, Debug)]
pub struct SparsityReport {
    pub per_tensor: Vec<TensorSparsity>,
    pub total_size: usize,
    pub total_nnz: usize,
    pub sigma_w: f64,
    pub lambda_w: f64,
}

/// Kept-weight statistics over the maskable tensors.
pub fn sparsity_report(cfg: &LmConfig, masks: &PruneMasks) -> SparsityReport {
    let mut per_tensor = Vec::new();
    let mut total_size = 0;
    let mut total_nnz = 0;
    for (meta, mask) in cfg.slot_metas().iter().zip(&masks.per_slot) {
        let Some(mask) = mask else { continue };
        let size = mask.len();
        let nnz = mask.iter().filter(|&&k| k).count();
        total_size += size;
        total_nnz += nnz;
        per_tensor.push(TensorSparsity {
            name: meta.name.clone(),
            size,
            nnz,
            sigma_w: 1.0 - nnz as f64 / size as f64,
            lambda_w: nnz as f64 / size as f64,
        });
    }
    SparsityReport {
        per_tensor,
        total_size,
        total_nnz,
        sigma_w: 1.0 - total_nnz as f64 / total_size as f64,
        lambda_w: total_nnz as f64 / total_size as f64,
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PruneSchedule {
    pub target_sparsity: f64,
    pub n_steps: usize,
    pub finetune_epochs: usize,
    /// Multiplier on the base learning rate during fine-tuning.
    pub lr_scale: f64,
}

impl PruneSchedule {
    /// Low targets fine-tune at a tenth of the base rate; aggressive targets
    /// keep the full rate.
    pub fn with_defaults(target_sparsity: f64, n_steps: usize) -> PruneSchedule {
        PruneSchedule {
            target_sparsity,
            n_steps,
            finetune_epochs: 3,
            lr_scale: if target_sparsity <= 0.7 { 0.1 } else { 1.0 },
        }
    }

    /// Per-step sparsity targets, linearly interpolated from `current` and
    /// landing exactly on the final target.
    pub fn step_targets(&self, current: f64) -> Vec<f64> {
        let n = self.n_steps.max(1);
        (1..=n)
            .map(|i| current + (self.target_sparsity - current) * i as f64 / n as f64)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PruneStepOutcome {
    pub step: usize,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub tau: f32,
    pub valid_ppl: f64,
    pub diverged: bool,
}

/// Iterative prune + fine-tune. After each mask extension the model
/// fine-tunes for `schedule.finetune_epochs` at the scaled rate with masks
/// enforced, then validates. `on_step` sees the model after each step (for
/// checkpointing). A fine-tune divergence is recorded on its step and stops
/// the pipeline, returning the outcomes so far.
#[allow(clippy::too_many_arguments)]
pub fn prune_pipeline(
    model: &mut LmModel<f32>,
    opt: &mut OptimState,
    masks: &mut PruneMasks,
    schedule: &PruneSchedule,
    base_cfg: &TrainConfig,
    train: &Batched,
    valid_ids: &[u32],
    noise_rng: &Rng,
    mut on_step: impl FnMut(usize, &LmModel<f32>, &PruneMasks),
) -> Result<Vec<PruneStepOutcome>, PruneError> {
    let ft_cfg = TrainConfig {
        lr: base_cfg.lr * schedule.lr_scale,
        epochs: schedule.finetune_epochs,
        ..base_cfg.clone()
    };
    let mut outcomes = Vec::new();
    for (i, target) in schedule.step_targets(masks.sparsity()).into_iter().enumerate() {
        let step = apply_prune_step(model, Some(opt), masks, target)?;
        let mut diverged = false;
        if schedule.finetune_epochs > 0 {
            let step_rng = noise_rng.substream_n(i as u64);
            if fit(model, opt, train, valid_ids, &ft_cfg, Some(masks), &step_rng).is_err() {
                diverged = true;
            }
        }
        let valid_ppl = if diverged { f64::NAN } else { evaluate(model, valid_ids).ppl };
        outcomes.push(PruneStepOutcome {
            step: i,
            target_sparsity: target,
            achieved_sparsity: step.achieved_sparsity,
            tau: step.tau,
            valid_ppl,
            diverged,
        });
        on_step(i, model, masks);
        if diverged {
            break;
        }
    }
    Ok(outcomes)
}

#[derive(Clone, Debug)]
pub struct PruneLogRow {
    pub step: usize,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub valid_ppl: f64,
    /// Mean per-token effective MACs measured after the step.
    pub effective_macs: f64,
}

/// CSV pipeline log: step, target_sparsity, achieved_sparsity, valid_ppl,
/// effective_macs.
pub fn write_prune_log(path: &Path, rows: &[PruneLogRow]) -> std::io::Result<()> {
    let mut out = String::from("step,target_sparsity,achieved_sparsity,valid_ppl,effective_macs\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.4},{:.1}",
            r.step, r.target_sparsity, r.achieved_sparsity, r.valid_ppl, r.effective_macs
        );
    }
    std::fs::write(path, out)
}
