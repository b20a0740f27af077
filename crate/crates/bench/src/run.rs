//! Parallel evaluation with a fixed reduction order, and the ground-truth
//! self-check.

use migc_tensor::Tensor;
use rayon::prelude::*;

use crate::error::{BenchError, Result};
use crate::eval::{compute_metrics, evaluate_image, EvalConfig, EvalRecord, ImageKey, Metrics};
use crate::layout::BenchLayout;
use crate::render::render_ground_truth;

/// One image to produce and score.
#[derive(Clone, Debug)]
pub struct BenchItem<'a> {
    pub layout: &'a BenchLayout,
    pub seed: u64,
}

impl BenchItem<'_> {
    pub fn key(&self) -> ImageKey {
        ImageKey {
            level: self.layout.level,
            layout: self.layout.layout,
            seed: self.seed,
        }
    }
}

pub fn bench_items<'a>(layouts: &'a [BenchLayout], seeds: &[u64]) -> Vec<BenchItem<'a>> {
    layouts
        .iter()
        .flat_map(|l| seeds.iter().map(move |&seed| BenchItem { layout: l, seed }))
        .collect()
}

/// Produce and evaluate every item on a pool of `workers` threads. Results
/// come back in item order whatever the worker count.
pub fn evaluate_items<F>(items: &[BenchItem<'_>], workers: usize, cfg: &EvalConfig, produce: F) -> Result<Vec<EvalRecord>>
where
    F: Fn(&BenchItem<'_>) -> Result<Tensor> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BenchError::Config(format!("worker pool: {e}")))?;
    let per_item: Vec<Vec<EvalRecord>> = pool.install(|| {
        items
            .par_iter()
            .map(|it| {
                let image = produce(it)?;
                evaluate_image(&image, &it.layout.instances, it.key(), cfg)
            })
            .collect::<Result<_>>()
    })?;
    Ok(per_item.into_iter().flatten().collect())
}

/// Score ground-truth renders of every layout; the evaluator must find every
/// instance (success rate 1) with mIoU ≥ 0.95.
pub fn gt_selfcheck(layouts: &[BenchLayout], resolution: usize, workers: usize, cfg: &EvalConfig) -> Result<Metrics> {
    let items = bench_items(layouts, &[0]);
    let records = evaluate_items(&items, workers, cfg, |it| Ok(render_ground_truth(&it.layout.instances, resolution)?.image))?;
    let m = compute_metrics(&records)?;
    if m.instance_success_rate < 1.0 || m.miou < 0.95 {
        let failed: Vec<String> = records
            .iter()
            .filter(|r| !r.fully_correct)
            .take(5)
            .map(|r| format!("L{} layout {} instance {} ({}, iou {:.3})", r.level, r.layout, r.instance, r.desc, r.best_iou))
            .collect();
        return Err(BenchError::OracleClosure(format!(
            "success rate {:.4}, mIoU {:.4} on ground truth; first failures: {}",
            m.instance_success_rate,
            m.miou,
            failed.join("; ")
        )));
    }
    Ok(m)
}
