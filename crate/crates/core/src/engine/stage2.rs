//! Stage 2: overlapping spatial tiles, fused onto the canvas after every step.

use std::thread;
use std::time::{Duration, Instant};

use super::report::{StageOutput, StalenessEntry, TimingRecord};
use super::{EngineError, Result, Stage, StageContext};
use crate::denoiser::{self, NoisePredictor, PredictOutput};
use crate::guidance::apply_message;
use crate::patching::{spatial_fuse_weighted, spatial_split, PatchSet};
use crate::rng::{SeededRng, StreamDomain};
use crate::schedule::ddim_step;
use crate::tensor::Tensor;

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

pub(crate) fn tile_layout(ctx: &StageContext, hr: &Tensor) -> Result<PatchSet> {
    let (bh, bw) = ctx.cfg.base_hw;
    Ok(spatial_split(hr, bh, bw, ctx.cfg.overlap())?)
}

/// Predicts every tile; `parallel` spreads tiles round-robin over the
/// predictors, one scoped thread each.
fn predict_tiles(
    ctx: &StageContext,
    predictors: &[Box<dyn NoisePredictor>],
    tiles: &[Tensor],
    t: usize,
    k: usize,
    parallel: bool,
) -> Result<(Vec<PredictOutput>, Vec<f64>)> {
    let n = tiles.len();
    let workers = if parallel { predictors.len().min(n).max(1) } else { 1 };
    let run = |w: usize| -> (Vec<(usize, Result<PredictOutput>)>, Duration) {
        let start = Instant::now();
        let res = (w..n)
            .step_by(workers)
            .map(|p| {
                let r = denoiser::predict(&tiles[p], t, &ctx.cfg.predictor.cond, &*predictors[w]).map_err(|source| {
                    EngineError::Predictor {
                        worker: w,
                        patch: p,
                        stage: Stage::Refine,
                        iteration: k,
                        source,
                    }
                });
                (p, r)
            })
            .collect();
        (res, start.elapsed())
    };
    let per_worker: Vec<_> = if workers == 1 {
        vec![run(0)]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|w| s.spawn(move || run(w))).collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(w, h)| h.join().map_err(|_| EngineError::WorkerPanicked(w)))
                .collect::<Result<Vec<_>>>()
        })?
    };
    let mut slots: Vec<Option<PredictOutput>> = (0..n).map(|_| None).collect();
    let mut compute = Vec::with_capacity(workers);
    for (res, dt) in per_worker {
        compute.push(ms(dt));
        for (p, r) in res {
            slots[p] = Some(r?);
        }
    }
    Ok((slots.into_iter().map(|s| s.expect("tile predicted")).collect(), compute))
}

pub(crate) fn run(
    ctx: &StageContext,
    predictors: &[Box<dyn NoisePredictor>],
    hr: Tensor,
    parallel: bool,
) -> Result<(Tensor, StageOutput, usize)> {
    let start = Instant::now();
    let layout = tile_layout(ctx, &hr)?;
    let n = layout.len();
    let mut rngs: Vec<SeededRng> = (0..n)
        .map(|p| SeededRng::derived(ctx.cfg.seed, StreamDomain::Stage2Tile, p as u64))
        .collect();
    let guide = ctx.cfg.guidance.stage2 && ctx.guidance_active(n);
    let mut canvas = hr;
    let mut out = StageOutput::default();

    for (j, &(t, t_prev)) in ctx.pairs.iter().enumerate() {
        let k = ctx.first_iteration + j;
        let it_start = Instant::now();
        let tiles = if j == 0 {
            layout.patches.clone()
        } else {
            tile_layout(ctx, &canvas)?.patches
        };
        let p0 = Instant::now();
        let (preds, compute) = predict_tiles(ctx, predictors, &tiles, t, k, parallel)?;
        let predict_wall = ms(p0.elapsed());

        let msg = if guide {
            Some(ctx.make_message(k, &preds[0])?)
        } else {
            None
        };
        let mut stepped = Vec::with_capacity(n);
        for (p, pred) in preds.into_iter().enumerate() {
            let eps = match &msg {
                Some(m) if p != 0 => {
                    out.staleness.push(StalenessEntry {
                        stage: Stage::Refine,
                        iteration: k,
                        patch: p,
                        source_iteration: m.iteration,
                    });
                    apply_message(m, &pred.eps_hat, ctx.cfg.guidance.w)?
                }
                _ => pred.eps_hat,
            };
            stepped.push(ddim_step(
                &tiles[p],
                &eps,
                t,
                t_prev,
                ctx.sched,
                ctx.cfg.eta,
                &mut rngs[p],
            )?);
        }
        canvas = spatial_fuse_weighted(&layout, &stepped, ctx.cfg.stage2.window)?;

        let iter_ms = ms(it_start.elapsed());
        for (w, c) in compute.iter().enumerate() {
            out.timings.push(TimingRecord {
                stage: Stage::Refine,
                iteration: k,
                worker: w,
                compute_ms: if w == 0 { c + (iter_ms - predict_wall) } else { *c },
                wait_ms: (predict_wall - c).max(0.0),
                comm_ms: 0.0,
            });
        }
    }
    out.wall_ms = ms(start.elapsed());
    Ok((canvas, out, n))
}
