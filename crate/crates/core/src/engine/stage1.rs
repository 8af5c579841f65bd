//! Stage 1: interleaved patches denoised under structure guidance.
//!
//! Every executor runs the same per-patch arithmetic; only the choice of
//! guidance message differs. Sync semantics guide iteration `k` with worker
//! 0's message from `k`, async semantics with the one from `k − 1` (and from
//! `k` on the first iteration). That choice is structural, never a race, so
//! results do not depend on timing or worker count.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::report::{StageOutput, StalenessEntry, TimingRecord};
use super::{EngineError, Result, Stage, StageContext};
use crate::denoiser::{self, NoisePredictor, PredictOutput};
use crate::guidance::{apply_message, GuidanceMessage};
use crate::patching::{pixel_interaction, PatchSet};
use crate::rng::{SeededRng, StreamDomain};
use crate::schedule::ddim_step;
use crate::tensor::Tensor;

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        thread::sleep(deadline - now);
    }
}

fn patch_rng(ctx: &StageContext, patch: usize) -> SeededRng {
    SeededRng::derived(ctx.cfg.seed, StreamDomain::Stage1Patch, patch as u64)
}

fn interaction_rng(ctx: &StageContext) -> SeededRng {
    SeededRng::derived(ctx.cfg.seed, StreamDomain::Interaction, 0)
}

fn predict_patch(
    ctx: &StageContext,
    predictor: &dyn NoisePredictor,
    x: &Tensor,
    t: usize,
    worker: usize,
    patch: usize,
    iteration: usize,
) -> Result<PredictOutput> {
    denoiser::predict(x, t, &ctx.cfg.predictor.cond, predictor).map_err(|source| EngineError::Predictor {
        worker,
        patch,
        stage: Stage::Structure,
        iteration,
        source,
    })
}

/// Guided (or not) DDIM step for one patch.
#[allow(clippy::too_many_arguments)]
fn step_patch(
    ctx: &StageContext,
    x: &Tensor,
    eps: Tensor,
    msg: Option<&GuidanceMessage>,
    t: usize,
    t_prev: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let eps = match msg {
        Some(m) => apply_message(m, &eps, ctx.cfg.guidance.w)?,
        None => eps,
    };
    Ok(ddim_step(x, &eps, t, t_prev, ctx.sched, ctx.cfg.eta, rng)?)
}

/// Single thread of control over all patches.
pub(crate) fn run_sequential(
    ctx: &StageContext,
    predictor: &dyn NoisePredictor,
    ps: PatchSet,
    stale: bool,
) -> Result<(PatchSet, StageOutput)> {
    let start = Instant::now();
    let n = ps.len();
    let guide = ctx.guidance_active(n);
    let mut rngs: Vec<SeededRng> = (0..n).map(|p| patch_rng(ctx, p)).collect();
    let mut irng = interaction_rng(ctx);
    let mut xs = ps.patches.clone();
    let mut out = StageOutput::default();
    let mut prev: Option<GuidanceMessage> = None;

    for (j, &(t, t_prev)) in ctx.pairs.iter().enumerate() {
        let k = ctx.first_iteration + j;
        let it_start = Instant::now();
        let mut preds = Vec::with_capacity(n);
        for (p, x) in xs.iter().enumerate() {
            preds.push(predict_patch(ctx, predictor, x, t, 0, p, k)?);
        }
        let fresh = if guide {
            Some(ctx.make_message(k, &preds[0])?)
        } else {
            None
        };
        for (p, pred) in preds.into_iter().enumerate() {
            let msg = match (&fresh, p) {
                (None, _) | (_, 0) => None,
                (Some(f), _) => Some(match (&prev, stale) {
                    (Some(old), true) => old,
                    _ => f,
                }),
            };
            if let Some(m) = msg {
                out.staleness.push(StalenessEntry {
                    stage: Stage::Structure,
                    iteration: k,
                    patch: p,
                    source_iteration: m.iteration,
                });
            }
            xs[p] = step_patch(ctx, &xs[p], pred.eps_hat, msg, t, t_prev, &mut rngs[p])?;
        }
        if ctx.cfg.pixel_interaction && n > 1 {
            xs = pixel_interaction(&ps.with_patches(xs)?, &mut irng)?.patches;
        }
        prev = fresh;
        out.timings.push(TimingRecord {
            stage: Stage::Structure,
            iteration: k,
            worker: 0,
            compute_ms: ms(it_start.elapsed()),
            wait_ms: 0.0,
            comm_ms: 0.0,
        });
    }
    out.wall_ms = ms(start.elapsed());
    Ok((ps.with_patches(xs)?, out))
}

#[derive(Clone)]
struct Envelope {
    msg: Arc<GuidanceMessage>,
    available_at: Instant,
}

enum ToCoordinator {
    Patches(Vec<(usize, Tensor)>),
    Failed,
}

struct WorkerLinks {
    /// Worker 0 only: one sender per consumer.
    broadcast: Vec<Sender<Envelope>>,
    /// Consumers only.
    inbox: Option<Receiver<Envelope>>,
    to_coord: Option<Sender<ToCoordinator>>,
    from_coord: Option<Receiver<Vec<(usize, Tensor)>>>,
}

struct WorkerOutput {
    patches: Vec<(usize, Tensor)>,
    out: StageOutput,
}

/// Persistent worker threads, one broadcast channel per consumer.
pub(crate) fn run_parallel(
    ctx: &StageContext,
    predictors: &[Box<dyn NoisePredictor>],
    ps: PatchSet,
    stale: bool,
) -> Result<(PatchSet, StageOutput)> {
    let start = Instant::now();
    let n = ps.len();
    let workers = predictors.len().min(n).max(1);
    let exchange = ctx.cfg.pixel_interaction && n > 1;

    let mut links: Vec<WorkerLinks> = (0..workers)
        .map(|_| WorkerLinks {
            broadcast: Vec::new(),
            inbox: None,
            to_coord: None,
            from_coord: None,
        })
        .collect();
    for w in 1..workers {
        let (tx, rx) = mpsc::channel();
        links[0].broadcast.push(tx);
        links[w].inbox = Some(rx);
    }
    let (coord_tx, coord_rx) = mpsc::channel();
    let mut replies = Vec::new();
    if exchange {
        for l in links.iter_mut() {
            let (tx, rx) = mpsc::channel();
            l.to_coord = Some(coord_tx.clone());
            l.from_coord = Some(rx);
            replies.push(tx);
        }
    }
    drop(coord_tx);

    let results: Vec<thread::Result<Result<WorkerOutput>>> = thread::scope(|s| {
        let handles: Vec<_> = links
            .into_iter()
            .enumerate()
            .map(|(w, l)| {
                let predictor = &*predictors[w];
                let ps = &ps;
                thread::Builder::new()
                    .name(format!("asg-worker-{w}"))
                    .spawn_scoped(s, move || {
                        let notify = l.to_coord.clone();
                        let r = worker_loop(ctx, predictor, ps, w, workers, stale, l);
                        if r.is_err() {
                            if let Some(tx) = notify {
                                let _ = tx.send(ToCoordinator::Failed);
                            }
                        }
                        r
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        if exchange {
            coordinate(ctx, &ps, workers, coord_rx, replies);
        }
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut xs: Vec<Option<Tensor>> = vec![None; n];
    let mut out = StageOutput::default();
    let mut errors = Vec::new();
    for (w, r) in results.into_iter().enumerate() {
        match r {
            Err(_) => errors.push(EngineError::WorkerPanicked(w)),
            Ok(Err(e)) => errors.push(e),
            Ok(Ok(wo)) => {
                for (p, x) in wo.patches {
                    xs[p] = Some(x);
                }
                out.timings.extend(wo.out.timings);
                out.staleness.extend(wo.out.staleness);
            }
        }
    }
    if !errors.is_empty() {
        return Err(root_cause(errors));
    }
    out.sort();
    out.wall_ms = ms(start.elapsed());
    let xs = xs.into_iter().map(|x| x.expect("every patch owned")).collect();
    Ok((ps.with_patches(xs)?, out))
}

/// A lost channel is only ever a consequence of another worker failing.
fn root_cause(errors: Vec<EngineError>) -> EngineError {
    let mut secondary = None;
    for e in errors {
        if matches!(e, EngineError::Disconnected { .. }) {
            secondary.get_or_insert(e);
        } else {
            return e;
        }
    }
    secondary.expect("at least one error")
}

/// Pixel-interaction barrier, run on the calling thread.
fn coordinate(
    ctx: &StageContext,
    layout: &PatchSet,
    workers: usize,
    rx: Receiver<ToCoordinator>,
    replies: Vec<Sender<Vec<(usize, Tensor)>>>,
) {
    let n = layout.len();
    let mut rng = interaction_rng(ctx);
    for _ in ctx.pairs {
        let mut slots: Vec<Option<Tensor>> = vec![None; n];
        for _ in 0..workers {
            match rx.recv() {
                Ok(ToCoordinator::Patches(v)) => {
                    for (p, x) in v {
                        slots[p] = Some(x);
                    }
                }
                Ok(ToCoordinator::Failed) | Err(_) => return,
            }
        }
        let Some(xs) = slots.into_iter().collect::<Option<Vec<_>>>() else {
            return;
        };
        let Ok(mixed) = layout.with_patches(xs).and_then(|ps| pixel_interaction(&ps, &mut rng)) else {
            return;
        };
        let mut parts: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); workers];
        for (p, x) in mixed.patches.into_iter().enumerate() {
            parts[p % workers].push((p, x));
        }
        for (tx, part) in replies.iter().zip(parts) {
            if tx.send(part).is_err() {
                return;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn worker_loop(
    ctx: &StageContext,
    predictor: &dyn NoisePredictor,
    ps: &PatchSet,
    w: usize,
    workers: usize,
    stale: bool,
    links: WorkerLinks,
) -> Result<WorkerOutput> {
    let n = ps.len();
    let guide = ctx.guidance_active(n);
    let comm_delay = Duration::from_secs_f64(ctx.cfg.comm_delay_ms / 1000.0);
    let mine: Vec<usize> = (w..n).step_by(workers).collect();
    let mut xs: Vec<Tensor> = mine.iter().map(|&p| ps.patches[p].clone()).collect();
    let mut rngs: Vec<SeededRng> = mine.iter().map(|&p| patch_rng(ctx, p)).collect();
    let mut out = StageOutput::default();

    // Worker 0: its own last two messages. Consumers: latest received.
    let mut own_prev: Option<Arc<GuidanceMessage>> = None;
    let mut held: Option<Envelope> = None;

    for (j, &(t, t_prev)) in ctx.pairs.iter().enumerate() {
        let k = ctx.first_iteration + j;
        let disconnected = || EngineError::Disconnected {
            worker: w,
            stage: Stage::Structure,
            iteration: k,
        };
        let mut compute = Duration::ZERO;
        let mut wait = Duration::ZERO;
        let mut comm = Duration::ZERO;

        let c0 = Instant::now();
        let mut preds = Vec::with_capacity(mine.len());
        for (x, &p) in xs.iter().zip(&mine) {
            preds.push(predict_patch(ctx, predictor, x, t, w, p, k)?);
        }
        compute += c0.elapsed();

        let mut own_fresh = None;
        if guide && w == 0 {
            let m0 = Instant::now();
            let msg = Arc::new(ctx.make_message(k, &preds[0])?);
            let available_at = Instant::now() + comm_delay;
            for tx in &links.broadcast {
                // A dead consumer reports its own error.
                let _ = tx.send(Envelope {
                    msg: msg.clone(),
                    available_at,
                });
            }
            if !stale {
                sleep_until(available_at);
            }
            comm += m0.elapsed();
            own_fresh = Some(msg);
        }

        let need = if stale && j > 0 { k - 1 } else { k };
        let mut steps = Vec::with_capacity(mine.len());
        for (idx, pred) in preds.into_iter().enumerate() {
            let p = mine[idx];
            let msg: Option<Arc<GuidanceMessage>> = if !guide || p == 0 {
                None
            } else if w == 0 {
                if need == k {
                    own_fresh.clone()
                } else {
                    own_prev.clone()
                }
            } else {
                let w0 = Instant::now();
                let inbox = links.inbox.as_ref().expect("consumer inbox");
                while held.as_ref().is_none_or(|e| e.msg.iteration < need) {
                    held = Some(inbox.recv().map_err(|_| disconnected())?);
                }
                let env = held.as_ref().expect("message held");
                sleep_until(env.available_at);
                wait += w0.elapsed();
                Some(env.msg.clone())
            };
            if let Some(m) = &msg {
                debug_assert_eq!(m.iteration, need);
                out.staleness.push(StalenessEntry {
                    stage: Stage::Structure,
                    iteration: k,
                    patch: p,
                    source_iteration: m.iteration,
                });
            }
            steps.push((idx, pred, msg));
        }

        let c1 = Instant::now();
        for (idx, pred, msg) in steps {
            xs[idx] = step_patch(ctx, &xs[idx], pred.eps_hat, msg.as_deref(), t, t_prev, &mut rngs[idx])?;
        }
        compute += c1.elapsed();

        if let (Some(tx), Some(rx)) = (&links.to_coord, &links.from_coord) {
            let b0 = Instant::now();
            let batch = mine.iter().copied().zip(xs.drain(..)).collect();
            tx.send(ToCoordinator::Patches(batch)).map_err(|_| disconnected())?;
            let back = rx.recv().map_err(|_| disconnected())?;
            xs = back.into_iter().map(|(_, x)| x).collect();
            wait += b0.elapsed();
        }

        if w == 0 {
            own_prev = own_fresh;
        }
        out.timings.push(TimingRecord {
            stage: Stage::Structure,
            iteration: k,
            worker: w,
            compute_ms: ms(compute),
            wait_ms: ms(wait),
            comm_ms: ms(comm),
        });
    }
    Ok(WorkerOutput {
        patches: mine.into_iter().zip(xs).collect(),
        out,
    })
}
