//! Embedded invariant checks, runnable from a release binary.

use std::io::Cursor;

use crate::denoiser::wire;
use crate::denoiser::{analytic_gaussian_eps, Condition, GaussianPrior, MeanField};
use crate::engine::{run_pipeline, ExecutorMode, PipelineConfig, PredictorSpec};
use crate::guidance::{masked_structure_guidance, normalize_attention, structure_guidance, AttentionMask};
use crate::patching::{interleave_merge, interleave_split, pixel_interaction, spatial_fuse, spatial_split};
use crate::rng::{SeededRng, StreamDomain};
use crate::schedule::{ddim_step, forward_diffuse, predict_x0, NoiseSchedule, TimestepPlan};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    /// Replace the noise schedule with a non-monotone one; the suite must fail.
    pub corrupt_schedule: bool,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn schedule(corrupt: bool) -> Result<NoiseSchedule, String> {
    let clean = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(err)?;
    if !corrupt {
        return Ok(clean);
    }
    let betas = clean.betas().to_vec();
    let mut ab: Vec<f64> = (1..=1000).map(|t| clean.alpha_bar(t).unwrap()).collect();
    ab.swap(10, 500);
    Ok(NoiseSchedule::from_parts_unchecked(betas, ab))
}

fn check_schedule(sched: &NoiseSchedule) -> Check {
    sched.validate().map_err(err)?;
    let last = sched.alpha_bar(1000).map_err(err)?;
    ensure((last - 4.035829765375676e-05).abs() < 1e-12, || {
        format!("alpha_bar(1000) = {last}")
    })
}

fn check_plan() -> Check {
    let plan = TimestepPlan::uniform(1000, 50).map_err(err)?;
    let pairs = plan.pairs();
    ensure(
        pairs.len() == 50 && pairs[0] == (981, 961) && pairs[49] == (1, 0),
        || format!("unexpected plan {:?} .. {:?}", pairs.first(), pairs.last()),
    )
}

fn check_rng() -> Check {
    let a = Tensor::randn([2, 4, 4], &mut SeededRng::derived(9, StreamDomain::Auxiliary, 1)).map_err(err)?;
    let b = Tensor::randn([2, 4, 4], &mut SeededRng::derived(9, StreamDomain::Auxiliary, 1)).map_err(err)?;
    let c = Tensor::randn([2, 4, 4], &mut SeededRng::derived(9, StreamDomain::Auxiliary, 2)).map_err(err)?;
    ensure(a.bitwise_eq(&b) && !a.bitwise_eq(&c), || {
        "streams not reproducible".into()
    })
}

fn check_interleave(rng: &mut SeededRng) -> Check {
    for s in [1, 2, 4] {
        let x = Tensor::randn([3, 4 * s, 2 * s], rng).map_err(err)?;
        let back = interleave_merge(&interleave_split(&x, s).map_err(err)?).map_err(err)?;
        ensure(back.bitwise_eq(&x), || format!("roundtrip failed for stride {s}"))?;
    }
    Ok(())
}

fn check_fuse(rng: &mut SeededRng) -> Check {
    let x = Tensor::randn([2, 16, 16], rng).map_err(err)?;
    let ps = spatial_split(&x, 8, 8, 2).map_err(err)?;
    let y = spatial_fuse(&ps, &ps.patches).map_err(err)?;
    let d = y.max_abs_diff(&x).map_err(err)?;
    ensure(d <= 1e-6, || format!("fuse error {d}"))
}

fn check_interaction(rng: &mut SeededRng) -> Check {
    let x = Tensor::randn([2, 8, 8], rng).map_err(err)?;
    let ps = interleave_split(&x, 2).map_err(err)?;
    let out = pixel_interaction(&ps, rng).map_err(err)?;
    for i in 0..ps.patches[0].len() {
        let mut a: Vec<u32> = ps.patches.iter().map(|p| p.data()[i].to_bits()).collect();
        let mut b: Vec<u32> = out.patches.iter().map(|p| p.data()[i].to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        ensure(a == b, || format!("multiset changed at element {i}"))?;
    }
    Ok(())
}

fn check_sg_reductions(rng: &mut SeededRng) -> Check {
    for _ in 0..20 {
        let e = Tensor::randn([3, 4, 4], rng).map_err(err)?;
        let g = Tensor::randn([3, 4, 4], rng).map_err(err)?;
        let w = 0.5 + 3.0 * rng.uniform() as f32;
        let ones = AttentionMask::ones(4, 4).map_err(err)?;
        let sg = structure_guidance(&e, &g, w).map_err(err)?;
        let cam = masked_structure_guidance(&e, &g, w, &ones).map_err(err)?;
        ensure(cam.bitwise_eq(&sg), || "M = 1 differs from plain guidance".into())?;
        ensure(structure_guidance(&e, &g, 0.0).map_err(err)?.bitwise_eq(&e), || {
            "w = 0 is not the identity".into()
        })?;
    }
    Ok(())
}

fn check_mask_zero(rng: &mut SeededRng) -> Check {
    let e = Tensor::randn([3, 4, 4], rng).map_err(err)?;
    let g = Tensor::randn([3, 4, 4], rng).map_err(err)?;
    let zeros = AttentionMask::new(Tensor::zeros(Shape::new(1, 4, 4).map_err(err)?)).map_err(err)?;
    let out = masked_structure_guidance(&e, &g, 2.0, &zeros).map_err(err)?;
    ensure(out.data() == e.data(), || "M = 0 is not the identity".into())
}

fn check_normalize() -> Check {
    let raw = Tensor::from_vec(Shape::new(1, 1, 3).map_err(err)?, vec![0.0, 1.0, 4.0]).map_err(err)?;
    let m = normalize_attention(&raw).map_err(err)?;
    ensure(m.values().data() == [0.0, 0.25, 1.0], || {
        format!("normalized to {:?}", m.values().data())
    })?;
    let flat = Tensor::full(Shape::new(1, 2, 2).map_err(err)?, 5.0).map_err(err)?;
    let m = normalize_attention(&flat).map_err(err)?;
    ensure(m.values().data().iter().all(|v| *v == 1.0), || {
        "flat map not all ones".into()
    })
}

fn check_inversion(sched: &NoiseSchedule, rng: &mut SeededRng) -> Check {
    for t in [1, 250, 500, 999] {
        let x0 = Tensor::randn([2, 4, 4], rng).map_err(err)?;
        let eps = Tensor::randn([2, 4, 4], rng).map_err(err)?;
        let xt = forward_diffuse(&x0, t, &eps, sched).map_err(err)?;
        let back = predict_x0(&xt, &eps, t, sched).map_err(err)?;
        let scale = 1.0 / sched.alpha_bar(t).map_err(err)?.sqrt();
        let d = back.max_abs_diff(&x0).map_err(err)?;
        ensure(d <= 1e-5 * scale.max(1.0) * 4.0, || {
            format!("t={t}: inversion error {d}")
        })?;
    }
    Ok(())
}

fn check_posterior(sched: &NoiseSchedule) -> Check {
    let prior = GaussianPrior::new(MeanField::Constant(0.7), 0.5).map_err(err)?;
    let t = 300;
    let ab = sched.alpha_bar(t).map_err(err)?;
    let x = Tensor::full(Shape::new(1, 2, 2).map_err(err)?, (0.7 * ab.sqrt()) as f32).map_err(err)?;
    let eps = analytic_gaussian_eps(&x, t, &prior, sched).map_err(err)?;
    let m = eps.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
    ensure(m < 1e-5, || format!("eps at the prior mean is {m}"))
}

fn check_perfect_oracle(sched: &NoiseSchedule, rng: &mut SeededRng) -> Check {
    let x0 = Tensor::randn([1, 4, 4], rng).map_err(err)?;
    let noise = Tensor::randn([1, 4, 4], rng).map_err(err)?;
    let plan = TimestepPlan::uniform(1000, 50).map_err(err)?;
    let mut x = forward_diffuse(&x0, plan.first(), &noise, sched).map_err(err)?;
    for &(t, tp) in plan.pairs() {
        let ab = sched.alpha_bar(t).map_err(err)?;
        let eps = x
            .zip_map(&x0, "oracle", |xt, x0| {
                ((xt as f64 - ab.sqrt() * x0 as f64) / (1.0 - ab).sqrt()) as f32
            })
            .map_err(err)?;
        x = ddim_step(&x, &eps, t, tp, sched, 0.0, rng).map_err(err)?;
    }
    let d = x.max_abs_diff(&x0).map_err(err)?;
    ensure(d < 1e-4, || format!("trajectory ends {d} from x0"))
}

fn check_asgt(rng: &mut SeededRng) -> Check {
    let x = Tensor::randn([3, 5, 7], rng).map_err(err)?;
    let back = Tensor::from_asgt_bytes(&x.to_asgt_bytes()).map_err(err)?;
    ensure(back.bitwise_eq(&x), || "ASGT roundtrip changed data".into())
}

fn check_wire(rng: &mut SeededRng) -> Check {
    let x = Tensor::randn([4, 8, 8], rng).map_err(err)?;
    let frame = wire::encode_predict_request(&x, 501, &Condition::token("probe"), true).map_err(err)?;
    match wire::read_request(&mut Cursor::new(frame)).map_err(err)? {
        Ok(wire::ServerRequest::Predict { t, latent, .. }) if t == 501 && latent.bitwise_eq(&x) => Ok(()),
        other => Err(format!("decoded {other:?}")),
    }
}

fn check_modes_agree() -> Check {
    let mut sums = Vec::new();
    for mode in ExecutorMode::ALL {
        let cfg = PipelineConfig {
            steps: 6,
            channels: 1,
            executor: mode,
            predictor: PredictorSpec::constant(0.2),
            seed: 5,
            ..Default::default()
        };
        sums.push(run_pipeline(&cfg).map_err(err)?.0.checksum());
    }
    ensure(sums.iter().all(|s| *s == sums[0]), || "executor modes diverge".into())
}

fn check_determinism() -> Check {
    let cfg = PipelineConfig {
        steps: 6,
        channels: 2,
        seed: 11,
        ..Default::default()
    };
    let a = run_pipeline(&cfg).map_err(err)?.0;
    let b = run_pipeline(&cfg).map_err(err)?.0;
    ensure(a.bitwise_eq(&b), || "async runs differ".into())
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let mut rng = SeededRng::derived(0x5e1f, StreamDomain::Auxiliary, 0);
    let sched = schedule(opts.corrupt_schedule);
    let with_sched = |f: &mut dyn FnMut(&NoiseSchedule) -> Check| match &sched {
        Ok(s) => f(s),
        Err(e) => Err(e.clone()),
    };
    let mut checks: Vec<(&'static str, Check)> = vec![
        ("schedule_valid", with_sched(&mut |s| check_schedule(s))),
        ("timestep_plan", check_plan()),
        ("rng_streams", check_rng()),
        ("interleave_roundtrip", check_interleave(&mut rng)),
        ("spatial_fuse_roundtrip", check_fuse(&mut rng)),
        ("pixel_interaction_multiset", check_interaction(&mut rng)),
        ("guidance_reductions", check_sg_reductions(&mut rng)),
        ("mask_zero_identity", check_mask_zero(&mut rng)),
        ("attention_normalization", check_normalize()),
    ];
    checks.push(("x0_inversion", with_sched(&mut |s| check_inversion(s, &mut rng))));
    checks.push(("gaussian_posterior", with_sched(&mut |s| check_posterior(s))));
    checks.push((
        "perfect_oracle_trajectory",
        with_sched(&mut |s| check_perfect_oracle(s, &mut rng)),
    ));
    checks.push(("asgt_roundtrip", check_asgt(&mut rng)));
    checks.push(("wire_roundtrip", check_wire(&mut rng)));
    checks.push(("executor_modes_agree", check_modes_agree()));
    checks.push(("async_determinism", check_determinism()));

    SelftestReport {
        checks: checks
            .into_iter()
            .map(|(name, r)| CheckResult {
                name,
                passed: r.is_ok(),
                detail: r.err().unwrap_or_default(),
            })
            .collect(),
    }
}
