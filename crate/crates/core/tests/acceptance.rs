//! End-to-end acceptance suite. Each test prints one `PASS`/`FAIL` line
//! (written straight to stderr so it shows without `--nocapture`) and then
//! asserts on the same outcome.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptychograd::autodiff::{finite_difference_check, finite_difference_check_with, GradCheck, Var};
use ptychograd::config::RunConfig;
use ptychograd::error::Result;
use ptychograd::forward::{intensity_var, simulate_intensity, ProbeModes, ScanSet};
use ptychograd::loss::{data_fidelity_var, regularization, LossDomain, Measurements, RegularizationWeights};
use ptychograd::metrics::{
    object_quality, position_error_stats, remove_ambiguities, ssim, ConvergenceHistory,
};
use ptychograd::num_complex::Complex64;
use ptychograd::optics::{propagate_field, propagate_var, PadPolicy, PropagationSpec};
use ptychograd::reconstruct::{comparison_roi, Problem, ReconstructionConfig, ReconstructionState};
use ptychograd::simulator::{simulate_recipe, CorruptionSpec, SimulationRecipe};
use ptychograd::spatial::{
    bilinear_sample, crop, generate_grid, sample, scatter, weight_sum, AffineParams,
};
use ptychograd::tensor::ComplexTensor;

const SEEDS: u64 = 10;
const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance {criterion} {name}: {verdict} ({detail})");
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ComplexTensor {
    ComplexTensor::from_fn(rows, cols, |_, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

fn random_real(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ComplexTensor {
    ComplexTensor::from_fn(rows, cols, |_, _| Complex64::new(rng.random_range(lo..hi), 0.0))
}

/// `Σ|w∘out − t|²` with random `w`, `t`.
fn weighted<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (r, c) = out.shape();
    let w = out.tape().constant(random(r, c, &mut rng));
    let t = out.tape().constant(random(r, c, &mut rng));
    Ok(out.mul(w)?.sub(t)?.modulus_squared().sum())
}

struct Worst {
    name: String,
    error: f64,
}

impl Worst {
    fn new() -> Self {
        Self {
            name: String::new(),
            error: 0.0,
        }
    }

    fn record(&mut self, name: &str, seed: u64, check: GradCheck) {
        if check.max_rel_error >= self.error {
            self.error = check.max_rel_error;
            self.name = format!("{name} seed {seed} at {:?}", check.worst);
        }
    }
}

fn primitive_checks(seed: u64, worst: &mut Worst) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = vec![random(3, 4, &mut rng), random(3, 4, &mut rng)];
    let c = Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let complex_cases: Vec<(&str, Box<dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>>)> = vec![
        ("add", Box::new(move |v| weighted(v[0].add(v[1])?, seed))),
        ("sub", Box::new(move |v| weighted(v[0].sub(v[1])?, seed))),
        ("mul", Box::new(move |v| weighted(v[0].mul(v[1])?, seed))),
        ("add_scalar", Box::new(move |v| weighted(v[0].add_scalar(c)?.mul(v[1])?, seed))),
        ("scale", Box::new(move |v| weighted(v[0].scale(c.re), seed))),
        ("scale_complex", Box::new(move |v| weighted(v[0].scale_complex(c), seed))),
        ("conj", Box::new(move |v| weighted(v[0].conj().mul(v[1])?, seed))),
        ("modulus_squared", Box::new(move |v| weighted(v[0].modulus_squared(), seed))),
        ("sum", Box::new(|v| Ok(v[0].mul(v[1])?.sum().modulus_squared()))),
        ("l1_norm", Box::new(|v| Ok(v[0].l1_norm().modulus_squared()))),
        ("pad/crop", Box::new(move |v| weighted(v[0].pad(1, 2, 6, 7)?.fft2().crop(2, 1, 3, 4)?, seed))),
        (
            "pad_center/crop_center",
            Box::new(move |v| weighted(v[0].pad_center(7, 8)?.ifft2().crop_center(3, 4)?, seed)),
        ),
        ("fft2", Box::new(move |v| weighted(v[0].fft2(), seed))),
        ("ifft2", Box::new(move |v| weighted(v[0].ifft2(), seed))),
        (
            "concat_rows",
            Box::new(move |v| weighted(v[0].tape().concat_rows(&[v[0], v[1], v[0]])?.fft2(), seed)),
        ),
    ];
    for (name, f) in &complex_cases {
        let check = finite_difference_check(|_, v| f(v), &pair, FD_STEP).unwrap();
        worst.record(name, seed, check);
    }

    let positive = vec![random_real(3, 3, 0.2, 2.0, &mut rng)];
    let mixed = vec![ComplexTensor::from_fn(3, 3, |_, _| {
        let v: f64 = rng.random_range(0.1..1.0);
        Complex64::new(if rng.random_bool(0.5) { v } else { -v }, 0.0)
    })];
    let phase = vec![random_real(3, 3, -4.0, 4.0, &mut rng)];
    let real = [true];
    let sqrt = finite_difference_check_with(|_, v| weighted(v[0].sqrt(), seed), &positive, &real, FD_STEP).unwrap();
    worst.record("sqrt", seed, sqrt);
    let relu = finite_difference_check_with(|_, v| weighted(v[0].relu(), seed), &mixed, &real, FD_STEP).unwrap();
    worst.record("relu", seed, relu);
    let expj = finite_difference_check_with(|_, v| weighted(v[0].exp_j(), seed), &phase, &real, FD_STEP).unwrap();
    worst.record("exp_j", seed, expj);

    // Sampler: image and grid inputs, then the translation-driven crop.
    let img = random(6, 7, &mut rng);
    let grid = ComplexTensor::from_fn(3, 4, |_, _| {
        Complex64::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9))
    });
    let sampler =
        finite_difference_check(|_, v| weighted(bilinear_sample(v[0], v[1])?, seed), &[img, grid], FD_STEP).unwrap();
    worst.record("bilinear_sample", seed, sampler);
    let smooth = smooth_image(24, 24);
    let t = Complex64::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let shift = finite_difference_check(
        |tape, v| Ok(crop(tape.constant(smooth.clone()), v[0], (8, 8))?.modulus_squared().sum()),
        &[ComplexTensor::scalar(t)],
        1e-6,
    )
    .unwrap();
    worst.record("crop(translation)", seed, shift);

    // Propagator: complex field at fixed distance, then distance through
    // the intensity (the piston exp(jkz) makes the field's z-derivative
    // ~1e10 per metre, beyond any finite-difference step).
    let spec = PropagationSpec::new(1e-9, 0.0, 1e-6).with_pad(PadPolicy::Fixed(4));
    let field = random(8, 8, &mut rng);
    let z0 = rng.random_range(0.05..0.15);
    let at_z0 = spec.with_distance(z0);
    let in_field = finite_difference_check(
        |_, v| weighted(ptychograd::optics::propagate(v[0], &at_z0)?, seed),
        &[field.clone()],
        FD_STEP,
    )
    .unwrap();
    worst.record("propagate (field)", seed, in_field);
    let prop = finite_difference_check_with(
        |_, v| {
            let z = v[1].scale(1e-2).add_scalar(Complex64::new(z0, 0.0))?;
            weighted(propagate_var(v[0], z, &spec)?.modulus_squared(), seed)
        },
        &[field, ComplexTensor::real_scalar(rng.random_range(-0.5..0.5))],
        &[false, true],
        FD_STEP,
    )
    .unwrap();
    worst.record("propagate (field, distance)", seed, prop);
}

fn smooth_image(rows: usize, cols: usize) -> ComplexTensor {
    ComplexTensor::from_fn(rows, cols, |r, c| {
        let (x, y) = (c as f64 / cols as f64, r as f64 / rows as f64);
        Complex64::new((3.0 * x).sin() + y * y, (2.0 * y + x).cos())
    })
}

/// Two probe modes, object crop at a sub-pixel translation, propagation,
/// amplitude loss and all three regularizers, checked in every input.
fn composed_check(seed: u64, worst: &mut Worst) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let scan = ScanSet::from_pixels(&[(0.0, 0.0), (2.0, -1.0), (-3.0, 2.0), (1.5, 0.25)], 1e-6).unwrap();
    let shape = scan.object_shape((8, 8));
    // Magnitudes kept off |O| = 1, where the object penalty has its kink;
    // a fifth of them above it so the penalty is active.
    let object = ComplexTensor::from_fn(shape.0, shape.1, |_, _| {
        let m = if rng.random_bool(0.2) {
            rng.random_range(1.1..1.3)
        } else {
            rng.random_range(0.3..0.9)
        };
        Complex64::from_polar(m, rng.random_range(-PI..PI))
    });
    let probes = [random(8, 8, &mut rng), random(8, 8, &mut rng)];
    let frames = vec![random(8, 8, &mut rng).modulus().map(|v| v * v)];
    let meas = Measurements::new(&frames, LossDomain::Amplitude).unwrap();
    let j = rng.random_range(0..scan.len());
    let t0 = scan.translation(j, shape);
    let spec = PropagationSpec::new(1e-9, 0.0, 1e-6).with_pad(PadPolicy::Fixed(2));
    let z0 = 0.05;
    let weights = RegularizationWeights {
        object: 3.0,
        probe: 1e-3,
        corrections: 0.5,
    };
    // Energy target above the probes' so the probe penalty is active.
    let e_target = 1.5 * (probes[0].norm_sqr() + probes[1].norm_sqr());
    let point = vec![
        probes[0].clone(),
        probes[1].clone(),
        object,
        ComplexTensor::real_scalar(rng.random_range(-0.3..0.3)),
        ComplexTensor::scalar(Complex64::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05))),
    ];
    let check = finite_difference_check_with(
        |_, v| {
            let z = v[3].scale(z0).add_scalar(Complex64::new(z0, 0.0))?;
            let t = v[4].add_scalar(t0)?;
            let sim = intensity_var(&[v[0], v[1]], v[2], t, z, &spec)?;
            let fidelity = data_fidelity_var(sim, &meas, 0)?;
            let reg = regularization(v[2], &[v[0], v[1]], &[v[4]], e_target, &weights)?.total()?;
            fidelity.add(reg)
        },
        &point,
        &[false, false, false, true, false],
        // The loss is O(1e2) while some gradient entries are O(1e-2); a
        // larger step keeps roundoff below the tolerance.
        1e-4,
    )
    .unwrap();
    worst.record("composed forward + loss", seed, check);
}

/// Distance factor and position corrections through the reconstruction's
/// own batch gradient.
fn reconstruction_gradient_check(seed: u64) -> f64 {
    let recipe = SimulationRecipe {
        pattern_size: 16,
        probe_diameter: 10.0,
        grid: 3,
        pixel_pitch: 1e-6,
        seed,
        corruption: CorruptionSpec {
            z_error: 0.1,
            position_jitter: 1.0,
        },
        ..SimulationRecipe::desk_scale(seed)
    };
    let (data, truth) = simulate_recipe(&recipe, None).unwrap();
    let cfg = ReconstructionConfig {
        batch_size: 3,
        probe_radius: Some(5.0),
        ..Default::default()
    };
    let problem = Problem::new(&data, &cfg).unwrap();
    let mut state = ReconstructionState::from_truth(&truth, &data, &cfg).unwrap();
    state.z0 = data.distance;
    state.z_factor = -0.05;
    state.positions = data.positions.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    for c in &mut state.corrections {
        *c = Complex64::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
    }
    let batch = [0, 4, 8];
    let step = problem.batch_gradient(&state, &batch).unwrap();
    let loss = |s: &ReconstructionState| problem.batch_gradient(s, &batch).unwrap().total();
    let h = 1e-6;
    let rel = |fd: f64, analytic: f64| (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12);

    let (mut p, mut m) = (state.clone(), state.clone());
    p.z_factor += h;
    m.z_factor -= h;
    let mut worst = rel((loss(&p) - loss(&m)) / (2.0 * h), step.z_factor);
    for &(j, g) in &step.corrections {
        for (dir, analytic) in [(Complex64::new(h, 0.0), g.re), (Complex64::new(0.0, h), g.im)] {
            let (mut p, mut m) = (state.clone(), state.clone());
            p.corrections[j] += dir;
            m.corrections[j] -= dir;
            worst = worst.max(rel((loss(&p) - loss(&m)) / (2.0 * h), analytic));
        }
    }
    worst
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let mut worst = Worst::new();
    let mut recon_worst: f64 = 0.0;
    for seed in 0..SEEDS {
        primitive_checks(seed, &mut worst);
        composed_check(seed, &mut worst);
        recon_worst = recon_worst.max(reconstruction_gradient_check(seed));
    }
    let pass = worst.error < GRAD_TOL && recon_worst < GRAD_TOL;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{SEEDS} seeds; worst primitive/composed rel error {:.2e} ({}); distance and position gradients {:.2e}; tolerance {GRAD_TOL:.0e}",
            worst.error, worst.name, recon_worst
        ),
    );
    assert!(pass);
}

fn random_field(rows: usize, cols: usize, seed: u64) -> ComplexTensor {
    random(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn criterion_2_propagator_physics() {
    let spec = PropagationSpec::new(1e-9, 0.05, 1e-6).with_pad(PadPolicy::Fixed(0));
    let x = random_field(24, 20, 1);
    let y = propagate_field(&x, &spec).unwrap();
    let energy = ((y.norm_sqr() - x.norm_sqr()) / x.norm_sqr()).abs();
    let back = propagate_field(&y, &spec.with_distance(-0.05)).unwrap().max_abs_diff(&x);

    // 20 nm pixels put real diffraction into a few micrometres.
    let fine = PropagationSpec::new(1e-9, 0.0, 20e-9).with_pad(PadPolicy::Fixed(0));
    let g = random_field(32, 32, 2);
    let direct = propagate_field(&g, &fine.with_distance(7e-6)).unwrap();
    let two_step = propagate_field(
        &propagate_field(&g, &fine.with_distance(3e-6)).unwrap(),
        &fine.with_distance(4e-6),
    )
    .unwrap();
    let group = direct.max_abs_diff(&two_step);

    let identity = propagate_field(&g, &fine).unwrap().max_abs_diff(&g);

    let plane = PropagationSpec::new(1e-9, 0.1, 1e-6).with_pad(PadPolicy::Fixed(0));
    let expected = Complex64::from_polar(1.0, plane.wavenumber() * 0.1);
    let eigen = propagate_field(&ComplexTensor::ones(16, 16), &plane)
        .unwrap()
        .iter()
        .map(|v| (v - expected).norm())
        .fold(0.0, f64::max);

    let (lambda, pixel, w0_px, n) = (1e-9, 1e-6, 8.0, 128);
    let w0 = w0_px * pixel;
    let z_r = PI * w0 * w0 / lambda;
    let c = (n / 2) as f64;
    let beam = ComplexTensor::from_fn(n, n, |r, col| {
        let rr = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)) * pixel * pixel;
        Complex64::new((-rr / (w0 * w0)).exp(), 0.0)
    });
    let out = propagate_field(&beam, &PropagationSpec::new(lambda, z_r, pixel)).unwrap();
    let (mut m0, mut m2) = (0.0, 0.0);
    for r in 0..n {
        for col in 0..n {
            let i = out.get(r, col).norm_sqr();
            m0 += i;
            m2 += i * (col as f64 - c).powi(2) * pixel * pixel;
        }
    }
    let waist = 2.0 * (m2 / m0).sqrt();
    let paraxial = w0 * 2f64.sqrt();
    let beam_err = (waist - paraxial).abs() / paraxial;

    let pass = energy < 1e-10 && back < 1e-10 && group < 1e-10 && identity < 1e-12 && eigen < 1e-9 && beam_err < 0.02;
    report(
        2,
        "propagator physics",
        pass,
        &format!(
            "energy drift {energy:.1e}, inverse {back:.1e}, group {group:.1e}, z=0 {identity:.1e}, eigenphase {eigen:.1e}, gaussian waist error {:.2}%",
            100.0 * beam_err
        ),
    );
    assert!(pass);
}

/// The desk-scale synthetic protocol: 64×64 patterns, 7×7 scan at 70 %
/// overlap, z at +30 %, positions jittered by σ = 5 px, batch size 5.
fn desk_protocol() -> (SimulationRecipe, ReconstructionConfig) {
    let recipe = SimulationRecipe::desk_scale(7);
    let mut cfg = ReconstructionConfig {
        epochs: 1000,
        batch_size: 5,
        probe_radius: Some(recipe.probe_diameter / 2.0),
        lr_decay: 0.998,
        metrics_interval: 50,
        ..Default::default()
    };
    cfg.pool.object.lr = 0.01;
    cfg.pool.probe.lr = 0.01;
    cfg.pool.distance.lr = 0.01;
    cfg.pool.positions.lr = 0.1;
    (recipe, cfg)
}

#[test]
fn criterion_3_desk_scale_protocol() {
    let (recipe, cfg) = desk_protocol();
    assert_eq!(recipe.pattern_size, 64);
    assert_eq!(recipe.grid, 7);
    assert_eq!(recipe.corruption.position_jitter, 5.0);
    assert_eq!(recipe.corruption.z_error, 0.3);
    let (data, truth) = simulate_recipe(&recipe, None).unwrap();
    let true_px = truth.positions_pixels();
    let initial = ReconstructionState::initial(&data, &cfg).unwrap();
    let initial_median = position_error_stats(&initial.estimated_positions(), &true_px).unwrap().median;

    let problem = Problem::new(&data, &cfg).unwrap();
    let mut history = ConvergenceHistory::new();
    let state = problem.run(initial, &mut history, Some(&truth), |_, _| Ok(())).unwrap();

    let z_removed = (state.distance() - truth.distance).abs() / (0.3 * truth.distance);
    let final_median = position_error_stats(&state.estimated_positions(), &true_px).unwrap().median;
    let quality = object_quality(&state.object, &truth.object, comparison_roi(&state, &truth)).unwrap();
    let (a, b, c) = (
        z_removed <= 0.1,
        final_median <= 0.1 * initial_median,
        quality.ssim_magnitude >= 0.90,
    );
    let losses: Vec<f64> = history.records().iter().map(|r| r.loss_total).collect();
    let halving = (1..=250).filter(|&k| losses[2 * k - 1] < losses[k - 1]).count();
    report(
        3,
        "desk-scale protocol",
        a && b && c,
        &format!(
            "{} epochs; (a) residual z error {:.3} of initial [{}]; (b) median position error {:.3} px from {:.3} px [{}]; (c) magnitude SSIM {:.3} [{}]; loss(2k) < loss(k) for {halving}/250 k",
            state.epoch,
            z_removed,
            if a { "ok" } else { "over 0.1" },
            final_median,
            initial_median,
            if b { "ok" } else { "over 10%" },
            quality.ssim_magnitude,
            if c { "ok" } else { "under 0.90" },
        ),
    );
    assert!(a && b && c);
}

#[test]
fn criterion_4_ground_truth_is_a_fixed_point() {
    let (recipe, mut cfg) = desk_protocol();
    cfg.epochs = 100;
    let (data, truth) = simulate_recipe(&recipe, None).unwrap();
    let problem = Problem::new(&data, &cfg).unwrap();
    let start = ReconstructionState::from_truth(&truth, &data, &cfg).unwrap();
    let before = problem.evaluate(&start).unwrap().total;
    let mut history = ConvergenceHistory::new();
    let end = problem.run(start.clone(), &mut history, None, |_, _| Ok(())).unwrap();
    let after = problem.evaluate(&end).unwrap().total;
    let dloss = (after - before).abs();
    let dz = (end.distance() - start.distance()).abs() / start.distance();
    let pass = dloss < 1e-8 && dz < 1e-9;
    report(
        4,
        "fixed point at ground truth",
        pass,
        &format!("loss {before:.2e} -> {after:.2e} (change {dloss:.1e}), relative z change {dz:.1e} over 100 epochs"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_modes_add_incoherently() {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let scan = ScanSet::from_pixels(&[(0.0, 0.0), (2.5, -1.25), (-3.0, 2.0)], 1e-6).unwrap();
        let shape = scan.object_shape((12, 12));
        let object = random(shape.0, shape.1, &mut rng);
        let (a, b) = (random(12, 12, &mut rng), random(12, 12, &mut rng));
        let spec = PropagationSpec::new(1e-9, 0.02, 1e-6);
        let both = ProbeModes::new(vec![a.clone(), b.clone()]).unwrap();
        for j in 0..scan.len() {
            let sum = simulate_intensity(&both, &object, &scan, j, &spec).unwrap();
            let ia = simulate_intensity(&ProbeModes::single(a.clone()), &object, &scan, j, &spec).unwrap();
            let ib = simulate_intensity(&ProbeModes::single(b.clone()), &object, &scan, j, &spec).unwrap();
            for i in 0..sum.data.len() {
                worst = worst.max((sum.data[i] - ia.data[i] - ib.data[i]).abs());
            }
        }
    }
    let pass = worst < 1e-12;
    report(5, "multimode consistency", pass, &format!("max |I(M=2) - I1 - I2| = {worst:.1e}"));
    assert!(pass);
}

#[test]
fn criterion_6_sampler_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let mut unity: f64 = 0.0;
    for _ in 0..1000 {
        let (x, y) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        unity = unity.max((weight_sum(x, y, (9, 14)) - 1.0).abs());
    }

    let u = random(20, 24, &mut rng);
    let (k, top, left) = ((6, 8), 5usize, 9usize);
    let dx = left as f64 + (k.1 - 1) as f64 / 2.0 - 23.0 / 2.0;
    let dy = top as f64 + (k.0 - 1) as f64 / 2.0 - 19.0 / 2.0;
    let t = Complex64::new(2.0 * dx / 23.0, 2.0 * dy / 19.0);
    let grid = generate_grid(&AffineParams::crop(k, (20, 24), t), k).unwrap();
    let integer = sample(&u, &grid).max_abs_diff(&u.window(top, left, k.0, k.1).unwrap());

    let mut adjoint: f64 = 0.0;
    for _ in 0..SEEDS {
        let u = random(12, 15, &mut rng);
        let grid = ComplexTensor::from_fn(7, 6, |_, _| {
            Complex64::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2))
        });
        let w = random(7, 6, &mut rng);
        let lhs = sample(&u, &grid).dot(&w).unwrap();
        let rhs = u.dot(&scatter(&w, &grid, u.shape()).unwrap()).unwrap();
        adjoint = adjoint.max((lhs - rhs).norm());
    }

    let smooth = smooth_image(24, 24);
    let mut translation: f64 = 0.0;
    for _ in 0..SEEDS {
        let t = Complex64::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let check = finite_difference_check(
            |tape, v| Ok(crop(tape.constant(smooth.clone()), v[0], (8, 8))?.modulus_squared().sum()),
            &[ComplexTensor::scalar(t)],
            1e-6,
        )
        .unwrap();
        translation = translation.max(check.max_rel_error);
    }

    let pass = unity < 1e-12 && integer < 1e-12 && adjoint < 1e-12 && translation < 1e-5;
    report(
        6,
        "sampler suite",
        pass,
        &format!(
            "partition of unity {unity:.1e}, integer crop {integer:.1e}, adjoint {adjoint:.1e}, translation gradient rel error {translation:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_ambiguity_invariance() {
    let recipe = SimulationRecipe {
        pattern_size: 32,
        probe_diameter: 18.0,
        grid: 4,
        ..SimulationRecipe::desk_scale(3)
    };
    let (data, truth) = simulate_recipe(&recipe, None).unwrap();
    let cfg = ReconstructionConfig {
        batch_size: 4,
        probe_radius: Some(9.0),
        ..Default::default()
    };
    let problem = Problem::new(&data, &cfg).unwrap();
    // Corrupted geometry keeps the loss away from zero.
    let mut state = ReconstructionState::from_truth(&truth, &data, &cfg).unwrap();
    state.z0 = data.distance;
    state.positions = data.positions.clone();
    let base = problem.evaluate(&state).unwrap().total;
    let mut loss_diff: f64 = 0.0;
    for phi in [0.3, 1.7, -2.9] {
        let rot = Complex64::from_polar(1.0, phi);
        let mut turned = state.clone();
        turned.object = state.object.scale_complex(rot);
        turned.probes = ProbeModes::single(state.probes.modes()[0].scale_complex(rot.conj()));
        loss_diff = loss_diff.max((problem.evaluate(&turned).unwrap().total - base).abs());
    }

    // Constant phase and phase ramp on the truth.
    let o = &truth.object;
    let (rows, cols) = o.shape();
    let ramp = ComplexTensor::from_fn(rows, cols, |r, c| {
        Complex64::from_polar(1.0, 1.1 + 0.02 * c as f64 - 0.015 * r as f64)
    });
    let phased = o.zip_map(&ramp, |a, b| a * b).unwrap();
    let aligned = remove_ambiguities(&phased, o).unwrap();
    let ssim_mag = ssim(&aligned.modulus(), &o.modulus()).unwrap();
    let ssim_phase = ssim(&aligned.phase(), &o.phase()).unwrap();

    let pass = loss_diff < 1e-10 && (1.0 - ssim_mag) < 1e-9 && (1.0 - ssim_phase) < 1e-9;
    report(
        7,
        "ambiguity invariance",
        pass,
        &format!(
            "loss change under global phase {loss_diff:.1e} (loss {base:.3e}); SSIM after removing phase offset and ramp: magnitude {ssim_mag:.12}, phase {ssim_phase:.12}"
        ),
    );
    assert!(pass);
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ptychograd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run ptychograd");
    assert!(
        out.status.success(),
        "ptychograd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    files
}

fn pipeline(root: &Path, config: &Path) {
    let s = |p: PathBuf| p.to_str().unwrap().to_owned();
    let (sim, rec, eval) = (root.join("sim"), root.join("rec"), root.join("eval"));
    cli(&["simulate", "--recipe", &s(config.to_path_buf()), "--out", &s(sim.clone())]);
    cli(&[
        "reconstruct",
        "--data",
        &s(sim.join("dataset.ptyd")),
        "--config",
        &s(config.to_path_buf()),
        "--out",
        &s(rec.clone()),
        "--truth",
        &s(sim.join("truth.ptyt")),
    ]);
    cli(&["evaluate", "--recon", &s(rec), "--truth", &s(sim.join("truth.ptyt")), "--out", &s(eval)]);
}

#[test]
fn criterion_8_cli_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    let run = RunConfig {
        seed: Some(5),
        output: None,
        simulation: Some(SimulationRecipe {
            pattern_size: 32,
            probe_diameter: 18.0,
            grid: 3,
            ..SimulationRecipe::desk_scale(0)
        }),
        reconstruction: ReconstructionConfig {
            epochs: 4,
            batch_size: 3,
            probe_radius: Some(9.0),
            checkpoint_interval: 2,
            ..Default::default()
        },
    };
    fs::write(&config, run.to_toml().unwrap()).unwrap();
    // The resolved config records the output directory, so both runs use
    // the same paths.
    let (work, first) = (dir.path().join("work"), dir.path().join("first"));
    pipeline(&work, &config);
    fs::rename(&work, &first).unwrap();
    pipeline(&work, &config);
    let second = work;

    let expected = [
        "sim/dataset.ptyd",
        "sim/truth.ptyt",
        "sim/run.toml",
        "sim/truth_object_magnitude.png",
        "sim/truth_object_phase.png",
        "sim/truth_object.npy",
        "sim/truth_probe0_magnitude.png",
        "sim/truth_probe0_phase.png",
        "sim/truth_probe0.npy",
        "rec/run.toml",
        "rec/state.ptys",
        "rec/history.csv",
        "rec/positions.csv",
        "rec/checkpoints/epoch_00000/object_magnitude.png",
        "rec/checkpoints/epoch_00000/object.npy",
        "rec/checkpoints/epoch_00002/object_phase.png",
        "rec/checkpoints/epoch_00004/probe0_magnitude.png",
        "rec/checkpoints/epoch_00004/probe0.npy",
        "eval/summary.csv",
        "eval/position_errors.csv",
        "eval/position_histogram.csv",
        "eval/z_trajectory.csv",
        "eval/aligned_object_magnitude.png",
        "eval/aligned_object_phase.png",
        "eval/aligned_object.npy",
    ];
    let missing: Vec<&str> = expected.iter().copied().filter(|f| !first.join(f).is_file()).collect();

    let files = files_under(&first);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(first.join(f)).ok() != fs::read(second.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let same_listing = files == files_under(&second);

    let pass = missing.is_empty() && differing.is_empty() && same_listing;
    report(
        8,
        "CLI smoke",
        pass,
        &format!(
            "{} files per run; missing {:?}; differing between identical runs {:?}",
            files.len(),
            missing,
            differing
        ),
    );
    assert!(pass);
}
