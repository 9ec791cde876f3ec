//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any fails. Pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use harmonize_core::autodiff::{
    grad_check, grad_check_params, Activation, GradCheckOptions, Tape, Var,
};
use harmonize_core::data::{Batch, DeskDatasetConfig, Sample};
use harmonize_core::metrics::{
    aggregate, bucketize, fmse_metric, mse_metric, psnr, psnr_from_mse, FgRatioBucket,
    SampleRecord,
};
use harmonize_core::model::{build_model, ArchitectureConfig, HarmonizationModel};
use harmonize_core::objectives::{fn_mse, loss, mse_loss, LossKind};
use harmonize_core::train::{
    baseline_report, evaluate, AdamConfig, AdamState, Checkpoint, LrSchedule, TrainConfig,
    Trainer,
};
use harmonize_core::{Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Verdict plus the measured values behind it.
type Outcome = (bool, String);

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn away_from_zero(shape: Shape, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn binary_mask(shape: Shape, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

fn project(tape: &mut Tape, out: Var, probe: &Tensor) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

fn randomize(model: &mut HarmonizationModel, scale: f64, rng: &mut ChaCha8Rng) {
    for p in model.params_mut().iter_mut() {
        let s = p.tensor.shape();
        p.tensor = Tensor::from_fn(s, |_| rng.gen_range(-scale..scale));
    }
}

fn set_head_mask(model: &mut HarmonizationModel, weight: f64, bias: f64) {
    let d_m = model.blend_head().d_m.expect("blend head on");
    let store = model.params_mut();
    let w = &mut store.get_mut(d_m.weight).tensor;
    *w = Tensor::full(w.shape(), weight);
    let b = &mut store.get_mut(d_m.bias).tensor;
    *b = Tensor::full(b.shape(), bias);
}

fn desk(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let gen = DeskDatasetConfig { n, size, seed };
    (0..n).map(|i| gen.sample(i).unwrap().0).collect()
}

fn fn_mse_value(pred: &Tensor, target: &Tensor, mask: &Tensor, a_min: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.input(pred.clone());
    let l = fn_mse(&mut tape, p, target, mask, a_min).unwrap();
    tape.value(l).item().unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradients() -> Outcome {
    let opts = GradCheckOptions::default();
    let mut worst_op = ("", 0.0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let x = away_from_zero(Shape::new(1, 4, 8, 8), 1e-3, &mut rng);
        let y = random(Shape::new(1, 4, 8, 8), &mut rng);
        let m = random(Shape::new(1, 1, 8, 8), &mut rng);
        let w = random(Shape::new(3, 4, 3, 3), &mut rng);
        let b = random(Shape::new(1, 1, 1, 3), &mut rng);
        // kept away from y so no residual, and hence no gradient, is near zero
        let offset = away_from_zero(Shape::new(1, 4, 8, 8), 0.1, &mut rng);
        let target = Tensor::from_fn(y.shape(), |[n, c, h, w]| y.at(n, c, h, w) + offset.at(n, c, h, w));
        let fg = binary_mask(Shape::new(1, 1, 8, 8), 0.4, &mut rng);
        let p8 = away_from_zero(Shape::new(1, 4, 8, 8), 0.1, &mut rng);
        let p_conv = away_from_zero(Shape::new(1, 3, 4, 4), 0.1, &mut rng);
        let p_up = away_from_zero(Shape::new(1, 4, 16, 16), 0.1, &mut rng);
        let p_pool = away_from_zero(Shape::new(1, 4, 4, 4), 0.1, &mut rng);
        let p_cat = away_from_zero(Shape::new(1, 5, 8, 8), 0.1, &mut rng);
        let p_resize = away_from_zero(Shape::new(1, 4, 5, 11), 0.1, &mut rng);

        type Case<'a> = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>, Vec<Tensor>);
        let cases: Vec<Case> = vec![
            (
                "conv2d",
                Box::new(|t, v| {
                    let o = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                    project(t, o, &p_conv)
                }),
                vec![y.clone(), w.clone(), b.clone()],
            ),
            (
                "upsample_nearest",
                Box::new(|t, v| {
                    let o = t.upsample_nearest(v[0], 2)?;
                    project(t, o, &p_up)
                }),
                vec![y.clone()],
            ),
            (
                "resize_nearest",
                Box::new(|t, v| {
                    let o = t.resize_nearest(v[0], 5, 11)?;
                    project(t, o, &p_resize)
                }),
                vec![y.clone()],
            ),
            (
                "max_pool2d",
                Box::new(|t, v| {
                    let o = t.max_pool2d(v[0], 2, 2)?;
                    project(t, o, &p_pool)
                }),
                vec![y.clone()],
            ),
            (
                "relu",
                Box::new(|t, v| {
                    let o = t.activation(v[0], Activation::Relu)?;
                    project(t, o, &p8)
                }),
                vec![x.clone()],
            ),
            (
                "leaky_relu",
                Box::new(|t, v| {
                    let o = t.activation(v[0], Activation::LeakyRelu { alpha: 0.2 })?;
                    project(t, o, &p8)
                }),
                vec![x.clone()],
            ),
            (
                "sigmoid",
                Box::new(|t, v| {
                    let o = t.activation(v[0], Activation::Sigmoid)?;
                    project(t, o, &p8)
                }),
                vec![y.clone()],
            ),
            (
                "concat_channels",
                Box::new(|t, v| {
                    let o = t.concat_channels(v[0], v[1])?;
                    project(t, o, &p_cat)
                }),
                vec![y.clone(), m.clone()],
            ),
            (
                "add",
                Box::new(|t, v| {
                    let o = t.add(v[0], v[1])?;
                    project(t, o, &p8)
                }),
                vec![y.clone(), m.clone()],
            ),
            (
                "mul",
                Box::new(|t, v| {
                    let o = t.mul(v[0], v[1])?;
                    project(t, o, &p8)
                }),
                vec![y.clone(), m.clone()],
            ),
            (
                "scalar_affine",
                Box::new(|t, v| {
                    let o = t.scalar_affine(v[0], -1.5, 0.25);
                    project(t, o, &p8)
                }),
                vec![y.clone()],
            ),
            (
                "fn_mse",
                Box::new(|t, v| fn_mse(t, v[0], &target, &fg, 10.0)),
                vec![y.clone()],
            ),
            (
                "mse_loss",
                Box::new(|t, v| mse_loss(t, v[0], &target)),
                vec![y.clone()],
            ),
        ];
        for (name, f, inputs) in cases {
            let err = grad_check(|t, v| f(t, v), &inputs, opts)
                .unwrap()
                .max_relative_error;
            if err >= worst_op.1 {
                worst_op = (name, err);
            }
        }
    }

    // A probe of 1e-5 can straddle a leaky-ReLU or max-pool switch of the randomized
    // network; such a seed is re-checked at 1e-6 and both numbers are reported.
    let cfg = ArchitectureConfig {
        input_size: 8,
        base_width: 2,
        depth: 2,
        ..Default::default()
    };
    let mut e2e_worst = 0.0f64;
    let mut coords = 0;
    let mut kinks = Vec::new();
    for seed in 71..76u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = build_model(&cfg, seed).unwrap();
        randomize(&mut model, 0.8, &mut rng);
        let image = random(Shape::new(2, 3, 8, 8), &mut rng);
        let mask = binary_mask(Shape::new(2, 1, 8, 8), 0.3, &mut rng);
        let target = random(image.shape(), &mut rng);
        let template = model.clone();
        let check = |step: f64| {
            grad_check_params(
                model.params(),
                |tape, store| {
                    let mut m = template.clone();
                    *m.params_mut() = store.clone();
                    let out = m.forward(tape, &image, &mask)?;
                    fn_mse(tape, out.prediction, &target, &mask, 10.0)
                },
                GradCheckOptions { step, ..opts },
            )
            .unwrap()
        };
        let report = check(opts.step);
        coords += report.coords_checked;
        let mut err = report.max_relative_error;
        if err >= 1e-4 {
            let fine = check(opts.step / 10.0).max_relative_error;
            kinks.push(format!("seed {seed}: {err:.1e} at h=1e-5, {fine:.1e} at h=1e-6"));
            err = fine;
        }
        e2e_worst = e2e_worst.max(err);
    }
    (
        worst_op.1 < 1e-6 && e2e_worst < 1e-4,
        format!(
            "worst per-op {:.2e} ({}), end-to-end {:.2e} over {coords} coords in 5 models{}",
            worst_op.1,
            worst_op.0,
            e2e_worst,
            if kinks.is_empty() {
                String::new()
            } else {
                format!(" (kink re-check: {})", kinks.join("; "))
            }
        ),
    )
}

fn blend_identities() -> Outcome {
    let cfg = ArchitectureConfig {
        input_size: 16,
        base_width: 4,
        depth: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = random(Shape::new(2, 3, 16, 16), &mut rng);
    let mask = binary_mask(Shape::new(2, 1, 16, 16), 0.3, &mut rng);

    let mut model = build_model(&cfg, 2).unwrap();
    randomize(&mut model, 0.5, &mut rng);
    set_head_mask(&mut model, 0.0, -20.0);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &image, &mask).unwrap();
    let closed = tape.value(out.prediction).max_abs_diff(&image);
    set_head_mask(&mut model, 0.0, 20.0);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &image, &mask).unwrap();
    let open = tape
        .value(out.prediction)
        .max_abs_diff(tape.value(out.rgb));

    let mut identity = 0.0f64;
    for seed in 0..10 {
        let mut model = build_model(&cfg, seed).unwrap();
        randomize(&mut model, 0.5, &mut rng);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &image, &mask).unwrap();
        let (pred, att, rgb) = (
            tape.value(out.prediction),
            tape.value(out.attention),
            tape.value(out.rgb),
        );
        let s = image.shape();
        for b in 0..s.batch {
            for c in 0..3 {
                for y in 0..s.height {
                    for x in 0..s.width {
                        let i = image.at(b, c, y, x);
                        let lhs = pred.at(b, c, y, x) - i;
                        let rhs = att.at(b, 0, y, x) * (rgb.at(b, c, y, x) - i);
                        identity = identity.max((lhs - rhs).abs());
                    }
                }
            }
        }
    }
    (
        closed < 1e-6 && open < 1e-6 && identity < 1e-10,
        format!("M_A~0 {closed:.1e}, M_A~1 {open:.1e}, identity {identity:.1e}"),
    )
}

fn fn_mse_oracle(pred: &Tensor, target: &Tensor, mask: &Tensor, a_min: f64) -> f64 {
    let s = pred.shape();
    let mut total = 0.0;
    for b in 0..s.batch {
        let (mut num, mut area) = (0.0, 0.0);
        for y in 0..s.height {
            for x in 0..s.width {
                area += mask.at(b, 0, y, x);
                for c in 0..s.channels {
                    let d = pred.at(b, c, y, x) - target.at(b, c, y, x);
                    num += d * d;
                }
            }
        }
        total += num / f64::max(a_min, area);
    }
    total / s.batch as f64
}

fn fn_mse_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut clamped = 0;
    for i in 0..50 {
        let size = if i % 2 == 0 {
            rng.gen_range(3..10)
        } else {
            rng.gen_range(12..24)
        };
        let shape = Shape::new(rng.gen_range(1..=3), 3, size, size);
        let pred = random(shape, &mut rng);
        let target = random(shape, &mut rng);
        let mask = binary_mask(shape.with_channels(1), rng.gen_range(0.05..0.95), &mut rng);
        let plane = size * size;
        clamped += (0..shape.batch)
            .filter(|b| mask.data()[b * plane..(b + 1) * plane].iter().sum::<f64>() < 100.0)
            .count();
        let got = fn_mse_value(&pred, &target, &mask, 100.0);
        worst = worst.max((got - fn_mse_oracle(&pred, &target, &mask, 100.0)).abs());
    }

    // a 12x12 object with area >= 100, padded with matching background
    let mut padding_ok = true;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let inner = Shape::new(1, 3, 12, 12);
        let pred = random(inner, &mut rng);
        let target = random(inner, &mut rng);
        let mask = binary_mask(inner.with_channels(1), 0.85, &mut rng);
        if mask.data().iter().sum::<f64>() < 100.0 {
            continue;
        }
        let pad = rng.gen_range(1..8);
        let outer = Shape::new(1, 3, 12 + 2 * pad, 12 + 2 * pad);
        let fill = rng.gen_range(-1.0..1.0);
        let embed = |t: &Tensor, bg: f64| {
            let c = t.shape().channels;
            Tensor::from_fn(outer.with_channels(c), |[b, ch, y, x]| {
                if (pad..pad + 12).contains(&y) && (pad..pad + 12).contains(&x) {
                    t.at(b, ch, y - pad, x - pad)
                } else {
                    bg
                }
            })
        };
        let small = fn_mse_value(&pred, &target, &mask, 100.0);
        let big = fn_mse_value(&embed(&pred, fill), &embed(&target, fill), &embed(&mask, 0.0), 100.0);
        padding_ok &= small == big;
    }
    (
        worst < 1e-10 && clamped > 0 && padding_ok,
        format!(
            "max |diff| {worst:.1e}, {clamped} clamped items, padding invariance {}",
            if padding_ok { "exact" } else { "broken" }
        ),
    )
}

fn stem_output(model: &HarmonizationModel, image: &Tensor, mask: &Tensor) -> Tensor {
    let stem = model.backbone_stem().unwrap();
    let mut tape = Tape::new();
    let i = tape.constant(image.clone());
    let m = tape.constant(mask.clone());
    let out = stem.forward(&mut tape, model.params(), i, m).unwrap();
    tape.value(out).clone()
}

fn fusion() -> Outcome {
    let cfg = ArchitectureConfig {
        input_size: 32,
        base_width: 8,
        depth: 3,
        ..Default::default()
    };
    let model = build_model(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = random(Shape::new(2, 3, 32, 32), &mut rng);
    let masks = [
        binary_mask(Shape::new(2, 1, 32, 32), 0.3, &mut rng),
        Tensor::zeros(Shape::new(2, 1, 32, 32)),
        Tensor::ones(Shape::new(2, 1, 32, 32)),
    ];
    let base = stem_output(&model, &image, &masks[0]);
    let invariant = masks[1..]
        .iter()
        .all(|m| stem_output(&model, &image, m).data() == base.data());

    let mut config = TrainConfig {
        architecture: cfg,
        schedule: LrSchedule::constant(1e-3, 1),
        batch_size: 2,
        holdout_fraction: 0.0,
        eval_every: 0,
        seed: 4,
        ..Default::default()
    };
    config.augmentation.target_size = 32;
    let samples = desk(20, 32, 4);
    let mut trainer = Trainer::new(config.clone(), samples.clone()).unwrap();
    let record = trainer.train_epoch().unwrap();
    let mut model = trainer.into_model();
    let mc = model.backbone_stem().unwrap().mask_conv.unwrap();
    let weight_norm = model.params().get(mc.weight).tensor.data().iter().map(|v| v.abs()).sum::<f64>();

    let batch = Batch::from_samples(&samples[..4], &config.augmentation.normalization).unwrap();
    model.params_mut().zero_grad();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.input, &batch.mask).unwrap();
    let l = loss(&mut tape, &config.loss, out.prediction, &batch.target, &batch.mask).unwrap();
    tape.backward(l, model.params_mut()).unwrap();
    let grad_norm = model.params().get(mc.weight).gradient.data().iter().map(|v| v.abs()).sum::<f64>();
    let mask_matters = stem_output(&model, &image, &masks[1]).data() != stem_output(&model, &image, &masks[2]).data();
    (
        invariant && record.steps == 10 && grad_norm > 0.0 && weight_norm > 0.0 && mask_matters,
        format!(
            "zero branch mask-invariant: {invariant}; after {} steps |grad| {grad_norm:.3e}, |w| {weight_norm:.3e}",
            record.steps
        ),
    )
}

fn overfit() -> Outcome {
    let samples = desk(8, 64, 5);
    let mut config = TrainConfig {
        schedule: LrSchedule::constant(1e-3, 150),
        batch_size: 4,
        holdout_fraction: 0.0,
        eval_every: 0,
        seed: 5,
        ..Default::default()
    };
    config.augmentation.hflip = false;
    config.augmentation.rrc = false;
    let mut trainer = Trainer::new(config.clone(), samples.clone()).unwrap();
    let initial = trainer.dataset_loss(&samples).unwrap();
    let mut steps = 0;
    while !trainer.is_finished() {
        steps += trainer.train_epoch().unwrap().steps;
    }
    let last = trainer.dataset_loss(&samples).unwrap();
    let norm = config.augmentation.normalization;
    let harmonized = evaluate(trainer.model(), &samples, &norm, None).unwrap().overall.mean_psnr;
    let composite = baseline_report(&samples, 64).unwrap().overall.mean_psnr;
    let ratio = last / initial;
    let gain = harmonized - composite;
    (
        steps == 300 && ratio <= 0.10 && gain >= 3.0,
        format!(
            "{steps} steps, FN-MSE {initial:.3} -> {last:.4} ({:.1}%), PSNR {composite:.2} -> {harmonized:.2} dB ({gain:+.2})",
            100.0 * ratio
        ),
    )
}

/// One training run of the generalization experiment; returns the held-out PSNR gain
/// and the mean fMSE of the held-out 0-5% bucket.
fn generalization_run(samples: &[Sample], kind: LossKind, seed: u64) -> (f64, f64) {
    const EPOCHS: usize = 60;
    let mut config = TrainConfig {
        architecture: ArchitectureConfig {
            input_size: 32,
            base_width: 8,
            depth: 3,
            ..Default::default()
        },
        schedule: LrSchedule::scaled(EPOCHS),
        batch_size: 4,
        holdout_fraction: 0.2,
        eval_every: 0,
        seed,
        ..Default::default()
    };
    config.augmentation.target_size = 32;
    config.loss.kind = kind;
    let mut trainer = Trainer::new(config.clone(), samples.to_vec()).unwrap();
    while !trainer.is_finished() {
        trainer.train_epoch().unwrap();
    }
    let held = trainer.eval_samples();
    let norm = config.augmentation.normalization;
    let report = evaluate(trainer.model(), held, &norm, None).unwrap();
    let base = baseline_report(held, 32).unwrap();
    let small = report.bucket(FgRatioBucket::Small).mean_fmse.unwrap();
    (report.overall.mean_psnr - base.overall.mean_psnr, small)
}

fn generalization() -> Outcome {
    let samples = desk(200, 64, 6);
    let mut gains = Vec::new();
    let (mut fn_small, mut mse_small) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let (gain, small) = generalization_run(&samples, LossKind::FnMse, seed);
        gains.push(gain);
        fn_small.push(small);
        let (_, small) = generalization_run(&samples, LossKind::Mse, seed);
        mse_small.push(small);
    }
    let min_gain = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    let (fn_med, mse_med) = (median(fn_small), median(mse_small));
    (
        min_gain > 0.0 && fn_med <= mse_med,
        format!(
            "held-out gain min {min_gain:+.2} dB (median {:+.2}); 0-5% fMSE median FN-MSE {fn_med:.1} vs MSE {mse_med:.1}",
            median(gains.clone())
        ),
    )
}

fn metrics_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let size = rng.gen_range(2..12);
        let shape = Shape::new(1, 3, size, size);
        let pred = Tensor::from_fn(shape, |_| rng.gen_range(0.0..255.0));
        let real = Tensor::from_fn(shape, |_| rng.gen_range(0.0..255.0));
        let mask = binary_mask(shape.with_channels(1), 0.4, &mut rng);
        let (mut sq, mut fsq, mut fcount) = (0.0, 0.0, 0usize);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let d = pred.at(0, c, y, x) - real.at(0, c, y, x);
                    sq += d * d;
                    if mask.at(0, 0, y, x) > 0.5 {
                        fsq += d * d;
                        fcount += 1;
                    }
                }
            }
        }
        let mse = sq / (3 * size * size) as f64;
        let fmse = if fcount == 0 { 0.0 } else { fsq / fcount as f64 };
        let ps = 10.0 * (255.0f64 * 255.0 / mse).log10();
        worst = worst
            .max((mse_metric(&pred, &real).unwrap() - mse).abs())
            .max((fmse_metric(&pred, &real, &mask).unwrap().value - fmse).abs())
            .max((psnr(&pred, &real, 255.0).unwrap() - ps).abs());
    }

    let mut partition = true;
    for i in 0..=10_000 {
        let r = i as f64 / 10_000.0;
        let hits = FgRatioBucket::ALL
            .iter()
            .filter(|b| {
                let (lo, hi) = b.bounds();
                r >= lo && (r < hi || (hi == 1.0 && r == 1.0))
            })
            .count();
        let (lo, hi) = bucketize(r).unwrap().bounds();
        partition &= hits == 1 && r >= lo && r <= hi;
    }
    let p1 = psnr_from_mse(1.0, 255.0);

    let records: Vec<SampleRecord> = [0.01, 0.1, 0.5]
        .iter()
        .enumerate()
        .map(|(i, &r)| SampleRecord {
            sample_id: i.to_string(),
            mse: 1.0,
            fmse: 1.0,
            psnr: 48.0,
            fg_ratio: r,
        })
        .collect();
    let report = aggregate(records).unwrap();
    let header = report.to_text_table();
    let header = header.lines().find(|l| l.contains("Foreground ratios")).unwrap_or("");
    let labels: Vec<&str> = report.buckets.iter().map(|b| b.label.as_str()).collect();
    let layout = labels == ["0%~5%", "5%~15%", "15%~100%"]
        && ["0%~5%", "5%~15%", "15%~100%", "0%~100%"]
            .iter()
            .all(|c| header.contains(c));
    (
        worst < 1e-9 && partition && (p1 - 48.1308).abs() <= 1e-3 && layout,
        format!(
            "loop oracles {worst:.1e}, partition {partition}, psnr(1) = {p1:.4} dB, layout {}",
            if layout { "ok" } else { "wrong" }
        ),
    )
}

fn training_plumbing() -> Outcome {
    use harmonize_core::autodiff::ParamStore;

    // Adam against the textbook scalar recurrence on f(x) = (x - 1)^2 + sin(3x)
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::full(Shape::new(1, 1, 1, 1), 0.5), 1.0).unwrap();
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    let mut adam_err = 0.0f64;
    for t in 1..=100 {
        let xs = store.get(id).tensor.data()[0];
        store.get_mut(id).gradient = Tensor::full(Shape::new(1, 1, 1, 1), 2.0 * (xs - 1.0) + 3.0 * (3.0 * xs).cos());
        adam.step(&mut store, 1e-2).unwrap();
        let g = 2.0 * (x - 1.0) + 3.0 * (3.0 * x).cos();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powf(t as f64));
        let v_hat = v / (1.0 - 0.999f64.powf(t as f64));
        x -= 1e-2 * m_hat / (v_hat.sqrt() + 1e-8);
        adam_err = adam_err.max((store.get(id).tensor.data()[0] - x).abs());
    }

    let sched = LrSchedule::scaled(180);
    let lr = |e| sched.lr_at(e).unwrap();
    let lr_ok = [(0, 1e-3), (159, 1e-3), (160, 1e-4), (174, 1e-4), (175, 1e-5), (179, 1e-5)]
        .iter()
        .all(|&(e, want)| ((lr(e) - want) / want).abs() < 1e-12);

    // backbone vs head step on the real model: twin copies of each backbone
    // parameter with multiplier 1, same gradient, zeroed values
    let mut model = build_model(&ArchitectureConfig::default(), 8).unwrap();
    model.set_backbone_lr_multiplier(0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut twin = ParamStore::new();
    let mut pairs = Vec::new();
    for p in model.params().iter().filter(|p| p.lr_multiplier == 0.1) {
        let shape = p.tensor.shape();
        let bb = twin.add(&format!("bb.{}", p.name), Tensor::zeros(shape), 0.1).unwrap();
        let head = twin.add(&format!("head.{}", p.name), Tensor::zeros(shape), 1.0).unwrap();
        for id in [bb, head] {
            twin.get_mut(id).fan_in = p.fan_in;
        }
        pairs.push((bb, head));
    }
    let mut adam = AdamState::new(&twin, AdamConfig::default());
    let mut ratio_exact = !pairs.is_empty();
    for _ in 0..3 {
        for &(bb, head) in &pairs {
            let g = random(twin.get(bb).tensor.shape(), &mut rng);
            twin.get_mut(bb).gradient = g.clone();
            twin.get_mut(head).gradient = g;
        }
        for p in twin.iter_mut() {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        adam.step(&mut twin, 1e-3).unwrap();
        for &(bb, head) in &pairs {
            let (a, b) = (&twin.get(bb).tensor, &twin.get(head).tensor);
            ratio_exact &= a.data().iter().zip(b.data()).all(|(&a, &b)| a == b * 0.1 && b != 0.0);
        }
    }

    // resume equivalence
    let mut config = TrainConfig {
        architecture: ArchitectureConfig {
            input_size: 16,
            base_width: 4,
            depth: 2,
            ..Default::default()
        },
        schedule: LrSchedule::scaled(3),
        batch_size: 2,
        seed: 8,
        holdout_fraction: 0.25,
        ..Default::default()
    };
    config.augmentation.target_size = 16;
    let samples = desk(8, 24, 8);
    let mut straight = Trainer::new(config.clone(), samples.clone()).unwrap();
    while !straight.is_finished() {
        straight.train_epoch().unwrap();
    }
    let mut first = Trainer::new(config, samples.clone()).unwrap();
    first.train_epoch().unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), samples).unwrap();
    while !resumed.is_finished() {
        resumed.train_epoch().unwrap();
    }
    let resume_ok = resumed.checkpoint().to_bytes().unwrap() == straight.checkpoint().to_bytes().unwrap();
    (
        adam_err < 1e-12 && lr_ok && ratio_exact && resume_ok,
        format!(
            "Adam max diff {adam_err:.1e}, lr_at {}, backbone/head step ratio exactly 0.1 on {} tensors: {ratio_exact}, resume bit-exact: {resume_ok}",
            if lr_ok { "ok" } else { "wrong" },
            pairs.len()
        ),
    )
}

fn harmonize(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_harmonize"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn files_under(dir: &Path, skip: &str) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != skip {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut ok = true;
    let mut notes = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        let data = s(&dir.join("data"));
        let out = s(&dir.join("train"));
        let report = s(&dir.join("eval"));
        let composite = s(&dir.join("data/composite_images/desk0001_1_1.png"));
        let mask = s(&dir.join("data/masks/desk0001_1.png"));
        let result = s(&dir.join("harmonized.png"));
        let ckpt = s(&dir.join("train/final.ihckpt"));
        let cmds: [Vec<&str>; 4] = [
            vec!["synth", "--n", "8", "--size", "24", "--seed", "9", "--out", &data],
            vec![
                "train", "--data", &data, "--out", &out, "--epochs", "3", "--size", "16",
                "--width", "4", "--depth", "2", "--batch-size", "2", "--seed", "9", "-q",
            ],
            vec!["eval", "--checkpoint", &ckpt, "--data", &data, "--out", &report],
            vec![
                "harmonize", "--checkpoint", &ckpt, "--composite", &composite, "--mask", &mask,
                "--out", &result,
            ],
        ];
        for cmd in &cmds {
            let o = harmonize(cmd);
            if !o.status.success() {
                ok = false;
                notes.push(format!("`{}` failed: {}", cmd[0], String::from_utf8_lossy(&o.stderr).trim()));
            }
        }
    }
    if !ok {
        return (false, notes.join("; "));
    }
    let (a, b) = (root.join("a"), root.join("b"));
    let data_a = files_under(&a.join("data"), "run_manifest.json");
    let same_data = data_a == files_under(&b.join("data"), "run_manifest.json");
    let history = |d: &Path| std::fs::read(d.join("train/history.jsonl")).unwrap();
    let same_history = history(&a) == history(&b) && !history(&a).is_empty();
    let same_ckpt = std::fs::read(a.join("train/final.ihckpt")).unwrap()
        == std::fs::read(b.join("train/final.ihckpt")).unwrap();
    // report.json names the checkpoint path, which differs by directory
    let report = |d: &Path| {
        let text = std::fs::read_to_string(d.join("eval/report.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("checkpoint");
        (v, std::fs::read(d.join("eval/report.txt")).unwrap())
    };
    let same_report = report(&a) == report(&b);
    let same_image = std::fs::read(a.join("harmonized.png")).unwrap()
        == std::fs::read(b.join("harmonized.png")).unwrap();
    (
        same_data && same_history && same_ckpt && same_report && same_image,
        format!(
            "dataset ({} files) {same_data}, history {same_history}, checkpoint {same_ckpt}, report {same_report}, harmonized png {same_image}",
            data_a.len()
        ),
    )
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", gradients),
        (2, "blend identities", blend_identities),
        (3, "fn_mse oracle equivalence", fn_mse_equivalence),
        (4, "mask fusion", fusion),
        (5, "overfit", overfit),
        (6, "generalization", generalization),
        (7, "metrics protocol", metrics_protocol),
        (8, "training plumbing", training_plumbing),
        (9, "determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let limits = [(1, 60.0), (5, 300.0), (6, 1800.0)];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        if let Some(&(_, limit)) = limits.iter().find(|(k, _)| *k == n) {
            if secs >= limit {
                pass = false;
                detail.push_str(&format!("; over the {limit:.0} s budget"));
            }
        }
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n} {:4} {name}: {detail} [{secs:.1} s]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
