#![allow(dead_code)]

use desk_iba::rng::SplitMix64;
use desk_iba::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(lo, hi)).collect(),
    )
    .unwrap()
}

/// Operation under test: records its output from the given input leaves.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> desk_iba::Result<Var> + 'a;

/// `sum(w ⊙ op(inputs))` with fixed random weights `w`, and the gradient
/// with respect to every input.
fn weighted_loss(
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    build: &Build,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    (tape.value(loss).item(), grads)
}

fn output_shape(inputs: &[Tensor<f64>], build: &Build) -> Vec<usize> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).shape().to_vec()
}

/// Worst relative error over `points` random probes. Each probe draws fresh
/// inputs with `draw` and compares one random input coordinate against a
/// central difference.
pub fn check_op(
    points: usize,
    seed: u64,
    draw: &dyn Fn(&mut SplitMix64) -> Vec<Tensor<f64>>,
    build: &Build,
) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let inputs = draw(&mut rng);
        let shape = output_shape(&inputs, build);
        let weights = random_tensor(&shape, &mut rng, -1.0, 1.0);
        let (_, grads) = weighted_loss(&inputs, &weights, build);
        let which = rng.below(inputs.len() as u64) as usize;
        let k = rng.below(inputs[which].len() as u64) as usize;
        let eval = |delta: f64| {
            let mut moved = inputs.to_vec();
            moved[which].data_mut()[k] += delta;
            weighted_loss(&moved, &weights, build).0
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads[which][k], numeric));
    }
    worst
}

/// Uniform values kept at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], rng: &mut SplitMix64, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform(gap, 2.0);
            if rng.below(2) == 0 {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error of every tape operation over `points` probes each.
pub fn op_gradient_report(points: usize) -> Vec<(&'static str, f64)> {
    let r = |shape: &'static [usize]| {
        move |g: &mut SplitMix64| vec![random_tensor(shape, g, -2.0, 2.0)]
    };
    let r2 = |shape: &'static [usize]| {
        move |g: &mut SplitMix64| {
            vec![
                random_tensor(shape, g, -2.0, 2.0),
                random_tensor(shape, g, -2.0, 2.0),
            ]
        }
    };
    let kernel = desk_iba::tensor::gaussian_kernel::<f64>(1.0);
    let mut out = Vec::new();
    let mut run =
        |name: &'static str, draw: &dyn Fn(&mut SplitMix64) -> Vec<Tensor<f64>>, build: &Build| {
            out.push((
                name,
                check_op(points, name.len() as u64 * 7919, draw, build),
            ));
        };
    run(
        "conv2d",
        &|g| {
            vec![
                random_tensor(&[2, 5, 5], g, -1.0, 1.0),
                random_tensor(&[3, 2, 3, 3], g, -1.0, 1.0),
                random_tensor(&[3], g, -1.0, 1.0),
            ]
        },
        &|t, v| t.conv2d(v[0], v[1], v[2]),
    );
    run(
        "relu",
        &|g| vec![away_from_zero(&[2, 4, 4], g, 1e-3)],
        &|t, v| t.relu(v[0]),
    );
    run("maxpool2d", &r(&[2, 4, 6]), &|t, v| t.maxpool2d(v[0]));
    run("global_avg_pool", &r(&[3, 4, 4]), &|t, v| {
        t.global_avg_pool(v[0])
    });
    run(
        "dense",
        &|g| {
            vec![
                random_tensor(&[5], g, -1.0, 1.0),
                random_tensor(&[3, 5], g, -1.0, 1.0),
                random_tensor(&[3], g, -1.0, 1.0),
            ]
        },
        &|t, v| t.dense(v[0], v[1], v[2]),
    );
    run("softmax_cross_entropy", &r(&[3]), &|t, v| {
        t.softmax_cross_entropy(v[0], 1)
    });
    run("softmax", &r(&[4]), &|t, v| t.softmax(v[0]));
    run("select", &r(&[5]), &|t, v| t.select(v[0], 2));
    run("add", &r2(&[2, 3]), &|t, v| t.add(v[0], v[1]));
    run("sub", &r2(&[2, 3]), &|t, v| t.sub(v[0], v[1]));
    run("mul", &r2(&[2, 3]), &|t, v| t.mul(v[0], v[1]));
    run("scale", &r(&[6]), &|t, v| t.scale(v[0], -1.7));
    run("add_scalar", &r(&[6]), &|t, v| t.add_scalar(v[0], 0.4));
    run("rsub_scalar", &r(&[6]), &|t, v| t.rsub_scalar(1.0, v[0]));
    run(
        "ln",
        &|g| vec![random_tensor(&[6], g, 0.1, 3.0)],
        &|t, v| t.ln(v[0]),
    );
    run("sigmoid", &r(&[6]), &|t, v| t.sigmoid(v[0]));
    run(
        "clamp_max",
        &|g| vec![away_from_zero(&[8], g, 1e-3)],
        &|t, v| t.clamp_max(v[0], 0.0),
    );
    run("sum", &r(&[2, 3]), &|t, v| t.sum(v[0]));
    run("mean", &r(&[2, 3]), &|t, v| t.mean(v[0]));
    run("smooth2d", &r(&[2, 5, 6]), &|t, v| {
        t.smooth2d(v[0], kernel.clone())
    });
    out
}

use desk_iba::classifier::{
    build_model, estimate_stats, image_tensor, loss_and_grads, Arch, Model, SIGMA_FLOOR,
};
use desk_iba::iba::{iba_objective_with_noise, BottleneckConfig, MaskState};
use desk_iba::synth::{generate_sample, Severity};

pub fn f64_fixture(arch: Arch) -> (Model<f64>, Vec<Tensor<f64>>) {
    let model = build_model(arch, 1).cast::<f64>();
    let mut rng = SplitMix64::new(21);
    let images = Severity::ALL
        .iter()
        .map(|&s| image_tensor(&generate_sample(&mut rng, s, "fd").unwrap()))
        .collect();
    (model, images)
}

/// Worst relative error of the bottleneck objective's alpha-gradient at
/// random coordinates, with the noise draws held fixed.
pub fn objective_gradient_worst(points: usize) -> f64 {
    let (model, images) = f64_fixture(Arch::A);
    let stats = estimate_stats(&model, &images, SIGMA_FLOOR).unwrap();
    let features = model.forward_capture(&images[3]).unwrap();
    let p = model.forward_tail(&features).unwrap();
    let target = usize::from(p[1] > p[0]);
    let config = BottleneckConfig {
        samples: 2,
        ..Default::default()
    };
    let mut rng = SplitMix64::new(5);
    let mut state = MaskState::<f64>::new(features.shape(), &config);
    state.alpha = random_tensor(features.shape(), &mut rng, -3.0, 3.0);
    let eps: Vec<Tensor<f64>> = (0..config.samples)
        .map(|_| {
            let n = features.len();
            Tensor::new(
                features.shape().to_vec(),
                (0..n).map(|_| rng.standard_normal()).collect(),
            )
            .unwrap()
        })
        .collect();
    let base =
        iba_objective_with_noise(&model, &features, &state, &stats, target, &config, &eps).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let k = rng.below(features.len() as u64) as usize;
        let eval = |d: f64| {
            let mut s = state.clone();
            s.alpha.data_mut()[k] += d;
            iba_objective_with_noise(&model, &features, &s, &stats, target, &config, &eps)
                .unwrap()
                .loss
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(base.grad[k], numeric));
    }
    worst
}

/// Worst relative error of the classifier loss gradient at random parameters.
pub fn model_gradient_worst(points: usize) -> f64 {
    let (model, images) = f64_fixture(Arch::A);
    let (_, grads) = loss_and_grads(&model, &images[2], 1).unwrap();
    let mut rng = SplitMix64::new(8);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let i = rng.below(model.params.len() as u64) as usize;
        let k = rng.below(model.params[i].len() as u64) as usize;
        let eval = |d: f64| {
            let mut m = model.clone();
            m.params[i].data_mut()[k] += d;
            loss_and_grads(&m, &images[2], 1).unwrap().0
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads[i][k], numeric));
    }
    worst
}

/// Monte-Carlo estimate of `KL(N(m·z, (1−m)²) ‖ N(0, 1))` from `n` draws of the
/// posterior, using the log-density ratio directly.
pub fn mc_kl(m: f64, z: f64, n: usize, rng: &mut SplitMix64) -> f64 {
    let s = 1.0 - m;
    let mut acc = 0.0;
    for _ in 0..n {
        let e = rng.standard_normal();
        let u = m * z + s * e;
        acc += -s.ln() - 0.5 * e * e + 0.5 * u * u;
    }
    acc / n as f64
}

/// Worst absolute gap between the closed form and the Monte-Carlo oracle over
/// `points` random `(m, z)` with `m ≤ 0.99`.
pub fn kl_oracle_worst(points: usize, draws: usize, seed: u64) -> f64 {
    use desk_iba::iba::capacity_kl;
    let mut rng = SplitMix64::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let m = rng.uniform(0.0, 0.99);
        let z = rng.uniform(-3.0, 3.0);
        // Arbitrary location and scale: the closed form sees x, mu, sigma.
        let mu = rng.uniform(-2.0, 2.0);
        let sigma = rng.uniform(0.1, 3.0);
        let closed = capacity_kl(m, mu + sigma * z, mu, sigma).unwrap();
        worst = worst.max((closed - mc_kl(m, z, draws, &mut rng)).abs());
    }
    worst
}

/// Number of `m₁ < m₂` pairs at which the closed form decreases.
pub fn kl_monotonicity_violations(pairs: usize, seed: u64) -> usize {
    use desk_iba::iba::capacity_kl;
    let mut rng = SplitMix64::new(seed);
    (0..pairs)
        .filter(|_| {
            let a = rng.uniform(0.0, 1.0);
            let b = rng.uniform(0.0, 1.0);
            let z = rng.uniform(-5.0, 5.0);
            let (lo, hi) = (a.min(b), a.max(b));
            capacity_kl(lo, z, 0.0, 1.0).unwrap() > capacity_kl(hi, z, 0.0, 1.0).unwrap()
        })
        .count()
}

/// Severity-class boundary cases as `(fraction, expected class)`.
pub const SEVERITY_BOUNDARIES: [(f64, desk_iba::synth::Severity); 7] = {
    use desk_iba::synth::Severity::*;
    [
        (0.0, Ct0),
        (0.25, Ct1),
        (0.2500001, Ct2),
        (0.50, Ct2),
        (0.75, Ct3),
        (0.7500001, Ct4),
        (1.0, Ct4),
    ]
};

/// Boundary cases that disagree with the expected class, checked through the
/// class mapping and, where the fraction is representable on a 4000-pixel lung,
/// through `estimate_severity` on a synthetic map.
pub fn severity_boundary_failures() -> Vec<String> {
    use desk_iba::detect::{estimate_severity, severity_for};
    use desk_iba::heatmap::{Heatmap, Method};
    use desk_iba::synth::{Label, Severity, PIXELS};
    const LUNG: usize = 4000;
    let lung: Vec<bool> = (0..PIXELS).map(|i| i < LUNG).collect();
    let mut failures = Vec::new();
    for (f, want) in SEVERITY_BOUNDARIES {
        let label = if f > 0.0 {
            Label::Positive
        } else {
            Label::Negative
        };
        let got = Severity::from_ggo_fraction(f);
        if got != want || severity_for(label, f) != want {
            failures.push(format!("fraction {f}: expected {want:?}, got {got:?}"));
        }
        // Exact on the boundaries; just above 0.25 and 0.75 this rounds up to the next pixel.
        let k = ((f * LUNG as f64).ceil() as usize).min(LUNG);
        let values = (0..PIXELS).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
        let est = estimate_severity(
            &Heatmap::new(values, Method::Iba).unwrap(),
            &lung,
            label,
            0.3,
        )
        .unwrap();
        if est.severity_pred != want {
            failures.push(format!(
                "map with {k}/{LUNG} lit pixels ({}): expected {want:?}, got {:?}",
                est.ggo_fraction_pred, est.severity_pred
            ));
        }
    }
    failures
}

pub mod cli {
    use std::collections::BTreeMap;
    use std::fs;
    use std::path::Path;
    use std::process::{Command, Output};

    pub fn bin() -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_desk-iba"));
        c.env_remove("DESK_IBA_JOBS");
        c
    }

    /// Runs the binary in `dir` with relative paths, so echoed configs match across directories.
    pub fn run(dir: &Path, args: &[&str]) -> Output {
        bin()
            .current_dir(dir)
            .args(args)
            .output()
            .expect("binary runs")
    }

    pub fn ok(dir: &Path, args: &[&str]) -> Output {
        let out = run(dir, args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    /// Every file under `root`, keyed by relative path.
    pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
        fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
            for entry in fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    walk(root, &path, out);
                } else {
                    let rel = path
                        .strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned();
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(root, root, &mut out);
        out
    }

    /// gen-data → train → attribute (both methods) → evaluate on a small config.
    pub fn pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        ok(
            dir,
            &[
                "gen-data",
                "--out",
                "data",
                "--seed",
                "5",
                "--counts",
                "CT0=10,CT1=4,CT2=3,CT3=2,CT4=1",
            ],
        );
        ok(
            dir,
            &[
                "train",
                "--data",
                "data",
                "--out",
                "model.bin",
                "--seed",
                "5",
                "--epochs",
                "2",
            ],
        );
        for method in ["iba", "gradcam"] {
            let heat = format!("heat-{method}");
            ok(
                dir,
                &[
                    "attribute",
                    "--model",
                    "model.bin",
                    "--data",
                    "data",
                    "--method",
                    method,
                    "--out",
                    &heat,
                    "--seed",
                    "5",
                    "--steps",
                    "3",
                    "--jobs",
                    "2",
                ],
            );
            ok(
                dir,
                &[
                    "evaluate",
                    "--model",
                    "model.bin",
                    "--data",
                    "data",
                    "--heatmaps",
                    &heat,
                    "--out",
                    &format!("eval-{method}.json"),
                ],
            );
        }
        tree(dir)
    }

    /// Paths whose bytes differ between two trees, plus paths present in only one.
    pub fn differences(
        a: &BTreeMap<String, Vec<u8>>,
        b: &BTreeMap<String, Vec<u8>>,
    ) -> Vec<String> {
        let mut diff: Vec<String> = a
            .iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        diff.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
        diff
    }
}
