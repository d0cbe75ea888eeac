//! Central finite-difference oracle for tape operations.
//!
//! The loss is a fixed random projection `Σ w ⊙ f(inputs)`; the numeric
//! derivative re-evaluates `f` on perturbed copies of the inputs and forms the
//! projection in f64, so only the operation's own rounding enters the estimate.

use interseg::scalar::Scalar;
use interseg::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Builder<'a, T> = dyn Fn(&mut Tape<T>, &[Var]) -> interseg::tensor::Result<Var> + 'a;

fn evaluate<T: Scalar>(inputs: &[Tensor<T>], build: &Builder<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    tape.value(out).clone()
}

fn project<T: Scalar>(out: &Tensor<T>, w: &[f64]) -> f64 {
    out.data().iter().zip(w).map(|(&o, &wi)| o.as_f64() * wi).sum()
}

/// Largest norm-wise relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// over the inputs flagged in `differentiable`.
pub fn max_relative_error<T: Scalar>(
    inputs: &[Tensor<T>],
    differentiable: &[bool],
    build: &Builder<T>,
    step: f64,
    seed: u64,
) -> f64 {
    let reference = evaluate(inputs, build);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w: Vec<f64> = (0..reference.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().zip(differentiable).map(|(t, &d)| tape.leaf(t.clone(), d)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let wt = tape.constant(Tensor::new(reference.shape().to_vec(), w.iter().map(|&v| T::lit(v)).collect()).unwrap());
    let prod = tape.mul(out, wt).expect("projection");
    let loss = tape.sum(prod).expect("sum");
    tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        if !differentiable[k] {
            continue;
        }
        let analytic: Vec<f64> = match tape.grad(vars[k]) {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = vec![0.0; input.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += T::lit(step);
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= T::lit(step);
            // the perturbation actually applied after rounding
            let h = (plus[k].data()[e] - minus[k].data()[e]).as_f64();
            *slot = (project(&evaluate(&plus, build), &w) - project(&evaluate(&minus, build), &w)) / h;
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

use std::sync::Arc;

use interseg::tensor::{log_softmax, BatchNormState, BnMode, NeighborTable, Reduction};

/// Every differentiable tape operation, each exercised on `shapes` random
/// instances. Returns `(operation, worst relative error)`.
pub fn op_suite<T: Scalar>(shapes: usize, step: f64, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut run = |name: &'static str,
                   rng: &mut ChaCha8Rng,
                   make: &dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<T>>, Vec<bool>, Box<Builder<'static, T>>)| {
        let mut worst = 0.0f64;
        for i in 0..shapes {
            let (inputs, diff, build) = make(rng);
            worst = worst.max(max_relative_error(&inputs, &diff, build.as_ref(), step, seed + i as u64));
        }
        results.push((name, worst));
    };

    fn rand_t<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect()).unwrap()
    }
    fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
        rng.random_range(lo..=hi)
    }

    run("matmul", &mut rng, &|rng| {
        let (r, k, c) = (dim(rng, 1, 6), dim(rng, 1, 6), dim(rng, 1, 6));
        let inputs = vec![rand_t(rng, &[r, k], -1.0, 1.0), rand_t(rng, &[k, c], -1.0, 1.0)];
        (inputs, vec![true, true], Box::new(|t: &mut Tape<T>, v: &[Var]| t.matmul(v[0], v[1])))
    });
    run("linear", &mut rng, &|rng| {
        let (r, k, c) = (dim(rng, 1, 6), dim(rng, 1, 6), dim(rng, 1, 6));
        let inputs = vec![rand_t(rng, &[r, k], -1.0, 1.0), rand_t(rng, &[k, c], -1.0, 1.0), rand_t(rng, &[1, c], -1.0, 1.0)];
        (inputs, vec![true; 3], Box::new(|t: &mut Tape<T>, v: &[Var]| t.linear(v[0], v[1], v[2])))
    });
    run("add_row", &mut rng, &|rng| {
        let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
        let inputs = vec![rand_t(rng, &[r, c], -1.0, 1.0), rand_t(rng, &[1, c], -1.0, 1.0)];
        (inputs, vec![true; 2], Box::new(|t: &mut Tape<T>, v: &[Var]| t.add_row(v[0], v[1])))
    });
    run("add", &mut rng, &|rng| {
        let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
        let inputs = vec![rand_t(rng, &[r, c], -1.0, 1.0), rand_t(rng, &[r, c], -1.0, 1.0)];
        (inputs, vec![true; 2], Box::new(|t: &mut Tape<T>, v: &[Var]| t.add(v[0], v[1])))
    });
    run("mul", &mut rng, &|rng| {
        let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
        let inputs = vec![rand_t(rng, &[r, c], -1.0, 1.0), rand_t(rng, &[r, c], -1.0, 1.0)];
        (inputs, vec![true; 2], Box::new(|t: &mut Tape<T>, v: &[Var]| t.mul(v[0], v[1])))
    });
    run("scale", &mut rng, &|rng| {
        let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
        let f = T::lit(rng.random_range(-2.0..2.0));
        let inputs = vec![rand_t(rng, &[r, c], -1.0, 1.0)];
        (inputs, vec![true], Box::new(move |t: &mut Tape<T>, v: &[Var]| t.scale(v[0], f)))
    });
    run("sum", &mut rng, &|rng| {
        let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
        let inputs = vec![rand_t(rng, &[r, c], -1.0, 1.0)];
        (inputs, vec![true], Box::new(|t: &mut Tape<T>, v: &[Var]| t.sum(v[0])))
    });
    run("relu", &mut rng, &|rng| {
        let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 6));
        // keep every entry well away from the kink
        let x = rand_t::<T>(rng, &[r, c], 0.05, 2.0);
        let signs: Vec<T> = (0..r * c).map(|_| if rng.random_bool(0.5) { T::one() } else { -T::one() }).collect();
        let data = x.data().iter().zip(&signs).map(|(&a, &s)| a * s).collect();
        let inputs = vec![Tensor::new(vec![r, c], data).unwrap()];
        (inputs, vec![true], Box::new(|t: &mut Tape<T>, v: &[Var]| t.relu(v[0])))
    });
    for (name, mode) in [("batch_norm[instance]", BnMode::InstanceStats), ("batch_norm[running]", BnMode::RunningStats)] {
        run(name, &mut rng, &|rng| {
            let (n, c) = (dim(rng, 3, 8), dim(rng, 1, 5));
            let mut st = BatchNormState::<T>::new(c, T::lit(1e-5));
            st.mode = mode;
            st.running_mu = (0..c).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
            st.running_sigma2 = (0..c).map(|_| T::lit(rng.random_range(0.5..2.0))).collect();
            let inputs = vec![rand_t(rng, &[n, c], -2.0, 2.0), rand_t(rng, &[1, c], 0.5, 1.5), rand_t(rng, &[1, c], -0.5, 0.5)];
            (inputs, vec![true; 3], Box::new(move |t: &mut Tape<T>, v: &[Var]| t.batch_norm(v[0], v[1], v[2], &st)))
        });
    }
    run("neighbor_mean", &mut rng, &|rng| {
        let (n, c) = (dim(rng, 2, 8), dim(rng, 1, 5));
        let k = dim(rng, 1, n - 1);
        let idx: Vec<u32> = (0..n * k).map(|_| rng.random_range(0..n as u32)).collect();
        let table = Arc::new(NeighborTable::new(k, idx).unwrap());
        let inputs = vec![rand_t(rng, &[n, c], -1.0, 1.0)];
        (inputs, vec![true], Box::new(move |t: &mut Tape<T>, v: &[Var]| t.neighbor_mean(v[0], table.clone())))
    });
    run("concat_cols", &mut rng, &|rng| {
        let (n, a, b) = (dim(rng, 1, 6), dim(rng, 1, 5), dim(rng, 1, 5));
        let inputs = vec![rand_t(rng, &[n, a], -1.0, 1.0), rand_t(rng, &[n, b], -1.0, 1.0)];
        (inputs, vec![true; 2], Box::new(|t: &mut Tape<T>, v: &[Var]| t.concat_cols(v[0], v[1])))
    });
    run("softmax", &mut rng, &|rng| {
        let (n, m) = (dim(rng, 1, 6), dim(rng, 2, 6));
        let inputs = vec![rand_t(rng, &[n, m], -3.0, 3.0)];
        (inputs, vec![true], Box::new(|t: &mut Tape<T>, v: &[Var]| t.softmax(v[0])))
    });
    run("log_softmax", &mut rng, &|rng| {
        let (n, m) = (dim(rng, 1, 6), dim(rng, 2, 6));
        let inputs = vec![rand_t(rng, &[n, m], -3.0, 3.0)];
        (inputs, vec![true], Box::new(|t: &mut Tape<T>, v: &[Var]| t.log_softmax(v[0])))
    });
    run("clamped_log", &mut rng, &|rng| {
        let (n, m) = (dim(rng, 1, 6), dim(rng, 2, 6));
        let inputs = vec![rand_t(rng, &[n, m], 0.05, 0.95)];
        (inputs, vec![true], Box::new(|t: &mut Tape<T>, v: &[Var]| t.clamped_log(v[0])))
    });

    fn one_hot<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let c = rng.random_range(0..m);
            t.data_mut()[i * m + c] = T::one();
        }
        t
    }
    fn mask<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
        let mut m: Vec<T> = (0..n).map(|_| if rng.random_bool(0.5) { T::one() } else { T::zero() }).collect();
        let pick = rng.random_range(0..n);
        m[pick] = T::one();
        m
    }
    fn reduction(rng: &mut ChaCha8Rng) -> Reduction {
        if rng.random_bool(0.5) {
            Reduction::Sum
        } else {
            Reduction::Mean
        }
    }

    run("nll", &mut rng, &|rng| {
        let (n, m) = (dim(rng, 1, 6), dim(rng, 2, 6));
        let logits = rand_t::<T>(rng, &[n, m], -3.0, 3.0);
        let inputs = vec![log_softmax(&logits).unwrap()];
        let (targets, w, red) = (one_hot::<T>(rng, n, m), mask::<T>(rng, n), reduction(rng));
        (inputs, vec![true], Box::new(move |t: &mut Tape<T>, v: &[Var]| t.nll(v[0], &targets, &w, red)))
    });
    run("masked_weighted_cross_entropy", &mut rng, &|rng| {
        let (n, m) = (dim(rng, 1, 6), dim(rng, 2, 6));
        let inputs = vec![rand_t::<T>(rng, &[n, m], 0.05, 0.95)];
        let (targets, w, red) = (one_hot::<T>(rng, n, m), mask::<T>(rng, n), reduction(rng));
        (
            inputs,
            vec![true],
            Box::new(move |t: &mut Tape<T>, v: &[Var]| t.masked_weighted_cross_entropy(v[0], &targets, &w, red)),
        )
    });
    run("weighted_entropy", &mut rng, &|rng| {
        let (n, m) = (dim(rng, 1, 6), dim(rng, 2, 6));
        let logits = rand_t::<T>(rng, &[n, m], -3.0, 3.0);
        let inputs = vec![log_softmax(&logits).unwrap()];
        let (w, red) = (mask::<T>(rng, n), reduction(rng));
        (inputs, vec![true], Box::new(move |t: &mut Tape<T>, v: &[Var]| t.weighted_entropy(v[0], &w, red)))
    });
    results
}
