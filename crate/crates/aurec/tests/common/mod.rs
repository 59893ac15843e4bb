//! Shared helpers for the test suite: finite-difference gradient checking
//! and small deterministic tensors.

#![allow(dead_code)]

use aurec::nn::{ParamId, ParamStore, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

/// Central finite-difference check of `d loss / d param` for every parameter
/// in `ids`, sampling up to `max_entries` coordinates per parameter.
///
/// `forward` must rebuild the loss from scratch on the given tape so that
/// perturbed parameter values are observed.
pub fn grad_check(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    forward: impl Fn(&Tape<f64>, &ParamStore<f64>) -> Var,
    max_entries: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) {
    let tape = Tape::new();
    let loss = forward(&tape, store);
    let grads = tape.backward(loss);
    let h = 1e-5;

    let mut checked = 0usize;
    for &id in ids {
        let n = store.value(id).len();
        let analytic = grads
            .wrt_param(&tape, id)
            .unwrap_or_else(|| panic!("no gradient for {}", store.name(id)))
            .clone();
        let mut entries: Vec<usize> = (0..n).collect();
        // Fisher-Yates prefix shuffle to sample distinct coordinates.
        for i in 0..entries.len().min(max_entries) {
            let j = rng.gen_range(i..entries.len());
            entries.swap(i, j);
        }
        for &e in entries.iter().take(max_entries) {
            let orig = store.value(id).as_slice().expect("standard layout")[e];

            store.value_mut(id).as_slice_mut().expect("layout")[e] = orig + h;
            let fp = Tape::no_grad();
            let lp = forward(&fp, store);
            let up = fp.value_scalar(lp);

            store.value_mut(id).as_slice_mut().expect("layout")[e] = orig - h;
            let fm = Tape::no_grad();
            let lm = forward(&fm, store);
            let um = fm.value_scalar(lm);

            store.value_mut(id).as_slice_mut().expect("layout")[e] = orig;

            let numeric = (up - um) / (2.0 * h);
            let a = analytic.as_slice().expect("layout")[e];
            let denom = (a.abs() + numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < tol || (a - numeric).abs() < 1e-10,
                "gradient mismatch for {}[{}]: analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})",
                store.name(id),
                e
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "no gradient entries checked");
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a:.9} vs {b:.9} (tol {tol:.1e})"
    );
}
