//! Central finite-difference gradient checking.

use super::param::ParamStore;
use super::tensor::Tensor;

/// Compares an analytic gradient against central differences of `f`.
///
/// `f` returns the loss (in `f64`) and its analytic gradient at the given
/// point. Returns `max_i |a_i - n_i| / max(‖a‖∞, ‖n‖∞)`, which stays
/// meaningful when individual coordinates are near zero.
pub fn grad_check<F>(mut f: F, x: &Tensor, h: f32) -> f64
where
    F: FnMut(&Tensor) -> (f64, Tensor),
{
    let (_, analytic) = f(x);
    let mut numeric = vec![0.0f64; x.len()];
    let mut probe = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[i];
        let xp = orig + h;
        let xm = orig - h;
        probe.data_mut()[i] = xp;
        let (fp, _) = f(&probe);
        probe.data_mut()[i] = xm;
        let (fm, _) = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (fp - fm) / (xp as f64 - xm as f64);
    }
    relative_error(analytic.data(), &numeric)
}

/// [`grad_check`] over every scalar of a parameter store. `loss` must fill
/// the store's gradients (from zero) and return the loss.
pub fn grad_check_store<F>(store: &mut ParamStore, h: f32, mut loss: F) -> f64
where
    F: FnMut(&mut ParamStore) -> f64,
{
    let x = Tensor::from_vec(store.flatten_values());
    let mut scratch = store.clone();
    let err = grad_check(
        |p| {
            scratch.load_flat(p.data()).expect("flat size is fixed");
            scratch.zero_grad();
            let l = loss(&mut scratch);
            (l, Tensor::from_vec(scratch.flatten_grads()))
        },
        &x,
        h,
    );
    store.zero_grad();
    err
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = f64::MIN_POSITIVE;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff = diff.max((a as f64 - n).abs());
        scale = scale.max((a as f64).abs()).max(n.abs());
    }
    diff / scale
}
