use rand::seq::index::sample;
use rand::Rng;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Compares reverse-mode gradients against central finite differences.
///
/// At most `max_per_param` entries of each parameter are probed (all of them
/// when the parameter is smaller). Returns the largest
/// `|analytic − fd| / max(|analytic|, 1e-8)` observed.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    h: f64,
    max_per_param: usize,
    rng: &mut impl Rng,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    assert!(h > 0.0);
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss_fn(&mut tape, store)?;
        Ok(tape.value(v).data()[0])
    };

    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let probes: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            sample(rng, n, max_per_param).into_vec()
        };
        for k in probes {
            let orig = store.by_index(pi).1.value.data()[k];
            store.by_index_mut(pi).value.data_mut()[k] = orig + h;
            let up = eval(store)?;
            store.by_index_mut(pi).value.data_mut()[k] = orig - h;
            let down = eval(store)?;
            store.by_index_mut(pi).value.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (grads[k] - fd).abs() / grads[k].abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
