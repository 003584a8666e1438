//! Central finite-difference checking for the tape ops.

use super::params::{ParamStore, Session};
use super::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Compares tape gradients against central differences for every element of
/// every input, returning the worst relative error. `build` must construct
/// the graph from the given leaves and return a scalar loss node.
pub fn grad_check<F>(build: F, inputs: &[Tensor], step: f64) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> (Tape, Vec<NodeId>, NodeId) {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &leaves);
        assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
        (tape, leaves, loss)
    };

    let (tape, leaves, loss) = eval(inputs);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|l| {
            grads
                .get(*l)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*l).shape().to_vec()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let (tp, _, lp) = eval(&work);
            let fp = tp.value(lp).item();
            work[ti].data_mut()[ei] = orig - step;
            let (tm, _, lm) = eval(&work);
            let fm = tm.value(lm).item();
            work[ti].data_mut()[ei] = orig;

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Finite-difference check for a model built from a parameter store. `build`
/// gets a fresh session, the store, and the input leaf and must return a
/// scalar loss. A random subset of entries per parameter tensor (and of the
/// input) is probed; returns the worst relative error.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    input: &Tensor,
    build: F,
    step: f64,
    probes_per_tensor: usize,
    seed: u64,
) -> f64
where
    F: Fn(&mut Session, &ParamStore, NodeId) -> NodeId,
{
    let loss_of = |store: &ParamStore, input: &Tensor| -> f64 {
        let mut sess = Session::new();
        let x = sess.tape.leaf(input.clone());
        let loss = build(&mut sess, store, x);
        sess.tape.value(loss).item()
    };

    let mut sess = Session::new();
    let x = sess.tape.leaf(input.clone());
    let loss = build(&mut sess, store, x);
    let grads = sess.tape.backward(loss);
    let analytic_params = sess.param_grads(&grads);
    let analytic_x = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        if rel > worst {
            worst = rel;
        }
    };

    let param_ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for pid in param_ids {
        let len = store.get(pid).value.len();
        for _ in 0..probes_per_tensor.min(len) {
            let ei = rng.gen_range(0..len);
            let orig = store.get(pid).value.data()[ei];
            store.get_mut(pid).value.data_mut()[ei] = orig + step;
            let fp = loss_of(store, input);
            store.get_mut(pid).value.data_mut()[ei] = orig - step;
            let fm = loss_of(store, input);
            store.get_mut(pid).value.data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic_params.get(&pid).map_or(0.0, |g| g.data()[ei]);
            check(a, numeric);
        }
    }

    let mut work = input.clone();
    for _ in 0..probes_per_tensor.min(input.len()) {
        let ei = rng.gen_range(0..input.len());
        let orig = input.data()[ei];
        work.data_mut()[ei] = orig + step;
        let fp = loss_of(store, &work);
        work.data_mut()[ei] = orig - step;
        let fm = loss_of(store, &work);
        work.data_mut()[ei] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        check(analytic_x.data()[ei], numeric);
    }
    worst
}
