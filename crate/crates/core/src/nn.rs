//! Parameter storage, layer primitives, and the AdamW optimizer.
//!
//! Parameters live in a [`ParamStore`] in registration order, which fixes
//! checkpoint layout and makes training bit-reproducible. A [`Session`]
//! binds a store to one [`Tape`] for a forward pass, memoizing one leaf per
//! parameter so gradients accumulate across uses.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Gradients, Tape, Var};

/// Index of a parameter within its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors in deterministic registration order.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push((name.to_string(), value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Overwrite values for every name present in `other` that also exists
    /// here (used to load pretrained encoder weights).
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut loaded = 0;
        for (name, value) in other.iter() {
            if let Some(id) = self.id_of(name) {
                assert_eq!(
                    self.value(id).shape(),
                    value.shape(),
                    "shape mismatch loading {name}"
                );
                *self.value_mut(id) = value.clone();
                loaded += 1;
            }
        }
        loaded
    }
}

/// Binds a [`ParamStore`] to a tape for one forward pass.
pub struct Session<'t, 's> {
    pub tape: &'t Tape,
    store: &'s ParamStore,
    leaves: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    /// The tape leaf for a parameter (created once per session).
    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(v) = leaves[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        leaves[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Map tape gradients back to parameter ids.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<ArrayD<f64>>> {
        let leaves = self.leaves.borrow();
        leaves
            .iter()
            .map(|slot| slot.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Accumulates parameter gradients across windows of an effective batch.
#[derive(Clone)]
pub struct GradAccum {
    pub sums: Vec<Option<ArrayD<f64>>>,
    pub count: usize,
}

impl GradAccum {
    pub fn new(n_params: usize) -> Self {
        Self {
            sums: vec![None; n_params],
            count: 0,
        }
    }

    pub fn add(&mut self, grads: Vec<Option<ArrayD<f64>>>) {
        self.count += 1;
        for (slot, g) in self.sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn merge(&mut self, other: GradAccum) {
        self.count += other.count;
        for (slot, g) in self.sums.iter_mut().zip(other.sums) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
            }
        }
    }

    /// Mean gradients over the accumulated windows.
    pub fn mean(mut self) -> Vec<Option<ArrayD<f64>>> {
        let n = self.count.max(1) as f64;
        for slot in &mut self.sums {
            if let Some(g) = slot {
                *g /= n;
            }
        }
        self.sums
    }
}

/// Global-norm gradient clipping. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Option<ArrayD<f64>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}

/// Decoupled-weight-decay Adam.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = store
            .iter()
            .map(|(_, v)| ArrayD::zeros(v.raw_dim()))
            .collect();
        let v = store
            .iter()
            .map(|(_, val)| ArrayD::zeros(val.raw_dim()))
            .collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m,
            v,
            t: vec![0; store.len()],
        }
    }

    /// One update. `lrs[i] = None` freezes parameter `i` completely (no
    /// moment update either, so freeze/unfreeze matches true freezing).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<ArrayD<f64>>],
        lrs: &[Option<f64>],
    ) {
        for i in 0..store.len() {
            let Some(lr) = lrs[i] else { continue };
            let Some(g) = &grads[i] else { continue };
            self.t[i] += 1;
            let t = self.t[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            let theta = store.value_mut(ParamId(i));
            ndarray::Zip::from(&mut *theta)
                .and(&*m)
                .and(&*v)
                .for_each(|th, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *th -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *th);
                });
        }
    }
}

/// Fully connected layer, stored as `[in, out]` so `y = x @ W (+ b)`.
#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), glorot(d_in, d_out, rng));
        let b = store.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, d_out])));
        Self { w, b: Some(b) }
    }

    pub fn new_no_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), glorot(d_in, d_out, rng));
        Self { w, b: None }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(s.p(self.w));
        match self.b {
            Some(b) => y.add_row(s.p(b)),
            None => y,
        }
    }
}

/// Glorot-uniform initialization for a `[in, out]` weight.
pub fn glorot(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let a = (6.0 / (d_in + d_out) as f64).sqrt();
    let data: Vec<f64> = (0..d_in * d_out).map(|_| rng.random_range(-a..a)).collect();
    ArrayD::from_shape_vec(IxDyn(&[d_in, d_out]), data).unwrap()
}

/// Inverted-dropout mask: zeros with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Apply dropout on the tape when training; identity otherwise.
pub fn dropout<'t>(
    x: Var<'t>,
    p: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Var<'t> {
    if !training || p <= 0.0 {
        return x;
    }
    let mask = dropout_mask(&x.shape(), p, rng);
    x.mul_const(&mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn session_memoizes_leaves_and_accumulates_grads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 3, 3, &mut rng);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 3]), 1.0));
        // use the layer twice; gradient for w must accumulate from both uses
        let y = lin.forward(&s, lin.forward(&s, x));
        let loss = y.sum_all();
        let mut grads = tape.backward(loss);
        let pg = s.param_grads(&mut grads);
        assert!(pg[lin.w.0].is_some());
        assert!(pg[lin.b.unwrap().0].is_some());
    }

    #[test]
    fn adamw_decays_weights_without_gradient_signal() {
        let mut store = ParamStore::new();
        let id = store.register("w", ArrayD::from_elem(IxDyn(&[1, 1]), 1.0));
        let mut opt = AdamW::new(&store, 0.9, 0.999, 0.1);
        let grads = vec![Some(ArrayD::zeros(IxDyn(&[1, 1])))];
        opt.step(&mut store, &grads, &[Some(0.1)]);
        let v = store.value(id)[[0, 0]];
        assert!((v - (1.0 - 0.1 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.register("w", ArrayD::from_elem(IxDyn(&[1, 1]), 1.0));
        let mut opt = AdamW::new(&store, 0.9, 0.999, 0.1);
        let grads = vec![Some(ArrayD::from_elem(IxDyn(&[1, 1]), 5.0))];
        opt.step(&mut store, &grads, &[None]);
        assert_eq!(store.value(id)[[0, 0]].to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![Some(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0))];
        let pre = clip_grad_norm(&mut grads, 1.0);
        assert!(pre > 1.0);
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-9);
    }
}
