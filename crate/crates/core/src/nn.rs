//! Named parameter storage and the layers built on top of the tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, NormMode, Tape, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of named tensors. Trainable entries are optimised;
/// the rest are buffers such as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// `(name, tensor)` pairs in insertion order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<(), TensorError> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::Shape("parameter stores differ in length".into()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.tensor.shape() != src.tensor.shape() {
                return Err(TensorError::Shape(format!("parameter `{}` shape mismatch", dst.name)));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    /// Applies running-statistic updates collected during a training-mode forward.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate<T>]) {
        for u in updates {
            let m = u.momentum;
            let keep = T::one() - m;
            for (r, &b) in self.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var_unbiased) {
                *r = keep * *r + m * b;
            }
        }
    }
}

/// Pending batch-norm running-estimate update.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: T,
    pub stats: BatchStats<T>,
}

/// Forward-pass context: binds store parameters onto a tape.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: NormMode,
    track_grads: bool,
    bound: BTreeMap<ParamId, Var>,
    pending: Vec<RunningUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Parameters are recorded as gradient-requiring leaves when `track_grads`
    /// is set, and as constants otherwise.
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: NormMode, track_grads: bool) -> Self {
        Ctx { tape, store, mode, track_grads, bound: BTreeMap::new(), pending: Vec::new() }
    }

    /// Binds a parameter, reusing the same tape leaf on repeated use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut t = self.store.get(id).clone();
        t.requires_grad = self.track_grads && self.store.is_trainable(id);
        t.grad = None;
        let v = self.tape.leaf(t);
        self.bound.insert(id, v);
        v
    }

    pub fn bindings(&self) -> &BTreeMap<ParamId, Var> {
        &self.bound
    }

    /// Ends the pass, returning parameter bindings and running-stat updates.
    pub fn finish(self) -> (BTreeMap<ParamId, Var>, Vec<RunningUpdate<T>>) {
        (self.bound, self.pending)
    }
}

/// Copies gradients from a tape into the store's gradient slots.
pub fn collect_grads<T: Scalar>(
    tape: &Tape<T>,
    bindings: &BTreeMap<ParamId, Var>,
    store: &mut ParamStore<T>,
) -> Result<(), TensorError> {
    for (&id, &var) in bindings {
        if let Some(g) = tape.grad(var) {
            store.get_mut(id).set_grad(g.to_vec())?;
        }
    }
    Ok(())
}

/// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = he_uniform(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng);
        Conv2d { weight: store.add(format!("{name}/weight"), w, true), stride, padding }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = ctx.param(self.weight);
        ctx.tape.conv2d(x, w, self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}/gamma"), Tensor::full(&[channels], T::one()), true),
            beta: store.add(format!("{name}/beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}/running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}/running_var"), Tensor::full(&[channels], T::one()), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let store = ctx.store;
        let running = (store.get(self.running_mean).data(), store.get(self.running_var).data());
        let (y, stats) = ctx.tape.batch_norm(x, g, b, ctx.mode, Some(running), T::of_f64(self.eps))?;
        if let Some(stats) = stats {
            ctx.pending.push(RunningUpdate {
                mean: self.running_mean,
                var: self.running_var,
                momentum: T::of_f64(self.momentum),
                stats,
            });
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`.
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = he_uniform(&[input, output], input, rng);
        let weight = store.add(format!("{name}/weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}/bias"), Tensor::zeros(&[output]), true));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer MLP: linear → batch norm → ReLU → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub norm: BatchNorm,
    pub output: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}/fc1"), input, hidden, false, rng),
            norm: BatchNorm::new(store, &format!("{name}/bn1"), hidden),
            output: Linear::new(store, &format!("{name}/fc2"), hidden, output, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let h = self.hidden.forward(ctx, x)?;
        let h = self.norm.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        self.output.forward(ctx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn running_stats_follow_exponential_average() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let mut ctx = Ctx::new(&mut tape, &store, NormMode::Train, true);
        bn.forward(&mut ctx, x).unwrap();
        let (_, updates) = ctx.finish();
        store.apply_running_updates(&updates);
        // batch mean 2, unbiased var 2
        assert!((store.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn shared_parameter_binds_once() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "fc", 2, 2, true, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let mut ctx = Ctx::new(&mut tape, &store, NormMode::Train, true);
        lin.forward(&mut ctx, x).unwrap();
        lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.bindings().len(), 2);
    }

    #[test]
    fn he_uniform_is_seeded_and_bounded() {
        let a: Tensor<f32> = he_uniform(&[4, 3, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(7));
        let b: Tensor<f32> = he_uniform(&[4, 3, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
