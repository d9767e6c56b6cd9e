//! Named parameters and SGD with classical momentum.

use crate::error::{Error, Result};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;

/// One learnable tensor with its momentum buffer and accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub velocity: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// All parameters of a model, addressed by insertion index. The index is
/// what tape leaves carry, so gradients find their way back here.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a parameter. Names must be unique; they appear in error
    /// messages and the checkpoint file.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let len = value.len();
        self.params.push(Param {
            name,
            value,
            velocity: vec![0.0; len],
            grad: None,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn accumulate_grad(&mut self, index: usize, delta: &[f64]) {
        let p = &mut self.params[index];
        let g = p.grad.get_or_insert_with(|| vec![0.0; p.value.len()]);
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Pull every parameter gradient off a finished backward pass.
    pub fn accumulate_from_tape(&mut self, tape: &Tape) {
        let pairs: Vec<(usize, Vec<f64>)> = tape
            .param_grads()
            .map(|(idx, g)| (idx, g.to_vec()))
            .collect();
        for (idx, g) in pairs {
            self.accumulate_grad(idx, &g);
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Euclidean norm over all gradients, for training diagnostics.
    pub fn grad_l2_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter().flatten())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One SGD step with classical momentum:
    /// `v <- momentum * v + g`, `w <- w - lr * v`.
    ///
    /// Every parameter must carry a gradient; a missing one means the graph
    /// was wired wrong, which is an error rather than a silent no-op.
    /// Gradients are cleared afterwards.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        self.sgd_step_by(|_| lr, momentum)
    }

    /// SGD step with a per-parameter learning rate chosen by name, for
    /// groups that train at a different rate than the rest of the model.
    pub fn sgd_step_by(&mut self, lr_for: impl Fn(&str) -> f64, momentum: f64) -> Result<()> {
        for p in &self.params {
            if p.grad.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        for p in &mut self.params {
            let lr = lr_for(&p.name);
            let g = p.grad.take().expect("checked above");
            for ((v, w), gi) in p.velocity.iter_mut().zip(p.value.data_mut()).zip(&g) {
                *v = momentum * *v + gi;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(value)).unwrap();
        ps
    }

    #[test]
    fn two_momentum_steps_with_unit_gradient() {
        // lr 0.1, momentum 0.9, g = 1 both steps:
        // v1 = 1.0, w: 1.0 -> 0.9; v2 = 1.9, w: 0.9 -> 0.71.
        let mut ps = single_param(1.0);
        ps.accumulate_grad(0, &[1.0]);
        ps.sgd_step(0.1, 0.9).unwrap();
        assert!((ps.get(0).value.item() - 0.9).abs() < 1e-15);
        ps.accumulate_grad(0, &[1.0]);
        ps.sgd_step(0.1, 0.9).unwrap();
        assert!((ps.get(0).value.item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut ps = single_param(2.0);
        ps.accumulate_grad(0, &[4.0]);
        ps.sgd_step(0.5, 0.0).unwrap();
        assert_eq!(ps.get(0).value.item(), 0.0);
    }

    #[test]
    fn step_without_gradient_names_the_parameter() {
        let mut ps = ParamSet::new();
        ps.add("backbone.conv1.weight", Tensor::scalar(0.0)).unwrap();
        let err = ps.sgd_step(0.1, 0.9).unwrap_err();
        assert!(err.to_string().contains("backbone.conv1.weight"));
    }

    #[test]
    fn gradients_accumulate_until_cleared() {
        let mut ps = single_param(0.0);
        ps.accumulate_grad(0, &[1.0]);
        ps.accumulate_grad(0, &[2.0]);
        assert_eq!(ps.get(0).grad.as_deref(), Some(&[3.0][..]));
        ps.sgd_step(1.0, 0.0).unwrap();
        assert!(ps.get(0).grad.is_none());
        assert_eq!(ps.get(0).value.item(), -3.0);
    }

    #[test]
    fn per_name_rates_apply_to_the_matching_params_only() {
        let mut ps = ParamSet::new();
        ps.add("head.weight", Tensor::scalar(1.0)).unwrap();
        ps.add("aux.offset_conv.weight", Tensor::scalar(1.0)).unwrap();
        ps.accumulate_grad(0, &[1.0]);
        ps.accumulate_grad(1, &[1.0]);
        ps.sgd_step_by(
            |name| if name.contains("offset_conv") { 0.01 } else { 0.1 },
            0.0,
        )
        .unwrap();
        assert!((ps.get(0).value.item() - 0.9).abs() < 1e-15);
        assert!((ps.get(1).value.item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(0.0)).unwrap();
        assert!(ps.add("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn tape_grads_land_on_the_right_params() {
        let mut ps = ParamSet::new();
        let ia = ps.add("a", Tensor::scalar(3.0)).unwrap();
        let ib = ps.add("b", Tensor::scalar(4.0)).unwrap();

        let mut tape = Tape::new();
        let a = tape.param_leaf(ps.get(ia).value.clone(), ia);
        let b = tape.param_leaf(ps.get(ib).value.clone(), ib);
        let s = tape.add(a, b).unwrap();
        let loss = tape.scale(s, 2.0);
        let loss = tape.sum(loss);
        tape.backward(loss, 1.0).unwrap();
        ps.accumulate_from_tape(&tape);
        assert_eq!(ps.get(ia).grad.as_deref(), Some(&[2.0][..]));
        assert_eq!(ps.get(ib).grad.as_deref(), Some(&[2.0][..]));
    }
}
