use indexmap::IndexMap;

use super::{AutogradError, Gradients, Tape, Tensor, Var};

/// A trainable tensor together with its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub velocity: Tensor,
}

/// Named parameters in insertion order, each with a same-shaped velocity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

/// Gradients keyed by parameter name.
pub type GradMap = IndexMap<String, Tensor>;

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Handle for `name`. Panics if the name was never registered, which is a
    /// network construction bug rather than a data error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    /// Pulls the gradient of every bound parameter out of `grads`.
    pub fn collect(&self, grads: &mut Gradients) -> GradMap {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), AutogradError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(AutogradError::DuplicateParam(name));
        }
        let velocity = Tensor::zeros(value.shape());
        self.entries.insert(name, Param { value, velocity });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.velocity)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Classic momentum: `v ← μ·v + g`, then `p ← p − lr·v`.
    pub fn sgd_momentum_step(&mut self, grads: &GradMap, lr: f64, momentum: f64) -> Result<(), AutogradError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(AutogradError::InvalidLearningRate(lr));
        }
        for (name, p) in &self.entries {
            let g = grads
                .get(name)
                .ok_or_else(|| AutogradError::MissingGradient(name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "sgd_momentum_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        for (name, p) in self.entries.iter_mut() {
            let g = &grads[name.as_str()];
            let v = p.velocity.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = momentum * *vi + gi;
            }
            for (pi, vi) in p.value.data_mut().iter_mut().zip(p.velocity.data()) {
                *pi -= lr * vi;
            }
        }
        Ok(())
    }

    /// Replaces parameter values (velocities reset) from `(name, tensor)`
    /// pairs. Every current parameter must be present with a matching shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<(), AutogradError> {
        let mut incoming: IndexMap<String, Tensor> = IndexMap::new();
        for (name, t) in values {
            if !self.entries.contains_key(&name) {
                return Err(AutogradError::UnknownParam(name));
            }
            incoming.insert(name, t);
        }
        for (name, p) in &self.entries {
            let t = incoming
                .get(name)
                .ok_or_else(|| AutogradError::MissingGradient(name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        for (name, p) in self.entries.iter_mut() {
            p.value = incoming.swap_remove(name.as_str()).expect("checked above");
            p.velocity = Tensor::zeros(p.value.shape());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(p)).unwrap();
        ps
    }

    fn grad(g: f64) -> GradMap {
        [("p".to_string(), Tensor::scalar(g))].into_iter().collect()
    }

    #[test]
    fn first_step_is_plain_sgd() {
        let mut ps = single(1.0);
        ps.sgd_momentum_step(&grad(1.0), 0.1, 0.9).unwrap();
        assert_eq!(ps.velocity("p").unwrap().item(), 1.0);
        assert!((ps.get("p").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn coasts_on_momentum() {
        let mut ps = single(0.9);
        ps.entries.get_mut("p").unwrap().velocity = Tensor::scalar(1.0);
        ps.sgd_momentum_step(&grad(0.0), 0.1, 0.9).unwrap();
        assert!((ps.velocity("p").unwrap().item() - 0.9).abs() < 1e-15);
        assert!((ps.get("p").unwrap().item() - 0.81).abs() < 1e-15);
    }

    fn iterate_quadratic(curvature: f64) -> (f64, f64) {
        // Oracle: hand-iterate v' = 0.9 v + c·p, p' = p - 0.05 v'.
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for _ in 0..50 {
            v = 0.9 * v + curvature * p;
            p -= 0.05 * v;
        }
        let mut ps = single(1.0);
        for _ in 0..50 {
            let g = curvature * ps.get("p").unwrap().item();
            ps.sgd_momentum_step(&grad(g), 0.05, 0.9).unwrap();
        }
        (p, ps.get("p").unwrap().item())
    }

    #[test]
    fn quadratic_fifty_steps_follow_recurrence() {
        // loss p²: the momentum iterate is still ringing after 50 steps.
        let (oracle, got) = iterate_quadratic(2.0);
        assert_eq!(got, oracle);
        assert!((got - (-0.066_680_238_896_608_35)).abs() < 1e-12);
        assert!(got.abs() < 0.1);
        // loss ½p² settles below 1e-2.
        let (oracle, got) = iterate_quadratic(1.0);
        assert_eq!(got, oracle);
        assert!(got.abs() < 1e-2);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut ps = single(1.0);
        let err = ps.sgd_momentum_step(&GradMap::new(), 0.1, 0.9).unwrap_err();
        assert!(matches!(err, AutogradError::MissingGradient(n) if n == "p"));
    }

    #[test]
    fn non_positive_lr_rejected() {
        let mut ps = single(1.0);
        assert!(ps.sgd_momentum_step(&grad(1.0), 0.0, 0.9).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = single(1.0);
        assert!(ps.insert("p", Tensor::scalar(0.0)).is_err());
    }
}
