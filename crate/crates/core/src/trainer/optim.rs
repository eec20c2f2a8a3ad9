use ndarray::{Array2, Zip};

use super::config::OptimizerKind;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> usize {
        assert!(self.index(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index(name).map(|k| &self.values[k])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index(name).map(move |k| &mut self.values[k])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &Array2<f64> {
        &self.values[k]
    }

    pub fn value_mut(&mut self, k: usize) -> &mut Array2<f64> {
        &mut self.values[k]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter()).map(|x| x * x).sum()
    }
}

/// Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) or plain SGD over a
/// [`ParamStore`]. Parameters without a gradient in a step are left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|p| Array2::zeros(p.dim())).collect::<Vec<_>>();
        Optimizer { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// `grads[k]` is the gradient of parameter `k`, if any.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.value_mut(k);
            match self.kind {
                OptimizerKind::Sgd => p.scaled_add(-lr, g),
                OptimizerKind::Adam => {
                    Zip::from(p).and(&mut self.m[k]).and(&mut self.v[k]).and(g).for_each(|p, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", array![[1.0, -2.0]]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &p);
        opt.step(&mut p, &[Some(array![[3.0, -0.5]])]);
        let w = p.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6 && (w[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_and_missing_grads_leave_params() {
        let mut p = ParamStore::new();
        p.insert("a", array![[1.0]]);
        p.insert("b", array![[2.0]]);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &p);
        opt.step(&mut p, &[Some(array![[5.0]]), None]);
        assert_eq!(p, before);
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 0.5, &p);
        sgd.step(&mut p, &[None, Some(array![[2.0]])]);
        assert_eq!(p.get("b").unwrap()[[0, 0]], 1.0);
        assert_eq!(p.get("a").unwrap()[[0, 0]], 1.0);
    }
}
