use std::collections::BTreeMap;

use crate::diffcore::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(vec![1.0, -1.0, 0.5]))].into();
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(vec![3.0, -0.2, 0.0]))].into();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.update(&mut params, &grads, 0.1);
        let w = params["w"].data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut params: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(vec![4.0, -3.0]))].into();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g: BTreeMap<String, Tensor> =
                [("w".to_string(), params["w"].map(|x| 2.0 * (x - 1.0)))].into();
            adam.update(&mut params, &g, 0.05);
        }
        assert!(params["w"].data().iter().all(|&x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn zero_lr_is_identity() {
        let start: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(vec![0.25, 7.0]))].into();
        let mut params = start.clone();
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(vec![1.0, -1.0]))].into();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.update(&mut params, &grads, 0.0);
        assert_eq!(params, start);
    }
}
