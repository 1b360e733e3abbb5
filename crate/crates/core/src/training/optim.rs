use crate::error::{Error, Result};

/// RMSProp: `acc ← ρ·acc + (1 − ρ)·g²`, `θ ← θ − lr·g / (√acc + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub stabilizer: f64,
    pub accumulators: Vec<f64>,
}

impl RmsProp {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            decay: 0.9,
            stabilizer: 1e-8,
            accumulators: vec![0.0; n_params],
        }
    }

    /// One update in place. A non-finite gradient aborts the step before any
    /// state changes and names the offending index.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], names: &[String]) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.accumulators.len());
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::Numerical(format!("gradient of `{name}` is {}", grads[i])));
        }
        for ((p, &g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            *acc = self.decay * *acc + (1.0 - self.decay) * g * g;
            *p -= self.learning_rate * g / (acc.sqrt() + self.stabilizer);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut opt = RmsProp::new(2, 0.001);
        let mut p = [1.0, -2.0];
        opt.step(&mut p, &[0.0, 0.0], &[]).unwrap();
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut opt = RmsProp::new(1, 0.001);
        let mut p = [0.0];
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..200 {
            opt.step(&mut p, &[3.0], &[]).unwrap();
            step = prev - p[0];
            prev = p[0];
        }
        assert!((step - 0.001).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = RmsProp::new(2, 0.001);
        let mut p = [1.0, 1.0];
        let names = vec!["a".to_string(), "b".to_string()];
        let err = opt.step(&mut p, &[0.1, f64::NAN], &names).unwrap_err();
        assert!(err.to_string().contains("`b`"));
        assert_eq!(p, [1.0, 1.0]);
        assert_eq!(opt.accumulators, vec![0.0, 0.0]);
    }

    #[test]
    fn first_step_matches_formula() {
        let mut opt = RmsProp::new(1, 0.01);
        let mut p = [1.0];
        opt.step(&mut p, &[2.0], &[]).unwrap();
        let acc: f64 = 0.1 * 4.0;
        assert_eq!(p[0], 1.0 - 0.01 * 2.0 / (acc.sqrt() + 1e-8));
    }
}
