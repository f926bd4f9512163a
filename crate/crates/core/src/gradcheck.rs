//! Central finite differences of a scalar loss `<d_out, f(q, k, v)>`.

use crate::error::Result;
use crate::reference::GradTriple;
use crate::tensor::AttnTensor;

/// Default step for f64 central differences.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Query,
    Key,
    Value,
}

impl Operand {
    pub const ALL: [Operand; 3] = [Operand::Query, Operand::Key, Operand::Value];

    pub fn label(self) -> &'static str {
        match self {
            Operand::Query => "dQ",
            Operand::Key => "dK",
            Operand::Value => "dV",
        }
    }

    pub fn grad<T>(self, g: &GradTriple<T>) -> &AttnTensor<T> {
        match self {
            Operand::Query => &g.dq,
            Operand::Key => &g.dk,
            Operand::Value => &g.dv,
        }
    }
}

/// `|a - b| / max(1, |a|, |b|)`: relative for large entries, absolute below 1.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Evaluates `<d_out, f(q, k, v)>` with central differences at single entries.
pub struct FiniteDifference<'a, F> {
    inputs: [AttnTensor<f64>; 3],
    d_out: &'a AttnTensor<f64>,
    f: F,
    step: f64,
}

impl<'a, F> FiniteDifference<'a, F>
where
    F: FnMut(&AttnTensor<f64>, &AttnTensor<f64>, &AttnTensor<f64>) -> Result<AttnTensor<f64>>,
{
    pub fn new(
        q: &AttnTensor<f64>,
        k: &AttnTensor<f64>,
        v: &AttnTensor<f64>,
        d_out: &'a AttnTensor<f64>,
        step: f64,
        f: F,
    ) -> Self {
        Self { inputs: [q.clone(), k.clone(), v.clone()], d_out, f, step }
    }

    fn loss(&mut self) -> Result<f64> {
        let [q, k, v] = &self.inputs;
        let out = (self.f)(q, k, v)?;
        Ok(out.data().iter().zip(self.d_out.data()).map(|(a, b)| a * b).sum())
    }

    /// Derivative of the loss with respect to one flat entry of `operand`.
    pub fn partial(&mut self, operand: Operand, index: usize) -> Result<f64> {
        let slot = operand as usize;
        let x = self.inputs[slot].data()[index];
        self.inputs[slot].data_mut()[index] = x + self.step;
        let plus = self.loss()?;
        self.inputs[slot].data_mut()[index] = x - self.step;
        let minus = self.loss()?;
        self.inputs[slot].data_mut()[index] = x;
        Ok((plus - minus) / (2.0 * self.step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_partials() {
        // f = q * k elementwise (as a [1,1,2] tensor), loss = sum
        let q = AttnTensor::from_vec((1, 1, 2), vec![3.0, -2.0]).unwrap();
        let k = AttnTensor::from_vec((1, 1, 2), vec![0.5, 4.0]).unwrap();
        let v = AttnTensor::zeros((1, 1, 2)).unwrap();
        let d_out = AttnTensor::new((1, 1, 2), 1.0).unwrap();
        let mut fd = FiniteDifference::new(&q, &k, &v, &d_out, FD_STEP, |q, k, _| {
            let data = q.data().iter().zip(k.data()).map(|(a, b)| a * b).collect();
            AttnTensor::from_vec((1, 1, 2), data)
        });
        assert!((fd.partial(Operand::Query, 0).unwrap() - 0.5).abs() < 1e-8);
        assert!((fd.partial(Operand::Key, 1).unwrap() + 2.0).abs() < 1e-8);
        assert!(fd.partial(Operand::Value, 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-3, 2e-3), 1e-3);
        assert_eq!(relative_error(100.0, 101.0), 1.0 / 101.0);
    }
}
