use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.dims(a), data);
        self.push(value, Op::Add { a, b })
    }

    /// Sum of several same-shape values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of zero operands".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.dims(a), data);
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale { input, factor })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(value, Op::Relu { input })
    }

    /// Sum of all entries as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel() as f64;
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_grad_masks_negatives() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new([1, 1, 1, 3], vec![-1.0, 0.5, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.5, 2.0]);
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn mismatched_add_is_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }
}
