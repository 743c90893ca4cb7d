use super::{shape_err, Result, Scalar, Tensor, TensorError};

/// A named trainable tensor with a step counter.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub version: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            value: Tensor::param(shape, data)?,
            version: 0,
        })
    }

    pub fn bytes(&self) -> usize {
        self.value.numel() * T::BYTES
    }
}

/// Plain SGD: `value -= lr·grad`, and every parameter's version advances by
/// one whether or not its value changed.
pub fn sgd_step<T: Scalar>(params: &mut [Parameter<T>], lr: f64, grads: &[Tensor<T>]) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TensorError::InvalidArgument(format!("learning rate {lr}")));
    }
    if params.len() != grads.len() {
        return Err(shape_err(
            "sgd_step",
            format!("{} params but {} grads", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(shape_err(
                "sgd_step",
                format!("{}: {:?} vs grad {:?}", p.name, p.value.shape(), g.shape()),
            ));
        }
    }
    let lr = T::lit(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        let data = p
            .value
            .data()
            .iter()
            .zip(g.data())
            .map(|(&v, &d)| v - lr * d)
            .collect();
        p.value = Tensor::from_parts(p.value.shape().to_vec(), data, true, None, 0);
        p.version += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Parameter<f64> {
        Parameter::new("p", vec![1], vec![v]).unwrap()
    }

    #[test]
    fn single_step_updates_value_and_version() {
        let mut ps = vec![one(1.0)];
        sgd_step(&mut ps, 0.1, &[Tensor::scalar(1.0)]).unwrap();
        assert!((ps[0].value.item() - 0.9).abs() < 1e-15);
        assert_eq!(ps[0].version, 1);
    }

    #[test]
    fn zero_gradient_still_counts_a_step() {
        let mut ps = vec![one(1.0)];
        sgd_step(&mut ps, 0.1, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(ps[0].value.item(), 1.0);
        assert_eq!(ps[0].version, 1);
        sgd_step(&mut ps, 0.1, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(ps[0].version, 2);
    }

    #[test]
    fn shape_mismatch_leaves_params_untouched() {
        let mut ps = vec![one(1.0), one(2.0)];
        let bad = [Tensor::scalar(1.0), Tensor::zeros(vec![2])];
        assert!(sgd_step(&mut ps, 0.1, &bad).is_err());
        assert_eq!(ps[0].version, 0);
        assert_eq!(ps[0].value.item(), 1.0);
        assert!(sgd_step(&mut ps, -1.0, &[Tensor::scalar(1.0), Tensor::scalar(1.0)]).is_err());
    }
}
