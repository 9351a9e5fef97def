use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Mse,
    Mae,
}

impl Loss {
    pub fn eval<T: Scalar>(self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        match self {
            Loss::Mse => mse_loss(pred, target),
            Loss::Mae => mae_loss(pred, target),
        }
    }
}

/// Mean squared error and its gradient `2(pred − target)/count`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.same_shape(target, "mse_loss")?;
    let n = pred.len() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    let k = T::of(2.0 / n);
    Ok((loss, pred.zip_map(target, |a, b| k * (a - b))?))
}

/// Mean absolute error and the subgradient `sign(pred − target)/count`,
/// zero at ties.
pub fn mae_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.same_shape(target, "mae_loss")?;
    let n = pred.len() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / n;
    let k = T::of(1.0 / n);
    let grad = pred.zip_map(target, |a, b| {
        if a > b {
            k
        } else if a < b {
            -k
        } else {
            T::zero()
        }
    })?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Rng;

    #[test]
    fn fixtures() {
        let t = Tensor::<f64>::rand_uniform(&[3, 4], 0.0, 1.0, &mut Rng::new(0));
        assert_eq!(mse_loss(&t, &t).unwrap().0, 0.0);
        assert_eq!(mae_loss(&t, &t).unwrap().0, 0.0);
        assert_eq!(mae_loss(&t, &t).unwrap().1.max_abs(), 0.0);
        let off = t.map(|v| v + 0.1);
        assert!((mse_loss(&off, &t).unwrap().0 - 0.01).abs() < 1e-12);
        assert!((mae_loss(&off, &t).unwrap().0 - 0.1).abs() < 1e-12);
        let c = -2.5;
        let (a, b) = (off.scale(c), t.scale(c));
        assert!((mae_loss(&a, &b).unwrap().0 - 0.25).abs() < 1e-12);
        assert!(matches!(mse_loss(&t, &t.clone().reshape(&[4, 3]).unwrap()), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let p = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng);
        let t = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng);
        let (_, g) = mse_loss(&p, &t).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.data_mut()[i] -= h;
            let fd = (mse_loss(&plus, &t).unwrap().0 - mse_loss(&minus, &t).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
