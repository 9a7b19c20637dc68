use crate::error::Result;
use crate::tensor::{Scalar, Tensor4};

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_y` where `x > 0`; the subgradient at exactly zero is zero.
///
/// `x` may be either the pre-activation or the ReLU output, they have the
/// same positive set.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
    gy.expect_shape("relu_backward", x.shape())?;
    let mut gx = gy.clone();
    gx.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(g, &v)| {
            if v <= T::zero() {
                *g = T::zero()
            }
        });
    Ok(gx)
}

/// In-place variant used on the network's hot path.
pub(crate) fn relu_in_place<T: Scalar>(x: &mut Tensor4<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v <= T::zero() {
            *v = T::zero()
        }
    });
}

pub(crate) fn relu_mask_in_place<T: Scalar>(y: &Tensor4<T>, g: &mut Tensor4<T>) {
    g.data_mut().iter_mut().zip(y.data()).for_each(|(g, &v)| {
        if v <= T::zero() {
            *g = T::zero()
        }
    });
}

/// Logistic function, evaluated so that `exp` never overflows, and clamped
/// to the open interval (0, 1) at the precision of `T`.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    let one = T::one();
    let p = if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    };
    p.min(one - T::epsilon() / T::of_f64(2.0))
        .max(T::min_positive_value())
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid)
}

/// Takes the sigmoid *output* `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor4<T>, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
    gy.expect_shape("sigmoid_backward", y.shape())?;
    let mut gx = gy.clone();
    gx.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(g, &p)| *g = *g * p * (T::one() - p));
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_subgradient() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let gy = Tensor4::full([1, 1, 1, 3], 7.0f32);
        assert_eq!(relu_backward(&x, &gy).unwrap().data(), &[0.0, 0.0, 7.0]);
    }

    #[test]
    fn sigmoid_symmetry_and_saturation() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        let hi = sigmoid(40.0f32);
        assert!(hi.is_finite() && hi < 1.0);
        let hi64 = sigmoid(40.0f64);
        assert!(hi64 < 1.0);
        let lo = sigmoid(-1000.0f64);
        assert!(lo.is_finite() && lo > 0.0);
        assert!((sigmoid(1.3f64) + sigmoid(-1.3f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_backward_uses_output() {
        let y = Tensor4::from_vec([1, 1, 1, 2], vec![0.5f64, 0.9]).unwrap();
        let gy = Tensor4::full([1, 1, 1, 2], 2.0f64);
        let gx = sigmoid_backward(&y, &gy).unwrap();
        assert!((gx.data()[0] - 0.5).abs() < 1e-15);
        assert!((gx.data()[1] - 2.0 * 0.9 * 0.1).abs() < 1e-15);
    }
}
