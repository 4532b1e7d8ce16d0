use crate::error::{config_err, Result};
use crate::tensor::{Float, Tensor};

/// Sinusoid table of shape `[num_tokens, dim]`:
/// `pe[p, 2i] = sin(p / 10000^(2i/dim))`, `pe[p, 2i+1] = cos(p / 10000^(2i/dim))`.
pub fn sinusoid_pos_encoding<T: Float>(num_tokens: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(config_err!("sinusoid position encoding needs an even width, got {dim}"));
    }
    let mut data = Vec::with_capacity(num_tokens * dim);
    for p in 0..num_tokens {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Tensor::new(&[num_tokens, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_interleaves_sin_cos() {
        let pe = sinusoid_pos_encoding::<f64>(3, 6).unwrap();
        assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(
            sinusoid_pos_encoding::<f32>(4, 5),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn matches_closed_form() {
        let (n, d) = (17, 8);
        let pe = sinusoid_pos_encoding::<f64>(n, d).unwrap();
        for p in 0..n {
            for j in 0..d {
                let freq = 1.0 / 10000f64.powf((j - j % 2) as f64 / d as f64);
                let want = if j % 2 == 0 {
                    (p as f64 * freq).sin()
                } else {
                    (p as f64 * freq).cos()
                };
                assert!((pe.at(&[p, j]) - want).abs() < 1e-12);
                assert!(pe.at(&[p, j]).abs() <= 1.0);
            }
        }
    }
}
