use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/C))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/C))`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even embedding dim, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(T::of(angle.sin()));
            data.push(T::of(angle.cos()));
        }
    }
    Tensor::from_vec(&[len, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row() {
        let pe = positional_encoding::<f64>(4, 8).unwrap();
        for (j, &v) in pe.slab(0).iter().enumerate() {
            assert_eq!(v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn known_values_and_range() {
        let pe = positional_encoding::<f64>(50, 16).unwrap();
        assert!((pe.data()[16] - 0.841_471).abs() < 1e-5);
        assert!((pe.data()[17] - 0.540_302).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(positional_encoding::<f32>(3, 5), Err(Error::Config(_))));
    }

    #[test]
    fn rows_are_distinct() {
        let pe = positional_encoding::<f64>(10_000, 16).unwrap();
        let mut rows: Vec<Vec<u64>> = pe
            .data()
            .chunks(16)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 10_000);
    }
}
