use crate::error::{Error, Result};

pub const DEFAULT_TIME_DIM: usize = 16;

/// Sinusoidal encoding of an integer diffusion time.
///
/// Entry `2k` is `sin(t·ω_k)` and entry `2k+1` is `cos(t·ω_k)` with
/// geometric frequencies `ω_k = 10000^(-2k/dim)`.
pub fn time_encoding(t: usize, steps: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::invalid(format!("time encoding dim must be even and positive, got {dim}")));
    }
    if t > steps {
        return Err(Error::invalid(format!("time {t} outside [0, {steps}]")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * k) as f64) / dim as f64);
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_is_sin_zero_cos_one() {
        let e = time_encoding(0, 500, 16).unwrap();
        for k in 0..8 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn bounded_for_all_times() {
        for t in 0..=1000 {
            assert!(time_encoding(t, 1000, 16).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn first_hundred_times_pairwise_distinct() {
        let enc: Vec<Vec<f64>> = (1..=100).map(|t| time_encoding(t, 100, 16).unwrap()).collect();
        for a in 0..enc.len() {
            for b in a + 1..enc.len() {
                let d: f64 = enc[a].iter().zip(&enc[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-6, "t={} and t={} collide", a + 1, b + 1);
            }
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(time_encoding(3, 10, 15).is_err());
        assert!(time_encoding(11, 10, 16).is_err());
    }
}
