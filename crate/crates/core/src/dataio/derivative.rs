use crate::error::{Error, Result};

/// Centered moving average; the window shrinks symmetrically at the ends.
/// Windows of 0 or 1 return the signal unchanged.
pub fn moving_average(signal: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return signal.to_vec();
    }
    let half = window / 2;
    let n = signal.len();
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let s = &signal[i - h..=i + h];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

/// Central differences inside. The ends use the four-point one-sided
/// stencil (third order) when N >= 4 and the three-point one otherwise, so
/// polynomials up to degree 2 are differentiated exactly everywhere.
pub fn differentiate(signal: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 3 {
        return Err(Error::Empty(format!("derivative estimation needs at least 3 samples, got {n}")));
    }
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = (signal[i + 1] - signal[i - 1]) / (2.0 * dt);
    }
    let f = signal;
    if n >= 4 {
        out[0] = (-11.0 * f[0] + 18.0 * f[1] - 9.0 * f[2] + 2.0 * f[3]) / (6.0 * dt);
        out[n - 1] = (11.0 * f[n - 1] - 18.0 * f[n - 2] + 9.0 * f[n - 3] - 2.0 * f[n - 4]) / (6.0 * dt);
    } else {
        out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dt);
        out[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * dt);
    }
    Ok(out)
}

/// Column-wise derivative of a sequence of fixed-width vectors.
pub fn differentiate_columns<const D: usize>(rows: &[[f64; D]], dt: f64, window: usize) -> Result<Vec<[f64; D]>> {
    let mut out = vec![[0.0; D]; rows.len()];
    for j in 0..D {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let d = differentiate(&moving_average(&col, window), dt)?;
        for (o, v) in out.iter_mut().zip(d) {
            o[j] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let dt = 0.1;
        let s: Vec<f64> = (0..20).map(|i| {
            let t = i as f64 * dt;
            2.0 * t * t - t + 3.0
        }).collect();
        let d = differentiate(&s, dt).unwrap();
        for (i, v) in d.iter().enumerate() {
            let t = i as f64 * dt;
            assert!((v - (4.0 * t - 1.0)).abs() < 1e-11);
        }
    }

    #[test]
    fn moving_average_keeps_constants_and_ends() {
        let s = [1.0, 2.0, 3.0, 10.0, 5.0];
        let m = moving_average(&s, 3);
        assert_eq!(m[0], 1.0);
        assert_eq!(m[4], 5.0);
        assert_eq!(m[1], 2.0);
        assert_eq!(moving_average(&[4.0; 6], 5), vec![4.0; 6]);
    }

    #[test]
    fn three_samples_use_the_short_stencil() {
        let d = differentiate(&[0.0, 0.01, 0.04], 0.1).unwrap();
        for (i, v) in d.iter().enumerate() {
            assert!((v - 2.0 * i as f64 * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(differentiate(&[1.0, 2.0], 0.1).is_err());
    }
}
