//! Wind-to-power conversion through a two-input statistical power curve:
//! normalized power (0..100) as a logistic function of hub-height speed
//! whose midpoint shifts linearly with the above-hub shear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MideError, Result};

/// `power(v, s) = 100 * sigmoid((v - (v_half_base + v_half_shear * s)) / width)`,
/// clipped to [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerCurve {
    pub v_half_base: f64,
    pub v_half_shear: f64,
    pub width: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl PowerCurve {
    /// Point conversion of a hub-height speed and above-hub shear.
    pub fn power(&self, hub_speed: f64, shear_above: f64) -> f64 {
        let mid = self.v_half_base + self.v_half_shear * shear_above;
        (100.0 * sigmoid((hub_speed - mid) / self.width)).clamp(0.0, 100.0)
    }

    /// Monte Carlo mean power under a Gaussian hub-speed forecast
    /// (`draws` samples, speeds floored at zero).
    pub fn power_mc(&self, mean: f64, sd: f64, shear_above: f64, draws: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = 0.0;
        for _ in 0..draws.max(1) {
            let v = (mean + sd * rng.sample::<f64, _>(StandardNormal)).max(0.0);
            acc += self.power(v, shear_above);
        }
        acc / draws.max(1) as f64
    }
}

/// Least-squares fit of the logistic curve by damped Gauss-Newton.
/// Returns the curve and the training RMSE. Emits a warning (in the error
/// message of the `Err` case only for hard failures) when the speed range
/// does not span the cut-in-to-rated region.
pub fn fit_power_curve(rows: &[(f64, f64, f64)]) -> Result<(PowerCurve, f64)> {
    if rows.len() < 50 {
        return Err(MideError::Data(format!(
            "power-curve fit needs at least 50 rows, got {}",
            rows.len()
        )));
    }
    // Initial midpoint: speed whose power is closest to 50.
    let mut init_mid = 8.0;
    let mut best_gap = f64::INFINITY;
    for &(v, _, p) in rows {
        if (p - 50.0).abs() < best_gap {
            best_gap = (p - 50.0).abs();
            init_mid = v;
        }
    }
    let mut a = init_mid;
    let mut b = 0.0;
    let mut log_w = 1.2f64.ln();

    let objective = |a: f64, b: f64, log_w: f64| -> f64 {
        let w = log_w.exp();
        rows.iter()
            .map(|&(v, s, p)| {
                let r = 100.0 * sigmoid((v - a - b * s) / w) - p;
                r * r
            })
            .sum()
    };
    let mut damping = 1e-3;
    let mut sse = objective(a, b, log_w);
    for _ in 0..300 {
        // Gauss-Newton normal equations for (a, b, log_w).
        let w = log_w.exp();
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for &(v, s, p) in rows {
            let u = (v - a - b * s) / w;
            let sig = sigmoid(u);
            let r = 100.0 * sig - p;
            let dsig = 100.0 * sig * (1.0 - sig);
            let j = [-dsig / w, -dsig * s / w, -dsig * u]; // d/d log_w = dsig * (-u)
            for x in 0..3 {
                jtr[x] += j[x] * r;
                for y in 0..3 {
                    jtj[x][y] += j[x] * j[y];
                }
            }
        }
        // Solve (JtJ + damping I) delta = -Jtr by hand (3x3).
        for (x, row) in jtj.iter_mut().enumerate() {
            row[x] += damping * (row[x].max(1e-12));
        }
        let m = nalgebra::Matrix3::from_fn(|r, c| jtj[r][c]);
        let rhs = nalgebra::Vector3::new(-jtr[0], -jtr[1], -jtr[2]);
        let delta = match m.lu().solve(&rhs) {
            Some(d) => d,
            None => break,
        };
        let (na, nb, nw) = (a + delta[0], b + delta[1], log_w + delta[2]);
        let new_sse = objective(na, nb, nw);
        if new_sse.is_finite() && new_sse < sse {
            a = na;
            b = nb;
            log_w = nw.clamp(-3.0, 3.0);
            let rel = (sse - new_sse) / sse.max(1e-12);
            sse = new_sse;
            damping = (damping * 0.5).max(1e-9);
            if rel < 1e-12 {
                break;
            }
        } else {
            damping *= 10.0;
            if damping > 1e6 {
                break;
            }
        }
    }
    let curve = PowerCurve {
        v_half_base: a,
        v_half_shear: b,
        width: log_w.exp(),
    };
    let rmse = (sse / rows.len() as f64).sqrt();
    Ok((curve, rmse))
}

/// Coverage warning for training data that does not span the cut-in-to-rated
/// region (roughly power 5..95).
pub fn span_warning(rows: &[(f64, f64, f64)]) -> Option<String> {
    let pmin = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let pmax = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    if pmin > 5.0 || pmax < 95.0 {
        Some(format!(
            "power training data spans output {pmin:.1}..{pmax:.1}; the fitted curve extrapolates \
             outside that range"
        ))
    } else {
        None
    }
}

/// Synthetic power-curve training rows from a documented logistic ground
/// truth (IEC-like shape: cut-in near 3 m/s, rated near 11 m/s, midpoint
/// 7 + 2.5 * shear, width 1.2), with Gaussian output noise of 0.5 units.
pub fn synthetic_training_rows(n: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let truth = PowerCurve {
        v_half_base: 7.0,
        v_half_shear: 2.5,
        width: 1.2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v = rng.gen_range(0.0..25.0);
            let s = rng.gen_range(-0.1..0.5);
            let p = (truth.power(v, s) + 0.5 * rng.sample::<f64, _>(StandardNormal))
                .clamp(0.0, 100.0);
            (v, s, p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn below_cutin_and_rated_saturation() {
        let rows = synthetic_training_rows(600, 4);
        let (curve, _) = fit_power_curve(&rows).unwrap();
        assert!(curve.power(0.0, 0.2) < 1.0, "{}", curve.power(0.0, 0.2));
        assert!(curve.power(24.0, 0.2) > 99.0);
        // Nondecreasing in speed.
        let mut last = -1.0;
        for k in 0..100 {
            let p = curve.power(k as f64 * 0.25, 0.1);
            assert!(p >= last - 1e-9);
            last = p;
        }
    }

    #[test]
    fn recovers_synthetic_truth_within_tolerance() {
        let rows = synthetic_training_rows(800, 11);
        let (curve, rmse) = fit_power_curve(&rows).unwrap();
        assert!(
            (curve.v_half_base - 7.0).abs() / 7.0 < 0.05,
            "v_half {}",
            curve.v_half_base
        );
        assert!(
            (curve.v_half_shear - 2.5).abs() / 2.5 < 0.05,
            "shear slope {}",
            curve.v_half_shear
        );
        assert!((curve.width - 1.2).abs() / 1.2 < 0.05, "width {}", curve.width);
        assert!(rmse < 1.0, "rmse {rmse}");
    }

    #[test]
    fn mc_mean_close_to_point_at_small_sd() {
        let curve = PowerCurve {
            v_half_base: 7.0,
            v_half_shear: 2.5,
            width: 1.2,
        };
        let point = curve.power(9.0, 0.1);
        let mc = curve.power_mc(9.0, 1e-6, 0.1, 500, 3);
        assert!((point - mc).abs() < 1e-3);
        // Output always inside [0, 100].
        for v in [-5.0, 0.0, 7.0, 40.0] {
            let p = curve.power(v, 0.0);
            assert!((0.0..=100.0).contains(&p));
        }
    }

    #[test]
    fn warns_on_unspanned_range() {
        let rows: Vec<(f64, f64, f64)> = (0..100)
            .map(|i| (i as f64 * 0.04, 0.1, 2.0 + 0.01 * i as f64))
            .collect();
        assert!(span_warning(&rows).is_some());
        let full = synthetic_training_rows(500, 9);
        assert!(span_warning(&full).is_none());
    }
}
