use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::collective::{closed_form, CollectiveAlgo, CollectiveKind};
use super::TierKind;
use crate::{Error, Result};

/// A measured collective: group size, payload bytes, observed seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    pub p: u64,
    pub bytes: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkFit {
    /// Seconds per handshake step.
    pub alpha: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Root-mean-square residual in seconds.
    pub rms_residual: f64,
}

/// Least-squares fit of `alpha` and `1 / bandwidth` to samples of one
/// collective. The closed forms are linear in both unknowns.
pub fn calibrate_links(samples: &[LinkSample], kind: CollectiveKind, algo: CollectiveAlgo, tier: TierKind) -> Result<LinkFit> {
    // Coefficients: steps from (alpha = 1, b = inf), transfer from (alpha = 0, b = 1).
    let rows: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|s| {
            let a = closed_form(kind, algo, tier, s.p, 0.0, 1.0, 1.0);
            let b = closed_form(kind, algo, tier, s.p, s.bytes, 0.0, 1.0);
            (a, b, s.seconds)
        })
        .collect();
    let (mut saa, mut sab, mut sbb, mut say, mut sby) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(a, b, y) in &rows {
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        say += a * y;
        sby += b * y;
    }
    let det = saa * sbb - sab * sab;
    let scale = (saa * sbb).max(f64::MIN_POSITIVE);
    if rows.len() < 2 || !(libm::fabs(det) > 1e-12 * scale) {
        return Err(Error::config(format!("{} samples do not determine both link parameters", rows.len())));
    }
    let alpha = (say * sbb - sby * sab) / det;
    let inv_b = (saa * sby - sab * say) / det;
    if !(inv_b > 0.0) {
        return Err(Error::config("fitted bandwidth is not positive"));
    }
    let sq: f64 = rows.iter().map(|&(a, b, y)| (a * alpha + b * inv_b - y) * (a * alpha + b * inv_b - y)).sum();
    Ok(LinkFit { alpha, bandwidth: 1.0 / inv_b, rms_residual: libm::sqrt(sq / rows.len() as f64) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(p: u64, bytes: f64, alpha: f64, b: f64) -> LinkSample {
        LinkSample { p, bytes, seconds: closed_form(CollectiveKind::AllReduce, CollectiveAlgo::Ring, TierKind::Ring, p, bytes, alpha, b) }
    }

    #[test]
    fn two_points_recover_exactly() {
        let s = [sample(4, 1e6, 5e-6, 1e11), sample(8, 1e8, 5e-6, 1e11)];
        let f = calibrate_links(&s, CollectiveKind::AllReduce, CollectiveAlgo::Ring, TierKind::Ring).unwrap();
        assert!((f.alpha - 5e-6).abs() < 1e-15);
        assert!((f.bandwidth / 1e11 - 1.0).abs() < 1e-9);
        assert!(f.rms_residual < 1e-15);
    }

    #[test]
    fn single_point_is_underdetermined() {
        let s = [sample(4, 1e6, 5e-6, 1e11)];
        assert!(calibrate_links(&s, CollectiveKind::AllReduce, CollectiveAlgo::Ring, TierKind::Ring).is_err());
    }
}
