//! Gradient obfuscation applied to updates before they leave a client.
//!
//! Three mechanisms: Gaussian noise addition, clipping (element-wise value
//! clamping or whole-vector L2 rescaling), and magnitude pruning. All
//! transforms preserve the vector length and spec fingerprint, and are pure
//! given the RNG stream.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GradientVector;

/// Which obfuscation a client applies to its shared update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DpPolicy {
    #[default]
    None,
    GaussianNoise {
        sigma: f64,
    },
    ValueClip {
        clip_bound: f64,
    },
    NormClip {
        clip_bound: f64,
    },
    Prune {
        sparsity: f64,
    },
}

impl DpPolicy {
    /// Check the mode's parameter range; returns a field-path message on
    /// violation so config validation can aggregate them.
    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            DpPolicy::None => Ok(()),
            DpPolicy::GaussianNoise { sigma } => {
                if sigma.is_finite() && sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(format!("dp.sigma: must be finite and >= 0, got {sigma}"))
                }
            }
            DpPolicy::ValueClip { clip_bound } | DpPolicy::NormClip { clip_bound } => {
                if clip_bound.is_finite() && clip_bound > 0.0 {
                    Ok(())
                } else {
                    Err(format!(
                        "dp.clip_bound: must be finite and > 0, got {clip_bound}"
                    ))
                }
            }
            DpPolicy::Prune { sparsity } => {
                if (0.0..1.0).contains(&sparsity) {
                    Ok(())
                } else {
                    Err(format!("dp.sparsity: must be in [0, 1), got {sparsity}"))
                }
            }
        }
    }
}

/// Clipping flavor: per-coordinate clamp or whole-vector L2 rescale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    Value,
    Norm,
}

/// Add `N(0, sigma^2)` noise to every coordinate.
pub fn add_gaussian_noise<R: Rng>(
    g: &GradientVector,
    sigma: f64,
    rng: &mut R,
) -> Result<GradientVector> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidArgument {
            name: "sigma",
            reason: format!("must be finite and >= 0, got {sigma}"),
        });
    }
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let values = g.values().iter().map(|v| v + normal.sample(rng)).collect();
    g.with_values(values)
}

/// Clamp coordinates to `[-bound, bound]` (value mode) or rescale the whole
/// vector by `min(1, bound / ||g||_2)` (norm mode).
pub fn clip(g: &GradientVector, bound: f64, mode: ClipMode) -> Result<GradientVector> {
    if !bound.is_finite() || bound <= 0.0 {
        return Err(Error::InvalidArgument {
            name: "bound",
            reason: format!("must be finite and > 0, got {bound}"),
        });
    }
    let values = match mode {
        ClipMode::Value => g.values().iter().map(|v| v.clamp(-bound, bound)).collect(),
        ClipMode::Norm => {
            let norm = g.l2_norm();
            if norm <= bound {
                return Ok(g.clone());
            }
            let scale = bound / norm;
            g.values().iter().map(|v| v * scale).collect()
        }
    };
    g.with_values(values)
}

/// Zero the `floor(sparsity * len)` coordinates of smallest magnitude.
/// Ties are broken by pruning the lower index first; surviving
/// coordinates keep their exact value.
pub fn prune(g: &GradientVector, sparsity: f64) -> Result<GradientVector> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument {
            name: "sparsity",
            reason: format!("must be in [0, 1), got {sparsity}"),
        });
    }
    let len = g.len();
    let k = (sparsity * len as f64).floor() as usize;
    if k == 0 {
        return Ok(g.clone());
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        g.values()[a]
            .abs()
            .total_cmp(&g.values()[b].abs())
            .then(a.cmp(&b))
    });
    let mut values = g.values().to_vec();
    for &i in &order[..k] {
        values[i] = 0.0;
    }
    g.with_values(values)
}

/// Dispatch to the policy's transform; `None` is the identity.
pub fn apply_policy<R: Rng>(
    g: &GradientVector,
    policy: &DpPolicy,
    rng: &mut R,
) -> Result<GradientVector> {
    match *policy {
        DpPolicy::None => Ok(g.clone()),
        DpPolicy::GaussianNoise { sigma } => add_gaussian_noise(g, sigma, rng),
        DpPolicy::ValueClip { clip_bound } => clip(g, clip_bound, ClipMode::Value),
        DpPolicy::NormClip { clip_bound } => clip(g, clip_bound, ClipMode::Norm),
        DpPolicy::Prune { sparsity } => prune(g, sparsity),
    }
}
