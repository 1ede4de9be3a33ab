use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    Focal,
    UnifiedMargin,
    GmSoftmax,
    LmSoftmax,
    Ldam,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::SoftmaxCe,
        LossKind::Focal,
        LossKind::UnifiedMargin,
        LossKind::GmSoftmax,
        LossKind::LmSoftmax,
        LossKind::Ldam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::Focal => "focal",
            LossKind::UnifiedMargin => "unified_margin",
            LossKind::GmSoftmax => "gm_softmax",
            LossKind::LmSoftmax => "lm_softmax",
            LossKind::Ldam => "ldam",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Base loss and its hyperparameters.
///
/// Hyperparameters are plain `f64` regardless of the scalar type the loss is
/// evaluated in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Inverse temperature applied to every logit.
    pub s: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub focal_gamma: f64,
    /// LDAM margin constant; `None` picks C so the largest class margin is 0.5.
    #[serde(rename = "ldam_C", skip_serializing_if = "Option::is_none")]
    pub ldam_c: Option<f64>,
    pub normalize_features: bool,
    pub normalize_prototypes: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::SoftmaxCe,
            s: 1.0,
            m1: 1.0,
            m2: 0.0,
            m3: 0.0,
            alpha1: 1.0,
            alpha2: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            focal_gamma: 0.0,
            ldam_c: None,
            normalize_features: false,
            normalize_prototypes: false,
        }
    }
}

impl LossSpec {
    /// Plain cross-entropy on raw inner products.
    pub fn softmax_ce() -> Self {
        Self::default()
    }

    fn normalized(kind: LossKind, s: f64) -> Self {
        Self { kind, s, normalize_features: true, normalize_prototypes: true, ..Self::default() }
    }

    pub fn focal(gamma: f64) -> Self {
        Self { kind: LossKind::Focal, focal_gamma: gamma, ..Self::default() }
    }

    pub fn unified(s: f64, m1: f64, m2: f64, m3: f64) -> Self {
        Self { m1, m2, m3, ..Self::normalized(LossKind::UnifiedMargin, s) }
    }

    pub fn normface(s: f64) -> Self {
        Self::unified(s, 1.0, 0.0, 0.0)
    }

    pub fn cosface(s: f64, m3: f64) -> Self {
        Self::unified(s, 1.0, 0.0, m3)
    }

    pub fn arcface(s: f64, m2: f64) -> Self {
        Self::unified(s, 1.0, m2, 0.0)
    }

    /// Multiplicative angular margin with feature normalization.
    pub fn sphereface_fn(s: f64, m1: f64) -> Self {
        Self::unified(s, m1, 0.0, 0.0)
    }

    pub fn gm_softmax(s: f64, alpha1: f64, alpha2: f64, beta1: f64, beta2: f64) -> Self {
        Self { alpha1, alpha2, beta1, beta2, ..Self::normalized(LossKind::GmSoftmax, s) }
    }

    pub fn lm_softmax(s: f64) -> Self {
        Self::normalized(LossKind::LmSoftmax, s)
    }

    pub fn ldam(s: f64, c: Option<f64>) -> Self {
        Self { ldam_c: c, ..Self::normalized(LossKind::Ldam, s) }
    }

    pub fn with_normalization(mut self, features: bool, prototypes: bool) -> Self {
        self.normalize_features = features;
        self.normalize_prototypes = prototypes;
        self
    }

    pub fn with_scale(mut self, s: f64) -> Self {
        self.s = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("s", self.s),
            ("m1", self.m1),
            ("m2", self.m2),
            ("m3", self.m3),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("focal_gamma", self.focal_gamma),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidSpec(format!("{name} must be finite")));
        }
        if !(self.s > 0.0) {
            return Err(Error::InvalidSpec(format!("s must be positive, got {}", self.s)));
        }
        match self.kind {
            LossKind::SoftmaxCe | LossKind::LmSoftmax => {}
            LossKind::Focal => {
                if self.focal_gamma < 0.0 {
                    return Err(Error::InvalidSpec(format!("focal_gamma must be >= 0, got {}", self.focal_gamma)));
                }
            }
            LossKind::UnifiedMargin => {
                if !(self.normalize_features && self.normalize_prototypes) {
                    return Err(Error::InvalidSpec(
                        "unified_margin requires normalize_features and normalize_prototypes".into(),
                    ));
                }
                if self.m1 < 1.0 {
                    return Err(Error::InvalidSpec(format!("m1 must be >= 1, got {}", self.m1)));
                }
                if !(0.0..=FRAC_PI_2).contains(&self.m2) {
                    return Err(Error::InvalidSpec(format!("m2 must lie in [0, pi/2], got {}", self.m2)));
                }
                if self.m3 < 0.0 {
                    return Err(Error::InvalidSpec(format!("m3 must be >= 0, got {}", self.m3)));
                }
            }
            LossKind::GmSoftmax => {
                if self.alpha1 < 0.5 {
                    return Err(Error::InvalidSpec(format!("alpha1 must be >= 1/2, got {}", self.alpha1)));
                }
                if self.alpha2 > self.alpha1 {
                    return Err(Error::InvalidSpec(format!(
                        "alpha2 ({}) must not exceed alpha1 ({})",
                        self.alpha2, self.alpha1
                    )));
                }
            }
            LossKind::Ldam => {
                if let Some(c) = self.ldam_c {
                    if !(c > 0.0) || !c.is_finite() {
                        return Err(Error::InvalidSpec(format!("ldam_C must be positive, got {c}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Weights of the sample-margin and zero-centroid regularizers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSpec {
    pub mu_sm: f64,
    pub use_mean_variant: bool,
    pub lambda_w: f64,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sample_margin(mu: f64) -> Self {
        Self { mu_sm: mu, ..Self::default() }
    }

    pub fn zero_centroid(lambda: f64) -> Self {
        Self { lambda_w: lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu_sm", self.mu_sm), ("lambda_w", self.lambda_w)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}
