//! Parametric models of a single Alice-Bob QKD fiber link.
//!
//! The default [`ChannelModel`] is defined through its anchor values: the
//! back-to-back value of each curve and its value at a reference distance
//! (25 km). Initialization time and secret key rate interpolate
//! geometrically between the anchors, which is the same curve as
//! `b2b * exp(±k * d)` with `k = ln(ref / b2b) / reference_km`, but evaluates
//! to the anchors exactly at `d = 0` and `d = reference_km`. QBER and
//! attenuation are linear.
//!
//! Everything here is pure and generic over [`Scalar`], so a model can be
//! evaluated in `f32` or `f64` and shared freely between threads.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkModelError {
    #[error("distance must be finite and non-negative, got {0} km")]
    NegativeDistance(f64),
    #[error("session duration must be finite and non-negative, got {0} s")]
    NegativeDuration(f64),
    #[error("QBER {0} at this distance is at or above 0.5; no key can be distilled")]
    QberTooHigh(f64),
    #[error("invalid channel parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

pub type Result<T, E = LinkModelError> = std::result::Result<T, E>;

/// Behaviour every link model provides. [`ChannelModel`] is the default
/// implementation; alternative functional forms only need these four curves.
pub trait LinkModel<T: Scalar> {
    fn attenuation_db(&self, distance_km: T) -> Result<T>;
    fn init_time_s(&self, distance_km: T) -> Result<T>;
    fn secret_key_rate_bps(&self, distance_km: T) -> Result<T>;
    fn qber(&self, distance_km: T) -> Result<T>;

    /// Whole secret bits produced by a session of `duration_s` seconds,
    /// the first `init_time_s(d)` of which yield nothing.
    fn key_bits_generated(&self, distance_km: T, duration_s: T) -> Result<u64> {
        if !duration_s.is_finite() || duration_s < T::zero() {
            return Err(LinkModelError::NegativeDuration(duration_s.to_f64_lossy()));
        }
        let init = self.init_time_s(distance_km)?;
        let rate = self.secret_key_rate_bps(distance_km)?;
        let generating = (duration_s - init).max(T::zero());
        let exact = rate * generating;
        // within a billionth of a whole bit counts as reached, so that time
        // stamps carrying rounding error still bank at the exact event time
        let nearest = exact.round();
        let tol = (T::epsilon() * T::of(16.0)).max(T::of(1e-9)) * exact.max(T::one());
        let bits = if (exact - nearest).abs() <= tol {
            nearest
        } else {
            exact.floor()
        };
        Ok(bits.to_u64().unwrap_or(u64::MAX))
    }
}

/// Sum of two exponentials, `lead_scale·e^(lead_rate·d) + tail_scale·e^(tail_rate·d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleExponential<T> {
    pub lead_scale: T,
    pub lead_rate: T,
    pub tail_scale: T,
    pub tail_rate: T,
}

impl<T: Scalar> DoubleExponential<T> {
    pub fn eval(&self, d: T) -> T {
        self.lead_scale * (self.lead_rate * d).exp() + self.tail_scale * (self.tail_rate * d).exp()
    }
}

/// Functional form used for the initialization-time curve.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum InitCurve<T> {
    /// Single exponential through the two anchors.
    #[default]
    Anchored,
    DoubleExponential(DoubleExponential<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    default,
    deny_unknown_fields,
    bound(
        serialize = "T: Serialize",
        deserialize = "T: Scalar + Deserialize<'de>"
    )
)]
pub struct ChannelModel<T> {
    /// Fiber attenuation, dB/km.
    pub atten_coeff: T,
    /// Initialization time at 0 km, s.
    pub init_time_b2b: T,
    /// Initialization time at `reference_km`, s.
    pub init_time_ref: T,
    /// Secret key rate at 0 km, bit/s.
    pub rate_b2b: T,
    /// Secret key rate at `reference_km`, bit/s.
    pub rate_ref: T,
    pub qber_b2b: T,
    pub qber_ref: T,
    pub reference_km: T,
    /// Quantum channel wavelength. Not used by any curve.
    pub wavelength_nm: T,
    pub init_curve: InitCurve<T>,
}

impl<T: Scalar> Default for ChannelModel<T> {
    fn default() -> Self {
        Self {
            atten_coeff: T::of(0.2),
            init_time_b2b: T::of(400.0),
            init_time_ref: T::of(1265.0),
            rate_b2b: T::of(4000.0),
            rate_ref: T::of(100.0),
            qber_b2b: T::of(0.010),
            qber_ref: T::of(0.053),
            reference_km: T::of(25.0),
            wavelength_nm: T::of(1552.0),
            init_curve: InitCurve::Anchored,
        }
    }
}

impl<T: Scalar> ChannelModel<T> {
    /// Build a model from growth/decay coefficients instead of anchors.
    /// The anchors at `reference_km` are derived from the coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn from_coefficients(
        atten_coeff: T,
        init_time_b2b: T,
        init_growth: T,
        rate_b2b: T,
        rate_decay: T,
        qber_b2b: T,
        qber_slope: T,
        reference_km: T,
    ) -> Result<Self> {
        let model = Self {
            atten_coeff,
            init_time_b2b,
            init_time_ref: init_time_b2b * (init_growth * reference_km).exp(),
            rate_b2b,
            rate_ref: rate_b2b * (-rate_decay * reference_km).exp(),
            qber_b2b,
            qber_ref: qber_b2b + qber_slope * reference_km,
            reference_km,
            wavelength_nm: T::of(1552.0),
            init_curve: InitCurve::Anchored,
        };
        model.validate()?;
        Ok(model)
    }

    /// Initialization-time exponential growth rate, per km.
    pub fn init_growth(&self) -> T {
        (self.init_time_ref / self.init_time_b2b).ln() / self.reference_km
    }

    /// Key-rate exponential decay rate, per km.
    pub fn rate_decay(&self) -> T {
        (self.rate_b2b / self.rate_ref).ln() / self.reference_km
    }

    /// QBER growth per km.
    pub fn qber_slope(&self) -> T {
        (self.qber_ref - self.qber_b2b) / self.reference_km
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("atten_coeff", self.atten_coeff),
            ("init_time_b2b", self.init_time_b2b),
            ("init_time_ref", self.init_time_ref),
            ("rate_b2b", self.rate_b2b),
            ("rate_ref", self.rate_ref),
            ("qber_b2b", self.qber_b2b),
            ("qber_ref", self.qber_ref),
            ("reference_km", self.reference_km),
            ("wavelength_nm", self.wavelength_nm),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < T::zero() {
                return Err(invalid(
                    name,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        for (name, v) in [
            ("init_time_b2b", self.init_time_b2b),
            ("init_time_ref", self.init_time_ref),
            ("rate_b2b", self.rate_b2b),
            ("rate_ref", self.rate_ref),
            ("reference_km", self.reference_km),
        ] {
            if v <= T::zero() {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        if self.init_time_ref < self.init_time_b2b {
            return Err(invalid(
                "init_time_ref",
                "must not be below init_time_b2b".into(),
            ));
        }
        if self.rate_ref > self.rate_b2b {
            return Err(invalid("rate_ref", "must not exceed rate_b2b".into()));
        }
        if self.qber_ref < self.qber_b2b {
            return Err(invalid("qber_ref", "must not be below qber_b2b".into()));
        }
        if self.qber_ref >= T::of(0.5) {
            return Err(invalid(
                "qber_ref",
                format!("must be below 0.5, got {}", self.qber_ref),
            ));
        }
        if let InitCurve::DoubleExponential(de) = self.init_curve {
            for (name, v) in [
                ("init_curve.lead_scale", de.lead_scale),
                ("init_curve.lead_rate", de.lead_rate),
                ("init_curve.tail_scale", de.tail_scale),
                ("init_curve.tail_rate", de.tail_rate),
            ] {
                if !v.is_finite() {
                    return Err(invalid(name, "must be finite".into()));
                }
            }
            if de.eval(T::zero()) <= T::zero() {
                return Err(invalid("init_curve", "must be positive at 0 km".into()));
            }
        }
        Ok(())
    }

    fn check_distance(&self, d: T) -> Result<T> {
        if !d.is_finite() || d < T::zero() {
            return Err(LinkModelError::NegativeDistance(d.to_f64_lossy()));
        }
        if d > self.reference_km {
            log::warn!(
                "distance {d} km lies beyond the {} km calibrated range",
                self.reference_km
            );
        }
        Ok(d)
    }

    /// Fraction of the way from 0 km to the reference distance.
    fn span_fraction(&self, d: T) -> T {
        d / self.reference_km
    }
}

fn invalid(name: &'static str, reason: String) -> LinkModelError {
    LinkModelError::InvalidParameter { name, reason }
}

/// `start^(1-t) · end^t`; exact at t = 0 and t = 1.
fn geometric<T: Scalar>(start: T, end: T, t: T) -> T {
    start.powf(T::one() - t) * end.powf(t)
}

fn linear<T: Scalar>(start: T, end: T, t: T) -> T {
    start * (T::one() - t) + end * t
}

impl<T: Scalar> LinkModel<T> for ChannelModel<T> {
    fn attenuation_db(&self, distance_km: T) -> Result<T> {
        let d = self.check_distance(distance_km)?;
        Ok(self.atten_coeff * d)
    }

    fn init_time_s(&self, distance_km: T) -> Result<T> {
        let d = self.check_distance(distance_km)?;
        Ok(match self.init_curve {
            InitCurve::Anchored => geometric(
                self.init_time_b2b,
                self.init_time_ref,
                self.span_fraction(d),
            ),
            InitCurve::DoubleExponential(de) => de.eval(d),
        })
    }

    fn secret_key_rate_bps(&self, distance_km: T) -> Result<T> {
        let d = self.check_distance(distance_km)?;
        Ok(geometric(
            self.rate_b2b,
            self.rate_ref,
            self.span_fraction(d),
        ))
    }

    fn qber(&self, distance_km: T) -> Result<T> {
        let d = self.check_distance(distance_km)?;
        let q = linear(self.qber_b2b, self.qber_ref, self.span_fraction(d));
        if q >= T::of(0.5) {
            return Err(LinkModelError::QberTooHigh(q.to_f64_lossy()));
        }
        Ok(q)
    }
}
