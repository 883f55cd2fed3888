//! Model configuration and fixed hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{GeoWarpError, Result};

/// Model family. Everything except `Full` is a parsimonious restriction that
/// fixes or removes parameter blocks of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    #[serde(alias = "no-warp")]
    NoWarp,
    Cv,
    #[serde(alias = "no-warp-cv")]
    NoWarpCv,
    #[serde(alias = "vert-cv")]
    VertCv,
    #[serde(rename = "wncv", alias = "whitenoisecv", alias = "wn-cv")]
    WhiteNoiseCv,
}

/// How the deviation process turns coordinates into correlations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// Matérn on the warped 3-D distance.
    Warped,
    /// Matérn on the warped vertical distance, zero across distinct columns.
    VerticalOnly,
    /// Independent deviations.
    WhiteNoise,
}

/// Which warping parameters are free.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpMode {
    /// Bernstein AWUs on every axis plus the geometric unit.
    Full,
    /// One shared increment per axis (linear warping), identity `R`.
    Linear,
    /// Vertical AWU only.
    VerticalOnly,
    /// No warping parameters.
    None,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoWarp,
        Variant::Cv,
        Variant::NoWarpCv,
        Variant::VertCv,
        Variant::WhiteNoiseCv,
    ];

    /// Whether the log-variance varies with depth.
    pub fn varying_variance(self) -> bool {
        matches!(self, Variant::Full | Variant::NoWarp)
    }

    pub fn warp_mode(self) -> WarpMode {
        match self {
            Variant::Full | Variant::Cv => WarpMode::Full,
            Variant::NoWarp | Variant::NoWarpCv => WarpMode::Linear,
            Variant::VertCv => WarpMode::VerticalOnly,
            Variant::WhiteNoiseCv => WarpMode::None,
        }
    }

    pub fn kernel(self) -> KernelKind {
        match self {
            Variant::VertCv => KernelKind::VerticalOnly,
            Variant::WhiteNoiseCv => KernelKind::WhiteNoise,
            _ => KernelKind::Warped,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWarp => "nowarp",
            Variant::Cv => "cv",
            Variant::NoWarpCv => "nowarpcv",
            Variant::VertCv => "vertcv",
            Variant::WhiteNoiseCv => "wncv",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name.to_ascii_lowercase())
            .ok_or_else(|| GeoWarpError::config(format!("unknown model variant `{name}`")))
    }
}

/// How the log-likelihood gradient is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    FiniteDifference,
}

/// Fixed prior hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparameters {
    pub a_eps: f64,
    pub b_eps: f64,
    pub sigma_alpha_sq: f64,
    pub a_beta: f64,
    pub b_beta: f64,
    pub sigma_eta_sq: f64,
    pub a_zeta: f64,
    pub b_zeta: f64,
    pub sigma_ell_sq: f64,
    /// Lower bound of each horizontal inverse length scale (1/m).
    pub gamma_minus: Vec<f64>,
    /// Upper bound of each horizontal inverse length scale (1/m).
    pub gamma_plus: Vec<f64>,
    pub a_gamma_vert: f64,
    pub b_gamma_vert: f64,
    pub rho_r: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            a_eps: 2.437,
            b_eps: 0.544,
            sigma_alpha_sq: 100.0,
            a_beta: 0.166,
            b_beta: 8.932e-7,
            sigma_eta_sq: 100.0,
            a_zeta: 0.166,
            b_zeta: 8.932e-7,
            sigma_ell_sq: 1.0,
            gamma_minus: vec![1.0 / 200.0; 2],
            gamma_plus: vec![1.0 / 0.5; 2],
            a_gamma_vert: 1.01,
            b_gamma_vert: 0.01,
            rho_r: 6.0,
        }
    }
}

/// Structural model choices plus hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub delta_mu: f64,
    pub delta_sigma: f64,
    pub nu: f64,
    /// AWU orders `L_1, .., L_{D+1}`; the last entry is the vertical axis.
    pub awu_orders: Vec<usize>,
    pub tie_horizontal_awus: bool,
    pub variant: Variant,
    pub include_variance_boundary_knots: bool,
    pub gradient: GradientMode,
    pub hyper: Hyperparameters,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            delta_mu: 0.1,
            delta_sigma: 1.0,
            nu: 1.5,
            awu_orders: vec![2, 2, 20],
            tie_horizontal_awus: false,
            variant: Variant::Full,
            include_variance_boundary_knots: true,
            gradient: GradientMode::Analytic,
            hyper: Hyperparameters::default(),
        }
    }
}

impl ModelConfig {
    /// Horizontal dimension implied by the AWU orders.
    pub fn dim(&self) -> usize {
        self.awu_orders.len().saturating_sub(1)
    }

    /// Adapts the AWU orders and horizontal bounds to a dataset with `dim`
    /// horizontal coordinates by repeating or dropping horizontal entries.
    pub fn with_dim(mut self, dim: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(GeoWarpError::config(format!(
                "horizontal dimension must be 1 or 2, got {dim}"
            )));
        }
        if self.awu_orders.len() < 2 {
            return Err(GeoWarpError::config("awu_orders needs at least two entries"));
        }
        if self.awu_orders.len() != dim + 1 {
            let vert = *self.awu_orders.last().unwrap();
            let horiz = self.awu_orders[0];
            self.awu_orders = vec![horiz; dim];
            self.awu_orders.push(vert);
        }
        for v in [&mut self.hyper.gamma_minus, &mut self.hyper.gamma_plus] {
            let first = v.first().copied().unwrap_or(f64::NAN);
            v.resize(dim, first);
            v.truncate(dim);
        }
        if dim == 1 {
            self.tie_horizontal_awus = false;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if !(1..=2).contains(&dim) {
            return Err(GeoWarpError::config(format!(
                "awu_orders must have 2 or 3 entries, got {}",
                self.awu_orders.len()
            )));
        }
        let positive = [
            ("delta_mu", self.delta_mu),
            ("delta_sigma", self.delta_sigma),
            ("nu", self.nu),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(GeoWarpError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.awu_orders.iter().any(|&l| l == 0) {
            return Err(GeoWarpError::config("all AWU orders must be at least 1"));
        }
        if self.tie_horizontal_awus && dim == 2 && self.awu_orders[0] != self.awu_orders[1] {
            return Err(GeoWarpError::config("tied horizontal AWUs need equal orders"));
        }
        for (name, v) in [("delta_mu", self.delta_mu), ("delta_sigma", self.delta_sigma)] {
            if (v * 1e6 - (v * 1e6).round()).abs() > 1e-6 {
                return Err(GeoWarpError::config(format!(
                    "{name} must be a whole number of micrometres"
                )));
            }
        }
        self.hyper.validate(dim)
    }
}

impl Hyperparameters {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let scalars = [
            ("a_eps", self.a_eps),
            ("b_eps", self.b_eps),
            ("sigma_alpha_sq", self.sigma_alpha_sq),
            ("a_beta", self.a_beta),
            ("b_beta", self.b_beta),
            ("sigma_eta_sq", self.sigma_eta_sq),
            ("a_zeta", self.a_zeta),
            ("b_zeta", self.b_zeta),
            ("sigma_ell_sq", self.sigma_ell_sq),
            ("a_gamma_vert", self.a_gamma_vert),
            ("b_gamma_vert", self.b_gamma_vert),
            ("rho_r", self.rho_r),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v > 0.0) {
                return Err(GeoWarpError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.gamma_minus.len() != dim || self.gamma_plus.len() != dim {
            return Err(GeoWarpError::config(format!(
                "gamma_minus/gamma_plus need {dim} entries"
            )));
        }
        for (lo, hi) in self.gamma_minus.iter().zip(&self.gamma_plus) {
            if !(lo.is_finite() && *lo > 0.0 && hi.is_finite() && hi > lo) {
                return Err(GeoWarpError::config(format!(
                    "horizontal bounds need 0 < gamma_minus < gamma_plus, got {lo} and {hi}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        let one = ModelConfig::default().with_dim(1).unwrap();
        assert_eq!(one.awu_orders, vec![2, 20]);
        assert_eq!(one.hyper.gamma_plus.len(), 1);
        one.validate().unwrap();
    }

    #[test]
    fn empty_json_gives_defaults() {
        let cfg: ModelConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ModelConfig::default());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        assert!(Variant::parse("linear").is_err());
    }
}
