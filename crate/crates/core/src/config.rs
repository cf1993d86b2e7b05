//! Pipeline configuration, readable from `key = value` text.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::global_field::{GlobalParams, GradientBlend};
use crate::gp::KernelParams;
use crate::local_field::LocalParams;
use crate::test_points::TestPointConfig;
use crate::frame::PropertyKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub voxel_size: f64,
    /// Kernel length scale (m); `None` means three voxels.
    pub length_scale: Option<f64>,
    pub sigma2: f64,
    pub noise2: f64,
    pub band_width: usize,
    pub normal_reach: usize,
    pub normal_k: usize,
    pub q: usize,
    pub lambda: f64,
    /// Distance cap (m); `None` means three length scales.
    pub d_max: Option<f64>,
    pub weight_cap: f64,
    /// Half-width of the band (in voxels) that marks voxels observed.
    pub surface_band: f64,
    /// Search radius (in voxels) for the sign of global queries.
    pub sign_radius: i32,
    pub property: PropertyKind,
    pub property_min: f64,
    pub property_max: f64,
    pub gradient: GradientBlend,
    /// Train every changed global node at the end of each frame instead of
    /// on first query.
    pub eager_train: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            voxel_size: 0.05,
            length_scale: None,
            sigma2: 1.0,
            noise2: 1e-3,
            band_width: 3,
            normal_reach: 3,
            normal_k: 10,
            q: 3,
            lambda: 100.0,
            d_max: None,
            weight_cap: 100.0,
            surface_band: 2.0,
            sign_radius: 5,
            property: PropertyKind::None,
            property_min: 0.0,
            property_max: 1.0,
            gradient: GradientBlend::default(),
            eager_train: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "voxel_size",
    "length_scale",
    "sigma2",
    "noise2",
    "band_width",
    "normal_reach",
    "normal_k",
    "q",
    "lambda",
    "d_max",
    "weight_cap",
    "surface_band",
    "sign_radius",
    "property",
    "property_min",
    "property_max",
    "gradient",
    "eager_train",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn optional(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl PipelineConfig {
    pub fn length_scale(&self) -> f64 {
        self.length_scale.unwrap_or(3.0 * self.voxel_size)
    }

    pub fn kernel(&self) -> KernelParams {
        let mut k = KernelParams::new(self.sigma2, self.length_scale(), self.noise2);
        if let Some(d) = self.d_max {
            k.max_distance = d;
        }
        k
    }

    pub fn channels(&self) -> usize {
        self.property.channels()
    }

    pub fn property_range(&self) -> (f64, f64) {
        (self.property_min, self.property_max)
    }

    pub fn local_params(&self) -> LocalParams {
        LocalParams {
            kernel: self.kernel(),
            channels: self.channels(),
            property_range: self.property_range(),
        }
    }

    pub fn global_params(&self) -> GlobalParams {
        GlobalParams {
            kernel: self.kernel(),
            q: self.q,
            lambda: self.lambda,
            gradient: self.gradient,
            sign_radius: self.sign_radius,
            channels: self.channels(),
            property_range: self.property_range(),
        }
    }

    pub fn test_point_config(&self) -> TestPointConfig {
        TestPointConfig {
            band_width: self.band_width,
            normal_reach: self.normal_reach,
            normal_k: self.normal_k,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            weight_cap: self.weight_cap,
            surface_band: self.surface_band * self.voxel_size,
        }
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "voxel_size" => self.voxel_size = num(key, v)?,
            "length_scale" => self.length_scale = optional(key, v)?,
            "sigma2" => self.sigma2 = num(key, v)?,
            "noise2" => self.noise2 = num(key, v)?,
            "band_width" => self.band_width = num(key, v)?,
            "normal_reach" => self.normal_reach = num(key, v)?,
            "normal_k" => self.normal_k = num(key, v)?,
            "q" => self.q = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "d_max" => self.d_max = optional(key, v)?,
            "weight_cap" => self.weight_cap = num(key, v)?,
            "surface_band" => self.surface_band = num(key, v)?,
            "sign_radius" => self.sign_radius = num(key, v)?,
            "property" => {
                self.property = PropertyKind::parse(v).ok_or_else(|| Error::Config(format!("unknown property kind '{v}'")))?
            }
            "property_min" => self.property_min = num(key, v)?,
            "property_max" => self.property_max = num(key, v)?,
            "gradient" => {
                self.gradient = GradientBlend::parse(v).ok_or_else(|| Error::Config(format!("unknown gradient blend '{v}'")))?
            }
            "eager_train" => self.eager_train = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Apply a `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{assignment}'")))?;
        self.set(k, v)
    }

    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply(line).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |v| v.to_string());
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("voxel_size", self.voxel_size.to_string());
        put("length_scale", opt(self.length_scale));
        put("sigma2", self.sigma2.to_string());
        put("noise2", self.noise2.to_string());
        put("band_width", self.band_width.to_string());
        put("normal_reach", self.normal_reach.to_string());
        put("normal_k", self.normal_k.to_string());
        put("q", self.q.to_string());
        put("lambda", self.lambda.to_string());
        put("d_max", opt(self.d_max));
        put("weight_cap", self.weight_cap.to_string());
        put("surface_band", self.surface_band.to_string());
        put("sign_radius", self.sign_radius.to_string());
        put("property", self.property.name().to_string());
        put("property_min", self.property_min.to_string());
        put("property_max", self.property_max.to_string());
        put("gradient", self.gradient.name().to_string());
        put("eager_train", self.eager_train.to_string());
        s
    }

    /// Check the configuration; returns advisory warnings for values that
    /// are legal but unusual.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("length_scale", self.length_scale()),
            ("sigma2", self.sigma2),
            ("lambda", self.lambda),
            ("weight_cap", self.weight_cap),
            ("surface_band", self.surface_band),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.noise2.is_finite() && self.noise2 >= 0.0) {
            return Err(Error::Config(format!("noise2 must be non-negative, got {}", self.noise2)));
        }
        if self.q == 0 {
            return Err(Error::Config("q must be at least 1".into()));
        }
        if self.sign_radius < 0 {
            return Err(Error::Config("sign_radius must be non-negative".into()));
        }
        if let Some(d) = self.d_max {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Config(format!("d_max must be positive, got {d}")));
            }
        }
        if !(self.property_min < self.property_max) {
            return Err(Error::Config("property_min must be below property_max".into()));
        }
        self.kernel().validate()?;
        let mut warnings = Vec::new();
        let ratio = self.length_scale() / self.voxel_size;
        if !(2.0..=4.0).contains(&ratio) {
            warnings.push(format!(
                "length_scale is {ratio:.2} voxels; 2 to 4 voxels balances smoothness and detail"
            ));
        }
        for w in &warnings {
            tracing::warn!("{w}");
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = PipelineConfig::default();
        assert!(c.validate().unwrap().is_empty());
        assert!((c.length_scale() - 0.15).abs() < 1e-15);
        assert!((c.kernel().max_distance - 0.45).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = PipelineConfig::default();
        c.length_scale = Some(0.2);
        c.property = PropertyKind::Rgb;
        c.gradient = GradientBlend::Uniform;
        c.eager_train = true;
        let text = c.to_text();
        for k in KEYS {
            assert!(text.contains(&format!("{k} = ")), "{k}");
        }
        assert_eq!(PipelineConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            PipelineConfig::parse("voxel_size = 0.1\nbogus = 3\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(PipelineConfig::parse("q = x").is_err());
        assert!(PipelineConfig::parse("voxel_size 3").is_err());
    }

    #[test]
    fn validation() {
        let mut c = PipelineConfig::default();
        c.voxel_size = -1.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.length_scale = Some(0.5);
        assert_eq!(c.validate().unwrap().len(), 1);
    }
}
