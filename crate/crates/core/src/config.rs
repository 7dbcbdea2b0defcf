//! Architecture hyperparameters and the named presets.

use std::path::Path;

use num_integer::Roots;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CD-Net hyperparameters. The same record drives the single-resolution ViT
/// baseline, which ignores the detail fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CDNetConfig {
    /// Number of stacked blocks.
    #[serde(rename = "L", alias = "depth")]
    pub depth: usize,
    pub dim1: usize,
    pub head1: usize,
    pub dim2: usize,
    pub head2: usize,
    /// Context sub-patch side in pixels.
    pub p: usize,
    /// Detail patch side in pixels.
    pub q: usize,
    /// Detail sub-patch side in pixels.
    pub s: usize,
    /// Context tokens per patch (a perfect square).
    pub n: usize,
    /// Detail sub-tokens per detail patch.
    pub m: usize,
    pub mlp_ratio: usize,
}

impl CDNetConfig {
    pub fn reference() -> Self {
        CDNetConfig {
            depth: 12,
            dim1: 384,
            head1: 6,
            dim2: 24,
            head2: 4,
            p: 16,
            q: 64,
            s: 16,
            n: 196,
            m: 16,
            mlp_ratio: 4,
        }
    }

    pub fn toy() -> Self {
        CDNetConfig {
            depth: 2,
            dim1: 32,
            head1: 4,
            dim2: 8,
            head2: 2,
            p: 16,
            q: 64,
            s: 16,
            n: 16,
            m: 16,
            mlp_ratio: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected reference or toy)"
            ))),
        }
    }

    /// Parses a flat `key = value` file and validates it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CDNetConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Context tokens per side, `√n`.
    pub fn grid(&self) -> usize {
        self.n.sqrt()
    }

    /// Side of a context patch in level-L pixels, `√n·p`.
    pub fn patch_px(&self) -> usize {
        self.grid() * self.p
    }

    /// `H/L = q/p`.
    pub fn mag_ratio(&self) -> usize {
        self.q / self.p
    }

    /// Side of the detail image, `√n·q`.
    pub fn detail_px(&self) -> usize {
        self.grid() * self.q
    }

    /// Sub-patches per detail-patch side, `q/s`.
    pub fn sub_grid(&self) -> usize {
        self.q / self.s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if [self.dim1, self.head1, self.p, self.q, self.n, self.mlp_ratio].contains(&0) {
            return fail("dim1, head1, p, q, n and mlp_ratio must be positive".into());
        }
        if self.dim1 % self.head1 != 0 {
            return fail(format!("dim1 % head1 == 0 violated ({} % {})", self.dim1, self.head1));
        }
        if self.grid() * self.grid() != self.n {
            return fail(format!("n = (patch_px / p)^2 violated: n = {} is not a square", self.n));
        }
        if self.q % self.p != 0 || self.q / self.p < 2 {
            return fail(format!(
                "q = mag_ratio * p with integer mag_ratio >= 2 violated (q = {}, p = {})",
                self.q, self.p
            ));
        }
        if [self.dim2, self.head2, self.s, self.m].contains(&0) {
            return fail("dim2, head2, s and m must be positive".into());
        }
        if self.dim2 % self.head2 != 0 {
            return fail(format!("dim2 % head2 == 0 violated ({} % {})", self.dim2, self.head2));
        }
        if self.q % self.s != 0 || self.sub_grid() * self.sub_grid() != self.m {
            return fail(format!(
                "m = (q / s)^2 violated (m = {}, q = {}, s = {})",
                self.m, self.q, self.s
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for cfg in [CDNetConfig::reference(), CDNetConfig::toy()] {
            cfg.validate().unwrap();
            assert_eq!(cfg.q, cfg.mag_ratio() * cfg.p);
        }
        let r = CDNetConfig::reference();
        assert_eq!((r.patch_px(), r.detail_px(), r.mag_ratio()), (224, 896, 4));
        let t = CDNetConfig::toy();
        assert_eq!((t.patch_px(), t.detail_px(), t.grid()), (64, 256, 4));
    }

    #[test]
    fn toml_roundtrip() {
        let t = CDNetConfig::toy();
        assert_eq!(CDNetConfig::from_toml(&t.to_toml()).unwrap(), t);
        assert!(t.to_toml().contains("L = 2"));
    }

    #[test]
    fn violations_name_the_equality() {
        let mut c = CDNetConfig::toy();
        c.m = 15;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("m = (q / s)^2"), "{e}");
        let mut c = CDNetConfig::toy();
        c.head1 = 5;
        assert!(c.validate().unwrap_err().to_string().contains("dim1 % head1"));
        assert!(CDNetConfig::from_toml("L = 2\nbogus = 1").is_err());
        assert!(CDNetConfig::preset("huge").is_err());
    }
}
