//! Token counts and self-attention cost, counted in query-key score entries.
//!
//! Headline figures exclude the CLS token; the CLS-inclusive count is kept
//! alongside as `sa_pairs_with_cls`.

use std::fmt::Write as _;

use num_integer::Integer;

use crate::config::CDNetConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub model: String,
    pub context_tokens: u64,
    pub detail_tokens: u64,
    /// Attention score entries per block, CLS excluded.
    pub sa_pairs: u64,
    /// Attention score entries per block with the CLS token included.
    pub sa_pairs_with_cls: u64,
}

impl CostReport {
    pub fn tokens(&self) -> u64 {
        self.context_tokens + self.detail_tokens
    }
}

/// `baseline.sa_pairs / target.sa_pairs` in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Single-resolution ViT on an `image_px` square with `p`-pixel patches.
pub fn vit_cost(image_px: u64, p: u64) -> Result<CostReport> {
    if p == 0 || image_px == 0 || image_px % p != 0 {
        return Err(Error::Config(format!(
            "image side {image_px} not divisible by patch size {p}"
        )));
    }
    let t = (image_px / p).pow(2);
    Ok(CostReport {
        model: format!("ViT {image_px}x{image_px}"),
        context_tokens: t,
        detail_tokens: 0,
        sa_pairs: t * t,
        sa_pairs_with_cls: (t + 1) * (t + 1),
    })
}

/// Context attention over `n` tokens plus `n` local attentions over `m`
/// sub-tokens.
pub fn cdnet_cost(config: &CDNetConfig) -> CostReport {
    let (n, m) = (config.n as u64, config.m as u64);
    CostReport {
        model: "CD-Net".into(),
        context_tokens: n,
        detail_tokens: n * m,
        sa_pairs: n * n + n * m * m,
        sa_pairs_with_cls: (n + 1) * (n + 1) + n * m * m,
    }
}

pub fn speedup(baseline: &CostReport, target: &CostReport) -> Result<Ratio> {
    if target.sa_pairs == 0 {
        return Err(Error::Config("target has no attention pairs".into()));
    }
    let d = baseline.sa_pairs.gcd(&target.sa_pairs);
    Ok(Ratio {
        num: baseline.sa_pairs / d,
        den: target.sa_pairs / d,
    })
}

/// The three-way comparison: ViT at the context size, ViT at the detail
/// size, and CD-Net.
pub fn comparison(config: &CDNetConfig) -> Result<Vec<CostReport>> {
    Ok(vec![
        vit_cost(config.patch_px() as u64, config.p as u64)?,
        vit_cost(config.detail_px() as u64, config.p as u64)?,
        cdnet_cost(config),
    ])
}

/// Aligned plain-text table; ratios are relative to the second report.
pub fn render_table(reports: &[CostReport]) -> Result<String> {
    let base = reports.get(1).or(reports.first());
    let mut rows = vec![[
        "model".to_string(),
        "context tokens".into(),
        "detail tokens".into(),
        "tokens".into(),
        "SA pairs".into(),
        "SA pairs (with CLS)".into(),
        "reduction".into(),
    ]];
    for r in reports {
        let ratio = match base {
            Some(b) => {
                let q = speedup(b, r)?;
                format!("{}/{} = {:.1}x", q.num, q.den, q.value())
            }
            None => String::new(),
        };
        rows.push([
            r.model.clone(),
            r.context_tokens.to_string(),
            r.detail_tokens.to_string(),
            r.tokens().to_string(),
            r.sa_pairs.to_string(),
            r.sa_pairs_with_cls.to_string(),
            ratio,
        ]);
    }
    let widths: Vec<usize> = (0..7)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("write to string");
    }
    Ok(out)
}

/// One tab-separated record per report:
/// `model, context_tokens, detail_tokens, tokens, sa_pairs, sa_pairs_with_cls`.
pub fn render_records(reports: &[CostReport]) -> String {
    let mut out = String::new();
    for r in reports {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.model,
            r.context_tokens,
            r.detail_tokens,
            r.tokens(),
            r.sa_pairs,
            r.sa_pairs_with_cls
        )
        .expect("write to string");
    }
    out
}
