use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Log10,
    Identity,
}

impl Transform {
    pub fn apply(self, x: f64) -> Result<f64> {
        match self {
            Transform::Identity => Ok(x),
            Transform::Log10 if x > 0.0 => Ok(x.log10()),
            Transform::Log10 => Err(Error::Input(format!("log10 of non-positive value {}", x))),
        }
    }
}

/// Quality or cost axes of a fitted slope, named `x,y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AxisPair {
    #[serde(rename = "F,U")]
    FlopsUpstream,
    #[serde(rename = "F,D")]
    FlopsDownstream,
    #[serde(rename = "P,U")]
    ParamsUpstream,
    #[serde(rename = "P,D")]
    ParamsDownstream,
    #[serde(rename = "U,D")]
    UpstreamDownstream,
}

impl AxisPair {
    pub const ALL: [AxisPair; 5] = [
        AxisPair::FlopsUpstream,
        AxisPair::FlopsDownstream,
        AxisPair::ParamsUpstream,
        AxisPair::ParamsDownstream,
        AxisPair::UpstreamDownstream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AxisPair::FlopsUpstream => "F,U",
            AxisPair::FlopsDownstream => "F,D",
            AxisPair::ParamsUpstream => "P,U",
            AxisPair::ParamsDownstream => "P,D",
            AxisPair::UpstreamDownstream => "U,D",
        }
    }

    /// Column label such as `alpha_FU`.
    pub fn column(self) -> String {
        format!("alpha_{}", self.name().replace(',', ""))
    }

    /// Cost axes are fitted in log10, the quality-quality pair linearly.
    pub fn transform(self) -> Transform {
        match self {
            AxisPair::UpstreamDownstream => Transform::Identity,
            _ => Transform::Log10,
        }
    }
}

impl fmt::Display for AxisPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AxisPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphabetic()).collect::<String>().to_ascii_uppercase();
        AxisPair::ALL
            .into_iter()
            .find(|a| a.name().replace(',', "") == key)
            .ok_or_else(|| Error::config(format!("unknown axis pair '{}'", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub alpha: f64,
    pub intercept: f64,
    /// In `[0, 1]`; 1 when `y` has no variance.
    pub r_squared: f64,
    pub n_points: usize,
    pub x_transform: Transform,
}

/// Ordinary least squares `y = alpha·T(x) + intercept`.
pub fn fit_slope(points: &[(f64, f64)], transform: Transform) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} points; need at least 2", points.len())));
    }
    let xs = points.iter().map(|&(x, _)| transform.apply(x)).collect::<Result<Vec<f64>>>()?;
    let ys: Vec<f64> = points.iter().map(|&(_, y)| y).collect();
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite coordinate".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx <= f64::EPSILON * xs.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateFit("x has zero variance".into()));
    }
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(LineFit { alpha, intercept, r_squared, n_points: points.len(), x_transform: transform })
}
