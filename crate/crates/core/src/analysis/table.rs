use std::collections::BTreeMap;
use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use super::fit::{fit_slope, AxisPair, LineFit};
use super::pareto::ParetoPoint;
use crate::config::Family;
use crate::error::{Error, Result};
use crate::harness::{RunRecord, RunStatus};

/// One point in (params, FLOPs, U, D) space, from a local run or a
/// transcribed result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub run_id: String,
    pub family: Family,
    pub size_label: String,
    pub params: f64,
    pub flops: f64,
    pub upstream: Option<f64>,
    pub downstream: Option<f64>,
}

impl Observation {
    pub fn coordinate(&self, axis: char) -> Option<f64> {
        match axis {
            'F' => Some(self.flops),
            'P' => Some(self.params),
            'U' => self.upstream,
            'D' => self.downstream,
            _ => None,
        }
    }

    pub fn pair(&self, axes: AxisPair) -> Option<(f64, f64)> {
        let mut c = axes.name().chars().filter(|c| c.is_ascii_alphabetic());
        let (x, y) = (c.next()?, c.next()?);
        Some((self.coordinate(x)?, self.coordinate(y)?))
    }
}

impl From<&RunRecord> for Observation {
    fn from(r: &RunRecord) -> Self {
        let ok = r.status != RunStatus::Failed;
        Observation {
            run_id: r.run_id.clone(),
            family: r.family,
            size_label: r.size_label.clone(),
            params: r.params as f64,
            flops: r.flops_forward as f64,
            upstream: r.upstream_neg_log_ppl.filter(|_| ok),
            downstream: r.downstream_mean.filter(|_| ok),
        }
    }
}

const HEADER: [&str; 8] = ["family", "size", "params", "flops", "U", "glue", "sglue", "squad"];

/// Reads `family,size,params,flops,U,glue,sglue,squad`; D is the mean of the
/// nonempty downstream columns divided by 100.
pub fn ingest_table<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if row.iter().all(str::is_empty) {
            continue;
        }
        if !header_seen {
            let got: Vec<&str> = row.iter().collect();
            if got != HEADER {
                return Err(Error::Parse { line, message: format!("expected header {}", HEADER.join(",")) });
            }
            header_seen = true;
            continue;
        }
        if row.len() != HEADER.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields, found {}", HEADER.len(), row.len()) });
        }
        let num = |k: usize| -> Result<Option<f64>> {
            let s = &row[k];
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| Error::Parse { line, message: format!("bad number '{}' in column {}", s, HEADER[k]) })
        };
        let required = |k: usize| -> Result<f64> {
            num(k)?.ok_or_else(|| Error::Parse { line, message: format!("missing {}", HEADER[k]) })
        };
        let family: Family = row[0].parse().map_err(|e: Error| Error::Parse { line, message: e.to_string() })?;
        let down: Vec<f64> = (5..8).map(num).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        let size = row[1].to_ascii_lowercase();
        out.push(Observation {
            run_id: format!("{}-{}", family.name(), size),
            family,
            size_label: size,
            params: required(2)?,
            flops: required(3)?,
            upstream: num(4)?,
            downstream: (!down.is_empty()).then(|| down.iter().sum::<f64>() / down.len() as f64 / 100.0),
        });
    }
    Ok(out)
}

const SHIPPED_TABLE: &str = include_str!("../../data/published_results.csv");

/// The published pretraining and finetuning results shipped with the crate.
pub fn shipped_table() -> Vec<Observation> {
    ingest_table(SHIPPED_TABLE.as_bytes()).expect("shipped table parses")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeRow {
    pub family: Family,
    pub n_points: usize,
    pub fits: BTreeMap<AxisPair, LineFit>,
}

impl SlopeRow {
    pub fn alpha(&self, axes: AxisPair) -> Option<f64> {
        self.fits.get(&axes).map(|f| f.alpha)
    }

    /// True when every axis pair has a fit.
    pub fn is_complete(&self) -> bool {
        AxisPair::ALL.iter().all(|a| self.fits.contains_key(a))
    }
}

/// One row per family with at least two observations.
pub fn slope_table(obs: &[Observation]) -> Vec<SlopeRow> {
    let mut by_family: BTreeMap<Family, Vec<&Observation>> = BTreeMap::new();
    for o in obs {
        by_family.entry(o.family).or_default().push(o);
    }
    let mut rows = Vec::new();
    for (family, group) in by_family {
        if group.len() < 2 {
            warn!("{}: {} observation, slope row omitted", family, group.len());
            continue;
        }
        let mut fits = BTreeMap::new();
        for axes in AxisPair::ALL {
            let pts: Vec<(f64, f64)> = group.iter().filter_map(|o| o.pair(axes)).collect();
            match fit_slope(&pts, axes.transform()) {
                Ok(f) => {
                    fits.insert(axes, f);
                }
                Err(e) => warn!("{} {}: {}", family, axes, e),
            }
        }
        rows.push(SlopeRow { family, n_points: group.len(), fits });
    }
    rows
}

pub fn write_slope_csv<W: Write>(rows: &[SlopeRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["family".to_string(), "n_points".to_string()];
    header.extend(AxisPair::ALL.iter().map(|a| a.column()));
    header.extend(AxisPair::ALL.iter().map(|a| format!("r2_{}", a.name().replace(',', ""))));
    wr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.family.name().to_string(), r.n_points.to_string()];
        rec.extend(AxisPair::ALL.iter().map(|a| r.fits.get(a).map_or(String::new(), |f| format!("{:.6}", f.alpha))));
        rec.extend(AxisPair::ALL.iter().map(|a| r.fits.get(a).map_or(String::new(), |f| format!("{:.6}", f.r_squared))));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostAxis {
    Flops,
    Params,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityAxis {
    #[serde(rename = "U")]
    Upstream,
    #[serde(rename = "D")]
    Downstream,
}

impl std::str::FromStr for CostAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "flops" | "f" => Ok(CostAxis::Flops),
            "params" | "p" => Ok(CostAxis::Params),
            _ => Err(Error::config(format!("unknown cost axis '{}'", s))),
        }
    }
}

impl std::str::FromStr for QualityAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "u" | "upstream" => Ok(QualityAxis::Upstream),
            "d" | "downstream" => Ok(QualityAxis::Downstream),
            _ => Err(Error::config(format!("unknown quality axis '{}'", s))),
        }
    }
}

/// Observations with the requested quality, as Pareto candidates.
pub fn pareto_points(obs: &[Observation], cost: CostAxis, quality: QualityAxis) -> Vec<ParetoPoint> {
    obs.iter()
        .filter_map(|o| {
            let q = match quality {
                QualityAxis::Upstream => o.upstream,
                QualityAxis::Downstream => o.downstream,
            }?;
            let c = match cost {
                CostAxis::Flops => o.flops,
                CostAxis::Params => o.params,
            };
            Some(ParetoPoint { run_id: o.run_id.clone(), cost: c, quality: q })
        })
        .collect()
}

pub fn write_points_csv<W: Write>(points: &[ParetoPoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["run_id", "cost", "quality"])?;
    for p in points {
        wr.write_record([p.run_id.clone(), p.cost.to_string(), p.quality.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
