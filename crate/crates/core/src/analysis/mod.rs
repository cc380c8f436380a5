//! Slope fitting, Pareto frontiers and result tables.

mod fit;
mod pareto;
mod report;
mod table;

pub use fit::{fit_slope, AxisPair, LineFit, Transform};
pub use pareto::{dominates, pareto_frontier, ParetoPoint};
pub use report::{markdown, scatter_csv, scatter_svg, write_report, ReportFiles};
pub use table::{
    ingest_table, pareto_points, shipped_table, slope_table, write_points_csv, write_slope_csv, CostAxis, Observation,
    QualityAxis, SlopeRow,
};

#[cfg(test)]
mod tests;
