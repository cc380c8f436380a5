use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub run_id: String,
    /// Lower is better.
    pub cost: f64,
    /// Higher is better.
    pub quality: f64,
}

/// `a` is no costlier and no worse than `b`, and strictly better in one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.cost <= b.cost && a.quality >= b.quality && (a.cost < b.cost || a.quality > b.quality)
}

/// Non-dominated points sorted by cost. Of exactly coincident points only the
/// smallest `run_id` is kept, so the result does not depend on input order.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().filter(|p| p.cost.is_finite() && p.quality.is_finite()).collect();
    sorted.sort_by(|a, b| {
        a.cost
            .partial_cmp(&b.cost)
            .unwrap_or(Ordering::Equal)
            .then(b.quality.partial_cmp(&a.quality).unwrap_or(Ordering::Equal))
            .then_with(|| a.run_id.cmp(&b.run_id))
    });
    let mut best = f64::NEG_INFINITY;
    let mut out = Vec::new();
    for p in sorted {
        if p.quality > best {
            best = p.quality;
            out.push(p.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(id: &str, cost: f64, quality: f64) -> ParetoPoint {
        ParetoPoint { run_id: id.into(), cost, quality }
    }

    #[test]
    fn single_and_duplicate_points() {
        assert_eq!(pareto_frontier(&[pt("a", 1.0, 2.0)]), vec![pt("a", 1.0, 2.0)]);
        let f = pareto_frontier(&[pt("b", 1.0, 2.0), pt("a", 1.0, 2.0)]);
        assert_eq!(f, vec![pt("a", 1.0, 2.0)]);
    }

    #[test]
    fn equal_cost_keeps_the_better_quality() {
        let f = pareto_frontier(&[pt("a", 1.0, 1.0), pt("b", 1.0, 3.0), pt("c", 2.0, 2.0)]);
        assert_eq!(f, vec![pt("b", 1.0, 3.0)]);
    }
}
