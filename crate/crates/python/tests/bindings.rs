use archscale_py::{count_flops, count_params, fit_slope, ladder, pareto_frontier, published_slopes};
use pyo3::prelude::*;

#[test]
fn counts_and_ladders() {
    let (total, parts) = count_params("transformer", "base").unwrap();
    assert_eq!(parts.values().sum::<u64>(), total);
    assert!((total as f64 / 223e6 - 1.0).abs() < 0.02);
    let (f128, _) = count_flops("transformer", "desk-tiny", 128, 128).unwrap();
    let (f256, _) = count_flops("transformer", "desk-tiny", 256, 256).unwrap();
    assert!(f256 > 2 * f128);
    let rungs = ladder("glu", true).unwrap();
    assert_eq!(rungs.len(), 3);
    assert!(rungs.windows(2).all(|w| w[0].1 < w[1].1));
}

#[test]
fn bad_names_raise_value_error() {
    pyo3::prepare_freethreaded_python();
    let err = count_params("nonsense", "base").unwrap_err();
    Python::with_gil(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py)));
}

#[test]
fn fits_and_frontiers() {
    pyo3::prepare_freethreaded_python();
    Python::with_gil(|py| {
        let d = fit_slope(py, vec![1.0, 10.0], vec![0.0, 1.0], true).unwrap();
        let alpha: f64 = d.get_item("alpha").unwrap().unwrap().extract().unwrap();
        assert_eq!(alpha, 1.0);
        assert!(fit_slope(py, vec![1.0], vec![0.0, 1.0], true).is_err());
    });
    let slopes = published_slopes();
    assert!((slopes["transformer"]["alpha_FU"] - 0.54).abs() < 0.01);
    let front = pareto_frontier(vec![("a".into(), 1.0, 1.0), ("b".into(), 2.0, 0.5), ("a".into(), 1.0, 1.0)]);
    assert_eq!(front, vec![("a".to_string(), 1.0, 1.0)]);
}
