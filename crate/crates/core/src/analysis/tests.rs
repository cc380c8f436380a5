use super::*;
use crate::config::Family;
use crate::error::Error;

fn row(rows: &[SlopeRow], f: Family) -> &SlopeRow {
    rows.iter().find(|r| r.family == f).unwrap()
}

#[test]
fn shipped_table_loads_every_published_row() {
    let t = shipped_table();
    assert_eq!(t.len(), 54);
    let base = t.iter().find(|o| o.run_id == "transformer-base").unwrap();
    assert_eq!(base.params, 223e6);
    assert_eq!(base.flops, 11.4);
    assert_eq!(base.upstream, Some(-1.75));
    let d = (83.8 + 74.0 + 86.3) / 300.0;
    assert!((base.downstream.unwrap() - d).abs() < 1e-12);
}

#[test]
fn upstream_flops_slopes_match_independent_ols() {
    // closed-form slope computed separately: cov(log10 F, U) / var(log10 F)
    let rows = slope_table(&shipped_table());
    let t = row(&rows, Family::Transformer).alpha(AxisPair::FlopsUpstream).unwrap();
    let g = row(&rows, Family::Glu).alpha(AxisPair::FlopsUpstream).unwrap();
    assert!((t - 0.5430).abs() < 5e-4, "{t}");
    assert!((g - 0.4976).abs() < 5e-4, "{g}");
    assert!(rows.iter().all(|r| r.is_complete()));
    assert_eq!(rows.len(), 12);
}

#[test]
fn single_observation_family_is_omitted() {
    let mut t = shipped_table();
    t.retain(|o| o.family != Family::Albert || o.size_label == "base");
    let rows = slope_table(&t);
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| r.family != Family::Albert));
}

#[test]
fn base_size_upstream_frontier() {
    let t = shipped_table();
    let subset: Vec<Observation> = t
        .into_iter()
        .filter(|o| o.size_label == "base")
        .filter(|o| matches!(o.family, Family::Funnel | Family::Performer | Family::Transformer | Family::Switch))
        .collect();
    let pts = pareto_points(&subset, CostAxis::Flops, QualityAxis::Upstream);
    let front: Vec<String> = pareto_frontier(&pts).into_iter().map(|p| p.run_id).collect();
    assert_eq!(front, vec!["funnel-base", "transformer-base", "switch-base"]);
    let funnel = pts.iter().find(|p| p.run_id == "funnel-base").unwrap();
    let performer = pts.iter().find(|p| p.run_id == "performer-base").unwrap();
    assert!(dominates(funnel, performer));
}

#[test]
fn ingest_reports_line_numbers() {
    assert!(ingest_table("".as_bytes()).unwrap().is_empty());
    let bad = "family,size,params,flops,U,glue,sglue,squad\ntransformer,base,1e6,2.0,-1.0,80,70,60\nglu,tiny,abc,1,1,1,1,1\n";
    match ingest_table(bad.as_bytes()) {
        Err(Error::Parse { line, message }) => {
            assert_eq!(line, 3);
            assert!(message.contains("abc"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    let unknown = "family,size,params,flops,U,glue,sglue,squad\nbogus,base,1,1,1,1,1,1\n";
    assert!(matches!(ingest_table(unknown.as_bytes()), Err(Error::Parse { line: 2, .. })));
    let partial = "family,size,params,flops,U,glue,sglue,squad\nglu,tiny,10,1,,50,,\n";
    let o = &ingest_table(partial.as_bytes()).unwrap()[0];
    assert_eq!((o.upstream, o.downstream), (None, Some(0.5)));
    assert!(matches!(ingest_table("a,b\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn slope_csv_has_one_line_per_family() {
    let rows = slope_table(&shipped_table());
    let mut buf = Vec::new();
    write_slope_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.lines().next().unwrap().starts_with("family,n_points,alpha_FU,alpha_FD,alpha_PU,alpha_PD,alpha_UD"));
}

#[test]
fn report_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_report(&shipped_table(), &dir.path().join("out/report.md")).unwrap();
    let md = std::fs::read_to_string(&files.markdown).unwrap();
    assert!(md.contains("| Transformer | 5 |"));
    assert!(md.contains("switch-base"));
    let svg = std::fs::read_to_string(&files.scatter_svg).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<title>").count(), 54);
    let csv = std::fs::read_to_string(&files.scatter_csv).unwrap();
    assert_eq!(csv.lines().count(), 55);
}
