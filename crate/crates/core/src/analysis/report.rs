use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::fit::AxisPair;
use super::pareto::pareto_frontier;
use super::table::{pareto_points, slope_table, CostAxis, Observation, QualityAxis};
use crate::config::Family;
use crate::error::{Error, Result};

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939",
];

fn color(f: Family) -> &'static str {
    PALETTE[Family::ALL.iter().position(|&g| g == f).unwrap_or(0)]
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.3}", x))
}

pub fn markdown(obs: &[Observation]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Scaling report\n\n{} observations.\n\n## Fitted slopes\n", obs.len());
    let _ = write!(s, "| family | n |");
    for a in AxisPair::ALL {
        let _ = write!(s, " α({}) |", a);
    }
    let _ = writeln!(s, "\n|---|---|{}", "---|".repeat(AxisPair::ALL.len()));
    for r in slope_table(obs) {
        let _ = write!(s, "| {} | {} |", r.family.display_name(), r.n_points);
        for a in AxisPair::ALL {
            let _ = write!(s, " {} |", fmt_opt(r.alpha(a)));
        }
        s.push('\n');
    }
    for (quality, label) in [(QualityAxis::Upstream, "upstream"), (QualityAxis::Downstream, "downstream")] {
        let front = pareto_frontier(&pareto_points(obs, CostAxis::Flops, quality));
        let _ = writeln!(s, "\n## Pareto frontier: FLOPs vs {}\n\n| run | FLOPs | quality |\n|---|---|---|", label);
        for p in front {
            let _ = writeln!(s, "| {} | {:.4e} | {:.4} |", p.run_id, p.cost, p.quality);
        }
    }
    let _ = writeln!(s, "\n## Observations\n\n| run | params | FLOPs | U | D |\n|---|---|---|---|---|");
    for o in obs {
        let _ = writeln!(
            s,
            "| {} | {:.4e} | {:.4e} | {} | {} |",
            o.run_id,
            o.params,
            o.flops,
            fmt_opt(o.upstream),
            fmt_opt(o.downstream)
        );
    }
    s
}

pub fn scatter_csv(obs: &[Observation]) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["run_id", "family", "size", "params", "flops", "U", "D"])?;
    for o in obs {
        wr.write_record([
            o.run_id.clone(),
            o.family.name().to_string(),
            o.size_label.clone(),
            o.params.to_string(),
            o.flops.to_string(),
            o.upstream.map_or(String::new(), |v| v.to_string()),
            o.downstream.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    String::from_utf8(wr.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Format(e.to_string()))
}

/// log10 FLOPs against U, one color per family, frontier as a polyline.
pub fn scatter_svg(obs: &[Observation]) -> String {
    let (w, h, pad) = (720.0, 480.0, 60.0);
    let pts: Vec<(f64, f64, &Observation)> =
        obs.iter().filter(|o| o.flops > 0.0).filter_map(|o| Some((o.flops.log10(), o.upstream?, o))).collect();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    if pts.is_empty() {
        s.push_str("<text x=\"20\" y=\"30\">no points with upstream quality</text>\n</svg>\n");
        return s;
    }
    let span = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&mut pts.iter().map(|p| p.0));
    let (y0, y1) = span(&mut pts.iter().map(|p| p.1));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>",
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">log10 FLOPs</text>", w / 2.0, h - 20.0);
    let _ = writeln!(s, "<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">U</text>", h / 2.0, h / 2.0);
    for (v, pos) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(s, "<text x=\"{pos:.1}\" y=\"{}\" text-anchor=\"middle\">{v:.2}</text>", h - pad + 15.0);
    }
    for (v, pos) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{pos:.1}\" text-anchor=\"end\">{v:.2}</text>", pad - 5.0);
    }
    let front = pareto_frontier(&pareto_points(obs, CostAxis::Flops, QualityAxis::Upstream));
    let line: Vec<String> = front
        .iter()
        .filter(|p| p.cost > 0.0)
        .map(|p| format!("{:.1},{:.1}", sx(p.cost.log10()), sy(p.quality)))
        .collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#444\" stroke-dasharray=\"4 3\"/>", line.join(" "));
    for (x, y, o) in &pts {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"{}\"><title>{}</title></circle>",
            sx(*x),
            sy(*y),
            color(o.family),
            o.run_id
        );
    }
    let mut families: Vec<Family> = pts.iter().map(|p| p.2.family).collect();
    families.sort();
    families.dedup();
    for (i, f) in families.iter().enumerate() {
        let y = pad + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<circle cx=\"{}\" cy=\"{y}\" r=\"4\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            w - pad - 110.0,
            color(*f),
            w - pad - 100.0,
            y + 4.0,
            f.display_name()
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub markdown: PathBuf,
    pub scatter_csv: PathBuf,
    pub scatter_svg: PathBuf,
}

/// Writes `path` plus `<stem>_scatter.csv` and `<stem>_scatter.svg` beside it.
pub fn write_report(obs: &[Observation], path: &Path) -> Result<ReportFiles> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let sibling = |ext: &str| path.with_file_name(format!("{}_scatter.{}", stem, ext));
    let files = ReportFiles { markdown: path.to_path_buf(), scatter_csv: sibling("csv"), scatter_svg: sibling("svg") };
    fs::write(&files.markdown, markdown(obs))?;
    fs::write(&files.scatter_csv, scatter_csv(obs)?)?;
    fs::write(&files.scatter_svg, scatter_svg(obs))?;
    Ok(files)
}
