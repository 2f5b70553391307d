//! CSV tables and small standalone SVG charts.

use std::fmt::Write;

use super::{AnswerDistribution, EvalReport, RoutingStats, SweepRow};

/// `variant,overall,acc_t0,..` for one report.
pub fn variant_csv_row(r: &EvalReport) -> String {
    let mut line = format!("{},{:.6}", r.variant, r.overall);
    for a in &r.per_type {
        let _ = write!(line, ",{a:.6}");
    }
    line
}

pub fn eval_reports_csv(reports: &[EvalReport]) -> String {
    let types = reports.first().map_or(0, |r| r.per_type.len());
    let mut out = String::from("variant,overall");
    for t in 0..types {
        let _ = write!(out, ",acc_t{t}");
    }
    out.push('\n');
    for r in reports {
        out.push_str(&variant_csv_row(r));
        out.push('\n');
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n1,n2,k,hidden1,hidden2,seeds,mean,stderr,accuracies\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{}",
            r.n1,
            r.n2,
            r.k,
            r.hidden1,
            r.hidden2,
            seeds.join(";"),
            r.mean,
            r.stderr,
            accs.join(";")
        );
    }
    out
}

const CELL: usize = 40;
const MARGIN: usize = 60;

/// Heat map of the routing shares of one question type.
pub fn routing_heatmap_svg(stats: &RoutingStats, q_type: usize) -> String {
    let (w, h) = (MARGIN + stats.n2 * CELL + 10, MARGIN + stats.n1 * CELL + 10);
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(
        svg,
        r#"<text x="4" y="14">type {q_type}: cop1 rows, cop2 columns</text>"#
    );
    for (i, row) in stats.per_type[q_type].iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let shade = 255 - (p.clamp(0.0, 1.0) * 255.0).round() as u8;
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            let _ = write!(
                svg,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="black"/><text x="{}" y="{}" text-anchor="middle">{p:.2}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bars of train, test and predicted answer shares.
pub fn answer_distribution_svg(dist: &AnswerDistribution) -> String {
    const BAR: usize = 8;
    const HEIGHT: f64 = 200.0;
    let vocab = dist.train.len();
    let group = 3 * BAR + 6;
    let (w, h) = (MARGIN + vocab * group + 10, HEIGHT as usize + MARGIN + 20);
    let base = HEIGHT as usize + MARGIN;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(
        svg,
        r##"<text x="4" y="14">type {}: train (grey), test (blue), predicted (orange)</text>"##,
        dist.q_type
    );
    let series = [
        (&dist.train, "#999999"),
        (&dist.test, "#3366cc"),
        (&dist.predicted, "#ff9900"),
    ];
    for a in 0..vocab {
        let gx = MARGIN + a * group;
        for (s, (values, colour)) in series.iter().enumerate() {
            let bh = (values[a].clamp(0.0, 1.0) * HEIGHT).round() as usize;
            let _ = write!(
                svg,
                r#"<rect x="{}" y="{}" width="{BAR}" height="{bh}" fill="{colour}"/>"#,
                gx + s * BAR,
                base - bh
            );
        }
        let _ = write!(svg, r#"<text x="{gx}" y="{}">{a}</text>"#, base + 14);
    }
    svg.push_str("</svg>\n");
    svg
}
