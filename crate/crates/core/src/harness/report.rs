//! Text tables and standalone SVG bar charts.

use std::fmt::Write as _;

use super::evaluate::{AblationTable, EvalReport, InterventionReport};
use crate::toyscene::prompt::Category;

fn columns() -> Vec<&'static str> {
    let mut c: Vec<&str> = Category::ALL.iter().map(|c| c.name()).collect();
    c.push("overall");
    c
}

fn table(first: &str, rows: &[(String, Vec<f64>)]) -> String {
    let cols = columns();
    let w0 = rows.iter().map(|r| r.0.len()).chain([first.len()]).max().unwrap_or(0);
    let mut s = format!("{first:<w0$}");
    for c in &cols {
        let _ = write!(s, "  {c:>13}");
    }
    s.push('\n');
    for (name, vals) in rows {
        let _ = write!(s, "{name:<w0$}");
        for v in vals {
            let _ = write!(s, "  {v:>13.4}");
        }
        s.push('\n');
    }
    s
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut vals = r.category_means();
    vals.push(r.overall);
    format!("{}mean latent actions: {:.2}\n", table("model", &[("mean_reward".into(), vals)]), r.mean_t)
}

pub fn intervention_table(r: &InterventionReport) -> String {
    let w = r.modes.iter().map(|m| m.mode.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<w$}  {:>10}  {:>16}\n", "mode", "mean", "delta (intact-x)");
    for m in &r.modes {
        let _ = writeln!(s, "{:<w$}  {:>10.4}  {:>16.4}", m.mode, m.mean, m.delta);
    }
    let _ = writeln!(s, "prompts: {}, seed: {}", r.n_prompts, r.seed);
    s
}

pub fn ablation_table(t: &AblationTable) -> String {
    let mut full = t.full.category_means();
    full.push(t.full.overall);
    let mut rows = vec![("full".to_string(), full)];
    for r in &t.rows {
        let mut v = r.report.category_means();
        v.push(r.report.overall);
        rows.push((r.variant.clone(), v));
    }
    let mut s = String::from("mean reward\n");
    s += &table("variant", &rows);
    s += "\ndrop vs. full (full - variant)\n";
    let drops: Vec<(String, Vec<f64>)> = t.rows.iter().map(|r| (r.variant.clone(), r.drops.clone())).collect();
    s += &table("variant", &drops);
    s += "\nstructural audit\n";
    for r in &t.rows {
        let _ = writeln!(s, "{:<13} {} ({} traces)", r.variant, if r.audit_passed { "pass" } else { "FAIL" }, r.traces);
    }
    let _ = writeln!(s, "variants {}", if t.trained { "trained separately" } else { "reuse one checkpoint" });
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped vertical bars on a [0, 1] axis; one group per label, one bar per
/// series.
pub fn bar_chart_svg(title: &str, labels: &[&str], series: &[(String, Vec<f64>)]) -> String {
    const PALETTE: [&str; 7] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3"];
    let (left, top, plot_h, group_w) = (50.0, 40.0, 220.0, 90.0);
    let width = left + group_w * labels.len() as f64 + 20.0;
    let height = top + plot_h + 70.0 + 16.0 * series.len() as f64;
    let bar_w = (group_w - 20.0) / series.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{left}\" y=\"20\" font-size=\"14\">{}</text>", escape(title));
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            width - 20.0,
            left - 4.0,
            y + 4.0
        );
    }
    for (gi, label) in labels.iter().enumerate() {
        let x0 = left + gi as f64 * group_w + 10.0;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(gi).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let h = plot_h * v;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>",
                x0 + si as f64 * bar_w,
                top + plot_h - h,
                bar_w - 1.0,
                PALETTE[si % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x0 + (group_w - 20.0) / 2.0,
            top + plot_h + 16.0,
            escape(label)
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let y = top + plot_h + 40.0 + 16.0 * si as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{left}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            y - 9.0,
            PALETTE[si % PALETTE.len()],
            left + 14.0,
            y,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn eval_chart(r: &EvalReport) -> String {
    let mut vals = r.category_means();
    vals.push(r.overall);
    bar_chart_svg("mean toy reward by category", &columns(), &[("model".into(), vals)])
}

pub fn ablation_chart(t: &AblationTable) -> String {
    let mut series = Vec::new();
    let mut full = t.full.category_means();
    full.push(t.full.overall);
    series.push(("full".to_string(), full));
    for r in &t.rows {
        let mut v = r.report.category_means();
        v.push(r.report.overall);
        series.push((r.variant.clone(), v));
    }
    bar_chart_svg("ablations: mean toy reward", &columns(), &series)
}

pub fn intervention_chart(r: &InterventionReport) -> String {
    let labels: Vec<&str> = r.modes.iter().map(|m| m.mode.as_str()).collect();
    let vals = r.modes.iter().map(|m| m.mean).collect();
    bar_chart_svg("interventions: mean toy reward", &labels, &[("mean".into(), vals)])
}
