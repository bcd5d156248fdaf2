//! Hand-emitted SVG bar and line charts; no renderer dependency, just
//! well-formed XML that any conformant viewer displays.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open_svg(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="16" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        esc(title)
    );
    // axes
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{Y}" x2="{X}" y2="{Y}" stroke="black"/>"#,
        M = MARGIN,
        Y = H - MARGIN,
        X = W - MARGIN / 2.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{Y}" x2="{M}" y2="{T}" stroke="black"/>"#,
        M = MARGIN,
        Y = H - MARGIN,
        T = MARGIN / 2.0
    );
    s
}

fn y_of(v: f64, vmax: f64) -> f64 {
    let span = H - 1.5 * MARGIN;
    H - MARGIN - (v / vmax) * span
}

fn y_ticks(s: &mut String, vmax: f64) {
    for i in 0..=4 {
        let v = vmax * i as f64 / 4.0;
        let y = y_of(v, vmax);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end" font-family="sans-serif">{:.2}</text>"#,
            MARGIN - 6.0,
            y + 4.0,
            v
        );
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#cccccc"/>"##,
            MARGIN,
            W - MARGIN / 2.0
        );
    }
}

/// Vertical bars, one per labeled value.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = open_svg(title);
    let vmax = bars.iter().map(|(_, v)| *v).fold(0.0, f64::max).max(1e-9) * 1.1;
    y_ticks(&mut s, vmax);
    let span = W - 1.5 * MARGIN;
    let slot = span / bars.len() as f64;
    let width = slot * 0.6;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + (slot - width) / 2.0;
        let y = y_of(*v, vmax);
        let h = (H - MARGIN) - y;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{width:.2}" height="{h:.2}" fill="#4878a8"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            x + width / 2.0,
            H - MARGIN + 16.0,
            esc(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" font-family="sans-serif">{:.3}</text>"#,
            x + width / 2.0,
            y - 4.0,
            v
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per series over shared numeric x positions.
pub fn line_chart(title: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let mut s = open_svg(title);
    let vmax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0, f64::max)
        .max(1e-9)
        * 1.1;
    y_ticks(&mut s, vmax);
    let xmin = xs.first().copied().unwrap_or(0.0);
    let xmax = xs.last().copied().unwrap_or(1.0).max(xmin + 1e-9);
    let span = W - 1.5 * MARGIN;
    let x_of = |x: f64| MARGIN + (x - xmin) / (xmax - xmin) * span;
    let colors = ["#4878a8", "#a85048", "#48a878", "#a8a048"];
    for (si, (label, values)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(values)
            .map(|(&x, &v)| format!("{:.2},{:.2}", x_of(x), y_of(v, vmax)))
            .collect();
        let color = colors[si % colors.len()];
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            color
        );
        for (&x, &v) in xs.iter().zip(values) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                x_of(x),
                y_of(v, vmax),
                color
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{}" font-family="sans-serif">{}</text>"#,
            W - MARGIN * 2.2,
            MARGIN + 16.0 * si as f64,
            color,
            esc(label)
        );
    }
    for &x in xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            x_of(x),
            H - MARGIN + 16.0,
            x
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Minimal XML well-formedness check: tags must balance and attribute
/// quotes must pair. Good enough to catch emission bugs without an XML
/// dependency.
pub fn check_wellformed(xml: &str) -> Result<(), String> {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = xml;
    while let Some(start) = rest.find('<') {
        rest = &rest[start + 1..];
        let end = rest.find('>').ok_or("unclosed tag")?;
        let tag = &rest[..end];
        rest = &rest[end + 1..];
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().ok_or("close without open")?;
            if open != name {
                return Err(format!("mismatched tag: <{open}> closed by </{name}>"));
            }
        } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
            let name: String = tag
                .chars()
                .take_while(|c| !c.is_whitespace() && *c != '/')
                .collect();
            stack.push(name);
        }
        if tag.matches('"').count() % 2 != 0 {
            return Err(format!("unbalanced quotes in <{tag}>"));
        }
    }
    if !stack.is_empty() {
        return Err(format!("unclosed tags: {stack:?}"));
    }
    Ok(())
}
