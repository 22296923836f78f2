//! Embedding dumps and SVG scatter plots.

use std::fmt::Write as _;

use crate::data::{parse_csv, LabeledData};
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::tensor::Mat;

const CANVAS: f64 = 640.0;
const MARGIN: f64 = 32.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Eval-mode embeddings as CSV with header `label,dim_0,...`.
pub fn dump_embeddings(model: &Model, data: &LabeledData) -> Result<String> {
    if data.is_empty() {
        return Err(Error::Data("nothing to dump: dataset is empty".into()));
    }
    let emb = model.embed(&data.x)?;
    Ok(embeddings_csv(&emb, &data.y))
}

pub fn embeddings_csv(emb: &Mat, labels: &[usize]) -> String {
    let mut out = String::from("label");
    for j in 0..emb.cols() {
        write!(out, ",dim_{j}").unwrap();
    }
    out.push('\n');
    for (row, label) in emb.iter_rows().zip(labels) {
        write!(out, "{label}").unwrap();
        for v in row {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<LabeledData> {
    parse_csv(text, true)
}

fn star(cx: f64, cy: f64, outer: f64) -> String {
    let inner = outer * 0.45;
    let mut pts = Vec::with_capacity(10);
    for i in 0..10 {
        let r = if i % 2 == 0 { outer } else { inner };
        let a = std::f64::consts::PI * (i as f64) / 5.0 - std::f64::consts::FRAC_PI_2;
        pts.push(format!("{:.2},{:.2}", cx + r * a.cos(), cy + r * a.sin()));
    }
    pts.join(" ")
}

/// Scatter plot of 2-D embeddings: one group per class, a star at each
/// class mean, origin at the canvas center.
pub fn scatter_svg(data: &LabeledData) -> Result<String> {
    if data.dim() != 2 {
        return Err(Error::Shape {
            op: "scatter_svg (needs 2-D embeddings)",
            left: data.x.shape(),
            right: (data.len(), 2),
        });
    }
    if data.is_empty() {
        return Err(Error::Data("nothing to plot".into()));
    }
    let extent = data.x.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = if extent > 0.0 {
        (CANVAS / 2.0 - MARGIN) / extent
    } else {
        1.0
    };
    let px = |x: f64| CANVAS / 2.0 + scale * x;
    let py = |y: f64| CANVAS / 2.0 - scale * y;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{c}" height="{c}" viewBox="0 0 {c} {c}">"#,
        c = CANVAS
    )
    .unwrap();
    writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).unwrap();
    let mid = CANVAS / 2.0;
    writeln!(
        out,
        r##"<path d="M0 {mid} H{CANVAS} M{mid} 0 V{CANVAS}" stroke="#dddddd" stroke-width="1"/>"##
    )
    .unwrap();

    let mut means = Vec::new();
    for k in 0..data.num_classes {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] == k).collect();
        if idx.is_empty() {
            continue;
        }
        let color = PALETTE[k % PALETTE.len()];
        writeln!(out, r#"<g class="class-{k}" fill="{color}" fill-opacity="0.6">"#).unwrap();
        let (mut sx, mut sy) = (0.0, 0.0);
        for &i in &idx {
            let (x, y) = (data.x.get(i, 0), data.x.get(i, 1));
            sx += x;
            sy += y;
            writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5"/>"#, px(x), py(y)).unwrap();
        }
        out.push_str("</g>\n");
        let n = idx.len() as f64;
        means.push((color, sx / n, sy / n));
    }
    out.push_str("<g class=\"means\" stroke=\"#000000\" stroke-width=\"1\">\n");
    for (color, mx, my) in means {
        writeln!(
            out,
            r#"<polygon class="star" fill="{color}" points="{}"/>"#,
            star(px(mx), py(my), 10.0)
        )
        .unwrap();
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}
