use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::shap::ShapAttribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeeswarmRow {
    pub feature: String,
    pub session_id: String,
    pub shap_value: f64,
    pub feature_value: f64,
}

fn check_layout(attrs: &[ShapAttribution]) -> Result<&[String]> {
    let first = attrs
        .first()
        .ok_or_else(|| Error::Dataset("no attributions to export".into()))?;
    let names = &first.feature_names;
    for a in attrs {
        if &a.feature_names != names
            || a.values.len() != names.len()
            || a.feature_values.len() != names.len()
        {
            return Err(Error::Layout(format!(
                "attribution for {} does not match the feature layout of {}",
                a.session_id, first.session_id
            )));
        }
    }
    Ok(names)
}

/// Features with their mean |SHAP|, most important first; ties keep layout order.
pub fn feature_ranking(attrs: &[ShapAttribution]) -> Result<Vec<(String, f64)>> {
    let names = check_layout(attrs)?;
    let n = attrs.len() as f64;
    let mut ranked: Vec<(usize, f64)> = (0..names.len())
        .map(|i| (i, attrs.iter().map(|a| a.values[i].abs()).sum::<f64>() / n))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .map(|(i, m)| (names[i].clone(), m))
        .collect())
}

/// One row per (feature, session), features in ranking order.
pub fn beeswarm_rows(attrs: &[ShapAttribution]) -> Result<Vec<BeeswarmRow>> {
    let names = check_layout(attrs)?;
    let ranking = feature_ranking(attrs)?;
    let mut rows = Vec::with_capacity(names.len() * attrs.len());
    for (name, _) in ranking {
        let i = names.iter().position(|n| *n == name).expect("ranked name in layout");
        for a in attrs {
            rows.push(BeeswarmRow {
                feature: name.clone(),
                session_id: a.session_id.clone(),
                shap_value: a.values[i],
                feature_value: a.feature_values[i],
            });
        }
    }
    Ok(rows)
}

pub fn write_beeswarm_csv(path: &Path, rows: &[BeeswarmRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Static SVG: one horizontal lane per feature, points colored blue (low) to red (high)
/// by the feature's value rank within its lane.
pub fn render_beeswarm_svg(attrs: &[ShapAttribution]) -> Result<String> {
    let rows = beeswarm_rows(attrs)?;
    let ranking = feature_ranking(attrs)?;
    let (lane, left, width, top) = (26.0, 230.0, 520.0, 20.0);
    let height = top * 2.0 + lane * ranking.len() as f64 + 30.0;
    let max_abs = rows
        .iter()
        .map(|r| r.shap_value.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let x_of = |v: f64| left + width / 2.0 + v / max_abs * width / 2.0;
    let mut svg = String::new();
    let total_w = left + width + 20.0;
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{height}" font-family="sans-serif" font-size="11">"#
    )
    .expect("write to string");
    let axis_x = x_of(0.0);
    let axis_bottom = top + lane * ranking.len() as f64;
    writeln!(
        svg,
        r##"<line x1="{axis_x}" y1="{top}" x2="{axis_x}" y2="{axis_bottom}" stroke="#999"/>"##
    )
    .expect("write to string");
    for (k, (name, _)) in ranking.iter().enumerate() {
        let y = top + lane * (k as f64 + 0.5);
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{name}</text>"#, left - 8.0, y + 4.0)
            .expect("write to string");
        let lane_rows: Vec<&BeeswarmRow> = rows.iter().filter(|r| &r.feature == name).collect();
        let mut by_value: Vec<usize> = (0..lane_rows.len()).collect();
        by_value.sort_by(|&a, &b| lane_rows[a].feature_value.total_cmp(&lane_rows[b].feature_value));
        let mut rank = vec![0.0; lane_rows.len()];
        let denom = (lane_rows.len().max(2) - 1) as f64;
        for (r, &i) in by_value.iter().enumerate() {
            rank[i] = r as f64 / denom;
        }
        for (j, r) in lane_rows.iter().enumerate() {
            let jitter = ((j * 7919) % 11) as f64 / 10.0 - 0.5;
            let red = (255.0 * rank[j]).round();
            let blue = (255.0 * (1.0 - rank[j])).round();
            writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="rgb({red},40,{blue})" fill-opacity="0.8"/>"#,
                x_of(r.shap_value),
                y + jitter * lane * 0.6
            )
            .expect("write to string");
        }
    }
    writeln!(
        svg,
        r#"<text x="{axis_x}" y="{}" text-anchor="middle">SHAP value (impact on predicted score)</text>"#,
        axis_bottom + 20.0
    )
    .expect("write to string");
    svg.push_str("</svg>\n");
    Ok(svg)
}
