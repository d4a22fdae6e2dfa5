//! SVG timelines: a ground-truth band, a prediction band and a band marking
//! each frame as correct (blue) or wrong (green).

use std::fmt::Write;

use segdiff_core::metrics::to_segments;
use segdiff_core::{Error, LabelSequence, Result};

pub const CORRECT_COLOR: &str = "#1f77b4";
pub const WRONG_COLOR: &str = "#2ca02c";
pub const BACKGROUND_COLOR: &str = "#c8c8c8";

const BAND_HEIGHT: usize = 24;
const GAP: usize = 8;
const LABEL_WIDTH: usize = 64;
const TARGET_WIDTH: usize = 960;

/// Fill color of a non-empty labelset, spread around the hue circle by its
/// bitmask.
pub fn labelset_color(labels: &[usize]) -> String {
    if labels.is_empty() {
        return BACKGROUND_COLOR.to_string();
    }
    let mask: u64 = labels.iter().fold(0, |m, &c| m | 1 << (c % 64));
    let hue = (mask.wrapping_mul(137) % 360) as u32;
    format!("hsl({hue},60%,55%)")
}

fn band(out: &mut String, title: &str, y: usize, px: usize, runs: &[(usize, usize, String)]) {
    writeln!(out, r#"  <g id="{}">"#, title.to_lowercase()).unwrap();
    writeln!(out, r#"    <text x="4" y="{}" font-size="12" font-family="monospace">{title}</text>"#, y + 16).unwrap();
    for (start, end, fill) in runs {
        writeln!(
            out,
            r#"    <rect x="{}" y="{y}" width="{}" height="{BAND_HEIGHT}" fill="{fill}"/>"#,
            LABEL_WIDTH + start * px,
            (end - start) * px
        )
        .unwrap();
    }
    out.push_str("  </g>\n");
}

fn label_runs(y: &LabelSequence) -> Vec<(usize, usize, String)> {
    to_segments(y)
        .into_iter()
        .map(|s| (s.start, s.end, labelset_color(&s.labels)))
        .collect()
}

fn match_runs(pred: &LabelSequence, gt: &LabelSequence) -> Vec<(usize, usize, String)> {
    let mut runs: Vec<(usize, usize, bool)> = Vec::new();
    for t in 0..gt.len() {
        let ok = pred.frame(t) == gt.frame(t);
        match runs.last_mut() {
            Some(r) if r.2 == ok => r.1 = t + 1,
            _ => runs.push((t, t + 1, ok)),
        }
    }
    runs.into_iter()
        .map(|(s, e, ok)| (s, e, if ok { CORRECT_COLOR } else { WRONG_COLOR }.to_string()))
        .collect()
}

/// Deterministic SVG document for one sequence.
pub fn render_svg(pred: &LabelSequence, gt: &LabelSequence) -> Result<String> {
    if !pred.same_shape(gt) {
        return Err(Error::Contract(format!(
            "prediction is {}×{}, ground truth {}×{}",
            pred.len(),
            pred.classes(),
            gt.len(),
            gt.classes()
        )));
    }
    let px = (TARGET_WIDTH / gt.len().max(1)).max(1);
    let width = LABEL_WIDTH + gt.len() * px + GAP;
    let height = 3 * BAND_HEIGHT + 4 * GAP;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    band(&mut out, "GT", GAP, px, &label_runs(gt));
    band(&mut out, "Pred", 2 * GAP + BAND_HEIGHT, px, &label_runs(pred));
    band(&mut out, "Match", 3 * GAP + 2 * BAND_HEIGHT, px, &match_runs(pred, gt));
    out.push_str("</svg>\n");
    Ok(out)
}
