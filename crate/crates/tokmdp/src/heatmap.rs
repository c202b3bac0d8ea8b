//! Per-token implicit-reward heatmaps.
//!
//! Colors follow a diverging scale centred at 0: red for negative, blue for
//! positive, intensity proportional to `|value| / max |value|` within the
//! trajectory.

use std::fmt::Write as _;

use tokmdp_core::{Token, Trajectory};

use crate::error::{Error, Result};

pub type Rgb = (u8, u8, u8);

pub const NEUTRAL: Rgb = (247, 247, 247);
pub const POSITIVE: Rgb = (33, 102, 172);
pub const NEGATIVE: Rgb = (178, 24, 43);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Ansi,
    Html,
}

impl HeatmapFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(Self::Ansi),
            "html" => Ok(Self::Html),
            other => Err(Error::Config(format!("unknown heatmap format {other}"))),
        }
    }
}

/// What the legend reports about how the rewards were computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Legend {
    pub beta: f64,
    pub reference_hash: String,
}

/// A trajectory with one value per response token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRow {
    pub trajectory: Trajectory,
    pub values: Vec<f64>,
    pub label: Option<String>,
}

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * t).round() as u8
}

/// Color of `value` on a scale whose extremes are `±max_abs`.
pub fn color_for(value: f64, max_abs: f64) -> Rgb {
    if max_abs <= 0.0 || value == 0.0 {
        return NEUTRAL;
    }
    let t = (value.abs() / max_abs).min(1.0);
    let end = if value > 0.0 { POSITIVE } else { NEGATIVE };
    (lerp(NEUTRAL.0, end.0, t), lerp(NEUTRAL.1, end.1, t), lerp(NEUTRAL.2, end.2, t))
}

/// Per-token colors for one trajectory.
pub fn token_colors(traj: &Trajectory, values: &[f64]) -> Result<Vec<Rgb>> {
    if traj.response.len() != values.len() {
        return Err(Error::Format(format!(
            "length mismatch: {} tokens, {} values",
            traj.response.len(),
            values.len()
        )));
    }
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(values.iter().map(|&v| color_for(v, max_abs)).collect())
}

fn token_text(t: Token, names: Option<&[String]>) -> String {
    names.and_then(|n| n.get(t as usize)).cloned().unwrap_or_else(|| t.to_string())
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders a single trajectory.
pub fn render_heatmap(
    traj: &Trajectory,
    values: &[f64],
    format: HeatmapFormat,
    legend: &Legend,
    names: Option<&[String]>,
) -> Result<String> {
    let row = HeatmapRow {
        trajectory: traj.clone(),
        values: values.to_vec(),
        label: None,
    };
    render_rows(std::slice::from_ref(&row), format, legend, names)
}

/// Renders several trajectories into one document; each row is scaled on its own.
pub fn render_rows(rows: &[HeatmapRow], format: HeatmapFormat, legend: &Legend, names: Option<&[String]>) -> Result<String> {
    let mut out = String::new();
    let legend_text = format!(
        "implicit reward beta * log(pi / pi_ref), beta = {}; reference checkpoint sha256 {}; red < 0 < blue, scaled per row",
        legend.beta, legend.reference_hash
    );
    match format {
        HeatmapFormat::Ansi => {
            for row in rows {
                let colors = token_colors(&row.trajectory, &row.values)?;
                if let Some(l) = &row.label {
                    let _ = write!(out, "{l}: ");
                }
                for (&t, (r, g, b)) in row.trajectory.response.iter().zip(colors) {
                    let _ = write!(out, "\x1b[48;2;{r};{g};{b}m\x1b[38;2;0;0;0m {} \x1b[0m", token_text(t, names));
                }
                out.push('\n');
            }
            let _ = writeln!(out, "{legend_text}");
        }
        HeatmapFormat::Html => {
            out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>implicit reward heatmap</title>\n");
            out.push_str("<style>body{font-family:monospace;background:#fff;color:#000}span.t{padding:2px 4px;margin:1px;display:inline-block}div.row{margin:4px 0}p.legend{color:#444}</style>\n</head>\n<body>\n");
            for row in rows {
                let colors = token_colors(&row.trajectory, &row.values)?;
                out.push_str("<div class=\"row\">");
                if let Some(l) = &row.label {
                    let _ = write!(out, "<b>{}</b> ", html_escape(l));
                }
                for ((&t, (r, g, b)), v) in row.trajectory.response.iter().zip(colors).zip(&row.values) {
                    let _ = write!(
                        out,
                        "<span class=\"t\" style=\"background:rgb({r},{g},{b})\" title=\"{v}\">{}</span>",
                        html_escape(&token_text(t, names))
                    );
                }
                out.push_str("</div>\n");
            }
            let _ = writeln!(out, "<p class=\"legend\">{}</p>\n</body>\n</html>", html_escape(&legend_text));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(n: usize) -> Trajectory {
        let mut r: Vec<Token> = (1..n as Token).collect();
        r.push(0);
        Trajectory::new(vec![5], r)
    }

    #[test]
    fn zeros_are_neutral() {
        let c = token_colors(&traj(4), &[0.0; 4]).unwrap();
        assert!(c.iter().all(|&x| x == NEUTRAL));
    }

    #[test]
    fn single_outlier_hits_the_extreme() {
        let c = token_colors(&traj(4), &[0.0, 0.1, 5.0, -0.2]).unwrap();
        assert_eq!(c[2], POSITIVE);
        assert_eq!(c[0], NEUTRAL);
        assert!(c[1] != POSITIVE && c[3] != NEGATIVE);
    }

    #[test]
    fn minimum_at_negative_extreme() {
        let c = token_colors(&traj(3), &[0.2, -1.0, 0.5]).unwrap();
        assert_eq!(c[1], NEGATIVE);
    }

    #[test]
    fn length_mismatch() {
        assert!(token_colors(&traj(3), &[0.0; 2]).is_err());
    }

    #[test]
    fn html_is_self_contained_with_legend() {
        let legend = Legend {
            beta: 0.5,
            reference_hash: "abc123".into(),
        };
        let html = render_heatmap(&traj(3), &[0.1, -0.1, 0.0], HeatmapFormat::Html, &legend, None).unwrap();
        assert!(html.starts_with("<!DOCTYPE html>"));
        assert!(html.contains("beta = 0.5") && html.contains("abc123"));
        assert!(!html.contains("<script") && !html.contains("href="));
        let ansi = render_heatmap(&traj(3), &[0.1, -0.1, 0.0], HeatmapFormat::Ansi, &legend, None).unwrap();
        assert!(ansi.contains("\x1b[48;2;"));
    }
}
