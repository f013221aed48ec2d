//! SVG figures of a run log.

use super::export::ExportError;
use super::RunLog;
use plotters::coord::Shift;
use plotters::prelude::*;
use std::ops::Range;
use std::path::{Path, PathBuf};

const WIDTH: u32 = 720;
const PANEL_HEIGHT: u32 = 320;

type Area<'a> = DrawingArea<SVGBackend<'a>, Shift>;

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

struct Panel {
    title: &'static str,
    x_label: &'static str,
    y_label: String,
    series: Vec<Series>,
    /// Dashed horizontal reference line.
    hline: Option<f64>,
    /// Filled discs `(x, y, r)` in data coordinates.
    discs: Vec<(f64, f64, f64)>,
    equal_aspect: bool,
}

impl Panel {
    fn new(title: &'static str, x_label: &'static str, y_label: &str) -> Self {
        Self {
            title,
            x_label,
            y_label: y_label.into(),
            series: Vec::new(),
            hline: None,
            discs: Vec::new(),
            equal_aspect: false,
        }
    }

    fn finite_points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    }

    fn ranges(&self) -> (Range<f64>, Range<f64>) {
        let mut xs: Vec<f64> = self.finite_points().map(|p| p.0).collect();
        let mut ys: Vec<f64> = self.finite_points().map(|p| p.1).collect();
        for &(x, y, r) in &self.discs {
            xs.extend([x - r, x + r]);
            ys.extend([y - r, y + r]);
        }
        ys.extend(self.hline);
        let (mut xr, mut yr) = (padded(&xs), padded(&ys));
        if self.equal_aspect {
            // Plot area is roughly WIDTH - 90 by PANEL_HEIGHT - 80 pixels.
            let (pw, ph) = (f64::from(WIDTH - 90), f64::from(PANEL_HEIGHT - 80));
            let scale = ((xr.end - xr.start) / pw).max((yr.end - yr.start) / ph);
            let (cx, cy) = ((xr.start + xr.end) / 2.0, (yr.start + yr.end) / 2.0);
            xr = cx - scale * pw / 2.0..cx + scale * pw / 2.0;
            yr = cy - scale * ph / 2.0..cy + scale * ph / 2.0;
        }
        (xr, yr)
    }

    fn draw(&self, area: &Area<'_>) -> Result<(), String> {
        let (xr, yr) = self.ranges();
        let mut chart = ChartBuilder::on(area)
            .caption(self.title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(55)
            .build_cartesian_2d(xr.clone(), yr)
            .map_err(|e| e.to_string())?;
        chart
            .configure_mesh()
            .x_desc(self.x_label)
            .y_desc(self.y_label.as_str())
            .light_line_style(WHITE)
            .draw()
            .map_err(|e| e.to_string())?;

        for &(x, y, r) in &self.discs {
            let outline: Vec<(f64, f64)> = (0..=96)
                .map(|k| {
                    let a = std::f64::consts::TAU * f64::from(k) / 96.0;
                    (x + r * a.cos(), y + r * a.sin())
                })
                .collect();
            chart
                .draw_series(std::iter::once(Polygon::new(outline, BLACK.mix(0.25).filled())))
                .map_err(|e| e.to_string())?;
        }
        if let Some(h) = self.hline {
            chart
                .draw_series(DashedLineSeries::new(
                    vec![(xr.start, h), (xr.end, h)],
                    6,
                    4,
                    BLACK.into(),
                ))
                .map_err(|e| e.to_string())?;
        }
        for (k, s) in self.series.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let points: Vec<(f64, f64)> = s
                .points
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            chart
                .draw_series(LineSeries::new(points, color.stroke_width(2)))
                .map_err(|e| e.to_string())?
                .label(s.name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        if !self.series.is_empty() {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .position(SeriesLabelPosition::UpperRight)
                .draw()
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn padded(v: &[f64]) -> Range<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        0.0..1.0
    } else if hi - lo < 1e-12 {
        lo - 0.5..hi + 0.5
    } else {
        let pad = 0.05 * (hi - lo);
        lo - pad..hi + pad
    }
}

fn agent_name(i: usize) -> String {
    format!("agent {}", i + 1)
}

fn n_agents(log: &RunLog) -> usize {
    log.scenario.agents.len()
}

fn trajectories(log: &RunLog) -> Panel {
    let mut p = Panel::new("Trajectories", "p_x [m]", "p_y [m]");
    p.equal_aspect = true;
    for i in 0..n_agents(log) {
        let mut points: Vec<(f64, f64)> = log.steps.iter().map(|s| (s.states[i][0], s.states[i][1])).collect();
        if let Some(x) = log.final_states.get(i) {
            points.push((x[0], x[1]));
        }
        p.series.push(Series {
            name: agent_name(i),
            points,
        });
    }
    p.discs = log
        .scenario
        .obstacles
        .iter()
        .map(|o| (o.center[0], o.center[1], o.radius))
        .collect();
    p
}

fn consensus(log: &RunLog) -> Vec<Panel> {
    const LABELS: [(&str, &str); 3] = [
        ("Output p_x", "p_x [m]"),
        ("Output theta", "theta [rad]"),
        ("Output v", "v [m/s]"),
    ];
    let n_out = log.steps.first().map_or(LABELS.len(), |s| s.outputs[0].len());
    (0..n_out)
        .map(|q| {
            let (title, unit) = LABELS.get(q).copied().unwrap_or(("Output", "y"));
            let mut p = Panel::new(title, "t [steps]", unit);
            for i in 0..n_agents(log) {
                p.series.push(Series {
                    name: agent_name(i),
                    points: log.steps.iter().map(|s| (s.t as f64, s.outputs[i][q])).collect(),
                });
            }
            p
        })
        .collect()
}

fn barrier(log: &RunLog) -> Panel {
    let mut p = Panel::new("Obstacle barrier h2 (min over obstacles)", "t [steps]", "h2 [m^2]");
    for i in 0..n_agents(log) {
        p.series.push(Series {
            name: agent_name(i),
            points: log
                .steps
                .iter()
                .filter_map(|s| s.h2[i].iter().copied().reduce(f64::min).map(|h| (s.t as f64, h)))
                .collect(),
        });
    }
    p.hline = Some(0.0);
    p
}

fn single(log: &RunLog, title: &'static str, y_label: &str, value: impl Fn(&super::StepRecord) -> f64) -> Panel {
    let mut p = Panel::new(title, "t [steps]", y_label);
    p.series.push(Series {
        name: y_label.into(),
        points: log.steps.iter().map(|s| (s.t as f64, value(s))).collect(),
    });
    p
}

fn render(path: &Path, panels: &[Panel]) -> Result<(), ExportError> {
    let height = PANEL_HEIGHT * panels.len().max(1) as u32;
    let backend = SVGBackend::new(path, (WIDTH, height));
    let root = backend.into_drawing_area();
    let draw = || -> Result<(), String> {
        root.fill(&WHITE).map_err(|e| e.to_string())?;
        for (panel, area) in panels.iter().zip(root.split_evenly((panels.len().max(1), 1))) {
            panel.draw(&area)?;
        }
        root.present().map_err(|e| e.to_string())
    };
    draw().map_err(|message| ExportError::Plot {
        path: path.to_path_buf(),
        message,
    })
}

/// Writes `trajectories.svg`, `consensus.svg`, `barrier.svg`, `cost.svg`
/// and `iterations.svg` into `dir`.
pub fn write_plots(log: &RunLog, dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    std::fs::create_dir_all(dir).map_err(|source| ExportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let figures = [
        ("trajectories.svg", vec![trajectories(log)]),
        ("consensus.svg", consensus(log)),
        ("barrier.svg", vec![barrier(log)]),
        ("cost.svg", vec![single(log, "Optimal cost", "J*", |s| s.cost)]),
        (
            "iterations.svg",
            vec![single(log, "SQP iterations per step", "iterations", |s| {
                s.sqp_iterations as f64
            })],
        ),
    ];
    let mut paths = Vec::new();
    for (name, panels) in figures {
        let path = dir.join(name);
        render(&path, &panels)?;
        paths.push(path);
    }
    Ok(paths)
}
