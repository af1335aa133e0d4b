//! Static SVG figures for the experiment CSVs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mcbd::experiments::information_boundary;

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub signal_len: usize,
    pub num_channels: usize,
    pub filter_len: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_prob: Option<f64>,
    pub mean_attempts_success: Option<f64>,
    pub mean_rel_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub signal_len: usize,
    pub num_channels: usize,
    pub filter_len: usize,
    pub snr_db: Option<f64>,
    pub mean_rel_err: Option<f64>,
}

/// Columns looked up by name, so extra columns and reordering are tolerated.
struct Columns {
    path: String,
    headers: Vec<String>,
}

impl Columns {
    fn index(&self, name: &str) -> Result<usize, String> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("{}: missing column '{name}'", self.path))
    }
}

fn read_records(path: &Path) -> Result<(Columns, Vec<csv::StringRecord>), String> {
    let shown = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{shown}: {e}"))?;
    let headers = reader
        .headers()
        .map_err(|e| format!("{shown}: {e}"))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let records = reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("{shown}: {e}"))?;
    if records.is_empty() {
        return Err(format!("{shown}: no data rows"));
    }
    Ok((Columns { path: shown, headers }, records))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, cols: &Columns, row: usize) -> Result<T, String> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| {
        format!(
            "{} row {}: cannot parse '{raw}' in column '{}'",
            cols.path,
            row + 2,
            cols.headers[idx]
        )
    })
}

fn optional(rec: &csv::StringRecord, idx: usize, cols: &Columns, row: usize) -> Result<Option<f64>, String> {
    match rec.get(idx).map(str::trim) {
        None | Some("") => Ok(None),
        Some(_) => field(rec, idx, cols, row).map(Some),
    }
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<GridRow>, String> {
    let (cols, records) = read_records(path)?;
    let idx: Vec<usize> = [
        "L",
        "N",
        "K",
        "trials",
        "successes",
        "success_prob",
        "mean_attempts_success",
        "mean_rel_err",
    ]
    .iter()
    .map(|c| cols.index(c))
    .collect::<Result<_, _>>()?;
    records
        .iter()
        .enumerate()
        .map(|(r, rec)| {
            Ok(GridRow {
                signal_len: field(rec, idx[0], &cols, r)?,
                num_channels: field(rec, idx[1], &cols, r)?,
                filter_len: field(rec, idx[2], &cols, r)?,
                trials: field(rec, idx[3], &cols, r)?,
                successes: field(rec, idx[4], &cols, r)?,
                success_prob: optional(rec, idx[5], &cols, r)?,
                mean_attempts_success: optional(rec, idx[6], &cols, r)?,
                mean_rel_err: optional(rec, idx[7], &cols, r)?,
            })
        })
        .collect()
}

pub fn read_boundary_csv(path: &Path) -> Result<Vec<(usize, usize)>, String> {
    let (cols, records) = read_records(path)?;
    let (n_idx, k_idx) = (cols.index("N")?, cols.index("K_star")?);
    records
        .iter()
        .enumerate()
        .map(|(r, rec)| Ok((field(rec, n_idx, &cols, r)?, field(rec, k_idx, &cols, r)?)))
        .collect()
}

pub fn read_noise_csv(path: &Path) -> Result<Vec<NoiseRow>, String> {
    let (cols, records) = read_records(path)?;
    let idx: Vec<usize> = ["L", "N", "K", "snr_db", "mean_rel_err"]
        .iter()
        .map(|c| cols.index(c))
        .collect::<Result<_, _>>()?;
    records
        .iter()
        .enumerate()
        .map(|(r, rec)| {
            let snr = match rec.get(idx[3]).map(str::trim) {
                Some("inf") | Some("") | None => None,
                Some(_) => Some(field(rec, idx[3], &cols, r)?),
            };
            Ok(NoiseRow {
                signal_len: field(rec, idx[0], &cols, r)?,
                num_channels: field(rec, idx[1], &cols, r)?,
                filter_len: field(rec, idx[2], &cols, r)?,
                snr_db: snr,
                mean_rel_err: optional(rec, idx[4], &cols, r)?,
            })
        })
        .collect()
}

const VIRIDIS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A value per `(N, K)` cell; rows are channel counts, columns filter lengths.
pub struct Heatmap<'a> {
    pub title: &'a str,
    pub cells: BTreeMap<(usize, usize), Option<f64>>,
    /// Fixed color range; `None` uses the data range.
    pub range: Option<(f64, f64)>,
    pub boundary: &'a [(usize, usize)],
}

const CELL: f64 = 22.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 40.0;

pub fn heatmap_svg(map: &Heatmap<'_>) -> String {
    let rows: Vec<usize> = map.cells.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let cols: Vec<usize> = map.cells.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().collect();
    let values: Vec<f64> = map.cells.values().flatten().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = map.range.unwrap_or_else(|| {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) }
    });
    let span = if hi > lo { hi - lo } else { 1.0 };

    let plot_w = CELL * cols.len() as f64;
    let plot_h = CELL * rows.len() as f64;
    let width = LEFT + plot_w + 110.0;
    let height = TOP + plot_h + 50.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(map.title)
    );

    // Rows run bottom-up so N grows upward.
    let y_of = |r: usize| TOP + plot_h - CELL * (r + 1) as f64;
    for (r, n) in rows.iter().enumerate() {
        for (c, k) in cols.iter().enumerate() {
            let fill = match map.cells.get(&(*n, *k)) {
                Some(Some(v)) if v.is_finite() => color((v - lo) / span),
                Some(_) => "#d0d0d0".to_string(),
                None => continue,
            };
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{fill}"/>"#,
                LEFT + CELL * c as f64,
                y_of(r)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{n}</text>"#,
            LEFT - 6.0,
            y_of(r) + CELL * 0.65
        );
    }
    for (c, k) in cols.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#,
            LEFT + CELL * (c as f64 + 0.5),
            TOP + plot_h + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">filter length K</text>"#,
        LEFT + plot_w / 2.0,
        TOP + plot_h + 34.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">channels N</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    // Boundary: the edge between K* and K* + 1, interpolated between column centres.
    let x_of_k = |k: f64| -> f64 {
        let centre = |c: usize| LEFT + CELL * (c as f64 + 0.5);
        if cols.len() == 1 {
            return if k < cols[0] as f64 { LEFT } else { LEFT + CELL };
        }
        let last = cols.len() - 1;
        if k <= cols[0] as f64 {
            return (centre(0) - CELL * (cols[0] as f64 - k) / (cols[1] - cols[0]) as f64).max(LEFT);
        }
        if k >= cols[last] as f64 {
            return (centre(last) + CELL * (k - cols[last] as f64) / (cols[last] - cols[last - 1]) as f64)
                .min(LEFT + plot_w);
        }
        let c = cols.iter().rposition(|&v| v as f64 <= k).unwrap();
        let f = (k - cols[c] as f64) / (cols[c + 1] - cols[c]) as f64;
        centre(c) + f * CELL
    };
    let mut path = Vec::new();
    for (r, n) in rows.iter().enumerate() {
        if let Some(&(_, k_star)) = map.boundary.iter().find(|b| b.0 == *n) {
            let x = x_of_k(k_star as f64 + 0.5);
            path.push(format!("{x:.1},{:.1}", y_of(r) + CELL));
            path.push(format!("{x:.1},{:.1}", y_of(r)));
        }
    }
    if !path.is_empty() {
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="red" stroke-width="2.5"/>"#,
            path.join(" ")
        );
    }

    // Colour bar.
    let bar_x = LEFT + plot_w + 25.0;
    let steps = 40;
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let h = plot_h / steps as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{bar_x:.1}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
            TOP + plot_h - h * (i + 1) as f64,
            h + 0.3,
            color(t)
        );
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, bar_x + 18.0, TOP + plot_h, fmt_tick(lo));
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, bar_x + 18.0, TOP + 10.0, fmt_tick(hi));
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 100.0).round() / 100.0)
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart with a logarithmic y axis. Non-positive y values are dropped.
pub fn log_line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (420.0, 300.0);
    let (left, top) = (70.0, 40.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|p| p.0.is_finite() && p.1 > 0.0 && p.1.is_finite())
        .collect();
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
        (a.0.min(p.1.log10()), a.1.max(p.1.log10()))
    });
    let (x0, x1) = if x0 < x1 { (x0, x1) } else if x0.is_finite() { (x0 - 1.0, x0 + 1.0) } else { (0.0, 1.0) };
    let (d0, d1) = if y0.is_finite() { (y0.floor(), y1.ceil().max(y0.floor() + 1.0)) } else { (-1.0, 0.0) };
    let sx = |x: f64| left + w * (x - x0) / (x1 - x0);
    let sy = |ly: f64| top + h - h * (ly - d0) / (d1 - d0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        left + w + 150.0,
        top + h + 50.0
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        left + w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    let mut d = d0;
    while d <= d1 + 1e-9 {
        let y = sy(d);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e0e0e0"/>"##,
            left + w
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">1e{}</text>"#,
            left - 6.0,
            y + 4.0,
            d as i64
        );
        d += 1.0;
    }
    let xs: BTreeSet<i64> = pts.iter().map(|p| (p.0 * 1000.0).round() as i64).collect();
    for x in xs {
        let x = x as f64 / 1000.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(x),
            top + h + 14.0,
            fmt_tick(x)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + w / 2.0,
        top + h + 34.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + h / 2.0,
        top + h / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1 > 0.0 && p.1.is_finite())
            .map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1.log10())))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        for c in &coords {
            let (cx, cy) = c.split_once(',').unwrap();
            let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{colour}"/>"#);
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/>"#,
            left + w + 10.0,
            left + w + 30.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            left + w + 35.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn write(path: PathBuf, contents: String) -> Result<PathBuf, String> {
    fs::write(&path, contents).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(path)
}

/// Writes success-probability, attempts and error heatmaps. When no
/// boundary is given it is recomputed from `L` and each `N`.
pub fn render_grid(rows: &[GridRow], boundary: Option<&[(usize, usize)]>, out_dir: &Path) -> Result<Vec<PathBuf>, String> {
    if rows.is_empty() {
        return Err("grid CSV has no rows".into());
    }
    let computed: Vec<(usize, usize)>;
    let boundary = match boundary {
        Some(b) => b,
        None => {
            let l = rows[0].signal_len;
            let ns: BTreeSet<usize> = rows.iter().map(|r| r.num_channels).collect();
            computed = ns.into_iter().map(|n| (n, information_boundary(l, n))).collect();
            &computed
        }
    };
    let cells = |pick: fn(&GridRow) -> Option<f64>| -> BTreeMap<(usize, usize), Option<f64>> {
        rows.iter().map(|r| ((r.num_channels, r.filter_len), pick(r))).collect()
    };
    let log_err = |r: &GridRow| r.mean_rel_err.filter(|v| *v > 0.0).map(f64::log10);
    let figures = [
        ("success_probability.svg", "Success probability", cells(|r| r.success_prob), Some((0.0, 1.0))),
        ("mean_attempts.svg", "Mean attempts among successes", cells(|r| r.mean_attempts_success), None),
        ("mean_rel_error.svg", "log10 mean relative error", cells(log_err), None),
    ];
    figures
        .into_iter()
        .map(|(name, title, cells, range)| {
            let map = Heatmap { title, cells, range, boundary };
            write(out_dir.join(name), heatmap_svg(&map))
        })
        .collect()
}

/// Writes the error-versus-SNR chart, one line per `(L, N, K)`.
pub fn render_noise(rows: &[NoiseRow], out_dir: &Path) -> Result<PathBuf, String> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let (Some(snr), Some(err)) = (r.snr_db, r.mean_rel_err) {
            groups
                .entry((r.signal_len, r.num_channels, r.filter_len))
                .or_default()
                .push((snr, err));
        }
    }
    if groups.is_empty() {
        return Err("noise CSV has no finite-SNR rows".into());
    }
    let series: Vec<Series> = groups
        .into_iter()
        .map(|((l, n, k), mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: format!("L={l} K={k} N={n}"),
                points,
            }
        })
        .collect();
    let svg = log_line_chart_svg("Mean relative error vs SNR", "SNR (dB)", "mean relative error", &series);
    write(out_dir.join("noise_error.svg"), svg)
}
