//! Static SVG line charts from trace CSV files.
//!
//! Output depends only on the CSV contents; coordinates are printed with a
//! fixed number of decimals so the bytes are stable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Numeric CSV table, column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); headers.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (i, field) in rec.iter().enumerate() {
                let v = if field.is_empty() {
                    f64::NAN
                } else {
                    field.parse().map_err(|_| {
                        Error::Parse(format!("row {}: `{field}` in column `{}` is not a number", line + 2, headers[i]))
                    })?
                };
                columns[i].push(v);
            }
        }
        Ok(Self { headers, columns })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }
}

/// One chart: series `ys` against column `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartSpec {
    pub name: &'static str,
    pub title: &'static str,
    pub x: &'static str,
    pub ys: Vec<&'static str>,
    /// log10 y axis (only used when every value is positive)
    pub log_y: bool,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders one chart as an SVG document.
pub fn render_chart(spec: &ChartSpec, table: &Table) -> Result<String> {
    let xs = table.column(spec.x)?;
    let ys: Vec<&[f64]> = spec.ys.iter().map(|c| table.column(c)).collect::<Result<_>>()?;
    let log = spec.log_y && ys.iter().all(|s| s.iter().all(|v| *v > 0.0 || v.is_nan()));
    let tf = |v: f64| if log { v.log10() } else { v };

    let (x0, x1) = range(xs.iter().copied());
    let (y0, y1) = range(ys.iter().flat_map(|s| s.iter().map(|&v| tf(v))));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, spec.title);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (gx, gy) = (px(xv), py(yv));
        let _ = writeln!(
            s,
            r##"<line x1="{gx:.2}" y1="{TOP:.2}" x2="{gx:.2}" y2="{:.2}" stroke="#ddd"/><text x="{gx:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 18.0,
            label(xv)
        );
        let ytxt = if log { format!("1e{yv:.2}") } else { label(yv) };
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{gy:.2}" x2="{:.2}" y2="{gy:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{ytxt}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            gy + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, spec.x);
    for (k, (name, series)) in spec.ys.iter().zip(&ys).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(series.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(tf(y))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{name}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Charts that apply to a table, chosen from its columns.
pub fn charts_for(table: &Table) -> Result<Vec<ChartSpec>> {
    let spec = |name, title, x, ys: &[&'static str], log_y| ChartSpec {
        name,
        title,
        x,
        ys: ys.to_vec(),
        log_y,
    };
    let mut out = Vec::new();
    if table.has("step") {
        out.push(spec("loss", "Training and test loss", "step", &["train_loss", "test_loss"], true));
        if table.has("H_1_1") {
            out.push(spec("h_entries", "Entries of H", "step", &["H_1_1", "H_1_2"], false));
        }
        if table.has("u3_00") {
            out.push(spec("u3", "Entries of U3", "step", &["u3_00", "u3_01", "u3_10", "u3_11"], false));
            out.push(spec("v3", "Entries of V3", "step", &["v3_00", "v3_01", "v3_10", "v3_11"], false));
            out.push(spec("u_scalars", "U1, U2 scalars", "step", &["mu1", "nu1", "nu11", "nu12", "u1_row0_mean"], false));
            out.push(spec("v_scalars", "V1, V2 scalars", "step", &["mu2", "nu21", "nu22"], false));
        }
    } else if table.has("t") {
        out.push(spec("mu_nu", "Expected dynamics of mu and nu", "t", &["mu", "nu"], false));
        out.push(spec("attention", "Attention on the correct edge", "t", &["alpha_hat", "alpha_check"], false));
        out.push(spec("loss_proxy", "Expected training loss", "t", &["loss_proxy"], true));
    } else {
        return Err(Error::MissingColumn("step".into()));
    }
    Ok(out)
}

/// Writes `<stem>.<chart>.svg` into `out_dir` for every input CSV.
pub fn emit_plots(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for p in paths {
        let table = Table::from_path(p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
        for spec in charts_for(&table)? {
            let svg = render_chart(&spec, &table)?;
            let out = out_dir.join(format!("{stem}.{}.svg", spec.name));
            std::fs::write(&out, svg)?;
            written.push(out);
        }
    }
    Ok(written)
}
