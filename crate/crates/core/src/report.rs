//! Annual-distribution tables, box plots and hydrographs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{water_years, ForcingSeries};
use crate::error::{Error, Result};
use crate::metrics::{annual_distribution, AnnualDistribution};
use crate::persist::write_text;

/// One row set of a report: the year-wise skill of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub params: usize,
    /// Digest of the forcing the run was scored against.
    pub dataset: String,
    pub wy_start_month: u32,
    pub annual: AnnualDistribution,
}

impl ReportEntry {
    pub fn from_simulation(name: &str, params: usize, fs: &ForcingSeries, sim: &[f64], wy_start_month: u32) -> Result<Self> {
        let obs = fs.require_obs()?;
        Ok(ReportEntry {
            name: name.to_string(),
            params,
            dataset: fs.digest(),
            wy_start_month,
            annual: annual_distribution(sim, obs, fs.dates(), wy_start_month)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Validation(format!("unknown report format `{other}`"))),
        }
    }
}

/// A set of runs scored on the same data, ready for emission.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSet {
    entries: Vec<ReportEntry>,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    model: &'a str,
    params: usize,
    worst: f64,
    p5: f64,
    p25: f64,
    median: f64,
    p75: f64,
    p95: f64,
    years: Vec<(i32, Option<f64>)>,
    excluded_years: Vec<i32>,
}

impl ReportSet {
    pub fn new(entries: Vec<ReportEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Report("empty run set".into()));
        };
        for e in &entries[1..] {
            if e.dataset != first.dataset {
                return Err(Error::Report(format!(
                    "`{}` was scored on dataset {}, `{}` on {}",
                    first.name,
                    short(&first.dataset),
                    e.name,
                    short(&e.dataset)
                )));
            }
            if e.wy_start_month != first.wy_start_month {
                return Err(Error::Report(format!(
                    "`{}` and `{}` use different water-year start months",
                    first.name, e.name
                )));
            }
        }
        Ok(ReportSet { entries })
    }

    pub fn entries(&self) -> &[ReportEntry] {
        &self.entries
    }

    /// Statistics as rows, one column per run.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("statistic");
        for e in &self.entries {
            out.push(',');
            out.push_str(&csv_field(&e.name));
        }
        out.push('\n');
        for row in 0..6 {
            out.push_str(self.entries[0].annual.kge_ss.rows()[row].0);
            for e in &self.entries {
                let _ = write!(out, ",{:.2}", e.annual.kge_ss.rows()[row].1);
            }
            out.push('\n');
        }
        out.push_str("params");
        for e in &self.entries {
            let _ = write!(out, ",{}", e.params);
        }
        out.push('\n');
        out
    }

    pub fn table_json(&self) -> Result<String> {
        let rows: Vec<JsonRow> = self
            .entries
            .iter()
            .map(|e| {
                let s = &e.annual.kge_ss;
                JsonRow {
                    model: &e.name,
                    params: e.params,
                    worst: s.min,
                    p5: s.p5,
                    p25: s.p25,
                    median: s.p50,
                    p75: s.p75,
                    p95: s.p95,
                    years: e
                        .annual
                        .years
                        .iter()
                        .map(|y| (y.water_year, y.metrics.map(|m| m.kge_ss)))
                        .collect(),
                    excluded_years: e.annual.excluded_years(),
                }
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)? + "\n")
    }

    /// Box plot: 25-75 box, 5-95 whiskers, median bar and a marker at the
    /// worst year, one `<g class="box">` per run.
    pub fn box_svg(&self) -> String {
        let n = self.entries.len();
        let (w, h) = (80.0 + 90.0 * n as f64, 360.0);
        let (top, bottom, left) = (20.0, 300.0, 60.0);
        let worst = self.entries.iter().map(|e| e.annual.kge_ss.min).fold(f64::INFINITY, f64::min);
        let lo = (worst.min(0.0) * 10.0).floor() / 10.0;
        let hi = 1.0_f64.max(self.entries.iter().map(|e| e.annual.kge_ss.p95).fold(f64::MIN, f64::max));
        let y = |v: f64| bottom - (v - lo) / (hi - lo) * (bottom - top);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
        let mut t = lo;
        while t <= hi + 1e-9 {
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{t:.1}</text>"#,
                left - 4.0,
                left - 6.0,
                y(t) + 4.0,
                y = y(t)
            );
            t += if hi - lo > 1.0 { 0.5 } else { 0.1 };
        }
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">annual KGE_ss</text>"#,
            (top + bottom) / 2.0,
            (top + bottom) / 2.0
        );
        for (i, e) in self.entries.iter().enumerate() {
            let p = &e.annual.kge_ss;
            let cx = left + 50.0 + 90.0 * i as f64;
            let name = xml_escape(&e.name);
            let _ = writeln!(s, r#"<g class="box" data-model="{name}">"#);
            let _ = writeln!(
                s,
                r#"  <line class="whisker" x1="{cx}" y1="{:.2}" x2="{cx}" y2="{:.2}" stroke="black"/>"#,
                y(p.p5),
                y(p.p95)
            );
            for v in [p.p5, p.p95] {
                let _ = writeln!(
                    s,
                    r#"  <line x1="{}" y1="{yv:.2}" x2="{}" y2="{yv:.2}" stroke="black"/>"#,
                    cx - 10.0,
                    cx + 10.0,
                    yv = y(v)
                );
            }
            let _ = writeln!(
                s,
                r#"  <rect x="{}" y="{:.2}" width="40" height="{:.2}" fill="lightsteelblue" stroke="black"/>"#,
                cx - 20.0,
                y(p.p75),
                (y(p.p25) - y(p.p75)).max(0.5)
            );
            let _ = writeln!(
                s,
                r#"  <line class="median" x1="{}" y1="{ym:.2}" x2="{}" y2="{ym:.2}" stroke="red" stroke-width="2"/>"#,
                cx - 20.0,
                cx + 20.0,
                ym = y(p.p50)
            );
            let _ = writeln!(
                s,
                r#"  <circle class="worst" cx="{cx}" cy="{:.2}" r="3" fill="none" stroke="black"/>"#,
                y(p.min)
            );
            let _ = writeln!(
                s,
                r#"  <text x="{cx}" y="{}" text-anchor="middle">{name}</text>"#,
                bottom + 16.0
            );
            let _ = writeln!(
                s,
                r#"  <text x="{cx}" y="{}" text-anchor="middle">({} params)</text>"#,
                bottom + 30.0,
                e.params
            );
            s.push_str("</g>\n");
        }
        s.push_str("</svg>\n");
        s
    }

    /// Write `<stem>.csv|json|svg` into `dir`.
    pub fn emit(&self, dir: &Path, stem: &str, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for f in formats {
            let (ext, body) = match f {
                ReportFormat::Csv => ("csv", self.table_csv()),
                ReportFormat::Json => ("json", self.table_json()?),
                ReportFormat::Svg => ("svg", self.box_svg()),
            };
            let path = dir.join(format!("{stem}.{ext}"));
            write_text(&path, &body)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Observed and simulated flow over one water year.
#[derive(Debug, Clone, PartialEq)]
pub struct Hydrograph {
    pub water_year: i32,
    pub dates: Vec<NaiveDate>,
    pub precip: Vec<f64>,
    pub obs: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

pub fn hydrograph(
    fs: &ForcingSeries,
    wy_start_month: u32,
    water_year: i32,
    series: &[(String, Vec<f64>)],
) -> Result<Hydrograph> {
    let obs = fs.require_obs()?;
    let wy = water_years(fs.dates(), wy_start_month)
        .into_iter()
        .find(|w| w.label == water_year)
        .ok_or_else(|| Error::Report(format!("water year {water_year} is not in the data")))?;
    let r = wy.start..wy.end;
    let mut out = Vec::with_capacity(series.len());
    for (name, sim) in series {
        if sim.len() != fs.len() {
            return Err(Error::Report(format!("series `{name}` does not cover the data")));
        }
        out.push((name.clone(), sim[r.clone()].to_vec()));
    }
    Ok(Hydrograph {
        water_year,
        dates: fs.dates()[r.clone()].to_vec(),
        precip: fs.precip()[r.clone()].to_vec(),
        obs: obs[r].to_vec(),
        series: out,
    })
}

impl Hydrograph {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("date,precip,obs");
        for (name, _) in &self.series {
            s.push(',');
            s.push_str(&csv_field(name));
        }
        s.push('\n');
        for i in 0..self.dates.len() {
            let _ = write!(s, "{},{},{}", self.dates[i], self.precip[i], self.obs[i]);
            for (_, v) in &self.series {
                let _ = write!(s, ",{}", v[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self) -> String {
        const COLORS: [&str; 6] = ["red", "blue", "green", "orange", "purple", "brown"];
        let (w, h, left, right, top, bottom) = (760.0, 320.0, 50.0, 740.0, 20.0, 290.0);
        let n = self.dates.len().max(2);
        let peak = self
            .series
            .iter()
            .flat_map(|(_, v)| v.iter())
            .chain(&self.obs)
            .fold(0.0_f64, |a, &b| a.max(b))
            .max(1e-9);
        let x = |i: usize| left + (right - left) * i as f64 / (n - 1) as f64;
        let y = |v: f64| bottom - (v / peak) * (bottom - top);
        let line = |v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, &q)| format!("{:.1},{:.1}", x(i), y(q)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{left}" y="14">water year {} (peak {:.2} mm/day)</text>"#,
            self.water_year, peak
        );
        let _ = writeln!(
            s,
            r#"<polyline class="obs" points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
            line(&self.obs)
        );
        for (k, (name, v)) in self.series.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<polyline class="sim" data-model="{}" points="{}" fill="none" stroke="{}"/>"#,
                xml_escape(name),
                line(v),
                COLORS[k % COLORS.len()]
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let stem = format!("hydrograph_{}", self.water_year);
        let csv = dir.join(format!("{stem}.csv"));
        let svg = dir.join(format!("{stem}.svg"));
        write_text(&csv, &self.to_csv())?;
        write_text(&svg, &self.to_svg())?;
        Ok(vec![csv, svg])
    }
}

fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
