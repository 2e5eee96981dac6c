//! Daily forcing series: ingestion, water-year partitioning, scaling and
//! synthetic generation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::cell::{simulate, SimOptions};
use crate::error::{Error, Result};
use crate::params::ParameterVector;

pub const DEFAULT_WY_START_MONTH: u32 = 10;

/// Aligned daily precipitation, potential loss and (optionally) observed
/// output, all in mm/day.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSeries {
    dates: Vec<NaiveDate>,
    precip: Vec<f64>,
    pot_loss: Vec<f64>,
    obs_out: Option<Vec<f64>>,
}

impl ForcingSeries {
    pub fn new(
        dates: Vec<NaiveDate>,
        precip: Vec<f64>,
        pot_loss: Vec<f64>,
        obs_out: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = dates.len();
        if precip.len() != n || pot_loss.len() != n || obs_out.as_ref().is_some_and(|o| o.len() != n) {
            return Err(Error::Contract("forcing columns differ in length".into()));
        }
        for w in dates.windows(2) {
            if w[1] != w[0] + Duration::days(1) {
                return Err(Error::Structure(if w[1] > w[0] {
                    format!("gap after {}", w[0])
                } else {
                    format!("dates not increasing at {}", w[1])
                }));
            }
        }
        let check = |name: &str, xs: &[f64]| -> Result<()> {
            match xs.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                Some(i) => Err(Error::Validation(format!(
                    "{name} on {} must be finite and >= 0, got {}",
                    dates[i], xs[i]
                ))),
                None => Ok(()),
            }
        };
        check("precipitation", &precip)?;
        check("potential loss", &pot_loss)?;
        if let Some(o) = &obs_out {
            check("streamflow", o)?;
        }
        Ok(ForcingSeries {
            dates,
            precip,
            pot_loss,
            obs_out,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn precip(&self) -> &[f64] {
        &self.precip
    }

    pub fn pot_loss(&self) -> &[f64] {
        &self.pot_loss
    }

    pub fn obs_out(&self) -> Option<&[f64]> {
        self.obs_out.as_deref()
    }

    pub fn require_obs(&self) -> Result<&[f64]> {
        self.obs_out()
            .ok_or_else(|| Error::Validation("observed streamflow column is required".into()))
    }

    /// Copy with the observed column replaced.
    pub fn with_obs(&self, obs: Vec<f64>) -> Result<Self> {
        ForcingSeries::new(self.dates.clone(), self.precip.clone(), self.pot_loss.clone(), Some(obs))
    }

    /// Sub-series over `range` (still consecutive).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        ForcingSeries {
            dates: self.dates[range.clone()].to_vec(),
            precip: self.precip[range.clone()].to_vec(),
            pot_loss: self.pot_loss[range.clone()].to_vec(),
            obs_out: self.obs_out.as_ref().map(|o| o[range].to_vec()),
        }
    }

    pub fn max_precip(&self) -> f64 {
        self.precip.iter().copied().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        if self.obs_out.is_some() {
            wr.write_record(["date", "precip_mm", "pet_mm", "streamflow_mm"])?;
        } else {
            wr.write_record(["date", "precip_mm", "pet_mm"])?;
        }
        for i in 0..self.len() {
            let mut rec = vec![
                self.dates[i].format("%Y-%m-%d").to_string(),
                self.precip[i].to_string(),
                self.pot_loss[i].to_string(),
            ];
            if let Some(o) = &self.obs_out {
                rec.push(o[i].to_string());
            }
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Stable digest of the series contents.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        crate::persist::sha256_hex(&buf)
    }
}

/// Read a forcing CSV with header `date,precip_mm,pet_mm[,streamflow_mm]`.
pub fn ingest_forcing(path: impl AsRef<Path>) -> Result<ForcingSeries> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_forcing(f)
}

pub fn read_forcing<R: Read>(r: R) -> Result<ForcingSeries> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(r);
    let header = rd.headers().cloned().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let cols: Vec<&str> = header.iter().collect();
    let has_obs = match cols.as_slice() {
        ["date", "precip_mm", "pet_mm"] => false,
        ["date", "precip_mm", "pet_mm", "streamflow_mm"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header `date,precip_mm,pet_mm[,streamflow_mm]`, got `{}`",
                    cols.join(",")
                ),
            })
        }
    };
    let width = if has_obs { 4 } else { 3 };
    let mut dates = Vec::new();
    let mut precip = Vec::new();
    let mut pet = Vec::new();
    let mut obs = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, got {}", rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date `{}`: {e}", &rec[0]),
        })?;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{}` in column {}", &rec[j], cols[j]),
            })
        };
        dates.push(date);
        precip.push(num(1)?);
        pet.push(num(2)?);
        if has_obs {
            obs.push(num(3)?);
        }
    }
    ForcingSeries::new(dates, precip, pet, has_obs.then_some(obs))
}

/// Water-year label: the calendar year in which the water year ends.
pub fn water_year_of(date: NaiveDate, start_month: u32) -> i32 {
    if start_month > 1 && date.month() >= start_month {
        date.year() + 1
    } else {
        date.year()
    }
}

fn water_year_start(label: i32, start_month: u32) -> NaiveDate {
    let year = if start_month > 1 { label - 1 } else { label };
    NaiveDate::from_ymd_opt(year, start_month, 1).expect("valid month")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaterYear {
    pub label: i32,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub complete: bool,
}

/// Contiguous water-year blocks of a consecutive date sequence.
pub fn water_years(dates: &[NaiveDate], start_month: u32) -> Vec<WaterYear> {
    let mut out: Vec<WaterYear> = Vec::new();
    for (i, &d) in dates.iter().enumerate() {
        let label = water_year_of(d, start_month);
        match out.last_mut() {
            Some(wy) if wy.label == label => wy.end = i + 1,
            _ => out.push(WaterYear {
                label,
                start: i,
                end: i + 1,
                complete: false,
            }),
        }
    }
    for wy in &mut out {
        let first = water_year_start(wy.label, start_month);
        let last = water_year_start(wy.label + 1, start_month) - Duration::days(1);
        wy.complete = dates[wy.start] == first && dates[wy.end - 1] == last;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Train,
    Select,
    Test,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Train, Label::Select, Label::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Train => "train",
            Label::Select => "select",
            Label::Test => "test",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Block pattern applied to each run of four volume-ranked years (2:1:1).
pub const SPLIT_PATTERN: [Label; 4] = [Label::Train, Label::Select, Label::Train, Label::Test];

/// Per-timestep subset labels. Days outside complete water years are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMask {
    labels: Vec<Option<Label>>,
}

impl PartitionMask {
    pub fn new(labels: Vec<Option<Label>>) -> Self {
        PartitionMask { labels }
    }

    /// Every timestep carries `label`.
    pub fn uniform(n: usize, label: Label) -> Self {
        PartitionMask {
            labels: vec![Some(label); n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Option<Label>] {
        &self.labels
    }

    pub fn indices(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(label))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == Some(label)).count()
    }

    pub fn write_csv<W: Write>(&self, dates: &[NaiveDate], w: W) -> Result<()> {
        if dates.len() != self.labels.len() {
            return Err(Error::Contract("mask and dates differ in length".into()));
        }
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["date", "label"])?;
        for (d, l) in dates.iter().zip(&self.labels) {
            wr.write_record([
                d.format("%Y-%m-%d").to_string(),
                l.map_or("none", Label::as_str).to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Rank complete water years by observed volume (ties by calendar order)
/// and label each ranked block of four with `pattern`.
pub fn partition_by_year(fs: &ForcingSeries, pattern: &[Label], wy_start_month: u32) -> Result<PartitionMask> {
    if pattern.is_empty() {
        return Err(Error::Contract("split pattern is empty".into()));
    }
    let obs = fs.require_obs()?;
    let years: Vec<WaterYear> = water_years(fs.dates(), wy_start_month)
        .into_iter()
        .filter(|w| w.complete)
        .collect();
    if years.len() < pattern.len() {
        return Err(Error::InsufficientData(format!(
            "need at least {} complete water years, found {}",
            pattern.len(),
            years.len()
        )));
    }
    let volumes: Vec<f64> = years
        .iter()
        .map(|w| obs[w.start..w.end].iter().sum())
        .collect();
    let mut order: Vec<usize> = (0..years.len()).collect();
    // stable sort keeps calendar order among equal volumes
    order.sort_by(|&a, &b| volumes[a].total_cmp(&volumes[b]));
    let mut labels = vec![None; fs.len()];
    for (rank, &y) in order.iter().enumerate() {
        let label = pattern[rank % pattern.len()];
        for l in &mut labels[years[y].start..years[y].end] {
            *l = Some(label);
        }
    }
    Ok(PartitionMask { labels })
}

/// Mean and population standard deviation of one information channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub mean: f64,
    pub std: f64,
}

impl ScalingStats {
    pub fn identity() -> Self {
        ScalingStats { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

pub fn compute_scaling(channel: &[f64]) -> Result<ScalingStats> {
    compute_named_scaling("channel", channel)
}

pub(crate) fn compute_named_scaling(name: &str, xs: &[f64]) -> Result<ScalingStats> {
    if xs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "scaling `{name}` needs at least 2 values, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) || !std.is_finite() {
        return Err(Error::DegenerateChannel(name.to_string()));
    }
    Ok(ScalingStats { mean, std })
}

/// Weather generator settings for synthetic forcing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticClimate {
    pub wet_probability: f64,
    pub mean_wet_depth_mm: f64,
    pub pet_mean_mm: f64,
    pub pet_amplitude_mm: f64,
    pub pet_period_days: f64,
    pub pet_floor_mm: f64,
    /// Day of year at which the potential-loss sinusoid peaks.
    pub pet_peak_day_of_year: f64,
    /// First water year label; the series starts on its first day.
    pub first_water_year: i32,
    pub wy_start_month: u32,
    /// Spin-up applied when simulating the truth model.
    pub spinup_years: usize,
}

impl Default for SyntheticClimate {
    fn default() -> Self {
        SyntheticClimate {
            wet_probability: 0.3,
            mean_wet_depth_mm: 8.0,
            pet_mean_mm: 3.5,
            pet_amplitude_mm: 2.5,
            pet_period_days: 365.25,
            pet_floor_mm: 0.1,
            pet_peak_day_of_year: 196.0,
            first_water_year: 2001,
            wy_start_month: DEFAULT_WY_START_MONTH,
            spinup_years: 3,
        }
    }
}

/// Known model used to manufacture observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub architecture: ArchitectureSpec,
    pub params: ParameterVector,
    pub rng_seed: u64,
    #[serde(default)]
    pub climate: SyntheticClimate,
}

impl SyntheticTruth {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.params.check_layout(&self.architecture)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: SyntheticTruth = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    /// MC{O=sig,L=sig} whose output gate opens gradually over the typical
    /// state range, so state-dependent gating is needed to reproduce it.
    pub fn example() -> Self {
        let architecture = ArchitectureSpec::parse("MC{O=sig,L=sig}").expect("valid grammar");
        let params = ParameterVector::for_arch(&architecture, vec![-1.5, -1.0, 1.0, -3.0, 0.05, 0.5, 0.5])
            .expect("matching layout");
        SyntheticTruth {
            architecture,
            params,
            rng_seed: 11,
            climate: SyntheticClimate::default(),
        }
    }
}

/// Seeded forcing plus truth-model streamflow over `n_years` water years.
pub fn generate_synthetic(truth: &SyntheticTruth, n_years: usize) -> Result<ForcingSeries> {
    if n_years == 0 {
        return Err(Error::Contract("n_years must be >= 1".into()));
    }
    truth.validate()?;
    let forcing = synthetic_forcing(&truth.climate, truth.rng_seed, n_years)?;
    let opts = SimOptions {
        spinup_years: truth.climate.spinup_years,
        wy_start_month: truth.climate.wy_start_month,
    };
    let trace = simulate(&truth.architecture, &truth.params, &forcing, &opts)?;
    forcing.with_obs(trace.o)
}

/// Precipitation and potential loss only.
pub fn synthetic_forcing(climate: &SyntheticClimate, seed: u64, n_years: usize) -> Result<ForcingSeries> {
    let c = climate;
    if !(0.0..=1.0).contains(&c.wet_probability) || !(c.mean_wet_depth_mm > 0.0) {
        return Err(Error::Validation("wet probability must be in [0,1] and mean depth > 0".into()));
    }
    let start = water_year_start(c.first_water_year, c.wy_start_month);
    let end = water_year_start(c.first_water_year + n_years as i32, c.wy_start_month);
    let n = (end - start).num_days() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = Exp::new(1.0 / c.mean_wet_depth_mm).expect("positive rate");
    let mut dates = Vec::with_capacity(n);
    let mut precip = Vec::with_capacity(n);
    let mut pet = Vec::with_capacity(n);
    for i in 0..n {
        let d = start + Duration::days(i as i64);
        let wet = rng.random::<f64>() < c.wet_probability;
        let amount = depth.sample(&mut rng);
        precip.push(if wet { amount } else { 0.0 });
        let phase = 2.0 * std::f64::consts::PI * (f64::from(d.ordinal()) - c.pet_peak_day_of_year) / c.pet_period_days;
        pet.push((c.pet_mean_mm + c.pet_amplitude_mm * phase.cos()).max(c.pet_floor_mm));
        dates.push(d);
    }
    ForcingSeries::new(dates, precip, pet, None)
}

/// Scaling statistics keyed by channel, for JSON persistence.
pub type ScalingMap = BTreeMap<String, ScalingStats>;

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn ingest_three_rows() {
        let text = "date,precip_mm,pet_mm,streamflow_mm\n2000-10-01,1.5,2,0.3\n2000-10-02,0,2.1,0.2\n2000-10-03,4,1.9,0.25\n";
        let fs = read_forcing(text.as_bytes()).unwrap();
        assert_eq!(fs.len(), 3);
        assert_eq!(fs.precip(), &[1.5, 0.0, 4.0]);
        assert_eq!(fs.obs_out().unwrap()[2], 0.25);
    }

    #[test]
    fn ingest_without_streamflow() {
        let text = "date,precip_mm,pet_mm\n2000-10-01,1.5,2\n";
        let fs = read_forcing(text.as_bytes()).unwrap();
        assert!(fs.obs_out().is_none());
    }

    #[test]
    fn ingest_gap_is_structural() {
        let text = "date,precip_mm,pet_mm\n2000-10-01,1,2\n2000-10-03,1,2\n";
        match read_forcing(text.as_bytes()) {
            Err(Error::Structure(m)) => assert_eq!(m, "gap after 2000-10-01"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ingest_negative_is_validation() {
        let text = "date,precip_mm,pet_mm\n2000-10-01,-1.0,2\n";
        assert!(matches!(read_forcing(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn ingest_garbled_row_names_line() {
        let text = "date,precip_mm,pet_mm\n2000-10-01,1,2\n2000-10-02,abc,2\n";
        match read_forcing(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "date,precip_mm,pet_mm\n2000-10-01,1\n";
        assert!(matches!(read_forcing(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let text = "day,p,e\n";
        assert!(matches!(read_forcing(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn water_year_labels() {
        assert_eq!(water_year_of(d("2000-09-30"), 10), 2000);
        assert_eq!(water_year_of(d("2000-10-01"), 10), 2001);
        assert_eq!(water_year_of(d("2000-10-01"), 1), 2000);
        let dates: Vec<NaiveDate> = (0..400).map(|i| d("2000-10-01") + Duration::days(i)).collect();
        let wys = water_years(&dates, 10);
        assert_eq!(wys.len(), 2);
        assert!(wys[0].complete && !wys[1].complete);
        assert_eq!(wys[0].end - wys[0].start, 365);
    }

    fn series_with_volumes(volumes: &[f64]) -> ForcingSeries {
        let mut dates = Vec::new();
        let mut obs = Vec::new();
        let mut day = d("2000-10-01");
        for (y, &v) in volumes.iter().enumerate() {
            let end = water_year_start(2001 + y as i32 + 1, 10);
            let days = (end - day).num_days();
            for _ in 0..days {
                dates.push(day);
                obs.push(v / days as f64);
                day += Duration::days(1);
            }
        }
        let n = dates.len();
        ForcingSeries::new(dates, vec![0.0; n], vec![1.0; n], Some(obs)).unwrap()
    }

    fn year_labels(fs: &ForcingSeries, mask: &PartitionMask) -> Vec<Label> {
        water_years(fs.dates(), 10)
            .iter()
            .map(|w| mask.labels()[w.start].unwrap())
            .collect()
    }

    #[test]
    fn partition_interleaves_ranked_blocks() {
        // calendar order scrambled relative to volume
        let vols = [50.0, 10.0, 80.0, 30.0, 20.0, 70.0, 40.0, 60.0];
        let fs = series_with_volumes(&vols);
        let mask = partition_by_year(&fs, &SPLIT_PATTERN, 10).unwrap();
        let labels = year_labels(&fs, &mask);
        let mut sets: BTreeMap<Label, Vec<f64>> = BTreeMap::new();
        for (v, l) in vols.iter().zip(&labels) {
            sets.entry(*l).or_default().push(*v);
        }
        for v in sets.values_mut() {
            v.sort_by(f64::total_cmp);
        }
        assert_eq!(sets[&Label::Train], vec![10.0, 30.0, 50.0, 70.0]);
        assert_eq!(sets[&Label::Select], vec![20.0, 60.0]);
        assert_eq!(sets[&Label::Test], vec![40.0, 80.0]);
    }

    #[test]
    fn partition_ties_follow_calendar() {
        let fs = series_with_volumes(&[5.0; 4]);
        let mask = partition_by_year(&fs, &SPLIT_PATTERN, 10).unwrap();
        assert_eq!(year_labels(&fs, &mask), SPLIT_PATTERN.to_vec());
    }

    #[test]
    fn partition_needs_four_years() {
        let fs = series_with_volumes(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            partition_by_year(&fs, &SPLIT_PATTERN, 10),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn scaling_examples() {
        let s = compute_scaling(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(matches!(compute_scaling(&[5.0, 5.0, 5.0]), Err(Error::DegenerateChannel(_))));
        let s = compute_scaling(&[0.0, 10.0]).unwrap();
        assert_eq!((s.mean, s.std), (5.0, 5.0));
        assert!(compute_scaling(&[1.0]).is_err());
    }

    #[test]
    fn synthetic_forcing_is_seeded() {
        let c = SyntheticClimate::default();
        let a = synthetic_forcing(&c, 7, 2).unwrap();
        let b = synthetic_forcing(&c, 7, 2).unwrap();
        let other = synthetic_forcing(&c, 8, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.precip(), other.precip());
        assert_eq!(a.len(), 365 + 365);
        assert!(a.pot_loss().iter().all(|&p| p >= 0.1));
        let wet = a.precip().iter().filter(|&&p| p > 0.0).count() as f64 / a.len() as f64;
        assert!((wet - 0.3).abs() < 0.05, "{wet}");
        let wys = water_years(a.dates(), 10);
        assert!(wys.iter().all(|w| w.complete));
    }

    #[test]
    fn mask_csv_layout() {
        let fs = series_with_volumes(&[1.0, 2.0, 3.0, 4.0]);
        let mask = partition_by_year(&fs, &SPLIT_PATTERN, 10).unwrap();
        let mut buf = Vec::new();
        mask.write_csv(fs.dates(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("date,label\n2000-10-01,train\n"));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_identical(
            rows in prop::collection::vec((0.0f64..500.0, 0.0f64..20.0, 0.0f64..100.0), 1..60)
        ) {
            let start = NaiveDate::from_ymd_opt(1990, 3, 4).unwrap();
            let dates = (0..rows.len()).map(|i| start + Duration::days(i as i64)).collect();
            let fs = ForcingSeries::new(
                dates,
                rows.iter().map(|r| r.0).collect(),
                rows.iter().map(|r| r.1).collect(),
                Some(rows.iter().map(|r| r.2).collect()),
            ).unwrap();
            let mut buf = Vec::new();
            fs.write_csv(&mut buf).unwrap();
            let back = read_forcing(buf.as_slice()).unwrap();
            prop_assert_eq!(back, fs);
        }

        // Subset mean volumes stay within 25% when max/min volume <= 1.5.
        #[test]
        fn partition_subsets_are_distributionally_close(
            vols in prop::collection::vec(1000.0f64..1500.0, 8..41)
        ) {
            let mut dates = Vec::new();
            let mut obs = Vec::new();
            let mut day = NaiveDate::from_ymd_opt(1950, 10, 1).unwrap();
            for &v in &vols {
                let wy = water_year_of(day, 10);
                while water_year_of(day, 10) == wy {
                    dates.push(day);
                    obs.push(v / 365.0);
                    day += Duration::days(1);
                }
            }
            let n = dates.len();
            let fs = ForcingSeries::new(dates, vec![0.0; n], vec![1.0; n], Some(obs)).unwrap();
            let mask = partition_by_year(&fs, &SPLIT_PATTERN, 10).unwrap();
            let mut sums: BTreeMap<Label, (f64, usize)> = BTreeMap::new();
            for w in water_years(fs.dates(), 10) {
                let l = mask.labels()[w.start].unwrap();
                let vol: f64 = fs.obs_out().unwrap()[w.start..w.end].iter().sum();
                let e = sums.entry(l).or_insert((0.0, 0));
                e.0 += vol;
                e.1 += 1;
            }
            let means: Vec<f64> = sums.values().map(|(s, c)| s / *c as f64).collect();
            prop_assert_eq!(means.len(), 3);
            for a in &means {
                for b in &means {
                    prop_assert!((a - b).abs() / a.min(*b) < 0.25);
                }
            }
        }
    }
}
