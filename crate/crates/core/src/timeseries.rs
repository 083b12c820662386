//! Uniformly sampled named channels and their CSV form.
//!
//! CSV layout: a mandatory header row whose first column is `time_s`, followed by
//! one column per channel in insertion order. Values are written in plain decimal
//! notation with 12 significant digits.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub const TIME_COLUMN: &str = "time_s";

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    period: f64,
    start: f64,
    channels: IndexMap<String, Vec<f64>>,
    pub metadata: BTreeMap<String, String>,
}

impl TimeSeries {
    pub fn new(period: f64) -> Result<Self> {
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::InvalidParameter(format!("sample period {period} must be > 0")));
        }
        Ok(Self {
            period,
            start: 0.0,
            channels: IndexMap::new(),
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_start(mut self, start: f64) -> Self {
        self.start = start;
        self
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    /// Number of samples (0 when there are no channels).
    pub fn len(&self) -> usize {
        self.channels.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.period
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Adds or replaces a channel; its length must match the existing channels.
    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name == TIME_COLUMN {
            return Err(Error::InvalidParameter(format!("`{TIME_COLUMN}` is reserved")));
        }
        let others = self.channels.iter().find(|(k, _)| **k != name);
        if let Some((other, v)) = others {
            if v.len() != data.len() {
                return Err(Error::InvalidParameter(format!(
                    "channel `{name}` has {} samples, `{other}` has {}",
                    data.len(),
                    v.len()
                )));
            }
        }
        self.channels.insert(name, data);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, data: Vec<f64>) -> Result<Self> {
        self.insert(name, data)?;
        Ok(self)
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.get(name).map(Vec::as_slice)
    }

    /// Like [`channel`](Self::channel) but a missing channel is an error.
    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.channel(name)
            .ok_or_else(|| Error::InvalidParameter(format!("missing channel `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![TIME_COLUMN.to_string()];
        header.extend(self.channels.keys().cloned());
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for k in 0..self.len() {
            row.clear();
            row.push(format_sig12(self.time(k)));
            row.extend(self.channels.values().map(|v| format_sig12(v[k])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses the CSV layout; the period is inferred from the time column, which
    /// must be uniform.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header.first().map(String::as_str) != Some(TIME_COLUMN) {
            return Err(Error::Config(format!("first CSV column must be `{TIME_COLUMN}`")));
        }
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
        for (line, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Config(format!(
                    "CSV row {} has {} fields, header has {}",
                    line + 2,
                    record.len(),
                    header.len()
                )));
            }
            for (col, field) in columns.iter_mut().zip(record.iter()) {
                let v = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("CSV row {}: `{field}` is not a number", line + 2)))?;
                col.push(v);
            }
        }
        let time = &columns[0];
        if time.len() < 2 {
            return Err(Error::Config(
                "CSV needs at least two rows to infer the sample period".into(),
            ));
        }
        let n = time.len();
        let period = (time[n - 1] - time[0]) / (n - 1) as f64;
        for (k, &t) in time.iter().enumerate() {
            let expect = time[0] + k as f64 * period;
            if (t - expect).abs() > 1e-9 * expect.abs().max(period) {
                return Err(Error::Config(format!(
                    "time column is not uniformly sampled at row {}",
                    k + 2
                )));
            }
        }
        let mut ts = Self::new(period)?.with_start(time[0]);
        for (name, col) in header.into_iter().zip(columns).skip(1) {
            ts.insert(name, col)?;
        }
        Ok(ts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Plain decimal rendering of `x` rounded to 12 significant digits.
pub fn format_sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.11e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mant.starts_with('-');
    let digits: String = mant.chars().filter(char::is_ascii_digit).collect();
    let mut out = String::with_capacity(24);
    if negative {
        out.push('-');
    }
    if exp >= 0 {
        let int_len = exp as usize + 1;
        if int_len >= digits.len() {
            out.push_str(&digits);
            out.extend(std::iter::repeat_n('0', int_len - digits.len()));
        } else {
            out.push_str(&digits[..int_len]);
            out.push('.');
            out.push_str(&digits[int_len..]);
        }
    } else {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
        out.push_str(&digits);
    }
    if out.contains('.') {
        let trimmed = out.trim_end_matches('0').trim_end_matches('.').len();
        out.truncate(trimmed);
    }
    out
}
