//! Match-count datasets: construction, CSV ingestion, pair enumeration and
//! per-quality summary tables.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use crate::matcher::{count_matches, MatchConfig, Minutia};
use crate::model::{PairCovariates, QualityScheme};
use crate::numfmt::f17;
use crate::{par, Error, Result};

pub const MATCH_COLUMNS: [&str; 9] = ["finger_a", "impr_a", "finger_b", "impr_b", "m_a", "m_b", "q_a", "q_b", "y"];

/// One row of a match table, with raw finger and impression labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub finger_a: u32,
    pub impr_a: u32,
    pub finger_b: u32,
    pub impr_b: u32,
    pub m_a: u32,
    pub m_b: u32,
    pub q_a: f64,
    pub q_b: f64,
    pub y: u32,
}

impl MatchRecord {
    fn key(&self) -> ((u32, u32), (u32, u32)) {
        ((self.finger_a, self.impr_a), (self.finger_b, self.impr_b))
    }

    fn canonical(self) -> Self {
        if (self.finger_a, self.impr_a) <= (self.finger_b, self.impr_b) {
            self
        } else {
            Self {
                finger_a: self.finger_b,
                impr_a: self.impr_b,
                finger_b: self.finger_a,
                impr_b: self.impr_a,
                m_a: self.m_b,
                m_b: self.m_a,
                q_a: self.q_b,
                q_b: self.q_a,
                y: self.y,
            }
        }
    }
}

/// An impostor pair in a dataset. Finger indices in `cov` are dense
/// (`0..f`); `impr_a`/`impr_b` keep the raw impression labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub cov: PairCovariates,
    pub impr_a: u32,
    pub impr_b: u32,
    /// Observed match count. Integer-valued unless the dataset was built
    /// with [`MatchDataset::with_responses`].
    pub y: f64,
}

/// Pairs grouped by unordered finger pair, plus response constants that
/// the likelihood reuses on every evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub blocks: Vec<(usize, usize)>,
    /// `order[block_start[k]..block_start[k + 1]]` are the pairs of block `k`.
    pub block_start: Vec<usize>,
    pub order: Vec<usize>,
    pub y_block: Vec<f64>,
    pub log_mm: Vec<f64>,
    /// `sum_p K_p y_p`.
    pub y_log_mm: f64,
    /// `sum_p ln(y_p!)`.
    pub lgamma_y: f64,
    pub y_total: f64,
}

#[derive(Debug, Clone)]
pub struct MatchDataset {
    pairs: Vec<MatchPair>,
    f: usize,
    l: usize,
    scheme: QualityScheme,
    finger_ids: Vec<u32>,
    layout: OnceLock<Layout>,
}

impl PartialEq for MatchDataset {
    fn eq(&self, other: &Self) -> bool {
        self.pairs == other.pairs
            && self.f == other.f
            && self.l == other.l
            && self.scheme == other.scheme
            && self.finger_ids == other.finger_ids
    }
}

impl MatchDataset {
    /// Validates records and stores them in canonical order: each pair is
    /// oriented so `(finger_a, impr_a) < (finger_b, impr_b)` and pairs are
    /// sorted by that key.
    pub fn from_records(records: Vec<MatchRecord>, scheme: QualityScheme) -> Result<Self> {
        let lines: Vec<Option<usize>> = vec![None; records.len()];
        Self::build(records, lines, scheme)
    }

    fn build(records: Vec<MatchRecord>, lines: Vec<Option<usize>>, scheme: QualityScheme) -> Result<Self> {
        scheme.validate()?;
        let err = |line: Option<usize>, msg: String| Error::Input { line, message: msg };

        let mut rows: Vec<(MatchRecord, Option<usize>)> = Vec::with_capacity(records.len());
        for (rec, line) in records.into_iter().zip(lines) {
            if rec.finger_a == rec.finger_b {
                return Err(err(line, format!("genuine pair (finger {} on both sides); only impostor pairs allowed", rec.finger_a)));
            }
            if rec.m_a == 0 || rec.m_b == 0 {
                return Err(err(line, "minutia counts must be positive".into()));
            }
            if rec.y > rec.m_a.min(rec.m_b) {
                return Err(err(line, format!("y = {} exceeds min(m_a, m_b) = {}", rec.y, rec.m_a.min(rec.m_b))));
            }
            for q in [rec.q_a, rec.q_b] {
                scheme.check_quality(q).map_err(|e| match e {
                    Error::Input { message, .. } => err(line, message),
                    other => other,
                })?;
            }
            rows.push((rec.canonical(), line));
        }
        rows.sort_by_key(|a| a.0.key());

        for w in rows.windows(2) {
            if w[0].0.key() == w[1].0.key() {
                let ((fa, ia), (fb, ib)) = w[1].0.key();
                return Err(err(w[1].1, format!("duplicate pair ({fa},{ia})-({fb},{ib})")));
            }
        }

        // Minutia count and quality belong to the impression, not the pair.
        let mut impressions: BTreeMap<(u32, u32), (u32, f64)> = BTreeMap::new();
        for (rec, line) in &rows {
            for (key, m, q) in [((rec.finger_a, rec.impr_a), rec.m_a, rec.q_a), ((rec.finger_b, rec.impr_b), rec.m_b, rec.q_b)] {
                match impressions.get(&key) {
                    Some(&(m0, q0)) if m0 != m || q0 != q => {
                        return Err(err(
                            *line,
                            format!("impression ({},{}) has inconsistent m/q ({m0}, {q0}) vs ({m}, {q})", key.0, key.1),
                        ));
                    }
                    Some(_) => {}
                    None => {
                        impressions.insert(key, (m, q));
                    }
                }
            }
        }

        let finger_ids: Vec<u32> = impressions.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
        let mut per_finger: BTreeMap<u32, usize> = BTreeMap::new();
        for (finger, _) in impressions.keys() {
            *per_finger.entry(*finger).or_default() += 1;
        }
        let l = per_finger.values().copied().max().unwrap_or(0);
        let dense = |label: u32| finger_ids.binary_search(&label).expect("finger present");

        let pairs = rows
            .into_iter()
            .map(|(r, _)| MatchPair {
                cov: PairCovariates {
                    finger_a: dense(r.finger_a),
                    finger_b: dense(r.finger_b),
                    m_a: r.m_a,
                    m_b: r.m_b,
                    q_a: r.q_a,
                    q_b: r.q_b,
                },
                impr_a: r.impr_a,
                impr_b: r.impr_b,
                y: r.y as f64,
            })
            .collect();

        Ok(Self { pairs, f: finger_ids.len(), l, scheme, finger_ids, layout: OnceLock::new() })
    }

    /// Copy of the dataset with responses replaced by arbitrary nonnegative
    /// reals (for example expected counts under a known parameter).
    pub fn with_responses(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.pairs.len() {
            return Err(Error::input(format!("{} responses for {} pairs", y.len(), self.pairs.len())));
        }
        if let Some(bad) = y.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::input(format!("response {bad} is not a nonnegative finite number")));
        }
        let mut out = self.clone();
        out.layout = OnceLock::new();
        for (p, v) in out.pairs.iter_mut().zip(y) {
            p.y = v;
        }
        Ok(out)
    }

    pub fn pairs(&self) -> &[MatchPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of fingers `F`.
    pub fn f(&self) -> usize {
        self.f
    }

    /// Largest number of impressions of any finger.
    pub fn l(&self) -> usize {
        self.l
    }

    pub fn scheme(&self) -> QualityScheme {
        self.scheme
    }

    /// Raw finger label for each dense index.
    pub fn finger_ids(&self) -> &[u32] {
        &self.finger_ids
    }

    /// True when every cross-finger impression pair is present, i.e. the
    /// pair count is `F(F-1)L^2/2`.
    pub fn is_complete(&self) -> bool {
        self.f >= 2 && self.pairs.len() == self.f * (self.f - 1) * self.l * self.l / 2
    }

    pub fn total_matches(&self) -> f64 {
        self.layout().y_total
    }

    pub(crate) fn layout(&self) -> &Layout {
        self.layout.get_or_init(|| build_layout(&self.pairs))
    }

    pub fn records(&self) -> Vec<MatchRecord> {
        self.pairs
            .iter()
            .map(|p| MatchRecord {
                finger_a: self.finger_ids[p.cov.finger_a],
                impr_a: p.impr_a,
                finger_b: self.finger_ids[p.cov.finger_b],
                impr_b: p.impr_b,
                m_a: p.cov.m_a,
                m_b: p.cov.m_b,
                q_a: p.cov.q_a,
                q_b: p.cov.q_b,
                y: p.y as u32,
            })
            .collect()
    }
}

fn build_layout(pairs: &[MatchPair]) -> Layout {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].cov.finger_a.min(pairs[i].cov.finger_b), pairs[i].cov.finger_a.max(pairs[i].cov.finger_b), i));
    let mut blocks = Vec::new();
    let mut block_start = Vec::new();
    let mut y_block = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        let c = &pairs[i].cov;
        let key = (c.finger_a.min(c.finger_b), c.finger_a.max(c.finger_b));
        if blocks.last() != Some(&key) {
            blocks.push(key);
            block_start.push(pos);
            y_block.push(0.0);
        }
        *y_block.last_mut().unwrap() += pairs[i].y;
    }
    block_start.push(order.len());
    let log_mm: Vec<f64> = pairs.iter().map(|p| p.cov.log_mm()).collect();
    let mut y_log_mm = 0.0;
    let mut lgamma_y = 0.0;
    let mut y_total = 0.0;
    for (p, k) in pairs.iter().zip(&log_mm) {
        y_log_mm += k * p.y;
        lgamma_y += ln_gamma(p.y + 1.0);
        y_total += p.y;
    }
    Layout { blocks, block_start, order, y_block, log_mm, y_log_mm, lgamma_y, y_total }
}

/// Maps an original categorical label (1 = best) to the model's
/// orientation (larger = better): `qmax + 1 - q0`.
pub fn relabel_categorical(q0: u32, qmax: u32) -> Result<u32> {
    if q0 < 1 || q0 > qmax {
        return Err(Error::input(format!("label {q0} outside 1..={qmax}")));
    }
    Ok(qmax + 1 - q0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ImpostorPair {
    pub finger_a: usize,
    pub impr_a: usize,
    pub finger_b: usize,
    pub impr_b: usize,
}

/// All unordered cross-finger impression pairs for `f` fingers with `l`
/// impressions each; `F(F-1)L^2/2` entries.
pub fn enumerate_impostor_pairs(f: usize, l: usize) -> Vec<ImpostorPair> {
    let mut out = Vec::with_capacity(f * f.saturating_sub(1) * l * l / 2);
    for finger_a in 0..f {
        for impr_a in 0..l {
            for finger_b in finger_a + 1..f {
                for impr_b in 0..l {
                    out.push(ImpostorPair { finger_a, impr_a, finger_b, impr_b });
                }
            }
        }
    }
    out
}

fn column_index(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == *name).ok_or_else(|| {
                Error::input_at(1, format!("missing column '{name}' (found: {})", headers.iter().collect::<Vec<_>>().join(",")))
            })
        })
        .collect()
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).flexible(false).from_reader(reader)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse().map_err(|_| Error::input_at(line, format!("column '{name}': cannot parse '{raw}'")))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match line {
        Some(l) => Error::input_at(l, e.to_string()),
        None => Error::Csv(e),
    }
}

/// Reads a match table (`finger_a,impr_a,finger_b,impr_b,m_a,m_b,q_a,q_b,y`).
pub fn read_matches<R: Read>(reader: R, scheme: QualityScheme) -> Result<MatchDataset> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let idx = column_index(&headers, &MATCH_COLUMNS)?;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let rec = MatchRecord {
            finger_a: field(&row, idx[0], MATCH_COLUMNS[0], line)?,
            impr_a: field(&row, idx[1], MATCH_COLUMNS[1], line)?,
            finger_b: field(&row, idx[2], MATCH_COLUMNS[2], line)?,
            impr_b: field(&row, idx[3], MATCH_COLUMNS[3], line)?,
            m_a: field(&row, idx[4], MATCH_COLUMNS[4], line)?,
            m_b: field(&row, idx[5], MATCH_COLUMNS[5], line)?,
            q_a: field(&row, idx[6], MATCH_COLUMNS[6], line)?,
            q_b: field(&row, idx[7], MATCH_COLUMNS[7], line)?,
            y: field(&row, idx[8], MATCH_COLUMNS[8], line)?,
        };
        records.push(rec);
        lines.push(Some(line));
    }
    MatchDataset::build(records, lines, scheme)
}

pub fn load_matches(path: &Path, scheme: QualityScheme) -> Result<MatchDataset> {
    let file = std::fs::File::open(path)?;
    read_matches(std::io::BufReader::new(file), scheme)
}

fn fmt_quality(q: f64, scheme: &QualityScheme) -> String {
    match scheme {
        QualityScheme::Categorical { .. } => format!("{}", q as u32),
        QualityScheme::Continuous => f17(q),
    }
}

fn fmt_count(y: f64) -> String {
    if y.fract() == 0.0 && y < u32::MAX as f64 {
        format!("{}", y as u64)
    } else {
        f17(y)
    }
}

/// Writes a match table; `comments` become leading `# ` lines.
pub fn write_matches<W: Write>(mut out: W, data: &MatchDataset, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{}", MATCH_COLUMNS.join(","))?;
    let scheme = data.scheme();
    for p in data.pairs() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            data.finger_ids[p.cov.finger_a],
            p.impr_a,
            data.finger_ids[p.cov.finger_b],
            p.impr_b,
            p.cov.m_a,
            p.cov.m_b,
            fmt_quality(p.cov.q_a, &scheme),
            fmt_quality(p.cov.q_b, &scheme),
            fmt_count(p.y)
        )?;
    }
    Ok(())
}

pub fn save_matches(path: &Path, data: &MatchDataset, comments: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matches(&mut out, data, comments)?;
    out.flush()?;
    Ok(())
}

pub type ImpressionKey = (u32, u32);

/// Reads minutiae (`finger,impression,x,y,direction`, radians) grouped by impression.
pub fn read_minutiae<R: Read>(reader: R, into: &mut BTreeMap<ImpressionKey, Vec<Minutia>>) -> Result<()> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let names = ["finger", "impression", "x", "y", "direction"];
    let idx = column_index(&headers, &names)?;
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let finger: u32 = field(&row, idx[0], names[0], line)?;
        let impression: u32 = field(&row, idx[1], names[1], line)?;
        let x: f64 = field(&row, idx[2], names[2], line)?;
        let y: f64 = field(&row, idx[3], names[3], line)?;
        let dir: f64 = field(&row, idx[4], names[4], line)?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::input_at(line, "non-finite minutia coordinate"));
        }
        if !(0.0..=std::f64::consts::TAU).contains(&dir) {
            return Err(Error::input_at(line, format!("direction {dir} outside [0, 2pi]")));
        }
        into.entry((finger, impression)).or_default().push(Minutia::new(x, y, dir));
    }
    Ok(())
}

/// Reads per-impression qualities (`finger,impression,quality`).
pub fn read_quality<R: Read>(reader: R, scheme: QualityScheme) -> Result<BTreeMap<ImpressionKey, f64>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let names = ["finger", "impression", "quality"];
    let idx = column_index(&headers, &names)?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let finger: u32 = field(&row, idx[0], names[0], line)?;
        let impression: u32 = field(&row, idx[1], names[1], line)?;
        let q: f64 = field(&row, idx[2], names[2], line)?;
        scheme.check_quality(q).map_err(|e| Error::input_at(line, e.to_string()))?;
        if out.insert((finger, impression), q).is_some() {
            return Err(Error::input_at(line, format!("duplicate quality for ({finger},{impression})")));
        }
    }
    Ok(out)
}

/// Counts matches for every cross-finger impression pair.
pub fn build_matches_from_minutiae(
    minutiae: &BTreeMap<ImpressionKey, Vec<Minutia>>,
    quality: &BTreeMap<ImpressionKey, f64>,
    cfg: &MatchConfig,
    scheme: QualityScheme,
) -> Result<MatchDataset> {
    cfg.validate()?;
    let keys: BTreeSet<ImpressionKey> = minutiae.keys().chain(quality.keys()).copied().collect();
    for k in &keys {
        if !minutiae.contains_key(k) {
            return Err(Error::input(format!("impression ({},{}) has no minutiae", k.0, k.1)));
        }
        if !quality.contains_key(k) {
            return Err(Error::input(format!("impression ({},{}) has no quality value", k.0, k.1)));
        }
    }
    let keys: Vec<ImpressionKey> = keys.into_iter().collect();
    let mut jobs = Vec::new();
    for (i, a) in keys.iter().enumerate() {
        for b in &keys[i + 1..] {
            if a.0 != b.0 {
                jobs.push((*a, *b));
            }
        }
    }
    let counts = par::map_slice(&jobs, |(a, b)| count_matches(&minutiae[a], &minutiae[b], cfg));
    let records = jobs
        .iter()
        .zip(counts)
        .map(|((a, b), y)| MatchRecord {
            finger_a: a.0,
            impr_a: a.1,
            finger_b: b.0,
            impr_b: b.1,
            m_a: minutiae[a].len() as u32,
            m_b: minutiae[b].len() as u32,
            q_a: quality[a],
            q_b: quality[b],
            y: y as u32,
        })
        .collect();
    MatchDataset::from_records(records, scheme)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    /// Match count `Y`.
    Matches,
    /// Minutia product `m_a m_b`.
    MinutiaProduct,
    /// `Y / (m_a m_b)`.
    MatchRatio,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::Matches, Statistic::MinutiaProduct, Statistic::MatchRatio];

    pub fn name(&self) -> &'static str {
        match self {
            Statistic::Matches => "y",
            Statistic::MinutiaProduct => "mm",
            Statistic::MatchRatio => "ratio",
        }
    }

    fn value(&self, p: &MatchPair) -> f64 {
        let mm = p.cov.m_a as f64 * p.cov.m_b as f64;
        match self {
            Statistic::Matches => p.y,
            Statistic::MinutiaProduct => mm,
            Statistic::MatchRatio => p.y / mm,
        }
    }
}

/// How quality values map to table rows and columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Binning {
    Labels {
        qmax: u32,
    },
    /// Equal-width bins over `[0, 1]`.
    Width(f64),
}

impl Binning {
    pub fn for_scheme(scheme: QualityScheme, width: f64) -> Self {
        match scheme {
            QualityScheme::Categorical { qmax } => Binning::Labels { qmax },
            QualityScheme::Continuous => Binning::Width(width),
        }
    }

    fn n_bins(&self) -> usize {
        match *self {
            Binning::Labels { qmax } => qmax as usize,
            Binning::Width(w) => ((1.0 / w) - 1e-9).ceil().max(1.0) as usize,
        }
    }

    fn bin(&self, q: f64) -> usize {
        match *self {
            Binning::Labels { .. } => q as usize - 1,
            Binning::Width(w) => ((q / w).floor() as usize).min(self.n_bins() - 1),
        }
    }

    fn labels(&self) -> Vec<String> {
        match *self {
            Binning::Labels { qmax } => (1..=qmax).map(|q| q.to_string()).collect(),
            Binning::Width(w) => {
                let n = self.n_bins();
                (0..n)
                    .map(|k| {
                        let lo = k as f64 * w;
                        let hi = if k + 1 == n { 1.0 } else { (k + 1) as f64 * w };
                        let close = if k + 1 == n { "]" } else { ")" };
                        format!("[{lo:.2},{hi:.2}{close}")
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryCell {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single observation.
    pub sd: f64,
}

/// Mean and SD of a statistic per unordered quality cell, stored as a full
/// symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub statistic: Statistic,
    pub labels: Vec<String>,
    pub cells: Vec<Vec<Option<SummaryCell>>>,
}

pub fn summarize(data: &MatchDataset, statistic: Statistic, binning: Binning) -> Result<SummaryTable> {
    if data.is_empty() {
        return Err(Error::input("cannot summarize an empty dataset"));
    }
    let n = binning.n_bins();
    let mut groups: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; n];
    for p in data.pairs() {
        let a = binning.bin(p.cov.q_a);
        let b = binning.bin(p.cov.q_b);
        groups[a.min(b)][a.max(b)].push(statistic.value(p));
    }
    let mut cells = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let vals = &groups[i][j];
            if vals.is_empty() {
                continue;
            }
            let count = vals.len();
            let mean = vals.iter().sum::<f64>() / count as f64;
            let sd = if count > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt() } else { 0.0 };
            let cell = Some(SummaryCell { count, mean, sd });
            cells[i][j] = cell;
            cells[j][i] = cell;
        }
    }
    Ok(SummaryTable { statistic, labels: binning.labels(), cells })
}

impl SummaryTable {
    /// Aligned text with `mean (sd)` per cell and `-` for empty cells.
    pub fn to_text(&self) -> String {
        let fmt = |c: &Option<SummaryCell>| match c {
            Some(c) if self.statistic == Statistic::MatchRatio => format!("{:.3e} ({:.2e})", c.mean, c.sd),
            Some(c) => format!("{:.2} ({:.2})", c.mean, c.sd),
            None => "-".to_string(),
        };
        let body: Vec<Vec<String>> = self.cells.iter().map(|row| row.iter().map(fmt).collect()).collect();
        let width = body.iter().flatten().chain(self.labels.iter()).map(|s| s.len()).max().unwrap_or(1);
        let lw = self.labels.iter().map(|s| s.len()).max().unwrap_or(1).max(5);
        let mut out = format!("{:<lw$}", "q1\\q2");
        for l in &self.labels {
            out.push_str(&format!("  {l:>width$}"));
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&body) {
            out.push_str(&format!("{label:<lw$}"));
            for cell in row {
                out.push_str(&format!("  {cell:>width$}"));
            }
            out.push('\n');
        }
        out
    }

    /// Long-format CSV: `q1,q2,count,mean,sd` (empty cells omitted).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "q1,q2,count,mean,sd")?;
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if let Some(c) = cell {
                    writeln!(out, "{},{},{},{},{}", self.labels[i], self.labels[j], c.count, f17(c.mean), f17(c.sd))?;
                }
            }
        }
        Ok(())
    }
}
