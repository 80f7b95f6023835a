//! Synthetic warped seasonal AR(1) data, CSV ingestion, chronological
//! splitting with train-statistics standardization, and sliding windows.
//!
//! The generator follows x_t = phi*x_{t-1} + A*sin(omega0*(tau(t)+phase)) +
//! eps_t with the oscillating warp tau(t) = sum_{i=0}^{t} (1 + A_warp *
//! sin(2 pi i / P)). Noise is Gaussian from a ChaCha8 stream seeded by the
//! config, sampled channel-major, so datasets are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("warp amplitude {0} must lie in [0, 1) to keep increments positive")]
    WarpAmplitude(f64),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {detail}")]
    Csv { path: String, detail: String },
    #[error("non-numeric cell at row {row}, column {col}: {cell:?}")]
    BadCell {
        row: usize,
        col: usize,
        cell: String,
    },
    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("channel {0} is constant on the train split; cannot standardize")]
    ConstantChannel(usize),
    #[error("{segment} segment has {rows} rows, fewer than lookback+horizon = {needed}")]
    SegmentTooShort {
        segment: &'static str,
        rows: usize,
        needed: usize,
    },
    #[error("dataset has no split boundaries; call split() first")]
    NotSplit,
    #[error("dataset is empty")]
    Empty,
}

/// Parameters of the warped seasonal AR(1) process.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub length: usize,
    pub channels: usize,
    /// AR coefficient, |phi| < 1.
    pub phi: f64,
    /// Seasonal amplitude.
    pub amplitude: f64,
    /// Base angular frequency in rad/step.
    pub omega0: f64,
    pub noise_std: f64,
    /// Oscillating-warp amplitude in [0, 1).
    pub warp_amplitude: f64,
    /// Oscillating-warp period in steps, >= 2.
    pub warp_period: usize,
    /// Per-channel phase offsets added to tau inside the sine.
    pub phases: Vec<f64>,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Desk-scale defaults: hourly-style daily seasonality with a slow
    /// oscillating warp; channel phases spread as 2 pi c / C.
    pub fn default_desk() -> Self {
        let channels = 3;
        SyntheticConfig {
            length: 6000,
            channels,
            phi: 0.9,
            amplitude: 1.0,
            omega0: std::f64::consts::TAU / 24.0,
            noise_std: 0.1,
            warp_amplitude: 0.5,
            warp_period: 500,
            phases: default_phases(channels),
            seed: 2026,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.length == 0 || self.channels == 0 {
            return Err(DataError::InvalidConfig(
                "length and channels must be positive".into(),
            ));
        }
        if !self.phi.is_finite() || self.phi.abs() >= 1.0 {
            return Err(DataError::InvalidConfig(format!(
                "|phi| must be < 1, got {}",
                self.phi
            )));
        }
        if self.noise_std < 0.0 {
            return Err(DataError::InvalidConfig("noise_std must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.warp_amplitude) {
            return Err(DataError::WarpAmplitude(self.warp_amplitude));
        }
        if self.warp_period < 2 {
            return Err(DataError::InvalidConfig("warp_period must be >= 2".into()));
        }
        if self.phases.len() != self.channels {
            return Err(DataError::InvalidConfig(format!(
                "phases length {} != channels {}",
                self.phases.len(),
                self.channels
            )));
        }
        Ok(())
    }
}

pub fn default_phases(channels: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| std::f64::consts::TAU * c as f64 / channels as f64)
        .collect()
}

/// tau(t) = sum_{i=0}^{t} (1 + A sin(2 pi i / P)), strictly increasing in t.
pub fn oscillating_warp(t: usize, a_warp: f64, period: usize) -> Result<f64, DataError> {
    if !(0.0..1.0).contains(&a_warp) {
        return Err(DataError::WarpAmplitude(a_warp));
    }
    let mut acc = 0.0;
    for i in 0..=t {
        acc += 1.0 + a_warp * (std::f64::consts::TAU * i as f64 / period as f64).sin();
    }
    Ok(acc)
}

/// tau(0..n-1) in one cumulative pass; entry t equals `oscillating_warp(t)`.
pub fn warp_grid(n: usize, a_warp: f64, period: usize) -> Result<Vec<f64>, DataError> {
    if !(0.0..1.0).contains(&a_warp) {
        return Err(DataError::WarpAmplitude(a_warp));
    }
    let mut grid = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        acc += 1.0 + a_warp * (std::f64::consts::TAU * i as f64 / period as f64).sin();
        grid.push(acc);
    }
    Ok(grid)
}

/// Per-channel mean/std computed on the train split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStat {
    pub mean: f64,
    pub std: f64,
}

/// Chronological split boundaries: rows [0, train_end), [train_end,
/// val_end), [val_end, len).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Train,
    Val,
    Test,
}

impl Segment {
    fn name(self) -> &'static str {
        match self {
            Segment::Train => "train",
            Segment::Val => "val",
            Segment::Test => "test",
        }
    }
}

/// A multivariate series in row-major (length x channels) order. After
/// `split`, values are standardized by train statistics and the boundaries
/// and stats are recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    values: Vec<f64>,
    channels: usize,
    splits: Option<SplitBounds>,
    norm: Option<Vec<ChannelStat>>,
}

impl SeriesDataset {
    pub fn from_values(values: Vec<f64>, channels: usize) -> Result<Self, DataError> {
        if channels == 0 || values.is_empty() || values.len() % channels != 0 {
            return Err(DataError::Empty);
        }
        Ok(SeriesDataset {
            values,
            channels,
            splits: None,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn splits(&self) -> Option<SplitBounds> {
        self.splits
    }

    pub fn norm(&self) -> Option<&[ChannelStat]> {
        self.norm.as_deref()
    }

    fn segment_range(&self, segment: Segment) -> Result<(usize, usize), DataError> {
        let b = self.splits.ok_or(DataError::NotSplit)?;
        Ok(match segment {
            Segment::Train => (0, b.train_end),
            Segment::Val => (b.train_end, b.val_end),
            Segment::Test => (b.val_end, self.len()),
        })
    }

    pub fn segment_len(&self, segment: Segment) -> Result<usize, DataError> {
        let (a, b) = self.segment_range(segment)?;
        Ok(b - a)
    }
}

/// Generate the warped seasonal AR(1) dataset. Deterministic per seed: the
/// noise stream is ChaCha8(seed), consumed channel-major.
pub fn generate_warped_seasonal(cfg: &SyntheticConfig) -> Result<SeriesDataset, DataError> {
    cfg.validate()?;
    let tau = warp_grid(cfg.length, cfg.warp_amplitude, cfg.warp_period)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| DataError::InvalidConfig(format!("noise distribution: {e}")))?;
    let mut values = vec![0.0; cfg.length * cfg.channels];
    for c in 0..cfg.channels {
        let phase = cfg.phases[c];
        let mut prev = 0.0;
        for t in 0..cfg.length {
            let eps = normal.sample(&mut rng);
            let seasonal = cfg.amplitude * (cfg.omega0 * (tau[t] + phase)).sin();
            let x = if t == 0 {
                seasonal + eps
            } else {
                cfg.phi * prev + seasonal + eps
            };
            values[t * cfg.channels + c] = x;
            prev = x;
        }
    }
    SeriesDataset::from_values(values, cfg.channels)
}

/// Read a numeric CSV with one header row. A first column whose header is
/// "date" (case-insensitive) is dropped. Cell errors name the 1-based data
/// row and the 1-based file column.
pub fn load_csv(path: &Path) -> Result<SeriesDataset, DataError> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: pstr.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv {
            path: pstr.clone(),
            detail: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(DataError::Csv {
            path: pstr,
            detail: "empty header row".into(),
        });
    }
    let skip_first = headers
        .get(0)
        .map(|h| h.trim().eq_ignore_ascii_case("date"))
        .unwrap_or(false);
    let expected = headers.len();
    let channels = expected - usize::from(skip_first);
    if channels == 0 {
        return Err(DataError::Csv {
            path: pstr,
            detail: "no numeric columns".into(),
        });
    }

    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Csv {
            path: pstr.clone(),
            detail: e.to_string(),
        })?;
        if record.len() != expected {
            return Err(DataError::Ragged {
                row,
                expected,
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if j == 0 && skip_first {
                continue;
            }
            let parsed: f64 = cell.trim().parse().map_err(|_| DataError::BadCell {
                row,
                col: j + 1,
                cell: cell.to_string(),
            })?;
            values.push(parsed);
        }
    }
    SeriesDataset::from_values(values, channels)
}

/// Write a raw (unsplit) dataset as CSV with header c0,...,c{C-1} at full
/// round-trip precision.
pub fn write_csv(dataset: &SeriesDataset, path: &Path) -> Result<(), DataError> {
    let pstr = path.display().to_string();
    let mut file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: pstr.clone(),
        source,
    })?;
    let header: Vec<String> = (0..dataset.channels).map(|c| format!("c{c}")).collect();
    let io_err = |source: std::io::Error| DataError::Io {
        path: pstr.clone(),
        source,
    };
    writeln!(file, "{}", header.join(",")).map_err(io_err)?;
    for t in 0..dataset.len() {
        let row: Vec<String> = dataset.row(t).iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{}", row.join(",")).map_err(io_err)?;
    }
    Ok(())
}

/// Chronological split at the given fractions, standardizing every row with
/// the train-split statistics. `min_segment_rows` is the lookback+horizon
/// requirement each segment must satisfy.
pub fn split(
    dataset: &SeriesDataset,
    ratios: (f64, f64, f64),
    min_segment_rows: usize,
) -> Result<SeriesDataset, DataError> {
    let (r_train, r_val, r_test) = ratios;
    let arr = [r_train, r_val, r_test];
    if arr.iter().any(|&r| r <= 0.0) || (arr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(arr));
    }
    let n = dataset.len();
    let c = dataset.channels;
    let train_end = (n as f64 * r_train).floor() as usize;
    let val_end = (n as f64 * (r_train + r_val)).floor() as usize;
    for (name, rows) in [
        ("train", train_end),
        ("val", val_end - train_end),
        ("test", n - val_end),
    ] {
        if rows < min_segment_rows {
            return Err(DataError::SegmentTooShort {
                segment: match name {
                    "train" => "train",
                    "val" => "val",
                    _ => "test",
                },
                rows,
                needed: min_segment_rows,
            });
        }
    }

    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let mut mean = 0.0;
        for t in 0..train_end {
            mean += dataset.values[t * c + ch];
        }
        mean /= train_end as f64;
        let mut var = 0.0;
        for t in 0..train_end {
            let d = dataset.values[t * c + ch] - mean;
            var += d * d;
        }
        var /= train_end as f64;
        let std = var.sqrt();
        if std == 0.0 {
            return Err(DataError::ConstantChannel(ch));
        }
        stats.push(ChannelStat { mean, std });
    }

    let mut values = dataset.values.clone();
    for t in 0..n {
        for ch in 0..c {
            let s = stats[ch];
            values[t * c + ch] = (values[t * c + ch] - s.mean) / s.std;
        }
    }
    Ok(SeriesDataset {
        values,
        channels: c,
        splits: Some(SplitBounds { train_end, val_end }),
        norm: Some(stats),
    })
}

/// Lookback/horizon window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        WindowSpec {
            lookback,
            horizon,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn total(&self) -> usize {
        self.lookback + self.horizon
    }
}

/// One (X, Y) pair copied out of the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// (lookback x channels), row-major.
    pub x: Vec<f64>,
    /// (horizon x channels), row-major.
    pub y: Vec<f64>,
}

/// All sliding windows of a segment at the given stride; count is
/// floor((len - L - T)/stride) + 1.
pub fn windows(
    dataset: &SeriesDataset,
    segment: Segment,
    spec: &WindowSpec,
) -> Result<Vec<Window>, DataError> {
    if spec.lookback == 0 || spec.horizon == 0 {
        return Err(DataError::InvalidConfig(
            "lookback and horizon must be >= 1".into(),
        ));
    }
    let (start, end) = dataset.segment_range(segment)?;
    let len = end - start;
    let total = spec.total();
    if len < total {
        return Err(DataError::SegmentTooShort {
            segment: segment.name(),
            rows: len,
            needed: total,
        });
    }
    let c = dataset.channels;
    let count = (len - total) / spec.stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let s = start + w * spec.stride;
        let x = dataset.values[s * c..(s + spec.lookback) * c].to_vec();
        let y = dataset.values[(s + spec.lookback) * c..(s + total) * c].to_vec();
        out.push(Window { x, y });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warp_without_amplitude_is_shifted_index() {
        for t in [0usize, 1, 5, 95] {
            let tau = oscillating_warp(t, 0.0, 100).unwrap();
            assert_eq!(tau, (t + 1) as f64);
        }
    }

    #[test]
    fn warp_direct_summation_case() {
        // A=0.5, P=100, t=2: 3 + 0.5*(sin 0 + sin(2 pi/100) + sin(4 pi/100)).
        let expect: f64 = (0..=2)
            .map(|i| 1.0 + 0.5 * (std::f64::consts::TAU * i as f64 / 100.0).sin())
            .sum();
        let got = oscillating_warp(2, 0.5, 100).unwrap();
        assert_eq!(got, expect);
        assert!((got - 3.094061876546809).abs() < 1e-12, "{got}");
    }

    #[test]
    fn warp_increments_are_bounded_and_positive() {
        let grid = warp_grid(500, 0.7, 37).unwrap();
        for w in grid.windows(2) {
            let inc = w[1] - w[0];
            assert!(inc > 0.0 && inc < 2.0);
            assert!(inc > 1.0 - 0.7 - 1e-12 && inc < 1.0 + 0.7 + 1e-12);
        }
    }

    #[test]
    fn warp_grid_matches_per_index_op() {
        let grid = warp_grid(50, 0.3, 12).unwrap();
        for t in [0usize, 3, 17, 49] {
            let direct = oscillating_warp(t, 0.3, 12).unwrap();
            assert!((grid[t] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_rejects_amplitude_at_or_above_one() {
        assert!(oscillating_warp(3, 1.0, 10).is_err());
        assert!(warp_grid(3, 1.2, 10).is_err());
    }

    #[test]
    fn generator_unwarped_pure_sine_hits_zero_after_full_period() {
        let cfg = SyntheticConfig {
            length: 48,
            channels: 1,
            phi: 0.0,
            amplitude: 1.0,
            omega0: std::f64::consts::TAU / 24.0,
            noise_std: 0.0,
            warp_amplitude: 0.0,
            warp_period: 100,
            phases: vec![0.0],
            seed: 1,
        };
        let ds = generate_warped_seasonal(&cfg).unwrap();
        // tau(23) = 24, so x_23 = sin(2 pi) = 0.
        assert!(ds.row(23)[0].abs() < 1e-12, "{}", ds.row(23)[0]);
    }

    #[test]
    fn generator_zero_amplitude_zero_noise_is_identically_zero() {
        let cfg = SyntheticConfig {
            amplitude: 0.0,
            noise_std: 0.0,
            length: 100,
            ..SyntheticConfig::default_desk()
        };
        let ds = generate_warped_seasonal(&cfg).unwrap();
        assert!(ds.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_noiseless_matches_closed_form_when_phi_zero() {
        let cfg = SyntheticConfig {
            phi: 0.0,
            noise_std: 0.0,
            length: 200,
            ..SyntheticConfig::default_desk()
        };
        let ds = generate_warped_seasonal(&cfg).unwrap();
        let tau = warp_grid(cfg.length, cfg.warp_amplitude, cfg.warp_period).unwrap();
        for t in [0usize, 7, 100, 199] {
            for c in 0..cfg.channels {
                let want = cfg.amplitude * (cfg.omega0 * (tau[t] + cfg.phases[c])).sin();
                assert!((ds.row(t)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let cfg = SyntheticConfig {
            length: 300,
            ..SyntheticConfig::default_desk()
        };
        let a = generate_warped_seasonal(&cfg).unwrap();
        let b = generate_warped_seasonal(&cfg).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = generate_warped_seasonal(&SyntheticConfig {
            seed: cfg.seed + 1,
            ..cfg
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = std::env::temp_dir().join("stretchtime_test_csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let ds =
            SeriesDataset::from_values(vec![1.5, -2.25, 0.0003, 7.0, 1e-12, -3.125], 2).unwrap();
        write_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.channels(), 2);
        assert_eq!(loaded.values(), ds.values());
    }

    #[test]
    fn csv_drops_leading_date_column() {
        let dir = std::env::temp_dir().join("stretchtime_test_csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dated.csv");
        std::fs::write(&path, "date,a,b\n2020-01-01,1.0,2.0\n2020-01-02,3.0,4.0\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.channels(), 2);
        assert_eq!(ds.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_reports_bad_cell_position() {
        let dir = std::env::temp_dir().join("stretchtime_test_csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "a,b\n1.0,2.0\n3.0,4.0\n5.0,6.0\n7.0,8.0\n9.0,oops\n").unwrap();
        match load_csv(&path) {
            Err(DataError::BadCell { row: 5, col: 2, .. }) => {}
            other => panic!("expected BadCell(5,2), got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = std::env::temp_dir().join("stretchtime_test_csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ragged.csv");
        std::fs::write(&path, "a,b\n1.0,2.0\n3.0\n").unwrap();
        match load_csv(&path) {
            Err(DataError::Ragged { row: 2, .. }) => {}
            other => panic!("expected Ragged(2), got {other:?}"),
        }
    }

    fn ramp_dataset(n: usize, c: usize) -> SeriesDataset {
        // Non-constant, channel-distinct values.
        let values: Vec<f64> = (0..n * c)
            .map(|i| (i as f64) * 0.25 + ((i % 7) as f64).sin())
            .collect();
        SeriesDataset::from_values(values, c).unwrap()
    }

    #[test]
    fn split_boundaries_and_standardization() {
        let ds = ramp_dataset(100, 2);
        let s = split(&ds, (0.7, 0.1, 0.2), 5).unwrap();
        let b = s.splits().unwrap();
        assert_eq!(b.train_end, 70);
        assert_eq!(b.val_end, 80);
        // Standardized train segment: mean 0, std 1 per channel.
        for ch in 0..2 {
            let vals: Vec<f64> = (0..70).map(|t| s.row(t)[ch]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 70.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 70.0;
            assert!(mean.abs() <= 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-9, "std {}", var.sqrt());
        }
    }

    #[test]
    fn split_ignores_test_rows_for_standardization() {
        let ds = ramp_dataset(100, 1);
        let s1 = split(&ds, (0.7, 0.1, 0.2), 5).unwrap();
        let mut perturbed = ds.clone();
        for t in 90..100 {
            perturbed.values[t] += 1000.0;
        }
        let s2 = split(&perturbed, (0.7, 0.1, 0.2), 5).unwrap();
        assert_eq!(s1.norm(), s2.norm());
        assert_eq!(&s1.values()[..80], &s2.values()[..80]);
    }

    #[test]
    fn split_rejects_constant_channel_and_bad_ratios() {
        let flat = SeriesDataset::from_values(vec![2.0; 50], 1).unwrap();
        assert!(matches!(
            split(&flat, (0.7, 0.1, 0.2), 1),
            Err(DataError::ConstantChannel(0))
        ));
        let ds = ramp_dataset(50, 1);
        assert!(split(&ds, (0.8, 0.1, 0.2), 1).is_err());
        assert!(split(&ds, (0.0, 0.5, 0.5), 1).is_err());
    }

    #[test]
    fn split_rejects_short_segments() {
        let ds = ramp_dataset(100, 1);
        assert!(matches!(
            split(&ds, (0.7, 0.1, 0.2), 11),
            Err(DataError::SegmentTooShort { segment: "val", .. })
        ));
    }

    #[test]
    fn window_counts_and_contents() {
        let ds = ramp_dataset(10, 2);
        // Make the whole thing one "train" segment.
        let mut s = ds.clone();
        s.splits = Some(SplitBounds {
            train_end: 10,
            val_end: 10,
        });
        let spec = WindowSpec::new(4, 2);
        let ws = windows(&s, Segment::Train, &spec).unwrap();
        assert_eq!(ws.len(), 5);
        // First window's Y covers rows 4..6.
        assert_eq!(ws[0].y, s.values()[4 * 2..6 * 2].to_vec());
        // Stride equal to the segment length yields one window when it fits.
        let spec_big = WindowSpec::new(4, 2).with_stride(10);
        assert_eq!(windows(&s, Segment::Train, &spec_big).unwrap().len(), 1);
        // Too-short segment errors.
        let spec_long = WindowSpec::new(9, 2);
        assert!(windows(&s, Segment::Train, &spec_long).is_err());
    }

    #[test]
    fn windows_copy_their_data() {
        let ds = ramp_dataset(12, 1);
        let mut s = ds.clone();
        s.splits = Some(SplitBounds {
            train_end: 12,
            val_end: 12,
        });
        let ws = windows(&s, Segment::Train, &WindowSpec::new(3, 2)).unwrap();
        let first = ws[0].clone();
        drop(s);
        assert_eq!(first.x.len(), 3);
        assert_eq!(first.y.len(), 2);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_count_formula(
                len in 12usize..200,
                lookback in 1usize..6,
                horizon in 1usize..6,
                stride in 1usize..7,
            ) {
                let ds = ramp_dataset(len, 1);
                let mut s = ds.clone();
                s.splits = Some(SplitBounds { train_end: len, val_end: len });
                let spec = WindowSpec { lookback, horizon, stride };
                let ws = windows(&s, Segment::Train, &spec).unwrap();
                prop_assert_eq!(ws.len(), (len - lookback - horizon) / stride + 1);
            }
        }
    }
}
