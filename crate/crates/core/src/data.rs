//! Dataset loading, chronological splitting, windowing, normalization,
//! and desk-scale synthetic data generation.
//!
//! On-disk layout of a dataset directory:
//! `meta.json` (keys `n_nodes`, `n_steps`, `channels`, `interval_minutes`),
//! `values.bin` (tensor format, shape `T x N x C`), `adj.bin` (`N x N`),
//! optional `timestamps.txt` (one epoch-seconds integer per line).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::format;

/// A full multivariate series plus its physical adjacency.
#[derive(Clone, Debug)]
pub struct RawDataset {
    /// `n_steps x n_nodes x channels`, row-major.
    pub values: Vec<f64>,
    pub n_steps: usize,
    pub n_nodes: usize,
    pub channels: usize,
    /// `n_nodes x n_nodes`, nonnegative.
    pub adjacency: Vec<f64>,
    pub interval_minutes: u32,
    pub timestamps: Option<Vec<i64>>,
}

impl RawDataset {
    pub fn validate(&self) -> Result<()> {
        let want = self.n_steps * self.n_nodes * self.channels;
        if self.values.len() != want {
            return Err(Error::Data(format!(
                "values has {} entries, {}x{}x{} wants {}",
                self.values.len(),
                self.n_steps,
                self.n_nodes,
                self.channels,
                want
            )));
        }
        let n = self.n_nodes;
        if self.adjacency.len() != n * n {
            let side = (self.adjacency.len() as f64).sqrt().round() as usize;
            return Err(Error::Data(format!(
                "adjacency is {side}x{side} but values has N={n} nodes"
            )));
        }
        if self.adjacency.iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(Error::Data("adjacency has negative or non-finite entries".into()));
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.n_steps {
                return Err(Error::Data(format!(
                    "{} timestamps for {} steps",
                    ts.len(),
                    self.n_steps
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, t: usize, n: usize, c: usize) -> f64 {
        self.values[(t * self.n_nodes + n) * self.channels + c]
    }

    pub fn describe(&self) -> String {
        format!(
            "{} steps x {} nodes x {} channels, {}-minute interval, timestamps: {}",
            self.n_steps,
            self.n_nodes,
            self.channels,
            self.interval_minutes,
            if self.timestamps.is_some() { "yes" } else { "no" }
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    n_nodes: usize,
    n_steps: usize,
    channels: usize,
    interval_minutes: u32,
}

pub fn load_dataset(dir: &Path) -> Result<RawDataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;

    let (vshape, values) = format::load(&dir.join("values.bin"))?;
    if vshape != [meta.n_steps, meta.n_nodes, meta.channels] {
        return Err(Error::Data(format!(
            "values.bin shape {:?} does not match meta {}x{}x{}",
            vshape, meta.n_steps, meta.n_nodes, meta.channels
        )));
    }
    let (ashape, adjacency) = format::load(&dir.join("adj.bin"))?;
    if ashape.len() != 2 || ashape[0] != ashape[1] || ashape[0] != meta.n_nodes {
        return Err(Error::Data(format!(
            "adjacency is {:?} but values has N={} nodes",
            ashape, meta.n_nodes
        )));
    }

    let ts_path = dir.join("timestamps.txt");
    let timestamps = if ts_path.exists() {
        let text = std::fs::read_to_string(&ts_path)
            .map_err(|e| Error::io(ts_path.display().to_string(), e))?;
        let mut ts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            ts.push(line.parse::<i64>().map_err(|e| {
                Error::Data(format!("{}: line {}: {e}", ts_path.display(), i + 1))
            })?);
        }
        Some(ts)
    } else {
        None
    };

    let raw = RawDataset {
        values,
        n_steps: meta.n_steps,
        n_nodes: meta.n_nodes,
        channels: meta.channels,
        adjacency,
        interval_minutes: meta.interval_minutes,
        timestamps,
    };
    raw.validate()?;
    Ok(raw)
}

pub fn save_dataset(dir: &Path, raw: &RawDataset) -> Result<()> {
    raw.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = Meta {
        n_nodes: raw.n_nodes,
        n_steps: raw.n_steps,
        channels: raw.channels,
        interval_minutes: raw.interval_minutes,
    };
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    format::save(
        &dir.join("values.bin"),
        &[raw.n_steps, raw.n_nodes, raw.channels],
        &raw.values,
    )?;
    format::save(&dir.join("adj.bin"), &[raw.n_nodes, raw.n_nodes], &raw.adjacency)?;
    if let Some(ts) = &raw.timestamps {
        let text: String = ts.iter().map(|t| format!("{t}\n")).collect();
        let ts_path = dir.join("timestamps.txt");
        std::fs::write(&ts_path, text).map_err(|e| Error::io(ts_path.display().to_string(), e))?;
    }
    Ok(())
}

/// Per-channel z-score statistics, fitted on the training range only.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits on `values[0..fit_steps]` of a `steps x nodes x channels` block.
    /// A standard deviation below 1e-8 is replaced by 1.0.
    pub fn fit(values: &[f64], fit_steps: usize, n_nodes: usize, channels: usize) -> Scaler {
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        let count = (fit_steps * n_nodes) as f64;
        for t in 0..fit_steps {
            for n in 0..n_nodes {
                for c in 0..channels {
                    mean[c] += values[(t * n_nodes + n) * channels + c];
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for t in 0..fit_steps {
            for n in 0..n_nodes {
                for c in 0..channels {
                    let d = values[(t * n_nodes + n) * channels + c] - mean[c];
                    std[c] += d * d;
                }
            }
        }
        for s in std.iter_mut() {
            *s = (*s / count).sqrt();
            if *s < 1e-8 {
                *s = 1.0;
            }
        }
        Scaler { mean, std }
    }

    pub fn transform_in_place(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }

    pub fn inverse_in_place(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let ch = i % c;
            *v = *v * self.std[ch] + self.mean[ch];
        }
    }

    pub fn inverse(&self, values: &[f64]) -> Vec<f64> {
        let mut out = values.to_vec();
        self.inverse_in_place(&mut out);
        out
    }
}

/// Windowed, normalized view of a dataset: the raw series is split
/// chronologically at the ratio boundaries, then windows are enumerated
/// inside each segment independently, so no window straddles a boundary
/// and no validation/test step leaks into the scaler.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    /// Full normalized series, `n_steps x n_nodes x channels`.
    pub norm_values: Vec<f64>,
    pub n_steps: usize,
    pub n_nodes: usize,
    pub channels: usize,
    pub window: usize,
    pub horizon: usize,
    /// Window start indices per split (input covers `s..s+T`, target
    /// `s+T..s+T+tau`).
    pub train_starts: Vec<usize>,
    pub val_starts: Vec<usize>,
    pub test_starts: Vec<usize>,
    /// Raw-series boundaries `(train_end, val_end, total)`.
    pub bounds: (usize, usize, usize),
    pub scaler: Scaler,
    pub adjacency: Vec<f64>,
    pub interval_minutes: u32,
    pub timestamps: Option<Vec<i64>>,
}

pub fn make_windows(
    raw: &RawDataset,
    window: usize,
    horizon: usize,
    ratios: (f64, f64, f64),
) -> Result<DatasetBundle> {
    raw.validate()?;
    if window < 1 || horizon < 1 {
        return Err(Error::Config(format!(
            "window {window} and horizon {horizon} must both be >= 1"
        )));
    }
    let (r1, r2, r3) = ratios;
    if r1 < 0.0 || r2 < 0.0 || r3 < 0.0 || ((r1 + r2 + r3) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    if raw.n_steps < window + horizon {
        return Err(Error::Data(format!(
            "series of {} steps is too short for window {} + horizon {}",
            raw.n_steps, window, horizon
        )));
    }
    let total = raw.n_steps;
    let b1 = (total as f64 * r1).floor() as usize;
    let b2 = (total as f64 * (r1 + r2)).floor() as usize;

    let starts_in = |lo: usize, hi: usize| -> Vec<usize> {
        if hi - lo >= window + horizon {
            (lo..=hi - window - horizon).collect()
        } else {
            Vec::new()
        }
    };
    let train_starts = starts_in(0, b1);
    let val_starts = starts_in(b1, b2);
    let test_starts = starts_in(b2, total);
    if train_starts.is_empty() {
        return Err(Error::Data(format!(
            "training segment of {} steps yields no {}+{} windows",
            b1, window, horizon
        )));
    }

    let scaler = Scaler::fit(&raw.values, b1, raw.n_nodes, raw.channels);
    let mut norm_values = raw.values.clone();
    scaler.transform_in_place(&mut norm_values);

    Ok(DatasetBundle {
        norm_values,
        n_steps: total,
        n_nodes: raw.n_nodes,
        channels: raw.channels,
        window,
        horizon,
        train_starts,
        val_starts,
        test_starts,
        bounds: (b1, b2, total),
        scaler,
        adjacency: raw.adjacency.clone(),
        interval_minutes: raw.interval_minutes,
        timestamps: raw.timestamps.clone(),
    })
}

impl DatasetBundle {
    fn step_width(&self) -> usize {
        self.n_nodes * self.channels
    }

    /// Normalized input window starting at raw step `s`.
    pub fn input_at(&self, s: usize) -> &[f64] {
        let w = self.step_width();
        &self.norm_values[s * w..(s + self.window) * w]
    }

    /// Normalized target window for input start `s`.
    pub fn target_at(&self, s: usize) -> &[f64] {
        let w = self.step_width();
        let t0 = s + self.window;
        &self.norm_values[t0 * w..(t0 + self.horizon) * w]
    }

    /// Assembles `B x T x N x C` inputs and `B x tau x N x C` targets for
    /// the given window starts.
    pub fn batch(&self, starts: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let w = self.step_width();
        let mut x = Vec::with_capacity(starts.len() * self.window * w);
        let mut y = Vec::with_capacity(starts.len() * self.horizon * w);
        for &s in starts {
            x.extend_from_slice(self.input_at(s));
            y.extend_from_slice(self.target_at(s));
        }
        (x, y)
    }
}

/// A planted directed influence: node `from`'s base signal is added to
/// node `to`'s series after `lag` steps, scaled by `weight`.
#[derive(Clone, Debug)]
pub struct PlantedEdge {
    pub from: usize,
    pub to: usize,
    pub lag: usize,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    /// Steps per cycle of every node's base sinusoid.
    pub period: usize,
    pub base_level: f64,
    pub amplitude: f64,
    /// Per-node weight of its own base signal; 0 turns a node into a pure
    /// relay of its incoming edges.
    pub own_weight: Vec<f64>,
    pub edges: Vec<PlantedEdge>,
    pub noise_std: f64,
    pub interval_minutes: u32,
}

impl SyntheticSpec {
    pub fn new(n_nodes: usize, period: usize) -> Self {
        SyntheticSpec {
            period,
            base_level: 50.0,
            amplitude: 10.0,
            own_weight: vec![1.0; n_nodes],
            edges: Vec::new(),
            noise_std: 0.0,
            interval_minutes: 5,
        }
    }
}

/// Generates node sinusoids with node-specific phases plus directed
/// lagged cross-node effects. The base phase arithmetic is integer modulo
/// the period, so a noiseless series is exactly periodic. Returns the
/// series together with the planted adjacency (self-loops plus edges).
pub fn generate_synthetic(
    n_nodes: usize,
    t_total: usize,
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<RawDataset> {
    if n_nodes < 2 {
        return Err(Error::Config(format!("need at least 2 nodes, got {n_nodes}")));
    }
    if spec.period == 0 || t_total == 0 {
        return Err(Error::Config("period and t_total must be positive".into()));
    }
    if spec.own_weight.len() != n_nodes {
        return Err(Error::Config(format!(
            "own_weight has {} entries for {} nodes",
            spec.own_weight.len(),
            n_nodes
        )));
    }
    for e in &spec.edges {
        if e.from >= n_nodes || e.to >= n_nodes {
            return Err(Error::Config(format!(
                "edge {}->{} out of range for {} nodes",
                e.from, e.to, n_nodes
            )));
        }
    }
    let period = spec.period as i64;
    // phase offset in whole steps, distinct per node
    let phase = |node: usize| -> i64 { (node as i64 * period) / n_nodes as i64 };
    let base = |node: usize, t: i64| -> f64 {
        let slot = (t + phase(node)).rem_euclid(period);
        spec.amplitude * (2.0 * std::f64::consts::PI * slot as f64 / period as f64).sin()
    };
    let mut rng = Rng::seed_from_u64(seed);
    let mut values = vec![0.0; t_total * n_nodes];
    for t in 0..t_total {
        for n in 0..n_nodes {
            values[t * n_nodes + n] = spec.base_level + spec.own_weight[n] * base(n, t as i64);
        }
    }
    for e in &spec.edges {
        for t in 0..t_total {
            values[t * n_nodes + e.to] += e.weight * base(e.from, t as i64 - e.lag as i64);
        }
    }
    if spec.noise_std > 0.0 {
        for v in values.iter_mut() {
            *v += spec.noise_std * rng.normal();
        }
    }
    let mut adjacency = vec![0.0; n_nodes * n_nodes];
    for n in 0..n_nodes {
        adjacency[n * n_nodes + n] = 1.0;
    }
    for e in &spec.edges {
        adjacency[e.from * n_nodes + e.to] = e.weight.abs();
    }
    Ok(RawDataset {
        values,
        n_steps: t_total,
        n_nodes,
        channels: 1,
        adjacency,
        interval_minutes: spec.interval_minutes,
        timestamps: None,
    })
}

/// Ingests a CSV with a header of node ids and one timestamped row per
/// step into a [`RawDataset`] (channels = 1). The first column holds the
/// timestamp; remaining columns are node readings.
pub fn convert_csv(
    values_csv: &Path,
    adjacency_csv: Option<&Path>,
    interval_minutes: u32,
) -> Result<RawDataset> {
    let text = std::fs::read_to_string(values_csv)
        .map_err(|e| Error::io(values_csv.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", values_csv.display())))?;
    let n_nodes = header.split(',').count().saturating_sub(1);
    if n_nodes == 0 {
        return Err(Error::Data(format!(
            "{}: header must list a timestamp column plus node ids",
            values_csv.display()
        )));
    }
    let mut values = Vec::new();
    let mut timestamps = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let ts_field = fields.next().unwrap().trim();
        let ts = ts_field.parse::<i64>().map_err(|e| {
            Error::Data(format!(
                "{}: line {}: bad timestamp '{ts_field}': {e}",
                values_csv.display(),
                lineno + 1
            ))
        })?;
        timestamps.push(ts);
        let mut count = 0;
        for f in fields {
            let v = f.trim().parse::<f64>().map_err(|e| {
                Error::Data(format!(
                    "{}: line {}: bad value '{f}': {e}",
                    values_csv.display(),
                    lineno + 1
                ))
            })?;
            values.push(v);
            count += 1;
        }
        if count != n_nodes {
            return Err(Error::Data(format!(
                "{}: line {}: {} values for {} nodes",
                values_csv.display(),
                lineno + 1,
                count,
                n_nodes
            )));
        }
    }
    let n_steps = timestamps.len();
    if n_steps == 0 {
        return Err(Error::Data(format!("{}: no data rows", values_csv.display())));
    }

    let adjacency = match adjacency_csv {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let mut adj = Vec::new();
            let mut rows = 0;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                rows += 1;
                for f in line.split(',') {
                    adj.push(f.trim().parse::<f64>().map_err(|e| {
                        Error::Data(format!("{}: line {}: {e}", path.display(), lineno + 1))
                    })?);
                }
            }
            if rows != n_nodes || adj.len() != n_nodes * n_nodes {
                return Err(Error::Data(format!(
                    "{}: adjacency is {}x{} but values has N={} nodes",
                    path.display(),
                    rows,
                    if rows > 0 { adj.len() / rows } else { 0 },
                    n_nodes
                )));
            }
            adj
        }
        None => {
            let mut adj = vec![0.0; n_nodes * n_nodes];
            for n in 0..n_nodes {
                adj[n * n_nodes + n] = 1.0;
            }
            adj
        }
    };

    let raw = RawDataset {
        values,
        n_steps,
        n_nodes,
        channels: 1,
        adjacency,
        interval_minutes,
        timestamps: Some(timestamps),
    };
    raw.validate()?;
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_raw(n_steps: usize, n_nodes: usize) -> RawDataset {
        let values: Vec<f64> = (0..n_steps * n_nodes).map(|i| i as f64 * 0.1).collect();
        let mut adjacency = vec![0.0; n_nodes * n_nodes];
        for n in 0..n_nodes {
            adjacency[n * n_nodes + n] = 1.0;
        }
        RawDataset {
            values,
            n_steps,
            n_nodes,
            channels: 1,
            adjacency,
            interval_minutes: 5,
            timestamps: None,
        }
    }

    #[test]
    fn split_boundaries_and_window_counts() {
        // T_total=100, T=12, tau=12, 7:1:2 -> segments end at 70/80/100.
        // Train start indices: 0..=70-24 -> 47 windows; val and test
        // segments are shorter than 24 steps and yield none.
        let raw = toy_raw(100, 3);
        let b = make_windows(&raw, 12, 12, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(b.bounds, (70, 80, 100));
        assert_eq!(b.train_starts.len(), 47);
        assert_eq!(b.val_starts.len(), 0);
        assert_eq!(b.test_starts.len(), 0);
    }

    #[test]
    fn minimal_single_split_yields_one_window() {
        let raw = toy_raw(2, 2);
        let b = make_windows(&raw, 1, 1, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!(b.train_starts, vec![0]);
    }

    #[test]
    fn target_follows_input_immediately() {
        let raw = toy_raw(30, 2);
        let b = make_windows(&raw, 3, 2, (1.0, 0.0, 0.0)).unwrap();
        let s = 5;
        let x = b.input_at(s);
        let y = b.target_at(s);
        let w = b.n_nodes * b.channels;
        // last input step is raw step s+2, first target step is s+3
        assert_eq!(x[x.len() - w..], b.norm_values[(s + 2) * w..(s + 3) * w]);
        assert_eq!(y[..w], b.norm_values[(s + 3) * w..(s + 4) * w]);
    }

    #[test]
    fn constant_series_hits_std_guard() {
        let mut raw = toy_raw(50, 2);
        raw.values.iter_mut().for_each(|v| *v = 60.0);
        let b = make_windows(&raw, 4, 4, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(b.scaler.mean, vec![60.0]);
        assert_eq!(b.scaler.std, vec![1.0]);
        assert!(b.norm_values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaler_depends_only_on_training_range() {
        let mut raw = toy_raw(100, 2);
        let b1 = make_windows(&raw, 4, 4, (0.7, 0.1, 0.2)).unwrap();
        // perturb values after the training boundary; scaler must not move
        for t in 70..100 {
            for n in 0..2 {
                raw.values[t * 2 + n] += 1000.0;
            }
        }
        let b2 = make_windows(&raw, 4, 4, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(b1.scaler, b2.scaler);
    }

    #[test]
    fn scaler_roundtrip_within_1e10() {
        let raw = toy_raw(50, 3);
        let b = make_windows(&raw, 4, 4, (0.7, 0.1, 0.2)).unwrap();
        let mut x = raw.values.clone();
        b.scaler.transform_in_place(&mut x);
        b.scaler.inverse_in_place(&mut x);
        for (a, b) in x.iter().zip(&raw.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn windows_never_straddle_split_boundaries() {
        let raw = toy_raw(200, 2);
        let b = make_windows(&raw, 6, 6, (0.7, 0.1, 0.2)).unwrap();
        let (b1, b2, total) = b.bounds;
        let span = b.window + b.horizon;
        for &s in &b.train_starts {
            assert!(s + span <= b1);
        }
        for &s in &b.val_starts {
            assert!(s >= b1 && s + span <= b2);
        }
        for &s in &b.test_starts {
            assert!(s >= b2 && s + span <= total);
        }
    }

    #[test]
    fn too_short_series_rejected() {
        let raw = toy_raw(5, 2);
        assert!(make_windows(&raw, 4, 4, (1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn synthetic_noiseless_is_exactly_periodic() {
        let spec = SyntheticSpec::new(8, 288);
        let raw = generate_synthetic(8, 2000, &spec, 1).unwrap();
        for n in 0..8 {
            for t in 0..2000 - 288 {
                assert_eq!(raw.value(t, n, 0), raw.value(t + 288, n, 0));
            }
        }
    }

    #[test]
    fn planted_lag_peaks_cross_correlation() {
        // pure relay: node 3 carries node 1's base delayed by 2 steps
        let mut spec = SyntheticSpec::new(6, 48);
        spec.own_weight[3] = 0.0;
        spec.edges.push(PlantedEdge {
            from: 1,
            to: 3,
            lag: 2,
            weight: 1.0,
        });
        let raw = generate_synthetic(6, 480, &spec, 7).unwrap();
        let series = |n: usize| -> Vec<f64> { (0..480).map(|t| raw.value(t, n, 0)).collect() };
        let a = series(1);
        let b = series(3);
        let corr = |lag: usize| -> f64 {
            (0..480 - 48).map(|t| a[t] * b[t + lag]).sum::<f64>()
        };
        let best = (0..48).max_by(|&l1, &l2| corr(l1).partial_cmp(&corr(l2)).unwrap());
        assert_eq!(best, Some(2));
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let mut spec = SyntheticSpec::new(4, 24);
        spec.noise_std = 0.5;
        let a = generate_synthetic(4, 100, &spec, 5).unwrap();
        let b = generate_synthetic(4, 100, &spec, 5).unwrap();
        assert_eq!(a.values, b.values);
        let c = generate_synthetic(4, 100, &spec, 6).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(8, 48);
        let raw = generate_synthetic(8, 100, &spec, 3).unwrap();
        save_dataset(dir.path(), &raw).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.n_nodes, 8);
        assert_eq!(loaded.values, raw.values);
        assert_eq!(loaded.adjacency, raw.adjacency);
    }

    #[test]
    fn adjacency_dimension_mismatch_names_both() {
        let mut raw = toy_raw(20, 8);
        raw.adjacency = vec![0.0; 49]; // 7x7
        let err = raw.validate().unwrap_err().to_string();
        assert!(err.contains('7') && err.contains('8'), "{err}");
    }

    #[test]
    fn csv_conversion_parses_values_and_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("v.csv");
        std::fs::write(&csv, "ts,s1,s2\n1000,1.5,2.5\n1300,3.5,4.5\n").unwrap();
        let raw = convert_csv(&csv, None, 5).unwrap();
        assert_eq!(raw.n_nodes, 2);
        assert_eq!(raw.n_steps, 2);
        assert_eq!(raw.values, vec![1.5, 2.5, 3.5, 4.5]);
        assert_eq!(raw.timestamps, Some(vec![1000, 1300]));
    }
}
