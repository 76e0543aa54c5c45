//! Output SNR, improvement over the unprocessed input, and summary statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::dsp::energy;
use crate::error::{Error, Result};
use crate::signal::{fir_apply, FirFilter, MultichannelSignal};

/// SNRs are clamped to `[-SNR_CAP_DB, SNR_CAP_DB]`; a silent interference yields `+SNR_CAP_DB`.
pub const SNR_CAP_DB: f64 = 200.0;

/// `10 log10(signal / interference)`, capped.
///
/// A zero interference energy returns `+SNR_CAP_DB` unless the signal is also
/// zero, in which case nothing of the target got through and `-SNR_CAP_DB` is returned.
pub fn snr_db(signal_energy: f64, interference_energy: f64) -> f64 {
    if signal_energy <= 0.0 {
        return -SNR_CAP_DB;
    }
    if interference_energy <= 0.0 {
        return SNR_CAP_DB;
    }
    (10.0 * (signal_energy / interference_energy).log10()).clamp(-SNR_CAP_DB, SNR_CAP_DB)
}

/// Energy ratio of `outputs[target]` against the sample-wise sum of all other outputs.
pub fn snr_of_components(outputs: &[Vec<f64>], target: usize) -> Result<f64> {
    let Some(own) = outputs.get(target) else {
        return Err(Error::Config(format!("target {target} out of range for {} sources", outputs.len())));
    };
    let mut rest = vec![0.0; own.len()];
    for (p, out) in outputs.iter().enumerate() {
        if p != target {
            if out.len() != rest.len() {
                return Err(Error::Shape("component outputs differ in length".into()));
            }
            rest.iter_mut().zip(out).for_each(|(r, v)| *r += v);
        }
    }
    Ok(snr_db(energy(own), energy(&rest)))
}

/// Output SNR of source `target` after filtering every source image separately with `filter`.
pub fn output_snr(filter: &FirFilter, images: &[MultichannelSignal], target: usize) -> Result<f64> {
    if target >= images.len() {
        return Err(Error::Config(format!("target {target} out of range for {} sources", images.len())));
    }
    let outputs = images.iter().map(|img| fir_apply(filter, img)).collect::<Result<Vec<_>>>()?;
    snr_of_components(&outputs, target)
}

/// Input SNR of source `target` at one microphone channel, before any processing.
pub fn channel_snr(images: &[MultichannelSignal], channel: usize, target: usize) -> Result<f64> {
    if let Some(img) = images.iter().find(|i| channel >= i.channels()) {
        return Err(Error::Shape(format!("channel {channel} out of range for {} channels", img.channels())));
    }
    let outputs: Vec<Vec<f64>> = images.iter().map(|i| i.channel_vec(channel)).collect();
    snr_of_components(&outputs, target)
}

pub fn snr_improvement(processed_db: f64, unprocessed_db: f64) -> f64 {
    processed_db - unprocessed_db
}

/// Quantile of sorted data with linear interpolation at position `p (n - 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let mut v: Vec<f64> = values.to_vec();
        if v.iter().any(|x| x.is_nan()) {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Summary {
            count: v.len(),
            min: *v.first()?,
            q1: quantile(&v, 0.25)?,
            median: quantile(&v, 0.5)?,
            q3: quantile(&v, 0.75)?,
            max: *v.last()?,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` for fewer than two points or constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

/// One enhancement or separation measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRecord {
    pub method: String,
    pub array_config: String,
    pub n_sources: usize,
    pub source: usize,
    /// Listener name, or `ref` for separation measurements at the reference microphone.
    pub listener: String,
    /// `left`, `right`, or `mic<k>` for separation measurements.
    pub ear: String,
    pub snr_db: f64,
    pub improvement_db: f64,
}

/// Separation SNR paired with the enhancement SNR it led to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub method: String,
    pub array_config: String,
    pub source: usize,
    pub listener: String,
    pub ear: String,
    pub separation_snr_db: f64,
    pub enhancement_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub array_config: String,
    pub snr: Summary,
    pub improvement: Summary,
}

/// Quartile table per `(method, array_config)`, in sorted key order.
pub fn summarize(records: &[SnrRecord]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(&str, &str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let g = groups.entry((&r.method, &r.array_config)).or_default();
        g.0.push(r.snr_db);
        g.1.push(r.improvement_db);
    }
    groups
        .into_iter()
        .filter_map(|((method, array_config), (snr, imp))| {
            Some(CellSummary {
                method: method.to_string(),
                array_config: array_config.to_string(),
                snr: Summary::of(&snr)?,
                improvement: Summary::of(&imp)?,
            })
        })
        .collect()
}

/// Join separation and enhancement records on `(method, array_config, source)`.
pub fn scatter(separation: &[SnrRecord], enhancement: &[SnrRecord]) -> Vec<ScatterPoint> {
    enhancement
        .iter()
        .filter_map(|e| {
            let s = separation
                .iter()
                .find(|s| s.method == e.method && s.array_config == e.array_config && s.source == e.source)?;
            Some(ScatterPoint {
                method: e.method.clone(),
                array_config: e.array_config.clone(),
                source: e.source,
                listener: e.listener.clone(),
                ear: e.ear.clone(),
                separation_snr_db: s.snr_db,
                enhancement_snr_db: e.snr_db,
            })
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
