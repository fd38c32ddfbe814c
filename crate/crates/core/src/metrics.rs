//! PSNR, NMSE and displacement-field error, plus the benchmark report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::DisplacementMap;
use crate::imgio::Image2D;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("reference has zero energy inside the mask")]
    ZeroEnergyReference,
    #[error("mask selects no pixels")]
    EmptyMask,
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Peak used in the PSNR numerator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Peak {
    /// Maximum of the reference inside the mask.
    #[default]
    ReferenceMax,
    Fixed(f64),
}

fn check(a: &Image2D, b: &Image2D, mask: Option<&Image2D>) -> Result<()> {
    a.ensure_same_shape(b)
        .map_err(|e| MetricError::GeometryMismatch(e.to_string()))?;
    if let Some(m) = mask {
        a.ensure_same_shape(m)
            .map_err(|e| MetricError::GeometryMismatch(e.to_string()))?;
    }
    Ok(())
}

fn selected<'a>(
    a: &'a Image2D,
    b: &'a Image2D,
    mask: Option<&'a Image2D>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m.pixels()[*i] != 0.0))
        .map(|(_, (&x, &y))| (x as f64, y as f64))
}

/// `Σ(ref - test)² / Σ ref²` over the mask.
pub fn nmse(reference: &Image2D, test: &Image2D, mask: Option<&Image2D>) -> Result<f64> {
    check(reference, test, mask)?;
    let (mut err, mut energy) = (0.0, 0.0);
    for (r, t) in selected(reference, test, mask) {
        err += (r - t) * (r - t);
        energy += r * r;
    }
    if energy <= 0.0 {
        return Err(MetricError::ZeroEnergyReference);
    }
    Ok(err / energy)
}

/// PSNR in dB with the peak taken from the reference. Identical images give
/// `f64::INFINITY`.
pub fn psnr(reference: &Image2D, test: &Image2D, mask: Option<&Image2D>) -> Result<f64> {
    psnr_with_peak(reference, test, mask, Peak::ReferenceMax)
}

pub fn psnr_with_peak(
    reference: &Image2D,
    test: &Image2D,
    mask: Option<&Image2D>,
    peak: Peak,
) -> Result<f64> {
    check(reference, test, mask)?;
    let (mut sse, mut n, mut max) = (0.0, 0usize, f64::NEG_INFINITY);
    for (r, t) in selected(reference, test, mask) {
        sse += (r - t) * (r - t);
        n += 1;
        max = max.max(r);
    }
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    let mse = sse / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = match peak {
        Peak::ReferenceMax => max,
        Peak::Fixed(p) => p,
    };
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Root-mean-square displacement error in pixels over the mask.
pub fn field_rmse(
    truth: &DisplacementMap,
    est: &DisplacementMap,
    mask: Option<&Image2D>,
) -> Result<f64> {
    check(truth.image(), est.image(), mask)?;
    let (mut sse, mut n) = (0.0, 0usize);
    for (a, b) in selected(truth.image(), est.image(), mask) {
        sse += (a - b) * (a - b);
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok((sse / n as f64).sqrt())
}

/// Serde helpers writing non-finite floats as strings.
pub mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn to_repr(v: f64) -> String {
        if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("invalid float `{other}`"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&to_repr(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

/// One (sample, method, contrast) score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub sample_id: String,
    pub subject: u32,
    pub slice: u32,
    pub method: String,
    pub contrast: String,
    #[serde(with = "nonfinite")]
    pub psnr_db: f64,
    #[serde(with = "nonfinite")]
    pub nmse: f64,
    #[serde(default, with = "nonfinite::option")]
    pub field_rmse_px: Option<f64>,
    /// Restored image stem relative to the report directory.
    #[serde(default)]
    pub output: Option<String>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "nonfinite")]
    pub mean: f64,
    #[serde(with = "nonfinite")]
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                sd: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, sd, n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Every slice counts once.
    Slice,
    /// Slices are averaged per subject first.
    Subject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub contrast: String,
    pub granularity: Granularity,
    pub psnr_db: Stat,
    pub nmse: Stat,
    #[serde(default)]
    pub field_rmse_px: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub sample_id: String,
    pub method: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<String>,
    pub sample_ids: Vec<String>,
    pub entries: Vec<EvalEntry>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<Failure>,
}

/// Contrast order used when sorting aggregates.
const CONTRAST_ORDER: [&str; 4] = ["b50", "b1400", "adc", "b50_fold"];

fn contrast_rank(c: &str) -> usize {
    CONTRAST_ORDER
        .iter()
        .position(|&k| k == c)
        .unwrap_or(CONTRAST_ORDER.len())
}

impl EvalReport {
    pub fn new(
        methods: Vec<String>,
        sample_ids: Vec<String>,
        entries: Vec<EvalEntry>,
        failures: Vec<Failure>,
    ) -> Self {
        let aggregates = aggregate(&methods, &entries);
        EvalReport {
            methods,
            sample_ids,
            entries,
            aggregates,
            failures,
        }
    }

    pub fn aggregate(
        &self,
        method: &str,
        contrast: &str,
        granularity: Granularity,
    ) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.contrast == contrast && a.granularity == granularity)
    }

    /// Flat table, one row per sample/contrast/method.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,subject,slice,method,contrast,psnr_db,nmse,field_rmse_px\n");
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{v}")
            } else {
                nonfinite::to_repr(v)
            }
        };
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.sample_id,
                e.subject,
                e.slice,
                e.method,
                e.contrast,
                fmt(e.psnr_db),
                fmt(e.nmse),
                e.field_rmse_px.map(fmt).unwrap_or_default()
            );
        }
        s
    }

    /// Table-2-style summary: mean ± SD per method and contrast.
    pub fn summary_table(&self, granularity: Granularity) -> String {
        let mut s = format!(
            "{:<14} {:<9} {:>18} {:>18}\n",
            "method", "contrast", "PSNR (dB)", "NMSE"
        );
        for a in self.aggregates.iter().filter(|a| a.granularity == granularity) {
            let _ = writeln!(
                s,
                "{:<14} {:<9} {:>8.2} ± {:<7.2} {:>8.3} ± {:<7.3}",
                a.method, a.contrast, a.psnr_db.mean, a.psnr_db.sd, a.nmse.mean, a.nmse.sd
            );
        }
        s
    }
}

fn aggregate(methods: &[String], entries: &[EvalEntry]) -> Vec<Aggregate> {
    let method_rank = |m: &str| methods.iter().position(|k| k == m).unwrap_or(methods.len());
    type Key = (usize, String, usize, String);
    let mut groups: BTreeMap<Key, Vec<&EvalEntry>> = BTreeMap::new();
    for e in entries {
        let key = (
            method_rank(&e.method),
            e.method.clone(),
            contrast_rank(&e.contrast),
            e.contrast.clone(),
        );
        groups.entry(key).or_default().push(e);
    }
    let mut out = Vec::new();
    for ((_, method, _, contrast), group) in groups {
        let rmse_of = |es: &[&EvalEntry]| -> Option<Vec<f64>> {
            es.iter().map(|e| e.field_rmse_px).collect()
        };
        // per slice
        let psnr: Vec<f64> = group.iter().map(|e| e.psnr_db).collect();
        let nmse: Vec<f64> = group.iter().map(|e| e.nmse).collect();
        out.push(Aggregate {
            method: method.clone(),
            contrast: contrast.clone(),
            granularity: Granularity::Slice,
            psnr_db: Stat::of(&psnr),
            nmse: Stat::of(&nmse),
            field_rmse_px: rmse_of(&group).map(|v| Stat::of(&v)),
        });
        // per subject
        let mut by_subject: BTreeMap<u32, Vec<&EvalEntry>> = BTreeMap::new();
        for e in &group {
            by_subject.entry(e.subject).or_default().push(e);
        }
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let mut sp = Vec::new();
        let mut sn = Vec::new();
        let mut sr = Some(Vec::new());
        for es in by_subject.values() {
            sp.push(mean(es.iter().map(|e| e.psnr_db).collect()));
            sn.push(mean(es.iter().map(|e| e.nmse).collect()));
            match (rmse_of(es), sr.as_mut()) {
                (Some(v), Some(acc)) => acc.push(mean(v)),
                _ => sr = None,
            }
        }
        out.push(Aggregate {
            method,
            contrast,
            granularity: Granularity::Subject,
            psnr_db: Stat::of(&sp),
            nmse: Stat::of(&sn),
            field_rmse_px: sr.map(|v| Stat::of(&v)),
        });
    }
    out
}
