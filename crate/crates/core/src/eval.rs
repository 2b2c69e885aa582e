//! Posterior analyses: mode separation, percentile bands, re-simulation
//! error and latent diagnostics, plus the plot-ready exports.

use std::fs;
use std::path::Path;

use numerics::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, parse_row, Record};
use crate::error::{Error, Result};
use crate::model::{LatentStats, ModelKind, PosteriorSample, PosteriorSampler};
use crate::optics::{simulate, DeviceParams, OpticsConfig, Spectrum};
use crate::surrogate::ForwardNet;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const BAND_FILE: &str = "band.csv";
pub const LATENT_FILE: &str = "latent.csv";

const DEPTH_BINS: usize = 20;

// ---------------------------------------------------------------------------
// k-means

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Centroids in the (Λ₁, Λ₂) plane, nm.
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// RMS distance of a cluster's members to its centroid.
    pub within_std: Vec<f64>,
    /// Sum of squared distances after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &[f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, each further one drawn with
/// probability proportional to squared distance from the chosen set.
fn seed_centroids(points: &[[f64; 2]], k: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.index(points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.uniform(0.0, total);
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > r {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.index(points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds. Stops when assignments no longer
/// change or after `max_iter` updates. A cluster that empties keeps its
/// previous centroid.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64, max_iter: usize) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::Invalid("k-means needs k ≥ 1".into()));
    }
    if points.len() < k {
        return Err(Error::TooFewRows {
            needed: k,
            found: points.len(),
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("k-means points must be finite".into()));
    }
    let mut rng = Rng::new(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        let mut changed = false;
        let mut objective = 0.0;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (j, d) = nearest(p, &centroids);
            if j != *a {
                *a = j;
                changed = true;
            }
            objective += d;
        }
        trace.push(objective);
        if !changed {
            break;
        }
    }

    // Final centroids are the means of the final assignment.
    let mut sums = vec![[0.0; 2]; k];
    let mut sizes = vec![0usize; k];
    for (p, &a) in points.iter().zip(&assignments) {
        sums[a][0] += p[0];
        sums[a][1] += p[1];
        sizes[a] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            centroids[j] = [sums[j][0] / sizes[j] as f64, sums[j][1] / sizes[j] as f64];
        }
    }
    let mut sq = vec![0.0; k];
    for (p, &a) in points.iter().zip(&assignments) {
        sq[a] += dist2(p, &centroids[a]);
    }
    let within_std = sq
        .iter()
        .zip(&sizes)
        .map(|(s, &n)| if n > 0 { (s / n as f64).sqrt() } else { 0.0 })
        .collect();

    Ok(ClusterResult {
        centroids,
        assignments,
        sizes,
        within_std,
        objective_trace: trace,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Percentile bands

/// Percentile of sorted data, linear interpolation between order statistics
/// at fractional index `p/100 · (n − 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Invalid(format!("percentile {p} outside [0, 100]")));
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Order statistic at rank `p/100·(n−1)`, rounded down or up. Bands built
/// from these (down for the lower edge, up for the upper) always hold at
/// least `hi − lo` percent of the values.
pub fn order_statistic(sorted: &[f64], p: f64, round_up: bool) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Invalid(format!("percentile {p} outside [0, 100]")));
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let idx = if round_up { pos.ceil() } else { pos.floor() };
    Ok(sorted[idx as usize])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileBand {
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean: Vec<f64>,
}

impl PercentileBand {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Per-wavelength fraction of `spectra` values inside `[lower, upper]`.
    pub fn coverage(&self, spectra: &[Spectrum]) -> Result<Vec<f64>> {
        check_widths(spectra, self.len())?;
        let n = spectra.len() as f64;
        Ok((0..self.len())
            .map(|k| {
                let inside = spectra
                    .iter()
                    .filter(|s| (self.lower[k]..=self.upper[k]).contains(&s.0[k]))
                    .count();
                inside as f64 / n
            })
            .collect())
    }
}

fn check_widths(spectra: &[Spectrum], m: usize) -> Result<()> {
    if spectra.is_empty() {
        return Err(Error::Empty("spectrum set"));
    }
    for s in spectra {
        if s.len() != m {
            return Err(Error::Length {
                what: "spectrum",
                expected: m,
                found: s.len(),
            });
        }
    }
    Ok(())
}

/// Per-wavelength band between outward order statistics, plus the mean.
pub fn percentile_band(spectra: &[Spectrum], lo: f64, hi: f64) -> Result<PercentileBand> {
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(Error::Invalid(format!("band [{lo}, {hi}] must satisfy 0 ≤ lo < hi ≤ 100")));
    }
    let m = spectra.first().map_or(0, Spectrum::len);
    check_widths(spectra, m)?;
    let n = spectra.len();
    let mut band = PercentileBand {
        lo_pct: lo,
        hi_pct: hi,
        lower: Vec::with_capacity(m),
        upper: Vec::with_capacity(m),
        mean: Vec::with_capacity(m),
    };
    let mut column = vec![0.0; n];
    for k in 0..m {
        for (c, s) in column.iter_mut().zip(spectra) {
            *c = s.0[k];
        }
        band.mean.push(column.iter().sum::<f64>() / n as f64);
        column.sort_by(f64::total_cmp);
        band.lower.push(order_statistic(&column, lo, false)?);
        band.upper.push(order_statistic(&column, hi, true)?);
    }
    Ok(band)
}

// ---------------------------------------------------------------------------
// Bridge points

/// Fraction of points farther than `tau_mult` × (own cluster's within std)
/// from their assigned centroid. Defined for two clusters only.
pub fn bridge_fraction(points: &[[f64; 2]], clusters: &ClusterResult, tau_mult: f64) -> Result<f64> {
    if clusters.k() != 2 {
        return Err(Error::Invalid(format!(
            "bridge fraction needs 2 clusters, got {}",
            clusters.k()
        )));
    }
    if points.len() != clusters.assignments.len() {
        return Err(Error::Length {
            what: "cluster assignments",
            expected: points.len(),
            found: clusters.assignments.len(),
        });
    }
    if points.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let far = points
        .iter()
        .zip(&clusters.assignments)
        .filter(|(p, &a)| dist2(p, &clusters.centroids[a]).sqrt() > tau_mult * clusters.within_std[a])
        .count();
    Ok(far as f64 / points.len() as f64)
}

/// Flow latent statistics over a record set.
pub fn latent_stats(model: &dyn PosteriorSampler, records: &[Record]) -> Result<LatentStats> {
    if records.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    model.latent_summary(records)
}

// ---------------------------------------------------------------------------
// Re-simulation

/// Maps devices to spectra for re-simulating posterior samples.
pub trait Resimulator {
    fn name(&self) -> &'static str;
    fn resimulate(&self, devices: &[DeviceParams]) -> Result<Vec<Spectrum>>;
}

impl Resimulator for ForwardNet {
    fn name(&self) -> &'static str {
        "surrogate"
    }

    fn resimulate(&self, devices: &[DeviceParams]) -> Result<Vec<Spectrum>> {
        self.predict_batch(devices)
    }
}

/// The analytic optics model itself.
#[derive(Debug, Clone)]
pub struct OracleSimulator(pub OpticsConfig);

impl Resimulator for OracleSimulator {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn resimulate(&self, devices: &[DeviceParams]) -> Result<Vec<Spectrum>> {
        devices.iter().map(|d| simulate(d, &self.0)).collect()
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Length {
            what: "mse operand",
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Empty("mse operand"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

// ---------------------------------------------------------------------------
// Inverse evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseEvalOptions {
    pub n: usize,
    pub seed: u64,
    pub tau_mult: f64,
    pub kmeans_max_iter: usize,
    pub band_lo: f64,
    pub band_hi: f64,
}

impl Default for InverseEvalOptions {
    fn default() -> Self {
        Self {
            n: 10_000,
            seed: 0,
            tau_mult: 3.0,
            kmeans_max_iter: 100,
            band_lo: 2.0,
            band_hi: 98.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside are clipped to the end bins.
    pub fn new(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for v in values {
            let b = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }
}

/// Depth statistics of one (Λ₁, Λ₂) cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMarginal {
    pub cluster: usize,
    pub n: usize,
    pub h1_mean: f64,
    pub h1_std: f64,
    pub h2_mean: f64,
    pub h2_std: f64,
    pub h1_hist: Histogram,
    pub h2_hist: Histogram,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub model: ModelKind,
    pub resimulator: String,
    pub target_device: DeviceParams,
    pub target_spectrum: Spectrum,
    pub wavelengths_nm: Vec<f64>,
    pub n_samples: usize,
    pub clusters: ClusterResult,
    /// Reference point matched to each centroid.
    pub matched_references: Vec<[f64; 2]>,
    pub centroid_errors_nm: Vec<f64>,
    /// Only defined for two clusters.
    pub bridge_fraction: Option<f64>,
    pub out_of_bounds_fraction: f64,
    pub depth_marginals: Vec<DepthMarginal>,
    /// Bands and errors are over in-bounds samples only.
    pub n_resimulated: usize,
    pub band: PercentileBand,
    pub mean_spectrum_mse: f64,
    pub mean_sample_mse: f64,
    /// Smallest per-wavelength fraction of re-simulated values inside the band.
    pub band_coverage: f64,
    /// Fraction of wavelengths at which the target lies inside the band.
    pub target_in_band: f64,
    pub latent: Option<LatentStats>,
}

impl EvaluationReport {
    pub fn max_centroid_error(&self) -> f64 {
        self.centroid_errors_nm.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_within_std(&self) -> f64 {
        let s = &self.clusters.within_std;
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Report plus the samples it was computed from.
#[derive(Debug, Clone)]
pub struct InverseEvaluation {
    pub report: EvaluationReport,
    pub samples: Vec<PosteriorSample>,
}

/// Two clusters iff the periods differ by more than the resonance width scale.
pub fn cluster_count(device: &DeviceParams, optics: &OpticsConfig) -> usize {
    if (device.lambda1_nm - device.lambda2_nm).abs() > optics.resolvable_period_gap_nm() {
        2
    } else {
        1
    }
}

/// Match centroids to the true periods and their mirror. With one cluster the
/// reference is the symmetric point (Λ̄, Λ̄).
fn match_references(centroids: &[[f64; 2]], device: &DeviceParams) -> (Vec<[f64; 2]>, Vec<f64>) {
    let (a, b) = (device.lambda1_nm, device.lambda2_nm);
    if centroids.len() == 1 {
        let m = (a + b) / 2.0;
        let r = [m, m];
        return (vec![r], vec![dist2(&centroids[0], &r).sqrt()]);
    }
    let (r0, r1) = ([a, b], [b, a]);
    let straight = [dist2(&centroids[0], &r0).sqrt(), dist2(&centroids[1], &r1).sqrt()];
    let crossed = [dist2(&centroids[0], &r1).sqrt(), dist2(&centroids[1], &r0).sqrt()];
    if straight[0] + straight[1] <= crossed[0] + crossed[1] {
        (vec![r0, r1], straight.to_vec())
    } else {
        (vec![r1, r0], crossed.to_vec())
    }
}

/// Analyse an existing sample set against a target with known device.
pub fn evaluate_samples(
    model: ModelKind,
    samples: Vec<PosteriorSample>,
    target: &Spectrum,
    true_device: &DeviceParams,
    optics: &OpticsConfig,
    respim: &dyn Resimulator,
    opts: &InverseEvalOptions,
) -> Result<InverseEvaluation> {
    if target.len() != optics.grid_points {
        return Err(Error::Length {
            what: "target spectrum",
            expected: optics.grid_points,
            found: target.len(),
        });
    }
    let k = cluster_count(true_device, optics);
    let points: Vec<[f64; 2]> = samples.iter().map(|s| [s.device.lambda1_nm, s.device.lambda2_nm]).collect();
    let clusters = kmeans(&points, k, opts.seed, opts.kmeans_max_iter)?;
    let (matched_references, centroid_errors_nm) = match_references(&clusters.centroids, true_device);
    let bridge = if k == 2 {
        Some(bridge_fraction(&points, &clusters, opts.tau_mult)?)
    } else {
        None
    };

    let inside: Vec<DeviceParams> = samples.iter().filter(|s| s.in_bounds).map(|s| s.device).collect();
    let out_of_bounds_fraction = (samples.len() - inside.len()) as f64 / samples.len() as f64;
    if inside.is_empty() {
        return Err(Error::Empty("in-bounds posterior samples"));
    }

    let [(_, _), (_, _), (h1_lo, h1_hi), (h2_lo, h2_hi)] = optics.bounds();
    let depth_marginals = (0..k)
        .map(|j| {
            let members = samples.iter().zip(&clusters.assignments).filter(|(_, &a)| a == j);
            let h1: Vec<f64> = members.clone().map(|(s, _)| s.device.h1_nm).collect();
            let h2: Vec<f64> = members.map(|(s, _)| s.device.h2_nm).collect();
            let (h1_mean, h1_std) = mean_std(&h1);
            let (h2_mean, h2_std) = mean_std(&h2);
            DepthMarginal {
                cluster: j,
                n: h1.len(),
                h1_mean,
                h1_std,
                h2_mean,
                h2_std,
                h1_hist: Histogram::new(h1.iter().copied(), h1_lo, h1_hi, DEPTH_BINS),
                h2_hist: Histogram::new(h2.iter().copied(), h2_lo, h2_hi, DEPTH_BINS),
            }
        })
        .collect();

    let spectra = respim.resimulate(&inside)?;
    let band = percentile_band(&spectra, opts.band_lo, opts.band_hi)?;
    let mean_spectrum_mse = mse(&band.mean, target.values())?;
    let mut per_sample = 0.0;
    for s in &spectra {
        per_sample += mse(s.values(), target.values())?;
    }
    let band_coverage = band.coverage(&spectra)?.into_iter().fold(1.0, f64::min);
    let target_hits = (0..band.len())
        .filter(|&i| (band.lower[i]..=band.upper[i]).contains(&target.0[i]))
        .count();

    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model,
        resimulator: respim.name().into(),
        target_device: *true_device,
        target_spectrum: target.clone(),
        wavelengths_nm: optics.wavelengths(),
        n_samples: samples.len(),
        clusters,
        matched_references,
        centroid_errors_nm,
        bridge_fraction: bridge,
        out_of_bounds_fraction,
        depth_marginals,
        n_resimulated: spectra.len(),
        mean_spectrum_mse,
        mean_sample_mse: per_sample / spectra.len() as f64,
        band_coverage,
        target_in_band: target_hits as f64 / band.len() as f64,
        band,
        latent: None,
    };
    Ok(InverseEvaluation { report, samples })
}

/// Sample the posterior for `target` and analyse the result.
pub fn evaluate_inverse(
    model: &dyn PosteriorSampler,
    target: &Spectrum,
    true_device: &DeviceParams,
    optics: &OpticsConfig,
    respim: &dyn Resimulator,
    opts: &InverseEvalOptions,
) -> Result<InverseEvaluation> {
    let mut rng = Rng::substream(opts.seed, 1);
    let samples = model.sample(target, opts.n, &mut rng)?;
    evaluate_samples(model.kind(), samples, target, true_device, optics, respim, opts)
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub cinn: EvaluationReport,
    pub cvae: EvaluationReport,
    pub cinn_mean_within_std: f64,
    pub cvae_mean_within_std: f64,
    /// Expected outcome: the flow's modes are at least as tight as the VAE's.
    pub cinn_spread_le_cvae: bool,
}

impl ComparisonReport {
    pub fn new(cinn: EvaluationReport, cvae: EvaluationReport) -> Result<Self> {
        if cinn.target_device != cvae.target_device {
            return Err(Error::Invalid("comparison reports have different targets".into()));
        }
        let (a, b) = (cinn.mean_within_std(), cvae.mean_within_std());
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            cinn,
            cvae,
            cinn_mean_within_std: a,
            cvae_mean_within_std: b,
            cinn_spread_le_cvae: a <= b,
        })
    }
}

// ---------------------------------------------------------------------------
// Files

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes report.json, samples.csv, band.csv and latent.csv into `dir`.
pub fn export_report(eval: &InverseEvaluation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let report = &eval.report;
    write_json(&dir.join(REPORT_FILE), report)?;

    let mut s = String::from("lambda1_nm,lambda2_nm,h1_nm,h2_nm,cluster\n");
    for (sample, c) in eval.samples.iter().zip(&report.clusters.assignments) {
        let v: Vec<String> = sample.device.to_array().iter().map(|&x| fmt_f64(x)).collect();
        s.push_str(&format!("{},{c}\n", v.join(",")));
    }
    write_text(&dir.join(SAMPLES_FILE), &s)?;

    let mut b = String::from("wavelength_nm,mean,p_lo,p_hi,target\n");
    for k in 0..report.band.len() {
        b.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(report.wavelengths_nm[k]),
            fmt_f64(report.band.mean[k]),
            fmt_f64(report.band.lower[k]),
            fmt_f64(report.band.upper[k]),
            fmt_f64(report.target_spectrum.0[k])
        ));
    }
    write_text(&dir.join(BAND_FILE), &b)?;

    let mut l = String::from("z0,z1,z2,z3\n");
    for sample in &eval.samples {
        let v: Vec<String> = sample.latent.iter().map(|&x| fmt_f64(x)).collect();
        l.push_str(&v.join(","));
        l.push('\n');
    }
    write_text(&dir.join(LATENT_FILE), &l)
}

/// Header of a posterior sample file written by the `sample` command.
pub const SAMPLE_HEADER: &str = "lambda1_nm,lambda2_nm,h1_nm,h2_nm,in_bounds,z0,z1,z2,z3";

pub fn write_samples(path: &Path, samples: &[PosteriorSample]) -> Result<()> {
    let mut s = String::from(SAMPLE_HEADER);
    s.push('\n');
    for p in samples {
        let mut cols: Vec<String> = p.device.to_array().iter().map(|&x| fmt_f64(x)).collect();
        cols.push(u8::from(p.in_bounds).to_string());
        cols.extend(p.latent.iter().map(|&x| fmt_f64(x)));
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_samples(path: &Path) -> Result<Vec<PosteriorSample>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SAMPLE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header `{SAMPLE_HEADER}`"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v = parse_row(path, i + 1, l, 9)?;
            let in_bounds = match v[4] {
                x if x == 0.0 => false,
                x if x == 1.0 => true,
                x => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("in_bounds must be 0 or 1, got {x}"),
                    })
                }
            };
            Ok(PosteriorSample {
                device: DeviceParams::from_slice(&v[..4])?,
                in_bounds,
                latent: [v[5], v[6], v[7], v[8]],
            })
        })
        .collect()
}
