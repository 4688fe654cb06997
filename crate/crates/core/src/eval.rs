//! Metrics: edit-distance rates, silhouette of embedding clusters, mel L1,
//! 2-D projections, and the aggregated evaluation report.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{invalid, shape_err, Error, Result};
use crate::exec::Exec;
use crate::features::{FeatureSet, UtteranceFeatures};
use crate::infer::{euclidean, face_embeddings, generate_mels, transcribe};
use crate::model::Models;
use crate::nn::layers::to_host;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Char,
    Word,
}

fn units(s: &str, unit: Unit) -> Vec<&str> {
    match unit {
        Unit::Char => s
            .char_indices()
            .map(|(i, c)| &s[i..i + c.len_utf8()])
            .collect(),
        Unit::Word => s.split_whitespace().collect(),
    }
}

/// `(edits, reference length)` in the chosen unit.
pub fn edit_counts(reference: &str, hypothesis: &str, unit: Unit) -> (usize, usize) {
    let r = units(reference, unit);
    (edit_distance(&r, &units(hypothesis, unit)), r.len())
}

/// Edit distance over reference length; exceeds 1 when insertions dominate.
pub fn edit_distance_rate(reference: &str, hypothesis: &str, unit: Unit) -> Result<f64> {
    let (e, n) = edit_counts(reference, hypothesis, unit);
    if n == 0 {
        return Err(invalid!("reference text is empty"));
    }
    Ok(e as f64 / n as f64)
}

/// Mean silhouette coefficient with Euclidean distance. A point whose own
/// and nearest-other mean distances are both zero scores 0.
pub fn silhouette<L: Ord + Clone>(points: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(shape_err!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        ));
    }
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    if groups.len() < 2 || groups.values().any(|g| g.len() < 2) {
        return Err(invalid!(
            "silhouette needs at least 2 labels with at least 2 members each"
        ));
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut total = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        for &i in g {
            let mean_to = |members: &[usize]| -> f64 {
                members
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| euclidean(&points[i], &points[j]))
                    .sum::<f64>()
            };
            let a = mean_to(g) / (g.len() - 1) as f64;
            let b = groups
                .iter()
                .enumerate()
                .filter(|(gj, _)| *gj != gi)
                .map(|(_, h)| mean_to(h) / h.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            total += if m == 0.0 { 0.0 } else { (b - a) / m };
        }
    }
    Ok(total / points.len() as f64)
}

/// Mean absolute difference of two equally shaped mels.
pub fn mel_l1(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.bins != b.bins || a.frames != b.frames {
        return Err(shape_err!(
            "mel shapes differ: {}x{} vs {}x{}",
            a.bins,
            a.frames,
            b.bins,
            b.frames
        ));
    }
    let s: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(s / a.values.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    Tsne,
    Pca,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub method: ProjectionMethod,
    pub coords: Vec<[f64; 2]>,
}

fn centered(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut m = vec![0.0; d];
    for p in points {
        for (a, b) in m.iter_mut().zip(p) {
            *a += b / points.len() as f64;
        }
    }
    points
        .iter()
        .map(|p| p.iter().zip(&m).map(|(a, b)| a - b).collect())
        .collect()
}

/// Top-two principal coordinates via power iteration on the Gram matrix,
/// plus the two leading eigenvalues.
fn pca2(points: &[Vec<f64>]) -> (Vec<[f64; 2]>, [f64; 2]) {
    let x = centered(points);
    let n = x.len();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum();
        }
    }
    let mut coords = vec![[0.0; 2]; n];
    let mut eig = [0.0; 2];
    for k in 0..2 {
        // Deterministic start that is not orthogonal to typical eigenvectors.
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618).fract()).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                w[i] = (0..n).map(|j| g[i * n + j] * v[j]).sum();
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            v = w.iter().map(|a| a / norm).collect();
            lambda = norm;
        }
        eig[k] = lambda;
        for i in 0..n {
            coords[i][k] = v[i] * lambda.sqrt();
        }
        // Deflate.
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] -= lambda * v[i] * v[j];
            }
        }
    }
    (coords, eig)
}

/// Exact t-SNE with a perplexity-calibrated Gaussian affinity, early
/// exaggeration and momentum gradient descent.
fn tsne(points: &[Vec<f64>], seed: u64) -> Vec<[f64; 2]> {
    let n = points.len();
    let perplexity = (30.0f64).min((n - 1) as f64 / 3.0).max(2.0);
    let target = perplexity.ln();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = euclidean(&points[i], &points[j]);
            d2[i * n + j] = d * d;
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let row_min = (0..n)
            .filter(|&j| j != i)
            .map(|j| d2[i * n + j])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut hsum = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let e = (-(d2[i * n + j] - row_min) * beta).exp();
                p[i * n + j] = e;
                sum += e;
                hsum += beta * (d2[i * n + j] - row_min) * e;
            }
            let entropy = sum.ln() + hsum / sum;
            for j in (0..n).filter(|&j| j != i) {
                p[i * n + j] /= sum;
            }
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [a * 1e-4, b * 1e-4]
        })
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    let lr = (n as f64 / 12.0).max(50.0);
    for it in 0..750 {
        let exag = if it < 250 { 12.0 } else { 1.0 };
        let mom = if it < 250 { 0.5 } else { 0.8 };
        let mut num = vec![0.0; n * n];
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    let q = 1.0 / (1.0 + dx * dx + dy * dy);
                    num[i * n + j] = q;
                    z += q;
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let q = num[i * n + j];
                let c = 4.0 * (exag * sym[i * n + j] - q / z) * q;
                g[0] += c * (y[i][0] - y[j][0]);
                g[1] += c * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                vel[i][k] = mom * vel[i][k] - lr * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
    }
    y
}

/// 2-D projection of `points`. t-SNE is used from 10 points up when the data
/// spans at least two dimensions; otherwise principal components.
pub fn project(points: &[Vec<f64>], seed: u64) -> Result<Projection> {
    if points.len() < 3 {
        return Err(invalid!("projection needs at least 3 points"));
    }
    let (pc, eig) = pca2(points);
    let rank2 = eig[1] > 1e-9 * eig[0].max(f64::MIN_POSITIVE);
    if points.len() < 10 || !rank2 {
        return Ok(Projection {
            method: ProjectionMethod::Pca,
            coords: pc,
        });
    }
    Ok(Projection {
        method: ProjectionMethod::Tsne,
        coords: tsne(points, seed),
    })
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Projects `points` and writes a scatter plot PNG at `out` plus the
/// coordinates as CSV next to it (same stem, `.csv`).
pub fn project_2d(points: &[Vec<f64>], labels: &[String], seed: u64, out: &Path) -> Result<Projection> {
    if points.len() != labels.len() {
        return Err(shape_err!("{} points but {} labels", points.len(), labels.len()));
    }
    let proj = project(points, seed)?;
    let size = 512u32;
    let margin = 24.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &proj.coords {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let mut names: Vec<&String> = labels.iter().collect();
    names.sort();
    names.dedup();
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    let span = size as f64 - 2.0 * margin;
    for (c, l) in proj.coords.iter().zip(labels) {
        let at = |k: usize| {
            let r = hi[k] - lo[k];
            margin + if r > 0.0 { (c[k] - lo[k]) / r * span } else { span / 2.0 }
        };
        let (x, y) = (at(0) as i64, (size as f64 - at(1)) as i64);
        let colour = PALETTE[names.binary_search(&l).unwrap_or(0) % PALETTE.len()];
        for dy in -3..=3 {
            for dx in -3..=3 {
                let (px, py) = (x + dx, y + dy);
                if (0..size as i64).contains(&px) && (0..size as i64).contains(&py) {
                    img.put_pixel(px as u32, py as u32, image::Rgb(colour));
                }
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(out)?;
    let mut csv = String::from("label,x,y\n");
    for (c, l) in proj.coords.iter().zip(labels) {
        csv.push_str(&format!("{l},{:e},{:e}\n", c[0], c[1]));
    }
    let csv_path = out.with_extension("csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(proj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub speaker_id: String,
    pub utterance_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub char_edits: usize,
    pub ref_chars: usize,
    pub word_edits: usize,
    pub ref_words: usize,
    pub mel_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSummary {
    pub speaker_id: String,
    pub utterances: usize,
    pub cer: f64,
    pub wer: f64,
    pub mel_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub split: String,
    pub utterances: usize,
    /// Total character edits over total reference characters.
    pub cer: f64,
    pub wer: f64,
    /// Mean per-utterance mel L1 between generated and reference mels.
    pub mel_l1: f64,
    /// Speaker silhouette of face embeddings; absent when some speaker has
    /// fewer than two utterances in the split.
    pub silhouette: Option<f64>,
    pub speakers: Vec<SpeakerSummary>,
    pub rows: Vec<EvalRow>,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

fn summarize(rows: &[&EvalRow]) -> (f64, f64, f64) {
    let sum = |f: fn(&EvalRow) -> usize| rows.iter().map(|r| f(r)).sum::<usize>() as f64;
    (
        sum(|r| r.char_edits) / sum(|r| r.ref_chars).max(1.0),
        sum(|r| r.word_edits) / sum(|r| r.ref_words).max(1.0),
        rows.iter().map(|r| r.mel_l1).sum::<f64>() / rows.len().max(1) as f64,
    )
}

impl EvalReport {
    /// Aggregates per-utterance rows; speakers in order of first appearance.
    pub fn from_rows(
        split: &str,
        rows: Vec<EvalRow>,
        silhouette: Option<f64>,
        config_hash: String,
        checkpoint_hash: String,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid!("evaluation split {split} is empty"));
        }
        let all: Vec<&EvalRow> = rows.iter().collect();
        let (cer, wer, mel_l1) = summarize(&all);
        let mut order: Vec<&str> = Vec::new();
        for r in &rows {
            if !order.contains(&r.speaker_id.as_str()) {
                order.push(&r.speaker_id);
            }
        }
        let speakers = order
            .iter()
            .map(|s| {
                let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.speaker_id == *s).collect();
                let (cer, wer, mel_l1) = summarize(&mine);
                SpeakerSummary {
                    speaker_id: s.to_string(),
                    utterances: mine.len(),
                    cer,
                    wer,
                    mel_l1,
                }
            })
            .collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            split: split.to_string(),
            utterances: rows.len(),
            cer,
            wer,
            mel_l1,
            silhouette,
            speakers,
            rows,
            config_hash,
            checkpoint_hash,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Produces a transcription for one utterance.
pub type Transcriber<'a> = dyn Fn(&UtteranceFeatures) -> String + 'a;

/// Evaluates `set`: lip transcriptions (greedy CTC unless `transcriber` is
/// given), generated-mel error against the reference mels, and the speaker
/// silhouette of face embeddings.
pub fn run_eval(
    models: &Models,
    set: &FeatureSet,
    split: &str,
    config_hash: &str,
    checkpoint_hash: &str,
    exec: Exec,
    transcriber: Option<&Transcriber>,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(invalid!("evaluation split {split} is empty"));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let hyps = match transcriber {
        Some(f) => set.items.iter().map(f).collect(),
        None => transcribe(models, set, &idx, exec)?,
    };
    let mut mel_err = Vec::with_capacity(set.len());
    for (chunk, fake) in idx.chunks(16).zip(generate_mels(models, set, &idx, exec)?) {
        let fake = to_host(&fake)?;
        let per = fake.len() / chunk.len();
        for (k, &i) in chunk.iter().enumerate() {
            let real = &set.items[i].mel;
            if real.len() != per {
                return Err(shape_err!("generated mel size {per} != reference {}", real.len()));
            }
            let s: f64 = fake[k * per..(k + 1) * per]
                .iter()
                .zip(real)
                .map(|(a, b)| (a - *b as f64).abs())
                .sum();
            mel_err.push(s / per as f64);
        }
    }
    let rows = set
        .items
        .iter()
        .zip(hyps)
        .zip(mel_err)
        .map(|((u, h), m)| {
            let (ce, rc) = edit_counts(&u.transcript, &h, Unit::Char);
            let (we, rw) = edit_counts(&u.transcript, &h, Unit::Word);
            EvalRow {
                speaker_id: u.speaker_id.clone(),
                utterance_id: u.utterance_id.clone(),
                reference: u.transcript.clone(),
                hypothesis: h,
                char_edits: ce,
                ref_chars: rc,
                word_edits: we,
                ref_words: rw,
                mel_l1: m,
            }
        })
        .collect();
    let emb = face_embeddings(models, set, exec)?;
    let labels: Vec<&str> = set.items.iter().map(|u| u.speaker_id.as_str()).collect();
    let sil = silhouette(&emb, &labels).ok();
    EvalReport::from_rows(
        split,
        rows,
        sil,
        config_hash.to_string(),
        checkpoint_hash.to_string(),
    )
}
