//! Procedural toy-corpus rendering: GRID-style transcripts, per-speaker voice
//! and appearance, grapheme timelines shared by audio and lip animation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::text::{GraphemeIds, SPACE};
use crate::error::{invalid, Result};

const COMMANDS: [&str; 4] = ["bin", "lay", "place", "set"];
const COLORS: [&str; 4] = ["blue", "green", "red", "white"];
const PREPOSITIONS: [&str; 4] = ["at", "by", "in", "with"];
const DIGITS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];
const ADVERBS: [&str; 4] = ["again", "now", "please", "soon"];

/// Draws a sentence from the GRID command grammar.
pub fn grid_sentence(rng: &mut impl Rng) -> String {
    let letters: Vec<char> = ('a'..='z').filter(|&c| c != 'w').collect();
    format!(
        "{} {} {} {} {} {}",
        COMMANDS[rng.random_range(0..4)],
        COLORS[rng.random_range(0..4)],
        PREPOSITIONS[rng.random_range(0..4)],
        letters[rng.random_range(0..letters.len())],
        DIGITS[rng.random_range(0..10)],
        ADVERBS[rng.random_range(0..4)],
    )
}

/// Stable per-item seed derived from a corpus seed and indices.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SpeakerTraits {
    pub f0: f64,
    pub formant_scale: f64,
    /// Harmonic roll-off exponent.
    pub tilt: f64,
    pub skin: [f64; 3],
    pub lip: [f64; 3],
    pub hair: [f64; 3],
    pub eye: [f64; 3],
    pub face_radii: (f64, f64),
    pub eye_spacing: f64,
    pub hairline: f64,
    pub texture_period: f64,
    pub texture_angle: f64,
}

fn color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

/// Deterministic voice and appearance of speaker `index` out of `n`.
/// Fundamental frequencies are spaced geometrically over 95–240 Hz.
pub fn speaker_traits(index: usize, n: usize, seed: u64) -> SpeakerTraits {
    let frac = if n > 1 {
        index as f64 / (n - 1) as f64
    } else {
        0.5
    };
    // Decorrelate formant scale from pitch order.
    let perm = if n > 1 {
        ((index * 5 + 3) % n) as f64 / (n - 1) as f64
    } else {
        0.5
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED, index as u64));
    let skin = color(&mut rng, 0.35, 0.85);
    SpeakerTraits {
        f0: 95.0 * (240.0f64 / 95.0).powf(frac),
        formant_scale: 0.85 + 0.35 * perm,
        tilt: rng.random_range(0.6..1.2),
        skin,
        lip: [skin[0] * 0.7 + 0.25, skin[1] * 0.4, skin[2] * 0.45],
        hair: color(&mut rng, 0.05, 0.9),
        eye: color(&mut rng, 0.0, 0.6),
        face_radii: (rng.random_range(32.0..46.0), rng.random_range(42.0..56.0)),
        eye_spacing: rng.random_range(11.0..21.0),
        hairline: rng.random_range(0.25..0.65),
        texture_period: rng.random_range(5.0..16.0),
        texture_angle: rng.random_range(0.0..PI),
    }
}

/// Grapheme assigned to each video frame (`None` = silence) plus onset flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub symbols: Vec<Option<u32>>,
    pub onsets: Vec<bool>,
}

/// Spreads `ids` over `frames` video frames with leading/trailing silence.
/// Every grapheme gets at least one frame.
pub fn timeline(ids: &GraphemeIds, frames: usize, rng: &mut impl Rng) -> Result<Timeline> {
    let l = ids.len();
    if l > frames {
        return Err(invalid!("{l} graphemes do not fit in {frames} frames"));
    }
    let spare = frames - l;
    let lead = rng.random_range(1..=3usize).min(spare / 4);
    let trail = rng.random_range(1..=3usize).min((spare - lead) / 4);
    let extra = spare - lead - trail;
    let weights: Vec<f64> = ids
        .as_slice()
        .iter()
        .map(|&g| if g == SPACE { 0.5 } else { 1.0 } + rng.random_range(0.0..0.5))
        .collect();
    let total: f64 = weights.iter().sum();
    let quota: Vec<f64> = weights.iter().map(|w| w / total * extra as f64).collect();
    let mut dur: Vec<usize> = quota.iter().map(|q| 1 + q.floor() as usize).collect();
    let mut left = frames - lead - trail - dur.iter().sum::<usize>();
    // Largest remainder, ties to the earliest grapheme.
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quota[a] - quota[a].floor(), quota[b] - quota[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        dur[i] += 1;
        left -= 1;
    }
    let mut symbols = vec![None; lead];
    let mut onsets = vec![false; lead];
    for (&g, &d) in ids.as_slice().iter().zip(&dur) {
        for k in 0..d {
            symbols.push(Some(g));
            onsets.push(k == 0);
        }
    }
    symbols.resize(frames, None);
    onsets.resize(frames, false);
    Ok(Timeline { symbols, onsets })
}

fn formants(g: u32, scale: f64) -> [(f64, f64); 3] {
    let g = g as f64;
    [
        ((250.0 + (g * 7.0 % 9.0) * 70.0) * scale, 80.0),
        ((800.0 + (g * 5.0 % 11.0) * 160.0) * scale, 120.0),
        ((2300.0 + (g * 3.0 % 5.0) * 220.0) * scale, 170.0),
    ]
}

fn is_fricative(g: u32) -> bool {
    matches!(
        char::from_u32('a' as u32 + g - 1),
        Some('c' | 'f' | 'h' | 'k' | 'p' | 's' | 't' | 'x' | 'z')
    )
}

/// Additive source-filter synthesis of one utterance following `tl`.
pub fn render_audio(
    tl: &Timeline,
    traits: &SpeakerTraits,
    sample_rate: u32,
    samples: usize,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let sr = sample_rate as f64;
    let frames = tl.symbols.len();
    let spf = samples / frames;
    let nyq = sr / 2.0;
    let max_h = ((0.45 * sr) / (traits.f0 * 0.9)).floor() as usize;
    // Target harmonic amplitudes and noise level per video frame.
    let targets: Vec<(Vec<f64>, f64)> = tl
        .symbols
        .iter()
        .map(|s| match s {
            None => (vec![0.0; max_h], 0.0),
            Some(g) if *g == SPACE => (vec![0.0; max_h], 0.004),
            &Some(g) => {
                let fm = formants(g, traits.formant_scale);
                let amps = (1..=max_h)
                    .map(|h| {
                        let f = h as f64 * traits.f0;
                        if f >= nyq * 0.9 {
                            return 0.0;
                        }
                        if h == 1 {
                            return 1.0;
                        }
                        let env: f64 = fm
                            .iter()
                            .map(|(c, bw)| 1.0 / (1.0 + ((f - c) / bw).powi(2)))
                            .sum();
                        0.45 * env * (h as f64).powf(-traits.tilt)
                    })
                    .collect();
                (amps, if is_fricative(g) { 0.08 } else { 0.0 })
            }
        })
        .collect();
    let vibrato_rate = rng.random_range(3.0..6.0);
    let drift = rng.random_range(-0.04..0.04);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let ramp = (spf / 4).max(1);
    let mut phase = 0.0f64;
    let mut out = vec![0.0f32; samples];
    let mut prev_noise = 0.0;
    for (n, o) in out.iter_mut().enumerate().take(frames * spf) {
        let k = n / spf;
        let off = n % spf;
        let t = n as f64 / sr;
        let f0 = traits.f0 * (1.0 + drift * t / 3.0 + 0.015 * (2.0 * PI * vibrato_rate * t).sin());
        phase += 2.0 * PI * f0 / sr;
        let w = if off < ramp && k > 0 {
            off as f64 / ramp as f64
        } else {
            1.0
        };
        let (cur, cur_n) = &targets[k];
        let (prev, prev_nl) = if k > 0 {
            (&targets[k - 1].0, targets[k - 1].1)
        } else {
            (cur, *cur_n)
        };
        let mut v = 0.0;
        for h in 0..max_h {
            let a = prev[h] + (cur[h] - prev[h]) * w;
            if a != 0.0 {
                v += a * ((h + 1) as f64 * phase).sin();
            }
        }
        let nl = prev_nl + (cur_n - prev_nl) * w;
        if nl > 0.0 {
            // First-difference emphasises the high band for fricatives.
            let z: f64 = noise.sample(rng);
            v += nl * (z - prev_noise) * 2.0;
            prev_noise = z;
        }
        *o = (0.22 * v) as f32;
    }
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.95 {
        out.iter_mut().for_each(|v| *v *= 0.95 / peak);
    }
    out
}

/// Visual code of a grapheme: (opening level, width level, interior: 0 none, 1 teeth, 2 tongue).
pub fn mouth_code(g: u32) -> (usize, usize, usize) {
    let i = (g - 1) as usize;
    (i % 3, (i / 3) % 3, i / 9)
}

fn put(img: &mut [u8], (h, w): (usize, usize), y: usize, x: usize, rgb: [f64; 3]) {
    let plane = h * w;
    for (c, v) in rgb.iter().enumerate() {
        img[c * plane + y * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
}

/// Renders one lip-crop frame (CHW, `size`×`size`) showing grapheme `sym`.
#[allow(clippy::too_many_arguments)]
pub fn render_lip_frame(
    img: &mut [u8],
    size: usize,
    sym: Option<u32>,
    onset: bool,
    traits: &SpeakerTraits,
    shift: (f64, f64),
    gain: f64,
) {
    let s = size as f64 / 144.0;
    let (cx, cy) = (72.0 * s + shift.0, 80.0 * s + shift.1);
    let (hw, hh, inner) = match sym {
        None => (40.0, 2.5, 0),
        Some(g) => {
            let (ol, wl, inner) = mouth_code(g);
            ([36.0, 48.0, 60.0][wl], [8.0, 16.0, 25.0][ol], inner)
        }
    };
    let (hw, hh) = (hw * s, hh * s);
    let lip_t = 6.0 * s;
    let dark = [0.12, 0.05, 0.06];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let shade = 1.0 - 0.15 * fy / size as f64;
            let mut c = traits.skin.map(|v| v * shade);
            let dx = (fx - cx) / (hw + lip_t);
            let dy = (fy - cy) / (hh + lip_t);
            if dx * dx + dy * dy <= 1.0 {
                c = traits.lip;
                let ix = (fx - cx) / hw;
                let iy = (fy - cy) / hh;
                if ix * ix + iy * iy <= 1.0 {
                    c = dark;
                    match inner {
                        1 if fy < cy - 0.35 * hh => c = [0.95, 0.95, 0.9],
                        2 if fy > cy + 0.2 * hh && ix.abs() < 0.6 => c = [0.85, 0.3, 0.35],
                        _ => {}
                    }
                }
            }
            if onset {
                for side in [-1.0, 1.0] {
                    let (ox, oy) = (cx + side * (hw + lip_t + 7.0 * s), cy);
                    if (fx - ox).powi(2) + (fy - oy).powi(2) <= (4.5 * s).powi(2) {
                        c = dark;
                    }
                }
            }
            put(img, (size, size), y, x, c.map(|v| v * gain));
        }
    }
}

/// Per-frame nuisance for face renders.
#[derive(Debug, Clone)]
pub struct FaceNuisance {
    pub shift: (f64, f64),
    pub gain: [f64; 3],
    pub background: [f64; 3],
    pub noise_seed: u64,
}

impl FaceNuisance {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            shift: (rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0)),
            gain: [
                rng.random_range(0.7..1.3),
                rng.random_range(0.7..1.3),
                rng.random_range(0.7..1.3),
            ],
            background: color(rng, 0.0, 1.0),
            noise_seed: rng.random(),
        }
    }
}

/// Renders a face image (CHW, `size`×`size`) of a speaker under `nz`.
pub fn render_face(size: usize, traits: &SpeakerTraits, nz: &FaceNuisance) -> Vec<u8> {
    let mut img = vec![0u8; 3 * size * size];
    let s = size as f64 / 128.0;
    let (cx, cy) = (64.0 * s + nz.shift.0, 68.0 * s + nz.shift.1);
    let (rx, ry) = (traits.face_radii.0 * s, traits.face_radii.1 * s);
    let mut rng = ChaCha8Rng::seed_from_u64(nz.noise_seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let (ca, sa) = (traits.texture_angle.cos(), traits.texture_angle.sin());
    let eye_y = cy - 0.2 * ry;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = nz.background.map(|v| v * (0.8 + 0.2 * fy / size as f64));
            let hx = (fx - cx) / (rx * 1.12);
            let hy = (fy - (cy - 0.12 * ry)) / (ry * 1.08);
            if hx * hx + hy * hy <= 1.0 {
                c = traits.hair;
            }
            let dx = (fx - cx) / rx;
            let dy = (fy - cy) / ry;
            if dx * dx + dy * dy <= 1.0 && dy > -1.0 + traits.hairline {
                let tex = 1.0
                    + 0.12 * (2.0 * PI * (fx * ca + fy * sa) / (traits.texture_period * s)).sin();
                c = traits.skin.map(|v| v * tex);
                for side in [-1.0, 1.0] {
                    let ex = cx + side * traits.eye_spacing * s;
                    if (fx - ex).powi(2) + (fy - eye_y).powi(2) <= (4.5 * s).powi(2) {
                        c = traits.eye;
                    }
                }
                let my = cy + 0.45 * ry;
                if (fy - my).abs() < 2.5 * s && (fx - cx).abs() < 0.35 * rx {
                    c = traits.lip;
                }
            }
            let c = [
                c[0] * nz.gain[0] + noise.sample(&mut rng),
                c[1] * nz.gain[1] + noise.sample(&mut rng),
                c[2] * nz.gain[2] + noise.sample(&mut rng),
            ];
            put(&mut img, (size, size), y, x, c);
        }
    }
    img
}
