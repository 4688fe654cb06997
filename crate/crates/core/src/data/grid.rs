//! Import of GRID-format directories into the corpus layout.
//!
//! Expected source layout (one directory per speaker, any names):
//!
//! ```text
//! src/<speaker>/audio/<utt>.wav          any sample rate, mono or multi-channel
//! src/<speaker>/lips/<utt>/*.png         pre-extracted lip crops, one per video frame
//! src/<speaker>/face/<utt>/*.png         face frames (optional; lips are used if absent)
//! src/<speaker>/align/<utt>.align        GRID alignment ("start end word", sil/sp ignored)
//!   or src/<speaker>/transcripts/<utt>.txt
//! ```
//!
//! Frames are read in file-name order. Audio is resampled to the configured
//! rate and padded or trimmed to the utterance length; frame sequences are
//! trimmed or padded by repeating the last frame. Images whose size differs
//! from the target are resized. Utterances that cannot be read are skipped
//! and listed in the report.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{
    assign_splits, natural_cmp, select_face_frame, write_utterance, CorpusManifest, FaceImage,
    LipFrames, Split, UtteranceEntry, UtteranceSample, SCHEMA_VERSION,
};
use super::render::mix_seed;
use super::text::is_valid_transcript;
use crate::config::{AudioConfig, VideoConfig};
use crate::dsp::{fit_length, read_wav, resample};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportReport {
    pub skipped: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort_by(|a, b| natural_cmp(&a.to_string_lossy(), &b.to_string_lossy()));
    Ok(v)
}

/// Parses a GRID `.align` file, dropping silence and short-pause tokens.
pub fn parse_align(text: &str) -> String {
    text.lines()
        .filter_map(|l| l.split_whitespace().nth(2))
        .filter(|w| *w != "sil" && *w != "sp")
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_transcript(spk_dir: &Path, utt: &str) -> Result<String> {
    let txt = spk_dir.join("transcripts").join(format!("{utt}.txt"));
    let align = spk_dir.join("align").join(format!("{utt}.align"));
    let text = if txt.exists() {
        std::fs::read_to_string(&txt)
            .map_err(|e| Error::io(&txt, e))?
            .trim()
            .to_lowercase()
    } else if align.exists() {
        parse_align(&std::fs::read_to_string(&align).map_err(|e| Error::io(&align, e))?)
    } else {
        return Err(Error::NotFound(format!("transcript for {utt}")));
    };
    if !is_valid_transcript(&text) {
        return Err(invalid!("transcript {text:?} is outside the alphabet"));
    }
    Ok(text)
}

/// Reads an image file as RGB u8 `[3, h, w]`, resizing when needed.
pub fn read_rgb_chw(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let mut img = image::open(path)?.to_rgb8();
    if img.width() as usize != w || img.height() as usize != h {
        img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    }
    let mut chw = vec![0u8; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            chw[c * h * w + y as usize * w + x as usize] = px[c];
        }
    }
    Ok(chw)
}

/// Reads every PNG in `dir` as an RGB image of size `h`×`w`, CHW u8.
fn read_frames(dir: &Path, h: usize, w: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    for p in sorted_entries(dir)? {
        if p.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        out.push(read_rgb_chw(&p, h, w)?);
    }
    if out.is_empty() {
        return Err(Error::NotFound(format!(
            "no png frames in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn id_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

fn fit_frames(mut frames: Vec<Vec<u8>>, n: usize) -> Vec<Vec<u8>> {
    frames.truncate(n);
    let last = frames.last().cloned().unwrap_or_default();
    frames.resize(n, last);
    frames
}

#[allow(clippy::too_many_arguments)]
fn import_one(
    spk_dir: &Path,
    spk: &str,
    utt: &str,
    wav: &Path,
    audio: &AudioConfig,
    video: &VideoConfig,
    seed: u64,
) -> Result<UtteranceSample> {
    if video.channels != 3 {
        return Err(invalid!("import supports 3-channel frames only"));
    }
    let transcript = read_transcript(spk_dir, utt)?;
    let (x, sr) = read_wav(wav)?;
    let x = if sr == audio.sample_rate {
        x
    } else {
        resample(&x, sr, audio.sample_rate)?
    };
    let waveform: Vec<f32> = fit_length(x, audio.samples_per_utterance())
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();

    let (h, w, t) = (
        video.lip_height,
        video.lip_width,
        video.frames_per_utterance,
    );
    let lips = fit_frames(read_frames(&spk_dir.join("lips").join(utt), h, w)?, t);
    let s = video.face_size;
    let face_dir = spk_dir.join("face").join(utt);
    let face_src = if face_dir.is_dir() {
        face_dir
    } else {
        spk_dir.join("lips").join(utt)
    };
    let faces = read_frames(&face_src, s, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id_hash(spk), id_hash(utt)));
    let face = select_face_frame(&faces, &mut rng)?;

    Ok(UtteranceSample {
        speaker_id: spk.into(),
        utterance_id: utt.into(),
        lip_frames: LipFrames {
            dims: [t, 3, h, w],
            data: lips.concat(),
        },
        face_image: FaceImage {
            dims: [3, s, s],
            data: face,
        },
        waveform,
        transcript,
    })
}

/// Imports a GRID-format tree from `src` into a corpus at `out`.
pub fn grid_import(
    src: &Path,
    out: &Path,
    audio: &AudioConfig,
    video: &VideoConfig,
    seed: u64,
    force: bool,
    exec: Exec,
) -> Result<(CorpusManifest, ImportReport)> {
    audio.validate()?;
    video.validate()?;
    if !src.is_dir() {
        return Err(Error::NotFound(format!(
            "source directory {}",
            src.display()
        )));
    }
    if out.exists()
        && std::fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some()
    {
        if !force {
            return Err(Error::AlreadyExists(out.to_path_buf()));
        }
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut report = ImportReport::default();
    let mut jobs = Vec::new();
    for spk_dir in sorted_entries(src)?.into_iter().filter(|p| p.is_dir()) {
        let spk = spk_dir.file_name().unwrap().to_string_lossy().to_string();
        let audio_dir = spk_dir.join("audio");
        if !audio_dir.is_dir() {
            report
                .skipped
                .push((spk_dir.clone(), "no audio directory".into()));
            continue;
        }
        for wav in sorted_entries(&audio_dir)? {
            if wav.extension().and_then(|e| e.to_str()) != Some("wav") {
                continue;
            }
            let utt = wav.file_stem().unwrap().to_string_lossy().to_string();
            jobs.push((spk_dir.clone(), spk.clone(), utt, wav));
        }
    }

    let results = exec.map(&jobs, |(dir, spk, utt, wav)| {
        let sample = import_one(dir, spk, utt, wav, audio, video, seed)?;
        write_utterance(out, &sample)?;
        Ok::<_, Error>(sample.transcript)
    });
    let mut utterances = Vec::new();
    for ((_, spk, utt, wav), r) in jobs.iter().zip(results) {
        match r {
            Ok(transcript) => utterances.push(UtteranceEntry {
                speaker_id: spk.clone(),
                utterance_id: utt.clone(),
                transcript,
                split: Split::Train,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", wav.display());
                report.skipped.push((wav.clone(), e.to_string()));
            }
        }
    }
    if utterances.is_empty() {
        let msg = format!("no importable utterances under {}", src.display());
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    assign_splits(&mut utterances);
    let manifest = CorpusManifest {
        schema_version: SCHEMA_VERSION,
        source: "grid".into(),
        seed: Some(seed),
        audio: audio.clone(),
        video: video.clone(),
        utterances,
        root: out.to_path_buf(),
    };
    manifest.save()?;
    Ok((manifest, report))
}
