//! On-disk corpus: manifest index, split assignment, toy generation and
//! validated utterance loading.
//!
//! Layout:
//!
//! ```text
//! root/manifest.json
//! root/<speaker>/<utterance>/lips.npzlike      u8 [T_v, C, H, W]
//! root/<speaker>/<utterance>/face.npzlike      u8 [C, S, S]
//! root/<speaker>/<utterance>/audio.pcm16       little-endian i16 mono
//! root/<speaker>/<utterance>/transcript.txt
//! ```

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{self, FaceNuisance, SpeakerTraits};
use super::tensorfile::TensorFile;
use super::text::{encode_transcript, is_valid_transcript};
use crate::config::{check_pairing, AudioConfig, VideoConfig};
use crate::dsp::{read_pcm16, write_pcm16};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;
pub const LIPS_FILE: &str = "lips.npzlike";
pub const FACE_FILE: &str = "face.npzlike";
pub const AUDIO_FILE: &str = "audio.pcm16";
pub const TRANSCRIPT_FILE: &str = "transcript.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(invalid!(
                "unknown split {s:?} (expected train, val or test)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub speaker_id: String,
    pub utterance_id: String,
    pub transcript: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    /// "toy" or "grid".
    pub source: String,
    pub seed: Option<u64>,
    pub audio: AudioConfig,
    pub video: VideoConfig,
    pub utterances: Vec<UtteranceEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Orders ids like "s2" < "s10" by comparing digit runs numerically.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for ((da, sa), (db, sb)) in ca.iter().zip(&cb) {
        let ord = if *da && *db {
            let (ta, tb) = (sa.trim_start_matches('0'), sb.trim_start_matches('0'));
            ta.len().cmp(&tb.len()).then(ta.cmp(tb))
        } else {
            sa.cmp(sb)
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    ca.len().cmp(&cb.len()).then(a.cmp(b))
}

/// Assigns splits in place. Val and test each take `max(1, round(5% of N))`
/// utterances, drawn round-robin over speakers from the end of each
/// speaker's list; the rest is train.
pub fn assign_splits(entries: &mut [UtteranceEntry]) {
    let n = entries.len();
    if n == 0 {
        return;
    }
    let held = ((n as f64 * 0.05).round() as usize).max(1);
    let mut speakers: Vec<String> = Vec::new();
    for e in entries.iter() {
        if !speakers.contains(&e.speaker_id) {
            speakers.push(e.speaker_id.clone());
        }
    }
    // Per-speaker index stacks; popping yields the last utterance first.
    let mut stacks: Vec<Vec<usize>> = speakers
        .iter()
        .map(|s| (0..n).filter(|&i| &entries[i].speaker_id == s).collect())
        .collect();
    entries.iter_mut().for_each(|e| e.split = Split::Train);
    for split in [Split::Test, Split::Val] {
        let mut taken = 0;
        let mut k = 0;
        // Keep at least one train utterance per speaker where possible.
        while taken < held && stacks.iter().any(|s| s.len() > 1) {
            let s = &mut stacks[k % speakers.len()];
            if s.len() > 1 {
                entries[s.pop().unwrap()].split = split;
                taken += 1;
            }
            k += 1;
        }
    }
}

impl CorpusManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::io(&path, e),
        })?;
        let mut m: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| Error::corrupt(&path, format!("manifest does not parse: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::corrupt(
                &path,
                format!("unsupported manifest schema {}", m.schema_version),
            ));
        }
        m.root = root.to_path_buf();
        m.validate()
            .map_err(|e| Error::corrupt(&path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for u in &self.utterances {
            if !seen.insert((&u.speaker_id, &u.utterance_id)) {
                return Err(invalid!(
                    "duplicate utterance {}/{}",
                    u.speaker_id,
                    u.utterance_id
                ));
            }
            if !is_valid_transcript(&u.transcript) {
                return Err(invalid!(
                    "invalid transcript for {}/{}",
                    u.speaker_id,
                    u.utterance_id
                ));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&UtteranceEntry> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .collect()
    }

    /// Speaker ids in natural order.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self
            .utterances
            .iter()
            .map(|u| u.speaker_id.clone())
            .collect();
        s.sort_by(|a, b| natural_cmp(a, b));
        s.dedup();
        s
    }

    pub fn speakers_in(&self, split: Split) -> Vec<String> {
        let mut s: Vec<String> = self
            .split(split)
            .iter()
            .map(|u| u.speaker_id.clone())
            .collect();
        s.sort_by(|a, b| natural_cmp(a, b));
        s.dedup();
        s
    }

    pub fn find(&self, speaker_id: &str, utterance_id: &str) -> Option<&UtteranceEntry> {
        self.utterances
            .iter()
            .find(|u| u.speaker_id == speaker_id && u.utterance_id == utterance_id)
    }

    pub fn utterance_dir(&self, speaker_id: &str, utterance_id: &str) -> PathBuf {
        self.root.join(speaker_id).join(utterance_id)
    }
}

/// Lip-crop sequence, u8 [T, C, H, W].
#[derive(Debug, Clone, PartialEq)]
pub struct LipFrames {
    pub dims: [usize; 4],
    pub data: Vec<u8>,
}

impl LipFrames {
    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[t * n..(t + 1) * n]
    }
}

/// Face image, u8 [C, H, W].
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSample {
    pub speaker_id: String,
    pub utterance_id: String,
    pub lip_frames: LipFrames,
    pub face_image: FaceImage,
    pub waveform: Vec<f32>,
    pub transcript: String,
}

/// Uniformly picks one frame index out of `n`.
pub fn select_face_index(n: usize, rng: &mut impl Rng) -> Result<usize> {
    if n == 0 {
        return Err(invalid!(
            "cannot select a face frame from an empty sequence"
        ));
    }
    Ok(rng.random_range(0..n))
}

/// Uniformly picks one frame of a sequence.
pub fn select_face_frame<T: Clone>(frames: &[T], rng: &mut impl Rng) -> Result<T> {
    Ok(frames[select_face_index(frames.len(), rng)?].clone())
}

fn prepare_root(root: &Path, force: bool) -> Result<()> {
    if root.exists() {
        let non_empty = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::AlreadyExists(root.to_path_buf()));
            }
            std::fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))
}

/// Writes one utterance's files; the directory must not hold other files.
pub fn write_utterance(root: &Path, sample: &UtteranceSample) -> Result<()> {
    let dir = root.join(&sample.speaker_id).join(&sample.utterance_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    TensorFile::u8(
        sample.lip_frames.dims.to_vec(),
        sample.lip_frames.data.clone(),
    )?
    .write(&dir.join(LIPS_FILE))?;
    TensorFile::u8(
        sample.face_image.dims.to_vec(),
        sample.face_image.data.clone(),
    )?
    .write(&dir.join(FACE_FILE))?;
    write_pcm16(&dir.join(AUDIO_FILE), &sample.waveform)?;
    let t = dir.join(TRANSCRIPT_FILE);
    std::fs::write(&t, format!("{}\n", sample.transcript)).map_err(|e| Error::io(&t, e))
}

/// Renders one toy utterance. Each utterance draws from its own seeded
/// stream, so rendering order does not matter.
pub fn render_toy_utterance(
    traits: &SpeakerTraits,
    speaker_id: &str,
    utterance_id: &str,
    item_seed: u64,
    audio: &AudioConfig,
    video: &VideoConfig,
) -> Result<UtteranceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    let transcript = render::grid_sentence(&mut rng);
    let ids = encode_transcript(&transcript)?;
    let frames = video.frames_per_utterance;
    let tl = render::timeline(&ids, frames, &mut rng)?;
    let waveform = render::render_audio(
        &tl,
        traits,
        audio.sample_rate,
        audio.samples_per_utterance(),
        &mut rng,
    );

    let (c, h, w) = (video.channels, video.lip_height, video.lip_width);
    if c != 3 || h != w {
        return Err(invalid!(
            "toy lips render square 3-channel crops, got {c}x{h}x{w}"
        ));
    }
    let n = c * h * w;
    let mut lips = vec![0u8; frames * n];
    let base_shift = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
    for (t, img) in lips.chunks_exact_mut(n).enumerate() {
        let shift = (
            base_shift.0 + rng.random_range(-1.0..1.0),
            base_shift.1 + rng.random_range(-1.0..1.0),
        );
        let gain = rng.random_range(0.9..1.1);
        render::render_lip_frame(img, h, tl.symbols[t], tl.onsets[t], traits, shift, gain);
    }

    // One of the utterance's face frames, as the face encoder sees it.
    let nuisances: Vec<FaceNuisance> = (0..frames).map(|_| FaceNuisance::draw(&mut rng)).collect();
    let nz = select_face_frame(&nuisances, &mut rng)?;
    let s = video.face_size;
    let face = render::render_face(s, traits, &nz);

    Ok(UtteranceSample {
        speaker_id: speaker_id.into(),
        utterance_id: utterance_id.into(),
        lip_frames: LipFrames {
            dims: [frames, c, h, w],
            data: lips,
        },
        face_image: FaceImage {
            dims: [c, s, s],
            data: face,
        },
        waveform,
        transcript,
    })
}

/// Generates the procedural toy corpus under `root`.
pub fn generate_toy_corpus(
    root: &Path,
    n_speakers: usize,
    utterances_per_speaker: usize,
    seed: u64,
    audio: &AudioConfig,
    video: &VideoConfig,
    force: bool,
    exec: Exec,
) -> Result<CorpusManifest> {
    if n_speakers < 2 {
        return Err(invalid!(
            "toy corpus needs at least 2 speakers, got {n_speakers}"
        ));
    }
    if utterances_per_speaker < 4 {
        return Err(invalid!(
            "toy corpus needs at least 4 utterances per speaker, got {utterances_per_speaker}"
        ));
    }
    audio.validate()?;
    video.validate()?;
    check_pairing(audio, video, 2)?;
    prepare_root(root, force)?;

    let items: Vec<(usize, usize)> = (0..n_speakers)
        .flat_map(|s| (0..utterances_per_speaker).map(move |u| (s, u)))
        .collect();
    let traits: Vec<SpeakerTraits> = (0..n_speakers)
        .map(|s| render::speaker_traits(s, n_speakers, seed))
        .collect();
    let transcripts = exec.try_map(&items, |&(s, u)| {
        let (spk, utt) = (format!("s{}", s + 1), format!("u{}", u + 1));
        let sample = render_toy_utterance(
            &traits[s],
            &spk,
            &utt,
            render::mix_seed(seed, s as u64 + 1, u as u64 + 1),
            audio,
            video,
        )?;
        write_utterance(root, &sample)?;
        Ok::<_, Error>(sample.transcript)
    })?;

    let mut utterances: Vec<UtteranceEntry> = items
        .iter()
        .zip(transcripts)
        .map(|(&(s, u), transcript)| UtteranceEntry {
            speaker_id: format!("s{}", s + 1),
            utterance_id: format!("u{}", u + 1),
            transcript,
            split: Split::Train,
        })
        .collect();
    assign_splits(&mut utterances);
    let manifest = CorpusManifest {
        schema_version: SCHEMA_VERSION,
        source: "toy".into(),
        seed: Some(seed),
        audio: audio.clone(),
        video: video.clone(),
        utterances,
        root: root.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

/// Loads and validates one utterance. Nothing is returned unless every
/// field passes its shape and range checks.
pub fn load_utterance(
    manifest: &CorpusManifest,
    speaker_id: &str,
    utterance_id: &str,
) -> Result<UtteranceSample> {
    let entry = manifest.find(speaker_id, utterance_id).ok_or_else(|| {
        Error::NotFound(format!(
            "utterance {speaker_id}/{utterance_id} is not in the manifest"
        ))
    })?;
    let dir = manifest.utterance_dir(speaker_id, utterance_id);
    let (a, v) = (&manifest.audio, &manifest.video);

    let lp = dir.join(LIPS_FILE);
    let (ld, lips) = TensorFile::read(&lp)?.into_u8(&lp)?;
    let want = [
        v.frames_per_utterance,
        v.channels,
        v.lip_height,
        v.lip_width,
    ];
    if ld != want {
        return Err(Error::corrupt(
            &lp,
            format!("lip frames have shape {ld:?}, expected {want:?}"),
        ));
    }

    let fp = dir.join(FACE_FILE);
    let (fd, face) = TensorFile::read(&fp)?.into_u8(&fp)?;
    let want = [v.channels, v.face_size, v.face_size];
    if fd != want {
        return Err(Error::corrupt(
            &fp,
            format!("face image has shape {fd:?}, expected {want:?}"),
        ));
    }

    let ap = dir.join(AUDIO_FILE);
    let waveform = read_pcm16(&ap)?;
    if waveform.len() != a.samples_per_utterance() {
        return Err(Error::corrupt(
            &ap,
            format!(
                "waveform has {} samples, expected {}",
                waveform.len(),
                a.samples_per_utterance()
            ),
        ));
    }

    let tp = dir.join(TRANSCRIPT_FILE);
    let transcript = std::fs::read_to_string(&tp).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(tp.display().to_string()),
        _ => Error::io(&tp, e),
    })?;
    let transcript = transcript.trim_end_matches('\n').to_string();
    if !is_valid_transcript(&transcript) {
        return Err(Error::corrupt(
            &tp,
            "transcript is empty or outside the alphabet",
        ));
    }
    if transcript != entry.transcript {
        return Err(Error::corrupt(
            &tp,
            "transcript disagrees with the manifest",
        ));
    }

    Ok(UtteranceSample {
        speaker_id: speaker_id.into(),
        utterance_id: utterance_id.into(),
        lip_frames: LipFrames {
            dims: [ld[0], ld[1], ld[2], ld[3]],
            data: lips,
        },
        face_image: FaceImage {
            dims: [fd[0], fd[1], fd[2]],
            data: face,
        },
        waveform,
        transcript,
    })
}
