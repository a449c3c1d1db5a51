//! Dataset generation, the fixed-width binary sequence format, and the
//! training-example sampler.
//!
//! Directory layout:
//!
//! ```text
//! <out>/
//!   train/sequences.bin
//!   test/sequences.bin
//!   test_zigzag/sequences.bin
//!   manifest.txt
//! ```
//!
//! Each split file is: 8-byte magic, version, grid dimensions, sequence
//! count, frames per sequence, seed, then 13-byte little-endian frame
//! records (packed layout u64, cover mask u16, agent row/col u8, action u8).
//! The manifest carries counts, the incomplete-observation tags, and a
//! checksum per split; everything is deterministic in the seed.

use super::encode::{encode, position_vec, FRAME_DIM};
use super::{CardAction, CardState, CardsError, Episode, Frame, GridLayout, GRID_SIDE, NUM_TILES};
use crate::neural::{BatchItem, TrainData};
use crate::seeds::{fnv1a, stream_rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const SPLIT_MAGIC: &[u8; 8] = b"MCARDS01";
const SPLIT_VERSION: u32 = 1;
const RECORD_BYTES: usize = 13;

/// Frames per zig-zag episode: 5 boustrophedon sweeps (or a pacing prefix
/// plus 4 sweeps) with 3-step walk-backs, always ending on a complete
/// uncover sweep.
pub const ZIGZAG_FRAMES: usize = 168;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub length: usize,
    pub zigzag_sequences: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { sequences: 2000, length: 250, zigzag_sequences: 100, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), CardsError> {
        if self.sequences == 0 {
            return Err(CardsError::BadSpec("sequences must be positive".into()));
        }
        if self.length < 2 {
            return Err(CardsError::BadSpec("length must be at least 2".into()));
        }
        Ok(())
    }

    /// Train split size under the floor convention; test gets the rest.
    pub fn train_count(&self) -> usize {
        (self.sequences as f64 * 0.9).floor() as usize
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub train: usize,
    pub test: usize,
    pub zigzag: usize,
    /// Episode indices (per split) that never reveal every tile.
    pub incomplete_train: Vec<usize>,
    pub incomplete_test: Vec<usize>,
    pub text: String,
}

pub fn write_split(path: &Path, episodes: &[Episode], seed: u64) -> Result<(), CardsError> {
    let frames_per_seq = episodes.first().map(|e| e.len()).unwrap_or(0);
    debug_assert!(episodes.iter().all(|e| e.len() == frames_per_seq));
    let mut buf =
        Vec::with_capacity(40 + episodes.len() * frames_per_seq * RECORD_BYTES);
    buf.extend_from_slice(SPLIT_MAGIC);
    buf.extend_from_slice(&SPLIT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(GRID_SIDE as u32).to_le_bytes());
    buf.extend_from_slice(&(GRID_SIDE as u32).to_le_bytes());
    buf.extend_from_slice(&(episodes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames_per_seq as u32).to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    for ep in episodes {
        for f in &ep.frames {
            buf.extend_from_slice(&f.state.layout.pack().to_le_bytes());
            buf.extend_from_slice(&f.state.covered_mask().to_le_bytes());
            buf.push(f.state.agent.0);
            buf.push(f.state.agent.1);
            buf.push(f.action.index() as u8);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<Episode>, CardsError> {
    let data = fs::read(path)?;
    if data.len() < 36 || &data[..8] != SPLIT_MAGIC {
        return Err(CardsError::Corrupt("bad magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
    if u32_at(8) != SPLIT_VERSION {
        return Err(CardsError::Corrupt(format!("unsupported version {}", u32_at(8))));
    }
    if u32_at(12) as usize != GRID_SIDE || u32_at(16) as usize != GRID_SIDE {
        return Err(CardsError::Corrupt("grid dimensions differ".into()));
    }
    let n_seq = u32_at(20) as usize;
    let frames_per_seq = u32_at(24) as usize;
    let body = &data[36..];
    if body.len() != n_seq * frames_per_seq * RECORD_BYTES {
        return Err(CardsError::Corrupt(format!(
            "expected {} frame records, file holds {} bytes",
            n_seq * frames_per_seq,
            body.len()
        )));
    }
    let mut episodes = Vec::with_capacity(n_seq);
    let mut off = 0;
    for _ in 0..n_seq {
        let mut frames = Vec::with_capacity(frames_per_seq);
        for _ in 0..frames_per_seq {
            let rec = &body[off..off + RECORD_BYTES];
            off += RECORD_BYTES;
            let layout = GridLayout::unpack(u64::from_le_bytes(rec[..8].try_into().unwrap()));
            let mask = u16::from_le_bytes(rec[8..10].try_into().unwrap());
            let agent = (rec[10], rec[11]);
            if agent.0 as usize >= GRID_SIDE || agent.1 as usize >= GRID_SIDE {
                return Err(CardsError::Corrupt("agent out of bounds".into()));
            }
            let action = CardAction::from_index(rec[12] as usize)
                .ok_or_else(|| CardsError::Corrupt(format!("bad action tag {}", rec[12])))?;
            frames.push(Frame { state: CardState::from_mask(layout, mask, agent), action });
        }
        episodes.push(Episode { frames });
    }
    Ok(episodes)
}

/// One boustrophedon sweep from (0,0): toggles all 16 tiles, 31 actions,
/// ends at (3,0).
fn sweep_actions() -> Vec<CardAction> {
    let mut actions = Vec::with_capacity(31);
    for row in 0..GRID_SIDE {
        let dir = if row % 2 == 0 { CardAction::Right } else { CardAction::Left };
        for _ in 0..GRID_SIDE - 1 {
            actions.push(CardAction::Toggle);
            actions.push(dir);
        }
        actions.push(CardAction::Toggle);
        if row + 1 < GRID_SIDE {
            actions.push(CardAction::Down);
        }
    }
    actions
}

/// Zig-zag evaluation episode. Even indices start fully covered (sweep
/// pattern U,C,U,C,U), odd indices start fully uncovered (pacing prefix,
/// then C,U,C,U). Every episode reveals all tiles before its final uncover
/// sweep and ends with that sweep.
pub fn zigzag_episode(index: usize, rng: &mut ChaCha8Rng) -> Episode {
    let layout = GridLayout::random(rng);
    let start_covered = index % 2 == 0;
    let sweeps = if start_covered { 5 } else { 4 };
    let walk_back = [CardAction::Up, CardAction::Up, CardAction::Up];
    let mut actions = Vec::with_capacity(ZIGZAG_FRAMES - 1);
    if !start_covered {
        // toggle-free pacing that returns to (0,0): 17 × (Right, Left)
        for _ in 0..17 {
            actions.push(CardAction::Right);
            actions.push(CardAction::Left);
        }
    }
    for s in 0..sweeps {
        actions.extend(sweep_actions());
        if s + 1 < sweeps {
            actions.extend_from_slice(&walk_back);
        }
    }
    debug_assert_eq!(actions.len(), ZIGZAG_FRAMES - 1);
    let initial = CardState {
        layout,
        covered: [start_covered; NUM_TILES],
        agent: (0, 0),
    };
    Episode::scripted(initial, &actions)
}

/// Generate the full dataset on disk. Per-sequence seeds derive from
/// (seed, split, index), so generation parallelizes without changing bytes.
pub fn generate_dataset(out_dir: &Path, spec: &DatasetSpec) -> Result<DatasetManifest, CardsError> {
    spec.validate()?;
    let train_count = spec.train_count();
    let test_count = spec.sequences - train_count;

    let gen_range = |offset: usize, count: usize| -> Vec<Episode> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(spec.seed, "cards-seq", (offset + i) as u64);
                Episode::rollout(spec.length, &mut rng)
            })
            .collect()
    };
    let train = gen_range(0, train_count);
    let test = gen_range(train_count, test_count);
    let zigzag: Vec<Episode> = (0..spec.zigzag_sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(spec.seed, "cards-zigzag", i as u64);
            zigzag_episode(i, &mut rng)
        })
        .collect();

    let train_path = out_dir.join("train").join("sequences.bin");
    let test_path = out_dir.join("test").join("sequences.bin");
    let zigzag_path = out_dir.join("test_zigzag").join("sequences.bin");
    write_split(&train_path, &train, spec.seed)?;
    write_split(&test_path, &test, spec.seed)?;
    write_split(&zigzag_path, &zigzag, spec.seed)?;

    let incomplete = |eps: &[Episode]| -> Vec<usize> {
        eps.iter()
            .enumerate()
            .filter(|(_, e)| !e.fully_observed_before(e.len()))
            .map(|(i, _)| i)
            .collect()
    };
    let incomplete_train = incomplete(&train);
    let incomplete_test = incomplete(&test);

    let checksum = |p: &PathBuf| -> Result<u64, CardsError> { Ok(fnv1a(&fs::read(p)?)) };
    let mut text = String::new();
    let _ = writeln!(text, "version=1");
    let _ = writeln!(text, "grid={GRID_SIDE}x{GRID_SIDE}");
    let _ = writeln!(text, "seed={}", spec.seed);
    let _ = writeln!(text, "sequences={}", spec.sequences);
    let _ = writeln!(text, "length={}", spec.length);
    let _ = writeln!(text, "train={train_count}");
    let _ = writeln!(text, "test={test_count}");
    let _ = writeln!(text, "zigzag={}", spec.zigzag_sequences);
    let _ = writeln!(text, "zigzag_length={ZIGZAG_FRAMES}");
    let fmt_list = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(text, "incomplete_observation_train={}", fmt_list(&incomplete_train));
    let _ = writeln!(text, "incomplete_observation_test={}", fmt_list(&incomplete_test));
    let _ = writeln!(text, "checksum_train={:016x}", checksum(&train_path)?);
    let _ = writeln!(text, "checksum_test={:016x}", checksum(&test_path)?);
    let _ = writeln!(text, "checksum_zigzag={:016x}", checksum(&zigzag_path)?);
    fs::write(out_dir.join("manifest.txt"), &text)?;

    Ok(DatasetManifest {
        spec: spec.clone(),
        train: train_count,
        test: test_count,
        zigzag: spec.zigzag_sequences,
        incomplete_train,
        incomplete_test,
        text,
    })
}

/// Training-example sampler over episodes: picks a random frame as the
/// clean target and the preceding `context_len` frames (null-padded at
/// episode start) as conditioning.
pub struct EpisodeSampler {
    episodes: Vec<Episode>,
    context_len: usize,
    with_pos: bool,
}

impl EpisodeSampler {
    pub fn new(episodes: Vec<Episode>, context_len: usize, with_pos: bool) -> Self {
        assert!(!episodes.is_empty(), "sampler needs at least one episode");
        Self { episodes, context_len, with_pos }
    }

    pub fn context_dim(&self) -> usize {
        self.context_len * FRAME_DIM
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }
}

/// Concatenated encodings of `frames[start..end)` left-padded with null
/// frames (all-zero vectors) to exactly `context_len` frames.
pub fn context_window(frames: &[Frame], end: usize, context_len: usize) -> Vec<f64> {
    let mut ctx = Vec::with_capacity(context_len * FRAME_DIM);
    let have = end.min(frames.len());
    let need = context_len.saturating_sub(have);
    for _ in 0..need {
        ctx.extend(std::iter::repeat(0.0).take(FRAME_DIM));
    }
    for f in &frames[have.saturating_sub(context_len - need)..have] {
        ctx.extend(encode(f));
    }
    debug_assert_eq!(ctx.len(), context_len * FRAME_DIM);
    ctx
}

impl TrainData for EpisodeSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> BatchItem {
        let ep = &self.episodes[rng.gen_range(0..self.episodes.len())];
        let target = rng.gen_range(1..ep.len());
        let x0 = encode(&ep.frames[target]);
        let context = context_window(&ep.frames, target, self.context_len);
        let pos = self.with_pos.then(|| position_vec(ep.frames[target].state.agent));
        BatchItem { x0, context: Some(context), pos }
    }
}
