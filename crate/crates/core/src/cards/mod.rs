//! The Memory-Cards gridworld: a 4×4 grid of 8 object identities (two tiles
//! each), an agent that moves and toggles the cover of the tile it stands
//! on, and a structured frame encoding consumed by the diffusion models.
//!
//! The layout is static within an episode; recalling identities of covered
//! tiles after they were observed once is the whole game.

mod dataset;
mod encode;

pub use dataset::{
    context_window, generate_dataset, read_split, write_split, zigzag_episode, DatasetManifest,
    DatasetSpec, EpisodeSampler, ZIGZAG_FRAMES,
};
pub use encode::{decode, encode, position_vec, states_match, DecodedFrame, FRAME_DIM, TILE_BLOCK};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CardsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file corrupt: {0}")]
    Corrupt(String),
    #[error("invalid dataset spec: {0}")]
    BadSpec(String),
}

pub const GRID_SIDE: usize = 4;
pub const NUM_TILES: usize = GRID_SIDE * GRID_SIDE;
pub const NUM_IDENTITIES: usize = 8;

/// Object identities of the 16 tiles; exactly two tiles per identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout(pub [u8; NUM_TILES]);

impl GridLayout {
    /// Random pairs layout: each of the 8 identities placed on exactly 2
    /// tiles.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut ids = [0u8; NUM_TILES];
        for (i, id) in ids.iter_mut().enumerate() {
            *id = (i / 2) as u8;
        }
        ids.shuffle(rng);
        GridLayout(ids)
    }

    pub fn identity(&self, row: usize, col: usize) -> u8 {
        self.0[row * GRID_SIDE + col]
    }

    /// Pack to 48 bits (3 bits per tile) for the on-disk record.
    pub fn pack(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &id)| acc | ((id as u64) << (3 * i)))
    }

    pub fn unpack(bits: u64) -> Self {
        let mut ids = [0u8; NUM_TILES];
        for (i, id) in ids.iter_mut().enumerate() {
            *id = ((bits >> (3 * i)) & 0b111) as u8;
        }
        GridLayout(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CardState {
    pub layout: GridLayout,
    /// covered[i] — tile i shows its back instead of its identity.
    pub covered: [bool; NUM_TILES],
    /// (row, col), both in 0..4.
    pub agent: (u8, u8),
}

impl CardState {
    pub fn tile_covered(&self, row: usize, col: usize) -> bool {
        self.covered[row * GRID_SIDE + col]
    }

    pub fn all_covered(&self) -> bool {
        self.covered.iter().all(|&c| c)
    }

    pub fn covered_mask(&self) -> u16 {
        self.covered
            .iter()
            .enumerate()
            .fold(0u16, |acc, (i, &c)| if c { acc | (1 << i) } else { acc })
    }

    pub fn from_mask(layout: GridLayout, mask: u16, agent: (u8, u8)) -> Self {
        let mut covered = [false; NUM_TILES];
        for (i, c) in covered.iter_mut().enumerate() {
            *c = mask & (1 << i) != 0;
        }
        Self { layout, covered, agent }
    }

    /// Random state: pairs layout, each tile covered with probability 1/2,
    /// agent anywhere.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let layout = GridLayout::random(rng);
        let mut covered = [false; NUM_TILES];
        for c in covered.iter_mut() {
            *c = rng.gen_bool(0.5);
        }
        let agent = (rng.gen_range(0..GRID_SIDE) as u8, rng.gen_range(0..GRID_SIDE) as u8);
        Self { layout, covered, agent }
    }

    /// Episode start for the random-policy dataset: fully uncovered board,
    /// random layout and agent. Starting uncovered keeps the reveal-all
    /// property of the dataset independent of walk cover times; the mask
    /// mixes toward 50/50 within ~80 frames under the 0.4 toggle rate.
    pub fn episode_start(rng: &mut ChaCha8Rng) -> Self {
        let layout = GridLayout::random(rng);
        let agent = (rng.gen_range(0..GRID_SIDE) as u8, rng.gen_range(0..GRID_SIDE) as u8);
        Self { layout, covered: [false; NUM_TILES], agent }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CardAction {
    Up,
    Down,
    Left,
    Right,
    Toggle,
}

impl CardAction {
    pub const ALL: [CardAction; 5] =
        [CardAction::Up, CardAction::Down, CardAction::Left, CardAction::Right, CardAction::Toggle];

    pub fn index(self) -> usize {
        match self {
            CardAction::Up => 0,
            CardAction::Down => 1,
            CardAction::Left => 2,
            CardAction::Right => 3,
            CardAction::Toggle => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Pure transition: moves clamp at the borders, TOGGLE flips the cover of
/// the agent's tile, the layout never changes.
pub fn step(state: &CardState, action: CardAction) -> CardState {
    let mut next = *state;
    let (r, c) = state.agent;
    match action {
        CardAction::Up => next.agent = (r.saturating_sub(1), c),
        CardAction::Down => next.agent = ((r + 1).min(GRID_SIDE as u8 - 1), c),
        CardAction::Left => next.agent = (r, c.saturating_sub(1)),
        CardAction::Right => next.agent = (r, (c + 1).min(GRID_SIDE as u8 - 1)),
        CardAction::Toggle => {
            let idx = r as usize * GRID_SIDE + c as usize;
            next.covered[idx] = !next.covered[idx];
        }
    }
    next
}

/// Toggle probability of the random policy.
pub const TOGGLE_PROB: f64 = 0.4;
/// Per-direction probability of the random policy.
pub const MOVE_PROB: f64 = 0.15;

/// The dataset policy: TOGGLE with probability 0.4, each direction 0.15.
pub fn policy_action(rng: &mut ChaCha8Rng) -> CardAction {
    let u: f64 = rng.gen();
    if u < TOGGLE_PROB {
        CardAction::Toggle
    } else {
        let idx = (((u - TOGGLE_PROB) / MOVE_PROB) as usize).min(3);
        [CardAction::Up, CardAction::Down, CardAction::Left, CardAction::Right][idx]
    }
}

/// One observed frame: the state plus the action taken *from* it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub state: CardState,
    pub action: CardAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub frames: Vec<Frame>,
}

impl Episode {
    /// Roll the random policy for `length` frames from an episode start.
    pub fn rollout(length: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut state = CardState::episode_start(rng);
        let mut frames = Vec::with_capacity(length);
        for _ in 0..length {
            let action = policy_action(rng);
            frames.push(Frame { state, action });
            state = step(&state, action);
        }
        Episode { frames }
    }

    /// Scripted episode: fixed initial state, fixed action sequence.
    pub fn scripted(initial: CardState, actions: &[CardAction]) -> Self {
        let mut state = initial;
        let mut frames = Vec::with_capacity(actions.len() + 1);
        for &action in actions {
            frames.push(Frame { state, action });
            state = step(&state, action);
        }
        // final frame repeats the last action slot as Toggle-free filler;
        // it is never used as conditioning for a further step
        frames.push(Frame { state, action: CardAction::Up });
        Episode { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Tiles revealed (covered = false) at least once in frames [0, upto).
    pub fn tiles_revealed_before(&self, upto: usize) -> [bool; NUM_TILES] {
        let mut seen = [false; NUM_TILES];
        for f in &self.frames[..upto.min(self.frames.len())] {
            for (i, &c) in f.state.covered.iter().enumerate() {
                if !c {
                    seen[i] = true;
                }
            }
        }
        seen
    }

    pub fn fully_observed_before(&self, upto: usize) -> bool {
        self.tiles_revealed_before(upto).iter().all(|&s| s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn moves_clamp_at_borders() {
        let mut s = CardState::random(&mut rng(1));
        s.agent = (0, 0);
        assert_eq!(step(&s, CardAction::Up).agent, (0, 0));
        assert_eq!(step(&s, CardAction::Left).agent, (0, 0));
        s.agent = (3, 3);
        assert_eq!(step(&s, CardAction::Down).agent, (3, 3));
        assert_eq!(step(&s, CardAction::Right).agent, (3, 3));
    }

    #[test]
    fn toggle_is_an_involution() {
        let s = CardState::random(&mut rng(2));
        let once = step(&s, CardAction::Toggle);
        assert_ne!(once, s);
        assert_eq!(step(&once, CardAction::Toggle), s);
    }

    #[test]
    fn layout_is_static_over_a_rollout() {
        let mut r = rng(3);
        let ep = Episode::rollout(250, &mut r);
        let layout = ep.frames[0].state.layout;
        assert!(ep.frames.iter().all(|f| f.state.layout == layout));
    }

    #[test]
    fn layout_has_each_identity_exactly_twice() {
        for seed in 0..20 {
            let layout = GridLayout::random(&mut rng(seed));
            let mut counts = [0usize; NUM_IDENTITIES];
            for &id in &layout.0 {
                counts[id as usize] += 1;
            }
            assert!(counts.iter().all(|&c| c == 2), "{counts:?}");
        }
    }

    #[test]
    fn layout_pack_round_trips() {
        for seed in 0..10 {
            let layout = GridLayout::random(&mut rng(seed));
            assert_eq!(GridLayout::unpack(layout.pack()), layout);
        }
    }

    #[test]
    fn policy_frequencies_match_spec() {
        let mut r = rng(11);
        let n = 1_000_000usize;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[policy_action(&mut r).index()] += 1;
        }
        let toggle_freq = counts[CardAction::Toggle.index()] as f64 / n as f64;
        assert!((toggle_freq - TOGGLE_PROB).abs() < 0.01, "toggle {toggle_freq}");
        // χ² against (0.15, 0.15, 0.15, 0.15, 0.4): 4 dof, p > 0.01 needs
        // χ² < 13.28
        let expected = [0.15, 0.15, 0.15, 0.15, 0.4];
        let chi2: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&c, e)| {
                let exp = e * n as f64;
                (c as f64 - exp) * (c as f64 - exp) / exp
            })
            .sum();
        assert!(chi2 < 13.28, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn full_observation_density_over_random_episodes() {
        let mut complete = 0;
        let total = 200;
        let mut late_cover = 0.0;
        let mut late_frames = 0usize;
        for seed in 0..total {
            let ep = Episode::rollout(250, &mut rng(500 + seed));
            if ep.fully_observed_before(250) {
                complete += 1;
            }
            for f in &ep.frames[100..] {
                late_cover += f.state.covered.iter().filter(|&&c| c).count() as f64;
                late_frames += 1;
            }
        }
        let frac = complete as f64 / total as f64;
        assert!(frac >= 0.95, "only {frac} of episodes reveal all 16 tiles");
        // the board must still become substantially covered later on, or the
        // dataset would never exercise recall
        let cover_rate = late_cover / (late_frames as f64 * NUM_TILES as f64);
        assert!(
            (0.25..=0.75).contains(&cover_rate),
            "late-episode cover rate {cover_rate} leaves no memory signal"
        );
    }
}
