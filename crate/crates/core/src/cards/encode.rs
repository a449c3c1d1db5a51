//! Structured frame encoding: 16 tiles × (8-way identity one-hot + covered
//! bit) + 2 normalized agent coordinates + a 16-wide action block (5 slots
//! used). Covered tiles zero out their identity block, so the encoding never
//! leaks what the model is supposed to remember.

use super::{CardAction, CardState, Frame, GridLayout, GRID_SIDE, NUM_IDENTITIES, NUM_TILES};

/// Width of one tile's block: identity one-hot plus the covered bit.
pub const TILE_BLOCK: usize = NUM_IDENTITIES + 1;
/// Reserved width of the action block.
pub const ACTION_BLOCK: usize = 16;
/// Total encoding width: 16·9 + 2 + 16.
pub const FRAME_DIM: usize = NUM_TILES * TILE_BLOCK + 2 + ACTION_BLOCK;

const AGENT_OFF: usize = NUM_TILES * TILE_BLOCK;
const ACTION_OFF: usize = AGENT_OFF + 2;
const COORD_SCALE: f64 = (GRID_SIDE - 1) as f64;

pub fn encode(frame: &Frame) -> Vec<f64> {
    let mut v = vec![0.0; FRAME_DIM];
    let s = &frame.state;
    for i in 0..NUM_TILES {
        let off = i * TILE_BLOCK;
        if s.covered[i] {
            v[off + NUM_IDENTITIES] = 1.0;
        } else {
            v[off + s.layout.0[i] as usize] = 1.0;
        }
    }
    v[AGENT_OFF] = s.agent.0 as f64 / COORD_SCALE;
    v[AGENT_OFF + 1] = s.agent.1 as f64 / COORD_SCALE;
    v[ACTION_OFF + frame.action.index()] = 1.0;
    v
}

/// Normalized (row, col) conditioning vector for position-aware experts.
pub fn position_vec(agent: (u8, u8)) -> Vec<f64> {
    vec![agent.0 as f64 / COORD_SCALE, agent.1 as f64 / COORD_SCALE]
}

/// Result of snapping a (possibly noisy) frame vector back to the nearest
/// valid codewords.
#[derive(Debug, Clone)]
pub struct DecodedFrame {
    pub state: CardState,
    pub action: CardAction,
    /// Squared distance from each tile block to its nearest codeword.
    pub tile_sq_dist: [f64; NUM_TILES],
    /// Tiles where covered and an identity codeword were equidistant; ties
    /// break toward covered.
    pub ties: [bool; NUM_TILES],
}

/// Snap each tile block to the nearest valid codeword (covered, or one of
/// the 8 identities), the agent coordinates to the nearest cell, and the
/// action block to its argmax.
pub fn decode(v: &[f64]) -> DecodedFrame {
    assert_eq!(v.len(), FRAME_DIM, "frame vector must be {FRAME_DIM} wide");
    let mut ids = [0u8; NUM_TILES];
    let mut covered = [false; NUM_TILES];
    let mut tile_sq_dist = [0.0; NUM_TILES];
    let mut ties = [false; NUM_TILES];
    for i in 0..NUM_TILES {
        let block = &v[i * TILE_BLOCK..(i + 1) * TILE_BLOCK];
        // distance² to codeword c equals ‖block‖² − 2·block[c] + 1, so the
        // nearest codeword maximizes the matching coordinate.
        let mut best_id = 0usize;
        for (j, &b) in block.iter().enumerate().take(NUM_IDENTITIES).skip(1) {
            if b > block[best_id] {
                best_id = j;
            }
        }
        let covered_coord = block[NUM_IDENTITIES];
        let is_covered = covered_coord >= block[best_id];
        ties[i] = covered_coord == block[best_id];
        covered[i] = is_covered;
        ids[i] = best_id as u8;
        let target = if is_covered { NUM_IDENTITIES } else { best_id };
        let mut d = 0.0;
        for (j, &b) in block.iter().enumerate() {
            let want = if j == target { 1.0 } else { 0.0 };
            d += (b - want) * (b - want);
        }
        tile_sq_dist[i] = d;
    }
    let row = (v[AGENT_OFF] * COORD_SCALE).round().clamp(0.0, COORD_SCALE) as u8;
    let col = (v[AGENT_OFF + 1] * COORD_SCALE).round().clamp(0.0, COORD_SCALE) as u8;
    let mut action_idx = 0usize;
    for j in 1..CardAction::ALL.len() {
        if v[ACTION_OFF + j] > v[ACTION_OFF + action_idx] {
            action_idx = j;
        }
    }
    DecodedFrame {
        state: CardState { layout: GridLayout(ids), covered, agent: (row, col) },
        action: CardAction::from_index(action_idx).expect("index in range"),
        tile_sq_dist,
        ties,
    }
}

/// Decoded state equality against a reference, ignoring identity of covered
/// tiles (their identity block is all-zero in any valid encoding, so the
/// decoder cannot know them).
pub fn states_match(decoded: &CardState, reference: &CardState) -> bool {
    if decoded.agent != reference.agent || decoded.covered != reference.covered {
        return false;
    }
    (0..NUM_TILES).all(|i| reference.covered[i] || decoded.layout.0[i] == reference.layout.0[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cards::Episode;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fully_covered_grid_encodes_to_covered_bits_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = CardState::random(&mut rng);
        s.covered = [true; NUM_TILES];
        let v = encode(&Frame { state: s, action: CardAction::Toggle });
        for i in 0..NUM_TILES {
            let block = &v[i * TILE_BLOCK..(i + 1) * TILE_BLOCK];
            assert!(block[..NUM_IDENTITIES].iter().all(|&b| b == 0.0));
            assert_eq!(block[NUM_IDENTITIES], 1.0);
        }
    }

    #[test]
    fn round_trip_over_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let ep = Episode::rollout(100, &mut rng);
            for f in &ep.frames {
                let d = decode(&encode(f));
                assert!(states_match(&d.state, &f.state));
                assert_eq!(d.action, f.action);
                assert!(d.tile_sq_dist.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn decode_is_robust_to_small_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = Episode::rollout(200, &mut rng);
        for f in &ep.frames {
            let mut v = encode(f);
            for x in v.iter_mut() {
                *x += rng.gen_range(-0.01..0.01);
            }
            let d = decode(&v);
            assert!(states_match(&d.state, &f.state));
            assert_eq!(d.action, f.action);
        }
    }

    #[test]
    fn equidistant_blocks_tie_toward_covered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = CardState::random(&mut rng);
        s.covered = [false; NUM_TILES];
        let mut v = encode(&Frame { state: s, action: CardAction::Up });
        // make tile 0 ambiguous: identity coordinate equals covered coordinate
        let id = s.layout.0[0] as usize;
        v[id] = 0.5;
        v[NUM_IDENTITIES] = 0.5;
        let d = decode(&v);
        assert!(d.ties[0]);
        assert!(d.state.covered[0]);
    }
}
