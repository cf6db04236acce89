//! Seeded RNG with a serializable position, so checkpoints can restore it exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn restore_continues_the_stream() {
        let mut rng = seeded(9);
        for _ in 0..17 {
            rng.random::<u32>();
        }
        let state = RngState::capture(&rng);
        let a: Vec<u64> = (0..5).map(|_| rng.random()).collect();
        let mut back = state.restore();
        let b: Vec<u64> = (0..5).map(|_| back.random()).collect();
        assert_eq!(a, b);
    }
}
