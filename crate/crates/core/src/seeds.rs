//! Hierarchical seed derivation.
//!
//! Every random stream in a run is derived from one root seed plus a purpose
//! label and a path of indices, so adding a new consumer never shifts the
//! streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// FNV-1a; stable across platforms and compiler versions.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn derive(&self, label: &str, path: &[u64]) -> u64 {
        let mut s = splitmix64(self.root ^ label_hash(label));
        for &p in path {
            s = splitmix64(s ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
        }
        s
    }

    pub fn rng(&self, label: &str, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(label, path))
    }

    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree::new(self.derive(label, &[]))
    }
}
