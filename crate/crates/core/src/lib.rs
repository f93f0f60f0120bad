//! Semantic segmentation of leaf images with U-Net models trained either on
//! labeled trimaps or without labels under a fuzzy c-means objective.

pub mod arch;
pub mod data;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

/// Mixes a base seed with a path of indices into an independent stream seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}
