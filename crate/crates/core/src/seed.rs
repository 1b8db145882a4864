use sha2::{Digest, Sha256};

/// Independent seed for a named pipeline stage, derived from the global seed.
pub fn sub_seed(global: u64, stage: &str) -> u64 {
    let h = Sha256::new().chain_update(global.to_le_bytes()).chain_update(stage.as_bytes()).finalize();
    u64::from_le_bytes(h[..8].try_into().expect("digest has 32 bytes"))
}
