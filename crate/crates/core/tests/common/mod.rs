#![allow(dead_code)]

use mcp::{generate_synthetic, partition_by_year, ForcingSeries, PartitionMask, SyntheticTruth, SPLIT_PATTERN};

pub fn sig_truth(rng_seed: u64) -> SyntheticTruth {
    SyntheticTruth {
        rng_seed,
        ..SyntheticTruth::example()
    }
}

pub fn sig_data(years: usize) -> (ForcingSeries, PartitionMask) {
    let fs = generate_synthetic(&sig_truth(11), years).unwrap();
    let mask = partition_by_year(&fs, &SPLIT_PATTERN, 10).unwrap();
    (fs, mask)
}
