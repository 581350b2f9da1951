//! Identity-disjoint train/query/gallery protocol.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub person_id: u32,
    pub camera_id: u32,
}

/// Indices into the clip list the split was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub query_camera: u32,
}

/// Half of the identities (rounded down) train; the rest are tested with
/// the lowest camera id as the query camera and every other camera as gallery.
pub fn protocol_split(clips: &[ClipMeta], seed: u64) -> Result<ProtocolSplit> {
    let ids: BTreeSet<u32> = clips.iter().map(|c| c.person_id).collect();
    let cams: BTreeSet<u32> = clips.iter().map(|c| c.camera_id).collect();
    if ids.len() < 4 {
        return Err(config(format!("protocol split needs at least 4 identities, found {}", ids.len())));
    }
    if cams.len() < 2 {
        return Err(config(format!("protocol split needs at least 2 cameras, found {}", cams.len())));
    }
    let mut order: Vec<u32> = ids.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = order.len() / 2;
    let mut train_ids = order[..n_train].to_vec();
    let mut test_ids = order[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let query_camera = *cams.iter().next().expect("at least two cameras");

    let mut split = ProtocolSplit {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        train_ids,
        test_ids,
        query_camera,
    };
    for (i, c) in clips.iter().enumerate() {
        if split.train_ids.binary_search(&c.person_id).is_ok() {
            split.train.push(i);
        } else if c.camera_id == query_camera {
            split.query.push(i);
        } else {
            split.gallery.push(i);
        }
    }
    Ok(split)
}
