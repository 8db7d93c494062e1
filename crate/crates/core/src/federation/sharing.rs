//! Style sharing: every participant receives exactly one other participant's style.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::style::StyleInfo;

/// Uniformly random permutation of `0..m` without fixed points (rejection
/// sampling of shuffles). For `m < 2` the identity is returned.
pub fn derangement<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..m).collect();
    if m < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Styles received by each participant, in participant order.
/// With a single participant there is nobody to share with and the own
/// style is returned.
pub fn style_sharing_round<R: Rng + ?Sized>(uploaded: &[StyleInfo], rng: &mut R) -> Vec<StyleInfo> {
    if uploaded.len() == 1 {
        log::warn!(
            "client {} is the only participant; style hooks use its own style",
            uploaded[0].client_id
        );
    }
    derangement(uploaded.len(), rng)
        .into_iter()
        .map(|src| uploaded[src].clone())
        .collect()
}
