mod common;

use common::criteria::{self, bits};
use fdg_core::data::{generate_corpus, CorpusSpec};
use fdg_core::federation::{
    derangement, dirichlet_proportions, fedavg_aggregate, largest_remainder, partition_multi_domain, partition_single_domain,
    run_federation, FederationConfig, Method, Partition,
};
use fdg_core::model::{ArchConfig, ModelParams};
use fdg_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sharing_partitions_and_averaging_hold_their_invariants() {
    let outcome = criteria::protocol_invariants();
    println!("{}", outcome.detail);
    assert!(outcome.passed);
}

#[test]
fn one_client_fedavg_is_plain_sgd() {
    let outcome = criteria::centralized_equivalence();
    println!("{}", outcome.detail);
    assert!(outcome.passed);
}

fn tiny() -> (FederationConfig, fdg_core::data::SyntheticCorpus) {
    let corpus = generate_corpus(&CorpusSpec { per_domain: 24, ..CorpusSpec::default() }).unwrap();
    let config = FederationConfig {
        num_clients: 3,
        participation: 2,
        rounds: 2,
        local_epochs: 1,
        batch_size: 8,
        oversample_size: 8,
        eval_every: 1,
        target_domain: 1,
        seed: 5,
        ..FederationConfig::default()
    };
    (config, corpus)
}

#[test]
fn runs_are_reproducible_for_every_mode() {
    let (config, corpus) = tiny();
    for mode in Method::ALL {
        let config = FederationConfig { mode, ..config.clone() };
        let a = run_federation(&config, &corpus).unwrap();
        let b = run_federation(&config, &corpus).unwrap();
        assert!(a.logs.iter().zip(&b.logs).all(|(x, y)| x.same_trajectory(y)), "{mode:?}");
        for ((_, x), (_, y)) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(bits(x), bits(y), "{mode:?}");
        }
        assert_eq!(a.final_eval, b.final_eval);
    }
}

#[test]
fn different_seeds_differ() {
    let (config, corpus) = tiny();
    let a = run_federation(&config, &corpus).unwrap();
    let b = run_federation(&FederationConfig { seed: 6, ..config }, &corpus).unwrap();
    assert_ne!(bits(&a.params.entries()[0].1), bits(&b.params.entries()[0].1));
}

#[test]
fn held_out_domain_never_reaches_training() {
    let (config, corpus) = tiny();
    for target in 0..corpus.num_domains() {
        let out = run_federation(&FederationConfig { target_domain: target, ..config.clone() }, &corpus).unwrap();
        assert!(out.audit.hits(&corpus.domains, target).is_empty());
        assert!(!out.audit.gradient.is_empty());
        assert!(!out.audit.style.is_empty());
    }
}

#[test]
fn indivisible_client_count_is_rejected() {
    let (config, corpus) = tiny();
    let bad = FederationConfig { num_clients: 4, partition: Partition::SingleDomain, ..config };
    assert!(matches!(run_federation(&bad, &corpus), Err(fdg_core::Error::IndivisibleClients { .. })));
}

#[test]
fn fedavg_weights_by_shard_size() {
    let arch = ArchConfig { image_size: 16, stem_channels: 4, block_channels: [4, 4, 6, 6], ..ArchConfig::default() };
    let mut r = ChaCha8Rng::seed_from_u64(31);
    let a = ModelParams::init(&arch, &mut r).unwrap();
    let b = ModelParams::init(&arch, &mut r).unwrap();
    let avg = fedavg_aggregate(&[a.clone(), b.clone()], &[1.0, 3.0]).unwrap();
    for (((_, x), (_, y)), (_, m)) in a.entries().iter().zip(b.entries()).zip(avg.entries()) {
        for ((&p, &q), &v) in x.data().iter().zip(y.data()).zip(m.data()) {
            assert!((v as f64 - (0.25 * p as f64 + 0.75 * q as f64)).abs() < 1e-6);
        }
    }
}

#[test]
fn aggregation_rejects_bad_weights() {
    let arch = ArchConfig { image_size: 16, stem_channels: 4, block_channels: [4, 4, 6, 6], ..ArchConfig::default() };
    let a = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(32)).unwrap();
    assert!(fedavg_aggregate(std::slice::from_ref(&a), &[0.0]).is_err());
    assert!(fedavg_aggregate(&[a.clone(), a], &[1.0]).is_err());
    assert!(fedavg_aggregate(&[], &[]).is_err());
}

#[test]
fn derangements_are_uniform_for_three() {
    // the two derangements of three elements should appear equally often
    let mut r = ChaCha8Rng::seed_from_u64(33);
    let draws = 20_000;
    let hits = (0..draws).filter(|_| derangement(3, &mut r) == vec![1, 2, 0]).count();
    assert!((hits as f64 / draws as f64 - 0.5).abs() < 0.015);
}

#[test]
fn small_beta_concentrates_dirichlet_mass() {
    let mut r = ChaCha8Rng::seed_from_u64(34);
    let max_share = |beta: f64, r: &mut ChaCha8Rng| -> f64 {
        (0..500)
            .map(|_| dirichlet_proportions(beta, 6, r).unwrap().into_iter().fold(0.0, f64::max))
            .sum::<f64>()
            / 500.0
    };
    let peaked = max_share(0.1, &mut r);
    let flat = max_share(100.0, &mut r);
    assert!(peaked > 0.7, "{peaked}");
    assert!(flat < 0.25, "{flat}");
}

#[test]
fn single_domain_shards_hold_one_domain() {
    let domains: Vec<usize> = (0..120).map(|i| i / 30).collect();
    let mut r = ChaCha8Rng::seed_from_u64(35);
    let shards = partition_single_domain(&domains, &[0, 2, 3], 6, &mut r).unwrap();
    assert_eq!(shards.len(), 6);
    for (k, s) in shards.iter().enumerate() {
        assert_eq!(s.len(), 15);
        assert!(s.iter().all(|&i| domains[i] == [0, 2, 3][k / 2]));
    }
}

#[test]
fn aggregated_buffers_are_averaged_too() {
    let arch = ArchConfig { image_size: 16, stem_channels: 4, block_channels: [4, 4, 6, 6], ..ArchConfig::default() };
    let a = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(36)).unwrap();
    let shifted: Vec<Tensor> = a.buffers().iter().map(|(_, t)| Tensor::full(t.shape(), 2.0)).collect();
    let b = a.with_buffers(shifted).unwrap();
    let avg = fedavg_aggregate(&[a.clone(), b], &[1.0, 1.0]).unwrap();
    for ((_, x), (_, m)) in a.buffers().iter().zip(avg.buffers()) {
        for (&p, &v) in x.data().iter().zip(m.data()) {
            assert!((v - (p + 2.0) / 2.0).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn largest_remainder_is_exact(props in prop::collection::vec(0.0f64..1.0, 1..8), total in 0usize..500) {
        let sum: f64 = props.iter().sum();
        prop_assume!(sum > 0.0);
        let p: Vec<f64> = props.iter().map(|v| v / sum).collect();
        let counts = largest_remainder(&p, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, q) in counts.iter().zip(&p) {
            prop_assert!((*c as f64 - q * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn dirichlet_shards_cover_sources(beta in 0.05f64..10.0, clients in 1usize..10, seed in any::<u64>()) {
        let domains: Vec<usize> = (0..80).map(|i| i % 4).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let shards = partition_multi_domain(&domains, &[0, 1, 3], clients, beta, &mut r).unwrap();
        prop_assert_eq!(shards.len(), clients);
        prop_assert!(shards.iter().all(|s| !s.is_empty()));
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        let expected: Vec<usize> = (0..80).filter(|i| i % 4 != 2).collect();
        prop_assert_eq!(all, expected);
    }
}
