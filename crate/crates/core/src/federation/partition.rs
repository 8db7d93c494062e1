//! Splitting the source-domain samples into client shards.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Corpus indices grouped by domain, restricted to `sources`.
fn by_domain(domains: &[usize], sources: &[usize]) -> Vec<Vec<usize>> {
    sources
        .iter()
        .map(|&d| (0..domains.len()).filter(|&i| domains[i] == d).collect())
        .collect()
}

/// Each source domain goes to its own group of `num_clients / |sources|`
/// clients and is dealt among them uniformly at random.
pub fn partition_single_domain<R: Rng + ?Sized>(
    domains: &[usize],
    sources: &[usize],
    num_clients: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() || num_clients == 0 || !num_clients.is_multiple_of(sources.len()) {
        return Err(Error::IndivisibleClients {
            clients: num_clients,
            domains: sources.len(),
        });
    }
    let per = num_clients / sources.len();
    let mut shards = Vec::with_capacity(num_clients);
    for mut pool in by_domain(domains, sources) {
        if pool.len() < per {
            return Err(Error::EmptyDataset("a source domain has fewer samples than its clients"));
        }
        pool.shuffle(rng);
        let base = pool.len() / per;
        let extra = pool.len() % per;
        let mut start = 0;
        for c in 0..per {
            let len = base + usize::from(c < extra);
            let mut shard = pool[start..start + len].to_vec();
            shard.sort_unstable();
            shards.push(shard);
            start += len;
        }
    }
    Ok(shards)
}

/// Proportions drawn from a symmetric Dirichlet via normalized Gamma draws.
pub fn dirichlet_proportions<R: Rng + ?Sized>(beta: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(format!("dirichlet beta {beta}: {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.iter().map(|g| g / total).collect())
    } else {
        // every draw underflowed: all mass on one client
        let hot = rng.random_range(0..n);
        Ok((0..n).map(|i| if i == hot { 1.0 } else { 0.0 }).collect())
    }
}

/// Integer counts summing to `total`: floors of `p·total`, with the
/// remaining units going to the largest fractional parts (lower index wins ties).
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Every source domain is split across all clients with Dirichlet(β)
/// proportions. Empty shards take one sample from the currently largest shard.
pub fn partition_multi_domain<R: Rng + ?Sized>(
    domains: &[usize],
    sources: &[usize],
    num_clients: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("dirichlet beta must be positive, got {beta}")));
    }
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be positive".into()));
    }
    let mut shards = vec![Vec::new(); num_clients];
    for mut pool in by_domain(domains, sources) {
        let props = dirichlet_proportions(beta, num_clients, rng)?;
        let counts = largest_remainder(&props, pool.len());
        pool.shuffle(rng);
        let mut start = 0;
        for (shard, &n) in shards.iter_mut().zip(&counts) {
            shard.extend_from_slice(&pool[start..start + n]);
            start += n;
        }
    }
    let total: usize = shards.iter().map(Vec::len).sum();
    if total < num_clients {
        return Err(Error::EmptyDataset("fewer source samples than clients"));
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..num_clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("clients");
        let moved = shards[donor].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    Ok(shards)
}
