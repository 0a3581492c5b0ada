use std::sync::Arc;

use m3mix::eval::{density_grid, nmi};
use m3mix::gaussian::NiwPrior;
use m3mix::infinite::{
    run_chain, run_chains, ChainConfig, Init, InfiniteM3State,
    InfinitePosterior, PosteriorMixture,
};
use m3mix::rng::stream_rng;
use m3mix::synth::{default_unshared_pairs, gen_paired_gaussians};
use m3mix::types::{Assignment2D, Concentration, ShareWeights};
use nalgebra::{dvector, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn two_clusters(seed: u64) -> Vec<DVector<f64>> {
    let mut rng = stream_rng(seed, 0);
    let a = Normal::new(-10.0, 0.5).unwrap();
    let b = Normal::new(10.0, 0.5).unwrap();
    let mut points: Vec<DVector<f64>> = (0..100).map(|_| dvector![a.sample(&mut rng)]).collect();
    points.extend((0..100).map(|_| dvector![b.sample(&mut rng)]));
    points
}

#[test]
fn coupled_weights_preserve_the_diagonal() {
    let data = Arc::new(two_clusters(1));
    let mut rng = stream_rng(2, 0);
    let assignments: Vec<Assignment2D> = (0..data.len())
        .map(|_| {
            let z = rng.gen_range(0..6);
            Assignment2D::new(z, z)
        })
        .collect();
    let prior = NiwPrior::from_data(&data).unwrap();
    let mut state = InfiniteM3State::new(
        data,
        dense(assignments),
        prior,
        Concentration::new(1.0).unwrap(),
        ShareWeights::coupled(),
        3,
        &mut rng,
    )
    .unwrap();
    for sweep in 0..60 {
        state.gibbs_sweep(&mut rng);
        assert!(state.assignments.iter().all(|a| a.z1 == a.z2), "sweep {sweep}");
        assert_eq!(state.k1(), state.k2());
        assert!(state.counts.is_consistent());
    }
}

fn dense(mut a: Vec<Assignment2D>) -> Vec<Assignment2D> {
    let mut used: Vec<usize> = a.iter().map(|x| x.z1).collect();
    used.sort_unstable();
    used.dedup();
    for x in a.iter_mut() {
        let z = used.binary_search(&x.z1).unwrap();
        *x = Assignment2D::new(z, z);
    }
    a
}

#[test]
fn coupled_chain_trace_has_equal_component_counts() {
    let config = ChainConfig {
        init: Init::RandomDiagonal { k: 8 },
        sweeps: 40,
        burn_in: 20,
        seed: 3,
        ..ChainConfig::dpmm()
    };
    let out = run_chain(&two_clusters(4), &config).unwrap();
    assert!(out.trace.iter().all(|t| t.k1 == t.k2));
}

#[test]
fn separated_clusters_give_two_mean_components() {
    let config = ChainConfig {
        init: Init::RandomDiagonal { k: 10 },
        sweeps: 200,
        burn_in: 150,
        seed: 5,
        ..ChainConfig::new(ShareWeights::new(0.1, 0.45, 0.45).unwrap())
    };
    let out = run_chain(&two_clusters(6), &config).unwrap();
    let mut freq = std::collections::BTreeMap::new();
    for t in &out.trace[150..] {
        *freq.entry(t.k1).or_insert(0) += 1;
    }
    let mode = freq.iter().max_by_key(|(_, &n)| n).map(|(&k, _)| k).unwrap();
    assert_eq!(mode, 2, "{freq:?}");
}

#[test]
fn same_seed_same_trace_and_streams_differ() {
    let data = two_clusters(7);
    let config = ChainConfig {
        sweeps: 20,
        burn_in: 10,
        seed: 8,
        init: Init::RandomCells { k1: 4, k2: 3 },
        ..ChainConfig::new(ShareWeights::new(0.2, 0.4, 0.4).unwrap())
    };
    let a = run_chain(&data, &config).unwrap();
    let b = run_chain(&data, &config).unwrap();
    assert_eq!(a.trace, b.trace);
    let chains = run_chains(&data, &config, 2).unwrap();
    assert_eq!(chains[0].trace, a.trace);
    assert_ne!(chains[1].trace, a.trace);
}

#[test]
fn unshared_fit_recovers_ten_density_peaks() {
    let cloud = gen_paired_gaussians(&default_unshared_pairs(), 100, 7).unwrap();
    let config = ChainConfig {
        init: Init::RandomDiagonal { k: 50 },
        sweeps: 150,
        burn_in: 100,
        thin: 5,
        seed: 1,
        ..ChainConfig::new(ShareWeights::new(0.1, 0.45, 0.45).unwrap())
    };
    let out = run_chain(&cloud.points, &config).unwrap();
    let truth = cloud.labels.as_ref().unwrap();
    let score = nmi(&out.samples.last().unwrap().joint_labels(), truth).unwrap();
    assert!(score > 0.9, "NMI {score}");
    let posterior = InfinitePosterior::from_chain(&config, &out).unwrap();
    let grid = density_grid(&posterior.samples, &[(-12.0, 12.0), (-12.0, 12.0)], 200).unwrap();
    assert!((grid.integral() - 1.0).abs() < 0.02, "{}", grid.integral());
    assert_eq!(grid.count_peaks(0.05), 10);
    assert!(posterior.samples.iter().all(|s| s.counts().total() == cloud.len()));
}
