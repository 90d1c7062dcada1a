mod common;

use common::{floyd_warshall, INF};
use jclr::data::{filter_trajectories, passes_filter, TrajectoryCorpus};
use jclr::synth::{generate_network, generate_trajectories, CityConfig};

fn city(rows: usize, cols: usize, trips: usize, route_noise: f64, seed: u64) -> CityConfig {
    CityConfig {
        grid_rows: rows,
        grid_cols: cols,
        num_trajectories: trips,
        route_noise,
        seed,
        ..Default::default()
    }
}

#[test]
fn network_is_deterministic_and_has_no_dead_ends() {
    let cfg = city(5, 4, 10, 0.05, 7);
    let a = generate_network(&cfg).unwrap();
    let b = generate_network(&cfg).unwrap();
    assert_eq!(a, b);
    assert!((0..a.num_segments()).all(|s| !a.out_neighbors(s).is_empty()));
    let other = generate_network(&CityConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a.segments(), other.segments());
}

#[test]
fn noiseless_routes_are_shortest_paths() {
    let cfg = city(6, 6, 300, 0.0, 3);
    let net = generate_network(&cfg).unwrap();
    let fw = floyd_warshall(&net);
    for t in generate_trajectories(&net, &cfg).unwrap().iter() {
        let hops = fw[t.origin()][t.destination()];
        assert_eq!(t.len() as u64, hops + 1, "{}", t.id);
    }
}

#[test]
fn corpus_is_valid_timed_and_filtered() {
    let cfg = city(8, 8, 500, 0.1, 1);
    let net = generate_network(&cfg).unwrap();
    let corpus = generate_trajectories(&net, &cfg).unwrap();
    assert_eq!(corpus.len(), 500);
    assert!(TrajectoryCorpus::validated(corpus.trajectories().to_vec(), &net).is_ok());
    assert_eq!(filter_trajectories(&corpus), corpus);
    for t in corpus.iter() {
        assert!(passes_filter(t));
        let ts = t.timestamps.as_ref().unwrap();
        assert!(ts.windows(2).all(|w| w[1] > w[0]), "{}", t.id);
    }
    assert_eq!(generate_trajectories(&net, &cfg).unwrap(), corpus);
}

/// Expected length of a filtered uniform-OD trip, by enumerating every
/// ordered segment pair whose shortest route has at least three segments.
fn enumerated_mean_length(dist: &[Vec<u64>]) -> f64 {
    let (mut sum, mut count) = (0.0, 0.0);
    for (o, row) in dist.iter().enumerate() {
        for (d, &h) in row.iter().enumerate() {
            if o != d && h < INF && h + 1 >= 3 {
                sum += (h + 1) as f64;
                count += 1.0;
            }
        }
    }
    sum / count
}

#[test]
fn mean_length_tracks_enumerated_route_length() {
    for (rows, cols, seed) in [(8, 8, 0), (6, 10, 1), (12, 12, 2)] {
        let cfg = city(rows, cols, 1000, 0.05, seed);
        let net = generate_network(&cfg).unwrap();
        let corpus = generate_trajectories(&net, &cfg).unwrap();
        let mean = corpus.iter().map(|t| t.len() as f64).sum::<f64>() / corpus.len() as f64;
        let expect = enumerated_mean_length(&floyd_warshall(&net));
        assert!((mean / expect - 1.0).abs() <= 0.3, "{rows}x{cols}: {mean} vs {expect}");
    }
}
