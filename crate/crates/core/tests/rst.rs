mod common;

use common::{floyd_warshall, random_network, random_walk, rst_oracle, INF};
use jclr::data::TrajectoryCorpus;
use jclr::rst::{hop_distances_from, rst_weight_vector, rst_weights_for_corpus};
use jclr::synth::{generate_network, generate_trajectories, CityConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quantized(w: &jclr::rst::RSTWeightVector, n: usize) -> Vec<u32> {
    let mut out = vec![0; n];
    for &(s, q) in &w.nz {
        out[s] = q;
    }
    out
}

#[test]
fn bfs_matches_floyd_warshall() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let net = random_network(40, 0.06, &mut rng);
        let fw = floyd_warshall(&net);
        for s in 0..40 {
            let bfs = hop_distances_from(&net, s).dist;
            let expect: Vec<Option<u32>> = fw[s].iter().map(|&d| (d < INF).then_some(d as u32)).collect();
            assert_eq!(bfs, expect);
        }
    }
}

#[test]
fn grid_weights_match_route_enumeration() {
    let city = CityConfig {
        grid_rows: 6,
        grid_cols: 6,
        num_trajectories: 30,
        route_noise: 0.0,
        ..Default::default()
    };
    let net = generate_network(&city).unwrap();
    let corpus = generate_trajectories(&net, &city).unwrap();
    let fw = floyd_warshall(&net);
    for t in corpus.iter() {
        let w = rst_weight_vector(&net, t, 0.0).unwrap();
        assert_eq!(quantized(&w, net.num_segments()), rst_oracle(&fw, t, 0.0));
        // a shortest route keeps full weight on its own segments
        assert!(t.segments.iter().all(|&s| w.weight(s) == 1.0));
    }
}

#[test]
fn corpus_weights_match_per_trajectory_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = random_network(40, 0.08, &mut rng);
    let fw = floyd_warshall(&net);
    let trajs = (0..100).map(|i| random_walk(&net, 8, &format!("t{i}"), &mut rng)).collect();
    let corpus = TrajectoryCorpus::new(trajs).unwrap();
    for th in [0.0, 0.5] {
        let all = rst_weights_for_corpus(&net, &corpus, th).unwrap();
        for (w, t) in all.iter().zip(corpus.iter()) {
            assert_eq!(quantized(w, 40), rst_oracle(&fw, t, th));
            assert_eq!(w.trajectory_id, t.id);
        }
    }
}
