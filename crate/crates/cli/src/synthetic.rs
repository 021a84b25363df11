//! Seeded synthetic graphs, datasets and forge seeds for offline runs.

use gtt_core::forge::SourcePair;
use gtt_core::gateway::mock::verbalize;
use gtt_core::graph::{KnowledgeGraph, Triplet};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::DatasetRecord;

const FIRST: [&str; 12] = [
    "Alder", "Birch", "Cedar", "Dover", "Elgin", "Fenwick", "Garnet", "Hollis", "Ingram", "Jasper", "Kestrel", "Linden",
];
const SECOND: [&str; 10] = [
    "Airport", "College", "River", "Castle", "Hall", "Station", "Bridge", "Park", "Tower", "Harbor",
];
const RELATIONS: [&str; 14] = [
    "location", "country", "founder", "leaderName", "elevation", "runwayLength", "operator", "architect",
    "birthPlace", "capital", "established", "owner", "region", "populationTotal",
];

fn entity(rng: &mut ChaCha8Rng) -> String {
    format!("{} {}", FIRST.choose(rng).unwrap(), SECOND.choose(rng).unwrap())
}

/// Connected graph with `n` distinct triplets: every new triplet reuses an
/// entity already in the graph.
pub fn connected_graph(n: usize, rng: &mut ChaCha8Rng) -> KnowledgeGraph {
    assert!(n >= 1);
    let mut triplets: Vec<Triplet> = Vec::with_capacity(n);
    let mut entities = vec![entity(rng)];
    while triplets.len() < n {
        let anchor = entities.choose(rng).unwrap().clone();
        let other = if entities.len() > 1 && rng.random_bool(0.3) {
            entities.choose(rng).unwrap().clone()
        } else {
            let e = entity(rng);
            if !entities.contains(&e) {
                entities.push(e.clone());
            }
            e
        };
        if other == anchor {
            continue;
        }
        let rel = RELATIONS.choose(rng).unwrap();
        let t = if rng.random_bool(0.5) {
            Triplet::new(&anchor, rel, &other)
        } else {
            Triplet::new(&other, rel, &anchor)
        }
        .unwrap();
        if !triplets.contains(&t) {
            triplets.push(t);
        }
    }
    KnowledgeGraph::new(triplets).unwrap()
}

/// One sentence per triplet, in a shuffled order.
fn reference(g: &KnowledgeGraph, seed: u64, rng: &mut ChaCha8Rng) -> String {
    use rand::seq::SliceRandom;
    let mut sentences: Vec<String> = g.triplets().iter().map(|t| verbalize(t, seed)).collect();
    sentences.shuffle(rng);
    sentences.join(" ")
}

/// `n` records with 1..=`max_triplets` triplets and two references each.
pub fn dataset(n: usize, max_triplets: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let size = rng.random_range(1..=max_triplets);
            let g = connected_graph(size, &mut rng);
            let references = vec![reference(&g, seed, &mut rng), reference(&g, seed.wrapping_add(1), &mut rng)];
            DatasetRecord {
                id: format!("syn-{i:05}"),
                triplets: g.triplets().to_vec(),
                references,
                category: None,
                partition: None,
            }
        })
        .collect()
}

/// One-triplet pairs with noisy source texts, spread over the relation list.
pub fn seed_pairs(n: usize, seed: u64) -> Vec<SourcePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let head = entity(&mut rng);
            let mut tail = entity(&mut rng);
            while tail == head {
                tail = entity(&mut rng);
            }
            let triplet = Triplet::new(&head, RELATIONS[i % RELATIONS.len()], &tail).unwrap();
            let text = format!(
                "{} Records from {} mention it often, and it was discussed again in {}.",
                verbalize(&triplet, seed),
                1900 + rng.random_range(0..120),
                entity(&mut rng)
            );
            SourcePair { id: format!("seed-{i:04}"), triplet, text }
        })
        .collect()
}
