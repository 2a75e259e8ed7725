use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use psst_core::world::{generate_world, Split, SplitSizes, World, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

#[test]
fn same_seed_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = WorldConfig {
        seed: 11,
        ..WorldConfig::default()
    };
    let a = generate_world(&cfg).unwrap();
    let b = generate_world(&cfg).unwrap();
    let path = dir.path().join("world.toml");
    a.save(&path).unwrap();
    let loaded = World::load(&path).unwrap();
    assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), loaded.to_toml().unwrap());

    let other = generate_world(&WorldConfig {
        seed: 12,
        ..WorldConfig::default()
    })
    .unwrap();
    assert_ne!(a.to_toml().unwrap(), other.to_toml().unwrap());
}

#[test]
fn default_world_counts() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    assert_eq!(w.config.num_possible_scenes(), Some(256));
    assert_eq!(w.split_ids(Split::Train).len(), 160);
    assert_eq!(w.split_ids(Split::Val).len(), 48);
    assert_eq!(w.split_ids(Split::Test).len(), 48);

    let too_big = WorldConfig {
        split_sizes: SplitSizes {
            train: 200,
            val: 40,
            test: 17,
        },
        ..WorldConfig::default()
    };
    assert!(generate_world(&too_big).is_err());
}

#[test]
fn splits_disjoint_and_references_diverse() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    let mut seen = HashSet::new();
    for split in SPLITS {
        for &id in w.split_ids(split) {
            assert!(seen.insert(id), "scene {id} in two splits");
            let refs = w.references(id);
            let distinct: HashSet<&Vec<usize>> = refs.iter().map(|r| &r.tokens).collect();
            assert!(distinct.len() >= 2, "scene {id} has identical references");
        }
    }
}

#[test]
fn every_reference_parses_to_its_scene() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    for r in w.all_references() {
        let scene = w.scene(r.scene_id).unwrap();
        let parsed = w.grammar.parse(&r.tokens).unwrap();
        for (a, v) in parsed.iter().enumerate() {
            if let Some(v) = v {
                assert_eq!(*v, scene.attributes[a]);
            }
        }
        assert_eq!(*parsed.last().unwrap(), scene.attributes.last().copied());
    }
}

#[test]
fn uniform_distractors_hit_every_scene_evenly() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batches = 10_000;
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for _ in 0..batches {
        let b = w.sample_batch(Split::Train, 32, 0.0, &mut rng).unwrap();
        assert_eq!(b.distractor_scenes.len(), 31);
        let ids: HashSet<u32> = b.distractor_scenes.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), 31);
        assert!(!ids.contains(&b.target.id));
        for id in ids {
            *counts.entry(id).or_default() += 1;
        }
    }
    let n = w.split_ids(Split::Train).len() as f64;
    // P(target elsewhere) * P(chosen among the other n-1) = 31/n per batch
    let expected = batches as f64 * 31.0 / n;
    assert_eq!(counts.len(), n as usize);
    for (id, c) in counts {
        let rel = (c as f64 - expected).abs() / expected;
        assert!(rel < 0.10, "scene {id}: {c} vs {expected}");
    }
}

#[test]
fn hard_batches_use_neighbours_only() {
    // 4 attributes x 9 values gives every scene 32 one-attribute neighbours
    let cfg = WorldConfig {
        values_per_attribute: 9,
        split_sizes: SplitSizes {
            train: 6300,
            val: 161,
            test: 100,
        },
        seed: 3,
        ..WorldConfig::default()
    };
    let w = generate_world(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    for _ in 0..400 {
        let b = w.sample_batch(Split::Train, 32, 1.0, &mut rng).unwrap();
        if w.neighbors(Split::Train, &b.target).len() < 31 {
            continue;
        }
        checked += 1;
        for d in &b.distractor_scenes {
            assert_eq!(d.distance(&b.target), 1);
        }
    }
    assert!(checked > 50, "only {checked} targets had enough neighbours");
}

#[test]
fn epoch_batches_cover_split_once_per_round() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batches = w.epoch_batches(Split::Train, 32, &mut rng).unwrap();
    assert_eq!(batches.len(), 5 * (160 / 32));
    let mut per_scene: HashMap<u32, HashSet<usize>> = HashMap::new();
    for b in &batches {
        for e in b {
            per_scene.entry(e.scene_id).or_default().insert(e.reference);
        }
    }
    assert_eq!(per_scene.len(), 160);
    assert!(per_scene.values().all(|refs| refs.len() == 5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_worlds_keep_their_invariants(
        attrs in 2usize..5,
        values in 2usize..5,
        synonyms in 1usize..3,
        seed in any::<u64>(),
    ) {
        let total = values.pow(attrs as u32);
        let cfg = WorldConfig {
            num_attributes: attrs,
            values_per_attribute: values,
            synonyms_per_value: synonyms,
            refs_per_scene: 3,
            max_len: attrs + 2,
            split_sizes: SplitSizes { train: total / 2, val: total / 4, test: total / 4 },
            seed,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let mut seen = HashSet::new();
        for split in SPLITS {
            for &id in w.split_ids(split) {
                prop_assert!(seen.insert(id));
            }
        }
        for r in w.all_references() {
            prop_assert!(r.tokens.len() <= cfg.max_len);
            let scene = w.scene(r.scene_id).unwrap();
            let parsed = w.grammar.parse(&r.tokens).unwrap();
            for (a, v) in parsed.iter().enumerate() {
                if let Some(v) = v {
                    prop_assert_eq!(*v, scene.attributes[a]);
                }
            }
        }
        let back = World::from_toml(&w.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.to_toml().unwrap(), w.to_toml().unwrap());
    }
}
