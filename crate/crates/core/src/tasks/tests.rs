use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn open_maze_has_no_walls() {
    let w = gen_maze(9, 0.0, &mut rng(1)).unwrap();
    assert_eq!(w.wall_count(), 0);
    assert_eq!(w.start(), (4, 4));
}

#[test]
fn mazes_are_connected_and_seeded() {
    for seed in 0..60 {
        for &rho in &[0.1, 0.25, 0.35] {
            let w = gen_maze(11, rho, &mut rng(seed)).unwrap();
            assert!(w.is_connected());
            assert!(w.is_free(w.start()));
            assert_eq!(w, gen_maze(11, rho, &mut rng(seed)).unwrap());
        }
    }
    assert!(gen_maze(8, 0.1, &mut rng(0)).is_err());
    assert!(gen_maze(3, 0.1, &mut rng(0)).is_err());
    assert!(gen_maze(9, 0.5, &mut rng(0)).is_err());
}

#[test]
fn spiral_covers_each_cell_once() {
    let w = MazeWorld::open(13);
    let t = spiral_trajectory(&w, 1000, 0).unwrap();
    assert_eq!(t.len(), 169);
    assert_eq!(t.positions.iter().collect::<HashSet<_>>().len(), 169);
    assert!(t.is_valid(&w));

    // with a one-cell border left out, a 15×15 world gives the 13×13 interior
    let w = MazeWorld::open(15);
    let t = spiral_trajectory(&w, 1000, 1).unwrap();
    assert_eq!(t.len(), 169);
    assert!(t.positions.iter().all(|p| (1..14).contains(&p.0) && (1..14).contains(&p.1)));
    assert_eq!(t.positions.iter().collect::<HashSet<_>>().len(), 169);

    let t = spiral_trajectory(&w, 1, 0).unwrap();
    assert_eq!(t.positions, vec![w.start()]);

    let walled = gen_maze(9, 0.3, &mut rng(3)).unwrap();
    if walled.wall_count() > 0 {
        assert!(spiral_trajectory(&walled, 10, 0).is_err());
    }
}

#[test]
fn random_walk_directions_are_uniform() {
    let w = MazeWorld::open(21);
    let steps = 100_000;
    let t = random_walk(&w, steps + 1, &mut rng(4)).unwrap();
    assert!(t.is_valid(&w));
    // only count moves made from cells where all four moves were legal
    let mut counts = [0usize; 4];
    for pair in t.positions.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.0 == 0 || a.1 == 0 || a.0 == 20 || a.1 == 20 {
            continue;
        }
        let d = match (b.0 as isize - a.0 as isize, b.1 as isize - a.1 as isize) {
            (-1, 0) => 0,
            (0, 1) => 1,
            (1, 0) => 2,
            (0, -1) => 3,
            other => panic!("illegal move {other:?}"),
        };
        counts[d] += 1;
    }
    let total: usize = counts.iter().sum();
    let expect = total as f64 / 4.0;
    let sigma = (total as f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - expect).abs() < 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn random_walk_respects_walls() {
    for seed in 0..20 {
        let w = gen_maze(9, 0.3, &mut rng(seed)).unwrap();
        let t = random_walk(&w, 200, &mut rng(seed + 100)).unwrap();
        assert!(t.is_valid(&w));
        assert!(t.positions.windows(2).all(|p| p[0] != p[1]));
    }
}

#[test]
fn observation_examples() {
    let w = MazeWorld::open(9);
    let o = observe(&w, w.start(), 3).unwrap();
    assert_eq!((o.drow, o.dcol), (0.0, 0.0));
    assert!(o.patch.iter().all(|c| !c));

    let o = observe(&w, (0, 0), 3).unwrap();
    let expect = [true, true, true, true, false, false, true, false, false];
    assert_eq!(o.patch, expect);
    assert_eq!((o.drow, o.dcol), (-0.5, -0.5));

    // mirror-symmetric world: mirrored positions see mirrored patches
    let n = 9;
    let mut cells = vec![false; n * n];
    for &(r, c) in &[(1, 2), (3, 1), (6, 3), (2, 7)] {
        cells[r * n + c] = true;
        cells[r * n + (n - 1 - c)] = true;
    }
    let w = MazeWorld::new(n, cells, (4, 4)).unwrap();
    for &(r, c) in &[(1, 1), (2, 3), (5, 0), (7, 2)] {
        let a = observe(&w, (r, c), 5).unwrap();
        let b = observe(&w, (r, n - 1 - c), 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(a.patch[i * 5 + j], b.patch[i * 5 + 4 - j]);
            }
        }
        assert_eq!(a.dcol, -b.dcol);
    }
    assert!(observe(&w, (1, 2), 3).is_err());
    assert!(observe(&w, (1, 1), 4).is_err());
}

#[test]
fn canvas_mapping_is_injective() {
    let w = MazeWorld::open(9);
    let mut seen = HashSet::new();
    for r in 0..9 {
        for c in 0..9 {
            let p = to_canvas(&w, (r, c));
            assert!(p.0 < canvas_size(9) && p.1 < canvas_size(9));
            assert!(seen.insert(p));
        }
    }
    assert_eq!(to_canvas(&w, w.start()), (8, 8));
}

/// Compares every fully observed window against the query patch directly.
fn brute_force_mask(seen: &SeenMap, patch: &[bool], k: usize) -> Vec<bool> {
    let size = seen.size();
    let h = k as isize / 2;
    let mut mask = vec![false; size * size];
    for r in 0..size as isize {
        for c in 0..size as isize {
            let mut ok = true;
            for i in -h..=h {
                for j in -h..=h {
                    let (rr, cc) = (r + i, c + j);
                    if rr < 0 || cc < 0 || rr >= size as isize || cc >= size as isize {
                        ok = false;
                        continue;
                    }
                    let want = patch[((i + h) * k as isize + j + h) as usize];
                    match seen.get(rr as usize, cc as usize) {
                        Seen::Unknown => ok = false,
                        Seen::Wall => ok &= want,
                        Seen::Free => ok &= !want,
                    }
                }
            }
            mask[r as usize * size + c as usize] = ok;
        }
    }
    mask
}

#[test]
fn query_mask_matches_brute_force() {
    let mut r = rng(5);
    for ep in 0..100 {
        let w = gen_maze(9, 0.25, &mut r).unwrap();
        let t = random_walk(&w, 40, &mut r).unwrap();
        let mut seen = SeenMap::for_world(&w);
        for (i, p) in t.positions.iter().enumerate() {
            seen.record(&w, *p, 3);
            if i % 7 != 6 {
                continue;
            }
            let q = sample_query(&seen, 3, &mut r).unwrap();
            assert_eq!(q.mask, brute_force_mask(&seen, &q.patch, 3), "episode {ep}");
            let size = seen.size();
            assert!(q.mask[q.centre.0 * size + q.centre.1]);
            for (idx, m) in q.mask.iter().enumerate() {
                if *m {
                    assert_ne!(seen.cells()[idx], Seen::Unknown);
                }
            }
        }
    }
}

#[test]
fn query_examples() {
    // all free and fully seen: every window away from the seen border matches
    let w = MazeWorld::open(9);
    let mut seen = SeenMap::for_world(&w);
    for p in spiral_trajectory(&w, 81, 0).unwrap().positions {
        seen.record(&w, p, 3);
    }
    let size = seen.size();
    let q = query_at(&seen, (8, 8), 3).unwrap();
    let interior: usize = (0..size * size)
        .filter(|i| {
            let (r, c) = (i / size, i % size);
            (5..=11).contains(&r) && (5..=11).contains(&c)
        })
        .count();
    assert_eq!(q.mask.iter().filter(|m| **m).count(), interior);

    // a corner of the world (walls beyond it) is unique
    let q = query_at(&seen, (4, 4), 3).unwrap();
    assert_eq!(q.mask.iter().filter(|m| **m).count(), 1);

    let empty = SeenMap::for_world(&w);
    assert!(matches!(sample_query(&empty, 3, &mut rng(0)), Err(Error::Invalid(_))));
}

#[test]
fn sort_examples() {
    let v1 = vec![1, 0, 1];
    let v2 = vec![0, 1, 1];
    let s = sort_instance(vec![v1.clone(), v2.clone()], vec![0.9, 0.1]).unwrap();
    assert_eq!(s.target, vec![v2, v1]);
    assert!(sort_instance(vec![vec![1], vec![0]], vec![0.5, 0.5]).is_err());

    let mut r = rng(6);
    for _ in 0..10_000 {
        let s = gen_sort(8, 6, &mut r).unwrap();
        let mut pairs: Vec<(f32, &BitVec)> = s.priorities.iter().copied().zip(&s.vectors).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let sorted: Vec<&BitVec> = pairs.iter().map(|p| p.1).collect();
        assert_eq!(sorted, s.target.iter().collect::<Vec<_>>());
        assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0));
    }
}

#[test]
fn recall_examples() {
    let mut r = rng(7);
    for _ in 0..2000 {
        let x = gen_recall(6, 6, &mut r).unwrap();
        assert!(x.query < 5);
        assert_eq!(x.vectors.iter().collect::<HashSet<_>>().len(), 6);
        assert_eq!(x.target(), &x.vectors[x.query + 1]);
    }
    let x = RecallInstance {
        vectors: (0..6).map(|i| vec![(i & 1) as u8, (i >> 1 & 1) as u8, (i >> 2) as u8]).collect(),
        query: 2,
    };
    assert_eq!(x.target(), &x.vectors[3]);
    assert!(gen_recall(8, 3, &mut r).is_err());
    assert!(gen_recall(1, 3, &mut r).is_err());
}

#[test]
fn prf_examples() {
    let mask = [true, true, false, false];
    let exact: Vec<f32> = mask.iter().map(|m| if *m { 0.9 } else { 0.1 }).collect();
    let p = metrics_prf(&exact, &mask, 0.5);
    assert_eq!((p.precision, p.recall, p.f), (1.0, 1.0, 1.0));
    let p = metrics_prf(&[0.0; 4], &mask, 0.5);
    assert_eq!((p.precision, p.recall, p.f), (0.0, 0.0, 0.0));
    let p = metrics_prf(&[0.9, 0.1, 0.1, 0.1], &mask, 0.5);
    assert_eq!((p.precision, p.recall), (1.0, 0.5));
    assert!((p.f - 2.0 / 3.0).abs() < 1e-12);
    let p = metrics_prf(&[0.0; 4], &[false; 4], 0.5);
    assert_eq!(p.f, 1.0);
}

#[test]
fn bit_error_examples() {
    let target: Vec<u8> = (0..90).map(|i| (i % 3 == 0) as u8).collect();
    let exact: Vec<f32> = target.iter().map(|t| *t as f32).collect();
    assert_eq!(metrics_bit_error(&exact, &target), 0.0);
    let flip: Vec<f32> = target.iter().map(|t| 1.0 - *t as f32).collect();
    assert_eq!(metrics_bit_error(&flip, &target), 1.0);
    let mut one = exact.clone();
    one[17] = 1.0 - one[17];
    assert!((metrics_bit_error(&one, &target) - 1.0 / 90.0).abs() < 1e-15);
}

fn mapping_spec() -> MappingSpec {
    MappingSpec {
        n: 9,
        m: 3,
        k: 3,
        wall_density: 0.0,
        motion: Motion::Spiral,
        steps: 81,
        margin: 0,
        first_query: None,
        resample_query: true,
    }
}

#[test]
fn mapping_episodes_replay() {
    let ep = gen_mapping(&mapping_spec(), &mut rng(8)).unwrap();
    assert_eq!(ep.len(), 81);
    let steps = ep.steps().unwrap();
    assert!(steps[..3].iter().all(|s| s.query.is_none()));
    assert!(steps[3..].iter().all(|s| s.query.is_some()));
    assert_eq!(ep, gen_mapping(&mapping_spec(), &mut rng(8)).unwrap());

    let held = MappingSpec {
        resample_query: false,
        motion: Motion::Random,
        wall_density: 0.2,
        steps: 30,
        ..mapping_spec()
    };
    let ep = gen_mapping(&held, &mut rng(9)).unwrap();
    let qs: HashSet<_> = ep.queries.iter().flatten().collect();
    assert_eq!(qs.len(), 1);
}

#[test]
fn testset_round_trip() {
    let tasks = [
        TaskSpec::Sort { length: 8, dim: 6 },
        TaskSpec::Recall { length: 6, dim: 6 },
        TaskSpec::Mapping(mapping_spec()),
        TaskSpec::Mapping(MappingSpec {
            motion: Motion::Random,
            wall_density: 0.2,
            steps: 25,
            ..mapping_spec()
        }),
    ];
    for task in tasks {
        let set = TestSet::generate(&task, 11, 5).unwrap();
        let bytes = set.encode();
        assert_eq!(&bytes[..4], b"MGT1");
        let back = TestSet::decode(&bytes).unwrap();
        assert_eq!(back, set);
        assert!(back.matches(&task));
        assert!(set.dump_text().starts_with("MGT1 v1"));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(TestSet::decode(&bytes[..cut]), Err(Error::Corrupt { .. })));
        }
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        assert!(matches!(TestSet::decode(&bumped), Err(Error::Version { found: 2, .. })));
    }
}

#[test]
fn testset_decoder_rejects_garbage() {
    let set = TestSet::generate(&TaskSpec::Recall { length: 6, dim: 6 }, 1, 2).unwrap();
    let mut bytes = set.encode();
    let header = 4 + 4 + 4 + 4 + 8 + 4;
    bytes[header] = 7;
    assert!(TestSet::decode(&bytes).is_err());

    let set = TestSet::generate(&TaskSpec::Mapping(mapping_spec()), 1, 1).unwrap();
    let mut bytes = set.encode();
    let header = 4 + 4 + 4 + 4 + 12 + 4;
    // wall under the start cell
    bytes[header + 1 + 40] = 1;
    assert!(TestSet::decode(&bytes).is_err());

    let mut r = rng(12);
    for _ in 0..200 {
        let len = r.gen_range(0..64);
        let junk: Vec<u8> = (0..len).map(|_| r.gen()).collect();
        let _ = TestSet::decode(&junk);
    }
}
