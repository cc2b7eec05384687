use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reid_core::data::{
    build_cooccurrence, filter_single_camera_ids, read_features, split_by_person, write_features,
    CooccurrenceScope, Dataset, Sample,
};
use reid_core::eval::{cmc_map, EvalMeta, ProtocolConfig};
use reid_core::losses::{batch_hard_loss, full_triplet_loss, modified_batch_hard_loss, MarginMode};
use reid_core::mining::compute_np;
use reid_core::model::{read_checkpoint, write_checkpoint, Model, ModelConfig};
use reid_core::optim::{AdamState, LrSchedule, Optimizer, RmspropState};
use reid_core::sampler::sample_pk;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// P x K embeddings with block labels.
fn pk_batch() -> impl Strategy<Value = (Array2<f64>, Vec<u64>, usize)> {
    (2usize..=4, 2usize..=3, 1usize..=4).prop_flat_map(|(p, k, m)| {
        proptest::collection::vec(-2.0f64..2.0, p * k * m).prop_map(move |v| {
            let e = Array2::from_shape_vec((p * k, m), v).unwrap();
            let labels = (0..p * k).map(|i| (i / k) as u64).collect();
            (e, labels, k)
        })
    })
}

/// Orthonormal matrix from Gram-Schmidt on a random square matrix.
fn orthonormal(m: usize, raw: &[f64]) -> Option<Array2<f64>> {
    let mut q = Array2::<f64>::zeros((m, m));
    for c in 0..m {
        let mut v = Array1::from_iter((0..m).map(|r| raw[r * m + c]));
        for prev in 0..c {
            let u = q.column(prev).to_owned();
            v = &v - &(&u * u.dot(&v));
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-3 {
            return None;
        }
        q.column_mut(c).assign(&(v / n));
    }
    Some(q)
}

pub type Outcome = Result<(), String>;

fn check<V: std::fmt::Debug>(r: Result<(), TestError<V>>) -> Outcome {
    r.map_err(|e| e.to_string())
}

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: 64,
        failure_persistence: None,
        ..Config::default()
    })
}

pub fn losses_translation_invariant() -> Outcome {
    check(
        runner().run(&(pk_batch(), -5.0f64..5.0), |((e, labels, k), shift)| {
            let moved = &e + shift;
            for mode in [MarginMode::Softplus, MarginMode::Hinge(0.2)] {
                let a = batch_hard_loss(e.view(), &labels, mode).unwrap().loss;
                let b = batch_hard_loss(moved.view(), &labels, mode).unwrap().loss;
                prop_assert!(close(a, b, 1e-6), "{} vs {}", a, b);
                let a = full_triplet_loss(e.view(), &labels, mode).unwrap().loss;
                let b = full_triplet_loss(moved.view(), &labels, mode).unwrap().loss;
                prop_assert!(close(a, b, 1e-6));
                let a = modified_batch_hard_loss(e.view(), k, mode).unwrap().loss;
                let b = modified_batch_hard_loss(moved.view(), k, mode)
                    .unwrap()
                    .loss;
                prop_assert!(close(a, b, 1e-6));
            }
            Ok(())
        }),
    )
}

pub fn losses_rotation_invariant() -> Outcome {
    check(runner().run(
        &(pk_batch(), proptest::collection::vec(-1.0f64..1.0, 16)),
        |((e, labels, _k), raw)| {
            let m = e.ncols();
            if let Some(q) = orthonormal(m, &raw) {
                let rotated = e.dot(&q);
                let a = batch_hard_loss(e.view(), &labels, MarginMode::Softplus)
                    .unwrap()
                    .loss;
                let b = batch_hard_loss(rotated.view(), &labels, MarginMode::Softplus)
                    .unwrap()
                    .loss;
                prop_assert!(close(a, b, 1e-6));
            }
            Ok(())
        },
    ))
}

pub fn losses_invariant_to_row_permutation() -> Outcome {
    check(
        runner().run(&(pk_batch(), any::<u64>()), |((e, labels, _k), seed)| {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..labels.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pe = e.select(ndarray::Axis(0), &perm);
            let pl: Vec<u64> = perm.iter().map(|&i| labels[i]).collect();
            let a = batch_hard_loss(e.view(), &labels, MarginMode::Softplus).unwrap();
            let b = batch_hard_loss(pe.view(), &pl, MarginMode::Softplus).unwrap();
            prop_assert!(close(a.loss, b.loss, 1e-9));
            prop_assert!(a.loss >= 0.0 && a.grad.iter().all(|g| g.is_finite()));
            let fa = full_triplet_loss(e.view(), &labels, MarginMode::Softplus)
                .unwrap()
                .loss;
            let fb = full_triplet_loss(pe.view(), &pl, MarginMode::Softplus)
                .unwrap()
                .loss;
            prop_assert!(close(fa, fb, 1e-9));
            Ok(())
        }),
    )
}

pub fn cmc_is_monotone_and_bounded() -> Outcome {
    check(runner().run(
        &(
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0u64..4, 0u32..3), 1..8),
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0u64..4, 0u32..3), 1..20),
        ),
        |(q, g)| {
            let (qe, qm) = split(&q);
            let (ge, gm) = split(&g);
            if let Ok(r) = cmc_map(qe.view(), &qm, ge.view(), &gm, &ProtocolConfig::default()) {
                prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(r.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
                prop_assert!(r.map > 0.0 && r.map <= 1.0);
                if gm.len() <= 20 {
                    prop_assert_eq!(r.cmc[19], 1.0);
                }
            }
            Ok(())
        },
    ))
}

pub fn cmc_invariant_to_exact_isometries() -> Outcome {
    check(runner().run(
        &(
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0u64..4, 0u32..3), 1..8),
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0u64..4, 0u32..3), 1..20),
            any::<bool>(),
            any::<bool>(),
            any::<bool>(),
            -3i32..3,
        ),
        |(q, g, swap, flip0, flip1, scale_pow)| {
            // Axis swaps, sign flips and power-of-two scaling are exact in
            // floating point for 2-D embeddings, so rankings must agree exactly.
            let (qe, qm) = split(&q);
            let (ge, gm) = split(&g);
            let t = |e: &Array2<f64>| {
                let mut out = e.clone();
                if swap {
                    out = e.select(ndarray::Axis(1), &[1, 0]);
                }
                if flip0 {
                    out.column_mut(0).mapv_inplace(|v| -v);
                }
                if flip1 {
                    out.column_mut(1).mapv_inplace(|v| -v);
                }
                out * 2f64.powi(scale_pow)
            };
            let a = cmc_map(qe.view(), &qm, ge.view(), &gm, &ProtocolConfig::default());
            let b = cmc_map(
                t(&qe).view(),
                &qm,
                t(&ge).view(),
                &gm,
                &ProtocolConfig::default(),
            );
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.cmc, b.cmc);
                    prop_assert_eq!(a.map, b.map);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "one side failed"),
            }
            Ok(())
        },
    ))
}

pub fn feature_file_round_trip() -> Outcome {
    check(runner().run(
        &proptest::collection::vec(
            (
                0u32..3,
                0u32..4,
                proptest::option::of(0u64..50),
                0u64..6,
                -1e3f64..1e3,
                proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3),
            ),
            0..20,
        ),
        |rows| {
            let mut samples = Vec::new();
            for (ds, cam, pid, tr, t0, f) in rows {
                // Tracklet identity fixes camera and person, keyed by tracklet id.
                let tracklet = tr * 1000 + u64::from(cam) * 100 + pid.map_or(99, |p| p);
                samples.push(Sample {
                    features: f,
                    dataset_id: ds,
                    camera_id: cam,
                    person_id: pid,
                    tracklet_id: tracklet,
                    time_start: t0,
                    time_end: t0 + 1.5,
                });
            }
            let ds = Dataset::new(3, samples).unwrap();
            let mut buf = Vec::new();
            write_features(&ds, &mut buf).unwrap();
            let back = read_features(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, ds);
            Ok(())
        },
    ))
}

pub fn checkpoint_round_trip() -> Outcome {
    check(runner().run(
        &(any::<u64>(), 1usize..6, 1usize..6, 1usize..4, any::<bool>()),
        |(seed, f, h, m, train_mode)| {
            let mut model = Model::new(
                &ModelConfig {
                    hidden_dim: h,
                    embedding_dim: m,
                    dropout_rate: 0.25,
                    ..ModelConfig::new(f)
                },
                seed,
            )
            .unwrap();
            for (i, v) in model.running_mean.iter_mut().enumerate() {
                *v = (seed as f64).sin() * i as f64 / 3.0;
            }
            if train_mode {
                model.train();
            }
            let mut buf = Vec::new();
            write_checkpoint(&model, &mut buf).unwrap();
            let back = read_checkpoint(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, model);
            Ok(())
        },
    ))
}

pub fn cooccurrence_is_symmetric_and_matches_overlap() -> Outcome {
    check(runner().run(
        &(
            proptest::collection::vec((0u32..3, 0.0f64..20.0, 0.0f64..4.0), 1..25),
            0u8..3,
        ),
        |(spans, scope_pick)| {
            let scope = [
                CooccurrenceScope::SameCamera,
                CooccurrenceScope::CrossCamera,
                CooccurrenceScope::Both,
            ][scope_pick as usize];
            let samples: Vec<Sample> = spans
                .iter()
                .enumerate()
                .map(|(i, &(cam, t0, len))| Sample {
                    features: vec![0.0],
                    dataset_id: 0,
                    camera_id: cam,
                    person_id: Some(i as u64),
                    tracklet_id: i as u64,
                    time_start: t0,
                    time_end: t0 + len,
                })
                .collect();
            let ds = Dataset::new(1, samples).unwrap();
            let idx = build_cooccurrence(&ds, scope);
            for (i, a) in spans.iter().enumerate() {
                prop_assert!(!idx.linked(i as u64, i as u64));
                for (j, b) in spans.iter().enumerate().filter(|(j, _)| *j != i) {
                    prop_assert_eq!(
                        idx.linked(i as u64, j as u64),
                        idx.linked(j as u64, i as u64)
                    );
                    let overlap = a.1 <= b.1 + b.2 && b.1 <= a.1 + a.2;
                    let scope_ok = match scope {
                        CooccurrenceScope::SameCamera => a.0 == b.0,
                        CooccurrenceScope::CrossCamera => a.0 != b.0,
                        CooccurrenceScope::Both => true,
                    };
                    prop_assert_eq!(idx.linked(i as u64, j as u64), overlap && scope_ok);
                }
            }
            Ok(())
        },
    ))
}

pub fn pk_batches_have_exact_multiplicities() -> Outcome {
    check(runner().run(
        &(
            proptest::collection::vec(1usize..7, 2..9),
            1usize..6,
            any::<u64>(),
        ),
        |(counts, k, seed)| {
            let ds = labeled(&counts);
            let p = 2.min(counts.len()).max(1) + (seed as usize % (counts.len() - 1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = sample_pk(&ds, p, k, &mut rng).unwrap();
            prop_assert!(b.satisfies_pk());
            let mut by_label: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for (r, l) in b.refs.iter().zip(&b.labels) {
                prop_assert_eq!(ds.samples()[r.1].person_id, Some(*l));
                by_label.entry(*l).or_default().push(r.1);
            }
            for (l, mut idx) in by_label {
                if counts[l as usize] >= k {
                    idx.sort_unstable();
                    idx.dedup();
                    prop_assert_eq!(idx.len(), k);
                }
            }
            Ok(())
        },
    ))
}

pub fn single_camera_filter_is_idempotent() -> Outcome {
    check(runner().run(
        &proptest::collection::vec((0u64..8, 0u32..3), 1..30),
        |entries| {
            let samples: Vec<Sample> = entries
                .iter()
                .enumerate()
                .map(|(i, &(p, c))| Sample {
                    features: vec![i as f64],
                    dataset_id: 0,
                    camera_id: c,
                    person_id: Some(p),
                    tracklet_id: p * 10 + u64::from(c),
                    time_start: 0.0,
                    time_end: 1.0,
                })
                .collect();
            let ds = Dataset::new(1, samples).unwrap();
            let once = filter_single_camera_ids(&ds).unwrap();
            let twice = filter_single_camera_ids(&once).unwrap();
            prop_assert_eq!(&once, &twice);
            for p in once.person_ids() {
                let cams: std::collections::BTreeSet<u32> = once
                    .person_indices(p)
                    .iter()
                    .map(|&i| once.samples()[i].camera_id)
                    .collect();
                prop_assert!(cams.len() >= 2);
            }
            Ok(())
        },
    ))
}

pub fn person_split_partitions_identities() -> Outcome {
    check(runner().run(
        &(
            proptest::collection::vec(1usize..4, 2..20),
            0.1f64..0.9,
            any::<u64>(),
        ),
        |(counts, frac, seed)| {
            let ds = labeled(&counts);
            let (train, test) = split_by_person(&ds, frac, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), ds.len());
            let a: Vec<u64> = train.person_ids().collect();
            prop_assert!(test.person_ids().all(|p| !a.contains(&p)));
            Ok(())
        },
    ))
}

pub fn np_respects_bounds() -> Outcome {
    check(runner().run(
        &(0usize..200, 0usize..200, 0.001f64..=1.0),
        |(n1, n2, alpha)| {
            let np = compute_np(n1, n2, alpha);
            let m = n1.min(n2);
            if m == 0 {
                prop_assert_eq!(np, 0);
            } else {
                prop_assert!(np >= 1 && np <= m);
                prop_assert!(np as f64 <= alpha * m as f64 + 1.0);
            }
            Ok(())
        },
    ))
}

pub fn schedule_is_monotone() -> Outcome {
    check(runner().run(
        &(1e-6f64..1e-2, 1e-4f64..1.0, 1u32..50, 1u32..400),
        |(lr0, ratio, hold, span)| {
            let s = LrSchedule::new(lr0, lr0 * ratio, hold, hold + span).unwrap();
            let mut prev = f64::INFINITY;
            for epoch in 1..=hold + span + 5 {
                let lr = s.lr_at(epoch);
                prop_assert!(lr <= prev * (1.0 + 1e-12));
                prop_assert!(lr >= s.lr1 * (1.0 - 1e-12) && lr <= s.lr0 * (1.0 + 1e-12));
                prev = lr;
            }
            Ok(())
        },
    ))
}

pub fn first_adam_step_is_lr_times_sign() -> Outcome {
    check(runner().run(
        &(
            proptest::collection::vec(-10.0f64..10.0, 1..10),
            1e-5f64..1e-2,
        ),
        |(g, lr)| {
            let mut params = vec![0.0; g.len()];
            let mut adam = AdamState::new(&[g.len()]);
            adam.step(&mut [params.as_mut_slice()], &[g.as_slice()], lr)
                .unwrap();
            for (p, gi) in params.iter().zip(&g) {
                let want = -lr * gi / (gi.abs() + 1e-8);
                prop_assert!((p - want).abs() <= 1e-9 * lr);
            }
            let mut params2 = vec![0.0; g.len()];
            let mut rms = RmspropState::new(&[g.len()]);
            rms.step(&mut [params2.as_mut_slice()], &[g.as_slice()], lr)
                .unwrap();
            for (p, gi) in params2.iter().zip(&g) {
                let want = -lr * gi / ((0.1 * gi * gi).sqrt() + 1e-8);
                prop_assert!((p - want).abs() <= 1e-9 * lr.max(want.abs()));
            }
            Ok(())
        },
    ))
}

fn split(entries: &[(f64, f64, u64, u32)]) -> (Array2<f64>, Vec<EvalMeta>) {
    let e = Array2::from_shape_fn((entries.len(), 2), |(i, j)| {
        if j == 0 {
            entries[i].0
        } else {
            entries[i].1
        }
    });
    let m = entries
        .iter()
        .map(|&(_, _, p, c)| EvalMeta {
            person_id: p,
            camera_id: c,
        })
        .collect();
    (e, m)
}

fn labeled(counts: &[usize]) -> Dataset {
    let mut samples = Vec::new();
    let mut t = 0;
    for (p, &c) in counts.iter().enumerate() {
        for j in 0..c {
            samples.push(Sample {
                features: vec![t as f64],
                dataset_id: 0,
                camera_id: (j % 2) as u32,
                person_id: Some(p as u64),
                tracklet_id: t,
                time_start: 0.0,
                time_end: 1.0,
            });
            t += 1;
        }
    }
    Dataset::new(1, samples).unwrap()
}

pub type Suite = (&'static str, fn() -> Outcome);

/// Every invariant suite by name.
pub fn all() -> Vec<Suite> {
    vec![
        ("losses_translation_invariant", losses_translation_invariant),
        ("losses_rotation_invariant", losses_rotation_invariant),
        (
            "losses_invariant_to_row_permutation",
            losses_invariant_to_row_permutation,
        ),
        ("cmc_is_monotone_and_bounded", cmc_is_monotone_and_bounded),
        (
            "cmc_invariant_to_exact_isometries",
            cmc_invariant_to_exact_isometries,
        ),
        ("feature_file_round_trip", feature_file_round_trip),
        ("checkpoint_round_trip", checkpoint_round_trip),
        (
            "cooccurrence_is_symmetric_and_matches_overlap",
            cooccurrence_is_symmetric_and_matches_overlap,
        ),
        (
            "pk_batches_have_exact_multiplicities",
            pk_batches_have_exact_multiplicities,
        ),
        (
            "single_camera_filter_is_idempotent",
            single_camera_filter_is_idempotent,
        ),
        (
            "person_split_partitions_identities",
            person_split_partitions_identities,
        ),
        ("np_respects_bounds", np_respects_bounds),
        ("schedule_is_monotone", schedule_is_monotone),
        (
            "first_adam_step_is_lr_times_sign",
            first_adam_step_is_lr_times_sign,
        ),
    ]
}
