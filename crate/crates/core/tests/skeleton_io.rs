mod common;

use std::panic;

use common::{body, sequence};
use eppnet::rng::Rng;
use eppnet::skeleton::{
    load_skeleton_file, motion_energy, normalize_sequence, parse_skeleton, select_primary_bodies, serialize_skeleton,
    to_pose_tensor, BodyFrame, Joint3D, SampleId, SkeletonSequence,
};
use eppnet::Error;
use proptest::prelude::*;

fn joint_strategy() -> impl Strategy<Value = Joint3D> {
    let f = || prop_oneof![-1e4f32..1e4f32, Just(0.0f32), Just(-0.0f32), (-1e-30f32..1e-30f32)];
    (prop::collection::vec(f(), 11), any::<i32>()).prop_map(|(v, tracking_state)| Joint3D {
        x: v[0],
        y: v[1],
        z: v[2],
        depth_x: v[3],
        depth_y: v[4],
        color_x: v[5],
        color_y: v[6],
        orientation: [v[7], v[8], v[9], v[10]],
        tracking_state,
    })
}

fn sequence_strategy() -> impl Strategy<Value = SkeletonSequence> {
    (1usize..5).prop_flat_map(|joints| {
        let body =
            (any::<u64>(), prop::collection::vec(-1e3f32..1e3f32, 9), prop::collection::vec(joint_strategy(), joints))
                .prop_map(|(body_id, meta, joints)| BodyFrame { body_id, meta: meta.try_into().unwrap(), joints });
        prop::collection::vec(prop::collection::vec(body, 0..3), 0..5).prop_map(sequence)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialize_then_parse_is_identity(seq in sequence_strategy()) {
        let text = serialize_skeleton(&seq);
        let back = parse_skeleton(text.as_bytes(), None).unwrap();
        prop_assert_eq!(&back, &seq);
        // the canonical form is a fixed point
        prop_assert_eq!(serialize_skeleton(&back), text);
    }

    #[test]
    fn normalization_is_idempotent(seq in sequence_strategy()) {
        let Ok(once) = normalize_sequence(&seq) else {
            prop_assert!(seq.frames.iter().all(|f| f.is_empty()));
            return Ok(());
        };
        let twice = normalize_sequence(&once).unwrap();
        let bits = |s: &SkeletonSequence| -> Vec<u32> {
            s.frames.iter().flatten().flat_map(|b| &b.joints).flat_map(|j| [j.x, j.y, j.z]).map(f32::to_bits).collect()
        };
        prop_assert_eq!(bits(&once), bits(&twice));
    }

    #[test]
    fn pose_tensor_only_holds_input_values(seq in sequence_strategy(), frames in 1usize..8, bodies in 1usize..3) {
        let pose = to_pose_tensor(&seq, frames, bodies);
        prop_assert_eq!(pose.data.shape(), &[3, frames, seq.joint_count, bodies]);
        let present: Vec<u32> = seq
            .frames
            .iter()
            .flatten()
            .flat_map(|b| &b.joints)
            .flat_map(|j| [j.x, j.y, j.z])
            .map(f32::to_bits)
            .collect();
        for &v in pose.data.data() {
            prop_assert!(v == 0.0 || present.contains(&v.to_bits()));
        }
    }
}

fn zero_body(lines: usize) -> String {
    let mut s = String::from("72057594037931101 0 1 1 1 1 0 0.02 0.3 2\n");
    s.push_str(&format!("{lines}\n"));
    for _ in 0..lines {
        s.push_str("0 0 0 0 0 0 0 0 0 0 0 2\n");
    }
    s
}

#[test]
fn hand_built_fixtures() {
    let s = parse_skeleton(b"0\n", None).unwrap();
    assert!(s.frames.is_empty());

    let text = format!("1\n1\n{}", zero_body(25));
    let s = parse_skeleton(text.as_bytes(), Some(25)).unwrap();
    assert_eq!((s.frames.len(), s.frames[0].len(), s.joint_count), (1, 1, 25));
    assert!(s.frames[0][0].joints.iter().all(|j| j.x == 0.0 && j.y == 0.0 && j.z == 0.0));
}

#[test]
fn grammar_error_fixtures() {
    let two_declared_one_present = format!("2\n1\n{}", zero_body(25));
    assert!(matches!(parse_skeleton(two_declared_one_present.as_bytes(), None), Err(Error::TruncatedFile { .. })));

    let bad_number =
        format!("1\n1\n{}", zero_body(25)).replacen("0 0 0 0 0 0 0 0 0 0 0 2", "0 0 1.2.3 0 0 0 0 0 0 0 0 2", 1);
    assert!(matches!(parse_skeleton(bad_number.as_bytes(), None), Err(Error::MalformedNumber { .. })));

    let nan = format!("1\n1\n{}", zero_body(25)).replacen("0 0 0 0 0 0 0 0 0 0 0 2", "0 nan 0 0 0 0 0 0 0 0 0 2", 1);
    assert!(matches!(parse_skeleton(nan.as_bytes(), None), Err(Error::NonFiniteValue { .. })));

    let short_body = format!("1\n1\n{}", zero_body(24));
    assert!(matches!(
        parse_skeleton(short_body.as_bytes(), Some(25)),
        Err(Error::JointCountMismatch { expected: 25, found: 24 })
    ));
}

#[test]
fn truncated_files_fail_cleanly() {
    let mut rng = Rng::new(5);
    let seq = sequence(vec![
        vec![body(1, &[[0.5, 1.25, 2.0], [3.0, -1.0, 0.0]])],
        vec![body(1, &[[0.75, 1.0, 2.5], [2.0, -1.5, 0.25]]), body(9, &[[1.0; 3], [2.0; 3]])],
    ]);
    let text = serialize_skeleton(&seq);
    // cutting anywhere before the final token starts leaves a declared count unmet
    let last_token = text.trim_end().rfind(char::is_whitespace).unwrap() + 1;
    let dir = tempfile::tempdir().unwrap();
    for k in 0..20 {
        let cut = rng.below(last_token as u64) as usize;
        let path = dir.path().join(format!("S001C001P001R001A{:03}.skeleton", k + 1));
        std::fs::write(&path, &text.as_bytes()[..cut]).unwrap();
        let outcome = panic::catch_unwind(|| load_skeleton_file(&path, None));
        let result = outcome.expect("parser panicked");
        assert!(
            matches!(result, Err(Error::TruncatedFile { .. } | Error::MalformedNumber { .. })),
            "cut at {cut}: {result:?}"
        );
    }
}

#[test]
fn sample_ids_follow_naming_convention() {
    let id: SampleId = "S017C003P020R002A060".parse().unwrap();
    assert_eq!((id.setup, id.camera, id.performer, id.replication, id.action), (17, 3, 20, 2, 60));
    assert_eq!(id.action_class(), Some(59));
    assert!("S017C003P020R002".parse::<SampleId>().is_err());
    assert!("X017C003P020R002A060".parse::<SampleId>().is_err());
}

fn energy_oracle(seq: &SkeletonSequence, id: u64) -> f64 {
    let mut e = 0.0;
    for t in 1..seq.frames.len() {
        let (Some(a), Some(b)) =
            (seq.frames[t].iter().find(|b| b.body_id == id), seq.frames[t - 1].iter().find(|b| b.body_id == id))
        else {
            continue;
        };
        for (ja, jb) in a.joints.iter().zip(&b.joints) {
            for (p, q) in [(ja.x, jb.x), (ja.y, jb.y), (ja.z, jb.z)] {
                e += (p as f64 - q as f64).powi(2);
            }
        }
    }
    e
}

#[test]
fn static_body_is_dropped() {
    let frames = (0..3)
        .map(|t| {
            let t = t as f32;
            vec![body(5, &[[0.0, 0.0, 0.0]]), body(7, &[[t, 0.0, 0.0]]), body(3, &[[0.0, 2.0 * t, 0.0]])]
        })
        .collect();
    let seq = sequence(frames);
    let kept = select_primary_bodies(&seq, 2);
    let ids: Vec<u64> = kept.frames[0].iter().map(|b| b.body_id).collect();
    assert_eq!(ids, vec![3, 7]);

    let single = sequence(vec![vec![body(1, &[[0.0; 3]])]]);
    assert_eq!(select_primary_bodies(&single, 2), single);
}

#[test]
fn equal_energy_prefers_smaller_id() {
    let frames = (0..3).map(|t| vec![body(8, &[[t as f32, 0.0, 0.0]]), body(2, &[[0.0, t as f32, 0.0]])]).collect();
    let kept = select_primary_bodies(&sequence(frames), 2);
    assert_eq!(kept.frames[1].iter().map(|b| b.body_id).collect::<Vec<_>>(), vec![2, 8]);
}

#[test]
fn kept_bodies_maximise_energy_by_brute_force() {
    let mut rng = Rng::new(17);
    for _ in 0..40 {
        let n_bodies = 1 + rng.below(4) as u64;
        let frames: Vec<Vec<BodyFrame>> = (0..4)
            .map(|_| {
                let mut bodies = Vec::new();
                for id in 0..n_bodies {
                    if rng.below(5) > 0 {
                        let joints: Vec<[f32; 3]> =
                            (0..2).map(|_| [0, 1, 2].map(|_| rng.below(5) as f32 * 0.5)).collect();
                        bodies.push(body(id * 10, &joints));
                    }
                }
                bodies
            })
            .collect();
        let seq = sequence(frames);
        let energy = motion_energy(&seq);
        for (&id, &e) in &energy {
            assert_eq!(e, energy_oracle(&seq, id));
        }
        let max_bodies = 1 + rng.below(3) as usize;
        let kept = select_primary_bodies(&seq, max_bodies);
        let kept_ids: std::collections::BTreeSet<u64> = kept.frames.iter().flatten().map(|b| b.body_id).collect();
        assert!(kept_ids.len() <= max_bodies);
        assert!(kept.frames.iter().all(|f| f.len() <= max_bodies));
        let kept_energy: f64 = kept_ids.iter().map(|id| energy[id]).sum();
        // every subset of the same size has no more energy
        let ids: Vec<u64> = energy.keys().copied().collect();
        let size = max_bodies.min(ids.len());
        for mask in 0u32..(1 << ids.len()) {
            if mask.count_ones() as usize == size {
                let e: f64 =
                    ids.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, id)| energy[id]).sum();
                assert!(kept_energy >= e);
            }
        }
    }
}

#[test]
fn normalization_matches_loop_oracle() {
    let mut rng = Rng::new(2);
    let frames: Vec<Vec<BodyFrame>> = (0..2)
        .map(|_| {
            (0..2)
                .map(|id| {
                    let joints: Vec<[f32; 3]> =
                        (0..4).map(|_| [0, 1, 2].map(|_| rng.uniform(-2.0, 2.0) as f32)).collect();
                    body(id, &joints)
                })
                .collect()
        })
        .collect();
    let seq = sequence(frames);
    let out = normalize_sequence(&seq).unwrap();
    let anchor = &seq.frames[0][0].joints[0];
    let (ax, ay, az) = (anchor.x, anchor.y, anchor.z);
    for (fo, fi) in out.frames.iter().zip(&seq.frames) {
        for (bo, bi) in fo.iter().zip(fi) {
            for (jo, ji) in bo.joints.iter().zip(&bi.joints) {
                assert_eq!((jo.x, jo.y, jo.z), (ji.x - ax, ji.y - ay, ji.z - az));
                assert_eq!((jo.depth_x, jo.color_y, jo.orientation), (ji.depth_x, ji.color_y, ji.orientation));
            }
        }
    }

    let shifted = sequence(vec![vec![body(0, &[[0.3, -0.1, 2.0], [1.3, 0.9, 3.0]])]]);
    let n = normalize_sequence(&shifted).unwrap();
    assert_eq!(n.frames[0][0].joints[0].x, 0.0);
    assert!(matches!(normalize_sequence(&sequence(vec![vec![], vec![]])), Err(Error::EmptySequence)));
}

#[test]
fn resampling_rules() {
    let frames: Vec<Vec<BodyFrame>> = (0..10).map(|t| vec![body(1, &[[t as f32, 0.0, 0.0]])]).collect();
    let pose = to_pose_tensor(&sequence(frames.clone()), 5, 1);
    let picked: Vec<f32> = (0..5).map(|t| pose.data.get(&[0, t, 0, 0])).collect();
    assert_eq!(picked, vec![1.0, 3.0, 5.0, 7.0, 9.0]);

    let same = to_pose_tensor(&sequence(frames), 10, 1);
    assert_eq!(
        (0..10).map(|t| same.data.get(&[0, t, 0, 0])).collect::<Vec<_>>(),
        (0..10).map(|t| t as f32).collect::<Vec<_>>()
    );

    let one = to_pose_tensor(&sequence(vec![vec![body(1, &[[2.0, 3.0, 4.0]])]]), 4, 2);
    assert_eq!((0..3).map(|c| one.data.get(&[c, 0, 0, 0])).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
    assert!((1..4).all(|t| (0..3).all(|c| one.data.get(&[c, t, 0, 0]) == 0.0)));
    assert!((0..3).all(|c| one.data.get(&[c, 0, 0, 1]) == 0.0));
}
