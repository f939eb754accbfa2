use super::*;
use crate::data::toy;
use crate::dffn::{BackboneConfig, DffnConfig};
use crate::imaging::ResolutionTag;
use crate::model::ModelConfig;
use crate::rrn::{EncoderConfig, RrnConfig};
use proptest::prelude::*;
use rand::Rng;

fn meta(pairs: &[(u32, u32)]) -> Vec<ImageMeta> {
    pairs.iter().map(|&(identity, camera)| ImageMeta { identity, camera }).collect()
}

/// Exhaustive reference: Rank-k by scanning the k nearest admissible
/// entries, AP by counting matches at each matching rank.
fn oracle(q: &FeatureMatrix, g: &FeatureMatrix, qm: &[ImageMeta], gm: &[ImageMeta], filter: bool) -> (Vec<f64>, f64) {
    let n = g.rows();
    let mut counts = vec![0usize; n];
    let (mut ap_sum, mut valid) = (0.0, 0usize);
    for i in 0..q.rows() {
        let mut list = Vec::new();
        for j in 0..n {
            if filter && gm[j].identity == qm[i].identity && gm[j].camera == qm[i].camera {
                continue;
            }
            let mut d = 0.0;
            for c in 0..q.cols() {
                d += (q.row(i)[c] - g.row(j)[c]) * (q.row(i)[c] - g.row(j)[c]);
            }
            list.push((d.sqrt(), j));
        }
        // selection sort keeps the oracle independent of the library sort
        for a in 0..list.len() {
            let mut best = a;
            for b in a + 1..list.len() {
                if list[b].0 < list[best].0 || (list[b].0 == list[best].0 && list[b].1 < list[best].1) {
                    best = b;
                }
            }
            list.swap(a, best);
        }
        let matches: Vec<bool> = list.iter().map(|&(_, j)| gm[j].identity == qm[i].identity).collect();
        let total = matches.iter().filter(|&&m| m).count();
        if total == 0 {
            continue;
        }
        valid += 1;
        for (k, count) in counts.iter_mut().enumerate() {
            if matches.iter().take(k + 1).any(|&m| m) {
                *count += 1;
            }
        }
        let mut ap = 0.0;
        for (r, &m) in matches.iter().enumerate() {
            if m {
                let upto = matches[..=r].iter().filter(|&&x| x).count();
                ap += upto as f64 / (r + 1) as f64;
            }
        }
        ap_sum += ap / total as f64;
    }
    let cmc = counts.iter().map(|&c| c as f64 / valid as f64).collect();
    (cmc, ap_sum / valid as f64)
}

fn random_instance(rng: &mut ChaCha8Rng, nq: usize, ng: usize, dim: usize, ids: u32) -> (FeatureMatrix, FeatureMatrix, Vec<ImageMeta>, Vec<ImageMeta>) {
    let mut m = |n: usize| FeatureMatrix::new(n, dim, (0..n * dim).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let (q, g) = (m(nq), m(ng));
    let mut meta = |n: usize| -> Vec<ImageMeta> {
        (0..n)
            .map(|_| ImageMeta {
                identity: rng.gen_range(0..ids),
                camera: rng.gen_range(0..2),
            })
            .collect()
    };
    let (qm, gm) = (meta(nq), meta(ng));
    (q, g, qm, gm)
}

#[test]
fn hand_computed_ranking() {
    let q = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 5.0]]).unwrap();
    let g = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0], vec![0.0, 4.0]]).unwrap();
    let qm = meta(&[(1, 0), (2, 0), (3, 0)]);
    let gm = meta(&[(2, 1), (1, 1), (2, 1), (3, 1)]);
    let r = rank(&q, &g, &qm, &gm, &RankOptions::default()).unwrap();
    // query 0 distances: 1, 2, sqrt10, 4
    assert_eq!(r.rankings[0].indices, vec![0, 1, 2, 3]);
    assert_eq!(r.rankings[0].distances[..2], [1.0, 2.0]);
    // query 1: sqrt13, 1, sqrt(4+16)=sqrt20, 5 (sqrt(9+16))
    assert_eq!(r.rankings[1].indices, vec![2, 0, 1, 3]);
    // query 2: sqrt26, 3, sqrt(9+16)=5, 1
    assert_eq!(r.rankings[2].indices, vec![3, 1, 2, 0]);
    // first hits: q0 at 2nd, q1 at 1st, q2 at 1st
    assert_eq!(r.cmc, vec![2.0 / 3.0, 1.0, 1.0, 1.0]);
    // APs: q0 1/2, q1 (1 + 2/2)/2 = 1, q2 1
    assert!((r.map - 2.5 / 3.0).abs() < 1e-15);
}

#[test]
fn ties_break_by_gallery_index() {
    let q = FeatureMatrix::from_rows(&[vec![0.0]]).unwrap();
    let g = FeatureMatrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0], vec![0.5]]).unwrap();
    let r = rank(&q, &g, &meta(&[(0, 0)]), &meta(&[(1, 1), (0, 1), (2, 1), (3, 1)]), &RankOptions::default()).unwrap();
    assert_eq!(r.rankings[0].indices, vec![3, 0, 1, 2]);
    assert_eq!(r.rank(1), 0.0);
    assert_eq!(r.rank(3), 1.0);
}

#[test]
fn same_camera_filter_drops_entries() {
    let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let m = meta(&[(0, 0), (1, 0)]);
    let off = RankOptions {
        filter_same_camera: false,
        ..RankOptions::default()
    };
    let r = rank(&f, &f, &m, &m, &off).unwrap();
    assert_eq!(r.rank(1), 1.0);
    assert_eq!(r.map, 1.0);
    assert!(matches!(rank(&f, &f, &m, &m, &RankOptions::default()), Err(Error::Argument(_))));
}

#[test]
fn matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        let (q, g, qm, gm) = random_instance(&mut rng, 20, 20, 5, 6);
        for filter in [false, true] {
            let opts = RankOptions {
                filter_same_camera: filter,
                workers: 1 + trial % 3,
                ..RankOptions::default()
            };
            let Ok(r) = rank(&q, &g, &qm, &gm, &opts) else { continue };
            let (cmc, map) = oracle(&q, &g, &qm, &gm, filter);
            assert_eq!(r.cmc, cmc);
            assert_eq!(r.map, map);
        }
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let q = FeatureMatrix::new(1, 2, vec![0.0; 2]).unwrap();
    let g = FeatureMatrix::new(1, 3, vec![0.0; 3]).unwrap();
    let m = meta(&[(0, 0)]);
    assert!(matches!(rank(&q, &g, &m, &m, &RankOptions::default()), Err(Error::Argument(_))));
}

#[test]
fn single_shot_is_deterministic_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (q, g, qm, gm) = random_instance(&mut rng, 15, 30, 4, 5);
    let opts = RankOptions {
        protocol: Protocol::SingleShot { trials: 10, seed: 3 },
        filter_same_camera: false,
        workers: 2,
    };
    let a = rank(&q, &g, &qm, &gm, &opts).unwrap();
    let b = rank(&q, &g, &qm, &gm, &RankOptions { workers: 1, ..opts }).unwrap();
    assert_eq!(a, b);
    assert!(a.cmc.windows(2).all(|w| w[0] <= w[1]));
    assert!((a.rank(5) - 1.0).abs() < 1e-12, "five identities, one entry each");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cmc_is_monotone_and_bounded(seed in any::<u64>(), nq in 1usize..12, ng in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, g, qm, gm) = random_instance(&mut rng, nq, ng, 3, 3);
        if let Ok(r) = rank(&q, &g, &qm, &gm, &RankOptions::default()) {
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
            prop_assert!(r.map > 0.0 && r.map <= 1.0);
        }
    }

    #[test]
    fn self_retrieval_is_perfect(seed in any::<u64>(), n in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, _, m, _) = random_instance(&mut rng, n, 1, 4, 4);
        let opts = RankOptions { filter_same_camera: false, ..RankOptions::default() };
        prop_assert_eq!(rank(&f, &f, &m, &m, &opts).unwrap().rank(1), 1.0);
    }

    #[test]
    fn rotation_preserves_rankings(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, g, qm, gm) = random_instance(&mut rng, 8, 10, 2, 3);
        let (s, c) = angle.sin_cos();
        let rot = |m: &FeatureMatrix| {
            let d = m.data().chunks(2).flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
            FeatureMatrix::new(m.rows(), 2, d).unwrap()
        };
        let opts = RankOptions { filter_same_camera: false, ..RankOptions::default() };
        let a = rank(&q, &g, &qm, &gm, &opts).unwrap();
        let b = rank(&rot(&q), &rot(&g), &qm, &gm, &opts).unwrap();
        for (ra, rb) in a.rankings.iter().zip(&b.rankings) {
            let near_tie = ra.distances.windows(2).any(|w| w[1] - w[0] < 1e-9);
            if !near_tie {
                prop_assert_eq!(&ra.indices, &rb.indices);
            }
        }
    }
}

#[test]
fn dump_round_trip_and_header() {
    let m = FeatureMatrix::new(2, 3, vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 1e300]).unwrap();
    let mut buf = Vec::new();
    m.write_to(&mut buf).unwrap();
    assert!(buf.starts_with(b"2 3 f64\n"));
    assert_eq!(buf.len(), 8 + 6 * 8);
    assert_eq!(FeatureMatrix::read_from(&buf[..]).unwrap(), m);
    assert!(FeatureMatrix::read_from(&buf[..buf.len() - 1]).is_err());
    assert!(FeatureMatrix::read_from(&b"2 3 f32\n"[..]).is_err());
}

fn tiny_model() -> (Mrjl, ParamStore) {
    let cfg = ModelConfig {
        height: 32,
        width: 16,
        rrn: RrnConfig::from_encoder(EncoderConfig::compact(2)),
        dffn: DffnConfig {
            backbone: BackboneConfig::Stub {
                widths: vec![4, 4],
                strides: vec![2, 1],
                kernel: 3,
            },
        },
        num_classes: 4,
    };
    Mrjl::new(cfg, 3).unwrap()
}

#[test]
fn unknown_mode_treats_roles_alike() {
    let (model, store) = tiny_model();
    let img = toy::person_image(1, 0, 32, 16, 5);
    let images = vec![img.clone().with_tag(ResolutionTag::HR), img.with_tag(ResolutionTag::from_rate(3).unwrap())];
    let g = extract_all(&model, &store, &images, Role::Gallery, Mode::Unknown, 1).unwrap();
    let q = extract_all(&model, &store, &images, Role::Query, Mode::Unknown, 2).unwrap();
    assert_eq!(g, q);
    assert_eq!(g.row(0), g.row(1));
    assert_eq!(g.cols(), JOINT_DIM);
    let known = extract_all(&model, &store, &images, Role::Gallery, Mode::Known, 1).unwrap();
    assert_ne!(known.row(0)[..FEATURE_DIM], g.row(0)[..FEATURE_DIM]);
    assert_eq!(known.row(0)[FEATURE_DIM..], g.row(0)[FEATURE_DIM..]);
    assert_eq!(known, extract_all(&model, &store, &images, Role::Gallery, Mode::Known, 1).unwrap());
    assert_eq!(g.select_columns(Subset::HrOnly.columns()).unwrap().cols(), FEATURE_DIM);
}

#[test]
fn sweep_reports_every_row() {
    let (model, store) = tiny_model();
    let data = EvalData::by_camera(toy::corpus(4, 4, 32, 16, 2), 1);
    let opts = EvalOptions {
        modes: Mode::ALL.to_vec(),
        subsets: Subset::ALL.to_vec(),
        rank: RankOptions::default(),
    };
    let report = evaluate(&model, &store, &data, &opts, "abc").unwrap();
    assert_eq!(report.rows.len(), 6);
    for m in Mode::ALL {
        for s in Subset::ALL {
            let r = report.row(m, s).unwrap();
            assert_eq!((r.n_query, r.n_gallery), (8, 8));
            assert!(r.rank1 <= r.rank5 && r.rank5 <= r.rank10);
        }
    }
    // both modes share the LR half of every feature
    let (k, u) = (report.row(Mode::Known, Subset::LrOnly).unwrap(), report.row(Mode::Unknown, Subset::LrOnly).unwrap());
    assert_eq!((k.rank1, k.rank5, k.map), (u.rank1, u.rank5, u.map));
    let text = report.to_text();
    for label in ["HR+LR", "known", "unknown", "Rank-1", "abc"] {
        assert!(text.contains(label), "{label}");
    }
    let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
    let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in ["mode", "subset", "rank1", "rank5", "rank10", "map", "n_query", "n_gallery", "checkpoint_id"] {
        assert!(v["rows"][0].get(key).is_some(), "{key}");
    }
}

#[test]
fn load_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    toy::write_split(root, Split::Gallery, &toy::corpus(2, 2, 32, 16, 1)).unwrap();
    toy::write_split(root, Split::Query, &toy::corpus(2, 2, 32, 16, 2)).unwrap();
    let d = EvalData::load(root, 32, 16, 2).unwrap();
    assert_eq!((d.gallery.len(), d.query.len()), (4, 4));
    let m = Manifest::load_or_scan(root).unwrap();
    m.write(&root.join(crate::data::MANIFEST_FILE)).unwrap();
    std::fs::remove_file(root.join("query/0_0_0.png")).unwrap();
    std::fs::remove_file(root.join("gallery/1_1_0.png")).unwrap();
    match EvalData::load(root, 32, 16, 1) {
        Err(Error::MissingFiles(p)) => assert_eq!(p.len(), 2),
        other => panic!("expected missing files, got {other:?}"),
    }
}
