use mako::data::{generate_meta_dataset, generate_meta_dataset_with, MetaDataset, NormStats, Split, TaskSampling};
use mako::systems::{PhysicalConstants, SystemKind};
use proptest::prelude::*;

fn small(kind: SystemKind, seed: u64) -> MetaDataset {
    let len = match kind {
        SystemKind::Cartpole => 50,
        SystemKind::Grn => 40,
        SystemKind::ReactorSeparator => 25,
    };
    generate_meta_dataset(PhysicalConstants::builtin(), kind, 3, len * 6, len, seed).unwrap()
}

fn bits(meta: &MetaDataset) -> Vec<u64> {
    let mut out = Vec::new();
    for s in &meta.subdatasets {
        out.extend(s.params.uncertain.iter().map(|v| v.to_bits()));
        for ep in &s.episodes {
            out.extend(ep.states.iter().chain(&ep.inputs).map(|v| v.to_bits()));
            out.extend(ep.segment.iter().map(|&v| v as u64));
        }
    }
    out
}

#[test]
fn dataset_round_trip_is_bitwise() {
    for kind in SystemKind::ALL {
        for meta in [small(kind, 3), small(kind, 3).normalized()] {
            let bytes = meta.to_bytes().unwrap();
            let back = MetaDataset::from_bytes(&bytes).unwrap();
            assert_eq!(bits(&back), bits(&meta));
            assert_eq!(back.split, meta.split);
            assert_eq!(back.norm, meta.norm);
            assert_eq!(back.normalized, meta.normalized);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("meta.bin");
    let meta = small(SystemKind::Grn, 8);
    meta.save(&path).unwrap();
    let back = MetaDataset::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), meta.to_bytes().unwrap());
    assert_eq!(back.manifest(), meta.manifest());
    assert!(MetaDataset::load(dir.path().join("missing.bin")).is_err());
}

#[test]
fn damaged_files_are_rejected() {
    let bytes = small(SystemKind::Cartpole, 1).to_bytes().unwrap();
    for cut in (0..bytes.len()).step_by(37).chain([bytes.len() - 1]) {
        assert!(MetaDataset::from_bytes(&bytes[..cut]).is_err(), "prefix {cut} accepted");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(MetaDataset::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(MetaDataset::from_bytes(&magic).is_err());
}

#[test]
fn pooled_normalization_standardizes_training_split() {
    for kind in SystemKind::ALL {
        let meta = small(kind, 5).normalized();
        let n = meta.state_dim();
        let rows: Vec<&[f64]> = meta
            .episodes_in(Split::Train)
            .flat_map(|(_, _, ep)| ep.states.chunks_exact(n))
            .collect();
        let count = rows.len() as f64;
        for d in 0..n {
            let mean = rows.iter().map(|r| r[d]).sum::<f64>() / count;
            let var = rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / count;
            assert!(mean.abs() < 1e-8, "{kind} dim {d} mean {mean}");
            // dimensions that never move keep a floored scale
            if var > 0.0 {
                assert!((var.sqrt() - 1.0).abs() < 1e-6, "{kind} dim {d} std {}", var.sqrt());
            }
        }
    }
}

#[test]
fn stratified_tasks_spread_over_the_range() {
    let meta = generate_meta_dataset_with(
        PhysicalConstants::builtin(),
        SystemKind::Cartpole,
        4,
        100,
        50,
        2,
        TaskSampling::Stratified,
    )
    .unwrap();
    let mut strata: Vec<usize> = meta
        .subdatasets
        .iter()
        .map(|s| (((s.params.uncertain[0] - 0.1) / 0.9 * 4.0) as usize).min(3))
        .collect();
    strata.sort_unstable();
    assert_eq!(strata, vec![0, 1, 2, 3]);
}

proptest! {
    #[test]
    fn normalization_inverts(
        mean in prop::collection::vec(-10.0f64..10.0, 3),
        std in prop::collection::vec(0.01f64..10.0, 3),
        x in prop::collection::vec(-100.0f64..100.0, 3),
    ) {
        let norm = NormStats {
            state_mean: mean.clone(),
            state_std: std.clone(),
            input_mean: mean,
            input_std: std,
        };
        let back = norm.denormalize_state(&norm.normalize_state(&x));
        let back_u = norm.denormalize_input(&norm.normalize_input(&x));
        for i in 0..3 {
            prop_assert!((back[i] - x[i]).abs() <= 1e-12 * (1.0 + x[i].abs()));
            prop_assert!((back_u[i] - x[i]).abs() <= 1e-12 * (1.0 + x[i].abs()));
        }
    }
}
