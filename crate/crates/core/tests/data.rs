use std::fs;

use proptest::prelude::*;

use usnet::data::{
    load_dataset, save_dataset, synth_generate, tile_image, tile_offsets, Image, InstanceLabelMap, Origin, PatchRecord,
    Split, SynthParams,
};
use usnet::Error;

proptest! {
    #[test]
    fn tile_grid_stays_inside(side in 1usize..2000, tile in 1usize..500, step in 1usize..500) {
        let offs = tile_offsets(side, tile, step);
        prop_assert_eq!(offs.is_empty(), tile > side);
        for w in offs.windows(2) {
            prop_assert_eq!(w[1] - w[0], step);
        }
        if let Some(&last) = offs.last() {
            prop_assert!(last + tile <= side);
            prop_assert!(last + step + tile > side);
        }
    }

    #[test]
    fn tiles_keep_their_pixels(seed in 0u64..50) {
        let params = SynthParams { seed, canvas: 120, min_count: 2, max_count: 4, ..SynthParams::default() };
        let scene = &synth_generate(&params, 2).unwrap().scenes[0];
        for tile in tile_image(scene, 64, 28).unwrap() {
            let (x0, y0) = (tile.origin.x, tile.origin.y);
            prop_assert_eq!(tile.image.pixel(5, 7), scene.image.pixel(x0 + 5, y0 + 7));
            prop_assert!(tile.boxes.len() <= tile.labels.instance_count());
            for b in &tile.boxes {
                prop_assert!(b.w > 0.0 && b.h > 0.0);
                prop_assert!(b.cx - b.w / 2.0 >= -1e-9 && b.cx + b.w / 2.0 <= 64.0 + 1e-9);
            }
        }
    }
}

#[test]
fn tile_counts_for_standard_sizes() {
    assert_eq!(tile_offsets(600, 400, 200).len(), 2);
    assert_eq!(tile_offsets(1000, 400, 200).len(), 4);
}

#[test]
fn synth_is_seeded() {
    let p = SynthParams {
        seed: 4,
        ..SynthParams::default()
    };
    let a = synth_generate(&p, 3).unwrap();
    let b = synth_generate(&p, 3).unwrap();
    assert_eq!(a.scenes, b.scenes);
    let c = synth_generate(&SynthParams { seed: 5, ..p }, 3).unwrap();
    assert_ne!(a.scenes[0].image, c.scenes[0].image);
    assert!(a.scenes.iter().all(|s| !s.boxes.is_empty()));
}

#[test]
fn dataset_round_trip_keeps_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let mut scenes = synth_generate(
        &SynthParams {
            seed: 8,
            ..SynthParams::default()
        },
        4,
    )
    .unwrap()
    .scenes;
    scenes[1].split = Split::Eval;
    scenes[3].split = Split::Train;
    save_dataset(tmp.path(), &scenes).unwrap();
    let back = load_dataset(tmp.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in back.iter().zip(&scenes) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.split, b.split);
    }
}

#[test]
fn unpaired_files_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = synth_generate(
        &SynthParams {
            seed: 9,
            ..SynthParams::default()
        },
        2,
    )
    .unwrap()
    .scenes;
    save_dataset(tmp.path(), &scenes).unwrap();
    let label = fs::read_dir(tmp.path().join("labels"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    fs::remove_file(label).unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(Error::UnpairedFile { .. })));
}

#[test]
fn mismatched_label_size_is_rejected() {
    let image = Image::filled(10, 10, [255, 255, 255]);
    let labels = InstanceLabelMap::empty(10, 9);
    assert!(PatchRecord::new(image, labels, Origin::default(), Split::Train).is_err());
}
