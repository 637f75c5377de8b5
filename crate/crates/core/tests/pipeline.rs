use image::{Rgb, RgbImage};
use prmnet::data::{generate_synthetic, CrowdClass, DatasetStats, ImageRecord, Point};
use prmnet::model::{ArchConfig, ModelState, Net, Normalization};
use prmnet::pipeline::{
    aggregate_counts, count_image, count_image_with, count_patch, infer_to_dir, RoutingPolicy,
};
use prmnet::prm::{Prm, Provenance, Quadrant};
use prmnet::tensor::Mode;
use prmnet::tiling::tile_image_sized;
use proptest::prelude::*;

fn tiny_model() -> ModelState {
    ModelState::init(
        &ArchConfig::tiny(),
        DatasetStats { cc_max: 20 },
        Normalization::default(),
        5,
    )
    .unwrap()
}

#[test]
fn forcing_ncp_discards_everything() {
    let state = tiny_model();
    let records = generate_synthetic(3, (40, 150), (0, 30), 9).unwrap();
    for r in &records {
        let res = count_image_with(r, &state, RoutingPolicy::Force(CrowdClass::Ncp)).unwrap();
        assert_eq!(res.image_count, 0.0);
        assert!(res
            .per_patch
            .iter()
            .all(|p| p.sub_counts.is_empty() && p.count == 0.0));
    }
}

#[test]
fn hcp_tile_count_is_the_sum_of_its_quadrants() {
    let state = tiny_model();
    let record = &generate_synthetic(1, (64, 64), (25, 25), 3).unwrap()[0];
    let tile = &tile_image_sized(record, 64)[0];
    let out = count_patch(tile, &state, RoutingPolicy::Force(CrowdClass::Hcp)).unwrap();
    let c = &out.count;
    assert_eq!(c.sub_counts.len(), 4);
    assert_eq!(c.count, c.sub_counts.iter().sum::<f64>().max(0.0));

    // Each quadrant evaluated on its own gives the same regression output.
    let prm = Prm::new(64, state.arch.lcp_rule).unwrap();
    for (q, &batched) in Quadrant::ALL.iter().zip(&c.sub_counts) {
        let rescaled = prm.apply(&tile.pixels, Provenance::Quadrant(*q)).unwrap();
        let mut net = Net::new(&state, Mode::Eval).unwrap();
        let mut prefix = net.stem(&[&tile.pixels]).unwrap();
        net.to_hook(&mut prefix).unwrap();
        let heads = net.continue_routes(&prefix, &[0], &[&rescaled]).unwrap();
        let alone = net.graph.value(heads.counts).data()[0];
        assert!(
            (alone - batched).abs() < 1e-9,
            "{q:?}: {alone} vs {batched}"
        );
    }
}

#[test]
fn route_policies_emit_the_planned_number_of_counts() {
    let state = tiny_model();
    let record = &generate_synthetic(1, (64, 64), (4, 4), 4).unwrap()[0];
    let tile = &tile_image_sized(record, 64)[0];
    for (class, n) in [
        (CrowdClass::Ncp, 0),
        (CrowdClass::Lcp, 1),
        (CrowdClass::Mcp, 1),
        (CrowdClass::Hcp, 4),
    ] {
        let out = count_patch(tile, &state, RoutingPolicy::Force(class)).unwrap();
        assert_eq!(out.count.sub_counts.len(), n, "{class}");
        assert_eq!(out.count.class, class);
    }
    let gt = count_patch(tile, &state, RoutingPolicy::GroundTruth).unwrap();
    assert_eq!(gt.count.class, state.stats.label(4));
}

#[test]
fn counting_is_deterministic() {
    let state = tiny_model();
    let record = &generate_synthetic(1, (100, 130), (10, 10), 6).unwrap()[0];
    let a = count_image(record, &state).unwrap();
    let b = count_image(record, &state).unwrap();
    assert_eq!(a, b);
    let (rows, cols) = prmnet::tiling::tile_grid(record.height(), record.width(), 64);
    assert_eq!(a.per_patch.len(), rows * cols);
}

#[test]
fn report_and_overlay_are_consistent() {
    let state = tiny_model();
    let record = &generate_synthetic(1, (90, 150), (12, 12), 8).unwrap()[0];
    let dir = tempfile::tempdir().unwrap();
    let report = infer_to_dir(record, &state, dir.path()).unwrap();
    let sum =
        aggregate_counts(&report.per_patch.iter().map(|p| p.count).collect::<Vec<_>>()).unwrap();
    assert_eq!(sum, report.image_count);
    let overlay = image::open(dir.path().join("overlay.png")).unwrap();
    assert_eq!(
        (overlay.width() as usize, overlay.height() as usize),
        (record.width(), record.height())
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("count.json")).unwrap())
            .unwrap();
    let (rows, cols) = prmnet::tiling::tile_grid(record.height(), record.width(), 64);
    assert_eq!(json["per_patch"].as_array().unwrap().len(), rows * cols);
}

#[test]
fn wrong_tile_size_is_rejected() {
    let state = tiny_model();
    let img = RgbImage::from_pixel(256, 256, Rgb([9, 9, 9]));
    let record = ImageRecord::new("big", img, vec![Point::new(3.0, 3.0)]).unwrap();
    let tile = &tile_image_sized(&record, 256)[0];
    assert!(count_patch(tile, &state, RoutingPolicy::Predicted).is_err());
}

proptest! {
    #[test]
    fn aggregation_is_order_independent(mut v in prop::collection::vec(0.0f64..1e3, 0..64), seed in any::<u64>()) {
        let a = aggregate_counts(&v).unwrap();
        let n = v.len();
        if n > 1 {
            v.rotate_left((seed % n as u64) as usize);
            v.reverse();
        }
        let b = aggregate_counts(&v).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        prop_assert!(a >= v.iter().cloned().fold(0.0, f64::max));
    }
}
