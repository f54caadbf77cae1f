use super::*;
use crate::dataset::{KeyframeEntry, KeyframeManifest};
use crate::embed::{HashEmbedder, TableEmbedder};
use crate::geometry::{GridLayout, LayoutKind, RegionSet};
use crate::store::{EmbeddingStore, StoreRow};
use std::sync::Arc;

fn manifest(n: usize) -> KeyframeManifest {
    KeyframeManifest::from_entries(
        (0..n)
            .map(|i| KeyframeEntry {
                image_id: format!("img{i:04}"),
                width: 640,
                height: 360,
                uri: format!("img{i:04}.jpg"),
            })
            .collect(),
    )
    .unwrap()
}

fn annotation(id: &str, image_id: &str, bbox: Rect, skippable: bool) -> Annotation {
    Annotation {
        id: id.into(),
        image_id: image_id.into(),
        short_desc: format!("short {id}"),
        long_desc: format!("a longer description for {id}"),
        bbox,
        skippable,
        annotator_id: None,
    }
}

fn hash_engine(n: usize) -> SearchEngine {
    let m = manifest(n);
    let e = HashEmbedder::new(16);
    let mut stores = vec![EmbeddingStore::from_embedder(&m, RegionSet::Whole, &e).unwrap()];
    for kind in LayoutKind::ALL {
        for enlargement in [0.0, 0.1, 0.2] {
            stores.push(EmbeddingStore::from_embedder(&m, RegionSet::Grid { kind, enlargement }, &e).unwrap());
        }
    }
    SearchEngine::new(m, stores, Arc::new(e)).unwrap()
}

fn hash_annotations(n_images: usize, n: usize) -> Vec<Annotation> {
    (0..n)
        .map(|i| {
            let x = (i % 7) as f64 * 0.1;
            let y = (i % 5) as f64 * 0.12;
            annotation(
                &format!("a{i}"),
                &format!("img{:04}", (i * 3) % n_images),
                Rect::new(x, y, x + 0.25, y + 0.3).unwrap(),
                i % 2 == 0,
            )
        })
        .collect()
}

#[test]
fn metric_fixture() {
    let m = Metrics::from_ranks(&[1.0, 5.0, 200.0, 2000.0]).unwrap();
    assert_eq!(m.recall(), [25.0, 50.0, 50.0, 75.0]);
    assert_eq!(m.mnr, 551.5);
    let single = Metrics::from_ranks(&[7.0]).unwrap();
    assert_eq!(single.recall(), [0.0, 100.0, 100.0, 100.0]);
    assert_eq!(single.mnr, 7.0);
    assert!(Metrics::from_ranks(&[]).is_none());
}

#[test]
fn run_eval_ranks_planted_targets() {
    // Text i points at image i's whole vector, so every target ranks first.
    let m = manifest(6);
    let dim = 8;
    let mut e = TableEmbedder::new(dim);
    let mut rows = Vec::new();
    let mut anns = Vec::new();
    for (i, entry) in m.entries().iter().enumerate() {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        rows.push(StoreRow {
            image_id: entry.image_id.clone(),
            cell_id: "whole".into(),
            vector: v.clone(),
        });
        let a = annotation(&format!("a{i}"), &entry.image_id, Rect::new(0.1, 0.1, 0.3, 0.3).unwrap(), true);
        e.insert_text(a.long_desc.clone(), v);
        anns.push(a);
    }
    let store = EmbeddingStore::from_rows(RegionSet::Whole, dim, rows).unwrap();
    let engine = SearchEngine::new(m, vec![store], Arc::new(e)).unwrap();
    let cell = EvalCell::new(SearchModel::WholeImage, QueryLength::Long, Subset::All);
    let r = run_eval(&anns, &cell, &engine).unwrap();
    assert_eq!(r.metrics.r1, 100.0);
    assert_eq!(r.metrics.mnr, 1.0);
    assert_eq!(r.metrics.n, 6);
    assert_eq!(r.meta.store_ids, ["whole"]);
}

#[test]
fn identity_perturbation_with_seeds_matches_single_run() {
    let engine = hash_engine(40);
    let anns = hash_annotations(40, 12);
    let base = EvalCell::new(SearchModel::Static9, QueryLength::Short, Subset::All);
    let single = run_eval(&anns, &base, &engine).unwrap();
    let seeded = run_eval(&anns, &base.clone().with_perturbation(0.0, 0.0, (0..5).collect()), &engine).unwrap();
    assert_eq!(seeded.metrics.n, 5 * single.metrics.n);
    assert_eq!(seeded.metrics.recall(), single.metrics.recall());
    assert_eq!(seeded.metrics.mnr, single.metrics.mnr);
    for chunk in seeded.ranks.chunks(5) {
        assert!(chunk.iter().all(|r| r.rank == chunk[0].rank && r.bbox == chunk[0].bbox));
    }
}

#[test]
fn per_annotation_aggregation_averages_seeds() {
    let engine = hash_engine(40);
    let anns = hash_annotations(40, 6);
    let mut cell = EvalCell::new(SearchModel::Static5, QueryLength::Long, Subset::All)
        .with_perturbation(0.1, 10.0, vec![1, 2, 3]);
    let pooled = run_eval(&anns, &cell, &engine).unwrap();
    cell.aggregation = Aggregation::PerAnnotation;
    let averaged = run_eval(&anns, &cell, &engine).unwrap();
    assert_eq!(pooled.metrics.n, 18);
    assert_eq!(averaged.metrics.n, 6);
    assert!((pooled.metrics.mnr - averaged.metrics.mnr).abs() < 1e-9);
}

#[test]
fn eval_errors() {
    let engine = hash_engine(10);
    let anns = hash_annotations(10, 4);
    let cell = EvalCell::new(SearchModel::WholeImage, QueryLength::Long, Subset::All);
    let only_skippable: Vec<Annotation> = anns.iter().filter(|a| a.skippable).cloned().collect();
    assert!(matches!(
        run_eval(&only_skippable, &EvalCell { subset: Subset::NonSkippable, ..cell.clone() }, &engine),
        Err(EvalError::Empty(Subset::NonSkippable))
    ));
    let mut bad = anns.clone();
    bad[0].image_id = "nope".into();
    assert!(matches!(run_eval(&bad, &cell, &engine), Err(EvalError::UnknownImage { .. })));
    let perturbed = cell.clone().with_perturbation(0.1, 0.1, vec![]);
    assert!(matches!(run_eval(&anns, &perturbed, &engine), Err(EvalError::InvalidCell(_))));
    assert!(matches!(
        run_eval(&anns, &cell.clone().with_enlargement(0.1), &engine),
        Err(EvalError::InvalidCell(_))
    ));
}

fn overlap_sweep() -> SweepConfig {
    SweepConfig::from_toml(
        r#"
        models = ["static5", "static9"]
        enlargements = [0.0, 0.1, 0.2]
        sigma_pairs = [[0, 0], [0.1, 10], [0.25, 25], [0.5, 50]]
        seed_count = 5
        "#,
    )
    .unwrap()
}

#[test]
fn sweep_arity_and_shared_draws() {
    let engine = hash_engine(30);
    let anns = hash_annotations(30, 8);
    let config = overlap_sweep();
    let reports = sweep(&anns, &config, &engine, 2).unwrap();
    assert_eq!(reports.len(), 24);

    // Same (annotation, seed) gives the same box whatever the model or enlargement.
    for sigma in &config.sigma_pairs {
        #[allow(clippy::type_complexity)]
        let boxes: Vec<Vec<(String, Option<u64>, [u64; 4])>> = reports
            .iter()
            .filter(|r| (r.cell.sigma_shift, r.cell.sigma_area) == *sigma)
            .map(|r| {
                r.ranks
                    .iter()
                    .map(|k| (k.annotation_id.clone(), k.seed, k.bbox.as_array().map(f64::to_bits)))
                    .collect()
            })
            .collect();
        assert_eq!(boxes.len(), 6);
        assert!(boxes.iter().all(|b| *b == boxes[0]));
    }

    // The unperturbed column equals standalone runs.
    for r in reports.iter().filter(|r| !r.cell.is_perturbed()) {
        let alone = run_eval(&anns, &r.cell, &engine).unwrap();
        assert_eq!(alone, *r);
    }
}

#[test]
fn sweep_csv_is_deterministic() {
    let engine = hash_engine(20);
    let anns = hash_annotations(20, 6);
    let mut config = overlap_sweep();
    config.models.push(SearchModel::WholeImage);
    let csv = |jobs| {
        let mut out = Vec::new();
        write_sweep_csv(&mut out, &sweep(&anns, &config, &engine, jobs).unwrap()).unwrap();
        String::from_utf8(out).unwrap()
    };
    let a = csv(1);
    assert_eq!(a, csv(4));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], SWEEP_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 24 + 4);
    assert!(lines[1].starts_with("static5,long,all,any_overlap,0,0,0,5,"));
    assert!(a.contains("static9,long,all,any_overlap,0.2,0.5,0.5,5,"));
}

#[test]
fn config_hash_tracks_configuration() {
    let engine = hash_engine(10);
    let anns = hash_annotations(10, 4);
    let cell = EvalCell::new(SearchModel::Static5, QueryLength::Long, Subset::All);
    let a = run_eval(&anns, &cell, &engine).unwrap();
    let b = run_eval(&anns, &cell, &engine).unwrap();
    let c = run_eval(&anns, &cell.clone().with_selection(SelectionMode::ArgmaxIou), &engine).unwrap();
    assert_eq!(a.id(), b.id());
    assert_ne!(a.id(), c.id());
    assert_eq!(a.id().len(), 16);
}

#[test]
fn mean_iou_examples() {
    let g9 = GridLayout::build(LayoutKind::Static9);
    let cell = g9.cells[4].rect;
    let anns = vec![annotation("a", "img0000", cell, true)];
    let r = mean_iou_report(&anns, std::slice::from_ref(&g9)).unwrap();
    assert_eq!(r.grids[0].1, 1.0);
    assert!((r.whole_frame - 1.0 / 9.0).abs() < 1e-12);
    let small = vec![annotation("b", "img0000", Rect::new(0.0, 0.0, 0.38, 0.5).unwrap(), true)];
    assert!((mean_iou_report(&small, &[]).unwrap().whole_frame - 0.19).abs() < 1e-12);
    assert!(mean_iou_report(&[], &[g9]).is_none());
}

fn unit_at(dim: usize, cos: f32) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[0] = cos;
    v[1] = (1.0 - cos * cos).sqrt();
    v
}

#[test]
fn similarity_delta_hand_fixture() {
    // Three targets with set whole/part cosines against a shared query direction.
    let dim = 4;
    let m = manifest(3);
    let whole_cos = [0.2f32, 0.4, 0.3];
    let part_cos = [0.5f32, 0.3, 0.6];
    let grid = GridLayout::build(LayoutKind::Static5);
    let bbox = Rect::new(0.0, 0.0, 0.4, 0.4).unwrap();
    let mut whole_rows = Vec::new();
    let mut grid_rows = Vec::new();
    let mut anns = Vec::new();
    let mut e = TableEmbedder::new(dim);
    for (i, entry) in m.entries().iter().enumerate() {
        whole_rows.push(StoreRow {
            image_id: entry.image_id.clone(),
            cell_id: "whole".into(),
            vector: unit_at(dim, whole_cos[i]),
        });
        for c in &grid.cells {
            let cos = if c.id == "top-left" { part_cos[i] } else { 0.0 };
            grid_rows.push(StoreRow {
                image_id: entry.image_id.clone(),
                cell_id: c.id.clone(),
                vector: unit_at(dim, cos),
            });
        }
        let a = annotation(&format!("a{i}"), &entry.image_id, bbox, true);
        e.insert_text(a.long_desc.clone(), unit_at(dim, 1.0));
        anns.push(a);
    }
    let sw = EmbeddingStore::from_rows(RegionSet::Whole, dim, whole_rows).unwrap();
    let sg = EmbeddingStore::from_rows(
        RegionSet::Grid {
            kind: LayoutKind::Static5,
            enlargement: 0.0,
        },
        dim,
        grid_rows,
    )
    .unwrap();
    let r = similarity_delta_analysis(&anns, QueryLength::Long, &sw, &sg, &grid, &e).unwrap();
    assert!((r.mean_s_whole - 0.3).abs() < 1e-6);
    assert!((r.mean_s_part - 1.4 / 3.0).abs() < 1e-6);
    assert_eq!(r.rank_whole, [3, 1, 2]);
    // img0001's cell ties img0002's whole vector at 0.3 and wins on id.
    assert_eq!(r.rank_part, [1, 1, 1]);
    assert!(r.pearson_ds_dr.unwrap() < 0.0);
    assert!(r.wilcoxon.is_some());
}

#[test]
fn similarity_delta_identical_stores_is_degenerate() {
    let m = manifest(5);
    let e = HashEmbedder::new(8);
    let sw = EmbeddingStore::from_embedder(&m, RegionSet::Whole, &e).unwrap();
    // A one-cell "grid" whose only cell is the whole frame reuses the whole vectors.
    let grid = GridLayout::build(LayoutKind::Static5);
    let rows = m.entries().iter().flat_map(|entry| {
        let v = sw.row(&entry.image_id, "whole").unwrap().to_vec();
        grid.cells.iter().map(move |c| StoreRow {
            image_id: entry.image_id.clone(),
            cell_id: c.id.clone(),
            vector: v.clone(),
        })
    });
    let sg = EmbeddingStore::from_rows(
        RegionSet::Grid {
            kind: LayoutKind::Static5,
            enlargement: 0.0,
        },
        8,
        rows.collect::<Vec<_>>(),
    )
    .unwrap();
    let anns = hash_annotations(5, 5);
    let r = similarity_delta_analysis(&anns, QueryLength::Short, &sw, &sg, &grid, &e).unwrap();
    assert_eq!(r.s_whole, r.s_part);
    assert_eq!(r.rank_whole, r.rank_part);
    assert!(r.wilcoxon.is_none());
    assert_eq!(r.wilcoxon_error.as_deref(), Some("all differences zero"));
}

#[test]
fn box_free_models_record_the_drawn_box() {
    let engine = hash_engine(20);
    let anns = hash_annotations(20, 5);
    let run = |model| {
        let cell = EvalCell::new(model, QueryLength::Short, Subset::All).with_perturbation(0.2, 20.0, vec![1, 2]);
        run_eval(&anns, &cell, &engine).unwrap().ranks
    };
    let whole = run(SearchModel::WholeImage);
    let grid = run(SearchModel::Static9);
    assert!(whole.iter().zip(&grid).all(|(a, b)| a.bbox == b.bbox && a.seed == b.seed));
    assert!(whole.iter().zip(&anns).any(|(r, a)| r.bbox != a.bbox));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn recall_is_monotone_and_mnr_order_free(ranks in proptest::collection::vec(1usize..=1000, 1..60), shift in 0usize..60) {
            let values: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
            let m = Metrics::from_ranks(&values).unwrap();
            let k = m.recall();
            prop_assert!(k.windows(2).all(|w| w[0] <= w[1]));
            // Every rank is at most the gallery size of 1000.
            prop_assert_eq!(m.r1000, 100.0);
            let mut rotated = values.clone();
            rotated.rotate_left(shift % values.len());
            let r = Metrics::from_ranks(&rotated).unwrap();
            prop_assert!((r.mnr - m.mnr).abs() <= 1e-9 * m.mnr);
            prop_assert_eq!(r.recall(), k);
        }
    }
}
