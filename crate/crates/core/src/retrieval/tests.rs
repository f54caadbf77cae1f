use super::*;
use crate::dataset::KeyframeEntry;
use crate::embed::HashEmbedder;
use crate::geometry::RegionSet;
use crate::store::StoreRow;
use std::sync::Arc;

fn unit2(x: f32) -> Vec<f32> {
    vec![x, (1.0 - x * x).sqrt(), 0.0]
}

fn whole_store(rows: &[(&str, Vec<f32>)]) -> EmbeddingStore {
    EmbeddingStore::from_rows(
        RegionSet::Whole,
        3,
        rows.iter().map(|(id, v)| StoreRow {
            image_id: id.to_string(),
            cell_id: "whole".into(),
            vector: v.clone(),
        }),
    )
    .unwrap()
}

fn manifest(ids: &[&str]) -> KeyframeManifest {
    KeyframeManifest::from_entries(
        ids.iter()
            .map(|id| KeyframeEntry {
                image_id: id.to_string(),
                width: 1280,
                height: 720,
                uri: format!("{id}.jpg"),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn whole_image_orders_by_cosine() {
    let store = whole_store(&[("1", unit2(0.2)), ("2", unit2(0.9)), ("3", unit2(0.5))]);
    let r = score_whole(&store, &[1.0, 0.0, 0.0]).unwrap();
    assert_eq!(r.image_ids().collect::<Vec<_>>(), ["2", "3", "1"]);
    assert_eq!(r.rank_of("1"), Some(3));
    assert!((r.score_of("2").unwrap() - 0.9).abs() < 1e-6);
}

#[test]
fn query_is_normalized_before_scoring() {
    let store = whole_store(&[("a", unit2(0.2)), ("b", unit2(0.9))]);
    let r = score_whole(&store, &[4.0, 0.0, 0.0]).unwrap();
    assert!((r.score_of("b").unwrap() - 0.9).abs() < 1e-6);
    assert!(matches!(score_whole(&store, &[0.0; 3]), Err(RetrievalError::BadQuery)));
    assert!(matches!(score_whole(&store, &[1.0; 2]), Err(RetrievalError::Dim { .. })));
}

#[test]
fn ties_break_by_image_id() {
    let v = unit2(0.5);
    let store = whole_store(&[("c", v.clone()), ("a", v.clone()), ("b", v)]);
    let r = score_whole(&store, &[1.0, 0.0, 0.0]).unwrap();
    assert_eq!(r.image_ids().collect::<Vec<_>>(), ["a", "b", "c"]);
}

fn grid_store(kind: LayoutKind, per_image: &[(&str, Vec<Vec<f32>>)]) -> EmbeddingStore {
    let grid = GridLayout::build(kind);
    let rows = per_image.iter().flat_map(|(id, vs)| {
        grid.cells.iter().zip(vs).map(move |(c, v)| StoreRow {
            image_id: id.to_string(),
            cell_id: c.id.clone(),
            vector: v.clone(),
        })
    });
    EmbeddingStore::from_rows(
        RegionSet::Grid {
            kind,
            enlargement: 0.0,
        },
        3,
        rows,
    )
    .unwrap()
}

#[test]
fn grid_score_is_max_over_selected_cells_only() {
    // Cell order: top-left, top-right, bottom-left, bottom-right, center.
    let a = vec![unit2(0.1), unit2(0.3), unit2(0.95), unit2(0.1), unit2(0.2)];
    let b = vec![unit2(0.6), unit2(0.1), unit2(0.1), unit2(0.1), unit2(0.1)];
    let store = grid_store(LayoutKind::Static5, &[("a", a), ("b", b)]);
    let grid = GridLayout::build(LayoutKind::Static5);
    let q = [1.0, 0.0, 0.0];
    let top_left = Rect::new(0.05, 0.05, 0.2, 0.2).unwrap();
    let r = score_grid(&store, &grid, &top_left, SelectionMode::AnyOverlap, &q).unwrap();
    assert_eq!(r.image_ids().collect::<Vec<_>>(), ["b", "a"]);
    assert_eq!(r.entries()[0].matched_cell.as_deref(), Some("top-left"));

    let lower = Rect::new(0.1, 0.6, 0.3, 0.9).unwrap();
    let r = score_grid(&store, &grid, &lower, SelectionMode::AnyOverlap, &q).unwrap();
    assert_eq!(r.rank_of("a"), Some(1));
    assert_eq!(r.entries()[0].matched_cell.as_deref(), Some("bottom-left"));
}

#[test]
fn grid_store_must_match_layout() {
    let store = grid_store(LayoutKind::Static5, &[("a", vec![unit2(0.1); 5])]);
    let grid = GridLayout::build(LayoutKind::Static9);
    let err = score_grid(&store, &grid, &Rect::FULL_FRAME, SelectionMode::AnyOverlap, &[1.0, 0.0, 0.0]);
    assert!(matches!(err, Err(RetrievalError::StoreMismatch { .. })));
}

#[test]
fn target_substitution_ranks_against_whole_vectors() {
    let whole = whole_store(&[("t", unit2(0.1)), ("x", unit2(0.6)), ("y", unit2(0.4))]);
    let mut t_cells = vec![unit2(0.0); 5];
    t_cells[0] = unit2(0.5);
    let z = vec![unit2(0.0); 5];
    let grid_s = grid_store(LayoutKind::Static5, &[("t", t_cells), ("x", z.clone()), ("y", z)]);
    let grid = GridLayout::build(LayoutKind::Static5);
    let bbox = Rect::new(0.0, 0.0, 0.4, 0.4).unwrap();
    let r = score_target_substitution(&whole, &grid_s, &grid, &bbox, "t", &[1.0, 0.0, 0.0], TargetEmbedding::GridCell)
        .unwrap();
    assert_eq!(r.rank_of("t"), Some(2));
    assert_eq!(r.image_ids().collect::<Vec<_>>(), ["x", "t", "y"]);
    assert!(matches!(
        score_target_substitution(&whole, &grid_s, &grid, &bbox, "nope", &[1.0, 0.0, 0.0], TargetEmbedding::GridCell),
        Err(RetrievalError::MissingTarget(_))
    ));
}

#[test]
fn theoretical_full_frame_matches_whole_store() {
    let m = manifest(&["a", "b", "c", "d"]);
    let e = HashEmbedder::new(16);
    let store = EmbeddingStore::from_embedder(&m, RegionSet::Whole, &e).unwrap();
    let q = e.embed_text("query").unwrap();
    let th = score_theoretical(&m, &Rect::FULL_FRAME, &q, &e).unwrap();
    let wh = score_whole(&store, &q).unwrap();
    assert_eq!(th, wh);
}

#[test]
fn suffix_follows_argmax_cell() {
    let p = SuffixPhrases::default();
    let tl = Rect::new(0.0, 0.0, 0.2, 0.2).unwrap();
    let c = Rect::new(0.4, 0.4, 0.6, 0.6).unwrap();
    let br = Rect::new(0.8, 0.8, 1.0, 1.0).unwrap();
    assert_eq!(append_suffix("a fish", &tl, SuffixLength::Short, &p), "a fish in the upper left");
    assert_eq!(
        append_suffix("a fish", &tl, SuffixLength::Long, &p),
        "a fish in the upper left part of the image"
    );
    assert_eq!(append_suffix("a fish", &c, SuffixLength::Short, &p), "a fish in the center");
    assert_eq!(append_suffix("a fish", &c, SuffixLength::Long, &p), "a fish in the center of the image");
    assert_eq!(append_suffix("a fish", &br, SuffixLength::Short, &p), "a fish in the lower right");
}

#[test]
fn model_names_round_trip() {
    for m in SearchModel::ALL {
        assert_eq!(m.name().parse::<SearchModel>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!("static7".parse::<SearchModel>().is_err());
}

fn engine() -> (SearchEngine, HashEmbedder) {
    let m = manifest(&["a", "b", "c"]);
    let e = HashEmbedder::new(16);
    let stores = vec![
        EmbeddingStore::from_embedder(&m, RegionSet::Whole, &e).unwrap(),
        EmbeddingStore::from_embedder(
            &m,
            RegionSet::Grid {
                kind: LayoutKind::Static9,
                enlargement: 0.1,
            },
            &e,
        )
        .unwrap(),
    ];
    (SearchEngine::new(m, stores, Arc::new(e.clone())).unwrap(), e)
}

#[test]
fn engine_dispatches_by_model() {
    let (eng, e) = engine();
    let bbox = Rect::new(0.0, 0.0, 0.3, 0.3).unwrap();

    let spec = QuerySpec::new("coral", Some(bbox), SearchModel::AppendShort);
    let res = eng.search(&spec).unwrap();
    assert_eq!(res.text, "coral in the upper left");
    let direct = score_whole(eng.store("whole").unwrap(), &e.embed_text("coral in the upper left").unwrap()).unwrap();
    assert_eq!(res.ranking, direct);

    let spec = QuerySpec::new("coral", Some(bbox), SearchModel::Static9)
        .with_enlargement(0.1)
        .with_selection(SelectionMode::ArgmaxIou);
    let res = eng.search(&spec).unwrap();
    assert_eq!(res.selected_cells, ["r1c1"]);
    assert_eq!(res.region_set_id.as_deref(), Some("static9@e=0.1"));

    let spec = QuerySpec::new("coral", Some(bbox), SearchModel::Static5);
    assert!(matches!(eng.search(&spec), Err(RetrievalError::MissingStore(id)) if id == "static5"));
    let spec = QuerySpec::new("coral", None, SearchModel::Theoretical);
    assert!(matches!(eng.search(&spec), Err(RetrievalError::MissingBox(_))));
    let spec = QuerySpec::new("coral", None, SearchModel::WholeImage);
    assert_eq!(eng.search(&spec).unwrap().ranking.len(), 3);
}

#[test]
fn select_on_base_uses_unenlarged_cells() {
    let (eng, _) = engine();
    // Lies inside r1c2 only, but the enlarged r1c1 reaches past x = 1/3.
    let bbox = Rect::new(0.36, 0.05, 0.5, 0.2).unwrap();
    let spec = QuerySpec::new("coral", Some(bbox), SearchModel::Static9).with_enlargement(0.1);
    let enlarged = eng.search(&spec).unwrap().selected_cells;
    let base = eng
        .search(&QuerySpec {
            select_on_base: true,
            ..spec
        })
        .unwrap()
        .selected_cells;
    assert_eq!(base, ["r1c2"]);
    assert!(enlarged.contains(&"r1c1".to_string()));
}

#[test]
fn engine_rejects_partial_store() {
    let m = manifest(&["a", "b"]);
    let e = HashEmbedder::new(16);
    let store = EmbeddingStore::from_embedder(&manifest(&["a"]), RegionSet::Whole, &e).unwrap();
    assert!(matches!(
        SearchEngine::new(m, vec![store], Arc::new(e)),
        Err(RetrievalError::Coverage { .. })
    ));
}

mod props {
    use super::*;
    use crate::geometry::{GridLayout, LayoutKind, Rect, SelectionMode};
    use crate::store::StoreRow;
    use proptest::prelude::*;

    fn store_of(region_set: RegionSet, vecs: &[Vec<f32>], dim: usize) -> EmbeddingStore {
        let cells: Vec<String> = region_set.regions().unwrap().into_iter().map(|c| c.id).collect();
        let rows = vecs.chunks(cells.len()).enumerate().flat_map(|(i, per)| {
            cells.iter().zip(per).map(move |(c, v)| StoreRow {
                image_id: format!("i{i:02}"),
                cell_id: c.clone(),
                vector: v.clone(),
            })
        });
        EmbeddingStore::from_rows(region_set, dim, rows).unwrap()
    }

    fn vecs(count: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        proptest::collection::vec(proptest::collection::vec(0.05f32..1.0, 4), count)
    }

    proptest! {
        #[test]
        fn ranking_order_ignores_query_scale(v in vecs(12), q in proptest::collection::vec(-1.0f32..1.0, 4), k in -8i32..8, c in 0.001f32..1000.0) {
            prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
            let store = store_of(RegionSet::Whole, &v, 4);
            let base = score_whole(&store, &q).unwrap();
            let pow2: Vec<f32> = q.iter().map(|x| x * 2f32.powi(k)).collect();
            prop_assert_eq!(&score_whole(&store, &pow2).unwrap(), &base);
            let scaled: Vec<f32> = q.iter().map(|x| x * c).collect();
            let other = score_whole(&store, &scaled).unwrap();
            for e in base.entries() {
                prop_assert!((other.score_of(&e.image_id).unwrap() - e.score).abs() < 1e-6);
            }
        }

        #[test]
        fn full_frame_any_overlap_dominates_single_cells(v in vecs(6 * 9), q in proptest::collection::vec(-1.0f32..1.0, 4), nine in any::<bool>()) {
            prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
            let kind = if nine { LayoutKind::Static9 } else { LayoutKind::Static5 };
            let grid = GridLayout::build(kind);
            let n_cells = grid.cells.len();
            let store = store_of(RegionSet::Grid { kind, enlargement: 0.0 }, &v[..6 * n_cells], 4);
            prop_assert_eq!(select_cell_indices(&grid, &Rect::FULL_FRAME, SelectionMode::AnyOverlap).len(), n_cells);
            let all = score_grid(&store, &grid, &Rect::FULL_FRAME, SelectionMode::AnyOverlap, &q).unwrap();
            for c in 0..n_cells {
                let one = score_grid_cells(&store, &grid, &[c], &q).unwrap();
                for e in one.entries() {
                    prop_assert!(all.score_of(&e.image_id).unwrap() >= e.score);
                }
            }
        }

        #[test]
        fn ranking_is_a_deterministic_total_order(scores in proptest::collection::vec(-2i8..2, 1..20)) {
            let entries: Vec<RankedImage> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| RankedImage { image_id: format!("i{:02}", (i * 7) % 20), score: f32::from(*s), matched_cell: None })
                .collect();
            let mut reversed = entries.clone();
            reversed.reverse();
            let a = Ranking::from_scores(entries);
            prop_assert_eq!(&a, &Ranking::from_scores(reversed));
            for w in a.entries().windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].image_id < w[1].image_id));
            }
        }
    }
}
