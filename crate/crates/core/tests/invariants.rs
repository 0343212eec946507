use proptest::prelude::*;

use beck_lab::addcomb::{sumset, ElementSet};
use beck_lab::bsg::{bsg_extract, PairGraph};
use beck_lab::field::make_field;
use beck_lab::geometry::{AffinePoint, ProjLine, ProjPoint};
use beck_lab::incidence::{
    count_incidences, count_proj_incidences, spanned_lines, PointSet, ProjLineSet, ProjPointSet,
};
use beck_lab::pipeline::{
    run_beck_pipeline, run_incidence_pipeline, BeckParams, IncidenceParams, Outcome, BECK_STAGES, INCIDENCE_STAGES,
};

fn explore() -> BeckParams {
    BeckParams {
        c_rich: 0.1,
        c_pop: 0.05,
        ..BeckParams::default()
    }
}

/// Stage names appear in the fixed order, each at most once.
fn in_order(names: &[&str], order: &[&str]) -> bool {
    let mut pos = 0;
    names.iter().all(|n| match order[pos..].iter().position(|o| o == n) {
        Some(i) => {
            pos += i + 1;
            true
        }
        None => false,
    })
}

fn proj_triple() -> impl Strategy<Value = (i64, i64, i64)> {
    (0i64..101, 0i64..101, 0i64..101).prop_filter("nonzero", |&(a, b, c)| (a, b, c) != (0, 0, 0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn beck_trace_invariants(
        p in prop::sample::select(vec![101u64, 211]),
        xs in prop::collection::btree_set(0u64..101, 4..9),
    ) {
        let f = make_field(p).unwrap();
        let a = ElementSet::new(f, xs);
        let t = run_beck_pipeline(&a, &a, &explore()).unwrap();
        prop_assert!(t.failed_checks().is_empty(), "{:?}", t.failed_checks());
        let names: Vec<&str> = t.stages.iter().map(|s| s.stage_name.as_str()).collect();
        prop_assert!(in_order(&names, &BECK_STAGES));
        if let Outcome::EmptyStage { stage } = &t.outcome {
            prop_assert!(BECK_STAGES.contains(&stage.as_str()));
        }
        prop_assert_eq!(t.verdict, 267.0 * t.delta_eff >= 1.0);
        prop_assert_eq!(&t, &run_beck_pipeline(&a, &a, &explore()).unwrap());
    }

    #[test]
    fn incidence_trace_invariants(
        pts in prop::collection::btree_set(proj_triple(), 4..12),
        lns in prop::collection::btree_set(proj_triple(), 4..12),
    ) {
        let f = make_field(101).unwrap();
        let pts = ProjPointSet::new(f, pts.into_iter().map(|(x, y, z)| ProjPoint::new(&f, x, y, z).unwrap()));
        let lns = ProjLineSet::new(f, lns.into_iter().map(|(a, b, c)| ProjLine::new(&f, a, b, c).unwrap()));
        let n = pts.len().min(lns.len());
        prop_assume!(n >= 2);
        let pts = ProjPointSet::new(f, pts.items()[..n].to_vec());
        let lns = ProjLineSet::new(f, lns.items()[..n].to_vec());
        let params = IncidenceParams::default();
        let t = run_incidence_pipeline(&pts, &lns, &params).unwrap();
        prop_assert!(t.checks_hold(), "{:?}", t.failed_checks());
        prop_assert_eq!(t.incidences, count_proj_incidences(&pts, &lns));
        let names: Vec<&str> = t.stages.iter().map(|s| s.stage_name.as_str()).collect();
        prop_assert!(in_order(&names, &INCIDENCE_STAGES));
    }

    #[test]
    fn spanned_lines_account_for_every_incidence(coords in prop::collection::btree_set((0i64..23, 0i64..23), 2..25)) {
        let f = make_field(23).unwrap();
        let pts = PointSet::new(f, coords.into_iter().map(|(x, y)| AffinePoint::new(&f, x, y)));
        let m = spanned_lines(&pts).unwrap();
        prop_assert_eq!(count_incidences(&pts, &m.lines()), m.incidence_total());
    }

    #[test]
    fn incidences_are_monotone(
        pts in prop::collection::vec(proj_triple(), 1..15),
        lns in prop::collection::vec(proj_triple(), 1..15),
        extra in proj_triple(),
    ) {
        let f = make_field(101).unwrap();
        let p = ProjPointSet::new(f, pts.into_iter().map(|(x, y, z)| ProjPoint::new(&f, x, y, z).unwrap()));
        let l = ProjLineSet::new(f, lns.into_iter().map(|(a, b, c)| ProjLine::new(&f, a, b, c).unwrap()));
        let base = count_proj_incidences(&p, &l);
        let q = ProjPoint::new(&f, extra.0, extra.1, extra.2).unwrap();
        let m = ProjLine::new(&f, extra.0, extra.1, extra.2).unwrap();
        prop_assert!(count_proj_incidences(&p.with(q), &l) >= base);
        prop_assert!(count_proj_incidences(&p, &l.with(m)) >= base);
    }

    #[test]
    fn bsg_returns_genuine_subsets(
        xs in prop::collection::btree_set(0u64..40, 3..16),
        ys in prop::collection::btree_set(0u64..40, 3..16),
    ) {
        let f = make_field(101).unwrap();
        let (x, y) = (ElementSet::new(f, xs), ElementSet::new(f, ys));
        prop_assume!(x.len() == y.len());
        let g = PairGraph::from_popular_sums(x.clone(), y.clone(), x.len()).unwrap();
        let r = bsg_extract(&g).unwrap();
        prop_assert!(!r.x_sub.is_empty() && !r.y_sub.is_empty());
        prop_assert!(r.x_sub.is_subset(&x) && r.y_sub.is_subset(&y));
        prop_assert_eq!(r.sumset_size, sumset(&r.x_sub, &r.y_sub).unwrap().len());
        prop_assert_eq!(&r, &bsg_extract(&g).unwrap());
    }
}
