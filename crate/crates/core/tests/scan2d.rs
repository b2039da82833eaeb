mod common;

use common::rng;
use loma::nn::{Builder, ParamStore};
use loma::scan2d::{
    atrous_merge, atrous_partition, route_restore, route_traverse, ss2d_apply, AtrousGroup, PatchGrid, RoutePlan,
    ScanDirection, ScanRoute, Ss2d, Ss2dConfig,
};
use loma::ssm::InputDiscretization;
use proptest::prelude::*;
use rand::Rng;

fn random_grid(seed: u64, h: usize, w: usize, c: usize) -> PatchGrid<f64> {
    let mut r = rng(seed);
    PatchGrid::from_fn(h, w, c, |_, _, _| r.random_range(-1.0..1.0))
}

fn assert_bijections(grid: &PatchGrid<f64>) {
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    let parts = atrous_partition(grid, 2).unwrap();
    assert_eq!(parts.iter().map(|p| p.cells()).sum::<usize>(), h * w);
    assert_eq!(&atrous_merge(&parts, h, w).unwrap(), grid, "{h}x{w}");
    for dir in ScanDirection::ALL {
        let seq = route_traverse(grid, dir);
        assert_eq!(&route_restore(&seq, dir, h, w, c).unwrap(), grid, "{h}x{w} {dir:?}");
        for p in &parts {
            if p.cells() > 0 {
                let s = route_traverse(p, dir);
                assert_eq!(&route_restore(&s, dir, p.height(), p.width(), c).unwrap(), p);
            }
        }
    }
}

#[test]
fn bijections_exhaustive_up_to_seven() {
    for h in 1..=7 {
        for w in 1..=7 {
            for c in [1, 3] {
                assert_bijections(&random_grid((h * 8 + w) as u64, h, w, c));
            }
        }
    }
}

#[test]
fn bijections_on_random_32x32() {
    for seed in 0..5 {
        assert_bijections(&random_grid(100 + seed, 32, 32, 4));
    }
}

#[test]
fn every_route_visits_its_cells_once() {
    for (h, w) in [(1, 1), (2, 5), (7, 7), (6, 3)] {
        for dir in ScanDirection::ALL {
            let mut seen = vec![0; h * w];
            for g in AtrousGroup::PARITIES {
                for i in (ScanRoute { direction: dir, group: g }).cell_order(h, w) {
                    seen[i] += 1;
                    let AtrousGroup::Parity { row, col } = g else { unreachable!() };
                    assert_eq!(((i / w) % 2, (i % w) % 2), (row, col));
                }
            }
            assert!(seen.iter().all(|&k| k == 1));
            let mut dense = (ScanRoute { direction: dir, group: AtrousGroup::Dense }).cell_order(h, w);
            dense.sort_unstable();
            assert_eq!(dense, (0..h * w).collect::<Vec<_>>());
        }
    }
}

#[test]
fn plan_gather_agrees_with_partitioned_traversal() {
    let (h, w) = (5, 6);
    let grid = PatchGrid::from_fn(h, w, 1, |r, c, _| (r * w + c) as f64);
    for dir in ScanDirection::ALL {
        let plan = RoutePlan::new(1, h, w, dir, true);
        let want: Vec<usize> = atrous_partition(&grid, 2)
            .unwrap()
            .iter()
            .flat_map(|p| route_traverse(p, dir))
            .map(|v| v as usize)
            .collect();
        assert_eq!(*plan.gather, want);
    }
}

fn layer(atrous: bool) -> (Ss2d, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(5);
    let cfg = Ss2dConfig {
        channels: 4,
        state_size: 3,
        expansion: 2,
        atrous,
        discretization: InputDiscretization::ExactZoh,
    };
    let layer = Ss2d::new(&mut Builder::new(&mut store, &mut r), cfg).unwrap();
    // push the layer off its near-identity initialization so every route matters
    for id in store.params().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    (layer, store)
}

/// Same layer acting on transposed grids: routes trade places with their
/// transposed direction and the depthwise kernel is transposed.
fn transposed_weights(layer: &Ss2d, store: &ParamStore<f64>) -> ParamStore<f64> {
    let mut out = store.clone();
    for (i, dir) in layer.directions.iter().enumerate() {
        let j = layer.directions.iter().position(|d| *d == dir.transposed()).unwrap();
        let (dst, src) = (&layer.routes[i], &layer.routes[j]);
        let pairs = [
            (dst.x_dt.weight, src.x_dt.weight),
            (dst.x_b.weight, src.x_b.weight),
            (dst.x_c.weight, src.x_c.weight),
            (dst.dt_proj.weight, src.dt_proj.weight),
            (dst.dt_proj.bias.unwrap(), src.dt_proj.bias.unwrap()),
            (dst.a_log, src.a_log),
            (dst.d, src.d),
        ];
        for (d, s) in pairs {
            *out.get_mut(d) = store.get(s).clone();
        }
    }
    let (k, ch) = (layer.conv.kernel, layer.conv.channels);
    let w = store.get(layer.conv.weight).data().to_vec();
    let wt = out.get_mut(layer.conv.weight).data_mut();
    for a in 0..k {
        for b in 0..k {
            for c in 0..ch {
                wt[(a * k + b) * ch + c] = w[(b * k + a) * ch + c];
            }
        }
    }
    out
}

#[test]
fn ss2d_commutes_with_transposition() {
    for atrous in [false, true] {
        let (layer, store) = layer(atrous);
        let swapped = transposed_weights(&layer, &store);
        for (h, w) in [(4, 6), (5, 3)] {
            let grid = random_grid(9, h, w, 4);
            let lhs = ss2d_apply(&grid, &layer, &store).unwrap().transpose();
            let rhs = ss2d_apply(&grid.transpose(), &layer, &swapped).unwrap();
            let err = lhs.values().iter().zip(rhs.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12, "atrous {atrous} {h}x{w}: {err:e}");
        }
    }
}

#[test]
fn ss2d_rejects_wrong_channel_count() {
    let (layer, store) = layer(true);
    assert!(ss2d_apply(&random_grid(1, 4, 4, 3), &layer, &store).is_err());
}

proptest! {
    #[test]
    fn transposing_a_grid_swaps_row_and_column_routes(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let g = random_grid(seed, h, w, 2);
        for dir in ScanDirection::ALL {
            prop_assert_eq!(route_traverse(&g.transpose(), dir.transposed()), route_traverse(&g, dir));
        }
        prop_assert_eq!(&g.transpose().transpose(), &g);
    }

    #[test]
    fn random_shapes_round_trip(h in 1usize..40, w in 1usize..40, seed in any::<u64>()) {
        let g = random_grid(seed, h, w, 1);
        let parts = atrous_partition(&g, 2).unwrap();
        prop_assert_eq!(&atrous_merge(&parts, h, w).unwrap(), &g);
    }
}
