//! Prints the cell order of every scan route over a small grid, dense and
//! atrous, and checks that partition/merge and traverse/restore invert.
//!
//! `cargo run --release --example atrous_routes -- [height] [width]`

use loma::scan2d::{atrous_merge, atrous_partition, route_restore, route_traverse, AtrousGroup, PatchGrid, ScanDirection, ScanRoute};

fn main() -> loma::Result<()> {
    let raw: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("grid size")).collect();
    let (h, w) = (raw.first().copied().unwrap_or(4), raw.get(1).copied().unwrap_or(5));

    for direction in ScanDirection::ALL {
        let dense = ScanRoute { direction, group: AtrousGroup::Dense }.cell_order(h, w);
        println!("{direction:?} dense: {dense:?}");
        for group in AtrousGroup::PARITIES {
            let order = ScanRoute { direction, group }.cell_order(h, w);
            println!("    {group:?}: {order:?}");
        }
    }

    let grid = PatchGrid::from_fn(h, w, 2, |r, c, ch| (100 * r + 10 * c + ch) as f64);
    let parts = atrous_partition(&grid, 2)?;
    let sizes: Vec<String> = parts.iter().map(|p| format!("{}x{}", p.height(), p.width())).collect();
    println!("parity subgrids: {}", sizes.join(" "));
    assert_eq!(atrous_merge(&parts, h, w)?, grid);
    for dir in ScanDirection::ALL {
        assert_eq!(route_restore(&route_traverse(&grid, dir), dir, h, w, 2)?, grid);
    }
    println!("merge(partition(x)) and restore(traverse(x)) reproduce the {h}x{w} grid");
    Ok(())
}
