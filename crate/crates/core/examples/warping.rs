//! Axial warping units and the geometric warping: how depths are stretched
//! and how a rotation-like R mixes coordinates before distances are taken.

use geowarp::warp::{AxialWarping, GeometricWarping, Warping};

fn main() -> geowarp::error::Result<()> {
    // Steep near the surface, flattening with depth: the top metres
    // decorrelate faster than the bottom.
    let increments: Vec<f64> = (0..20).map(|l| 1.6 - 0.05 * l as f64).collect();
    let vertical = AxialWarping::new(increments, 0.0, 40.0)?;
    println!("{:>6} {:>10} {:>10}", "depth", "warped", "slope");
    for h in [0.0, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0] {
        println!("{h:>6.1} {:>10.4} {:>10.4}", vertical.warp(h)?, vertical.derivative(h)?);
    }

    // Equal increments give a linear map.
    let linear = AxialWarping::new(vec![0.5; 4], 0.0, 100.0)?;
    println!("equal increments: u* = {:.4} at u = 25, slope {:.4}", linear.warp(25.0)?, linear.derivative(25.0)?);

    let c = 0.3f64;
    let r = vec![vec![1.0, c, 0.0], vec![0.0, (1.0 - c * c).sqrt(), 0.0], vec![0.0, 0.0, 1.0]];
    let geometric = GeometricWarping::new(r)?;
    let horizontal = AxialWarping::new(vec![0.5, 0.5], 0.0, 100.0)?;
    let w = Warping::new(vec![horizontal.clone(), horizontal, vertical], geometric)?;
    let a = [10.0, 10.0, 5.0];
    for b in [[20.0, 10.0, 5.0], [10.0, 20.0, 5.0], [10.0, 10.0, 6.0], [10.0, 10.0, 30.0], [10.0, 10.0, 31.0]] {
        println!("distance {a:?} -> {b:?}: {:.4}", w.distance(&a, &b)?);
    }
    Ok(())
}
