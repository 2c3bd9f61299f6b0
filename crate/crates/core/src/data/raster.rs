use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Even-odd fill: a pixel is set when its center lies strictly inside.
pub fn rasterize_polygon(polygon: &[[f64; 2]], height: usize, width: usize) -> Result<BinaryMask> {
    if polygon.len() < 3 {
        return Err(Error::EmptyMask(format!("polygon has {} vertices, need at least 3", polygon.len())));
    }
    let mut mask = BinaryMask::empty(height, width);
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for (i, a) in polygon.iter().enumerate() {
            let b = polygon[(i + 1) % polygon.len()];
            if (a[1] > yc) != (b[1] > yc) {
                xs.push(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // centers x + 0.5 with span[0] < x + 0.5 < span[1]
            let lo = ((span[0] - 0.5).floor() + 1.0).max(0.0);
            let hi = ((span[1] - 0.5).ceil()).min(width as f64);
            for x in lo as usize..hi.max(0.0) as usize {
                mask.set(y, x, true);
            }
        }
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask(format!("polygon covers no pixel center of the {height}x{width} grid")));
    }
    Ok(mask)
}

/// Shoelace area (absolute value).
pub fn polygon_area(polygon: &[[f64; 2]]) -> f64 {
    let n = polygon.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (polygon[i], polygon[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_covers_sixteen_centers() {
        let sq = [[1.0, 1.0], [5.0, 1.0], [5.0, 5.0], [1.0, 5.0]];
        let m = rasterize_polygon(&sq, 8, 8).unwrap();
        assert_eq!(m.area(), 16);
        assert!(m.get(1, 1) && m.get(4, 4) && !m.get(5, 5) && !m.get(0, 0));
    }

    #[test]
    fn start_vertex_invariance() {
        let tri = [[0.3, 0.2], [7.1, 2.5], [2.2, 6.9]];
        let base = rasterize_polygon(&tri, 8, 8).unwrap();
        for k in 1..3 {
            let rot: Vec<[f64; 2]> = (0..3).map(|i| tri[(i + k) % 3]).collect();
            assert_eq!(rasterize_polygon(&rot, 8, 8).unwrap(), base);
        }
        let rev: Vec<[f64; 2]> = tri.iter().rev().copied().collect();
        assert_eq!(rasterize_polygon(&rev, 8, 8).unwrap(), base);
    }

    #[test]
    fn degenerate_and_outside_polygons_fail() {
        let outside = [[10.0, 10.0], [12.0, 10.0], [12.0, 12.0]];
        assert!(matches!(rasterize_polygon(&outside, 8, 8), Err(Error::EmptyMask(_))));
        let line = [[1.0, 1.0], [4.0, 4.0], [6.0, 6.0]];
        assert!(matches!(rasterize_polygon(&line, 8, 8), Err(Error::EmptyMask(_))));
        assert!(rasterize_polygon(&[[0.0, 0.0], [3.0, 3.0]], 8, 8).is_err());
    }

    #[test]
    fn clipped_polygon_stays_in_bounds() {
        let big = [[-5.0, -5.0], [20.0, -5.0], [20.0, 20.0], [-5.0, 20.0]];
        assert_eq!(rasterize_polygon(&big, 4, 6).unwrap().area(), 24);
    }

    #[test]
    fn area_converges_for_circle() {
        let r = 14.3;
        let poly: Vec<[f64; 2]> = (0..60)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 60.0;
                [32.2 + r * t.cos(), 31.7 + r * t.sin()]
            })
            .collect();
        let m = rasterize_polygon(&poly, 64, 64).unwrap();
        let a = polygon_area(&poly);
        assert!((m.area() as f64 - a).abs() / a < 0.02);
    }
}
