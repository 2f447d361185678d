//! Shape rasterization.
//!
//! Anti-aliasing rule (the "hard threshold 0.5" contract): a pixel belongs
//! to a shape's mask iff its center point (x + 0.5, y + 0.5) lies inside the
//! closed analytic region. Image pixels take the shape color exactly where
//! the mask is set, so mask/image agreement is exact by construction.

use crate::grid::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

/// Rasterize a shape to a canvas-sized mask.
///
/// `size` is the circle radius, the square half-extent, or the triangle
/// half-extent (isoceles, apex up: vertices (cx, cy-s), (cx-s, cy+s),
/// (cx+s, cy+s)).
pub fn rasterize(kind: ShapeKind, cx: i64, cy: i64, size: u32, w: usize, h: usize) -> Mask {
    let s = size as f64;
    let (cxf, cyf) = (cx as f64, cy as f64);
    Mask::from_fn(w, h, |x, y| {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        match kind {
            ShapeKind::Circle => {
                let dx = px - cxf;
                let dy = py - cyf;
                dx * dx + dy * dy <= s * s
            }
            ShapeKind::Square => (px - cxf).abs() <= s && (py - cyf).abs() <= s,
            ShapeKind::Triangle => {
                let a = (cxf, cyf - s);
                let b = (cxf - s, cyf + s);
                let c = (cxf + s, cyf + s);
                point_in_triangle((px, py), a, b, c)
            }
        }
    })
}

fn point_in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let sign = |p1: (f64, f64), p2: (f64, f64), p3: (f64, f64)| {
        (p1.0 - p3.0) * (p2.1 - p3.1) - (p2.0 - p3.0) * (p1.1 - p3.1)
    };
    let d1 = sign(p, a, b);
    let d2 = sign(p, b, c);
    let d3 = sign(p, c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_mask_is_symmetric_and_nonempty() {
        let m = rasterize(ShapeKind::Circle, 16, 16, 6, 32, 32);
        assert!(m.fg_count() >= 16);
        // symmetry around center
        for dy in 0..5i64 {
            for dx in 0..5i64 {
                let a = m.get((16 + dx) as usize, (16 + dy) as usize);
                let b = m.get((15 - dx) as usize, (15 - dy) as usize);
                assert_eq!(a, b, "asymmetry at {dx},{dy}");
            }
        }
    }

    #[test]
    fn square_matches_analytic_extent() {
        let m = rasterize(ShapeKind::Square, 10, 10, 3, 20, 20);
        // centers from 7.5 to 12.5 inclusive -> pixels 7..=12
        assert_eq!(m.bbox(), Some((7, 7, 13, 13)));
        assert_eq!(m.fg_count(), 36);
    }

    #[test]
    fn triangle_inside_square_envelope() {
        let sq = rasterize(ShapeKind::Square, 16, 16, 8, 32, 32);
        let tr = rasterize(ShapeKind::Triangle, 16, 16, 8, 32, 32);
        for y in 0..32 {
            for x in 0..32 {
                if tr.get(x, y) {
                    assert!(sq.get(x, y), "triangle escaped envelope at {x},{y}");
                }
            }
        }
        assert!(tr.fg_count() >= 16);
    }
}
