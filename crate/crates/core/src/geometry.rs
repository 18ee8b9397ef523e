//! Overlapping tiling of large scenes and box-level test-time augmentation.
//!
//! Coordinates are continuous reals with the origin at the top-left corner;
//! `x` grows to the right and `y` downwards. Rotations are clockwise.
//!
//! Only the 90-degree family, horizontal flips and isotropic scaling are
//! supported. Arbitrary-angle rotations turn boxes into larger hulls and
//! cannot be inverted box-to-box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BBox, HasBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneDims {
    pub width: f64,
    pub height: f64,
}

impl SceneDims {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(Error::param("scene", format!("dims must be positive, got {width}x{height}")));
        }
        Ok(SceneDims { width, height })
    }

    pub fn contains(&self, b: &BBox, tol: f64) -> bool {
        b.x1 >= -tol && b.y1 >= -tol && b.x2 <= self.width + tol && b.y2 <= self.height + tol
    }
}

impl std::str::FromStr for SceneDims {
    type Err = Error;

    /// Parses `WIDTHxHEIGHT`, e.g. `1000x700`.
    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Parse(format!("scene `{s}` is not WIDTHxHEIGHT")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("scene `{s}` is not WIDTHxHEIGHT")))
        };
        SceneDims::new(parse(w)?, parse(h)?)
    }
}

/// One crop window, `ix`/`iy` being its column and row in the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub ix: usize,
    pub iy: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub tile_w: f64,
    pub tile_h: f64,
}

impl TileSpec {
    pub fn rect(&self) -> BBox {
        BBox {
            x1: self.origin_x,
            y1: self.origin_y,
            x2: self.origin_x + self.tile_w,
            y2: self.origin_y + self.tile_h,
        }
    }

    pub fn file_stem(&self) -> String {
        format!("tile_{}_{}", self.ix, self.iy)
    }
}

/// Start positions along one axis, with the last window pulled back to end
/// exactly at `dim`. Returns `(positions, window length)`.
pub fn axis_positions(dim: f64, tile: f64, overlap: f64) -> (Vec<f64>, f64) {
    if dim <= tile {
        return (vec![0.0], dim);
    }
    let stride = tile - overlap;
    let last = dim - tile;
    let mut out = vec![0.0];
    let mut pos = 0.0;
    while pos < last {
        pos = (pos + stride).min(last);
        out.push(pos);
    }
    out.dedup();
    (out, tile)
}

/// Row-major (y outer, x inner) grid of square `tile`-sized windows whose
/// neighbours overlap by at least `overlap`.
pub fn tile_grid(scene: SceneDims, tile: f64, overlap: f64) -> Result<Vec<TileSpec>> {
    if !(tile.is_finite() && tile > 0.0) {
        return Err(Error::param("tile", format!("must be positive, got {tile}")));
    }
    if !(overlap >= 0.0 && overlap < tile) {
        return Err(Error::param(
            "overlap",
            format!("must lie in [0, tile), got {overlap} for tile {tile}"),
        ));
    }
    let (xs, tile_w) = axis_positions(scene.width, tile, overlap);
    let (ys, tile_h) = axis_positions(scene.height, tile, overlap);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (iy, &origin_y) in ys.iter().enumerate() {
        for (ix, &origin_x) in xs.iter().enumerate() {
            tiles.push(TileSpec {
                ix,
                iy,
                origin_x,
                origin_y,
                tile_w,
                tile_h,
            });
        }
    }
    Ok(tiles)
}

/// Intersects each box with the tile and shifts it into tile-local
/// coordinates. Boxes keeping less than `min_visibility` of their area, and
/// zero-area boxes, are dropped.
pub fn clip_boxes_to_tile<T: HasBox>(boxes: &[T], tile: &TileSpec, min_visibility: f64) -> Vec<T> {
    let rect = tile.rect();
    boxes
        .iter()
        .filter_map(|item| {
            let b = item.bbox();
            let area = b.area();
            if !(area > 0.0) {
                return None;
            }
            let clipped = b.intersection(&rect)?;
            if clipped.area() / area < min_visibility {
                return None;
            }
            Some(item.with_bbox(clipped.translate(-tile.origin_x, -tile.origin_y)))
        })
        .collect()
}

/// Shifts tile-local boxes back into scene coordinates.
pub fn tile_to_scene<T: HasBox>(boxes: &[T], tile: &TileSpec) -> Vec<T> {
    boxes
        .iter()
        .map(|item| item.with_bbox(item.bbox().translate(tile.origin_x, tile.origin_y)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TtaStep {
    Identity,
    FlipH,
    Rot90,
    Rot180,
    Rot270,
    Scale(f64),
}

impl TtaStep {
    fn dims_after(self, d: SceneDims) -> SceneDims {
        match self {
            TtaStep::Rot90 | TtaStep::Rot270 => SceneDims {
                width: d.height,
                height: d.width,
            },
            TtaStep::Scale(s) => SceneDims {
                width: d.width * s,
                height: d.height * s,
            },
            _ => d,
        }
    }

    fn inverse(self) -> TtaStep {
        match self {
            TtaStep::Rot90 => TtaStep::Rot270,
            TtaStep::Rot270 => TtaStep::Rot90,
            other => other,
        }
    }

    fn map_box(self, b: &BBox, d: SceneDims) -> BBox {
        let (w, h) = (d.width, d.height);
        let map = |x: f64, y: f64| -> (f64, f64) {
            match self {
                TtaStep::Identity => (x, y),
                TtaStep::FlipH => (w - x, y),
                TtaStep::Rot90 => (h - y, x),
                TtaStep::Rot180 => (w - x, h - y),
                TtaStep::Rot270 => (y, w - x),
                TtaStep::Scale(s) => (x * s, y * s),
            }
        };
        BBox::from_corners(map(b.x1, b.y1), map(b.x2, b.y2))
    }

    /// Exact inverse of `map_box`. Scaling divides rather than multiplying by
    /// the reciprocal.
    fn unmap_box(self, b: &BBox, original: SceneDims) -> BBox {
        match self {
            TtaStep::Scale(s) => BBox::from_corners((b.x1 / s, b.y1 / s), (b.x2 / s, b.y2 / s)),
            other => other.inverse().map_box(b, other.dims_after(original)),
        }
    }
}

impl std::str::FromStr for TtaStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let step = match lower.as_str() {
            "identity" | "id" | "none" => TtaStep::Identity,
            "fliph" | "flip" | "hflip" => TtaStep::FlipH,
            "rot90" => TtaStep::Rot90,
            "rot180" => TtaStep::Rot180,
            "rot270" => TtaStep::Rot270,
            other => {
                let factor = other
                    .strip_prefix("scale")
                    .map(|f| f.trim_start_matches([':', '(', '=']).trim_end_matches(')'))
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse(format!("unknown transform `{s}`")))?;
                TtaStep::Scale(factor)
            }
        };
        Ok(step)
    }
}

/// Ordered composition of steps, applied left to right.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TtaTransform {
    pub steps: Vec<TtaStep>,
}

impl TtaTransform {
    pub fn new(steps: Vec<TtaStep>) -> Result<Self> {
        let t = TtaTransform { steps };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        TtaTransform::default()
    }

    pub fn single(step: TtaStep) -> Self {
        TtaTransform { steps: vec![step] }
    }

    pub fn validate(&self) -> Result<()> {
        for step in &self.steps {
            if let TtaStep::Scale(s) = step {
                if !(s.is_finite() && *s > 0.0) {
                    return Err(Error::param("scale", format!("factor must be positive, got {s}")));
                }
            }
        }
        Ok(())
    }

    /// Dimensions of the frame the transform produces.
    pub fn output_dims(&self, scene: SceneDims) -> SceneDims {
        self.steps.iter().fold(scene, |d, s| s.dims_after(d))
    }
}

impl std::str::FromStr for TtaTransform {
    type Err = Error;

    /// `+`-separated steps, e.g. `scale0.8+rot90`. Empty or `identity` gives
    /// the identity.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(TtaTransform::identity());
        }
        let steps = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
        TtaTransform::new(steps)
    }
}

/// Maps boxes from the scene frame into the transformed frame.
pub fn apply_tta<T: HasBox>(boxes: &[T], scene: SceneDims, t: &TtaTransform) -> Vec<T> {
    boxes
        .iter()
        .map(|item| {
            let mut dims = scene;
            let mut b = item.bbox();
            for step in &t.steps {
                b = step.map_box(&b, dims);
                dims = step.dims_after(dims);
            }
            item.with_bbox(b)
        })
        .collect()
}

/// Maps boxes from the transformed frame back to the scene frame.
pub fn invert_tta<T: HasBox>(boxes: &[T], scene: SceneDims, t: &TtaTransform) -> Vec<T> {
    // frame dims before each step
    let mut before = Vec::with_capacity(t.steps.len());
    let mut dims = scene;
    for step in &t.steps {
        before.push(dims);
        dims = step.dims_after(dims);
    }
    boxes
        .iter()
        .map(|item| {
            let b = t
                .steps
                .iter()
                .zip(&before)
                .rev()
                .fold(item.bbox(), |b, (step, d)| step.unmap_box(&b, *d));
            item.with_bbox(b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(w: f64, h: f64) -> SceneDims {
        SceneDims::new(w, h).unwrap()
    }

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn tile_examples() {
        let t = tile_grid(scene(700.0, 700.0), 700.0, 80.0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].origin_x, t[0].origin_y), (0.0, 0.0));

        let t = tile_grid(scene(1320.0, 700.0), 700.0, 80.0).unwrap();
        let xs: Vec<f64> = t.iter().map(|t| t.origin_x).collect();
        assert_eq!(xs, vec![0.0, 620.0]);

        let t = tile_grid(scene(1000.0, 1000.0), 700.0, 80.0).unwrap();
        assert_eq!(t.len(), 4);
        let origins: Vec<(f64, f64)> = t.iter().map(|t| (t.origin_x, t.origin_y)).collect();
        assert_eq!(origins, vec![(0.0, 0.0), (300.0, 0.0), (0.0, 300.0), (300.0, 300.0)]);
        assert_eq!(t[3].file_stem(), "tile_1_1");
    }

    #[test]
    fn small_scene_single_clamped_tile() {
        let t = tile_grid(scene(300.0, 900.0), 700.0, 80.0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].tile_w, t[0].tile_h), (300.0, 700.0));
        assert_eq!(t[1].origin_y, 200.0);
    }

    #[test]
    fn tile_rejects_bad_overlap() {
        assert!(tile_grid(scene(1000.0, 1000.0), 700.0, 700.0).is_err());
        assert!(tile_grid(scene(1000.0, 1000.0), 700.0, -1.0).is_err());
        assert!(tile_grid(scene(1000.0, 1000.0), 0.0, 0.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let tile = TileSpec {
            ix: 1,
            iy: 0,
            origin_x: 100.0,
            origin_y: 0.0,
            tile_w: 100.0,
            tile_h: 100.0,
        };
        let inside = clip_boxes_to_tile(&[b(110.0, 10.0, 130.0, 40.0)], &tile, 0.5);
        assert_eq!(inside, vec![b(10.0, 10.0, 30.0, 40.0)]);
        assert!(clip_boxes_to_tile(&[b(300.0, 0.0, 310.0, 10.0)], &tile, 0.1).is_empty());
        // straddles x = 100: half the area is inside
        let half = [b(90.0, 0.0, 110.0, 10.0)];
        assert!(clip_boxes_to_tile(&half, &tile, 0.6).is_empty());
        assert_eq!(clip_boxes_to_tile(&half, &tile, 0.4), vec![b(0.0, 0.0, 10.0, 10.0)]);
    }

    #[test]
    fn tile_to_scene_translates() {
        let tile = TileSpec {
            ix: 1,
            iy: 0,
            origin_x: 620.0,
            origin_y: 0.0,
            tile_w: 700.0,
            tile_h: 700.0,
        };
        assert_eq!(tile_to_scene(&[b(0.0, 0.0, 10.0, 10.0)], &tile), vec![b(620.0, 0.0, 630.0, 10.0)]);
        let origin = TileSpec {
            origin_x: 0.0,
            ..tile
        };
        assert_eq!(tile_to_scene(&[b(1.0, 2.0, 3.0, 4.0)], &origin), vec![b(1.0, 2.0, 3.0, 4.0)]);
    }

    #[test]
    fn tta_examples() {
        let s = scene(100.0, 100.0);
        let bx = [b(10.0, 20.0, 30.0, 40.0)];
        assert_eq!(apply_tta(&bx, s, &TtaTransform::identity()), bx.to_vec());
        assert_eq!(
            apply_tta(&bx, s, &TtaTransform::single(TtaStep::Rot90)),
            vec![b(60.0, 10.0, 80.0, 30.0)]
        );
        assert_eq!(
            apply_tta(&[b(1.0, 1.0, 2.0, 2.0)], s, &TtaTransform::single(TtaStep::Scale(2.0))),
            vec![b(2.0, 2.0, 4.0, 4.0)]
        );
        assert_eq!(invert_tta(&bx, s, &TtaTransform::identity()), bx.to_vec());
    }

    #[test]
    fn rotations_on_non_square_scene() {
        let s = scene(200.0, 100.0);
        let bx = [b(10.0, 20.0, 30.0, 40.0)];
        let r90 = TtaTransform::single(TtaStep::Rot90);
        assert_eq!(r90.output_dims(s), scene(100.0, 200.0));
        let out = apply_tta(&bx, s, &r90);
        assert_eq!(out, vec![b(60.0, 10.0, 80.0, 30.0)]);
        assert_eq!(invert_tta(&out, s, &r90), bx.to_vec());
        let r270 = TtaTransform::single(TtaStep::Rot270);
        assert_eq!(apply_tta(&bx, s, &r270), vec![b(20.0, 170.0, 40.0, 190.0)]);
        let r180 = TtaTransform::single(TtaStep::Rot180);
        assert_eq!(apply_tta(&bx, s, &r180), vec![b(170.0, 60.0, 190.0, 80.0)]);
    }

    #[test]
    fn composed_round_trip() {
        let s = scene(640.0, 480.0);
        let t: TtaTransform = "scale1.25+rot90+fliph".parse().unwrap();
        let bx = [b(12.0, 40.0, 100.0, 64.0)];
        let fwd = apply_tta(&bx, s, &t);
        assert!(t.output_dims(s).contains(&fwd[0], 0.0));
        assert_eq!(invert_tta(&fwd, s, &t), bx.to_vec());
    }

    #[test]
    fn parse_transforms() {
        assert_eq!("".parse::<TtaTransform>().unwrap(), TtaTransform::identity());
        assert_eq!(
            "rot90+scale:0.8".parse::<TtaTransform>().unwrap().steps,
            vec![TtaStep::Rot90, TtaStep::Scale(0.8)]
        );
        assert!("rot45".parse::<TtaTransform>().is_err());
        assert!("scale0".parse::<TtaTransform>().is_err());
        assert_eq!("1000x700".parse::<SceneDims>().unwrap(), scene(1000.0, 700.0));
        assert!("1000".parse::<SceneDims>().is_err());
        assert!("0x5".parse::<SceneDims>().is_err());
    }
}
