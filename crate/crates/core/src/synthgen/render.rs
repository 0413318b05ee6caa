use serde::{Deserialize, Serialize};

use crate::geometry::{Point, PointCloud};
use crate::image::Image;
use crate::{Error, Result};

/// Orthographic camera direction in degrees. Azimuth turns about +y,
/// elevation tilts the camera above the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Default for View {
    fn default() -> Self {
        Self {
            azimuth: 35.0,
            elevation: 25.0,
        }
    }
}

/// Half-width of the visible square in world units; the unit cube's
/// diagonal so no rotation of an in-range shape is clipped.
const VIEW_HALF_EXTENT: f64 = 1.733;

impl View {
    /// Image-plane coordinates `(u, v)` of a world point; `v` points up.
    pub fn project(&self, p: &Point) -> (f64, f64) {
        let az = self.azimuth.rem_euclid(360.0).to_radians();
        let el = self.elevation.rem_euclid(360.0).to_radians();
        let (sa, ca) = az.sin_cos();
        let (se, ce) = el.sin_cos();
        let x = ca * p[0] + sa * p[2];
        let z = -sa * p[0] + ca * p[2];
        let y = ce * p[1] - se * z;
        (x, y)
    }

    /// Continuous pixel coordinates `(col, row)` for a given resolution.
    pub fn to_pixel(&self, p: &Point, resolution: usize) -> (f64, f64) {
        let (u, v) = self.project(p);
        let scale = resolution as f64 / (2.0 * VIEW_HALF_EXTENT);
        ((u + VIEW_HALF_EXTENT) * scale, (VIEW_HALF_EXTENT - v) * scale)
    }
}

/// Orthographic silhouette: each point is splatted as an antialiased disc
/// and overlapping discs combine by maximum, so the image does not depend on
/// point order.
pub fn render_silhouette(cloud: &PointCloud, view: View, resolution: usize) -> Result<Image> {
    if resolution < 32 {
        return Err(Error::invalid(format!("resolution must be at least 32, got {resolution}")));
    }
    let radius = (resolution as f64 / 96.0).max(1.0);
    let reach = radius.ceil() as isize + 1;
    let mut img = Image::blank(resolution);
    let res = resolution as isize;
    let px = img.pixels_mut();
    for p in cloud.points() {
        let (cx, cy) = view.to_pixel(p, resolution);
        let (ix, iy) = (cx.floor() as isize, cy.floor() as isize);
        for row in (iy - reach).max(0)..=(iy + reach).min(res - 1) {
            for col in (ix - reach).max(0)..=(ix + reach).min(res - 1) {
                let dx = col as f64 + 0.5 - cx;
                let dy = row as f64 + 0.5 - cy;
                let cover = (radius + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0) as f32;
                let slot = &mut px[(row * res + col) as usize];
                if cover > *slot {
                    *slot = cover;
                }
            }
        }
    }
    Ok(img)
}

/// Keeps the `keep_fraction` of points closest to a viewer at infinity
/// along `direction`, i.e. the points with the largest projection onto it.
/// Survivors keep their original relative order.
pub fn make_partial(cloud: &PointCloud, direction: Point, keep_fraction: f64) -> Result<PointCloud> {
    if !(keep_fraction > 0.0 && keep_fraction < 1.0) {
        return Err(Error::invalid(format!("keep_fraction must lie in (0, 1), got {keep_fraction}")));
    }
    let norm = crate::geometry::norm3(&direction);
    if !(norm > 0.0) {
        return Err(Error::invalid("partial-view direction must be non-zero"));
    }
    let keep = (cloud.len() as f64 * keep_fraction).round() as usize;
    if keep == 0 {
        return Err(Error::invalid("partial cloud would be empty"));
    }
    let depth = |p: &Point| (p[0] * direction[0] + p[1] * direction[1] + p[2] * direction[2]) / norm;
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    let pts = cloud.points();
    order.sort_by(|&a, &b| depth(&pts[b]).total_cmp(&depth(&pts[a])).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    cloud.select(&order)
}
