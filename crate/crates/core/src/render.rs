//! Pinhole depth rendering of triangle meshes and conversions between depth
//! images and point clouds.
//!
//! Camera frame: x right, y down, z forward. Pixel `(u, v)` samples the ray
//! through image coordinates `(u, v)`, so a point projecting to `(x, y)` is
//! splatted to pixel `(round(x), round(y))`.

use std::io::Write;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::Affine3;
use crate::scene::KinematicModel;

/// Smallest normalized depth of an object pixel; 0 is reserved for background.
pub const DEPTH_EPSILON: f64 = 1.0 / 65535.0;

/// Depths closer than this are considered equal in the splat z-buffer.
pub const Z_TIE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world.
    pub pose: Affine3,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera("empty image".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Camera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Camera(format!(
                "need 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        self.pose
            .inverse()
            .map_err(|_| Error::Camera("pose is not invertible".into()))?;
        Ok(())
    }

    /// A camera at `eye` looking at `target` with square pixels and the given
    /// horizontal field of view. World `up` is +z.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        width: usize,
        height: usize,
        hfov_deg: f64,
        near: f64,
        far: f64,
    ) -> Result<Camera> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Camera("eye and target coincide".into()))?;
        let right = forward
            .cross(&Vector3::z())
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Camera("view direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let pose = Affine3::new(Matrix3::from_columns(&[right, down, forward]), eye.coords);
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        let cam = Camera {
            width,
            height,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            pose,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Same view at `1/factor` of the resolution.
    pub fn downscaled(&self, factor: usize) -> Result<Camera> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::IndivisibleFactor {
                factor,
                width: self.width,
                height: self.height,
            });
        }
        let f = factor as f64;
        Ok(Camera {
            width: self.width / factor,
            height: self.height / factor,
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            ..*self
        })
    }

    pub fn world_to_camera(&self) -> Affine3 {
        self.pose.inverse().expect("validated camera pose")
    }

    /// Plain-text block, one `key value...` per line, terminated by `end`.
    pub fn to_text(&self) -> String {
        let pose = self
            .pose
            .to_row_major()
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(" ");
        format!(
            "camera\nwidth {}\nheight {}\nfx {:?}\nfy {:?}\ncx {:?}\ncy {:?}\npose {}\nnear {:?}\nfar {:?}\nend\n",
            self.width, self.height, self.fx, self.fy, self.cx, self.cy, pose, self.near, self.far
        )
    }

    pub fn parse(text: &str) -> Result<Camera> {
        let bad = |m: &str| Error::Format(format!("camera block: {m}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("camera") {
            return Err(bad("missing `camera` header"));
        }
        let mut get = |key: &str| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut fields = line.split_whitespace();
            if fields.next() != Some(key) {
                return Err(bad(&format!("expected `{key}`")));
            }
            fields
                .map(|f| f.parse::<f64>().map_err(|_| bad(&format!("bad `{key}` value"))))
                .collect()
        };
        let scalar = |v: Vec<f64>| -> Result<f64> {
            if v.len() == 1 {
                Ok(v[0])
            } else {
                Err(bad("expected one value"))
            }
        };
        let width = scalar(get("width")?)? as usize;
        let height = scalar(get("height")?)? as usize;
        let fx = scalar(get("fx")?)?;
        let fy = scalar(get("fy")?)?;
        let cx = scalar(get("cx")?)?;
        let cy = scalar(get("cy")?)?;
        let pose: [f64; 12] = get("pose")?
            .try_into()
            .map_err(|_| bad("pose needs 12 values"))?;
        let near = scalar(get("near")?)?;
        let far = scalar(get("far")?)?;
        let cam = Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            pose: Affine3::from_row_major(&pose),
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Normalized depth image; 0 is background, object pixels lie in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied() as f64 / self.values.len() as f64
    }

    /// Binary 16-bit PGM with `round(65535 * value)` samples.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(2 * self.values.len());
        for &v in &self.values {
            let q = (65535.0 * f64::from(v).clamp(0.0, 1.0)).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        w.write_all(&buf)
    }
}

/// Camera-z depth in meters; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricDepth {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl MetricDepth {
    pub fn zeros(width: usize, height: usize) -> Self {
        MetricDepth {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// World-frame points, one per source pixel, with a validity mask.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub valid: Vec<bool>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point3<f64>>) -> Self {
        let valid = vec![true; points.len()];
        PointCloud { points, valid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_points(&self) -> impl Iterator<Item = &Point3<f64>> {
        self.points
            .iter()
            .zip(&self.valid)
            .filter_map(|(p, &ok)| ok.then_some(p))
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Output of [`render_mesh`].
#[derive(Clone, Debug)]
pub struct Rendering {
    pub depth: DepthImage,
    pub metric: MetricDepth,
    pub cloud: PointCloud,
    /// Object pixels whose depth fell outside `[near, far]`.
    pub saturated: usize,
}

/// `(far - z) / (far - near)`, clamped to `[DEPTH_EPSILON, 1]`.
pub fn normalize_depth(z: f64, cam: &Camera) -> f64 {
    normalize_checked(z, cam).0
}

fn normalize_checked(z: f64, cam: &Camera) -> (f64, bool) {
    let raw = (cam.far - z) / (cam.far - cam.near);
    let saturated = !(cam.near..=cam.far).contains(&z);
    (raw.clamp(DEPTH_EPSILON, 1.0), saturated)
}

/// Normalizes a metric image; returns the image and the saturation count.
pub fn normalize_image(metric: &MetricDepth, cam: &Camera) -> (DepthImage, usize) {
    let mut saturated = 0;
    let values = metric
        .values
        .iter()
        .map(|&z| {
            if z > 0.0 {
                let (v, sat) = normalize_checked(f64::from(z), cam);
                saturated += usize::from(sat);
                v as f32
            } else {
                0.0
            }
        })
        .collect();
    (
        DepthImage {
            width: metric.width,
            height: metric.height,
            values,
        },
        saturated,
    )
}

/// Z-buffer rasterization of the mesh; returns camera-z per pixel.
pub fn rasterize(model: &KinematicModel, cam: &Camera) -> MetricDepth {
    let to_cam = cam.world_to_camera();
    let mut zbuf = vec![f64::INFINITY; cam.width * cam.height];
    for tri in &model.triangles {
        let verts = tri.0.map(|p| to_cam.transform_point(&p));
        for clipped in clip_near(&verts, cam.near) {
            raster_triangle(&clipped, cam, &mut zbuf);
        }
    }
    MetricDepth {
        width: cam.width,
        height: cam.height,
        values: zbuf
            .into_iter()
            .map(|z| if z.is_finite() { z as f32 } else { 0.0 })
            .collect(),
    }
}

/// Clips a camera-frame triangle against `z >= near`, fanning the result.
fn clip_near(tri: &[Point3<f64>; 3], near: f64) -> Vec<[Point3<f64>; 3]> {
    if tri.iter().all(|p| p.z >= near) {
        return vec![*tri];
    }
    let mut poly = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let (ina, inb) = (a.z >= near, b.z >= near);
        if ina {
            poly.push(a);
        }
        if ina != inb {
            let t = (near - a.z) / (b.z - a.z);
            poly.push(a + (b - a) * t);
        }
    }
    (1..poly.len().saturating_sub(1))
        .map(|i| [poly[0], poly[i], poly[i + 1]])
        .collect()
}

fn raster_triangle(tri: &[Point3<f64>; 3], cam: &Camera, zbuf: &mut [f64]) {
    let proj = tri.map(|p| (cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy));
    let inv_z = tri.map(|p| 1.0 / p.z);
    let edge = |a: (f64, f64), b: (f64, f64), x: f64, y: f64| {
        (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
    };
    let area = edge(proj[0], proj[1], proj[2].0, proj[2].1);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if max_x < 0.0 || max_y < 0.0 || min_x > (cam.width - 1) as f64 || min_y > (cam.height - 1) as f64
    {
        return;
    }
    let u0 = min_x.ceil().max(0.0) as usize;
    let u1 = max_x.floor().min((cam.width - 1) as f64) as usize;
    let v0 = min_y.ceil().max(0.0) as usize;
    let v1 = max_y.floor().min((cam.height - 1) as f64) as usize;
    // Inclusive edges (with slack) so shared edges never leave cracks.
    const SLACK: f64 = -1e-9;
    for v in v0..=v1 {
        let y = v as f64;
        for u in u0..=u1 {
            let x = u as f64;
            let w0 = edge(proj[1], proj[2], x, y) / area;
            let w1 = edge(proj[2], proj[0], x, y) / area;
            let w2 = edge(proj[0], proj[1], x, y) / area;
            if w0 < SLACK || w1 < SLACK || w2 < SLACK {
                continue;
            }
            let z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
            let slot = &mut zbuf[v * cam.width + u];
            if z < *slot {
                *slot = z;
            }
        }
    }
}

/// Renders the mesh: normalized depth, metric depth, and the back-projected cloud.
pub fn render_mesh(model: &KinematicModel, cam: &Camera) -> Rendering {
    let metric = rasterize(model, cam);
    let (depth, saturated) = normalize_image(&metric, cam);
    if depth.occupied() == 0 {
        log::debug!("{} is entirely outside the view frustum", model.task_name);
    }
    let cloud = backproject(&metric, cam);
    Rendering {
        depth,
        metric,
        cloud,
        saturated,
    }
}

/// Pixel `(u, v)` with depth `z` maps to `pose * ((u - cx) z / fx, (v - cy) z / fy, z)`.
pub fn backproject(metric: &MetricDepth, cam: &Camera) -> PointCloud {
    let mut points = Vec::with_capacity(metric.values.len());
    let mut valid = Vec::with_capacity(metric.values.len());
    for v in 0..metric.height {
        for u in 0..metric.width {
            let z = f64::from(metric.values[v * metric.width + u]);
            if z > 0.0 {
                let local = Point3::new(
                    (u as f64 - cam.cx) * z / cam.fx,
                    (v as f64 - cam.cy) * z / cam.fy,
                    z,
                );
                points.push(cam.pose.transform_point(&local));
                valid.push(true);
            } else {
                points.push(Point3::origin());
                valid.push(false);
            }
        }
    }
    PointCloud { points, valid }
}

/// Splats valid points to their nearest pixel keeping the smallest camera-z.
/// Points behind the camera or outside the image are dropped; ties within
/// [`Z_TIE`] keep the lower point index.
pub fn splat_metric(cloud: &PointCloud, cam: &Camera) -> MetricDepth {
    let to_cam = cam.world_to_camera();
    let mut zbuf = vec![f64::INFINITY; cam.width * cam.height];
    for p in cloud.valid_points() {
        let c = to_cam.transform_point(p);
        if c.z <= 0.0 {
            continue;
        }
        let x = (cam.fx * c.x / c.z + cam.cx).round();
        let y = (cam.fy * c.y / c.z + cam.cy).round();
        if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
            continue;
        }
        let slot = &mut zbuf[y as usize * cam.width + x as usize];
        if c.z < *slot - Z_TIE {
            *slot = c.z;
        }
    }
    MetricDepth {
        width: cam.width,
        height: cam.height,
        values: zbuf
            .into_iter()
            .map(|z| if z.is_finite() { z as f32 } else { 0.0 })
            .collect(),
    }
}

/// Renders a normalized depth image from a point cloud.
pub fn point_cloud_to_depth(cloud: &PointCloud, cam: &Camera) -> DepthImage {
    normalize_image(&splat_metric(cloud, cam), cam).0
}

/// Block-wise nearest-sample reduction: every output pixel keeps the largest
/// (nearest) value of its `factor x factor` block.
pub fn downsample(d: &DepthImage, factor: usize) -> Result<DepthImage> {
    if factor == 0 || !d.width.is_multiple_of(factor) || !d.height.is_multiple_of(factor) {
        return Err(Error::IndivisibleFactor {
            factor,
            width: d.width,
            height: d.height,
        });
    }
    let (w, h) = (d.width / factor, d.height / factor);
    let mut out = DepthImage::zeros(w, h);
    for v in 0..d.height {
        let row = &d.values[v * d.width..(v + 1) * d.width];
        let out_row = &mut out.values[(v / factor) * w..(v / factor + 1) * w];
        for (u, &value) in row.iter().enumerate() {
            let slot = &mut out_row[u / factor];
            if value > *slot {
                *slot = value;
            }
        }
    }
    Ok(out)
}
