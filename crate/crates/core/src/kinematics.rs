//! Transformation-parameter algebra for the morphing model.
//!
//! A model instance relates to its prototype through an affine map
//! `T = Trans(tx, ty, 0) * Rot_z(alpha) * Scale(1 + s_len, 1, 1 + s_h)`. Parameters
//! missing from a task's schema act as identity. Compositions of family
//! members can leave the family (rotation followed by anisotropic scale), so
//! cumulative transforms are carried as [`Affine3`] and projected back to a
//! parameter vector with [`extract_params`], which reports the fit residual.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};
use crate::render::PointCloud;

/// Below this, the linear part of an [`Affine3`] is treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Transform,
    Config,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Transform => "transform",
            ParamKind::Config => "config",
        })
    }
}

impl FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transform" => Ok(ParamKind::Transform),
            "config" => Ok(ParamKind::Config),
            other => Err(Error::Schema(format!("unknown parameter kind `{other}`"))),
        }
    }
}

/// Which factor of the transform a transformation parameter drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformRole {
    TranslateX,
    TranslateY,
    RotateZ,
    ScaleLength,
    ScaleHeight,
}

impl TransformRole {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "x_translation" => Some(TransformRole::TranslateX),
            "y_translation" => Some(TransformRole::TranslateY),
            "z_rotation" => Some(TransformRole::RotateZ),
            "length_scaling" => Some(TransformRole::ScaleLength),
            "height_scaling" => Some(TransformRole::ScaleHeight),
            _ => None,
        }
    }

    pub fn default_unit(self) -> Unit {
        match self {
            TransformRole::TranslateX | TransformRole::TranslateY => Unit::Meter,
            TransformRole::RotateZ => Unit::Radian,
            TransformRole::ScaleLength | TransformRole::ScaleHeight => Unit::Ratio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Meter,
    Radian,
    Ratio,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Meter => "m",
            Unit::Radian => "rad",
            Unit::Ratio => "1",
        }
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(Unit::Meter),
            "rad" => Ok(Unit::Radian),
            "1" => Ok(Unit::Ratio),
            other => Err(Error::Schema(format!("unknown unit `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub lower: f64,
    pub upper: f64,
    pub unit: Unit,
}

impl ParamEntry {
    pub fn role(&self) -> Option<TransformRole> {
        match self.kind {
            ParamKind::Transform => TransformRole::from_name(&self.name),
            ParamKind::Config => None,
        }
    }

    /// A parameter whose sampling range is a single point.
    pub fn is_degenerate(&self) -> bool {
        self.lower == self.upper
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Ordered parameter list of a task: transformation entries first, then
/// configuration entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSchema {
    task_name: String,
    entries: Vec<ParamEntry>,
    n_transform: usize,
}

impl ParamSchema {
    pub fn new(task_name: impl Into<String>, entries: Vec<ParamEntry>) -> Result<Self> {
        let task_name = task_name.into();
        if entries.is_empty() {
            return Err(Error::Schema(format!("`{task_name}` has no parameters")));
        }
        let n_transform = entries
            .iter()
            .take_while(|e| e.kind == ParamKind::Transform)
            .count();
        if entries[n_transform..]
            .iter()
            .any(|e| e.kind == ParamKind::Transform)
        {
            return Err(Error::Schema(
                "transform entries must precede config entries".into(),
            ));
        }
        for (i, e) in entries.iter().enumerate() {
            if !(e.lower.is_finite() && e.upper.is_finite()) || e.lower > e.upper {
                return Err(Error::Schema(format!(
                    "`{}`: invalid limits [{}, {}]",
                    e.name, e.lower, e.upper
                )));
            }
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::Schema(format!("duplicate parameter `{}`", e.name)));
            }
            if e.kind == ParamKind::Transform && e.role().is_none() {
                return Err(Error::Schema(format!(
                    "unknown transformation parameter `{}`",
                    e.name
                )));
            }
        }
        Ok(ParamSchema {
            task_name,
            entries,
            n_transform,
        })
    }

    /// Parses the plain-text schema format: an optional `task <name>` line,
    /// then one `name kind lower upper [unit]` line per parameter. `#` starts
    /// a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut task_name = None;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::Schema(format!("line {}: {msg}", lineno + 1));
            if fields[0] == "task" {
                if fields.len() != 2 {
                    return Err(bad("expected `task <name>`"));
                }
                task_name = Some(fields[1].to_string());
                continue;
            }
            if !(4..=5).contains(&fields.len()) {
                return Err(bad("expected `name kind lower upper [unit]`"));
            }
            let kind: ParamKind = fields[1].parse()?;
            let lower: f64 = fields[2].parse().map_err(|_| bad("bad lower limit"))?;
            let upper: f64 = fields[3].parse().map_err(|_| bad("bad upper limit"))?;
            let unit = match fields.get(4) {
                Some(u) => u.parse()?,
                None => TransformRole::from_name(fields[0])
                    .map(TransformRole::default_unit)
                    .unwrap_or(Unit::Meter),
            };
            entries.push(ParamEntry {
                name: fields[0].to_string(),
                kind,
                lower,
                upper,
                unit,
            });
        }
        let task_name = task_name.ok_or_else(|| Error::Schema("missing `task` line".into()))?;
        ParamSchema::new(task_name, entries)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Renders the schema in the format accepted by [`ParamSchema::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("task {}\n", self.task_name);
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {:?} {:?} {}\n",
                e.name,
                e.kind,
                e.lower,
                e.upper,
                e.unit.as_str()
            ));
        }
        out
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn transform_entries(&self) -> &[ParamEntry] {
        &self.entries[..self.n_transform]
    }

    pub fn config_entries(&self) -> &[ParamEntry] {
        &self.entries[self.n_transform..]
    }

    /// `n`, the number of transformation parameters.
    pub fn n_transform(&self) -> usize {
        self.n_transform
    }

    /// `m`, the number of configuration parameters.
    pub fn n_config(&self) -> usize {
        self.entries.len() - self.n_transform
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn has_role(&self, role: TransformRole) -> bool {
        self.transform_entries().iter().any(|e| e.role() == Some(role))
    }

    /// Whether every transform parameter is rigid (no scaling).
    pub fn is_rigid(&self) -> bool {
        !self.has_role(TransformRole::ScaleLength) && !self.has_role(TransformRole::ScaleHeight)
    }
}

/// The pair `(theta, gamma)` relating a model instance to the prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphParams {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl MorphParams {
    pub fn new(schema: &ParamSchema, theta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        check_len(schema.n_transform(), theta.len())?;
        check_len(schema.n_config(), gamma.len())?;
        Ok(MorphParams { theta, gamma })
    }

    /// The prototype parameters `theta_0 = 0, gamma_0 = 0`.
    pub fn zeros(schema: &ParamSchema) -> Self {
        MorphParams {
            theta: vec![0.0; schema.n_transform()],
            gamma: vec![0.0; schema.n_config()],
        }
    }

    /// Splits a flat `n + m` vector (network output order) into theta and gamma.
    pub fn from_flat(schema: &ParamSchema, flat: &[f64]) -> Result<Self> {
        check_len(schema.len(), flat.len())?;
        let n = schema.n_transform();
        Ok(MorphParams {
            theta: flat[..n].to_vec(),
            gamma: flat[n..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.gamma).copied().collect()
    }

    pub fn within_limits(&self, schema: &ParamSchema) -> bool {
        self.theta
            .iter()
            .chain(&self.gamma)
            .zip(schema.entries())
            .all(|(&v, e)| v >= e.lower && v <= e.upper)
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

/// `p -> linear * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine3 {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Affine3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine3 {
    pub fn new(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Affine3 {
            linear,
            translation,
        }
    }

    pub fn identity() -> Self {
        Affine3::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Affine3::new(Matrix3::identity(), Vector3::new(x, y, z))
    }

    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        #[rustfmt::skip]
        let linear = Matrix3::new(
            c, -s, 0.0,
            s, c, 0.0,
            0.0, 0.0, 1.0,
        );
        Affine3::new(linear, Vector3::zeros())
    }

    pub fn scale(x: f64, y: f64, z: f64) -> Self {
        Affine3::new(Matrix3::from_diagonal(&Vector3::new(x, y, z)), Vector3::zeros())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Affine3) -> Affine3 {
        Affine3::new(
            self.linear * other.linear,
            self.linear * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Result<Affine3> {
        let det = self.linear.determinant();
        if !det.is_finite() || det.abs() <= SINGULAR_DET {
            return Err(Error::Singular { det });
        }
        let inv = self
            .linear
            .try_inverse()
            .ok_or(Error::Singular { det })?;
        Ok(Affine3::new(inv, -(inv * self.translation)))
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.linear * p.coords + self.translation)
    }

    /// Maps every point of the cloud; the validity mask is carried over.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud
            .points
            .iter()
            .zip(&cloud.valid)
            .map(|(p, &ok)| if ok { self.transform_point(p) } else { *p })
            .collect();
        PointCloud {
            points,
            valid: cloud.valid.clone(),
        }
    }

    /// Row-major 3x4 matrix entries `[r00 r01 r02 t0 r10 ... t2]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.linear[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        let linear = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Affine3::new(linear, Vector3::new(v[3], v[7], v[11]))
    }

    /// Frobenius norm of the difference of the 3x4 matrices.
    pub fn frobenius_distance(&self, other: &Affine3) -> f64 {
        let a = self.to_row_major();
        let b = other.to_row_major();
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Affine3) -> f64 {
        let a = self.to_row_major();
        let b = other.to_row_major();
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.to_row_major().iter().all(|v| v.is_finite())
    }
}

/// Builds `T_theta` for a transformation-parameter vector.
pub fn to_affine(theta: &[f64], schema: &ParamSchema) -> Result<Affine3> {
    let entries = schema.transform_entries();
    check_len(entries.len(), theta.len())?;
    let (mut tx, mut ty, mut alpha, mut sx, mut sz) = (0.0, 0.0, 0.0, 1.0, 1.0);
    for (e, &v) in entries.iter().zip(theta) {
        match e.role().expect("schema validated transform roles") {
            TransformRole::TranslateX => tx = v,
            TransformRole::TranslateY => ty = v,
            TransformRole::RotateZ => alpha = v,
            TransformRole::ScaleLength => sx = 1.0 + v,
            TransformRole::ScaleHeight => sz = 1.0 + v,
        }
        if matches!(
            e.role(),
            Some(TransformRole::ScaleLength | TransformRole::ScaleHeight)
        ) && 1.0 + v <= 0.0
        {
            return Err(Error::NonPositiveScale {
                name: e.name.clone(),
                factor: 1.0 + v,
            });
        }
    }
    Ok(Affine3::translation(tx, ty, 0.0)
        .compose(&Affine3::rotation_z(alpha))
        .compose(&Affine3::scale(sx, 1.0, sz)))
}

/// Projects an arbitrary affine map onto the schema's parameter family.
///
/// Returns the parameter vector and the Frobenius distance between `a` and
/// the transform rebuilt from it.
pub fn extract_params(a: &Affine3, schema: &ParamSchema) -> (Vec<f64>, f64) {
    let m = &a.linear;
    let theta: Vec<f64> = schema
        .transform_entries()
        .iter()
        .map(|e| match e.role().expect("schema validated transform roles") {
            TransformRole::TranslateX => a.translation.x,
            TransformRole::TranslateY => a.translation.y,
            TransformRole::RotateZ => (-m[(0, 1)]).atan2(m[(1, 1)]),
            TransformRole::ScaleLength => m.column(0).norm() - 1.0,
            TransformRole::ScaleHeight => m[(2, 2)] - 1.0,
        })
        .collect();
    let residual = match to_affine(&theta, schema) {
        Ok(rebuilt) => a.frobenius_distance(&rebuilt),
        Err(_) => f64::INFINITY,
    };
    (theta, residual)
}

/// Signed difference `a - b` of two parameter values; rotations are wrapped
/// to `(-pi, pi]`.
pub fn param_difference(entry: &ParamEntry, a: f64, b: f64) -> f64 {
    let d = a - b;
    if entry.role() == Some(TransformRole::RotateZ) {
        wrap_angle(d)
    } else {
        d
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}
