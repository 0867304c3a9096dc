//! Parametric kinematic models: box and door geometry, instantiated from
//! morphing parameters.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{Point3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kinematics::{to_affine, MorphParams, ParamKind, ParamSchema};

const BOX_A_SCHEMA: &str = include_str!("../configs/box_a.schema");
const BOX_B_SCHEMA: &str = include_str!("../configs/box_b.schema");
const BOX_C_SCHEMA: &str = include_str!("../configs/box_c.schema");
const DOOR_SCHEMA: &str = include_str!("../configs/door.schema");
const BOX_GEOMETRY: &str = include_str!("../configs/box.task");
const DOOR_GEOMETRY: &str = include_str!("../configs/door.task");

/// Door schema variant that samples the handle position along the panel.
pub const DOOR_HANDLE_RANGE_SCHEMA: &str = include_str!("../configs/door_handle_range.schema");

pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    BoxA,
    BoxB,
    BoxC,
    Door,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::BoxA, Task::BoxB, Task::BoxC, Task::Door];

    pub fn name(self) -> &'static str {
        match self {
            Task::BoxA => "box_a",
            Task::BoxB => "box_b",
            Task::BoxC => "box_c",
            Task::Door => "door",
        }
    }

    /// Built-in definition with the shipped schema and prototype geometry.
    pub fn definition(self) -> TaskDef {
        let (schema, geometry) = match self {
            Task::BoxA => (BOX_A_SCHEMA, BOX_GEOMETRY),
            Task::BoxB => (BOX_B_SCHEMA, BOX_GEOMETRY),
            Task::BoxC => (BOX_C_SCHEMA, BOX_GEOMETRY),
            Task::Door => (DOOR_SCHEMA, DOOR_GEOMETRY),
        };
        let schema = ParamSchema::parse(schema).expect("shipped schema is valid");
        let geometry = Geometry::parse(geometry).expect("shipped geometry is valid");
        TaskDef::new(self, schema, geometry).expect("shipped task is consistent")
    }

    /// Per-layer channel counts of the regressor for this task.
    pub fn default_channels(self) -> [usize; 5] {
        match self {
            Task::BoxA | Task::BoxB => [2, 4, 6, 8, 10],
            Task::BoxC => [4, 8, 10, 12, 14],
            Task::Door => [2, 4, 8, 16, 32],
        }
    }

    /// `(n, m)` for the task.
    pub fn dimensions(self) -> (usize, usize) {
        match self {
            Task::BoxA => (2, 0),
            Task::BoxB => (3, 0),
            Task::BoxC => (5, 0),
            Task::Door => (3, 4),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Task(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDims {
    pub length: f64,
    pub depth: f64,
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoorDims {
    pub width: f64,
    pub height: f64,
    pub thickness: f64,
    pub handle_length: f64,
    pub handle_size: f64,
    pub handle_height: f64,
    pub handle_inset: f64,
    pub handle_standoff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Box(BoxDims),
    Door(DoorDims),
}

impl Geometry {
    /// Parses a `geometry <box|door>` header followed by `name value` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut values: Vec<(String, f64)> = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::Task(format!("malformed line `{line}`")));
            }
            if fields[0] == "geometry" {
                kind = Some(fields[1].to_string());
                continue;
            }
            let v: f64 = fields[1]
                .parse()
                .map_err(|_| Error::Task(format!("bad value in `{line}`")))?;
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Task(format!("`{}` must be positive", fields[0])));
            }
            values.push((fields[0].to_string(), v));
        }
        let get = |name: &str| {
            values
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Task(format!("missing dimension `{name}`")))
        };
        match kind.as_deref() {
            Some("box") => Ok(Geometry::Box(BoxDims {
                length: get("length")?,
                depth: get("depth")?,
                height: get("height")?,
            })),
            Some("door") => Ok(Geometry::Door(DoorDims {
                width: get("width")?,
                height: get("height")?,
                thickness: get("thickness")?,
                handle_length: get("handle_length")?,
                handle_size: get("handle_size")?,
                handle_height: get("handle_height")?,
                handle_inset: get("handle_inset")?,
                handle_standoff: get("handle_standoff")?,
            })),
            Some(other) => Err(Error::Task(format!("unknown geometry `{other}`"))),
            None => Err(Error::Task("missing `geometry` line".into())),
        }
    }

    fn config_names(&self) -> &'static [&'static str] {
        match self {
            Geometry::Box(_) => &[],
            Geometry::Door(_) => &["door_height", "door_width", "handle_y", "handle_z"],
        }
    }
}

/// A task: its parameter schema plus prototype geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDef {
    pub task: Task,
    pub schema: ParamSchema,
    pub geometry: Geometry,
}

impl TaskDef {
    pub fn new(task: Task, schema: ParamSchema, geometry: Geometry) -> Result<Self> {
        if schema.task_name() != task.name() {
            return Err(Error::Task(format!(
                "schema is for `{}`, not `{}`",
                schema.task_name(),
                task
            )));
        }
        let known = geometry.config_names();
        for e in schema.config_entries() {
            if !known.contains(&e.name.as_str()) {
                return Err(Error::Task(format!(
                    "`{}` is not a configuration parameter of `{task}`",
                    e.name
                )));
            }
        }
        match (task, &geometry) {
            (Task::Door, Geometry::Door(_)) => {}
            (Task::BoxA | Task::BoxB | Task::BoxC, Geometry::Box(_)) => {}
            _ => return Err(Error::Task(format!("geometry does not fit `{task}`"))),
        }
        Ok(TaskDef {
            task,
            schema,
            geometry,
        })
    }

    /// Replaces the schema, e.g. with a widened sampling range.
    pub fn with_schema(&self, schema: ParamSchema) -> Result<Self> {
        TaskDef::new(self.task, schema, self.geometry)
    }

    pub fn prototype_dimensions(&self) -> Vec<(&'static str, f64)> {
        match self.geometry {
            Geometry::Box(b) => vec![
                ("length", b.length),
                ("depth", b.depth),
                ("height", b.height),
            ],
            Geometry::Door(d) => vec![
                ("width", d.width),
                ("height", d.height),
                ("thickness", d.thickness),
                ("handle_length", d.handle_length),
                ("handle_size", d.handle_size),
                ("handle_height", d.handle_height),
                ("handle_inset", d.handle_inset),
                ("handle_standoff", d.handle_standoff),
            ],
        }
    }

    /// Center of the prototype's bounding box, used to aim the camera.
    pub fn prototype_center(&self) -> Point3<f64> {
        match self.geometry {
            Geometry::Box(b) => Point3::new(0.0, 0.0, 0.5 * b.height),
            Geometry::Door(d) => Point3::new(0.0, 0.0, 0.5 * d.height),
        }
    }

    fn config_value(&self, params: &MorphParams, name: &str) -> f64 {
        let n = self.schema.n_transform();
        self.schema
            .index_of(name)
            .filter(|&i| self.schema.entries()[i].kind == ParamKind::Config)
            .map(|i| params.gamma[i - n])
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangle(pub [Point3<f64>; 3]);

impl Triangle {
    pub fn area(&self) -> f64 {
        let [a, b, c] = self.0;
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

/// An instantiated model `m(theta, gamma)` as a world-frame triangle mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicModel {
    pub task_name: String,
    pub schema: ParamSchema,
    pub triangles: Vec<Triangle>,
}

impl KinematicModel {
    fn new(task: &TaskDef, triangles: Vec<Triangle>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::DegenerateGeometry("no triangles".into()));
        }
        for t in &triangles {
            if t.0.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
                return Err(Error::DegenerateGeometry("non-finite vertex".into()));
            }
            if t.area() <= MIN_TRIANGLE_AREA {
                return Err(Error::DegenerateGeometry(format!(
                    "triangle area {:e}",
                    t.area()
                )));
            }
        }
        Ok(KinematicModel {
            task_name: task.task.name().to_string(),
            schema: task.schema.clone(),
            triangles,
        })
    }

    pub fn vertices(&self) -> impl Iterator<Item = &Point3<f64>> {
        self.triangles.iter().flat_map(|t| t.0.iter())
    }

    /// Axis-aligned bounds `(min, max)` of all vertices.
    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::from(Vector3::repeat(f64::INFINITY));
        let mut hi = Point3::from(Vector3::repeat(f64::NEG_INFINITY));
        for p in self.vertices() {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Deterministic surface samples: each triangle is covered by a
    /// barycentric grid whose step is at most `spacing` along every edge.
    pub fn sample_surface(&self, spacing: f64) -> Vec<Point3<f64>> {
        assert!(spacing > 0.0, "sampling spacing must be positive");
        let mut out = Vec::new();
        for t in &self.triangles {
            let [a, b, c] = t.0;
            let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
            let k = (longest / spacing).ceil().max(1.0) as usize;
            for i in 0..=k {
                for j in 0..=(k - i) {
                    let u = i as f64 / k as f64;
                    let v = j as f64 / k as f64;
                    out.push(a + (b - a) * u + (c - a) * v);
                }
            }
        }
        out
    }

    /// Writes the mesh as a Wavefront OBJ (ASCII) file.
    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {}", self.task_name)?;
        for p in self.vertices() {
            writeln!(w, "v {:?} {:?} {:?}", p.x, p.y, p.z)?;
        }
        for i in 0..self.triangles.len() {
            writeln!(w, "f {} {} {}", 3 * i + 1, 3 * i + 2, 3 * i + 3)?;
        }
        Ok(())
    }
}

/// Twelve triangles of the axis-aligned cuboid spanning `lo..hi`.
fn cuboid(lo: Point3<f64>, hi: Point3<f64>, out: &mut Vec<Triangle>) {
    let corner = |i: usize| {
        Point3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        )
    };
    const FACES: [[usize; 4]; 6] = [
        [0, 2, 3, 1], // z = lo
        [4, 5, 7, 6], // z = hi
        [0, 1, 5, 4], // y = lo
        [2, 6, 7, 3], // y = hi
        [0, 4, 6, 2], // x = lo
        [1, 3, 7, 5], // x = hi
    ];
    for [a, b, c, d] in FACES {
        out.push(Triangle([corner(a), corner(b), corner(c)]));
        out.push(Triangle([corner(a), corner(c), corner(d)]));
    }
}

/// Builds `m(theta, gamma)`: the prototype reshaped by `gamma`, then mapped
/// by `T_theta`.
pub fn instantiate(task: &TaskDef, params: &MorphParams) -> Result<KinematicModel> {
    let schema = &task.schema;
    if params.theta.len() != schema.n_transform() || params.gamma.len() != schema.n_config() {
        return Err(Error::DimensionMismatch {
            expected: schema.len(),
            actual: params.theta.len() + params.gamma.len(),
        });
    }
    let mut triangles = Vec::new();
    match task.geometry {
        Geometry::Box(b) => cuboid(
            Point3::new(-0.5 * b.length, -0.5 * b.depth, 0.0),
            Point3::new(0.5 * b.length, 0.5 * b.depth, b.height),
            &mut triangles,
        ),
        Geometry::Door(d) => door_mesh(task, &d, params, &mut triangles)?,
    }
    let transform = to_affine(&params.theta, schema)?;
    for t in &mut triangles {
        for p in &mut t.0 {
            *p = transform.transform_point(p);
        }
    }
    KinematicModel::new(task, triangles)
}

fn door_mesh(
    task: &TaskDef,
    d: &DoorDims,
    params: &MorphParams,
    out: &mut Vec<Triangle>,
) -> Result<()> {
    let height = d.height + task.config_value(params, "door_height");
    let width = d.width + task.config_value(params, "door_width");
    if height <= 0.0 || width <= 0.0 {
        return Err(Error::DegenerateGeometry(format!(
            "door panel {width} x {height} m"
        )));
    }
    let hinge_x = -0.5 * d.width;
    let free_x = hinge_x + width;
    let handle_x = free_x - d.handle_inset - task.config_value(params, "handle_y");
    let handle_z = d.handle_height + task.config_value(params, "handle_z");
    let half_len = 0.5 * d.handle_length;
    let half_size = 0.5 * d.handle_size;
    if handle_x - half_len < hinge_x
        || handle_x + half_len > free_x
        || handle_z - half_size < 0.0
        || handle_z + half_size > height
    {
        return Err(Error::DegenerateGeometry(
            "handle does not fit on the panel".into(),
        ));
    }
    let face_y = -0.5 * d.thickness;
    cuboid(
        Point3::new(hinge_x, face_y, 0.0),
        Point3::new(free_x, -face_y, height),
        out,
    );
    // Stem from the panel face to the bar.
    cuboid(
        Point3::new(handle_x - half_size, face_y - d.handle_standoff, handle_z - half_size),
        Point3::new(handle_x + half_size, face_y, handle_z + half_size),
        out,
    );
    cuboid(
        Point3::new(
            handle_x - half_len,
            face_y - d.handle_standoff - d.handle_size,
            handle_z - half_size,
        ),
        Point3::new(handle_x + half_len, face_y - d.handle_standoff, handle_z + half_size),
        out,
    );
    Ok(())
}

/// The reference model `m(0, 0)`.
pub fn prototype(task: &TaskDef) -> KinematicModel {
    instantiate(task, &MorphParams::zeros(&task.schema)).expect("prototype geometry is valid")
}

/// Draws each parameter independently and uniformly from its limits.
pub fn sample_params<R: Rng + ?Sized>(schema: &ParamSchema, rng: &mut R) -> MorphParams {
    let flat: Vec<f64> = schema
        .entries()
        .iter()
        .map(|e| {
            let u: f64 = rng.random();
            if e.is_degenerate() {
                e.lower
            } else {
                e.lower + u * (e.upper - e.lower)
            }
        })
        .collect();
    MorphParams::from_flat(schema, &flat).expect("one value per entry")
}
