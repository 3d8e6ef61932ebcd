//! Point clouds: PLY I/O, unit-sphere normalization, z-buffer splatting
//! into depth maps, and synthetic scenes with ground-truth colors.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{project, unproject, Vec3, View};
use crate::raster::{DepthMap, Image};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>) -> Self {
        Self {
            positions,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("point cloud positions".into()));
        }
        if let Some(c) = &self.colors {
            if c.len() != self.positions.len() {
                return Err(Error::shape(self.positions.len(), c.len()));
            }
        }
        Ok(())
    }

    pub fn load_ply(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_ply(&mut std::io::BufReader::new(file))
    }

    /// Writes binary little-endian PLY with double positions and, when
    /// present, uchar colors.
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        write_ply(self, &mut out);
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::PlyPropertyType(other.to_string())),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
    has_list: bool,
}

#[derive(Debug, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

fn read_ply<R: BufRead>(reader: &mut R) -> Result<PointCloud> {
    let mut line = String::new();
    let next_line = |reader: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        let n = reader.read_line(line).map_err(|e| Error::PlyHeader(e.to_string()))?;
        if n == 0 {
            return Err(Error::PlyHeader("unexpected end of header".into()));
        }
        Ok(())
    };

    next_line(reader, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::PlyHeader("missing `ply` magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next_line(reader, &mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => return Err(Error::PlyHeader(format!("unsupported format `{other}`"))),
                });
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::PlyHeader(format!("bad element count `{count}`")))?,
                props: Vec::new(),
                has_list: false,
            }),
            ["property", "list", count_ty, item_ty, name] => {
                Scalar::parse(count_ty)?;
                Scalar::parse(item_ty)?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::PlyHeader("property before any element".into()))?;
                if el.name == "vertex" {
                    return Err(Error::PlyPropertyType(format!("list property `{name}` on vertex")));
                }
                el.has_list = true;
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty)?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::PlyHeader("property before any element".into()))?
                    .props
                    .push((name.to_string(), ty));
            }
            _ => return Err(Error::PlyHeader(format!("unrecognized line `{}`", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| Error::PlyHeader("missing format line".into()))?;
    let vertex_idx = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::PlyHeader("no vertex element".into()))?;
    let vertex = &elements[vertex_idx];
    let find = |n: &str| vertex.props.iter().position(|(p, _)| p == n);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(Error::PlyHeader("vertex element lacks x/y/z".into()));
    };
    for i in [ix, iy, iz] {
        if !matches!(vertex.props[i].1, Scalar::F32 | Scalar::F64) {
            return Err(Error::PlyPropertyType(format!(
                "coordinate `{}` must be float or double",
                vertex.props[i].0
            )));
        }
    }
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let color_divisor = |ty: Scalar| if ty == Scalar::U8 { 255.0 } else { 1.0 };

    // Elements ahead of the vertices must be skipped.
    let mut body = Vec::new();
    let mut ascii_lines: Vec<String> = Vec::new();
    match format {
        Format::BinaryLe => {
            reader
                .read_to_end(&mut body)
                .map_err(|e| Error::PlyTruncated(e.to_string()))?;
        }
        Format::Ascii => {
            for l in reader.lines() {
                let l = l.map_err(|e| Error::PlyTruncated(e.to_string()))?;
                if !l.trim().is_empty() {
                    ascii_lines.push(l);
                }
            }
        }
    }

    let mut values = vec![0.0; vertex.props.len()];
    let mut positions = Vec::with_capacity(vertex.count);
    let mut colors = rgb.map(|_| Vec::with_capacity(vertex.count));
    let mut push_vertex = |values: &[f64]| {
        positions.push(Vec3::new(values[ix], values[iy], values[iz]));
        if let (Some(cols), Some([r, g, b])) = (colors.as_mut(), rgb) {
            cols.push([
                values[r] / color_divisor(vertex.props[r].1),
                values[g] / color_divisor(vertex.props[g].1),
                values[b] / color_divisor(vertex.props[b].1),
            ]);
        }
    };

    match format {
        Format::BinaryLe => {
            let mut offset = 0;
            for el in &elements[..vertex_idx] {
                if el.has_list {
                    return Err(Error::PlyPropertyType(format!(
                        "list properties in element `{}` ahead of vertices",
                        el.name
                    )));
                }
                offset += el.count * el.props.iter().map(|(_, t)| t.size()).sum::<usize>();
            }
            let stride: usize = vertex.props.iter().map(|(_, t)| t.size()).sum();
            let needed = offset + stride * vertex.count;
            if body.len() < needed {
                return Err(Error::PlyTruncated(format!(
                    "expected at least {needed} body bytes, found {}",
                    body.len()
                )));
            }
            for v in 0..vertex.count {
                let mut at = offset + v * stride;
                for (slot, (_, ty)) in values.iter_mut().zip(&vertex.props) {
                    *slot = ty.decode_le(&body[at..at + ty.size()]);
                    at += ty.size();
                }
                push_vertex(&values);
            }
        }
        Format::Ascii => {
            let skip: usize = elements[..vertex_idx].iter().map(|e| e.count).sum();
            if ascii_lines.len() < skip + vertex.count {
                return Err(Error::PlyTruncated(format!(
                    "expected {} vertex lines, found {}",
                    vertex.count,
                    ascii_lines.len().saturating_sub(skip)
                )));
            }
            for (v, l) in ascii_lines[skip..skip + vertex.count].iter().enumerate() {
                let fields: Vec<&str> = l.split_whitespace().collect();
                if fields.len() < values.len() {
                    return Err(Error::PlyTruncated(format!("vertex {v} has too few fields")));
                }
                for (slot, f) in values.iter_mut().zip(&fields) {
                    *slot = f
                        .parse()
                        .map_err(|_| Error::PlyTruncated(format!("vertex {v}: bad number `{f}`")))?;
                }
                push_vertex(&values);
            }
        }
    }
    let cloud = PointCloud { positions, colors };
    cloud.validate()?;
    Ok(cloud)
}

fn write_ply(cloud: &PointCloud, out: &mut Vec<u8>) {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        cloud.len()
    );
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes()).expect("write to Vec");
    for (i, p) in cloud.positions.iter().enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(colors) = &cloud.colors {
            for c in colors[i] {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
}

/// Centers the cloud on its centroid and scales the farthest point to
/// radius 1. Returns `(normalized, center, scale)` with
/// `p' = (p − center) · scale`; a zero-extent cloud keeps `scale = 1`.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<(PointCloud, Vec3, f64)> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let center = cloud.positions.iter().sum::<Vec3>() / cloud.len() as f64;
    let max_r = cloud.positions.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
    let scale = if max_r > 0.0 { 1.0 / max_r } else { 1.0 };
    let positions = cloud.positions.iter().map(|p| (p - center) * scale).collect();
    Ok((
        PointCloud {
            positions,
            colors: cloud.colors.clone(),
        },
        center,
        scale,
    ))
}

/// Default splat radius: one pixel at 64×64, proportional to resolution.
pub fn default_splat_radius(width: usize) -> f64 {
    width as f64 / 64.0
}

/// Z-buffer splatting. Each point covers the pixels within `splat_radius`
/// of its projection (the single nearest pixel when the radius is 0) and
/// every pixel keeps the smallest depth among its covering points.
pub fn render_depth(cloud: &PointCloud, view: &View, splat_radius: f64) -> DepthMap {
    let (w, h) = (view.width(), view.height());
    let mut zbuf = vec![f64::INFINITY; w * h];
    let r = splat_radius.max(0.0);
    for p in &cloud.positions {
        let Ok((px, depth)) = project(p, view) else {
            continue;
        };
        if r == 0.0 {
            let (x, y) = (px.x.round(), px.y.round());
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let i = y as usize * w + x as usize;
                zbuf[i] = zbuf[i].min(depth);
            }
            continue;
        }
        let x_lo = (px.x - r).ceil().max(0.0);
        let x_hi = (px.x + r).floor().min((w - 1) as f64);
        let y_lo = (px.y - r).ceil().max(0.0);
        let y_hi = (px.y + r).floor().min((h - 1) as f64);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        for y in y_lo as usize..=y_hi as usize {
            for x in x_lo as usize..=x_hi as usize {
                let (dx, dy) = (x as f64 - px.x, y as f64 - px.y);
                if dx * dx + dy * dy <= r * r {
                    let i = y * w + x;
                    zbuf[i] = zbuf[i].min(depth);
                }
            }
        }
    }
    let data = zbuf
        .into_iter()
        .map(|d| if d.is_finite() { d } else { DepthMap::INVALID })
        .collect();
    DepthMap::from_vec(w, h, data).expect("dims match by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Sphere,
    TwoSpheres,
    BoxPlusSphere,
}

impl SceneKind {
    /// Noun phrase used in captions for this scene.
    pub fn subject(self) -> &'static str {
        match self {
            SceneKind::Sphere => "a sphere",
            SceneKind::TwoSpheres => "two spheres",
            SceneKind::BoxPlusSphere => "a box and a sphere",
        }
    }
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(SceneKind::Sphere),
            "two_spheres" => Ok(SceneKind::TwoSpheres),
            "box_plus_sphere" => Ok(SceneKind::BoxPlusSphere),
            other => Err(Error::Config(format!("unknown scene kind `{other}`"))),
        }
    }
}

/// Ground-truth surface color of a synthetic scene: a vertical ramp from a
/// darker bottom to a lighter top over the scene's height range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Colorizer {
    pub y_min: f64,
    pub y_max: f64,
    pub bottom: [f64; 3],
    pub top: [f64; 3],
}

impl Colorizer {
    pub fn color(&self, p: &Vec3) -> [f64; 3] {
        let s = ((p.y - self.y_min) / (self.y_max - self.y_min)).clamp(0.0, 1.0);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = self.bottom[k] + (self.top[k] - self.bottom[k]) * s;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub kind: SceneKind,
    pub cloud: PointCloud,
    pub colorizer: Colorizer,
}

impl SynthScene {
    /// Ground-truth image and depth of the scene from `view`, over a
    /// constant background.
    pub fn render_view(&self, view: &View, splat_radius: f64, background: [f64; 3]) -> (Image, DepthMap) {
        let depth = render_depth(&self.cloud, view, splat_radius);
        let image = Image::from_fn(view.width(), view.height(), |x, y| {
            let d = depth.get(x, y);
            if d <= 0.0 {
                return background;
            }
            let p = unproject(&Vector2::new(x as f64, y as f64), d, view).expect("valid depth");
            self.colorizer.color(&p)
        });
        (image, depth)
    }
}

fn sphere_points<R: Rng + ?Sized>(center: Vec3, radius: f64, n: usize, rng: &mut R) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let v = loop {
                let v = Vec3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                if v.norm() > 1e-6 {
                    break v;
                }
            };
            center + v.normalize() * radius
        })
        .collect()
}

fn box_points<R: Rng + ?Sized>(center: Vec3, half: f64, n: usize, rng: &mut R) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let face = rng.gen_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = Vec3::new(
                rng.gen_range(-half..=half),
                rng.gen_range(-half..=half),
                rng.gen_range(-half..=half),
            );
            p[axis] = sign * half;
            center + p
        })
        .collect()
}

/// Builds a synthetic scene with about `points_per_unit` surface points per
/// square meter. Deterministic for a given generator state.
pub fn synth_scene<R: Rng + ?Sized>(kind: SceneKind, points_per_unit: f64, rng: &mut R) -> Result<SynthScene> {
    if !(points_per_unit > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "point density must be positive, got {points_per_unit}"
        )));
    }
    let area_count = |area: f64| ((area * points_per_unit).ceil() as usize).max(1);
    let sphere_area = |r: f64| 4.0 * std::f64::consts::PI * r * r;
    let (positions, y_min, y_max) = match kind {
        SceneKind::Sphere => (
            sphere_points(Vec3::zeros(), 1.0, area_count(sphere_area(1.0)), rng),
            -1.0,
            1.0,
        ),
        SceneKind::TwoSpheres => {
            let n = area_count(sphere_area(0.5));
            let mut pts = sphere_points(Vec3::new(-0.6, 0.0, 0.0), 0.5, n, rng);
            pts.extend(sphere_points(Vec3::new(0.6, 0.0, 0.0), 0.5, n, rng));
            (pts, -0.5, 0.5)
        }
        SceneKind::BoxPlusSphere => {
            let half = 0.35;
            let mut pts = box_points(Vec3::new(-0.45, -0.15, 0.0), half, area_count(24.0 * half * half), rng);
            pts.extend(sphere_points(
                Vec3::new(0.45, 0.0, 0.0),
                0.4,
                area_count(sphere_area(0.4)),
                rng,
            ));
            (pts, -0.5, 0.4)
        }
    };
    Ok(SynthScene {
        kind,
        cloud: PointCloud::new(positions),
        colorizer: Colorizer {
            y_min,
            y_max,
            bottom: [0.8, 0.05, 0.05],
            top: [1.0, 0.2, 0.1],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Intrinsics, OrbitSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn axis_view(w: usize) -> View {
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0, w, w).unwrap();
        View::new(
            k,
            look_at(&Vec3::new(0.0, 0.0, 2.0), &Vec3::zeros(), &Vec3::y()).unwrap(),
            "axis",
        )
    }

    fn parse(text: &str) -> Result<PointCloud> {
        read_ply(&mut std::io::Cursor::new(text.as_bytes().to_vec()))
    }

    #[test]
    fn ascii_ply_parses_exactly() {
        let cloud = parse(
            "ply\nformat ascii 1.0\ncomment hi\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 2 3\n-0.5 0.25 4\n",
        )
        .unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.positions[2], Vec3::new(-0.5, 0.25, 4.0));
        assert!(cloud.colors.is_none());
    }

    #[test]
    fn ascii_ply_with_colors_and_faces() {
        let cloud = parse(
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255 0 51\n1 1 1 0 255 0\n3 0 1 1\n",
        )
        .unwrap();
        assert_eq!(cloud.colors.unwrap()[0], [1.0, 0.0, 0.2]);
    }

    #[test]
    fn ply_errors_are_distinct() {
        let no_vertex = "ply\nformat ascii 1.0\nelement face 0\nproperty float x\nend_header\n";
        assert!(matches!(parse(no_vertex), Err(Error::PlyHeader(_))));
        let bad_type = "ply\nformat ascii 1.0\nelement vertex 1\nproperty quaternion x\nend_header\n";
        assert!(matches!(parse(bad_type), Err(Error::PlyPropertyType(_))));
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(matches!(parse(short), Err(Error::PlyTruncated(_))));
        assert!(matches!(parse("plx\n"), Err(Error::PlyHeader(_))));
    }

    #[test]
    fn binary_ply_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cloud = synth_scene(SceneKind::TwoSpheres, 50.0, &mut rng).unwrap().cloud;
        cloud.colors = Some((0..cloud.len()).map(|i| [(i % 256) as f64 / 255.0, 0.0, 1.0]).collect());
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
        cloud.save_ply(&a).unwrap();
        let back = PointCloud::load_ply(&a).unwrap();
        assert_eq!(back, cloud);
        back.save_ply(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let mut bytes = std::fs::read(&a).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&b, bytes).unwrap();
        assert!(matches!(PointCloud::load_ply(&b), Err(Error::PlyTruncated(_))));
    }

    #[test]
    fn normalization_conventions() {
        assert!(matches!(
            normalize_unit_sphere(&PointCloud::default()),
            Err(Error::EmptyCloud)
        ));

        let (one, c, s) = normalize_unit_sphere(&PointCloud::new(vec![Vec3::new(3.0, -1.0, 2.0)])).unwrap();
        assert_eq!(one.positions[0], Vec3::zeros());
        assert_eq!(c, Vec3::new(3.0, -1.0, 2.0));
        assert_eq!(s, 1.0);

        let pair = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)]);
        let (out, c, s) = normalize_unit_sphere(&pair).unwrap();
        assert_eq!((out, c, s), (pair, Vec3::zeros(), 1.0));

        let mut corners = Vec::new();
        for i in 0..8 {
            let f = |b: usize| if i & b == 0 { -3.0 } else { 3.0 };
            corners.push(Vec3::new(f(1), f(2), f(4)) + Vec3::new(10.0, 0.0, 0.0));
        }
        let (out, c, s) = normalize_unit_sphere(&PointCloud::new(corners)).unwrap();
        assert!((c - Vec3::new(10.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((s - 1.0 / (3.0 * 3f64.sqrt())).abs() < 1e-12);
        let max = out.positions.iter().map(|p| p.norm()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        for p in &out.positions {
            assert!((p.x.abs() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn splatting_basics() {
        let v = axis_view(64);
        assert_eq!(render_depth(&PointCloud::default(), &v, 1.0).valid_count(), 0);

        let one = render_depth(&PointCloud::new(vec![Vec3::zeros()]), &v, 0.0);
        assert_eq!(one.valid_count(), 1);
        assert_eq!(one.get(32, 32), 2.0);

        let same_ray = PointCloud::new(vec![Vec3::new(0.0, 0.0, -0.5), Vec3::new(0.0, 0.0, 0.5)]);
        let d = render_depth(&same_ray, &v, 1.0);
        assert_eq!(d.get(32, 32), 1.5);
        assert_eq!(d.valid_count(), 5);
    }

    #[test]
    fn splatting_matches_brute_force_min_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = synth_scene(SceneKind::BoxPlusSphere, 300.0, &mut rng).unwrap();
        let view = OrbitSpec::default()
            .with_azimuth(37.0)
            .view(Intrinsics::default_for(32, 32))
            .unwrap();
        let r = 1.5;
        let depth = render_depth(&scene.cloud, &view, r);
        let projected: Vec<_> = scene
            .cloud
            .positions
            .iter()
            .filter_map(|p| project(p, &view).ok())
            .collect();
        for y in 0..32 {
            for x in 0..32 {
                let best = projected
                    .iter()
                    .filter(|(q, _)| (q.x - x as f64).powi(2) + (q.y - y as f64).powi(2) <= r * r)
                    .map(|(_, d)| *d)
                    .fold(f64::INFINITY, f64::min);
                let got = depth.get(x, y);
                if best.is_finite() {
                    assert_eq!(got, best);
                } else {
                    assert_eq!(got, DepthMap::INVALID);
                }
                if got > 0.0 {
                    // unproject/reproject stays within the splat footprint
                    let w = unproject(&Vector2::new(x as f64, y as f64), got, &view).unwrap();
                    let (q, _) = project(&w, &view).unwrap();
                    assert!(((q.x - x as f64).powi(2) + (q.y - y as f64).powi(2)).sqrt() <= r + 0.5);
                }
            }
        }
    }

    #[test]
    fn synthetic_scenes_are_constructed_as_documented() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = synth_scene(SceneKind::Sphere, 100.0, &mut rng).unwrap();
        assert!(s.cloud.positions.iter().all(|p| (p.norm() - 1.0).abs() < 1e-6));

        let t = synth_scene(SceneKind::TwoSpheres, 100.0, &mut rng).unwrap();
        for p in &t.cloud.positions {
            let c = Vec3::new(0.6f64.copysign(p.x), 0.0, 0.0);
            assert!(((p - c).norm() - 0.5).abs() < 1e-6);
        }
        let left = t.cloud.positions.iter().filter(|p| p.x < 0.0).count();
        assert_eq!(left * 2, t.cloud.len());

        let a = synth_scene(SceneKind::BoxPlusSphere, 100.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_scene(SceneKind::BoxPlusSphere, 100.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(synth_scene(SceneKind::Sphere, 0.0, &mut rng).is_err());
    }

    #[test]
    fn ground_truth_views_use_the_colorizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = synth_scene(SceneKind::TwoSpheres, 3000.0, &mut rng).unwrap();
        let view = OrbitSpec::default().view(Intrinsics::default_for(32, 32)).unwrap();
        let (img, depth) = scene.render_view(&view, 0.5, [1.0, 1.0, 1.0]);
        assert!(depth.valid_count() > 50);
        assert_eq!(img.pixel(0, 0), [1.0, 1.0, 1.0]);
        let c = scene.colorizer.color(&Vec3::new(0.0, 0.5, 0.0));
        for (a, b) in c.iter().zip([1.0, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
