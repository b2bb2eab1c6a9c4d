//! COLMAP sparse-model I/O and field initialization from SfM points.
//!
//! Both the text (`cameras.txt`, `images.txt`, `points3D.txt`) and binary
//! (`*.bin`, little-endian) layouts are supported. Only pinhole camera models
//! are accepted; inputs are expected to be undistorted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{logit, rgb_to_sh_dc, sh_coeff_count, Camera, Gaussian, GaussianField};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfmFormat {
    Text,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
}

impl CameraModel {
    fn id(self) -> i32 {
        match self {
            CameraModel::SimplePinhole => 0,
            CameraModel::Pinhole => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
        }
    }

    fn param_count(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
        }
    }

    fn from_id(id: i32) -> Option<Self> {
        match id {
            0 => Some(CameraModel::SimplePinhole),
            1 => Some(CameraModel::Pinhole),
            _ => None,
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name {
            "SIMPLE_PINHOLE" => Some(CameraModel::SimplePinhole),
            "PINHOLE" => Some(CameraModel::Pinhole),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRecord {
    pub model: CameraModel,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
    pub point3d_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    /// World-to-camera rotation (w, x, y, z).
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
    pub points2d: Vec<Point2D>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point3D {
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    /// (image id, point2D index) observations.
    pub track: Vec<(u32, u32)>,
}

/// In-memory sparse reconstruction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SfmModel {
    pub cameras: BTreeMap<u32, CameraRecord>,
    pub images: BTreeMap<u32, ImageRecord>,
    pub points: BTreeMap<u64, Point3D>,
}

impl SfmModel {
    pub fn validate(&self) -> Result<()> {
        for (id, img) in &self.images {
            if !self.cameras.contains_key(&img.camera_id) {
                return Err(Error::InvalidInput(format!(
                    "image {id} references missing camera {}",
                    img.camera_id
                )));
            }
        }
        for (id, cam) in &self.cameras {
            if cam.params.len() != cam.model.param_count() {
                return Err(Error::InvalidInput(format!("camera {id} has wrong parameter count")));
            }
        }
        Ok(())
    }

    /// Cameras for every registered image, ordered by image id.
    pub fn cameras_by_image(&self) -> Result<Vec<(String, Camera)>> {
        self.images
            .values()
            .map(|img| {
                let rec = self.cameras.get(&img.camera_id).ok_or_else(|| {
                    Error::InvalidInput(format!("missing camera {}", img.camera_id))
                })?;
                let (fx, fy, cx, cy) = match rec.model {
                    CameraModel::SimplePinhole => (rec.params[0], rec.params[0], rec.params[1], rec.params[2]),
                    CameraModel::Pinhole => (rec.params[0], rec.params[1], rec.params[2], rec.params[3]),
                };
                let cam = Camera {
                    fx,
                    fy,
                    cx,
                    cy,
                    width: rec.width as usize,
                    height: rec.height as usize,
                    rotation: img.qvec,
                    translation: img.tvec,
                };
                Ok((img.name.clone(), cam))
            })
            .collect()
    }
}

const FILES: [&str; 3] = ["cameras", "images", "points3D"];

fn file_name(stem: &str, format: SfmFormat) -> String {
    match format {
        SfmFormat::Text => format!("{stem}.txt"),
        SfmFormat::Binary => format!("{stem}.bin"),
    }
}

/// Reads a sparse model from `dir`.
pub fn parse_sfm(dir: &Path, format: SfmFormat) -> Result<SfmModel> {
    let read = |stem: &str| -> Result<Vec<u8>> {
        let path = dir.join(file_name(stem, format));
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path),
            _ => Error::Io(e),
        })
    };
    let [cams, imgs, pts] = FILES.map(read);
    let (cams, imgs, pts) = (cams?, imgs?, pts?);
    let model = match format {
        SfmFormat::Text => SfmModel {
            cameras: text::cameras(&utf8(&cams, "cameras.txt")?)?,
            images: text::images(&utf8(&imgs, "images.txt")?)?,
            points: text::points(&utf8(&pts, "points3D.txt")?)?,
        },
        SfmFormat::Binary => SfmModel {
            cameras: binary::cameras(&cams)?,
            images: binary::images(&imgs)?,
            points: binary::points(&pts)?,
        },
    };
    model.validate()?;
    Ok(model)
}

fn utf8<'a>(bytes: &'a [u8], file: &str) -> Result<&'a str> {
    std::str::from_utf8(bytes)
        .map_err(|e| Error::parse_byte(file, e.valid_up_to() as u64, "invalid UTF-8"))
}

/// Writes `model` into `dir` (created if needed).
pub fn serialize_sfm(model: &SfmModel, dir: &Path, format: SfmFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blobs: [Vec<u8>; 3] = match format {
        SfmFormat::Text => [
            text::write_cameras(model).into_bytes(),
            text::write_images(model).into_bytes(),
            text::write_points(model).into_bytes(),
        ],
        SfmFormat::Binary => [
            binary::write_cameras(model),
            binary::write_images(model),
            binary::write_points(model),
        ],
    };
    for (stem, blob) in FILES.iter().zip(blobs) {
        fs::write(dir.join(file_name(stem, format)), blob)?;
    }
    Ok(())
}

mod text {
    use super::*;

    /// Non-comment lines with their 1-based line numbers.
    fn lines(src: &str) -> Vec<(usize, &str)> {
        let mut out: Vec<(usize, &str)> = src
            .split('\n')
            .enumerate()
            .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
            .filter(|(_, l)| !l.starts_with('#'))
            .collect();
        if src.ends_with('\n') || src.is_empty() {
            out.pop();
        }
        out
    }

    fn num<T: std::str::FromStr>(tok: Option<&str>, file: &str, line: usize, what: &str) -> Result<T> {
        tok.ok_or_else(|| Error::parse_line(file, line, format!("missing {what}")))?
            .parse()
            .map_err(|_| Error::parse_line(file, line, format!("malformed {what}")))
    }

    pub fn cameras(src: &str) -> Result<BTreeMap<u32, CameraRecord>> {
        const F: &str = "cameras.txt";
        let mut out = BTreeMap::new();
        for (ln, line) in lines(src) {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let id: u32 = num(it.next(), F, ln, "camera id")?;
            let model_name = it.next().ok_or_else(|| Error::parse_line(F, ln, "missing model"))?;
            let model = CameraModel::from_name(model_name)
                .ok_or_else(|| Error::Unsupported(format!("camera model {model_name}")))?;
            let width = num(it.next(), F, ln, "width")?;
            let height = num(it.next(), F, ln, "height")?;
            let params = it
                .map(|t| t.parse().map_err(|_| Error::parse_line(F, ln, "malformed camera parameter")))
                .collect::<Result<Vec<f64>>>()?;
            if params.len() != model.param_count() {
                return Err(Error::parse_line(F, ln, format!("{} expects {} parameters", model.name(), model.param_count())));
            }
            out.insert(id, CameraRecord { model, width, height, params });
        }
        Ok(out)
    }

    pub fn images(src: &str) -> Result<BTreeMap<u32, ImageRecord>> {
        const F: &str = "images.txt";
        let mut out = BTreeMap::new();
        let all = lines(src);
        let mut i = 0;
        while i < all.len() {
            let (ln, line) = all[i];
            if line.trim().is_empty() {
                i += 1;
                continue;
            }
            let mut it = line.split_whitespace();
            let id: u32 = num(it.next(), F, ln, "image id")?;
            let mut q = [0.0; 4];
            for v in q.iter_mut() {
                *v = num(it.next(), F, ln, "quaternion")?;
            }
            let mut t = [0.0; 3];
            for v in t.iter_mut() {
                *v = num(it.next(), F, ln, "translation")?;
            }
            let camera_id = num(it.next(), F, ln, "camera id")?;
            let name = it.next().ok_or_else(|| Error::parse_line(F, ln, "missing image name"))?.to_string();
            let mut points2d = Vec::new();
            if let Some(&(pln, pline)) = all.get(i + 1) {
                let toks: Vec<&str> = pline.split_whitespace().collect();
                if toks.len() % 3 != 0 {
                    return Err(Error::parse_line(F, pln, "POINTS2D entries must be (X, Y, POINT3D_ID) triples"));
                }
                for tri in toks.chunks_exact(3) {
                    let x = num(Some(tri[0]), F, pln, "point x")?;
                    let y = num(Some(tri[1]), F, pln, "point y")?;
                    let pid: i64 = num(Some(tri[2]), F, pln, "point3D id")?;
                    points2d.push(Point2D { x, y, point3d_id: (pid >= 0).then_some(pid as u64) });
                }
            }
            out.insert(id, ImageRecord { qvec: q, tvec: t, camera_id, name, points2d });
            i += 2;
        }
        Ok(out)
    }

    pub fn points(src: &str) -> Result<BTreeMap<u64, Point3D>> {
        const F: &str = "points3D.txt";
        let mut out = BTreeMap::new();
        for (ln, line) in lines(src) {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let id: u64 = num(it.next(), F, ln, "point id")?;
            let mut xyz = [0.0; 3];
            for v in xyz.iter_mut() {
                *v = num(it.next(), F, ln, "coordinate")?;
            }
            let mut rgb = [0u8; 3];
            for v in rgb.iter_mut() {
                *v = num(it.next(), F, ln, "color")?;
            }
            let error = num(it.next(), F, ln, "error")?;
            let rest: Vec<&str> = it.collect();
            if rest.len() % 2 != 0 {
                return Err(Error::parse_line(F, ln, "track entries must be (IMAGE_ID, POINT2D_IDX) pairs"));
            }
            let track = rest
                .chunks_exact(2)
                .map(|p| Ok((num(Some(p[0]), F, ln, "track image id")?, num(Some(p[1]), F, ln, "track point index")?)))
                .collect::<Result<Vec<_>>>()?;
            out.insert(id, Point3D { xyz, rgb, error, track });
        }
        Ok(out)
    }

    pub fn write_cameras(m: &SfmModel) -> String {
        let mut s = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
        let _ = writeln!(s, "# Number of cameras: {}", m.cameras.len());
        for (id, c) in &m.cameras {
            let _ = write!(s, "{id} {} {} {}", c.model.name(), c.width, c.height);
            for p in &c.params {
                let _ = write!(s, " {p:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_images(m: &SfmModel) -> String {
        let mut s = String::from(
            "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
        );
        let _ = writeln!(s, "# Number of images: {}", m.images.len());
        for (id, im) in &m.images {
            let [qw, qx, qy, qz] = im.qvec;
            let [tx, ty, tz] = im.tvec;
            let _ = writeln!(s, "{id} {qw:?} {qx:?} {qy:?} {qz:?} {tx:?} {ty:?} {tz:?} {} {}", im.camera_id, im.name);
            let pts: Vec<String> = im
                .points2d
                .iter()
                .map(|p| {
                    let pid = p.point3d_id.map_or(-1i128, |v| v as i128);
                    format!("{:?} {:?} {pid}", p.x, p.y)
                })
                .collect();
            s.push_str(&pts.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write_points(m: &SfmModel) -> String {
        let mut s = String::from(
            "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
        );
        let _ = writeln!(s, "# Number of points: {}", m.points.len());
        for (id, p) in &m.points {
            let [x, y, z] = p.xyz;
            let [r, g, b] = p.rgb;
            let _ = write!(s, "{id} {x:?} {y:?} {z:?} {r} {g} {b} {:?}", p.error);
            for (img, idx) in &p.track {
                let _ = write!(s, " {img} {idx}");
            }
            s.push('\n');
        }
        s
    }
}

mod binary {
    use super::*;

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
        file: &'static str,
    }

    impl<'a> Reader<'a> {
        fn new(buf: &'a [u8], file: &'static str) -> Self {
            Reader { buf, pos: 0, file }
        }

        fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
            let end = self.pos + N;
            let bytes = self
                .buf
                .get(self.pos..end)
                .ok_or_else(|| Error::parse_byte(self.file, self.pos as u64, format!("truncated {what}")))?;
            self.pos = end;
            Ok(bytes.try_into().expect("slice length checked"))
        }

        fn u8(&mut self, what: &str) -> Result<u8> {
            Ok(self.take::<1>(what)?[0])
        }
        fn u32(&mut self, what: &str) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(what)?))
        }
        fn i32(&mut self, what: &str) -> Result<i32> {
            Ok(i32::from_le_bytes(self.take(what)?))
        }
        fn u64(&mut self, what: &str) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(what)?))
        }
        fn f64(&mut self, what: &str) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(what)?))
        }

        fn cstring(&mut self) -> Result<String> {
            let start = self.pos;
            let len = self.buf[start..]
                .iter()
                .position(|&b| b == 0)
                .ok_or_else(|| Error::parse_byte(self.file, start as u64, "unterminated image name"))?;
            self.pos = start + len + 1;
            String::from_utf8(self.buf[start..start + len].to_vec())
                .map_err(|_| Error::parse_byte(self.file, start as u64, "image name is not UTF-8"))
        }

        /// Guards element counts against the remaining buffer size.
        fn count(&mut self, what: &str, min_elem_bytes: usize) -> Result<usize> {
            let at = self.pos as u64;
            let n = self.u64(what)?;
            let remaining = (self.buf.len() - self.pos) as u64;
            if n.saturating_mul(min_elem_bytes as u64) > remaining {
                return Err(Error::parse_byte(self.file, at, format!("{what} {n} exceeds file size")));
            }
            Ok(n as usize)
        }

        fn finish(&self) -> Result<()> {
            if self.pos != self.buf.len() {
                return Err(Error::parse_byte(self.file, self.pos as u64, "trailing bytes"));
            }
            Ok(())
        }
    }

    pub fn cameras(buf: &[u8]) -> Result<BTreeMap<u32, CameraRecord>> {
        let mut r = Reader::new(buf, "cameras.bin");
        let n = r.count("camera count", 24)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let id = r.u32("camera id")?;
            let model_id = r.i32("model id")?;
            let model = CameraModel::from_id(model_id)
                .ok_or_else(|| Error::Unsupported(format!("camera model id {model_id}")))?;
            let width = r.u64("width")?;
            let height = r.u64("height")?;
            let params = (0..model.param_count()).map(|_| r.f64("camera parameter")).collect::<Result<_>>()?;
            out.insert(id, CameraRecord { model, width, height, params });
        }
        r.finish()?;
        Ok(out)
    }

    pub fn images(buf: &[u8]) -> Result<BTreeMap<u32, ImageRecord>> {
        let mut r = Reader::new(buf, "images.bin");
        let n = r.count("image count", 69)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let id = r.u32("image id")?;
            let mut qvec = [0.0; 4];
            for v in qvec.iter_mut() {
                *v = r.f64("quaternion")?;
            }
            let mut tvec = [0.0; 3];
            for v in tvec.iter_mut() {
                *v = r.f64("translation")?;
            }
            let camera_id = r.u32("camera id")?;
            let name = r.cstring()?;
            let np = r.count("point2D count", 24)?;
            let mut points2d = Vec::with_capacity(np);
            for _ in 0..np {
                let x = r.f64("point x")?;
                let y = r.f64("point y")?;
                let pid = r.u64("point3D id")?;
                points2d.push(Point2D { x, y, point3d_id: (pid != u64::MAX).then_some(pid) });
            }
            out.insert(id, ImageRecord { qvec, tvec, camera_id, name, points2d });
        }
        r.finish()?;
        Ok(out)
    }

    pub fn points(buf: &[u8]) -> Result<BTreeMap<u64, Point3D>> {
        let mut r = Reader::new(buf, "points3D.bin");
        let n = r.count("point count", 51)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let id = r.u64("point id")?;
            let mut xyz = [0.0; 3];
            for v in xyz.iter_mut() {
                *v = r.f64("coordinate")?;
            }
            let rgb = [r.u8("color")?, r.u8("color")?, r.u8("color")?];
            let error = r.f64("error")?;
            let nt = r.count("track length", 8)?;
            let track = (0..nt)
                .map(|_| Ok((r.u32("track image id")?, r.u32("track point index")?)))
                .collect::<Result<_>>()?;
            out.insert(id, Point3D { xyz, rgb, error, track });
        }
        r.finish()?;
        Ok(out)
    }

    pub fn write_cameras(m: &SfmModel) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend((m.cameras.len() as u64).to_le_bytes());
        for (id, c) in &m.cameras {
            b.extend(id.to_le_bytes());
            b.extend(c.model.id().to_le_bytes());
            b.extend(c.width.to_le_bytes());
            b.extend(c.height.to_le_bytes());
            for p in &c.params {
                b.extend(p.to_le_bytes());
            }
        }
        b
    }

    pub fn write_images(m: &SfmModel) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend((m.images.len() as u64).to_le_bytes());
        for (id, im) in &m.images {
            b.extend(id.to_le_bytes());
            for v in im.qvec.iter().chain(&im.tvec) {
                b.extend(v.to_le_bytes());
            }
            b.extend(im.camera_id.to_le_bytes());
            b.extend(im.name.as_bytes());
            b.push(0);
            b.extend((im.points2d.len() as u64).to_le_bytes());
            for p in &im.points2d {
                b.extend(p.x.to_le_bytes());
                b.extend(p.y.to_le_bytes());
                b.extend(p.point3d_id.unwrap_or(u64::MAX).to_le_bytes());
            }
        }
        b
    }

    pub fn write_points(m: &SfmModel) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend((m.points.len() as u64).to_le_bytes());
        for (id, p) in &m.points {
            b.extend(id.to_le_bytes());
            for v in &p.xyz {
                b.extend(v.to_le_bytes());
            }
            b.extend(p.rgb);
            b.extend(p.error.to_le_bytes());
            b.extend((p.track.len() as u64).to_le_bytes());
            for (img, idx) in &p.track {
                b.extend(img.to_le_bytes());
                b.extend(idx.to_le_bytes());
            }
        }
        b
    }
}

/// Options for turning SfM points into an initial field.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitOptions {
    pub init_opacity: f64,
    pub sh_degree: usize,
    /// Lower bound on the isotropic initial scale (world units).
    pub min_scale: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { init_opacity: 0.1, sh_degree: 1, min_scale: 1e-7 }
    }
}

/// One Gaussian per SfM point, isotropic scale from the mean distance to the
/// three nearest neighbours, DC color from the point color.
pub fn init_field(model: &SfmModel, opts: &InitOptions) -> Result<GaussianField> {
    if model.points.is_empty() {
        return Err(Error::InvalidInput("SfM model has no points".into()));
    }
    if !(opts.init_opacity > 0.0 && opts.init_opacity < 1.0) {
        return Err(Error::InvalidParameter("init_opacity must lie in (0, 1)".into()));
    }
    if opts.sh_degree > crate::scene::MAX_SH_DEGREE {
        return Err(Error::InvalidParameter(format!("SH degree {} too large", opts.sh_degree)));
    }
    let positions: Vec<Vector3<f64>> = model.points.values().map(|p| Vector3::from(p.xyz)).collect();
    if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidInput("non-finite SfM point".into()));
    }
    let scales = knn_mean_distance(&positions, 3);
    let k = sh_coeff_count(opts.sh_degree);
    let gaussians = model
        .points
        .values()
        .zip(&positions)
        .zip(scales)
        .map(|((p, pos), dist)| {
            let mut sh = vec![[0.0; 3]; k];
            for c in 0..3 {
                sh[0][c] = rgb_to_sh_dc(p.rgb[c] as f64 / 255.0);
            }
            let s = dist.max(opts.min_scale).ln();
            Gaussian {
                position: *pos,
                log_scale: Vector3::repeat(s),
                rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
                opacity_logit: logit(opts.init_opacity),
                sh,
            }
        })
        .collect();
    Ok(GaussianField { gaussians, sh_degree: opts.sh_degree })
}

/// Mean distance to the `k` nearest other points (fewer when not available;
/// zero for a lone point).
pub(crate) fn knn_mean_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm();
                if best.len() < k || d < *best.last().unwrap() {
                    let at = best.partition_point(|&b| b <= d);
                    best.insert(at, d);
                    best.truncate(k);
                }
            }
            if best.is_empty() {
                0.0
            } else {
                best.iter().sum::<f64>() / best.len() as f64
            }
        })
        .collect()
}
