//! File formats: 8-bit PNG, binary PLY fields and safetensors state files.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Seek, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use nalgebra::{Quaternion, Vector3};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::scene::{sh_coeff_count, Gaussian, GaussianField, ImageBuffer, ScalarMap, MAX_SH_DEGREE};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_rgb8(img: &ImageBuffer) -> RgbImage {
    let raw = img.rgb.iter().map(|&v| quantize(v)).collect();
    RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size matches dimensions")
}

pub fn map_to_gray8(map: &ScalarMap) -> GrayImage {
    let raw = map.values.iter().map(|&v| quantize(v)).collect();
    GrayImage::from_raw(map.width as u32, map.height as u32, raw).expect("buffer size matches dimensions")
}

pub fn save_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    image_to_rgb8(img).save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn save_gray_png(path: &Path, map: &ScalarMap) -> Result<()> {
    map_to_gray8(map).save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    Ok(ImageBuffer {
        width: img.width() as usize,
        height: img.height() as usize,
        rgb: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

pub fn load_gray_png(path: &Path) -> Result<ScalarMap> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    decode_gray_png(&std::fs::read(path)?)
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image_to_rgb8(img).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_gray_png(map: &ScalarMap) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    map_to_gray8(map).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    Ok(ImageBuffer {
        width: img.width() as usize,
        height: img.height() as usize,
        rgb: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

pub fn decode_gray_png(bytes: &[u8]) -> Result<ScalarMap> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    Ok(ScalarMap {
        width: img.width() as usize,
        height: img.height() as usize,
        values: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

fn ply_property_names(sh_degree: usize) -> Vec<String> {
    let rest = sh_coeff_count(sh_degree) - 1;
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3 * rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Writes a field as binary little-endian PLY with `f32` properties.
///
/// Higher-order SH coefficients are stored channel-major, opacity as a logit,
/// scales as logs and rotations as (w, x, y, z).
pub fn save_ply(path: &Path, field: &GaussianField) -> Result<()> {
    let names = ply_property_names(field.sh_degree);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}", field.len())?;
    for n in &names {
        writeln!(out, "property float {n}")?;
    }
    writeln!(out, "end_header")?;
    let rest = sh_coeff_count(field.sh_degree) - 1;
    let mut row = Vec::with_capacity(names.len());
    for g in &field.gaussians {
        row.clear();
        row.extend(g.position.iter());
        row.extend(g.sh[0]);
        for c in 0..3 {
            row.extend((1..=rest).map(|k| g.sh[k][c]));
        }
        row.push(g.opacity_logit);
        row.extend(g.log_scale.iter());
        row.extend([g.rotation.w, g.rotation.i, g.rotation.j, g.rotation.k]);
        for v in &row {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<GaussianField> {
    let file_name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut reader = BufReader::new(file);
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut line_no = 0;
    let mut line = String::new();
    loop {
        line.clear();
        line_no += 1;
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::parse_line(&file_name, line_no, "missing end_header"));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["ply"] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => {
                return Err(Error::parse_line(&file_name, line_no, format!("unsupported format {other}")));
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::parse_line(&file_name, line_no, "bad vertex count"))?);
            }
            ["element", other, ..] => {
                return Err(Error::parse_line(&file_name, line_no, format!("unexpected element {other}")));
            }
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, _] => {
                return Err(Error::parse_line(&file_name, line_no, format!("unsupported property type {ty}")));
            }
            ["end_header"] => break,
            _ => return Err(Error::parse_line(&file_name, line_no, "unrecognized header line")),
        }
    }
    let count = count.ok_or_else(|| Error::parse_line(&file_name, line_no, "no vertex element"))?;
    let n_rest = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    if n_rest % 3 != 0 {
        return Err(Error::parse_line(&file_name, line_no, "f_rest count is not a multiple of 3"));
    }
    let k = 1 + n_rest / 3;
    let sh_degree = (0..=MAX_SH_DEGREE)
        .find(|&d| sh_coeff_count(d) == k)
        .ok_or_else(|| Error::parse_line(&file_name, line_no, format!("{k} SH coefficients is not a valid degree")))?;
    let index: HashMap<&str, usize> = props.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let expected = ply_property_names(sh_degree);
    let cols: Vec<usize> = expected
        .iter()
        .map(|n| index.get(n.as_str()).copied().ok_or_else(|| Error::parse_line(&file_name, line_no, format!("missing property {n}"))))
        .collect::<Result<_>>()?;

    let header_len = reader.stream_position()? as usize;
    let stride = props.len() * 4;
    let mut buf = vec![0u8; stride];
    let mut field = GaussianField::new(sh_degree);
    let mut row = vec![0.0f64; props.len()];
    for v in 0..count {
        reader.read_exact(&mut buf).map_err(|_| Error::parse_byte(&file_name, (header_len + v * stride) as u64, "truncated vertex data"))?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            row[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        let get = |j: usize| row[cols[j]];
        let mut sh = vec![[0.0; 3]; k];
        sh[0] = [get(3), get(4), get(5)];
        for c in 0..3 {
            for kk in 1..k {
                sh[kk][c] = get(6 + c * (k - 1) + kk - 1);
            }
        }
        let o = 6 + 3 * (k - 1);
        field.gaussians.push(Gaussian {
            position: Vector3::new(get(0), get(1), get(2)),
            log_scale: Vector3::new(get(o + 1), get(o + 2), get(o + 3)),
            rotation: Quaternion::new(get(o + 4), get(o + 5), get(o + 6), get(o + 7)),
            opacity_logit: get(o),
            sh,
        });
    }
    Ok(field)
}

const PACKED_METADATA: &str = "wildsplat";

/// Named `f64` tensors plus string metadata, stored as safetensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn insert_vec(&mut self, name: impl Into<String>, data: Vec<f64>) {
        let n = data.len();
        self.insert(name, vec![n], data);
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .get(name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("tensor '{name}' missing from state file")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidInput(format!("metadata '{key}' missing from state file")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(&String, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(n, (_, d))| (n, d.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b)| {
                let shape = self.tensors[*n].0.clone();
                TensorView::new(Dtype::F64, shape, b).map(|v| (n.as_str(), v))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidInput(format!("tensor layout: {e}")))?;
        // safetensors keeps metadata in a HashMap; one sorted entry keeps the
        // header bytes reproducible.
        let packed = serde_json::to_string(&self.metadata).map_err(|e| Error::InvalidInput(format!("metadata: {e}")))?;
        let meta = HashMap::from([(PACKED_METADATA.to_string(), packed)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::InvalidInput(format!("serialize: {e}")))
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::Parse { file: origin.into(), location: "header".into(), message: e.to_string() };
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let st = SafeTensors::deserialize(bytes).map_err(bad)?;
        let mut out = TensorFile::default();
        if let Some(m) = meta.metadata() {
            out.metadata = match m.get(PACKED_METADATA) {
                Some(packed) => serde_json::from_str(packed)
                    .map_err(|e| Error::Parse { file: origin.into(), location: "header".into(), message: format!("metadata: {e}") })?,
                None => m.clone().into_iter().collect(),
            };
        }
        for (name, view) in st.iter() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Parse { file: origin.into(), location: name.into(), message: "expected F64 tensor".into() });
            }
            let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            out.tensors.insert(name.to_string(), (view.shape().to_vec(), data));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::renormalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(seed: u64, n: usize, degree: usize) -> GaussianField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = sh_coeff_count(degree);
        let gaussians = (0..n)
            .map(|_| Gaussian {
                position: Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
                log_scale: Vector3::from_fn(|_, _| rng.random_range(-4.0..0.0)),
                rotation: renormalize(Quaternion::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                opacity_logit: rng.random_range(-3.0..3.0),
                sh: (0..k).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
            })
            .collect();
        GaussianField { gaussians, sh_degree: degree }
    }

    #[test]
    fn ply_round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        for degree in 0..=3 {
            let field = random_field(degree as u64, 25, degree);
            let path = dir.path().join(format!("f{degree}.ply"));
            save_ply(&path, &field).unwrap();
            let back = load_ply(&path).unwrap();
            assert_eq!(back.sh_degree, degree);
            assert_eq!(back.len(), field.len());
            let tol = |a: f64| 1e-6 * a.abs().max(1.0);
            for (a, b) in field.gaussians.iter().zip(&back.gaussians) {
                for (x, y) in a.to_params().iter().zip(b.to_params()) {
                    assert!((x - y).abs() <= tol(*x), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn ply_header_lists_properties_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ply");
        save_ply(&path, &random_field(1, 2, 1)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&bytes[..bytes.windows(10).position(|w| w == b"end_header").unwrap()]).to_string();
        let props: Vec<&str> = header.lines().filter_map(|l| l.strip_prefix("property float ")).collect();
        let mut expected = vec!["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"];
        let rest: Vec<String> = (0..9).map(|i| format!("f_rest_{i}")).collect();
        expected.extend(rest.iter().map(String::as_str));
        expected.extend(["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]);
        assert_eq!(props, expected);
    }

    #[test]
    fn truncated_ply_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ply");
        save_ply(&path, &random_field(2, 3, 0)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        match load_ply(&path) {
            Err(Error::Parse { location, .. }) => assert!(location.contains("byte")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn png_quantizes_by_rounding() {
        let img = ImageBuffer::from_vec(2, 1, vec![0.0, 0.5, 1.0, 0.2, 0.7, 1.5]).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        let expect = [0u8, 128, 255, 51, 179, 255];
        for (v, e) in back.rgb.iter().zip(expect) {
            assert_eq!((*v * 255.0).round() as u8, e);
        }
    }

    #[test]
    fn tensor_file_round_trip_is_exact() {
        let mut tf = TensorFile::default();
        tf.insert("a", vec![2, 2], vec![1.0, -0.1, f64::MIN_POSITIVE, 1e300]);
        tf.insert_vec("b", vec![std::f64::consts::PI]);
        tf.metadata.insert("rng".into(), "{\"seed\":1}".into());
        let back = TensorFile::from_bytes(&tf.to_bytes().unwrap(), "mem").unwrap();
        assert_eq!(back, tf);
    }

    #[test]
    fn tensor_file_bytes_are_reproducible() {
        let build = || {
            let mut tf = TensorFile::default();
            tf.insert_vec("x", vec![0.5; 3]);
            for k in 0..32 {
                tf.metadata.insert(format!("key{k}"), k.to_string());
            }
            tf.to_bytes().unwrap()
        };
        let first = build();
        for _ in 0..8 {
            assert_eq!(build(), first);
        }
    }
}
