//! Image preprocessing and pluggable visual backbones.
//!
//! The core treats a backbone as an opaque producer of fixed-size vectors.
//! Three adapters are provided: a seeded random projection of block-averaged
//! pixels (no weights needed), a replay store of recorded features, and an
//! external command.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, ClientMode, CommandTransport};

pub const IMAGE_HEIGHT: usize = 252;
pub const IMAGE_WIDTH: usize = 126;
pub const IMAGE_CHANNELS: usize = 3;
/// Patch edge of the transformer backbones the input geometry targets.
pub const PATCH: usize = 14;
pub const STUB_DIM: usize = 768;
/// Version tag of the resize/scale contract implemented by [`preprocess`].
pub const PREPROCESSING_VERSION: &str = "rgb-252x126-triangle-unit-v1";

#[derive(Debug, Error)]
pub enum VisualError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("backbone unavailable: {0}")]
    BackboneUnavailable(String),
    #[error("feature has dimension {got}, manifest declares {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("feature contains non-finite values")]
    NonFinite,
    #[error("tensor must be {IMAGE_HEIGHT}x{IMAGE_WIDTH}x{IMAGE_CHANNELS}, got {0:?}")]
    TensorShape(Vec<usize>),
    #[error("feature store: {0}")]
    Store(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// A preprocessed RGB image, `252 × 126 × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f64>);

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self, VisualError> {
        if data.shape() != [IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS] {
            return Err(VisualError::TensorShape(data.shape().to_vec()));
        }
        Ok(Self(data.mapv(|v| v.clamp(0.0, 1.0))))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    /// Block means over `PATCH × PATCH` cells, flattened row-major with
    /// channels innermost (18 × 9 × 3 values).
    pub fn block_means(&self) -> Vec<f64> {
        let (bh, bw) = (IMAGE_HEIGHT / PATCH, IMAGE_WIDTH / PATCH);
        let mut out = vec![0.0; bh * bw * IMAGE_CHANNELS];
        let scale = 1.0 / (PATCH * PATCH) as f64;
        for ((y, x, c), &v) in self.0.indexed_iter() {
            out[((y / PATCH) * bw + x / PATCH) * IMAGE_CHANNELS + c] += v * scale;
        }
        out
    }
}

/// Decodes an image and brings it to the 252×126 input geometry.
pub fn preprocess(bytes: &[u8]) -> Result<ImageTensor, VisualError> {
    let img = image::load_from_memory(bytes).map_err(|e| VisualError::Decode(e.to_string()))?;
    let mut rgb = img.to_rgb8();
    if rgb.height() as usize != IMAGE_HEIGHT || rgb.width() as usize != IMAGE_WIDTH {
        rgb = image::imageops::resize(
            &rgb,
            IMAGE_WIDTH as u32,
            IMAGE_HEIGHT as u32,
            FilterType::Triangle,
        );
    }
    let data = Array3::from_shape_fn((IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    });
    Ok(ImageTensor(data))
}

pub fn preprocess_file(path: &Path) -> Result<ImageTensor, VisualError> {
    let bytes = std::fs::read(path).map_err(|e| VisualError::Decode(format!("{}: {e}", path.display())))?;
    preprocess(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct VisualFeature(Vec<f64>);

impl VisualFeature {
    pub fn new(values: Vec<f64>) -> Result<Self, VisualError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VisualError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for VisualFeature {
    type Error = VisualError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<VisualFeature> for Vec<f64> {
    fn from(v: VisualFeature) -> Self {
        v.0
    }
}

/// Describes what an adapter produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub name: String,
    pub dim: usize,
    pub preprocessing: String,
}

pub trait BackboneAdapter: Send + Sync {
    fn manifest(&self) -> &AdapterManifest;
    fn mode(&self) -> ClientMode;
    fn encode(&self, image_id: &str, tensor: &ImageTensor) -> Result<VisualFeature, VisualError>;
}

/// Runs `adapter` and checks the result against its manifest.
pub fn encode_image(
    image_id: &str,
    tensor: &ImageTensor,
    adapter: &dyn BackboneAdapter,
) -> Result<VisualFeature, VisualError> {
    let f = adapter.encode(image_id, tensor)?;
    let expected = adapter.manifest().dim;
    if f.dim() != expected {
        return Err(VisualError::Dimension { expected, got: f.dim() });
    }
    Ok(f)
}

/// Seeded random projection of centered block means, L2-normalized.
#[derive(Debug, Clone)]
pub struct StubBackbone {
    manifest: AdapterManifest,
    projection: Array2<f64>,
}

impl StubBackbone {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, STUB_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        let inputs = (IMAGE_HEIGHT / PATCH) * (IMAGE_WIDTH / PATCH) * IMAGE_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7669_7375_616c);
        let bound = (3.0 / inputs as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, inputs), |_| rng.gen_range(-bound..bound));
        Self {
            manifest: AdapterManifest {
                name: format!("stub-projection-{seed}"),
                dim,
                preprocessing: PREPROCESSING_VERSION.into(),
            },
            projection,
        }
    }
}

impl BackboneAdapter for StubBackbone {
    fn manifest(&self) -> &AdapterManifest {
        &self.manifest
    }

    fn mode(&self) -> ClientMode {
        ClientMode::Stub
    }

    fn encode(&self, _image_id: &str, tensor: &ImageTensor) -> Result<VisualFeature, VisualError> {
        let x: ndarray::Array1<f64> = tensor.block_means().into_iter().map(|v| v - 0.5).collect();
        let mut y = self.projection.dot(&x);
        let norm = y.dot(&y).sqrt();
        if norm > 0.0 {
            y /= norm;
        }
        VisualFeature::new(y.to_vec())
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    image_id: String,
    vector: VisualFeature,
}

pub const FEATURE_MANIFEST_FILE: &str = "manifest.json";
pub const FEATURE_DATA_FILE: &str = "features.jsonl";

/// Writes a feature store directory (manifest plus one record per line,
/// sorted by image id).
pub fn write_feature_store<'a>(
    dir: &Path,
    manifest: &AdapterManifest,
    records: impl IntoIterator<Item = (&'a String, &'a VisualFeature)>,
) -> Result<(), VisualError> {
    let io = |e: std::io::Error| VisualError::Store(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(dir.join(FEATURE_MANIFEST_FILE), text).map_err(io)?;
    let mut sorted: Vec<_> = records.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut w = BufWriter::new(std::fs::File::create(dir.join(FEATURE_DATA_FILE)).map_err(io)?);
    for (id, v) in sorted {
        if v.dim() != manifest.dim {
            return Err(VisualError::Dimension { expected: manifest.dim, got: v.dim() });
        }
        let line = serde_json::to_string(&FeatureLine {
            image_id: id.clone(),
            vector: v.clone(),
        })
        .expect("record serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Replays recorded features by image id.
#[derive(Debug, Clone)]
pub struct FixtureBackbone {
    manifest: AdapterManifest,
    features: HashMap<String, VisualFeature>,
}

impl FixtureBackbone {
    pub fn load(dir: &Path) -> Result<Self, VisualError> {
        let store = |e: String| VisualError::Store(format!("{}: {e}", dir.display()));
        let text = std::fs::read_to_string(dir.join(FEATURE_MANIFEST_FILE)).map_err(|e| store(e.to_string()))?;
        let manifest: AdapterManifest = serde_json::from_str(&text).map_err(|e| store(e.to_string()))?;
        let file = std::fs::File::open(dir.join(FEATURE_DATA_FILE)).map_err(|e| store(e.to_string()))?;
        let mut features = HashMap::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| store(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FeatureLine =
                serde_json::from_str(&line).map_err(|e| store(format!("line {}: {e}", n + 1)))?;
            if rec.vector.dim() != manifest.dim {
                return Err(VisualError::Dimension { expected: manifest.dim, got: rec.vector.dim() });
            }
            features.insert(rec.image_id, rec.vector);
        }
        Ok(Self { manifest, features })
    }

    pub fn from_records(manifest: AdapterManifest, records: impl IntoIterator<Item = (String, VisualFeature)>) -> Self {
        Self {
            manifest,
            features: records.into_iter().collect(),
        }
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.features.contains_key(image_id)
    }

    pub fn get(&self, image_id: &str) -> Option<&VisualFeature> {
        self.features.get(image_id)
    }

    pub fn into_records(self) -> HashMap<String, VisualFeature> {
        self.features
    }
}

impl BackboneAdapter for FixtureBackbone {
    fn manifest(&self) -> &AdapterManifest {
        &self.manifest
    }

    fn mode(&self) -> ClientMode {
        ClientMode::Replay
    }

    fn encode(&self, image_id: &str, _tensor: &ImageTensor) -> Result<VisualFeature, VisualError> {
        self.features
            .get(image_id)
            .cloned()
            .ok_or_else(|| VisualError::BackboneUnavailable(format!("no recorded feature for {image_id}")))
    }
}

/// Backbone in an external process.
///
/// Request on stdin: `{"image_id", "height", "width", "pixels"}` with pixels
/// row-major, channels innermost. Response on stdout: a JSON float array.
#[derive(Debug, Clone)]
pub struct CommandBackbone {
    manifest: AdapterManifest,
    transport: CommandTransport,
}

impl CommandBackbone {
    pub fn new(manifest: AdapterManifest, transport: CommandTransport) -> Self {
        Self { manifest, transport }
    }
}

impl BackboneAdapter for CommandBackbone {
    fn manifest(&self) -> &AdapterManifest {
        &self.manifest
    }

    fn mode(&self) -> ClientMode {
        ClientMode::Live
    }

    fn encode(&self, image_id: &str, tensor: &ImageTensor) -> Result<VisualFeature, VisualError> {
        let request = serde_json::json!({
            "image_id": image_id,
            "height": IMAGE_HEIGHT,
            "width": IMAGE_WIDTH,
            "pixels": tensor.data().iter().collect::<Vec<_>>(),
        });
        let response = self
            .transport
            .call(&request.to_string())
            .map_err(|e| match e {
                ClientError::Unavailable(m) => VisualError::BackboneUnavailable(m),
                other => VisualError::Client(other),
            })?;
        let values: Vec<f64> = serde_json::from_str(response.trim())
            .map_err(|e| VisualError::Client(ClientError::Protocol(e.to_string())))?;
        VisualFeature::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Rgb};

    fn png(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
        let img = ImageBuffer::from_fn(w, h, |x, y| Rgb(f(x, y)));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn small_image_is_resized() {
        let t = preprocess(&png(32, 64, |x, _| [x as u8 * 8, 0, 255])).unwrap();
        assert_eq!(t.data().shape(), &[252, 126, 3]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((t.data()[[100, 50, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn input_geometry_is_kept_exactly() {
        let bytes = png(126, 252, |x, y| [(x % 256) as u8, (y % 256) as u8, 7]);
        let t = preprocess(&bytes).unwrap();
        assert_eq!(t.data()[[200, 100, 0]], 100.0 / 255.0);
        assert_eq!(t.data()[[200, 100, 1]], 200.0 / 255.0);
        assert_eq!(t.data()[[3, 3, 2]], 7.0 / 255.0);
    }

    #[test]
    fn corrupt_bytes_fail_to_decode() {
        assert!(matches!(preprocess(b"not an image"), Err(VisualError::Decode(_))));
    }

    #[test]
    fn stub_is_deterministic_unit_and_block_sensitive() {
        let a = preprocess(&png(126, 252, |_, _| [120, 60, 30])).unwrap();
        let b = preprocess(&png(126, 252, |x, y| {
            if x < 14 && y < 14 {
                [250, 60, 30]
            } else {
                [120, 60, 30]
            }
        }))
        .unwrap();
        let stub = StubBackbone::new(3);
        let fa = encode_image("a", &a, &stub).unwrap();
        assert_eq!(fa, encode_image("a", &a, &stub).unwrap());
        assert_eq!(fa.dim(), STUB_DIM);
        let n: f64 = fa.as_slice().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(fa, encode_image("b", &b, &stub).unwrap());
    }

    #[test]
    fn fixture_store_replays_recorded_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = AdapterManifest {
            name: "recorded".into(),
            dim: 3,
            preprocessing: PREPROCESSING_VERSION.into(),
        };
        let id = "0001_c1s1_000001_00".to_string();
        let v = VisualFeature::new(vec![0.25, -1.0, 3.5]).unwrap();
        write_feature_store(dir.path(), &manifest, [(&id, &v)]).unwrap();
        let fx = FixtureBackbone::load(dir.path()).unwrap();
        let t = ImageTensor::new(Array3::zeros((252, 126, 3))).unwrap();
        assert_eq!(encode_image(&id, &t, &fx).unwrap(), v);
        assert!(matches!(
            encode_image("missing", &t, &fx),
            Err(VisualError::BackboneUnavailable(_))
        ));
    }

    #[test]
    fn tensor_shape_is_checked() {
        assert!(ImageTensor::new(Array3::zeros((10, 10, 3))).is_err());
    }
}
