//! Object and hand encoders with projection heads, the context-prediction
//! network, and checkpoint I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array_file::{decode_arrays, write_array_to};
use crate::error::{Error, Result};
use crate::motion::PE_DIM;
use crate::nn::{Conv2d, ConvTranspose2d, Flatten, GlobalAvgPool, Layer, Linear, Param, Relu, Reshape, Sequential};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub input_size: usize,
    /// One stride-2 3×3 convolution + ReLU per entry.
    pub channels: Vec<usize>,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            input_size: 64,
            channels: vec![16, 32, 64, 128],
            hidden_dim: 512,
            embed_dim: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSpec {
    pub dims: Vec<usize>,
    pub pe_dim: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            dims: vec![512, 512, 128],
            pe_dim: PE_DIM,
        }
    }
}

impl HeadSpec {
    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("non-empty head")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AcpModelSpec {
    pub input_size: usize,
    /// Stride-2 encoder convolutions; 128 → 4 takes five.
    pub encoder_channels: Vec<usize>,
    pub bottleneck_dim: usize,
    /// Channels entering each of the four transposed convolutions.
    pub decoder_channels: Vec<usize>,
    pub grasp_hidden: usize,
    pub grasp_classes: usize,
}

impl Default for AcpModelSpec {
    fn default() -> Self {
        AcpModelSpec {
            input_size: 128,
            encoder_channels: vec![16, 32, 64, 64, 128],
            bottleneck_dim: 256,
            decoder_channels: vec![64, 32, 16, 8],
            grasp_hidden: 256,
            grasp_classes: 8,
        }
    }
}

impl AcpModelSpec {
    pub const SEG_SIZE: usize = 64;

    fn validate(&self) -> Result<()> {
        let down = 1usize << self.encoder_channels.len();
        if self.input_size % down != 0 || self.decoder_channels.len() != 4 {
            return Err(Error::Config(
                "ACP model needs input divisible by 2^depth and four decoder stages".into(),
            ));
        }
        if (self.input_size / down) << 4 != Self::SEG_SIZE {
            return Err(Error::Config(format!(
                "ACP encoder maps {} to {}, decoder would not produce 64x64",
                self.input_size,
                self.input_size / down
            )));
        }
        if self.grasp_classes == 0 {
            return Err(Error::Config("grasp_classes must be positive".into()));
        }
        Ok(())
    }

    fn bottom(&self) -> usize {
        self.input_size >> self.encoder_channels.len()
    }
}

fn spec_hash<T: Serialize>(spec: &T) -> String {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    hex::encode(Sha256::digest(json))
}

fn build_trunk(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Sequential {
    let mut net = Sequential::new();
    let mut c = 3;
    for &out in &spec.channels {
        net.push(Conv2d::new(c, out, 3, 2, 1, rng));
        net.push(Relu::default());
        c = out;
    }
    net.push(GlobalAvgPool::default());
    net.push(Linear::new(c, spec.hidden_dim, rng));
    net.push(Relu::default());
    net.push(Linear::new(spec.hidden_dim, spec.embed_dim, rng));
    net
}

fn build_head(in_dim: usize, dims: &[usize], rng: &mut ChaCha8Rng) -> Sequential {
    let mut net = Sequential::new();
    let mut d = in_dim;
    for (i, &out) in dims.iter().enumerate() {
        net.push(Linear::new(d, out, rng));
        if i + 1 < dims.len() {
            net.push(Relu::default());
        }
        d = out;
    }
    net
}

fn check_image_batch(x: &Tensor, size: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
        return Err(Error::Shape {
            expected: vec![s.first().copied().unwrap_or(0), 3, size, size],
            got: s.to_vec(),
        });
    }
    Ok(())
}

/// Anything whose weights can be checkpointed.
pub trait Checkpointable {
    fn kind(&self) -> &'static str;
    fn spec_json(&self) -> serde_json::Value;
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn spec_hash(&self) -> String {
        spec_hash(&self.spec_json())
    }
}

/// Object encoder `φ_o` with head `f_o` and, for OHC, head `f_h`.
#[derive(Debug)]
pub struct ObjectModel {
    pub spec: EncoderSpec,
    pub head: HeadSpec,
    trunk: Sequential,
    f_o: Sequential,
    f_h: Option<Sequential>,
}

impl ObjectModel {
    pub fn new(spec: &EncoderSpec, head: &HeadSpec, with_hand_head: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = build_trunk(spec, &mut rng);
        let f_o = build_head(spec.embed_dim, &head.dims, &mut rng);
        let f_h = with_hand_head.then(|| build_head(spec.embed_dim, &head.dims, &mut rng));
        ObjectModel {
            spec: spec.clone(),
            head: head.clone(),
            trunk,
            f_o,
            f_h,
        }
    }

    pub fn has_hand_head(&self) -> bool {
        self.f_h.is_some()
    }

    /// `[N, 3, S, S]` crops to `[N, embed_dim]` trunk embeddings.
    pub fn encode(&mut self, crops: &Tensor, train: bool) -> Result<Tensor> {
        check_image_batch(crops, self.spec.input_size)?;
        self.trunk.forward(crops, train)
    }

    pub fn project_f_o(&mut self, emb: &Tensor, train: bool) -> Result<Tensor> {
        self.f_o.forward(emb, train)
    }

    pub fn project_f_h(&mut self, emb: &Tensor, train: bool) -> Result<Tensor> {
        self.f_h
            .as_mut()
            .ok_or_else(|| Error::invalid("object model has no f_h head"))?
            .forward(emb, train)
    }

    pub fn backward_f_o(&mut self, d: &Tensor) -> Result<Tensor> {
        self.f_o.backward(d)
    }

    pub fn backward_f_h(&mut self, d: &Tensor) -> Result<Tensor> {
        self.f_h
            .as_mut()
            .ok_or_else(|| Error::invalid("object model has no f_h head"))?
            .backward(d)
    }

    pub fn backward_trunk(&mut self, d: &Tensor) -> Result<Tensor> {
        self.trunk.backward(d)
    }
}

impl Checkpointable for ObjectModel {
    fn kind(&self) -> &'static str {
        "object"
    }

    fn spec_json(&self) -> serde_json::Value {
        serde_json::json!({
            "encoder": self.spec,
            "head": self.head,
            "hand_head": self.f_h.is_some(),
        })
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend(self.f_o.params());
        if let Some(h) = &self.f_h {
            p.extend(h.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend(self.f_o.params_mut());
        if let Some(h) = &mut self.f_h {
            p.extend(h.params_mut());
        }
        p
    }
}

/// Hand encoder `φ_h`, positional-encoding fusion and head `g_h`.
#[derive(Debug)]
pub struct HandModel {
    pub spec: EncoderSpec,
    pub head: HeadSpec,
    trunk: Sequential,
    fuse: Linear,
    fuse_relu: Relu,
    g_h: Sequential,
}

impl HandModel {
    pub fn new(spec: &EncoderSpec, head: &HeadSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = build_trunk(spec, &mut rng);
        let fuse = Linear::new(spec.embed_dim + head.pe_dim, spec.embed_dim, &mut rng);
        let g_h = build_head(spec.embed_dim, &head.dims, &mut rng);
        HandModel {
            spec: spec.clone(),
            head: head.clone(),
            trunk,
            fuse,
            fuse_relu: Relu::default(),
            g_h,
        }
    }

    /// Crops `[N, 3, S, S]` and encodings `[N, 288]` to `g_h` outputs.
    pub fn forward(&mut self, crops: &Tensor, pe: &Tensor, train: bool) -> Result<Tensor> {
        check_image_batch(crops, self.spec.input_size)?;
        if pe.ndim() != 2 || pe.shape()[1] != self.head.pe_dim || pe.batch() != crops.batch() {
            return Err(Error::Shape {
                expected: vec![crops.batch(), self.head.pe_dim],
                got: pe.shape().to_vec(),
            });
        }
        let emb = self.trunk.forward(crops, train)?;
        let joined = concat_columns(&emb, pe);
        let fused = self.fuse.forward(&joined, train)?;
        let fused = self.fuse_relu.forward(&fused, train)?;
        self.g_h.forward(&fused, train)
    }

    /// Back-propagates `d` (gradient of the `g_h` output) through all layers.
    pub fn backward(&mut self, d: &Tensor) -> Result<()> {
        let g = self.g_h.backward(d)?;
        let g = self.fuse_relu.backward(&g)?;
        let g = self.fuse.backward(&g)?;
        let (d_emb, _) = split_columns(&g, self.spec.embed_dim);
        self.trunk.backward(&d_emb)?;
        Ok(())
    }
}

impl Checkpointable for HandModel {
    fn kind(&self) -> &'static str {
        "hand"
    }

    fn spec_json(&self) -> serde_json::Value {
        serde_json::json!({ "encoder": self.spec, "head": self.head })
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend(self.fuse.params());
        p.extend(self.g_h.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend(self.fuse.params_mut());
        p.extend(self.g_h.params_mut());
        p
    }
}

pub fn concat_columns(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, da, db) = (a.batch(), a.item_len(), b.item_len());
    let mut data = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec(&[n, da + db], data).expect("concat shape")
}

pub fn split_columns(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (n, d) = (x.batch(), x.item_len());
    let mut a = Vec::with_capacity(n * first);
    let mut b = Vec::with_capacity(n * (d - first));
    for i in 0..n {
        a.extend_from_slice(&x.item(i)[..first]);
        b.extend_from_slice(&x.item(i)[first..]);
    }
    (
        Tensor::from_vec(&[n, first], a).expect("split"),
        Tensor::from_vec(&[n, d - first], b).expect("split"),
    )
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` in network-input coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Context-prediction network: shared encoder, segmentation decoder and
/// grasp head.
#[derive(Debug)]
pub struct AcpModel {
    pub spec: AcpModelSpec,
    encoder: Sequential,
    decoder: Sequential,
    grasp: Sequential,
    /// When set, `forward` refuses inputs that are nonzero inside the region.
    pub mask_guard: Option<MaskRegion>,
}

#[derive(Clone, Debug)]
pub struct AcpOutput {
    /// `[N, 64, 64]`.
    pub seg_logits: Tensor,
    /// `[N, G]`.
    pub grasp_logits: Tensor,
}

impl AcpModel {
    pub fn new(spec: &AcpModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Sequential::new();
        let mut c = 3;
        for &out in &spec.encoder_channels {
            encoder.push(Conv2d::new(c, out, 3, 2, 1, &mut rng));
            encoder.push(Relu::default());
            c = out;
        }
        let bottom = spec.bottom();
        encoder.push(Flatten::default());
        encoder.push(Linear::new(c * bottom * bottom, spec.bottleneck_dim, &mut rng));
        encoder.push(Relu::default());

        let mut decoder = Sequential::new();
        let d0 = spec.decoder_channels[0];
        decoder.push(Linear::new(spec.bottleneck_dim, d0 * bottom * bottom, &mut rng));
        decoder.push(Relu::default());
        decoder.push(Reshape::new(&[d0, bottom, bottom]));
        for i in 0..4 {
            let cin = spec.decoder_channels[i];
            let cout = spec.decoder_channels.get(i + 1).copied().unwrap_or(1);
            decoder.push(ConvTranspose2d::new(cin, cout, 4, 2, 1, &mut rng));
            if i < 3 {
                decoder.push(Relu::default());
            }
        }

        let mut grasp = Sequential::new();
        grasp.push(Linear::new(spec.bottleneck_dim, spec.grasp_hidden, &mut rng));
        grasp.push(Relu::default());
        grasp.push(Linear::new(spec.grasp_hidden, spec.grasp_classes, &mut rng));

        Ok(AcpModel {
            spec: spec.clone(),
            encoder,
            decoder,
            grasp,
            mask_guard: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<AcpOutput> {
        check_image_batch(x, self.spec.input_size)?;
        if let Some(r) = self.mask_guard {
            let s = self.spec.input_size;
            for b in 0..x.batch() {
                let item = x.item(b);
                for c in 0..3 {
                    for y in r.y0..r.y1 {
                        if item[(c * s + y) * s + r.x0..(c * s + y) * s + r.x1].iter().any(|&v| v != 0.0) {
                            return Err(Error::invalid(format!("unmasked input in batch item {b}")));
                        }
                    }
                }
            }
        }
        let z = self.encoder.forward(x, train)?;
        let seg = self.decoder.forward(&z, train)?;
        let n = seg.batch();
        let seg = seg.reshape(&[n, AcpModelSpec::SEG_SIZE, AcpModelSpec::SEG_SIZE])?;
        let grasp_logits = self.grasp.forward(&z, train)?;
        Ok(AcpOutput {
            seg_logits: seg,
            grasp_logits,
        })
    }

    /// Back-propagates output gradients; a `None` grasp gradient leaves the
    /// grasp head untouched.
    pub fn backward(&mut self, d_seg: &Tensor, d_grasp: Option<&Tensor>) -> Result<()> {
        let n = d_seg.batch();
        let d_seg = d_seg.clone().reshape(&[n, 1, AcpModelSpec::SEG_SIZE, AcpModelSpec::SEG_SIZE])?;
        let mut dz = self.decoder.backward(&d_seg)?;
        if let Some(dg) = d_grasp {
            let dz_g = self.grasp.backward(dg)?;
            dz.add_assign(&dz_g);
        }
        self.encoder.backward(&dz)?;
        Ok(())
    }

    pub fn grasp_params_mut(&mut self) -> Vec<&mut Param> {
        self.grasp.params_mut()
    }

    pub fn non_grasp_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

impl Checkpointable for AcpModel {
    fn kind(&self) -> &'static str {
        "acp"
    }

    fn spec_json(&self) -> serde_json::Value {
        serde_json::json!({ "acp": self.spec })
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.grasp.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.grasp.params_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub spec: serde_json::Value,
    pub spec_hash: String,
    pub seed: u64,
    pub weights_file: String,
    pub weights_sha256: String,
}

pub fn weights_bytes(model: &dyn Checkpointable) -> Vec<u8> {
    let mut buf = Vec::new();
    for p in model.params() {
        write_array_to(&mut buf, &p.to_tensor()).expect("in-memory write");
    }
    buf
}

fn manifest_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes `path` (weights) and `path.manifest.json`; returns the manifest.
pub fn save_checkpoint(model: &dyn Checkpointable, seed: u64, path: &Path) -> Result<CheckpointManifest> {
    let bytes = weights_bytes(model);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: model.kind().to_string(),
        spec: model.spec_json(),
        spec_hash: model.spec_hash(),
        seed,
        weights_file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        weights_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads weights into `model`, refusing checkpoints whose manifest does not
/// match the model's kind, spec hash, or the weight bytes.
pub fn load_checkpoint(model: &mut dyn Checkpointable, path: &Path) -> Result<CheckpointManifest> {
    let manifest = read_manifest(path)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "format version {} != {}",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    if manifest.kind != model.kind() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds a {} model, expected {}",
            manifest.kind,
            model.kind()
        )));
    }
    if manifest.spec_hash != model.spec_hash() {
        return Err(Error::CheckpointMismatch(format!(
            "spec hash {} does not match model spec {}",
            manifest.spec_hash,
            model.spec_hash()
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(Error::CheckpointMismatch("weights file hash differs from manifest".into()));
    }
    let tensors = decode_arrays(&bytes)?;
    let mut params = model.params_mut();
    if tensors.len() != params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{} weight arrays for {} parameters",
            tensors.len(),
            params.len()
        )));
    }
    for (p, t) in params.iter_mut().zip(&tensors) {
        p.load(t)?;
    }
    Ok(manifest)
}
