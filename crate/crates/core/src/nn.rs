//! Small neural-network toolkit on top of libtorch tensors: seeded
//! parameter initialization, equalized-learning-rate layers, batch norm,
//! Adam, and the versioned checkpoint container.
//!
//! Parameters are initialized from a ChaCha stream rather than the libtorch
//! global generator, so two models built from the same seed are identical no
//! matter what else runs in the process.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Leaky slope used throughout the GAN nets.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.maximum(&(x * LEAKY_SLOPE))
}

/// Normalizes each pixel's feature vector to unit average square.
pub fn pixel_norm(x: &Tensor) -> Tensor {
    x * (x.square().mean_dim(1, true, x.kind()) + 1e-8).rsqrt()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_slice(&v).view(shape).to_kind(kind)
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[i64], lo: f64, hi: f64, kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_slice(&v).view(shape).to_kind(kind)
}

/// Named trainable tensors plus non-trainable buffers.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor and returns a handle sharing its storage.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Tensor {
        let t = t.set_requires_grad(true);
        let handle = t.shallow_clone();
        self.params.push((name.into(), t));
        handle
    }

    pub fn buffer(&mut self, name: impl Into<String>, t: Tensor) -> Tensor {
        let handle = t.shallow_clone();
        self.buffers.push((name.into(), t));
        handle
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.shallow_clone()).collect()
    }

    pub fn num_parameters(&self) -> i64 {
        self.params.iter().map(|(_, t)| t.numel() as i64).sum()
    }

    /// Every tensor under `prefix/name`, parameters then buffers.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, t)| (format!("{prefix}/{n}"), t.shallow_clone()))
            .collect()
    }

    /// Deep copy of every tensor's current value.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.named(prefix)
            .into_iter()
            .map(|(n, t)| (n, t.detach().copy()))
            .collect()
    }

    /// Copies matching values in place. Every tensor of this store must be
    /// present with the same shape.
    pub fn load(&mut self, prefix: &str, named: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let key = format!("{prefix}/{name}");
            let src = named
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {key}")))?;
            if src.size() != t.size() {
                return Err(Error::Shape(format!(
                    "tensor {key}: checkpoint {:?} vs model {:?}",
                    src.size(),
                    t.size()
                )));
            }
            tch::no_grad(|| t.copy_(&src.to_kind(t.kind())));
        }
        Ok(())
    }
}

/// Convolution with optional runtime He scaling (equalized learning rate).
#[derive(Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    scale: f64,
    stride: i64,
    padding: i64,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: i64,
    pub out_ch: i64,
    pub kernel: i64,
    pub stride: i64,
    pub padding: i64,
    pub gain: f64,
    pub equalized: bool,
}

impl ConvSpec {
    pub fn same(in_ch: i64, out_ch: i64, kernel: i64) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            gain: std::f64::consts::SQRT_2,
            equalized: true,
        }
    }

    pub fn gain(self, gain: f64) -> Self {
        Self { gain, ..self }
    }

    pub fn equalized(self, equalized: bool) -> Self {
        Self { equalized, ..self }
    }

    pub fn strided(self, stride: i64, padding: i64) -> Self {
        Self {
            stride,
            padding,
            ..self
        }
    }
}

/// He-style constant and initial std for a layer with `fan_in` inputs.
fn init_scale(fan_in: i64, gain: f64, equalized: bool) -> (f64, f64) {
    let he = gain / (fan_in as f64).sqrt();
    if equalized {
        (1.0, he)
    } else {
        (he, 1.0)
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut ChaCha8Rng, kind: Kind) -> Self {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let (std, scale) = init_scale(fan_in, spec.gain, spec.equalized);
        let w = randn(rng, &[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel], kind) * std;
        let weight = store.param(format!("{name}.weight"), w);
        let bias = store.param(format!("{name}.bias"), Tensor::zeros([spec.out_ch], (kind, tch::Device::Cpu)));
        Self {
            weight,
            bias,
            scale,
            stride: spec.stride,
            padding: spec.padding,
        }
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = if self.scale == 1.0 {
            self.weight.shallow_clone()
        } else {
            &self.weight * self.scale
        };
        x.conv2d(&w, Some(&self.bias), [self.stride, self.stride], [self.padding, self.padding], [1, 1], 1)
    }
}

/// Transposed convolution doubling the spatial size (kernel 4, stride 2).
#[derive(Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: i64, out_ch: i64, rng: &mut ChaCha8Rng, kind: Kind) -> Self {
        let std = (2.0 / (in_ch * 4 * 4) as f64).sqrt();
        let weight = store.param(format!("{name}.weight"), randn(rng, &[in_ch, out_ch, 4, 4], kind) * std);
        let bias = store.param(format!("{name}.bias"), Tensor::zeros([out_ch], (kind, tch::Device::Cpu)));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv_transpose2d(&self.weight, Some(&self.bias), [2, 2], [1, 1], [0, 0], 1, [1, 1])
    }
}

#[derive(Debug)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
    scale: f64,
}

impl Dense {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: i64,
        out_dim: i64,
        gain: f64,
        equalized: bool,
        rng: &mut ChaCha8Rng,
        kind: Kind,
    ) -> Self {
        let (std, scale) = init_scale(in_dim, gain, equalized);
        let weight = store.param(format!("{name}.weight"), randn(rng, &[out_dim, in_dim], kind) * std);
        let bias = store.param(format!("{name}.bias"), Tensor::zeros([out_dim], (kind, tch::Device::Cpu)));
        Self { weight, bias, scale }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = if self.scale == 1.0 {
            self.weight.shallow_clone()
        } else {
            &self.weight * self.scale
        };
        x.linear(&w, Some(&self.bias))
    }
}

#[derive(Debug)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: i64, kind: Kind) -> Self {
        let opts = (kind, tch::Device::Cpu);
        Self {
            weight: store.param(format!("{name}.weight"), Tensor::ones([channels], opts)),
            bias: store.param(format!("{name}.bias"), Tensor::zeros([channels], opts)),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros([channels], opts)),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones([channels], opts)),
        }
    }

    /// Batch statistics when `train`, running statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        Tensor::batch_norm(
            x,
            Some(&self.weight),
            Some(&self.bias),
            Some(&self.running_mean),
            Some(&self.running_var),
            train,
            0.1,
            1e-5,
            false,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2.0e-4,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed parameter list; parameters without a gradient this
/// step are left untouched.
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<i32>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| p.zeros_like()).collect();
        let v = params.iter().map(|p| p.zeros_like()).collect();
        let steps = vec![0; params.len()];
        Self {
            cfg,
            params,
            m,
            v,
            steps,
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        tch::no_grad(|| {
            for i in 0..self.params.len() {
                let g = self.params[i].grad();
                if !g.defined() {
                    continue;
                }
                self.steps[i] += 1;
                let t = self.steps[i];
                let _ = self.m[i].g_mul_scalar_(beta1).g_add_(&(&g * (1.0 - beta1)));
                let _ = self.v[i].g_mul_scalar_(beta2).g_add_(&(g.square() * (1.0 - beta2)));
                let m_hat = &self.m[i] / (1.0 - beta1.powi(t));
                let v_hat = &self.v[i] / (1.0 - beta2.powi(t));
                let update = m_hat / (v_hat.sqrt() + eps) * lr;
                let _ = self.params[i].g_sub_(&update);
            }
        });
    }
}

/// Stable hex digest of a serializable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const MAGIC: &[u8; 8] = b"CPGGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Model family, e.g. `cpggan`, `img2img` or `detector`.
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub stage: usize,
    pub alpha: f64,
    pub step: u64,
    /// Subjects whose images were used for training.
    pub train_subjects: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes header and tensors to `path` via a temporary file and rename.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, tensors: &[(String, Tensor)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let header_json = serde_json::to_vec(header)?;
    let mut blob = Vec::new();
    Tensor::save_multi_to_stream(tensors, &mut blob)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&blob)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_checkpoint_inner(path, false)?.0)
}

/// Reads a checkpoint, rejecting a different model family or config hash.
pub fn load_checkpoint(
    path: &Path,
    expected_kind: &str,
    expected_hash: Option<&str>,
) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let (header, tensors) = read_checkpoint_inner(path, true)?;
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if header.kind != expected_kind {
        return Err(fail(format!("holds a {} model, expected {expected_kind}", header.kind)));
    }
    if let Some(h) = expected_hash {
        if header.config_hash != h {
            return Err(fail(format!("config hash {} does not match {h}", header.config_hash)));
        }
    }
    Ok((header, tensors))
}

fn read_checkpoint_inner(path: &Path, with_tensors: bool) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let fail = |reason: &str| Error::Checkpoint {
        path: PathBuf::from(path),
        reason: reason.to_string(),
    };
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| fail("truncated header"))?;
    if &magic != MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    if !with_tensors {
        return Ok((header, Vec::new()));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let tensors = Tensor::load_multi_from_stream(Cursor::new(blob))?;
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mk = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            Conv2d::new(&mut store, "c", ConvSpec::same(2, 3, 3), &mut rng, Kind::Float);
            store.snapshot("m")
        };
        let (a, b) = (mk(), mk());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert!(ta.equal(tb));
        }
    }

    #[test]
    fn adam_moves_towards_minimum() {
        let mut store = ParamStore::new();
        let x = store.param("x", Tensor::from_slice(&[3.0f32, -2.0]));
        let mut opt = Adam::new(store.trainable(), AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        for _ in 0..200 {
            opt.zero_grad();
            x.square().sum(Kind::Float).backward();
            opt.step();
        }
        assert!(x.abs().max().double_value(&[]) < 0.05);
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            kind: "cpggan".into(),
            config: serde_json::json!({"a": 1}),
            config_hash: config_hash(&serde_json::json!({"a": 1})),
            stage: 2,
            alpha: 0.5,
            step: 10,
            train_subjects: vec!["s001".into()],
            extra: serde_json::Value::Null,
        };
        let t = Tensor::from_slice(&[1.0f32, 2.0, 3.0]);
        save_checkpoint(&path, &header, &[("g/w".to_string(), t.shallow_clone())]).unwrap();
        let (h, tensors) = load_checkpoint(&path, "cpggan", Some(&header.config_hash)).unwrap();
        assert_eq!(h, header);
        assert!(tensors[0].1.equal(&t));
        assert!(load_checkpoint(&path, "detector", None).is_err());
        assert!(load_checkpoint(&path, "cpggan", Some("deadbeef")).is_err());
        fs::write(&path, b"garbage").unwrap();
        assert!(read_checkpoint_header(&path).is_err());
    }
}
