use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::anchors::AnchorSet;
use super::grid::DetLossConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, ParamStore};

const SLOPE: f64 = 0.1;

/// Initial objectness of every anchor, so training starts from a mostly
/// empty prediction rather than a coin flip per anchor.
pub const OBJECTNESS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Channels after the stem; each downsampling stage doubles them.
    pub width: i64,
    pub max_width: i64,
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 16,
            max_width: 64,
            blocks_per_stage: 1,
        }
    }
}

/// Output stride: three stride-2 stages.
pub const STRIDE: i64 = 8;

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut ChaCha8Rng, kind: Kind) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), spec.equalized(false), rng, kind),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), spec.out_ch, kind),
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let y = self.bn.forward(&self.conv.forward(x), train);
        y.maximum(&(&y * SLOPE))
    }
}

struct Residual {
    squeeze: ConvBn,
    expand: ConvBn,
}

struct Stage {
    down: ConvBn,
    blocks: Vec<Residual>,
}

/// Compact residual backbone with a single stride-8 prediction head.
pub struct DetectorNet {
    store: ParamStore,
    stem: ConvBn,
    stages: Vec<Stage>,
    head: Conv2d,
    anchors: AnchorSet,
    loss: DetLossConfig,
    backbone: BackboneConfig,
}

impl DetectorNet {
    pub fn new(backbone: BackboneConfig, anchors: AnchorSet, loss: DetLossConfig, seed: u64) -> Result<Self> {
        if backbone.width < 1 || backbone.max_width < backbone.width {
            return Err(Error::InvalidConfig("backbone widths must be positive and ordered".into()));
        }
        loss.validate()?;
        let kind = Kind::Float;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = ConvBn::new(&mut store, "stem", ConvSpec::same(1, backbone.width, 3), &mut rng, kind);
        let mut ch = backbone.width;
        let mut stages = Vec::new();
        for s in 0..3 {
            let out = (ch * 2).min(backbone.max_width);
            let down = ConvBn::new(&mut store, &format!("s{s}.down"), ConvSpec::same(ch, out, 3).strided(2, 1), &mut rng, kind);
            let blocks = (0..backbone.blocks_per_stage)
                .map(|b| Residual {
                    squeeze: ConvBn::new(&mut store, &format!("s{s}.b{b}.squeeze"), ConvSpec::same(out, out / 2, 1), &mut rng, kind),
                    expand: ConvBn::new(&mut store, &format!("s{s}.b{b}.expand"), ConvSpec::same(out / 2, out, 3), &mut rng, kind),
                })
                .collect();
            stages.push(Stage { down, blocks });
            ch = out;
        }
        let outputs = (anchors.len() * loss.fields()) as i64;
        let head = Conv2d::new(&mut store, "head", ConvSpec::same(ch, outputs, 1).gain(1.0).equalized(false), &mut rng, kind);
        tch::no_grad(|| {
            let logit = (OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR)).ln();
            let fields = loss.fields() as i64;
            for b in 0..anchors.len() as i64 {
                let _ = head.bias().narrow(0, b * fields + 4, 1).fill_(logit);
            }
        });
        Ok(Self {
            store,
            stem,
            stages,
            head,
            anchors,
            loss,
            backbone,
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn loss_config(&self) -> &DetLossConfig {
        &self.loss
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[N,1,R,R]` with `R` a multiple of the stride to raw head output
    /// `[N, B*K, R/8, R/8]`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let s = x.size();
        if s.len() != 4 || s[1] != 1 || s[2] != s[3] || s[2] % STRIDE != 0 {
            return Err(Error::Shape(format!("detector input must be [N,1,R,R] with R divisible by {STRIDE}, got {s:?}")));
        }
        let mut h = self.stem.forward(x, train);
        for stage in &self.stages {
            h = stage.down.forward(&h, train);
            for b in &stage.blocks {
                h = &h + b.expand.forward(&b.squeeze.forward(&h, train), train);
            }
        }
        Ok(self.head.forward(&h))
    }
}
