//! Encoder-decoder segmentation network with side-output fusion, stand-alone
//! upsampling connections (ILCs) into the target decoder stage, and an
//! auxiliary head at the preeminent encoder layer.
//!
//! Stages are numbered from 1 (full resolution) to `M` (coarsest). Encoder
//! stage `m` outputs `E_m`; decoder stage `m < M` upsamples the stage-`m+1`
//! result `x`, concatenates it with `E_m` (and any ILC operands) and applies a
//! convolution block.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{BatchNormStats, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::lerf::{self, LayerGeom, LayerKind, LayerRF, PreeminentLayer};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlcMode {
    None,
    /// Stand-alone upsamplers from every deeper stage into the target stage.
    Target,
    /// One upsampling chain per deeper stage whose intermediate outputs feed
    /// every decoder stage they pass.
    AllShared,
}

impl IlcMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IlcMode::None => "none",
            IlcMode::Target => "target",
            IlcMode::AllShared => "all_shared",
        }
    }
}

impl fmt::Display for IlcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IlcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(IlcMode::None),
            "target" => Ok(IlcMode::Target),
            "all_shared" => Ok(IlcMode::AllShared),
            other => Err(Error::Config(format!(
                "unknown ilc_mode '{other}' (expected none, target or all_shared)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub num_stages: usize,
    pub channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub kernel_size: usize,
    pub downsample: usize,
    pub target_stage: usize,
    /// 1-based index into [`NetworkSpec::encoder_layers`].
    pub preeminent_layer: usize,
    pub ilc_mode: IlcMode,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            num_stages: 4,
            channels: vec![64, 128, 256, 512],
            convs_per_stage: 2,
            kernel_size: 3,
            downsample: 2,
            target_stage: 1,
            preeminent_layer: 2,
            ilc_mode: IlcMode::Target,
            num_classes: 2,
            in_channels: 3,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Spec(msg));
        let m = self.num_stages;
        if m < 2 {
            return fail(format!("need at least 2 stages, got {m}"));
        }
        if self.channels.len() != m {
            return fail(format!("{} channel counts for {} stages", self.channels.len(), m));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return fail(format!("channels must be positive and strictly increasing: {:?}", self.channels));
        }
        if self.convs_per_stage == 0 {
            return fail("convs_per_stage must be at least 1".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.downsample < 2 {
            return fail(format!("downsample factor must be at least 2, got {}", self.downsample));
        }
        if self.target_stage == 0 || self.target_stage > m {
            return fail(format!("target stage {} outside 1..={}", self.target_stage, m));
        }
        let n = self.encoder_layers().len();
        if self.preeminent_layer == 0 || self.preeminent_layer > n {
            return fail(format!("preeminent layer {} outside 1..={}", self.preeminent_layer, n));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return fail(format!("{} classes from {} input channels", self.num_classes, self.in_channels));
        }
        Ok(())
    }

    /// Encoder layers in order: the convolutions of stage 1, then for each
    /// deeper stage its pooling layer followed by its convolutions.
    pub fn encoder_layers(&self) -> Vec<LayerGeom> {
        let mut out = Vec::new();
        for stage in 1..=self.num_stages {
            if stage > 1 {
                out.push(LayerGeom::pool(self.downsample, stage));
            }
            for _ in 0..self.convs_per_stage {
                out.push(LayerGeom::conv(self.kernel_size, 1, stage));
            }
        }
        out
    }

    pub fn receptive_fields(&self) -> Result<Vec<LayerRF>> {
        lerf::receptive_fields(&self.encoder_layers())
    }

    /// Channels produced by the 1-based encoder layer.
    pub fn layer_channels(&self, layer: usize) -> usize {
        let g = self.encoder_layers()[layer - 1];
        match g.kind {
            LayerKind::Conv => self.channels[g.stage - 1],
            LayerKind::Pool => self.channels[g.stage - 2],
        }
    }

    pub fn layer_stage(&self, layer: usize) -> usize {
        self.encoder_layers()[layer - 1].stage
    }

    /// Places the auxiliary head and target stage at the chosen layer.
    pub fn with_preeminent(mut self, p: PreeminentLayer) -> Result<Self> {
        self.preeminent_layer = p.layer_index;
        self.target_stage = lerf::target_stage(p.stage, self.num_stages)?;
        self.validate()?;
        Ok(self)
    }

    /// Input sides must be a multiple of this.
    pub fn input_multiple(&self) -> usize {
        self.downsample.pow(self.num_stages as u32 - 1)
    }

    fn c(&self, stage: usize) -> usize {
        self.channels[stage - 1]
    }

    /// Deeper stages whose ILC output enters decoder stage `m`.
    pub fn ilc_sources(&self, m: usize) -> Vec<usize> {
        match self.ilc_mode {
            IlcMode::None => Vec::new(),
            IlcMode::Target if m == self.target_stage => (m + 1..=self.num_stages).collect(),
            IlcMode::Target => Vec::new(),
            IlcMode::AllShared => (m + 1..=self.num_stages).collect(),
        }
    }

    /// Lowest stage the ILC chain from `source` reaches, if the chain exists.
    fn ilc_chain_end(&self, source: usize) -> Option<usize> {
        let end = match self.ilc_mode {
            IlcMode::None => return None,
            IlcMode::Target => self.target_stage,
            IlcMode::AllShared => 1,
        };
        (source > end).then_some(end)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    He(usize),
    Zeros,
    Ones,
}

type ParamDecl = (String, Vec<usize>, Init);

/// Every parameter's name, shape and initialiser, in a stable order.
fn declare(spec: &NetworkSpec) -> (Vec<ParamDecl>, Vec<(String, usize)>) {
    let mut p: Vec<ParamDecl> = Vec::new();
    let mut bn = Vec::new();
    let k = spec.kernel_size;
    let d = spec.downsample;
    let nc = spec.num_classes;
    let mut norm = |p: &mut Vec<ParamDecl>, prefix: String, c: usize| {
        p.push((format!("{prefix}.gamma"), vec![c], Init::Ones));
        p.push((format!("{prefix}.beta"), vec![c], Init::Zeros));
        bn.push((prefix, c));
    };
    for m in 1..=spec.num_stages {
        let mut cin = if m == 1 { spec.in_channels } else { spec.c(m - 1) };
        for j in 1..=spec.convs_per_stage {
            p.push((format!("enc{m}.conv{j}.weight"), vec![spec.c(m), cin, k, k], Init::He(cin * k * k)));
            norm(&mut p, format!("enc{m}.bn{j}"), spec.c(m));
            cin = spec.c(m);
        }
    }
    for i in 2..=spec.num_stages {
        if let Some(end) = spec.ilc_chain_end(i) {
            for j in 1..=i - end {
                let (from, to) = (spec.c(i - j + 1), spec.c(i - j));
                p.push((format!("ilc{i}.up{j}.weight"), vec![from, to, d, d], Init::He(from)));
                norm(&mut p, format!("ilc{i}.bn{j}"), to);
            }
        }
    }
    for m in 1..spec.num_stages {
        let (cm, below) = (spec.c(m), spec.c(m + 1));
        p.push((format!("dec{m}.up.weight"), vec![below, below, d, d], Init::He(below)));
        p.push((format!("dec{m}.up.bias"), vec![below], Init::Zeros));
        p.push((format!("dec{m}.conv1.weight.x"), vec![cm, below, k, k], Init::He(below * k * k)));
        p.push((format!("dec{m}.conv1.weight.skip"), vec![cm, cm, k, k], Init::He(cm * k * k)));
        for i in spec.ilc_sources(m) {
            p.push((format!("dec{m}.conv1.weight.ilc{i}"), vec![cm, cm, k, k], Init::He(cm * k * k)));
        }
        norm(&mut p, format!("dec{m}.bn1"), cm);
        for j in 2..=spec.convs_per_stage {
            p.push((format!("dec{m}.conv{j}.weight"), vec![cm, cm, k, k], Init::He(cm * k * k)));
            norm(&mut p, format!("dec{m}.bn{j}"), cm);
        }
        p.push((format!("side{m}.weight"), vec![nc, cm, 1, 1], Init::He(cm)));
        p.push((format!("side{m}.bias"), vec![nc], Init::Zeros));
        if m > 1 {
            let f = d.pow(m as u32 - 1);
            p.push((format!("side{m}.up.weight"), vec![nc, nc, f, f], Init::He(nc)));
            p.push((format!("side{m}.up.bias"), vec![nc], Init::Zeros));
        }
    }
    let fused = nc * (spec.num_stages - 1);
    p.push(("fuse.weight".into(), vec![nc, fused, 1, 1], Init::He(fused)));
    p.push(("fuse.bias".into(), vec![nc], Init::Zeros));
    let ca = spec.layer_channels(spec.preeminent_layer);
    p.push(("aux.weight".into(), vec![nc, ca, 1, 1], Init::He(ca)));
    p.push(("aux.bias".into(), vec![nc], Init::Zeros));
    let s = spec.layer_stage(spec.preeminent_layer);
    if s > 1 {
        let f = d.pow(s as u32 - 1);
        p.push(("aux.up.weight".into(), vec![nc, nc, f, f], Init::He(nc)));
        p.push(("aux.up.bias".into(), vec![nc], Init::Zeros));
    }
    (p, bn)
}

/// Per-parameter generator so a parameter's initial value depends only on
/// the seed and its name.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn initialise(shape: &[usize], init: Init, seed: u64, name: &str) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::He(fan_in) => {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut rng = param_rng(seed, name);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            Tensor::from_vec(shape, data).expect("length matches shape")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &RunningStats)> {
        self.buffers.iter()
    }

    pub fn buffer(&self, name: &str) -> Option<&RunningStats> {
        self.buffers.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(shape_err!("parameter {} is {:?}, got {:?}", name, slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, stats: RunningStats) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))?;
        if slot.mean.len() != stats.mean.len() || slot.var.len() != stats.var.len() {
            return Err(shape_err!("buffer {} has {} channels", name, slot.mean.len()));
        }
        *slot = stats;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients tracked.
    Train,
    /// Running statistics, parameters entered as constants.
    Eval,
}

/// Parameters entered into one [`Graph`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
    mode: Mode,
    stats: Vec<(String, BatchNormStats)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Spec(format!("network has no parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch statistics recorded by training-mode normalisation layers.
    pub fn take_stats(&mut self) -> Vec<(String, BatchNormStats)> {
        std::mem::take(&mut self.stats)
    }
}

/// Handles to the intermediate results of one forward pass.
pub struct ForwardPass {
    pub y_main: Var,
    pub y_aux: Var,
    /// Output of every encoder layer, in [`NetworkSpec::encoder_layers`] order.
    pub encoder_layers: Vec<Var>,
    /// `E_1 ..= E_M`
    pub encoder_stages: Vec<Var>,
    /// ILC outputs keyed by (source stage, stage reached).
    pub ilc: BTreeMap<(usize, usize), Var>,
    /// Decoder outputs `y_1 ..= y_{M-1}`.
    pub decoder: Vec<Var>,
    /// Side outputs at input resolution, stage 1 first.
    pub side: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualOutput {
    /// `[N, classes, H, W]` logits of the fused main head.
    pub y_main: Tensor,
    /// `[N, classes, H, W]` logits of the auxiliary head.
    pub y_aux: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: ParamStore,
}

impl Model {
    /// He-initialised network; the same spec and seed give identical values.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (decl, bn) = declare(&spec);
        let mut params = ParamStore::default();
        for (name, shape, init) in decl {
            let t = initialise(&shape, init, seed, &name);
            params.params.insert(name, t);
        }
        for (name, c) in bn {
            params.buffers.insert(
                name,
                RunningStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                },
            );
        }
        Ok(Self { spec, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn bind(&self, g: &mut Graph, mode: Mode) -> Bound {
        let vars = self
            .params
            .params
            .iter()
            .map(|(n, t)| {
                let v = match mode {
                    Mode::Train => g.param(t.clone()),
                    Mode::Eval => g.constant(t.clone()),
                };
                (n.clone(), v)
            })
            .collect();
        Bound {
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    fn norm_relu(&self, g: &mut Graph, b: &mut Bound, x: Var, prefix: &str) -> Result<Var> {
        let gamma = b.var(&format!("{prefix}.gamma"))?;
        let beta = b.var(&format!("{prefix}.beta"))?;
        let running = match b.mode {
            Mode::Train => None,
            Mode::Eval => {
                let r = self
                    .params
                    .buffer(prefix)
                    .ok_or_else(|| Error::Spec(format!("network has no buffer {prefix}")))?;
                Some(BatchNormStats {
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                })
            }
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, running.as_ref(), BN_EPS)?;
        if let Some(s) = stats {
            b.stats.push((prefix.to_owned(), s));
        }
        Ok(g.relu(y))
    }

    fn conv_block(&self, g: &mut Graph, b: &mut Bound, x: Var, weight: Var, bn: &str) -> Result<Var> {
        let y = g.conv2d(x, weight, None, 1, self.spec.kernel_size / 2)?;
        self.norm_relu(g, b, y, bn)
    }

    /// 1x1 projection to class logits, upsampled by `scale` when above 1.
    fn head(&self, g: &mut Graph, b: &mut Bound, x: Var, prefix: &str, scale: usize) -> Result<Var> {
        let w = b.var(&format!("{prefix}.weight"))?;
        let bias = b.var(&format!("{prefix}.bias"))?;
        let y = g.conv2d(x, w, Some(bias), 1, 0)?;
        if scale > 1 {
            let w = b.var(&format!("{prefix}.up.weight"))?;
            let bias = b.var(&format!("{prefix}.up.bias"))?;
            return g.conv_transpose2d(y, w, Some(bias), scale);
        }
        Ok(y)
    }

    /// Chain of upsampling blocks carrying `E_source` to stage `end`; returns
    /// the output at every stage passed, nearest first.
    pub fn ilc_chain(&self, g: &mut Graph, b: &mut Bound, source: usize, e: Var, end: usize) -> Result<Vec<Var>> {
        let mut h = e;
        let mut out = Vec::new();
        for j in 1..=source.saturating_sub(end) {
            let w = b.var(&format!("ilc{source}.up{j}.weight"))?;
            let y = g.conv_transpose2d(h, w, None, self.spec.downsample)?;
            h = self.norm_relu(g, b, y, &format!("ilc{source}.bn{j}"))?;
            out.push(h);
        }
        Ok(out)
    }

    /// `y_m = U_m(up(x) ⊕ E_m ⊕ extra...)` where `extra` lists ILC operands
    /// by source stage.
    pub fn decoder_stage(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        m: usize,
        x: Var,
        skip: Var,
        extra: &[(usize, Var)],
    ) -> Result<Var> {
        if m == 0 || m >= self.spec.num_stages {
            return Err(Error::InvalidArgument(format!("no decoder stage {m}")));
        }
        let uw = b.var(&format!("dec{m}.up.weight"))?;
        let ub = b.var(&format!("dec{m}.up.bias"))?;
        let up = g.conv_transpose2d(x, uw, Some(ub), self.spec.downsample)?;
        let target = g.value(skip).shape()[2..].to_vec();
        let mut inputs = vec![up, skip];
        let mut weights = vec![b.var(&format!("dec{m}.conv1.weight.x"))?, b.var(&format!("dec{m}.conv1.weight.skip"))?];
        for &(i, v) in extra {
            inputs.push(v);
            weights.push(b.var(&format!("dec{m}.conv1.weight.ilc{i}"))?);
        }
        for &v in &inputs {
            if g.value(v).shape()[2..] != target[..] {
                return Err(shape_err!(
                    "decoder stage {} operand is {:?}, expected spatial {:?}",
                    m,
                    g.value(v).shape(),
                    target
                ));
            }
        }
        let cat = g.concat_channels(&inputs)?;
        let w = g.concat_channels(&weights)?;
        let mut h = self.conv_block(g, b, cat, w, &format!("dec{m}.bn1"))?;
        for j in 2..=self.spec.convs_per_stage {
            let w = b.var(&format!("dec{m}.conv{j}.weight"))?;
            h = self.conv_block(g, b, h, w, &format!("dec{m}.bn{j}"))?;
        }
        Ok(h)
    }

    /// Target stage with its ILC operands built from `deeper = [E_{t+1}, ..., E_M]`.
    pub fn target_decoder_stage(&self, g: &mut Graph, b: &mut Bound, x: Var, e_t: Var, deeper: &[Var]) -> Result<Var> {
        let t = self.spec.target_stage;
        if self.spec.ilc_mode != IlcMode::Target {
            return Err(Error::InvalidArgument("target_decoder_stage needs ilc_mode = target".into()));
        }
        if deeper.len() != self.spec.num_stages - t {
            return Err(Error::InvalidArgument(format!(
                "target stage {} needs {} deeper encoder outputs, got {}",
                t,
                self.spec.num_stages - t,
                deeper.len()
            )));
        }
        let mut extra = Vec::new();
        for (k, &e) in deeper.iter().enumerate() {
            let i = t + 1 + k;
            let chain = self.ilc_chain(g, b, i, e, t)?;
            extra.push((i, *chain.last().expect("deeper stage has a chain")));
        }
        self.decoder_stage(g, b, t, x, e_t, &extra)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Bound, input: Var) -> Result<ForwardPass> {
        let spec = &self.spec;
        let (_, c, h, w) = g.value(input).dims4()?;
        let q = spec.input_multiple();
        if c != spec.in_channels {
            return Err(shape_err!("network expects {} input channels, got {}", spec.in_channels, c));
        }
        if h == 0 || w == 0 || h % q != 0 || w % q != 0 {
            return Err(shape_err!("input {}x{} is not a multiple of {}", h, w, q));
        }

        let mut layers = Vec::new();
        let mut stages = Vec::new();
        let mut hcur = input;
        for m in 1..=spec.num_stages {
            if m > 1 {
                hcur = g.max_pool2d(hcur, spec.downsample)?;
                layers.push(hcur);
            }
            for j in 1..=spec.convs_per_stage {
                let wv = b.var(&format!("enc{m}.conv{j}.weight"))?;
                hcur = self.conv_block(g, b, hcur, wv, &format!("enc{m}.bn{j}"))?;
                layers.push(hcur);
            }
            stages.push(hcur);
        }

        let mut ilc = BTreeMap::new();
        for i in 2..=spec.num_stages {
            if let Some(end) = spec.ilc_chain_end(i) {
                let outs = self.ilc_chain(g, b, i, stages[i - 1], end)?;
                for (j, v) in outs.into_iter().enumerate() {
                    ilc.insert((i, i - 1 - j), v);
                }
            }
        }

        let mut decoder = vec![None; spec.num_stages - 1];
        let mut x = stages[spec.num_stages - 1];
        for m in (1..spec.num_stages).rev() {
            let extra: Vec<(usize, Var)> = spec.ilc_sources(m).into_iter().map(|i| (i, ilc[&(i, m)])).collect();
            x = self.decoder_stage(g, b, m, x, stages[m - 1], &extra)?;
            decoder[m - 1] = Some(x);
        }
        let decoder: Vec<Var> = decoder.into_iter().map(|v| v.expect("every stage decoded")).collect();

        let mut side = Vec::new();
        for (k, &y) in decoder.iter().enumerate() {
            let m = k + 1;
            side.push(self.head(g, b, y, &format!("side{m}"), spec.downsample.pow(m as u32 - 1))?);
        }
        let cat = g.concat_channels(&side)?;
        let fw = b.var("fuse.weight")?;
        let fb = b.var("fuse.bias")?;
        let y_main = g.conv2d(cat, fw, Some(fb), 1, 0)?;

        let stage = spec.layer_stage(spec.preeminent_layer);
        let y_aux = self.head(
            g,
            b,
            layers[spec.preeminent_layer - 1],
            "aux",
            spec.downsample.pow(stage as u32 - 1),
        )?;

        Ok(ForwardPass {
            y_main,
            y_aux,
            encoder_layers: layers,
            encoder_stages: stages,
            ilc,
            decoder,
            side,
        })
    }

    /// Evaluation-mode forward pass on a `[N, C, H, W]` batch.
    pub fn predict(&self, input: &Tensor) -> Result<DualOutput> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, Mode::Eval);
        let x = g.constant(input.clone());
        let f = self.forward(&mut g, &mut b, x)?;
        Ok(DualOutput {
            y_main: g.value(f.y_main).clone(),
            y_aux: g.value(f.y_aux).clone(),
        })
    }

    /// Exponential moving average of batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchNormStats)], momentum: f32) -> Result<()> {
        for (name, s) in stats {
            let r = self
                .params
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Spec(format!("network has no buffer {name}")))?;
            for (acc, v) in r.mean.iter_mut().zip(&s.mean) {
                *acc = (1.0 - momentum) * *acc + momentum * v;
            }
            for (acc, v) in r.var.iter_mut().zip(&s.var) {
                *acc = (1.0 - momentum) * *acc + momentum * v;
            }
        }
        Ok(())
    }

    /// Layer table with receptive fields, marking the auxiliary head and the
    /// target stage.
    pub fn describe(&self) -> Result<String> {
        let rfs = self.spec.receptive_fields()?;
        let mut s = lerf::format_rf_table(&rfs);
        let p = self.spec.preeminent_layer;
        s.push_str(&format!(
            "auxiliary head: layer {} (stage {}, rf {})\ntarget stage: {}\nilc mode: {}\nparameters: {}\n",
            p,
            self.spec.layer_stage(p),
            rfs[p - 1].rf,
            self.spec.target_stage,
            self.spec.ilc_mode,
            self.parameter_count()
        ));
        Ok(s)
    }
}
