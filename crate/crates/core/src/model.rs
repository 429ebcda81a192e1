//! Generator, discriminators and the recognizer adapter.
//!
//! The generator splits its encoder into a content branch (spatial code) and
//! an identity branch (unit vector) that share a convolutional stem. The
//! decoder injects the identity through modulated convolutions with weight
//! demodulation.

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::{Kind, Tensor};

use crate::data::{tensor_to_vec, ImageTensor};
use crate::error::{Error, Result};
use crate::geometry::{project_f32, IdentityVector};

pub const LEAK: f64 = 0.2;

static INIT_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Runs `build` with libtorch's global generator seeded to `seed`.
///
/// Parameter initialisation draws from that global generator, so two threads
/// building networks at once would interleave draws. Everything that needs
/// reproducible weights builds them through here.
pub fn seeded<T>(seed: u64, build: impl FnOnce() -> T) -> T {
    let _guard = INIT_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    tch::manual_seed(seed as i64);
    build()
}

fn lrelu(x: &Tensor) -> Tensor {
    x.maximum(&(x * LEAK))
}

/// Architecture hyperparameters shared by every network of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: i64,
    pub d_id: i64,
    pub c_con: i64,
    /// Spatial downsampling of the content code, a power of two.
    pub stride: i64,
    /// One stride-2 conv per entry; length is log2(stride).
    pub stem_channels: Vec<i64>,
    /// Extra stride-2 convs of the identity head.
    pub id_channels: Vec<i64>,
    /// Channels of the spatial map the identity code is projected to and
    /// concatenated with the content code at the decoder input; 0 disables it.
    pub id_map_channels: i64,
    /// Decoder widths from the content resolution upwards; length log2(stride) + 1.
    pub decoder_channels: Vec<i64>,
    pub disc_channels: Vec<i64>,
    /// Side length that patches are resized to before the local discriminator.
    pub patch_size: i64,
    pub local_channels: Vec<i64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            d_id: 64,
            c_con: 8,
            stride: 4,
            stem_channels: vec![16, 32],
            id_channels: vec![64, 64],
            id_map_channels: 8,
            decoder_channels: vec![64, 32, 16],
            disc_channels: vec![16, 32, 64, 64],
            patch_size: 16,
            local_channels: vec![32, 64],
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    pub fn content_size(&self) -> i64 {
        self.image_size / self.stride
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stride < 1 || self.stride.count_ones() != 1 {
            return bad(format!("stride {} is not a power of two", self.stride));
        }
        if self.image_size % self.stride != 0 {
            return bad(format!("image_size {} not divisible by stride {}", self.image_size, self.stride));
        }
        if self.stem_channels.len() != self.levels() || self.stem_channels.is_empty() {
            return bad(format!("stem_channels needs {} entries", self.levels().max(1)));
        }
        if self.decoder_channels.len() != self.levels() + 1 {
            return bad(format!("decoder_channels needs {} entries", self.levels() + 1));
        }
        let id_div = 1i64 << self.id_channels.len();
        if self.content_size() % id_div != 0 {
            return bad("identity head downsamples past 1x1".into());
        }
        let d_div = 1i64 << self.disc_channels.len();
        if self.image_size % d_div != 0 || self.patch_size % (1 << self.local_channels.len()) != 0 {
            return bad("discriminator depth exceeds input size".into());
        }
        if self.d_id < 2 || self.c_con < 1 || self.id_map_channels < 0 {
            return bad("d_id must be >= 2, c_con >= 1 and id_map_channels >= 0".into());
        }
        Ok(())
    }
}

fn conv(p: nn::Path, cin: i64, cout: i64, k: i64, stride: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig { stride, padding: k / 2, ..Default::default() };
    nn::conv2d(p, cin, cout, k, cfg)
}

/// Convolution whose input channels are scaled by an affine map of the
/// identity code, optionally followed by demodulation.
#[derive(Debug)]
pub struct ModulatedConv {
    weight: Tensor,
    bias: Tensor,
    affine: nn::Linear,
    padding: i64,
    demodulate: bool,
}

impl ModulatedConv {
    pub fn new(p: nn::Path, d_style: i64, cin: i64, cout: i64, k: i64, demodulate: bool) -> Self {
        let bound = (1.0 / (cin * k * k) as f64).sqrt();
        let weight = p.var("weight", &[cout, cin, k, k], nn::Init::Uniform { lo: -bound, up: bound });
        let bias = p.var("bias", &[cout], nn::Init::Const(0.0));
        let affine = nn::linear(
            &p / "affine",
            d_style,
            cin,
            nn::LinearConfig { bs_init: Some(nn::Init::Const(1.0)), ..Default::default() },
        );
        Self { weight, bias, affine, padding: k / 2, demodulate }
    }

    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Tensor {
        let (b, cin) = (x.size()[0], x.size()[1]);
        let cout = self.weight.size()[0];
        let s = style.apply(&self.affine);
        let y = (x * s.view([b, cin, 1, 1])).conv2d(
            &self.weight,
            None::<Tensor>,
            [1, 1],
            [self.padding, self.padding],
            [1, 1],
            1,
        );
        let y = if self.demodulate {
            let wsq = self.weight.square().sum_dim_intlist([2i64, 3].as_slice(), false, None::<Kind>);
            let d = (s.square().matmul(&wsq.tr()) + 1e-8).rsqrt();
            y * d.view([b, cout, 1, 1])
        } else {
            y
        };
        y + self.bias.view([1, cout, 1, 1])
    }
}

/// Content code: `B x c_con x S/stride x S/stride`.
#[derive(Debug)]
pub struct ContentCode(pub Tensor);

impl ContentCode {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug)]
pub struct Generator {
    cfg: ModelConfig,
    stem: Vec<nn::Conv2D>,
    stem_res: (nn::Conv2D, nn::Conv2D),
    content: (nn::Conv2D, nn::Conv2D),
    id_convs: Vec<nn::Conv2D>,
    id_fc: nn::Linear,
    id_map: Option<nn::Linear>,
    decoder: Vec<ModulatedConv>,
    to_rgb: ModulatedConv,
}

impl Generator {
    /// Parameters are created under `stem/`, `content/`, `identity/` and `decoder/`.
    pub fn new(root: &nn::Path, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stem_p = root / "stem";
        let mut stem = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.stem_channels.iter().enumerate() {
            stem.push(conv(&stem_p / format!("down{i}"), cin, c, 3, 2));
            cin = c;
        }
        let stem_res = (conv(&stem_p / "res_a", cin, cin, 3, 1), conv(&stem_p / "res_b", cin, cin, 3, 1));

        let content_p = root / "content";
        let content = (
            conv(&content_p / "conv", cin, cin, 3, 1),
            conv(&content_p / "proj", cin, cfg.c_con, 1, 1),
        );

        let id_p = root / "identity";
        let mut id_convs = Vec::new();
        let mut c_id = cin;
        for (i, &c) in cfg.id_channels.iter().enumerate() {
            id_convs.push(conv(&id_p / format!("down{i}"), c_id, c, 3, 2));
            c_id = c;
        }
        let side = cfg.content_size() >> cfg.id_channels.len();
        let id_fc = nn::linear(&id_p / "fc", c_id * side * side, cfg.d_id, Default::default());

        let dec_p = root / "decoder";
        let n = cfg.content_size();
        let id_map = (cfg.id_map_channels > 0)
            .then(|| nn::linear(&dec_p / "id_map", cfg.d_id, cfg.id_map_channels * n * n, Default::default()));
        let mut decoder = Vec::new();
        let c0 = cfg.decoder_channels[0];
        decoder.push(ModulatedConv::new(&dec_p / "l0a", cfg.d_id, cfg.c_con + cfg.id_map_channels, c0, 3, true));
        decoder.push(ModulatedConv::new(&dec_p / "l0b", cfg.d_id, c0, c0, 3, true));
        let mut prev = c0;
        for (l, &c) in cfg.decoder_channels.iter().enumerate().skip(1) {
            decoder.push(ModulatedConv::new(&dec_p / format!("l{l}"), cfg.d_id, prev, c, 3, true));
            prev = c;
        }
        let to_rgb = ModulatedConv::new(&dec_p / "to_rgb", cfg.d_id, prev, 3, 1, false);
        Ok(Self { cfg: cfg.clone(), stem, stem_res, content, id_convs, id_fc, id_map, decoder, to_rgb })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let s = x.size();
        let n = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::Shape(format!("generator expects Bx3x{n}x{n}, got {s:?}")));
        }
        Ok(())
    }

    /// Raw tensors: content code and the sphere-projected identity `B x d_id`.
    pub fn encode_tensors(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(x)?;
        let mut h = x.shallow_clone();
        for c in &self.stem {
            h = lrelu(&h.apply(c));
        }
        let r = lrelu(&h.apply(&self.stem_res.0)).apply(&self.stem_res.1);
        let h = lrelu(&(h + r));

        let z_con = lrelu(&h.apply(&self.content.0)).apply(&self.content.1);

        let mut g = h;
        for c in &self.id_convs {
            g = lrelu(&g.apply(c));
        }
        let z = g.flatten(1, -1).apply(&self.id_fc);
        Ok((z_con, normalize_rows(&z)))
    }

    pub fn decode_tensors(&self, z_con: &Tensor, z_id: &Tensor) -> Result<Tensor> {
        let s = z_con.size();
        let (n, c) = (self.cfg.content_size(), self.cfg.c_con);
        if s.len() != 4 || s[1] != c || s[2] != n || s[3] != n {
            return Err(Error::Shape(format!("content code must be Bx{c}x{n}x{n}, got {s:?}")));
        }
        let zs = z_id.size();
        if zs.len() != 2 || zs[0] != s[0] || zs[1] != self.cfg.d_id {
            return Err(Error::Shape(format!(
                "identity must be {}x{}, got {zs:?}",
                s[0], self.cfg.d_id
            )));
        }
        let input = match &self.id_map {
            Some(m) => {
                let map = z_id.to_kind(z_con.kind()).apply(m).view([s[0], self.cfg.id_map_channels, n, n]);
                Tensor::cat(&[z_con.shallow_clone(), map], 1)
            }
            None => z_con.shallow_clone(),
        };
        let mut h = lrelu(&self.decoder[0].forward(&input, z_id));
        h = lrelu(&self.decoder[1].forward(&h, z_id));
        for layer in &self.decoder[2..] {
            let (hh, ww) = (h.size()[2], h.size()[3]);
            h = h.upsample_nearest2d([hh * 2, ww * 2], None, None);
            h = lrelu(&layer.forward(&h, z_id));
        }
        Ok(self.to_rgb.forward(&h, z_id).tanh())
    }

    /// Encodes a batch into its content code and one identity per image.
    pub fn encode(&self, x: &ImageTensor) -> Result<(ContentCode, Vec<IdentityVector>)> {
        let (z_con, z_id) = tch::no_grad(|| self.encode_tensors(x.tensor()))?;
        Ok((ContentCode(z_con), identity_rows(&z_id)?))
    }

    pub fn decode(&self, z_con: &ContentCode, z_id: &[IdentityVector]) -> Result<ImageTensor> {
        let ids = identity_tensor(z_id, self.cfg.d_id)?.to_kind(z_con.0.kind());
        let out = tch::no_grad(|| self.decode_tensors(&z_con.0, &ids))?;
        ImageTensor::new(out)
    }
}

/// Divides each row by its Euclidean norm.
pub fn normalize_rows(z: &Tensor) -> Tensor {
    let n = z.square().sum_dim_intlist([1i64].as_slice(), true, None::<Kind>).sqrt().clamp_min(1e-12);
    z / n
}

pub fn identity_rows(z: &Tensor) -> Result<Vec<IdentityVector>> {
    let b = z.size()[0];
    (0..b).map(|i| project_f32(&tensor_to_vec(&z.get(i)))).collect()
}

pub fn identity_tensor(ids: &[IdentityVector], d_id: i64) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::Shape("no identity vectors".into()));
    }
    if let Some(bad) = ids.iter().find(|v| v.dim() as i64 != d_id) {
        return Err(Error::Shape(format!("identity dim {} != {d_id}", bad.dim())));
    }
    let flat: Vec<f32> = ids.iter().flat_map(|v| v.to_f32()).collect();
    Ok(Tensor::from_slice(&flat).view([ids.len() as i64, d_id]))
}

/// Conditional discriminator over channel-concatenated image pairs.
#[derive(Debug)]
pub struct PairDiscriminator {
    input_size: i64,
    convs: Vec<nn::Conv2D>,
    fc: nn::Linear,
}

impl PairDiscriminator {
    pub fn new(root: &nn::Path, input_size: i64, channels: &[i64]) -> Self {
        let mut convs = Vec::new();
        let mut cin = 6;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(conv(root / format!("down{i}"), cin, c, 3, 2));
            cin = c;
        }
        let side = input_size >> channels.len();
        let fc = nn::linear(root / "fc", cin * side * side, 1, Default::default());
        Self { input_size, convs, fc }
    }

    /// Full-image pair discriminator.
    pub fn global(root: &nn::Path, cfg: &ModelConfig) -> Self {
        Self::new(root, cfg.image_size, &cfg.disc_channels)
    }

    /// Patch-pair discriminator.
    pub fn local(root: &nn::Path, cfg: &ModelConfig) -> Self {
        Self::new(root, cfg.patch_size, &cfg.local_channels)
    }

    /// One logit per batch element; `(a, b)` order matters.
    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.size(), b.size());
        let n = self.input_size;
        if sa != sb || sa.len() != 4 || sa[1] != 3 || sa[2] != n || sa[3] != n {
            return Err(Error::Shape(format!("pair must be two Bx3x{n}x{n} tensors, got {sa:?} and {sb:?}")));
        }
        let mut h = Tensor::cat(&[a, b], 1);
        for c in &self.convs {
            h = lrelu(&h.apply(c));
        }
        Ok(h.flatten(1, -1).apply(&self.fc).view([-1]))
    }
}

/// Recognizer architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    pub image_size: i64,
    /// Images are average-pooled to this side first.
    pub input_size: i64,
    pub channels: Vec<i64>,
    pub hidden: i64,
    pub d_id: i64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self { image_size: 64, input_size: 32, channels: vec![32, 64, 64], hidden: 128, d_id: 64 }
    }
}

/// Face-recognition embedding network.
#[derive(Debug)]
pub struct Recognizer {
    cfg: RecognizerConfig,
    stem: nn::Conv2D,
    convs: Vec<nn::Conv2D>,
    fc1: nn::Linear,
    fc2: nn::Linear,
}

impl Recognizer {
    pub fn new(root: &nn::Path, cfg: &RecognizerConfig) -> Self {
        let stem = conv(root / "stem", 3, cfg.channels[0], 3, 1);
        let mut convs = Vec::new();
        let mut cin = cfg.channels[0];
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(conv(root / format!("down{i}"), cin, c, 3, 2));
            cin = c;
        }
        let side = cfg.input_size >> cfg.channels.len();
        let fc1 = nn::linear(root / "fc1", cin * side * side, cfg.hidden, Default::default());
        let fc2 = nn::linear(root / "fc2", cfg.hidden, cfg.d_id, Default::default());
        Self { cfg: cfg.clone(), stem, convs, fc1, fc2 }
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.cfg
    }
}

impl Module for Recognizer {
    fn forward(&self, x: &Tensor) -> Tensor {
        let n = self.cfg.input_size;
        let mut h = if x.size()[2] == n { x.shallow_clone() } else { x.adaptive_avg_pool2d([n, n]) };
        h = lrelu(&h.apply(&self.stem));
        for c in &self.convs {
            h = lrelu(&h.apply(c));
        }
        lrelu(&h.flatten(1, -1).apply(&self.fc1)).apply(&self.fc2)
    }
}

/// Frozen, calibrated recognizer used as `R_id` in the identity losses and
/// as the verification system in evaluation.
#[derive(Debug)]
pub struct RecognizerAdapter {
    pub vs: nn::VarStore,
    pub net: Recognizer,
    /// Cosine at which the recognizer accepts a match.
    pub threshold: f64,
    /// False-accept rate the threshold was calibrated to.
    pub far: f64,
}

impl RecognizerAdapter {
    pub fn new(cfg: &RecognizerConfig) -> Self {
        let vs = nn::VarStore::new(tch::Device::Cpu);
        let net = Recognizer::new(&vs.root(), cfg);
        Self { vs, net, threshold: 1.0, far: 0.001 }
    }

    /// Freezes every parameter; no optimizer can touch them afterwards.
    pub fn frozen(mut self) -> Self {
        self.vs.freeze();
        self
    }

    pub fn d_id(&self) -> i64 {
        self.net.cfg.d_id
    }

    /// Differentiable embedding with respect to `x` (parameters stay frozen).
    pub fn embed(&self, x: &Tensor) -> Tensor {
        let x = if x.kind() == self.kind() { x.shallow_clone() } else { x.to_kind(self.kind()) };
        self.net.forward(&x)
    }

    pub fn kind(&self) -> Kind {
        self.vs.variables().values().next().map(|t| t.kind()).unwrap_or(Kind::Float)
    }

    /// One raw embedding per image.
    pub fn recognize(&self, x: &ImageTensor) -> Result<Vec<Vec<f32>>> {
        let n = self.net.cfg.image_size;
        if x.image_size() != n {
            return Err(Error::Shape(format!("recognizer expects {n}px images, got {}", x.image_size())));
        }
        let e = tch::no_grad(|| self.embed(x.tensor()));
        Ok((0..e.size()[0]).map(|i| tensor_to_vec(&e.get(i))).collect())
    }

    pub fn theta(&self) -> f64 {
        crate::geometry::theta_from_threshold(self.threshold)
    }
}

/// Cosine similarity of raw embeddings.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab / (aa.sqrt() * bb.sqrt()).max(1e-12)).clamp(-1.0, 1.0)
}
