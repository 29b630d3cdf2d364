//! Stochastic image-to-image translation: per-domain content encoders,
//! style encoders, AdaIN generators and patch discriminators.
//!
//! Content encoders map either modality into a shared content space
//! `[C_c, H/4, W/4]`; style encoders compress a slice into a short style
//! vector; generators decode a content code back to image space with the
//! style injected purely through AdaIN parameters produced by a small MLP.
//! Forward passes are pure given parameters — identical inputs give
//! identical outputs — and every method is generic over float width so the
//! finite-difference gradient suite can run the same code in f64.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{conv_init, linear_init, sample_normal, Binding, ParamId, ParamStore};
use crate::phantom::Domain;
use crate::tensor::{Scalar, Tensor};

pub const ADAIN_EPS: f64 = 1e-5;
pub const DISC_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationConfig {
    pub source_channels: usize,
    pub target_channels: usize,
    /// Content-code channels C_c; the encoder stem uses C_c/4 and the first
    /// downsample C_c/2, so this must be a multiple of 4.
    pub content_channels: usize,
    pub style_dim: usize,
    /// First-layer width of the discriminators (doubles per stage).
    pub disc_width: usize,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        TranslationConfig {
            source_channels: 3,
            target_channels: 5,
            content_channels: 64,
            style_dim: 8,
            disc_width: 64,
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_channels < 8 || self.content_channels % 4 != 0 {
            return Err(Error::invalid_config(format!(
                "content_channels must be a multiple of 4 and >= 8, got {}",
                self.content_channels
            )));
        }
        if self.style_dim == 0 {
            return Err(Error::invalid_config("style_dim must be positive"));
        }
        if self.disc_width == 0 {
            return Err(Error::invalid_config("disc_width must be positive"));
        }
        if self.source_channels == 0 || self.target_channels == 0 {
            return Err(Error::invalid_config("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.source_channels,
            Domain::Target => self.target_channels,
        }
    }
}

const GEN_RES_BLOCKS: usize = 3;
/// γ and β for each of the two AdaIN sites per generator residual block.
fn n_adain_params(cc: usize) -> usize {
    GEN_RES_BLOCKS * 2 * 2 * cc
}

#[derive(Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

struct DomainNet {
    channels: usize,
    cenc_stem: Conv,
    cenc_down: [Conv; 2],
    cenc_res: [(Conv, Conv); 3],
    senc_convs: [Conv; 3],
    senc_fc: (ParamId, ParamId),
    mlp: [(ParamId, ParamId); 3],
    gen_res: [(Conv, Conv); GEN_RES_BLOCKS],
    gen_up: [Conv; 2],
    gen_out: Conv,
    disc: [Conv; 5],
}

/// All translation-side parameters for both domains, registered in a
/// [`ParamStore`] under `trans.{s,t}.*` and `disc.{s,t}.*`.
pub struct TranslationNet {
    pub cfg: TranslationConfig,
    src: DomainNet,
    tgt: DomainNet,
}

fn build_domain(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    tag: &str,
    channels: usize,
    cfg: &TranslationConfig,
) -> DomainNet {
    let cc = cfg.content_channels;
    let (w0, w1) = (cc / 4, cc / 2);
    let t = |suffix: &str| format!("trans.{tag}.{suffix}");

    let cenc_stem = {
        let (w, b) = conv_init(store, rng, &t("cenc.stem"), w0, channels, 7);
        Conv { w, b }
    };
    let cenc_down = [
        {
            let (w, b) = conv_init(store, rng, &t("cenc.down0"), w1, w0, 4);
            Conv { w, b }
        },
        {
            let (w, b) = conv_init(store, rng, &t("cenc.down1"), cc, w1, 4);
            Conv { w, b }
        },
    ];
    let mut cenc_res = Vec::new();
    for i in 0..3 {
        let (wa, ba) = conv_init(store, rng, &t(&format!("cenc.res{i}a")), cc, cc, 3);
        let (wb, bb) = conv_init(store, rng, &t(&format!("cenc.res{i}b")), cc, cc, 3);
        cenc_res.push((Conv { w: wa, b: ba }, Conv { w: wb, b: bb }));
    }

    let senc_dims = [(w0, channels, 7), (w1, w0, 4), (cc, w1, 4)];
    let senc_convs: Vec<Conv> = senc_dims
        .iter()
        .enumerate()
        .map(|(i, &(co, ci, k))| {
            let (w, b) = conv_init(store, rng, &t(&format!("senc.c{i}")), co, ci, k);
            Conv { w, b }
        })
        .collect();
    let senc_fc = linear_init(store, rng, &t("senc.fc"), cfg.style_dim, cc);

    let hidden = 2 * cc;
    let mlp = [
        linear_init(store, rng, &t("gen.mlp0"), hidden, cfg.style_dim),
        linear_init(store, rng, &t("gen.mlp1"), hidden, hidden),
        linear_init(store, rng, &t("gen.mlp2"), n_adain_params(cc), hidden),
    ];
    let mut gen_res = Vec::new();
    for i in 0..GEN_RES_BLOCKS {
        let (wa, ba) = conv_init(store, rng, &t(&format!("gen.res{i}a")), cc, cc, 3);
        let (wb, bb) = conv_init(store, rng, &t(&format!("gen.res{i}b")), cc, cc, 3);
        gen_res.push((Conv { w: wa, b: ba }, Conv { w: wb, b: bb }));
    }
    let gen_up = [
        {
            let (w, b) = conv_init(store, rng, &t("gen.up0"), w1, cc, 5);
            Conv { w, b }
        },
        {
            let (w, b) = conv_init(store, rng, &t("gen.up1"), w0, w1, 5);
            Conv { w, b }
        },
    ];
    let gen_out = {
        let (w, b) = conv_init(store, rng, &t("gen.out"), channels, w0, 7);
        Conv { w, b }
    };

    let dw = cfg.disc_width;
    let disc_dims = [
        (dw, channels, 4),
        (2 * dw, dw, 4),
        (4 * dw, 2 * dw, 4),
        (8 * dw, 4 * dw, 4),
        (1, 8 * dw, 1),
    ];
    let disc: Vec<Conv> = disc_dims
        .iter()
        .enumerate()
        .map(|(i, &(co, ci, k))| {
            let name = if i == 4 {
                format!("disc.{tag}.head")
            } else {
                format!("disc.{tag}.c{i}")
            };
            let (w, b) = conv_init(store, rng, &name, co, ci, k);
            Conv { w, b }
        })
        .collect();

    DomainNet {
        channels,
        cenc_stem,
        cenc_down,
        cenc_res: [cenc_res[0], cenc_res[1], cenc_res[2]],
        senc_convs: [senc_convs[0], senc_convs[1], senc_convs[2]],
        senc_fc,
        mlp,
        gen_res: [gen_res[0], gen_res[1], gen_res[2]],
        gen_up,
        gen_out,
        disc: [disc[0], disc[1], disc[2], disc[3], disc[4]],
    }
}

fn conv<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    store: &ParamStore,
    bind: &mut Binding,
    ids: Conv,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> NodeId {
    let w = bind.node(g, store, ids.w);
    let b = bind.node(g, store, ids.b);
    g.conv2d(x, w, b, stride, pad)
}

impl TranslationNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: TranslationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let src = build_domain(store, rng, "s", cfg.source_channels, &cfg);
        let tgt = build_domain(store, rng, "t", cfg.target_channels, &cfg);
        Ok(TranslationNet { cfg, src, tgt })
    }

    fn domain(&self, d: Domain) -> &DomainNet {
        match d {
            Domain::Source => &self.src,
            Domain::Target => &self.tgt,
        }
    }

    fn check_image<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &Graph<T>,
        image: NodeId,
        domain: Domain,
        op: &str,
    ) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = g.value(image).dims4();
        let want = self.domain(domain).channels;
        if c != want {
            return Err(Error::invalid_argument(format!(
                "{op}: image has {c} channels, {domain:?} expects {want}"
            )));
        }
        Ok((b, c, h, w))
    }

    /// Map an image into the shared content space `[B, C_c, H/4, W/4]`.
    pub fn encode_content<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        image: NodeId,
        domain: Domain,
    ) -> Result<NodeId> {
        let (_, _, h, w) = self.check_image(g, image, domain, "encode_content")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid_argument(format!(
                "encode_content: spatial dims {h}x{w} must be divisible by 4"
            )));
        }
        let net = self.domain(domain);
        let mut x = conv(g, store, bind, net.cenc_stem, image, 1, 3);
        x = g.instance_norm(x, ADAIN_EPS);
        x = g.relu(x);
        for down in net.cenc_down {
            x = conv(g, store, bind, down, x, 2, 1);
            x = g.instance_norm(x, ADAIN_EPS);
            x = g.relu(x);
        }
        for (a, b) in net.cenc_res {
            let mut y = conv(g, store, bind, a, x, 1, 1);
            y = g.instance_norm(y, ADAIN_EPS);
            y = g.relu(y);
            y = conv(g, store, bind, b, y, 1, 1);
            y = g.instance_norm(y, ADAIN_EPS);
            x = g.add(x, y);
        }
        Ok(x)
    }

    /// Compress an image into its `[B, d_s]` style code.
    pub fn encode_style<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        image: NodeId,
        domain: Domain,
    ) -> Result<NodeId> {
        self.check_image(g, image, domain, "encode_style")?;
        let net = self.domain(domain);
        let mut x = conv(g, store, bind, net.senc_convs[0], image, 1, 3);
        x = g.relu(x);
        x = conv(g, store, bind, net.senc_convs[1], x, 2, 1);
        x = g.relu(x);
        x = conv(g, store, bind, net.senc_convs[2], x, 2, 1);
        x = g.relu(x);
        let pooled = g.global_avg_pool(x);
        let w = bind.node(g, store, net.senc_fc.0);
        let b = bind.node(g, store, net.senc_fc.1);
        Ok(g.linear(pooled, w, b))
    }

    /// AdaIN (γ, β) for both sites of every generator residual block, as one
    /// `[B, n_adain_params]` tensor. γ slices are offsets around 1.
    fn style_mlp<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        net: &DomainNet,
        style: NodeId,
    ) -> NodeId {
        let mut x = style;
        for (i, (w, b)) in net.mlp.iter().enumerate() {
            let wn = bind.node(g, store, *w);
            let bn = bind.node(g, store, *b);
            x = g.linear(x, wn, bn);
            if i + 1 < net.mlp.len() {
                x = g.relu(x);
            }
        }
        x
    }

    /// Decode a content code under a style code into the domain's image
    /// space; spatial dims come back exactly 4× the content dims.
    pub fn decode<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        content: NodeId,
        style: NodeId,
        domain: Domain,
    ) -> Result<NodeId> {
        let (b, c, _, _) = g.value(content).dims4();
        let cc = self.cfg.content_channels;
        if c != cc {
            return Err(Error::invalid_argument(format!(
                "decode: content has {c} channels, config says {cc}"
            )));
        }
        let (sb, sd) = g.value(style).dims2();
        if sb != b || sd != self.cfg.style_dim {
            return Err(Error::invalid_argument(format!(
                "decode: style shape [{sb}, {sd}] does not match batch {b} / style_dim {}",
                self.cfg.style_dim
            )));
        }
        let net = self.domain(domain);
        let adain_params = self.style_mlp(g, store, bind, net, style);
        let ones = g.constant(Tensor::filled(&[b, cc], T::ONE));

        let mut site = 0usize;
        let mut adain = |g: &mut Graph<T>, x: NodeId| -> NodeId {
            let off = site * 2 * cc;
            site += 1;
            let graw = g.slice_cols(adain_params, off, cc);
            let gamma = g.add(graw, ones);
            let beta = g.slice_cols(adain_params, off + cc, cc);
            g.adain(x, gamma, beta, ADAIN_EPS)
        };

        let mut x = content;
        for (ca, cb) in net.gen_res {
            let mut y = conv(g, store, bind, ca, x, 1, 1);
            y = adain(g, y);
            y = g.relu(y);
            y = conv(g, store, bind, cb, y, 1, 1);
            y = adain(g, y);
            x = g.add(x, y);
        }
        for up in net.gen_up {
            x = g.upsample_nearest2x(x);
            x = conv(g, store, bind, up, x, 1, 2);
            x = g.relu(x);
        }
        Ok(conv(g, store, bind, net.gen_out, x, 1, 3))
    }

    /// Full translation: encode content in `from`, decode into `to`.
    pub fn translate<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        image: NodeId,
        from: Domain,
        to: Domain,
        style: NodeId,
    ) -> Result<NodeId> {
        if from == to {
            return Err(Error::invalid_argument(
                "translate: from and to domains must differ",
            ));
        }
        let content = self.encode_content(g, store, bind, image, from)?;
        self.decode(g, store, bind, content, style, to)
    }

    /// Patch scores in (0, 1), shape `[B, 1, H/16, W/16]`, clamped away from
    /// {0, 1} so log terms stay finite.
    pub fn discriminate<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        image: NodeId,
        domain: Domain,
    ) -> Result<NodeId> {
        let (_, _, h, w) = self.check_image(g, image, domain, "discriminate")?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid_argument(format!(
                "discriminate: spatial dims {h}x{w} must be divisible by 16"
            )));
        }
        let net = self.domain(domain);
        let mut x = image;
        for c in &net.disc[..4] {
            x = conv(g, store, bind, *c, x, 2, 1);
            x = g.leaky_relu(x, 0.2);
        }
        let logits = conv(g, store, bind, net.disc[4], x, 1, 0);
        Ok(g.sigmoid_clamped(logits, DISC_CLAMP))
    }
}

/// Draw a `[batch, style_dim]` style tensor with i.i.d. standard normal
/// coordinates.
pub fn sample_style(rng: &mut ChaCha8Rng, batch: usize, style_dim: usize) -> Tensor<f32> {
    let data = (0..batch * style_dim)
        .map(|_| sample_normal(rng) as f32)
        .collect();
    Tensor::from_vec(&[batch, style_dim], data)
}
