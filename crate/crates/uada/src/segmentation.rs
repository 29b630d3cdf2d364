//! Segmentation network shared across domains through residual adapters.
//!
//! One encoder–decoder backbone (stride-1 same-padded convolutions, average-
//! pool downsampling, nearest-neighbor upsampling, one residual encoder
//! block, logistic head) serves every input; domain specificity comes from
//! two banks of 1×1 adapter filters applied in parallel to each backbone
//! convolution — `y = F∗x + Z_i∗x` — plus per-modality 1×1 input stems.
//! Adapters start at zero, so an untrained bank leaves the backbone exactly
//! unchanged, and each bank adds well under 5% of the backbone's parameters.
//!
//! Adapter domain 1 is used for synthesized-target inputs, domain 2 for
//! real-target inputs; the active default is domain 1.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{conv_init, Binding, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterDomain {
    /// Domain 1: synthesized target-style inputs.
    Synth,
    /// Domain 2: real target inputs.
    Real,
}

impl AdapterDomain {
    pub fn index(self) -> usize {
        match self {
            AdapterDomain::Synth => 1,
            AdapterDomain::Real => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            1 => Ok(AdapterDomain::Synth),
            2 => Ok(AdapterDomain::Real),
            _ => Err(Error::invalid_argument(format!(
                "adapter domain must be 1 or 2, got {i}"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub source_channels: usize,
    pub target_channels: usize,
    /// Common width after the input stems.
    pub width: usize,
    /// Backbone kernel size (odd, same-padded).
    pub kernel: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            source_channels: 3,
            target_channels: 5,
            width: 32,
            kernel: 5,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::invalid_config(format!(
                "segmentation kernel must be odd and >= 3, got {}",
                self.kernel
            )));
        }
        if self.width < 2 {
            return Err(Error::invalid_config("segmentation width must be >= 2"));
        }
        if self.source_channels == 0 || self.target_channels == 0 {
            return Err(Error::invalid_config("channel counts must be positive"));
        }
        Ok(())
    }
}

/// `F∗x + Z∗x`: a same-padded k×k convolution plus a 1×1 convolution of the
/// same input. The adapter path carries no bias; with `Z = 0` the result is
/// bitwise equal to the plain convolution.
pub fn adapted_conv<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    x: NodeId,
    fw: NodeId,
    fb: NodeId,
    zw: NodeId,
    pad: usize,
) -> NodeId {
    let base = g.conv2d(x, fw, fb, 1, pad);
    let co = g.value(zw).shape()[0];
    let zb = g.constant(Tensor::zeros(&[co]));
    let adapt = g.conv2d(x, zw, zb, 1, 0);
    g.add(base, adapt)
}

struct SegLayer {
    f_w: ParamId,
    f_b: ParamId,
    /// Adapter weights for domains 1 and 2.
    z: [ParamId; 2],
}

/// Backbone + adapter banks, registered under `seg.*`.
pub struct SegNet {
    pub cfg: SegConfig,
    stem_src: (ParamId, ParamId),
    stem_tgt: (ParamId, ParamId),
    layers: Vec<SegLayer>,
    active: AdapterDomain,
}

impl SegNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: SegConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let stem_src = conv_init(store, rng, "seg.stem.src", w, cfg.source_channels, 1);
        let stem_tgt = conv_init(store, rng, "seg.stem.tgt", w, cfg.target_channels, 1);

        let specs: [(&str, usize, usize); 7] = [
            ("enc1", w, w),
            ("enc2", w, 2 * w),
            ("enc3a", 2 * w, 2 * w),
            ("enc3b", 2 * w, 2 * w),
            ("dec2", 2 * w, w),
            ("dec1", w, w),
            ("head", w, 1),
        ];
        let mut layers = Vec::with_capacity(specs.len());
        for (name, ci, co) in specs {
            let (f_w, f_b) = conv_init(
                store,
                rng,
                &format!("seg.backbone.{name}"),
                co,
                ci,
                cfg.kernel,
            );
            let z1 = store.add(
                &format!("seg.adapt1.{name}.w"),
                Tensor::zeros(&[co, ci, 1, 1]),
            );
            let z2 = store.add(
                &format!("seg.adapt2.{name}.w"),
                Tensor::zeros(&[co, ci, 1, 1]),
            );
            layers.push(SegLayer {
                f_w,
                f_b,
                z: [z1, z2],
            });
        }
        Ok(SegNet {
            cfg,
            stem_src,
            stem_tgt,
            layers,
            active: AdapterDomain::Synth,
        })
    }

    /// Select the adapter bank used by `segment` calls without an explicit
    /// domain. The construction-time default is domain 1 (Synth).
    pub fn set_active_domain(&mut self, domain: AdapterDomain) {
        self.active = domain;
    }

    pub fn active_domain(&self) -> AdapterDomain {
        self.active
    }

    fn layer<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        idx: usize,
        domain: AdapterDomain,
        x: NodeId,
    ) -> NodeId {
        let l = &self.layers[idx];
        let fw = bind.node(g, store, l.f_w);
        let fb = bind.node(g, store, l.f_b);
        let zw = bind.node(g, store, l.z[domain.index() - 1]);
        adapted_conv(g, x, fw, fb, zw, self.cfg.kernel / 2)
    }

    /// Lesion probability map `[B, 1, H, W]` for a batch whose channel count
    /// picks the input stem (source- vs target-shaped), with the given
    /// adapter bank applied to every backbone convolution.
    pub fn segment_for<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        image: NodeId,
        domain: AdapterDomain,
    ) -> Result<NodeId> {
        let (_, c, h, w) = g.value(image).dims4();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid_argument(format!(
                "segment: spatial dims {h}x{w} must be divisible by 4"
            )));
        }
        let stem = if c == self.cfg.target_channels {
            self.stem_tgt
        } else if c == self.cfg.source_channels {
            self.stem_src
        } else {
            return Err(Error::invalid_argument(format!(
                "segment: {c}-channel input matches neither source ({}) nor target ({})",
                self.cfg.source_channels, self.cfg.target_channels
            )));
        };
        let sw = bind.node(g, store, stem.0);
        let sb = bind.node(g, store, stem.1);
        let mut x = g.conv2d(image, sw, sb, 1, 0);
        x = g.relu(x);

        x = self.layer(g, store, bind, 0, domain, x); // enc1
        x = g.relu(x);
        x = g.avg_pool2x2(x);
        x = self.layer(g, store, bind, 1, domain, x); // enc2
        x = g.relu(x);
        x = g.avg_pool2x2(x);
        let mut r = self.layer(g, store, bind, 2, domain, x); // enc3a
        r = g.relu(r);
        r = self.layer(g, store, bind, 3, domain, r); // enc3b
        x = g.add(x, r);
        x = g.relu(x);
        x = g.upsample_nearest2x(x);
        x = self.layer(g, store, bind, 4, domain, x); // dec2
        x = g.relu(x);
        x = g.upsample_nearest2x(x);
        x = self.layer(g, store, bind, 5, domain, x); // dec1
        x = g.relu(x);
        let logits = self.layer(g, store, bind, 6, domain, x); // head
        Ok(g.sigmoid(logits))
    }

    /// `segment_for` with the active adapter domain.
    pub fn segment<T: Scalar + std::ops::AddAssign>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        bind: &mut Binding,
        image: NodeId,
    ) -> Result<NodeId> {
        self.segment_for(g, store, bind, image, self.active)
    }

    /// Scalar count of one adapter bank (`seg.adapt{i}.*`).
    pub fn adapter_scalars(&self, store: &ParamStore, domain: AdapterDomain) -> usize {
        let prefix = format!("seg.adapt{}.", domain.index());
        store.num_scalars_matching(|n| n.starts_with(&prefix))
    }

    /// Scalar count of the shared backbone (`seg.backbone.*`).
    pub fn backbone_scalars(&self, store: &ParamStore) -> usize {
        store.num_scalars_matching(|n| n.starts_with("seg.backbone."))
    }
}
