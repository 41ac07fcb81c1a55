//! Encoder, template bank and the two frozen whiteners, wired together for
//! inference and for building training graphs.

use ndarray::{concatenate, Array1, Array2, Axis};

use crate::encoder::{ConvEncoder, EncoderConfig, ImageTensor, LocalFeatureSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::lit::{extract_superfeatures, lit_forward, postprocess_graph, LitConfig, SuperFeatureSet, TemplateBank};
use crate::loss::{global_descriptor, global_descriptor_graph};
use crate::params::Bound;
use crate::whitening::{fit_whitening, WhiteningTransform};

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: ConvEncoder,
    pub bank: TemplateBank,
    /// `d -> 128` map applied to raw super-features.
    pub superfeature_whitening: WhiteningTransform,
    /// `D -> 128` map applied to local features for global pooling.
    pub local_whitening: WhiteningTransform,
}

/// Graph handles of one image's super-features.
#[derive(Clone, Copy, Debug)]
pub struct LitNodes {
    pub features: Var,
    pub strengths: Var,
    pub alpha: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ImageNodes {
    pub lit: Option<LitNodes>,
    pub global: Option<Var>,
}

/// Graph bindings of the encoder and bank stores.
#[derive(Clone, Debug)]
pub struct ModelBinding {
    pub encoder: Bound,
    pub bank: Bound,
}

fn truncated_identity(dim: usize, out: usize) -> WhiteningTransform {
    WhiteningTransform::linear(Array2::from_shape_fn((out.min(dim), dim), |(i, j)| {
        f64::from(u8::from(i == j))
    }))
}

impl Model {
    /// Fresh model whose whiteners are truncated identities until
    /// [`Model::initialize_whitening`] runs.
    pub fn new(encoder: EncoderConfig, lit: LitConfig, whiten_dim: usize) -> Result<Self> {
        if lit.input_dim != encoder.output_dim {
            return Err(Error::config(
                "lit.input_dim",
                format!("must equal encoder.output_dim ({})", encoder.output_dim),
            ));
        }
        let encoder = ConvEncoder::new(encoder);
        let bank = TemplateBank::new(lit)?;
        Ok(Self {
            superfeature_whitening: truncated_identity(bank.config.dim, whiten_dim),
            local_whitening: truncated_identity(encoder.output_dim(), whiten_dim),
            encoder,
            bank,
        })
    }

    pub fn whitened_dim(&self) -> usize {
        self.superfeature_whitening.output_dim()
    }

    pub fn local_features(&self, image: &ImageTensor, scale: f64) -> Result<LocalFeatureSet> {
        self.encoder.extract_local_features(image, scale)
    }

    pub fn superfeatures(&self, image: &ImageTensor, scale: f64) -> Result<SuperFeatureSet> {
        let u = self.local_features(image, scale)?;
        extract_superfeatures(&u, &self.bank, &self.superfeature_whitening)
    }

    /// Super-features at every usable scale; unusable scales are skipped.
    pub fn multiscale_superfeatures(&self, image: &ImageTensor, scales: &[f64]) -> Result<Vec<SuperFeatureSet>> {
        let ms = self.encoder.multiscale_extract(image, scales)?;
        ms.sets
            .iter()
            .map(|u| extract_superfeatures(u, &self.bank, &self.superfeature_whitening))
            .collect()
    }

    pub fn global_descriptor(&self, image: &ImageTensor, scale: f64) -> Result<Array1<f64>> {
        let u = self.local_features(image, scale)?;
        global_descriptor(&u, &self.local_whitening)
    }

    /// Fits both whiteners from an initialization pass over `images`.
    ///
    /// Scales are consumed in order until both samples hold at least
    /// `min_samples` rows.
    pub fn initialize_whitening(
        &mut self,
        images: &[ImageTensor],
        scales: &[f64],
        out_dim: usize,
        min_samples: usize,
    ) -> Result<()> {
        let mut raw = Vec::new();
        let mut local = Vec::new();
        let (mut raw_rows, mut local_rows) = (0, 0);
        for &scale in scales {
            for image in images {
                let u = match self.local_features(image, scale) {
                    Ok(u) => u,
                    Err(Error::ScaleTooSmall { .. }) => continue,
                    Err(e) => return Err(e),
                };
                if raw_rows < min_samples {
                    let (s, _) = lit_forward(&u, &self.bank)?;
                    raw_rows += s.nrows();
                    raw.push(s);
                }
                if local_rows < min_samples {
                    local_rows += u.features.nrows();
                    local.push(u.features);
                }
            }
            if raw_rows >= min_samples && local_rows >= min_samples {
                break;
            }
        }
        let stack = |parts: &[Mat]| -> Result<Mat> {
            let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
            concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
        };
        if raw.is_empty() {
            return Err(Error::invalid("whitening initialization saw no usable image"));
        }
        self.superfeature_whitening = fit_whitening(&stack(&raw)?, out_dim)?;
        self.local_whitening = fit_whitening(&stack(&local)?, out_dim)?;
        log::info!("whitening fit on {raw_rows} super-features and {local_rows} local features");
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelBinding {
        ModelBinding {
            encoder: self.encoder.store.bind(g, trainable),
            bank: self.bank.store.bind(g, trainable),
        }
    }

    /// Builds the graph of one image. `with_lit` adds the LIT unroll and
    /// postprocessing, `with_global` the pooled descriptor.
    pub fn image_nodes(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        image: &ImageTensor,
        scale: f64,
        with_lit: bool,
        with_global: bool,
    ) -> Result<ImageNodes> {
        let (input, h, w) = ConvEncoder::prepare_input(image, scale)?;
        let x = g.constant(input);
        let (u, _, _) = self.encoder.forward_graph(g, &binding.encoder, x, h, w);
        if g.value(u).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation);
        }
        self.nodes_from_local(g, binding, u, with_lit, with_global)
    }

    /// As [`Model::image_nodes`], starting from a local feature node.
    pub fn nodes_from_local(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        u: Var,
        with_lit: bool,
        with_global: bool,
    ) -> Result<ImageNodes> {
        let lit = if with_lit {
            let trace = self.bank.forward_graph(g, &binding.bank, u)?;
            let (features, strengths) = postprocess_graph(g, trace.raw, &self.superfeature_whitening);
            Some(LitNodes {
                features,
                strengths,
                alpha: trace.alpha,
            })
        } else {
            None
        };
        let global = with_global.then(|| global_descriptor_graph(g, u, &self.local_whitening));
        Ok(ImageNodes { lit, global })
    }
}

impl LitNodes {
    /// Current values as a plain set, for matching and logging.
    pub fn snapshot(&self, g: &Graph, scale: f64) -> SuperFeatureSet {
        let strengths: Vec<f64> = g.value(self.strengths).iter().copied().collect();
        let alpha = g.value(self.alpha).clone();
        let l = alpha.nrows();
        SuperFeatureSet {
            features: g.value(self.features).clone(),
            strengths,
            attention: crate::lit::AttentionMatrix { alpha },
            scale,
            grid: (l, 1),
        }
    }
}
