//! The assembled network.

use hiformer_tensor::{Graph, Init, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cnn::{CnnEncoder, CnnPyramid, SkipProjections};
use crate::config::{ModelConfig, ParamReport};
use crate::decoder::{Decoder, DecoderTrace};
use crate::dlf::{Dlf, DlfOutput};
use crate::error::{Error, Result};
use crate::swin::{SwinTrunk, TrunkOutput};

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Scalar> {
    pub pyramid: CnnPyramid<T>,
    pub skips: SkipProjections<T>,
    pub trunk: TrunkOutput<T>,
    pub fused: DlfOutput<T>,
    pub decoder: DecoderTrace<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn logits(&self) -> &Var<T> {
        &self.decoder.logits
    }
}

/// Parameters plus the module structure that addresses them.
#[derive(Debug, Clone)]
pub struct HiFormer<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub cnn: CnnEncoder,
    pub swin: SwinTrunk,
    /// `None` when fusion is disabled.
    pub dlf: Option<Dlf>,
    pub decoder: Decoder,
}

impl<T: Scalar> HiFormer<T> {
    /// Builds and initializes the network; the same seed gives the same
    /// weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let cnn = CnnEncoder::new(
            &mut init,
            config.cnn,
            config.embed_dim,
            config.freeze_bn,
            config.zero_init_residual,
        )?;
        let swin = SwinTrunk::new(&mut init, config)?;
        let dlf = if config.use_dlf { Some(Dlf::new(&mut init, config)?) } else { None };
        let decoder = Decoder::new(&mut init, config)?;
        Ok(HiFormer {
            config: config.clone(),
            store,
            cnn,
            swin,
            dlf,
            decoder,
        })
    }

    pub fn forward_detailed(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<ForwardTrace<T>> {
        let [_, c, h, w] = *x.shape() else {
            return Err(TensorError::ShapeMismatch {
                op: "hiformer",
                detail: format!("expected NCHW input, got {:?}", x.shape()),
            }
            .into());
        };
        if [h, w] != self.config.input_hw || (c != 3 && c != 1) {
            return Err(TensorError::ShapeMismatch {
                op: "hiformer",
                detail: format!(
                    "input {c}x{h}x{w}, model built for 3x{}x{}",
                    self.config.input_hw[0], self.config.input_hw[1]
                ),
            }
            .into());
        }
        let pyramid = self.cnn.forward(g, x)?;
        let skips = self.cnn.project(g, &pyramid)?;
        let trunk = self.swin.forward(g, &skips)?;
        let fused = match &self.dlf {
            Some(d) => d.forward(g, &trunk.large, &trunk.small)?,
            None => Dlf::bypass(g, &trunk.large, &trunk.small)?,
        };
        let decoder = self.decoder.forward(g, &fused)?;
        Ok(ForwardTrace {
            pyramid,
            skips,
            trunk,
            fused,
            decoder,
        })
    }

    /// Logits `(N, K, H, W)`.
    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_detailed(g, x)?.decoder.logits)
    }

    /// Evaluation-mode logits without recording a tape.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference(&self.store);
        let x = g.constant(images.clone());
        Ok(self.forward(&g, &x)?.to_tensor())
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport::from_named(self.store.params().iter().map(|p| (p.name(), p.numel())))
    }

    /// Zeroes the output projection of every attention and MLP (trunk and
    /// fusion encoders), turning each residual block into the identity.
    pub fn zero_output_projections(&mut self) -> usize {
        zero_output_projections(&mut self.store)
    }

    /// Same network with parameters converted to `U`.
    pub fn cast<U: Scalar>(&self) -> HiFormer<U> {
        HiFormer {
            config: self.config.clone(),
            store: self.store.cast(),
            cnn: self.cnn.clone(),
            swin: self.swin.clone(),
            dlf: self.dlf.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

/// Parameter names that end a residual branch.
pub fn is_output_projection(name: &str) -> bool {
    [".attn.proj.weight", ".attn.proj.bias", ".mlp.fc2.weight", ".mlp.fc2.bias"]
        .iter()
        .any(|s| name.ends_with(s))
}

pub fn zero_output_projections<T: Scalar>(store: &mut ParamStore<T>) -> usize {
    store.zero_where(is_output_projection)
}

/// Learnable element count of a model built from `config`.
pub fn count_parameters(config: &ModelConfig) -> Result<ParamReport, Error> {
    // f32 keeps the allocation of the large named models modest
    Ok(HiFormer::<f32>::new(config, 0)?.param_report())
}
