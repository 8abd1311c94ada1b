//! The residual depthwise-separable encoder-decoder network.
//!
//! One shared encoder feeds a *main* decoder (with skip connections, used for
//! inference) and an optional *auxiliary* decoder (no skips) that is only
//! used during semi-supervised training. The auxiliary decoder has two sigmoid
//! heads: a segmentation map and a reconstruction of the input image.
//!
//! Tensors are laid out `(batch, channels, height, width)`. Probability maps
//! have a single channel holding the aggregate score; suspension is `1 - s`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{relu, relu_backward, sigmoid, sigmoid_backward};
use crate::nn::{Conv2d, DecoderBlock, DecoderTrace, EncoderBlock, EncoderTrace, Param};
use crate::perturb::{perturb_latent, PerturbConfig};
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Side length of the square input tile; must be divisible by 16.
    pub input_size: usize,
    pub input_channels: usize,
    /// Channel depth of the stem followed by the four encoder blocks.
    pub block_depths: Vec<usize>,
    pub num_classes: usize,
    pub with_aux: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 448,
            input_channels: 3,
            block_depths: vec![24, 48, 96, 192, 256],
            num_classes: 2,
            with_aux: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_depths.len() != 5 {
            return Err(Error::config(
                "block_depths",
                format!("expected 5 entries, got {}", self.block_depths.len()),
            ));
        }
        if self.block_depths.iter().any(|&d| d == 0) {
            return Err(Error::config("block_depths", "every depth must be >= 1"));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::config(
                "input_size",
                format!("{} is not a positive multiple of 16", self.input_size),
            ));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be >= 1"));
        }
        if self.num_classes != 2 {
            return Err(Error::config(
                "num_classes",
                format!("only the binary single-channel head is supported, got {}", self.num_classes),
            ));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    MainDecoder,
    AuxDecoder,
}

/// Parameter-count scopes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Encoder,
    MainDecoder,
    AuxDecoder,
    /// Encoder plus main decoder.
    Inference,
    All,
}

impl Scope {
    fn contains(self, group: ParamGroup) -> bool {
        match self {
            Scope::Encoder => group == ParamGroup::Encoder,
            Scope::MainDecoder => group == ParamGroup::MainDecoder,
            Scope::AuxDecoder => group == ParamGroup::AuxDecoder,
            Scope::Inference => group != ParamGroup::AuxDecoder,
            Scope::All => true,
        }
    }

    pub const ALL: [Scope; 5] = [
        Scope::Encoder,
        Scope::MainDecoder,
        Scope::AuxDecoder,
        Scope::Inference,
        Scope::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Encoder => "encoder",
            Scope::MainDecoder => "main_decoder",
            Scope::AuxDecoder => "aux_decoder",
            Scope::Inference => "inference",
            Scope::All => "all",
        }
    }
}

/// Encoder output `z` plus the same-resolution features the main decoder
/// concatenates: the stem output (1/1) and encoder blocks 1-3 (1/2, 1/4, 1/8).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeatureMap<T> {
    pub z: Tensor<T>,
    pub skips: Vec<Tensor<T>>,
}

/// Gradient with respect to a [`LatentFeatureMap`]; skip entries are `None`
/// when no gradient reaches them.
#[derive(Clone, Debug)]
pub struct LatentGrad<T> {
    pub z: Tensor<T>,
    pub skips: Vec<Option<Tensor<T>>>,
}

/// Everything a full forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardBundle<T> {
    pub y_main: Tensor<T>,
    pub y_aux: Option<Tensor<T>>,
    pub x_hat: Option<Tensor<T>>,
    pub latent: LatentFeatureMap<T>,
}

#[derive(Clone, Debug)]
struct MainDecoder<T> {
    blocks: Vec<DecoderBlock<T>>,
    fuse: Conv2d<T>,
    head: Conv2d<T>,
}

#[derive(Clone, Debug)]
struct AuxDecoder<T> {
    blocks: Vec<DecoderBlock<T>>,
    fuse: Conv2d<T>,
    head: Conv2d<T>,
    recon: Conv2d<T>,
}

/// Saved activations of an encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderPass<T> {
    pub latent: LatentFeatureMap<T>,
    input: Tensor<T>,
    blocks: Vec<EncoderTrace<T>>,
}

/// Saved activations of a main-decoder pass.
#[derive(Clone, Debug)]
pub struct MainPass<T> {
    pub y: Tensor<T>,
    block_inputs: Vec<Tensor<T>>,
    blocks: Vec<DecoderTrace<T>>,
    fuse_input: Tensor<T>,
    fused: Tensor<T>,
}

/// Saved activations of an auxiliary-decoder pass.
#[derive(Clone, Debug)]
pub struct AuxPass<T> {
    pub y: Tensor<T>,
    pub x_hat: Tensor<T>,
    block_inputs: Vec<Tensor<T>>,
    blocks: Vec<DecoderTrace<T>>,
    fuse_input: Tensor<T>,
    fused: Tensor<T>,
}

/// The segmentation network. Parameters start at zero; see
/// [`crate::trainer::initialize_weights`].
#[derive(Clone, Debug)]
pub struct RsNet<T> {
    config: ArchConfig,
    stem: Conv2d<T>,
    encoder: Vec<EncoderBlock<T>>,
    main: MainDecoder<T>,
    aux: Option<AuxDecoder<T>>,
}

impl<T: Real> RsNet<T> {
    pub fn new(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.block_depths;
        let stem = Conv2d::new("encoder.stem", config.input_channels, d[0], 3, 1);
        let encoder = (0..4)
            .map(|k| EncoderBlock::new(&format!("encoder.block{}", k + 1), d[k], d[k + 1]))
            .collect();
        // Main decoder block k maps depth d[4-k] -> d[3-k]; its input after the
        // first block is widened by the concatenated skip.
        let main_blocks = (0..4)
            .map(|k| {
                let cin = if k == 0 { d[4] } else { 2 * d[4 - k] };
                DecoderBlock::new(&format!("main.block{}", k + 1), cin, d[3 - k])
            })
            .collect();
        let main = MainDecoder {
            blocks: main_blocks,
            fuse: Conv2d::new("main.fuse", 2 * d[0], d[0], 3, 1),
            head: Conv2d::new("main.head", d[0], 1, 1, 1),
        };
        let aux = config.with_aux.then(|| AuxDecoder {
            blocks: (0..4)
                .map(|k| DecoderBlock::new(&format!("aux.block{}", k + 1), d[4 - k], d[3 - k]))
                .collect(),
            fuse: Conv2d::new("aux.fuse", d[0], d[0], 3, 1),
            head: Conv2d::new("aux.head", d[0], 1, 1, 1),
            recon: Conv2d::new("aux.recon", d[0], config.input_channels, 1, 1),
        });
        Ok(RsNet {
            config,
            stem,
            encoder,
            main,
            aux,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    /// All parameters in a fixed order, tagged with their group.
    pub fn params(&self) -> Vec<(ParamGroup, &Param<T>)> {
        let mut out: Vec<(ParamGroup, &Param<T>)> = Vec::new();
        out.extend(self.stem.params().into_iter().map(|p| (ParamGroup::Encoder, p)));
        for b in &self.encoder {
            out.extend(b.params().into_iter().map(|p| (ParamGroup::Encoder, p)));
        }
        for b in &self.main.blocks {
            out.extend(b.params().into_iter().map(|p| (ParamGroup::MainDecoder, p)));
        }
        out.extend(
            self.main
                .fuse
                .params()
                .into_iter()
                .chain(self.main.head.params())
                .map(|p| (ParamGroup::MainDecoder, p)),
        );
        if let Some(aux) = &self.aux {
            for b in &aux.blocks {
                out.extend(b.params().into_iter().map(|p| (ParamGroup::AuxDecoder, p)));
            }
            out.extend(
                aux.fuse
                    .params()
                    .into_iter()
                    .chain(aux.head.params())
                    .chain(aux.recon.params())
                    .map(|p| (ParamGroup::AuxDecoder, p)),
            );
        }
        out
    }

    /// Mutable counterpart of [`RsNet::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Param<T>)> {
        let mut out: Vec<(ParamGroup, &mut Param<T>)> = Vec::new();
        out.extend(self.stem.params_mut().into_iter().map(|p| (ParamGroup::Encoder, p)));
        for b in &mut self.encoder {
            out.extend(b.params_mut().into_iter().map(|p| (ParamGroup::Encoder, p)));
        }
        for b in &mut self.main.blocks {
            out.extend(b.params_mut().into_iter().map(|p| (ParamGroup::MainDecoder, p)));
        }
        out.extend(
            self.main
                .fuse
                .params_mut()
                .into_iter()
                .chain(self.main.head.params_mut())
                .map(|p| (ParamGroup::MainDecoder, p)),
        );
        if let Some(aux) = &mut self.aux {
            for b in &mut aux.blocks {
                out.extend(b.params_mut().into_iter().map(|p| (ParamGroup::AuxDecoder, p)));
            }
            out.extend(
                aux.fuse
                    .params_mut()
                    .into_iter()
                    .chain(aux.head.params_mut())
                    .chain(aux.recon.params_mut())
                    .map(|p| (ParamGroup::AuxDecoder, p)),
            );
        }
        out
    }

    /// Exact number of learnable scalars in `scope`.
    pub fn count_parameters(&self, scope: Scope) -> usize {
        self.params()
            .into_iter()
            .filter(|(g, _)| scope.contains(*g))
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        let expect = [x.batch(), self.config.input_channels, s, s];
        if x.batch() == 0 || x.shape() != expect {
            return Err(Error::input(format!(
                "input shape {:?} does not match expected (N, {}, {s}, {s})",
                x.shape(),
                self.config.input_channels
            )));
        }
        if !x.is_finite() {
            return Err(Error::input("input contains non-finite values"));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size / 16;
        let d = self.config.block_depths[4];
        if z.batch() == 0 || z.shape() != [z.batch(), d, s, s] {
            return Err(Error::input(format!(
                "latent shape {:?} does not match encoder output (N, {d}, {s}, {s})",
                z.shape()
            )));
        }
        Ok(())
    }

    fn aux_decoder(&self) -> Result<&AuxDecoder<T>> {
        self.aux
            .as_ref()
            .ok_or_else(|| Error::Capability("model was built without the auxiliary decoder".into()))
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<EncoderPass<T>> {
        self.check_input(x)?;
        let stem = relu(self.stem.forward(x));
        let mut skips = vec![stem];
        let mut traces = Vec::with_capacity(4);
        let mut z = None;
        for (k, block) in self.encoder.iter().enumerate() {
            let (out, trace) = block.forward(&skips[k]);
            traces.push(trace);
            if k < 3 {
                skips.push(out);
            } else {
                z = Some(out);
            }
        }
        Ok(EncoderPass {
            latent: LatentFeatureMap {
                z: z.expect("four encoder blocks"),
                skips,
            },
            input: x.clone(),
            blocks: traces,
        })
    }

    pub fn decode_main(&self, latent: &LatentFeatureMap<T>) -> Result<MainPass<T>> {
        self.check_latent(&latent.z)?;
        let mut block_inputs = vec![latent.z.clone()];
        let mut traces = Vec::with_capacity(4);
        let mut fuse_input = None;
        for (k, block) in self.main.blocks.iter().enumerate() {
            let (out, trace) = block.forward(&block_inputs[k]);
            traces.push(trace);
            let joined = out.concat_channels(&latent.skips[3 - k]);
            if k < 3 {
                block_inputs.push(joined);
            } else {
                fuse_input = Some(joined);
            }
        }
        let fuse_input = fuse_input.expect("four decoder blocks");
        let fused = relu(self.main.fuse.forward(&fuse_input));
        let y = sigmoid(self.main.head.forward(&fused));
        Ok(MainPass {
            y,
            block_inputs,
            blocks: traces,
            fuse_input,
            fused,
        })
    }

    pub fn decode_aux(&self, z: &Tensor<T>) -> Result<AuxPass<T>> {
        let aux = self.aux_decoder()?;
        self.check_latent(z)?;
        let mut block_inputs = vec![z.clone()];
        let mut traces = Vec::with_capacity(4);
        let mut fuse_input = None;
        for (k, block) in aux.blocks.iter().enumerate() {
            let (out, trace) = block.forward(&block_inputs[k]);
            traces.push(trace);
            if k < 3 {
                block_inputs.push(out);
            } else {
                fuse_input = Some(out);
            }
        }
        let fuse_input = fuse_input.expect("four decoder blocks");
        let fused = relu(aux.fuse.forward(&fuse_input));
        let y = sigmoid(aux.head.forward(&fused));
        let x_hat = sigmoid(aux.recon.forward(&fused));
        Ok(AuxPass {
            y,
            x_hat,
            block_inputs,
            blocks: traces,
            fuse_input,
            fused,
        })
    }

    /// Main-decoder prediction and the latent features it was computed from.
    pub fn forward_main(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LatentFeatureMap<T>)> {
        let enc = self.encode(x)?;
        let main = self.decode_main(&enc.latent)?;
        Ok((main.y, enc.latent))
    }

    /// Auxiliary segmentation map and input reconstruction from a (perturbed) latent.
    pub fn forward_aux(&self, z_perturbed: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let pass = self.decode_aux(z_perturbed)?;
        Ok((pass.y, pass.x_hat))
    }

    /// Main prediction plus, when the auxiliary decoder exists, its outputs on
    /// the perturbed latent.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        perturb: &PerturbConfig,
        rng: &mut R,
    ) -> Result<ForwardBundle<T>> {
        let (y_main, latent) = self.forward_main(x)?;
        let (y_aux, x_hat) = if self.has_aux() {
            let z_tilde = perturb_latent(&latent.z, perturb, rng)?;
            let (y, xh) = self.forward_aux(&z_tilde)?;
            (Some(y), Some(xh))
        } else {
            (None, None)
        };
        Ok(ForwardBundle {
            y_main,
            y_aux,
            x_hat,
            latent,
        })
    }

    /// Backpropagates `grad_y` (w.r.t. the main probability map) through the
    /// main decoder, accumulating its parameter gradients.
    pub fn backward_main(&mut self, pass: &MainPass<T>, grad_y: &Tensor<T>) -> LatentGrad<T> {
        let d0 = self.config.block_depths[0];
        let g_logits = sigmoid_backward(&pass.y, grad_y);
        let g_fused = self
            .main
            .head
            .backward(&pass.fused, &g_logits, true)
            .expect("input grad requested");
        let g_fused = relu_backward(&pass.fused, &g_fused);
        let g_join = self
            .main
            .fuse
            .backward(&pass.fuse_input, &g_fused, true)
            .expect("input grad requested");

        let mut skips: Vec<Option<Tensor<T>>> = vec![None; 4];
        let (mut g_out, g_skip) = g_join.split_channels(d0);
        skips[0] = Some(g_skip);
        for k in (0..4).rev() {
            let block = &mut self.main.blocks[k];
            let g_in = block.backward(&pass.block_inputs[k], &pass.blocks[k], &g_out);
            if k == 0 {
                return LatentGrad { z: g_in, skips };
            }
            let (g_prev, g_skip) = g_in.split_channels(g_in.channels() / 2);
            skips[4 - k] = Some(g_skip);
            g_out = g_prev;
        }
        unreachable!("loop returns at k == 0")
    }

    /// Backpropagates through the auxiliary decoder; returns the gradient
    /// w.r.t. its latent input. Either output gradient may be absent.
    pub fn backward_aux(
        &mut self,
        pass: &AuxPass<T>,
        grad_y: Option<&Tensor<T>>,
        grad_x_hat: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let aux = self
            .aux
            .as_mut()
            .ok_or_else(|| Error::Capability("model was built without the auxiliary decoder".into()))?;
        let mut g_fused = Tensor::zeros(pass.fused.shape());
        if let Some(g) = grad_y {
            let g_logits = sigmoid_backward(&pass.y, g);
            let g = aux.head.backward(&pass.fused, &g_logits, true).expect("input grad");
            g_fused.add_assign(&g);
        }
        if let Some(g) = grad_x_hat {
            let g_logits = sigmoid_backward(&pass.x_hat, g);
            let g = aux.recon.backward(&pass.fused, &g_logits, true).expect("input grad");
            g_fused.add_assign(&g);
        }
        let g_fused = relu_backward(&pass.fused, &g_fused);
        let mut g = aux
            .fuse
            .backward(&pass.fuse_input, &g_fused, true)
            .expect("input grad");
        for k in (0..4).rev() {
            g = aux.blocks[k].backward(&pass.block_inputs[k], &pass.blocks[k], &g);
        }
        Ok(g)
    }

    /// Backpropagates a latent gradient through the encoder.
    pub fn backward_encoder(&mut self, pass: &EncoderPass<T>, grad: LatentGrad<T>) {
        let LatentGrad { z: mut g, skips } = grad;
        for k in (0..4).rev() {
            let input = &pass.latent.skips[k];
            let mut g_in = self.encoder[k].backward(input, &pass.blocks[k], &g);
            if let Some(s) = &skips[k] {
                g_in.add_assign(s);
            }
            g = g_in;
        }
        let g_stem = relu_backward(&pass.latent.skips[0], &g);
        self.stem.backward(&pass.input, &g_stem, false);
    }

    /// Copies every parameter value from `other`, which must share the
    /// encoder/main-decoder layout. Auxiliary parameters are copied when both
    /// models have them.
    pub fn copy_weights_from(&mut self, other: &RsNet<T>) -> Result<()> {
        let src: std::collections::HashMap<&str, &Param<T>> =
            other.params().into_iter().map(|(_, p)| (p.name.as_str(), p)).collect();
        for (group, p) in self.params_mut() {
            match src.get(p.name.as_str()) {
                Some(s) if s.shape == p.shape => p.value.clone_from(&s.value),
                Some(_) => {
                    return Err(Error::input(format!("shape mismatch for parameter {}", p.name)))
                }
                None if group == ParamGroup::AuxDecoder => {}
                None => return Err(Error::input(format!("missing parameter {}", p.name))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::initialize_weights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ArchConfig {
        ArchConfig {
            input_size: 16,
            input_channels: 3,
            block_depths: vec![2, 3, 3, 4, 4],
            num_classes: 2,
            with_aux: true,
        }
    }

    fn random_input(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3, s, s], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ArchConfig {
            input_size: 452,
            ..ArchConfig::default()
        };
        let err = RsNet::<f32>::new(c.clone()).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "input_size"));
        c.input_size = 448;
        c.block_depths = vec![1, 2, 3];
        let err = RsNet::<f32>::new(c.clone()).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "block_depths"));
        c.block_depths = vec![1, 2, 0, 4, 5];
        assert!(RsNet::<f32>::new(c).is_err());
    }

    #[test]
    fn default_parameter_budget() {
        let net = RsNet::<f32>::new(ArchConfig::default()).unwrap();
        let inference = net.count_parameters(Scope::Inference);
        assert_eq!(inference, 1_895_145);
        assert_eq!(
            inference,
            net.count_parameters(Scope::Encoder) + net.count_parameters(Scope::MainDecoder)
        );
        assert!(net.count_parameters(Scope::All) > inference);
        let halved = RsNet::<f32>::new(ArchConfig {
            block_depths: vec![12, 24, 48, 96, 128],
            ..ArchConfig::default()
        })
        .unwrap();
        assert!(halved.count_parameters(Scope::Inference) < inference);
    }

    #[test]
    fn shapes_and_ranges() {
        let mut net = RsNet::<f64>::new(tiny_config()).unwrap();
        initialize_weights(&mut net, 1);
        let x = random_input(2, 16, 2);
        let (y, latent) = net.forward_main(&x).unwrap();
        assert_eq!(y.shape(), [2, 1, 16, 16]);
        assert_eq!(latent.z.shape(), [2, 4, 1, 1]);
        let sizes: Vec<usize> = latent.skips.iter().map(|s| s.height()).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        let (ya, xh) = net.forward_aux(&latent.z).unwrap();
        assert_eq!(ya.shape(), [2, 1, 16, 16]);
        assert_eq!(xh.shape(), [2, 3, 16, 16]);
        for t in [&y, &ya, &xh] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn aux_capability_error_without_aux() {
        let net = RsNet::<f32>::new(ArchConfig {
            with_aux: false,
            ..tiny_config()
        })
        .unwrap();
        let z = Tensor::zeros([1, 4, 1, 1]);
        assert!(matches!(net.forward_aux(&z), Err(Error::Capability(_))));
    }

    #[test]
    fn wrong_input_shape_is_input_error() {
        let net = RsNet::<f32>::new(tiny_config()).unwrap();
        let x = Tensor::zeros([1, 3, 32, 32]);
        assert!(matches!(net.forward_main(&x), Err(Error::Input(_))));
    }

    #[test]
    fn skips_are_wired() {
        let mut net = RsNet::<f64>::new(tiny_config()).unwrap();
        initialize_weights(&mut net, 4);
        let x = random_input(1, 16, 5);
        let enc = net.encode(&x).unwrap();
        let y = net.decode_main(&enc.latent).unwrap().y;
        let mut cut = enc.latent.clone();
        for s in &mut cut.skips {
            *s = Tensor::zeros(s.shape());
        }
        let y_cut = net.decode_main(&cut).unwrap().y;
        assert!(y.max_abs_diff(&y_cut) > 1e-9);
    }

    /// Full-network gradient check in double precision on a probe objective.
    #[test]
    fn network_backward_matches_finite_differences() {
        let mut net = RsNet::<f64>::new(tiny_config()).unwrap();
        initialize_weights(&mut net, 11);
        // Nonzero biases so ReLUs sit away from their kinks.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (_, p) in net.params_mut() {
            if !p.is_weight() {
                p.value.iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
            }
        }
        let x = random_input(2, 16, 13);
        let probe_main = Tensor::<f64>::from_fn([2, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
        let probe_aux = Tensor::<f64>::from_fn([2, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
        let probe_rec = Tensor::<f64>::from_fn([2, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let objective = |net: &RsNet<f64>| -> f64 {
            let enc = net.encode(&x).unwrap();
            let main = net.decode_main(&enc.latent).unwrap();
            let aux = net.decode_aux(&enc.latent.z).unwrap();
            dot(&main.y, &probe_main) + dot(&aux.y, &probe_aux) + dot(&aux.x_hat, &probe_rec)
        };

        net.zero_grad();
        let enc = net.encode(&x).unwrap();
        let main = net.decode_main(&enc.latent).unwrap();
        let aux = net.decode_aux(&enc.latent.z).unwrap();
        let mut lg = net.backward_main(&main, &probe_main);
        let gz = net.backward_aux(&aux, Some(&probe_aux), Some(&probe_rec)).unwrap();
        lg.z.add_assign(&gz);
        net.backward_encoder(&enc, lg);

        let analytic: Vec<(String, Vec<f64>)> = net
            .params()
            .into_iter()
            .map(|(_, p)| (p.name.clone(), p.grad.clone()))
            .collect();
        let eps = 1e-6;
        let mut checked = 0;
        for (pi, (name, grads)) in analytic.iter().enumerate() {
            // A few entries per tensor keep the test fast.
            for i in (0..grads.len()).step_by(grads.len().div_ceil(3).max(1)) {
                let mut plus = net.clone();
                plus.params_mut()[pi].1.value[i] += eps;
                let mut minus = net.clone();
                minus.params_mut()[pi].1.value[i] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let a = grads[i];
                let tol = 1e-5 * (1.0 + fd.abs().max(a.abs()));
                assert!((fd - a).abs() <= tol, "{name}[{i}]: fd={fd} analytic={a}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
