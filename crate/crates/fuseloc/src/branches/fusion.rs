//! Late fusion of the two branch descriptors and the assembled model.
//!
//! Each branch's pooled descriptor is L2-normalized, the pair is combined
//! by concatenation (width `2k`) or elementwise addition (width `k`), and
//! an optional fully-connected head transforms the combined vector. The
//! fused descriptor itself is deliberately left unnormalized.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor};
use crate::branches::image::{chw_to_rows, ImageBranch};
use crate::branches::pc::PcBranch;
use crate::error::{Error, Result};
use crate::nn::init::linear_uniform;
use crate::nn::Mode;
use crate::pooling::{PoolMethod, PoolingHead};
use crate::scalar::Scalar;
use crate::sparse::VoxelGrid;

/// How the two unimodal descriptors are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Concat,
    Add,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "concat" => Some(FusionMode::Concat),
            "add" => Some(FusionMode::Add),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
        }
    }
}

/// Optional transform applied after combining the descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionHead {
    None,
    /// One width-preserving linear layer.
    Fc,
    /// Linear -> ReLU -> linear, width-preserving.
    Mlp,
}

impl FusionHead {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(FusionHead::None),
            "fc" => Some(FusionHead::Fc),
            "mlp" => Some(FusionHead::Mlp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionHead::None => "none",
            FusionHead::Fc => "fc",
            FusionHead::Mlp => "mlp",
        }
    }
}

/// Combine two 1-D descriptors. Concatenation accepts any widths; addition
/// requires equal widths.
pub fn fuse_descriptors<F: Scalar>(
    tape: &Tape<F>,
    d_pc: &Tensor<F>,
    d_rgb: &Tensor<F>,
    mode: FusionMode,
) -> Result<Tensor<F>> {
    if d_pc.shape().len() != 1 || d_rgb.shape().len() != 1 {
        return Err(Error::validation(format!(
            "fuse_descriptors: expected 1-D descriptors, got {:?} and {:?}",
            d_pc.shape(),
            d_rgb.shape()
        )));
    }
    match mode {
        FusionMode::Concat => tape.concat0(&[d_pc, d_rgb]),
        FusionMode::Add => {
            if d_pc.shape() != d_rgb.shape() {
                return Err(Error::validation(format!(
                    "fuse_descriptors: additive fusion needs equal widths, got {} and {}",
                    d_pc.len(),
                    d_rgb.len()
                )));
            }
            tape.add(d_pc, d_rgb)
        }
    }
}

/// Architecture hyperparameters of the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Descriptor width of each branch.
    pub k: usize,
    /// Bottom-up channel widths of the point-cloud pyramid (Conv0..Conv3).
    pub pc_channels: [usize; 4],
    /// Channel widths of the four image blocks.
    pub image_channels: [usize; 4],
    pub fusion_mode: FusionMode,
    pub fusion_head: FusionHead,
    pub pool: PoolMethod,
    /// Voxel edge length used when quantizing point clouds.
    pub quantization_step: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 128,
            pc_channels: [32, 32, 64, 64],
            image_channels: [32, 64, 128, 256],
            fusion_mode: FusionMode::Concat,
            fusion_head: FusionHead::None,
            pool: PoolMethod::Gem,
            quantization_step: 0.01,
        }
    }
}

impl ModelConfig {
    /// Narrow configuration for smoke tests and examples.
    pub fn tiny() -> Self {
        ModelConfig {
            k: 16,
            pc_channels: [8, 8, 16, 16],
            image_channels: [8, 16, 32, 64],
            ..ModelConfig::default()
        }
    }

    /// Width of the fused descriptor.
    pub fn fused_width(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Concat => 2 * self.k,
            FusionMode::Add => self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("model config: descriptor width must be positive"));
        }
        if self.pc_channels.iter().chain(&self.image_channels).any(|&c| c == 0) {
            return Err(Error::validation("model config: channel widths must be positive"));
        }
        if !(self.quantization_step.is_finite() && self.quantization_step > 0.0) {
            return Err(Error::validation("model config: quantization step must be positive"));
        }
        Ok(())
    }
}

enum HeadParams {
    None,
    Fc { w: ParamId, b: ParamId },
    Mlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

/// Descriptor matrices for one forward batch, one row per element.
pub struct BatchOutput<F: Scalar> {
    /// `[B, fused_width]`, unnormalized.
    pub fused: Tensor<F>,
    /// `[B, k]`, L2-normalized rows.
    pub pc: Tensor<F>,
    /// `[B, k]`, L2-normalized rows.
    pub rgb: Tensor<F>,
}

/// The two-branch model with pooling, fusion and the optional head.
pub struct FusedModel {
    pub cfg: ModelConfig,
    pub pc: PcBranch,
    pub img: ImageBranch,
    pc_pool: PoolingHead,
    img_pool: PoolingHead,
    head: HeadParams,
}

impl FusedModel {
    /// Build the model, registering every parameter under a `pc.`, `img.`
    /// or `fuse.` prefix. Initialization is fully determined by `seed`.
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = PcBranch::new(params, &mut rng, cfg.pc_channels, cfg.k);
        let img = ImageBranch::new(params, &mut rng, cfg.image_channels, cfg.k);
        let pc_pool = PoolingHead::new(params, "pc.pool", cfg.pool);
        let img_pool = PoolingHead::new(params, "img.pool", cfg.pool);
        let width = cfg.fused_width();
        let head = match cfg.fusion_head {
            FusionHead::None => HeadParams::None,
            FusionHead::Fc => {
                let w = params.add(
                    "fuse.fc.w",
                    vec![width, width],
                    linear_uniform(&mut rng, width, width * width),
                );
                let b = params.add("fuse.fc.b", vec![width], vec![F::zero(); width]);
                HeadParams::Fc { w, b }
            }
            FusionHead::Mlp => {
                let w1 = params.add(
                    "fuse.mlp.fc1.w",
                    vec![width, width],
                    linear_uniform(&mut rng, width, width * width),
                );
                let b1 = params.add("fuse.mlp.fc1.b", vec![width], vec![F::zero(); width]);
                let w2 = params.add(
                    "fuse.mlp.fc2.w",
                    vec![width, width],
                    linear_uniform(&mut rng, width, width * width),
                );
                let b2 = params.add("fuse.mlp.fc2.b", vec![width], vec![F::zero(); width]);
                HeadParams::Mlp { w1, b1, w2, b2 }
            }
        };
        Ok(FusedModel { cfg, pc, img, pc_pool, img_pool, head })
    }

    /// Forward a batch of paired clouds and images to descriptor matrices.
    pub fn forward_batch<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &mut ParamSet<F>,
        clouds: &[Rc<VoxelGrid>],
        images: &[Tensor<F>],
        mode: Mode,
    ) -> Result<BatchOutput<F>> {
        if clouds.len() != images.len() {
            return Err(Error::validation(format!(
                "forward batch: {} clouds but {} images",
                clouds.len(),
                images.len()
            )));
        }
        let pc_maps = self.pc.forward_batch(tape, params, clouds, mode)?;
        let img_maps = self.img.forward_batch(tape, params, images, mode)?;

        let mut d_pc = Vec::with_capacity(pc_maps.len());
        let mut d_rgb = Vec::with_capacity(pc_maps.len());
        let mut d_fused = Vec::with_capacity(pc_maps.len());
        for (pm, im) in pc_maps.iter().zip(&img_maps) {
            let dp = tape.l2_normalize(&self.pc_pool.pool(tape, params, &pm.feats, mode)?);
            let (pixel_rows, _, _) = chw_to_rows(tape, im)?;
            let dr = tape.l2_normalize(&self.img_pool.pool(tape, params, &pixel_rows, mode)?);
            let df = fuse_descriptors(tape, &dp, &dr, self.cfg.fusion_mode)?;
            d_pc.push(dp);
            d_rgb.push(dr);
            d_fused.push(df);
        }
        fn refs<F: Scalar>(v: &[Tensor<F>]) -> Vec<&Tensor<F>> {
            v.iter().collect()
        }
        let fused = tape.stack_rows(&refs(&d_fused))?;
        let fused = match &self.head {
            HeadParams::None => fused,
            HeadParams::Fc { w, b } => {
                let w = crate::branches::bind(tape, params, *w, mode);
                let b = crate::branches::bind(tape, params, *b, mode);
                tape.linear(&fused, &w, Some(&b))?
            }
            HeadParams::Mlp { w1, b1, w2, b2 } => {
                let w1t = crate::branches::bind(tape, params, *w1, mode);
                let b1t = crate::branches::bind(tape, params, *b1, mode);
                let w2t = crate::branches::bind(tape, params, *w2, mode);
                let b2t = crate::branches::bind(tape, params, *b2, mode);
                let hid = tape.relu(&tape.linear(&fused, &w1t, Some(&b1t))?);
                tape.linear(&hid, &w2t, Some(&b2t))?
            }
        };
        Ok(BatchOutput {
            fused,
            pc: tape.stack_rows(&refs(&d_pc))?,
            rgb: tape.stack_rows(&refs(&d_rgb))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn concat_and_add_combine_as_expected() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]);
        let b = tape.constant(vec![2], vec![3.0, 4.0]);
        let cat = fuse_descriptors(&tape, &a, &b, FusionMode::Concat).unwrap();
        assert_eq!(cat.shape(), &[4]);
        assert_eq!(cat.values(), &[1.0, 2.0, 3.0, 4.0]);
        let sum = fuse_descriptors(&tape, &a, &b, FusionMode::Add).unwrap();
        assert_eq!(sum.values(), &[4.0, 6.0]);
    }

    #[test]
    fn additive_fusion_rejects_width_mismatch() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]);
        let b = tape.constant(vec![3], vec![3.0, 4.0, 5.0]);
        assert!(fuse_descriptors(&tape, &a, &b, FusionMode::Add).is_err());
        assert!(fuse_descriptors(&tape, &a, &b, FusionMode::Concat).is_ok());
    }

    #[test]
    fn default_config_fuses_to_double_width() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.k, 128);
        assert_eq!(cfg.fused_width(), 256);
        let add = ModelConfig { fusion_mode: FusionMode::Add, ..ModelConfig::default() };
        assert_eq!(add.fused_width(), 128);
    }

    fn small_inputs(tape: &Tape<f64>, n: usize) -> (Vec<Rc<VoxelGrid>>, Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut clouds = Vec::new();
        let mut images = Vec::new();
        for _ in 0..n {
            let coords: Vec<[i32; 3]> = (0..6)
                .map(|_| {
                    [rng.gen_range(-4..4), rng.gen_range(-4..4), rng.gen_range(-4..4)]
                })
                .collect();
            clouds.push(Rc::new(VoxelGrid::new(coords, 1).unwrap()));
            let vals: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            images.push(tape.constant(vec![3, 32, 32], vals));
        }
        (clouds, images)
    }

    #[test]
    fn forward_shapes_and_normalization_contract() {
        let mut params = ParamSet::new();
        let model = FusedModel::new(&mut params, ModelConfig::tiny(), 5).unwrap();
        let tape: Tape<f64> = Tape::new();
        let (clouds, images) = small_inputs(&tape, 2);
        let out = model.forward_batch(&tape, &mut params, &clouds, &images, Mode::Eval).unwrap();
        assert_eq!(out.fused.shape(), &[2, 32]);
        assert_eq!(out.pc.shape(), &[2, 16]);
        assert_eq!(out.rgb.shape(), &[2, 16]);
        for row in 0..2 {
            let norm = |m: &Tensor<f64>, w: usize| -> f64 {
                m.values()[row * w..(row + 1) * w].iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            assert!((norm(&out.pc, 16) - 1.0).abs() < 1e-12);
            assert!((norm(&out.rgb, 16) - 1.0).abs() < 1e-12);
            // Concatenation of two unit vectors: norm sqrt(2), not renormalized.
            assert!((norm(&out.fused, 32) - 2.0_f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn additive_fusion_sums_the_unimodal_descriptors() {
        let cfg = ModelConfig { fusion_mode: FusionMode::Add, ..ModelConfig::tiny() };
        let mut params = ParamSet::new();
        let model = FusedModel::new(&mut params, cfg, 5).unwrap();
        let tape: Tape<f64> = Tape::new();
        let (clouds, images) = small_inputs(&tape, 1);
        let out = model.forward_batch(&tape, &mut params, &clouds, &images, Mode::Eval).unwrap();
        assert_eq!(out.fused.shape(), &[1, 16]);
        for i in 0..16 {
            let expect = out.pc.values()[i] + out.rgb.values()[i];
            assert!((out.fused.values()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn head_parameters_register_under_fuse_prefix() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let cfg = ModelConfig { fusion_head: FusionHead::Mlp, ..ModelConfig::tiny() };
        FusedModel::new(&mut params, cfg, 5).unwrap();
        for name in ["fuse.mlp.fc1.w", "fuse.mlp.fc1.b", "fuse.mlp.fc2.w", "fuse.mlp.fc2.b"] {
            assert!(params.lookup(name).is_ok(), "{name} missing");
        }
        let prefixes: Vec<bool> = params
            .iter()
            .map(|(_, p)| {
                p.name.starts_with("pc.") || p.name.starts_with("img.") || p.name.starts_with("fuse.")
            })
            .collect();
        assert!(prefixes.iter().all(|&ok| ok));
    }

    #[test]
    fn same_seed_same_model_same_output() {
        let build = || {
            let mut params = ParamSet::new();
            let model = FusedModel::new(&mut params, ModelConfig::tiny(), 17).unwrap();
            let tape: Tape<f64> = Tape::new();
            let (clouds, images) = small_inputs(&tape, 2);
            let out = model
                .forward_batch(&tape, &mut params, &clouds, &images, Mode::Eval)
                .unwrap();
            out.fused.values().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn fc_head_transforms_but_preserves_width() {
        let cfg = ModelConfig { fusion_head: FusionHead::Fc, ..ModelConfig::tiny() };
        let mut params = ParamSet::new();
        let model = FusedModel::new(&mut params, cfg, 5).unwrap();
        let tape: Tape<f64> = Tape::new();
        let (clouds, images) = small_inputs(&tape, 1);
        let out = model.forward_batch(&tape, &mut params, &clouds, &images, Mode::Eval).unwrap();
        assert_eq!(out.fused.shape(), &[1, 32]);
        // The linear head destroys the sqrt(2) norm of the raw concatenation.
        let norm: f64 = out.fused.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 2.0_f64.sqrt()).abs() > 1e-6);
    }

    #[test]
    fn whole_model_gradients_verify() {
        use crate::autodiff::gradcheck::check_param_gradients;
        let cfg = ModelConfig {
            k: 8,
            pc_channels: [4, 4, 8, 8],
            image_channels: [4, 4, 8, 8],
            fusion_head: FusionHead::Fc,
            ..ModelConfig::tiny()
        };
        let mut params = ParamSet::new();
        let model = FusedModel::new(&mut params, cfg, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let coords_a: Vec<[i32; 3]> =
            vec![[0, 0, 0], [1, 0, 2], [3, 1, 0], [0, 4, 1], [2, 2, 2]];
        let coords_b: Vec<[i32; 3]> = vec![[1, 1, 1], [0, 3, 0], [4, 0, 4]];
        let img_vals: Vec<f64> =
            (0..2 * 3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = check_param_gradients(&mut params, 2, 1e-5, &mut rng, |tape, ps| {
            let mut scratch = ps.clone_values();
            let clouds = vec![
                Rc::new(VoxelGrid::new(coords_a.clone(), 1).unwrap()),
                Rc::new(VoxelGrid::new(coords_b.clone(), 1).unwrap()),
            ];
            let images = vec![
                tape.constant(vec![3, 32, 32], img_vals[..3 * 32 * 32].to_vec()),
                tape.constant(vec![3, 32, 32], img_vals[3 * 32 * 32..].to_vec()),
            ];
            let out = model.forward_batch(tape, &mut scratch, &clouds, &images, Mode::Train)?;
            let sq = tape.mul(&out.fused, &out.fused)?;
            Ok(tape.sum(&sq))
        })
        .unwrap();
        // The deepest layers see tiny true gradients (~1e-8) where the
        // relative comparison is pure finite-difference noise; accept close
        // in relative OR absolute terms.
        assert!(
            report.passes_rel_or_abs(1e-4, 1e-9),
            "worst {:?}",
            report.worst_rel_or_abs(1e-4)
        );
    }
}
