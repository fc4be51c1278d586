//! Small layer helpers over the tape: parameters live in a [`ParamStore`] and
//! layers only remember their ids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voldiff_autodiff::{Bound, ConvSpec, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// He-uniform init, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let b = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-b..b))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), he_uniform(&[fan_in, fan_out], fan_in, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, fan_out]));
        Linear { w, b }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, fan_out]));
        Linear { w, b }
    }

    /// `x [rows, in] -> [rows, out]`.
    pub fn forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = t.matmul(x, p.var(self.w))?;
        Ok(t.add(h, p.var(self.b))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
    pub spatial: usize,
}

impl Conv {
    fn build(store: &mut ParamStore, name: &str, co: usize, spec: ConvSpec, spatial: usize, w: Tensor<f32>) -> Self {
        let w = store.add(format!("{name}.w"), w);
        let mut bshape = vec![1, co];
        bshape.extend(std::iter::repeat_n(1, spatial));
        let b = store.add(format!("{name}.b"), Tensor::zeros(bshape));
        Conv { w, b, spec, spatial }
    }

    fn kernel_shape(ci: usize, co: usize, k: usize, spatial: usize) -> Vec<usize> {
        let mut s = vec![co, ci];
        s.extend(std::iter::repeat_n(k, spatial));
        s
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        spec: ConvSpec,
        spatial: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = Self::kernel_shape(ci, co, k, spatial);
        let fan_in = ci * k.pow(spatial as u32);
        let w = he_uniform(&shape, fan_in, rng);
        Self::build(store, name, co, spec, spatial, w)
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, ci: usize, co: usize, k: usize, spec: ConvSpec, spatial: usize) -> Self {
        let w = Tensor::zeros(Self::kernel_shape(ci, co, k, spatial));
        Self::build(store, name, co, spec, spatial, w)
    }

    pub fn forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = if self.spatial == 2 {
            t.conv2d(x, p.var(self.w), self.spec)?
        } else {
            t.conv3d(x, p.var(self.w), self.spec)?
        };
        Ok(t.add(h, p.var(self.b))?)
    }
}

/// Stride-2, kernel-2 transposed 3D convolution (doubles resolution).
#[derive(Clone, Copy, Debug)]
pub struct UpConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl UpConv {
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), he_uniform(&[ci, co, 2, 2, 2], ci, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, co, 1, 1, 1]));
        UpConv { w, b }
    }

    pub fn forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = t.transposed_conv3d(x, p.var(self.w), ConvSpec::new(2, 0))?;
        Ok(t.add(h, p.var(self.b))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]));
        GroupNorm { gamma, beta, groups: groups.min(channels) }
    }

    pub fn forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(t.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)?)
    }
}

/// Derives an independent seed from a base seed and an index (SplitMix64
/// finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
