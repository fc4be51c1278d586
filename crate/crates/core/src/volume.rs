//! Dense `c x n^3` feature grids over the `[-1, 1]^3` box.
//!
//! Data is channel-major, then `z`, `y`, `x` (x fastest). Voxel `k` along an
//! axis has its centre at `2(k + 0.5)/n - 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use voldiff_autodiff::ops::sample::{trilinear_taps, upsample_forward};
use voldiff_autodiff::{adam_step_store, Element, AdamConfig, AdamState, Bound, ConvSpec, ParamStore, Tape, Tensor, Var};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::nn::{seeded, Conv};

pub const VOLB_MAGIC: &[u8; 4] = b"VOLB";
pub const VOLB_VERSION: u32 = 1;

pub fn voxel_coord(n: usize, k: usize) -> f64 {
    2.0 * (k as f64 + 0.5) / n as f64 - 1.0
}

/// Centre of voxel `(x, y, z)` indices.
pub fn voxel_center(n: usize, [x, y, z]: [usize; 3]) -> [f64; 3] {
    [voxel_coord(n, x), voxel_coord(n, y), voxel_coord(n, z)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    n: usize,
    c: usize,
    data: Vec<f32>,
}

impl FeatureVolume {
    pub fn new(n: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || c == 0 {
            return Err(invalid("volume", format!("n = {n}, c = {c}")));
        }
        if data.len() != c * n * n * n {
            return Err(invalid("volume", format!("{} values for c = {c}, n = {n}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid("volume", format!("non-finite value at index {i}")));
        }
        Ok(FeatureVolume { n, c, data })
    }

    pub fn zeros(n: usize, c: usize) -> Self {
        FeatureVolume { n, c, data: vec![0.0; c * n * n * n] }
    }

    /// Builds a volume from `f(channel, centre)`.
    pub fn from_fn(n: usize, c: usize, mut f: impl FnMut(usize, [f64; 3]) -> f32) -> Self {
        let mut data = Vec::with_capacity(c * n * n * n);
        for ch in 0..c {
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        data.push(f(ch, voxel_center(n, [x, y, z])));
                    }
                }
            }
        }
        FeatureVolume { n, c, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, ch: usize, [x, y, z]: [usize; 3]) -> usize {
        ((ch * self.n + z) * self.n + y) * self.n + x
    }

    pub fn get(&self, ch: usize, xyz: [usize; 3]) -> f32 {
        self.data[self.index(ch, xyz)]
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let m = self.n * self.n * self.n;
        &self.data[ch * m..(ch + 1) * m]
    }

    /// Trilinear sample; zero outside `[-1, 1]^3`, clamped to the edge voxel
    /// in the half-voxel band inside the box.
    pub fn sample(&self, p: [f64; 3]) -> Vec<f32> {
        let mut out = vec![0.0; self.c];
        self.sample_into(p, &mut out);
        out
    }

    pub fn sample_into(&self, p: [f64; 3], out: &mut [f32]) {
        let m = self.n * self.n * self.n;
        match trilinear_taps(p, [self.n; 3]) {
            None => out.fill(0.0),
            Some(taps) => {
                for (ch, o) in out.iter_mut().enumerate() {
                    let base = ch * m;
                    let acc: f64 = taps.iter().map(|&(i, w)| w * self.data[base + i] as f64).sum();
                    *o = acc as f32;
                }
            }
        }
    }

    /// `[1, c, n, n, n]` tensor view.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([1, self.c, self.n, self.n, self.n], self.data.clone()).expect("consistent by construction")
    }

    /// Accepts `[c, n, n, n]` or `[1, c, n, n, n]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (c, n) = match *t.shape() {
            [c, d, h, w] | [1, c, d, h, w] if d == h && h == w => (c, d),
            _ => return Err(invalid("volume", format!("tensor shape {:?} is not a cubic grid", t.shape()))),
        };
        FeatureVolume::new(n, c, t.data().to_vec())
    }

    pub fn mse(&self, other: &FeatureVolume) -> Result<f64> {
        if (self.n, self.c) != (other.n, other.c) {
            return Err(invalid("volume", format!("shape {}x{}^3 vs {}x{}^3", self.c, self.n, other.c, other.n)));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(VOLB_MAGIC)?;
        for v in [VOLB_VERSION, self.n as u32, self.c as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |detail: String| CoreError::Format { what: "VOLB", detail };
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|e| bad(format!("truncated header: {e}")))?;
        if &head[..4] != VOLB_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap());
        let (version, n, c) = (word(1), word(2) as usize, word(3) as usize);
        if version != VOLB_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if n == 0 || c == 0 || n > 1024 || c > 4096 {
            return Err(bad(format!("implausible size n = {n}, c = {c}")));
        }
        let mut raw = vec![0u8; c * n * n * n * 4];
        r.read_exact(&mut raw).map_err(|e| bad(format!("truncated data: {e}")))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        FeatureVolume::new(n, c, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
        FeatureVolume::read_from(&mut r)
    }
}

/// Homogeneous voxel centres, `z` outer, `y` middle, `x` inner.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateVolume {
    pub n: usize,
    pub centers: Vec<[f64; 4]>,
}

pub fn coordinate_volume(n: usize) -> Result<CoordinateVolume> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let mut centers = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let [a, b, c] = voxel_center(n, [x, y, z]);
                centers.push([a, b, c, 1.0]);
            }
        }
    }
    Ok(CoordinateVolume { n, centers })
}

pub enum UpsampleMode<'a> {
    Trilinear,
    /// Trilinear followed by a residual conv stack; `None` is an error.
    Learned(Option<&'a SrNet>),
}

pub fn upsample(vol: &FeatureVolume, factor: usize, mode: UpsampleMode<'_>) -> Result<FeatureVolume> {
    if factor == 0 {
        return Err(invalid("factor", "must be at least 1"));
    }
    match mode {
        UpsampleMode::Trilinear => {
            let t = upsample_forward(&vol.to_tensor(), factor)?;
            FeatureVolume::from_tensor(&t)
        }
        UpsampleMode::Learned(None) => Err(CoreError::Empty("learned upsampling needs trained super-resolution weights")),
        UpsampleMode::Learned(Some(net)) => {
            if net.channels != vol.c {
                return Err(invalid("volume", format!("{} channels, network expects {}", vol.c, net.channels)));
            }
            let mut tape = Tape::new();
            let b = net.params.bind(&mut tape, false);
            let x = tape.constant(vol.to_tensor());
            let y = net.forward(&mut tape, &b, x, factor)?;
            FeatureVolume::from_tensor(tape.value(y))
        }
    }
}

/// 2x average pooling, the inverse direction used to make training pairs.
pub fn downsample2(vol: &FeatureVolume) -> Result<FeatureVolume> {
    if !vol.n.is_multiple_of(2) {
        return Err(invalid("volume", format!("n = {} is odd", vol.n)));
    }
    let m = vol.n / 2;
    let mut out = FeatureVolume::zeros(m, vol.c);
    for ch in 0..vol.c {
        for z in 0..m {
            for y in 0..m {
                for x in 0..m {
                    let mut s = 0.0;
                    for d in 0..8 {
                        s += vol.get(ch, [2 * x + (d & 1), 2 * y + ((d >> 1) & 1), 2 * z + (d >> 2)]);
                    }
                    let i = out.index(ch, [x, y, z]);
                    out.data[i] = s / 8.0;
                }
            }
        }
    }
    Ok(out)
}

/// Super-resolution stack: trilinear upsample, then three 3x3x3 convs with
/// a residual connection. The last conv starts at zero.
#[derive(Clone, Debug)]
pub struct SrNet {
    pub params: ParamStore,
    channels: usize,
    convs: [Conv; 3],
}

impl SrNet {
    pub fn new(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let same = ConvSpec::new(1, 1);
        let convs = [
            Conv::new(&mut params, "sr.0", channels, hidden, 3, same, 3, rng),
            Conv::new(&mut params, "sr.1", hidden, hidden, 3, same, 3, rng),
            Conv::zeroed(&mut params, "sr.2", hidden, channels, 3, same, 3),
        ];
        SrNet { params, channels, convs }
    }

    pub fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, x: Var, factor: usize) -> Result<Var> {
        let up = t.upsample_trilinear(x, factor)?;
        let h = self.convs[0].forward(t, b, up)?;
        let h = t.relu(h)?;
        let h = self.convs[1].forward(t, b, h)?;
        let h = t.relu(h)?;
        let r = self.convs[2].forward(t, b, h)?;
        Ok(t.add(up, r)?)
    }
}

/// Fits `net` to map `downsample2(v)` back to `v` for each volume; returns
/// the per-step MSE.
pub fn train_sr(net: &mut SrNet, volumes: &[FeatureVolume], steps: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    if volumes.is_empty() {
        return Err(CoreError::Empty("no training volumes"));
    }
    let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = volumes
        .iter()
        .map(|v| Ok((downsample2(v)?.to_tensor(), v.to_tensor())))
        .collect::<Result<_>>()?;
    let mut rng = seeded(seed);
    let mut state = AdamState::new(&net.params);
    let cfg = AdamConfig::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (lo, hi) = &pairs[rng.random_range(0..pairs.len())];
        let mut tape = Tape::new();
        let b = net.params.bind(&mut tape, true);
        let x = tape.constant(lo.clone());
        let y = net.forward(&mut tape, &b, x, 2)?;
        let target = tape.constant(hi.clone());
        let loss = tape.mse(y, target)?;
        losses.push(tape.value(loss).item() as f64);
        let g = b.grads(&tape.backward(loss)?, &net.params);
        adam_step_store(&mut net.params, &g, &mut state, &cfg)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_at_center_returns_voxel() {
        let v = FeatureVolume::from_fn(4, 2, |ch, p| (ch as f64 * 10.0 + p[0] + 3.0 * p[1] - p[2]) as f32);
        let c = voxel_center(4, [1, 2, 3]);
        let s = v.sample(c);
        assert_eq!(s[0], v.get(0, [1, 2, 3]));
        assert_eq!(s[1], v.get(1, [1, 2, 3]));
    }

    #[test]
    fn midpoint_of_eight_corners() {
        let mut v = FeatureVolume::zeros(2, 1);
        for (i, d) in v.data_mut().iter_mut().enumerate() {
            *d = i as f32;
        }
        assert_eq!(v.sample([0.0, 0.0, 0.0]), vec![3.5]);
    }

    #[test]
    fn outside_box_is_zero() {
        let v = FeatureVolume::from_fn(4, 3, |_, _| 1.0);
        assert_eq!(v.sample([5.0, 5.0, 5.0]), vec![0.0; 3]);
        assert_eq!(v.sample([0.99, -0.99, 0.99]), vec![1.0; 3]);
    }

    #[test]
    fn coordinate_volume_cases() {
        assert_eq!(coordinate_volume(1).unwrap().centers, vec![[0.0, 0.0, 0.0, 1.0]]);
        let c2 = coordinate_volume(2).unwrap();
        assert_eq!(c2.centers.len(), 8);
        assert!(c2.centers.iter().all(|p| p[..3].iter().all(|v| v.abs() == 0.5)));
        assert_eq!(c2.centers[1], [0.5, -0.5, -0.5, 1.0]);
        let c32 = coordinate_volume(32).unwrap();
        assert!((c32.centers[1][0] - c32.centers[0][0] - 0.0625).abs() < 1e-15);
        assert!(coordinate_volume(0).is_err());
    }

    #[test]
    fn constant_volume_upsamples_to_constant() {
        let v = FeatureVolume::from_fn(3, 2, |ch, _| 0.25 + ch as f32);
        let u = upsample(&v, 2, UpsampleMode::Trilinear).unwrap();
        assert_eq!(u.n(), 6);
        for ch in 0..2 {
            assert!(u.channel(ch).iter().all(|&x| (x - (0.25 + ch as f32)).abs() < 1e-6));
        }
    }

    #[test]
    fn upsample_matches_sampling_at_new_centres() {
        let v = FeatureVolume::from_fn(4, 1, |_, p| (p[0] * p[1] + (3.0 * p[2]).sin()) as f32);
        let u = upsample(&v, 2, UpsampleMode::Trilinear).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let s = v.sample(voxel_center(8, [x, y, z]))[0];
                    assert!((u.get(0, [x, y, z]) - s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn upsample_keeps_affine_values_at_old_interior_centres() {
        let n = 6;
        let v = FeatureVolume::from_fn(n, 2, |ch, p| (0.3 * p[0] - 0.7 * p[1] + 0.2 * p[2] + ch as f64) as f32);
        let u = upsample(&v, 2, UpsampleMode::Trilinear).unwrap();
        for z in 1..n - 1 {
            for y in 1..n - 1 {
                for x in 1..n - 1 {
                    let got = u.sample(voxel_center(n, [x, y, z]));
                    for (ch, g) in got.iter().enumerate() {
                        assert!((g - v.get(ch, [x, y, z])).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn learned_mode_needs_weights_and_starts_as_trilinear() {
        let v = FeatureVolume::from_fn(4, 2, |ch, p| (p[0] - ch as f64 * p[2]) as f32);
        assert!(upsample(&v, 2, UpsampleMode::Learned(None)).is_err());
        let net = SrNet::new(2, 16, &mut seeded(1));
        let a = upsample(&v, 2, UpsampleMode::Learned(Some(&net))).unwrap();
        let b = upsample(&v, 2, UpsampleMode::Trilinear).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn volb_round_trip_and_validation() {
        let v = FeatureVolume::from_fn(3, 2, |ch, p| (p[0] + ch as f64) as f32);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 2 * 27);
        assert_eq!(FeatureVolume::read_from(&mut buf.as_slice()).unwrap(), v);
        buf[0] = b'X';
        assert!(FeatureVolume::read_from(&mut buf.as_slice()).is_err());
        assert!(FeatureVolume::new(2, 1, vec![0.0; 7]).is_err());
        assert!(FeatureVolume::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn downsample_of_constant_is_constant() {
        let v = FeatureVolume::from_fn(4, 1, |_, _| 2.0);
        let d = downsample2(&v).unwrap();
        assert_eq!(d.n(), 2);
        assert!(d.data().iter().all(|&x| x == 2.0));
    }
}
