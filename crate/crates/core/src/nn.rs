//! Convolutional building blocks: convolution, batch norm, bottleneck
//! residual blocks, and fully connected layers.

use crate::autodiff::{Record, Var};
use crate::error::{Error, Result};
use crate::params::{BatchNormState, NormId, ParamGroup, ParamId, ParamStore, Scope};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// Allocates named parameters with seeded initialization.
pub struct Builder<'a, T: Real> {
    pub params: &'a mut ParamStore<T>,
    pub norms: &'a mut Vec<BatchNormState<T>>,
    pub rng: &'a mut SplitMix64,
    pub group: ParamGroup,
}

impl<T: Real> Builder<'_, T> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| T::from_f64(self.rng.uniform(lo, hi))).collect();
        let t = Tensor::new(shape, values).expect("valid parameter shape");
        self.params.add(name, self.group, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.params.add(name, self.group, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> NormId {
        self.norms.push(BatchNormState::new(name, channels));
        NormId(self.norms.len() - 1)
    }
}

/// Zero-padded 2-D convolution with bias. Padding is `(k - 1) / 2`
/// ("same" size at stride 1).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Self {
            weight: b.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], -bound, bound),
            bias: b.uniform(&format!("{name}.bias"), &[c_out], -bound, bound),
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Scope<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.rec.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: NormId,
}

impl BatchNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: b.constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: b.constant(&format!("{name}.beta"), &[channels], 0.0),
            state: b.norm(name, channels),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Scope<T>, x: Var) -> Result<Var> {
        s.batch_norm(x, self.gamma, self.beta, self.state)
    }
}

/// Pre-activation bottleneck block:
/// BN→ReLU→1×1 (C/2) → BN→ReLU→3×3 (C/2) → BN→ReLU→1×1 (C), plus an
/// identity skip (or a 1×1 projection when the width changes).
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub c_in: usize,
    pub c_out: usize,
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
    bn3: BatchNorm,
    conv3: Conv2d,
    skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::Config(format!(
                "residual block `{name}`: output width {c_out} is not divisible by 2"
            )));
        }
        let mid = c_out / 2;
        Ok(Self {
            c_in,
            c_out,
            bn1: BatchNorm::new(b, &format!("{name}.bn1"), c_in),
            conv1: Conv2d::new(b, &format!("{name}.conv1"), c_in, mid, 1, 1),
            bn2: BatchNorm::new(b, &format!("{name}.bn2"), mid),
            conv2: Conv2d::new(b, &format!("{name}.conv2"), mid, mid, 3, 1),
            bn3: BatchNorm::new(b, &format!("{name}.bn3"), mid),
            conv3: Conv2d::new(b, &format!("{name}.conv3"), mid, c_out, 1, 1),
            skip: (c_in != c_out).then(|| Conv2d::new(b, &format!("{name}.skip"), c_in, c_out, 1, 1)),
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Scope<T>, x: Var) -> Result<Var> {
        let c = s.rec.shape(x)[1];
        if c != self.c_in {
            return Err(Error::shape("residual_block", s.rec.shape(x), &[self.c_in]));
        }
        let mut h = x;
        for (bn, conv) in [(&self.bn1, &self.conv1), (&self.bn2, &self.conv2), (&self.bn3, &self.conv3)] {
            h = bn.forward(s, h)?;
            h = s.rec.relu(h);
            h = conv.forward(s, h)?;
        }
        let skip = match &self.skip {
            Some(conv) => conv.forward(s, x)?,
            None => x,
        };
        s.rec.add(h, skip)
    }

    /// Every convolution in the block, main path first.
    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        [&self.conv1, &self.conv2, &self.conv3].into_iter().chain(self.skip.as_ref())
    }
}

/// `input · weight + bias` for `input` (B × F_in), `weight` (F_in × F_out)
/// and `bias` (F_out).
pub fn fully_connected<T: Real>(rec: &mut Record<T>, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let (si, sw, sb) = (rec.shape(input), rec.shape(weight), rec.shape(bias));
    if si.len() != 2 || sw.len() != 2 || si[1] != sw[0] || sb != [sw[1]] {
        return Err(Error::shape("fully_connected", si, sw));
    }
    let prod = rec.matmul(input, weight)?;
    rec.add(prod, bias)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, f_in: usize, f_out: usize) -> Self {
        let bound = 1.0 / (f_in as f64).sqrt();
        Self {
            weight: b.uniform(&format!("{name}.weight"), &[f_in, f_out], -bound, bound),
            bias: b.constant(&format!("{name}.bias"), &[f_out], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Scope<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        fully_connected(s.rec, x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::Mode;

    struct Fixture {
        params: ParamStore<f64>,
        norms: Vec<BatchNormState<f64>>,
        rng: SplitMix64,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            Self {
                params: ParamStore::new(),
                norms: Vec::new(),
                rng: SplitMix64::new(seed),
            }
        }

        fn builder(&mut self) -> Builder<'_, f64> {
            Builder {
                params: &mut self.params,
                norms: &mut self.norms,
                rng: &mut self.rng,
                group: ParamGroup::Backbone,
            }
        }
    }

    fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn zero_convs(params: &mut ParamStore<f64>, block: &ResidualBlock) {
        for conv in block.convs() {
            params.get_mut(conv.weight).tensor.values_mut().fill(0.0);
            params.get_mut(conv.bias).tensor.values_mut().fill(0.0);
        }
    }

    #[test]
    fn residual_block_zero_main_path_is_skip() {
        let mut fx = Fixture::new(1);
        let same = ResidualBlock::new(&mut fx.builder(), "same", 4, 4).unwrap();
        let wide = ResidualBlock::new(&mut fx.builder(), "wide", 4, 6).unwrap();
        zero_convs(&mut fx.params, &same);
        let mut rng = SplitMix64::new(2);
        let input = random(&[2, 4, 4, 4], &mut rng);

        let mut rec = Record::new();
        let mut s = Scope::new(&mut rec, &fx.params, &fx.norms, Mode::Train);
        let x = s.rec.leaf(input.clone());
        let y = same.forward(&mut s, x).unwrap();
        assert_eq!(s.rec.value(y).values(), input.values());

        // with a projection skip, zero main path leaves exactly the skip conv
        for conv in [&wide.conv1, &wide.conv2, &wide.conv3] {
            fx.params.get_mut(conv.weight).tensor.values_mut().fill(0.0);
            fx.params.get_mut(conv.bias).tensor.values_mut().fill(0.0);
        }
        let mut rec = Record::new();
        let mut s = Scope::new(&mut rec, &fx.params, &fx.norms, Mode::Train);
        let x = s.rec.leaf(input.clone());
        let y = wide.forward(&mut s, x).unwrap();
        let skip = wide.skip.as_ref().unwrap().forward(&mut s, x).unwrap();
        assert_eq!(s.rec.value(y).values(), s.rec.value(skip).values());
        assert_eq!(s.rec.value(y).shape(), &[2, 6, 4, 4]);
    }

    #[test]
    fn residual_block_rejects_odd_width_and_preserves_extent() {
        let mut fx = Fixture::new(3);
        assert!(matches!(
            ResidualBlock::new(&mut fx.builder(), "odd", 4, 5),
            Err(Error::Config(_))
        ));
        let mut rng = SplitMix64::new(4);
        for (h, w, c_out) in [(4, 4, 2), (6, 2, 8), (8, 8, 4)] {
            let block = ResidualBlock::new(&mut fx.builder(), &format!("b{h}{w}{c_out}"), 3, c_out).unwrap();
            let mut rec = Record::new();
            let mut s = Scope::new(&mut rec, &fx.params, &fx.norms, Mode::Train);
            let x = s.rec.leaf(random(&[2, 3, h, w], &mut rng));
            let y = block.forward(&mut s, x).unwrap();
            assert_eq!(s.rec.shape(y), &[2, c_out, h, w]);
        }
    }

    #[test]
    fn eval_mode_requires_initialized_stats_and_training_updates_them() {
        let mut fx = Fixture::new(5);
        let bn = BatchNorm::new(&mut fx.builder(), "bn", 2);
        let input = Tensor::<f64>::new(&[2, 2, 1, 2], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 2.0, 4.0]).unwrap();
        {
            let mut rec = Record::new();
            let mut s = Scope::new(&mut rec, &fx.params, &fx.norms, Mode::Eval);
            let x = s.rec.leaf(input.clone());
            assert!(matches!(bn.forward(&mut s, x), Err(Error::UninitializedNorm(_))));
        }
        // two training steps; hand-computed moving averages with momentum 0.9
        let second = Tensor::<f64>::new(&[2, 2, 1, 2], vec![2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0]).unwrap();
        for t in [&input, &second] {
            let mut rec = Record::new();
            let mut s = Scope::new(&mut rec, &fx.params, &fx.norms, Mode::Train);
            let x = s.rec.leaf(t.clone());
            bn.forward(&mut s, x).unwrap();
            s.finish().apply(&mut fx.norms);
        }
        // batch 1: ch0 {1,3,5,7} mean 4 var 5; ch1 {0,0,2,4} mean 1.5 var 2.75
        // batch 2: ch0 mean 2 var 0; ch1 mean 1 var 0
        let m0 = 0.9 * (0.9 * 0.0 + 0.1 * 4.0) + 0.1 * 2.0;
        let m1 = 0.9 * (0.9 * 0.0 + 0.1 * 1.5) + 0.1 * 1.0;
        let v0 = 0.9 * (0.9 * 1.0 + 0.1 * 5.0) + 0.1 * 0.0;
        let v1 = 0.9 * (0.9 * 1.0 + 0.1 * 2.75) + 0.1 * 0.0;
        let st = &fx.norms[0];
        assert!(st.initialized);
        assert!((st.running_mean.values()[0] - m0).abs() < 1e-12);
        assert!((st.running_mean.values()[1] - m1).abs() < 1e-12);
        assert!((st.running_var.values()[0] - v0).abs() < 1e-12);
        assert!((st.running_var.values()[1] - v1).abs() < 1e-12);
        assert!(st.running_var.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fully_connected_examples() {
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let zero_w = rec.leaf(Tensor::zeros(&[3, 2]));
        let b = rec.leaf(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        let y = fully_connected(&mut rec, x, zero_w, b).unwrap();
        assert_eq!(rec.value(y).values(), &[0.5, -1.0, 0.5, -1.0]);

        let eye = rec.leaf(Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = rec.leaf(Tensor::zeros(&[3]));
        let y = fully_connected(&mut rec, x, eye, zb).unwrap();
        assert_eq!(rec.value(y).values(), rec.value(x).values());
        assert!(fully_connected(&mut rec, x, zero_w, zb).is_err());

        // random case against a matmul + add oracle
        let mut rng = SplitMix64::new(6);
        let (xt, wt, bt) = (random(&[4, 3], &mut rng), random(&[3, 5], &mut rng), random(&[5], &mut rng));
        let (xv, wv, bv) = (rec.leaf(xt.clone()), rec.leaf(wt.clone()), rec.leaf(bt.clone()));
        let y = fully_connected(&mut rec, xv, wv, bv).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let want = bt.values()[j] + (0..3).map(|k| xt.values()[i * 3 + k] * wt.values()[k * 5 + j]).sum::<f64>();
                assert!((rec.value(y).values()[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_block_grad_check() {
        let mut fx = Fixture::new(8);
        let block = ResidualBlock::new(&mut fx.builder(), "blk", 3, 4).unwrap();
        let mut rng = SplitMix64::new(9);
        let input = random(&[2, 3, 4, 4], &mut rng);
        let weights = random(&[2, 4, 4, 4], &mut rng);
        // check w.r.t. the input and every block parameter
        let mut inputs = vec![input];
        let ids: Vec<ParamId> = fx.params.iter().map(|(id, _)| id).collect();
        inputs.extend(ids.iter().map(|&id| fx.params.get(id).tensor.clone()));
        let err = grad_check(
            |rec, v| {
                let mut s = Scope::new(rec, &fx.params, &fx.norms, Mode::Train);
                for (k, &id) in ids.iter().enumerate() {
                    s.bind(id, v[k + 1]);
                }
                let y = block.forward(&mut s, v[0])?;
                let w = s.rec.constant(weights.clone());
                let p = s.rec.mul(y, w)?;
                Ok(s.rec.sum_all(p))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
