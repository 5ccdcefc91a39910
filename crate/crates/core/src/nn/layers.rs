//! Layers with explicit forward/backward passes.
//!
//! Every `forward` returns the output together with a [`Cache`] holding what the
//! matching `backward` call needs. A cache is tied to the layer instance and to
//! the parameter generation it was computed with; handing it to another layer,
//! or using it after the parameters were mutated, is an error.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Cache {
    layer_id: u64,
    generation: u64,
    input_shape: Vec<usize>,
    data: CacheData,
}

#[derive(Debug, Clone)]
enum CacheData {
    Conv { cols: Vec<f64>, out_hw: (usize, usize) },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize> },
    Linear { input: Tensor },
}

impl Cache {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

/// A differentiable layer with named parameters.
pub trait Layer {
    fn name(&self) -> &str;

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)>;

    /// Returns the input gradient and one gradient per entry of [`Layer::params`].
    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)>;

    fn params(&self) -> Vec<(&'static str, &Tensor)>;

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;
}

#[derive(Debug, Clone)]
struct Identity {
    id: u64,
    generation: u64,
}

impl Identity {
    fn new() -> Self {
        Identity {
            id: next_id(),
            generation: 0,
        }
    }

    fn cache(&self, input_shape: &[usize], data: CacheData) -> Cache {
        Cache {
            layer_id: self.id,
            generation: self.generation,
            input_shape: input_shape.to_vec(),
            data,
        }
    }

    fn check<'c>(&self, name: &str, cache: &'c Cache) -> Result<&'c CacheData> {
        if cache.layer_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache { layer: name.into() });
        }
        Ok(&cache.data)
    }
}

fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn shape_err(layer: &str, expected: Vec<usize>, actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        layer: layer.into(),
        expected,
        actual: actual.to_vec(),
    }
}

fn check_grad_shape(layer: &str, expected: &[usize], grad: &Tensor) -> Result<()> {
    if grad.shape() != expected {
        return Err(shape_err(layer, expected.to_vec(), grad.shape()));
    }
    Ok(())
}

/// Serializable description of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// 2-D convolution over a single `[C, H, W]` feature map.
#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    spec: ConvSpec,
    weight: Tensor,
    bias: Tensor,
    ident: Identity,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        Conv2d {
            name: name.into(),
            spec,
            weight: he_uniform(
                rng,
                &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                fan_in,
            ),
            bias: Tensor::zeros(&[spec.out_channels]),
            ident: Identity::new(),
        }
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ConvSpec { kernel: k, stride: s, padding: p, .. } = self.spec;
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
        let ConvSpec { in_channels: c, kernel: k, stride: s, padding: p, .. } = self.spec;
        if k == 1 && s == 1 && p == 0 {
            return x.to_vec();
        }
        let plane = ho * wo;
        let mut cols = vec![0.0; c * k * k * plane];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
        let ConvSpec { in_channels: c, kernel: k, stride: s, padding: p, .. } = self.spec;
        if k == 1 && s == 1 && p == 0 {
            return cols.to_vec();
        }
        let plane = ho * wo;
        let mut x = vec![0.0; c * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                x[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Backward pass; skips the input gradient when `need_input_grad` is false
    /// and returns an empty tensor in its place.
    pub fn backward_with(
        &self,
        cache: &Cache,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let CacheData::Conv { cols, out_hw: (ho, wo) } = self.ident.check(&self.name, cache)? else {
            return Err(Error::StaleCache { layer: self.name.clone() });
        };
        let (ho, wo) = (*ho, *wo);
        let ConvSpec { in_channels: c, out_channels: o, kernel: k, .. } = self.spec;
        check_grad_shape(&self.name, &[o, ho, wo], grad_out)?;
        let plane = ho * wo;
        let ckk = c * k * k;
        let g = grad_out.data();

        let mut dw = vec![0.0; o * ckk];
        gemm(o, plane, ckk, g, false, cols, true, 0.0, &mut dw);
        let db: Vec<f64> = g.chunks(plane).map(|row| row.iter().sum()).collect();

        let grad_in = if need_input_grad {
            let mut dcols = vec![0.0; ckk * plane];
            gemm(ckk, o, plane, self.weight.data(), true, g, false, 0.0, &mut dcols);
            let (h, w) = (cache.input_shape[1], cache.input_shape[2]);
            Tensor::new(cache.input_shape.clone(), self.col2im(&dcols, h, w, ho, wo))?
        } else {
            Tensor::zeros(&[0])
        };
        Ok((
            grad_in,
            vec![
                Tensor::new(self.weight.shape().to_vec(), dw)?,
                Tensor::new(vec![o], db)?,
            ],
        ))
    }
}

impl Layer for Conv2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let shape = input.shape();
        let ConvSpec { in_channels: c, out_channels: o, kernel: k, padding: p, .. } = self.spec;
        if shape.len() != 3 || shape[0] != c || shape[1] + 2 * p < k || shape[2] + 2 * p < k {
            return Err(shape_err(&self.name, vec![c, k.max(1), k.max(1)], shape));
        }
        let (h, w) = (shape[1], shape[2]);
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let cols = self.im2col(input.data(), h, w, ho, wo);
        let mut out = vec![0.0; o * plane];
        for (row, b) in out.chunks_mut(plane).zip(self.bias.data()) {
            row.fill(*b);
        }
        gemm(o, c * k * k, plane, self.weight.data(), false, &cols, false, 1.0, &mut out);
        Ok((
            Tensor::new(vec![o, ho, wo], out)?,
            self.ident.cache(shape, CacheData::Conv { cols, out_hw: (ho, wo) }),
        ))
    }

    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.backward_with(cache, grad_out, true)
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        self.ident.generation += 1;
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Element-wise `max(0, x)`.
#[derive(Debug, Clone)]
pub struct Relu {
    name: String,
    ident: Identity,
}

impl Relu {
    pub fn new(name: impl Into<String>) -> Self {
        Relu {
            name: name.into(),
            ident: Identity::new(),
        }
    }
}

impl Layer for Relu {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let mask: Vec<bool> = input.data().iter().map(|v| *v > 0.0).collect();
        let out = input.data().iter().map(|v| v.max(0.0)).collect();
        Ok((
            Tensor::new(input.shape().to_vec(), out)?,
            self.ident.cache(input.shape(), CacheData::Relu { mask }),
        ))
    }

    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let CacheData::Relu { mask } = self.ident.check(&self.name, cache)? else {
            return Err(Error::StaleCache { layer: self.name.clone() });
        };
        check_grad_shape(&self.name, &cache.input_shape, grad_out)?;
        let g = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(g, m)| if *m { *g } else { 0.0 })
            .collect();
        Ok((Tensor::new(cache.input_shape.clone(), g)?, Vec::new()))
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Vec::new()
    }
}

/// 2x2 max pooling with stride 2 over `[C, H, W]`; odd extents round up.
#[derive(Debug, Clone)]
pub struct MaxPool2 {
    name: String,
    ident: Identity,
}

impl MaxPool2 {
    pub fn new(name: impl Into<String>) -> Self {
        MaxPool2 {
            name: name.into(),
            ident: Identity::new(),
        }
    }
}

impl Layer for MaxPool2 {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let shape = input.shape();
        if shape.len() != 3 || shape[1] == 0 || shape[2] == 0 {
            return Err(shape_err(&self.name, vec![0, 1, 1], shape));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let x = input.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = (ci * h + y) * w + xx;
                            if best == usize::MAX || x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((
            Tensor::new(vec![c, ho, wo], out)?,
            self.ident.cache(shape, CacheData::MaxPool { argmax }),
        ))
    }

    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let CacheData::MaxPool { argmax } = self.ident.check(&self.name, cache)? else {
            return Err(Error::StaleCache { layer: self.name.clone() });
        };
        if grad_out.len() != argmax.len() {
            return Err(shape_err(&self.name, vec![argmax.len()], grad_out.shape()));
        }
        let mut g = Tensor::zeros(&cache.input_shape);
        let gd = g.data_mut();
        for (&idx, v) in argmax.iter().zip(grad_out.data()) {
            gd[idx] += v;
        }
        Ok((g, Vec::new()))
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Vec::new()
    }
}

/// Fully connected layer over `[in]` or a batch `[N, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    in_features: usize,
    out_features: usize,
    weight: Tensor,
    bias: Tensor,
    ident: Identity,
}

impl Linear {
    pub fn new(
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
            weight: he_uniform(rng, &[out_features, in_features], in_features),
            bias: Tensor::zeros(&[out_features]),
            ident: Identity::new(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn backward_with(
        &self,
        cache: &Cache,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let CacheData::Linear { input } = self.ident.check(&self.name, cache)? else {
            return Err(Error::StaleCache { layer: self.name.clone() });
        };
        let n = input.len() / self.in_features;
        if grad_out.len() != n * self.out_features {
            return Err(shape_err(&self.name, vec![n, self.out_features], grad_out.shape()));
        }
        let (fi, fo) = (self.in_features, self.out_features);
        let g = grad_out.data();
        let mut dw = vec![0.0; fo * fi];
        gemm(fo, n, fi, g, true, input.data(), false, 0.0, &mut dw);
        let mut db = vec![0.0; fo];
        for row in g.chunks(fo) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let grad_in = if need_input_grad {
            let mut dx = vec![0.0; n * fi];
            gemm(n, fo, fi, g, false, self.weight.data(), false, 0.0, &mut dx);
            Tensor::new(cache.input_shape.clone(), dx)?
        } else {
            Tensor::zeros(&[0])
        };
        Ok((
            grad_in,
            vec![Tensor::new(vec![fo, fi], dw)?, Tensor::new(vec![fo], db)?],
        ))
    }
}

impl Layer for Linear {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let shape = input.shape();
        let ok = match shape {
            [f] => *f == self.in_features,
            [_, f] => *f == self.in_features,
            _ => false,
        };
        if !ok {
            return Err(shape_err(&self.name, vec![self.in_features], shape));
        }
        let n = input.len() / self.in_features;
        let fo = self.out_features;
        let mut out = vec![0.0; n * fo];
        for row in out.chunks_mut(fo) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(n, self.in_features, fo, input.data(), false, self.weight.data(), true, 1.0, &mut out);
        let out_shape = if shape.len() == 1 { vec![fo] } else { vec![n, fo] };
        Ok((
            Tensor::new(out_shape, out)?,
            self.ident.cache(shape, CacheData::Linear { input: input.clone() }),
        ))
    }

    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.backward_with(cache, grad_out, true)
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        self.ident.generation += 1;
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-nested-loop convolution.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Vec<f64> {
        let ConvSpec { in_channels: c, out_channels: o, kernel: k, stride: s, padding: p } = conv.spec;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (ho, wo) = conv.output_hw(h, w);
        let wt = conv.weight.data();
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((oc * c + ic) * k + ky) * k + kx]
                                        * x.data()[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn relu_forward_backward() {
        let relu = Relu::new("relu");
        let (y, cache) = relu.forward(&Tensor::from_vec(vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (g, _) = relu.backward(&cache, &Tensor::from_vec(vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn identity_one_by_one_conv() {
        let spec = ConvSpec { in_channels: 3, out_channels: 3, kernel: 1, stride: 1, padding: 0 };
        let mut conv = Conv2d::new("id", spec, &mut rng(0));
        {
            let mut p = conv.params_mut();
            let w = p[0].1.data_mut();
            w.fill(0.0);
            for i in 0..3 {
                w[i * 3 + i] = 1.0;
            }
        }
        let x = random_tensor(&[3, 5, 4], 1);
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for (seed, stride, pad) in [(1, 1, 1), (2, 2, 1), (3, 1, 0)] {
            let spec = ConvSpec { in_channels: 3, out_channels: 5, kernel: 3, stride, padding: pad };
            let conv = Conv2d::new("c", spec, &mut rng(seed));
            let x = random_tensor(&[3, 8, 8], seed + 10);
            let (y, _) = conv.forward(&x).unwrap();
            let oracle = naive_conv(&conv, &x);
            for (a, b) in y.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let spec = ConvSpec { in_channels: 3, out_channels: 2, kernel: 3, stride: 1, padding: 1 };
        let conv = Conv2d::new("backbone.conv1", spec, &mut rng(0));
        let err = conv.forward(&Tensor::zeros(&[2, 8, 8])).unwrap_err().to_string();
        assert!(err.contains("backbone.conv1"), "{err}");
        let lin = Linear::new("head.fc", 4, 2, &mut rng(0));
        assert!(lin.forward(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn cache_from_other_layer_rejected() {
        let a = Linear::new("a", 3, 2, &mut rng(0));
        let b = Linear::new("b", 3, 2, &mut rng(1));
        let (_, cache) = a.forward(&Tensor::zeros(&[3])).unwrap();
        assert!(matches!(
            b.backward(&cache, &Tensor::zeros(&[2])),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn cache_is_stale_after_param_update() {
        let mut a = Linear::new("a", 3, 2, &mut rng(0));
        let (_, cache) = a.forward(&Tensor::zeros(&[3])).unwrap();
        a.params_mut()[0].1.data_mut()[0] += 1.0;
        assert!(a.backward(&cache, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let pool = MaxPool2::new("pool");
        let x = Tensor::new(vec![1, 2, 3], vec![1., 5., 2., 3., 4., 9.]).unwrap();
        let (y, cache) = pool.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[5., 9.]);
        let (g, _) = pool.backward(&cache, &Tensor::new(vec![1, 1, 2], vec![1., 2.]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0., 1., 0., 0., 0., 2.]);
    }

    #[test]
    fn linear_grad_check() {
        for seed in 0..3 {
            let mut lin = Linear::new("fc", 6, 4, &mut rng(seed));
            lin.params_mut()[1].1.data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.05]);
            let x = random_tensor(&[3, 6], seed + 100);
            let report = gradient_check(&mut lin, &x, 1e-5, &[]).unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn conv_grad_check_on_4x4() {
        for seed in 0..3 {
            let spec = ConvSpec { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1 };
            let mut conv = Conv2d::new("conv", spec, &mut rng(seed));
            let x = random_tensor(&[2, 4, 4], seed + 7);
            let report = gradient_check(&mut conv, &x, 1e-5, &[]).unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn strided_conv_grad_check() {
        let spec = ConvSpec { in_channels: 3, out_channels: 2, kernel: 3, stride: 2, padding: 1 };
        let mut conv = Conv2d::new("conv", spec, &mut rng(4));
        let x = random_tensor(&[3, 6, 6], 9);
        let report = gradient_check(&mut conv, &x, 1e-5, &[]).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn frozen_param_excluded_from_check() {
        let mut lin = Linear::new("fc", 3, 2, &mut rng(0));
        let x = random_tensor(&[3], 1);
        let report = gradient_check(&mut lin, &x, 1e-5, &["bias"]).unwrap();
        assert!(report.per_param.iter().all(|(n, _)| n != "bias"));
        assert!(report.per_param.iter().any(|(n, _)| n == "weight"));
    }
}
