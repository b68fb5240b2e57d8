//! Small fully-convolutional saliency network.
//!
//! Encoder: `encoder_depth` stride-2 3×3 convolutions with batch norm and
//! ReLU, doubling channels from `base_width`. Bottleneck: residual blocks of
//! two dilation-2 convolutions. Decoder: nearest ×2 upsampling, conv, additive
//! skip from the matching encoder stage. Head: a final ×2 upsample, the input
//! image concatenated back in, a 3×3 conv to one channel and a logistic.

mod ops;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ops::Tensor;
pub use train::{
    loss_on, train_epochs, AdamState, Checkpoint, EpochHook, OptimConfig, RngState, TrainSample, Trainer,
};

use crate::error::{Error, Result};
use crate::image::{Image, MapSource, SaliencyMap};
use ops::{BnCache, ConvCache, ConvGeom};

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub base_width: usize,
    pub encoder_depth: usize,
    pub dilated_blocks: usize,
    pub seed: u64,
    pub input_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            encoder_depth: 3,
            dilated_blocks: 2,
            seed: 0,
            input_size: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(Error::invalid("base_width must be at least 4"));
        }
        if self.encoder_depth < 1 {
            return Err(Error::invalid("encoder_depth must be at least 1"));
        }
        if self.encoder_depth > 8 {
            return Err(Error::invalid("encoder_depth above 8 is not supported"));
        }
        Ok(())
    }

    /// Inputs must be multiples of this on both axes.
    pub fn granularity(&self) -> usize {
        1 << self.encoder_depth
    }

    fn channels(&self, stage: usize) -> usize {
        if stage == 0 {
            3
        } else {
            self.base_width << (stage - 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Running statistics are state, not parameters of the optimizer.
    pub trainable: bool,
    pub data: Vec<f32>,
}

/// Ordered network state: convolution kernels, biases and batch-norm
/// parameters and statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub config: NetConfig,
    pub tensors: Vec<ParamTensor>,
}

impl NetParams {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Order-sensitive digest of every value; handy for regression checks.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSpec {
    weight: usize,
    bias: Option<usize>,
    geom: ConvGeom,
}

#[derive(Clone, Copy, Debug)]
struct BnSpec {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<(ConvSpec, BnSpec)>,
    blocks: Vec<[(ConvSpec, BnSpec); 2]>,
    decoder: Vec<(ConvSpec, BnSpec)>,
    head: ConvSpec,
}

struct LayoutBuilder {
    tensors: Vec<ParamTensor>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, trainable: bool, fill: f32) -> usize {
        let len = shape.iter().product();
        self.tensors.push(ParamTensor {
            name,
            shape,
            trainable,
            data: vec![fill; len],
        });
        self.tensors.len() - 1
    }

    fn conv(&mut self, name: &str, geom: ConvGeom, bias: bool) -> ConvSpec {
        let weight = self.push(format!("{name}.weight"), vec![geom.cout, geom.cin, 3, 3], true, 0.0);
        let bias = bias.then(|| self.push(format!("{name}.bias"), vec![geom.cout], true, 0.0));
        ConvSpec { weight, bias, geom }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnSpec {
        BnSpec {
            gamma: self.push(format!("{name}.gamma"), vec![c], true, 1.0),
            beta: self.push(format!("{name}.beta"), vec![c], true, 0.0),
            mean: self.push(format!("{name}.running_mean"), vec![c], false, 0.0),
            var: self.push(format!("{name}.running_var"), vec![c], false, 1.0),
        }
    }
}

fn build_layout(cfg: &NetConfig) -> (Layout, Vec<ParamTensor>) {
    let mut b = LayoutBuilder { tensors: Vec::new() };
    let d = cfg.encoder_depth;
    let encoder = (1..=d)
        .map(|s| {
            let geom = ConvGeom {
                cin: cfg.channels(s - 1),
                cout: cfg.channels(s),
                stride: 2,
                dilation: 1,
            };
            (b.conv(&format!("enc{s}"), geom, false), b.bn(&format!("enc{s}.bn"), geom.cout))
        })
        .collect();
    let cb = cfg.channels(d);
    let geom = ConvGeom {
        cin: cb,
        cout: cb,
        stride: 1,
        dilation: 2,
    };
    let blocks = (0..cfg.dilated_blocks)
        .map(|k| {
            [1, 2].map(|j| {
                (
                    b.conv(&format!("res{k}.conv{j}"), geom, false),
                    b.bn(&format!("res{k}.bn{j}"), cb),
                )
            })
        })
        .collect();
    let decoder = (2..=d)
        .rev()
        .map(|s| {
            let geom = ConvGeom {
                cin: cfg.channels(s),
                cout: cfg.channels(s - 1),
                stride: 1,
                dilation: 1,
            };
            (b.conv(&format!("dec{s}"), geom, false), b.bn(&format!("dec{s}.bn"), geom.cout))
        })
        .collect();
    let head = b.conv(
        "head",
        ConvGeom {
            cin: cfg.channels(1) + 3,
            cout: 1,
            stride: 1,
            dilation: 1,
        },
        true,
    );
    (
        Layout {
            encoder,
            blocks,
            decoder,
            head,
        },
        b.tensors,
    )
}

/// Seeded fan-in scaled uniform initialization.
pub fn init_network(config: &NetConfig) -> Result<NetParams> {
    config.validate()?;
    let (layout, mut tensors) = build_layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut convs: Vec<(ConvSpec, f64)> = Vec::new();
    for (c, _) in &layout.encoder {
        convs.push((*c, 6.0));
    }
    for block in &layout.blocks {
        for (c, _) in block {
            convs.push((*c, 6.0));
        }
    }
    for (c, _) in &layout.decoder {
        convs.push((*c, 6.0));
    }
    // the logistic head gets the smaller linear-unit scale
    convs.push((layout.head, 3.0));
    for (spec, gain) in convs {
        let bound = (gain / spec.geom.fan_in() as f64).sqrt() as f32;
        for v in tensors[spec.weight].data.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    Ok(NetParams {
        config: config.clone(),
        tensors,
    })
}

/// Everything the backward pass needs from a training forward.
struct ForwardCache {
    enc: Vec<(ConvCache, BnCache, Tensor)>,
    blocks: Vec<BlockCache>,
    dec: Vec<(ConvCache, BnCache, Tensor)>,
    head: ConvCache,
    probs: Tensor,
}

struct BlockCache {
    c1: ConvCache,
    b1: BnCache,
    h1: Tensor,
    c2: ConvCache,
    b2: BnCache,
    out: Tensor,
}

fn layout_of(params: &NetParams) -> Result<Layout> {
    let (layout, fresh) = build_layout(&params.config);
    if fresh.len() != params.tensors.len()
        || fresh
            .iter()
            .zip(&params.tensors)
            .any(|(a, b)| a.shape != b.shape || a.name != b.name || b.data.len() != a.data.len())
    {
        return Err(Error::invalid("parameter tensors do not match the network config"));
    }
    Ok(layout)
}

fn conv(params: &NetParams, spec: &ConvSpec, x: &Tensor, cache: Option<&mut ConvCache>) -> Tensor {
    let bias = spec.bias.map(|b| params.tensors[b].data.as_slice());
    ops::conv_forward(x, &params.tensors[spec.weight].data, bias, &spec.geom, cache)
}

fn bn(params: &mut NetParams, spec: &BnSpec, x: &Tensor, train: bool, cache: Option<&mut BnCache>) -> Tensor {
    // running statistics are updated in place, so split the borrows by index
    let mut mean = std::mem::take(&mut params.tensors[spec.mean].data);
    let mut var = std::mem::take(&mut params.tensors[spec.var].data);
    let y = ops::bn_forward(
        x,
        &params.tensors[spec.gamma].data,
        &params.tensors[spec.beta].data,
        &mut mean,
        &mut var,
        BN_MOMENTUM,
        train,
        cache,
    );
    params.tensors[spec.mean].data = mean;
    params.tensors[spec.var].data = var;
    y
}

fn run_forward(params: &mut NetParams, input: &Tensor, train: bool) -> Result<(Tensor, Option<ForwardCache>)> {
    let layout = layout_of(params)?;
    let g = params.config.granularity();
    if input.c != 3 || input.h % g != 0 || input.w % g != 0 || input.h == 0 || input.w == 0 {
        return Err(Error::invalid(format!(
            "network input must be 3-channel with sides divisible by {g}, got {}x{}x{}",
            input.c, input.h, input.w
        )));
    }
    let mut enc = Vec::new();
    let mut x = input.clone();
    for (c, b) in &layout.encoder {
        let mut cc = ConvCache::default();
        let mut bc = BnCache::default();
        let y = conv(params, c, &x, train.then_some(&mut cc));
        let mut y = bn(params, b, &y, train, train.then_some(&mut bc));
        ops::relu_inplace(&mut y);
        x = y.clone();
        enc.push((cc, bc, y));
    }
    let mut blocks = Vec::new();
    for [(c1, b1), (c2, b2)] in &layout.blocks {
        let mut bcache = BlockCache {
            c1: ConvCache::default(),
            b1: BnCache::default(),
            h1: Tensor::zeros(0, 0, 0, 0),
            c2: ConvCache::default(),
            b2: BnCache::default(),
            out: Tensor::zeros(0, 0, 0, 0),
        };
        let h = conv(params, c1, &x, train.then_some(&mut bcache.c1));
        let mut h = bn(params, b1, &h, train, train.then_some(&mut bcache.b1));
        ops::relu_inplace(&mut h);
        let h2 = conv(params, c2, &h, train.then_some(&mut bcache.c2));
        let mut out = bn(params, b2, &h2, train, train.then_some(&mut bcache.b2));
        ops::add_inplace(&mut out, &x);
        ops::relu_inplace(&mut out);
        x = out.clone();
        if train {
            bcache.h1 = h;
            bcache.out = out;
            blocks.push(bcache);
        }
    }
    let mut dec = Vec::new();
    let depth = layout.encoder.len();
    for (k, (c, b)) in layout.decoder.iter().enumerate() {
        let skip = &enc[depth - 2 - k].2;
        let up = ops::upsample2(&x);
        let mut cc = ConvCache::default();
        let mut bc = BnCache::default();
        let mut y = conv(params, c, &up, train.then_some(&mut cc));
        ops::add_inplace(&mut y, skip);
        let mut y = bn(params, b, &y, train, train.then_some(&mut bc));
        ops::relu_inplace(&mut y);
        x = y.clone();
        dec.push((cc, bc, y));
    }
    let up = ops::upsample2(&x);
    let cat = ops::concat(&up, input);
    let mut hc = ConvCache::default();
    let mut logits = conv(params, &layout.head, &cat, train.then_some(&mut hc));
    logits.data.iter_mut().for_each(|v| *v = ops::sigmoid(*v));
    let probs = logits;
    if !train {
        return Ok((probs, None));
    }
    Ok((
        probs.clone(),
        Some(ForwardCache {
            enc,
            blocks,
            dec,
            head: hc,
            probs,
        }),
    ))
}

/// Gradient buffers parallel to `NetParams::tensors`.
pub(crate) type Grads = Vec<Vec<f32>>;

fn backward(params: &NetParams, cache: &ForwardCache, dprobs: &Tensor) -> Result<Grads> {
    let layout = layout_of(params)?;
    let mut grads: Grads = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let t = |i: usize| params.tensors[i].data.as_slice();

    // logistic
    let mut dz = dprobs.clone();
    for (d, &p) in dz.data.iter_mut().zip(&cache.probs.data) {
        *d *= p * (1.0 - p);
    }
    let head = &layout.head;
    let (dw, db) = split_two(&mut grads, head.weight, head.bias.expect("head has a bias"));
    let dcat = ops::conv_backward(&dz, t(head.weight), &head.geom, &cache.head, dw, Some(db), true)
        .expect("dx requested");
    let c1 = params.config.channels(1);
    let mut dx = ops::upsample2_backward(&ops::concat_backward_first(&dcat, c1));

    let depth = layout.encoder.len();
    let mut denc: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
    for (k, (c, b)) in layout.decoder.iter().enumerate().rev() {
        let (cc, bc, out) = &cache.dec[k];
        ops::relu_backward_inplace(&mut dx, out);
        let (dg, dbeta) = split_two(&mut grads, b.gamma, b.beta);
        let da = ops::bn_backward(&dx, t(b.gamma), bc, dg, dbeta);
        let skip = depth - 2 - k;
        accumulate(&mut denc[skip], &da);
        let dup = ops::conv_backward(&da, t(c.weight), &c.geom, cc, &mut grads[c.weight], None, true)
            .expect("dx requested");
        dx = ops::upsample2_backward(&dup);
    }
    for (k, [(c1s, b1s), (c2s, b2s)]) in layout.blocks.iter().enumerate().rev() {
        let bcache = &cache.blocks[k];
        ops::relu_backward_inplace(&mut dx, &bcache.out);
        let dskip = dx.clone();
        let (dg, dbeta) = split_two(&mut grads, b2s.gamma, b2s.beta);
        let dh2 = ops::bn_backward(&dx, t(b2s.gamma), &bcache.b2, dg, dbeta);
        let mut dh1 = ops::conv_backward(&dh2, t(c2s.weight), &c2s.geom, &bcache.c2, &mut grads[c2s.weight], None, true)
            .expect("dx requested");
        ops::relu_backward_inplace(&mut dh1, &bcache.h1);
        let (dg, dbeta) = split_two(&mut grads, b1s.gamma, b1s.beta);
        let dc1 = ops::bn_backward(&dh1, t(b1s.gamma), &bcache.b1, dg, dbeta);
        let mut din = ops::conv_backward(&dc1, t(c1s.weight), &c1s.geom, &bcache.c1, &mut grads[c1s.weight], None, true)
            .expect("dx requested");
        ops::add_inplace(&mut din, &dskip);
        dx = din;
    }
    for s in (0..depth).rev() {
        if let Some(extra) = denc[s].take() {
            ops::add_inplace(&mut dx, &extra);
        }
        let (c, b) = &layout.encoder[s];
        let (cc, bc, out) = &cache.enc[s];
        ops::relu_backward_inplace(&mut dx, out);
        let (dg, dbeta) = split_two(&mut grads, b.gamma, b.beta);
        let dy = ops::bn_backward(&dx, t(b.gamma), bc, dg, dbeta);
        match ops::conv_backward(&dy, t(c.weight), &c.geom, cc, &mut grads[c.weight], None, s > 0) {
            Some(d) => dx = d,
            None => break,
        }
    }
    Ok(grads)
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => ops::add_inplace(t, g),
        None => *slot = Some(g.clone()),
    }
}

fn split_two(grads: &mut Grads, i: usize, j: usize) -> (&mut [f32], &mut [f32]) {
    assert!(i < j, "gradient slots must be ordered");
    let (lo, hi) = grads.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

/// Replicates edge pixels so both sides become multiples of `g`.
fn pad_to(image: &Image<f32>, g: usize) -> (Tensor, usize, usize) {
    let (w, h) = image.dims();
    let pw = w.div_ceil(g) * g;
    let ph = h.div_ceil(g) * g;
    let mut t = Tensor::zeros(1, 3, ph, pw);
    for c in 0..3 {
        let src = image.channel(c);
        for y in 0..ph {
            for x in 0..pw {
                t.data[(c * ph + y) * pw + x] = src[y.min(h - 1) * w + x.min(w - 1)];
            }
        }
    }
    (t, w, h)
}

fn crop(probs: &Tensor, b: usize, w: usize, h: usize) -> Vec<f32> {
    let s = probs.sample(b);
    (0..h).flat_map(|y| s[y * probs.w..y * probs.w + w].iter().copied()).collect()
}

/// Inference-mode forward pass. Inputs whose sides are not multiples of
/// `2^encoder_depth` are edge-padded and the output cropped back.
pub fn forward(params: &NetParams, image: &Image<f32>) -> Result<SaliencyMap<f32>> {
    let (input, w, h) = pad_to(image, params.config.granularity());
    // inference never touches running statistics; the clone keeps `params` shared
    let mut p = params.clone();
    let (probs, _) = run_forward(&mut p, &input, false)?;
    SaliencyMap::new(w, h, crop(&probs, 0, w, h), MapSource::Network)
}

/// Stacks same-sized images into one batch tensor.
pub(crate) fn batch_tensor(images: &[&Image<f32>]) -> Result<Tensor> {
    let (w, h) = images.first().map(|i| i.dims()).ok_or_else(|| Error::invalid("empty batch"))?;
    let mut t = Tensor::zeros(images.len(), 3, h, w);
    for (b, img) in images.iter().enumerate() {
        if img.dims() != (w, h) {
            return Err(Error::invalid("all images in a batch must share dimensions"));
        }
        t.sample_mut(b).copy_from_slice(img.planar());
    }
    Ok(t)
}

/// Training-mode forward: batch statistics, running averages updated.
pub(crate) fn forward_train(params: &mut NetParams, batch: &Tensor) -> Result<(Tensor, ForwardCacheHandle)> {
    let (probs, cache) = run_forward(params, batch, true)?;
    Ok((probs, ForwardCacheHandle(cache.expect("training forward keeps a cache"))))
}

pub(crate) struct ForwardCacheHandle(ForwardCache);

pub(crate) fn backward_from(params: &NetParams, cache: &ForwardCacheHandle, dprobs: &Tensor) -> Result<Grads> {
    backward(params, &cache.0, dprobs)
}

pub(crate) fn probs_as_maps(probs: &Tensor) -> Result<Vec<SaliencyMap<f32>>> {
    (0..probs.n)
        .map(|b| SaliencyMap::new(probs.w, probs.h, probs.sample(b).to_vec(), MapSource::Network))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            base_width: 4,
            encoder_depth: 2,
            dilated_blocks: 1,
            seed: 5,
            input_size: 16,
        }
    }

    fn image(w: usize, h: usize) -> Image<f32> {
        Image::from_fn(w, h, |x, y| {
            [((x * 3 + y) % 7) as f32 / 7.0, ((x + 2 * y) % 5) as f32 / 5.0, 0.5]
        })
        .unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = init_network(&tiny()).unwrap();
        assert_eq!(a, init_network(&tiny()).unwrap());
        let b = init_network(&NetConfig { seed: 6, ..tiny() }).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(init_network(&NetConfig { base_width: 3, ..tiny() }).is_err());
        assert!(init_network(&NetConfig { encoder_depth: 0, ..tiny() }).is_err());
    }

    #[test]
    fn default_config_is_desk_sized() {
        let p = init_network(&NetConfig::default()).unwrap();
        assert!(p.parameter_count() < 500_000);
        let out = forward(&p, &image(64, 64)).unwrap();
        assert_eq!(out.dims(), (64, 64));
        assert!(out.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let p = init_network(&tiny()).unwrap();
        let out = forward(&p, &image(13, 10)).unwrap();
        assert_eq!(out.dims(), (13, 10));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = init_network(&tiny()).unwrap();
        let img = image(16, 16);
        let batch = batch_tensor(&[&img]).unwrap();
        let weights: Vec<f32> = (0..256).map(|i| ((i * 31) % 17) as f32 / 17.0 - 0.5).collect();
        let objective = |p: &mut NetParams| -> f64 {
            let (probs, _) = run_forward(p, &batch, true).unwrap();
            probs.data.iter().zip(&weights).map(|(a, b)| f64::from(a * b)).sum()
        };
        let saved = p.clone();
        let (probs, cache) = forward_train(&mut p, &batch).unwrap();
        let mut d = probs.same_shape();
        d.data.copy_from_slice(&weights);
        let grads = backward_from(&saved, &cache, &d).unwrap();
        for ti in 0..saved.tensors.len() {
            if !saved.tensors[ti].trainable {
                continue;
            }
            let idx = 0;
            let h = 1e-3f32;
            let mut plus = saved.clone();
            plus.tensors[ti].data[idx] += h;
            let mut minus = saved.clone();
            minus.tensors[ti].data[idx] -= h;
            let fd = (objective(&mut plus) - objective(&mut minus)) / (2.0 * f64::from(h));
            let an = f64::from(grads[ti][idx]);
            assert!(
                (fd - an).abs() < 1e-2 * fd.abs().max(an.abs()).max(0.1),
                "{}[{idx}]: fd {fd} vs analytic {an}",
                saved.tensors[ti].name
            );
        }
    }
}
