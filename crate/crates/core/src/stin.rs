//! Spatiotemporal inception network: feature extractor `F`, domain
//! discriminator `D` and reconstructor `R`.
//!
//! Parameter paths:
//! - `F.block{b}.branch{r}.conv{k}.{weight,bias}` / `.norm{k}.{gamma,beta}`
//! - `R.deconv{k}.{weight,bias}`, `R.norm{k}.{gamma,beta}`, `R.out.{weight,bias}`
//! - `D.fc{k}.{weight,bias}`
//!
//! Blocks, branches and layers are numbered from 1.

use serde::{Deserialize, Serialize};

use crate::numerics::{Geometry, NumericsError, PoolMode, Scalar, Tape, Tensor, Var};
use crate::params::{uniform_init, Bound, ParamError, ParamStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StinError {
    #[error("invalid STIN config: {0}")]
    Config(String),
    #[error("input shape {found:?} does not fit the network: {detail}")]
    Shape { found: Vec<usize>, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Temporal stride and padding of every reconstructor deconvolution.
pub const DECONV_STRIDE: [usize; 3] = [2, 1, 1];
pub const DECONV_TEMPORAL_KERNEL: usize = 6;
pub const MAX_POOL_KERNEL: [usize; 3] = [2, 1, 1];
pub const NORM_EPS: f64 = 1e-5;

/// Group count used by every group-norm layer with `channels` channels.
pub fn norm_groups(channels: usize) -> usize {
    if channels.is_multiple_of(4) {
        4
    } else {
        1
    }
}

/// Discriminator hidden widths for a flattened latent of `flatten` values.
///
/// Gives 512/128 for the 6144-wide paper latent; narrow latents keep at least 16/8 units.
pub fn disc_hidden_for(flatten: usize) -> [usize; 2] {
    [(flatten / 12).max(16), (flatten / 48).clamp(8, 128)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StinConfig {
    /// Time bins `T` of the input cube.
    pub bins: usize,
    /// Temporal kernel `n_t`.
    pub temporal_kernel: usize,
    /// Spatial kernel `n_s`.
    pub spatial_kernel: usize,
    /// Output width of each ST-block.
    pub trunk_channels: Vec<usize>,
    /// Temporal-halving max pools; one fewer than the number of blocks.
    pub pools: usize,
    /// Spatial patch `(H, W)`.
    pub patch: (usize, usize),
    /// Average-pool kernel applied to the latent before the discriminator's FC stack.
    pub disc_pool: [usize; 3],
    pub disc_hidden: [usize; 2],
}

impl StinConfig {
    /// Full-size network on `[1, 1024, 32, 32]` patches.
    pub fn paper() -> Self {
        Self {
            bins: 1024,
            temporal_kernel: 7,
            spatial_kernel: 3,
            trunk_channels: vec![4, 8, 12, 16, 24, 32, 40, 48],
            pools: 7,
            patch: (32, 32),
            disc_pool: [1, 8, 8],
            disc_hidden: [512, 128],
        }
    }

    /// Same channel schedule on `[1, 128, 16, 16]` patches; the discriminator pools the
    /// whole spatial extent.
    pub fn toy() -> Self {
        Self::scaled(128, (16, 16))
    }

    /// Paper channel schedule at another size, discriminator pooled over the full patch.
    pub fn scaled(bins: usize, patch: (usize, usize)) -> Self {
        let mut cfg = Self { bins, patch, disc_pool: [1, patch.0, patch.1], ..Self::paper() };
        cfg.disc_hidden = disc_hidden_for(cfg.flatten_len());
        cfg
    }

    pub fn validate(&self) -> Result<(), StinError> {
        let fail = |m: String| Err(StinError::Config(m));
        if self.trunk_channels.is_empty() {
            return fail("empty trunk".into());
        }
        if let Some(c) = self.trunk_channels.iter().find(|c| **c == 0 || **c % 4 != 0) {
            return fail(format!("trunk width {c} is not a positive multiple of 4"));
        }
        if self.pools + 1 != self.trunk_channels.len() {
            return fail(format!(
                "{} pools need {} trunk widths, got {}",
                self.pools,
                self.pools + 1,
                self.trunk_channels.len()
            ));
        }
        if self.temporal_kernel.is_multiple_of(2) || self.spatial_kernel.is_multiple_of(2) {
            return fail("kernels must be odd to preserve sizes".into());
        }
        if self.bins == 0 || !self.bins.is_multiple_of(1 << self.pools) {
            return fail(format!("T = {} not divisible by 2^{}", self.bins, self.pools));
        }
        if self.patch.0 == 0 || self.patch.1 == 0 {
            return fail("empty patch".into());
        }
        let [pt, ph, pw] = self.disc_pool;
        if pt == 0
            || ph == 0
            || pw == 0
            || !self.latent_bins().is_multiple_of(pt)
            || !self.patch.0.is_multiple_of(ph)
            || !self.patch.1.is_multiple_of(pw)
        {
            return fail(format!(
                "discriminator pool {:?} does not tile the latent [{}, {}, {}]",
                self.disc_pool,
                self.latent_bins(),
                self.patch.0,
                self.patch.1
            ));
        }
        if self.disc_hidden.contains(&0) {
            return fail("zero-width discriminator layer".into());
        }
        Ok(())
    }

    pub fn latent_bins(&self) -> usize {
        self.bins >> self.pools
    }

    /// `[C, T/2^pools, H, W]`.
    pub fn latent_shape(&self) -> [usize; 4] {
        [*self.trunk_channels.last().unwrap_or(&0), self.latent_bins(), self.patch.0, self.patch.1]
    }

    pub fn flatten_len(&self) -> usize {
        let [c, t, h, w] = self.latent_shape();
        let [pt, ph, pw] = self.disc_pool;
        c * (t / pt.max(1)) * (h / ph.max(1)) * (w / pw.max(1))
    }

    fn temporal(&self) -> ([usize; 3], [usize; 3]) {
        ([self.temporal_kernel, 1, 1], [self.temporal_kernel / 2, 0, 0])
    }

    fn spatial(&self) -> ([usize; 3], [usize; 3]) {
        let s = self.spatial_kernel;
        ([1, s, s], [0, s / 2, s / 2])
    }

    fn deconv_kernel(&self) -> [usize; 3] {
        [DECONV_TEMPORAL_KERNEL, self.spatial_kernel, self.spatial_kernel]
    }

    /// Padding giving exact temporal doubling and preserved spatial size.
    fn deconv_padding(&self) -> [usize; 3] {
        [(DECONV_TEMPORAL_KERNEL - DECONV_STRIDE[0]) / 2, self.spatial_kernel / 2, self.spatial_kernel / 2]
    }

    /// `(kernel, padding)` of each layer of branch `r` (1-based).
    fn branch_layers(&self, r: usize) -> Vec<([usize; 3], [usize; 3])> {
        let point = ([1, 1, 1], [0, 0, 0]);
        let (t, s) = (self.temporal(), self.spatial());
        match r {
            1 => vec![point],
            2 => vec![point, t, s],
            3 => vec![point, s, t],
            _ => vec![point, s, s, t],
        }
    }

    /// Every parameter with its shape and fan-in, in construction order.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut c_in = 1;
        for (b, &c_out) in self.trunk_channels.iter().enumerate() {
            let cb = c_out / 4;
            for r in 1..=4 {
                let mut ch = c_in;
                for (k, (kernel, _)) in self.branch_layers(r).into_iter().enumerate() {
                    let p = format!("F.block{}.branch{r}", b + 1);
                    let vol: usize = kernel.iter().product();
                    let fan_in = ch * vol;
                    specs.push(ParamSpec::weight(
                        format!("{p}.conv{}.weight", k + 1),
                        vec![cb, ch, kernel[0], kernel[1], kernel[2]],
                        fan_in,
                    ));
                    specs.push(ParamSpec::weight(format!("{p}.conv{}.bias", k + 1), vec![cb], fan_in));
                    specs.push(ParamSpec::gamma(format!("{p}.norm{}.gamma", k + 1), cb));
                    specs.push(ParamSpec::beta(format!("{p}.norm{}.beta", k + 1), cb));
                    ch = cb;
                }
            }
            c_in = c_out;
        }
        let k = self.deconv_kernel();
        let vol: usize = k.iter().product();
        for (n, pair) in self.trunk_channels.windows(2).rev().enumerate() {
            let (c_out, c_in) = (pair[0], pair[1]);
            let fan_in = c_in * vol / DECONV_STRIDE[0];
            specs.push(ParamSpec::weight(
                format!("R.deconv{}.weight", n + 1),
                vec![c_in, c_out, k[0], k[1], k[2]],
                fan_in,
            ));
            specs.push(ParamSpec::weight(format!("R.deconv{}.bias", n + 1), vec![c_out], fan_in));
            specs.push(ParamSpec::gamma(format!("R.norm{}.gamma", n + 1), c_out));
            specs.push(ParamSpec::beta(format!("R.norm{}.beta", n + 1), c_out));
        }
        let c0 = self.trunk_channels[0];
        specs.push(ParamSpec::weight("R.out.weight".into(), vec![1, c0, 1, 1, 1], c0));
        specs.push(ParamSpec::weight("R.out.bias".into(), vec![1], c0));
        let widths = [self.flatten_len(), self.disc_hidden[0], self.disc_hidden[1], 1];
        for (n, w) in widths.windows(2).enumerate() {
            specs.push(ParamSpec::weight(format!("D.fc{}.weight", n + 1), vec![w[1], w[0]], w[0]));
            specs.push(ParamSpec::weight(format!("D.fc{}.bias", n + 1), vec![w[1]], w[0]));
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn weight(path: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self { path, shape, fan_in, kind: ParamKind::Weight }
    }

    fn gamma(path: String, c: usize) -> Self {
        Self { path, shape: vec![c], fan_in: 0, kind: ParamKind::Gamma }
    }

    fn beta(path: String, c: usize) -> Self {
        Self { path, shape: vec![c], fan_in: 0, kind: ParamKind::Beta }
    }

    fn init<F: Scalar>(&self, seed: u64) -> Tensor<F> {
        match self.kind {
            ParamKind::Weight => uniform_init(&self.shape, self.fan_in, seed, &self.path),
            ParamKind::Gamma => Tensor::full(self.shape.clone(), F::one()),
            ParamKind::Beta => Tensor::zeros(self.shape.clone()),
        }
    }
}

/// Which sub-network owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    Reconstructor,
    Discriminator,
}

impl ParamGroup {
    pub fn of(path: &str) -> Option<Self> {
        match path.split('.').next() {
            Some("F") => Some(Self::Extractor),
            Some("R") => Some(Self::Reconstructor),
            Some("D") => Some(Self::Discriminator),
            _ => None,
        }
    }
}

/// One row of the layer-by-layer shape table.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub network: char,
    pub layer: &'static str,
    pub kernel: Option<[usize; 3]>,
    pub output: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stin {
    cfg: StinConfig,
}

impl Stin {
    pub fn new(cfg: StinConfig) -> Result<Self, StinError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &StinConfig {
        &self.cfg
    }

    /// Seeded initialization of every parameter.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for spec in self.cfg.parameter_specs() {
            store.insert(spec.path.clone(), spec.init(seed));
        }
        store
    }

    /// Fresh discriminator parameters only.
    pub fn init_discriminator<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for spec in self.cfg.parameter_specs() {
            if ParamGroup::of(&spec.path) == Some(ParamGroup::Discriminator) {
                store.insert(spec.path.clone(), spec.init(seed));
            }
        }
        store
    }

    /// Checks presence, shape and finiteness of every parameter.
    pub fn check_params<F: Scalar>(&self, store: &ParamStore<F>) -> Result<(), StinError> {
        self.check_group_params(store, |_| true)
    }

    /// Like [`Stin::check_params`] but ignores the discriminator, which prediction never uses.
    pub fn check_predictor_params<F: Scalar>(&self, store: &ParamStore<F>) -> Result<(), StinError> {
        self.check_group_params(store, |g| g != Some(ParamGroup::Discriminator))
    }

    fn check_group_params<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        keep: impl Fn(Option<ParamGroup>) -> bool,
    ) -> Result<(), StinError> {
        for spec in self.cfg.parameter_specs().into_iter().filter(|s| keep(ParamGroup::of(&s.path))) {
            let t = store.get(&spec.path).ok_or_else(|| ParamError::Missing(spec.path.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(
                    ParamError::Shape { path: spec.path, expected: spec.shape, found: t.shape().to_vec() }.into()
                );
            }
            if !t.is_finite() {
                return Err(ParamError::NonFinite(spec.path).into());
            }
        }
        Ok(())
    }

    fn conv_block<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        prefix: &str,
        k: usize,
        x: Var,
        padding: [usize; 3],
    ) -> Result<Var, StinError> {
        let w = p.get(&format!("{prefix}.conv{k}.weight"))?;
        let b = p.get(&format!("{prefix}.conv{k}.bias"))?;
        let y = tape.conv3d(x, w, b, padding)?;
        let gamma = p.get(&format!("{prefix}.norm{k}.gamma"))?;
        let beta = p.get(&format!("{prefix}.norm{k}.beta"))?;
        let groups = norm_groups(tape.shape(y)[0]);
        let y = tape.group_norm(y, groups, gamma, beta, NORM_EPS)?;
        Ok(tape.relu(y))
    }

    /// Four-branch block (1-based `block`); output channels are
    /// `[branch1 | branch2 | branch3 | branch4]`, `C_b` each.
    pub fn st_block<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, block: usize, x: Var) -> Result<Var, StinError> {
        let mut outs = Vec::with_capacity(4);
        for r in 1..=4 {
            let prefix = format!("F.block{block}.branch{r}");
            let mut y = x;
            for (k, (_, padding)) in self.cfg.branch_layers(r).into_iter().enumerate() {
                y = self.conv_block(tape, p, &prefix, k + 1, y, padding)?;
            }
            outs.push(y);
        }
        Ok(tape.concat_channels(&outs)?)
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), StinError> {
        let bad = |detail: String| Err(StinError::Shape { found: shape.to_vec(), detail });
        if shape.len() != 4 || shape[0] != 1 {
            return bad("expected [1, T, H, W]".into());
        }
        if !shape[1].is_multiple_of(1 << self.cfg.pools) {
            return bad(format!("T not divisible by 2^{}", self.cfg.pools));
        }
        Ok(())
    }

    /// Alternating ST-block / `2×1×1` max-pool; the last block is not pooled.
    pub fn feature_extract<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, StinError> {
        self.check_input(tape.shape(x))?;
        let mut y = x;
        let n = self.cfg.trunk_channels.len();
        for b in 1..=n {
            y = self.st_block(tape, p, b, y)?;
            if b < n {
                y = tape.pool3d(y, PoolMode::Max, MAX_POOL_KERNEL)?;
            }
        }
        Ok(y)
    }

    /// Probability that `latent` came from the target domain, shape `[1]`.
    pub fn discriminate<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, latent: Var) -> Result<Var, StinError> {
        let pooled = tape.pool3d(latent, PoolMode::Average, self.cfg.disc_pool)?;
        let n = tape.value(pooled).len();
        let mut h = tape.reshape(pooled, &[n])?;
        for k in 1..=3 {
            let w = p.get(&format!("D.fc{k}.weight"))?;
            let b = p.get(&format!("D.fc{k}.bias"))?;
            h = tape.linear(h, w, b)?;
            h = if k < 3 { tape.relu(h) } else { tape.sigmoid(h) };
        }
        Ok(h)
    }

    /// Per-pixel distribution over time bins, `[1, T, H, W]`.
    pub fn reconstruct<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, latent: Var) -> Result<Var, StinError> {
        let c_last = *self.cfg.trunk_channels.last().expect("validated trunk");
        if tape.shape(latent).len() != 4 || tape.shape(latent)[0] != c_last {
            return Err(StinError::Shape {
                found: tape.shape(latent).to_vec(),
                detail: format!("latent must have {c_last} channels"),
            });
        }
        let mut y = latent;
        let padding = self.cfg.deconv_padding();
        for k in 1..=self.cfg.pools {
            let w = p.get(&format!("R.deconv{k}.weight"))?;
            let b = p.get(&format!("R.deconv{k}.bias"))?;
            y = tape.deconv3d(y, w, b, DECONV_STRIDE, padding)?;
            let gamma = p.get(&format!("R.norm{k}.gamma"))?;
            let beta = p.get(&format!("R.norm{k}.beta"))?;
            let groups = norm_groups(tape.shape(y)[0]);
            y = tape.group_norm(y, groups, gamma, beta, NORM_EPS)?;
            y = tape.relu(y);
        }
        let y = tape.conv3d(y, p.get("R.out.weight")?, p.get("R.out.bias")?, [0, 0, 0])?;
        Ok(tape.activation(y, crate::numerics::Activation::SoftmaxTemporal)?)
    }

    /// `R(F(x))`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, StinError> {
        let latent = self.feature_extract(tape, p, x)?;
        self.reconstruct(tape, p, latent)
    }

    /// Inference on one cube tensor `[1, T, H, W]` without gradients.
    pub fn predict<F: Scalar>(&self, params: &ParamStore<F>, input: Tensor<F>) -> Result<Tensor<F>, StinError> {
        let mut tape = Tape::new();
        let p = params.filtered(|k| ParamGroup::of(k) != Some(ParamGroup::Discriminator)).bind(&mut tape, |_| false);
        let x = tape.constant(input);
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }

    /// Layer-by-layer output sizes of `F`, `D` and `R` for a `[1, T, H, W]` input,
    /// computed from the same geometry rules the operators enforce.
    pub fn trace(&self, input: [usize; 4]) -> Result<Vec<TraceRow>, StinError> {
        self.check_input(&input)?;
        let mut rows = vec![TraceRow { network: 'F', layer: "Input", kernel: None, output: input.to_vec() }];
        let mut dims = [input[1], input[2], input[3]];
        let n = self.cfg.trunk_channels.len();
        let block_kernel = [self.cfg.temporal_kernel, self.cfg.spatial_kernel, self.cfg.spatial_kernel];
        for (b, &c) in self.cfg.trunk_channels.iter().enumerate() {
            for r in 1..=4 {
                let mut d = dims;
                for (kernel, padding) in self.cfg.branch_layers(r) {
                    d = Geometry::unit(kernel, padding).correlate_dims(d).ok_or_else(|| StinError::Shape {
                        found: input.to_vec(),
                        detail: format!("kernel {kernel:?} does not fit {d:?}"),
                    })?;
                }
                if d != dims {
                    return Err(StinError::Shape {
                        found: input.to_vec(),
                        detail: format!("branch {r} changes size {dims:?} -> {d:?}"),
                    });
                }
            }
            rows.push(TraceRow {
                network: 'F',
                layer: "ST-block",
                kernel: Some(block_kernel),
                output: vec![c, dims[0], dims[1], dims[2]],
            });
            if b + 1 < n {
                dims = pooled(dims, MAX_POOL_KERNEL, &input)?;
                rows.push(TraceRow {
                    network: 'F',
                    layer: "Max pooling",
                    kernel: Some(MAX_POOL_KERNEL),
                    output: vec![c, dims[0], dims[1], dims[2]],
                });
            }
        }
        let c_last = self.cfg.trunk_channels[n - 1];
        let latent = vec![c_last, dims[0], dims[1], dims[2]];

        rows.push(TraceRow { network: 'D', layer: "Input", kernel: None, output: latent.clone() });
        let pd = pooled(dims, self.cfg.disc_pool, &input)?;
        rows.push(TraceRow {
            network: 'D',
            layer: "Average pooling",
            kernel: Some(self.cfg.disc_pool),
            output: vec![c_last, pd[0], pd[1], pd[2]],
        });
        let flat = c_last * pd.iter().product::<usize>();
        if flat != self.cfg.flatten_len() {
            return Err(StinError::Shape {
                found: input.to_vec(),
                detail: format!("latent flattens to {flat}, discriminator expects {}", self.cfg.flatten_len()),
            });
        }
        rows.push(TraceRow { network: 'D', layer: "Reshape", kernel: None, output: vec![flat] });
        for w in [self.cfg.disc_hidden[0], self.cfg.disc_hidden[1], 1] {
            rows.push(TraceRow { network: 'D', layer: "FC", kernel: None, output: vec![w] });
        }

        rows.push(TraceRow { network: 'R', layer: "Input", kernel: None, output: latent });
        let g = Geometry::new(self.cfg.deconv_kernel(), DECONV_STRIDE, self.cfg.deconv_padding());
        for pair in self.cfg.trunk_channels.windows(2).rev() {
            dims = g
                .transpose_dims(dims)
                .ok_or_else(|| StinError::Shape { found: input.to_vec(), detail: "deconvolution collapses".into() })?;
            rows.push(TraceRow {
                network: 'R',
                layer: "3D Deconv",
                kernel: Some(g.kernel),
                output: vec![pair[0], dims[0], dims[1], dims[2]],
            });
        }
        rows.push(TraceRow {
            network: 'R',
            layer: "3D Conv",
            kernel: Some([1, 1, 1]),
            output: vec![1, dims[0], dims[1], dims[2]],
        });
        Ok(rows)
    }
}

fn pooled(dims: [usize; 3], k: [usize; 3], input: &[usize; 4]) -> Result<[usize; 3], StinError> {
    if (0..3).any(|a| !dims[a].is_multiple_of(k[a])) {
        return Err(StinError::Shape { found: input.to_vec(), detail: format!("pool {k:?} does not tile {dims:?}") });
    }
    Ok([dims[0] / k[0], dims[1] / k[1], dims[2] / k[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_widths_follow_flatten() {
        assert_eq!(disc_hidden_for(6144), [512, 128]);
        assert_eq!(disc_hidden_for(48), [16, 8]);
        assert_eq!(StinConfig::toy().disc_hidden, [16, 8]);
    }

    #[test]
    fn groups_rule() {
        assert_eq!(norm_groups(48), 4);
        assert_eq!(norm_groups(12), 4);
        assert_eq!(norm_groups(6), 1);
        assert_eq!(norm_groups(1), 1);
    }

    #[test]
    fn validate_catches_bad_configs() {
        let mut c = StinConfig::toy();
        c.trunk_channels[2] = 10;
        assert!(c.validate().is_err());
        let mut c = StinConfig::toy();
        c.bins = 100;
        assert!(c.validate().is_err());
        let mut c = StinConfig::toy();
        c.pools = 6;
        assert!(c.validate().is_err());
        assert!(StinConfig::paper().validate().is_ok());
        assert!(StinConfig::toy().validate().is_ok());
    }

    #[test]
    fn param_groups_partition_paths() {
        let cfg = StinConfig::toy();
        for spec in cfg.parameter_specs() {
            assert!(ParamGroup::of(&spec.path).is_some(), "{}", spec.path);
        }
        assert_eq!(ParamGroup::of("F.block3.branch2.conv1.weight"), Some(ParamGroup::Extractor));
        assert_eq!(ParamGroup::of("X.y"), None);
    }
}
