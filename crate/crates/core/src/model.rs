//! The full lifting network: a per-joint input projection, `depth` pairs of
//! (transformer encoder, GCN block), and a per-joint output projection.
//!
//! Parameter count for the primary block design, with `d` channels, `J`
//! joints, MLP ratio `r` and depth `N`:
//!
//! ```text
//! (2d + d) + (3d + 3)
//!   + N · ( 4d² + 4d            attention projections with biases
//!         + 2r·d² + r·d + d     encoder MLP
//!         + 2·(3d² + d)         two grouped convolutions
//!         + 2·2d                two layer norms
//!         + J·d )               positional embedding
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::root_relative_3d;
use crate::encoder::{AttentionScaling, DropoutRng, EncoderWeights};
use crate::error::{Error, Result};
use crate::graphconv::{GcnBlock, GcnBlockDesign};
use crate::numerics::{Gradients, Graph, Tensor, Var, DEFAULT_LN_EPS};
use crate::params::{Linear, Param, Parameterized};
use crate::skeleton::{PartitionedAdjacency, Skeleton};

/// Skeleton reference in a config: a builtin name, a file path, or the
/// full definition inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SkeletonSource {
    Named(String),
    Inline(Skeleton),
}

impl SkeletonSource {
    pub fn resolve(&self) -> Result<Skeleton> {
        match self {
            SkeletonSource::Named(s) => Skeleton::load(s),
            SkeletonSource::Inline(s) => Ok(s.clone()),
        }
    }
}

impl Default for SkeletonSource {
    fn default() -> Self {
        SkeletonSource::Named("h36m17".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub skeleton: SkeletonSource,
    /// Optional cross-check against the skeleton's joint count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_joints: Option<usize>,
    pub channels: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub gcn_block: GcnBlockDesign,
    /// Hidden width multiplier of the pointwise MLP inside the
    /// transformer_style and convnext_style blocks.
    pub block_mlp_ratio: usize,
    pub attention_scaling: AttentionScaling,
    pub dropout: f64,
    pub ln_eps: f64,
    pub qkv_bias: bool,
    pub conv_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            skeleton: SkeletonSource::default(),
            num_joints: None,
            channels: 512,
            depth: 5,
            num_heads: 8,
            mlp_ratio: 2,
            gcn_block: GcnBlockDesign::Primary,
            block_mlp_ratio: 1,
            attention_scaling: AttentionScaling::PerHead,
            dropout: 0.0,
            ln_eps: DEFAULT_LN_EPS,
            qkv_bias: true,
            conv_bias: true,
        }
    }
}

impl ModelConfig {
    /// 17 joints, 512 channels, depth 5.
    pub fn reference() -> Self {
        Self::default()
    }

    /// Five joints, eight channels, one layer; sized for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            skeleton: SkeletonSource::Named("tiny5".into()),
            channels: 8,
            depth: 1,
            num_heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        let mut problems = Vec::new();
        if self.depth == 0 {
            problems.push("depth must be at least 1".to_string());
        }
        if self.channels == 0 {
            problems.push("channels must be at least 1".to_string());
        }
        if self.num_heads == 0 || !self.channels.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "channels ({}) must be divisible by num_heads ({})",
                self.channels, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 || self.block_mlp_ratio == 0 {
            problems.push("MLP ratios must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ln_eps <= 0.0 {
            problems.push(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if let Some(n) = self.num_joints {
            if n != skeleton.num_joints() {
                problems.push(format!(
                    "num_joints ({n}) does not match the skeleton ({})",
                    skeleton.num_joints()
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Copy with the skeleton inlined, so the config alone rebuilds the model.
    pub fn resolved(&self) -> Result<ModelConfig> {
        let skeleton = self.skeleton.resolve()?;
        Ok(ModelConfig {
            num_joints: Some(skeleton.num_joints()),
            skeleton: SkeletonSource::Inline(skeleton),
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub encoder: EncoderWeights,
    pub gcn: GcnBlock,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    skeleton: Skeleton,
    partition: PartitionedAdjacency,
    pub input_proj: Linear,
    pub layers: Vec<Layer>,
    pub output_proj: Linear,
}

/// Build a model with every weight drawn from a generator seeded by `seed`.
///
/// Weight matrices are uniform in `±1/√fan_in`; biases and positional
/// embeddings start at zero; layer norms at unit scale and zero shift.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let skeleton = cfg.skeleton.resolve()?;
    cfg.validate(&skeleton)?;
    let config = cfg.resolved()?;
    let partition = PartitionedAdjacency::new(&skeleton);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (j, d) = (skeleton.num_joints(), cfg.channels);

    let input_proj = Linear::new("input_proj", 2, d, true, &mut rng);
    let mut layers = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let mut encoder = EncoderWeights::new(
            &format!("layers.{i}.enc"),
            j,
            d,
            cfg.num_heads,
            cfg.mlp_ratio,
            cfg.qkv_bias,
            cfg.ln_eps,
            &mut rng,
        )?;
        encoder.scaling = cfg.attention_scaling;
        encoder.dropout = cfg.dropout;
        let gcn = GcnBlock::new(
            &format!("layers.{i}.gcn"),
            cfg.gcn_block,
            d,
            cfg.block_mlp_ratio,
            cfg.conv_bias,
            cfg.ln_eps,
            &mut rng,
        );
        layers.push(Layer { encoder, gcn });
    }
    let output_proj = Linear::new("output_proj", d, 3, true, &mut rng);
    Ok(Model {
        config,
        skeleton,
        partition,
        input_proj,
        layers,
        output_proj,
    })
}

/// One parameter tensor in a [`ParamReport`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamItem {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub items: Vec<ParamItem>,
}

impl ParamReport {
    /// Totals grouped by module prefix (`input_proj`, `layers.0.enc`, ...).
    pub fn by_module(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for item in &self.items {
            let module = module_of(&item.name);
            match out.last_mut() {
                Some((m, c)) if *m == module => *c += item.count,
                _ => out.push((module, item.count)),
            }
        }
        out
    }
}

fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts[0] == "layers" && parts.len() >= 3 {
        parts[..3].join(".")
    } else {
        parts[0].to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    /// Multiply-accumulates per sample, one MAC counted as one FLOP.
    pub total: u64,
    pub items: Vec<(String, u64)>,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn partition(&self) -> &PartitionedAdjacency {
        &self.partition
    }

    pub fn num_joints(&self) -> usize {
        self.skeleton.num_joints()
    }

    /// Record the forward pass for stacked inputs `[B·J, 2]` into `g`.
    pub fn forward_graph(&self, g: &mut Graph, input: Var, mut rng: DropoutRng<'_>) -> Result<Var> {
        let iv = g.value(input);
        let j = self.num_joints();
        if iv.cols() != 2 || iv.rows() == 0 || !iv.rows().is_multiple_of(j) {
            return Err(Error::shape("forward", iv.shape(), &[j, 2]));
        }
        let mut z = self.input_proj.forward(g, input)?;
        for layer in &self.layers {
            z = layer.encoder.forward(g, z, rng.as_deref_mut())?;
            z = layer.gcn.forward(g, z, &self.partition)?;
        }
        self.output_proj.forward(g, z)
    }

    /// `[J, 2]` normalized keypoints to `[J, 3]` root-relative millimetres.
    pub fn forward(&self, pose2d: &Tensor) -> Result<Tensor> {
        let j = self.num_joints();
        if pose2d.shape() != [j, 2] {
            return Err(Error::shape("forward", pose2d.shape(), &[j, 2]));
        }
        let mut g = Graph::new();
        let x = g.constant(pose2d.clone());
        let y = self.forward_graph(&mut g, x, None)?;
        Ok(g.value(y).clone())
    }

    /// Forward a batch of `[J, 2]` inputs in one stacked pass.
    pub fn predict_batch(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let j = self.num_joints();
        for x in inputs {
            if x.shape() != [j, 2] {
                return Err(Error::shape("predict_batch", x.shape(), &[j, 2]));
            }
        }
        let stacked =
            Tensor::concat_rows(&inputs.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let x = g.constant(stacked);
        let y = self.forward_graph(&mut g, x, None)?;
        let out = g.value(y);
        Ok((0..inputs.len())
            .map(|b| out.slice_rows(b * j, j))
            .collect())
    }

    /// Root-relative poses for a batch of inputs: [`Model::predict_batch`]
    /// with the predicted root subtracted, matching the dataset convention.
    pub fn predict_poses(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        let root = self.skeleton.root();
        self.predict_batch(inputs)?
            .iter()
            .map(|y| root_relative_3d(y, root))
            .collect()
    }

    /// Gradients for every parameter in [`Parameterized::params`] order;
    /// parameters the loss never touched get zeros.
    pub fn collect_gradients(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.params()
            .iter()
            .map(|p| match g.param_var(&p.name) {
                Some(v) => grads.wrt_or_zeros(v, &p.value),
                None => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::Contract(format!(
                "{} tensors supplied for {} parameters",
                values.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("set_param_values", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn count_params(&self) -> ParamReport {
        let items: Vec<ParamItem> = self
            .params()
            .iter()
            .map(|p| ParamItem {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                count: p.numel(),
            })
            .collect();
        ParamReport {
            total: items.iter().map(|i| i.count).sum(),
            items,
        }
    }

    /// Matrix-product multiply-accumulates for one sample. Adjacency
    /// aggregation counts one MAC per stored nonzero per channel; norms,
    /// activations, bias and residual additions are not counted.
    pub fn count_flops(&self) -> FlopReport {
        let j = self.num_joints() as u64;
        let mut items = vec![(
            "input_proj".to_string(),
            j * (self.input_proj.d_in() * self.input_proj.d_out()) as u64,
        )];
        for (i, layer) in self.layers.iter().enumerate() {
            items.push((format!("layers.{i}.enc"), layer.encoder.macs()));
            items.push((
                format!("layers.{i}.gcn"),
                layer.gcn.macs(self.num_joints(), &self.partition),
            ));
        }
        items.push((
            "output_proj".to_string(),
            j * (self.output_proj.d_in() * self.output_proj.d_out()) as u64,
        ));
        FlopReport {
            total: items.iter().map(|(_, c)| c).sum(),
            items,
        }
    }

    /// Human-readable parameter / FLOP / skeleton summary.
    pub fn summary(&self) -> String {
        let params = self.count_params();
        let flops = self.count_flops();
        let flop_map: BTreeMap<&str, u64> =
            flops.items.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "joints {}  channels {}  depth {}  heads {}  mlp_ratio {}  block {}",
            self.num_joints(),
            self.config.channels,
            self.config.depth,
            self.config.num_heads,
            self.config.mlp_ratio,
            self.config.gcn_block
        );
        let _ = writeln!(s, "{:<16} {:>14} {:>16}", "module", "params", "MACs");
        for (module, count) in params.by_module() {
            let macs = flop_map.get(module.as_str()).copied().unwrap_or(0);
            let _ = writeln!(s, "{module:<16} {count:>14} {macs:>16}");
        }
        let _ = writeln!(
            s,
            "{:<16} {:>14} {:>16}",
            "total", params.total, flops.total
        );
        let _ = writeln!(
            s,
            "params {:.2} M  FLOPs {:.1} M",
            params.total as f64 / 1e6,
            flops.total as f64 / 1e6
        );
        let _ = writeln!(s, "hop {:?}", self.partition.hop);
        let _ = writeln!(
            s,
            "group nonzeros (self, closer, farther) {:?}",
            self.partition.group_sizes()
        );
        s
    }
}

impl Parameterized for Model {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.input_proj.params();
        for l in &self.layers {
            v.extend(l.encoder.params());
            v.extend(l.gcn.params());
        }
        v.extend(self.output_proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.input_proj.params_mut();
        for l in &mut self.layers {
            v.extend(l.encoder.params_mut());
            v.extend(l.gcn.params_mut());
        }
        v.extend(self.output_proj.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form count for the primary design (see module docs).
    fn closed_form_params(j: usize, d: usize, n: usize, r: usize) -> usize {
        let io = (2 * d + d) + (3 * d + 3);
        let attn = 4 * d * d + 4 * d;
        let mlp = 2 * r * d * d + r * d + d;
        let gcn = 2 * (3 * d * d + d);
        let ln = 2 * 2 * d;
        io + n * (attn + mlp + gcn + ln + j * d)
    }

    fn cfg(skeleton: &str, d: usize, depth: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            skeleton: SkeletonSource::Named(skeleton.into()),
            channels: d,
            depth,
            num_heads: heads,
            ..ModelConfig::default()
        }
    }

    fn chain3_cfg(d: usize, depth: usize) -> ModelConfig {
        ModelConfig {
            skeleton: SkeletonSource::Inline(Skeleton::new(3, 0, &[(0, 1), (1, 2)]).unwrap()),
            channels: d,
            depth,
            num_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(&ModelConfig::tiny(), 7).unwrap();
        let b = build_model(&ModelConfig::tiny(), 7).unwrap();
        let c = build_model(&ModelConfig::tiny(), 8).unwrap();
        assert_eq!(a.param_values(), b.param_values());
        assert_ne!(a.param_values(), c.param_values());
    }

    #[test]
    fn small_config_matches_closed_form() {
        let m = build_model(&chain3_cfg(8, 1), 0).unwrap();
        assert_eq!(m.count_params().total, closed_form_params(3, 8, 1, 2));
        let m = build_model(&cfg("h36m16", 16, 3, 4), 0).unwrap();
        assert_eq!(m.count_params().total, closed_form_params(16, 16, 3, 2));
    }

    #[test]
    fn param_count_ignores_heads() {
        let a = build_model(&cfg("h36m17", 16, 2, 2), 0).unwrap();
        let b = build_model(&cfg("h36m17", 16, 2, 8), 0).unwrap();
        assert_eq!(a.count_params().total, b.count_params().total);
    }

    #[test]
    fn reference_config_counts() {
        let m = build_model(&ModelConfig::reference(), 0).unwrap();
        let total = m.count_params().total;
        assert_eq!(total, closed_form_params(17, 512, 5, 2));
        assert!((total as f64 - 18.3e6).abs() / 18.3e6 < 0.03, "{total}");
        let flops = m.count_flops().total as f64;
        assert!((flops - 312.2e6).abs() / 312.2e6 < 0.03, "{flops}");
    }

    #[test]
    fn hand_tally_of_macs_for_tiny_config() {
        // chain3, d = 4, depth 1, r = 2: nnz(A) = 3 + 2·2 = 7.
        let m = build_model(&chain3_cfg(4, 1), 0).unwrap();
        let (j, d) = (3u64, 4u64);
        let input = j * 2 * d;
        let proj = 4 * j * d * d;
        let qk = j * j * d;
        let av = j * j * d;
        let mlp = 2 * j * d * (2 * d);
        let conv = 3 * j * d * d + 7 * d;
        let output = j * d * 3;
        let expected = input + proj + qk + av + mlp + 2 * conv + output;
        assert_eq!(m.count_flops().total, expected);
    }

    #[test]
    fn invalid_configs_list_the_violation() {
        let mut c = ModelConfig::tiny();
        c.depth = 0;
        let e = build_model(&c, 0).unwrap_err().to_string();
        assert!(e.contains("depth"), "{e}");
        let mut c = ModelConfig::tiny();
        c.num_heads = 3;
        let e = build_model(&c, 0).unwrap_err().to_string();
        assert!(e.contains("divisible"), "{e}");
        let mut c = ModelConfig::tiny();
        c.num_joints = Some(17);
        assert!(build_model(&c, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = build_model(&cfg("h36m17", 16, 1, 4), 1).unwrap();
        let x = Tensor::uniform(&[17, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[17, 3]);
        assert_eq!(m.forward(&x).unwrap(), y);
        assert!(matches!(
            m.forward(&Tensor::zeros(&[16, 2])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn batch_prediction_matches_single() {
        let m = build_model(&cfg("h36m16", 16, 2, 4), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Tensor> = (0..5)
            .map(|_| Tensor::uniform(&[16, 2], 1.0, &mut rng))
            .collect();
        let batch = m.predict_batch(&xs.iter().collect::<Vec<_>>()).unwrap();
        for (x, y) in xs.iter().zip(&batch) {
            assert!(m.forward(x).unwrap().max_abs_diff(y) < 1e-12);
        }
        let poses = m.predict_poses(&xs.iter().collect::<Vec<_>>()).unwrap();
        for (p, y) in poses.iter().zip(&batch) {
            let root = m.skeleton().root();
            assert_eq!(p.row(root), &[0.0, 0.0, 0.0]);
            assert!(y.row(root) != p.row(root));
            for j in 0..16 {
                for c in 0..3 {
                    let want = y.get(j, c) - y.get(root, c);
                    assert!((p.get(j, c) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_matches_module_composition() {
        use crate::encoder::encoder_forward;
        use crate::graphconv::gcn_block_forward;
        let mut m = build_model(&chain3_cfg(4, 2), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in m.params_mut() {
            p.value = Tensor::uniform(p.value.shape(), 0.4, &mut rng);
        }
        let x = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let lin = |x: &Tensor, l: &Linear| {
            let y = crate::numerics::matmul(x, &l.weight.value).unwrap();
            let b = &l.bias.as_ref().unwrap().value;
            let mut out = y.clone();
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    out.set(r, c, y.get(r, c) + b.data()[c]);
                }
            }
            out
        };
        let mut z = lin(&x, &m.input_proj);
        for layer in &m.layers {
            z = encoder_forward(&z, &layer.encoder).unwrap();
            z = gcn_block_forward(&z, m.partition(), &layer.gcn).unwrap();
        }
        let oracle = lin(&z, &m.output_proj);
        assert!(m.forward(&x).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let m = build_model(&ModelConfig::tiny(), 0).unwrap();
        let json = serde_json::to_string(m.config()).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, m.config());
        let rebuilt = build_model(&back, 0).unwrap();
        assert_eq!(rebuilt.param_values(), m.param_values());
    }

    #[test]
    fn config_from_toml() {
        let c: ModelConfig = toml::from_str(
            "skeleton = \"h36m16\"\nchannels = 64\ndepth = 2\ngcn_block = \"convnext_style\"\n",
        )
        .unwrap();
        assert_eq!(c.channels, 64);
        assert_eq!(c.gcn_block, GcnBlockDesign::ConvnextStyle);
        assert_eq!(c.num_heads, 8);
        assert!(toml::from_str::<ModelConfig>("chanels = 3").is_err());
        assert!(toml::from_str::<ModelConfig>("gcn_block = \"resnet\"").is_err());
    }

    #[test]
    fn summary_mentions_totals() {
        let m = build_model(&ModelConfig::tiny(), 0).unwrap();
        let s = m.summary();
        assert!(s.contains("hop [0, 1, 1, 1, 2]"), "{s}");
        assert!(s.contains(&m.count_params().total.to_string()));
    }
}
