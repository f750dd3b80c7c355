//! Graph convolutions over the skeleton and the GCN block designs built on
//! them.
//!
//! Inputs are joint-feature matrices `[J, d]`, or `B` of them stacked into
//! `[B·J, d]`; adjacency products are applied block by block.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, SparseMatrix, Tensor, Var};
use crate::params::{LayerNormParams, Linear, Param, Parameterized};
use crate::skeleton::PartitionedAdjacency;

/// Single-projection graph convolution `Â·X·Θ (+ b)`.
pub fn vanilla_gconv(
    x: &Tensor,
    ahat: &Tensor,
    theta: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    if ahat.rows() != ahat.cols() || !x.rows().is_multiple_of(ahat.rows().max(1)) {
        return Err(Error::shape("vanilla_gconv", ahat.shape(), x.shape()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let t = g.constant(theta.clone());
    let xt = g.matmul(xv, t)?;
    let mut y = g.block_left_mul(Arc::new(SparseMatrix::from_dense(ahat)), xt)?;
    if let Some(b) = bias {
        let b = g.constant(b.clone());
        y = g.add_bias(y, b)?;
    }
    Ok(g.value(y).clone())
}

/// Three projection matrices (self, closer, farther) and an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedConvWeights {
    pub theta: [Param; 3],
    pub bias: Option<Param>,
}

impl GroupedConvWeights {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut theta = |k: usize| {
            Param::new(
                format!("{name}.theta{k}"),
                Tensor::uniform(&[d_in, d_out], bound, rng),
            )
        };
        let theta = [theta(1), theta(2), theta(3)];
        GroupedConvWeights {
            theta,
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out]))),
        }
    }

    /// Build from explicit matrices (names are synthesized from `name`).
    pub fn from_tensors(name: &str, theta: [Tensor; 3], bias: Option<Tensor>) -> Result<Self> {
        if theta[0].shape() != theta[1].shape() || theta[0].shape() != theta[2].shape() {
            return Err(Error::shape(
                "GroupedConvWeights",
                theta[0].shape(),
                theta[1].shape(),
            ));
        }
        let [t1, t2, t3] = theta;
        Ok(GroupedConvWeights {
            theta: [
                Param::new(format!("{name}.theta1"), t1),
                Param::new(format!("{name}.theta2"), t2),
                Param::new(format!("{name}.theta3"), t3),
            ],
            bias: bias.map(|b| Param::new(format!("{name}.bias"), b)),
        })
    }

    pub fn d_in(&self) -> usize {
        self.theta[0].value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.theta[0].value.cols()
    }

    /// `Σ_k Â_k · X · Θ_k (+ b)`.
    pub fn forward(&self, g: &mut Graph, x: Var, part: &PartitionedAdjacency) -> Result<Var> {
        let d_in = g.value(x).cols();
        if d_in != self.d_in() {
            return Err(Error::shape(
                "grouped_gconv",
                g.value(x).shape(),
                self.theta[0].value.shape(),
            ));
        }
        let mut acc: Option<Var> = None;
        for (k, theta) in self.theta.iter().enumerate() {
            let t = theta.bind(g);
            let xt = g.matmul(x, t)?;
            let agg = g.block_left_mul(part.sparse(k), xt)?;
            acc = Some(match acc {
                None => agg,
                Some(a) => g.add(a, agg)?,
            });
        }
        let y = acc.expect("three groups");
        match &self.bias {
            Some(b) => {
                let b = b.bind(g);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Multiply-accumulates for one sample of `joints` rows.
    pub fn macs(&self, joints: usize, part: &PartitionedAdjacency) -> u64 {
        let (di, d) = (self.d_in() as u64, self.d_out() as u64);
        3 * joints as u64 * di * d + part.nnz() as u64 * d
    }
}

impl Parameterized for GroupedConvWeights {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.theta.iter().collect();
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.theta.iter_mut().collect();
        v.extend(self.bias.as_mut());
        v
    }
}

/// Grouped graph convolution on a plain `[J, d]` (or stacked) matrix.
pub fn grouped_gconv(
    x: &Tensor,
    part: &PartitionedAdjacency,
    w: &GroupedConvWeights,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = w.forward(&mut g, xv, part)?;
    Ok(g.value(y).clone())
}

/// Internal structure of a GCN block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnBlockDesign {
    /// `h = gelu(conv_a(z)); out = h + gelu(conv_b(h))`.
    #[default]
    Primary,
    /// `h = z + gelu(conv_a(z)); out = h + gelu(conv_b(h))`.
    TwoResidual,
    /// `h = z + conv(ln(z)); out = h + mlp(ln(h))`.
    TransformerStyle,
    /// `out = z + reduce(gelu(expand(ln(conv(z)))))`.
    ConvnextStyle,
}

impl GcnBlockDesign {
    pub const ALL: [GcnBlockDesign; 4] = [
        GcnBlockDesign::Primary,
        GcnBlockDesign::TwoResidual,
        GcnBlockDesign::TransformerStyle,
        GcnBlockDesign::ConvnextStyle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GcnBlockDesign::Primary => "primary",
            GcnBlockDesign::TwoResidual => "two_residual",
            GcnBlockDesign::TransformerStyle => "transformer_style",
            GcnBlockDesign::ConvnextStyle => "convnext_style",
        }
    }
}

impl fmt::Display for GcnBlockDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GcnBlockDesign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown GCN block design {s:?} (expected primary, two_residual, \
                     transformer_style or convnext_style)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnBlock {
    pub design: GcnBlockDesign,
    pub conv_a: GroupedConvWeights,
    pub conv_b: Option<GroupedConvWeights>,
    pub ln_a: Option<LayerNormParams>,
    pub ln_b: Option<LayerNormParams>,
    pub fc1: Option<Linear>,
    pub fc2: Option<Linear>,
}

impl GcnBlock {
    /// `mlp_ratio` only matters for the two designs with a pointwise MLP.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        design: GcnBlockDesign,
        d: usize,
        mlp_ratio: usize,
        bias: bool,
        ln_eps: f64,
        rng: &mut R,
    ) -> Self {
        let conv = |tag: &str, rng: &mut R| {
            GroupedConvWeights::new(&format!("{name}.{tag}"), d, d, bias, rng)
        };
        let ln = |tag: &str| Some(LayerNormParams::new(&format!("{name}.{tag}"), d, ln_eps));
        let hidden = mlp_ratio * d;
        match design {
            GcnBlockDesign::Primary | GcnBlockDesign::TwoResidual => {
                let conv_a = conv("conv_a", rng);
                let conv_b = Some(conv("conv_b", rng));
                GcnBlock {
                    design,
                    conv_a,
                    conv_b,
                    ln_a: None,
                    ln_b: None,
                    fc1: None,
                    fc2: None,
                }
            }
            GcnBlockDesign::TransformerStyle => {
                let conv_a = conv("conv_a", rng);
                let fc1 = Linear::new(&format!("{name}.fc1"), d, hidden, true, rng);
                let fc2 = Linear::new(&format!("{name}.fc2"), hidden, d, true, rng);
                GcnBlock {
                    design,
                    conv_a,
                    conv_b: None,
                    ln_a: ln("ln_a"),
                    ln_b: ln("ln_b"),
                    fc1: Some(fc1),
                    fc2: Some(fc2),
                }
            }
            GcnBlockDesign::ConvnextStyle => {
                let conv_a = conv("conv_a", rng);
                let fc1 = Linear::new(&format!("{name}.expand"), d, hidden, true, rng);
                let fc2 = Linear::new(&format!("{name}.reduce"), hidden, d, true, rng);
                GcnBlock {
                    design,
                    conv_a,
                    conv_b: None,
                    ln_a: ln("ln"),
                    ln_b: None,
                    fc1: Some(fc1),
                    fc2: Some(fc2),
                }
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, z: Var, part: &PartitionedAdjacency) -> Result<Var> {
        let missing = || Error::Config(format!("{} block is missing a sub-layer", self.design));
        match self.design {
            GcnBlockDesign::Primary => {
                let a = self.conv_a.forward(g, z, part)?;
                let h = g.gelu(a);
                let b = self
                    .conv_b
                    .as_ref()
                    .ok_or_else(missing)?
                    .forward(g, h, part)?;
                let b = g.gelu(b);
                g.add(h, b)
            }
            GcnBlockDesign::TwoResidual => {
                let a = self.conv_a.forward(g, z, part)?;
                let a = g.gelu(a);
                let h = g.add(z, a)?;
                let b = self
                    .conv_b
                    .as_ref()
                    .ok_or_else(missing)?
                    .forward(g, h, part)?;
                let b = g.gelu(b);
                g.add(h, b)
            }
            GcnBlockDesign::TransformerStyle => {
                let n = self.ln_a.as_ref().ok_or_else(missing)?.forward(g, z)?;
                let c = self.conv_a.forward(g, n, part)?;
                let h = g.add(z, c)?;
                let n = self.ln_b.as_ref().ok_or_else(missing)?.forward(g, h)?;
                let m = self.fc1.as_ref().ok_or_else(missing)?.forward(g, n)?;
                let m = g.gelu(m);
                let m = self.fc2.as_ref().ok_or_else(missing)?.forward(g, m)?;
                g.add(h, m)
            }
            GcnBlockDesign::ConvnextStyle => {
                let c = self.conv_a.forward(g, z, part)?;
                let n = self.ln_a.as_ref().ok_or_else(missing)?.forward(g, c)?;
                let m = self.fc1.as_ref().ok_or_else(missing)?.forward(g, n)?;
                let m = g.gelu(m);
                let m = self.fc2.as_ref().ok_or_else(missing)?.forward(g, m)?;
                g.add(z, m)
            }
        }
    }

    /// Multiply-accumulates for one sample (matrix products only).
    pub fn macs(&self, joints: usize, part: &PartitionedAdjacency) -> u64 {
        let mut total = self.conv_a.macs(joints, part);
        if let Some(c) = &self.conv_b {
            total += c.macs(joints, part);
        }
        for fc in [&self.fc1, &self.fc2].into_iter().flatten() {
            total += (joints * fc.d_in() * fc.d_out()) as u64;
        }
        total
    }
}

impl Parameterized for GcnBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        v.extend(self.conv_a.params());
        if let Some(c) = &self.conv_b {
            v.extend(c.params());
        }
        for ln in [&self.ln_a, &self.ln_b].into_iter().flatten() {
            v.extend(ln.params());
        }
        for fc in [&self.fc1, &self.fc2].into_iter().flatten() {
            v.extend(fc.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        v.extend(self.conv_a.params_mut());
        if let Some(c) = &mut self.conv_b {
            v.extend(c.params_mut());
        }
        for ln in [&mut self.ln_a, &mut self.ln_b].into_iter().flatten() {
            v.extend(ln.params_mut());
        }
        for fc in [&mut self.fc1, &mut self.fc2].into_iter().flatten() {
            v.extend(fc.params_mut());
        }
        v
    }
}

/// Run one GCN block on a plain matrix.
pub fn gcn_block_forward(
    z: &Tensor,
    part: &PartitionedAdjacency,
    block: &GcnBlock,
) -> Result<Tensor> {
    if z.cols() != block.conv_a.d_in() || block.conv_a.d_in() != block.conv_a.d_out() {
        return Err(Error::shape(
            "gcn_block_forward",
            z.shape(),
            block.conv_a.theta[0].value.shape(),
        ));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let y = block.forward(&mut g, zv, part)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, ops::gelu};
    use crate::skeleton::{partition_adjacency, Skeleton};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn chain3() -> Skeleton {
        Skeleton::new(3, 0, &[(0, 1), (1, 2)]).unwrap()
    }

    /// Per-joint brute force: enumerate neighbours, classify by hop count,
    /// weight by the group degree normalization computed from scratch.
    fn brute_force(s: &Skeleton, x: &Tensor, w: &GroupedConvWeights) -> Tensor {
        let n = s.num_joints();
        let hop = s.hop_distances();
        let nbrs = s.neighbors();
        let group_of = |i: usize, j: usize| -> usize {
            if i == j {
                0
            } else if hop[j] < hop[i] {
                1
            } else {
                2
            }
        };
        // members[k][i] = joints feeding i in group k (self-loop included in group 0)
        let mut members = vec![vec![Vec::new(); n]; 3];
        for i in 0..n {
            members[0][i].push(i);
            for &j in &nbrs[i] {
                members[group_of(i, j)][i].push(j);
            }
        }
        let out_deg = |k: usize, i: usize| members[k][i].len() as f64;
        let in_deg =
            |k: usize, j: usize| (0..n).filter(|&i| members[k][i].contains(&j)).count() as f64;
        let d_out = w.d_out();
        let mut out = Tensor::zeros(&[n, d_out]);
        for i in 0..n {
            for k in 0..3 {
                for &j in &members[k][i] {
                    let coef = 1.0 / (out_deg(k, i) * in_deg(k, j)).sqrt();
                    for c in 0..d_out {
                        let mut v = 0.0;
                        for t in 0..x.cols() {
                            v += x.get(j, t) * w.theta[k].value.get(t, c);
                        }
                        out.set(i, c, out.get(i, c) + coef * v);
                    }
                }
            }
            if let Some(b) = &w.bias {
                for c in 0..d_out {
                    out.set(i, c, out.get(i, c) + b.value.data()[c]);
                }
            }
        }
        out
    }

    #[test]
    fn vanilla_identity_and_zero() {
        let mut r = rng(1);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut r);
        assert_eq!(
            vanilla_gconv(&x, &Tensor::eye(4), &Tensor::eye(3), None).unwrap(),
            x
        );
        let theta = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let y = vanilla_gconv(&Tensor::zeros(&[4, 3]), &Tensor::eye(4), &theta, None).unwrap();
        assert_eq!(y, Tensor::zeros(&[4, 5]));
    }

    #[test]
    fn vanilla_two_node_matches_aggregate_then_project() {
        let mut r = rng(2);
        let ahat = Tensor::full(&[2, 2], 0.5);
        let x = Tensor::uniform(&[2, 3], 1.0, &mut r);
        let theta = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let mut agg = Tensor::zeros(&[2, 3]);
        for i in 0..2 {
            for c in 0..3 {
                agg.set(i, c, 0.5 * x.get(0, c) + 0.5 * x.get(1, c));
            }
        }
        let oracle = matmul(&agg, &theta).unwrap();
        let y = vanilla_gconv(&x, &ahat, &theta, None).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn grouped_matches_brute_force_on_chain() {
        let s = chain3();
        let part = partition_adjacency(&s);
        let mut r = rng(3);
        let mut w = GroupedConvWeights::new("c", 4, 5, true, &mut r);
        w.bias.as_mut().unwrap().value = Tensor::uniform(&[5], 1.0, &mut r);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let y = grouped_gconv(&x, &part, &w).unwrap();
        assert!(y.max_abs_diff(&brute_force(&s, &x, &w)) < 1e-12);
    }

    #[test]
    fn single_joint_uses_only_self_group() {
        let s = Skeleton::new(1, 0, &[]).unwrap();
        let part = partition_adjacency(&s);
        let mut r = rng(4);
        let w = GroupedConvWeights::new("c", 3, 2, false, &mut r);
        let x = Tensor::uniform(&[1, 3], 1.0, &mut r);
        let y = grouped_gconv(&x, &part, &w).unwrap();
        let oracle = matmul(&x, &w.theta[0].value).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let part = partition_adjacency(&chain3());
        let w = GroupedConvWeights::new("c", 4, 4, true, &mut rng(5));
        let y = grouped_gconv(&Tensor::zeros(&[3, 4]), &part, &w).unwrap();
        assert_eq!(y, Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let part = partition_adjacency(&chain3());
        let w = GroupedConvWeights::new("c", 4, 4, true, &mut rng(5));
        assert!(matches!(
            grouped_gconv(&Tensor::zeros(&[3, 5]), &part, &w),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn shared_theta_differs_from_vanilla_on_chain() {
        let part = partition_adjacency(&chain3());
        let mut r = rng(6);
        let theta = Tensor::uniform(&[3, 3], 1.0, &mut r);
        let w = GroupedConvWeights::from_tensors(
            "c",
            [theta.clone(), theta.clone(), theta.clone()],
            None,
        )
        .unwrap();
        let x = Tensor::uniform(&[3, 3], 1.0, &mut r);
        let grouped = grouped_gconv(&x, &part, &w).unwrap();
        let full = crate::skeleton::normalize_adjacency(&part.full);
        let vanilla = vanilla_gconv(&x, &full, &theta, None).unwrap();
        assert!(grouped.max_abs_diff(&vanilla) > 1e-3);
    }

    #[test]
    fn primary_block_with_zero_weights_is_zero() {
        let part = partition_adjacency(&chain3());
        let mut block = GcnBlock::new("b", GcnBlockDesign::Primary, 4, 1, true, 1e-5, &mut rng(7));
        for p in block.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let z = Tensor::uniform(&[3, 4], 1.0, &mut rng(8));
        assert_eq!(
            gcn_block_forward(&z, &part, &block).unwrap(),
            Tensor::zeros(&[3, 4])
        );
    }

    #[test]
    fn primary_block_matches_composition() {
        let part = partition_adjacency(&chain3());
        let block = GcnBlock::new("b", GcnBlockDesign::Primary, 4, 1, true, 1e-5, &mut rng(9));
        let z = Tensor::uniform(&[3, 4], 1.0, &mut rng(10));
        let h = gelu(&grouped_gconv(&z, &part, &block.conv_a).unwrap());
        let b = gelu(&grouped_gconv(&h, &part, block.conv_b.as_ref().unwrap()).unwrap());
        let oracle = h.add(&b).unwrap();
        let y = gcn_block_forward(&z, &part, &block).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-14);
    }

    #[test]
    fn every_design_preserves_shape_and_lists_params_once() {
        let s = Skeleton::builtin("h36m17").unwrap();
        let part = partition_adjacency(&s);
        for design in GcnBlockDesign::ALL {
            let mut block = GcnBlock::new("b", design, 8, 2, true, 1e-5, &mut rng(11));
            let z = Tensor::uniform(&[17, 8], 1.0, &mut rng(12));
            let y = gcn_block_forward(&z, &part, &block).unwrap();
            assert_eq!(y.shape(), &[17, 8], "{design}");

            let names: Vec<String> = block.params().iter().map(|p| p.name.clone()).collect();
            let names_mut: Vec<String> =
                block.params_mut().iter().map(|p| p.name.clone()).collect();
            assert_eq!(names, names_mut, "{design}");
            let mut dedup = names.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), names.len(), "{design}");
        }
    }

    #[test]
    fn design_tags_parse() {
        for d in GcnBlockDesign::ALL {
            assert_eq!(d.as_str().parse::<GcnBlockDesign>().unwrap(), d);
        }
        assert!(matches!(
            "resnet".parse::<GcnBlockDesign>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn locality_one_hop_per_conv() {
        let s = Skeleton::builtin("h36m17").unwrap();
        let part = partition_adjacency(&s);
        let hops = s.pairwise_hops();
        let mut r = rng(13);
        let block = GcnBlock::new("b", GcnBlockDesign::Primary, 6, 1, true, 1e-5, &mut r);
        let z = Tensor::uniform(&[17, 6], 1.0, &mut r);
        let base_conv = grouped_gconv(&z, &part, &block.conv_a).unwrap();
        let base_block = gcn_block_forward(&z, &part, &block).unwrap();
        for j in 0..17 {
            let mut zp = z.clone();
            for c in 0..6 {
                zp.set(j, c, z.get(j, c) + 0.5);
            }
            let conv = grouped_gconv(&zp, &part, &block.conv_a).unwrap();
            let blk = gcn_block_forward(&zp, &part, &block).unwrap();
            for i in 0..17 {
                let conv_changed = conv.row(i) != base_conv.row(i);
                let blk_changed = blk.row(i) != base_block.row(i);
                assert_eq!(conv_changed, hops[i][j] <= 1, "conv i={i} j={j}");
                assert_eq!(blk_changed, hops[i][j] <= 2, "block i={i} j={j}");
            }
        }
    }
}
