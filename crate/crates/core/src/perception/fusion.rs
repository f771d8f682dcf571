//! Parameter-free attentive fusion.
//!
//! At every spatial location the ego feature vector is the query; keys and
//! values are the feature vectors of all agents of the scene (ego included).
//! Scores are scaled dot products `q . f_j / sqrt(C)`, normalized by softmax,
//! and the output is the score-weighted sum of the agent vectors.

use v2v_nn::functional::softmax_in_place;
use v2v_nn::{CustomOp, Graph, Tensor, Var};

use crate::error::{CoreError, Result};

/// Rows `start..start + len` of a stacked feature tensor form one scene,
/// the first row being the ego vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Group {
    pub start: usize,
    pub len: usize,
}

impl Group {
    /// Consecutive groups for the given agent counts.
    pub fn consecutive(counts: &[usize]) -> Vec<Group> {
        let mut start = 0;
        counts
            .iter()
            .map(|&len| {
                let g = Group { start, len };
                start += len;
                g
            })
            .collect()
    }
}

fn check(shape: &[usize], groups: &[Group]) -> Result<(usize, usize)> {
    if shape.len() != 4 {
        return Err(CoreError::Shape(shape.to_vec(), vec![0, 0, 0, 0]));
    }
    let rows = shape[0];
    for g in groups {
        if g.len == 0 || g.start + g.len > rows {
            return Err(CoreError::Config(format!(
                "fusion group {}..{} outside {rows} feature maps",
                g.start,
                g.start + g.len
            )));
        }
    }
    Ok((shape[1], shape[2] * shape[3]))
}

/// Returns the fused maps `[S, C, H, W]` and the attention coefficients,
/// laid out per group as `[location][agent]`.
fn forward(feats: &Tensor, groups: &[Group]) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let (c, hw) = check(feats.shape(), groups)?;
    let s = feats.shape();
    let data = feats.data();
    let map = c * hw;
    let inv_sqrt_c = (c as f64).sqrt().recip();
    let mut out = vec![0.0; groups.len() * map];
    let mut attn_all = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let base = |j: usize| (g.start + j) * map;
        let mut attn = vec![0.0; hw * g.len];
        let o = &mut out[gi * map..(gi + 1) * map];
        for p in 0..hw {
            let a = &mut attn[p * g.len..(p + 1) * g.len];
            for (j, aj) in a.iter_mut().enumerate() {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += data[base(0) + ch * hw + p] * data[base(j) + ch * hw + p];
                }
                *aj = dot * inv_sqrt_c;
            }
            softmax_in_place(a);
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &aj) in a.iter().enumerate() {
                    acc += aj * data[base(j) + ch * hw + p];
                }
                o[ch * hw + p] = acc;
            }
        }
        attn_all.push(attn);
    }
    Ok((Tensor::new(&[groups.len(), s[1], s[2], s[3]], out)?, attn_all))
}

struct FusionOp {
    groups: Vec<Group>,
    attn: Vec<Vec<f64>>,
}

impl CustomOp for FusionOp {
    fn name(&self) -> &'static str {
        "attentive_fusion"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let feats = inputs[0];
        let s = feats.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let map = c * hw;
        let data = feats.data();
        let gd = grad.data();
        let inv_sqrt_c = (c as f64).sqrt().recip();
        let mut dx = vec![0.0; data.len()];
        for (gi, g) in self.groups.iter().enumerate() {
            let base = |j: usize| (g.start + j) * map;
            let go = &gd[gi * map..(gi + 1) * map];
            let mut da = vec![0.0; g.len];
            let mut ds = vec![0.0; g.len];
            for p in 0..hw {
                let a = &self.attn[gi][p * g.len..(p + 1) * g.len];
                // value path and dL/da_j = g . f_j
                for j in 0..g.len {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let gv = go[ch * hw + p];
                        acc += gv * data[base(j) + ch * hw + p];
                        dx[base(j) + ch * hw + p] += a[j] * gv;
                    }
                    da[j] = acc;
                }
                let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                for j in 0..g.len {
                    ds[j] = a[j] * (da[j] - mean) * inv_sqrt_c;
                }
                // score path: s_j = q . f_j / sqrt(C), q = f_0
                for ch in 0..c {
                    let q = data[base(0) + ch * hw + p];
                    let mut dq = 0.0;
                    for j in 0..g.len {
                        dx[base(j) + ch * hw + p] += ds[j] * q;
                        dq += ds[j] * data[base(j) + ch * hw + p];
                    }
                    dx[base(0) + ch * hw + p] += dq;
                }
            }
        }
        vec![Tensor::new(s, dx).ok()]
    }
}

/// Fuses each group of `feats` (`[A, C, H, W]`) into one map.
pub fn fuse_attentive(g: &mut Graph, feats: Var, groups: &[Group]) -> Result<Var> {
    let (out, attn) = forward(g.value(feats), groups)?;
    Ok(g.custom(
        &[feats],
        out,
        Box::new(FusionOp {
            groups: groups.to_vec(),
            attn,
        }),
    ))
}

/// Tensor-level fusion of one scene: `ego` and every `shared` map are
/// `[C, H, W]`. With no shared maps the ego map is returned unchanged.
pub fn fuse_maps(ego: &Tensor, shared: &[Tensor]) -> Result<Tensor> {
    if shared.is_empty() {
        return Ok(ego.clone());
    }
    let (stacked, _) = stack_scene(ego, shared)?;
    let (out, _) = forward(&stacked, &[Group { start: 0, len: shared.len() + 1 }])?;
    Ok(out.reshape(ego.shape())?)
}

/// Attention coefficients of one scene, `[location][agent]`.
pub fn attention_weights(ego: &Tensor, shared: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let (stacked, n) = stack_scene(ego, shared)?;
    let (_, attn) = forward(&stacked, &[Group { start: 0, len: n }])?;
    Ok(attn[0].chunks(n).map(|c| c.to_vec()).collect())
}

fn stack_scene(ego: &Tensor, shared: &[Tensor]) -> Result<(Tensor, usize)> {
    if ego.shape().len() != 3 {
        return Err(CoreError::Shape(ego.shape().to_vec(), vec![0, 0, 0]));
    }
    for s in shared {
        if s.shape() != ego.shape() {
            return Err(CoreError::Shape(ego.shape().to_vec(), s.shape().to_vec()));
        }
    }
    let mut refs = vec![ego];
    refs.extend(shared.iter());
    Ok((Tensor::stack(&refs)?, refs.len()))
}
