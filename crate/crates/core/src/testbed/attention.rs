//! A one-layer cross-attention readout over image patches with closed-form
//! gradients of a scalar loss with respect to the attention weights.

use rand::Rng;

use crate::attribution::AttentionTensors;
use crate::backends::AttnBackend;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Patches per side; `J = GRID * GRID` keys.
pub const GRID: usize = 16;
/// Patch features: mean R, G, B, saturation, constant.
const FEATURES: usize = 5;

pub struct ToyAttentionPolicy {
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
    queries: Vec<Vec<Vec<f64>>>,
    wk: Vec<Vec<[f64; FEATURES]>>,
    wv: Vec<Vec<[f64; FEATURES]>>,
    readout: Vec<Vec<f64>>,
}

/// Per-head attention `[h][i][j]` and values `[h][j][d]` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub attention: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
}

fn patch_features(image: &Image) -> Result<Vec<[f64; FEATURES]>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < GRID || h < GRID {
        return Err(Error::Shape(format!("image {w}x{h} smaller than the {GRID}x{GRID} patch grid")));
    }
    let mut out = Vec::with_capacity(GRID * GRID);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let (x0, x1) = (gx * w / GRID, (gx + 1) * w / GRID);
            let (y0, y1) = (gy * h / GRID, (gy + 1) * h / GRID);
            let mut sum = [0.0; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = image.get(x as u32, y as u32);
                    for c in 0..3 {
                        sum[c] += p[c] as f64 / 255.0;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let m = sum.map(|s| s / n);
            let max = m.iter().cloned().fold(0.0, f64::max);
            let min = m.iter().cloned().fold(1.0, f64::min);
            let sat = if max > 0.0 { (max - min) / max } else { 0.0 };
            out.push([m[0], m[1], m[2], sat, 1.0]);
        }
    }
    Ok(out)
}

impl ToyAttentionPolicy {
    pub fn new(heads: usize, tokens: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::rng_for(rng::derive(seed, "toy-attention", 0));
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-1.0..1.0)).collect() };
        let queries = (0..heads).map(|_| (0..tokens).map(|_| draw(dim)).collect()).collect();
        let mut mat = |scale: f64| -> Vec<Vec<[f64; FEATURES]>> {
            (0..heads)
                .map(|_| {
                    (0..dim)
                        .map(|_| {
                            let row = draw(FEATURES);
                            std::array::from_fn(|f| row[f] * scale)
                        })
                        .collect()
                })
                .collect()
        };
        let wk = mat(4.0);
        let wv = mat(1.0);
        let readout = (0..heads).map(|_| draw(dim)).collect();
        ToyAttentionPolicy {
            heads,
            tokens,
            dim,
            queries,
            wk,
            wv,
            readout,
        }
    }

    pub fn forward(&self, image: &Image) -> Result<Forward> {
        let feats = patch_features(image)?;
        let project = |w: &[[f64; FEATURES]], f: &[f64; FEATURES]| -> Vec<f64> {
            w.iter().map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum()).collect()
        };
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut attention = Vec::with_capacity(self.heads);
        let mut values = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let keys: Vec<Vec<f64>> = feats.iter().map(|f| project(&self.wk[h], f)).collect();
            values.push(feats.iter().map(|f| project(&self.wv[h], f)).collect::<Vec<_>>());
            let rows = self.queries[h]
                .iter()
                .map(|q| {
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
                        .collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    exps.into_iter().map(|e| e / z).collect()
                })
                .collect();
            attention.push(rows);
        }
        Ok(Forward { attention, values })
    }

    fn outputs(&self, attention: &[Vec<Vec<f64>>], values: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
        (0..self.heads)
            .map(|h| {
                attention[h]
                    .iter()
                    .map(|row| {
                        (0..self.dim)
                            .map(|d| row.iter().zip(&values[h]).map(|(a, v)| a * v[d]).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// `L = sum_h sum_i <u_h, tanh(o_i^h)>` with `o_i^h = sum_j A_ij^h v_j^h`,
    /// treating the attention entries as free variables.
    pub fn loss(&self, attention: &[Vec<Vec<f64>>], values: &[Vec<Vec<f64>>]) -> f64 {
        let o = self.outputs(attention, values);
        (0..self.heads)
            .map(|h| {
                o[h].iter()
                    .map(|oi| oi.iter().zip(&self.readout[h]).map(|(x, u)| u * x.tanh()).sum::<f64>())
                    .sum::<f64>()
            })
            .sum()
    }

    /// `dL/dA_ij^h = sum_d u_d (1 - tanh^2(o_id)) v_jd`, shaped `[h][i][j]`.
    pub fn loss_gradient(&self, attention: &[Vec<Vec<f64>>], values: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
        let o = self.outputs(attention, values);
        (0..self.heads)
            .map(|h| {
                o[h].iter()
                    .map(|oi| {
                        let w: Vec<f64> = oi
                            .iter()
                            .zip(&self.readout[h])
                            .map(|(x, u)| u * (1.0 - x.tanh().powi(2)))
                            .collect();
                        values[h]
                            .iter()
                            .map(|v| v.iter().zip(&w).map(|(a, b)| a * b).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Token-averaged attention and gradients as `H x J` tensors.
    pub fn tensors(&self, image: &Image, layer: u32) -> Result<AttentionTensors> {
        let fwd = self.forward(image)?;
        let grad = self.loss_gradient(&fwd.attention, &fwd.values);
        let j = GRID * GRID;
        let mean = |t: &[Vec<Vec<f64>>]| -> Vec<f64> {
            let mut out = vec![0.0; self.heads * j];
            for (h, rows) in t.iter().enumerate() {
                for row in rows {
                    for (k, v) in row.iter().enumerate() {
                        out[h * j + k] += v / self.tokens as f64;
                    }
                }
            }
            out
        };
        Ok(AttentionTensors {
            h: self.heads,
            j,
            layer,
            a: mean(&fwd.attention),
            da: mean(&grad),
        })
    }
}

impl AttnBackend for ToyAttentionPolicy {
    fn attention(&self, image: &Image, _instruction: &str, layer: u32) -> Result<AttentionTensors> {
        self.tensors(image, layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_are_distributions() {
        let p = ToyAttentionPolicy::new(2, 3, 4, 1);
        let img = Image::filled(32, 32, [100, 150, 200]);
        let f = p.forward(&img).unwrap();
        for row in f.attention.iter().flatten() {
            assert_eq!(row.len(), GRID * GRID);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let t = p.tensors(&img, 6).unwrap();
        assert!(t.validate().is_ok());
    }
}
