//! Softbox geometry, Otsu thresholding, and the composed object mask.
//!
//! The object mask is the elementwise product of a rasterized user box and
//! the Otsu binarization of a normalized attention map. The box filters out
//! spurious high-attention regions in early steps when the object has not
//! yet emerged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// User-supplied spatial constraint: a fractional rectangle
/// [h1, h2, w1, w2] (rows then columns, half-open after flooring) or an
/// explicit bitmap matching the attention grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Softbox {
    Rect { h1: f64, h2: f64, w1: f64, w2: f64 },
    Bitmap(Tensor),
}

impl Softbox {
    pub fn rect(h1: f64, h2: f64, w1: f64, w2: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&h1)
            && (0.0..=1.0).contains(&h2)
            && (0.0..=1.0).contains(&w1)
            && (0.0..=1.0).contains(&w2)
            && h1 <= h2
            && w1 <= w2;
        if !ok {
            return Err(Error::Validation {
                field: "softbox".into(),
                msg: format!("rect [{h1}, {h2}, {w1}, {w2}] must be ordered fractions in [0, 1]"),
            });
        }
        Ok(Softbox::Rect { h1, h2, w1, w2 })
    }

    /// Whole-image box.
    pub fn full() -> Self {
        Softbox::Rect {
            h1: 0.0,
            h2: 1.0,
            w1: 0.0,
            w2: 1.0,
        }
    }
}

/// Binary object mask on the flattened attention grid.
#[derive(Clone, Debug)]
pub struct ObjectMask {
    pub values: Tensor,
    pub degenerate: bool,
}

/// Flatten a Softbox onto a g x g grid, row-major. RECT covers rows
/// [floor(h1*g), floor(h2*g)) and cols [floor(w1*g), floor(w2*g)).
pub fn rasterize(softbox: &Softbox, g: usize) -> Result<Tensor> {
    assert!(g >= 1, "grid side must be >= 1");
    match softbox {
        Softbox::Rect { h1, h2, w1, w2 } => {
            let r0 = (h1 * g as f64).floor() as usize;
            let r1 = (h2 * g as f64).floor() as usize;
            let c0 = (w1 * g as f64).floor() as usize;
            let c1 = (w2 * g as f64).floor() as usize;
            let mut data = vec![0.0f32; g * g];
            for r in r0..r1.min(g) {
                for c in c0..c1.min(g) {
                    data[r * g + c] = 1.0;
                }
            }
            Tensor::new(vec![g * g], data)
        }
        Softbox::Bitmap(bm) => {
            if bm.shape() != [g, g] {
                return Err(Error::ShapeMismatch {
                    op: "rasterize",
                    lhs: bm.shape().to_vec(),
                    rhs: vec![g, g],
                });
            }
            Tensor::new(vec![g * g], bm.data().to_vec())
        }
    }
}

/// Otsu result: the real-valued cut, its histogram bucket index, the
/// binarized map, and whether the histogram had only one usable class.
#[derive(Clone, Debug)]
pub struct OtsuResult {
    pub threshold: f32,
    pub threshold_index: usize,
    pub binary: Tensor,
    pub degenerate: bool,
    pub class_counts: (usize, usize),
    pub class_means: (f64, f64),
}

fn bucket(v: f32, bins: usize) -> usize {
    ((v as f64 * bins as f64) as usize).min(bins - 1)
}

/// Histogram Otsu: pick the bucket boundary maximizing between-class
/// variance w0*w1*(mu0-mu1)^2, ties broken toward the lowest index.
/// Binarization is a strict `>` against the boundary value (k+1)/bins.
pub fn otsu_threshold(map: &Tensor, bins: usize) -> Result<OtsuResult> {
    if map.is_empty() {
        return Err(Error::Validation {
            field: "map".into(),
            msg: "empty map".into(),
        });
    }
    for &v in map.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation {
                field: "map".into(),
                msg: format!("value {v} outside [0, 1]; caller must normalize"),
            });
        }
    }
    let n = map.len();
    let mut hist = vec![0usize; bins];
    for &v in map.data() {
        hist[bucket(v, bins)] += 1;
    }

    // Bucket-center first moments; prefix scan gives every split in O(bins).
    let center = |i: usize| (i as f64 + 0.5) / bins as f64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * center(i))
        .sum();

    let mut best: Option<(usize, f64)> = None;
    let mut count0 = 0usize;
    let mut sum0 = 0.0f64;
    for k in 0..bins - 1 {
        count0 += hist[k];
        sum0 += hist[k] as f64 * center(k);
        let count1 = n - count0;
        if count0 == 0 || count1 == 0 {
            continue;
        }
        let mu0 = sum0 / count0 as f64;
        let mu1 = (total_sum - sum0) / count1 as f64;
        let var = count0 as f64 * count1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if best.map_or(true, |(_, bv)| var > bv) {
            best = Some((k, var));
        }
    }

    match best {
        None => Ok(OtsuResult {
            threshold: 0.0,
            threshold_index: 0,
            binary: Tensor::zeros(vec![n]),
            degenerate: true,
            class_counts: (n, 0),
            class_means: (total_sum / n as f64, 0.0),
        }),
        Some((k, _)) => {
            let threshold = (k as f32 + 1.0) / bins as f32;
            let data: Vec<f32> = map
                .data()
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect();
            let ones = data.iter().filter(|v| **v == 1.0).count();
            let mean_of = |pred: &dyn Fn(f32) -> bool| {
                let vals: Vec<f64> = map
                    .data()
                    .iter()
                    .filter(|v| pred(**v))
                    .map(|v| *v as f64)
                    .collect();
                if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            Ok(OtsuResult {
                threshold,
                threshold_index: k,
                binary: Tensor::new(vec![n], data)?,
                degenerate: false,
                class_counts: (n - ones, ones),
                class_means: (mean_of(&|v| v <= threshold), mean_of(&|v| v > threshold)),
            })
        }
    }
}

/// Composed mask: rasterized box AND Otsu binarization of the map.
pub fn object_mask(attention_map: &Tensor, softbox: &Softbox, g: usize) -> Result<ObjectMask> {
    let raster = rasterize(softbox, g)?;
    if attention_map.len() != raster.len() {
        return Err(Error::ShapeMismatch {
            op: "object_mask",
            lhs: attention_map.shape().to_vec(),
            rhs: raster.shape().to_vec(),
        });
    }
    let otsu = otsu_threshold(attention_map, 256)?;
    let data: Vec<f32> = raster
        .data()
        .iter()
        .zip(otsu.binary.data())
        .map(|(b, o)| b * o)
        .collect();
    Ok(ObjectMask {
        values: Tensor::new(vec![attention_map.len()], data)?,
        degenerate: otsu.degenerate,
    })
}
