//! Dense row-major f32 tensor and the PSPT on-disk format.
//!
//! Accumulation order is fixed (row-major, left to right) so repeated runs
//! are bit-identical. With the `parallel` feature, work splits across output
//! rows; each row's accumulation order is unchanged, so results stay
//! bitwise equal to the sequential path.

use std::io::{Read as _, Write as _};
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PSPT";
pub const FORMAT_VERSION: u32 = 1;

/// Dense row-major tensor of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows / columns for a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.shape[1];
        &mut self.data[i * n..(i + 1) * n]
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Matrix product `a[m x k] * b[k x n]`, deterministic accumulation
/// (row-major, left to right over the inner index).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.expect_2d("matmul")?;
    let (kb, n) = b.expect_2d("matmul")?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];

    let fill_row = |i: usize, row_out: &mut [f32]| {
        let a_row = &a.data[i * ka..(i + 1) * ka];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };

    #[cfg(feature = "parallel")]
    out.par_chunks_mut(n).enumerate().for_each(|(i, r)| fill_row(i, r));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(n).enumerate().for_each(|(i, r)| fill_row(i, r));

    Tensor::new(vec![m, n], out)
}

/// Row-wise stable softmax of `logits / scale`. Negative infinity marks a
/// masked slot and maps to exactly zero weight. A row with no finite entry
/// is an error.
pub fn row_softmax(logits: &Tensor, scale: f32) -> Result<Tensor> {
    assert!(scale > 0.0, "softmax scale must be positive");
    let (m, n) = logits.expect_2d("row_softmax")?;
    let mut out = vec![0.0f32; m * n];

    // Validate support up front; the parallel loop then cannot fail.
    for i in 0..m {
        if logits.row(i).iter().all(|v| *v == f32::NEG_INFINITY) {
            return Err(Error::EmptyAttentionSupport);
        }
    }

    let fill_row = |i: usize, row_out: &mut [f32]| {
        let row = logits.row(i);
        let mut max = f32::NEG_INFINITY;
        for &v in row {
            let s = v / scale;
            if s > max {
                max = s;
            }
        }
        let mut sum = 0.0f32;
        for (o, &v) in row_out.iter_mut().zip(row) {
            let e = if v == f32::NEG_INFINITY {
                0.0
            } else {
                (v / scale - max).exp()
            };
            *o = e;
            sum += e;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    };

    #[cfg(feature = "parallel")]
    out.par_chunks_mut(n).enumerate().for_each(|(i, r)| fill_row(i, r));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(n).enumerate().for_each(|(i, r)| fill_row(i, r));

    Tensor::new(vec![m, n], out)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serialize to the PSPT format: magic "PSPT", u32 version, u32 ndim,
/// u32 dims, then f32 data, all little-endian, no padding.
pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * t.shape.len() + 4 * t.data.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    read_tensor_bytes(&bytes)
}

pub fn read_tensor_bytes(bytes: &[u8]) -> Result<Tensor> {
    let take4 = |off: usize, what: &str| -> Result<[u8; 4]> {
        bytes
            .get(off..off + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or_else(|| Error::Format {
                offset: off as u64,
                msg: format!("truncated {what}"),
            })
    };

    if take4(0, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected PSPT".into(),
        });
    }
    let version = u32::from_le_bytes(take4(4, "version")?);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let ndim = u32::from_le_bytes(take4(8, "ndim")?) as usize;
    if ndim > 8 {
        return Err(Error::Format {
            offset: 8,
            msg: format!("dim overflow: ndim {ndim} exceeds 8"),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut off = 12;
    let mut count: usize = 1;
    for _ in 0..ndim {
        let d = u32::from_le_bytes(take4(off, "dims")?) as usize;
        count = count.checked_mul(d).ok_or(Error::Format {
            offset: off as u64,
            msg: "dim overflow: element count exceeds usize".into(),
        })?;
        shape.push(d);
        off += 4;
    }
    let need = count * 4;
    let payload = bytes.get(off..off + need).ok_or(Error::Format {
        offset: bytes.len() as u64,
        msg: format!("truncated payload: need {need} bytes at offset {off}"),
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    // Naive triple-loop oracle with the same accumulation order.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.rows(), a.cols());
        let n = b.cols();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    out[i * n + j] += a.at2(i, l) * b.at2(l, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = t2(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_oracle_on_random_instances() {
        let mut rng = crate::rng::CounterRng::new(99, 0);
        for _ in 0..100 {
            let a = t2(5, 7, &rng.normals(35));
            let b = t2(7, 3, &rng.normals(21));
            let got = matmul(&a, &b).unwrap();
            let want = matmul_oracle(&a, &b);
            assert_eq!(got.data(), want.data(), "bitwise mismatch vs naive oracle");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let l = t2(1, 2, &[0.0, 0.0]);
        assert_eq!(row_softmax(&l, 1.0).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_slot_is_exact_zero() {
        let l = t2(1, 2, &[0.0, f32::NEG_INFINITY]);
        assert_eq!(row_softmax(&l, 1.0).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let l = t2(1, 2, &[(2.0f32).ln(), 0.0]);
        let w = row_softmax(&l, 1.0).unwrap();
        assert!((w.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((w.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let l = t2(1, 2, &[f32::NEG_INFINITY, f32::NEG_INFINITY]);
        assert!(matches!(
            row_softmax(&l, 1.0),
            Err(Error::EmptyAttentionSupport)
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = crate::rng::CounterRng::new(3, 0);
        for _ in 0..100 {
            let l = t2(1, 8, &rng.normals(8));
            let w = row_softmax(&l, 2.0).unwrap();
            let sum: f32 = w.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);

            let shifted = t2(1, 8, &l.data().iter().map(|v| v + 3.5).collect::<Vec<_>>());
            let ws = row_softmax(&shifted, 2.0).unwrap();
            for (a, b) in w.data().iter().zip(ws.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pspt_round_trip_2x2() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pspt");
        let t = t2(2, 2, &[1.5, -2.25, 0.0, 7.0]);
        write_tensor(&t, &p).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn pspt_scalar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pspt");
        let t = Tensor::scalar(3.125);
        write_tensor(&t, &p).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data(), &[3.125]);
    }

    #[test]
    fn pspt_bytes_stable_across_writes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::CounterRng::new(11, 0);
        let t = Tensor::new(vec![3, 77, 8], rng.normals(3 * 77 * 8)).unwrap();
        let p1 = dir.path().join("a.pspt");
        let p2 = dir.path().join("b.pspt");
        write_tensor(&t, &p1).unwrap();
        write_tensor(&t, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn pspt_bad_magic_reports_offset() {
        let err = read_tensor_bytes(b"NOPE\x01\x00\x00\x00").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("wrong error {e}"),
        }
    }

    #[test]
    fn pspt_truncated_payload_reports_offset() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PSPT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&0f32.to_le_bytes()); // only 1 of 4 floats
        let err = read_tensor_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
