//! Binary and ternary weight quantization with bit-packed kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlpError};

/// Fraction of the mean magnitude used as the ternary threshold.
pub const TERNARY_RATIO: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantKind {
    Binary,
    Ternary,
}

impl QuantKind {
    pub fn bits_per_weight(self) -> usize {
        match self {
            QuantKind::Binary => 1,
            QuantKind::Ternary => 2,
        }
    }
}

/// Quantized tensor stored as per-row bit planes.
///
/// The first dimension of `shape` indexes rows; the remaining dimensions are
/// flattened into columns. Bit `j` of row `r` sits in word `r * words + j / 64`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub kind: QuantKind,
    pub shape: Vec<usize>,
    pub beta: f64,
    /// Ternary threshold.
    pub rho: Option<f64>,
    /// Set bit means the weight is non-negative.
    pub sign: Vec<u64>,
    /// Ternary only: set bit means the weight is non-zero.
    pub mask: Option<Vec<u64>>,
}

fn split_shape(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&rows, rest)) => (rows, rest.iter().product()),
        None => (1, 1),
    }
}

fn words_for(cols: usize) -> usize {
    cols.div_ceil(64)
}

fn pack_rows(rows: usize, cols: usize, bit: impl Fn(usize) -> bool) -> Vec<u64> {
    let words = words_for(cols);
    let mut out = vec![0u64; rows * words];
    for r in 0..rows {
        for c in 0..cols {
            if bit(r * cols + c) {
                out[r * words + c / 64] |= 1 << (c % 64);
            }
        }
    }
    out
}

/// Running mean; exact when all inputs are equal.
fn mean_abs<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, usize) {
    values.fold((0.0, 0), |(m, k), v| (m + (v.abs() - m) / (k + 1) as f64, k + 1))
}

fn check_input(values: &[f64], shape: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(SlpError::Dimension("cannot quantize an empty tensor".into()));
    }
    let n: usize = shape.iter().product();
    if n != values.len() {
        return Err(SlpError::Dimension(format!(
            "shape {shape:?} holds {n} values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SlpError::Numerical("non-finite weight".into()));
    }
    Ok(())
}

/// `W_b = sign(W)` with `sign(0) = +1` and `beta = mean |W|`.
pub fn binarize(values: &[f64], shape: &[usize]) -> Result<QuantTensor> {
    check_input(values, shape)?;
    let (rows, cols) = split_shape(shape);
    let beta = mean_abs(values.iter()).0;
    Ok(QuantTensor {
        kind: QuantKind::Binary,
        shape: shape.to_vec(),
        beta,
        rho: None,
        sign: pack_rows(rows, cols, |i| values[i] >= 0.0),
        mask: None,
    })
}

/// Threshold `rho = 0.7 mean |W|`; weights with `|W| > rho` keep their sign,
/// the rest become zero, and `beta` is the mean magnitude of the kept ones.
/// Falls back to [`binarize`] when nothing exceeds the threshold.
pub fn ternarize(values: &[f64], shape: &[usize]) -> Result<QuantTensor> {
    check_input(values, shape)?;
    let rho = TERNARY_RATIO * mean_abs(values.iter()).0;
    let (beta, count) = mean_abs(values.iter().filter(|v| v.abs() > rho));
    if count == 0 {
        return binarize(values, shape);
    }
    let (rows, cols) = split_shape(shape);
    Ok(QuantTensor {
        kind: QuantKind::Ternary,
        shape: shape.to_vec(),
        beta,
        rho: Some(rho),
        sign: pack_rows(rows, cols, |i| values[i] >= 0.0),
        mask: Some(pack_rows(rows, cols, |i| values[i].abs() > rho)),
    })
}

pub fn quantize(kind: QuantKind, values: &[f64], shape: &[usize]) -> Result<QuantTensor> {
    match kind {
        QuantKind::Binary => binarize(values, shape),
        QuantKind::Ternary => ternarize(values, shape),
    }
}

impl QuantTensor {
    pub fn rows(&self) -> usize {
        split_shape(&self.shape).0
    }

    pub fn cols(&self) -> usize {
        split_shape(&self.shape).1
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.cols())
    }

    fn bit(plane: &[u64], words: usize, r: usize, c: usize) -> bool {
        plane[r * words + c / 64] >> (c % 64) & 1 == 1
    }

    /// Quantized levels in {-1, 0, +1}, row-major.
    pub fn levels(&self) -> Vec<i8> {
        let (rows, cols, words) = (self.rows(), self.cols(), self.words_per_row());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let nonzero = self.mask.as_ref().is_none_or(|m| Self::bit(m, words, r, c));
                let level = match (nonzero, Self::bit(&self.sign, words, r, c)) {
                    (false, _) => 0,
                    (true, true) => 1,
                    (true, false) => -1,
                };
                out.push(level);
            }
        }
        out
    }

    /// `beta * levels`, row-major.
    pub fn dequantize(&self) -> Vec<f64> {
        self.levels().into_iter().map(|l| self.beta * l as f64).collect()
    }

    /// Fraction of zero levels (always 0 for binary).
    pub fn zero_fraction(&self) -> f64 {
        match &self.mask {
            None => 0.0,
            Some(m) => 1.0 - m.iter().map(|w| w.count_ones() as f64).sum::<f64>() / self.len() as f64,
        }
    }

    /// Storage of the bit planes in bits, without row padding.
    pub fn payload_bits(&self) -> usize {
        self.len() * self.kind.bits_per_weight()
    }

    /// Bit planes as bytes, each row padded to a byte boundary.
    pub fn plane_bytes(&self, plane: &[u64]) -> Vec<u8> {
        let (rows, cols, words) = (self.rows(), self.cols(), self.words_per_row());
        let row_bytes = cols.div_ceil(8);
        let mut out = Vec::with_capacity(rows * row_bytes);
        for r in 0..rows {
            let row = &plane[r * words..(r + 1) * words];
            out.extend(row.iter().flat_map(|w| w.to_le_bytes()).take(row_bytes));
        }
        out
    }

    /// Inverse of [`QuantTensor::plane_bytes`].
    pub fn plane_from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Vec<u64>> {
        let (rows, cols) = split_shape(shape);
        let row_bytes = cols.div_ceil(8);
        if bytes.len() != rows * row_bytes {
            return Err(SlpError::Dimension(format!(
                "expected {} packed bytes, got {}",
                rows * row_bytes,
                bytes.len()
            )));
        }
        let words = words_for(cols);
        let mut out = vec![0u64; rows * words];
        for r in 0..rows {
            for (b, byte) in bytes[r * row_bytes..(r + 1) * row_bytes].iter().enumerate() {
                out[r * words + b / 8] |= (*byte as u64) << (8 * (b % 8));
            }
        }
        // clear padding bits so equality is exact
        if cols % 64 != 0 {
            let keep = (1u64 << (cols % 64)) - 1;
            for r in 0..rows {
                out[r * words + words - 1] &= keep;
            }
        }
        Ok(out)
    }
}

/// Pack signs of an arbitrary vector, one row.
fn pack_signs(x: &[f64]) -> Vec<u64> {
    pack_rows(1, x.len(), |i| x[i] >= 0.0)
}

/// `beta * W_q x` using XNOR of the weight sign bits against the sign bits of
/// `x`, accumulating magnitudes of agreeing entries.
pub fn packed_matvec(q: &QuantTensor, x: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols, words) = (q.rows(), q.cols(), q.words_per_row());
    if x.len() != cols {
        return Err(SlpError::Dimension(format!("matvec expects {cols} inputs, got {}", x.len())));
    }
    let xs = pack_signs(x);
    let mag: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let tail = if cols % 64 == 0 { u64::MAX } else { (1u64 << (cols % 64)) - 1 };
    let sum_over = |bits: u64, base: usize| -> f64 {
        let mut acc = 0.0;
        let mut b = bits;
        while b != 0 {
            acc += mag[base + b.trailing_zeros() as usize];
            b &= b - 1;
        }
        acc
    };
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut agree = 0.0;
        let mut disagree = 0.0;
        for w in 0..words {
            let valid = if w + 1 == words { tail } else { u64::MAX };
            let live = match &q.mask {
                Some(m) => m[r * words + w] & valid,
                None => valid,
            };
            let same = !(q.sign[r * words + w] ^ xs[w]) & live;
            let diff = !same & live;
            // walk whichever set is sparser
            if same.count_ones() <= diff.count_ones() {
                let s = sum_over(same, w * 64);
                agree += s;
                disagree += sum_over(live, w * 64) - s;
            } else {
                let d = sum_over(diff, w * 64);
                disagree += d;
                agree += sum_over(live, w * 64) - d;
            }
        }
        out.push(q.beta * (agree - disagree));
    }
    Ok(out)
}

/// `beta * W_q X` for `X` of shape `[cols, width]` (row-major), adding or
/// subtracting whole input rows selected by the weight bits. Output is
/// `[rows, width]`.
pub fn packed_matmul(q: &QuantTensor, x: &[f64], width: usize) -> Result<Vec<f64>> {
    let (rows, cols, words) = (q.rows(), q.cols(), q.words_per_row());
    if x.len() != cols * width {
        return Err(SlpError::Dimension(format!(
            "matmul expects {}x{width} inputs, got {}",
            cols,
            x.len()
        )));
    }
    let tail = if cols % 64 == 0 { u64::MAX } else { (1u64 << (cols % 64)) - 1 };
    let valid = |w: usize| if w + 1 == words { tail } else { u64::MAX };
    let add_rows = |acc: &mut [f64], plane: &mut dyn Iterator<Item = (usize, u64)>| {
        for (w, mut bits) in plane {
            while bits != 0 {
                let i = w * 64 + bits.trailing_zeros() as usize;
                for (a, &v) in acc.iter_mut().zip(&x[i * width..(i + 1) * width]) {
                    *a += v;
                }
                bits &= bits - 1;
            }
        }
    };
    let mut total = vec![0.0; width];
    if q.mask.is_none() {
        for row in x.chunks_exact(width) {
            for (t, &v) in total.iter_mut().zip(row) {
                *t += v;
            }
        }
    }
    let mut out = vec![0.0; rows * width];
    let (mut pos, mut neg) = (vec![0.0; width], vec![0.0; width]);
    for r in 0..rows {
        let sign = &q.sign[r * words..(r + 1) * words];
        let dst = &mut out[r * width..(r + 1) * width];
        match &q.mask {
            None => {
                pos.fill(0.0);
                let ones: u32 = (0..words).map(|w| (sign[w] & valid(w)).count_ones()).sum();
                // positives minus negatives, summing whichever set is smaller
                if 2 * ones as usize <= cols {
                    add_rows(&mut pos, &mut (0..words).map(|w| (w, sign[w] & valid(w))));
                    for ((o, &a), &t) in dst.iter_mut().zip(&pos).zip(&total) {
                        *o = q.beta * (2.0 * a - t);
                    }
                } else {
                    add_rows(&mut pos, &mut (0..words).map(|w| (w, !sign[w] & valid(w))));
                    for ((o, &a), &t) in dst.iter_mut().zip(&pos).zip(&total) {
                        *o = q.beta * (t - 2.0 * a);
                    }
                }
            }
            Some(mask) => {
                let live = &mask[r * words..(r + 1) * words];
                pos.fill(0.0);
                neg.fill(0.0);
                add_rows(&mut pos, &mut (0..words).map(|w| (w, sign[w] & live[w] & valid(w))));
                add_rows(&mut neg, &mut (0..words).map(|w| (w, !sign[w] & live[w] & valid(w))));
                for ((o, &a), &b) in dst.iter_mut().zip(&pos).zip(&neg) {
                    *o = q.beta * (a - b);
                }
            }
        }
    }
    Ok(out)
}

/// Straight-through gradient: pass where the latent weight lies in [-1, 1].
pub fn ste_backward(grad_out: &[f64], latent: &[f64]) -> Vec<f64> {
    grad_out
        .iter()
        .zip(latent)
        .map(|(&g, &w)| if w.abs() <= 1.0 { g } else { 0.0 })
        .collect()
}

/// Inference memory of a model's trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryReport {
    pub fp_params: usize,
    pub quantized_params: usize,
    pub bits_per_quantized: usize,
    pub megabytes: f64,
    pub ratio_vs_fp32: f64,
}

const MB: f64 = 8.0 * 1024.0 * 1024.0;

/// `(32 fp + b q) / 8 / 2^20` megabytes, with `b` bits per quantized weight.
pub fn memory_estimate(fp_params: usize, quantized_params: usize, kind: Option<QuantKind>) -> MemoryReport {
    let bits = kind.map_or(32, QuantKind::bits_per_weight);
    let total_bits = (32 * fp_params + bits * quantized_params) as f64;
    let fp32_bits = (32 * (fp_params + quantized_params)) as f64;
    MemoryReport {
        fp_params,
        quantized_params,
        bits_per_quantized: bits,
        megabytes: total_bits / MB,
        ratio_vs_fp32: fp32_bits / total_bits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{stream_rng, Stream};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn dense(q: &QuantTensor, x: &[f64], width: usize) -> Vec<f64> {
        let (rows, cols) = (q.rows(), q.cols());
        let w = q.dequantize();
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for c in 0..cols {
                for p in 0..width {
                    out[r * width + p] += w[r * cols + c] * x[c * width + p];
                }
            }
        }
        out
    }

    #[test]
    fn binarize_examples() {
        let c = 0.37;
        let q = binarize(&[c, -c, c], &[3]).unwrap();
        assert_eq!(q.levels(), vec![1, -1, 1]);
        assert_relative_eq!(q.beta, c);
        let q = binarize(&[0.5, -0.3, 0.8, -0.4], &[4]).unwrap();
        assert_eq!(q.levels(), vec![1, -1, 1, -1]);
        assert_relative_eq!(q.beta, 0.5);
        assert_eq!(binarize(&[0.0], &[1]).unwrap().levels(), vec![1]);
        assert!(matches!(binarize(&[], &[0]), Err(SlpError::Dimension(_))));
    }

    #[test]
    fn binarize_is_exhaustively_optimal() {
        let mut rng = stream_rng(40, Stream::Init, 0);
        for _ in 0..50 {
            let n = rng.random_range(1..=8);
            let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let q = binarize(&w, &[n]).unwrap();
            let err = |beta: f64, s: &[f64]| w.iter().zip(s).map(|(a, b)| (a - beta * b).powi(2)).sum::<f64>();
            let ours = err(q.beta, &q.levels().iter().map(|&l| l as f64).collect::<Vec<_>>());
            let mut best = f64::INFINITY;
            for pattern in 0..(1u32 << n) {
                let s: Vec<f64> = (0..n).map(|i| if pattern >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
                let beta = w.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                best = best.min(err(beta, &s));
            }
            assert!(ours <= best + 1e-12 * (1.0 + best));
        }
    }

    #[test]
    fn ternarize_examples() {
        let q = ternarize(&[0.2, -0.2, 0.2, 0.2], &[4]).unwrap();
        assert_relative_eq!(q.rho.unwrap(), 0.14, epsilon = 1e-15);
        assert_eq!(q.levels(), vec![1, -1, 1, 1]);
        assert_relative_eq!(q.beta, 0.2, epsilon = 1e-15);

        let q = ternarize(&[0.8, -0.05, 0.6, -0.9], &[4]).unwrap();
        assert_relative_eq!(q.rho.unwrap(), 0.41125, epsilon = 1e-12);
        assert_eq!(q.levels(), vec![1, 0, 1, -1]);
        assert_relative_eq!(q.beta, 2.3 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(q.zero_fraction(), 0.25);
    }

    #[test]
    fn ternarize_independent_reimplementation() {
        let mut rng = stream_rng(41, Stream::Init, 0);
        for _ in 0..100 {
            let n = rng.random_range(1..200);
            let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let q = ternarize(&w, &[n]).unwrap();
            let mut mean = 0.0;
            for (k, v) in w.iter().enumerate() {
                mean += (v.abs() - mean) / (k + 1) as f64;
            }
            let rho = 0.7 * mean;
            let mut levels = Vec::new();
            let mut kept = Vec::new();
            for v in &w {
                if v.abs() > rho {
                    levels.push(if *v >= 0.0 { 1i8 } else { -1 });
                    kept.push(v.abs());
                } else {
                    levels.push(0);
                }
            }
            let mut beta = 0.0;
            for (k, v) in kept.iter().enumerate() {
                beta += (v - beta) / (k + 1) as f64;
            }
            assert_eq!(q.rho.unwrap().to_bits(), rho.to_bits());
            assert_eq!(q.beta.to_bits(), beta.to_bits());
            assert_eq!(q.levels(), levels);
        }
    }

    #[test]
    fn requantizing_is_idempotent() {
        let mut rng = stream_rng(42, Stream::Init, 0);
        let w: Vec<f64> = (0..150).map(|_| rng.sample(StandardNormal)).collect();
        let q = binarize(&w, &[10, 15]).unwrap();
        let again = binarize(&q.dequantize(), &[10, 15]).unwrap();
        assert_eq!(q.sign, again.sign);
        assert_eq!(q.beta.to_bits(), again.beta.to_bits());
        let t = ternarize(&w, &[10, 15]).unwrap();
        let t2 = ternarize(&t.dequantize(), &[10, 15]).unwrap();
        assert_eq!(t.levels(), t2.levels());
    }

    #[test]
    fn plane_bytes_round_trip() {
        let mut rng = stream_rng(43, Stream::Init, 0);
        for shape in [vec![3, 70], vec![5, 2, 3, 3], vec![1, 64], vec![7]] {
            let n: usize = shape.iter().product();
            let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let q = ternarize(&w, &shape).unwrap();
            let bytes = q.plane_bytes(&q.sign);
            assert_eq!(bytes.len(), q.rows() * q.cols().div_ceil(8));
            assert_eq!(QuantTensor::plane_from_bytes(&shape, &bytes).unwrap(), q.sign);
            let m = q.mask.as_ref().unwrap();
            assert_eq!(&QuantTensor::plane_from_bytes(&shape, &q.plane_bytes(m)).unwrap(), m);
        }
    }

    #[test]
    fn matvec_examples() {
        let q = binarize(&[0.5, -1.0, 0.25, 2.0, -0.5, 1.0], &[2, 3]).unwrap();
        let beta = q.beta;
        let y = packed_matvec(&q, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(y, vec![-beta, -beta]);
        let ones = binarize(&[1.0; 4], &[1, 4]).unwrap();
        let x = [0.3, -2.0, 5.0, 0.1];
        assert_relative_eq!(packed_matvec(&ones, &x).unwrap()[0], x.iter().sum::<f64>(), epsilon = 1e-12);
        assert!(packed_matvec(&q, &[1.0]).is_err());
    }

    #[test]
    fn kernels_match_dense_reference() {
        let mut rng = stream_rng(44, Stream::Init, 0);
        for case in 0..1000 {
            let rows = rng.random_range(1..12);
            let cols = rng.random_range(1..150);
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
            let q = if case % 2 == 0 {
                binarize(&w, &[rows, cols]).unwrap()
            } else {
                ternarize(&w, &[rows, cols]).unwrap()
            };
            let x: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
            let y = packed_matvec(&q, &x).unwrap();
            for (a, b) in y.iter().zip(dense(&q, &x, 1)) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
            let width = rng.random_range(1..9);
            let xm: Vec<f64> = (0..cols * width).map(|_| rng.sample(StandardNormal)).collect();
            let ym = packed_matmul(&q, &xm, width).unwrap();
            for (a, b) in ym.iter().zip(dense(&q, &xm, width)) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn ste_clips() {
        assert_eq!(ste_backward(&[2.0, 2.0, 2.0], &[0.3, 1.7, -1.0]), vec![2.0, 0.0, 2.0]);
    }

    #[test]
    fn memory_formula() {
        let fp = memory_estimate(1000, 0, None);
        assert_relative_eq!(fp.megabytes * 1024.0 * 1024.0, 4000.0);
        assert_relative_eq!(fp.ratio_vs_fp32, 1.0);
        let b = memory_estimate(100, 3000, Some(QuantKind::Binary));
        assert_relative_eq!(b.megabytes, (3200.0 + 3000.0) / 8.0 / 1048576.0);
        let t = memory_estimate(100, 3000, Some(QuantKind::Ternary));
        assert!(b.megabytes < t.megabytes && t.megabytes < memory_estimate(3100, 0, None).megabytes);
    }
}
