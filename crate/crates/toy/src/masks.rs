use crate::config::Arch;

/// Row-major boolean matrix; `get(q, k)` says whether query `q` may attend
/// to key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl MaskMatrix {
    fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..rows).flat_map(|q| (0..cols).map(move |k| (q, k))).map(|(q, k)| f(q, k)).collect();
        MaskMatrix { rows, cols, data }
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.data[q * self.cols + k]
    }

    /// Rows as strings of `0`/`1`.
    pub fn rows_as_bits(&self) -> Vec<String> {
        (0..self.rows)
            .map(|q| (0..self.cols).map(|k| if self.get(q, k) { '1' } else { '0' }).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionMaskSet {
    EncoderDecoder { encoder: MaskMatrix, decoder: MaskMatrix, cross: MaskMatrix },
    /// One mask over `inputs ++ targets` positions.
    PrefixDecoder { mask: MaskMatrix },
}

pub fn causal_mask(len: usize) -> MaskMatrix {
    MaskMatrix::from_fn(len, len, |q, k| k <= q)
}

pub fn prefix_mask(in_len: usize, tgt_len: usize) -> MaskMatrix {
    let n = in_len + tgt_len;
    MaskMatrix::from_fn(n, n, |q, k| k < in_len || k <= q)
}

pub fn build_attention_masks(arch: Arch, in_len: usize, tgt_len: usize) -> AttentionMaskSet {
    match arch {
        Arch::EncoderDecoder => AttentionMaskSet::EncoderDecoder {
            encoder: MaskMatrix::from_fn(in_len, in_len, |_, _| true),
            decoder: causal_mask(tgt_len),
            cross: MaskMatrix::from_fn(tgt_len, in_len, |_, _| true),
        },
        Arch::PrefixLmDecoder => AttentionMaskSet::PrefixDecoder { mask: prefix_mask(in_len, tgt_len) },
    }
}

/// Bucket for a key at relative offset `rel = key - query`, T5 style:
/// exact buckets for short distances, log-spaced beyond, and separate
/// halves for the two directions when `bidirectional`.
pub fn relative_bucket(rel: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut ret = 0i64;
    let mut n = -rel;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            ret += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = buckets / 2;
    if n < max_exact {
        return (ret + n) as usize;
    }
    let scaled = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (scaled * (buckets - max_exact) as f64) as i64;
    (ret + large.min(buckets - 1)) as usize
}

/// Bucket grid for `queries x keys`, row-major.
pub fn bucket_grid(queries: usize, keys: usize, bidirectional: bool, num_buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(queries * keys);
    for q in 0..queries {
        for k in 0..keys {
            out.push(relative_bucket(k as i64 - q as i64, bidirectional, num_buckets, max_distance));
        }
    }
    out
}
