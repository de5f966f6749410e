//! Input embedding: turn symbol sequences or image patches into the D x N
//! matrix the blocks consume, and attach position information.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learned per-symbol embedding vectors, one column per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    /// D x W table; column w embeds symbol w.
    pub table: Tensor,
}

impl TokenTable {
    pub fn new(table: Tensor) -> Self {
        TokenTable { table }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.cols()
    }

    pub fn dim(&self) -> usize {
        self.table.rows()
    }
}

/// Dense H x W x C image, row-major, channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Linear patch embedding: each patch is flattened by `vec` (row-major
/// pixels, channel innermost) and mapped through W_patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder {
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    /// D x (patch_h * patch_w * channels).
    pub w_patch: Tensor,
}

impl PatchEmbedder {
    pub fn new(patch_h: usize, patch_w: usize, channels: usize, w_patch: Tensor) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 || channels == 0 {
            return Err(Error::Config("patch dimensions must be positive".to_string()));
        }
        if w_patch.cols() != patch_h * patch_w * channels {
            return Err(Error::Config(format!(
                "patch matrix has {} columns, expected {}",
                w_patch.cols(),
                patch_h * patch_w * channels
            )));
        }
        Ok(PatchEmbedder {
            patch_h,
            patch_w,
            channels,
            w_patch,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_patch.rows()
    }
}

/// Where position information comes from and how it is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    None,
    Learned,
    Sinusoidal,
}

impl PositionMode {
    pub fn name(self) -> &'static str {
        match self {
            PositionMode::None => "none",
            PositionMode::Learned => "learned",
            PositionMode::Sinusoidal => "sinusoidal",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(PositionMode::None),
            "learned" => Ok(PositionMode::Learned),
            "sinusoidal" => Ok(PositionMode::Sinusoidal),
            other => Err(Error::Config(format!("unknown position mode '{other}'"))),
        }
    }
}

/// How position vectors join the content embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Additive,
    Concat,
}

/// Position vectors for positions 0..N_max, plus the combination rule.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEncoding {
    pub mode: PositionMode,
    pub combine: Combine,
    /// D_pos x N_max; unused (0 x 0) when mode is None.
    pub table: Tensor,
}

impl PositionEncoding {
    pub fn none() -> Self {
        PositionEncoding {
            mode: PositionMode::None,
            combine: Combine::Additive,
            table: Tensor::zeros(0, 0),
        }
    }

    pub fn additive(mode: PositionMode, table: Tensor) -> Self {
        PositionEncoding {
            mode,
            combine: Combine::Additive,
            table,
        }
    }

    pub fn max_len(&self) -> usize {
        self.table.cols()
    }
}

/// Look up one embedding column per id.
pub fn embed_tokens(ids: &[usize], t: &TokenTable) -> Result<Tensor> {
    let w = t.vocab_size();
    for (pos, &id) in ids.iter().enumerate() {
        if id >= w {
            return Err(Error::Index(format!(
                "token id {id} at position {pos} is outside the vocabulary of size {w}"
            )));
        }
    }
    let d = t.dim();
    let mut out = Tensor::zeros(d, ids.len());
    for (n, &id) in ids.iter().enumerate() {
        for r in 0..d {
            out.set(r, n, t.table.get(r, id));
        }
    }
    Ok(out)
}

/// Flatten an image into its patch-vector matrix: one column per patch in
/// row-major grid order, each column vec(patch) with row-major pixels and
/// channel innermost.
pub fn patch_matrix(image: &Image, patch_h: usize, patch_w: usize, channels: usize) -> Result<Tensor> {
    if image.height % patch_h != 0 || image.width % patch_w != 0 {
        return Err(Error::shape(
            "embed_patches",
            (image.height, image.width),
            (patch_h, patch_w),
        ));
    }
    if image.channels != channels {
        return Err(Error::Input(format!(
            "image has {} channels, embedder expects {channels}",
            image.channels
        )));
    }
    let grid_h = image.height / patch_h;
    let grid_w = image.width / patch_w;
    let n = grid_h * grid_w;
    let patch_len = patch_h * patch_w * channels;
    let mut patches = Tensor::zeros(patch_len, n);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let col = gy * grid_w + gx;
            let mut i = 0;
            for py in 0..patch_h {
                for px in 0..patch_w {
                    for c in 0..channels {
                        patches.set(i, col, image.get(gy * patch_h + py, gx * patch_w + px, c));
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(patches)
}

/// Split an image into patches (row-major over the patch grid), flatten each
/// and embed: column n = W_patch vec(patch_n).
pub fn embed_patches(image: &Image, pe: &PatchEmbedder) -> Result<Tensor> {
    let patches = patch_matrix(image, pe.patch_h, pe.patch_w, pe.channels)?;
    pe.w_patch.matmul(&patches)
}

/// Fixed sinusoid table: e[2i, n] = sin(n / 10000^(2i/D)),
/// e[2i+1, n] = cos(n / 10000^(2i/D)), positions from 0.
pub fn sinusoidal_positions(d: usize, n: usize) -> Result<Tensor> {
    sinusoidal_positions_with_base(d, n, 10_000.0)
}

/// Same ladder with a configurable frequency base.
pub fn sinusoidal_positions_with_base(d: usize, n: usize, base: f64) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal positions need an even dimension, got {d}"
        )));
    }
    let mut out = Tensor::zeros(d, n);
    for i in 0..d / 2 {
        let freq = base.powf(-(2.0 * i as f64) / d as f64);
        for pos in 0..n {
            let angle = pos as f64 * freq;
            out.set(2 * i, pos, angle.sin());
            out.set(2 * i + 1, pos, angle.cos());
        }
    }
    Ok(out)
}

/// Attach position information to an embedded sequence.
pub fn add_positions(x: &Tensor, p: &PositionEncoding) -> Result<Tensor> {
    if p.mode == PositionMode::None {
        return Ok(x.clone());
    }
    let n = x.cols();
    if n > p.max_len() {
        return Err(Error::Range(format!(
            "sequence of length {n} exceeds the position table capacity {}",
            p.max_len()
        )));
    }
    match p.combine {
        Combine::Additive => {
            if p.table.rows() != x.rows() {
                return Err(Error::shape("add_positions", x.shape(), p.table.shape()));
            }
            x.add(&p.table.take_cols(n))
        }
        Combine::Concat => {
            let d_content = x.rows();
            let d_pos = p.table.rows();
            Ok(Tensor::from_fn(d_content + d_pos, n, |r, c| {
                if r < d_content {
                    x.get(r, c)
                } else {
                    p.table.get(r - d_content, c)
                }
            }))
        }
    }
}

/// Constructive form of the concat-to-additive identity: splitting
/// V = [V_left | V_right] gives V [Wp; e] = (V_left W) p + V_right e.
/// Returns (W' = V_left W, e' = V_right e).
pub fn concat_additive_equivalence(
    v: &Tensor,
    w: &Tensor,
    e: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d_content = w.rows();
    let d_pos = e.rows();
    if v.cols() != d_content + d_pos {
        return Err(Error::shape("concat_additive", v.shape(), (d_content + d_pos, 1)));
    }
    if e.cols() != 1 {
        return Err(Error::shape("concat_additive", e.shape(), (d_pos, 1)));
    }
    let v_left = Tensor::from_fn(v.rows(), d_content, |r, c| v.get(r, c));
    let v_right = Tensor::from_fn(v.rows(), d_pos, |r, c| v.get(r, d_content + c));
    Ok((v_left.matmul(w)?, v_right.matmul(e)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn repeated_ids_share_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = TokenTable::new(random_tensor(&mut rng, 4, 6));
        let x = embed_tokens(&[2, 5, 2], &t).unwrap();
        for r in 0..4 {
            assert_eq!(x.get(r, 0), x.get(r, 2));
        }
    }

    #[test]
    fn empty_sequence_embeds_to_zero_columns() {
        let t = TokenTable::new(Tensor::zeros(3, 5));
        let x = embed_tokens(&[], &t).unwrap();
        assert_eq!(x.shape(), (3, 0));
    }

    #[test]
    fn one_hot_table_selects() {
        let t = TokenTable::new(Tensor::identity(4));
        let x = embed_tokens(&[3, 0], &t).unwrap();
        assert_eq!(x.col(0), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(x.col(1), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_id_names_the_position() {
        let t = TokenTable::new(Tensor::zeros(2, 3));
        let err = embed_tokens(&[1, 7], &t).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("position 1"), "{msg}");
        assert!(msg.contains('7'), "{msg}");
    }

    #[test]
    fn single_patch_identity_embedding_is_vec_of_image() {
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pe = PatchEmbedder::new(2, 2, 1, Tensor::identity(4)).unwrap();
        let x = embed_patches(&img, &pe).unwrap();
        assert_eq!(x.shape(), (4, 1));
        assert_eq!(x.col(0), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::new(4, 4, 1, vec![0.0; 16]).unwrap();
        let pe = PatchEmbedder::new(2, 2, 1, random_tensor(&mut rng, 3, 4)).unwrap();
        let x = embed_patches(&img, &pe).unwrap();
        assert_eq!(x.shape(), (3, 4));
        assert_eq!(x.max_abs(), 0.0);
    }

    #[test]
    fn patch_embedding_matches_slicing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::new(4, 4, 1, (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let pe = PatchEmbedder::new(2, 2, 1, random_tensor(&mut rng, 3, 4)).unwrap();
        let x = embed_patches(&img, &pe).unwrap();
        // slice each patch explicitly and multiply by hand
        for gy in 0..2 {
            for gx in 0..2 {
                let col = gy * 2 + gx;
                let vec_patch = [
                    img.get(2 * gy, 2 * gx, 0),
                    img.get(2 * gy, 2 * gx + 1, 0),
                    img.get(2 * gy + 1, 2 * gx, 0),
                    img.get(2 * gy + 1, 2 * gx + 1, 0),
                ];
                for r in 0..3 {
                    let expected: f64 = (0..4).map(|j| pe.w_patch.get(r, j) * vec_patch[j]).sum();
                    assert!((x.get(r, col) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_divisible_image_is_a_shape_error() {
        let img = Image::new(3, 4, 1, vec![0.0; 12]).unwrap();
        let pe = PatchEmbedder::new(2, 2, 1, Tensor::zeros(3, 4)).unwrap();
        assert!(matches!(embed_patches(&img, &pe), Err(Error::Shape { .. })));
    }

    #[test]
    fn sinusoid_position_zero_alternates_zero_one() {
        let e = sinusoidal_positions(6, 3).unwrap();
        for i in 0..3 {
            assert_eq!(e.get(2 * i, 0), 0.0);
            assert_eq!(e.get(2 * i + 1, 0), 1.0);
        }
    }

    #[test]
    fn sinusoid_entries_bounded_and_match_formula() {
        let e = sinusoidal_positions(4, 8).unwrap();
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // position 1, D = 4: frequencies 1 and 10000^(-1/2) = 0.01
        assert!((e.get(0, 1) - 1.0f64.sin()).abs() < 1e-15);
        assert!((e.get(1, 1) - 1.0f64.cos()).abs() < 1e-15);
        assert!((e.get(2, 1) - 0.01f64.sin()).abs() < 1e-15);
        assert!((e.get(3, 1) - 0.01f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(
            sinusoidal_positions(5, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sinusoid_columns_distinct_up_to_4096() {
        let n = 4096;
        let e = sinusoidal_positions(64, n).unwrap();
        let mut min_seen = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let mut dist = 0.0f64;
                for d in 0..64 {
                    dist = dist.max((e.get(d, i) - e.get(d, j)).abs());
                    if dist > 1e-3 {
                        break;
                    }
                }
                min_seen = min_seen.min(dist);
            }
        }
        assert!(min_seen > 1e-6, "closest pair distance {min_seen}");
    }

    #[test]
    fn mode_none_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 3, 4);
        assert_eq!(add_positions(&x, &PositionEncoding::none()).unwrap(), x);
    }

    #[test]
    fn additive_zero_table_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 3, 4);
        let p = PositionEncoding::additive(PositionMode::Learned, Tensor::zeros(3, 8));
        assert_eq!(add_positions(&x, &p).unwrap(), x);
    }

    #[test]
    fn sequence_longer_than_table_is_a_range_error() {
        let x = Tensor::zeros(3, 9);
        let p = PositionEncoding::additive(PositionMode::Learned, Tensor::zeros(3, 8));
        assert!(matches!(add_positions(&x, &p), Err(Error::Range(_))));
    }

    #[test]
    fn concat_stacks_content_above_positions() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let table = Tensor::from_rows(&[vec![5.0, 6.0, 0.0], vec![7.0, 8.0, 0.0]]).unwrap();
        let p = PositionEncoding {
            mode: PositionMode::Learned,
            combine: Combine::Concat,
            table,
        };
        let out = add_positions(&x, &p).unwrap();
        let expected = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
        ])
        .unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn concat_additive_identity_blocks() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let e = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let v = Tensor::identity(4);
        let (w2, e2) = concat_additive_equivalence(&v, &w, &e).unwrap();
        // top block of W' is W, bottom is zero; e' carries e in the bottom block
        assert_eq!(w2.shape(), (4, 2));
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(w2.get(r, c), w.get(r, c));
                assert_eq!(w2.get(r + 2, c), 0.0);
            }
            assert_eq!(e2.get(r, 0), 0.0);
            assert_eq!(e2.get(r + 2, 0), e.get(r, 0));
        }
    }

    #[test]
    fn concat_additive_identity_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let (dc, dp, dout, pdim) = (3, 2, 4, 5);
            let v = random_tensor(&mut rng, dout, dc + dp);
            let w = random_tensor(&mut rng, dc, pdim);
            let p = random_tensor(&mut rng, pdim, 1);
            let e = random_tensor(&mut rng, dp, 1);
            let (w2, e2) = concat_additive_equivalence(&v, &w, &e).unwrap();
            // left side: V [Wp; e]
            let wp = w.matmul(&p).unwrap();
            let stacked = Tensor::from_fn(dc + dp, 1, |r, _| {
                if r < dc {
                    wp.get(r, 0)
                } else {
                    e.get(r - dc, 0)
                }
            });
            let lhs = v.matmul(&stacked).unwrap();
            let rhs = w2.matmul(&p).unwrap().add(&e2).unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_position_vector_gives_zero_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = random_tensor(&mut rng, 4, 5);
        let w = random_tensor(&mut rng, 3, 2);
        let e = Tensor::zeros(2, 1);
        let (_, e2) = concat_additive_equivalence(&v, &w, &e).unwrap();
        assert_eq!(e2.max_abs(), 0.0);
    }
}
