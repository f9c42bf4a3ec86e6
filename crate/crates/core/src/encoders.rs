//! Patchification, fixed positional encodings, the byte tokenizer, and the
//! small image and text encoders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{Graph, ParamStore};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB: usize = 258;

pub const IMAGE_PREFIX: &str = "img_enc";
pub const TEXT_PREFIX: &str = "txt_enc";

/// RGB image stored channel-first (`[3, H, W]`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; 3 * height * width];
        for (c, &v) in rgb.iter().enumerate() {
            data[c * height * width..(c + 1) * height * width].fill(v);
        }
        ImageTensor {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let at = y * self.width + x;
        [self.data[at], self.data[plane + at], self.data[2 * plane + at]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        let at = y * self.width + x;
        for (c, &v) in rgb.iter().enumerate() {
            self.data[c * plane + at] = v.clamp(0.0, 1.0);
        }
    }

    /// Patch grid `(rows, cols)` at `patch_size`.
    pub fn grid(&self, patch_size: usize) -> Result<(usize, usize)> {
        if patch_size == 0 || self.height % patch_size != 0 || self.width % patch_size != 0 {
            return Err(Error::shape(format!(
                "image {}x{} is not divisible by patch size {patch_size}",
                self.height, self.width
            )));
        }
        Ok((self.height / patch_size, self.width / patch_size))
    }
}

/// Splits an image into `N = (H/p)(W/p)` non-overlapping patches. Row `k` is
/// patch `k` in row-major grid order, flattened as `(dy, dx, channel)`.
pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<Tensor> {
    let (gh, gw) = image.grid(patch_size)?;
    let p = patch_size;
    let mut out = Vec::with_capacity(image.data.len());
    for r in 0..gh {
        for c in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    out.extend_from_slice(&image.pixel(r * p + dy, c * p + dx));
                }
            }
        }
    }
    Tensor::new([gh * gw, 3 * p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid: (usize, usize), patch_size: usize) -> Result<ImageTensor> {
    let (gh, gw) = grid;
    let p = patch_size;
    if patches.shape() != [gh * gw, 3 * p * p] {
        return Err(Error::shape(format!(
            "patch matrix {:?} does not fit a {gh}x{gw} grid at patch {p}",
            patches.shape()
        )));
    }
    let (h, w) = (gh * p, gw * p);
    let mut img = ImageTensor {
        height: h,
        width: w,
        data: vec![0.0; 3 * h * w],
    };
    let plane = h * w;
    for k in 0..gh * gw {
        let row = patches.row(k);
        let (r, c) = (k / gw, k % gw);
        for dy in 0..p {
            for dx in 0..p {
                let src = 3 * (dy * p + dx);
                let at = (r * p + dy) * w + c * p + dx;
                for ch in 0..3 {
                    img.data[ch * plane + at] = row[src + ch];
                }
            }
        }
    }
    Ok(img)
}

fn sincos_1d(positions: impl Iterator<Item = f64>, dim: usize, out: &mut [Vec<f64>]) {
    let half = dim / 2;
    for (row, pos) in out.iter_mut().zip(positions) {
        for k in 0..half {
            let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
            row.push((pos * omega).sin());
        }
        for k in 0..half {
            let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
            row.push((pos * omega).cos());
        }
    }
}

/// Fixed 2-D sine-cosine table: the first half of each row encodes the grid
/// row, the second half the grid column.
pub fn sincos_pos_2d<T: Scalar>(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::shape(format!("2-D position dim {dim} must be a positive multiple of 4")));
    }
    let n = grid_h * grid_w;
    let mut rows = vec![Vec::with_capacity(dim); n];
    sincos_1d((0..n).map(|k| (k / grid_w) as f64), dim / 2, &mut rows);
    sincos_1d((0..n).map(|k| (k % grid_w) as f64), dim / 2, &mut rows);
    let data = rows.concat().into_iter().map(T::from_f64).collect();
    Ok(Tensor::from_parts(vec![n, dim], data))
}

pub fn sincos_pos_1d<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::shape(format!("1-D position dim {dim} must be a positive even number")));
    }
    let mut rows = vec![Vec::with_capacity(dim); len];
    sincos_1d((0..len).map(|k| k as f64), dim, &mut rows);
    let data = rows.concat().into_iter().map(T::from_f64).collect();
    Ok(Tensor::from_parts(vec![len, dim], data))
}

/// Byte-level ids with `BOS`/`EOS` framing, truncated to `max_len`.
pub fn tokenize_text(caption: &[u8], max_len: usize) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(caption.iter().map(|&b| b as u32))
        .chain(std::iter::once(EOS))
        .take(max_len)
        .collect()
}

pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_text_len: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            max_text_len: 32,
            frozen: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config("embed_dim must be a multiple of 4".into()));
        }
        Ok(())
    }
}

const MLP_RATIO: usize = 4;

pub fn init_image_encoder<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &EncoderConfig,
) {
    let trainable = !cfg.frozen;
    let p = cfg.patch_size;
    nn::init_linear(store, rng, &format!("{IMAGE_PREFIX}.patch_embed"), 3 * p * p, cfg.embed_dim, trainable);
    for l in 0..cfg.depth {
        nn::init_block(store, rng, &format!("{IMAGE_PREFIX}.block{l}"), cfg.embed_dim, MLP_RATIO, trainable);
    }
    nn::init_layer_norm(store, &format!("{IMAGE_PREFIX}.norm"), cfg.embed_dim, trainable);
}

pub fn init_text_encoder<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &EncoderConfig,
) {
    let trainable = !cfg.frozen;
    let emb: Vec<T> = (0..VOCAB * cfg.embed_dim)
        .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    store.insert(
        format!("{TEXT_PREFIX}.tok_embed"),
        Tensor::new([VOCAB, cfg.embed_dim], emb).expect("finite init"),
        trainable,
    );
    for l in 0..cfg.depth {
        nn::init_block(store, rng, &format!("{TEXT_PREFIX}.block{l}"), cfg.embed_dim, MLP_RATIO, trainable);
    }
    nn::init_layer_norm(store, &format!("{TEXT_PREFIX}.norm"), cfg.embed_dim, trainable);
}

/// Ascending, de-duplicated visible set, validated against `n` patches.
pub fn normalize_visible(visible: Option<&[usize]>, n: usize) -> Result<Vec<usize>> {
    let Some(vis) = visible else {
        return Ok((0..n).collect());
    };
    let mut v = vis.to_vec();
    v.sort_unstable();
    v.dedup();
    if let Some(&bad) = v.iter().find(|&&i| i >= n) {
        return Err(Error::shape(format!("patch index {bad} out of range for {n} patches")));
    }
    Ok(v)
}

/// Patch embedding plus positional encoding for the visible patches, before
/// any attention block.
pub fn embed_patches<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &EncoderConfig,
    patches: &Tensor<T>,
    grid: (usize, usize),
    visible: &[usize],
) -> Result<Var> {
    let n = grid.0 * grid.1;
    if patches.rows() != n {
        return Err(Error::shape(format!("{} patches for a {}x{} grid", patches.rows(), grid.0, grid.1)));
    }
    let x = g.constant(patches.gather_rows(visible)?);
    let x = nn::linear(g, &format!("{IMAGE_PREFIX}.patch_embed"), x)?;
    let pos = sincos_pos_2d::<T>(grid.0, grid.1, cfg.embed_dim)?.gather_rows(visible)?;
    let pos = g.constant(pos);
    g.tape.add(x, pos)
}

/// Image encoder over patch rows: `|visible| x embed_dim`, rows in ascending
/// patch order. `None` means all patches are visible.
pub fn encode_patches<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &EncoderConfig,
    patches: &Tensor<T>,
    grid: (usize, usize),
    visible: Option<&[usize]>,
) -> Result<Var> {
    let visible = normalize_visible(visible, grid.0 * grid.1)?;
    let mut x = embed_patches(g, cfg, patches, grid, &visible)?;
    for l in 0..cfg.depth {
        x = nn::block(g, &format!("{IMAGE_PREFIX}.block{l}"), x, cfg.heads)?;
    }
    nn::layer_norm(g, &format!("{IMAGE_PREFIX}.norm"), x)
}

pub fn encode_image<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &EncoderConfig,
    image: &ImageTensor,
    visible: Option<&[usize]>,
) -> Result<Var> {
    let grid = image.grid(cfg.patch_size)?;
    let patches = patchify(image, cfg.patch_size)?.cast::<T>();
    encode_patches(g, cfg, &patches, grid, visible)
}

/// Text encoder: one output row per token id.
pub fn encode_text<T: Scalar>(g: &mut Graph<'_, T>, cfg: &EncoderConfig, ids: &[u32]) -> Result<Var> {
    if ids.len() < 2 {
        return Err(Error::shape(format!("text needs at least BOS and EOS, got {} ids", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= VOCAB) {
        return Err(Error::shape(format!("token id {bad} outside vocabulary")));
    }
    let table = g.param(&format!("{TEXT_PREFIX}.tok_embed"))?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let x = g.tape.gather_rows(table, &idx)?;
    let pos = g.constant(sincos_pos_1d(ids.len(), cfg.embed_dim)?);
    let mut x = g.tape.add(x, pos)?;
    for l in 0..cfg.depth {
        x = nn::block(g, &format!("{TEXT_PREFIX}.block{l}"), x, cfg.heads)?;
    }
    nn::layer_norm(g, &format!("{TEXT_PREFIX}.norm"), x)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
    }

    fn encoders(cfg: &EncoderConfig) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_image_encoder(&mut store, &mut rng, cfg);
        init_text_encoder(&mut store, &mut rng, cfg);
        store
    }

    #[test]
    fn patch_counts() {
        let img = ImageTensor::filled(224, 224, [0.5; 3]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[196, 768]);
        let img = ImageTensor::filled(64, 64, [0.5; 3]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[64, 192]);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = ImageTensor::filled(32, 16, [0.1, 0.2, 0.3]);
        let p = patchify(&img, 8).unwrap();
        for k in 1..p.rows() {
            assert_eq!(p.row(k), p.row(0));
        }
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = ImageTensor::filled(30, 32, [0.0; 3]);
        assert!(matches!(patchify(&img, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn unpatchify_restores_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 24, 40);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(unpatchify(&p, (3, 5), 8).unwrap(), img);
    }

    #[test]
    fn sincos_2d_range_and_uniqueness() {
        let t = sincos_pos_2d::<f32>(64, 64, 64).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let n = t.rows();
        for a in 0..n {
            for b in a + 1..n {
                assert!(t.row(a) != t.row(b), "collision between {a} and {b}");
            }
        }
        let one = sincos_pos_2d::<f64>(1, 1, 8).unwrap();
        assert_eq!(one.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(sincos_pos_2d::<f32>(2, 2, 6).is_err());
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_text(b"", 32), vec![BOS, EOS]);
        assert_eq!(tokenize_text(b"ab", 32), vec![256, 97, 98, 257]);
        let long = vec![b'x'; 1000];
        let ids = tokenize_text(&long, 16);
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), b'x' as u32);
    }

    #[test]
    fn encode_image_shapes_and_locality() {
        let cfg = EncoderConfig::default();
        let store = encoders(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 64, 64);
        let patches = patchify(&img, 8).unwrap();
        let mut g = Graph::no_grad(&store);
        let full = encode_image(&mut g, &cfg, &img, None).unwrap();
        assert_eq!(g.value(full).shape(), &[64, 64]);

        let subset: Vec<usize> = (0..10).collect();
        let all: Vec<usize> = (0..64).collect();
        let e_sub = embed_patches(&mut g, &cfg, &patches, (8, 8), &subset).unwrap();
        let e_all = embed_patches(&mut g, &cfg, &patches, (8, 8), &all).unwrap();
        for k in 0..10 {
            assert_eq!(g.value(e_sub).row(k), g.value(e_all).row(k));
        }
        let deep_sub = encode_image(&mut g, &cfg, &img, Some(&subset)).unwrap();
        assert_eq!(g.value(deep_sub).rows(), 10);
        let differs = (0..10).any(|k| g.value(deep_sub).row(k) != g.value(full).row(k));
        assert!(differs);
        assert!(encode_image(&mut g, &cfg, &img, Some(&[64])).is_err());
    }

    #[test]
    fn encode_text_shape_determinism_and_order() {
        let cfg = EncoderConfig::default();
        let store = encoders(&cfg);
        let mut g = Graph::no_grad(&store);
        let ids = tokenize_text(b"red square at top-left", cfg.max_text_len);
        let a = encode_text(&mut g, &cfg, &ids).unwrap();
        let b = encode_text(&mut g, &cfg, &ids).unwrap();
        assert_eq!(g.value(a).shape(), &[ids.len(), 64]);
        assert_eq!(g.value(a), g.value(b));
        let swapped = tokenize_text(b"red sqaure at top-left", cfg.max_text_len);
        let c = encode_text(&mut g, &cfg, &swapped).unwrap();
        assert_ne!(g.value(a), g.value(c));
        assert!(encode_text(&mut g, &cfg, &[BOS]).is_err());
    }

    #[test]
    fn frozen_encoders_do_not_require_grad() {
        let store = encoders(&EncoderConfig::default());
        assert!(store.iter().all(|(_, p)| !p.requires_grad));
        let store = encoders(&EncoderConfig {
            frozen: false,
            ..Default::default()
        });
        assert!(store.iter().all(|(_, p)| p.requires_grad));
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn tokenize_roundtrip(bytes in proptest::collection::vec(any::<u8>(), 0..80), max_len in 2usize..64) {
                let ids = tokenize_text(&bytes, max_len);
                prop_assert!(ids.len() <= max_len);
                let kept = max_len.saturating_sub(1).min(bytes.len());
                prop_assert_eq!(detokenize(&ids), bytes[..kept].to_vec());
            }
        }
    }
}
