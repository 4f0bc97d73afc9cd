//! Toy multi-scale residual tokenizer.
//!
//! An image (a grid of `d`-dimensional vectors) is decomposed into `K`
//! coarse-to-fine residual token maps. Decoding runs the latent pipeline in
//! the forward direction: each sampled map is de-quantized through its
//! scale's codebook, upsampled to the finest resolution by nearest-neighbour
//! replication, and added to the running latent. The decoder itself is a fixed
//! affine map (identity by default).
//!
//! Scales are zero-indexed throughout the crate: scale `0` is the coarsest map
//! and has an empty prefix.

mod codebook;
mod grid;
pub mod io;
mod schedule;
pub mod synthetic;

pub use codebook::{Codebook, CodebookSpec};
pub use grid::{Image, Latent, VectorGrid};
pub use schedule::ScaleSchedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// One residual token map `r_k`: a `(h_k, w_k)` grid of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMap {
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<TokenId>,
}

impl TokenMap {
    pub fn new(scale: usize, height: usize, width: usize, ids: Vec<TokenId>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "token map {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(Self {
            scale,
            height,
            width,
            ids,
        })
    }

    /// Map for `scale` of `schedule` with every site set to `id`.
    pub fn filled(schedule: &ScaleSchedule, scale: usize, id: TokenId) -> Self {
        let (h, w) = schedule.dims(scale);
        Self {
            scale,
            height: h,
            width: w,
            ids: vec![id; h * w],
        }
    }

    pub fn sites(&self) -> usize {
        self.ids.len()
    }

    pub fn validate(&self, schedule: &ScaleSchedule, vocab: usize) -> Result<()> {
        if self.scale >= schedule.len() {
            return Err(Error::ShapeMismatch(format!(
                "scale {} outside schedule of {} scales",
                self.scale,
                schedule.len()
            )));
        }
        if schedule.dims(self.scale) != (self.height, self.width) {
            return Err(Error::ShapeMismatch(format!(
                "token map at scale {} is {}x{}, schedule expects {:?}",
                self.scale,
                self.height,
                self.width,
                schedule.dims(self.scale)
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::InvalidToken { id, vocab });
        }
        Ok(())
    }
}

/// Flattens a token prefix into the id sequence used as a table key.
pub fn flatten_prefix(prefix: &[TokenMap]) -> Vec<TokenId> {
    prefix.iter().flat_map(|m| m.ids.iter().copied()).collect()
}

/// Splits a flattened id sequence back into maps for scales `0..n`.
pub fn unflatten_prefix(schedule: &ScaleSchedule, ids: &[TokenId]) -> Result<Vec<TokenMap>> {
    let mut maps = Vec::new();
    let mut offset = 0;
    let mut scale = 0;
    while offset < ids.len() {
        if scale >= schedule.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids exceed the schedule's {} sites",
                ids.len(),
                schedule.total_sites()
            )));
        }
        let (h, w) = schedule.dims(scale);
        let end = offset + h * w;
        if end > ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "id sequence ends inside scale {scale}"
            )));
        }
        maps.push(TokenMap::new(scale, h, w, ids[offset..end].to_vec())?);
        offset = end;
        scale += 1;
    }
    Ok(maps)
}

/// Fixed decoder `D` mapping the accumulated latent to an image, sitewise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoder {
    #[default]
    Identity,
    /// `x -> A x + b` at every site; `matrix` is row-major `d x d`.
    Affine { matrix: Vec<f64>, bias: Vec<f64> },
}

impl Decoder {
    /// Affine decoder `A = I + 0.1 G`, `b = 0.1 g` with standard normal `G`, `g`.
    pub fn seeded_affine(dim: usize, seed: u64) -> Self {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = crate::seed::rng(seed);
        let mut matrix = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                let g: f64 = rng.sample(StandardNormal);
                matrix[r * dim + c] = if r == c { 1.0 } else { 0.0 } + 0.1 * g;
            }
        }
        let bias = (0..dim)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Decoder::Affine { matrix, bias }
    }

    pub fn decode(&self, latent: &Latent) -> Image {
        match self {
            Decoder::Identity => Image(latent.0.clone()),
            Decoder::Affine { matrix, bias } => {
                let grid = &latent.0;
                let d = grid.dim;
                let mut out = VectorGrid::zeros(grid.height, grid.width, d);
                for site in 0..grid.sites() {
                    let x = grid.vector(site);
                    let y = out.vector_mut(site);
                    for r in 0..d {
                        y[r] = bias[r]
                            + (0..d).map(|c| matrix[r * d + c] * x[c]).sum::<f64>();
                    }
                }
                Image(out)
            }
        }
    }

    /// Inverts the decoder so images can be encoded in latent space.
    pub fn invert(&self, image: &Image) -> Result<Latent> {
        match self {
            Decoder::Identity => Ok(Latent(image.0.clone())),
            Decoder::Affine { matrix, bias } => {
                let grid = &image.0;
                let d = grid.dim;
                let a = nalgebra::DMatrix::from_row_slice(d, d, matrix);
                let lu = a.lu();
                let mut out = VectorGrid::zeros(grid.height, grid.width, d);
                for site in 0..grid.sites() {
                    let y = grid.vector(site);
                    let rhs = nalgebra::DVector::from_iterator(
                        d,
                        y.iter().zip(bias).map(|(y, b)| y - b),
                    );
                    let x = lu.solve(&rhs).ok_or_else(|| {
                        Error::InvalidInput("affine decoder matrix is singular".into())
                    })?;
                    out.vector_mut(site).copy_from_slice(x.as_slice());
                }
                Ok(Latent(out))
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let Decoder::Affine { matrix, bias } = self {
            if matrix.len() != dim * dim || bias.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "affine decoder must be {dim}x{dim} with a bias of {dim}"
                )));
            }
        }
        Ok(())
    }
}

/// `z_k = Q_k^{-1}(r_k)`: replaces every id by its codebook vector at the map's scale.
pub fn dequantize(map: &TokenMap, book: &Codebook) -> Result<VectorGrid> {
    if map.scale >= book.num_scales() {
        return Err(Error::ShapeMismatch(format!(
            "codebook has no table for scale {}",
            map.scale
        )));
    }
    let mut grid = VectorGrid::zeros(map.height, map.width, book.dim());
    for (site, &id) in map.ids.iter().enumerate() {
        if id as usize >= book.vocab() {
            return Err(Error::InvalidToken {
                id,
                vocab: book.vocab(),
            });
        }
        grid.vector_mut(site)
            .copy_from_slice(book.vector(map.scale, id));
    }
    Ok(grid)
}

/// Index of the source row/column that target index `i` copies from.
#[inline]
pub fn source_index(i: usize, source: usize, target: usize) -> usize {
    i * source / target
}

/// Nearest-neighbour upsampling with the index map `floor(i * h_k / h_K)`.
pub fn upsample(grid: &VectorGrid, target: (usize, usize)) -> Result<VectorGrid> {
    let (th, tw) = target;
    if th < grid.height || tw < grid.width {
        return Err(Error::InvalidSchedule(format!(
            "cannot upsample {}x{} to smaller {}x{}",
            grid.height, grid.width, th, tw
        )));
    }
    let mut out = VectorGrid::zeros(th, tw, grid.dim);
    for i in 0..th {
        let si = source_index(i, grid.height, th);
        for j in 0..tw {
            let sj = source_index(j, grid.width, tw);
            out.vector_mut(i * tw + j)
                .copy_from_slice(grid.vector(si * grid.width + sj));
        }
    }
    Ok(out)
}

/// Mean over the block of fine sites that the upsampling index map sends to
/// each coarse site; the adjoint of [`upsample`] up to normalisation.
pub fn avg_pool(grid: &VectorGrid, target: (usize, usize)) -> Result<VectorGrid> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > grid.height || tw > grid.width {
        return Err(Error::InvalidSchedule(format!(
            "cannot pool {}x{} to {}x{}",
            grid.height, grid.width, th, tw
        )));
    }
    if (th, tw) == (grid.height, grid.width) {
        return Ok(grid.clone());
    }
    let mut out = VectorGrid::zeros(th, tw, grid.dim);
    let mut counts = vec![0usize; th * tw];
    for i in 0..grid.height {
        let ti = source_index(i, th, grid.height);
        for j in 0..grid.width {
            let tj = source_index(j, tw, grid.width);
            let t = ti * tw + tj;
            counts[t] += 1;
            let src = grid.vector(i * grid.width + j);
            for (o, s) in out.vector_mut(t).iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    for (t, &n) in counts.iter().enumerate() {
        for o in out.vector_mut(t) {
            *o /= n as f64;
        }
    }
    Ok(out)
}

/// `f_k = f_{k-1} + U_k(Q_k^{-1}(r_k))`; returns a new latent.
pub fn accumulate_latent(prev: &Latent, map: &TokenMap, book: &Codebook) -> Result<Latent> {
    let residual = upsample(&dequantize(map, book)?, (prev.0.height, prev.0.width))?;
    if residual.dim != prev.0.dim {
        return Err(Error::ShapeMismatch(format!(
            "latent dim {} vs codebook dim {}",
            prev.0.dim, residual.dim
        )));
    }
    let mut next = prev.0.clone();
    next.add_assign(&residual);
    Ok(Latent(next))
}

/// Result of greedy residual encoding.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub maps: Vec<TokenMap>,
    /// Squared L2 norm of the full-resolution residual after each scale.
    pub residual_norms: Vec<f64>,
    /// Residual left after the final scale.
    pub final_residual: VectorGrid,
}

/// Greedy coarse-to-fine residual quantisation of a latent.
pub fn encode_latent(latent: &Latent, schedule: &ScaleSchedule, book: &Codebook) -> Result<Encoding> {
    let (fh, fw) = schedule.finest();
    if (latent.0.height, latent.0.width, latent.0.dim) != (fh, fw, book.dim()) {
        return Err(Error::InvalidInput(format!(
            "image is {}x{}x{}, expected {}x{}x{}",
            latent.0.height,
            latent.0.width,
            latent.0.dim,
            fh,
            fw,
            book.dim()
        )));
    }
    if book.num_scales() < schedule.len() {
        return Err(Error::InvalidInput(format!(
            "codebook has {} scales, schedule needs {}",
            book.num_scales(),
            schedule.len()
        )));
    }
    let mut residual = latent.0.clone();
    let mut maps = Vec::with_capacity(schedule.len());
    let mut residual_norms = Vec::with_capacity(schedule.len());
    for scale in 0..schedule.len() {
        let (h, w) = schedule.dims(scale);
        let pooled = avg_pool(&residual, (h, w))?;
        let ids = (0..h * w)
            .map(|site| book.nearest(scale, pooled.vector(site)))
            .collect();
        let map = TokenMap::new(scale, h, w, ids)?;
        let step = upsample(&dequantize(&map, book)?, (fh, fw))?;
        residual.sub_assign(&step);
        residual_norms.push(residual.squared_norm());
        maps.push(map);
    }
    Ok(Encoding {
        maps,
        residual_norms,
        final_residual: residual,
    })
}

/// Encodes an image under the identity decoder.
pub fn encode_multiscale(image: &Image, schedule: &ScaleSchedule, book: &Codebook) -> Result<Vec<TokenMap>> {
    Ok(encode_latent(&Latent(image.0.clone()), schedule, book)?.maps)
}

/// Schedule, codebook and decoder bundled as one latent pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub schedule: ScaleSchedule,
    pub codebook: Codebook,
    #[serde(default)]
    pub decoder: Decoder,
}

impl Tokenizer {
    pub fn new(schedule: ScaleSchedule, codebook: Codebook, decoder: Decoder) -> Result<Self> {
        if codebook.num_scales() < schedule.len() {
            return Err(Error::InvalidInput(format!(
                "codebook has {} scales, schedule needs {}",
                codebook.num_scales(),
                schedule.len()
            )));
        }
        decoder.validate(codebook.dim())?;
        Ok(Self {
            schedule,
            codebook,
            decoder,
        })
    }

    pub fn vocab(&self) -> usize {
        self.codebook.vocab()
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn zero_latent(&self) -> Latent {
        let (h, w) = self.schedule.finest();
        Latent(VectorGrid::zeros(h, w, self.dim()))
    }

    /// Accumulated latent after every map in `maps` (in order).
    pub fn latent_of(&self, maps: &[TokenMap]) -> Result<Latent> {
        maps.iter()
            .try_fold(self.zero_latent(), |acc, m| accumulate_latent(&acc, m, &self.codebook))
    }

    pub fn decode(&self, latent: &Latent) -> Image {
        self.decoder.decode(latent)
    }

    pub fn decode_maps(&self, maps: &[TokenMap]) -> Result<Image> {
        Ok(self.decode(&self.latent_of(maps)?))
    }

    pub fn encode(&self, image: &Image) -> Result<Encoding> {
        let latent = self.decoder.invert(image)?;
        encode_latent(&latent, &self.schedule, &self.codebook)
    }
}

#[cfg(test)]
mod tests;
