use super::VitError;

/// An `H×W×C` image of raw 8-bit channel values, row-major then channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, VitError> {
        let expected = height * width * channels;
        if height == 0 || width == 0 || channels == 0 || pixels.len() != expected {
            return Err(VitError::PixelCount { expected, found: pixels.len() });
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Flattened `P×P×C` patches of an image, possibly a subset of the full grid.
///
/// `patch_indices` are raster indices into the `grid_h × grid_w` grid and are
/// always strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    patch_size: usize,
    channels: usize,
    grid_h: usize,
    grid_w: usize,
    data: Vec<u8>,
    patch_indices: Vec<usize>,
}

impl PatchGrid {
    /// Builds a grid from already-flattened patch data.
    pub fn from_parts(
        patch_size: usize,
        channels: usize,
        grid_h: usize,
        grid_w: usize,
        patch_indices: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self, VitError> {
        let n_total = grid_h * grid_w;
        let plen = patch_size * patch_size * channels;
        if patch_size == 0 || channels == 0 || n_total == 0 {
            return Err(VitError::Dimension { what: "patch grid", expected: 1, found: 0 });
        }
        if data.len() != patch_indices.len() * plen {
            return Err(VitError::PixelCount { expected: patch_indices.len() * plen, found: data.len() });
        }
        for (pos, &i) in patch_indices.iter().enumerate() {
            if i >= n_total {
                return Err(VitError::PatchIndex { index: i, limit: n_total });
            }
            if pos > 0 && patch_indices[pos - 1] >= i {
                return Err(VitError::UnsortedIndices);
            }
        }
        Ok(Self { patch_size, channels, grid_h, grid_w, data, patch_indices })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Grid dimensions in patches, `(H/P, W/P)`.
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Total patch count `N` of the underlying image.
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Number of patches actually present.
    pub fn len(&self) -> usize {
        self.patch_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_indices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.n_patches()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch_indices(&self) -> &[usize] {
        &self.patch_indices
    }

    /// Raw bytes of the `j`-th present patch.
    pub fn patch(&self, j: usize) -> &[u8] {
        let plen = self.patch_len();
        &self.data[j * plen..(j + 1) * plen]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Restricts the grid to the given raster indices (strictly increasing).
    pub fn subset(&self, indices: &[usize]) -> Result<PatchGrid, VitError> {
        let plen = self.patch_len();
        let mut data = Vec::with_capacity(indices.len() * plen);
        for &idx in indices {
            let j = self
                .patch_indices
                .binary_search(&idx)
                .map_err(|_| VitError::PatchIndex { index: idx, limit: self.n_patches() })?;
            data.extend_from_slice(self.patch(j));
        }
        PatchGrid::from_parts(self.patch_size, self.channels, self.grid_h, self.grid_w, indices.to_vec(), data)
    }

    /// Reassembles the image. Only defined for a full grid.
    pub fn to_image(&self) -> Result<ImageTensor, VitError> {
        if !self.is_full() {
            return Err(VitError::Dimension { what: "full grid", expected: self.n_patches(), found: self.len() });
        }
        let p = self.patch_size;
        let c = self.channels;
        let (h, w) = (self.grid_h * p, self.grid_w * p);
        let mut pixels = vec![0u8; h * w * c];
        for i in 0..self.n_patches() {
            let (by, bx) = (i / self.grid_w, i % self.grid_w);
            let src = self.patch(i);
            for dy in 0..p {
                let dst = ((by * p + dy) * w + bx * p) * c;
                pixels[dst..dst + p * c].copy_from_slice(&src[dy * p * c..(dy + 1) * p * c]);
            }
        }
        ImageTensor::new(h, w, c, pixels)
    }
}

/// Splits an image into `P×P` blocks in raster order, each flattened
/// row-major by pixel and then by channel.
pub fn patchify(img: &ImageTensor, patch_size: usize) -> Result<PatchGrid, VitError> {
    let p = patch_size;
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(VitError::Indivisible { height: img.height, width: img.width, patch_size: p });
    }
    let (gh, gw) = (img.height / p, img.width / p);
    let c = img.channels;
    let mut data = Vec::with_capacity(img.pixels.len());
    for by in 0..gh {
        for bx in 0..gw {
            for dy in 0..p {
                let start = ((by * p + dy) * img.width + bx * p) * c;
                data.extend_from_slice(&img.pixels[start..start + p * c]);
            }
        }
    }
    PatchGrid::from_parts(p, c, gh, gw, (0..gh * gw).collect(), data)
}
