//! 3D grid containers, trilinear sampling and its adjoint, finite-difference
//! stencils, resampling and intensity preprocessing.
//!
//! Layout is x-fastest: the voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`.
//! Vector fields are channel-major (all x-components, then y, then z) and are
//! expressed in voxel units. Out-of-bounds sample coordinates are clamped to
//! the grid (replicate padding).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

/// Grid shape and voxel spacing (mm/voxel).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: Dims,
    pub spacing: Spacing,
}

impl Geometry {
    pub fn new(dims: Dims, spacing: Spacing) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidDims(format!(
                "every axis needs at least 2 voxels, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidDims(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spacing geometry.
    pub fn cube(dims: Dims) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Geometric center in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        self.dims.map(|n| (n as f64 - 1.0) / 2.0)
    }

    pub fn check_same(&self, other: &Geometry) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                expected: self.dims,
                got: other.dims,
            });
        }
        Ok(())
    }

    /// True when `(x, y, z)` lies at least `margin` voxels away from every face.
    pub fn is_interior(&self, c: [usize; 3], margin: usize) -> bool {
        (0..3).all(|d| c[d] >= margin && c[d] + margin < self.dims[d])
    }
}

/// Continuous sampling location in voxel index space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GridPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn to_array(self) -> Result<[f64; 3]> {
        let p = [self.x, self.y, self.z];
        if p.iter().all(|c| c.is_finite()) {
            Ok(p)
        } else {
            Err(Error::NonFiniteCoordinate)
        }
    }
}

impl From<[f64; 3]> for GridPoint {
    fn from(p: [f64; 3]) -> Self {
        Self::new(p[0], p[1], p[2])
    }
}

/// 3D scalar grid: images, masks, weight and uncertainty maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    geom: Geometry,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidDims(format!(
                "data length {} does not match {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: f64) -> Self {
        Self {
            geom,
            data: vec![value; geom.len()],
        }
    }

    pub fn zeros(geom: Geometry) -> Self {
        Self::filled(geom, 0.0)
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let data = (0..geom.len()).map(|i| f(geom.coords(i))).collect();
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> Dims {
        self.geom.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.geom.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            geom: self.geom,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        sum(&self.data) / self.data.len() as f64
    }

    /// Trilinear interpolation at arbitrary points (replicate padding).
    pub fn sample(&self, points: &[GridPoint]) -> Result<Vec<f64>> {
        points
            .iter()
            .map(|p| {
                let p = p.to_array()?;
                Ok(Stencil::at(&self.geom.dims, p).apply(&self.data))
            })
            .collect()
    }
}

/// 3D grid of 3-vectors in voxel units (velocities, displacements, gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    geom: Geometry,
    data: Vec<f64>,
}

impl VectorField {
    /// `data` is channel-major with exactly three channels.
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * geom.len() {
            return Err(Error::InvalidDims(format!(
                "vector data length {} does not match 3 x {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Self {
        Self {
            geom,
            data: vec![0.0; 3 * geom.len()],
        }
    }

    pub fn constant(geom: Geometry, c: [f64; 3]) -> Self {
        let n = geom.len();
        let mut data = Vec::with_capacity(3 * n);
        for v in c {
            data.extend(std::iter::repeat_n(v, n));
        }
        Self { geom, data }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let n = geom.len();
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let v = f(geom.coords(i));
            data[i] = v[0];
            data[n + i] = v[1];
            data[2 * n + i] = v[2];
        }
        Self { geom, data }
    }

    pub fn from_channels(geom: Geometry, channels: [Vec<f64>; 3]) -> Result<Self> {
        let [a, b, c] = channels;
        let mut data = a;
        data.extend(b);
        data.extend(c);
        Self::new(geom, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> Dims {
        self.geom.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.geom.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn channels_mut(&mut self) -> [&mut [f64]; 3] {
        let n = self.geom.len();
        let (a, rest) = self.data.split_at_mut(n);
        let (b, c) = rest.split_at_mut(n);
        [a, b, c]
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        let n = self.geom.len();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.at(self.geom.index(x, y, z))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            geom: self.geom,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn neg(&self) -> Self {
        self.scaled(-1.0)
    }

    pub fn add(&self, other: &VectorField) -> Result<Self> {
        self.geom.check_same(&other.geom)?;
        Ok(Self {
            geom: self.geom,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Per-voxel Euclidean norm.
    pub fn magnitude(&self) -> ScalarVolume {
        let n = self.geom.len();
        let data = (0..n)
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .collect();
        ScalarVolume {
            geom: self.geom,
            data,
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitude().data.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// Trilinear interpolation of all three channels at arbitrary points.
    pub fn sample(&self, points: &[GridPoint]) -> Result<Vec<[f64; 3]>> {
        points
            .iter()
            .map(|p| {
                let p = p.to_array()?;
                Ok(Stencil::at(&self.geom.dims, p).apply3(&self.data, self.geom.len()))
            })
            .collect()
    }
}

/// The 8 corner indices and trilinear weights for one sample location.
///
/// Corner `k` uses bit 0 for x, bit 1 for y and bit 2 for z.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

/// Per-axis cell lookup. `lo`/`hi`/`scale` describe the derivative along the
/// axis: `(f[hi] - f[lo]) * scale`. Clamped coordinates have zero derivative;
/// coordinates lying exactly on an interior node take the symmetric slope.
#[derive(Clone, Copy, Debug)]
struct AxisCell {
    i0: usize,
    t: f64,
    lo: usize,
    hi: usize,
    scale: f64,
}

#[inline]
fn axis_cell(p: f64, n: usize) -> AxisCell {
    let max = (n - 1) as f64;
    let pc = p.clamp(0.0, max);
    let i0 = (pc.floor() as usize).min(n - 2);
    let t = pc - i0 as f64;
    let (lo, hi, scale) = if p < 0.0 || p > max {
        (i0, i0 + 1, 0.0)
    } else if t == 0.0 && i0 > 0 {
        (i0 - 1, i0 + 1, 0.5)
    } else {
        (i0, i0 + 1, 1.0)
    };
    AxisCell {
        i0,
        t,
        lo,
        hi,
        scale,
    }
}

impl Stencil {
    #[inline]
    pub fn at(dims: &Dims, p: [f64; 3]) -> Self {
        let cx = axis_cell(p[0], dims[0]);
        let cy = axis_cell(p[1], dims[1]);
        let cz = axis_cell(p[2], dims[2]);
        Self::from_cells(dims, &cx, &cy, &cz)
    }

    #[inline]
    fn from_cells(dims: &Dims, cx: &AxisCell, cy: &AxisCell, cz: &AxisCell) -> Self {
        let sx = 1;
        let sy = dims[0];
        let sz = dims[0] * dims[1];
        let base = cx.i0 + sy * cy.i0 + sz * cz.i0;
        let wx = [1.0 - cx.t, cx.t];
        let wy = [1.0 - cy.t, cy.t];
        let wz = [1.0 - cz.t, cz.t];
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for k in 0..8 {
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            idx[k] = base + bx * sx + by * sy + bz * sz;
            w[k] = wx[bx] * wy[by] * wz[bz];
        }
        Self { idx, w }
    }

    #[inline]
    pub fn apply(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..8 {
            acc += self.w[k] * data[self.idx[k]];
        }
        acc
    }

    /// Sample a channel-major 3-channel buffer with `n` voxels per channel.
    #[inline]
    pub fn apply3(&self, data: &[f64], n: usize) -> [f64; 3] {
        [
            self.apply(&data[..n]),
            self.apply(&data[n..2 * n]),
            self.apply(&data[2 * n..3 * n]),
        ]
    }

    #[inline]
    pub fn scatter(&self, out: &mut [f64], g: f64) {
        for k in 0..8 {
            out[self.idx[k]] += self.w[k] * g;
        }
    }
}

#[inline]
fn cells_at(dims: &Dims, p: [f64; 3]) -> [AxisCell; 3] {
    [
        axis_cell(p[0], dims[0]),
        axis_cell(p[1], dims[1]),
        axis_cell(p[2], dims[2]),
    ]
}

/// Spatial derivative of the trilinear interpolant of `data` at `p`, matching
/// the cell choice of [`Stencil::at`].
#[inline]
pub(crate) fn sample_gradient(dims: &Dims, data: &[f64], p: [f64; 3]) -> [f64; 3] {
    let cells = cells_at(dims, p);
    let st = Stencil::from_cells(dims, &cells[0], &cells[1], &cells[2]);
    stencil_gradient(dims, data, &cells, &st).1
}

/// Sampled value plus spatial Jacobian for every channel of a 3-channel field.
/// Row `c` of the Jacobian holds the derivative of channel `c` along x, y, z.
#[inline]
pub(crate) fn sample_with_jacobian(
    dims: &Dims,
    data: &[f64],
    n: usize,
    p: [f64; 3],
) -> (Stencil, [f64; 3], [[f64; 3]; 3]) {
    let cells = cells_at(dims, p);
    let st = Stencil::from_cells(dims, &cells[0], &cells[1], &cells[2]);
    let mut val = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for c in 0..3 {
        (val[c], jac[c]) = stencil_gradient(dims, &data[c * n..(c + 1) * n], &cells, &st);
    }
    (st, val, jac)
}

/// Value and gradient from the 8 corners; axes that are clamped or sit on
/// an interior node fall back to the per-axis rule of [`AxisCell`].
#[inline]
fn stencil_gradient(dims: &Dims, data: &[f64], cells: &[AxisCell; 3], st: &Stencil) -> (f64, [f64; 3]) {
    let v: [f64; 8] = std::array::from_fn(|k| data[st.idx[k]]);
    let val = (0..8).map(|k| st.w[k] * v[k]).sum();
    let [cx, cy, cz] = cells;
    let (wx, wy, wz) = ([1.0 - cx.t, cx.t], [1.0 - cy.t, cy.t], [1.0 - cz.t, cz.t]);
    let mut grad = [
        wy[0] * wz[0] * (v[1] - v[0])
            + wy[1] * wz[0] * (v[3] - v[2])
            + wy[0] * wz[1] * (v[5] - v[4])
            + wy[1] * wz[1] * (v[7] - v[6]),
        wx[0] * wz[0] * (v[2] - v[0])
            + wx[1] * wz[0] * (v[3] - v[1])
            + wx[0] * wz[1] * (v[6] - v[4])
            + wx[1] * wz[1] * (v[7] - v[5]),
        wx[0] * wy[0] * (v[4] - v[0])
            + wx[1] * wy[0] * (v[5] - v[1])
            + wx[0] * wy[1] * (v[6] - v[2])
            + wx[1] * wy[1] * (v[7] - v[3]),
    ];
    for d in 0..3 {
        if cells[d].scale != 1.0 {
            grad[d] = cell_axis_derivative(dims, data, cells, d);
        }
    }
    (val, grad)
}

fn cell_axis_derivative(dims: &Dims, data: &[f64], cells: &[AxisCell; 3], d: usize) -> f64 {
    let cd = &cells[d];
    if cd.scale == 0.0 {
        return 0.0;
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (a, b) = ((d + 1) % 3, (d + 2) % 3);
    let (ca, cb) = (&cells[a], &cells[b]);
    let mut acc = 0.0;
    for (ja, wa) in [(ca.i0, 1.0 - ca.t), (ca.i0 + 1, ca.t)] {
        for (jb, wb) in [(cb.i0, 1.0 - cb.t), (cb.i0 + 1, cb.t)] {
            let base = ja * strides[a] + jb * strides[b];
            acc += wa * wb * (data[base + cd.hi * strides[d]] - data[base + cd.lo * strides[d]]);
        }
    }
    acc * cd.scale
}

/// Reverse-mode counterpart of [`ScalarVolume::sample`]: scatters each
/// upstream value onto the 8 corners with the forward weights.
pub fn trilinear_sample_adjoint(
    geom: &Geometry,
    points: &[GridPoint],
    upstream: &[f64],
) -> Result<ScalarVolume> {
    if points.len() != upstream.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} upstream values",
            points.len(),
            upstream.len()
        )));
    }
    let mut out = vec![0.0; geom.len()];
    for (p, &g) in points.iter().zip(upstream) {
        Stencil::at(&geom.dims, p.to_array()?).scatter(&mut out, g);
    }
    ScalarVolume::new(*geom, out)
}

/// Vector-valued variant of [`trilinear_sample_adjoint`].
pub fn trilinear_sample_adjoint_vector(
    geom: &Geometry,
    points: &[GridPoint],
    upstream: &[[f64; 3]],
) -> Result<VectorField> {
    if points.len() != upstream.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} upstream values",
            points.len(),
            upstream.len()
        )));
    }
    let mut out = VectorField::zeros(*geom);
    let chans = out.channels_mut();
    let [cx, cy, cz] = chans;
    for (p, g) in points.iter().zip(upstream) {
        let st = Stencil::at(&geom.dims, p.to_array()?);
        st.scatter(cx, g[0]);
        st.scatter(cy, g[1]);
        st.scatter(cz, g[2]);
    }
    Ok(out)
}

/// First derivative along one axis: central in the interior, one-sided at
/// the two faces.
fn axis_derivative(geom: &Geometry, data: &[f64], axis: usize, out: &mut [f64]) {
    let n = geom.dims[axis];
    let stride = [1, geom.dims[0], geom.dims[0] * geom.dims[1]][axis];
    for (i, o) in out.iter_mut().enumerate() {
        let c = geom.coords(i)[axis];
        *o = if c == 0 {
            data[i + stride] - data[i]
        } else if c == n - 1 {
            data[i] - data[i - stride]
        } else {
            0.5 * (data[i + stride] - data[i - stride])
        };
    }
}

/// Per-axis finite-difference gradient in voxel units.
pub fn central_gradient(vol: &ScalarVolume) -> Result<VectorField> {
    let geom = vol.geom;
    if geom.dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidDims("gradient needs >= 2 voxels per axis".into()));
    }
    let mut out = VectorField::zeros(geom);
    for (axis, ch) in out.channels_mut().into_iter().enumerate() {
        axis_derivative(&geom, &vol.data, axis, ch);
    }
    Ok(out)
}

/// Gradient of each channel of a vector field: `rows[c]` is the gradient of
/// component `c`.
pub(crate) fn field_gradient(field: &VectorField) -> [VectorField; 3] {
    let geom = field.geom;
    std::array::from_fn(|c| {
        let mut g = VectorField::zeros(geom);
        for (axis, ch) in g.channels_mut().into_iter().enumerate() {
            axis_derivative(&geom, field.channel(c), axis, ch);
        }
        g
    })
}

/// Source coordinate (in old voxel units) of new voxel `i` when resampling
/// with pixel-center alignment.
#[inline]
fn source_coord(i: usize, old: usize, new: usize) -> f64 {
    (i as f64 + 0.5) * (old as f64 / new as f64) - 0.5
}

/// Sample locations in the old grid for every voxel of the new grid.
pub(crate) fn resample_points(old: &Dims, new: &Dims) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(new[0] * new[1] * new[2]);
    for z in 0..new[2] {
        let pz = source_coord(z, old[2], new[2]);
        for y in 0..new[1] {
            let py = source_coord(y, old[1], new[1]);
            for x in 0..new[0] {
                pts.push([source_coord(x, old[0], new[0]), py, pz]);
            }
        }
    }
    pts
}

fn resampled_geometry(geom: &Geometry, new_dims: Dims) -> Result<Geometry> {
    if new_dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidDims(format!(
            "degenerate target dims {new_dims:?}"
        )));
    }
    let spacing = std::array::from_fn(|d| {
        geom.spacing[d] * geom.dims[d] as f64 / new_dims[d] as f64
    });
    Geometry::new(new_dims, spacing)
}

/// Trilinear resampling onto a grid with `new_dims` voxels covering the same
/// physical extent.
pub fn resample_to_dims(vol: &ScalarVolume, new_dims: Dims) -> Result<ScalarVolume> {
    let geom = resampled_geometry(&vol.geom, new_dims)?;
    if new_dims == vol.geom.dims {
        return Ok(vol.clone());
    }
    let data = resample_points(&vol.geom.dims, &new_dims)
        .into_iter()
        .map(|p| Stencil::at(&vol.geom.dims, p).apply(&vol.data))
        .collect();
    ScalarVolume::new(geom, data)
}

/// Resample by a uniform factor (`new_n = round(n * factor)`).
pub fn resample(vol: &ScalarVolume, factor: f64) -> Result<ScalarVolume> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("resample factor {factor}")));
    }
    let dims = vol.geom.dims.map(|n| (n as f64 * factor).round() as usize);
    resample_to_dims(vol, dims)
}

/// Resample to isotropic voxels of `spacing_mm`.
pub fn resample_isotropic(vol: &ScalarVolume, spacing_mm: f64) -> Result<ScalarVolume> {
    if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("target spacing {spacing_mm}")));
    }
    let dims = std::array::from_fn(|d| {
        (vol.geom.dims[d] as f64 * vol.geom.spacing[d] / spacing_mm).round() as usize
    });
    let mut out = resample_to_dims(vol, dims)?;
    out.geom.spacing = [spacing_mm; 3];
    Ok(out)
}

/// Trilinear upsampling (or downsampling) of a vector field. Components are
/// rescaled by the per-axis grid-size ratio so values stay in voxel units of
/// the new grid.
pub fn upsample_field(field: &VectorField, new_dims: Dims) -> Result<VectorField> {
    let geom = resampled_geometry(&field.geom, new_dims)?;
    if new_dims == field.geom.dims {
        return Ok(field.clone());
    }
    let ratio: [f64; 3] =
        std::array::from_fn(|d| new_dims[d] as f64 / field.geom.dims[d] as f64);
    let n_old = field.geom.len();
    let pts = resample_points(&field.geom.dims, &new_dims);
    let n = pts.len();
    let mut data = vec![0.0; 3 * n];
    for (i, p) in pts.into_iter().enumerate() {
        let v = Stencil::at(&field.geom.dims, p).apply3(&field.data, n_old);
        for c in 0..3 {
            data[c * n + i] = v[c] * ratio[c];
        }
    }
    VectorField::new(geom, data)
}

/// Adjoint of [`upsample_field`] with respect to the coarse field values.
pub fn upsample_field_adjoint(upstream: &VectorField, coarse: &Geometry) -> Result<VectorField> {
    let new_dims = upstream.geom.dims;
    if new_dims == coarse.dims {
        return Ok(upstream.clone());
    }
    let ratio: [f64; 3] = std::array::from_fn(|d| new_dims[d] as f64 / coarse.dims[d] as f64);
    let n = upstream.geom.len();
    let mut out = VectorField::zeros(*coarse);
    let [cx, cy, cz] = out.channels_mut();
    for (i, p) in resample_points(&coarse.dims, &new_dims).into_iter().enumerate() {
        let st = Stencil::at(&coarse.dims, p);
        st.scatter(cx, upstream.data[i] * ratio[0]);
        st.scatter(cy, upstream.data[n + i] * ratio[1]);
        st.scatter(cz, upstream.data[2 * n + i] * ratio[2]);
    }
    Ok(out)
}

/// Block-average downsampling by an integer factor; dims must be divisible.
pub fn average_pool(vol: &ScalarVolume, factor: usize) -> Result<ScalarVolume> {
    let dims = vol.geom.dims;
    if factor == 0 || dims.iter().any(|&n| n % factor != 0) {
        return Err(Error::InvalidDims(format!(
            "dims {dims:?} not divisible by pooling factor {factor}"
        )));
    }
    let cd = dims.map(|n| n / factor);
    let geom = Geometry::new(cd, vol.geom.spacing.map(|s| s * factor as f64))?;
    let mut out = vec![0.0; geom.len()];
    for i in 0..vol.geom.len() {
        let [x, y, z] = vol.geom.coords(i);
        out[geom.index(x / factor, y / factor, z / factor)] += vol.data[i];
    }
    let inv = 1.0 / (factor * factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    ScalarVolume::new(geom, out)
}

/// Separable Gaussian smoothing (standard deviation in voxels, kernel
/// truncated at 3 sigma, replicate padding).
pub fn gaussian_blur(vol: &ScalarVolume, sigma: f64) -> Result<ScalarVolume> {
    let mut data = vol.data.clone();
    blur_in_place(&mut data, &vol.geom.dims, sigma)?;
    ScalarVolume::new(vol.geom, data)
}

pub(crate) fn blur_in_place(data: &mut [f64], dims: &Dims, sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let [nx, ny, nz] = *dims;
    let strides = [1, nx, nx * ny];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for z in 0..if axis == 2 { 1 } else { nz } {
            for y in 0..if axis == 1 { 1 } else { ny } {
                for x in 0..if axis == 0 { 1 } else { nx } {
                    let start = x + nx * (y + ny * z);
                    line.clear();
                    line.extend((0..len).map(|k| data[start + k * stride]));
                    for k in 0..len {
                        let mut acc = 0.0;
                        for (j, w) in kernel.iter().enumerate() {
                            let src = (k as isize + j as isize - radius).clamp(0, len as isize - 1);
                            acc += w * line[src as usize];
                        }
                        data[start + k * stride] = acc;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Clamp CT intensities to [-1024, 1024] HU and map linearly to [-1, 1].
pub fn clip_rescale(vol: &ScalarVolume) -> ScalarVolume {
    vol.map(|v| v.clamp(-1024.0, 1024.0) / 1024.0)
}

/// Fixed-order pairwise summation.
pub(crate) fn sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 256;
    if xs.len() <= LEAF {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        sum(a) + sum(b)
    }
}
