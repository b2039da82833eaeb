//! The 2D selective scan: atrous parity partitioning, four directional routes,
//! and the SS2D layer that scans every route and sums the results.

use std::sync::Arc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, DepthwiseConv2d, LayerNorm, Linear, ParamId, ParamStore};
use crate::ssm::{delta_bias_init, s4d_real_a_log, InputDiscretization};
use crate::tensor::{Real, Tensor};

/// A `height × width × channels` feature map, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Real> PatchGrid<T> {
    /// Zero-sized grids are allowed so that partitions of thin grids stay representable.
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("patch_grid", "channels must be positive"));
        }
        if values.len() != height * width * channels {
            return Err(Error::shape(
                "patch_grid",
                format!("{height}x{width}x{channels} grid needs {} values, got {}", height * width * channels, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("patch_grid", "non-finite entry"));
        }
        Ok(PatchGrid { height, width, channels, values })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        PatchGrid { height, width, channels, values: vec![T::zero(); height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    values.push(f(r, c, k));
                }
            }
        }
        PatchGrid { height, width, channels, values }
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

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn cell(&self, r: usize, c: usize) -> &[T] {
        let i = (r * self.width + c) * self.channels;
        &self.values[i..i + self.channels]
    }

    fn cell_mut(&mut self, r: usize, c: usize) -> &mut [T] {
        let i = (r * self.width + c) * self.channels;
        &mut self.values[i..i + self.channels]
    }

    /// Swaps the spatial axes.
    pub fn transpose(&self) -> Self {
        let mut out = PatchGrid::zeros(self.width, self.height, self.channels);
        for r in 0..self.height {
            for c in 0..self.width {
                out.cell_mut(c, r).copy_from_slice(self.cell(r, c));
            }
        }
        out
    }

    /// As a `[1, H, W, C]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        Tensor::new([1, self.height, self.width, self.channels], self.values.clone())
    }
}

/// Order in which a route visits the cells of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    RowForward,
    RowReverse,
    ColForward,
    ColReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] =
        [ScanDirection::RowForward, ScanDirection::RowReverse, ScanDirection::ColForward, ScanDirection::ColReverse];

    /// The direction that visits a transposed grid in the same cell order.
    pub fn transposed(self) -> Self {
        match self {
            ScanDirection::RowForward => ScanDirection::ColForward,
            ScanDirection::RowReverse => ScanDirection::ColReverse,
            ScanDirection::ColForward => ScanDirection::RowForward,
            ScanDirection::ColReverse => ScanDirection::RowReverse,
        }
    }

    /// Row-major cell indices of an `h × w` grid in visiting order.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row_major = (0..h * w).collect::<Vec<_>>();
        let col_major = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect::<Vec<_>>();
        match self {
            ScanDirection::RowForward => row_major,
            ScanDirection::RowReverse => row_major.into_iter().rev().collect(),
            ScanDirection::ColForward => col_major,
            ScanDirection::ColReverse => col_major.into_iter().rev().collect(),
        }
    }
}

/// Which cells a route retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AtrousGroup {
    Dense,
    /// Cells with `(r mod 2, c mod 2) == (row, col)`.
    Parity { row: usize, col: usize },
}

impl AtrousGroup {
    pub const PARITIES: [AtrousGroup; 4] = [
        AtrousGroup::Parity { row: 0, col: 0 },
        AtrousGroup::Parity { row: 0, col: 1 },
        AtrousGroup::Parity { row: 1, col: 0 },
        AtrousGroup::Parity { row: 1, col: 1 },
    ];

    /// Shape of the retained subgrid of an `h × w` grid.
    pub fn extent(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            AtrousGroup::Dense => (h, w),
            AtrousGroup::Parity { row, col } => ((h + 1 - row.min(h + 1)) / 2, (w + 1 - col.min(w + 1)) / 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScanRoute {
    pub direction: ScanDirection,
    pub group: AtrousGroup,
}

impl ScanRoute {
    /// Row-major indices into the full `h × w` grid in sequence order.
    pub fn cell_order(self, h: usize, w: usize) -> Vec<usize> {
        match self.group {
            AtrousGroup::Dense => self.direction.order(h, w),
            AtrousGroup::Parity { row, col } => {
                let (sh, sw) = self.group.extent(h, w);
                self.direction
                    .order(sh, sw)
                    .into_iter()
                    .map(|i| {
                        let (r, c) = (i / sw, i % sw);
                        (2 * r + row) * w + 2 * c + col
                    })
                    .collect()
            }
        }
    }
}

/// Splits a grid into the four parity subgrids `(0,0), (0,1), (1,0), (1,1)`.
pub fn atrous_partition<T: Real>(grid: &PatchGrid<T>, step: usize) -> Result<[PatchGrid<T>; 4]> {
    if step != 2 {
        return Err(Error::Unsupported(format!("atrous step {step}; only step 2 is implemented")));
    }
    let (h, w, ch) = (grid.height, grid.width, grid.channels);
    Ok(AtrousGroup::PARITIES.map(|g| {
        let AtrousGroup::Parity { row, col } = g else { unreachable!() };
        let (sh, sw) = g.extent(h, w);
        let mut sub = PatchGrid::zeros(sh, sw, ch);
        for r in 0..sh {
            for c in 0..sw {
                sub.cell_mut(r, c).copy_from_slice(grid.cell(2 * r + row, 2 * c + col));
            }
        }
        sub
    }))
}

/// Inverse of [`atrous_partition`] for an original `height × width` grid.
pub fn atrous_merge<T: Real>(parts: &[PatchGrid<T>; 4], height: usize, width: usize) -> Result<PatchGrid<T>> {
    let ch = parts[0].channels;
    for (p, g) in parts.iter().zip(AtrousGroup::PARITIES) {
        if (p.height, p.width) != g.extent(height, width) || p.channels != ch {
            return Err(Error::contract(format!(
                "subgrid {g:?} is {}x{}x{}, a {height}x{width} grid needs {:?}x{ch}",
                p.height,
                p.width,
                p.channels,
                g.extent(height, width)
            )));
        }
    }
    let mut out = PatchGrid::zeros(height, width, ch);
    for (p, g) in parts.iter().zip(AtrousGroup::PARITIES) {
        let AtrousGroup::Parity { row, col } = g else { unreachable!() };
        for r in 0..p.height {
            for c in 0..p.width {
                out.cell_mut(2 * r + row, 2 * c + col).copy_from_slice(p.cell(r, c));
            }
        }
    }
    Ok(out)
}

/// Flattens a grid into an `L × C` sequence along `direction`.
pub fn route_traverse<T: Real>(grid: &PatchGrid<T>, direction: ScanDirection) -> Vec<T> {
    let mut seq = Vec::with_capacity(grid.values.len());
    for i in direction.order(grid.height, grid.width) {
        seq.extend_from_slice(&grid.values[i * grid.channels..(i + 1) * grid.channels]);
    }
    seq
}

/// Places an `L × C` sequence back onto a `height × width` grid.
pub fn route_restore<T: Real>(
    seq: &[T],
    direction: ScanDirection,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<PatchGrid<T>> {
    if channels == 0 || seq.len() != height * width * channels {
        return Err(Error::contract(format!(
            "sequence of {} values cannot fill a {height}x{width}x{channels} grid",
            seq.len()
        )));
    }
    let mut values = vec![T::zero(); seq.len()];
    for (pos, i) in direction.order(height, width).into_iter().enumerate() {
        values[i * channels..(i + 1) * channels].copy_from_slice(&seq[pos * channels..(pos + 1) * channels]);
    }
    PatchGrid::new(height, width, channels, values)
}

/// Row gather for one direction over a batch: sequence rows, their inverse, and segment lengths.
#[derive(Debug, Clone)]
pub struct RoutePlan {
    pub gather: Arc<Vec<usize>>,
    pub scatter: Arc<Vec<usize>>,
    pub segments: Arc<Vec<usize>>,
}

impl RoutePlan {
    pub fn new(batch: usize, h: usize, w: usize, direction: ScanDirection, atrous: bool) -> Self {
        let groups: &[AtrousGroup] = if atrous { &AtrousGroup::PARITIES } else { &[AtrousGroup::Dense] };
        let mut gather = Vec::with_capacity(batch * h * w);
        let mut segments = Vec::new();
        for b in 0..batch {
            for &group in groups {
                let order = ScanRoute { direction, group }.cell_order(h, w);
                if order.is_empty() {
                    continue;
                }
                segments.push(order.len());
                gather.extend(order.into_iter().map(|i| b * h * w + i));
            }
        }
        let mut scatter = vec![0; gather.len()];
        for (pos, &i) in gather.iter().enumerate() {
            scatter[i] = pos;
        }
        RoutePlan { gather: Arc::new(gather), scatter: Arc::new(scatter), segments: Arc::new(segments) }
    }
}

/// Dimensions of one SS2D layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ss2dConfig {
    pub channels: usize,
    pub state_size: usize,
    pub expansion: usize,
    /// Parity-group scanning; `false` scans each route over the dense grid.
    pub atrous: bool,
    pub discretization: InputDiscretization,
}

impl Ss2dConfig {
    pub fn inner(&self) -> usize {
        self.channels * self.expansion
    }

    pub fn dt_rank(&self) -> usize {
        self.channels.div_ceil(16)
    }
}

/// Parameters owned by one directional route.
#[derive(Debug, Clone)]
pub struct RouteParams {
    pub x_dt: Linear,
    pub x_b: Linear,
    pub x_c: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
}

#[derive(Debug, Clone)]
pub struct Ss2d {
    pub cfg: Ss2dConfig,
    pub in_x: Linear,
    pub in_z: Linear,
    pub conv: DepthwiseConv2d,
    pub routes: Vec<RouteParams>,
    /// Direction scanned by each entry of `routes`.
    pub directions: [ScanDirection; 4],
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
}

impl Ss2d {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: Ss2dConfig) -> Result<Self> {
        let (c, di, n, r) = (cfg.channels, cfg.inner(), cfg.state_size, cfg.dt_rank());
        let in_x = Linear::new(&mut b.scope("in_x"), c, di, false, 0.02)?;
        let in_z = Linear::new(&mut b.scope("in_z"), c, di, false, 0.02)?;
        let conv = DepthwiseConv2d::new(&mut b.scope("conv"), di, 3, 1, true)?;
        let mut routes = Vec::with_capacity(4);
        for k in 0..4 {
            let mut rb = b.scope(&format!("route{k}"));
            let x_dt = Linear::new(&mut rb.scope("x_dt"), di, r, false, 0.02)?;
            let x_b = Linear::new(&mut rb.scope("x_b"), di, n, false, 0.02)?;
            let x_c = Linear::new(&mut rb.scope("x_c"), di, n, false, 0.02)?;
            let dt_proj = {
                let mut db = rb.scope("dt_proj");
                let bound = (r as f64).powf(-0.5);
                let w = db.uniform(r * di, bound);
                let weight = db.param("weight", &[r, di], w)?;
                let bias_vals = delta_bias_init(&mut *db.rng, di, 1e-3, 1e-1);
                let bias = db.param("bias", &[di], bias_vals)?;
                Linear { weight, bias: Some(bias), in_dim: r, out_dim: di }
            };
            let a_log = rb.param("a_log", &[di, n], s4d_real_a_log(di, n))?;
            let d = rb.param("d", &[di], vec![1.0; di])?;
            routes.push(RouteParams { x_dt, x_b, x_c, dt_proj, a_log, d });
        }
        let out_norm = LayerNorm::new(&mut b.scope("out_norm"), di)?;
        let out_proj = Linear::new(&mut b.scope("out_proj"), di, c, false, 0.02)?;
        Ok(Ss2d { cfg, in_x, in_z, conv, routes, directions: ScanDirection::ALL, out_norm, out_proj })
    }

    pub fn param_count(&self) -> usize {
        let (di, n) = (self.cfg.inner(), self.cfg.state_size);
        let per_route: usize = self
            .routes
            .iter()
            .map(|r| r.x_dt.param_count() + r.x_b.param_count() + r.x_c.param_count() + r.dt_proj.param_count() + di * n + di)
            .sum();
        self.in_x.param_count()
            + self.in_z.param_count()
            + self.conv.param_count()
            + per_route
            + self.out_norm.param_count()
            + self.out_proj.param_count()
    }

    /// Multiply-accumulates for a `batch × h × w` input.
    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let rows = batch * h * w;
        let (di, n) = (self.cfg.inner() as u64, self.cfg.state_size as u64);
        let per_route: u64 = self
            .routes
            .iter()
            .map(|r| {
                r.x_dt.macs(rows) + r.x_b.macs(rows) + r.x_c.macs(rows) + r.dt_proj.macs(rows)
                    // recurrence update and readout
                    + 2 * rows as u64 * di * n
            })
            .sum();
        self.in_x.macs(rows) + self.in_z.macs(rows) + self.conv.macs(batch, h, w) + per_route + self.out_proj.macs(rows)
    }

    /// `[B, H, W, C] → [B, H, W, C]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.channels {
            return Err(Error::shape("ss2d", format!("expected [B, H, W, {}], got {shape:?}", self.cfg.channels)));
        }
        let (bsz, h, w) = (shape[0], shape[1], shape[2]);
        let (di, rows) = (self.cfg.inner(), bsz * h * w);
        let xi = self.in_x.forward(ctx, x)?;
        let xi = self.conv.forward(ctx, xi)?;
        let xi = ctx.g.silu(xi)?;
        let flat = ctx.g.reshape(xi, &[rows, di])?;
        let mut acc: Option<Var> = None;
        for (route, &dir) in self.routes.iter().zip(&self.directions) {
            let plan = RoutePlan::new(bsz, h, w, dir, self.cfg.atrous);
            let seq = ctx.g.gather_rows(flat, plan.gather.clone())?;
            let dt = route.x_dt.forward(ctx, seq)?;
            let dt = route.dt_proj.forward(ctx, dt)?;
            let dt = ctx.g.softplus(dt)?;
            let bm = route.x_b.forward(ctx, seq)?;
            let cm = route.x_c.forward(ctx, seq)?;
            let a_log = ctx.p(route.a_log);
            let a = ctx.g.exp(a_log)?;
            let a = ctx.g.scale(a, -T::one())?;
            let d = ctx.p(route.d);
            let y = ctx.g.selective_scan(seq, dt, a, bm, cm, d, plan.segments.clone(), self.cfg.discretization)?;
            let y = ctx.g.gather_rows(y, plan.scatter.clone())?;
            acc = Some(match acc {
                None => y,
                Some(s) => ctx.g.add(s, y)?,
            });
        }
        let y = acc.expect("four routes");
        let y = self.out_norm.forward(ctx, y)?;
        let z = self.in_z.forward(ctx, x)?;
        let z = ctx.g.reshape(z, &[rows, di])?;
        let z = ctx.g.silu(z)?;
        let y = ctx.g.mul(y, z)?;
        let y = self.out_proj.forward(ctx, y)?;
        ctx.g.reshape(y, &shape)
    }
}

/// Runs one SS2D layer on a single grid with the weights in `store`.
pub fn ss2d_apply<T: Real>(grid: &PatchGrid<T>, layer: &Ss2d, store: &ParamStore<T>) -> Result<PatchGrid<T>> {
    if grid.channels != layer.cfg.channels {
        return Err(Error::shape(
            "ss2d_apply",
            format!("grid has {} channels, layer expects {}", grid.channels, layer.cfg.channels),
        ));
    }
    let mut ctx = Ctx::inference(store);
    let x = ctx.g.constant(grid.to_tensor()?);
    let y = layer.forward(&mut ctx, x)?;
    PatchGrid::new(grid.height, grid.width, grid.channels, ctx.g.value(y).to_vec())
}
