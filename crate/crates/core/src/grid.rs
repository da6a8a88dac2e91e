//! Grid topology and the value types shared by the simulator, the network and
//! the trainer.
//!
//! Square grids are indexed row-major (`row * width + col`). Hex grids use
//! axial coordinates `(q, r)` laid out as a `width x height` rhombus, indexed
//! `r * width + q`. Neither topology wraps around at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridId(pub usize);

impl GridId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Square8,
    Hex6,
}

const SQUARE_OFFSETS: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

const AXIAL_OFFSETS: [(i64, i64); 6] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)];

const SQRT3_2: f64 = 0.866_025_403_784_438_6;

#[derive(Debug, Clone, PartialEq)]
pub struct GridTopology {
    kind: TopologyKind,
    width: usize,
    height: usize,
    neighbors: Vec<Vec<GridId>>,
}

impl GridTopology {
    pub fn new(kind: TopologyKind, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        let offsets: &[(i64, i64)] = match kind {
            TopologyKind::Square8 => &SQUARE_OFFSETS,
            TopologyKind::Hex6 => &AXIAL_OFFSETS,
        };
        let mut neighbors = Vec::with_capacity(width * height);
        for row in 0..height as i64 {
            for col in 0..width as i64 {
                let adj = offsets
                    .iter()
                    .filter_map(|&(dc, dr)| {
                        let (c, r) = (col + dc, row + dr);
                        (c >= 0 && r >= 0 && c < width as i64 && r < height as i64)
                            .then(|| GridId(r as usize * width + c as usize))
                    })
                    .collect();
                neighbors.push(adj);
            }
        }
        Ok(Self {
            kind,
            width,
            height,
            neighbors,
        })
    }

    pub fn square(width: usize, height: usize) -> Result<Self> {
        Self::new(TopologyKind::Square8, width, height)
    }

    pub fn hex(width: usize, height: usize) -> Result<Self> {
        Self::new(TopologyKind::Hex6, width, height)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid_count(&self) -> usize {
        self.width * self.height
    }

    pub fn grids(&self) -> impl Iterator<Item = GridId> {
        (0..self.grid_count()).map(GridId)
    }

    pub fn contains(&self, g: GridId) -> bool {
        g.0 < self.grid_count()
    }

    fn check(&self, g: GridId) -> Result<()> {
        if self.contains(g) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "grid {} outside topology with {} grids",
                g.0,
                self.grid_count()
            )))
        }
    }

    pub fn neighbors(&self, g: GridId) -> Result<&[GridId]> {
        self.check(g)?;
        Ok(&self.neighbors[g.0])
    }

    /// `(col, row)` for square grids, axial `(q, r)` for hex grids.
    pub fn cell(&self, g: GridId) -> (usize, usize) {
        (g.0 % self.width, g.0 / self.width)
    }

    pub fn grid_at(&self, col: usize, row: usize) -> Result<GridId> {
        if col < self.width && row < self.height {
            Ok(GridId(row * self.width + col))
        } else {
            Err(Error::domain(format!(
                "cell ({col}, {row}) outside {}x{} grid",
                self.width, self.height
            )))
        }
    }

    /// Center of a cell in the continuous plane. Adjacent cell centers are at
    /// distance 1 (orthogonal) or sqrt(2) (diagonal) on square grids and at
    /// distance 1 on hex grids.
    pub fn center(&self, g: GridId) -> [f64; 2] {
        let (c, r) = self.cell(g);
        let (c, r) = (c as f64, r as f64);
        match self.kind {
            TopologyKind::Square8 => [c + 0.5, r + 0.5],
            TopologyKind::Hex6 => [c + 0.5 * r + 0.5, r * SQRT3_2 + 0.5],
        }
    }

    /// Extent of the continuous plane covered by the grid: points in
    /// `[0, w] x [0, h]`.
    pub fn extent(&self) -> [f64; 2] {
        let (w, h) = (self.width as f64, self.height as f64);
        match self.kind {
            TopologyKind::Square8 => [w, h],
            TopologyKind::Hex6 => [w + 0.5 * (h - 1.0), (h - 1.0) * SQRT3_2 + 1.0],
        }
    }

    /// Nearest cell to a continuous point, clipped to the grid.
    pub fn locate(&self, x: f64, y: f64) -> GridId {
        let clamp = |v: f64, n: usize| -> usize {
            if v.is_nan() || v < 0.0 {
                0
            } else {
                (v as usize).min(n - 1)
            }
        };
        match self.kind {
            TopologyKind::Square8 => {
                GridId(clamp(y.floor(), self.height) * self.width + clamp(x.floor(), self.width))
            }
            TopologyKind::Hex6 => {
                let rf = (y - 0.5) / SQRT3_2;
                let qf = x - 0.5 - 0.5 * rf;
                let (q, r) = cube_round(qf, rf);
                let q = q.clamp(0, self.width as i64 - 1) as usize;
                let r = r.clamp(0, self.height as i64 - 1) as usize;
                GridId(r * self.width + q)
            }
        }
    }

    pub fn distance(&self, a: GridId, b: GridId) -> f64 {
        let (pa, pb) = (self.center(a), self.center(b));
        (pa[0] - pb[0]).hypot(pa[1] - pb[1])
    }

    /// Cell coordinates scaled into `(0, 1]`, so that every real cell is
    /// distinguishable from the all-zero "no orders" sentinel.
    pub fn normalized_coords(&self, g: GridId) -> [f64; 2] {
        let (c, r) = self.cell(g);
        [
            (c + 1) as f64 / self.width as f64,
            (r + 1) as f64 / self.height as f64,
        ]
    }

    /// Longest distance between a cell and any of its neighbors.
    pub fn max_neighbor_distance(&self) -> f64 {
        self.grids()
            .flat_map(|g| self.neighbors[g.0].iter().map(move |&n| self.distance(g, n)))
            .fold(0.0, f64::max)
    }
}

fn cube_round(q: f64, r: f64) -> (i64, i64) {
    let s = -q - r;
    let (mut rq, mut rr, rs) = (q.round(), r.round(), s.round());
    let (dq, dr, ds) = ((rq - q).abs(), (rr - r).abs(), (rs - s).abs());
    if dq > dr && dq > ds {
        rq = -rr - rs;
    } else if dr > ds {
        rr = -rq - rs;
    }
    (rq as i64, rr as i64)
}

/// A dispatch action. Virtual orders stand for "stay where you are".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: u64,
    pub source: GridId,
    pub dest: GridId,
    pub duration: u32,
    pub price: f64,
    #[serde(rename = "virtual")]
    pub is_virtual: bool,
}

pub const VIRTUAL_ORDER_ID: u64 = u64::MAX;

impl Order {
    pub fn virtual_at(grid: GridId) -> Self {
        Self {
            id: VIRTUAL_ORDER_ID,
            source: grid,
            dest: grid,
            duration: 1,
            price: 0.0,
            is_virtual: true,
        }
    }

    pub fn validate(&self, topo: &GridTopology) -> Result<()> {
        topo.check(self.source)?;
        topo.check(self.dest)?;
        if self.duration == 0 {
            return Err(Error::domain("order duration must be at least 1"));
        }
        if !(self.price.is_finite() && self.price >= 0.0) {
            return Err(Error::domain(format!("invalid order price {}", self.price)));
        }
        if self.is_virtual {
            if self.source != self.dest || self.price != 0.0 {
                return Err(Error::domain("virtual order must stay in place at price 0"));
            }
        } else if !topo.neighbors[self.source.0].contains(&self.dest) {
            return Err(Error::domain(format!(
                "order {} destination {} is not adjacent to source {}",
                self.id, self.dest.0, self.source.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleStatus {
    Idle,
    Serving,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: VehicleId,
    /// Current grid while idle, destination grid while serving.
    pub location: GridId,
    pub status: VehicleStatus,
    pub available_at: u32,
}

/// How the destination summary of a grid's orders is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DestEncoding {
    /// Mean of normalized `(x, y)` destination coordinates.
    #[default]
    MeanCoords,
    /// Mean of one-hot destination indicators, one entry per grid.
    MeanOneHot,
}

impl DestEncoding {
    pub fn dim(self, topo: &GridTopology) -> usize {
        match self {
            DestEncoding::MeanCoords => 2,
            DestEncoding::MeanOneHot => topo.grid_count(),
        }
    }
}

/// Shared per-grid state seen by every agent in that grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub grid: GridId,
    pub idle_count: usize,
    pub order_count: usize,
    pub dest_distribution: Vec<f64>,
}

impl Observation {
    /// Builds the observation for `grid` from its real orders. A grid with no
    /// orders gets the all-zero destination vector.
    pub fn new(
        grid: GridId,
        idle_count: usize,
        orders: &[Order],
        topo: &GridTopology,
        encoding: DestEncoding,
    ) -> Self {
        let dim = encoding.dim(topo);
        let mut dest = vec![0.0; dim];
        let real: Vec<&Order> = orders.iter().filter(|o| !o.is_virtual).collect();
        if !real.is_empty() {
            let w = 1.0 / real.len() as f64;
            for o in &real {
                match encoding {
                    DestEncoding::MeanCoords => {
                        let c = topo.normalized_coords(o.dest);
                        dest[0] += w * c[0];
                        dest[1] += w * c[1];
                    }
                    DestEncoding::MeanOneHot => dest[o.dest.0] += w,
                }
            }
        }
        Self {
            grid,
            idle_count,
            order_count: real.len(),
            dest_distribution: dest,
        }
    }
}

/// Scales raw observation counts into network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationScale {
    pub idle: f64,
    pub orders: f64,
}

pub fn encode_observation(obs: &Observation, topo: &GridTopology, scale: ObservationScale) -> Vec<f64> {
    let c = topo.normalized_coords(obs.grid);
    let mut v = Vec::with_capacity(4 + obs.dest_distribution.len());
    v.push(c[0]);
    v.push(c[1]);
    v.push(obs.idle_count as f64 / scale.idle);
    v.push(obs.order_count as f64 / scale.orders);
    v.extend_from_slice(&obs.dest_distribution);
    v
}

pub fn state_dim(topo: &GridTopology, encoding: DestEncoding) -> usize {
    4 + encoding.dim(topo)
}

pub const ACTION_DIM: usize = 6;

/// Network input for one order: normalized source coords, destination
/// coords, duration and price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionFeature(pub [f64; ACTION_DIM]);

impl ActionFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceNorm {
    pub max_price: f64,
    pub max_duration: u32,
}

pub fn encode_action(order: &Order, topo: &GridTopology, norm: PriceNorm) -> ActionFeature {
    let s = topo.normalized_coords(order.source);
    let d = topo.normalized_coords(order.dest);
    let duration = (order.duration as f64 / norm.max_duration.max(1) as f64).min(1.0);
    let price = if norm.max_price > 0.0 {
        order.price / norm.max_price
    } else {
        0.0
    };
    if price > 1.0 {
        log::warn!(
            "order {} price {} exceeds normalization bound {}; clamped",
            order.id,
            order.price,
            norm.max_price
        );
    }
    ActionFeature([s[0], s[1], d[0], d[1], duration, price.clamp(0.0, 1.0)])
}
