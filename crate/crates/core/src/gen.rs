//! Deterministic instance generation for the S-1..S-9 / L-1..L-15 families
//! and for arbitrary parameterized configurations.
//!
//! Randomness comes from ChaCha8 with one stream per entity class, so that
//! changing how robots are placed never perturbs the order or tote draws.

use crate::domain::{
    Layout, Location, Order, OrderId, OrderLine, Robot, RobotId, SkuId, SpeedParams, StationId,
    SystemKind, Tote, ToteId, TotePlace, WarehouseInstance, Workstation, INSTANCE_VERSION,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const STREAM_ORDERS: u64 = 1;
const STREAM_TOTES: u64 = 2;
const STREAM_ROBOTS: u64 = 3;

/// Transverse aisle count used when the layout is derived from the tote count.
pub const DEFAULT_AISLES: u32 = 4;
pub const DEFAULT_SLOTS: u32 = 6;
pub const DEFAULT_ARRIVAL_HORIZON: f64 = 600.0;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("unknown instance preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("layout holds {capacity} storage cells but {totes} totes were requested")]
    LayoutTooSmall { capacity: u64, totes: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub name: String,
    pub skus: u32,
    pub orders: u32,
    pub robots: u32,
    pub workstations: u32,
    pub totes: u32,
    pub kind: SystemKind,
    pub seed: u64,
    /// Orders arrive uniformly over `[0, arrival_horizon]`; 0 means static.
    pub arrival_horizon: f64,
    pub slots_per_station: u32,
    /// Defaults to the system kind's archetype capacity.
    pub robot_capacity: Option<u32>,
    /// SKU popularity skew; 0 is uniform.
    pub zipf_exponent: f64,
    /// Explicit layout; derived from the tote count when absent.
    pub layout: Option<Layout>,
    pub speed: SpeedParams,
}

impl InstanceConfig {
    pub fn new(name: impl Into<String>, skus: u32, orders: u32, robots: u32, workstations: u32, totes: u32) -> Self {
        Self {
            name: name.into(),
            skus,
            orders,
            robots,
            workstations,
            totes,
            kind: SystemKind::MultiTote2D,
            seed: 0,
            arrival_horizon: 0.0,
            slots_per_station: DEFAULT_SLOTS,
            robot_capacity: None,
            zipf_exponent: 0.0,
            layout: None,
            speed: SpeedParams::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_kind(mut self, kind: SystemKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidConfig(m.to_string()));
        if self.skus == 0 && self.orders > 0 {
            return bad("orders need at least one sku");
        }
        if self.totes < self.skus {
            return bad("totes must be at least skus (one tote per sku minimum)");
        }
        if self.orders > 0 && (self.robots == 0 || self.workstations == 0) {
            return bad("orders need at least one robot and one workstation");
        }
        if self.slots_per_station == 0 {
            return bad("slots_per_station must be at least 1");
        }
        if !(self.arrival_horizon.is_finite() && self.arrival_horizon >= 0.0) {
            return bad("arrival_horizon must be finite and non-negative");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be finite and non-negative");
        }
        if let Some(c) = self.robot_capacity {
            if c < self.kind.min_capacity() {
                return bad("robot capacity below the system kind minimum");
            }
        }
        Ok(())
    }
}

/// (name, skus, orders, robots, workstations, totes)
const PRESETS: &[(&str, u32, u32, u32, u32, u32)] = &[
    ("S-1", 20, 10, 3, 3, 100),
    ("S-2", 25, 12, 4, 3, 125),
    ("S-3", 30, 14, 4, 4, 150),
    ("S-4", 35, 15, 5, 4, 175),
    ("S-5", 40, 15, 5, 5, 200),
    ("S-6", 45, 16, 5, 5, 225),
    ("S-7", 50, 18, 6, 5, 250),
    ("S-8", 55, 18, 6, 6, 275),
    ("S-9", 60, 20, 6, 6, 300),
    ("L-1", 60, 50, 10, 5, 500),
    ("L-2", 80, 60, 15, 5, 650),
    ("L-3", 100, 70, 20, 5, 800),
    ("L-4", 120, 80, 25, 10, 1000),
    ("L-5", 140, 90, 30, 10, 1200),
    ("L-6", 160, 100, 35, 10, 1400),
    ("L-7", 180, 110, 40, 15, 1600),
    ("L-8", 200, 120, 45, 15, 1800),
    ("L-9", 220, 130, 50, 15, 2000),
    ("L-10", 250, 150, 55, 15, 2200),
    ("L-11", 300, 180, 60, 20, 2500),
    ("L-12", 350, 210, 60, 20, 3000),
    ("L-13", 400, 250, 65, 20, 3500),
    ("L-14", 500, 300, 65, 20, 4000),
    ("L-15", 600, 350, 70, 25, 5000),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

/// Looks up a named configuration. S-presets are static, L-presets use a
/// 600 s arrival horizon. The seed is 0.
pub fn preset(name: &str) -> Result<InstanceConfig, GenError> {
    let &(label, skus, orders, robots, workstations, totes) = PRESETS
        .iter()
        .find(|p| p.0 == name)
        .ok_or_else(|| GenError::UnknownPreset(name.to_string()))?;
    let mut cfg = InstanceConfig::new(label, skus, orders, robots, workstations, totes);
    if label.starts_with('L') {
        cfg.arrival_horizon = DEFAULT_ARRIVAL_HORIZON;
    }
    Ok(cfg)
}

fn stream(seed: u64, class: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class);
    rng
}

fn derive_layout(cfg: &InstanceConfig) -> Layout {
    let levels = cfg.kind.default_levels();
    let per_column = DEFAULT_AISLES * levels;
    let storage_columns = cfg.totes.div_ceil(per_column).max(1);
    Layout { aisles: DEFAULT_AISLES, columns: storage_columns + 1, levels }
}

fn sample_skus(rng: &mut ChaCha8Rng, skus: u32, count: usize, zipf: f64) -> Vec<SkuId> {
    if zipf == 0.0 {
        return rand::seq::index::sample(rng, skus as usize, count)
            .into_iter()
            .map(|i| SkuId(i as u32))
            .collect();
    }
    let mut pool: Vec<(u32, f64)> = (0..skus).map(|k| (k, 1.0 / ((k + 1) as f64).powf(zipf))).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (i, p) in pool.iter().enumerate() {
            if x < p.1 {
                pick = i;
                break;
            }
            x -= p.1;
        }
        out.push(SkuId(pool.remove(pick).0));
    }
    out
}

/// Builds the instance described by `cfg`; a pure function of `cfg`.
pub fn generate(cfg: &InstanceConfig) -> Result<WarehouseInstance, GenError> {
    cfg.validate()?;
    let layout = cfg.layout.unwrap_or_else(|| derive_layout(cfg));
    if layout.storage_capacity() < cfg.totes as u64 {
        return Err(GenError::LayoutTooSmall { capacity: layout.storage_capacity(), totes: cfg.totes });
    }
    if layout.aisles == 0 || layout.columns == 0 || layout.levels == 0 {
        return Err(GenError::InvalidConfig("layout dimensions must be positive".into()));
    }

    let workstations: Vec<Workstation> = (0..cfg.workstations)
        .map(|i| Workstation {
            id: StationId(i),
            position: Location::new(i % layout.aisles, 0, 0),
            slots: cfg.slots_per_station,
            active_orders: Vec::new(),
            tote_buffer: Vec::new(),
        })
        .collect();

    // Orders.
    let mut rng = stream(cfg.seed, STREAM_ORDERS);
    let max_lines = cfg.skus.min(3);
    let mut drafts: Vec<(f64, Vec<OrderLine>, u32)> = Vec::with_capacity(cfg.orders as usize);
    for _ in 0..cfg.orders {
        let n = rng.gen_range(1..=max_lines) as usize;
        let lines = sample_skus(&mut rng, cfg.skus, n, cfg.zipf_exponent)
            .into_iter()
            .map(|sku| OrderLine { sku, quantity: 1 })
            .collect();
        let priority = rng.gen_range(0..=2);
        let arrival = if cfg.arrival_horizon > 0.0 {
            (rng.gen::<f64>() * cfg.arrival_horizon * 1000.0).round() / 1000.0
        } else {
            0.0
        };
        drafts.push((arrival, lines, priority));
    }
    // Stable sort keeps generation order among equal arrivals.
    drafts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let orders: Vec<Order> = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (arrival_time, lines, priority))| Order {
            id: OrderId(i as u32),
            lines,
            priority,
            arrival_time,
        })
        .collect();

    // Totes: shuffle the storage cells, then fill them with SKUs round-robin.
    let mut rng = stream(cfg.seed, STREAM_TOTES);
    let mut cells = Vec::with_capacity(layout.storage_capacity() as usize);
    for aisle in 0..layout.aisles {
        for column in 1..layout.columns {
            for level in 0..layout.levels {
                cells.push(Location::new(aisle, column, level));
            }
        }
    }
    cells.shuffle(&mut rng);
    let quantity = cfg.orders.max(50);
    let totes: Vec<Tote> = cells
        .into_iter()
        .take(cfg.totes as usize)
        .enumerate()
        .map(|(i, home)| Tote {
            id: ToteId(i as u32),
            sku: SkuId(i as u32 % cfg.skus.max(1)),
            quantity,
            home,
            place: TotePlace::InStorage(home),
        })
        .collect();

    // Robots start parked at randomly chosen workstations.
    let mut rng = stream(cfg.seed, STREAM_ROBOTS);
    let capacity = cfg.robot_capacity.unwrap_or_else(|| cfg.kind.default_capacity());
    let robots: Vec<Robot> = (0..cfg.robots)
        .map(|i| {
            let position = if workstations.is_empty() {
                Location::new(0, 0, 0)
            } else {
                workstations[rng.gen_range(0..workstations.len())].position
            };
            Robot { id: RobotId(i), capacity, position, load: Vec::new(), busy_until: 0.0 }
        })
        .collect();

    Ok(WarehouseInstance {
        version: INSTANCE_VERSION.to_string(),
        name: cfg.name.clone(),
        kind: cfg.kind,
        skus: cfg.skus,
        orders,
        totes,
        robots,
        workstations,
        layout,
        speed_params: cfg.speed,
    })
}
