//! Entities, identifiers and physical quantities of the fulfillment system.
//!
//! Every other module works on these types. A [`WarehouseInstance`] is the
//! immutable problem definition; simulation state lives in [`crate::sim`].

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Rack module footprint along either horizontal axis, in meters.
pub const CELL_PITCH_M: f64 = 1.2;

/// Version tag carried by every instance file.
pub const INSTANCE_VERSION: &str = "toteflow_instance_v1";

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Stock-keeping unit.
    SkuId
);
id_type!(OrderId);
id_type!(ToteId);
id_type!(RobotId);
id_type!(
    /// Picking workstation.
    StationId
);

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("location {loc} is outside layout {layout}")]
    OutOfBounds { loc: Location, layout: Layout },
    #[error("instance file version `{0}` is not {INSTANCE_VERSION}")]
    BadVersion(String),
    #[error("instance is invalid: {0}")]
    Invalid(String),
}

/// The two commercial system archetypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemKind {
    /// Ground robots with onboard lifts carrying several totes per trip.
    MultiTote2D,
    /// Shelf-climbing robots; vertical travel is charged per level.
    RackClimb3D,
}

impl SystemKind {
    pub fn min_capacity(self) -> u32 {
        match self {
            SystemKind::MultiTote2D => 2,
            SystemKind::RackClimb3D => 1,
        }
    }

    pub fn default_capacity(self) -> u32 {
        match self {
            SystemKind::MultiTote2D => 8,
            SystemKind::RackClimb3D => 1,
        }
    }

    pub fn default_levels(self) -> u32 {
        match self {
            SystemKind::MultiTote2D => 1,
            SystemKind::RackClimb3D => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub aisle: u32,
    pub column: u32,
    pub level: u32,
}

impl Location {
    pub const fn new(aisle: u32, column: u32, level: u32) -> Self {
        Self { aisle, column, level }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.aisle, self.column, self.level)
    }
}

/// Grid extent: valid indices are `0..aisles`, `0..columns`, `0..levels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub aisles: u32,
    pub columns: u32,
    pub levels: u32,
}

impl Layout {
    pub fn contains(&self, loc: &Location) -> bool {
        loc.aisle < self.aisles && loc.column < self.columns && loc.level < self.levels
    }

    pub fn check(&self, loc: &Location) -> Result<(), DomainError> {
        if self.contains(loc) {
            Ok(())
        } else {
            Err(DomainError::OutOfBounds { loc: *loc, layout: *self })
        }
    }

    /// Number of storage cells; column 0 is the workstation front.
    pub fn storage_capacity(&self) -> u64 {
        self.aisles as u64 * self.columns.saturating_sub(1) as u64 * self.levels as u64
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.aisles, self.columns, self.levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedParams {
    pub horizontal_mps: f64,
    pub vertical_s_per_level: f64,
    pub pick_s_per_line: f64,
    pub load_s_per_tote: f64,
}

impl Default for SpeedParams {
    fn default() -> Self {
        Self {
            horizontal_mps: 1.2,
            vertical_s_per_level: 2.0,
            pick_s_per_line: 4.0,
            load_s_per_tote: 3.0,
        }
    }
}

/// Travel time in seconds between two grid locations.
///
/// Horizontal motion is Manhattan over [`CELL_PITCH_M`] cells. Vertical
/// motion is charged only for [`SystemKind::RackClimb3D`]; the 2D system
/// folds lift time into the per-tote load time.
pub fn travel_time(
    layout: &Layout,
    from: Location,
    to: Location,
    kind: SystemKind,
    speed: &SpeedParams,
) -> Result<f64, DomainError> {
    layout.check(&from)?;
    layout.check(&to)?;
    Ok(travel_time_unchecked(from, to, kind, speed))
}

pub(crate) fn travel_time_unchecked(
    from: Location,
    to: Location,
    kind: SystemKind,
    speed: &SpeedParams,
) -> f64 {
    let cells = from.aisle.abs_diff(to.aisle) as f64 + from.column.abs_diff(to.column) as f64;
    let horizontal = cells * CELL_PITCH_M / speed.horizontal_mps;
    let vertical = match kind {
        SystemKind::MultiTote2D => 0.0,
        SystemKind::RackClimb3D => from.level.abs_diff(to.level) as f64 * speed.vertical_s_per_level,
    };
    horizontal + vertical
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderLine {
    pub sku: SkuId,
    pub quantity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: OrderId,
    pub lines: Vec<OrderLine>,
    pub priority: u32,
    /// Seconds since episode start.
    pub arrival_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TotePlace {
    InStorage(Location),
    OnRobot(RobotId),
    AtWorkstation(StationId),
}

/// A container holding units of exactly one SKU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tote {
    pub id: ToteId,
    pub sku: SkuId,
    pub quantity: u32,
    pub home: Location,
    pub place: TotePlace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robot {
    pub id: RobotId,
    pub capacity: u32,
    pub position: Location,
    pub load: Vec<ToteId>,
    pub busy_until: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workstation {
    pub id: StationId,
    pub position: Location,
    /// Put-wall slots; each holds one order box.
    pub slots: u32,
    pub active_orders: Vec<OrderId>,
    pub tote_buffer: Vec<ToteId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarehouseInstance {
    pub version: String,
    pub name: String,
    pub kind: SystemKind,
    pub skus: u32,
    pub orders: Vec<Order>,
    pub totes: Vec<Tote>,
    pub robots: Vec<Robot>,
    pub workstations: Vec<Workstation>,
    pub layout: Layout,
    pub speed_params: SpeedParams,
}

impl WarehouseInstance {
    pub fn travel(&self, from: Location, to: Location) -> f64 {
        travel_time_unchecked(from, to, self.kind, &self.speed_params)
    }

    /// True when every order is available at time zero.
    pub fn is_static(&self) -> bool {
        self.orders.iter().all(|o| o.arrival_time == 0.0)
    }

    /// Largest travel time between any two cells of the layout.
    pub fn max_travel_time(&self) -> f64 {
        let far = Location::new(
            self.layout.aisles.saturating_sub(1),
            self.layout.columns.saturating_sub(1),
            self.layout.levels.saturating_sub(1),
        );
        self.travel(Location::new(0, 0, 0), far)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DomainError> {
        let inst: WarehouseInstance =
            serde_json::from_str(text).map_err(|e| DomainError::Invalid(e.to_string()))?;
        if inst.version != INSTANCE_VERSION {
            return Err(DomainError::BadVersion(inst.version));
        }
        Ok(inst)
    }
}

/// A broken invariant found by [`validate_instance`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    UncoveredSku { sku: SkuId },
    InsufficientStock { sku: SkuId, demand: u64, stock: u64 },
    CapacityExceeded { robot: RobotId },
    KindCapacity { robot: RobotId },
    SlotsExceeded { station: StationId },
    ZeroSlots { station: StationId },
    EmptyOrder { order: OrderId },
    DuplicateSku { order: OrderId, sku: SkuId },
    ZeroQuantity { order: OrderId },
    SkuOutOfRange { sku: SkuId },
    BadArrival { order: OrderId },
    OutOfBounds { what: String, loc: Location },
    IdMismatch { what: String, index: usize },
    PlaceMismatch { tote: ToteId },
    DanglingReference { what: String },
}

impl Violation {
    /// Short stable code, e.g. `"uncovered sku"`.
    pub fn code(&self) -> &'static str {
        match self {
            Violation::UncoveredSku { .. } => "uncovered sku",
            Violation::InsufficientStock { .. } => "insufficient stock",
            Violation::CapacityExceeded { .. } => "capacity exceeded",
            Violation::KindCapacity { .. } => "kind capacity",
            Violation::SlotsExceeded { .. } => "slots exceeded",
            Violation::ZeroSlots { .. } => "zero slots",
            Violation::EmptyOrder { .. } => "empty order",
            Violation::DuplicateSku { .. } => "duplicate sku",
            Violation::ZeroQuantity { .. } => "zero quantity",
            Violation::SkuOutOfRange { .. } => "sku out of range",
            Violation::BadArrival { .. } => "bad arrival",
            Violation::OutOfBounds { .. } => "out of bounds",
            Violation::IdMismatch { .. } => "id mismatch",
            Violation::PlaceMismatch { .. } => "place mismatch",
            Violation::DanglingReference { .. } => "dangling reference",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UncoveredSku { sku } => write!(f, "uncovered sku {sku}"),
            Violation::InsufficientStock { sku, demand, stock } => {
                write!(f, "insufficient stock for sku {sku}: demand {demand}, stock {stock}")
            }
            Violation::CapacityExceeded { robot } => write!(f, "capacity exceeded on robot {robot}"),
            Violation::KindCapacity { robot } => {
                write!(f, "robot {robot} capacity below the system minimum")
            }
            Violation::SlotsExceeded { station } => write!(f, "slots exceeded at station {station}"),
            Violation::ZeroSlots { station } => write!(f, "station {station} has no slots"),
            Violation::EmptyOrder { order } => write!(f, "order {order} has no lines"),
            Violation::DuplicateSku { order, sku } => write!(f, "order {order} repeats sku {sku}"),
            Violation::ZeroQuantity { order } => write!(f, "order {order} has a zero-quantity line"),
            Violation::SkuOutOfRange { sku } => write!(f, "sku {sku} out of range"),
            Violation::BadArrival { order } => write!(f, "order {order} has a bad arrival time"),
            Violation::OutOfBounds { what, loc } => write!(f, "{what} at {loc} is out of bounds"),
            Violation::IdMismatch { what, index } => write!(f, "{what} at index {index} has a mismatched id"),
            Violation::PlaceMismatch { tote } => write!(f, "tote {tote} place disagrees with its holder"),
            Violation::DanglingReference { what } => write!(f, "dangling reference: {what}"),
        }
    }
}

/// Checks every entity invariant and SKU coverage, reporting all violations.
pub fn validate_instance(inst: &WarehouseInstance) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let layout = &inst.layout;

    for (i, o) in inst.orders.iter().enumerate() {
        if o.id.index() != i {
            v.push(Violation::IdMismatch { what: "order".into(), index: i });
        }
        if o.lines.is_empty() {
            v.push(Violation::EmptyOrder { order: o.id });
        }
        if !(o.arrival_time.is_finite() && o.arrival_time >= 0.0) {
            v.push(Violation::BadArrival { order: o.id });
        }
        let mut seen = std::collections::HashSet::new();
        for line in &o.lines {
            if !seen.insert(line.sku) {
                v.push(Violation::DuplicateSku { order: o.id, sku: line.sku });
            }
            if line.quantity == 0 {
                v.push(Violation::ZeroQuantity { order: o.id });
            }
            if line.sku.0 >= inst.skus {
                v.push(Violation::SkuOutOfRange { sku: line.sku });
            }
        }
    }

    for (i, t) in inst.totes.iter().enumerate() {
        if t.id.index() != i {
            v.push(Violation::IdMismatch { what: "tote".into(), index: i });
        }
        if t.sku.0 >= inst.skus {
            v.push(Violation::SkuOutOfRange { sku: t.sku });
        }
        if !layout.contains(&t.home) {
            v.push(Violation::OutOfBounds { what: format!("tote {} home", t.id), loc: t.home });
        }
        match t.place {
            TotePlace::InStorage(loc) => {
                if !layout.contains(&loc) {
                    v.push(Violation::OutOfBounds { what: format!("tote {}", t.id), loc });
                }
            }
            TotePlace::OnRobot(r) => match inst.robots.get(r.index()) {
                Some(robot) if robot.load.contains(&t.id) => {}
                Some(_) => v.push(Violation::PlaceMismatch { tote: t.id }),
                None => v.push(Violation::DanglingReference { what: format!("tote {} on robot {r}", t.id) }),
            },
            TotePlace::AtWorkstation(s) => match inst.workstations.get(s.index()) {
                Some(ws) if ws.tote_buffer.contains(&t.id) => {}
                Some(_) => v.push(Violation::PlaceMismatch { tote: t.id }),
                None => v.push(Violation::DanglingReference { what: format!("tote {} at station {s}", t.id) }),
            },
        }
    }

    for (i, r) in inst.robots.iter().enumerate() {
        if r.id.index() != i {
            v.push(Violation::IdMismatch { what: "robot".into(), index: i });
        }
        if r.load.len() > r.capacity as usize {
            v.push(Violation::CapacityExceeded { robot: r.id });
        }
        if r.capacity < inst.kind.min_capacity() {
            v.push(Violation::KindCapacity { robot: r.id });
        }
        if !layout.contains(&r.position) {
            v.push(Violation::OutOfBounds { what: format!("robot {}", r.id), loc: r.position });
        }
        for t in &r.load {
            match inst.totes.get(t.index()) {
                Some(tote) if tote.place == TotePlace::OnRobot(r.id) => {}
                Some(_) => v.push(Violation::PlaceMismatch { tote: *t }),
                None => v.push(Violation::DanglingReference { what: format!("robot {} load {t}", r.id) }),
            }
        }
    }

    for (i, w) in inst.workstations.iter().enumerate() {
        if w.id.index() != i {
            v.push(Violation::IdMismatch { what: "workstation".into(), index: i });
        }
        if w.slots == 0 {
            v.push(Violation::ZeroSlots { station: w.id });
        }
        if w.active_orders.len() > w.slots as usize {
            v.push(Violation::SlotsExceeded { station: w.id });
        }
        if !layout.contains(&w.position) {
            v.push(Violation::OutOfBounds { what: format!("workstation {}", w.id), loc: w.position });
        }
        for o in &w.active_orders {
            if o.index() >= inst.orders.len() {
                v.push(Violation::DanglingReference { what: format!("station {} order {o}", w.id) });
            }
        }
        for t in &w.tote_buffer {
            match inst.totes.get(t.index()) {
                Some(tote) if tote.place == TotePlace::AtWorkstation(w.id) => {}
                Some(_) => v.push(Violation::PlaceMismatch { tote: *t }),
                None => v.push(Violation::DanglingReference { what: format!("station {} buffer {t}", w.id) }),
            }
        }
    }
    if inst.workstations.is_empty() && !inst.orders.is_empty() {
        v.push(Violation::DanglingReference { what: "orders but no workstations".into() });
    }
    if inst.robots.is_empty() && !inst.orders.is_empty() {
        v.push(Violation::DanglingReference { what: "orders but no robots".into() });
    }

    // SKU coverage.
    let mut demand = vec![0u64; inst.skus as usize];
    let mut stock = vec![0u64; inst.skus as usize];
    let mut stocked = vec![false; inst.skus as usize];
    for o in &inst.orders {
        for line in &o.lines {
            if let Some(d) = demand.get_mut(line.sku.index()) {
                *d += line.quantity as u64;
            }
        }
    }
    for t in &inst.totes {
        if let Some(s) = stock.get_mut(t.sku.index()) {
            *s += t.quantity as u64;
            stocked[t.sku.index()] = true;
        }
    }
    for sku in 0..inst.skus as usize {
        if demand[sku] == 0 {
            continue;
        }
        if !stocked[sku] {
            v.push(Violation::UncoveredSku { sku: SkuId(sku as u32) });
        } else if stock[sku] < demand[sku] {
            v.push(Violation::InsufficientStock {
                sku: SkuId(sku as u32),
                demand: demand[sku],
                stock: stock[sku],
            });
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// End-of-episode summary. `z_final` is always `z_retrievals + z_returns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMetrics")]
pub struct MetricsReport {
    pub z_retrievals: u64,
    pub z_returns: u64,
    pub z_final: u64,
    /// Simulation seconds at termination.
    pub makespan: f64,
    /// Wall-clock seconds.
    pub runtime: f64,
    /// Decisions taken at (order-assign, tote-match, robot-schedule).
    pub decisions_per_stage: [u64; 3],
}

impl MetricsReport {
    pub fn new(
        z_retrievals: u64,
        z_returns: u64,
        makespan: f64,
        runtime: f64,
        decisions_per_stage: [u64; 3],
    ) -> Self {
        Self {
            z_retrievals,
            z_returns,
            z_final: z_retrievals + z_returns,
            makespan,
            runtime,
            decisions_per_stage,
        }
    }
}

#[derive(Deserialize)]
struct RawMetrics {
    z_retrievals: u64,
    z_returns: u64,
    z_final: u64,
    makespan: f64,
    runtime: f64,
    decisions_per_stage: [u64; 3],
}

impl TryFrom<RawMetrics> for MetricsReport {
    type Error = String;

    fn try_from(raw: RawMetrics) -> Result<Self, Self::Error> {
        if raw.z_final != raw.z_retrievals + raw.z_returns {
            return Err(format!(
                "z_final {} != z_retrievals {} + z_returns {}",
                raw.z_final, raw.z_retrievals, raw.z_returns
            ));
        }
        Ok(MetricsReport::new(
            raw.z_retrievals,
            raw.z_returns,
            raw.makespan,
            raw.runtime,
            raw.decisions_per_stage,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn big_layout() -> Layout {
        Layout { aisles: 10, columns: 20, levels: 8 }
    }

    #[test]
    fn travel_identity_is_zero() {
        let s = SpeedParams::default();
        let a = Location::new(2, 3, 4);
        for kind in [SystemKind::MultiTote2D, SystemKind::RackClimb3D] {
            assert_eq!(travel_time(&big_layout(), a, a, kind, &s).unwrap(), 0.0);
        }
    }

    #[test]
    fn travel_horizontal_five_cells() {
        let s = SpeedParams::default();
        let t = travel_time(
            &big_layout(),
            Location::new(0, 0, 0),
            Location::new(0, 5, 0),
            SystemKind::MultiTote2D,
            &s,
        )
        .unwrap();
        assert!((t - 5.0).abs() < 1e-12);
    }

    #[test]
    fn travel_vertical_three_levels() {
        let s = SpeedParams::default();
        let t = travel_time(
            &big_layout(),
            Location::new(0, 0, 0),
            Location::new(0, 0, 3),
            SystemKind::RackClimb3D,
            &s,
        )
        .unwrap();
        assert!((t - 6.0).abs() < 1e-12);
        let flat = travel_time(
            &big_layout(),
            Location::new(0, 0, 0),
            Location::new(0, 0, 3),
            SystemKind::MultiTote2D,
            &s,
        )
        .unwrap();
        assert_eq!(flat, 0.0);
    }

    #[test]
    fn travel_rejects_out_of_bounds() {
        let s = SpeedParams::default();
        let err = travel_time(
            &big_layout(),
            Location::new(0, 0, 0),
            Location::new(10, 0, 0),
            SystemKind::MultiTote2D,
            &s,
        )
        .unwrap_err();
        assert!(matches!(err, DomainError::OutOfBounds { .. }));
    }

    fn loc() -> impl Strategy<Value = Location> {
        (0u32..10, 0u32..20, 0u32..8).prop_map(|(a, c, l)| Location::new(a, c, l))
    }

    fn kind() -> impl Strategy<Value = SystemKind> {
        prop_oneof![Just(SystemKind::MultiTote2D), Just(SystemKind::RackClimb3D)]
    }

    proptest! {
        #[test]
        fn travel_is_a_metric(a in loc(), b in loc(), c in loc(), k in kind()) {
            let s = SpeedParams::default();
            let l = big_layout();
            let ab = travel_time(&l, a, b, k, &s).unwrap();
            let ba = travel_time(&l, b, a, k, &s).unwrap();
            let bc = travel_time(&l, b, c, k, &s).unwrap();
            let ac = travel_time(&l, a, c, k, &s).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn metrics_sum_holds(r in 0u64..1000, t in 0u64..1000) {
            let m = MetricsReport::new(r, t, 1.0, 0.0, [0, 0, 0]);
            prop_assert_eq!(m.z_final, r + t);
        }
    }

    #[test]
    fn metrics_rejects_inconsistent_json() {
        let bad = r#"{"z_retrievals":1,"z_returns":1,"z_final":3,"makespan":0,"runtime":0,"decisions_per_stage":[0,0,0]}"#;
        assert!(serde_json::from_str::<MetricsReport>(bad).is_err());
        let good = r#"{"z_retrievals":1,"z_returns":1,"z_final":2,"makespan":0,"runtime":0,"decisions_per_stage":[0,0,0]}"#;
        assert_eq!(serde_json::from_str::<MetricsReport>(good).unwrap().z_final, 2);
    }
}
