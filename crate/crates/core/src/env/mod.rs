//! Attacker/defender stochastic game on a device graph.
//!
//! The defender acts first within a step, then the attacker; when both touch
//! the same device the defender's effect stands. Rewards are paid to the
//! attacker after the transition; the defender's utility is the negation.

pub mod graph;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

pub use graph::{Adjacency, GraphModel};

use crate::seed;

/// Snapshot format version written by [`NetworkState::to_snapshot`].
pub const SNAPSHOT_VERSION: u32 = 1;

/// Largest catalog size representable by [`IdSet`].
pub const MAX_CATALOG: usize = 64;

/// Per-device observation features before the vulnerability and service bits.
const BASE_FEATURES: usize = 7;

/// Defender action costs, before the `work_scale * def_scale` multiplier.
pub const PATCH_COST: f64 = 0.5;
pub const ISOLATE_COST: f64 = 1.0;
/// Restoring also forfeits the device's workload value.
pub const RESTORE_BASE_COST: f64 = 0.5;
/// Workload values are drawn from `[0, MAX_WORKLOAD)`.
pub const MAX_WORKLOAD: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("illegal {role:?} action {atom:?}: {reason}")]
    IllegalAction {
        role: Role,
        atom: ActionAtom,
        reason: &'static str,
    },
    #[error("episode is over (step {0})")]
    EpisodeOver(usize),
    #[error("bad snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Attacker,
    Defender,
}

impl Role {
    pub fn opponent(self) -> Role {
        match self {
            Role::Attacker => Role::Defender,
            Role::Defender => Role::Attacker,
        }
    }

    /// Sign converting the attacker reward into this role's utility.
    pub fn utility_sign(self) -> f64 {
        match self {
            Role::Attacker => 1.0,
            Role::Defender => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Attacker => "attacker",
            Role::Defender => "defender",
        }
    }
}

/// Small set of catalog indices (< 64) stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IdSet(u64);

impl IdSet {
    pub fn contains(self, id: usize) -> bool {
        id < MAX_CATALOG && self.0 & (1 << id) != 0
    }

    pub fn insert(&mut self, id: usize) {
        self.0 |= 1 << id;
    }

    pub fn remove(&mut self, id: usize) {
        self.0 &= !(1 << id);
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..MAX_CATALOG).filter(move |&i| self.contains(i))
    }
}

impl FromIterator<usize> for IdSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        let mut s = IdSet::default();
        for i in iter {
            s.insert(i);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub device_count: usize,
    pub steps_per_episode: usize,
    pub initial_compromised_ratio: f64,
    /// `None` means `max(1, floor(0.05 M + 0.5))`.
    pub num_attacker_owned: Option<usize>,
    pub gamma: f64,
    pub comp_scale: f64,
    pub work_scale: f64,
    pub def_scale: f64,
    pub exploit_catalog_size: usize,
    pub app_catalog_size: usize,
    /// Probability that a device hosts each app at reset.
    pub service_prob: f64,
    /// Probability that a device carries each exploitable vulnerability at reset.
    pub vulnerability_prob: f64,
    pub graph_model: GraphModel,
    /// Edges added per node under preferential attachment.
    pub attachment_edges: usize,
    pub regular_degree: usize,
    /// Mean number of exogenous vulnerability events per step.
    pub lambda_events: f64,
    /// Probability an exogenous event adds (rather than removes) a vulnerability.
    pub p_add: f64,
    pub fast_scan: bool,
    // Recorded for provenance only; they do not alter the dynamics.
    pub default_version: f64,
    pub default_mode: i64,
    pub default_high: i64,
    pub max_network_size: Option<usize>,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            device_count: 10,
            steps_per_episode: 100,
            initial_compromised_ratio: 0.4,
            num_attacker_owned: None,
            gamma: 0.99,
            comp_scale: 30.0,
            work_scale: 1.0,
            def_scale: 1.0,
            exploit_catalog_size: 4,
            app_catalog_size: 3,
            service_prob: 0.6,
            vulnerability_prob: 0.5,
            graph_model: GraphModel::PreferentialAttachment,
            attachment_edges: 2,
            regular_degree: 3,
            lambda_events: 0.7,
            p_add: 0.1,
            fast_scan: true,
            default_version: 1.0,
            default_mode: 1,
            default_high: 3,
            max_network_size: None,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn with_devices(device_count: usize) -> Self {
        Self {
            device_count,
            ..Self::default()
        }
    }

    pub fn attacker_owned_count(&self) -> usize {
        self.num_attacker_owned.unwrap_or_else(|| default_attacker_owned(self.device_count))
    }

    /// `Max_network_size`, defaulting to `M + 10`.
    pub fn max_network_size(&self) -> usize {
        self.max_network_size.unwrap_or(self.device_count + 10)
    }

    /// Total compromised devices at reset, attacker-owned ones included.
    pub fn initial_compromised_count(&self) -> usize {
        let m = self.device_count;
        let target = (self.initial_compromised_ratio * m as f64).round() as usize;
        target.max(self.attacker_owned_count()).min(m)
    }

    /// Width of one device's block in an [`Observation`].
    pub fn feature_width(&self) -> usize {
        BASE_FEATURES + self.exploit_catalog_size + self.app_catalog_size
    }

    /// Full observation length: all device blocks plus the step fraction.
    pub fn observation_len(&self) -> usize {
        self.device_count * self.feature_width() + 1
    }

    /// The app an exploit targets.
    pub fn exploit_app(&self, exploit: usize) -> usize {
        exploit % self.app_catalog_size
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |field, reason: &str| {
            Err(EnvError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.device_count == 0 {
            return bad("device_count", "must be positive");
        }
        if self.steps_per_episode == 0 {
            return bad("steps_per_episode", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.initial_compromised_ratio) {
            return bad("initial_compromised_ratio", "must lie in [0, 1]");
        }
        if self.attacker_owned_count() > self.device_count {
            return bad("num_attacker_owned", "must not exceed device_count");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        for (field, v) in [
            ("comp_scale", self.comp_scale),
            ("work_scale", self.work_scale),
            ("def_scale", self.def_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, "must be a positive finite number");
            }
        }
        for (field, v) in [
            ("exploit_catalog_size", self.exploit_catalog_size),
            ("app_catalog_size", self.app_catalog_size),
        ] {
            if v == 0 || v > MAX_CATALOG {
                return bad(field, "must lie in [1, 64]");
            }
        }
        for (field, v) in [
            ("service_prob", self.service_prob),
            ("vulnerability_prob", self.vulnerability_prob),
            ("p_add", self.p_add),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, "must lie in [0, 1]");
            }
        }
        if !(self.lambda_events >= 0.0 && self.lambda_events.is_finite()) {
            return bad("lambda_events", "must be non-negative");
        }
        if self.attachment_edges == 0 {
            return bad("attachment_edges", "must be positive");
        }
        Ok(())
    }

    /// Upper bound on `|r|` for any reachable step.
    ///
    /// Rewards are `comp_scale * C/M + sum of owned workloads + work_scale *
    /// def_scale * defender cost`, every term non-negative; each is bounded
    /// independently with at most one defender atom per device.
    pub fn reward_bound(&self) -> f64 {
        let m = self.device_count as f64;
        let max_def_cost = PATCH_COST.max(ISOLATE_COST).max(RESTORE_BASE_COST + MAX_WORKLOAD);
        self.comp_scale + m * MAX_WORKLOAD + self.work_scale * self.def_scale * m * max_def_cost
    }
}

pub fn default_attacker_owned(m: usize) -> usize {
    ((0.05 * m as f64 + 0.5).floor() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: usize,
    pub services: IdSet,
    pub vulnerabilities: IdSet,
    pub compromised: bool,
    pub attacker_owned: bool,
    pub visible_to_attacker: bool,
    pub visible_to_defender: bool,
    /// 0 = none, 1 = user foothold, 2 = full ownership.
    pub privilege_level: u8,
    pub workload_value: f64,
    pub isolated: bool,
}

impl Device {
    pub fn visible_to(&self, role: Role) -> bool {
        match role {
            Role::Attacker => self.visible_to_attacker,
            Role::Defender => self.visible_to_defender,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Scan,
    Exploit,
    LateralMove,
    Patch,
    Isolate,
    Restore,
    Noop,
}

impl ActionKind {
    pub fn role(self) -> Option<Role> {
        match self {
            ActionKind::Scan | ActionKind::Exploit | ActionKind::LateralMove => Some(Role::Attacker),
            ActionKind::Patch | ActionKind::Isolate | ActionKind::Restore => Some(Role::Defender),
            ActionKind::Noop => None,
        }
    }

    /// Position of this kind in a role's four-way type encoding.
    pub fn slot(self) -> usize {
        match self {
            ActionKind::Scan | ActionKind::Patch => 0,
            ActionKind::Exploit | ActionKind::Isolate => 1,
            ActionKind::LateralMove | ActionKind::Restore => 2,
            ActionKind::Noop => 3,
        }
    }

    pub fn requires_exploit(self) -> bool {
        matches!(self, ActionKind::Exploit | ActionKind::Patch)
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

pub const ACTION_TYPES_PER_ROLE: usize = 4;

/// One device-indexed action. Exploit and patch atoms carry the exploit id and
/// the app that exploit targets; every other kind carries neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionAtom {
    pub node: usize,
    pub kind: ActionKind,
    pub exploit: Option<usize>,
    pub app: Option<usize>,
}

impl ActionAtom {
    pub fn simple(node: usize, kind: ActionKind) -> Self {
        Self {
            node,
            kind,
            exploit: None,
            app: None,
        }
    }

    pub fn noop(node: usize) -> Self {
        Self::simple(node, ActionKind::Noop)
    }

    pub fn with_exploit(node: usize, kind: ActionKind, exploit: usize, config: &EnvConfig) -> Self {
        Self {
            node,
            kind,
            exploit: Some(exploit),
            app: Some(config.exploit_app(exploit)),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.kind == ActionKind::Noop
    }
}

/// A role's masked view: one feature block per device, then the step fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub role: Role,
    pub vector: Vec<f64>,
    pub block: usize,
}

impl Observation {
    /// Everything except the trailing step fraction.
    pub fn device_features(&self) -> &[f64] {
        &self.vector[..self.vector.len() - 1]
    }

    pub fn device_block(&self, i: usize) -> &[f64] {
        &self.vector[i * self.block..(i + 1) * self.block]
    }

    pub fn device_count(&self) -> usize {
        (self.vector.len() - 1) / self.block
    }

    pub fn step_fraction(&self) -> f64 {
        self.vector[self.vector.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Attacker reward; the defender receives the negation.
    pub reward: f64,
    pub done: bool,
    /// Devices whose attributes, visibility or incident edges changed.
    pub changed: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub config: EnvConfig,
    pub devices: Vec<Device>,
    pub adjacency: Adjacency,
    pub step: usize,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format_version: u32,
    state: NetworkState,
}

impl NetworkState {
    pub fn reset(config: &EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let m = config.device_count;
        let mut rng = seed::rng(config.seed);
        let adjacency = match config.graph_model {
            GraphModel::PreferentialAttachment => graph::preferential_attachment(m, config.attachment_edges, &mut rng),
            GraphModel::RandomRegular => graph::random_regular(m, config.regular_degree, &mut rng),
        };
        let mut devices = Vec::with_capacity(m);
        for id in 0..m {
            let services: IdSet = (0..config.app_catalog_size)
                .filter(|_| rng.random_bool(config.service_prob))
                .collect();
            let vulnerabilities: IdSet = (0..config.exploit_catalog_size)
                .filter(|&e| services.contains(config.exploit_app(e)))
                .filter(|_| rng.random_bool(config.vulnerability_prob))
                .collect();
            devices.push(Device {
                id,
                services,
                vulnerabilities,
                compromised: false,
                attacker_owned: false,
                visible_to_attacker: false,
                visible_to_defender: true,
                privilege_level: 0,
                workload_value: rng.random_range(0.0..MAX_WORKLOAD),
                isolated: false,
            });
        }
        seed_compromise(&mut devices, config, &mut rng);
        Ok(Self {
            config: config.clone(),
            devices,
            adjacency,
            step: 0,
            rng,
        })
    }

    /// Same network as [`NetworkState::reset`], with the initial compromise
    /// set and the event stream drawn from a per-episode seed.
    pub fn reset_episode(config: &EnvConfig, episode: u64) -> Result<Self, EnvError> {
        let mut s = Self::reset(config)?;
        let mut rng = seed::rng(seed::derive(config.seed, &[0xe9, episode]));
        for d in &mut s.devices {
            d.compromised = false;
            d.attacker_owned = false;
            d.visible_to_attacker = false;
            d.privilege_level = 0;
        }
        seed_compromise(&mut s.devices, config, &mut rng);
        s.rng = rng;
        Ok(s)
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_visible(&self, role: Role, i: usize) -> bool {
        self.devices[i].visible_to(role)
    }

    pub fn visible_devices(&self, role: Role) -> Vec<usize> {
        (0..self.devices.len()).filter(|&i| self.is_visible(role, i)).collect()
    }

    pub fn compromised_count(&self) -> usize {
        self.devices.iter().filter(|d| d.compromised).count()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps_per_episode
    }

    /// Reward for holding the current compromise set for one step.
    pub fn holding_reward(&self) -> f64 {
        let m = self.devices.len() as f64;
        let owned_value: f64 = self.devices.iter().filter(|d| d.attacker_owned).map(|d| d.workload_value).sum();
        self.config.comp_scale * self.compromised_count() as f64 / m + owned_value
    }

    pub fn defender_cost(&self, atom: &ActionAtom) -> f64 {
        match atom.kind {
            ActionKind::Patch => PATCH_COST,
            ActionKind::Isolate => ISOLATE_COST,
            ActionKind::Restore => RESTORE_BASE_COST + self.devices[atom.node].workload_value,
            _ => 0.0,
        }
    }

    /// Legal atoms targeting one device; empty if the device is invisible to `role`.
    pub fn legal_atoms_on(&self, role: Role, node: usize) -> Vec<ActionAtom> {
        let mut out = Vec::new();
        let Some(d) = self.devices.get(node) else {
            return out;
        };
        if !d.visible_to(role) {
            return out;
        }
        out.push(ActionAtom::noop(node));
        let cfg = &self.config;
        match role {
            Role::Attacker => {
                if d.attacker_owned {
                    out.push(ActionAtom::simple(node, ActionKind::Scan));
                }
                if !d.compromised {
                    for e in 0..cfg.exploit_catalog_size {
                        out.push(ActionAtom::with_exploit(node, ActionKind::Exploit, e, cfg));
                    }
                }
                if d.compromised && !d.attacker_owned {
                    out.push(ActionAtom::simple(node, ActionKind::LateralMove));
                }
            }
            Role::Defender => {
                for e in d.vulnerabilities.iter() {
                    out.push(ActionAtom::with_exploit(node, ActionKind::Patch, e, cfg));
                }
                if !self.adjacency[node].is_empty() {
                    out.push(ActionAtom::simple(node, ActionKind::Isolate));
                }
                if d.compromised {
                    out.push(ActionAtom::simple(node, ActionKind::Restore));
                }
            }
        }
        out
    }

    /// Every legal atom for `role`. Always contains `noop` on device 0.
    pub fn legal_actions(&self, role: Role) -> Vec<ActionAtom> {
        let mut out = Vec::new();
        if !self.is_visible(role, 0) {
            out.push(ActionAtom::noop(0));
        }
        for i in 0..self.devices.len() {
            out.extend(self.legal_atoms_on(role, i));
        }
        out
    }

    pub fn check_atom(&self, role: Role, atom: &ActionAtom) -> Result<(), EnvError> {
        let illegal = |reason| Err(EnvError::IllegalAction { role, atom: *atom, reason });
        if atom.node >= self.devices.len() {
            return illegal("node out of range");
        }
        if atom.is_noop() {
            return if atom.exploit.is_none() && atom.app.is_none() {
                Ok(())
            } else {
                illegal("noop carries no exploit or app")
            };
        }
        if atom.kind.role() != Some(role) {
            return illegal("action type belongs to the other role");
        }
        if atom.kind.requires_exploit() {
            match atom.exploit {
                Some(e) if e < self.config.exploit_catalog_size => {
                    if atom.app != Some(self.config.exploit_app(e)) {
                        return illegal("app does not match the exploit's target");
                    }
                }
                Some(_) => return illegal("exploit id outside catalog"),
                None => return illegal("missing exploit id"),
            }
        } else if atom.exploit.is_some() || atom.app.is_some() {
            return illegal("action type takes no exploit or app");
        }
        if self.legal_atoms_on(role, atom.node).contains(atom) {
            Ok(())
        } else {
            illegal("precondition not met in this state")
        }
    }

    /// Advances one step. Defender atoms apply first, then attacker atoms
    /// against the post-defence state, then exogenous vulnerability events.
    pub fn step(&mut self, attacker: &[ActionAtom], defender: &[ActionAtom]) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeOver(self.step));
        }
        for (role, atoms) in [(Role::Attacker, attacker), (Role::Defender, defender)] {
            let mut seen = BTreeSet::new();
            for atom in atoms {
                self.check_atom(role, atom)?;
                if !seen.insert(atom.node) {
                    return Err(EnvError::IllegalAction {
                        role,
                        atom: *atom,
                        reason: "more than one atom on the same device",
                    });
                }
            }
        }

        let mut changed = BTreeSet::new();
        let mut defence_cost = 0.0;
        for atom in defender {
            defence_cost += self.defender_cost(atom);
            self.apply_defender(atom, &mut changed);
        }
        self.apply_attacker(attacker, &mut changed);
        self.exogenous_events(&mut changed);

        self.step += 1;
        let reward = self.holding_reward() + self.config.work_scale * self.config.def_scale * defence_cost;
        Ok(StepOutcome {
            reward,
            done: self.is_done(),
            changed,
        })
    }

    fn apply_defender(&mut self, atom: &ActionAtom, changed: &mut BTreeSet<usize>) {
        let i = atom.node;
        match atom.kind {
            ActionKind::Patch => {
                let d = &mut self.devices[i];
                d.vulnerabilities.remove(atom.exploit.unwrap_or_default());
                if d.compromised && !d.attacker_owned {
                    d.compromised = false;
                    d.privilege_level = 0;
                }
                changed.insert(i);
            }
            ActionKind::Isolate => {
                let neighbours = std::mem::take(&mut self.adjacency[i]);
                for &v in &neighbours {
                    self.adjacency[v].retain(|&u| u != i);
                    changed.insert(v);
                }
                let d = &mut self.devices[i];
                d.isolated = true;
                if !d.attacker_owned {
                    d.visible_to_attacker = false;
                }
                changed.insert(i);
            }
            ActionKind::Restore => {
                let d = &mut self.devices[i];
                d.compromised = false;
                d.attacker_owned = false;
                d.privilege_level = 0;
                changed.insert(i);
            }
            _ => {}
        }
    }

    fn apply_attacker(&mut self, atoms: &[ActionAtom], changed: &mut BTreeSet<usize>) {
        // Exploits need a compromised neighbour as of the start of the attack phase.
        let foothold: Vec<bool> = self.devices.iter().map(|d| d.compromised).collect();
        for atom in atoms {
            let i = atom.node;
            match atom.kind {
                ActionKind::Scan => {
                    if !self.devices[i].attacker_owned {
                        continue;
                    }
                    let hidden: Vec<usize> = self.adjacency[i]
                        .iter()
                        .copied()
                        .filter(|&v| !self.devices[v].visible_to_attacker)
                        .collect();
                    let revealed = if self.config.fast_scan || hidden.len() <= 1 {
                        hidden
                    } else {
                        vec![hidden[self.rng.random_range(0..hidden.len())]]
                    };
                    for v in revealed {
                        self.devices[v].visible_to_attacker = true;
                        changed.insert(v);
                    }
                }
                ActionKind::Exploit => {
                    let e = atom.exploit.unwrap_or_default();
                    let d = &self.devices[i];
                    if d.compromised || !d.visible_to_attacker || !d.vulnerabilities.contains(e) {
                        continue;
                    }
                    if self.adjacency[i].iter().any(|&v| foothold[v]) {
                        let d = &mut self.devices[i];
                        d.compromised = true;
                        d.privilege_level = 1;
                        changed.insert(i);
                    }
                }
                ActionKind::LateralMove => {
                    let d = &mut self.devices[i];
                    if d.compromised && !d.attacker_owned {
                        d.attacker_owned = true;
                        d.privilege_level = 2;
                        changed.insert(i);
                    }
                }
                _ => {}
            }
        }
    }

    fn exogenous_events(&mut self, changed: &mut BTreeSet<usize>) {
        if self.config.lambda_events <= 0.0 {
            return;
        }
        let count = Poisson::new(self.config.lambda_events)
            .map(|p| p.sample(&mut self.rng) as usize)
            .unwrap_or(0);
        let m = self.devices.len();
        for _ in 0..count {
            let i = self.rng.random_range(0..m);
            let add = self.rng.random_bool(self.config.p_add);
            let d = &self.devices[i];
            let pool: Vec<usize> = if add {
                (0..self.config.exploit_catalog_size)
                    .filter(|&e| d.services.contains(self.config.exploit_app(e)) && !d.vulnerabilities.contains(e))
                    .collect()
            } else {
                d.vulnerabilities.iter().collect()
            };
            if pool.is_empty() {
                continue;
            }
            let e = pool[self.rng.random_range(0..pool.len())];
            let d = &mut self.devices[i];
            if add {
                d.vulnerabilities.insert(e);
            } else {
                d.vulnerabilities.remove(e);
            }
            changed.insert(i);
        }
    }

    /// Masked observation for `role`. Devices the role cannot see are all zeros.
    pub fn observe(&self, role: Role) -> Observation {
        let cfg = &self.config;
        let block = cfg.feature_width();
        let m = self.devices.len();
        let mut vector = vec![0.0; m * block + 1];
        let degree_norm = (m.saturating_sub(1)).max(1) as f64;
        for (i, d) in self.devices.iter().enumerate() {
            if !d.visible_to(role) {
                continue;
            }
            let b = &mut vector[i * block..(i + 1) * block];
            b[0] = 1.0;
            b[1] = f64::from(u8::from(d.compromised));
            b[2] = f64::from(u8::from(d.attacker_owned));
            b[3] = f64::from(d.privilege_level) / 2.0;
            b[4] = d.workload_value;
            b[5] = self.adjacency[i].len() as f64 / degree_norm;
            b[6] = f64::from(u8::from(d.isolated));
            for e in d.vulnerabilities.iter() {
                b[BASE_FEATURES + e] = 1.0;
            }
            for a in d.services.iter() {
                b[BASE_FEATURES + cfg.exploit_catalog_size + a] = 1.0;
            }
        }
        vector[m * block] = self.step as f64 / cfg.steps_per_episode as f64;
        Observation { role, vector, block }
    }

    pub fn to_snapshot(&self) -> String {
        let snap = Snapshot {
            format_version: SNAPSHOT_VERSION,
            state: self.clone(),
        };
        serde_json::to_string(&snap).expect("network state serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, EnvError> {
        let snap: Snapshot = serde_json::from_str(text).map_err(|e| EnvError::Snapshot(e.to_string()))?;
        if snap.format_version != SNAPSHOT_VERSION {
            return Err(EnvError::Snapshot(format!("unsupported format version {}", snap.format_version)));
        }
        Ok(snap.state)
    }
}

fn seed_compromise(devices: &mut [Device], config: &EnvConfig, rng: &mut ChaCha8Rng) {
    let owned = config.attacker_owned_count();
    let chosen = sample(rng, devices.len(), config.initial_compromised_count()).into_vec();
    for (rank, &i) in chosen.iter().enumerate() {
        let d = &mut devices[i];
        d.compromised = true;
        if rank < owned {
            d.attacker_owned = true;
            d.visible_to_attacker = true;
            d.privilege_level = 2;
        } else {
            d.privilege_level = 1;
        }
    }
}
