//! Cell layout, UE placement, channel realisation and reference-node selection.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::allocator::AllocationProblem;
use crate::error::{Error, Result};
use crate::propagation::{
    dbm_to_watts, gain_from_pathloss, path_loss_access_db, path_loss_backhaul_db, FadingDraw,
    NoiseModel,
};

/// Links shorter than this are evaluated at this distance.
pub const MIN_LINK_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// Pick the strongest victim independently on every RB.
    #[default]
    PerRb,
    /// Pick one victim per UE (largest mean gain) and use its per-RB gains.
    PerUe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_cues: usize,
    pub num_d2d_pairs: usize,
    pub num_relays: usize,
    pub relay_cell_radius_m: f64,
    pub enb_relay_distance_m: f64,
    pub min_ue_relay_distance_m: f64,
    pub d2d_ring_radius_m: f64,
    pub d2d_pair_distance_m: f64,
    pub qos_cue_bps: f64,
    pub qos_d2d_bps: f64,
    pub p_ue_max_dbm: f64,
    pub p_relay_max_dbm: f64,
    pub i_th_hop1_dbm: f64,
    pub i_th_hop2_dbm: f64,
    pub num_rbs: usize,
    pub rng_seed: u64,
    pub shadow_access_db: f64,
    pub shadow_backhaul_db: f64,
    /// Estimated interference as a multiple of the noise power.
    pub ibar_over_noise: f64,
    pub reference_mode: ReferenceMode,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_cues: 15,
            num_d2d_pairs: 9,
            num_relays: 3,
            relay_cell_radius_m: 200.0,
            enb_relay_distance_m: 125.0,
            min_ue_relay_distance_m: 10.0,
            d2d_ring_radius_m: 60.0,
            d2d_pair_distance_m: 40.0,
            qos_cue_bps: 128e3,
            qos_d2d_bps: 256e3,
            p_ue_max_dbm: 23.0,
            p_relay_max_dbm: 30.0,
            i_th_hop1_dbm: -70.0,
            i_th_hop2_dbm: -70.0,
            num_rbs: 13,
            rng_seed: 1,
            shadow_access_db: 10.0,
            shadow_backhaul_db: 6.0,
            ibar_over_noise: 2.0,
            reference_mode: ReferenceMode::PerRb,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("relay_cell_radius_m", self.relay_cell_radius_m),
            ("enb_relay_distance_m", self.enb_relay_distance_m),
            ("min_ue_relay_distance_m", self.min_ue_relay_distance_m),
            ("d2d_ring_radius_m", self.d2d_ring_radius_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("d2d_pair_distance_m", self.d2d_pair_distance_m),
            ("qos_cue_bps", self.qos_cue_bps),
            ("qos_d2d_bps", self.qos_d2d_bps),
            ("shadow_access_db", self.shadow_access_db),
            ("shadow_backhaul_db", self.shadow_backhaul_db),
            ("ibar_over_noise", self.ibar_over_noise),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("p_ue_max_dbm", self.p_ue_max_dbm),
            ("p_relay_max_dbm", self.p_relay_max_dbm),
            ("i_th_hop1_dbm", self.i_th_hop1_dbm),
            ("i_th_hop2_dbm", self.i_th_hop2_dbm),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if self.num_rbs == 0 {
            return Err(Error::Config("num_rbs must be at least 1".into()));
        }
        if self.num_relays == 0 {
            return Err(Error::Config("num_relays must be at least 1".into()));
        }
        if self.min_ue_relay_distance_m > self.relay_cell_radius_m {
            return Err(Error::Config(
                "min_ue_relay_distance_m exceeds relay_cell_radius_m".into(),
            ));
        }
        if self.d2d_ring_radius_m < self.min_ue_relay_distance_m {
            return Err(Error::Config(
                "d2d_ring_radius_m is below min_ue_relay_distance_m".into(),
            ));
        }
        Ok(())
    }

    pub fn sigma2_w(&self) -> f64 {
        NoiseModel::default().sigma_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UeKind {
    Cue,
    D2dTx,
    D2dRx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeRecord {
    pub id: usize,
    pub kind: UeKind,
    pub position: [f64; 2],
    pub serving_relay: usize,
    /// The other end of a D2D pair.
    pub peer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub enb_position: [f64; 2],
    pub relay_positions: Vec<[f64; 2]>,
    pub ues: Vec<UeRecord>,
}

/// A transmitting entity served by a relay: a CUE or a D2D pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelayUser {
    Cue { ue: usize },
    D2d { tx: usize, rx: usize },
}

impl RelayUser {
    pub fn tx(&self) -> usize {
        match *self {
            RelayUser::Cue { ue } => ue,
            RelayUser::D2d { tx, .. } => tx,
        }
    }

    pub fn is_d2d(&self) -> bool {
        matches!(self, RelayUser::D2d { .. })
    }
}

impl NetworkTopology {
    pub fn num_relays(&self) -> usize {
        self.relay_positions.len()
    }

    /// The set of users (CUEs and D2D pairs) served by relay `l`, CUEs first.
    pub fn relay_users(&self, l: usize) -> Vec<RelayUser> {
        let mut cues = Vec::new();
        let mut pairs = Vec::new();
        for ue in &self.ues {
            if ue.serving_relay != l {
                continue;
            }
            match ue.kind {
                UeKind::Cue => cues.push(RelayUser::Cue { ue: ue.id }),
                UeKind::D2dTx => pairs.push(RelayUser::D2d {
                    tx: ue.id,
                    rx: ue.peer.expect("D2D transmitter without receiver"),
                }),
                UeKind::D2dRx => {}
            }
        }
        cues.extend(pairs);
        cues
    }

    pub fn num_d2d_pairs(&self) -> usize {
        self.ues.iter().filter(|u| u.kind == UeKind::D2dTx).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serialises")
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn nearest_relay(p: [f64; 2], relays: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, r) in relays.iter().enumerate() {
        let d = dist(p, *r);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

const PLACEMENT_TRIES: usize = 256;

pub fn generate_topology(config: &ScenarioConfig) -> Result<NetworkTopology> {
    config.validate()?;
    let chord = config.d2d_pair_distance_m;
    let ring = config.d2d_ring_radius_m;
    if chord > 2.0 * ring {
        return Err(Error::InfeasibleGeometry(format!(
            "pair distance {chord} m exceeds ring diameter {} m",
            2.0 * ring
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(0);

    let enb = [0.0, 0.0];
    let num_relays = config.num_relays;
    let relays: Vec<[f64; 2]> = (0..num_relays)
        .map(|l| {
            // one relay on each sector boresight
            let a = PI / 6.0 + 2.0 * PI * l as f64 / num_relays as f64;
            let d = config.enb_relay_distance_m;
            [d * a.cos(), d * a.sin()]
        })
        .collect();

    let mut ues = Vec::with_capacity(config.num_cues + 2 * config.num_d2d_pairs);
    let r_min2 = config.min_ue_relay_distance_m.powi(2);
    let r_max2 = config.relay_cell_radius_m.powi(2);
    for i in 0..config.num_cues {
        let home = i % num_relays;
        let centre = relays[home];
        let mut pos = centre;
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.random_range(r_min2..=r_max2).sqrt();
            let a = rng.random_range(0.0..2.0 * PI);
            pos = [centre[0] + r * a.cos(), centre[1] + r * a.sin()];
            if nearest_relay(pos, &relays) == home {
                break;
            }
        }
        ues.push(UeRecord {
            id: i,
            kind: UeKind::Cue,
            position: pos,
            serving_relay: nearest_relay(pos, &relays),
            peer: None,
        });
    }

    let half_angle = (chord / (2.0 * ring)).clamp(0.0, 1.0).asin();
    for j in 0..config.num_d2d_pairs {
        let home = j % num_relays;
        let centre = relays[home];
        let mut tx = centre;
        let mut rx = centre;
        for _ in 0..PLACEMENT_TRIES {
            let a = rng.random_range(0.0..2.0 * PI);
            let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let b = a + dir * 2.0 * half_angle;
            tx = [centre[0] + ring * a.cos(), centre[1] + ring * a.sin()];
            rx = [centre[0] + ring * b.cos(), centre[1] + ring * b.sin()];
            if nearest_relay(tx, &relays) == home && nearest_relay(rx, &relays) == home {
                break;
            }
        }
        let tx_id = ues.len();
        ues.push(UeRecord {
            id: tx_id,
            kind: UeKind::D2dTx,
            position: tx,
            serving_relay: home,
            peer: Some(tx_id + 1),
        });
        ues.push(UeRecord {
            id: tx_id + 1,
            kind: UeKind::D2dRx,
            position: rx,
            serving_relay: home,
            peer: Some(tx_id),
        });
    }

    Ok(NetworkTopology {
        enb_position: enb,
        relay_positions: relays,
        ues,
    })
}

/// Addressable radio nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Enb,
    Relay(usize),
    Ue(usize),
}

/// Per-RB linear gains between every pair of nodes (reciprocal channels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub num_rbs: usize,
    pub num_relays: usize,
    pub num_ues: usize,
    pub sigma2_w: f64,
    /// Upper-triangular storage, pair-major then RB.
    gains: Vec<f64>,
}

impl ChannelRealization {
    fn num_nodes(&self) -> usize {
        1 + self.num_relays + self.num_ues
    }

    fn index(&self, node: Node) -> usize {
        match node {
            Node::Enb => 0,
            Node::Relay(l) => {
                assert!(l < self.num_relays, "relay {l} out of range");
                1 + l
            }
            Node::Ue(u) => {
                assert!(u < self.num_ues, "UE {u} out of range");
                1 + self.num_relays + u
            }
        }
    }

    fn pair_slot(&self, a: usize, b: usize) -> usize {
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        let n = self.num_nodes();
        // row-major index into the strict upper triangle
        i * (2 * n - i - 1) / 2 + (j - i - 1)
    }

    pub fn gain(&self, a: Node, b: Node, rb: usize) -> f64 {
        let (ia, ib) = (self.index(a), self.index(b));
        assert!(ia != ib, "self-link requested");
        assert!(rb < self.num_rbs, "RB {rb} out of range");
        self.gains[self.pair_slot(ia, ib) * self.num_rbs + rb]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("realisation serialises")
    }
}

fn position(topology: &NetworkTopology, node: Node) -> [f64; 2] {
    match node {
        Node::Enb => topology.enb_position,
        Node::Relay(l) => topology.relay_positions[l],
        Node::Ue(u) => topology.ues[u].position,
    }
}

/// Draw shadowing per link and Rayleigh fading per link and RB.
/// With `fading` off every gain is the pure distance path loss.
pub fn realize_channels(
    topology: &NetworkTopology,
    config: &ScenarioConfig,
    rng: &mut impl Rng,
    fading: bool,
) -> Result<ChannelRealization> {
    let num_relays = topology.num_relays();
    let num_ues = topology.ues.len();
    let nodes: Vec<Node> = std::iter::once(Node::Enb)
        .chain((0..num_relays).map(Node::Relay))
        .chain((0..num_ues).map(Node::Ue))
        .collect();
    let n = nodes.len();
    let num_rbs = config.num_rbs;
    let mut gains = Vec::with_capacity(n * (n - 1) / 2 * num_rbs);
    let access = Normal::new(0.0, config.shadow_access_db)
        .map_err(|e| Error::Config(e.to_string()))?;
    let backhaul = Normal::new(0.0, config.shadow_backhaul_db)
        .map_err(|e| Error::Config(e.to_string()))?;
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (nodes[i], nodes[j]);
            let is_backhaul = matches!(
                (a, b),
                (Node::Enb, Node::Relay(_)) | (Node::Relay(_), Node::Enb)
            );
            let d_km = dist(position(topology, a), position(topology, b)).max(MIN_LINK_DISTANCE_M)
                / 1000.0;
            let shadow_db = if fading {
                if is_backhaul {
                    backhaul.sample(rng)
                } else {
                    access.sample(rng)
                }
            } else {
                0.0
            };
            for _ in 0..num_rbs {
                let rayleigh: f64 = if fading { Exp1.sample(rng) } else { 1.0 };
                // guard against an exact zero draw
                let draw = FadingDraw::new(shadow_db, rayleigh.max(1e-300))?;
                let pl = if is_backhaul {
                    path_loss_backhaul_db(d_km, draw)?
                } else {
                    path_loss_access_db(d_km, draw)?
                };
                gains.push(gain_from_pathloss(pl));
            }
        }
    }
    Ok(ChannelRealization {
        num_rbs,
        num_relays,
        num_ues,
        sigma2_w: config.sigma2_w(),
        gains,
    })
}

/// Per-RB reference victim and its gain. `node` is `None` when there is no
/// candidate (single relay, or no D2D receivers at other relays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGain {
    pub node: Vec<Option<usize>>,
    pub gain: Vec<f64>,
}

fn argmax_reference(
    candidates: &[usize],
    num_rbs: usize,
    mode: ReferenceMode,
    gain: impl Fn(usize, usize) -> f64,
) -> ReferenceGain {
    if candidates.is_empty() {
        return ReferenceGain {
            node: vec![None; num_rbs],
            gain: vec![0.0; num_rbs],
        };
    }
    match mode {
        ReferenceMode::PerRb => {
            let mut node = Vec::with_capacity(num_rbs);
            let mut best = Vec::with_capacity(num_rbs);
            for rb in 0..num_rbs {
                let mut arg = candidates[0];
                let mut g = gain(arg, rb);
                for &c in &candidates[1..] {
                    let v = gain(c, rb);
                    // strict: ties keep the lower index
                    if v > g {
                        g = v;
                        arg = c;
                    }
                }
                node.push(Some(arg));
                best.push(g);
            }
            ReferenceGain { node, gain: best }
        }
        ReferenceMode::PerUe => {
            let mean = |c: usize| (0..num_rbs).map(|rb| gain(c, rb)).sum::<f64>();
            let mut arg = candidates[0];
            let mut m = mean(arg);
            for &c in &candidates[1..] {
                let v = mean(c);
                if v > m {
                    m = v;
                    arg = c;
                }
            }
            ReferenceGain {
                node: vec![Some(arg); num_rbs],
                gain: (0..num_rbs).map(|rb| gain(arg, rb)).collect(),
            }
        }
    }
}

/// Strongest cross gain from a transmitting UE towards the relays it is not served by.
pub fn reference_node_hop1(
    ue: usize,
    topology: &NetworkTopology,
    realization: &ChannelRealization,
    mode: ReferenceMode,
) -> ReferenceGain {
    let home = topology.ues[ue].serving_relay;
    let candidates: Vec<usize> = (0..topology.num_relays()).filter(|&j| j != home).collect();
    argmax_reference(&candidates, realization.num_rbs, mode, |j, rb| {
        realization.gain(Node::Ue(ue), Node::Relay(j), rb)
    })
}

/// Strongest cross gain from relay `l` towards D2D receivers served by other relays.
pub fn reference_node_hop2(
    relay: usize,
    topology: &NetworkTopology,
    realization: &ChannelRealization,
    mode: ReferenceMode,
) -> ReferenceGain {
    let candidates: Vec<usize> = topology
        .ues
        .iter()
        .filter(|u| u.kind == UeKind::D2dRx && u.serving_relay != relay)
        .map(|u| u.id)
        .collect();
    argmax_reference(&candidates, realization.num_rbs, mode, |rx, rb| {
        realization.gain(Node::Relay(relay), Node::Ue(rx), rb)
    })
}

/// Solver input for relay `l`, together with the users it covers.
pub fn relay_problem(
    l: usize,
    topology: &NetworkTopology,
    realization: &ChannelRealization,
    config: &ScenarioConfig,
) -> (AllocationProblem, Vec<RelayUser>) {
    let users = topology.relay_users(l);
    let n = realization.num_rbs;
    let sigma2 = realization.sigma2_w;
    let hop2_ref = reference_node_hop2(l, topology, realization, config.reference_mode);
    let mut h1 = Vec::with_capacity(users.len());
    let mut h2 = Vec::with_capacity(users.len());
    let mut g1 = Vec::with_capacity(users.len());
    let mut g2 = Vec::with_capacity(users.len());
    let mut qos = Vec::with_capacity(users.len());
    for user in &users {
        let tx = user.tx();
        h1.push((0..n).map(|rb| realization.gain(Node::Ue(tx), Node::Relay(l), rb)).collect());
        let second: Vec<f64> = match *user {
            RelayUser::Cue { .. } => (0..n)
                .map(|rb| realization.gain(Node::Relay(l), Node::Enb, rb))
                .collect(),
            RelayUser::D2d { rx, .. } => (0..n)
                .map(|rb| realization.gain(Node::Relay(l), Node::Ue(rx), rb))
                .collect(),
        };
        h2.push(second);
        g1.push(reference_node_hop1(tx, topology, realization, config.reference_mode).gain);
        g2.push(hop2_ref.gain.clone());
        qos.push(if user.is_d2d() {
            config.qos_d2d_bps
        } else {
            config.qos_cue_bps
        });
    }
    let u = users.len();
    let problem = AllocationProblem {
        h1,
        h2,
        g1_ref: g1,
        g2_ref: g2,
        p_ue_max_w: vec![dbm_to_watts(config.p_ue_max_dbm); u],
        p_relay_max_w: dbm_to_watts(config.p_relay_max_dbm),
        i_th1_w: vec![dbm_to_watts(config.i_th_hop1_dbm); n],
        i_th2_w: vec![dbm_to_watts(config.i_th_hop2_dbm); n],
        qos_bps: qos,
        sigma2_w: sigma2,
        i_bar_w: vec![vec![config.ibar_over_noise * sigma2; n]; u],
        rb_bandwidth_hz: crate::propagation::RB_BANDWIDTH_HZ,
    };
    (problem, users)
}
