//! Experiment configuration files (TOML).

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use drop_core::fault::FaultPlan;
use drop_core::pattern::{GeneratorConfig, WordOrder};
use drop_core::simlink::LinkModel;
use drop_core::topology::{AssignmentPlan, CoreMap};

use crate::affinity::Pinning;
use crate::receiver::Placement;
use crate::sender::StreamConfig;
use crate::slots::RingConfig;
use crate::transport::TransportMode;

/// Measurement phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Received packet rate for 1..N streams, loss ignored.
    MaxRate,
    /// Measured vs. expected rate while the pause shrinks.
    LosslessRate,
    /// Highest lossless rate per packet size.
    SizeSweep,
    /// Thread placement search.
    AssignSearch,
    /// Long lossless run with payload verification.
    Soak,
    /// Audit vs. replay oracle over seeded fault runs.
    FaultOracle,
}

impl Phase {
    /// Name used on the command line and in file names.
    pub fn name(self) -> &'static str {
        match self {
            Phase::MaxRate => "max-rate",
            Phase::LosslessRate => "lossless-rate",
            Phase::SizeSweep => "size-sweep",
            Phase::AssignSearch => "assign-search",
            Phase::Soak => "soak",
            Phase::FaultOracle => "fault-oracle",
        }
    }
}

/// Run length. Packet counts are totals over all streams, split evenly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopConfig {
    /// Total packets.
    pub packets: Option<u64>,
    /// Wall-clock seconds.
    pub duration_s: Option<f64>,
}

impl StopConfig {
    /// Duration, if set.
    pub fn duration(&self) -> Option<Duration> {
        self.duration_s.map(Duration::from_secs_f64)
    }
}

/// Receive-side options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverSettings {
    /// Histogram payload words.
    pub histogram: bool,
    /// Word order of the histogram.
    pub word_order: WordOrder,
    /// Audit events kept per stream.
    pub event_cap: usize,
    /// Expected first packet id of every stream.
    pub expected_first: Option<u64>,
    /// Stats snapshot interval in seconds.
    pub stats_interval_s: f64,
    /// Stop the run at the first audit event.
    pub abort_on_event: bool,
}

impl Default for ReceiverSettings {
    fn default() -> Self {
        Self {
            histogram: true,
            word_order: WordOrder::Little,
            event_cap: drop_core::audit::DEFAULT_EVENT_CAP,
            expected_first: None,
            stats_interval_s: 1.0,
            abort_on_event: false,
        }
    }
}

/// Thread placement. `plan` wins over `preset`; neither means unpinned.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    /// Named plan, e.g. `paper-2stream`.
    pub preset: Option<String>,
    /// Explicit plan.
    pub plan: Option<AssignmentPlan>,
    /// CCX hosting the receiver.
    pub ccx: usize,
    /// CCX index to logical core ids in position order.
    #[serde(with = "string_keys")]
    pub core_map: CoreMap,
}

/// One `[[streams]]` entry; `count` replicates it with consecutive stream
/// ids and ports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    /// Copies of this entry.
    pub count: usize,
    /// Stream id of the first copy.
    pub stream_id: u16,
    /// UDP destination port of the first copy; 0 picks a free port in UDP mode.
    pub port: u16,
    /// Destination address.
    pub host: IpAddr,
    /// First packet id.
    pub initial_packet_id: u64,
    /// Generators feeding each copy.
    pub generators: Vec<GeneratorConfig>,
    /// Fault injection (loopback only); copy `i` uses seed + i.
    pub faults: Option<FaultPlan>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            count: 1,
            stream_id: 0,
            port: 9000,
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            initial_packet_id: 0,
            generators: vec![GeneratorConfig::default()],
            faults: None,
        }
    }
}

/// A stream ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedStream {
    /// Sender settings.
    pub stream: StreamConfig,
    /// Faults to inject.
    pub faults: Option<FaultPlan>,
}

/// `max-rate` options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaxRateConfig {
    /// Highest stream count; steps run 1..=max_streams using the first
    /// resolved streams.
    pub max_streams: usize,
}

impl Default for MaxRateConfig {
    fn default() -> Self {
        Self { max_streams: 4 }
    }
}

/// `lossless-rate` options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LosslessConfig {
    /// Pause after each packet, in ns, per step. Run longest first.
    pub pauses_ns: Vec<u64>,
    /// Measured/expected ratio a lossless step must reach to pass.
    pub min_ratio: f64,
}

impl Default for LosslessConfig {
    fn default() -> Self {
        Self { pauses_ns: vec![4000, 2000, 1000, 500, 250], min_ratio: 0.95 }
    }
}

/// `size-sweep` options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSweepConfig {
    /// Packets per stream and size.
    pub packets_per_stream: u64,
}

impl Default for SizeSweepConfig {
    fn default() -> Self {
        Self { packets_per_stream: 20_000 }
    }
}

/// `assign-search` options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignSearchConfig {
    /// Search rounds; round 1 is unpruned, later rounds apply the
    /// worker-exclusivity rule.
    pub rounds: usize,
    /// Per-stream rate decrement while looking for a lossless setting, bit/s.
    pub reduce_step_bps: f64,
    /// Rate decrements tried on the best plan.
    pub max_reductions: usize,
}

impl Default for AssignSearchConfig {
    fn default() -> Self {
        Self { rounds: 2, reduce_step_bps: 0.5e9, max_reductions: 8 }
    }
}

/// `fault-oracle` options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultOracleConfig {
    /// Seeded runs.
    pub seeds: u64,
    /// Packets per run.
    pub packets: u64,
    /// Upper bound of the per-run drop probability.
    pub drop_prob_max: f64,
    /// Upper bound of the per-run duplicate probability.
    pub dup_prob_max: f64,
    /// Upper bound of the per-run reorder probability.
    pub reorder_prob_max: f64,
    /// Deepest reordering, in packets.
    pub reorder_depth: u32,
    /// Payload bytes per packet.
    pub packet_size: usize,
    /// Also corrupt one expected event and require the mismatch to be caught.
    pub self_test: bool,
}

impl Default for FaultOracleConfig {
    fn default() -> Self {
        Self {
            seeds: 100,
            packets: 1_000_000,
            drop_prob_max: 1e-3,
            dup_prob_max: 1e-3,
            reorder_prob_max: 1e-3,
            reorder_depth: 8,
            packet_size: 48,
            self_test: true,
        }
    }
}

/// Everything one phase run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Phase this file is meant for.
    pub phase: Option<Phase>,
    /// Seed for every random choice.
    pub seed: u64,
    /// Link type.
    pub transport: TransportMode,
    /// Output directory.
    pub out: PathBuf,
    /// Network interface for raw mode on real hardware.
    pub iface: Option<String>,
    /// Run length.
    pub stop: StopConfig,
    /// Receive ring geometry.
    pub ring: RingConfig,
    /// Receive-side options.
    pub receiver: ReceiverSettings,
    /// Thread placement.
    pub placement: PlacementConfig,
    /// Streams.
    pub streams: Vec<StreamSpec>,
    /// `max-rate` options.
    pub max_rate: MaxRateConfig,
    /// `lossless-rate` options.
    pub lossless: LosslessConfig,
    /// `size-sweep` options.
    pub size_sweep: SizeSweepConfig,
    /// `assign-search` options.
    pub assign_search: AssignSearchConfig,
    /// `fault-oracle` options.
    pub fault_oracle: FaultOracleConfig,
    /// Cost model used by the `sim` transport.
    pub sim: LinkModel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phase: None,
            seed: 0,
            transport: TransportMode::Loopback,
            out: PathBuf::from("results"),
            iface: None,
            stop: StopConfig::default(),
            ring: RingConfig::default(),
            receiver: ReceiverSettings::default(),
            placement: PlacementConfig::default(),
            streams: vec![StreamSpec::default()],
            max_rate: MaxRateConfig::default(),
            lossless: LosslessConfig::default(),
            size_sweep: SizeSweepConfig::default(),
            assign_search: AssignSearchConfig::default(),
            fault_oracle: FaultOracleConfig::default(),
            sim: LinkModel::default(),
        }
    }
}

/// Configuration problems.
#[derive(Debug, Error)]
pub enum ConfigFileError {
    /// File unreadable.
    #[error("reading {path}: {source}")]
    Read {
        /// File.
        path: PathBuf,
        /// Cause.
        source: std::io::Error,
    },
    /// Not valid TOML for this schema.
    #[error("parsing {path}: {source}")]
    Parse {
        /// File.
        path: PathBuf,
        /// Cause.
        source: toml::de::Error,
    },
    /// Inconsistent settings.
    #[error("{0}")]
    Invalid(String),
}

impl ExperimentConfig {
    /// Reads a TOML file.
    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigFileError::Read { path: path.to_owned(), source })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigFileError::Parse { source, .. } => ConfigFileError::Parse { path: path.to_owned(), source },
            other => other,
        })
    }

    /// Parses TOML text.
    pub fn parse(text: &str) -> Result<Self, ConfigFileError> {
        toml::from_str(text).map_err(|source| ConfigFileError::Parse { path: PathBuf::new(), source })
    }

    /// Serializes to TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable in TOML")
    }

    /// Expands `[[streams]]` entries, checks ids and ports are unique and
    /// generators fit the link.
    pub fn resolve_streams(&self) -> Result<Vec<ResolvedStream>, ConfigFileError> {
        let mut out: Vec<ResolvedStream> = Vec::new();
        for spec in &self.streams {
            for i in 0..spec.count {
                let id = u16::try_from(usize::from(spec.stream_id) + i)
                    .map_err(|_| ConfigFileError::Invalid(format!("stream id {} + {i} overflows", spec.stream_id)))?;
                let port = if spec.port == 0 {
                    0
                } else {
                    u16::try_from(usize::from(spec.port) + i)
                        .map_err(|_| ConfigFileError::Invalid(format!("port {} + {i} overflows", spec.port)))?
                };
                if out.iter().any(|r| r.stream.stream_id == id) {
                    return Err(ConfigFileError::Invalid(format!("stream id {id} used twice")));
                }
                if port != 0 && out.iter().any(|r| r.stream.port() == port) {
                    return Err(ConfigFileError::Invalid(format!("port {port} used twice")));
                }
                let faults = spec.faults.clone().map(|mut f| {
                    f.seed = f.seed.wrapping_add(i as u64);
                    f
                });
                out.push(ResolvedStream {
                    stream: StreamConfig {
                        stream_id: id,
                        dest: SocketAddr::new(spec.host, port),
                        generators: spec.generators.clone(),
                        initial_packet_id: spec.initial_packet_id,
                    },
                    faults,
                });
            }
        }
        if out.is_empty() {
            return Err(ConfigFileError::Invalid("no streams configured".into()));
        }
        let capacity = self.payload_capacity();
        for r in &out {
            for g in &r.stream.generators {
                g.validate(capacity)
                    .map_err(|e| ConfigFileError::Invalid(format!("stream {}: {e}", r.stream.stream_id)))?;
            }
        }
        Ok(out)
    }

    /// Largest DROP payload (after the 16-byte header) the transport carries.
    pub fn payload_capacity(&self) -> usize {
        self.packet_capacity().saturating_sub(drop_core::protocol::HEADER_LEN)
    }

    /// Largest DROP packet (header included) the transport carries.
    pub fn packet_capacity(&self) -> usize {
        let slot = self.ring.slot_size;
        match self.transport {
            TransportMode::Raw => slot.saturating_sub(drop_core::frame::FRAME_HEADERS_LEN),
            _ => slot,
        }
    }

    /// Placement for one receiver, if configured.
    pub fn placement(&self) -> Result<Option<Placement>, ConfigFileError> {
        let plan = match (&self.placement.plan, &self.placement.preset) {
            (Some(plan), _) => plan.clone(),
            (None, Some(name)) => AssignmentPlan::preset(name)
                .ok_or_else(|| ConfigFileError::Invalid(format!("unknown placement preset {name:?}")))?
                .plan,
            (None, None) => return Ok(None),
        };
        Ok(Some(Placement { plan, pinning: self.pinning() }))
    }

    /// Core pinning settings.
    pub fn pinning(&self) -> Pinning {
        Pinning { ccx: self.placement.ccx, core_map: self.placement.core_map.clone() }
    }
}

// TOML table keys are strings; the core map is keyed by CCX number.
mod string_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use drop_core::topology::CoreMap;

    pub fn serialize<S: Serializer>(map: &CoreMap, s: S) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<String, &Vec<usize>> = map.0.iter().map(|(k, v)| (k.to_string(), v)).collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CoreMap, D::Error> {
        let m = BTreeMap::<String, Vec<usize>>::deserialize(d)?;
        m.into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| D::Error::custom(format!("CCX index {k:?} is not a number"))))
            .collect::<Result<_, _>>()
            .map(CoreMap)
    }
}
