//! Synthetic event corpora with planted cluster structure and planted
//! temporal profiles.
//!
//! Codes are organized into groups; each group follows one of three
//! temporal archetypes describing how an episode of that group spreads its
//! emissions over time units:
//!
//! * `peak` — everything lands within two consecutive units of the episode
//!   start (an acute, short-lived pattern);
//! * `stable` — emissions spread uniformly from the start to the horizon
//!   (a chronic, flat pattern);
//! * `sequela` — one sparse emission at the start, then an elevated tail
//!   over the following long window (a delayed long-tail pattern).
//!
//! Groups double as cluster and nearest-neighbour ground truth; a disjoint
//! pool of background noise codes stays unlabeled so the metrics are
//! unambiguous. Generation is single-threaded and deterministic per seed.

use std::collections::BTreeSet;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::AttentionProfile;

/// Emissions per peak episode (all within [u0, u0+1]).
const PEAK_EMISSIONS: u32 = 6;
/// Emissions per stable episode (uniform over [u0, horizon)).
const STABLE_EMISSIONS: u32 = 12;
/// Tail emissions per sequela episode.
const SEQUELA_TAIL_EMISSIONS: u32 = 8;
/// Sequela tail starts this many units after the onset.
const SEQUELA_LAG: u32 = 2;
/// Sequela tail ends this many units after the onset (inclusive).
const SEQUELA_WINDOW: u32 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Peak,
    Stable,
    Sequela,
}

impl ProfileKind {
    /// Groups cycle through the archetypes, so any config with at least
    /// three groups plants every archetype.
    pub fn for_group(group: usize) -> Self {
        match group % 3 {
            0 => ProfileKind::Peak,
            1 => ProfileKind::Stable,
            _ => ProfileKind::Sequela,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_groups: usize,
    pub codes_per_group: usize,
    pub n_entities: usize,
    /// Poisson mean of episodes per entity.
    pub episodes_per_entity: f64,
    pub horizon_units: u32,
    /// Probability a background code is injected into each (entity, unit).
    pub noise_rate: f64,
    /// Size of the disjoint background code pool.
    pub noise_codes: usize,
    /// Probability an (entity, unit) is silenced wholesale, creating
    /// sparse visit gaps. Zero by default.
    pub gap_rate: f64,
    /// Days per unit when emitting day stamps.
    pub time_unit_days: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_groups: 10,
            codes_per_group: 20,
            n_entities: 2000,
            episodes_per_entity: 5.0,
            horizon_units: 52,
            noise_rate: 0.1,
            noise_codes: 50,
            gap_rate: 0.0,
            time_unit_days: 7,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupManifest {
    pub label: String,
    pub profile: ProfileKind,
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleManifest {
    pub peak_emissions: u32,
    pub stable_emissions: u32,
    pub sequela_tail_emissions: u32,
    pub sequela_lag: u32,
    pub sequela_window: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusStats {
    pub entities: usize,
    pub events: usize,
    pub unique_codes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_groups: usize,
    pub codes_per_group: usize,
    pub n_entities: usize,
    pub episodes_per_entity: f64,
    pub horizon_units: u32,
    pub noise_rate: f64,
    pub noise_codes: usize,
    pub gap_rate: f64,
    pub time_unit_days: u32,
    pub schedule: ScheduleManifest,
    pub groups: Vec<GroupManifest>,
    pub stats: CorpusStats,
}

/// A generated corpus plus its ground truth and manifest.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    /// `(entity, day, code)` events, grouped by entity, day-sorted within.
    pub events: Vec<(String, u32, String)>,
    /// `(code, group label)` for every group code; noise codes unlabeled.
    pub cluster_truth: Vec<(String, String)>,
    /// Same labeling used as nearest-neighbour subcategories.
    pub neighbor_truth: Vec<(String, String)>,
    pub manifest: Manifest,
}

fn group_code(group: usize, code: usize) -> String {
    format!("g{group:02}c{code:02}")
}

fn group_label(group: usize) -> String {
    format!("grp{group:02}")
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    let limit = (-mean).exp();
    let mut k = 0u32;
    let mut p = 1.0f64;
    loop {
        p *= rng.random::<f64>();
        if p <= limit || k >= 10_000 {
            return k;
        }
        k += 1;
    }
}

/// Units touched by one episode of the given archetype. Exact support:
/// peak ⊆ [u0, u0+1]; stable ⊆ [u0, horizon); sequela ⊆ {u0} ∪
/// [u0+LAG, u0+WINDOW], all clipped to the horizon.
pub(crate) fn episode_units(
    profile: ProfileKind,
    u0: u32,
    horizon: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let last = horizon - 1;
    let mut units = Vec::new();
    match profile {
        ProfileKind::Peak => {
            for _ in 0..PEAK_EMISSIONS {
                units.push((u0 + rng.random_range(0..2u32)).min(last));
            }
        }
        ProfileKind::Stable => {
            for _ in 0..STABLE_EMISSIONS {
                units.push(rng.random_range(u0..horizon));
            }
        }
        ProfileKind::Sequela => {
            units.push(u0);
            let lo = u0 + SEQUELA_LAG;
            let hi = (u0 + SEQUELA_WINDOW).min(last);
            if lo <= hi {
                for _ in 0..SEQUELA_TAIL_EMISSIONS {
                    units.push(rng.random_range(lo..=hi));
                }
            }
        }
    }
    units
}

/// Generate a corpus. Deterministic: the same config (seed included)
/// yields byte-identical output files.
pub fn generate(config: &SynthConfig) -> SyntheticCorpus {
    assert!(config.n_groups >= 1 && config.codes_per_group >= 1);
    assert!(config.horizon_units >= 1 && config.time_unit_days >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise_pool: Vec<String> = (0..config.noise_codes)
        .map(|k| format!("noise{k:02}"))
        .collect();

    let mut events: Vec<(String, u32, String)> = Vec::new();
    let mut entities_with_events = 0usize;

    for entity_idx in 0..config.n_entities {
        let entity = format!("e{entity_idx:05}");
        let mut entity_events: Vec<(u32, u32, String)> = Vec::new(); // (unit, day, code)

        let n_episodes = poisson(&mut rng, config.episodes_per_entity);
        for _ in 0..n_episodes {
            let group = rng.random_range(0..config.n_groups);
            let profile = ProfileKind::for_group(group);
            let u0 = rng.random_range(0..config.horizon_units);
            for unit in episode_units(profile, u0, config.horizon_units, &mut rng) {
                let code = rng.random_range(0..config.codes_per_group);
                let day = unit * config.time_unit_days + rng.random_range(0..config.time_unit_days);
                entity_events.push((unit, day, group_code(group, code)));
            }
        }

        if config.noise_rate > 0.0 && !noise_pool.is_empty() {
            for unit in 0..config.horizon_units {
                if rng.random::<f64>() < config.noise_rate {
                    let code = noise_pool[rng.random_range(0..noise_pool.len())].clone();
                    let day =
                        unit * config.time_unit_days + rng.random_range(0..config.time_unit_days);
                    entity_events.push((unit, day, code));
                }
            }
        }

        if config.gap_rate > 0.0 {
            let silenced: Vec<bool> = (0..config.horizon_units)
                .map(|_| rng.random::<f64>() < config.gap_rate)
                .collect();
            entity_events.retain(|&(unit, _, _)| !silenced[unit as usize]);
        }

        if entity_events.is_empty() {
            continue;
        }
        entities_with_events += 1;
        entity_events.sort_by_key(|&(_, day, _)| day);
        events.extend(
            entity_events
                .into_iter()
                .map(|(_, day, code)| (entity.clone(), day, code)),
        );
    }

    let groups: Vec<GroupManifest> = (0..config.n_groups)
        .map(|g| GroupManifest {
            label: group_label(g),
            profile: ProfileKind::for_group(g),
            codes: (0..config.codes_per_group)
                .map(|c| group_code(g, c))
                .collect(),
        })
        .collect();
    let truth: Vec<(String, String)> = groups
        .iter()
        .flat_map(|g| g.codes.iter().map(|c| (c.clone(), g.label.clone())))
        .collect();

    let unique_codes = events
        .iter()
        .map(|(_, _, code)| code.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    let manifest = Manifest {
        seed: config.seed,
        n_groups: config.n_groups,
        codes_per_group: config.codes_per_group,
        n_entities: config.n_entities,
        episodes_per_entity: config.episodes_per_entity,
        horizon_units: config.horizon_units,
        noise_rate: config.noise_rate,
        noise_codes: config.noise_codes,
        gap_rate: config.gap_rate,
        time_unit_days: config.time_unit_days,
        schedule: ScheduleManifest {
            peak_emissions: PEAK_EMISSIONS,
            stable_emissions: STABLE_EMISSIONS,
            sequela_tail_emissions: SEQUELA_TAIL_EMISSIONS,
            sequela_lag: SEQUELA_LAG,
            sequela_window: SEQUELA_WINDOW,
        },
        groups,
        stats: CorpusStats {
            entities: entities_with_events,
            events: events.len(),
            unique_codes,
        },
    };

    SyntheticCorpus {
        events,
        cluster_truth: truth.clone(),
        neighbor_truth: truth,
        manifest,
    }
}

impl SyntheticCorpus {
    pub fn write_corpus<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (entity, day, code) in &self.events {
            writeln!(w, "{entity}\t{day}\t{code}")?;
        }
        Ok(())
    }

    pub fn write_cluster_truth<W: Write>(&self, w: W) -> io::Result<()> {
        write_truth(&self.cluster_truth, w)
    }

    pub fn write_neighbor_truth<W: Write>(&self, w: W) -> io::Result<()> {
        write_truth(&self.neighbor_truth, w)
    }

    pub fn write_manifest<W: Write>(&self, mut w: W) -> io::Result<()> {
        serde_json::to_writer_pretty(&mut w, &self.manifest)?;
        writeln!(w)
    }
}

fn write_truth<W: Write>(truth: &[(String, String)], mut w: W) -> io::Result<()> {
    for (code, label) in truth {
        writeln!(w, "{code}\t{label}")?;
    }
    Ok(())
}

/// Share of attention mass within `window` units of the target:
/// the sum of profile weights at offsets |Δ| <= window.
pub fn profile_concentration(profile: &AttentionProfile, window: usize) -> f64 {
    let slots = profile.weights.len();
    let scope = (slots - 1) / 2;
    assert!(window <= scope, "window must not exceed the scope");
    let lo = scope - window;
    let hi = scope + window;
    profile.weights[lo..=hi].iter().sum()
}

/// Attention mass over the signed offset range [lo, hi] (inclusive).
pub fn profile_mass(profile: &AttentionProfile, lo: i32, hi: i32) -> f64 {
    let slots = profile.weights.len() as i32;
    let scope = (slots - 1) / 2;
    assert!(lo >= -scope && hi <= scope && lo <= hi);
    ((lo + scope) as usize..=(hi + scope) as usize)
        .map(|k| profile.weights[k])
        .sum()
}
