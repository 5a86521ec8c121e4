//! Seeded synthetic cohorts with planted behaviour archetypes.
//!
//! Every record carries three kinds of field:
//! - `bp`: a systolic/diastolic pair. With the archetype's fabrication
//!   probability it is exactly 120/80 or 110/70, otherwise a reading that is
//!   never one of those two values.
//! - `fetal_hr`: a numeric reading in bpm, or a `NO_EQUIPMENT` marker with the
//!   archetype's no-equipment probability.
//! - one text channel per entry of `channels`, holding `FLAG` or `OK`. Each
//!   worker-month flags `round(rate * n)` of its `n` records, so a channel's
//!   monthly percentage tracks its rate up to rounding.
//!
//! Monthly rates are `base + worker offset + month noise`, clamped to [0, 1].
//! Offsets are drawn once per worker with sd `anm_spread`, month noise with sd
//! `noise`. A base rate of exactly 0 or 1 is never perturbed.
//!
//! Archetype labels are only available through [`ground_truth`]; records never
//! carry them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{HealthRecord, Marker, MeasurementValue, Month, RecordSet};
use crate::error::{Error, Result};
use crate::rules::RuleSet;

/// Identifier of the generator algorithm, written into cohort metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9) seed_from_u64; stream 0 assigns archetypes, stream 1 generates records";

pub const FABRICATED_BP: [(f64, f64); 2] = [(120.0, 80.0), (110.0, 70.0)];
pub const FLAG: &str = "FLAG";
pub const OK: &str = "OK";

/// Rule definitions matching the fields of [`mirror_spec`] cohorts.
pub const MIRROR_RULES: &str = include_str!("../presets/rules_mirror.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchetypeParams {
    /// Probability that a BP reading is exactly 120/80 or 110/70.
    pub bp_fabrication: f64,
    /// Probability that a fetal heart rate entry is a `NO_EQUIPMENT` marker.
    pub no_equipment: f64,
    /// Flag rate per text channel, keyed by field name.
    #[serde(default)]
    pub channels: BTreeMap<String, f64>,
    /// Month-to-month sd of every rate.
    #[serde(default)]
    pub noise: f64,
    /// Worker-to-worker sd of every rate.
    #[serde(default)]
    pub anm_spread: f64,
    /// Overrides the cohort-wide range.
    #[serde(default)]
    pub patients_per_camp: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    pub name: String,
    pub count: u32,
    pub params: ArchetypeParams,
}

fn default_camps() -> (u32, u32) {
    (4, 5)
}

fn default_patients() -> (u32, u32) {
    (8, 12)
}

fn default_beneficiaries() -> u32 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub seed: u64,
    pub months: u32,
    pub start_month: Month,
    #[serde(default = "default_camps")]
    pub camps_per_month: (u32, u32),
    #[serde(default = "default_patients")]
    pub patients_per_camp: (u32, u32),
    /// Size of each worker's patient pool.
    #[serde(default = "default_beneficiaries")]
    pub beneficiaries_per_anm: u32,
    #[serde(rename = "archetype")]
    pub archetypes: Vec<Archetype>,
}

fn check_range(name: &str, (lo, hi): (u32, u32)) -> Result<()> {
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("{name} range [{lo}, {hi}] must be nonempty and start at 1 or more")));
    }
    Ok(())
}

fn check_prob(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{what} = {p} is not a probability")));
    }
    Ok(())
}

impl CohortSpec {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let spec: CohortSpec = toml::from_str(src).map_err(|e| Error::Config(format!("cohort spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&src)
    }

    pub fn validate(&self) -> Result<()> {
        if self.archetypes.is_empty() {
            return Err(Error::Config("cohort spec needs at least one archetype".into()));
        }
        if self.months == 0 {
            return Err(Error::Config("cohort spec needs at least one month".into()));
        }
        check_range("camps_per_month", self.camps_per_month)?;
        check_range("patients_per_camp", self.patients_per_camp)?;
        let channels: BTreeSet<&String> = self.archetypes[0].params.channels.keys().collect();
        let mut names = BTreeSet::new();
        for a in &self.archetypes {
            if a.name.is_empty() || !names.insert(&a.name) {
                return Err(Error::Config(format!("archetype name `{}` is empty or repeated", a.name)));
            }
            let p = &a.params;
            check_prob(&format!("{}.bp_fabrication", a.name), p.bp_fabrication)?;
            check_prob(&format!("{}.no_equipment", a.name), p.no_equipment)?;
            for (ch, &r) in &p.channels {
                check_prob(&format!("{}.channels.{ch}", a.name), r)?;
            }
            if !(p.noise >= 0.0 && p.anm_spread >= 0.0) {
                return Err(Error::Config(format!("{}: noise and anm_spread must be nonnegative", a.name)));
            }
            if p.channels.keys().collect::<BTreeSet<_>>() != channels {
                return Err(Error::Config(format!("archetype `{}` has a different channel set", a.name)));
            }
            let ppc = p.patients_per_camp.unwrap_or(self.patients_per_camp);
            check_range(&format!("{}.patients_per_camp", a.name), ppc)?;
            if ppc.1 > self.beneficiaries_per_anm {
                return Err(Error::Config(format!(
                    "{}: {} patients per camp exceeds the pool of {} beneficiaries",
                    a.name, ppc.1, self.beneficiaries_per_anm
                )));
            }
        }
        for ch in channels {
            let valid = !ch.is_empty() && ch.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !valid || ch == "bp" || ch == "fetal_hr" {
                return Err(Error::Config(format!("invalid channel name `{ch}`")));
            }
        }
        Ok(())
    }

    pub fn anm_count(&self) -> usize {
        self.archetypes.iter().map(|a| a.count as usize).sum()
    }

    pub fn month_list(&self) -> Vec<Month> {
        (0..self.months as i64).map(|i| self.start_month.offset(i)).collect()
    }
}

fn anm_name(i: usize) -> String {
    format!("ANM{:03}", i + 1)
}

/// Archetype index per worker, in worker order.
fn assignment(spec: &CohortSpec) -> Vec<usize> {
    let mut labels: Vec<usize> = spec
        .archetypes
        .iter()
        .enumerate()
        .flat_map(|(i, a)| std::iter::repeat_n(i, a.count as usize))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    labels
}

/// Planted archetype name per worker id.
pub fn ground_truth(spec: &CohortSpec) -> BTreeMap<String, String> {
    assignment(spec)
        .into_iter()
        .enumerate()
        .map(|(i, a)| (anm_name(i), spec.archetypes[a].name.clone()))
        .collect()
}

struct Jitter {
    normal_noise: Option<Normal<f64>>,
}

impl Jitter {
    fn new(sd: f64) -> Self {
        Jitter {
            normal_noise: (sd > 0.0).then(|| Normal::new(0.0, sd).expect("sd checked positive")),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.normal_noise.as_ref().map_or(0.0, |d| d.sample(rng))
    }
}

fn perturb(base: f64, delta: f64) -> f64 {
    if base <= 0.0 || base >= 1.0 {
        base
    } else {
        (base + delta).clamp(0.0, 1.0)
    }
}

fn honest_bp(rng: &mut ChaCha8Rng) -> MeasurementValue {
    loop {
        let s = rng.random_range(95..=165) as f64;
        let d = rng.random_range(60..=100) as f64;
        if !FABRICATED_BP.contains(&(s, d)) {
            return MeasurementValue::Pair { systolic: s, diastolic: d };
        }
    }
}

/// Deterministic in `spec.seed`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<RecordSet> {
    spec.validate()?;
    let labels = assignment(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let channels: Vec<String> = spec.archetypes[0].params.channels.keys().cloned().collect();
    let months = spec.month_list();
    let mut records = Vec::new();

    for (i, &label) in labels.iter().enumerate() {
        let anm = anm_name(i);
        let params = &spec.archetypes[label].params;
        let spread = Jitter::new(params.anm_spread);
        let noise = Jitter::new(params.noise);
        let (pp_lo, pp_hi) = params.patients_per_camp.unwrap_or(spec.patients_per_camp);
        // Per-worker offsets: BP, no-equipment, then each channel.
        let offsets: Vec<f64> = (0..channels.len() + 2).map(|_| spread.draw(&mut rng)).collect();

        for &month in &months {
            let bp_p = perturb(params.bp_fabrication, offsets[0] + noise.draw(&mut rng));
            let ne_p = perturb(params.no_equipment, offsets[1] + noise.draw(&mut rng));
            let ch_p: Vec<f64> = channels
                .iter()
                .enumerate()
                .map(|(c, ch)| perturb(params.channels[ch], offsets[c + 2] + noise.draw(&mut rng)))
                .collect();

            let camps = rng.random_range(spec.camps_per_month.0..=spec.camps_per_month.1);
            let mut month_records = Vec::new();
            for camp in 0..camps {
                let day = 2 + camp * 26 / camps;
                let date = NaiveDate::from_ymd_opt(month.year(), month.month(), day).expect("day within 2..=27");
                let camp_id = format!("{anm}-{month}-C{}", camp + 1);
                let n = rng.random_range(pp_lo..=pp_hi) as usize;
                for p in index::sample(&mut rng, spec.beneficiaries_per_anm as usize, n).into_vec() {
                    let bp = if rng.random_bool(bp_p) {
                        let (s, d) = FABRICATED_BP[rng.random_range(0..2)];
                        MeasurementValue::Pair { systolic: s, diastolic: d }
                    } else {
                        honest_bp(&mut rng)
                    };
                    let fetal = if rng.random_bool(ne_p) {
                        MeasurementValue::Marker(Marker::NoEquipment)
                    } else {
                        MeasurementValue::Numeric {
                            value: rng.random_range(110..=160) as f64,
                            unit: "bpm".into(),
                        }
                    };
                    let mut fields = BTreeMap::from([("bp".to_string(), bp), ("fetal_hr".to_string(), fetal)]);
                    for ch in &channels {
                        fields.insert(ch.clone(), MeasurementValue::Text(OK.into()));
                    }
                    month_records.push(HealthRecord {
                        anm_id: anm.clone(),
                        camp_id: camp_id.clone(),
                        date,
                        patient_id: format!("{anm}-P{:03}", p + 1),
                        fields,
                    });
                }
            }
            let n = month_records.len();
            for (ch, &rate) in channels.iter().zip(&ch_p) {
                let flags = (rate * n as f64).round() as usize;
                for r in index::sample(&mut rng, n, flags.min(n)).into_vec() {
                    month_records[r].fields.insert(ch.clone(), MeasurementValue::Text(FLAG.into()));
                }
            }
            records.extend(month_records);
        }
    }
    Ok(RecordSet::new(records))
}

/// Two columns: `anm_id,archetype`.
pub fn write_ground_truth(truth: &BTreeMap<String, String>, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(["anm_id", "archetype"]).map_err(ser)?;
    for (anm, arch) in truth {
        w.write_record([anm, arch]).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMetadata {
    pub rng: String,
    pub seed: u64,
    pub anms: usize,
    pub months: Vec<Month>,
    pub records: usize,
    pub archetype_counts: BTreeMap<String, u32>,
}

impl CohortMetadata {
    pub fn new(spec: &CohortSpec, records: &RecordSet) -> Self {
        CohortMetadata {
            rng: RNG_ALGORITHM.to_string(),
            seed: spec.seed,
            anms: spec.anm_count(),
            months: spec.month_list(),
            records: records.len(),
            archetype_counts: spec.archetypes.iter().map(|a| (a.name.clone(), a.count)).collect(),
        }
    }
}

/// Flag rates of the generic channels, indexed by rule id (2..=8, 10, 11).
const MIRROR_CHANNEL_RULES: [u32; 9] = [2, 3, 4, 5, 6, 7, 8, 10, 11];

/// Percentage centres of the three behaviour clusters observed in field data,
/// one row per archetype, one column per rule.
pub const MIRROR_CENTERS: [(&str, [f64; 11]); 3] = [
    ("diligent", [10.50, 0.94, 97.43, 86.04, 12.67, 0.15, 0.72, 0.29, 1.46, 7.33, 2.31]),
    ("fabricator", [70.36, 0.12, 99.90, 88.54, 3.75, 2.20, 2.02, 1.56, 8.09, 4.40, 4.90]),
    ("contradictor", [11.27, 1.02, 99.19, 89.97, 10.44, 8.11, 2.24, 7.20, 59.97, 20.04, 27.44]),
];

/// Percentage with two decimals to the nearest representable fraction.
fn rate(percent: f64) -> f64 {
    (percent * 100.0).round() / 10_000.0
}

/// Cohort whose archetypes reproduce [`MIRROR_CENTERS`]; read with [`mirror_rules`].
pub fn mirror_spec(seed: u64, per_archetype: u32, months: u32) -> CohortSpec {
    let archetypes = MIRROR_CENTERS
        .iter()
        .map(|(name, c)| Archetype {
            name: name.to_string(),
            count: per_archetype,
            params: ArchetypeParams {
                bp_fabrication: rate(c[0]),
                no_equipment: rate(c[8]),
                channels: MIRROR_CHANNEL_RULES
                    .iter()
                    .map(|&id| (format!("chk_{id:02}"), rate(c[id as usize - 1])))
                    .collect(),
                noise: 0.01,
                anm_spread: 0.01,
                patients_per_camp: None,
            },
        })
        .collect();
    CohortSpec {
        seed,
        months,
        start_month: Month::new(2020, 1).expect("valid month"),
        camps_per_month: default_camps(),
        patients_per_camp: (10, 14),
        beneficiaries_per_anm: default_beneficiaries(),
        archetypes,
    }
}

pub fn mirror_rules() -> RuleSet {
    RuleSet::from_toml_str(MIRROR_RULES).expect("bundled rule preset is valid")
}
