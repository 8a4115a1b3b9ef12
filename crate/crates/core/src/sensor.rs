//! Steady-state and transient response of the four-electrode polymer-film
//! array, plus the digitizer in front of it.
//!
//! Each film follows a Nikolsky-Eisenman response with activities
//! approximated by molar concentrations. After immersion the potential
//! relaxes toward the sample value with a first-order time constant, drifts
//! linearly, and picks up white measurement noise. Noise is added per
//! electrode before differencing, so two nominally identical films still
//! produce a noisy difference channel.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::edge::{self, FrameContext, FrameSource, Phase, RawSample, SourceError};
use crate::error::SensorError;
use crate::ion::{standard_ion, IonComposition};
use crate::record::MeasurementRecord;
use crate::scenario::Scenario;
use crate::{seeded_rng, SimRng};

/// Ideal Nernstian slope for a monovalent ion at 25 °C, mV/decade.
pub const NERNST_SLOPE_25C: f64 = 59.16;

pub const ELECTRODE_COUNT: usize = 4;
pub const CHANNEL_COUNT: usize = ELECTRODE_COUNT - 1;

/// One ion-sensitive film.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectrodeSpec {
    pub id: u8,
    pub primary_ion: String,
    /// mV/decade; positive for cation-sensitive films, negative for anion-sensitive.
    pub slope: f64,
    /// Standard offset, mV.
    #[serde(default)]
    pub e0: f64,
    /// Interfering ion -> selectivity coefficient.
    #[serde(default)]
    pub selectivity: BTreeMap<String, f64>,
    /// First-order response time constant, s.
    pub tau: f64,
    /// Linear drift after immersion, mV/s.
    #[serde(default)]
    pub drift_rate: f64,
    /// Standard deviation of the per-run drift rate around `drift_rate`, mV/s.
    /// Each acquisition draws its own drift; zero gives the same drift every run.
    #[serde(default)]
    pub drift_spread: f64,
    /// Relative standard deviation of the per-run slope (0.03 = 3 %).
    #[serde(default)]
    pub slope_spread: f64,
    /// White noise standard deviation, mV.
    #[serde(default)]
    pub noise_std: f64,
}

impl ElectrodeSpec {
    pub fn validate(&self) -> Result<(), SensorError> {
        let bad = |reason: String| {
            Err(SensorError::InvalidSpec(format!(
                "electrode {}: {reason}",
                self.id
            )))
        };
        if !(1..=ELECTRODE_COUNT as u8).contains(&self.id) {
            return bad(format!("id must be in 1..={ELECTRODE_COUNT}"));
        }
        let Some(primary) = standard_ion(&self.primary_ion) else {
            return Err(SensorError::UnknownIon(self.primary_ion.clone()));
        };
        if !self.slope.is_finite() || self.slope == 0.0 {
            return bad(format!("slope must be finite and nonzero, got {}", self.slope));
        }
        if (self.slope > 0.0) != (primary.charge > 0) {
            return bad(format!(
                "slope {} has the wrong sign for {} (cation films respond positively, anion films negatively)",
                self.slope, self.primary_ion
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(self.drift_spread.is_finite() && self.drift_spread >= 0.0) {
            return bad(format!("drift_spread must be >= 0, got {}", self.drift_spread));
        }
        if !(self.slope_spread.is_finite() && (0.0..0.5).contains(&self.slope_spread)) {
            return bad(format!(
                "slope_spread must be in [0, 0.5), got {}",
                self.slope_spread
            ));
        }
        if !self.e0.is_finite() || !self.drift_rate.is_finite() {
            return bad("e0 and drift_rate must be finite".into());
        }
        for (ion, k) in &self.selectivity {
            if !(k.is_finite() && *k >= 0.0) {
                return bad(format!("selectivity for {ion} must be >= 0, got {k}"));
            }
        }
        Ok(())
    }

    fn primary_charge(&self, comp: &IonComposition) -> Result<i32, SensorError> {
        comp.get(&self.primary_ion)
            .map(|s| s.properties.charge)
            .or_else(|| standard_ion(&self.primary_ion).map(|p| p.charge))
            .ok_or_else(|| SensorError::UnknownIon(self.primary_ion.clone()))
    }
}

fn default_reference() -> u8 {
    ELECTRODE_COUNT as u8
}

/// The four-electrode array and its differential pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub electrodes: Vec<ElectrodeSpec>,
    /// Electrode id used as pseudo-reference for the difference channels.
    #[serde(default = "default_reference")]
    pub reference_index: u8,
}

impl ArraySpec {
    pub fn validate(&self) -> Result<(), SensorError> {
        if self.electrodes.len() != ELECTRODE_COUNT {
            return Err(SensorError::InvalidSpec(format!(
                "array needs exactly {ELECTRODE_COUNT} electrodes, got {}",
                self.electrodes.len()
            )));
        }
        let mut seen = [false; ELECTRODE_COUNT];
        for e in &self.electrodes {
            e.validate()?;
            let slot = &mut seen[usize::from(e.id) - 1];
            if *slot {
                return Err(SensorError::InvalidSpec(format!(
                    "duplicate electrode id {}",
                    e.id
                )));
            }
            *slot = true;
        }
        if !(1..=ELECTRODE_COUNT as u8).contains(&self.reference_index) {
            return Err(SensorError::InvalidSpec(format!(
                "reference_index must be in 1..={ELECTRODE_COUNT}, got {}",
                self.reference_index
            )));
        }
        Ok(())
    }

    /// Electrodes ordered by id.
    pub fn by_id(&self) -> Vec<&ElectrodeSpec> {
        let mut v: Vec<_> = self.electrodes.iter().collect();
        v.sort_by_key(|e| e.id);
        v
    }

    /// Ids of the non-reference electrodes, ascending; channel k measures
    /// `E[ids[k]] - E[reference]`.
    pub fn channel_ids(&self) -> [u8; CHANNEL_COUNT] {
        let mut ids = [0u8; CHANNEL_COUNT];
        let mut k = 0;
        for id in 1..=ELECTRODE_COUNT as u8 {
            if id != self.reference_index {
                ids[k] = id;
                k += 1;
            }
        }
        ids
    }
}

/// Digitizer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcSpec {
    /// Full-scale magnitude, mV.
    pub full_scale: f64,
    /// Code step, mV.
    pub lsb: f64,
    /// Frames per second.
    pub sample_rate: f64,
}

impl Default for AdcSpec {
    fn default() -> Self {
        Self {
            full_scale: 2048.0,
            lsb: 0.0625,
            sample_rate: 2.0,
        }
    }
}

impl AdcSpec {
    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.lsb.is_finite() && self.lsb > 0.0) {
            return Err(SensorError::InvalidSpec(format!(
                "lsb must be > 0, got {}",
                self.lsb
            )));
        }
        if !(self.full_scale.is_finite() && self.full_scale > 0.0) {
            return Err(SensorError::InvalidSpec(format!(
                "full_scale must be > 0, got {}",
                self.full_scale
            )));
        }
        if self.full_scale / self.lsb > 32768.0 {
            return Err(SensorError::InvalidSpec(format!(
                "full_scale / lsb = {} exceeds the 16-bit code range",
                self.full_scale / self.lsb
            )));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(SensorError::InvalidSpec(format!(
                "sample_rate must be > 0, got {}",
                self.sample_rate
            )));
        }
        Ok(())
    }

    fn code_limits(&self) -> (f64, f64) {
        let span = self.full_scale / self.lsb;
        (
            (-span.ceil()).max(f64::from(i16::MIN)),
            span.floor().min(f64::from(i16::MAX)),
        )
    }

    pub fn dequantize(&self, code: i16) -> f64 {
        f64::from(code) * self.lsb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantized {
    pub code: i16,
    pub saturated: bool,
}

/// Rounds `mv / lsb` to the nearest code, ties away from zero, saturating at
/// the code range. NaN maps to a saturated zero code.
pub fn quantize(adc: &AdcSpec, mv: f64) -> Quantized {
    if mv.is_nan() {
        return Quantized {
            code: 0,
            saturated: true,
        };
    }
    let (lo, hi) = adc.code_limits();
    // f64::round rounds half away from zero.
    let raw = (mv / adc.lsb).round();
    let clamped = raw.clamp(lo, hi);
    Quantized {
        code: clamped as i16,
        saturated: clamped != raw,
    }
}

/// Steady-state potential in mV:
/// `e0 + slope * log10(a_i + sum_j K_ij * a_j^(z_i / z_j))`.
pub fn electrode_potential(e: &ElectrodeSpec, comp: &IonComposition) -> Result<f64, SensorError> {
    let z_primary = f64::from(e.primary_charge(comp)?);
    let mut argument = comp.activity(&e.primary_ion);
    for (ion, &k) in &e.selectivity {
        if k == 0.0 {
            continue;
        }
        let Some(species) = comp.get(ion) else {
            continue;
        };
        let activity = comp.activity(ion);
        if activity == 0.0 {
            continue;
        }
        let exponent = z_primary / f64::from(species.properties.charge);
        argument += k * activity.powf(exponent);
    }
    if !(argument > 0.0 && argument.is_finite()) {
        return Err(SensorError::UnmodelableDilution {
            electrode: e.id,
            argument,
        });
    }
    Ok(e.e0 + e.slope * argument.log10())
}

/// Noise-free first-order step between two steady states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transient {
    pub baseline: f64,
    pub sample: f64,
    pub tau: f64,
    pub drift_rate: f64,
    pub noise_std: f64,
}

impl Transient {
    pub fn new(
        e: &ElectrodeSpec,
        baseline: &IonComposition,
        sample: &IonComposition,
    ) -> Result<Self, SensorError> {
        Ok(Self {
            baseline: electrode_potential(e, baseline)?,
            sample: electrode_potential(e, sample)?,
            tau: e.tau,
            drift_rate: e.drift_rate,
            noise_std: e.noise_std,
        })
    }

    /// Deterministic part of the response `t` seconds after immersion.
    pub fn mean_at(&self, t: f64) -> f64 {
        self.baseline + (self.sample - self.baseline) * (1.0 - (-t / self.tau).exp()) + self.drift_rate * t
    }

    pub fn sample_at<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> f64 {
        self.mean_at(t) + gaussian(rng, self.noise_std)
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    std * z
}

/// Potential of one electrode `t` seconds after moving from `baseline` to `sample`.
pub fn transient_response<R: Rng + ?Sized>(
    e: &ElectrodeSpec,
    baseline: &IonComposition,
    sample: &IonComposition,
    t_since_immersion: f64,
    rng: &mut R,
) -> Result<f64, SensorError> {
    if t_since_immersion.is_nan() || t_since_immersion < 0.0 {
        return Err(SensorError::InvalidSpec(format!(
            "time since immersion must be >= 0, got {t_since_immersion}"
        )));
    }
    Ok(Transient::new(e, baseline, sample)?.sample_at(t_since_immersion, rng))
}

/// Differences against the reference electrode; `potentials[k]` belongs to
/// electrode id `k + 1`.
pub fn differential_channels(a: &ArraySpec, potentials: &[f64; ELECTRODE_COUNT]) -> [f64; CHANNEL_COUNT] {
    let reference = potentials[usize::from(a.reference_index) - 1];
    a.channel_ids()
        .map(|id| potentials[usize::from(id) - 1] - reference)
}

/// Frame source backed by the electrode model.
///
/// Construction consumes two draws per electrode from the rng (per-run slope
/// and drift, in that order, electrodes by id); each frame then consumes one
/// draw per electrode for noise.
pub struct SimulatedSource {
    array: ArraySpec,
    adc: AdcSpec,
    transients: [Transient; ELECTRODE_COUNT],
    rng: SimRng,
}

impl SimulatedSource {
    pub fn new(
        array: &ArraySpec,
        adc: &AdcSpec,
        baseline: &IonComposition,
        sample: &IonComposition,
        mut rng: SimRng,
    ) -> Result<Self, SensorError> {
        array.validate()?;
        adc.validate()?;
        let electrodes = array.by_id();
        let mut transients = Vec::with_capacity(ELECTRODE_COUNT);
        for e in electrodes {
            let mut run = e.clone();
            run.slope *= 1.0 + gaussian(&mut rng, e.slope_spread);
            run.drift_rate += gaussian(&mut rng, e.drift_spread);
            transients.push(Transient::new(&run, baseline, sample)?);
        }
        Ok(Self {
            array: array.clone(),
            adc: *adc,
            transients: transients.try_into().expect("validated electrode count"),
            rng,
        })
    }

    /// Potentials of the four electrodes at a frame, ordered by id.
    fn potentials(&mut self, ctx: &FrameContext) -> [f64; ELECTRODE_COUNT] {
        let mut out = [0.0; ELECTRODE_COUNT];
        for (slot, t) in out.iter_mut().zip(self.transients.iter()) {
            let mean = match ctx.phase {
                Phase::Baseline => t.baseline,
                Phase::Sample => t.mean_at(ctx.since_immersion_s),
            };
            *slot = mean + gaussian(&mut self.rng, t.noise_std);
        }
        out
    }
}

impl FrameSource for SimulatedSource {
    fn sample_rate(&self) -> f64 {
        self.adc.sample_rate
    }

    fn read(&mut self, ctx: &FrameContext) -> Result<RawSample, SourceError> {
        let potentials = self.potentials(ctx);
        let channels = differential_channels(&self.array, &potentials);
        let mut codes = [0i16; CHANNEL_COUNT];
        let mut saturated = false;
        for (code, mv) in codes.iter_mut().zip(channels) {
            let q = quantize(&self.adc, mv);
            *code = q.code;
            saturated |= q.saturated;
        }
        Ok(RawSample { codes, saturated })
    }
}

/// Epoch stamped on simulated records so they are reproducible byte for byte.
pub fn simulation_epoch() -> chrono::DateTime<chrono::Utc> {
    chrono::DateTime::from_timestamp(1_546_300_800, 0).expect("valid epoch") // 2019-01-01T00:00:00Z
}

/// Seeded source for `scenario` plus the record id drawn ahead of it.
/// Paced acquisitions that start from the same scenario see the same frames
/// as [`simulate_acquisition`].
pub fn scenario_source(
    array: &ArraySpec,
    adc: &AdcSpec,
    scenario: &Scenario,
) -> Result<(uuid::Uuid, SimulatedSource), SensorError> {
    scenario
        .validate()
        .map_err(|e| SensorError::InvalidSpec(e.to_string()))?;
    let mut rng = seeded_rng(scenario.rng_seed);
    let record_id = crate::random_uuid(&mut rng);
    let source = SimulatedSource::new(
        array,
        adc,
        &scenario.baseline_composition,
        &scenario.sample_composition,
        rng,
    )?;
    Ok((record_id, source))
}

/// Runs a whole simulated acquisition without pacing. Deterministic in
/// `(array, adc, scenario)`: the record id is drawn from the scenario seed
/// before any measurement noise.
pub fn simulate_acquisition(
    array: &ArraySpec,
    adc: &AdcSpec,
    scenario: &Scenario,
) -> Result<MeasurementRecord, SensorError> {
    let (record_id, mut source) = scenario_source(array, adc, scenario)?;
    let plan = edge::AcquisitionPlan {
        record_id,
        device_id: "simulator".into(),
        baseline_s: scenario.baseline_duration,
        sample_s: scenario.sample_duration,
        time_scale: 0.0,
        label: Some(scenario.name.clone()),
        location: None,
        adc: *adc,
    };
    let mut clock = edge::FixedClock::new(simulation_epoch());
    edge::run_acquisition(&mut source, &plan, &mut clock, &edge::NeverStop, |_| {})
        .map_err(|e| SensorError::InvalidSpec(e.to_string()))
}
