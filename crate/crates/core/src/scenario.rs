//! Scenario files and scenario packs.
//!
//! A scenario describes one liquid: the storage solution the array starts in,
//! the sample it is moved into, phase durations, and the seed. A pack is a
//! directory holding an `array.toml` (electrodes + ADC) and one `*.toml` file
//! per scenario; each scenario becomes one class with `replicates`
//! measurements. See `docs/scenario-format.md` for the schema.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{ScenarioError, SensorError};
use crate::ion::IonComposition;
use crate::record::MeasurementRecord;
use crate::sensor::{simulate_acquisition, AdcSpec, ArraySpec, ElectrodeSpec};

fn default_baseline_duration() -> f64 {
    20.0
}

fn default_sample_duration() -> f64 {
    60.0
}

fn default_replicates() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Also used as the class label of simulated records.
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
    pub baseline_composition: IonComposition,
    pub sample_composition: IonComposition,
    /// Seconds in the storage solution before immersion.
    #[serde(default = "default_baseline_duration")]
    pub baseline_duration: f64,
    /// Seconds in the sample.
    #[serde(default = "default_sample_duration")]
    pub sample_duration: f64,
    pub rng_seed: u64,
    /// Number of measurements a pack draws from this scenario.
    #[serde(default = "default_replicates")]
    pub replicates: u32,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |reason: &str| {
            Err(ScenarioError::Invalid {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.name.trim().is_empty() {
            return invalid("name must not be empty");
        }
        if !(self.baseline_duration > 0.0 && self.baseline_duration.is_finite()) {
            return invalid("baseline_duration must be > 0");
        }
        if !(self.sample_duration > 0.0 && self.sample_duration.is_finite()) {
            return invalid("sample_duration must be > 0");
        }
        if self.baseline_composition.is_empty() {
            return invalid("baseline_composition must not be empty");
        }
        if self.replicates == 0 {
            return invalid("replicates must be >= 1");
        }
        Ok(())
    }

    /// Copy of this scenario re-seeded for replicate `index` under `pack_seed`.
    pub fn replicate(&self, pack_seed: u64, index: u32) -> Scenario {
        let mut s = self.clone();
        s.rng_seed = derive_seed(derive_seed(self.rng_seed, pack_seed), u64::from(index));
        s.replicates = 1;
        s
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&read(path)?, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

/// Contents of a pack's `array.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    #[serde(default = "default_reference")]
    pub reference_index: u8,
    #[serde(default)]
    pub adc: AdcSpec,
    pub electrodes: Vec<ElectrodeSpec>,
}

fn default_reference() -> u8 {
    crate::sensor::ELECTRODE_COUNT as u8
}

impl DeviceConfig {
    fn split(self) -> (ArraySpec, AdcSpec) {
        (
            ArraySpec {
                electrodes: self.electrodes,
                reference_index: self.reference_index,
            },
            self.adc,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPack {
    pub name: String,
    pub array: ArraySpec,
    pub adc: AdcSpec,
    /// Sorted by scenario name.
    pub scenarios: Vec<Scenario>,
}

const ARRAY_FILE: &str = "array.toml";

impl ScenarioPack {
    fn assemble(
        name: &str,
        device: DeviceConfig,
        mut scenarios: Vec<Scenario>,
    ) -> Result<Self, ScenarioError> {
        let (array, adc) = device.split();
        array.validate()?;
        adc.validate()?;
        if scenarios.is_empty() {
            return Err(ScenarioError::Invalid {
                name: name.to_string(),
                reason: "pack contains no scenarios".into(),
            });
        }
        scenarios.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = scenarios.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(ScenarioError::Invalid {
                name: w[0].name.clone(),
                reason: "duplicate scenario name in pack".into(),
            });
        }
        Ok(Self {
            name: name.to_string(),
            array,
            adc,
            scenarios,
        })
    }

    /// Loads a pack directory.
    pub fn load(dir: &Path) -> Result<Self, ScenarioError> {
        let array_path = dir.join(ARRAY_FILE);
        let device = parse_device(&read(&array_path)?, &array_path.display().to_string())?;
        let entries = fs::read_dir(dir).map_err(|source| ScenarioError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut scenarios = Vec::new();
        for entry in entries {
            let path = entry
                .map_err(|source| ScenarioError::Io {
                    path: dir.display().to_string(),
                    source,
                })?
                .path();
            let is_toml = path.extension().is_some_and(|e| e == "toml");
            if is_toml && path.file_name().is_some_and(|f| f != ARRAY_FILE) {
                scenarios.push(Scenario::load(&path)?);
            }
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Self::assemble(&name, device, scenarios)
    }

    /// Built-in pack by name (`beverages` or `mineral-water`).
    pub fn builtin(name: &str) -> Option<Self> {
        let files = BUILTIN_PACKS.iter().find(|(n, _, _)| *n == name)?;
        let (_, array, scenarios) = files;
        let device = parse_device(array, ARRAY_FILE).expect("built-in array parses");
        let scenarios = scenarios
            .iter()
            .map(|(file, text)| Scenario::from_toml(text, file).expect("built-in scenario parses"))
            .collect();
        Some(Self::assemble(name, device, scenarios).expect("built-in pack is valid"))
    }

    /// A built-in name or a directory path.
    pub fn resolve(name_or_path: &str) -> Result<Self, ScenarioError> {
        match Self::builtin(name_or_path) {
            Some(p) => Ok(p),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    pub fn find(&self, name: &str) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.name == name)
    }

    pub fn total_replicates(&self) -> usize {
        self.scenarios.iter().map(|s| s.replicates as usize).sum()
    }

    /// Simulates every replicate of every scenario, in pack order.
    pub fn simulate(&self, pack_seed: u64) -> Result<Vec<MeasurementRecord>, SensorError> {
        let mut out = Vec::with_capacity(self.total_replicates());
        for s in &self.scenarios {
            for r in 0..s.replicates {
                out.push(simulate_acquisition(
                    &self.array,
                    &self.adc,
                    &s.replicate(pack_seed, r),
                )?);
            }
        }
        Ok(out)
    }

    /// Writes the pack as a directory loadable with [`ScenarioPack::load`].
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let device = DeviceConfig {
            reference_index: self.array.reference_index,
            adc: self.adc,
            electrodes: self.array.electrodes.clone(),
        };
        fs::write(
            dir.join(ARRAY_FILE),
            toml::to_string(&device).expect("device config serializes"),
        )?;
        for s in &self.scenarios {
            fs::write(dir.join(format!("{}.toml", file_stem(&s.name))), s.to_toml())?;
        }
        Ok(())
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_device(text: &str, origin: &str) -> Result<DeviceConfig, ScenarioError> {
    toml::from_str(text).map_err(|e| ScenarioError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })
}

type PackFiles = (
    &'static str,
    &'static str,
    &'static [(&'static str, &'static str)],
);

macro_rules! pack_file {
    ($pack:literal, $file:literal) => {
        ($file, include_str!(concat!("../scenarios/", $pack, "/", $file)))
    };
}

const BUILTIN_PACKS: &[PackFiles] = &[
    (
        "beverages",
        include_str!("../scenarios/beverages/array.toml"),
        &[
            pack_file!("beverages", "beverage-a.toml"),
            pack_file!("beverages", "beverage-b.toml"),
            pack_file!("beverages", "beverage-c.toml"),
        ],
    ),
    (
        "mineral-water",
        include_str!("../scenarios/mineral-water/array.toml"),
        &[
            pack_file!("mineral-water", "water-i.toml"),
            pack_file!("mineral-water", "water-ii.toml"),
            pack_file!("mineral-water", "water-iii.toml"),
            pack_file!("mineral-water", "water-iv.toml"),
        ],
    ),
];

pub const BUILTIN_PACK_NAMES: &[&str] = &["beverages", "mineral-water"];

/// Array of the default packs.
pub fn default_array() -> ArraySpec {
    ScenarioPack::builtin("beverages").expect("built-in pack").array
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_packs_load() {
        let bev = ScenarioPack::builtin("beverages").unwrap();
        assert_eq!(bev.scenarios.len(), 3);
        assert_eq!(bev.total_replicates(), 21);
        let water = ScenarioPack::builtin("mineral-water").unwrap();
        assert_eq!(water.scenarios.len(), 4);
        assert_eq!(water.total_replicates(), 96);
        assert_eq!(bev.array, water.array);
        assert!(ScenarioPack::builtin("nope").is_none());
    }

    #[test]
    fn water_pack_matches_label_table() {
        let water = ScenarioPack::builtin("mineral-water").unwrap();
        let expect = [
            ("I", 4.0, 2.5, 16.0),
            ("II", 7.3, 4.9, 3.7),
            ("III", 6.5, 1.0, 6.8),
            ("IV", 6.0, 2.5, 20.0),
        ];
        for (name, na, k, cl) in expect {
            let s = water.find(name).unwrap();
            let c = &s.sample_composition;
            assert_eq!(c.get("Na+").unwrap().ppm, na, "{name}");
            assert_eq!(c.get("K+").unwrap().ppm, k, "{name}");
            assert_eq!(c.get("Cl-").unwrap().ppm, cl, "{name}");
            assert_eq!(c.len(), 3);
        }
    }

    #[test]
    fn storage_solution_is_decimolar_kcl() {
        let pack = ScenarioPack::builtin("beverages").unwrap();
        for s in &pack.scenarios {
            let b = &s.baseline_composition;
            assert!((b.to_molar("K+").unwrap() - 0.1).abs() < 1e-12);
            assert!((b.to_molar("Cl-").unwrap() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn pack_round_trips_through_directory() {
        let dir = std::env::temp_dir().join(format!("etongue-pack-{}", std::process::id()));
        let pack = ScenarioPack::builtin("mineral-water").unwrap();
        pack.write(&dir).unwrap();
        let mut back = ScenarioPack::load(&dir).unwrap();
        back.name = pack.name.clone();
        assert_eq!(back, pack);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn replicate_seeds_are_distinct() {
        let pack = ScenarioPack::builtin("beverages").unwrap();
        let s = &pack.scenarios[0];
        let a = s.replicate(1, 0).rng_seed;
        assert_ne!(a, s.replicate(1, 1).rng_seed);
        assert_ne!(a, s.replicate(2, 0).rng_seed);
        assert_eq!(a, s.replicate(1, 0).rng_seed);
    }

    #[test]
    fn scenario_validation() {
        let text = r#"
            name = "x"
            rng_seed = 1
            sample_duration = 0
            [baseline_composition]
            "K+" = 3910
            [sample_composition]
            "K+" = 10
        "#;
        assert!(matches!(
            Scenario::from_toml(text, "x.toml"),
            Err(ScenarioError::Invalid { .. })
        ));
        let empty_baseline = r#"
            name = "x"
            rng_seed = 1
            [baseline_composition]
            [sample_composition]
            "K+" = 10
        "#;
        assert!(Scenario::from_toml(empty_baseline, "x.toml").is_err());
        assert!(matches!(
            Scenario::from_toml("name = 3", "x.toml"),
            Err(ScenarioError::Parse { .. })
        ));
    }
}
