//! Ionic species and sample compositions.
//!
//! Compositions are kept in ppm (mg/L) because that is how bottled-water labels
//! and nutrition tables report them; the electrode model works in mol/L and
//! converts on demand with [`IonComposition::to_molar`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SensorError;

/// Physical constants of an ionic species.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonProperties {
    /// Signed charge number.
    pub charge: i32,
    /// Molar mass in g/mol.
    pub molar_mass: f64,
}

impl IonProperties {
    pub fn validate(&self, symbol: &str) -> Result<(), SensorError> {
        if self.charge == 0 {
            return Err(SensorError::InvalidIon {
                ion: symbol.to_string(),
                reason: "charge number must be nonzero".into(),
            });
        }
        if !(self.molar_mass.is_finite() && self.molar_mass > 0.0) {
            return Err(SensorError::InvalidIon {
                ion: symbol.to_string(),
                reason: format!("molar mass must be positive, got {}", self.molar_mass),
            });
        }
        Ok(())
    }
}

/// Molar masses from the standard atomic-weight table (conventional values).
const STANDARD_IONS: &[(&str, i32, f64)] = &[
    ("H+", 1, 1.008),
    ("Li+", 1, 6.94),
    ("Na+", 1, 22.99),
    ("K+", 1, 39.10),
    ("NH4+", 1, 18.04),
    ("Mg2+", 2, 24.305),
    ("Ca2+", 2, 40.08),
    ("F-", -1, 19.00),
    ("Cl-", -1, 35.45),
    ("Br-", -1, 79.90),
    ("NO3-", -1, 62.00),
    ("HCO3-", -1, 61.02),
    ("SO4 2-", -2, 96.06),
];

/// Looks up a species in the built-in table.
pub fn standard_ion(symbol: &str) -> Option<IonProperties> {
    STANDARD_IONS
        .iter()
        .find(|(s, _, _)| *s == symbol)
        .map(|&(_, charge, molar_mass)| IonProperties { charge, molar_mass })
}

/// One species in a composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Species {
    pub properties: IonProperties,
    /// Concentration in ppm (mg/L).
    pub ppm: f64,
}

/// Concentrations of named ions in a liquid sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IonComposition {
    entries: BTreeMap<String, Species>,
}

impl IonComposition {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a species from the built-in table.
    pub fn with(mut self, symbol: &str, ppm: f64) -> Result<Self, SensorError> {
        let properties = standard_ion(symbol).ok_or_else(|| SensorError::UnknownIon(symbol.to_string()))?;
        self.insert(symbol, properties, ppm)?;
        Ok(self)
    }

    pub fn insert(&mut self, symbol: &str, properties: IonProperties, ppm: f64) -> Result<(), SensorError> {
        properties.validate(symbol)?;
        if !(ppm.is_finite() && ppm >= 0.0) {
            return Err(SensorError::InvalidIon {
                ion: symbol.to_string(),
                reason: format!("concentration must be a finite value >= 0, got {ppm}"),
            });
        }
        self.entries
            .insert(symbol.to_string(), Species { properties, ppm });
        Ok(())
    }

    pub fn get(&self, symbol: &str) -> Option<&Species> {
        self.entries.get(symbol)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Species)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Molar concentration of `symbol`: ppm / (molar mass × 1000).
    pub fn to_molar(&self, symbol: &str) -> Result<f64, SensorError> {
        let species = self
            .entries
            .get(symbol)
            .ok_or_else(|| SensorError::UnknownIon(symbol.to_string()))?;
        Ok(species.ppm / (species.properties.molar_mass * 1000.0))
    }

    /// Activity used by the electrode model. Absent species have zero activity.
    pub(crate) fn activity(&self, symbol: &str) -> f64 {
        self.to_molar(symbol).unwrap_or(0.0)
    }
}

impl fmt::Display for IonComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (symbol, species) in &self.entries {
            if !first {
                f.write_str(", ")?;
            }
            first = false;
            write!(f, "{symbol} {} ppm", species.ppm)?;
        }
        Ok(())
    }
}

/// File/wire form: either a bare ppm number for a built-in species or an
/// explicit table for anything else.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SpeciesDoc {
    Ppm(f64),
    Explicit { ppm: f64, charge: i32, molar_mass: f64 },
}

impl Serialize for IonComposition {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let doc: BTreeMap<&str, SpeciesDoc> = self
            .entries
            .iter()
            .map(|(symbol, s)| {
                let doc = if standard_ion(symbol) == Some(s.properties) {
                    SpeciesDoc::Ppm(s.ppm)
                } else {
                    SpeciesDoc::Explicit {
                        ppm: s.ppm,
                        charge: s.properties.charge,
                        molar_mass: s.properties.molar_mass,
                    }
                };
                (symbol.as_str(), doc)
            })
            .collect();
        doc.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for IonComposition {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let doc = BTreeMap::<String, SpeciesDoc>::deserialize(deserializer)?;
        let mut comp = IonComposition::new();
        for (symbol, entry) in doc {
            let (properties, ppm) = match entry {
                SpeciesDoc::Ppm(ppm) => (
                    standard_ion(&symbol).ok_or_else(|| {
                        D::Error::custom(format!(
                            "unknown ion {symbol:?}: give charge and molar_mass explicitly"
                        ))
                    })?,
                    ppm,
                ),
                SpeciesDoc::Explicit {
                    ppm,
                    charge,
                    molar_mass,
                } => (IonProperties { charge, molar_mass }, ppm),
            };
            comp.insert(&symbol, properties, ppm).map_err(D::Error::custom)?;
        }
        Ok(comp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sodium_ppm_to_molar() {
        let comp = IonComposition::new().with("Na+", 4.0).unwrap();
        let molar = comp.to_molar("Na+").unwrap();
        assert!((molar - 4.0 / 22_990.0).abs() < 1e-15);
        assert!((molar - 1.74e-4).abs() < 5e-7);
    }

    #[test]
    fn zero_ppm_is_zero_molar() {
        let comp = IonComposition::new().with("Cl-", 0.0).unwrap();
        assert_eq!(comp.to_molar("Cl-").unwrap(), 0.0);
    }

    #[test]
    fn decimolar_potassium() {
        let comp = IonComposition::new().with("K+", 3910.0).unwrap();
        assert!((comp.to_molar("K+").unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unknown_ion_is_an_error() {
        let comp = IonComposition::new().with("Na+", 1.0).unwrap();
        assert!(matches!(
            comp.to_molar("K+"),
            Err(SensorError::UnknownIon(ion)) if ion == "K+"
        ));
        assert!(IonComposition::new().with("Xx+", 1.0).is_err());
    }

    #[test]
    fn rejects_negative_concentration_and_bad_species() {
        assert!(IonComposition::new().with("Na+", -1.0).is_err());
        let mut comp = IonComposition::new();
        let neutral = IonProperties {
            charge: 0,
            molar_mass: 10.0,
        };
        assert!(comp.insert("X", neutral, 1.0).is_err());
        let massless = IonProperties {
            charge: 1,
            molar_mass: 0.0,
        };
        assert!(comp.insert("X+", massless, 1.0).is_err());
    }

    #[test]
    fn toml_form_accepts_custom_species() {
        let comp: IonComposition = toml::from_str(
            r#"
            "Na+" = 4.0
            "Cs+" = { ppm = 1.0, charge = 1, molar_mass = 132.91 }
            "#,
        )
        .unwrap();
        assert_eq!(comp.len(), 2);
        assert_eq!(comp.get("Cs+").unwrap().properties.charge, 1);
        let text = toml::to_string(&comp).unwrap();
        let back: IonComposition = toml::from_str(&text).unwrap();
        assert_eq!(back, comp);
    }
}
