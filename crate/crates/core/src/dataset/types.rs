use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Live,
    Physical,
    Adversarial,
    Deepfake,
}

impl AttackKind {
    pub fn is_digital(self) -> bool {
        matches!(self, AttackKind::Adversarial | AttackKind::Deepfake)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Live => "live",
            AttackKind::Physical => "physical",
            AttackKind::Adversarial => "adversarial",
            AttackKind::Deepfake => "deepfake",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! attack_methods {
    ($($variant:ident => $name:literal, $kind:ident;)*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum AttackMethod {
            $($variant,)*
        }

        impl AttackMethod {
            /// Every method, live first, in canonical order.
            pub const ALL: [AttackMethod; 16] = [$(AttackMethod::$variant,)*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(AttackMethod::$variant => $name,)*
                }
            }

            pub fn kind(self) -> AttackKind {
                match self {
                    $(AttackMethod::$variant => AttackKind::$kind,)*
                }
            }
        }

        impl FromStr for AttackMethod {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(AttackMethod::$variant),)*
                    other => Err(Error::Config(format!("unknown attack method `{other}`"))),
                }
            }
        }
    };
}

attack_methods! {
    None => "none", Live;
    PrintIndoor => "print_indoor", Physical;
    PrintOutdoor => "print_outdoor", Physical;
    Replay => "replay", Physical;
    Advdrop => "advdrop", Adversarial;
    Alma => "alma", Adversarial;
    Demiguise => "demiguise", Adversarial;
    Fgtm => "fgtm", Adversarial;
    IlaDa => "ila_da", Adversarial;
    Ssah => "ssah", Adversarial;
    Facedancer => "facedancer", Deepfake;
    Insightface => "insightface", Deepfake;
    Simswap => "simswap", Deepfake;
    Safa => "safa", Deepfake;
    Dagan => "dagan", Deepfake;
    Oneshotth => "oneshotth", Deepfake;
}

impl AttackMethod {
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).expect("listed")
    }

    pub fn of_kind(kind: AttackKind) -> impl Iterator<Item = AttackMethod> {
        Self::ALL.into_iter().filter(move |m| m.kind() == kind)
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attack family plus concrete method; the pair is always consistent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawAttack", into = "RawAttack")]
pub struct AttackType {
    kind: AttackKind,
    method: AttackMethod,
}

#[derive(Serialize, Deserialize)]
struct RawAttack {
    kind: AttackKind,
    method: AttackMethod,
}

impl TryFrom<RawAttack> for AttackType {
    type Error = Error;
    fn try_from(raw: RawAttack) -> Result<Self> {
        AttackType::new(raw.kind, raw.method)
    }
}

impl From<AttackType> for RawAttack {
    fn from(a: AttackType) -> Self {
        RawAttack { kind: a.kind, method: a.method }
    }
}

impl AttackType {
    pub fn new(kind: AttackKind, method: AttackMethod) -> Result<Self> {
        if method.kind() != kind {
            return Err(Error::Config(format!("method `{method}` is not a {kind} attack")));
        }
        Ok(Self { kind, method })
    }

    pub fn live() -> Self {
        AttackMethod::None.into()
    }

    pub fn kind(self) -> AttackKind {
        self.kind
    }

    pub fn method(self) -> AttackMethod {
        self.method
    }

    pub fn is_live(self) -> bool {
        self.kind == AttackKind::Live
    }
}

impl From<AttackMethod> for AttackType {
    fn from(method: AttackMethod) -> Self {
        Self { kind: method.kind(), method }
    }
}

impl FromStr for AttackType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.parse::<AttackMethod>().map(Into::into)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ethnicity {
    African,
    EastAsian,
    CentralAsian,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 3] = [Ethnicity::African, Ethnicity::EastAsian, Ethnicity::CentralAsian];

    /// Identities cycle through the three groups.
    pub fn of_identity(identity_id: u32) -> Self {
        Self::ALL[identity_id as usize % 3]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Binary presentation label, serialised as `1` (live) / `0` (spoof).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Spoof,
    Live,
}

impl Label {
    pub fn of(attack: AttackType) -> Self {
        if attack.is_live() {
            Label::Live
        } else {
            Label::Spoof
        }
    }

    pub fn is_live(self) -> bool {
        self == Label::Live
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Live => 1,
            Label::Spoof => 0,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Label::Live),
            0 => Ok(Label::Spoof),
            other => Err(Error::Format(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

/// Everything about a sample except its pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDescriptor {
    pub sample_id: String,
    pub video_id: String,
    pub frame: u32,
    pub identity_id: u32,
    pub ethnicity: Ethnicity,
    pub attack: AttackType,
    pub label: Label,
    pub seed: u64,
}

/// Channel-first RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * size * size {
            return Err(Error::Contract(format!("image buffer of {} for size {size}", data.len())));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0.0; Self::CHANNELS * size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.size + y) * self.size + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.size + y) * self.size + x] = v;
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.size, other.size);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub descriptor: SampleDescriptor,
    pub image: Image,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_counts_per_kind() {
        let count = |k| AttackMethod::of_kind(k).count();
        assert_eq!(count(AttackKind::Physical), 3);
        assert_eq!(count(AttackKind::Adversarial) + count(AttackKind::Deepfake), 12);
        assert_eq!(count(AttackKind::Live), 1);
    }

    #[test]
    fn inconsistent_kind_is_rejected() {
        assert!(AttackType::new(AttackKind::Adversarial, AttackMethod::Simswap).is_err());
        assert!(AttackType::new(AttackKind::Deepfake, AttackMethod::Simswap).is_ok());
        let bad = r#"{"kind":"physical","method":"alma"}"#;
        assert!(serde_json::from_str::<AttackType>(bad).is_err());
    }

    #[test]
    fn unknown_method_is_config_error() {
        let err = "stylegan".parse::<AttackMethod>().unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn label_serialises_as_bit() {
        assert_eq!(serde_json::to_string(&Label::Live).unwrap(), "1");
        assert_eq!(serde_json::from_str::<Label>("0").unwrap(), Label::Spoof);
        assert!(serde_json::from_str::<Label>("2").is_err());
    }
}
