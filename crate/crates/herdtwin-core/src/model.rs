//! Domain vocabulary shared by every pipeline stage.

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown treatment code: {0:?}")]
    UnknownTreatmentCode(String),
    #[error("illegal treatment combination: procedure {procedure:?} with relief {relief:?}")]
    IllegalCombination { procedure: Procedure, relief: Relief },
    #[error("unknown {kind} token: {token:?}")]
    UnknownToken { kind: &'static str, token: String },
    #[error("timestamp {timestamp} precedes epoch hour {epoch}")]
    TimestampBeforeEpoch { timestamp: NaiveDateTime, epoch: NaiveDateTime },
}

/// The eight behavioral states a collar reports, one per minute record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StateLabel {
    Resting,
    Rumination,
    HighActivity,
    MediumActivity,
    Panting,
    Grazing,
    Walking,
    Eating,
}

impl StateLabel {
    pub const ALL: [StateLabel; 8] = [
        StateLabel::Resting,
        StateLabel::Rumination,
        StateLabel::HighActivity,
        StateLabel::MediumActivity,
        StateLabel::Panting,
        StateLabel::Grazing,
        StateLabel::Walking,
        StateLabel::Eating,
    ];

    /// Token used in the sensor CSV's `state` column.
    pub fn token(self) -> &'static str {
        match self {
            StateLabel::Resting => "REST",
            StateLabel::Rumination => "RUMINATE",
            StateLabel::HighActivity => "HIGH",
            StateLabel::MediumActivity => "MEDIUM",
            StateLabel::Panting => "PANT",
            StateLabel::Grazing => "GRAZE",
            StateLabel::Walking => "WALK",
            StateLabel::Eating => "EAT",
        }
    }

    pub fn parse_token(token: &str) -> Result<StateLabel, ModelError> {
        let t = token.trim().to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|s| s.token() == t)
            .ok_or(ModelError::UnknownToken { kind: "state", token: token.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Breed {
    Angus,
    Brahman,
    Brangus,
    Charolais,
    Crossbred,
}

impl Breed {
    pub const ALL: [Breed; 5] =
        [Breed::Angus, Breed::Brahman, Breed::Brangus, Breed::Charolais, Breed::Crossbred];

    pub fn token(self) -> &'static str {
        match self {
            Breed::Angus => "ANGUS",
            Breed::Brahman => "BRAHMAN",
            Breed::Brangus => "BRANGUS",
            Breed::Charolais => "CHAROLAIS",
            Breed::Crossbred => "CROSSBRED",
        }
    }

    pub fn parse_token(token: &str) -> Result<Breed, ModelError> {
        let t = token.trim().to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|b| b.token() == t)
            .ok_or(ModelError::UnknownToken { kind: "breed", token: token.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn token(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }

    pub fn parse_token(token: &str) -> Result<Sex, ModelError> {
        match token.trim().to_ascii_uppercase().as_str() {
            "F" | "FEMALE" => Ok(Sex::Female),
            "M" | "MALE" => Ok(Sex::Male),
            _ => Err(ModelError::UnknownToken { kind: "sex", token: token.to_string() }),
        }
    }
}

/// Husbandry procedure an animal underwent, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Procedure {
    Castrating,
    Dehorning,
    DehorningAndCastrating,
    None,
}

impl Procedure {
    pub fn code(self) -> &'static str {
        match self {
            Procedure::Castrating => "C",
            Procedure::Dehorning => "D",
            Procedure::DehorningAndCastrating => "D+C",
            Procedure::None => "NONE",
        }
    }

    pub fn parse_code(token: &str) -> Result<Procedure, ModelError> {
        match token.trim().to_ascii_uppercase().as_str() {
            "C" | "CASTRATING" | "CASTRATION" => Ok(Procedure::Castrating),
            "D" | "DEHORNING" => Ok(Procedure::Dehorning),
            "D+C" | "DC" | "DEHORNING+CASTRATING" | "DEHORNING+CASTRATION" => {
                Ok(Procedure::DehorningAndCastrating)
            }
            "NONE" => Ok(Procedure::None),
            _ => Err(ModelError::UnknownToken { kind: "procedure", token: token.to_string() }),
        }
    }
}

/// Pain-relief arm. `PositiveControl` marks the untouched baseline group and
/// is only legal with `Procedure::None`; the other four require a procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relief {
    NegativeControl,
    TopicalAnaesthetic,
    Meloxicam,
    TopicalPlusMeloxicam,
    PositiveControl,
}

impl Relief {
    pub fn code(self) -> &'static str {
        match self {
            Relief::NegativeControl => "N",
            Relief::TopicalAnaesthetic => "T",
            Relief::Meloxicam => "M",
            Relief::TopicalPlusMeloxicam => "T+M",
            Relief::PositiveControl => "P",
        }
    }

    pub fn parse_code(token: &str) -> Result<Relief, ModelError> {
        match token.trim().to_ascii_uppercase().as_str() {
            "N" => Ok(Relief::NegativeControl),
            "T" => Ok(Relief::TopicalAnaesthetic),
            "M" => Ok(Relief::Meloxicam),
            "T+M" | "TM" => Ok(Relief::TopicalPlusMeloxicam),
            "P" => Ok(Relief::PositiveControl),
            _ => Err(ModelError::UnknownToken { kind: "relief", token: token.to_string() }),
        }
    }
}

/// A (procedure, relief) pair. Exactly 13 combinations are constructible;
/// the fields stay private so every live value is one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TreatmentRepr", into = "TreatmentRepr")]
pub struct CombinedTreatment {
    procedure: Procedure,
    relief: Relief,
}

#[derive(Serialize, Deserialize)]
struct TreatmentRepr {
    procedure: Procedure,
    relief: Relief,
}

impl TryFrom<TreatmentRepr> for CombinedTreatment {
    type Error = ModelError;
    fn try_from(r: TreatmentRepr) -> Result<Self, ModelError> {
        CombinedTreatment::new(r.procedure, r.relief)
    }
}

impl From<CombinedTreatment> for TreatmentRepr {
    fn from(t: CombinedTreatment) -> TreatmentRepr {
        TreatmentRepr { procedure: t.procedure, relief: t.relief }
    }
}

impl CombinedTreatment {
    pub fn new(procedure: Procedure, relief: Relief) -> Result<Self, ModelError> {
        let legal = match relief {
            Relief::PositiveControl => procedure == Procedure::None,
            _ => procedure != Procedure::None,
        };
        if legal {
            Ok(CombinedTreatment { procedure, relief })
        } else {
            Err(ModelError::IllegalCombination { procedure, relief })
        }
    }

    pub fn procedure(self) -> Procedure {
        self.procedure
    }

    pub fn relief(self) -> Relief {
        self.relief
    }

    pub fn is_positive_control(self) -> bool {
        self.relief == Relief::PositiveControl
    }

    /// All 13 legal combinations in canonical row order (see `row_index`).
    pub fn all() -> [CombinedTreatment; 13] {
        use Procedure::*;
        use Relief::*;
        let mk = |p, r| CombinedTreatment::new(p, r).expect("member of the legal set");
        [
            mk(Castrating, NegativeControl),
            mk(Castrating, TopicalAnaesthetic),
            mk(Castrating, Meloxicam),
            mk(Castrating, TopicalPlusMeloxicam),
            mk(Dehorning, TopicalAnaesthetic),
            mk(Dehorning, Meloxicam),
            mk(Dehorning, TopicalPlusMeloxicam),
            mk(Dehorning, NegativeControl),
            mk(DehorningAndCastrating, TopicalAnaesthetic),
            mk(DehorningAndCastrating, Meloxicam),
            mk(DehorningAndCastrating, TopicalPlusMeloxicam),
            mk(DehorningAndCastrating, NegativeControl),
            mk(None, PositiveControl),
        ]
    }

    /// Position in the canonical treatment table; the tie-break order used
    /// everywhere a deterministic treatment ordering is needed.
    pub fn row_index(self) -> usize {
        Self::all().iter().position(|t| *t == self).expect("every live value is legal")
    }

    /// Canonical short code, e.g. `C,T+M` or `P`.
    pub fn code(self) -> String {
        if self.relief == Relief::PositiveControl {
            "P".to_string()
        } else {
            format!("{},{}", self.procedure.code(), self.relief.code())
        }
    }
}

impl PartialOrd for CombinedTreatment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CombinedTreatment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.row_index().cmp(&other.row_index())
    }
}

impl std::fmt::Display for CombinedTreatment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.code())
    }
}

/// Parse one of the 13 short treatment codes (case-insensitive,
/// whitespace-tolerant), e.g. `"C,T+M"`, `"D+C,N"`, `"P"`.
pub fn parse_treatment(code: &str) -> Result<CombinedTreatment, ModelError> {
    let compact: String = code.chars().filter(|c| !c.is_whitespace()).collect();
    let upper = compact.to_ascii_uppercase();
    if upper == "P" {
        return CombinedTreatment::new(Procedure::None, Relief::PositiveControl);
    }
    let (proc_part, relief_part) = upper
        .split_once(',')
        .ok_or_else(|| ModelError::UnknownTreatmentCode(code.to_string()))?;
    let procedure = Procedure::parse_code(proc_part)
        .map_err(|_| ModelError::UnknownTreatmentCode(code.to_string()))?;
    let relief = Relief::parse_code(relief_part)
        .map_err(|_| ModelError::UnknownTreatmentCode(code.to_string()))?;
    CombinedTreatment::new(procedure, relief)
        .map_err(|_| ModelError::UnknownTreatmentCode(code.to_string()))
}

/// Canonical textual form; inverse of [`parse_treatment`].
pub fn format_treatment(t: CombinedTreatment) -> String {
    t.code()
}

/// The unit of averaging and modeling: animals sharing breed, sex, and
/// combined treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CohortKey {
    pub breed: Breed,
    pub sex: Sex,
    pub treatment: CombinedTreatment,
}

impl CohortKey {
    /// Filesystem-safe identifier, e.g. `BRAHMAN-F-D+C,T+M`.
    pub fn slug(&self) -> String {
        format!("{}-{}-{}", self.breed.token(), self.sex.token(), self.treatment.code())
    }
}

impl std::fmt::Display for CohortKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.breed.token(), self.sex.token(), self.treatment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quality {
    Valid,
    Corrupted,
}

/// One minute-resolution sensor reading. `state` is `None` exactly when the
/// raw state cell was unreadable; such records are always `Corrupted` but
/// still occupy their minute slot for coverage accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub animal_id: String,
    pub timestamp: NaiveDateTime,
    pub state: Option<StateLabel>,
    pub quality: Quality,
}

/// 1-based index of `timestamp`'s clock hour counted from `epoch_start`'s
/// clock hour: the first hour of the dataset is serial 1, the first hour of
/// the next day is serial 25, and so on.
pub fn hour_serial(timestamp: NaiveDateTime, epoch_start: NaiveDateTime) -> Result<u64, ModelError> {
    let epoch_hour = epoch_start.with_minute(0).unwrap().with_second(0).unwrap();
    if timestamp < epoch_hour {
        return Err(ModelError::TimestampBeforeEpoch { timestamp, epoch: epoch_hour });
    }
    let ts_hour = timestamp.with_minute(0).unwrap().with_second(0).unwrap();
    Ok(1 + (ts_hour - epoch_hour).num_hours() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourPoint {
    pub hour_serial: u64,
    /// Clock hour 0-23; always `(hour_serial - 1 + start offset) mod 24`.
    pub hour_of_day: u8,
    /// Minutes spent in the series' state during this hour, in [0, 60].
    pub minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeriesOrigin {
    SingleAnimal(String),
    CohortAverage(usize),
}

/// Hourly minutes-in-state series for one cohort and one state. Serials are
/// strictly increasing but may have gaps where hours were destroyed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlySeries {
    pub cohort: CohortKey,
    pub state: StateLabel,
    pub points: Vec<HourPoint>,
    pub origin: SeriesOrigin,
}

impl HourlySeries {
    /// Clock hour of serial 1, recovered from any point.
    pub fn start_hour_offset(&self) -> u8 {
        match self.points.first() {
            Some(p) => {
                let shift = (p.hour_serial - 1) % 24;
                ((p.hour_of_day as u64 + 24 - shift) % 24) as u8
            }
            None => 0,
        }
    }

    /// True when serials run consecutively with no dropped hours.
    pub fn is_gap_free(&self) -> bool {
        self.points.windows(2).all(|w| w[1].hour_serial == w[0].hour_serial + 1)
    }

    pub fn minutes(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.minutes).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn dt(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, mo, d).unwrap().and_hms_opt(h, mi, 0).unwrap()
    }

    #[test]
    fn treatment_set_has_exactly_13_members() {
        let all = CombinedTreatment::all();
        assert_eq!(all.len(), 13);
        for (i, t) in all.iter().enumerate() {
            assert_eq!(t.row_index(), i);
        }
        // Uniqueness.
        for i in 0..13 {
            for j in (i + 1)..13 {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn illegal_combinations_are_rejected() {
        // PositiveControl with any procedure.
        for p in [Procedure::Castrating, Procedure::Dehorning, Procedure::DehorningAndCastrating] {
            assert!(CombinedTreatment::new(p, Relief::PositiveControl).is_err());
        }
        // Non-P relief without a procedure.
        for r in [
            Relief::NegativeControl,
            Relief::TopicalAnaesthetic,
            Relief::Meloxicam,
            Relief::TopicalPlusMeloxicam,
        ] {
            assert!(CombinedTreatment::new(Procedure::None, r).is_err());
        }
    }

    #[test]
    fn parse_treatment_known_codes() {
        let t = parse_treatment("C,T+M").unwrap();
        assert_eq!(t.procedure(), Procedure::Castrating);
        assert_eq!(t.relief(), Relief::TopicalPlusMeloxicam);

        let p = parse_treatment("P").unwrap();
        assert_eq!(p.procedure(), Procedure::None);
        assert_eq!(p.relief(), Relief::PositiveControl);

        assert!(matches!(parse_treatment("X,Y"), Err(ModelError::UnknownTreatmentCode(_))));
    }

    #[test]
    fn parse_treatment_is_tolerant_of_case_and_whitespace() {
        assert_eq!(parse_treatment(" d+c , t+m ").unwrap().code(), "D+C,T+M");
        assert_eq!(parse_treatment("p").unwrap().code(), "P");
    }

    #[test]
    fn parse_format_roundtrip_over_all_13() {
        for t in CombinedTreatment::all() {
            assert_eq!(parse_treatment(&format_treatment(t)).unwrap(), t);
        }
    }

    #[test]
    fn treatment_order_matches_canonical_rows() {
        let codes: Vec<String> = CombinedTreatment::all().iter().map(|t| t.code()).collect();
        assert_eq!(
            codes,
            vec![
                "C,N", "C,T", "C,M", "C,T+M", "D,T", "D,M", "D,T+M", "D,N", "D+C,T", "D+C,M",
                "D+C,T+M", "D+C,N", "P"
            ]
        );
        let mut shuffled = CombinedTreatment::all();
        shuffled.reverse();
        shuffled.sort();
        assert_eq!(shuffled, CombinedTreatment::all());
    }

    #[test]
    fn hour_serial_examples() {
        let epoch = dt(2021, 6, 1, 0, 0);
        assert_eq!(hour_serial(dt(2021, 6, 1, 0, 30), epoch).unwrap(), 1);
        assert_eq!(hour_serial(dt(2021, 6, 2, 0, 0), epoch).unwrap(), 25);
        assert_eq!(hour_serial(dt(2021, 6, 1, 23, 59), epoch).unwrap(), 24);
    }

    #[test]
    fn hour_serial_epoch_is_truncated_to_its_hour() {
        // A record in the same clock hour as a mid-hour epoch still lands in
        // serial 1 even though it precedes the epoch instant.
        let epoch = dt(2021, 8, 10, 8, 6);
        assert_eq!(hour_serial(dt(2021, 8, 10, 8, 0), epoch).unwrap(), 1);
        assert_eq!(hour_serial(dt(2021, 8, 10, 9, 0), epoch).unwrap(), 2);
        assert!(hour_serial(dt(2021, 8, 10, 7, 59), epoch).is_err());
    }

    #[test]
    fn hour_serial_increments_exactly_at_hour_boundaries() {
        let epoch = dt(2021, 6, 1, 5, 0);
        let mut prev = 0;
        for k in 0..200 {
            let ts = epoch + chrono::Duration::minutes(17 * k);
            let s = hour_serial(ts, epoch).unwrap();
            assert!(s >= prev);
            assert_eq!(s, 1 + (17 * k as u64) / 60);
            prev = s;
        }
    }

    #[test]
    fn state_breed_sex_tokens_roundtrip() {
        for s in StateLabel::ALL {
            assert_eq!(StateLabel::parse_token(s.token()).unwrap(), s);
        }
        for b in Breed::ALL {
            assert_eq!(Breed::parse_token(b.token()).unwrap(), b);
        }
        for s in [Sex::Female, Sex::Male] {
            assert_eq!(Sex::parse_token(s.token()).unwrap(), s);
        }
        assert!(StateLabel::parse_token("???").is_err());
    }

    #[test]
    fn start_hour_offset_recovers_partial_day_starts() {
        let cohort = CohortKey {
            breed: Breed::Brahman,
            sex: Sex::Female,
            treatment: parse_treatment("P").unwrap(),
        };
        let series = HourlySeries {
            cohort,
            state: StateLabel::Resting,
            points: vec![
                HourPoint { hour_serial: 3, hour_of_day: 10, minutes: 5.0 },
                HourPoint { hour_serial: 4, hour_of_day: 11, minutes: 6.0 },
            ],
            origin: SeriesOrigin::SingleAnimal("A1".into()),
        };
        // Serial 3 at clock hour 10 means serial 1 was clock hour 8.
        assert_eq!(series.start_hour_offset(), 8);
        assert!(series.is_gap_free());
    }

    #[test]
    fn serde_rejects_illegal_treatment_documents() {
        let bad = r#"{"procedure":"None","relief":"Meloxicam"}"#;
        assert!(serde_json::from_str::<CombinedTreatment>(bad).is_err());
        let good = r#"{"procedure":"Dehorning","relief":"Meloxicam"}"#;
        let t: CombinedTreatment = serde_json::from_str(good).unwrap();
        assert_eq!(t.code(), "D,M");
    }
}
