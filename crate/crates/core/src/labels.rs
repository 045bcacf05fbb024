//! Ordinal label vocabulary shared by every other module.
//!
//! Diagnosis labels are either BI-RADS categories 1–5 or the DDSM
//! three-class pathology scheme; density is always the four-class A–D
//! scale. All label types are totally ordered by severity, and every
//! aggregation in the pipeline (view → breast, breast → study) is the
//! ordinal maximum under that order.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("unrecognized {kind} label `{token}`{}", scheme_suffix(.scheme))]
    Parse {
        token: String,
        kind: &'static str,
        scheme: Option<LabelScheme>,
    },
    #[error("cannot combine BI-RADS and pathology labels")]
    MixedDiagnosisKinds,
    #[error("diagnosis label {label} does not belong to scheme {scheme}")]
    SchemeMismatch { label: String, scheme: LabelScheme },
}

fn scheme_suffix(scheme: &Option<LabelScheme>) -> String {
    match scheme {
        Some(s) => format!(" for scheme {s}"),
        None => String::new(),
    }
}

/// BI-RADS assessment categories 1 (negative) through 5 (highly suggestive
/// of malignancy). Categories 0 and 6 are rejected at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BiRadsLabel {
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl BiRadsLabel {
    pub const ALL: [BiRadsLabel; 5] = [Self::B1, Self::B2, Self::B3, Self::B4, Self::B5];

    /// The clinical category number, 1–5.
    pub fn value(self) -> u8 {
        self.index() as u8 + 1
    }

    /// Zero-based class index used by classifiers and confusion matrices.
    pub fn index(self) -> usize {
        match self {
            Self::B1 => 0,
            Self::B2 => 1,
            Self::B3 => 2,
            Self::B4 => 3,
            Self::B5 => 4,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for BiRadsLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Breast density composition categories A (almost entirely fatty) through
/// D (extremely dense).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DensityLabel {
    A,
    B,
    C,
    D,
}

impl DensityLabel {
    pub const ALL: [DensityLabel; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn index(self) -> usize {
        match self {
            Self::A => 0,
            Self::B => 1,
            Self::C => 2,
            Self::D => 3,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for DensityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
        };
        write!(f, "{c}")
    }
}

/// DDSM pathology labels under the declared order normal < benign < cancer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PathologyLabel {
    Normal,
    Benign,
    Cancer,
}

impl PathologyLabel {
    pub const ALL: [PathologyLabel; 3] = [Self::Normal, Self::Benign, Self::Cancer];

    pub fn index(self) -> usize {
        match self {
            Self::Normal => 0,
            Self::Benign => 1,
            Self::Cancer => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for PathologyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Normal => "normal",
            Self::Benign => "benign",
            Self::Cancer => "cancer",
        };
        write!(f, "{s}")
    }
}

/// Which diagnosis vocabulary a dataset uses. Density is four classes in
/// either scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    BiRads5,
    Pathology3,
}

impl LabelScheme {
    pub fn diagnosis_classes(self) -> usize {
        match self {
            Self::BiRads5 => 5,
            Self::Pathology3 => 3,
        }
    }

    pub fn density_classes(self) -> usize {
        4
    }

    /// Class names for report rows, in index order.
    pub fn diagnosis_class_names(self) -> Vec<String> {
        match self {
            Self::BiRads5 => BiRadsLabel::ALL.iter().map(|l| l.to_string()).collect(),
            Self::Pathology3 => PathologyLabel::ALL.iter().map(|l| l.to_string()).collect(),
        }
    }

    pub fn density_class_names(self) -> Vec<String> {
        DensityLabel::ALL.iter().map(|l| l.to_string()).collect()
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::BiRads5 => "birads5",
            Self::Pathology3 => "pathology3",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for LabelScheme {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "birads5" => Ok(Self::BiRads5),
            "pathology3" => Ok(Self::Pathology3),
            _ => Err(LabelError::Parse {
                token: s.to_string(),
                kind: "scheme",
                scheme: None,
            }),
        }
    }
}

/// A diagnosis label in whichever scheme the dataset declares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagnosisLabel {
    BiRads(BiRadsLabel),
    Pathology(PathologyLabel),
}

impl DiagnosisLabel {
    pub fn index(self) -> usize {
        match self {
            Self::BiRads(l) => l.index(),
            Self::Pathology(l) => l.index(),
        }
    }

    pub fn from_index(index: usize, scheme: LabelScheme) -> Option<Self> {
        match scheme {
            LabelScheme::BiRads5 => BiRadsLabel::from_index(index).map(Self::BiRads),
            LabelScheme::Pathology3 => PathologyLabel::from_index(index).map(Self::Pathology),
        }
    }

    pub fn scheme(self) -> LabelScheme {
        match self {
            Self::BiRads(_) => LabelScheme::BiRads5,
            Self::Pathology(_) => LabelScheme::Pathology3,
        }
    }

    /// Ordinal maximum of two diagnosis labels of the same kind.
    pub fn combine(self, other: Self) -> Result<Self, LabelError> {
        match (self, other) {
            (Self::BiRads(a), Self::BiRads(b)) => Ok(Self::BiRads(a.max(b))),
            (Self::Pathology(a), Self::Pathology(b)) => Ok(Self::Pathology(a.max(b))),
            _ => Err(LabelError::MixedDiagnosisKinds),
        }
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BiRads(l) => l.fmt(f),
            Self::Pathology(l) => l.fmt(f),
        }
    }
}

/// Which breast an image depicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    pub const ALL: [Laterality; 2] = [Self::Left, Self::Right];
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", if *self == Self::Left { "L" } else { "R" })
    }
}

impl std::str::FromStr for Laterality {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L" => Ok(Self::Left),
            "R" => Ok(Self::Right),
            _ => Err(LabelError::Parse {
                token: s.to_string(),
                kind: "laterality",
                scheme: None,
            }),
        }
    }
}

/// The two standard screening projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewKind {
    Cc,
    Mlo,
}

impl ViewKind {
    pub const ALL: [ViewKind; 2] = [Self::Cc, Self::Mlo];
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", if *self == Self::Cc { "CC" } else { "MLO" })
    }
}

impl std::str::FromStr for ViewKind {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CC" => Ok(Self::Cc),
            "MLO" => Ok(Self::Mlo),
            _ => Err(LabelError::Parse {
                token: s.to_string(),
                kind: "view",
                scheme: None,
            }),
        }
    }
}

/// One of the four images of a screening exam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ViewTag {
    pub laterality: Laterality,
    pub view: ViewKind,
}

impl ViewTag {
    pub const ALL: [ViewTag; 4] = [
        ViewTag { laterality: Laterality::Left, view: ViewKind::Cc },
        ViewTag { laterality: Laterality::Right, view: ViewKind::Cc },
        ViewTag { laterality: Laterality::Left, view: ViewKind::Mlo },
        ViewTag { laterality: Laterality::Right, view: ViewKind::Mlo },
    ];
}

impl fmt::Display for ViewTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.laterality, self.view)
    }
}

impl std::str::FromStr for ViewTag {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || LabelError::Parse {
            token: s.to_string(),
            kind: "view tag",
            scheme: None,
        };
        let (lat, view) = s.trim().split_once('-').ok_or_else(err)?;
        Ok(ViewTag {
            laterality: lat.parse().map_err(|_| err())?,
            view: view.parse().map_err(|_| err())?,
        })
    }
}

/// Ordinal maximum of two same-typed labels; commutative and idempotent.
/// Mixing BI-RADS with pathology is a type error (see
/// [`DiagnosisLabel::combine`] for the runtime-checked sum-type variant).
pub fn combine_view_labels<L: Ord>(a: L, b: L) -> L {
    a.max(b)
}

/// A study-level label aggregated from the two breast labels. `partial`
/// flags that one side was missing and the present side was propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyAggregate<L> {
    pub label: L,
    pub partial: bool,
}

/// Ordinal maximum of the two breast-level labels. With one side absent the
/// present side is propagated and flagged; with both absent there is no
/// study label.
pub fn study_label<L: Ord>(left: Option<L>, right: Option<L>) -> Option<StudyAggregate<L>> {
    match (left, right) {
        (Some(l), Some(r)) => Some(StudyAggregate { label: l.max(r), partial: false }),
        (Some(l), None) => Some(StudyAggregate { label: l, partial: true }),
        (None, Some(r)) => Some(StudyAggregate { label: r, partial: true }),
        (None, None) => None,
    }
}

/// Parse a diagnosis token. BI-RADS accepts "1"–"5" (0 and 6 are rejected);
/// pathology accepts "normal", "benign", "cancer" and the DDSM variants
/// "benign with callback" / "benign without callback", all case-insensitive.
pub fn parse_diagnosis(text: &str, scheme: LabelScheme) -> Result<DiagnosisLabel, LabelError> {
    let token = text.trim();
    let err = || LabelError::Parse {
        token: token.to_string(),
        kind: "diagnosis",
        scheme: Some(scheme),
    };
    match scheme {
        LabelScheme::BiRads5 => match token {
            "1" => Ok(BiRadsLabel::B1),
            "2" => Ok(BiRadsLabel::B2),
            "3" => Ok(BiRadsLabel::B3),
            "4" => Ok(BiRadsLabel::B4),
            "5" => Ok(BiRadsLabel::B5),
            _ => Err(err()),
        }
        .map(DiagnosisLabel::BiRads),
        LabelScheme::Pathology3 => {
            let lower = token.to_ascii_lowercase();
            match lower.as_str() {
                "normal" => Ok(PathologyLabel::Normal),
                "benign" | "benign with callback" | "benign without callback" => {
                    Ok(PathologyLabel::Benign)
                }
                "cancer" => Ok(PathologyLabel::Cancer),
                _ => Err(err()),
            }
            .map(DiagnosisLabel::Pathology)
        }
    }
}

/// Parse a density token "A"–"D", case-insensitive.
pub fn parse_density(text: &str) -> Result<DensityLabel, LabelError> {
    match text.trim().to_ascii_uppercase().as_str() {
        "A" => Ok(DensityLabel::A),
        "B" => Ok(DensityLabel::B),
        "C" => Ok(DensityLabel::C),
        "D" => Ok(DensityLabel::D),
        _ => Err(LabelError::Parse {
            token: text.trim().to_string(),
            kind: "density",
            scheme: None,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_is_ordinal_max() {
        assert_eq!(
            combine_view_labels(BiRadsLabel::B2, BiRadsLabel::B4),
            BiRadsLabel::B4
        );
        assert_eq!(
            combine_view_labels(DensityLabel::B, DensityLabel::B),
            DensityLabel::B
        );
        assert_eq!(
            combine_view_labels(PathologyLabel::Normal, PathologyLabel::Cancer),
            PathologyLabel::Cancer
        );
    }

    #[test]
    fn combine_commutative_and_idempotent_exhaustive() {
        for a in BiRadsLabel::ALL {
            assert_eq!(combine_view_labels(a, a), a);
            for b in BiRadsLabel::ALL {
                assert_eq!(combine_view_labels(a, b), combine_view_labels(b, a));
            }
        }
        for a in DensityLabel::ALL {
            assert_eq!(combine_view_labels(a, a), a);
            for b in DensityLabel::ALL {
                assert_eq!(combine_view_labels(a, b), combine_view_labels(b, a));
            }
        }
        for a in PathologyLabel::ALL {
            assert_eq!(combine_view_labels(a, a), a);
            for b in PathologyLabel::ALL {
                assert_eq!(combine_view_labels(a, b), combine_view_labels(b, a));
            }
        }
    }

    #[test]
    fn study_label_dominates_both_inputs_exhaustive() {
        // All 25 BI-RADS pairs: the study label is >= each input.
        for l in BiRadsLabel::ALL {
            for r in BiRadsLabel::ALL {
                let agg = study_label(Some(l), Some(r)).unwrap();
                assert!(agg.label >= l && agg.label >= r);
                assert!(!agg.partial);
            }
        }
        assert_eq!(
            study_label(Some(BiRadsLabel::B1), Some(BiRadsLabel::B5)).unwrap().label,
            BiRadsLabel::B5
        );
        assert_eq!(
            study_label(Some(BiRadsLabel::B3), Some(BiRadsLabel::B3)).unwrap().label,
            BiRadsLabel::B3
        );
    }

    #[test]
    fn study_label_missing_side_propagates_with_flag() {
        let agg = study_label(Some(BiRadsLabel::B2), None).unwrap();
        assert_eq!(agg.label, BiRadsLabel::B2);
        assert!(agg.partial);
        assert_eq!(study_label::<BiRadsLabel>(None, None), None);
    }

    #[test]
    fn mixed_diagnosis_kinds_rejected() {
        let a = DiagnosisLabel::BiRads(BiRadsLabel::B1);
        let b = DiagnosisLabel::Pathology(PathologyLabel::Benign);
        assert_eq!(a.combine(b), Err(LabelError::MixedDiagnosisKinds));
        assert_eq!(
            a.combine(DiagnosisLabel::BiRads(BiRadsLabel::B4)).unwrap(),
            DiagnosisLabel::BiRads(BiRadsLabel::B4)
        );
    }

    #[test]
    fn parse_birads() {
        assert_eq!(
            parse_diagnosis("4", LabelScheme::BiRads5).unwrap(),
            DiagnosisLabel::BiRads(BiRadsLabel::B4)
        );
        // 0 and 6 are out of the declared range.
        for bad in ["0", "6", "x", ""] {
            let err = parse_diagnosis(bad, LabelScheme::BiRads5).unwrap_err();
            match err {
                LabelError::Parse { token, .. } => assert_eq!(token, bad.trim()),
                other => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn parse_pathology_callback_variants() {
        for text in ["benign with callback", "Benign Without Callback", "BENIGN"] {
            assert_eq!(
                parse_diagnosis(text, LabelScheme::Pathology3).unwrap(),
                DiagnosisLabel::Pathology(PathologyLabel::Benign)
            );
        }
        assert_eq!(
            parse_diagnosis("cancer", LabelScheme::Pathology3).unwrap(),
            DiagnosisLabel::Pathology(PathologyLabel::Cancer)
        );
        assert!(parse_diagnosis("3", LabelScheme::Pathology3).is_err());
    }

    #[test]
    fn parse_render_round_trip() {
        for l in BiRadsLabel::ALL {
            let text = l.to_string();
            assert_eq!(
                parse_diagnosis(&text, LabelScheme::BiRads5).unwrap(),
                DiagnosisLabel::BiRads(l)
            );
        }
        for l in PathologyLabel::ALL {
            let text = l.to_string();
            assert_eq!(
                parse_diagnosis(&text, LabelScheme::Pathology3).unwrap(),
                DiagnosisLabel::Pathology(l)
            );
        }
        for l in DensityLabel::ALL {
            assert_eq!(parse_density(&l.to_string()).unwrap(), l);
        }
    }

    #[test]
    fn parse_density_case_insensitive() {
        assert_eq!(parse_density("b").unwrap(), DensityLabel::B);
        assert!(parse_density("E").is_err());
    }

    #[test]
    fn view_tag_round_trip() {
        for tag in ViewTag::ALL {
            let parsed: ViewTag = tag.to_string().parse().unwrap();
            assert_eq!(parsed, tag);
        }
        assert!("L-XX".parse::<ViewTag>().is_err());
        assert!("LCC".parse::<ViewTag>().is_err());
    }
}
