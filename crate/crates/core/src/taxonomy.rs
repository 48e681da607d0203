//! Taxonomic hierarchies, identity-mode attribute sets, and pair strata.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Which rank list is active for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyKind {
    Taxonomy,
    Identity,
}

/// A level of the active hierarchy. Ordinal 0 is the coarsest rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rank {
    pub ordinal: usize,
    pub name: &'static str,
}

pub const CLASS: Rank = Rank {
    ordinal: 0,
    name: "class",
};
pub const ORDER: Rank = Rank {
    ordinal: 1,
    name: "order",
};
pub const FAMILY: Rank = Rank {
    ordinal: 2,
    name: "family",
};
pub const GENUS: Rank = Rank {
    ordinal: 3,
    name: "genus",
};
pub const SPECIES: Rank = Rank {
    ordinal: 4,
    name: "species",
};
pub const TYPE: Rank = Rank {
    ordinal: 0,
    name: "type",
};

pub const TAXONOMY_RANKS: [Rank; 5] = [CLASS, ORDER, FAMILY, GENUS, SPECIES];
pub const IDENTITY_RANKS: [Rank; 1] = [TYPE];

/// Age-sex classes used as the identity-mode intermediate attribute.
pub const DEFAULT_IDENTITY_TYPES: [&str; 5] = [
    "Silverback",
    "Adult Female",
    "Blackback",
    "Adolescent/Juvenile",
    "Infant",
];

impl HierarchyKind {
    pub fn ranks(self) -> &'static [Rank] {
        match self {
            HierarchyKind::Taxonomy => &TAXONOMY_RANKS,
            HierarchyKind::Identity => &IDENTITY_RANKS,
        }
    }

    pub fn finest(self) -> Rank {
        *self.ranks().last().expect("non-empty rank list")
    }

    pub fn rank_by_name(self, name: &str) -> Option<Rank> {
        self.ranks().iter().copied().find(|r| r.name == name)
    }
}

/// Comparison key for free-text taxon names: trimmed and case-folded.
pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

pub fn names_match(a: &str, b: &str) -> bool {
    normalize_name(a) == normalize_name(b)
}

/// A specimen's rank-labeled path, or its identity-mode attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lineage {
    kind: HierarchyKind,
    taxa: Vec<String>,
    identity: Option<String>,
}

impl Lineage {
    pub fn taxonomy(
        class: &str,
        order: &str,
        family: &str,
        genus: &str,
        species: &str,
    ) -> Result<Self, TaxonomyError> {
        Self::from_parts(
            HierarchyKind::Taxonomy,
            [class, order, family, genus, species]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            None,
        )
    }

    pub fn identity(type_label: &str, individual: &str) -> Result<Self, TaxonomyError> {
        Self::from_parts(
            HierarchyKind::Identity,
            vec![type_label.to_string()],
            Some(individual.to_string()),
        )
    }

    pub fn from_parts(
        kind: HierarchyKind,
        taxa: Vec<String>,
        identity: Option<String>,
    ) -> Result<Self, TaxonomyError> {
        if taxa.len() != kind.ranks().len() {
            return Err(TaxonomyError::Schema(format!(
                "expected {} ranks, got {}",
                kind.ranks().len(),
                taxa.len()
            )));
        }
        for (rank, taxon) in kind.ranks().iter().zip(&taxa) {
            if taxon.trim().is_empty() {
                return Err(TaxonomyError::Schema(format!(
                    "empty taxon at rank {}",
                    rank.name
                )));
            }
        }
        match (kind, &identity) {
            (HierarchyKind::Identity, None) => {
                return Err(TaxonomyError::Schema(
                    "identity lineage needs an individual".into(),
                ))
            }
            (HierarchyKind::Identity, Some(id)) if id.trim().is_empty() => {
                return Err(TaxonomyError::Schema("empty individual identifier".into()))
            }
            (HierarchyKind::Taxonomy, Some(_)) => {
                return Err(TaxonomyError::Schema(
                    "taxonomy lineage cannot carry an individual".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            taxa,
            identity,
        })
    }

    pub fn kind(&self) -> HierarchyKind {
        self.kind
    }

    pub fn taxon(&self, rank: Rank) -> &str {
        &self.taxa[rank.ordinal]
    }

    pub fn taxa(&self) -> &[String] {
        &self.taxa
    }

    pub fn identity_id(&self) -> Option<&str> {
        self.identity.as_deref()
    }
}

/// Finest rank at which both lineages agree, or `None` if they already
/// differ at the coarsest rank.
pub fn lowest_common_rank(a: &Lineage, b: &Lineage) -> Result<Option<Rank>, TaxonomyError> {
    if a.kind != b.kind {
        return Err(TaxonomyError::Schema(format!(
            "cannot compare {:?} lineage with {:?} lineage",
            a.kind, b.kind
        )));
    }
    let mut common = None;
    for &rank in a.kind.ranks() {
        if names_match(a.taxon(rank), b.taxon(rank)) {
            common = Some(rank);
        } else {
            break;
        }
    }
    Ok(common)
}

/// Pair category used for accuracy breakdowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    Visual,
    SameSpecies,
    SameGenus,
    SameFamily,
    SameOrder,
    SameClass,
    SameIndividual,
    DifferentIndividual,
}

impl Stratum {
    /// Column order of the stratified accuracy table.
    pub const TAXONOMY_COLUMNS: [Stratum; 6] = [
        Stratum::Visual,
        Stratum::SameSpecies,
        Stratum::SameGenus,
        Stratum::SameFamily,
        Stratum::SameOrder,
        Stratum::SameClass,
    ];
    pub const IDENTITY_COLUMNS: [Stratum; 2] =
        [Stratum::SameIndividual, Stratum::DifferentIndividual];

    pub fn columns(kind: HierarchyKind) -> &'static [Stratum] {
        match kind {
            HierarchyKind::Taxonomy => &Self::TAXONOMY_COLUMNS,
            HierarchyKind::Identity => &Self::IDENTITY_COLUMNS,
        }
    }

    /// Verification label implied by the stratum.
    pub fn label(self) -> u8 {
        match self {
            Stratum::SameSpecies | Stratum::SameIndividual => 1,
            _ => 0,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Stratum::Visual => "Visual",
            Stratum::SameSpecies => "Same Species",
            Stratum::SameGenus => "Same Genus",
            Stratum::SameFamily => "Same Family",
            Stratum::SameOrder => "Same Order",
            Stratum::SameClass => "Same Class",
            Stratum::SameIndividual => "Same Individual",
            Stratum::DifferentIndividual => "Different Individual",
        }
    }

    pub fn from_common_rank(rank: Rank) -> Option<Stratum> {
        match rank.ordinal {
            0 => Some(Stratum::SameClass),
            1 => Some(Stratum::SameOrder),
            2 => Some(Stratum::SameFamily),
            3 => Some(Stratum::SameGenus),
            4 => Some(Stratum::SameSpecies),
            _ => None,
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

/// Classifies a pair. `visual_flag` marks generator-injected confusable pairs
/// and is only legal when the pair shares at most an order.
pub fn stratum_of(a: &Lineage, b: &Lineage, visual_flag: bool) -> Result<Stratum, TaxonomyError> {
    let common = lowest_common_rank(a, b)?;
    match a.kind {
        HierarchyKind::Identity => {
            if visual_flag {
                return Err(TaxonomyError::InvalidManifest(
                    "visual flag is not defined for identity pairs".into(),
                ));
            }
            let same = match (a.identity_id(), b.identity_id()) {
                (Some(x), Some(y)) => names_match(x, y),
                _ => false,
            };
            if same && common.is_none() {
                return Err(TaxonomyError::Consistency(
                    "same individual recorded with two different types".into(),
                ));
            }
            Ok(if same {
                Stratum::SameIndividual
            } else {
                Stratum::DifferentIndividual
            })
        }
        HierarchyKind::Taxonomy => {
            if visual_flag {
                return match common {
                    Some(r) if r.ordinal > ORDER.ordinal => {
                        Err(TaxonomyError::InvalidManifest(format!(
                            "visual pair shares rank {}; visual pairs must share at most an order",
                            r.name
                        )))
                    }
                    _ => Ok(Stratum::Visual),
                };
            }
            match common {
                Some(r) => Ok(Stratum::from_common_rank(r).expect("taxonomy rank")),
                None => Err(TaxonomyError::InvalidManifest(
                    "pair shares no rank and is not flagged visual".into(),
                )),
            }
        }
    }
}

/// Whether think-block levels carry taxon names or same/different verdicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttributeMode {
    #[default]
    Concrete,
    Binary,
}

/// One think-block attribute: its tag name and the rank it reads from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeLevel {
    pub tag: String,
    pub rank: Rank,
    /// Closed label set, if the attribute is categorical (identity mode).
    pub labels: Vec<String>,
}

/// Ordered, coarsest-first list of the K intermediate attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    kind: HierarchyKind,
    mode: AttributeMode,
    levels: Vec<AttributeLevel>,
}

impl AttributeSchema {
    pub fn new(
        kind: HierarchyKind,
        mode: AttributeMode,
        levels: Vec<AttributeLevel>,
    ) -> Result<Self, TaxonomyError> {
        if levels.is_empty() {
            return Err(TaxonomyError::Schema(
                "attribute schema needs at least one level".into(),
            ));
        }
        for w in levels.windows(2) {
            if w[0].rank.ordinal >= w[1].rank.ordinal {
                return Err(TaxonomyError::Schema(
                    "levels must be ordered coarsest first".into(),
                ));
            }
        }
        for level in &levels {
            if !kind.ranks().contains(&level.rank) {
                return Err(TaxonomyError::Schema(format!(
                    "rank {} not in active hierarchy",
                    level.rank.name
                )));
            }
            if level.tag.is_empty()
                || !level
                    .tag
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c == '_')
            {
                return Err(TaxonomyError::Schema(format!(
                    "invalid tag name {:?}",
                    level.tag
                )));
            }
            if matches!(level.tag.as_str(), "think" | "answer") {
                return Err(TaxonomyError::Schema(format!(
                    "reserved tag name {:?}",
                    level.tag
                )));
            }
        }
        Ok(Self { kind, mode, levels })
    }

    /// Order, family and genus levels.
    pub fn taxonomy(mode: AttributeMode) -> Self {
        let levels = [ORDER, FAMILY, GENUS]
            .iter()
            .map(|&rank| AttributeLevel {
                tag: rank.name.to_string(),
                rank,
                labels: Vec::new(),
            })
            .collect();
        Self::new(HierarchyKind::Taxonomy, mode, levels).expect("valid default schema")
    }

    /// Single `type` level over the age-sex classes.
    pub fn identity(mode: AttributeMode) -> Self {
        let level = AttributeLevel {
            tag: TYPE.name.to_string(),
            rank: TYPE,
            labels: DEFAULT_IDENTITY_TYPES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        Self::new(HierarchyKind::Identity, mode, vec![level]).expect("valid default schema")
    }

    pub fn for_kind(kind: HierarchyKind, mode: AttributeMode) -> Self {
        match kind {
            HierarchyKind::Taxonomy => Self::taxonomy(mode),
            HierarchyKind::Identity => Self::identity(mode),
        }
    }

    pub fn kind(&self) -> HierarchyKind {
        self.kind
    }

    pub fn mode(&self) -> AttributeMode {
        self.mode
    }

    pub fn with_mode(&self, mode: AttributeMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn levels(&self) -> &[AttributeLevel] {
        &self.levels
    }

    /// K.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level_index(&self, tag: &str) -> Option<usize> {
        self.levels.iter().position(|l| l.tag == tag)
    }
}

/// A specimen record of the taxonomy manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Specimen {
    pub id: String,
    pub lineage: Lineage,
}

/// Validated set of specimens plus the matching default attribute schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    pub specimens: Vec<Specimen>,
    pub schema: AttributeSchema,
}

impl Taxonomy {
    /// Distinct taxon names at `rank`, in first-seen order.
    pub fn names_at(&self, rank: Rank) -> Vec<String> {
        distinct_names(self.specimens.iter().map(|s| &s.lineage), rank)
    }
}

pub fn distinct_names<'a>(
    lineages: impl IntoIterator<Item = &'a Lineage>,
    rank: Rank,
) -> Vec<String> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for l in lineages {
        let name = l.taxon(rank);
        if seen.insert(normalize_name(name), ()).is_none() {
            out.push(name.trim().to_string());
        }
    }
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecimenRecord {
    id: String,
    class: Option<String>,
    order: Option<String>,
    family: Option<String>,
    genus: Option<String>,
    species: Option<String>,
    #[serde(rename = "type")]
    type_label: Option<String>,
    individual: Option<String>,
}

/// Parses a JSONL taxonomy manifest and checks tree consistency.
pub fn load_taxonomy(manifest: &str) -> Result<Taxonomy, TaxonomyError> {
    let mut specimens = Vec::new();
    let mut kind: Option<HierarchyKind> = None;
    for (idx, line) in manifest.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SpecimenRecord = serde_json::from_str(line).map_err(|e| TaxonomyError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        let record_kind = if rec.type_label.is_some() || rec.individual.is_some() {
            HierarchyKind::Identity
        } else {
            HierarchyKind::Taxonomy
        };
        if let Some(k) = kind {
            if k != record_kind {
                return Err(TaxonomyError::Parse {
                    line: line_no,
                    reason: "manifest mixes taxonomy and identity records".into(),
                });
            }
        }
        kind = Some(record_kind);
        let missing = |field: &str| TaxonomyError::Parse {
            line: line_no,
            reason: format!("missing field {field:?}"),
        };
        let lineage = match record_kind {
            HierarchyKind::Taxonomy => {
                let take = |v: Option<String>, f: &str| v.ok_or_else(|| missing(f));
                let taxa = vec![
                    take(rec.class, "class")?,
                    take(rec.order, "order")?,
                    take(rec.family, "family")?,
                    take(rec.genus, "genus")?,
                    take(rec.species, "species")?,
                ];
                Lineage::from_parts(HierarchyKind::Taxonomy, taxa, None)
            }
            HierarchyKind::Identity => {
                if rec.class.is_some()
                    || rec.order.is_some()
                    || rec.family.is_some()
                    || rec.genus.is_some()
                    || rec.species.is_some()
                {
                    return Err(TaxonomyError::Parse {
                        line: line_no,
                        reason: "identity record carries taxonomy fields".into(),
                    });
                }
                let t = rec.type_label.ok_or_else(|| missing("type"))?;
                let ind = rec.individual.ok_or_else(|| missing("individual"))?;
                Lineage::from_parts(HierarchyKind::Identity, vec![t], Some(ind))
            }
        }
        .map_err(|e| TaxonomyError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        specimens.push(Specimen {
            id: rec.id,
            lineage,
        });
    }
    let kind = kind.unwrap_or(HierarchyKind::Taxonomy);
    check_consistency(specimens.iter().map(|s| &s.lineage))?;
    Ok(Taxonomy {
        specimens,
        schema: AttributeSchema::for_kind(kind, AttributeMode::Concrete),
    })
}

/// Every taxon has exactly one parent; every individual has exactly one type.
pub fn check_consistency<'a>(
    lineages: impl IntoIterator<Item = &'a Lineage>,
) -> Result<(), TaxonomyError> {
    // (rank ordinal, normalized child) -> (normalized parent, display parent)
    let mut parents: BTreeMap<(usize, String), (String, String)> = BTreeMap::new();
    let mut types: BTreeMap<String, (String, String)> = BTreeMap::new();
    for l in lineages {
        let ranks = l.kind().ranks();
        for w in ranks.windows(2) {
            let (parent, child) = (w[0], w[1]);
            let key = (child.ordinal, normalize_name(l.taxon(child)));
            let p = normalize_name(l.taxon(parent));
            match parents.get(&key) {
                Some((existing, shown)) if *existing != p => {
                    return Err(TaxonomyError::Consistency(format!(
                        "{} {:?} appears under {} {:?} and {:?}",
                        child.name,
                        l.taxon(child).trim(),
                        parent.name,
                        shown,
                        l.taxon(parent).trim()
                    )));
                }
                Some(_) => {}
                None => {
                    parents.insert(key, (p, l.taxon(parent).trim().to_string()));
                }
            }
        }
        if let Some(id) = l.identity_id() {
            let t = normalize_name(l.taxon(TYPE));
            match types.get(&normalize_name(id)) {
                Some((existing, shown)) if *existing != t => {
                    return Err(TaxonomyError::Consistency(format!(
                        "individual {:?} recorded as both {:?} and {:?}",
                        id,
                        shown,
                        l.taxon(TYPE)
                    )));
                }
                Some(_) => {}
                None => {
                    types.insert(normalize_name(id), (t, l.taxon(TYPE).to_string()));
                }
            }
        }
    }
    Ok(())
}
