//! Seeded synthetic worlds: taxonomy trees, specimen features, and
//! stratified verification pairs.
//!
//! A taxon at every rank owns a Gaussian latent vector scaled by that rank's
//! magnitude. A species embedding is the sum of its ancestors' vectors and a
//! specimen adds observation noise, so pairs that share finer ranks sit
//! closer together. Identity worlds replace the tree with a type vector per
//! age-sex class plus an individual vector.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamRoot;
use crate::taxonomy::{
    check_consistency, stratum_of, HierarchyKind, Lineage, Stratum, TaxonomyError,
    DEFAULT_IDENTITY_TYPES, TAXONOMY_RANKS,
};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("quota for {stratum} is {requested} pairs but the world only offers {available}")]
    Quota {
        stratum: Stratum,
        requested: usize,
        available: usize,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub mode: HierarchyKind,
    pub classes: usize,
    pub orders_per_class: usize,
    pub families_per_order: usize,
    pub genera_per_family: usize,
    pub species_per_genus: usize,
    pub specimens_per_species: usize,
    pub feature_dim: usize,
    /// Per-dimension standard deviation of the latent vector at class, order,
    /// family, genus and species rank.
    pub rank_magnitudes: [f64; 5],
    pub noise_scale: f64,
    /// Per-dimension scale of the random offset added to the shared
    /// confounder of visual pairs.
    pub visual_magnitude: f64,
    /// Fraction of each visual image replaced by the shared confounder.
    pub visual_fraction: f64,
    pub individuals: usize,
    pub images_per_individual: usize,
    pub type_magnitude: f64,
    pub individual_magnitude: f64,
    pub type_labels: Vec<String>,
    pub split_fractions: [f64; 3],
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            mode: HierarchyKind::Taxonomy,
            classes: 1,
            orders_per_class: 3,
            families_per_order: 3,
            genera_per_family: 2,
            species_per_genus: 3,
            specimens_per_species: 8,
            feature_dim: 32,
            rank_magnitudes: [4.0, 2.0, 1.0, 0.5, 0.25],
            noise_scale: 0.25,
            visual_magnitude: 0.0,
            visual_fraction: 0.9,
            individuals: 60,
            images_per_individual: 10,
            type_magnitude: 1.0,
            individual_magnitude: 0.5,
            type_labels: DEFAULT_IDENTITY_TYPES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            split_fractions: [0.70, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn identity() -> Self {
        Self {
            mode: HierarchyKind::Identity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let counts = [
            ("classes", self.classes),
            ("orders_per_class", self.orders_per_class),
            ("families_per_order", self.families_per_order),
            ("genera_per_family", self.genera_per_family),
            ("species_per_genus", self.species_per_genus),
            ("specimens_per_species", self.specimens_per_species),
            ("feature_dim", self.feature_dim),
            ("individuals", self.individuals),
            ("images_per_individual", self.images_per_individual),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(GenError::Config(format!("{name} must be at least 1")));
            }
        }
        let mags = self.rank_magnitudes.iter().chain([
            &self.noise_scale,
            &self.visual_magnitude,
            &self.type_magnitude,
            &self.individual_magnitude,
        ]);
        for m in mags {
            if !(m.is_finite() && *m >= 0.0) {
                return Err(GenError::Config(format!(
                    "magnitude {m} must be finite and >= 0"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.visual_fraction) {
            return Err(GenError::Config(
                "visual_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.type_labels.is_empty() {
            return Err(GenError::Config("type_labels must not be empty".into()));
        }
        let total: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(GenError::Config(
                "split_fractions must be non-negative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// One observed specimen (taxonomy mode) or image (identity mode).
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpecimen {
    pub id: String,
    pub lineage: Lineage,
    /// Global node index per rank; identity mode stores `[type, individual]`.
    pub path: Vec<usize>,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub specimens: Vec<WorldSpecimen>,
}

const SYLLABLES: [&str; 16] = [
    "ca", "lo", "mi", "ra", "te", "nu", "si", "po", "ve", "du", "ga", "ki", "ba", "fe", "zo", "the",
];

fn stem(i: usize) -> String {
    let mut s = String::new();
    let mut x = i;
    for _ in 0..3 {
        s.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    if x > 0 {
        s.push_str(&x.to_string());
    }
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Deterministic pseudo-Latin name for the `i`-th taxon of a rank.
pub fn taxon_name(rank_ordinal: usize, i: usize) -> String {
    let base = stem(i);
    match rank_ordinal {
        0 => capitalize(&format!("{base}ia")),
        1 => capitalize(&format!("{base}iformes")),
        2 => capitalize(&format!("{base}idae")),
        3 => capitalize(&format!("{base}us")),
        _ => format!("{base}ensis"),
    }
}

fn gaussian_vector(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Builds the taxonomy (or identity population) and every specimen's features.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, GenError> {
    cfg.validate()?;
    let root = StreamRoot::new(cfg.seed);
    let dim = cfg.feature_dim;
    let mut specimens = Vec::new();
    match cfg.mode {
        HierarchyKind::Taxonomy => {
            let fan = [
                cfg.classes,
                cfg.orders_per_class,
                cfg.families_per_order,
                cfg.genera_per_family,
                cfg.species_per_genus,
            ];
            let mut vectors: Vec<Vec<Vec<f64>>> = Vec::new();
            let mut nodes_at = 1usize;
            for (r, f) in fan.iter().enumerate() {
                nodes_at *= f;
                vectors.push(
                    (0..nodes_at)
                        .map(|i| {
                            gaussian_vector(
                                &mut root.stream("taxon", &[r as u64, i as u64]),
                                dim,
                                cfg.rank_magnitudes[r],
                            )
                        })
                        .collect(),
                );
            }
            let n_species = nodes_at;
            for sp in 0..n_species {
                let mut path = vec![0usize; 5];
                let mut x = sp;
                for r in (0..5).rev() {
                    path[r] = x;
                    if r > 0 {
                        x /= fan[r];
                    }
                }
                let names: Vec<String> = path
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| taxon_name(r, i))
                    .collect();
                let lineage = Lineage::from_parts(HierarchyKind::Taxonomy, names, None)
                    .expect("generated names");
                let mut embedding = vec![0.0; dim];
                for (r, &node) in path.iter().enumerate() {
                    for (e, v) in embedding.iter_mut().zip(&vectors[r][node]) {
                        *e += v;
                    }
                }
                for k in 0..cfg.specimens_per_species {
                    let noise = gaussian_vector(
                        &mut root.stream("specimen", &[sp as u64, k as u64]),
                        dim,
                        cfg.noise_scale,
                    );
                    let features = embedding.iter().zip(&noise).map(|(e, n)| e + n).collect();
                    specimens.push(WorldSpecimen {
                        id: format!("s{:05}-{:02}", sp, k),
                        lineage: lineage.clone(),
                        path: path.clone(),
                        features,
                    });
                }
            }
        }
        HierarchyKind::Identity => {
            let type_vectors: Vec<Vec<f64>> = (0..cfg.type_labels.len())
                .map(|t| {
                    gaussian_vector(
                        &mut root.stream("type", &[t as u64]),
                        dim,
                        cfg.type_magnitude,
                    )
                })
                .collect();
            for ind in 0..cfg.individuals {
                let t = root
                    .stream("individual-type", &[ind as u64])
                    .gen_range(0..cfg.type_labels.len());
                let own = gaussian_vector(
                    &mut root.stream("individual", &[ind as u64]),
                    dim,
                    cfg.individual_magnitude,
                );
                let name = format!("ind{:04}", ind);
                let lineage =
                    Lineage::identity(&cfg.type_labels[t], &name).expect("generated identity");
                for k in 0..cfg.images_per_individual {
                    let noise = gaussian_vector(
                        &mut root.stream("image", &[ind as u64, k as u64]),
                        dim,
                        cfg.noise_scale,
                    );
                    let features = (0..dim)
                        .map(|d| type_vectors[t][d] + own[d] + noise[d])
                        .collect();
                    specimens.push(WorldSpecimen {
                        id: format!("{name}-{:02}", k),
                        lineage: lineage.clone(),
                        path: vec![t, ind],
                        features,
                    });
                }
            }
        }
    }
    check_consistency(specimens.iter().map(|s| &s.lineage))
        .map_err(|e| GenError::Config(e.to_string()))?;
    Ok(World {
        config: cfg.clone(),
        specimens,
    })
}

/// A verification pair with its stand-in image features.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub id: String,
    pub features_a: Vec<f64>,
    pub features_b: Vec<f64>,
    pub lineage_a: Lineage,
    pub lineage_b: Lineage,
    pub label: u8,
    pub stratum: Stratum,
    pub split: Split,
    pub visual: bool,
}

pub type Quotas = BTreeMap<Stratum, usize>;

/// Label-balanced quotas: half same-species pairs, the rest spread evenly
/// over the five negative strata.
pub fn default_quotas(kind: HierarchyKind, total: usize) -> Quotas {
    match kind {
        HierarchyKind::Taxonomy => {
            let neg = total / 2 / 5;
            let mut q: Quotas = Stratum::TAXONOMY_COLUMNS
                .iter()
                .map(|&s| (s, neg))
                .collect();
            q.insert(Stratum::SameSpecies, total - 5 * neg);
            q
        }
        HierarchyKind::Identity => {
            let half = total / 2;
            [
                (Stratum::SameIndividual, total - half),
                (Stratum::DifferentIndividual, half),
            ]
            .into_iter()
            .collect()
        }
    }
}

fn common_depth(a: &[usize], b: &[usize]) -> Option<usize> {
    let mut depth = None;
    for (r, (x, y)) in a.iter().zip(b).enumerate() {
        if x == y {
            depth = Some(r);
        } else {
            break;
        }
    }
    depth
}

fn split_counts(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let train = (n as f64 * fractions[0]).round() as usize;
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    [train, val, n - train - val]
}

fn stratum_index(s: Stratum) -> u64 {
    s as u64
}

/// Draws pairs meeting `quotas` exactly and assigns train/val/test splits.
pub fn sample_pairs(world: &World, quotas: &Quotas) -> Result<Vec<PairSample>, GenError> {
    let cfg = &world.config;
    let root = StreamRoot::new(cfg.seed);
    let mut out = Vec::new();
    match cfg.mode {
        HierarchyKind::Taxonomy => {
            for s in quotas.keys() {
                if !Stratum::TAXONOMY_COLUMNS.contains(s) {
                    return Err(GenError::Config(format!(
                        "stratum {s} is not a taxonomy stratum"
                    )));
                }
            }
            let n = world.specimens.len();
            // Candidate pools keyed by common depth; None = no shared rank.
            let mut pools: BTreeMap<Option<usize>, Vec<(usize, usize)>> = BTreeMap::new();
            for i in 0..n {
                for j in i + 1..n {
                    let d = common_depth(&world.specimens[i].path, &world.specimens[j].path);
                    pools.entry(d).or_default().push((i, j));
                }
            }
            let mut used: HashSet<(usize, usize)> = HashSet::new();
            let order = [
                Stratum::SameSpecies,
                Stratum::SameGenus,
                Stratum::SameFamily,
                Stratum::SameOrder,
                Stratum::SameClass,
                Stratum::Visual,
            ];
            let mut seq = 0u64;
            for stratum in order {
                let want = quotas.get(&stratum).copied().unwrap_or(0);
                if want == 0 {
                    continue;
                }
                let mut candidates: Vec<(usize, usize)> = match stratum {
                    Stratum::SameSpecies => pools.get(&Some(4)).cloned().unwrap_or_default(),
                    Stratum::SameGenus => pools.get(&Some(3)).cloned().unwrap_or_default(),
                    Stratum::SameFamily => pools.get(&Some(2)).cloned().unwrap_or_default(),
                    Stratum::SameOrder => pools.get(&Some(1)).cloned().unwrap_or_default(),
                    Stratum::SameClass => pools.get(&Some(0)).cloned().unwrap_or_default(),
                    _ => [None, Some(0), Some(1)]
                        .iter()
                        .flat_map(|k| pools.get(k).cloned().unwrap_or_default())
                        .collect(),
                };
                candidates.retain(|p| !used.contains(p));
                if candidates.len() < want {
                    return Err(GenError::Quota {
                        stratum,
                        requested: want,
                        available: candidates.len(),
                    });
                }
                let mut rng = root.stream("pairs", &[stratum_index(stratum)]);
                candidates.shuffle(&mut rng);
                candidates.truncate(want);
                let counts = split_counts(want, &cfg.split_fractions);
                for (k, &(i, j)) in candidates.iter().enumerate() {
                    used.insert((i, j));
                    let (i, j) = if rng.gen::<bool>() { (j, i) } else { (i, j) };
                    let split = if k < counts[0] {
                        Split::Train
                    } else if k < counts[0] + counts[1] {
                        Split::Val
                    } else {
                        Split::Test
                    };
                    let (a, b) = (&world.specimens[i], &world.specimens[j]);
                    let visual = stratum == Stratum::Visual;
                    let (fa, fb) = if visual {
                        // Both images are pulled toward one shared point: the
                        // pair midpoint plus a random offset.
                        let offset = gaussian_vector(
                            &mut root.stream("confounder", &[seq]),
                            cfg.feature_dim,
                            cfg.visual_magnitude,
                        );
                        let shared: Vec<f64> = (0..cfg.feature_dim)
                            .map(|d| 0.5 * (a.features[d] + b.features[d]) + offset[d])
                            .collect();
                        let w = cfg.visual_fraction;
                        let blend = |f: &[f64]| {
                            f.iter()
                                .zip(&shared)
                                .map(|(x, c)| (1.0 - w) * x + w * c)
                                .collect::<Vec<_>>()
                        };
                        (blend(&a.features), blend(&b.features))
                    } else {
                        (a.features.clone(), b.features.clone())
                    };
                    out.push(PairSample {
                        id: format!("p{:06}", seq),
                        features_a: fa,
                        features_b: fb,
                        lineage_a: a.lineage.clone(),
                        lineage_b: b.lineage.clone(),
                        label: stratum.label(),
                        stratum,
                        split,
                        visual,
                    });
                    seq += 1;
                }
            }
        }
        HierarchyKind::Identity => {
            for s in quotas.keys() {
                if !Stratum::IDENTITY_COLUMNS.contains(s) {
                    return Err(GenError::Config(format!(
                        "stratum {s} is not an identity stratum"
                    )));
                }
            }
            let mut individuals: Vec<usize> = (0..cfg.individuals).collect();
            individuals.shuffle(&mut root.stream("individual-split", &[]));
            let ind_counts = split_counts(cfg.individuals, &cfg.split_fractions);
            let mut split_of = vec![Split::Train; cfg.individuals];
            for (k, &ind) in individuals.iter().enumerate() {
                split_of[ind] = if k < ind_counts[0] {
                    Split::Train
                } else if k < ind_counts[0] + ind_counts[1] {
                    Split::Val
                } else {
                    Split::Test
                };
            }
            let mut seq = 0u64;
            for (si, split) in Split::ALL.iter().enumerate() {
                let members: Vec<usize> = (0..world.specimens.len())
                    .filter(|&i| split_of[world.specimens[i].path[1]] == *split)
                    .collect();
                for stratum in Stratum::IDENTITY_COLUMNS {
                    let total = quotas.get(&stratum).copied().unwrap_or(0);
                    let want = split_counts(total, &cfg.split_fractions)[si];
                    if want == 0 {
                        continue;
                    }
                    let same = stratum == Stratum::SameIndividual;
                    let mut candidates = Vec::new();
                    for (x, &i) in members.iter().enumerate() {
                        for &j in &members[x + 1..] {
                            if (world.specimens[i].path[1] == world.specimens[j].path[1]) == same {
                                candidates.push((i, j));
                            }
                        }
                    }
                    if candidates.len() < want {
                        return Err(GenError::Quota {
                            stratum,
                            requested: want,
                            available: candidates.len(),
                        });
                    }
                    let mut rng =
                        root.stream("identity-pairs", &[si as u64, stratum_index(stratum)]);
                    candidates.shuffle(&mut rng);
                    for &(i, j) in candidates.iter().take(want) {
                        let (i, j) = if rng.gen::<bool>() { (j, i) } else { (i, j) };
                        let (a, b) = (&world.specimens[i], &world.specimens[j]);
                        out.push(PairSample {
                            id: format!("p{:06}", seq),
                            features_a: a.features.clone(),
                            features_b: b.features.clone(),
                            lineage_a: a.lineage.clone(),
                            lineage_b: b.lineage.clone(),
                            label: stratum.label(),
                            stratum,
                            split: *split,
                            visual: false,
                        });
                        seq += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineageRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    order: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    genus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    species: Option<String>,
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    type_label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    individual: Option<String>,
}

impl LineageRecord {
    fn from_lineage(l: &Lineage) -> Self {
        match l.kind() {
            HierarchyKind::Taxonomy => {
                let t = |i: usize| Some(l.taxa()[i].clone());
                Self {
                    class: t(0),
                    order: t(1),
                    family: t(2),
                    genus: t(3),
                    species: t(4),
                    type_label: None,
                    individual: None,
                }
            }
            HierarchyKind::Identity => Self {
                class: None,
                order: None,
                family: None,
                genus: None,
                species: None,
                type_label: Some(l.taxa()[0].clone()),
                individual: l.identity_id().map(String::from),
            },
        }
    }

    fn into_lineage(self) -> Result<Lineage, TaxonomyError> {
        if self.type_label.is_some() || self.individual.is_some() {
            let t = self
                .type_label
                .ok_or_else(|| TaxonomyError::Schema("missing type".into()))?;
            let ind = self
                .individual
                .ok_or_else(|| TaxonomyError::Schema("missing individual".into()))?;
            return Lineage::identity(&t, &ind);
        }
        let fields = [
            self.class,
            self.order,
            self.family,
            self.genus,
            self.species,
        ];
        let mut taxa = Vec::with_capacity(5);
        for (rank, f) in TAXONOMY_RANKS.iter().zip(fields) {
            taxa.push(f.ok_or_else(|| TaxonomyError::Schema(format!("missing {}", rank.name)))?);
        }
        Lineage::from_parts(HierarchyKind::Taxonomy, taxa, None)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    id: String,
    features_a: Vec<f64>,
    features_b: Vec<f64>,
    lineage_a: LineageRecord,
    lineage_b: LineageRecord,
    label: u8,
    stratum: Stratum,
    split: Split,
    visual: bool,
}

pub fn write_manifest<W: Write>(pairs: &[PairSample], mut out: W) -> Result<(), GenError> {
    for p in pairs {
        let rec = PairRecord {
            id: p.id.clone(),
            features_a: p.features_a.clone(),
            features_b: p.features_b.clone(),
            lineage_a: LineageRecord::from_lineage(&p.lineage_a),
            lineage_b: LineageRecord::from_lineage(&p.lineage_b),
            label: p.label,
            stratum: p.stratum,
            split: p.split,
            visual: p.visual,
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn manifest_string(pairs: &[PairSample]) -> String {
    let mut buf = Vec::new();
    write_manifest(pairs, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<Vec<PairSample>, GenError> {
    let mut pairs = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| GenError::Manifest {
            line: line_no,
            reason,
        };
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let lineage_a = rec
            .lineage_a
            .into_lineage()
            .map_err(|e| bad(e.to_string()))?;
        let lineage_b = rec
            .lineage_b
            .into_lineage()
            .map_err(|e| bad(e.to_string()))?;
        let stratum =
            stratum_of(&lineage_a, &lineage_b, rec.visual).map_err(|e| bad(e.to_string()))?;
        if stratum != rec.stratum {
            return Err(bad(format!(
                "stratum {} does not match lineages ({stratum})",
                rec.stratum
            )));
        }
        if rec.label != stratum.label() {
            return Err(bad(format!(
                "label {} inconsistent with stratum {stratum}",
                rec.label
            )));
        }
        if rec.features_a.len() != rec.features_b.len() || rec.features_a.is_empty() {
            return Err(bad(
                "feature vectors must be non-empty and of equal length".into()
            ));
        }
        if !rec
            .features_a
            .iter()
            .chain(&rec.features_b)
            .all(|x| x.is_finite())
        {
            return Err(bad("non-finite feature".into()));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(bad(format!("duplicate pair id {:?}", rec.id)));
        }
        pairs.push(PairSample {
            id: rec.id,
            features_a: rec.features_a,
            features_b: rec.features_b,
            lineage_a,
            lineage_b,
            label: rec.label,
            stratum,
            split: rec.split,
            visual: rec.visual,
        });
    }
    Ok(pairs)
}

/// Taxonomy manifest lines (one per specimen) for a generated world.
pub fn specimen_manifest(world: &World) -> String {
    #[derive(Serialize)]
    struct Rec<'a> {
        id: &'a str,
        #[serde(flatten)]
        lineage: LineageRecord,
    }
    let mut s = String::new();
    for sp in &world.specimens {
        let rec = Rec {
            id: &sp.id,
            lineage: LineageRecord::from_lineage(&sp.lineage),
        };
        s.push_str(&serde_json::to_string(&rec).expect("serializable"));
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum: Stratum,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub total: usize,
    pub mean_distance: f64,
    pub median_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub mode: HierarchyKind,
    pub specimens: usize,
    pub pairs: usize,
    pub strata: Vec<StratumSummary>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn summarize(world: &World, pairs: &[PairSample]) -> WorldSummary {
    let mut strata = Vec::new();
    for &stratum in Stratum::columns(world.config.mode) {
        let members: Vec<&PairSample> = pairs.iter().filter(|p| p.stratum == stratum).collect();
        if members.is_empty() {
            continue;
        }
        let count = |s: Split| members.iter().filter(|p| p.split == s).count();
        let mut dists: Vec<f64> = members
            .iter()
            .map(|p| euclidean(&p.features_a, &p.features_b))
            .collect();
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        strata.push(StratumSummary {
            stratum,
            train: count(Split::Train),
            val: count(Split::Val),
            test: count(Split::Test),
            total: members.len(),
            mean_distance: mean,
            median_distance: median(&mut dists),
        });
    }
    WorldSummary {
        mode: world.config.mode,
        specimens: world.specimens.len(),
        pairs: pairs.len(),
        strata,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{load_taxonomy, lowest_common_rank, ORDER};

    fn small_world() -> World {
        generate_world(&WorldConfig {
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn names_are_unique_per_rank() {
        let names: HashSet<String> = (0..500).map(|i| taxon_name(3, i)).collect();
        assert_eq!(names.len(), 500);
    }

    #[test]
    fn zero_noise_same_species_identical() {
        let w = generate_world(&WorldConfig {
            noise_scale: 0.0,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(w.specimens[0].features, w.specimens[1].features);
        assert_eq!(w.specimens[0].lineage, w.specimens[1].lineage);
    }

    #[test]
    fn world_is_deterministic() {
        assert_eq!(small_world(), small_world());
        let other = generate_world(&WorldConfig {
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(
            small_world().specimens[0].features,
            other.specimens[0].features
        );
    }

    #[test]
    fn specimen_manifest_loads() {
        let w = small_world();
        let t = load_taxonomy(&specimen_manifest(&w)).unwrap();
        assert_eq!(t.specimens.len(), w.specimens.len());
    }

    #[test]
    fn exact_quota_counts() {
        let w = small_world();
        let q: Quotas = [(Stratum::SameSpecies, 10), (Stratum::SameGenus, 10)]
            .into_iter()
            .collect();
        let pairs = sample_pairs(&w, &q).unwrap();
        assert_eq!(pairs.len(), 20);
        assert_eq!(
            pairs
                .iter()
                .filter(|p| p.stratum == Stratum::SameSpecies)
                .count(),
            10
        );
        assert_eq!(
            pairs
                .iter()
                .filter(|p| p.stratum == Stratum::SameGenus)
                .count(),
            10
        );
        for p in &pairs {
            assert_eq!(
                stratum_of(&p.lineage_a, &p.lineage_b, p.visual).unwrap(),
                p.stratum
            );
            assert_eq!(p.label, p.stratum.label());
        }
    }

    #[test]
    fn unsatisfiable_quota_names_stratum() {
        let w = small_world();
        let q: Quotas = [(Stratum::SameSpecies, 1_000_000)].into_iter().collect();
        let e = sample_pairs(&w, &q).unwrap_err();
        assert!(matches!(
            e,
            GenError::Quota {
                stratum: Stratum::SameSpecies,
                ..
            }
        ));
        assert!(e.to_string().contains("SameSpecies"));
    }

    #[test]
    fn visual_pairs_are_distant_but_close() {
        let w = small_world();
        let q: Quotas = [(Stratum::SameFamily, 400), (Stratum::Visual, 400)]
            .into_iter()
            .collect();
        let pairs = sample_pairs(&w, &q).unwrap();
        let mut fam: Vec<f64> = pairs
            .iter()
            .filter(|p| p.stratum == Stratum::SameFamily)
            .map(|p| euclidean(&p.features_a, &p.features_b))
            .collect();
        let fam_median = median(&mut fam);
        for p in pairs.iter().filter(|p| p.visual) {
            let common = lowest_common_rank(&p.lineage_a, &p.lineage_b).unwrap();
            assert!(common.is_none_or(|r| r.ordinal <= ORDER.ordinal));
            assert!(euclidean(&p.features_a, &p.features_b) < fam_median);
        }
    }

    #[test]
    fn taxonomy_split_is_70_15_15() {
        let w = small_world();
        let q: Quotas = [(Stratum::SameSpecies, 100), (Stratum::SameClass, 100)]
            .into_iter()
            .collect();
        let pairs = sample_pairs(&w, &q).unwrap();
        let n = |s| pairs.iter().filter(|p| p.split == s).count();
        assert_eq!(
            (n(Split::Train), n(Split::Val), n(Split::Test)),
            (140, 30, 30)
        );
    }

    #[test]
    fn identity_splits_disjoint() {
        let w = generate_world(&WorldConfig {
            seed: 5,
            ..WorldConfig::identity()
        })
        .unwrap();
        let pairs = sample_pairs(&w, &default_quotas(HierarchyKind::Identity, 600)).unwrap();
        let ids = |s: Split| -> HashSet<String> {
            pairs
                .iter()
                .filter(|p| p.split == s)
                .flat_map(|p| {
                    [
                        p.lineage_a.identity_id().unwrap().to_string(),
                        p.lineage_b.identity_id().unwrap().to_string(),
                    ]
                })
                .collect()
        };
        assert!(ids(Split::Train).is_disjoint(&ids(Split::Test)));
        assert!(ids(Split::Train).is_disjoint(&ids(Split::Val)));
        assert_eq!(pairs.len(), 600);
    }

    #[test]
    fn manifest_round_trip_and_line_count() {
        let w = small_world();
        let q: Quotas = [
            (Stratum::SameSpecies, 1),
            (Stratum::SameGenus, 1),
            (Stratum::Visual, 1),
        ]
        .into_iter()
        .collect();
        let pairs = sample_pairs(&w, &q).unwrap();
        let text = manifest_string(&pairs);
        assert_eq!(text.lines().count(), 3);
        let back = read_manifest(text.as_bytes()).unwrap();
        assert_eq!(back, pairs);
        assert_eq!(manifest_string(&back), text);
    }

    #[test]
    fn manifest_missing_label_names_line() {
        let w = small_world();
        let q: Quotas = [(Stratum::SameSpecies, 2)].into_iter().collect();
        let text = manifest_string(&sample_pairs(&w, &q).unwrap());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = lines[1].replace("\"label\":1,", "");
        let e = read_manifest(lines.join("\n").as_bytes()).unwrap_err();
        match e {
            GenError::Manifest { line, reason } => {
                assert_eq!(line, 2);
                assert!(reason.contains("label"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
