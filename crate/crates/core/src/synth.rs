//! Procedural jewelry corpus: a fixed catalog of accessory models, a
//! renderer that turns a [`JewelSpec`] into an image, the three-level
//! caption grammar, stratified splitting and on-disk corpus files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{derive_seed, expand_dataset, AugmentParams, Image};
use crate::error::{Error, Result};
use crate::vocab::{Vocab, DEFAULT_MAX_LEN};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.75, 0.15, 0.10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessoryType {
    Necklace,
    Ring,
    Earring,
    Bracelet,
}

impl AccessoryType {
    pub const ALL: [AccessoryType; 4] = [Self::Necklace, Self::Ring, Self::Earring, Self::Bracelet];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn word(self) -> &'static str {
        match self {
            Self::Necklace => "necklace",
            Self::Ring => "ring",
            Self::Earring => "earring",
            Self::Bracelet => "bracelet",
        }
    }

    /// Row label used in evaluation tables.
    pub fn plural_label(self) -> &'static str {
        match self {
            Self::Necklace => "Necklaces",
            Self::Ring => "Rings",
            Self::Earring => "Earrings",
            Self::Bracelet => "Bracelets",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.word() == w)
    }
}

impl fmt::Display for AccessoryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Material {
    #[serde(rename = "yellow gold")]
    YellowGold,
    #[serde(rename = "white gold")]
    WhiteGold,
    #[serde(rename = "silver")]
    Silver,
    #[serde(rename = "rose gold")]
    RoseGold,
}

impl Material {
    pub const ALL: [Material; 4] = [Self::YellowGold, Self::WhiteGold, Self::Silver, Self::RoseGold];

    pub fn words(self) -> &'static str {
        match self {
            Self::YellowGold => "yellow gold",
            Self::WhiteGold => "white gold",
            Self::Silver => "silver",
            Self::RoseGold => "rose gold",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            Self::YellowGold => [0.55, 0.42, 0.10],
            Self::WhiteGold => [0.52, 0.52, 0.46],
            Self::Silver => [0.34, 0.40, 0.52],
            Self::RoseGold => [0.55, 0.28, 0.26],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stone {
    #[serde(rename = "diamond")]
    Diamond,
    #[serde(rename = "emerald")]
    Emerald,
    #[serde(rename = "ruby")]
    Ruby,
    #[serde(rename = "sapphire")]
    Sapphire,
    #[serde(rename = "oval stones")]
    OvalStones,
}

impl Stone {
    pub const ALL: [Stone; 5] = [Self::Diamond, Self::Emerald, Self::Ruby, Self::Sapphire, Self::OvalStones];

    pub fn words(self) -> &'static str {
        match self {
            Self::Diamond => "diamond",
            Self::Emerald => "emerald",
            Self::Ruby => "ruby",
            Self::Sapphire => "sapphire",
            Self::OvalStones => "oval stones",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            Self::Diamond => [0.78, 0.86, 0.92],
            Self::Emerald => [0.05, 0.52, 0.18],
            Self::Ruby => [0.62, 0.02, 0.12],
            Self::Sapphire => [0.06, 0.14, 0.62],
            Self::OvalStones => [0.46, 0.20, 0.56],
        }
    }
}

/// Metal color of pieces sold without a named material.
const PLAIN_METAL: [f64; 3] = [0.30, 0.30, 0.30];
const BACKGROUND: [f64; 3] = [0.10, 0.10, 0.12];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderParams {
    pub jitter_seed: u64,
}

/// Symbolic description of one accessory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JewelSpec {
    pub accessory_type: AccessoryType,
    pub model_name: String,
    pub material: Option<Material>,
    pub stone: Option<Stone>,
    pub render: RenderParams,
}

/// Shape parameters of a catalog model, in half-image units.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Silhouette {
    size: f64,
    thickness: f64,
    stones: usize,
    /// Type-specific variant switch (pendant shape, drop shape, gap width).
    style: u8,
}

struct CatalogEntry {
    name: &'static str,
    accessory: AccessoryType,
    silhouette: Silhouette,
    variants: &'static [(Option<Material>, Option<Stone>)],
}

const fn sil(size: f64, thickness: f64, stones: usize, style: u8) -> Silhouette {
    Silhouette {
        size,
        thickness,
        stones,
        style,
    }
}

use AccessoryType::{Bracelet, Earring, Necklace, Ring};
use Material::{RoseGold, Silver, WhiteGold, YellowGold};
use Stone::{Diamond, Emerald, OvalStones, Ruby, Sapphire};

/// The model catalog. `taurus` and `colette` share one silhouette and are
/// told apart only by metal color; `orion` comes with two stone colors.
static CATALOG: [CatalogEntry; 16] = [
    CatalogEntry { name: "skye", accessory: Ring, silhouette: sil(0.55, 0.12, 3, 0), variants: &[(Some(YellowGold), Some(OvalStones)), (Some(RoseGold), Some(OvalStones))] },
    CatalogEntry { name: "lyra", accessory: Ring, silhouette: sil(0.40, 0.10, 1, 0), variants: &[(Some(WhiteGold), Some(Diamond)), (Some(Silver), Some(Sapphire))] },
    CatalogEntry { name: "vega", accessory: Ring, silhouette: sil(0.62, 0.24, 0, 0), variants: &[(Some(Silver), None), (Some(YellowGold), None)] },
    CatalogEntry { name: "nova", accessory: Ring, silhouette: sil(0.36, 0.20, 2, 0), variants: &[(Some(RoseGold), Some(Ruby)), (Some(WhiteGold), Some(Emerald))] },
    CatalogEntry { name: "arayat", accessory: Necklace, silhouette: sil(0.30, 0.07, 1, 0), variants: &[(None, Some(Emerald)), (Some(YellowGold), Some(Emerald))] },
    CatalogEntry { name: "aurora", accessory: Necklace, silhouette: sil(0.16, 0.13, 1, 0), variants: &[(Some(Silver), Some(Diamond)), (Some(WhiteGold), Some(Diamond))] },
    CatalogEntry { name: "selene", accessory: Necklace, silhouette: sil(0.24, 0.08, 0, 1), variants: &[(Some(Silver), None), (Some(RoseGold), None)] },
    CatalogEntry { name: "iris", accessory: Necklace, silhouette: sil(0.26, 0.07, 3, 2), variants: &[(Some(YellowGold), Some(Sapphire)), (Some(WhiteGold), Some(Ruby))] },
    CatalogEntry { name: "taurus", accessory: Earring, silhouette: sil(0.24, 0.08, 1, 0), variants: &[(Some(WhiteGold), Some(Diamond))] },
    CatalogEntry { name: "colette", accessory: Earring, silhouette: sil(0.24, 0.08, 1, 0), variants: &[(None, Some(Diamond))] },
    CatalogEntry { name: "orion", accessory: Earring, silhouette: sil(0.40, 0.08, 1, 1), variants: &[(None, Some(Ruby)), (None, Some(Emerald))] },
    CatalogEntry { name: "luna", accessory: Earring, silhouette: sil(0.30, 0.09, 0, 2), variants: &[(Some(YellowGold), None), (Some(Silver), None), (Some(RoseGold), None)] },
    CatalogEntry { name: "atlas", accessory: Bracelet, silhouette: sil(0.70, 0.22, 0, 0), variants: &[(Some(Silver), None), (Some(YellowGold), None)] },
    CatalogEntry { name: "cleo", accessory: Bracelet, silhouette: sil(0.62, 0.14, 5, 0), variants: &[(Some(YellowGold), Some(Emerald)), (Some(RoseGold), Some(Diamond))] },
    CatalogEntry { name: "helia", accessory: Bracelet, silhouette: sil(0.52, 0.09, 3, 1), variants: &[(Some(WhiteGold), Some(Sapphire)), (Some(Silver), Some(Ruby))] },
    CatalogEntry { name: "maya", accessory: Bracelet, silhouette: sil(0.60, 0.18, 2, 2), variants: &[(Some(RoseGold), Some(OvalStones)), (Some(WhiteGold), None)] },
];

fn catalog_entry(name: &str) -> Option<&'static CatalogEntry> {
    CATALOG.iter().find(|e| e.name == name)
}

/// Model names of the catalog, in catalog order.
pub fn model_names() -> Vec<&'static str> {
    CATALOG.iter().map(|e| e.name).collect()
}

/// Every `(type, model, material, stone)` combination the catalog sells.
pub fn catalog_specs() -> Vec<JewelSpec> {
    CATALOG
        .iter()
        .flat_map(|e| {
            e.variants.iter().map(|&(material, stone)| JewelSpec {
                accessory_type: e.accessory,
                model_name: e.name.to_string(),
                material,
                stone,
                render: RenderParams { jitter_seed: 0 },
            })
        })
        .collect()
}

impl JewelSpec {
    /// Checks the model name against the catalog and its accessory type.
    pub fn validate(&self) -> Result<()> {
        let entry = catalog_entry(&self.model_name).ok_or_else(|| Error::UnknownKind {
            what: "model name",
            name: self.model_name.clone(),
        })?;
        if entry.accessory != self.accessory_type {
            return Err(Error::Config(format!(
                "model `{}` is a {}, not a {}",
                self.model_name, entry.accessory, self.accessory_type
            )));
        }
        if self.material.is_none() && self.stone.is_none() {
            return Err(Error::Config("a piece needs a material or a stone".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionLevel {
    Basic,
    Normal,
    Complete,
}

impl CaptionLevel {
    pub const ALL: [CaptionLevel; 3] = [Self::Basic, Self::Normal, Self::Complete];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Basic => "basic",
            Self::Normal => "normal",
            Self::Complete => "complete",
        }
    }
}

impl fmt::Display for CaptionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaptionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(Self::Basic),
            "normal" => Ok(Self::Normal),
            "complete" => Ok(Self::Complete),
            _ => Err(Error::UnknownKind {
                what: "caption level",
                name: s.to_string(),
            }),
        }
    }
}

/// Caption grammar (lowercase, no punctuation):
/// - basic: `<type>`
/// - normal: `<material> <stone> <type>`, either part optional
/// - complete: `<model> <material> and <stone> <type>`; `and` only joins
///   a material and a stone that are both present
pub fn caption_of(spec: &JewelSpec, level: CaptionLevel) -> String {
    let mut words: Vec<&str> = Vec::new();
    match level {
        CaptionLevel::Basic => {}
        CaptionLevel::Normal => {
            words.extend(spec.material.map(Material::words));
            words.extend(spec.stone.map(Stone::words));
        }
        CaptionLevel::Complete => {
            words.push(&spec.model_name);
            words.extend(spec.material.map(Material::words));
            if let Some(stone) = spec.stone {
                if spec.material.is_some() {
                    words.push("and");
                }
                words.push(stone.words());
            }
        }
    }
    words.push(spec.accessory_type.word());
    words.join(" ")
}

/// Inverse of the complete-level grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedCaption {
    pub accessory_type: AccessoryType,
    pub model_name: String,
    pub material: Option<Material>,
    pub stone: Option<Stone>,
}

pub fn parse_complete_caption(caption: &str) -> Option<ParsedCaption> {
    let words: Vec<&str> = caption.split(' ').collect();
    let (&model, rest) = words.split_first()?;
    let (&kind, mut middle) = rest.split_last()?;
    catalog_entry(model)?;
    let accessory_type = AccessoryType::from_word(kind)?;
    let take = |middle: &mut &[&str], phrase: &str| -> bool {
        let n = phrase.split(' ').count();
        if middle.len() >= n && middle[..n].join(" ") == phrase {
            *middle = &middle[n..];
            true
        } else {
            false
        }
    };
    let material = Material::ALL.into_iter().find(|m| take(&mut middle, m.words()));
    if material.is_some() && !middle.is_empty() && !take(&mut middle, "and") {
        return None;
    }
    let stone = Stone::ALL.into_iter().find(|s| take(&mut middle, s.words()));
    if !middle.is_empty() || (material.is_some() && words.contains(&"and") && stone.is_none()) {
        return None;
    }
    Some(ParsedCaption {
        accessory_type,
        model_name: model.to_string(),
        material,
        stone,
    })
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Clone, Copy, PartialEq)]
enum Layer {
    Metal,
    Stone,
}

struct Placement {
    cx: f64,
    cy: f64,
    scale: f64,
}

fn ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (du, dv) = ((u - cx) / rx, (v - cy) / ry);
    du * du + dv * dv <= 1.0
}

/// Which layer covers normalized point `(u, v)` (v grows downwards).
fn classify_point(entry: &CatalogEntry, p: &Placement, u: f64, v: f64, oval: bool) -> Option<Layer> {
    let s = entry.silhouette;
    let (u, v) = ((u - p.cx) / p.scale, (v - p.cy) / p.scale);
    let r = s.thickness * 0.85;
    let (srx, sry) = if oval { (r * 1.4, r * 0.75) } else { (r, r) };
    match entry.accessory {
        Ring => {
            let dist = (u * u + v * v).sqrt();
            for i in 0..s.stones {
                let a = -std::f64::consts::FRAC_PI_2 + (i as f64 - (s.stones as f64 - 1.0) / 2.0) * 0.5;
                let (sx, sy) = (s.size * a.cos(), s.size * a.sin());
                if ellipse(u, v, sx, sy, srx, sry) {
                    return Some(Layer::Stone);
                }
            }
            ((dist - s.size).abs() <= s.thickness / 2.0).then_some(Layer::Metal)
        }
        Bracelet => {
            let dist = (u * u + v * v).sqrt();
            let gap = [0.45, 0.75, 1.0][s.style as usize];
            // angle measured from straight down
            let from_bottom = u.atan2(v).abs();
            for i in 0..s.stones {
                let a = -std::f64::consts::FRAC_PI_2 + (i as f64 - (s.stones as f64 - 1.0) / 2.0) * 0.42;
                let (sx, sy) = (s.size * a.cos(), s.size * a.sin());
                if ellipse(u, v, sx, sy, srx * 0.8, sry * 0.8) {
                    return Some(Layer::Stone);
                }
            }
            ((dist - s.size).abs() <= s.thickness / 2.0 && from_bottom > gap).then_some(Layer::Metal)
        }
        Necklace => {
            // chain: parabola from (±0.8, -0.75) down to (0, 0.05)
            let (bottom, top, half) = (0.05, -0.75, 0.8);
            let k = (bottom - top) / (half * half);
            let pr = s.size;
            let pcy = bottom + pr * 0.9;
            let stone_r = pr * 0.55;
            match s.style {
                0 => {
                    if s.stones > 0 && ellipse(u, v, 0.0, pcy, stone_r, stone_r) {
                        return Some(Layer::Stone);
                    }
                    if ellipse(u, v, 0.0, pcy, pr, pr) {
                        return Some(Layer::Metal);
                    }
                }
                1 => {
                    // crescent: disc minus an offset disc
                    if ellipse(u, v, 0.0, pcy, pr, pr) && !ellipse(u, v, 0.0, pcy - pr * 0.45, pr * 0.8, pr * 0.8) {
                        return Some(Layer::Metal);
                    }
                }
                _ => {
                    // teardrop pendant with stones stacked vertically
                    for i in 0..s.stones {
                        let cy = pcy - pr * 0.35 + i as f64 * pr * 0.55;
                        if ellipse(u, v, 0.0, cy, pr * 0.22, pr * 0.22) {
                            return Some(Layer::Stone);
                        }
                    }
                    if ellipse(u, v, 0.0, pcy + pr * 0.2, pr * 0.6, pr * 1.3) {
                        return Some(Layer::Metal);
                    }
                }
            }
            if u.abs() <= half {
                let curve = bottom - k * (half * half - u * u);
                let slope = 2.0 * k * u;
                if (v - curve).abs() / (1.0 + slope * slope).sqrt() <= s.thickness / 2.0 {
                    return Some(Layer::Metal);
                }
            }
            None
        }
        Earring => {
            let t = s.thickness;
            // hook: upper half circle
            let (hx, hy, hr) = (0.0, -0.62, 0.14);
            let hd = ((u - hx).powi(2) + (v - hy).powi(2)).sqrt();
            if (hd - hr).abs() <= t / 2.0 && v <= hy + 0.02 {
                return Some(Layer::Metal);
            }
            let stem_end = -0.62 + 0.3;
            if u.abs() <= t / 2.0 && v >= hy && v <= stem_end {
                return Some(Layer::Metal);
            }
            match s.style {
                0 => {
                    let cy = stem_end + s.size;
                    if s.stones > 0 && ellipse(u, v, 0.0, cy, s.size * 0.6, s.size * 0.6) {
                        return Some(Layer::Stone);
                    }
                    ellipse(u, v, 0.0, cy, s.size, s.size).then_some(Layer::Metal)
                }
                1 => {
                    // long bar with the stone at its tip
                    let tip = stem_end + s.size * 2.0;
                    if s.stones > 0 && ellipse(u, v, 0.0, tip, 0.13, 0.13) {
                        return Some(Layer::Stone);
                    }
                    (u.abs() <= t && v >= stem_end && v <= tip).then_some(Layer::Metal)
                }
                _ => {
                    let cy = stem_end + s.size;
                    let d = (u * u + (v - cy).powi(2)).sqrt();
                    ((d - s.size).abs() <= t / 2.0).then_some(Layer::Metal)
                }
            }
        }
    }
}

/// Renders a spec at `size×size`. Identical specs give identical images;
/// material only changes the color of metal pixels.
pub fn render_jewel(spec: &JewelSpec, size: usize) -> Result<Image> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let entry = catalog_entry(&spec.model_name).expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.render.jitter_seed);
    let placement = Placement {
        cx: rng.gen_range(-0.06..=0.06),
        cy: rng.gen_range(-0.06..=0.06) + if entry.accessory == Ring { 0.05 } else { 0.0 },
        scale: rng.gen_range(0.94..=1.06),
    };
    let metal = spec.material.map_or(PLAIN_METAL, Material::color);
    let stone = spec.stone.map(Stone::color);
    let oval = spec.stone == Some(OvalStones);
    let mut img = Image::filled(size, size, BACKGROUND);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            match classify_point(entry, &placement, u, v, oval) {
                Some(Layer::Stone) => img.set(x, y, stone.unwrap_or(metal)),
                Some(Layer::Metal) => img.set(x, y, metal),
                None => {}
            }
        }
    }
    img.quantize();
    Ok(img)
}

pub fn background_color() -> [f64; 3] {
    let mut img = Image::filled(1, 1, BACKGROUND);
    img.quantize();
    img.get(0, 0)
}

// ---------------------------------------------------------------------------
// Samples and corpus

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Captions {
    pub basic: String,
    pub normal: String,
    pub complete: String,
}

impl Captions {
    pub fn of(spec: &JewelSpec) -> Self {
        Self {
            basic: caption_of(spec, CaptionLevel::Basic),
            normal: caption_of(spec, CaptionLevel::Normal),
            complete: caption_of(spec, CaptionLevel::Complete),
        }
    }

    pub fn get(&self, level: CaptionLevel) -> &str {
        match level {
            CaptionLevel::Basic => &self.basic,
            CaptionLevel::Normal => &self.normal,
            CaptionLevel::Complete => &self.complete,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Original,
    Augmented { source: String, chain: Vec<AugmentParams> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub spec: JewelSpec,
    pub captions: Captions,
    pub split: Split,
    pub provenance: Provenance,
}

impl Sample {
    /// Id of the original image this sample derives from.
    pub fn base_id(&self) -> &str {
        match &self.provenance {
            Provenance::Original => &self.id,
            Provenance::Augmented { source, .. } => source,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn of(samples: &[Sample]) -> Self {
        let mut c = Self::default();
        for s in samples {
            match s.split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_base: usize,
    pub seed: u64,
    pub multiplier: usize,
    pub image_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_base: 100,
            seed: 0,
            multiplier: 4,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub counts: SplitCounts,
    pub total: usize,
    /// Base (pre-augmentation) samples per accessory type.
    pub class_histogram: BTreeMap<AccessoryType, usize>,
    /// SHA-256 of the vocabulary built from the training captions.
    pub vocab_hash: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub manifest: CorpusManifest,
}

/// Assigns train/val/test per base image, stratified by accessory type.
///
/// Within each type the base images are shuffled and given evenly spaced
/// positions in `(0, 1)`; all bases are then ordered by position and cut
/// at the global split sizes. Each type's share of every split is thus
/// within one sample of proportional. Augmented copies inherit the split of
/// their base.
pub fn split_corpus(samples: &mut [Sample], fractions: (f64, f64, f64), seed: u64) -> Result<()> {
    let (ft, fv, fs) = fractions;
    if (ft + fv + fs - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut by_type: BTreeMap<AccessoryType, Vec<String>> = BTreeMap::new();
    for s in samples.iter() {
        if s.provenance == Provenance::Original {
            by_type.entry(s.spec.accessory_type).or_default().push(s.id.clone());
        }
    }
    if by_type.is_empty() {
        return Err(Error::Empty("base sample list"));
    }
    if let Some((t, ids)) = by_type.iter().find(|(_, ids)| ids.len() < 3) {
        return Err(Error::Config(format!("class {t} has only {} base samples (need 3)", ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5917]));
    let mut ranked: Vec<(f64, usize, String)> = Vec::new();
    for (t, ids) in by_type.iter_mut() {
        ids.sort();
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        for (k, id) in ids.iter().enumerate() {
            ranked.push(((k as f64 + 0.5) / n, t.index(), id.clone()));
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let total = ranked.len();
    let n_train = (ft * total as f64).round() as usize;
    let n_val = ((fv * total as f64).round() as usize).min(total - n_train);
    let assignment: BTreeMap<String, Split> = ranked
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, id))| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    for s in samples.iter_mut() {
        let split = *assignment
            .get(s.base_id())
            .ok_or_else(|| Error::Format(format!("augmented sample {} has no base", s.id)))?;
        s.split = split;
    }
    Ok(())
}

fn base_spec(index: usize, seed: u64) -> JewelSpec {
    let accessory = AccessoryType::ALL[index % 4];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, index as u64]));
    let models: Vec<&CatalogEntry> = CATALOG.iter().filter(|e| e.accessory == accessory).collect();
    let entry = models[rng.gen_range(0..models.len())];
    let (material, stone) = entry.variants[rng.gen_range(0..entry.variants.len())];
    JewelSpec {
        accessory_type: accessory,
        model_name: entry.name.to_string(),
        material,
        stone,
        render: RenderParams { jitter_seed: rng.gen() },
    }
}

/// Class-balanced base images, stratified split, then augmentation.
pub fn generate_corpus(config: CorpusConfig) -> Result<Corpus> {
    if config.n_base < 40 {
        return Err(Error::Config(format!("n_base must be at least 40, got {}", config.n_base)));
    }
    if config.multiplier == 0 {
        return Err(Error::Config("multiplier must be at least 1".into()));
    }
    let base: Vec<Sample> = (0..config.n_base)
        .map(|i| {
            let spec = base_spec(i, config.seed);
            Ok(Sample {
                id: format!("j{i:05}"),
                image: render_jewel(&spec, config.image_size)?,
                captions: Captions::of(&spec),
                spec,
                split: Split::Train,
                provenance: Provenance::Original,
            })
        })
        .collect::<Result<_>>()?;
    let mut samples = expand_dataset(&base, config.multiplier, derive_seed(&[config.seed, 0xa46]))?;
    split_corpus(&mut samples, SPLIT_FRACTIONS, config.seed)?;

    let mut class_histogram = BTreeMap::new();
    for s in &base {
        *class_histogram.entry(s.spec.accessory_type).or_insert(0) += 1;
    }
    let vocab = corpus_vocab(&samples)?;
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        config,
        counts: SplitCounts::of(&samples),
        total: samples.len(),
        class_histogram,
        vocab_hash: vocab.hash(),
    };
    Ok(Corpus { samples, manifest })
}

/// Vocabulary over the training captions of all three levels.
pub fn corpus_vocab(samples: &[Sample]) -> Result<Vocab> {
    let captions: Vec<&str> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .flat_map(|s| CaptionLevel::ALL.map(|l| s.captions.get(l)))
        .collect();
    Vocab::build(&captions, DEFAULT_MAX_LEN)
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    spec: JewelSpec,
    captions: Captions,
    split: Split,
    provenance: Provenance,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const IMAGES_DIR: &str = "images";

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        corpus_vocab(&self.samples)
    }

    /// Writes `manifest.json`, `samples.jsonl` and `images/<id>.png`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(IMAGES_DIR))?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(SAMPLES_FILE))?);
        for s in &self.samples {
            let record = SampleRecord {
                id: s.id.clone(),
                spec: s.spec.clone(),
                captions: s.captions.clone(),
                split: s.split,
                provenance: s.provenance.clone(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
            s.image.save_png(&dir.join(IMAGES_DIR).join(format!("{}.png", s.id)))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported corpus format version {}",
                manifest.format_version
            )));
        }
        let reader = BufReader::new(fs::File::open(dir.join(SAMPLES_FILE))?);
        let mut samples = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SampleRecord = serde_json::from_str(&line)?;
            let image = Image::load_png(&dir.join(IMAGES_DIR).join(format!("{}.png", r.id)))?;
            samples.push(Sample {
                id: r.id,
                image,
                spec: r.spec,
                captions: r.captions,
                split: r.split,
                provenance: r.provenance,
            });
        }
        if samples.len() != manifest.total {
            return Err(Error::Format(format!(
                "manifest lists {} samples, found {}",
                manifest.total,
                samples.len()
            )));
        }
        Ok(Self { samples, manifest })
    }

    /// Rebuilds the corpus from the generation settings in a manifest.
    pub fn regenerate(manifest: &CorpusManifest) -> Result<Self> {
        generate_corpus(manifest.config)
    }
}
