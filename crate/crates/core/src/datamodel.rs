//! Annotation schema, object-action vocabulary, dataset I/O and the
//! synthetic dataset generator.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_rsc, Box};
use crate::spatial::RscStats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub name: String,
    /// Article used when the object appears in a sentence ("a", "the", "").
    #[serde(default = "default_article")]
    pub article: String,
}

fn default_article() -> String {
    "a".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionEntry {
    pub name: String,
    pub gerund: String,
    /// Preposition placed between the gerund and the object, may be empty.
    #[serde(default)]
    pub preposition: String,
    /// Actions performed without an object. Such actions never take one.
    #[serde(default)]
    pub allows_null_object: bool,
}

/// An (object, action) combination; `object` is `None` for actions
/// performed without an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OaPair {
    pub object: Option<usize>,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PairEntry {
    object: Option<String>,
    action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preposition: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VocabularyFile {
    objects: Vec<ObjectEntry>,
    actions: Vec<ActionEntry>,
    pairs: Vec<PairEntry>,
}

/// Object and action classes plus the valid object-action pairs, indexed
/// `0..num_pairs()` in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct OaVocabulary {
    objects: Vec<ObjectEntry>,
    actions: Vec<ActionEntry>,
    pairs: Vec<OaPair>,
    pair_prepositions: Vec<Option<String>>,
    pair_index: HashMap<OaPair, usize>,
}

impl TryFrom<VocabularyFile> for OaVocabulary {
    type Error = Error;

    fn try_from(file: VocabularyFile) -> Result<Self> {
        let object_ids: HashMap<&str, usize> =
            file.objects.iter().enumerate().map(|(i, o)| (o.name.as_str(), i)).collect();
        let action_ids: HashMap<&str, usize> =
            file.actions.iter().enumerate().map(|(i, a)| (a.name.as_str(), i)).collect();
        if object_ids.len() != file.objects.len() {
            return Err(Error::Parse("duplicate object name in vocabulary".into()));
        }
        if action_ids.len() != file.actions.len() {
            return Err(Error::Parse("duplicate action name in vocabulary".into()));
        }
        let mut pairs = Vec::with_capacity(file.pairs.len());
        let mut preps = Vec::with_capacity(file.pairs.len());
        let mut pair_index = HashMap::new();
        for (i, p) in file.pairs.iter().enumerate() {
            let action = *action_ids.get(p.action.as_str()).ok_or_else(|| Error::UnknownName {
                kind: "action",
                name: p.action.clone(),
            })?;
            let object = match &p.object {
                Some(o) => Some(*object_ids.get(o.as_str()).ok_or_else(|| Error::UnknownName {
                    kind: "object",
                    name: o.clone(),
                })?),
                None => None,
            };
            if object.is_none() != file.actions[action].allows_null_object {
                return Err(Error::Invalid {
                    index: i,
                    message: format!(
                        "pair ({}, {}) conflicts with the null-object flag of its action",
                        p.object.as_deref().unwrap_or("-"),
                        p.action
                    ),
                });
            }
            let pair = OaPair { object, action };
            if pair_index.insert(pair, i).is_some() {
                return Err(Error::Invalid {
                    index: i,
                    message: "duplicate pair".into(),
                });
            }
            pairs.push(pair);
            preps.push(p.preposition.clone());
        }
        for (a, entry) in file.actions.iter().enumerate() {
            if entry.allows_null_object && !pair_index.contains_key(&OaPair { object: None, action: a }) {
                return Err(Error::Parse(format!(
                    "null-object action `{}` has no pair entry",
                    entry.name
                )));
            }
        }
        Ok(Self {
            objects: file.objects,
            actions: file.actions,
            pairs,
            pair_prepositions: preps,
            pair_index,
        })
    }
}

impl From<OaVocabulary> for VocabularyFile {
    fn from(v: OaVocabulary) -> Self {
        let pairs = v
            .pairs
            .iter()
            .zip(&v.pair_prepositions)
            .map(|(p, prep)| PairEntry {
                object: p.object.map(|o| v.objects[o].name.clone()),
                action: v.actions[p.action].name.clone(),
                preposition: prep.clone(),
            })
            .collect();
        Self {
            objects: v.objects,
            actions: v.actions,
            pairs,
        }
    }
}

impl OaVocabulary {
    /// Six objects, five actions (two without objects), fourteen pairs.
    pub fn default_synthetic() -> Self {
        let obj = |name: &str| ObjectEntry {
            name: name.into(),
            article: "a".into(),
        };
        let act = |name: &str, gerund: &str, prep: &str, null: bool| ActionEntry {
            name: name.into(),
            gerund: gerund.into(),
            preposition: prep.into(),
            allows_null_object: null,
        };
        let pair = |o: Option<&str>, a: &str| PairEntry {
            object: o.map(Into::into),
            action: a.into(),
            preposition: None,
        };
        let file = VocabularyFile {
            objects: ["phone", "cup", "book", "pizza", "ball", "bicycle"].map(obj).to_vec(),
            actions: vec![
                act("hold", "holding", "", false),
                act("look", "looking", "at", false),
                act("ride", "riding", "", false),
                act("stand", "standing", "", true),
                act("smile", "smiling", "", true),
            ],
            pairs: vec![
                pair(Some("phone"), "hold"),
                pair(Some("cup"), "hold"),
                pair(Some("book"), "hold"),
                pair(Some("pizza"), "hold"),
                pair(Some("ball"), "hold"),
                pair(Some("phone"), "look"),
                pair(Some("cup"), "look"),
                pair(Some("book"), "look"),
                pair(Some("ball"), "look"),
                pair(Some("bicycle"), "look"),
                pair(Some("pizza"), "look"),
                pair(Some("bicycle"), "ride"),
                pair(None, "stand"),
                pair(None, "smile"),
            ],
        };
        Self::try_from(file).expect("built-in vocabulary is valid")
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn objects(&self) -> &[ObjectEntry] {
        &self.objects
    }

    pub fn actions(&self) -> &[ActionEntry] {
        &self.actions
    }

    pub fn pairs(&self) -> &[OaPair] {
        &self.pairs
    }

    pub fn pair(&self, index: usize) -> OaPair {
        self.pairs[index]
    }

    pub fn pair_index(&self, pair: OaPair) -> Option<usize> {
        self.pair_index.get(&pair).copied()
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn action_id(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    pub fn allows_null_object(&self, action: usize) -> bool {
        self.actions[action].allows_null_object
    }

    /// Preposition for a pair: the per-pair override or the action default.
    pub fn preposition(&self, index: usize) -> &str {
        self.pair_prepositions[index]
            .as_deref()
            .unwrap_or(&self.actions[self.pairs[index].action].preposition)
    }

    /// `"object:action"`, with an empty object name for null-object pairs.
    pub fn pair_key(&self, index: usize) -> String {
        let p = self.pairs[index];
        format!(
            "{}:{}",
            p.object.map_or("", |o| self.objects[o].name.as_str()),
            self.actions[p.action].name
        )
    }

    pub fn pair_from_key(&self, key: &str) -> Result<usize> {
        let (o, a) = key.split_once(':').ok_or_else(|| Error::Parse(format!("bad pair key `{key}`")))?;
        let action = self.action_id(a).ok_or_else(|| Error::UnknownName {
            kind: "action",
            name: a.into(),
        })?;
        let object = if o.is_empty() {
            None
        } else {
            Some(self.object_id(o).ok_or_else(|| Error::UnknownName {
                kind: "object",
                name: o.into(),
            })?)
        };
        self.pair_index(OaPair { object, action }).ok_or_else(|| Error::UnknownName {
            kind: "pair",
            name: key.into(),
        })
    }
}

/// One ground-truth interaction triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiInstance {
    pub human: Box,
    pub object: Option<Box>,
    pub object_class: Option<usize>,
    pub action_class: usize,
}

impl HoiInstance {
    pub fn pair(&self) -> OaPair {
        OaPair {
            object: self.object_class,
            action: self.action_class,
        }
    }
}

/// Interleaved 8-bit pixels, row-major `height x width x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageData {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageData {
    pub fn blank(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: &[u8]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                let i = (y * self.width + x) * self.channels;
                self.pixels[i..i + self.channels].copy_from_slice(&color[..self.channels]);
            }
        }
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            pixels: img.into_raw(),
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Image(format!("cannot encode {c}-channel image"))),
        };
        image::save_buffer(path, &self.pixels, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Inline,
    /// Path as written in the annotation file, relative to that file.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageAnnotation {
    pub id: u64,
    pub image: ImageData,
    pub source: ImageSource,
    pub hois: Vec<HoiInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocabulary: OaVocabulary,
    pub images: Vec<ImageAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    vocabulary: OaVocabulary,
    images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: u64,
    width: usize,
    height: usize,
    #[serde(default = "default_channels")]
    channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
    hois: Vec<HoiRecord>,
}

fn default_channels() -> usize {
    3
}

#[derive(Serialize, Deserialize)]
struct HoiRecord {
    human: [f64; 4],
    object: Option<[f64; 4]>,
    object_class: Option<String>,
    action_class: String,
}

fn parse_box(c: [f64; 4]) -> std::result::Result<Box, String> {
    Box::normalized(c[0], c[1], c[2], c[3]).map_err(|e| e.to_string())
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent())
    }

    /// Parses the annotation JSON; `base_dir` resolves relative image paths.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let vocab = file.vocabulary;
        let mut images = Vec::with_capacity(file.images.len());
        for (index, rec) in file.images.into_iter().enumerate() {
            let invalid = |message: String| Error::Invalid { index, message };
            let (image, source) = match (rec.pixels, rec.path) {
                (Some(pixels), None) => {
                    if pixels.len() != rec.width * rec.height * rec.channels {
                        return Err(invalid(format!(
                            "{} pixel values for a {}x{}x{} image",
                            pixels.len(),
                            rec.width,
                            rec.height,
                            rec.channels
                        )));
                    }
                    let data = ImageData {
                        width: rec.width,
                        height: rec.height,
                        channels: rec.channels,
                        pixels,
                    };
                    (data, ImageSource::Inline)
                }
                (None, Some(p)) => {
                    let full = base_dir.map_or_else(|| p.clone(), |d| d.join(&p));
                    let data = ImageData::read_png(&full)?;
                    if data.width != rec.width || data.height != rec.height {
                        return Err(invalid(format!(
                            "image file is {}x{}, annotation says {}x{}",
                            data.width, data.height, rec.width, rec.height
                        )));
                    }
                    (data, ImageSource::File(p))
                }
                _ => return Err(invalid("exactly one of `pixels` or `path` is required".into())),
            };
            let mut hois = Vec::with_capacity(rec.hois.len());
            for h in rec.hois {
                let human = parse_box(h.human).map_err(|m| invalid(format!("human box: {m}")))?;
                let object = h
                    .object
                    .map(parse_box)
                    .transpose()
                    .map_err(|m| invalid(format!("object box: {m}")))?;
                let action_class = vocab.action_id(&h.action_class).ok_or_else(|| Error::UnknownName {
                    kind: "action",
                    name: h.action_class.clone(),
                })?;
                let object_class = h
                    .object_class
                    .as_deref()
                    .map(|n| {
                        vocab.object_id(n).ok_or_else(|| Error::UnknownName {
                            kind: "object",
                            name: n.to_string(),
                        })
                    })
                    .transpose()?;
                let inst = HoiInstance {
                    human,
                    object,
                    object_class,
                    action_class,
                };
                validate_instance(&vocab, &inst).map_err(invalid)?;
                hois.push(inst);
            }
            images.push(ImageAnnotation {
                id: rec.id,
                image,
                source,
                hois,
            });
        }
        Ok(Self {
            vocabulary: vocab,
            images,
        })
    }

    pub fn to_json(&self) -> String {
        let v = &self.vocabulary;
        let images = self
            .images
            .iter()
            .map(|img| ImageRecord {
                id: img.id,
                width: img.image.width,
                height: img.image.height,
                channels: img.image.channels,
                pixels: matches!(img.source, ImageSource::Inline).then(|| img.image.pixels.clone()),
                path: match &img.source {
                    ImageSource::File(p) => Some(p.clone()),
                    ImageSource::Inline => None,
                },
                hois: img
                    .hois
                    .iter()
                    .map(|h| HoiRecord {
                        human: h.human.corners(),
                        object: h.object.map(|b| b.corners()),
                        object_class: h.object_class.map(|o| v.objects[o].name.clone()),
                        action_class: v.actions[h.action_class].name.clone(),
                    })
                    .collect(),
            })
            .collect();
        let file = DatasetFile {
            vocabulary: v.clone(),
            images,
        };
        serde_json::to_string(&file).expect("dataset serializes")
    }

    /// Writes the annotation file. Images with a file source are written as
    /// PNGs next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        for img in &self.images {
            if let ImageSource::File(rel) = &img.source {
                let full = dir.join(rel);
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                img.image.write_png(&full)?;
            }
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Switches every image to a PNG file under `subdir`.
    pub fn with_png_images(mut self, subdir: &str) -> Self {
        for img in &mut self.images {
            img.source = ImageSource::File(PathBuf::from(subdir).join(format!("{}.png", img.id)));
        }
        self
    }

    /// Training samples per pair.
    pub fn pair_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocabulary.num_pairs()];
        for img in &self.images {
            for h in &img.hois {
                if let Some(i) = self.vocabulary.pair_index(h.pair()) {
                    counts[i] += 1;
                }
            }
        }
        counts
    }
}

fn validate_instance(vocab: &OaVocabulary, h: &HoiInstance) -> std::result::Result<(), String> {
    if h.object.is_some() != h.object_class.is_some() {
        return Err("object box and object class must both be present or both null".into());
    }
    let null_action = vocab.allows_null_object(h.action_class);
    if h.object.is_none() != null_action {
        let name = &vocab.actions[h.action_class].name;
        return Err(if null_action {
            format!("action `{name}` takes no object")
        } else {
            format!("action `{name}` requires an object")
        });
    }
    if vocab.pair_index(h.pair()).is_none() {
        return Err("object-action pair is not in the vocabulary".into());
    }
    Ok(())
}

/// Multi-hot vector over vocabulary pairs present in the image.
pub fn gt_oa_targets(ann: &ImageAnnotation, vocab: &OaVocabulary) -> Vec<f64> {
    let mut t = vec![0.0; vocab.num_pairs()];
    for h in &ann.hois {
        if let Some(i) = vocab.pair_index(h.pair()) {
            t[i] = 1.0;
        }
    }
    t
}

pub const HUMAN_COLOR: [u8; 3] = [255, 255, 255];

/// Fill colour of each object class in synthetic images.
pub fn object_color(class: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [245, 130, 48],
        [70, 240, 240],
        [128, 128, 0],
    ];
    let base = PALETTE[class % PALETTE.len()];
    let shift = (class / PALETTE.len()) as u8 * 37;
    [base[0].wrapping_add(shift), base[1], base[2].wrapping_sub(shift)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Square image side in pixels.
    pub image_size: usize,
    pub max_instances: usize,
    /// Smallest box side in pixels.
    pub min_side_px: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            image_size: 32,
            max_instances: 3,
            min_side_px: 2,
        }
    }
}

/// Renders `n_images` synthetic scenes. Humans are white rectangles and
/// objects rectangles in their class colour, laid out with relative
/// configurations drawn from `layout`. Boxes snap to the pixel grid so the
/// annotations describe the rendered rectangles exactly.
pub fn synth_dataset(
    seed: u64,
    n_images: usize,
    vocab: &OaVocabulary,
    layout: &RscStats,
    opts: &SynthOptions,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n_images)
        .map(|i| synth_image(i as u64, &mut rng, vocab, layout, opts))
        .collect();
    Dataset {
        vocabulary: vocab.clone(),
        images,
    }
}

fn synth_image(
    id: u64,
    rng: &mut ChaCha8Rng,
    vocab: &OaVocabulary,
    layout: &RscStats,
    opts: &SynthOptions,
) -> ImageAnnotation {
    let size = opts.image_size;
    let n_inst = rng.random_range(1..=opts.max_instances.max(1));
    let mut hois: Vec<HoiInstance> = Vec::new();
    let mut occupied: Vec<Box> = Vec::new();
    'instances: for _ in 0..n_inst {
        for _attempt in 0..50 {
            let pair_idx = rng.random_range(0..vocab.num_pairs());
            let pair = vocab.pair(pair_idx);
            let Some((human, object)) = place_instance(rng, layout, pair_idx, size, opts.min_side_px) else {
                continue;
            };
            let boxes: Vec<Box> = std::iter::once(human).chain(object).collect();
            let clashes = boxes
                .iter()
                .any(|b| occupied.iter().any(|o| crate::geometry::iou(b, o) > 0.0));
            if clashes {
                continue;
            }
            occupied.extend(&boxes);
            hois.push(HoiInstance {
                human,
                object,
                object_class: pair.object,
                action_class: pair.action,
            });
            continue 'instances;
        }
    }
    let image = render(&hois, size);
    ImageAnnotation {
        id,
        image,
        source: ImageSource::Inline,
        hois,
    }
}

fn place_instance(
    rng: &mut ChaCha8Rng,
    layout: &RscStats,
    pair: usize,
    size: usize,
    min_px: usize,
) -> Option<(Box, Option<Box>)> {
    let stats = layout.resolve(pair);
    let s = size as f64;
    let min_side = min_px as f64 / s;
    let hs = stats.person.sample(rng);
    let (w, h) = (hs[0].clamp(min_side, 0.9), hs[1].clamp(min_side, 0.9));
    let x = rng.random_range(0.0..=(1.0 - w));
    let y = rng.random_range(0.0..=(1.0 - h));
    let human = snap(Box::from_tlwh(x, y, w, h).ok()?, size, min_px)?;
    let object = match stats.sample_rsc(rng) {
        None => None,
        Some(r) => {
            let raw = apply_rsc(&human, &r);
            if !raw.is_normalized() {
                return None;
            }
            Some(snap(raw, size, min_px)?)
        }
    };
    Some((human, object))
}

fn snap(b: Box, size: usize, min_px: usize) -> Option<Box> {
    let s = size as f64;
    let x1 = (b.x1() * s).round().clamp(0.0, s);
    let y1 = (b.y1() * s).round().clamp(0.0, s);
    let x2 = (b.x2() * s).round().clamp(0.0, s);
    let y2 = (b.y2() * s).round().clamp(0.0, s);
    if x2 - x1 < min_px as f64 || y2 - y1 < min_px as f64 {
        return None;
    }
    Box::normalized(x1 / s, y1 / s, x2 / s, y2 / s).ok()
}

/// Paints humans first, then objects on top.
pub fn render(hois: &[HoiInstance], size: usize) -> ImageData {
    let mut img = ImageData::blank(size, size, 3);
    let px = |v: f64| (v * size as f64).round() as usize;
    for h in hois {
        let b = h.human;
        img.fill_rect(px(b.x1()), px(b.y1()), px(b.x2()), px(b.y2()), &HUMAN_COLOR);
    }
    for h in hois {
        if let (Some(b), Some(c)) = (h.object, h.object_class) {
            img.fill_rect(px(b.x1()), px(b.y1()), px(b.x2()), px(b.y2()), &object_color(c));
        }
    }
    img
}
