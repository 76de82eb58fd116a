//! Procedural image-caption pairs and a closed-vocabulary text corpus.
//!
//! Every scene is a single anti-aliased shape of one of eight kinds in one of
//! eight colors on a gray canvas, so a class is a `(shape, color)` pair and
//! there are 64 of them. Captions name the shape and color through one of five
//! templates. All randomness is derived from the corpus seed, the split tag and
//! the item index, which makes corpora pure functions of their arguments.
//!
//! On disk a corpus is a directory:
//!
//! | file          | contents                                                               |
//! |---------------|------------------------------------------------------------------------|
//! | `meta.json`   | `format`, `version`, `count`, `image_size`, `channels`, `seed`, `split`, `vocab` (id-ordered words), `labels`, `scenes` |
//! | `images.f32`  | `count × image_size × image_size × 3` float32, little-endian, row-major (HWC) |
//! | `tokens.u32`  | per pair: caption ids as uint32 LE, then the record terminator `0xFFFF_FFFF` |

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHAPES: [&str; 8] = ["square", "circle", "triangle", "diamond", "cross", "ring", "stripe", "frame"];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "black"];
pub const NUM_CLASSES: usize = SHAPES.len() * COLORS.len();

const RGB: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.10, 0.20, 0.90],
    [0.95, 0.90, 0.10],
    [0.10, 0.85, 0.85],
    [0.85, 0.10, 0.85],
    [0.97, 0.97, 0.97],
    [0.03, 0.03, 0.03],
];
const BACKGROUND: f32 = 0.5;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SOI: &str = "<soi>";
pub const EOI: &str = "<eoi>";
pub const SPECIALS: [&str; 5] = [PAD, BOS, EOS, SOI, EOI];

/// Terminator written after each caption in `tokens.u32`.
pub const RECORD_END: u32 = u32::MAX;

const CAPTION_WORDS: [&str; 17] = [
    "a", "an", "on", "gray", "background", "photo", "of", "the", "is", "there", "in", "picture", "image",
    "showing", "small", "large", ".",
];

const SUBJECTS: [&str; 8] = ["cat", "dog", "bird", "child", "farmer", "robot", "teacher", "fox"];
const OBJECTS: [&str; 8] = ["apple", "ball", "book", "bread", "fish", "stone", "letter", "song"];
const VERBS: [(&str, &[usize]); 8] = [
    ("eats", &[0, 3, 4]),
    ("throws", &[0, 1, 5]),
    ("reads", &[2, 6]),
    ("writes", &[2, 6, 7]),
    ("sings", &[7]),
    ("carries", &[0, 1, 2, 3, 4, 5, 6]),
    ("finds", &[0, 1, 2, 3, 4, 5, 6]),
    ("sees", &[0, 1, 2, 3, 4, 5, 6, 7]),
];
const ADJECTIVES: [&str; 4] = ["old", "quick", "happy", "tiny"];
const PLACES: [&str; 4] = ["garden", "hill", "river", "house"];
const PLACE_WORDS: [&str; 3] = ["near", "by", "at"];

/// Closed word-level vocabulary. Special tokens occupy the first ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// The fixed vocabulary shared by every corpus this module produces.
    pub fn standard() -> Self {
        let mut words: Vec<String> = Vec::new();
        let mut add = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        SPECIALS.iter().for_each(|w| add(w));
        CAPTION_WORDS.iter().for_each(|w| add(w));
        SHAPES.iter().for_each(|w| add(w));
        COLORS.iter().for_each(|w| add(w));
        SUBJECTS.iter().for_each(|w| add(w));
        OBJECTS.iter().for_each(|w| add(w));
        VERBS.iter().for_each(|(w, _)| add(w));
        ADJECTIVES.iter().for_each(|w| add(w));
        PLACES.iter().for_each(|w| add(w));
        PLACE_WORDS.iter().for_each(|w| add(w));
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn special(&self, word: &str) -> u32 {
        self.id(word).expect("special tokens are always present")
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::invalid(format!("word `{w}` is not in the vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i as usize).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

/// One rendered scene; `seed` drives the caption template choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape_class: usize,
    pub color_class: usize,
    /// Top-left corner of the shape's bounding square, `(row, col)`.
    pub position: (usize, usize),
    pub size: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn class_label(&self) -> usize {
        self.shape_class * COLORS.len() + self.color_class
    }
}

/// H×W×3 image with values in [0, 1], row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub image: ImageTensor,
    pub tokens: Vec<u32>,
    pub label: usize,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<Pair>,
    pub vocab: Vocab,
    pub split: Split,
    pub image_size: usize,
    pub seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Scene seeds carry the split in their top bit, so train and val never share a scene seed.
fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let h = splitmix(splitmix(seed) ^ splitmix(index as u64 ^ 0x5151_0000_0000_0000));
    (h >> 1) | (split.tag() << 63)
}

fn coverage(shape: usize, nx: f64, ny: f64) -> bool {
    let (ax, ay) = (nx.abs(), ny.abs());
    let r2 = nx * nx + ny * ny;
    match shape {
        0 => ax <= 0.9 && ay <= 0.9,
        1 => r2 <= 0.95 * 0.95,
        2 => (-0.9..=0.9).contains(&ny) && ax <= 0.95 * (ny + 0.9) / 1.8,
        3 => ax + ay <= 0.95,
        4 => (ax <= 0.3 && ay <= 0.95) || (ay <= 0.3 && ax <= 0.95),
        5 => (0.5 * 0.5..=0.95 * 0.95).contains(&r2),
        6 => ay <= 0.35 && ax <= 0.95,
        7 => ax.max(ay) <= 0.95 && ax.max(ay) >= 0.6,
        _ => unreachable!("shape index out of range"),
    }
}

/// Render a scene with 4×4 supersampled anti-aliasing.
pub fn render(scene: &SceneSpec, image_size: usize) -> ImageTensor {
    const SS: usize = 4;
    let mut data = vec![BACKGROUND; image_size * image_size * 3];
    let half = scene.size as f64 / 2.0;
    let cy = scene.position.0 as f64 + half;
    let cx = scene.position.1 as f64 + half;
    let color = RGB[scene.color_class];
    for r in 0..image_size {
        for c in 0..image_size {
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let y = r as f64 + (sy as f64 + 0.5) / SS as f64;
                    let x = c as f64 + (sx as f64 + 0.5) / SS as f64;
                    if coverage(scene.shape_class, (x - cx) / half, (y - cy) / half) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / (SS * SS) as f32;
            let o = (r * image_size + c) * 3;
            for ch in 0..3 {
                data[o + ch] = BACKGROUND * (1.0 - cov) + color[ch] * cov;
            }
        }
    }
    ImageTensor { height: image_size, width: image_size, data }
}

fn size_word(scene: &SceneSpec, image_size: usize) -> &'static str {
    if scene.size * 5 >= image_size * 3 {
        "large"
    } else {
        "small"
    }
}

/// Caption text for a scene; the template is chosen by the scene seed.
pub fn caption(scene: &SceneSpec, image_size: usize) -> String {
    let s = SHAPES[scene.shape_class];
    let c = COLORS[scene.color_class];
    match splitmix(scene.seed) % 5 {
        0 => format!("a {c} {s} on a gray background"),
        1 => format!("a photo of a {c} {s}"),
        2 => format!("the {s} is {c}"),
        3 => format!("there is a {c} {s} in the picture"),
        _ => format!("an image showing a {} {c} {s}", size_word(scene, image_size)),
    }
}

/// Canonical zero-shot prompt text for a class.
pub fn prompt_text(label: usize) -> String {
    format!("a photo of a {} {}", COLORS[label % COLORS.len()], SHAPES[label / COLORS.len()])
}

fn make_scene(label: usize, image_size: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (image_size * 9).div_ceil(20);
    let hi = (image_size * 3) / 4;
    let size = rng.random_range(lo..=hi);
    let row = rng.random_range(0..=image_size - size);
    let col = rng.random_range(0..=image_size - size);
    SceneSpec {
        shape_class: label / COLORS.len(),
        color_class: label % COLORS.len(),
        position: (row, col),
        size,
        seed,
    }
}

/// `n` captioned scenes for the training split.
pub fn gen_pair_corpus(n: usize, image_size: usize, seed: u64) -> Result<Corpus> {
    gen_pair_corpus_split(n, image_size, seed, Split::Train)
}

pub fn gen_pair_corpus_split(n: usize, image_size: usize, seed: u64, split: Split) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    if image_size < 16 {
        return Err(Error::invalid(format!("image size {image_size} is below the minimum of 16 pixels")));
    }
    let vocab = Vocab::standard();
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ split.tag().rotate_left(32)));
    labels.shuffle(&mut rng);
    let pairs = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let scene = make_scene(label, image_size, scene_seed(seed, split, i));
            let tokens = vocab.encode(&caption(&scene, image_size))?;
            Ok(Pair { image: render(&scene, image_size), tokens, label, scene })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { pairs, vocab, split, image_size, seed })
}

/// Subject-verb-object sentences over the closed vocabulary, each ending in `.`.
pub fn gen_text_corpus(n_tokens: usize, seed: u64) -> Result<Vec<u32>> {
    if n_tokens == 0 {
        return Err(Error::invalid("text corpus must request at least one token"));
    }
    let vocab = Vocab::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7e57));
    let mut out = Vec::with_capacity(n_tokens + 16);
    while out.len() < n_tokens {
        out.extend(vocab.encode(&sentence(&mut rng))?);
    }
    Ok(out)
}

/// One grammatical sentence; objects are restricted by the verb.
pub fn sentence(rng: &mut impl Rng) -> String {
    let mut words: Vec<&str> = Vec::with_capacity(12);
    let det = |rng: &mut dyn rand::RngCore| if rng.random_bool(0.5) { "the" } else { "a" };
    words.push(det(rng));
    if rng.random_bool(0.4) {
        words.push(if rng.random_bool(0.5) {
            ADJECTIVES[rng.random_range(0..ADJECTIVES.len())]
        } else {
            COLORS[rng.random_range(0..COLORS.len())]
        });
    }
    words.push(SUBJECTS[rng.random_range(0..SUBJECTS.len())]);
    let (verb, objs) = VERBS[rng.random_range(0..VERBS.len())];
    words.push(verb);
    words.push(det(rng));
    if rng.random_bool(0.3) {
        words.push(COLORS[rng.random_range(0..COLORS.len())]);
    }
    words.push(OBJECTS[objs[rng.random_range(0..objs.len())]]);
    if rng.random_bool(0.3) {
        words.push(PLACE_WORDS[rng.random_range(0..PLACE_WORDS.len())]);
        words.push("the");
        words.push(PLACES[rng.random_range(0..PLACES.len())]);
    }
    words.push(".");
    words.join(" ")
}

/// One canonical caption per class, in label order.
pub fn class_prompts(vocab: &Vocab) -> Result<Vec<(usize, Vec<u32>)>> {
    (0..NUM_CLASSES).map(|label| Ok((label, vocab.encode(&prompt_text(label))?))).collect()
}

/// Recover `(shape, color)` from a caption, for faithfulness checks.
pub fn parse_caption(vocab: &Vocab, tokens: &[u32]) -> Option<(usize, usize)> {
    let text = vocab.decode(tokens);
    let mut shape = None;
    let mut color = None;
    for w in text.split_whitespace() {
        if let Some(i) = SHAPES.iter().position(|s| *s == w) {
            if shape.replace(i).is_some() {
                return None;
            }
        }
        if let Some(i) = COLORS.iter().position(|c| *c == w) {
            if color.replace(i).is_some() {
                return None;
            }
        }
    }
    Some((shape?, color?))
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    format: String,
    version: u32,
    count: usize,
    image_size: usize,
    channels: usize,
    seed: u64,
    split: Split,
    vocab: Vec<String>,
    labels: Vec<usize>,
    scenes: Vec<SceneSpec>,
}

const CORPUS_FORMAT: &str = "qlip-corpus";

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = CorpusMeta {
            format: CORPUS_FORMAT.into(),
            version: 1,
            count: self.pairs.len(),
            image_size: self.image_size,
            channels: 3,
            seed: self.seed,
            split: self.split,
            vocab: self.vocab.words().to_vec(),
            labels: self.pairs.iter().map(|p| p.label).collect(),
            scenes: self.pairs.iter().map(|p| p.scene).collect(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        let mut images = Vec::with_capacity(self.pairs.len() * self.image_size * self.image_size * 12);
        for p in &self.pairs {
            p.image.data.iter().for_each(|v| images.extend_from_slice(&v.to_le_bytes()));
        }
        fs::write(dir.join("images.f32"), images)?;
        let mut tokens = fs::File::create(dir.join("tokens.u32"))?;
        for p in &self.pairs {
            for &t in p.tokens.iter().chain(std::iter::once(&RECORD_END)) {
                tokens.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let fmt_err = |d: String| Error::Format { context: dir.display().to_string(), detail: d };
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.format != CORPUS_FORMAT || meta.version != 1 || meta.channels != 3 {
            return Err(fmt_err(format!("unsupported corpus {} v{}", meta.format, meta.version)));
        }
        let px = meta.image_size * meta.image_size * 3;
        let raw = fs::read(dir.join("images.f32"))?;
        if raw.len() != meta.count * px * 4 {
            return Err(fmt_err(format!("images.f32 has {} bytes, expected {}", raw.len(), meta.count * px * 4)));
        }
        let floats: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let raw_tok = fs::read(dir.join("tokens.u32"))?;
        if raw_tok.len() % 4 != 0 {
            return Err(fmt_err("tokens.u32 length is not a multiple of 4".into()));
        }
        let mut records = Vec::with_capacity(meta.count);
        let mut cur = Vec::new();
        for b in raw_tok.chunks_exact(4) {
            match u32::from_le_bytes([b[0], b[1], b[2], b[3]]) {
                RECORD_END => records.push(std::mem::take(&mut cur)),
                t => cur.push(t),
            }
        }
        if !cur.is_empty() || records.len() != meta.count || meta.labels.len() != meta.count || meta.scenes.len() != meta.count {
            return Err(fmt_err("record counts disagree with meta.json".into()));
        }
        let vocab = Vocab::from_words(meta.vocab);
        let pairs = records
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Pair {
                image: ImageTensor {
                    height: meta.image_size,
                    width: meta.image_size,
                    data: floats[i * px..(i + 1) * px].to_vec(),
                },
                tokens,
                label: meta.labels[i],
                scene: meta.scenes[i],
            })
            .collect();
        Ok(Corpus { pairs, vocab, split: meta.split, image_size: meta.image_size, seed: meta.seed })
    }
}

/// Write a token stream as uint32 little-endian.
pub fn save_text_stream(path: &Path, ids: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = ids.iter().flat_map(|t| t.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_text_stream(path: &Path) -> Result<Vec<u32>> {
    let raw = fs::read(path)?;
    if raw.len() % 4 != 0 {
        return Err(Error::Format { context: path.display().to_string(), detail: "length not a multiple of 4".into() });
    }
    Ok(raw.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// Split a token stream into sentences at the `.` token.
pub fn sentences(vocab: &Vocab, stream: &[u32]) -> Vec<Vec<u32>> {
    let dot = vocab.id(".").expect("period is in the standard vocabulary");
    stream
        .split_inclusive(|&t| t == dot)
        .filter(|s| s.last() == Some(&dot))
        .map(<[u32]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus_covers_every_class() {
        let c = gen_pair_corpus(64, 32, 0).unwrap();
        assert_eq!(c.len(), 64);
        let mut seen = [0usize; NUM_CLASSES];
        c.pairs.iter().for_each(|p| seen[p.label] += 1);
        assert!(seen.iter().all(|&k| k == 1));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_pair_corpus(40, 32, 7).unwrap(), gen_pair_corpus(40, 32, 7).unwrap());
        assert_eq!(gen_text_corpus(500, 3).unwrap(), gen_text_corpus(500, 3).unwrap());
    }

    #[test]
    fn class_histogram_is_balanced() {
        let c = gen_pair_corpus(2000, 32, 1).unwrap();
        let mut hist = [0usize; NUM_CLASSES];
        c.pairs.iter().for_each(|p| hist[p.label] += 1);
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1, "histogram spread {lo}..{hi}");
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(gen_pair_corpus(10, 15, 0).is_err());
        assert!(gen_pair_corpus(0, 32, 0).is_err());
        assert!(gen_text_corpus(0, 0).is_err());
    }

    #[test]
    fn shapes_stay_inside_the_canvas() {
        for size in [16, 32] {
            let c = gen_pair_corpus(300, size, 5).unwrap();
            for p in &c.pairs {
                let s = p.scene;
                assert!(s.position.0 + s.size <= size && s.position.1 + s.size <= size);
            }
        }
    }

    #[test]
    fn captions_name_the_rendered_scene() {
        let c = gen_pair_corpus(500, 32, 2).unwrap();
        let mut templates = std::collections::HashSet::new();
        for p in &c.pairs {
            let parsed = parse_caption(&c.vocab, &p.tokens).expect("caption names one shape and one color");
            assert_eq!(parsed, (p.scene.shape_class, p.scene.color_class));
            assert_eq!(p.scene.class_label(), p.label);
            templates.insert(p.tokens[..2].to_vec());
        }
        assert!(templates.len() >= 4);
    }

    #[test]
    fn text_corpus_is_closed_and_not_constant() {
        let v = Vocab::standard();
        let s = gen_text_corpus(1000, 0).unwrap();
        assert!(s.len() >= 1000);
        assert!(s.iter().all(|&t| (t as usize) < v.len()));
        let mut counts = HashMap::new();
        s.iter().for_each(|t| *counts.entry(t).or_insert(0usize) += 1);
        let n = s.len() as f64;
        let h: f64 = counts.values().map(|&k| -(k as f64 / n) * (k as f64 / n).ln()).sum();
        assert!(h > 0.0);
    }

    #[test]
    fn prompts_are_distinct_and_in_vocab() {
        let v = Vocab::standard();
        let prompts = class_prompts(&v).unwrap();
        assert_eq!(prompts.len(), 64);
        let set: std::collections::HashSet<_> = prompts.iter().map(|p| p.1.clone()).collect();
        assert_eq!(set.len(), 64);
        assert!(prompts.iter().flat_map(|p| &p.1).all(|&t| (t as usize) < v.len()));
    }

    #[test]
    fn classes_render_differently() {
        // Same geometry, every pair of classes.
        let imgs: Vec<ImageTensor> = (0..NUM_CLASSES)
            .map(|l| {
                let s = SceneSpec { shape_class: l / 8, color_class: l % 8, position: (4, 4), size: 20, seed: 0 };
                render(&s, 32)
            })
            .collect();
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                let differing = (0..32 * 32)
                    .filter(|&px| (0..3).any(|c| (imgs[a].data[px * 3 + c] - imgs[b].data[px * 3 + c]).abs() > 1e-3))
                    .count();
                assert!(differing * 100 >= 32 * 32, "classes {a} and {b} differ in {differing} pixels");
            }
        }
    }

    #[test]
    fn train_and_val_scene_seeds_are_disjoint() {
        let t = gen_pair_corpus_split(500, 16, 9, Split::Train).unwrap();
        let v = gen_pair_corpus_split(500, 16, 9, Split::Val).unwrap();
        let ts: std::collections::HashSet<u64> = t.pairs.iter().map(|p| p.scene.seed).collect();
        assert!(v.pairs.iter().all(|p| !ts.contains(&p.scene.seed)));
    }

    #[test]
    fn corpus_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_pair_corpus_split(20, 16, 4, Split::Val).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }
}
