//! Synthetic multi-modal product-segmentation data.
//!
//! Scenes hold one target object and any number of distractors on a
//! textured dark background; the ground-truth mask covers the target
//! only, rasterized by exact point-in-shape tests. Titles spell out the
//! target's color/shape (and sometimes size) in lexicon words, with
//! brand-like noise tokens spliced in at random slots.

pub mod manifest;
pub mod netpbm;

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MqError, Result};
use crate::text::pretrain::{CorpusRecord, LabelSets};
use netpbm::Image8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeClass {
    Disc,
    Box,
    Tri,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Disc,
        ShapeClass::Box,
        ShapeClass::Tri,
        ShapeClass::Ring,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeClass::Disc => "disc",
            ShapeClass::Box => "box",
            ShapeClass::Tri => "tri",
            ShapeClass::Ring => "ring",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorName {
    Red,
    Blue,
    Green,
    Gold,
}

impl ColorName {
    pub const ALL: [ColorName; 4] = [
        ColorName::Red,
        ColorName::Blue,
        ColorName::Green,
        ColorName::Gold,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Blue => "blue",
            ColorName::Green => "green",
            ColorName::Gold => "gold",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorName::Red => [225, 45, 45],
            ColorName::Blue => [50, 90, 230],
            ColorName::Green => [45, 190, 70],
            ColorName::Gold => [230, 185, 40],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeClass {
    Big,
    Lil,
}

impl SizeClass {
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Big => "big",
            SizeClass::Lil => "lil",
        }
    }

    /// Radius as a fraction of the image side.
    fn radius_frac(self) -> f64 {
        match self {
            SizeClass::Big => 0.19,
            SizeClass::Lil => 0.12,
        }
    }
}

/// The full visual lexicon, for "noise token must not collide" checks.
pub fn lexicon_words() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = ColorName::ALL.iter().map(|c| c.word()).collect();
    v.extend(ShapeClass::ALL.iter().map(|s| s.word()));
    v.extend([SizeClass::Big.word(), SizeClass::Lil.word()]);
    v
}

/// Label inventories for the pretraining objectives, tied to the generator.
pub fn label_sets() -> LabelSets {
    LabelSets {
        queries: vec!["color".into(), "shape".into(), "size".into()],
        values: lexicon_words().iter().map(|s| s.to_string()).collect(),
        categories: ShapeClass::ALL.iter().map(|s| s.word().to_string()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeClass,
    pub color: ColorName,
    pub size: SizeClass,
    /// Center in image fractions [0,1]².
    pub center: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackgroundStyle {
    Plain,
    Gradient,
    Speckle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub target: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    pub background: BackgroundStyle,
    pub noise_tokens: Vec<String>,
    pub mention_size: bool,
}

impl SceneSpec {
    /// Title: color and shape words always, size word optionally, noise
    /// tokens spliced at seeded-random slots.
    pub fn title(&self, rng: &mut ChaCha8Rng) -> String {
        let mut words: Vec<String> = vec![
            self.target.color.word().to_string(),
            self.target.shape.word().to_string(),
        ];
        if self.mention_size {
            words.push(self.target.size.word().to_string());
        }
        for tok in &self.noise_tokens {
            let slot = rng.random_range(0..=words.len());
            words.insert(slot, tok.clone());
        }
        words.join(" ")
    }

    pub fn attributes(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("color".to_string(), self.target.color.word().to_string()),
            ("shape".to_string(), self.target.shape.word().to_string()),
            ("size".to_string(), self.target.size.word().to_string()),
        ])
    }
}

/// A rendered example: image, target-only mask, title, labels.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub image: Image8,
    pub mask: Vec<bool>,
    pub title: String,
    pub category: String,
    pub attributes: BTreeMap<String, String>,
}

/// Point-in-shape test at a pixel center, image side `s`.
fn inside(obj: &ObjectSpec, s: usize, px: usize, py: usize) -> bool {
    let r = obj.size.radius_frac() * s as f64;
    let (cx, cy) = (obj.center.0 * s as f64, obj.center.1 * s as f64);
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let (dx, dy) = (x - cx, y - cy);
    match obj.shape {
        ShapeClass::Disc => dx * dx + dy * dy <= r * r,
        ShapeClass::Box => dx.abs() <= r && dy.abs() <= r,
        ShapeClass::Ring => {
            let d2 = dx * dx + dy * dy;
            let inner = 0.55 * r;
            d2 <= r * r && d2 >= inner * inner
        }
        ShapeClass::Tri => {
            // apex up: (cx, cy−r), (cx−r, cy+r), (cx+r, cy+r)
            let (ax, ay) = (cx, cy - r);
            let (bx, by) = (cx - r, cy + r);
            let (gx, gy) = (cx + r, cy + r);
            let edge = |x0: f64, y0: f64, x1: f64, y1: f64| -> f64 {
                (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
            };
            let (e0, e1, e2) = (edge(ax, ay, bx, by), edge(bx, by, gx, gy), edge(gx, gy, ax, ay));
            (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
        }
    }
}

fn paint_background(img: &mut Image8, style: BackgroundStyle, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.w, img.h);
    match style {
        BackgroundStyle::Plain => {
            let base = rng.random_range(28..60) as u8;
            for px in img.rgb.chunks_mut(3) {
                px.copy_from_slice(&[base, base, base]);
            }
        }
        BackgroundStyle::Gradient => {
            let a = rng.random_range(22..45) as i32;
            let b = rng.random_range(50..80) as i32;
            for y in 0..h {
                let v = (a + (b - a) * y as i32 / h.max(1) as i32) as u8;
                for x in 0..w {
                    img.put(x, y, [v, v, v]);
                }
            }
        }
        BackgroundStyle::Speckle => {
            for px in img.rgb.chunks_mut(3) {
                let v = rng.random_range(25..70) as u8;
                px.copy_from_slice(&[v, v, v]);
            }
        }
    }
}

/// Renders the scene at `size`×`size`. The mask covers the target only
/// and equals the exact rasterization of its shape predicate. Distractors
/// never overlap the target (the sampler guarantees separation), so the
/// target is always fully visible.
pub fn generate_sample(spec: &SceneSpec, rng: &mut ChaCha8Rng, size: usize) -> Result<SampleRecord> {
    if size == 0 {
        return Err(MqError::InvalidArgument("image size 0".into()));
    }
    let mut img = Image8::new(size, size);
    paint_background(&mut img, spec.background, rng);
    for d in &spec.distractors {
        let c = d.color.rgb();
        for y in 0..size {
            for x in 0..size {
                if inside(d, size, x, y) {
                    img.put(x, y, c);
                }
            }
        }
    }
    let mut mask = vec![false; size * size];
    let c = spec.target.color.rgb();
    let mut any = false;
    for y in 0..size {
        for x in 0..size {
            if inside(&spec.target, size, x, y) {
                img.put(x, y, c);
                mask[y * size + x] = true;
                any = true;
            }
        }
    }
    if !any {
        return Err(MqError::Data("target rasterized to zero pixels".into()));
    }
    let title = spec.title(rng);
    Ok(SampleRecord {
        image: img,
        mask,
        title,
        category: spec.target.shape.word().to_string(),
        attributes: spec.attributes(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(MqError::InvalidArgument(format!("unknown difficulty {other}"))),
        }
    }

    /// Distractor count ranges for (train, test) scenes. Test scenes
    /// always carry at least one distractor.
    fn distractors(self, is_test: bool, rng: &mut ChaCha8Rng) -> usize {
        let (lo, hi) = match (self, is_test) {
            (Difficulty::Easy, false) => (0, 1),
            (Difficulty::Easy, true) => (1, 1),
            (Difficulty::Medium, false) => (0, 2),
            (Difficulty::Medium, true) => (1, 2),
            (Difficulty::Hard, false) => (1, 3),
            (Difficulty::Hard, true) => (2, 3),
        };
        rng.random_range(lo..=hi)
    }
}

fn noise_token(rng: &mut ChaCha8Rng) -> String {
    let letters: Vec<char> = ('a'..='z').collect();
    let digits: Vec<char> = ('0'..='9').collect();
    loop {
        let len = rng.random_range(2..=3);
        let digit_at = rng.random_range(0..len);
        let tok: String = (0..len)
            .map(|i| {
                if i == digit_at {
                    *digits.choose(rng).unwrap()
                } else {
                    *letters.choose(rng).unwrap()
                }
            })
            .collect();
        if !lexicon_words().contains(&tok.as_str()) {
            return tok;
        }
    }
}

fn sample_object(rng: &mut ChaCha8Rng, central: bool) -> ObjectSpec {
    let span = if central { 0.34..0.66 } else { 0.16..0.84 };
    ObjectSpec {
        shape: *ShapeClass::ALL.choose(rng).unwrap(),
        color: *ColorName::ALL.choose(rng).unwrap(),
        size: if rng.random_bool(0.5) {
            SizeClass::Big
        } else {
            SizeClass::Lil
        },
        center: (rng.random_range(span.clone()), rng.random_range(span)),
    }
}

fn separated(a: &ObjectSpec, b: &ObjectSpec, size: usize) -> bool {
    let ra = a.size.radius_frac() * size as f64;
    let rb = b.size.radius_frac() * size as f64;
    let dx = (a.center.0 - b.center.0) * size as f64;
    let dy = (a.center.1 - b.center.1) * size as f64;
    // triangles/boxes reach √2·r into the corners
    let reach = (ra + rb) * std::f64::consts::SQRT_2 + 2.0;
    dx * dx + dy * dy > reach * reach
}

/// Draws a scene: a target (biased toward the center), distractors that
/// differ from the target in color or shape and never overlap anything,
/// and 1–2 noise tokens. Bounded rejection sampling; errors if the scene
/// cannot be placed.
pub fn sample_scene(
    rng: &mut ChaCha8Rng,
    difficulty: Difficulty,
    is_test: bool,
    size: usize,
) -> Result<SceneSpec> {
    let n_distractors = difficulty.distractors(is_test, rng);
    'scene: for _ in 0..64 {
        let target = sample_object(rng, true);
        let mut placed = vec![target.clone()];
        for _ in 0..n_distractors {
            let mut ok = None;
            for _ in 0..64 {
                let d = sample_object(rng, false);
                if d.color == target.color && d.shape == target.shape {
                    continue; // must differ in a named attribute
                }
                if placed.iter().all(|p| separated(p, &d, size)) {
                    ok = Some(d);
                    break;
                }
            }
            match ok {
                Some(d) => placed.push(d),
                None => continue 'scene,
            }
        }
        let background = match rng.random_range(0..3) {
            0 => BackgroundStyle::Plain,
            1 => BackgroundStyle::Gradient,
            _ => BackgroundStyle::Speckle,
        };
        let n_noise = rng.random_range(1..=2);
        let noise_tokens = (0..n_noise).map(|_| noise_token(rng)).collect();
        return Ok(SceneSpec {
            target: placed.remove(0),
            distractors: placed,
            background,
            noise_tokens,
            mention_size: rng.random_bool(0.5),
        });
    }
    Err(MqError::Data(
        "could not place a non-overlapping scene after bounded retries".into(),
    ))
}

/// Corpus records (title + labels, no rendering) for pretraining demos.
pub fn generate_corpus(n: usize, seed: u64, size: usize) -> Result<Vec<CorpusRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let scene = sample_scene(&mut rng, Difficulty::Medium, false, size)?;
        out.push(CorpusRecord {
            title: scene.title(&mut rng),
            attributes: scene.attributes(),
            category: scene.target.shape.word().to_string(),
        });
    }
    Ok(out)
}

use rand::SeedableRng;

/// Stream-splits one master seed into per-sample seeds.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_scene() -> SceneSpec {
        SceneSpec {
            target: ObjectSpec {
                shape: ShapeClass::Disc,
                color: ColorName::Red,
                size: SizeClass::Big,
                center: (0.5, 0.5),
            },
            distractors: vec![ObjectSpec {
                shape: ShapeClass::Box,
                color: ColorName::Blue,
                size: SizeClass::Lil,
                center: (0.15, 0.15),
            }],
            background: BackgroundStyle::Plain,
            noise_tokens: vec!["zx4".into()],
            mention_size: false,
        }
    }

    #[test]
    fn mask_matches_exact_rasterization_oracle() {
        // independent predicate re-implementations per shape
        let size = 48;
        for shape in ShapeClass::ALL {
            let mut spec = fixed_scene();
            spec.target.shape = shape;
            spec.distractors.clear();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let s = generate_sample(&spec, &mut rng, size).unwrap();
            let r = spec.target.size.radius_frac() * size as f64;
            let (cx, cy) = (0.5 * size as f64, 0.5 * size as f64);
            for py in 0..size {
                for px in 0..size {
                    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                    let (dx, dy) = (x - cx, y - cy);
                    let want = match shape {
                        ShapeClass::Disc => (dx.powi(2) + dy.powi(2)).sqrt() <= r,
                        ShapeClass::Box => dx.abs().max(dy.abs()) <= r,
                        ShapeClass::Ring => {
                            let d = (dx.powi(2) + dy.powi(2)).sqrt();
                            (0.55 * r..=r).contains(&d)
                        }
                        ShapeClass::Tri => {
                            // same half-plane construction, opposite winding
                            let pts = [(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)];
                            let mut pos = true;
                            let mut neg = true;
                            for k in 0..3 {
                                let (x0, y0) = pts[k];
                                let (x1, y1) = pts[(k + 1) % 3];
                                let e = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
                                pos &= e >= 0.0;
                                neg &= e <= 0.0;
                            }
                            pos || neg
                        }
                    };
                    assert_eq!(
                        s.mask[py * size + px],
                        want,
                        "{shape:?} mask wrong at ({px},{py})"
                    );
                }
            }
        }
    }

    #[test]
    fn no_distractor_mask_count_is_target_area() {
        let mut spec = fixed_scene();
        spec.distractors.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = generate_sample(&spec, &mut rng, 64).unwrap();
        let count = s.mask.iter().filter(|&&b| b).count();
        let mut oracle = 0;
        for py in 0..64 {
            for px in 0..64 {
                if inside(&spec.target, 64, px, py) {
                    oracle += 1;
                }
            }
        }
        assert_eq!(count, oracle);
        assert!(count > 0);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = fixed_scene();
        let a = generate_sample(&spec, &mut ChaCha8Rng::seed_from_u64(9), 32).unwrap();
        let b = generate_sample(&spec, &mut ChaCha8Rng::seed_from_u64(9), 32).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.title, b.title);
    }

    #[test]
    fn titles_contain_attributes_verbatim_plus_noise() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = sample_scene(&mut rng, Difficulty::Hard, true, 64).unwrap();
            let title = scene.title(&mut rng);
            let words: Vec<&str> = title.split(' ').collect();
            assert!(words.contains(&scene.target.color.word()), "{title}");
            assert!(words.contains(&scene.target.shape.word()), "{title}");
            let lex = lexicon_words();
            let noise_present = words.iter().any(|w| !lex.contains(w));
            assert!(noise_present, "no noise token in '{title}'");
        }
    }

    #[test]
    fn distractors_differ_from_target_and_stay_clear() {
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = sample_scene(&mut rng, Difficulty::Hard, true, 64).unwrap();
            assert!(scene.distractors.len() >= 2);
            for d in &scene.distractors {
                assert!(
                    d.color != scene.target.color || d.shape != scene.target.shape,
                    "distractor clones the target"
                );
                assert!(separated(&scene.target, d, 64));
            }
        }
    }

    #[test]
    fn target_color_identifies_it_among_shape_sharing_distractors() {
        // when a distractor shares the shape, it must differ in color, so
        // the title's color word picks the target uniquely
        let mut found = 0;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = sample_scene(&mut rng, Difficulty::Hard, true, 64).unwrap();
            for d in &scene.distractors {
                if d.shape == scene.target.shape {
                    found += 1;
                    assert_ne!(d.color, scene.target.color);
                }
            }
        }
        assert!(found > 0, "sampling never produced shape-sharing distractors");
    }

    #[test]
    fn noise_tokens_avoid_lexicon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let tok = noise_token(&mut rng);
            assert!(!lexicon_words().contains(&tok.as_str()));
            assert!(tok.len() >= 2 && tok.len() <= 3);
        }
    }

    #[test]
    fn corpus_records_match_label_sets() {
        let sets = label_sets();
        let corpus = generate_corpus(20, 7, 64).unwrap();
        for rec in &corpus {
            assert!(sets.category_index(&rec.category).is_some());
            for (q, v) in &rec.attributes {
                assert!(sets.query_index(q).is_some());
                assert!(sets.value_index(v).is_some());
            }
        }
    }
}
