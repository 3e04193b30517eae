//! Deterministic synthetic-writer corpus.
//!
//! A procedural glyph engine (see [`glyphs`]) renders text lines under
//! per-writer style profiles. Test-split writers carry at least one glyph
//! variant outside the convex hull of every training writer's variants for
//! that character, so writer-specific letter forms that a population-trained
//! recognizer misreads are guaranteed to exist.

pub mod glyphs;
pub mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use render::{read_pgm, render_line, write_pgm, Image};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("no glyph for character {0:?}")]
    UnknownGlyph(char),
    #[error("writer {writer} has {have} lines in {split}, need {need}")]
    InsufficientLines { writer: String, split: Split, have: usize, need: usize },
    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error("not a valid PGM image: {0}")]
    BadImage(String),
}

/// Data split. A writer belongs to exactly one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Style parameters of one synthetic writer. Fully determined by
/// `(writer_id, style_seed, generator config)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WriterProfile {
    pub writer_id: String,
    pub style_seed: u64,
    /// Shear angle in radians, positive leans right.
    pub slant: f32,
    pub stroke_width: f32,
    /// Standard deviation of per-point positional noise, px.
    pub jitter: f32,
    /// Per-character morph coefficients in `[0,1]^2`.
    pub variant_map: BTreeMap<char, [f32; 2]>,
}

impl WriterProfile {
    /// Canonical printed style: no slant, no jitter, zero morphs.
    pub fn printed() -> Self {
        WriterProfile {
            writer_id: "printed".into(),
            style_seed: 0,
            slant: 0.0,
            stroke_width: 2.0,
            jitter: 0.0,
            variant_map: BTreeMap::new(),
        }
    }
}

/// One text-line sample; the image lives on disk relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSample {
    pub id: String,
    pub writer_id: String,
    pub split: Split,
    pub image: String,
    pub text: String,
}

/// K same-writer context lines plus one query from the same split.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBundle {
    pub context: Vec<LineSample>,
    pub query: LineSample,
    /// What the caller asked for; differs from `context.len()` only when the
    /// writer had too few lines and the caller fell back to all of them.
    pub requested_k: usize,
}

/// Generator configuration. The default is the small CPU-scale setup used
/// throughout the tests and experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub charset: String,
    pub train_writers: usize,
    pub val_writers: usize,
    pub test_writers: usize,
    pub lines_per_writer: usize,
    pub words_per_line: (usize, usize),
    pub height: usize,
    /// Upper bound of the partner-morph coefficient for ordinary writers.
    pub train_morph_max: f32,
    /// Range of the partner-morph coefficient for the designated
    /// idiosyncratic characters of test writers.
    pub idio_morph_range: (f32, f32),
    /// How many idiosyncratic characters each test writer carries.
    pub idio_chars: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 7,
            charset: "abcdefghijklmnopqrstuvwxyz ".into(),
            train_writers: 24,
            val_writers: 4,
            test_writers: 10,
            lines_per_writer: 40,
            words_per_line: (3, 5),
            height: 32,
            train_morph_max: 0.35,
            idio_morph_range: (0.62, 0.9),
            idio_chars: 2,
        }
    }
}

/// Frequent characters whose morph partners are also common shapes; test
/// writers draw their idiosyncratic glyphs from here.
const IDIO_POOL: &[char] = &['e', 'a', 'n', 'o', 'u', 't', 'h', 'c', 'd', 'r'];

static WORDS: OnceLock<Vec<&'static str>> = OnceLock::new();

/// The bundled word list driving line text sampling.
pub fn bundled_words() -> &'static [&'static str] {
    WORDS.get_or_init(|| include_str!("../../assets/words_en.txt").split_whitespace().collect())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derivation; independent of std hasher internals.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

fn validate(config: &GeneratorConfig) -> Result<Vec<char>, CorpusError> {
    if config.train_writers == 0 {
        return Err(CorpusError::InvalidConfig("zero train writers".into()));
    }
    if config.lines_per_writer == 0 {
        return Err(CorpusError::InvalidConfig("zero lines per writer".into()));
    }
    if config.words_per_line.0 == 0 || config.words_per_line.0 > config.words_per_line.1 {
        return Err(CorpusError::InvalidConfig(format!(
            "bad words_per_line range {:?}",
            config.words_per_line
        )));
    }
    if config.height < 16 {
        return Err(CorpusError::InvalidConfig(format!("height {} too small", config.height)));
    }
    let charset: Vec<char> = config.charset.chars().collect();
    if charset.is_empty() {
        return Err(CorpusError::InvalidConfig("empty charset".into()));
    }
    if let Some(&bad) = charset.iter().find(|&&c| !glyphs::has_glyph(c)) {
        return Err(CorpusError::InvalidConfig(format!("charset character {bad:?} has no glyph")));
    }
    Ok(charset)
}

fn usable_words(charset: &[char]) -> Vec<&'static str> {
    let set: BTreeSet<char> = charset.iter().copied().collect();
    bundled_words()
        .iter()
        .copied()
        .filter(|w| w.chars().all(|c| set.contains(&c)))
        .collect()
}

/// Writer profiles implied by a config, in generation order, with their
/// splits. Regeneration is exact; the corpus never stores profiles.
pub fn profiles_for_config(config: &GeneratorConfig) -> Result<Vec<(WriterProfile, Split)>, CorpusError> {
    let charset = validate(config)?;
    let glyph_chars: Vec<char> = charset.iter().copied().filter(|&c| c != ' ').collect();
    let mut out = Vec::new();
    let splits = [
        (Split::Train, config.train_writers),
        (Split::Val, config.val_writers),
        (Split::Test, config.test_writers),
    ];
    for (split, count) in splits {
        for idx in 0..count {
            let writer_id = format!("{split}{idx:03}");
            let style_seed = mix_seed(config.seed, mix_seed(split_tag(split), idx as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
            let slant = rng.random_range(-0.16f32..0.2);
            let stroke_width = rng.random_range(1.5f32..2.4);
            let jitter = rng.random_range(0.08f32..0.3);
            let mut variant_map = BTreeMap::new();
            for &c in &glyph_chars {
                let morph = rng.random_range(0.0..config.train_morph_max);
                let style = rng.random_range(0.0f32..1.0);
                variant_map.insert(c, [morph, style]);
            }
            if split == Split::Test {
                let pool: Vec<char> =
                    IDIO_POOL.iter().copied().filter(|c| glyph_chars.contains(c)).collect();
                let picks = config.idio_chars.min(pool.len());
                let mut order: Vec<usize> = (0..pool.len()).collect();
                for i in 0..picks {
                    let j = rng.random_range(i..order.len());
                    order.swap(i, j);
                }
                for &oi in order.iter().take(picks) {
                    let c = pool[oi];
                    let morph = rng.random_range(config.idio_morph_range.0..config.idio_morph_range.1);
                    variant_map.get_mut(&c).expect("pool ⊆ charset")[0] = morph;
                }
            }
            out.push((WriterProfile { writer_id, style_seed, slant, stroke_width, jitter, variant_map }, split));
        }
    }
    Ok(out)
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0x7261,
        Split::Val => 0x7661,
        Split::Test => 0x7465,
    }
}

/// The corpus index: every line sample plus the on-disk root.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub lines: Vec<LineSample>,
}

impl Manifest {
    pub fn load(manifest_path: &Path) -> Result<Manifest, CorpusError> {
        let root = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let reader = BufReader::new(File::open(manifest_path)?);
        let mut lines = Vec::new();
        for (i, row) in reader.lines().enumerate() {
            let row = row?;
            if row.trim().is_empty() {
                continue;
            }
            let sample: LineSample = serde_json::from_str(&row)
                .map_err(|e| CorpusError::ManifestParse { line: i + 1, msg: e.to_string() })?;
            lines.push(sample);
        }
        Ok(Manifest { root, lines })
    }

    pub fn save(&self, manifest_path: &Path) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(manifest_path)?);
        for sample in &self.lines {
            serde_json::to_writer(&mut w, sample)
                .map_err(|e| CorpusError::ManifestParse { line: 0, msg: e.to_string() })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writer ids present in a split, in first-appearance order.
    pub fn writers_in(&self, split: Split) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for l in &self.lines {
            if l.split == split && seen.insert(l.writer_id.as_str()) {
                out.push(l.writer_id.as_str());
            }
        }
        out
    }

    pub fn lines_of(&self, writer_id: &str, split: Split) -> Vec<&LineSample> {
        self.lines.iter().filter(|l| l.writer_id == writer_id && l.split == split).collect()
    }

    pub fn load_image(&self, sample: &LineSample) -> Result<Image, CorpusError> {
        read_pgm(&self.root.join(&sample.image))
    }
}

/// Generates the full corpus under `out_dir`: `manifest.jsonl` plus one PGM
/// per line. Deterministic in `(config)`; rendering runs in parallel with
/// per-line seeds.
pub fn generate_corpus(config: &GeneratorConfig, out_dir: &Path) -> Result<Manifest, CorpusError> {
    let charset = validate(config)?;
    let words = usable_words(&charset);
    if words.len() < 20 {
        return Err(CorpusError::InvalidConfig(format!(
            "only {} bundled words fit charset {:?}",
            words.len(),
            config.charset
        )));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    let profiles = profiles_for_config(config)?;

    let mut jobs = Vec::new();
    for (profile, split) in &profiles {
        for li in 0..config.lines_per_writer {
            jobs.push((profile, *split, li));
        }
    }
    let rendered: Vec<(LineSample, Image)> = jobs
        .par_iter()
        .map(|(profile, split, li)| {
            let text_seed = mix_seed(profile.style_seed, 0xA000 + *li as u64);
            let mut trng = ChaCha8Rng::seed_from_u64(text_seed);
            let n_words = trng.random_range(config.words_per_line.0..=config.words_per_line.1);
            let text = (0..n_words)
                .map(|_| words[trng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ");
            let render_seed = mix_seed(profile.style_seed, 0xB000 + *li as u64);
            let image = render_line(&text, profile, config.height, render_seed)
                .expect("charset validated against glyph set");
            let id = format!("{}_l{li:03}", profile.writer_id);
            let sample = LineSample {
                id: id.clone(),
                writer_id: profile.writer_id.clone(),
                split: *split,
                image: format!("images/{id}.pgm"),
                text,
            };
            (sample, image)
        })
        .collect();

    let mut manifest = Manifest { root: out_dir.to_path_buf(), lines: Vec::with_capacity(rendered.len()) };
    for (sample, image) in rendered {
        write_pgm(&out_dir.join(&sample.image), &image)?;
        manifest.lines.push(sample);
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Uniformly samples K distinct context lines plus one query from the same
/// writer and split, without any content filtering.
pub fn sample_context(
    manifest: &Manifest,
    writer_id: &str,
    split: Split,
    k: usize,
    rng: &mut impl Rng,
) -> Result<ContextBundle, CorpusError> {
    let lines = manifest.lines_of(writer_id, split);
    if lines.len() < k + 1 {
        return Err(CorpusError::InsufficientLines {
            writer: writer_id.to_string(),
            split,
            have: lines.len(),
            need: k + 1,
        });
    }
    let query_idx = rng.random_range(0..lines.len());
    let mut pool: Vec<usize> = (0..lines.len()).filter(|&i| i != query_idx).collect();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    Ok(ContextBundle {
        context: pool[..k].iter().map(|&i| lines[i].clone()).collect(),
        query: lines[query_idx].clone(),
        requested_k: k,
    })
}

/// Monte-Carlo estimate of the fraction of query characters absent from the
/// sampled context, per K.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CoverageReport {
    pub k: usize,
    pub trials: usize,
    pub mean_absent_fraction: f64,
}

pub fn coverage_stats(
    manifest: &Manifest,
    split: Split,
    k: usize,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<CoverageReport, CorpusError> {
    if trials == 0 {
        return Err(CorpusError::InvalidConfig("coverage_stats needs trials >= 1".into()));
    }
    let writers: Vec<&str> = manifest
        .writers_in(split)
        .into_iter()
        .filter(|w| manifest.lines_of(w, split).len() >= k + 1)
        .collect();
    if writers.is_empty() {
        return Err(CorpusError::InsufficientLines {
            writer: "<any>".into(),
            split,
            have: 0,
            need: k + 1,
        });
    }
    let mut total = 0.0f64;
    for _ in 0..trials {
        let writer = writers[rng.random_range(0..writers.len())];
        let bundle = sample_context(manifest, writer, split, k, rng)?;
        let mut covered: BTreeSet<char> = BTreeSet::new();
        for line in &bundle.context {
            covered.extend(line.text.chars());
        }
        let query: Vec<char> = bundle.query.text.chars().collect();
        if query.is_empty() {
            continue;
        }
        let absent = query.iter().filter(|c| !covered.contains(c)).count();
        total += absent as f64 / query.len() as f64;
    }
    Ok(CoverageReport { k, trials, mean_absent_fraction: total / trials as f64 })
}

// ── Convex-hull check for the idiosyncratic-glyph guarantee ─────────────────

/// True when `p` lies inside (or on) the convex hull of `cloud`.
pub fn hull_contains(cloud: &[(f64, f64)], p: (f64, f64)) -> bool {
    const EPS: f64 = 1e-9;
    if cloud.is_empty() {
        return false;
    }
    let hull = convex_hull(cloud);
    match hull.len() {
        1 => (p.0 - hull[0].0).abs() <= EPS && (p.1 - hull[0].1).abs() <= EPS,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross.abs() > EPS {
                return false;
            }
            let dot = (p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1);
            let len2 = (b.0 - a.0).powi(2) + (b.1 - a.1).powi(2);
            (-EPS..=len2 + EPS).contains(&dot)
        }
        _ => {
            for i in 0..hull.len() {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                if cross < -EPS {
                    return false;
                }
            }
            true
        }
    }
}

/// Andrew's monotone chain; returns counter-clockwise hull vertices.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Checks the idiosyncratic-glyph guarantee: every test writer has at least
/// one character whose variant coefficients fall outside the convex hull of
/// all training writers' coefficients for that character.
pub fn verify_idiosyncrasy(profiles: &[(WriterProfile, Split)]) -> bool {
    let train: Vec<&WriterProfile> =
        profiles.iter().filter(|(_, s)| *s == Split::Train).map(|(p, _)| p).collect();
    profiles
        .iter()
        .filter(|(_, s)| *s == Split::Test)
        .all(|(test_profile, _)| {
            test_profile.variant_map.iter().any(|(c, coeffs)| {
                let cloud: Vec<(f64, f64)> = train
                    .iter()
                    .filter_map(|tp| tp.variant_map.get(c))
                    .map(|v| (v[0] as f64, v[1] as f64))
                    .collect();
                !cloud.is_empty()
                    && !hull_contains(&cloud, (coeffs[0] as f64, coeffs[1] as f64))
            })
        })
}
