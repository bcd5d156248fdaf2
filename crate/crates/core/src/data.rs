//! Deterministic synthetic scenes: a textured background with seeded colored
//! shapes, per-pixel class labels, condition transforms (fog, night, rain,
//! snow), split construction with disjoint seed ranges, and nested few-shot
//! sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("classes {a} and {b} have colors closer than 0.1 in max-norm; scene would be unlearnable")]
    PaletteTooClose { a: usize, b: usize },
    #[error("invalid scene spec: {0}")]
    BadSceneSpec(String),
    #[error("splits `{a}` and `{b}` have overlapping seed ranges")]
    OverlappingSeeds { a: String, b: String },
    #[error("split `{0}` has size 0")]
    EmptySplit(String),
    #[error("few-shot pool has only {have} images featuring class `{class}`, need {need}")]
    InsufficientPool {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("word `{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error("split class lists disagree: `{a}` vs `{b}`")]
    MismatchedClasses { a: String, b: String },
    #[error("condition `{0}` not recognized")]
    BadCondition(String),
    #[error("io: {0}")]
    Io(String),
}

/// How a class is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// Full-frame background texture; only valid for class 0.
    Texture,
    Rectangle,
    Disk,
    Triangle,
}

/// Pretraining-frequency designation. Background classes get their text
/// supervision dropped most pretraining steps under an imbalanced corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRole {
    Foreground,
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub color: [f64; 3],
    pub kind: ShapeKind,
    pub role: ClassRole,
}

/// Global photometric transform applied after shape rasterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Clean,
    /// Convex blend toward gray 0.8 by the given strength in [0, 1].
    Fog(f64),
    /// Brightness scaled by 0.3.
    Night,
    /// Seeded bright diagonal streaks, count given.
    Rain(usize),
    /// Seeded white speckles, count given.
    Snow(usize),
}

impl Condition {
    pub fn parse(s: &str) -> Result<Condition, DataError> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let cond = match (head, arg) {
            ("clean", None) => Condition::Clean,
            ("night", None) => Condition::Night,
            ("fog", a) => Condition::Fog(
                a.unwrap_or("0.5")
                    .parse()
                    .map_err(|_| DataError::BadCondition(s.to_string()))?,
            ),
            ("rain", a) => Condition::Rain(
                a.unwrap_or("8")
                    .parse()
                    .map_err(|_| DataError::BadCondition(s.to_string()))?,
            ),
            ("snow", a) => Condition::Snow(
                a.unwrap_or("40")
                    .parse()
                    .map_err(|_| DataError::BadCondition(s.to_string()))?,
            ),
            _ => return Err(DataError::BadCondition(s.to_string())),
        };
        Ok(cond)
    }

    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "clean".into(),
            Condition::Fog(s) => format!("fog:{s}"),
            Condition::Night => "night".into(),
            Condition::Rain(n) => format!("rain:{n}"),
            Condition::Snow(n) => format!("snow:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    /// Inclusive range for the number of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    /// Inclusive range for shape half-extents, in pixels.
    pub shape_half_extent: (f64, f64),
    pub noise_sigma: f64,
    pub condition: Condition,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.len() < 2 {
            return Err(DataError::BadSceneSpec(
                "need a background class and at least one foreground class".into(),
            ));
        }
        if self.classes[0].kind != ShapeKind::Texture {
            return Err(DataError::BadSceneSpec(
                "class 0 must be the background texture".into(),
            ));
        }
        if self.classes[1..].iter().any(|c| c.kind == ShapeKind::Texture) {
            return Err(DataError::BadSceneSpec(
                "only class 0 may be a texture".into(),
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.color.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(DataError::BadSceneSpec(format!(
                    "class {i} color outside [0,1]"
                )));
            }
        }
        for a in 0..self.classes.len() {
            for b in a + 1..self.classes.len() {
                let linf = (0..3)
                    .map(|c| (self.classes[a].color[c] - self.classes[b].color[c]).abs())
                    .fold(0.0, f64::max);
                if linf < 0.1 {
                    return Err(DataError::PaletteTooClose { a, b });
                }
            }
        }
        if self.shapes_per_image.0 < 1 || self.shapes_per_image.0 > self.shapes_per_image.1 {
            return Err(DataError::BadSceneSpec("bad shapes_per_image range".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::BadSceneSpec("negative noise sigma".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_roles(&self) -> Vec<ClassRole> {
        self.classes.iter().map(|c| c.role).collect()
    }
}

/// One image with its per-pixel labels, pixel-aligned by construction.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Shape `[size, size, 3]`, values in [0, 1].
    pub image: Tensor,
    /// Row-major `size * size` class indices.
    pub labels: Vec<usize>,
}

impl Sample {
    /// Mirror image and labels left-to-right.
    pub fn flipped_horizontal(&self, size: usize) -> Sample {
        let src = self.image.data();
        let mut img = vec![0.0; src.len()];
        let mut labels = vec![0usize; self.labels.len()];
        for y in 0..size {
            for x in 0..size {
                let xr = size - 1 - x;
                labels[y * size + x] = self.labels[y * size + xr];
                for c in 0..3 {
                    img[(y * size + x) * 3 + c] = src[(y * size + xr) * 3 + c];
                }
            }
        }
        Sample {
            image: Tensor::from_parts(vec![size, size, 3], img),
            labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub class_roles: Vec<ClassRole>,
    pub split: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Rasterize one seeded scene. Draw order is fixed: background texture,
/// shapes in painter's order, condition transform, Gaussian pixel noise.
pub fn generate_scene(seed: u64, spec: &SceneSpec, size: usize) -> Result<Sample, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let mut img = vec![0.0f64; n * 3];
    let mut labels = vec![0usize; n];

    // background texture: low-frequency sinusoidal shading of the base color
    let base = spec.classes[0].color;
    let gx: f64 = rng.random_range(-1.0..1.0);
    let gy: f64 = rng.random_range(-1.0..1.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let t = std::f64::consts::TAU
                * (gx * x as f64 / size as f64 + gy * y as f64 / size as f64)
                + phase;
            let shade = 0.85 + 0.25 * t.sin();
            for c in 0..3 {
                img[(y * size + x) * 3 + c] = clamp01(base[c] * shade);
            }
        }
    }

    // shapes, later ones occluding earlier ones
    let n_shapes = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..spec.classes.len());
        let cy: f64 = rng.random_range(0.0..size as f64);
        let cx: f64 = rng.random_range(0.0..size as f64);
        let (lo, hi) = spec.shape_half_extent;
        let ey: f64 = rng.random_range(lo..=hi);
        let ex: f64 = rng.random_range(lo..=hi);
        let brightness: f64 = rng.random_range(0.9..1.1);
        let kind = spec.classes[class].kind;
        let color = spec.classes[class].color;
        for y in 0..size {
            for x in 0..size {
                let py = y as f64 + 0.5;
                let px = x as f64 + 0.5;
                let inside = match kind {
                    ShapeKind::Rectangle => (px - cx).abs() <= ex && (py - cy).abs() <= ey,
                    ShapeKind::Disk => {
                        let r = ex.max(ey);
                        (px - cx).powi(2) + (py - cy).powi(2) <= r * r
                    }
                    ShapeKind::Triangle => {
                        let r = ex.max(ey);
                        point_in_triangle(
                            (px, py),
                            (cx, cy - r),
                            (cx - r, cy + r),
                            (cx + r, cy + r),
                        )
                    }
                    ShapeKind::Texture => false,
                };
                if inside {
                    labels[y * size + x] = class;
                    for c in 0..3 {
                        img[(y * size + x) * 3 + c] = clamp01(color[c] * brightness);
                    }
                }
            }
        }
    }

    // condition transform; labels are never touched
    match spec.condition {
        Condition::Clean => {}
        Condition::Fog(strength) => {
            for v in img.iter_mut() {
                *v = clamp01((1.0 - strength) * *v + strength * 0.8);
            }
        }
        Condition::Night => {
            for v in img.iter_mut() {
                *v *= 0.3;
            }
        }
        Condition::Rain(streaks) => {
            let streak = [0.85, 0.87, 0.95];
            for _ in 0..streaks {
                let offset: i64 = rng.random_range(-(size as i64)..size as i64);
                for y in 0..size as i64 {
                    let x = y + offset;
                    if (0..size as i64).contains(&x) {
                        let p = (y as usize * size + x as usize) * 3;
                        for c in 0..3 {
                            img[p + c] = streak[c];
                        }
                    }
                }
            }
        }
        Condition::Snow(speckles) => {
            for _ in 0..speckles {
                let y = rng.random_range(0..size);
                let x = rng.random_range(0..size);
                let p = (y * size + x) * 3;
                for c in 0..3 {
                    img[p + c] = 0.95;
                }
            }
        }
    }

    // pixel noise
    if spec.noise_sigma > 0.0 {
        use rand_distr::{Distribution, StandardNormal};
        for v in img.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = clamp01(*v + spec.noise_sigma * z);
        }
    }

    Ok(Sample {
        image: Tensor::from_parts(vec![size, size, 3], img),
        labels,
    })
}

fn edge_sign(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1)
}

fn point_in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let d1 = edge_sign(p, a, b);
    let d2 = edge_sign(p, b, c);
    let d3 = edge_sign(p, c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// One split request: `size` scenes of `spec` seeded `seed_base..seed_base+size`.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub name: String,
    pub scene: SceneSpec,
    pub size: usize,
    pub seed_base: u64,
}

/// Build datasets with pairwise-disjoint per-sample seed ranges. All splits
/// must agree on class names (palette, noise, and condition may shift).
pub fn make_splits(splits: &[SplitSpec], image_size: usize) -> Result<Vec<Dataset>, DataError> {
    for s in splits {
        if s.size == 0 {
            return Err(DataError::EmptySplit(s.name.clone()));
        }
        s.scene.validate()?;
    }
    for a in 0..splits.len() {
        for b in a + 1..splits.len() {
            let (sa, sb) = (&splits[a], &splits[b]);
            let a_end = sa.seed_base + sa.size as u64;
            let b_end = sb.seed_base + sb.size as u64;
            if sa.seed_base < b_end && sb.seed_base < a_end {
                return Err(DataError::OverlappingSeeds {
                    a: sa.name.clone(),
                    b: sb.name.clone(),
                });
            }
            if sa.scene.class_names() != sb.scene.class_names() {
                return Err(DataError::MismatchedClasses {
                    a: sa.name.clone(),
                    b: sb.name.clone(),
                });
            }
        }
    }
    let mut out = Vec::with_capacity(splits.len());
    for s in splits {
        let samples = (0..s.size)
            .map(|i| generate_scene(s.seed_base + i as u64, &s.scene, image_size))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Dataset {
            samples,
            class_names: s.scene.class_names(),
            class_roles: s.scene.class_roles(),
            split: s.name.clone(),
            seed: s.seed_base,
        });
    }
    Ok(out)
}

/// Seeded few-shot selection: scan a seeded permutation of the pool and keep
/// any image featuring a class still short of its quota; an image counts for
/// every class present in it. Quotas grow in stages of 4 so the k=4 selection
/// is contained in k=8, and so on up the supported ladder {4, 8, 12, 16}.
pub fn few_shot_sample(pool: &Dataset, k: usize, seed: u64) -> Result<Dataset, DataError> {
    let n_classes = pool.num_classes();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let present: Vec<Vec<bool>> = pool
        .samples
        .iter()
        .map(|s| {
            let mut p = vec![false; n_classes];
            for &l in &s.labels {
                p[l] = true;
            }
            p
        })
        .collect();

    let mut selected = vec![false; pool.len()];
    let mut counts = vec![0usize; n_classes];
    let mut stage = 0usize;
    while stage < k {
        stage = (stage + 4).min(k);
        for &idx in &order {
            if selected[idx] {
                continue;
            }
            let needs = present[idx]
                .iter()
                .enumerate()
                .any(|(c, &has)| has && counts[c] < stage);
            if needs {
                selected[idx] = true;
                for (c, &has) in present[idx].iter().enumerate() {
                    if has {
                        counts[c] += 1;
                    }
                }
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count < stage {
                return Err(DataError::InsufficientPool {
                    class: pool.class_names[c].clone(),
                    have: count,
                    need: stage,
                });
            }
        }
    }

    let samples = (0..pool.len())
        .filter(|&i| selected[i])
        .map(|i| pool.samples[i].clone())
        .collect();
    Ok(Dataset {
        samples,
        class_names: pool.class_names.clone(),
        class_roles: pool.class_roles.clone(),
        split: format!("{}-{}shot", pool.split, k),
        seed,
    })
}

/// Reduce a pixel label map to the patch grid by majority vote, ties broken
/// toward the lowest class index.
pub fn majority_downsample(labels: &[usize], size: usize, patch: usize) -> Vec<usize> {
    debug_assert_eq!(labels.len(), size * size);
    debug_assert_eq!(size % patch, 0);
    let grid = size / patch;
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut out = vec![0usize; grid * grid];
    let mut votes = vec![0usize; n_classes];
    for gy in 0..grid {
        for gx in 0..grid {
            votes.iter_mut().for_each(|v| *v = 0);
            for dy in 0..patch {
                for dx in 0..patch {
                    votes[labels[(gy * patch + dy) * size + gx * patch + dx]] += 1;
                }
            }
            let mut best = 0usize;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            out[gy * grid + gx] = best;
        }
    }
    out
}

// ── export ──────────────────────────────────────────────────────────────

/// Binary PPM (P6) export for visual inspection.
pub fn write_ppm(sample: &Sample, size: usize, path: &std::path::Path) -> Result<(), DataError> {
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    for &v in sample.image.data() {
        bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(path, bytes).map_err(|e| DataError::Io(e.to_string()))
}

/// Plain-text label map, one row per line.
pub fn write_label_map(
    sample: &Sample,
    size: usize,
    path: &std::path::Path,
) -> Result<(), DataError> {
    let mut out = String::new();
    for y in 0..size {
        let row: Vec<String> = (0..size)
            .map(|x| sample.labels[y * size + x].to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| DataError::Io(e.to_string()))
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Word-level vocabulary for class-name prompts.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    /// The fixed lexicon every experiment shares: the toy class names plus
    /// filler words, 38 entries total.
    pub fn toy() -> Vocab {
        let words = [
            "backdrop", "crate", "disk", "wedge", "brick", "puck", "field", "slab", "cone",
            "ring", "bar", "dot", "plate", "block", "chip", "tile", "post", "beam", "panel",
            "strip", "knob", "stud", "peg", "rail", "band", "core", "shell", "node", "cell",
            "grid", "mesh", "patch", "zone", "spot", "mark", "edge", "face", "body",
        ];
        Vocab {
            words: words.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Whitespace-split lookup; any unknown word rejects the whole name.
    pub fn tokenize(&self, name: &str) -> Result<Vec<usize>, DataError> {
        name.split_whitespace()
            .map(|w| {
                self.words
                    .iter()
                    .position(|v| v == w)
                    .ok_or_else(|| DataError::UnknownWord(w.to_string()))
            })
            .collect()
    }
}

// ── the toy benchmark ───────────────────────────────────────────────────

/// Canned class palettes and scene specs used by the experiment suites.
pub mod toy {
    use super::*;

    /// Rotate channels toward (g, b, r) by `shift` and clamp; `shift`=0 is
    /// the source palette.
    fn shifted_color(c: [f64; 3], shift: f64) -> [f64; 3] {
        let rot = [c[1], c[2], c[0]];
        [
            clamp01((1.0 - shift) * c[0] + shift * rot[0]),
            clamp01((1.0 - shift) * c[1] + shift * rot[1]),
            clamp01((1.0 - shift) * c[2] + shift * rot[2]),
        ]
    }

    /// Six classes: one background texture plus five foreground shapes.
    pub fn class_specs(shift: f64) -> Vec<ClassSpec> {
        let base: [(&str, [f64; 3], ShapeKind, ClassRole); 6] = [
            (
                "backdrop",
                [0.30, 0.32, 0.28],
                ShapeKind::Texture,
                ClassRole::Background,
            ),
            (
                "crate",
                [0.85, 0.15, 0.15],
                ShapeKind::Rectangle,
                ClassRole::Foreground,
            ),
            (
                "disk",
                [0.15, 0.75, 0.20],
                ShapeKind::Disk,
                ClassRole::Foreground,
            ),
            (
                "wedge",
                [0.15, 0.30, 0.85],
                ShapeKind::Triangle,
                ClassRole::Foreground,
            ),
            (
                "brick",
                [0.85, 0.80, 0.15],
                ShapeKind::Rectangle,
                ClassRole::Foreground,
            ),
            (
                "puck",
                [0.75, 0.15, 0.80],
                ShapeKind::Disk,
                ClassRole::Foreground,
            ),
        ];
        base.iter()
            .map(|(name, color, kind, role)| ClassSpec {
                name: name.to_string(),
                color: shifted_color(*color, shift),
                kind: *kind,
                role: *role,
            })
            .collect()
    }

    pub fn scene(shift: f64, noise_sigma: f64, condition: Condition) -> SceneSpec {
        SceneSpec {
            classes: class_specs(shift),
            shapes_per_image: (2, 5),
            shape_half_extent: (5.0, 10.0),
            noise_sigma,
            condition,
        }
    }
}
