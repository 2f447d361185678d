//! Procedural generator for a deterministic, oracle-checkable corpus of
//! shape scenes: disjoint colored shapes on a dark background, uniquely
//! resolving referring expressions, edit triplets, and interactive cues.
//!
//! Every sample is a pure function of `(seed, config)` through the
//! splitmix64 generator, so corpora are byte-identical across runs and
//! platforms.

pub mod expr;
mod io;
pub mod raster;

pub use io::{read_corpus, write_corpus, LoadedSample, Manifest};
pub use raster::{rasterize, ShapeKind};

use crate::grid::{ImageU8, Mask};
use crate::rng::SplitMix64;

pub const COLOR_NAMES: [&str; 7] = [
    "red", "green", "blue", "yellow", "purple", "cyan", "orange",
];

pub const COLOR_RGB: [[u8; 3]; 7] = [
    [220, 50, 47],
    [0, 160, 70],
    [35, 90, 220],
    [235, 200, 40],
    [150, 60, 200],
    [60, 200, 220],
    [240, 140, 30],
];

const BACKGROUNDS: [[u8; 3]; 3] = [[40, 40, 40], [58, 60, 66], [26, 28, 32]];

pub fn color_index(name: &str) -> Option<usize> {
    COLOR_NAMES.iter().position(|&c| c == name)
}

#[derive(Debug, thiserror::Error)]
pub enum ShapesError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("could not build an unambiguous scene in {0} attempts")]
    Rejection(usize),
    #[error("instance index {index} out of range (have {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("corpus storage: {0}")]
    Storage(String),
    #[error("annotation parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub canvas_w: usize,
    pub canvas_h: usize,
    pub n_shapes_min: usize,
    pub n_shapes_max: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            canvas_w: 128,
            canvas_h: 128,
            n_shapes_min: 1,
            n_shapes_max: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ShapesError> {
        let ok_dim = |d: usize| (32..=256).contains(&d);
        if !ok_dim(self.canvas_w) || !ok_dim(self.canvas_h) {
            return Err(ShapesError::Config(format!(
                "canvas {}x{} outside [32, 256]",
                self.canvas_w, self.canvas_h
            )));
        }
        if self.n_shapes_min < 1 || self.n_shapes_max > 6 || self.n_shapes_min > self.n_shapes_max
        {
            return Err(ShapesError::Config(format!(
                "n_shapes [{}, {}] outside [1, 6]",
                self.n_shapes_min, self.n_shapes_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    /// Index into [`COLOR_NAMES`].
    pub color: usize,
    pub cx: i64,
    pub cy: i64,
    pub size: u32,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: (usize, usize),
    pub background: [u8; 3],
    pub instances: Vec<ShapeInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub scene: SceneSpec,
    pub image: ImageU8,
    pub captions: Vec<String>,
    /// (expression text, instance index)
    pub referring_expressions: Vec<(String, usize)>,
    /// Sorted unique kind names present in the scene.
    pub category_list: Vec<String>,
}

impl Sample {
    pub fn instances(&self) -> &[ShapeInstance] {
        &self.scene.instances
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Recolor,
    Remove,
    Replace,
}

impl EditKind {
    pub const ALL: [EditKind; 3] = [EditKind::Recolor, EditKind::Remove, EditKind::Replace];

    pub fn name(self) -> &'static str {
        match self {
            EditKind::Recolor => "recolor",
            EditKind::Remove => "remove",
            EditKind::Replace => "replace",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct EditTriplet {
    pub source: ImageU8,
    pub instruction: String,
    pub target: ImageU8,
    pub gt_mask: Mask,
    pub edit_kind: EditKind,
    /// Index of the edited instance in the source scene.
    pub instance_index: usize,
    /// For recolor edits: palette index of the new color.
    pub new_color: Option<usize>,
    /// For replace edits: the new shape kind.
    pub new_kind: Option<ShapeKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CueMode {
    Point,
    Box,
    Scribble,
    Mask,
}

impl CueMode {
    pub const ALL: [CueMode; 4] = [CueMode::Point, CueMode::Box, CueMode::Scribble, CueMode::Mask];

    pub fn name(self) -> &'static str {
        match self {
            CueMode::Point => "point",
            CueMode::Box => "box",
            CueMode::Scribble => "scribble",
            CueMode::Mask => "mask",
        }
    }
}

#[derive(Debug, Clone)]
pub enum CuePayload {
    Point(usize, usize),
    /// (x0, y0, x1, y1), exclusive upper bounds; full frame is (0, 0, W, H).
    Box(usize, usize, usize, usize),
    Scribble(Vec<(usize, usize)>),
    Mask(Mask),
}

#[derive(Debug, Clone)]
pub struct Cue {
    pub mode: CueMode,
    pub payload: CuePayload,
}

const MAX_SCENE_RETRIES: usize = 100;
const MAX_PLACE_RETRIES: usize = 100;

/// Deterministic scene generation; all invariants (disjoint masks, >= 16
/// foreground pixels, uniquely-resolving expressions) hold on success.
pub fn generate_sample(seed: u64, config: &GenConfig) -> Result<Sample, ShapesError> {
    config.validate()?;
    let mut rng = SplitMix64::stream(seed, "shapesworld.scene");
    for _ in 0..MAX_SCENE_RETRIES {
        if let Some(sample) = try_scene(seed, config, &mut rng) {
            return Ok(sample);
        }
    }
    Err(ShapesError::Rejection(MAX_SCENE_RETRIES))
}

fn try_scene(seed: u64, config: &GenConfig, rng: &mut SplitMix64) -> Option<Sample> {
    let (w, h) = (config.canvas_w, config.canvas_h);
    let n = rng.range_inclusive(config.n_shapes_min, config.n_shapes_max);
    let background = BACKGROUNDS[rng.below(BACKGROUNDS.len())];
    let min_side = w.min(h);
    let size_lo = (min_side / 16).max(5);
    let size_hi = (min_side / 5).max(size_lo + 1);

    let mut instances: Vec<ShapeInstance> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..MAX_PLACE_RETRIES {
            let kind = ShapeKind::ALL[rng.below(3)];
            let color = rng.below(COLOR_NAMES.len());
            let size = rng.range_inclusive(size_lo, size_hi) as u32;
            let margin = size as usize + 2;
            if w <= 2 * margin || h <= 2 * margin {
                continue;
            }
            let cx = rng.range_inclusive(margin, w - margin) as i64;
            let cy = rng.range_inclusive(margin, h - margin) as i64;
            // disjointness via square envelopes with a 2 px gap; replace
            // edits swap kinds inside the same envelope, so targets stay
            // disjoint too
            let clear = instances.iter().all(|o| {
                let gap = (size as i64 + o.size as i64) + 3;
                (cx - o.cx).abs() > gap || (cy - o.cy).abs() > gap
            });
            if !clear {
                continue;
            }
            let mask = rasterize(kind, cx, cy, size, w, h);
            if mask.fg_count() < 16 {
                continue;
            }
            instances.push(ShapeInstance {
                kind,
                color,
                cx,
                cy,
                size,
                mask,
            });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    // one uniquely-resolving expression per instance, by rejection
    let mut referring = Vec::with_capacity(instances.len());
    for i in 0..instances.len() {
        let mut found = None;
        for cand in expr::candidate_expressions(&instances, i) {
            if expr::resolve(&cand, &instances) == Ok(i) {
                found = Some(cand);
                break;
            }
        }
        referring.push((found?, i));
    }

    let mut image = ImageU8::filled(w, h, background);
    for inst in &instances {
        let c = COLOR_RGB[inst.color];
        for (x, y) in inst.mask.fg_pixels() {
            image.set(x, y, c);
        }
    }

    let caption = instances
        .iter()
        .map(|i| format!("a {} {}", COLOR_NAMES[i.color], i.kind.name()))
        .collect::<Vec<_>>()
        .join(" and ");

    let mut kinds: Vec<String> = instances
        .iter()
        .map(|i| i.kind.name().to_string())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    kinds.sort();

    Some(Sample {
        scene: SceneSpec {
            seed,
            canvas: (w, h),
            background,
            instances,
        },
        image,
        captions: vec![caption],
        referring_expressions: referring,
        category_list: kinds,
    })
}

/// Build an edit triplet for one instance. The instruction reuses the
/// instance's uniquely-resolving referring expression.
pub fn make_edit_pair(
    sample: &Sample,
    edit_kind: EditKind,
    instance_index: usize,
) -> Result<EditTriplet, ShapesError> {
    let insts = sample.instances();
    if instance_index >= insts.len() {
        return Err(ShapesError::IndexOutOfRange {
            index: instance_index,
            len: insts.len(),
        });
    }
    let inst = &insts[instance_index];
    let expr_text = sample
        .referring_expressions
        .iter()
        .find(|(_, i)| *i == instance_index)
        .map(|(t, _)| t.clone())
        .unwrap_or_else(|| {
            format!("the {} {}", COLOR_NAMES[inst.color], inst.kind.name())
        });
    let bg = sample.scene.background;
    let mut target = sample.image.clone();
    let (instruction, gt_mask, new_color, new_kind) = match edit_kind {
        EditKind::Recolor => {
            let nc = (inst.color + 1) % COLOR_NAMES.len();
            for (x, y) in inst.mask.fg_pixels() {
                target.set(x, y, COLOR_RGB[nc]);
            }
            (
                format!("recolor {} to {}", expr_text, COLOR_NAMES[nc]),
                inst.mask.clone(),
                Some(nc),
                None,
            )
        }
        EditKind::Remove => {
            for (x, y) in inst.mask.fg_pixels() {
                target.set(x, y, bg);
            }
            (format!("remove {expr_text}"), inst.mask.clone(), None, None)
        }
        EditKind::Replace => {
            let nk = ShapeKind::ALL[(inst.kind.index() + 1) % 3];
            let new_mask = rasterize(
                nk,
                inst.cx,
                inst.cy,
                inst.size,
                sample.scene.canvas.0,
                sample.scene.canvas.1,
            );
            for (x, y) in inst.mask.fg_pixels() {
                target.set(x, y, bg);
            }
            for (x, y) in new_mask.fg_pixels() {
                target.set(x, y, COLOR_RGB[inst.color]);
            }
            let union = inst.mask.union(&new_mask);
            (
                format!("replace {expr_text} with a {}", nk.name()),
                union,
                None,
                Some(nk),
            )
        }
    };
    Ok(EditTriplet {
        source: sample.image.clone(),
        instruction,
        target,
        gt_mask,
        edit_kind,
        instance_index,
        new_color,
        new_kind,
    })
}

/// Deterministic interactive cue for a mask.
pub fn derive_cue(mask: &Mask, mode: CueMode, seed: u64) -> Result<Cue, ShapesError> {
    let fg = mask.fg_pixels();
    if fg.is_empty() {
        return Err(ShapesError::Degenerate("cue from empty mask".into()));
    }
    let mut rng = SplitMix64::stream(seed, "shapesworld.cue");
    let payload = match mode {
        CueMode::Point => {
            let (x, y) = fg[rng.below(fg.len())];
            CuePayload::Point(x, y)
        }
        CueMode::Box => {
            let (x0, y0, x1, y1) = mask.bbox().unwrap();
            CuePayload::Box(x0, y0, x1, y1)
        }
        CueMode::Scribble => {
            let (mut x, mut y) = fg[rng.below(fg.len())];
            let mut pts = vec![(x, y)];
            for _ in 0..48 {
                let (dx, dy) = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)][rng.below(4)];
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= mask.w as i64 || ny >= mask.h as i64 {
                    continue;
                }
                if mask.get(nx as usize, ny as usize) {
                    x = nx as usize;
                    y = ny as usize;
                    pts.push((x, y));
                }
            }
            CuePayload::Scribble(pts)
        }
        CueMode::Mask => CuePayload::Mask(mask.clone()),
    };
    Ok(Cue { mode, payload })
}

/// The edit list a corpus records for a sample: one edit per instance with
/// the kind cycling deterministically.
pub fn default_edits(sample: &Sample) -> Vec<(EditKind, usize)> {
    (0..sample.instances().len())
        .map(|i| {
            let k = EditKind::ALL[(sample.scene.seed as usize + i) % 3];
            (k, i)
        })
        .collect()
}
