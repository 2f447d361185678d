//! Prompt schema and sequence layouts.
//!
//! Every task pairs one canonical instruction sentence with a task-specific
//! condition. Layouts are fixed-width per task (conditions and name lists
//! pad to configured widths) so token positions are stable across samples.

use super::vocab::{Special, TokenClass, Vocabulary, TASK_SENTENCES};
use super::LvlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ClassSeg,
    ReferringSeg,
    ReasoningSeg,
    InteractiveSeg,
    Generation,
    Editing,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::ClassSeg,
        TaskKind::ReferringSeg,
        TaskKind::ReasoningSeg,
        TaskKind::InteractiveSeg,
        TaskKind::Generation,
        TaskKind::Editing,
    ];

    pub fn instruction(self) -> &'static str {
        match self {
            TaskKind::ClassSeg => TASK_SENTENCES[0],
            TaskKind::ReferringSeg => TASK_SENTENCES[1],
            TaskKind::ReasoningSeg => TASK_SENTENCES[2],
            TaskKind::InteractiveSeg => TASK_SENTENCES[3],
            TaskKind::Generation => TASK_SENTENCES[4],
            TaskKind::Editing => TASK_SENTENCES[5],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ClassSeg => "class_seg",
            TaskKind::ReferringSeg => "referring_seg",
            TaskKind::ReasoningSeg => "reasoning_seg",
            TaskKind::InteractiveSeg => "interactive_seg",
            TaskKind::Generation => "generation",
            TaskKind::Editing => "editing",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn has_image(self) -> bool {
        !matches!(self, TaskKind::Generation)
    }

    /// Segmentation-only tasks stop after the mask tokens.
    pub fn emits_visual_tokens(self) -> bool {
        matches!(self, TaskKind::Generation | TaskKind::Editing)
    }

    pub fn emits_masks(self) -> bool {
        !matches!(self, TaskKind::Generation)
    }
}

#[derive(Debug, Clone)]
pub enum Condition {
    Text(String),
    /// Pooled region feature for interactive segmentation.
    Region(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct PromptSchema {
    pub task: TaskKind,
    pub condition: Condition,
}

impl PromptSchema {
    pub fn text(task: TaskKind, condition: &str) -> Self {
        Self {
            task,
            condition: Condition::Text(condition.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Image,
    Name,
    MaskToken,
    SemVis,
    PixVis,
}

/// Token ids plus per-position roles and the feature splice points.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub task: TaskKind,
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
    /// Start of the image-placeholder block and its length.
    pub img_start: usize,
    pub img_len: usize,
    /// Position of the pooled-region condition placeholder, if any.
    pub region_pos: Option<usize>,
    /// Length of the prompt prefix (everything before generated output).
    pub prefix_len: usize,
    pub region_feature: Option<Vec<f64>>,
    /// Start of the padded condition segment and the unpadded token count.
    pub cond_start: usize,
    pub cond_tokens: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_token_positions(&self) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&i| self.roles[i] == Role::MaskToken)
            .collect()
    }

    /// Phase ordering invariant: prompt/image, then names, then mask tokens,
    /// then optionally semantic then pixel visual tokens.
    pub fn check_phase_order(&self) -> bool {
        let rank = |r: Role| match r {
            Role::Prompt | Role::Image => 0,
            Role::Name => 1,
            Role::MaskToken => 2,
            Role::SemVis => 3,
            Role::PixVis => 4,
        };
        let mut last = 0;
        let mut seen_past_prompt = false;
        for &r in &self.roles {
            let k = rank(r);
            if k == 0 {
                // prompt tokens may only appear before any phase content,
                // except the trailing EOS which is tagged Prompt
                if seen_past_prompt && last < 4 && r == Role::Image {
                    return false;
                }
                continue;
            }
            seen_past_prompt = true;
            if k < last {
                return false;
            }
            last = k;
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct LayoutConfig {
    /// Fixed width the condition text pads to.
    pub cond_pad: usize,
    /// Fixed width of the name list.
    pub name_pad: usize,
    pub n_eimg: usize,
    pub n_adapter: usize,
    /// X_T length for tasks that need full pixel detail (editing).
    pub n_xt_full: usize,
    /// X_T length for everything else.
    pub n_xt_pooled: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            cond_pad: 18,
            name_pad: 6,
            n_eimg: 64,
            n_adapter: 16,
            n_xt_full: 256,
            n_xt_pooled: 16,
        }
    }
}

impl LayoutConfig {
    pub fn xt_len(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Editing => self.n_xt_full,
            TaskKind::Generation => 0,
            _ => self.n_xt_pooled,
        }
    }

    pub fn img_len(&self, task: TaskKind) -> usize {
        if task.has_image() {
            self.n_eimg + self.xt_len(task) + self.n_adapter
        } else {
            0
        }
    }
}

/// Build the fixed prompt prefix: BOS, instruction, SEP, padded condition,
/// image placeholders.
pub fn build_prompt(
    schema: &PromptSchema,
    vocab: &Vocabulary,
    cfg: &LayoutConfig,
) -> Result<SequenceLayout, LvlmError> {
    let mut ids = vec![vocab.special(Special::Bos)];
    let instr = vocab
        .tokenize(schema.task.instruction())
        .map_err(LvlmError::UnknownWord)?;
    ids.extend(instr);
    ids.push(vocab.special(Special::Sep));

    let mut region_pos = None;
    let mut region_feature = None;
    let cond_start = ids.len();
    let cond_tokens;
    match (&schema.condition, schema.task) {
        (Condition::Region(feat), TaskKind::InteractiveSeg) => {
            region_pos = Some(ids.len());
            region_feature = Some(feat.clone());
            cond_tokens = 1;
            ids.push(vocab.special(Special::Img));
            for _ in 1..cfg.cond_pad {
                ids.push(vocab.special(Special::Pad));
            }
        }
        (Condition::Region(_), _) => {
            return Err(LvlmError::Validation(
                "region condition is only valid for interactive_seg".into(),
            ));
        }
        (Condition::Text(_), TaskKind::InteractiveSeg) => {
            return Err(LvlmError::Validation(
                "interactive_seg requires a region condition".into(),
            ));
        }
        (Condition::Text(t), _) => {
            if t.trim().is_empty() {
                return Err(LvlmError::Validation("empty text condition".into()));
            }
            let toks = vocab.tokenize(t).map_err(LvlmError::UnknownWord)?;
            if toks.len() > cfg.cond_pad {
                return Err(LvlmError::Validation(format!(
                    "condition longer than {} tokens",
                    cfg.cond_pad
                )));
            }
            cond_tokens = toks.len();
            ids.extend(&toks);
            for _ in toks.len()..cfg.cond_pad {
                ids.push(vocab.special(Special::Pad));
            }
        }
    }

    let img_start = ids.len();
    let img_len = cfg.img_len(schema.task);
    for _ in 0..img_len {
        ids.push(vocab.special(Special::Img));
    }
    let roles = vec![Role::Prompt; img_start]
        .into_iter()
        .chain(std::iter::repeat_n(Role::Image, img_len))
        .collect();
    let prefix_len = ids.len();
    Ok(SequenceLayout {
        task: schema.task,
        ids,
        roles,
        img_start,
        img_len,
        region_pos,
        prefix_len,
        region_feature,
        cond_start,
        cond_tokens,
    })
}

/// Append the teacher-forcing target: padded names, mask tokens, optional
/// visual phases, EOS. Returns per-position CE targets aligned so that
/// `target[i]` is the id expected at output position i (predicting token
/// i+1); positions without supervision hold `usize::MAX`.
pub struct TeacherForced {
    pub layout: SequenceLayout,
    pub ce_targets: Vec<usize>,
}

pub fn append_targets(
    mut layout: SequenceLayout,
    vocab: &Vocabulary,
    cfg: &LayoutConfig,
    names: &[String],
    sem_codes: Option<&[usize]>,
    pix_codes: Option<&[usize]>,
) -> Result<TeacherForced, LvlmError> {
    let mut gen_ids = Vec::new();
    let mut gen_roles = Vec::new();
    if layout.task.emits_masks() {
        let mut name_ids = Vec::new();
        for n in names {
            let toks = vocab.tokenize(n).map_err(LvlmError::UnknownWord)?;
            name_ids.extend(toks);
        }
        if name_ids.len() > cfg.name_pad {
            name_ids.truncate(cfg.name_pad);
        }
        while name_ids.len() < cfg.name_pad {
            name_ids.push(vocab.special(Special::Pad));
        }
        for id in name_ids {
            gen_ids.push(id);
            gen_roles.push(Role::Name);
        }
        for j in 0..vocab.n_seg {
            gen_ids.push(vocab.seg(j));
            gen_roles.push(Role::MaskToken);
        }
    }
    if layout.task.emits_visual_tokens() {
        let sem = sem_codes.ok_or_else(|| {
            LvlmError::Validation("visual task requires semantic codes".into())
        })?;
        let pix = pix_codes.ok_or_else(|| {
            LvlmError::Validation("visual task requires pixel codes".into())
        })?;
        gen_ids.push(vocab.special(Special::SemBegin));
        gen_roles.push(Role::Prompt);
        for &c in sem {
            gen_ids.push(vocab.sem_id(c));
            gen_roles.push(Role::SemVis);
        }
        gen_ids.push(vocab.special(Special::PixBegin));
        gen_roles.push(Role::Prompt);
        for &c in pix {
            gen_ids.push(vocab.pix_id(c));
            gen_roles.push(Role::PixVis);
        }
    }
    gen_ids.push(vocab.special(Special::Eos));
    gen_roles.push(Role::Prompt);

    // CE: output at position i predicts token i+1
    let mut ce = vec![usize::MAX; layout.ids.len() + gen_ids.len()];
    let base = layout.ids.len();
    for (k, &id) in gen_ids.iter().enumerate() {
        ce[base + k - 1] = id;
    }
    layout.ids.extend(&gen_ids);
    layout.roles.extend(&gen_roles);
    Ok(TeacherForced {
        layout,
        ce_targets: ce,
    })
}

/// Render a prompt schema as a plain-text record (same format family as the
/// corpus annotations).
pub fn render_schema(schema: &PromptSchema) -> String {
    match &schema.condition {
        Condition::Text(t) => format!("schema task={} text={t}\n", schema.task.name()),
        Condition::Region(v) => format!(
            "schema task={} region_dim={}\n",
            schema.task.name(),
            v.len()
        ),
    }
}

/// Parse the record form back (region conditions round-trip dimension only).
pub fn parse_schema(line: &str) -> Result<PromptSchema, LvlmError> {
    let rest = line
        .trim_end()
        .strip_prefix("schema ")
        .ok_or_else(|| LvlmError::Validation(format!("not a schema record: {line}")))?;
    let task_field = rest
        .split_whitespace()
        .find_map(|p| p.strip_prefix("task="))
        .ok_or_else(|| LvlmError::Validation("schema missing task".into()))?;
    let task = TaskKind::parse(task_field)
        .ok_or_else(|| LvlmError::Validation(format!("unknown task {task_field}")))?;
    if let Some((_, text)) = rest.split_once("text=") {
        Ok(PromptSchema::text(task, text))
    } else if let Some((_, dim)) = rest.split_once("region_dim=") {
        let d: usize = dim
            .trim()
            .parse()
            .map_err(|_| LvlmError::Validation("bad region_dim".into()))?;
        Ok(PromptSchema {
            task,
            condition: Condition::Region(vec![0.0; d]),
        })
    } else {
        Err(LvlmError::Validation("schema missing condition".into()))
    }
}

/// The token-class a role is allowed to carry, used by layout checks.
pub fn role_matches_class(vocab: &Vocabulary, role: Role, id: usize) -> bool {
    match (role, vocab.class_of(id)) {
        (Role::SemVis, TokenClass::Sem(_)) => true,
        (Role::PixVis, TokenClass::Pix(_)) => true,
        (Role::MaskToken, TokenClass::Seg(_)) => true,
        (Role::Name, TokenClass::Text | TokenClass::Special) => true,
        (Role::Prompt | Role::Image, TokenClass::Text | TokenClass::Special) => true,
        _ => false,
    }
}
