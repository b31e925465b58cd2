//! Turning pairs into text with a controlled expression position.
//!
//! A rendered string is `filler + prefix + [<EXPR>] + expression +
//! [</EXPR>] + suffix`. The position of an example is the character index
//! of the first digit of `a`; the filler length is solved from the target
//! position, so positions are exact rather than approximate.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::Stream;
use crate::task_data::Pair;
use crate::tokenizer::{Vocabulary, EXPR_CLOSE, EXPR_OPEN, MAX_LEN};

const BUILTIN_TEMPLATES: &str = include_str!("../assets/templates.txt");

/// Resampling budget for infeasible or duplicate draws.
pub const MAX_RESAMPLES: usize = 100;

/// Largest position any curriculum stage or protocol asks for.
pub const MAX_POSITION: usize = 70;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("template `{template}` cannot place the expression at position {target}")]
    Infeasible { template: String, target: usize },
    #[error("could not draw {k} distinct variants after {MAX_RESAMPLES} resamples")]
    CannotDiversify { k: usize },
    #[error("bad position range [{lo}, {hi}]")]
    Range { lo: usize, hi: usize },
    #[error("bad template mixture: {0}")]
    Mixture(String),
    #[error("template registry line {line}: {msg}")]
    Registry { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Padding,
    Natural,
    Mixed,
    OodQuestion,
    OodCommand,
}

impl Family {
    pub const TRAINING: [Family; 3] = [Family::Padding, Family::Natural, Family::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Family::Padding => "padding",
            Family::Natural => "natural",
            Family::Mixed => "mixed",
            Family::OodQuestion => "ood-question",
            Family::OodCommand => "ood-command",
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, Family::OodQuestion | Family::OodCommand)
    }

    fn parse(s: &str) -> Option<Self> {
        [
            Family::Padding,
            Family::Natural,
            Family::Mixed,
            Family::OodQuestion,
            Family::OodCommand,
        ]
        .into_iter()
        .find(|f| f.name() == s)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Words,
    Spaces,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub family: Family,
    pub fill: Fill,
    pub prefix: String,
    /// Contains `{a}` then `{b}`, each exactly once.
    pub expression: String,
    pub suffix: String,
}

impl Template {
    /// Index of the first digit of `a` when no filler is added.
    fn natural_position(&self, anchored: bool) -> usize {
        let slot = self.expression.find("{a}").expect("validated");
        self.prefix.chars().count()
            + if anchored { EXPR_OPEN.len() } else { 0 }
            + self.expression[..slot].chars().count()
    }

    fn expression_text(&self, pair: &Pair) -> String {
        self.expression
            .replace("{a}", &pair.a.to_string())
            .replace("{b}", &pair.b.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedExample {
    pub pair: Pair,
    pub text: String,
    pub position: usize,
    pub template_id: String,
    pub family: Family,
    pub anchored: bool,
    pub variant_group: u64,
}

/// Inclusive range of target positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionRange {
    pub lo: usize,
    pub hi: usize,
}

impl PositionRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self, RenderError> {
        if lo > hi || hi > MAX_POSITION {
            return Err(RenderError::Range { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn fixed(at: usize) -> Self {
        Self { lo: at, hi: at }
    }

    pub fn contains(&self, p: usize) -> bool {
        (self.lo..=self.hi).contains(&p)
    }
}

/// Lowercase pseudo-words of exactly `n` characters, the last being a space.
pub fn word_filler(n: usize, rng: &mut Stream) -> String {
    let mut out = String::with_capacity(n);
    if n == 0 {
        return out;
    }
    fn word(len: usize, out: &mut String, rng: &mut Stream) {
        for _ in 0..len {
            out.push((b'a' + rng.below(26) as u8) as char);
        }
    }
    let mut rem = n - 1;
    while rem > 0 {
        if rem <= 7 {
            word(rem, &mut out, rng);
            rem = 0;
        } else {
            let len = 2 + rng.below(5) as usize;
            word(len, &mut out, rng);
            out.push(' ');
            rem -= len + 1;
        }
    }
    out.push(' ');
    out
}

/// Renders `pair` so the first digit of `a` sits at `target`.
pub fn render(
    pair: &Pair,
    template: &Template,
    target: usize,
    anchored: bool,
    rng: &mut Stream,
) -> Result<RenderedExample, RenderError> {
    let infeasible = || RenderError::Infeasible {
        template: template.id.clone(),
        target,
    };
    let base = template.natural_position(anchored);
    let fill_len = target.checked_sub(base).ok_or_else(infeasible)?;
    let expr = template.expression_text(pair);
    let total = fill_len
        + template.prefix.chars().count()
        + expr.chars().count()
        + template.suffix.chars().count()
        + if anchored { EXPR_OPEN.len() + EXPR_CLOSE.len() } else { 0 };
    if total > MAX_LEN {
        return Err(infeasible());
    }
    let filler = match template.fill {
        _ if fill_len == 0 => String::new(),
        Fill::None => return Err(infeasible()),
        Fill::Spaces => " ".repeat(fill_len),
        Fill::Words => word_filler(fill_len, rng),
    };
    let mut text = String::with_capacity(total);
    text.push_str(&filler);
    text.push_str(&template.prefix);
    if anchored {
        text.push_str(EXPR_OPEN);
    }
    text.push_str(&expr);
    if anchored {
        text.push_str(EXPR_CLOSE);
    }
    text.push_str(&template.suffix);
    Ok(RenderedExample {
        pair: *pair,
        text,
        position: target,
        template_id: template.id.clone(),
        family: template.family,
        anchored,
        variant_group: 0,
    })
}

/// Weighted groups of templates; a draw picks a group by weight, then a
/// template uniformly within it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    groups: Vec<(f64, Vec<Template>)>,
}

impl Mixture {
    pub fn new(groups: Vec<(f64, Vec<Template>)>) -> Result<Self, RenderError> {
        if groups.is_empty() || groups.iter().any(|(w, t)| t.is_empty() || !(*w >= 0.0)) {
            return Err(RenderError::Mixture("empty group or negative weight".into()));
        }
        let total: f64 = groups.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RenderError::Mixture(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { groups })
    }

    pub fn single(template: Template) -> Self {
        Self {
            groups: vec![(1.0, vec![template])],
        }
    }

    /// One group per family, holding that family's registry templates.
    pub fn by_family(registry: &TemplateRegistry, weights: &[(Family, f64)]) -> Result<Self, RenderError> {
        Self::new(
            weights
                .iter()
                .map(|&(f, w)| (w, registry.family(f).cloned().collect()))
                .collect(),
        )
    }

    pub fn templates(&self) -> impl Iterator<Item = &Template> {
        self.groups.iter().flat_map(|(_, t)| t)
    }

    pub fn draw(&self, rng: &mut Stream) -> &Template {
        let weights: Vec<f64> = self.groups.iter().map(|(w, _)| *w).collect();
        let group = &self.groups[rng.weighted(&weights)].1;
        &group[rng.below(group.len() as u64) as usize]
    }
}

/// Renders `k` variants of one pair, pairwise distinct in
/// (position, template). Infeasible and duplicate draws are resampled.
pub fn render_variants(
    pair: &Pair,
    k: usize,
    range: PositionRange,
    mixture: &Mixture,
    anchored: bool,
    group: u64,
    rng: &mut Stream,
) -> Result<Vec<RenderedExample>, RenderError> {
    let mut out: Vec<RenderedExample> = Vec::with_capacity(k);
    let mut failures = 0;
    while out.len() < k {
        let template = mixture.draw(rng);
        let target = rng.inclusive(range.lo, range.hi);
        let duplicate = out
            .iter()
            .any(|v| v.position == target && v.template_id == template.id);
        let rendered = if duplicate {
            None
        } else {
            render(pair, template, target, anchored, rng).ok()
        };
        match rendered {
            Some(mut ex) => {
                ex.variant_group = group;
                out.push(ex);
            }
            None => {
                failures += 1;
                if failures > MAX_RESAMPLES {
                    return Err(RenderError::CannotDiversify { k });
                }
            }
        }
    }
    Ok(out)
}

/// Renders at a position drawn from `range`, redrawing the position when the
/// template cannot reach it.
pub fn render_in_range(
    pair: &Pair,
    template: &Template,
    range: PositionRange,
    anchored: bool,
    rng: &mut Stream,
) -> Result<RenderedExample, RenderError> {
    let mut last = None;
    for _ in 0..=MAX_RESAMPLES {
        let target = rng.inclusive(range.lo, range.hi);
        match render(pair, template, target, anchored, rng) {
            Ok(ex) => return Ok(ex),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// The parsed, validated template registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: Vec<Template>,
    source: String,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATES, &Vocabulary::builtin()).expect("bundled registry is valid")
    }

    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self, RenderError> {
        let err = |line: usize, msg: String| RenderError::Registry { line, msg };
        let mut templates: Vec<Template> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('|').collect();
            let [id, family, fill, prefix, expression, suffix] = fields[..] else {
                return Err(err(n, format!("expected 6 `|`-separated fields, got {}", fields.len())));
            };
            let id = id.trim();
            if id.is_empty() || templates.iter().any(|t| t.id == id) {
                return Err(err(n, format!("empty or duplicate id `{id}`")));
            }
            let family = Family::parse(family.trim())
                .ok_or_else(|| err(n, format!("unknown family `{family}`")))?;
            let fill = match fill.trim() {
                "words" => Fill::Words,
                "spaces" => Fill::Spaces,
                "none" => Fill::None,
                other => return Err(err(n, format!("unknown fill `{other}`"))),
            };
            let (a, b) = (expression.find("{a}"), expression.find("{b}"));
            match (a, b) {
                (Some(a), Some(b))
                    if a < b
                        && expression.matches("{a}").count() == 1
                        && expression.matches("{b}").count() == 1 => {}
                _ => return Err(err(n, "expression needs `{a}` before `{b}`, once each".into())),
            }
            let literal = expression.replace("{a}", "").replace("{b}", "");
            for (what, s) in [("prefix", prefix), ("expression", literal.as_str()), ("suffix", suffix)] {
                if let Some(c) = s
                    .chars()
                    .find(|&c| c.is_ascii_digit() || !vocab.contains_char(c))
                {
                    return Err(err(n, format!("{what} contains unusable character {c:?}")));
                }
            }
            if family.is_ood() && prefix.trim().is_empty() {
                return Err(err(n, "held-out templates need a phrase prefix".into()));
            }
            templates.push(Template {
                id: id.to_string(),
                family,
                fill,
                prefix: prefix.to_string(),
                expression: expression.to_string(),
                suffix: suffix.to_string(),
            });
        }
        let registry = Self {
            templates,
            source: text.to_string(),
        };
        registry.check_disjoint()?;
        Ok(registry)
    }

    /// Held-out templates must not reuse a training prefix phrase or a
    /// training (prefix, suffix) frame. Bare punctuation suffixes may repeat.
    fn check_disjoint(&self) -> Result<(), RenderError> {
        let training: Vec<&Template> = self.training().collect();
        for t in self.templates.iter().filter(|t| t.family.is_ood()) {
            let reused = training.iter().any(|u| {
                (!u.prefix.trim().is_empty() && u.prefix.trim() == t.prefix.trim())
                    || (u.prefix == t.prefix && u.suffix == t.suffix)
            });
            if reused {
                return Err(RenderError::Registry {
                    line: 0,
                    msg: format!("held-out template `{}` reuses training phrasing", t.id),
                });
            }
        }
        Ok(())
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn family(&self, family: Family) -> impl Iterator<Item = &Template> {
        self.templates.iter().filter(move |t| t.family == family)
    }

    pub fn training(&self) -> impl Iterator<Item = &Template> {
        self.templates.iter().filter(|t| !t.family.is_ood())
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.source.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodCategory {
    Question,
    Command,
}

/// The held-out template set for one category.
pub fn ood_templates(registry: &TemplateRegistry, category: OodCategory) -> Vec<Template> {
    let family = match category {
        OodCategory::Question => Family::OodQuestion,
        OodCategory::Command => Family::OodCommand,
    };
    registry.family(family).cloned().collect()
}

/// Index of the first digit in `text`, found by a plain character scan.
pub fn first_digit(text: &str) -> Option<usize> {
    text.chars().position(|c| c.is_ascii_digit())
}
