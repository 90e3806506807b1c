// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic scenes and their token sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::weights::ToyWeights;
use crate::error::{Result, StidError};
use crate::trace::{LayerActivations, Labels, ObjectLabel, RoleKind, TokenRole};
use crate::vector;

/// Function words used by the query templates.
pub const TEMPLATE_WORDS: [&str; 12] = [
    "Is", "the", "to", "or", "of", "?", "Answer", ":", "there", "a", "Does", "appear",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    /// "Is S to the left or right of R?"
    SpatialLr,
    /// "Is S above or below R?"
    SpatialAb,
    /// "Is there a S?"
    Presence,
    /// "Does S appear before or after R?"
    TemporalBa,
}

impl QueryKind {
    /// The two answer candidates compared by this query.
    pub fn candidates(self) -> (&'static str, &'static str) {
        match self {
            QueryKind::SpatialLr => ("left", "right"),
            QueryKind::SpatialAb => ("above", "below"),
            QueryKind::Presence => ("yes", "no"),
            QueryKind::TemporalBa => ("before", "after"),
        }
    }

    pub fn needs_reference(self) -> bool {
        !matches!(self, QueryKind::Presence)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub object: String,
    pub cell: (usize, usize),
    #[serde(default)]
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub kind: QueryKind,
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub placements: Vec<Placement>,
    pub query: Query,
    /// Optional color tag per object name.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<(String, String)>,
    /// Seed for patch noise and positional corruption.
    #[serde(default)]
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn presence(object: &str, cell: (usize, usize), frame: usize, noise_seed: u64) -> Self {
        SceneSpec {
            placements: vec![Placement {
                object: object.into(),
                cell,
                frame,
            }],
            query: Query {
                kind: QueryKind::Presence,
                subject: object.into(),
                reference: None,
            },
            attributes: Vec::new(),
            noise_seed,
        }
    }

    pub fn pair(
        kind: QueryKind,
        subject: (&str, (usize, usize), usize),
        reference: (&str, (usize, usize), usize),
        noise_seed: u64,
    ) -> Self {
        SceneSpec {
            placements: vec![
                Placement {
                    object: subject.0.into(),
                    cell: subject.1,
                    frame: subject.2,
                },
                Placement {
                    object: reference.0.into(),
                    cell: reference.1,
                    frame: reference.2,
                },
            ],
            query: Query {
                kind,
                subject: subject.0.into(),
                reference: Some(reference.0.into()),
            },
            attributes: Vec::new(),
            noise_seed,
        }
    }

    pub fn placement(&self, object: &str) -> Option<&Placement> {
        self.placements.iter().find(|p| p.object == object)
    }

    /// Horizontal mirror: column `j -> m-1-j`.
    pub fn mirrored(&self, m: usize) -> SceneSpec {
        let mut out = self.clone();
        for p in &mut out.placements {
            p.cell.1 = m - 1 - p.cell.1;
        }
        out
    }

    /// Vertical flip: row `i -> m-1-i`.
    pub fn flipped(&self, m: usize) -> SceneSpec {
        let mut out = self.clone();
        for p in &mut out.placements {
            p.cell.0 = m - 1 - p.cell.0;
        }
        out
    }

    /// Temporal reversal: frame `t -> F-1-t`.
    pub fn reversed(&self, frames: usize) -> SceneSpec {
        let mut out = self.clone();
        for p in &mut out.placements {
            p.frame = frames - 1 - p.frame;
        }
        out
    }

    /// The mirror appropriate to the query axis.
    pub fn counterpart(&self, m: usize, frames: usize) -> SceneSpec {
        match self.query.kind {
            QueryKind::SpatialLr | QueryKind::Presence => self.mirrored(m),
            QueryKind::SpatialAb => self.flipped(m),
            QueryKind::TemporalBa => self.reversed(frames),
        }
    }

    /// Ground-truth answer, `None` when the geometry does not decide it.
    pub fn ground_truth(&self) -> Option<&'static str> {
        let (a, b) = self.query.kind.candidates();
        let subject = self.placement(&self.query.subject);
        if self.query.kind == QueryKind::Presence {
            return Some(if subject.is_some() { a } else { b });
        }
        let subject = subject?;
        let reference = self.placement(self.query.reference.as_deref()?)?;
        let (s, r) = match self.query.kind {
            QueryKind::SpatialLr => (subject.cell.1, reference.cell.1),
            QueryKind::SpatialAb => (subject.cell.0, reference.cell.0),
            QueryKind::TemporalBa => (subject.frame, reference.frame),
            QueryKind::Presence => unreachable!(),
        };
        match s.cmp(&r) {
            std::cmp::Ordering::Less => Some(a),
            std::cmp::Ordering::Greater => Some(b),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn validate(&self, weights: &ToyWeights) -> Result<()> {
        let c = &weights.config;
        let mut occupied = std::collections::BTreeSet::new();
        for p in &self.placements {
            if !weights.content.contains_key(&p.object) {
                return Err(StidError::InvalidArgument(format!("unknown object `{}`", p.object)));
            }
            if p.cell.0 >= c.m || p.cell.1 >= c.m || p.frame >= c.frames {
                return Err(StidError::InvalidArgument(format!(
                    "placement of `{}` outside the {}x{}x{} grid",
                    p.object, c.m, c.m, c.frames
                )));
            }
            if !occupied.insert((p.frame, p.cell)) {
                return Err(StidError::InvalidArgument(format!(
                    "two objects share cell {:?} in frame {}",
                    p.cell, p.frame
                )));
            }
        }
        let q = &self.query;
        if !weights.content.contains_key(&q.subject) {
            return Err(StidError::InvalidArgument(format!("unknown object `{}`", q.subject)));
        }
        if q.kind.needs_reference() {
            let r = q.reference.as_deref().ok_or_else(|| {
                StidError::InvalidArgument("relational query needs a reference".into())
            })?;
            for name in [q.subject.as_str(), r] {
                if self.placement(name).is_none() {
                    return Err(StidError::InvalidArgument(format!(
                        "queried object `{name}` is not placed"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Embedded token sequence ready for [`super::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub embeddings: LayerActivations,
    pub roles: Vec<TokenRole>,
    pub labels: Labels,
    pub query: QueryKind,
}

impl RenderedScene {
    pub fn readout_index(&self) -> usize {
        self.roles.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    None,
    Subject,
    Reference,
    Answer,
}

struct QueryToken {
    text: String,
    kind: RoleKind,
    object: Option<String>,
    last: bool,
    slot: Slot,
}

fn plain(text: &str, kind: RoleKind) -> QueryToken {
    QueryToken {
        text: text.into(),
        kind,
        object: None,
        last: true,
        slot: Slot::None,
    }
}

fn object_tokens(weights: &ToyWeights, name: &str, slot: Slot) -> Vec<QueryToken> {
    let pieces = weights
        .config
        .subwords
        .get(name)
        .cloned()
        .unwrap_or_else(|| vec![name.to_string()]);
    let n = pieces.len();
    pieces
        .into_iter()
        .enumerate()
        .map(|(k, text)| QueryToken {
            text,
            kind: RoleKind::ObjectWord,
            object: Some(name.to_string()),
            last: k + 1 == n,
            slot: if k + 1 == n { slot } else { Slot::None },
        })
        .collect()
}

fn query_tokens(weights: &ToyWeights, q: &Query) -> Vec<QueryToken> {
    use RoleKind::{SpatialWord, Text};
    let subj = || object_tokens(weights, &q.subject, Slot::Subject);
    let refr = || object_tokens(weights, q.reference.as_deref().unwrap_or(""), Slot::Reference);
    let mut t = Vec::new();
    match q.kind {
        QueryKind::SpatialLr | QueryKind::SpatialAb => {
            let (a, b) = q.kind.candidates();
            t.push(plain("Is", Text));
            t.push(plain("the", Text));
            t.extend(subj());
            if q.kind == QueryKind::SpatialLr {
                t.push(plain("to", Text));
                t.push(plain("the", Text));
            }
            t.push(plain(a, SpatialWord));
            t.push(plain("or", Text));
            t.push(plain(b, SpatialWord));
            if q.kind == QueryKind::SpatialLr {
                t.push(plain("of", Text));
            }
            t.push(plain("the", Text));
            t.extend(refr());
        }
        QueryKind::Presence => {
            t.push(plain("Is", Text));
            t.push(plain("there", Text));
            t.push(plain("a", Text));
            t.extend(subj());
        }
        QueryKind::TemporalBa => {
            t.push(plain("Does", Text));
            t.extend(subj());
            t.push(plain("appear", Text));
            t.push(plain("before", SpatialWord));
            t.push(plain("or", Text));
            t.push(plain("after", SpatialWord));
            t.extend(refr());
        }
    }
    t.push(plain("?", Text));
    t.push(plain("Answer", Text));
    let mut last = plain(":", Text);
    last.slot = Slot::Answer;
    t.push(last);
    t
}

fn color_vector(weights: &ToyWeights, color: &str) -> Vec<f64> {
    // FNV-1a of the color name seeds a small content-space perturbation.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in color.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h ^ weights.config.seed);
    let mut v = vec![0.0; weights.config.d];
    for k in weights.layout.content.clone() {
        let z: f64 = rng.sample(StandardNormal);
        vector::axpy(&mut v, 0.2 * z / (weights.layout.content.len() as f64).sqrt(), &weights.layout.column(k));
    }
    v
}

/// Embed a scene: `F*m^2` patch tokens `s_p + P psi(p) + eps_p`, frame-major,
/// followed by the templated query.
pub fn render_scene(spec: &SceneSpec, weights: &ToyWeights) -> Result<RenderedScene> {
    spec.validate(weights)?;
    let c = &weights.config;
    let d = c.d;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.noise_seed ^ c.seed.rotate_left(32) ^ 0x5eed_0000_5eed,
    );

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut roles = Vec::new();
    for t in 0..c.frames {
        for i in 0..c.m {
            for j in 0..c.m {
                let here = spec
                    .placements
                    .iter()
                    .find(|p| p.frame == t && p.cell == (i, j));
                let mut s = match here {
                    Some(p) => weights.content[&p.object].clone(),
                    None => weights.background.clone(),
                };
                if let Some(p) = here {
                    if let Some((_, color)) = spec.attributes.iter().find(|(o, _)| *o == p.object) {
                        s = vector::add(&s, &color_vector(weights, color));
                    }
                }
                let mut psi = weights.psi_row((i, j), t).to_vec();
                if c.pos_noise > 0.0 {
                    for x in &mut psi {
                        let z: f64 = rng.sample(StandardNormal);
                        *x += c.pos_noise * z;
                    }
                }
                let mut x = s.clone();
                for (f, &value) in psi.iter().enumerate() {
                    for (r, xr) in x.iter_mut().enumerate().take(d) {
                        *xr += weights.p[(r, f)] * value;
                    }
                }
                if c.noise_scale > 0.0 {
                    let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let n = vector::norm(&dir);
                    let u: f64 = rng.random();
                    let target = c.noise_scale * vector::norm(&s) * u;
                    vector::axpy(&mut x, target / n, &dir);
                }
                rows.push(x);
                let frame = (c.frames > 1).then_some(t);
                roles.push(TokenRole::patch((i, j), frame));
            }
        }
    }

    for tok in query_tokens(weights, &spec.query) {
        let ident = match (&tok.object, tok.last) {
            (Some(name), true) => weights.embeddings.get(name),
            _ => weights.embeddings.get(&tok.text),
        }
        .ok_or_else(|| StidError::InvalidArgument(format!("no embedding for `{}`", tok.text)))?;
        let mut x = vector::add(ident, &weights.role_text);
        match tok.slot {
            Slot::Subject => vector::axpy(&mut x, 1.0, &weights.role_subject),
            Slot::Reference => vector::axpy(&mut x, 1.0, &weights.role_reference),
            Slot::Answer => {
                vector::axpy(&mut x, 1.0, &weights.role_answer);
                // Presence bias: an absent object leaves the answer at "no".
                vector::axpy(&mut x, -0.5, &weights.layout.column(weights.layout.fg_out));
            }
            Slot::None => {}
        }
        if tok.kind == RoleKind::SpatialWord {
            // Tied embedding: spatial words carry their readout direction at
            // the scale of an edge-of-grid ID.
            if let Some(w) = weights.unembed_row(&tok.text) {
                let n = vector::norm(w);
                if n > 0.0 {
                    let reach = c.id_gain * (c.m as f64 - 1.0) / 2.0;
                    vector::axpy(&mut x, reach / n, w);
                }
            }
        }
        rows.push(x);
        roles.push(TokenRole {
            text: tok.text,
            kind: tok.kind,
            cell: None,
            frame: None,
            object_name: tok.object,
            subword_last: tok.last,
        });
    }

    let seq = rows.len();
    let data: Vec<f32> = rows.iter().flat_map(|r| vector::to_f32(r)).collect();
    let embeddings = LayerActivations::new(seq, d, data)?;
    let labels = Labels {
        objects: spec
            .placements
            .iter()
            .map(|p| ObjectLabel {
                name: p.object.clone(),
                i: p.cell.0,
                j: p.cell.1,
                frame: (c.frames > 1).then_some(p.frame),
            })
            .collect(),
        gt_answer: spec.ground_truth().unwrap_or("none").to_string(),
    };
    Ok(RenderedScene {
        embeddings,
        roles,
        labels,
        query: spec.query.kind,
    })
}
